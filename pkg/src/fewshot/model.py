"""The full model bundle: embedder plus augmenter, with checkpoint I/O."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import AugmentConfig, AugmentParams, augment_batch, init_augment_params
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .embedder import EmbedderParams, embed_batch, init_embedder
from .errors import DataError
from .nn import BatchNormState
from .tensor import Tensor


@dataclass
class ModelParams:
    """All learnable arrays of the pipeline, ready for checkpointing."""

    embedder: EmbedderParams
    augmenter: AugmentParams
    augment_cfg: AugmentConfig

    def parameters(self) -> list[Tensor]:
        return self.embedder.tensors() + self.augmenter.tensors()

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- named array (de)serialisation ---------------------------------

    def to_arrays(self) -> dict[str, np.ndarray]:
        arrays: dict[str, np.ndarray] = {}
        for i, blk in enumerate(self.embedder.blocks):
            pre = f"embedder.block{i}."
            arrays[pre + "conv_w"] = blk.conv_w.data
            arrays[pre + "conv_b"] = blk.conv_b.data
            arrays[pre + "bn_gamma"] = blk.bn_gamma.data
            arrays[pre + "bn_beta"] = blk.bn_beta.data
            arrays[pre + "bn_running_mean"] = blk.bn_state.mean
            arrays[pre + "bn_running_var"] = blk.bn_state.var
        aug = self.augmenter
        arrays["augment.patch_proj"] = aug.patch_proj.data
        arrays["augment.pos_table"] = aug.pos_table.data
        for i, blk in enumerate(aug.blocks):
            pre = f"augment.block{i}."
            arrays[pre + "ln1_gamma"] = blk.ln1_gamma.data
            arrays[pre + "ln1_beta"] = blk.ln1_beta.data
            for name in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"):
                arrays[pre + "attn." + name] = getattr(blk.attn, name).data
            arrays[pre + "ln2_gamma"] = blk.ln2_gamma.data
            arrays[pre + "ln2_beta"] = blk.ln2_beta.data
            arrays[pre + "mlp_w1"] = blk.mlp_w1.data
            arrays[pre + "mlp_b1"] = blk.mlp_b1.data
            arrays[pre + "mlp_w2"] = blk.mlp_w2.data
            arrays[pre + "mlp_b2"] = blk.mlp_b2.data
        arrays["augment.readout_gamma"] = aug.readout_gamma.data
        arrays["augment.readout_beta"] = aug.readout_beta.data
        arrays["augment.ctx_proj"] = aug.ctx_proj.data
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        mine = self.to_arrays()
        missing = set(mine) - set(arrays)
        if missing:
            raise DataError(
                "checkpoint is missing arrays: " + ", ".join(sorted(missing)[:5])
            )
        for i, blk in enumerate(self.embedder.blocks):
            pre = f"embedder.block{i}."
            blk.conv_w.data = np.array(arrays[pre + "conv_w"])
            blk.conv_b.data = np.array(arrays[pre + "conv_b"])
            blk.bn_gamma.data = np.array(arrays[pre + "bn_gamma"])
            blk.bn_beta.data = np.array(arrays[pre + "bn_beta"])
            blk.bn_state = BatchNormState(
                mean=np.array(arrays[pre + "bn_running_mean"]),
                var=np.array(arrays[pre + "bn_running_var"]),
            )
        aug = self.augmenter
        aug.patch_proj.data = np.array(arrays["augment.patch_proj"])
        aug.pos_table.data = np.array(arrays["augment.pos_table"])
        for i, blk in enumerate(aug.blocks):
            pre = f"augment.block{i}."
            blk.ln1_gamma.data = np.array(arrays[pre + "ln1_gamma"])
            blk.ln1_beta.data = np.array(arrays[pre + "ln1_beta"])
            for name in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"):
                getattr(blk.attn, name).data = np.array(arrays[pre + "attn." + name])
            blk.ln2_gamma.data = np.array(arrays[pre + "ln2_gamma"])
            blk.ln2_beta.data = np.array(arrays[pre + "ln2_beta"])
            blk.mlp_w1.data = np.array(arrays[pre + "mlp_w1"])
            blk.mlp_b1.data = np.array(arrays[pre + "mlp_b1"])
            blk.mlp_w2.data = np.array(arrays[pre + "mlp_w2"])
            blk.mlp_b2.data = np.array(arrays[pre + "mlp_b2"])
        aug.readout_gamma.data = np.array(arrays["augment.readout_gamma"])
        aug.readout_beta.data = np.array(arrays["augment.readout_beta"])
        aug.ctx_proj.data = np.array(arrays["augment.ctx_proj"])

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.to_arrays().items()}


def init_model(cfg: AugmentConfig, seed: int, in_channels: int = 3) -> ModelParams:
    """Deterministic initialisation; embedder and augmenter use split seeds."""
    seeds = np.random.SeedSequence(seed).spawn(2)
    emb_seed = int(seeds[0].generate_state(1)[0])
    aug_seed = int(seeds[1].generate_state(1)[0])
    return ModelParams(
        embedder=init_embedder(emb_seed, in_channels),
        augmenter=init_augment_params(cfg, aug_seed),
        augment_cfg=cfg,
    )


def forward_batch(images, model: ModelParams, mode: str = "train",
                  bypass: bool = False) -> Tensor:
    """images (N, 3, S, S) -> augmented descriptor maps (N, D, G, G)."""
    maps = embed_batch(images, model.embedder, mode)
    return augment_batch(maps, model.augmenter, model.augment_cfg, bypass)


def save_model(path, model: ModelParams, run_config: RunConfig,
               episodes_trained: int) -> None:
    manifest = {
        "config": run_config.to_dict(),
        "fingerprint": run_config.fingerprint(),
        "episodes_trained": episodes_trained,
    }
    save_checkpoint(path, model.to_arrays(), manifest)


def load_model(path) -> tuple[ModelParams, RunConfig, dict]:
    arrays, manifest = load_checkpoint(path)
    run_config = RunConfig.from_dict(manifest["config"])
    model = init_model(run_config.augment_config(), run_config.seed)
    model.load_arrays(arrays)
    return model, run_config, manifest
