"""Episode sampling, the episodic training loop, and evaluation.

Training follows the episodic protocol: per episode, sample M classes,
embed support and query images as one batch, build per-class descriptor
pools, score queries with the cosine top-k rule, and step Adam on the
softmax cross-entropy over episode labels. Evaluation runs in eval mode
(running batch-norm statistics, no tape) and reports the mean accuracy
with a 95% confidence interval of 1.96 * sigma / sqrt(n).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .classifier import ClassPool, batch_logits
from .config import RunConfig
from .data import Dataset, Split
from .errors import ConfigurationError, DataError, DivergenceError
from .model import ModelParams, forward_batch, init_model, save_model
from .nn import cross_entropy
from .optim import AdamState, adam_step, halved_lr
from .tensor import Tensor, no_grad, reshape, take, transpose


@dataclass
class EpisodeSpec:
    """Shape of one M-way K-shot task."""

    ways: int = 5
    shots: int = 1
    queries: int = 15
    split: str = "test"

    def __post_init__(self):
        if self.ways < 2:
            raise ConfigurationError("an episode needs at least 2 ways")
        if self.shots < 1 or self.queries < 1:
            raise ConfigurationError("shots and queries must be >= 1")


@dataclass
class Episode:
    """Sampled image references; the label of a class is its position."""

    classes: list[str]
    support: list[list[int]]  # per class, image indices (len = shots)
    query: list[list[int]]  # per class, image indices (len = queries)

    def support_refs(self) -> list[tuple[str, int]]:
        return [(c, i) for c, idx in zip(self.classes, self.support) for i in idx]

    def query_refs(self) -> list[tuple[str, int]]:
        return [(c, i) for c, idx in zip(self.classes, self.query) for i in idx]

    def fingerprint(self) -> str:
        payload = json.dumps(
            [self.classes, self.support, self.query], sort_keys=True
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def sample_episode(split: Split, spec: EpisodeSpec,
                   rng: np.random.Generator) -> Episode:
    """Uniformly sample classes, then distinct images per class.

    The first ``shots`` sampled images of each class form the support
    set, the rest the query set, so the two are disjoint by construction.
    """
    if len(split.classes) < spec.ways:
        raise DataError(
            f"split {split.name!r} has {len(split.classes)} classes, "
            f"needs {spec.ways}"
        )
    need = spec.shots + spec.queries
    for name in split.classes:
        if split.class_size(name) < need:
            raise DataError(
                f"class {name!r} has {split.class_size(name)} images, "
                f"needs {need} (shots + queries)"
            )
    picked = rng.choice(len(split.classes), size=spec.ways, replace=False)
    classes, support, query = [], [], []
    for ci in picked:
        name = split.classes[int(ci)]
        idx = rng.choice(split.class_size(name), size=need, replace=False)
        classes.append(name)
        support.append([int(i) for i in idx[: spec.shots]])
        query.append([int(i) for i in idx[spec.shots :]])
    return Episode(classes, support, query)


def _gather_images(split: Split, refs: list[tuple[str, int]]) -> np.ndarray:
    return np.stack([split.images[c][i] for c, i in refs])


def _batch_descriptors(maps: Tensor) -> Tensor:
    """(B, D, H, W) maps -> (B, M, D) descriptor matrices (row-major cells)."""
    b, d, h, w = maps.shape
    return reshape(transpose(maps, (0, 2, 3, 1)), (b, h * w, d))


def _episode_pools(support_desc: Tensor, ways: int, shots: int) -> list[ClassPool]:
    _, m, d = support_desc.shape
    pools = []
    for ci in range(ways):
        rows = take(support_desc, np.arange(ci * shots, (ci + 1) * shots))
        pools.append(ClassPool.from_matrix(ci, reshape(rows, (shots * m, d))))
    return pools


@dataclass
class TrainConfig:
    """Episodic training schedule and episode shape."""

    episodes: int
    lr: float = 0.001
    halve_every: int = 100000
    k: int = 3
    seed: int = 0
    ways: int = 5
    shots: int = 1
    queries: int = 15
    temperature: float = 0.0  # 0 derives M (query descriptor count)
    bypass: bool = False
    val_episodes: int = 100
    val_queries: int = 5

    def __post_init__(self):
        if self.episodes < 0:
            raise ConfigurationError("episodes must be >= 0")
        for name in ("lr", "halve_every", "k", "ways", "shots", "queries"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")

    @classmethod
    def from_run_config(cls, rc: RunConfig) -> "TrainConfig":
        return cls(
            episodes=rc.episodes,
            lr=rc.lr,
            halve_every=rc.halve_every,
            k=rc.k,
            seed=rc.seed,
            ways=rc.ways,
            shots=rc.shots,
            queries=rc.train_queries,
            temperature=rc.temperature,
            bypass=rc.bypass,
            val_episodes=rc.val_episodes,
            val_queries=rc.val_queries,
        )


@dataclass
class TrainResult:
    model: ModelParams
    losses: list[float]
    accuracies: list[float]
    val_history: list[tuple[int, float]] = field(default_factory=list)
    best_val_accuracy: float = float("nan")


def train(run_config: RunConfig, dataset: Dataset, out_path=None,
          progress=None) -> TrainResult:
    """Train from scratch and (optionally) persist the checkpoint.

    Keeps the parameter snapshot with the best validation accuracy
    (validated every 10% of the run, 0 validations for 0 episodes);
    that snapshot is what gets persisted and returned.
    """
    cfg = TrainConfig.from_run_config(run_config)
    model = init_model(run_config.augment_config(), cfg.seed)
    result = run_training(model, dataset, cfg, progress=progress)
    if out_path is not None:
        save_model(out_path, result.model, run_config, cfg.episodes)
    return result


def run_training(model: ModelParams, dataset: Dataset, cfg: TrainConfig,
                 progress=None) -> TrainResult:
    train_split = dataset.split("train")
    spec = EpisodeSpec(cfg.ways, cfg.shots, cfg.queries, "train")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdamState(lr=cfg.lr)
    labels = np.repeat(np.arange(cfg.ways), cfg.queries)
    temperature = cfg.temperature if cfg.temperature > 0 else None

    losses: list[float] = []
    accs: list[float] = []
    val_history: list[tuple[int, float]] = []
    best_val = -1.0
    best_arrays: dict[str, np.ndarray] | None = None
    cadence = max(1, cfg.episodes // 10)

    for episode_index in range(cfg.episodes):
        state.lr = halved_lr(cfg.lr, episode_index, cfg.halve_every)
        episode = sample_episode(train_split, spec, rng)
        images = np.concatenate(
            [
                _gather_images(train_split, episode.support_refs()),
                _gather_images(train_split, episode.query_refs()),
            ]
        )
        maps = forward_batch(images, model, mode="train", bypass=cfg.bypass)
        desc = _batch_descriptors(maps)
        n_support = cfg.ways * cfg.shots
        support_desc = take(desc, np.arange(n_support))
        query_desc = take(desc, np.arange(n_support, desc.shape[0]))
        pools = _episode_pools(support_desc, cfg.ways, cfg.shots)
        logits = batch_logits(query_desc, pools, cfg.k, temperature)
        loss = cross_entropy(logits, labels)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise DivergenceError(
                f"non-finite loss at episode {episode_index} (lr={state.lr})"
            )
        model.zero_grads()
        loss.backward()
        adam_step(params, [p.grad for p in params], state)

        losses.append(loss_value)
        accs.append(float(np.mean(np.argmax(logits.data, axis=1) == labels)))
        if progress is not None and (episode_index + 1) % max(1, cadence // 2) == 0:
            progress(episode_index + 1, loss_value, accs[-1])

        if (episode_index + 1) % cadence == 0 and cfg.val_episodes > 0:
            val_spec = EpisodeSpec(cfg.ways, cfg.shots, cfg.val_queries, "val")
            report = evaluate(
                model, dataset, val_spec, n_episodes=cfg.val_episodes,
                k=cfg.k, seed=cfg.seed + 1 + episode_index,
                bypass=cfg.bypass, temperature=cfg.temperature,
            )
            val_history.append((episode_index + 1, report.mean))
            if report.mean > best_val:
                best_val = report.mean
                best_arrays = model.snapshot()

    if best_arrays is not None:
        model.load_arrays(best_arrays)
    return TrainResult(
        model=model,
        losses=losses,
        accuracies=accs,
        val_history=val_history,
        best_val_accuracy=best_val if best_val >= 0 else float("nan"),
    )


# -- evaluation -------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-episode accuracies with their mean and 95% CI half-width."""

    accuracies: list[float]
    mean: float
    ci95: float
    n: int
    k: int
    fingerprint: str
    dataset: str
    split: str
    ways: int
    shots: int
    queries: int
    seed: int
    bypass: bool
    train_dataset: str = ""
    episode_stream: str = ""

    def summary_dict(self) -> dict:
        return {
            "mean": self.mean,
            "ci95": self.ci95,
            "n": self.n,
            "k": self.k,
            "fingerprint": self.fingerprint,
            "dataset": self.dataset,
            "split": self.split,
            "ways": self.ways,
            "shots": self.shots,
            "queries": self.queries,
            "seed": self.seed,
            "bypass": self.bypass,
            "train_dataset": self.train_dataset,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary_dict(), sort_keys=True)

    def to_csv(self) -> str:
        lines = ["episode_index,accuracy"]
        lines += [f"{i},{a!r}" for i, a in enumerate(self.accuracies)]
        return "\n".join(lines) + "\n"


def _confidence_interval(accuracies: np.ndarray) -> float:
    if accuracies.size < 2:
        return 0.0
    return float(1.96 * accuracies.std(ddof=1) / np.sqrt(accuracies.size))


def evaluate(model: ModelParams, dataset: Dataset, spec: EpisodeSpec,
             n_episodes: int = 600, k: int = 3, seed: int = 0,
             bypass: bool = False, temperature: float = 0.0,
             model_fingerprint: str = "", train_dataset: str = "") -> EvalReport:
    """Accuracy over freshly sampled episodes; no parameter updates."""
    split = dataset.split(spec.split)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(spec.ways), spec.queries)
    temp = temperature if temperature > 0 else None
    accuracies = []
    stream = hashlib.sha256()
    with no_grad():
        for _ in range(n_episodes):
            episode = sample_episode(split, spec, rng)
            stream.update(episode.fingerprint().encode())
            images = np.concatenate(
                [
                    _gather_images(split, episode.support_refs()),
                    _gather_images(split, episode.query_refs()),
                ]
            )
            maps = forward_batch(images, model, mode="eval", bypass=bypass)
            desc = _batch_descriptors(maps)
            n_support = spec.ways * spec.shots
            pools = _episode_pools(
                take(desc, np.arange(n_support)), spec.ways, spec.shots
            )
            query_desc = take(desc, np.arange(n_support, desc.shape[0]))
            logits = batch_logits(query_desc, pools, k, temp)
            predicted = np.argmax(logits.data, axis=1)
            accuracies.append(float(np.mean(predicted == labels)))
    acc = np.array(accuracies)
    payload = {
        "model": model_fingerprint,
        "dataset": dataset.name,
        "split": spec.split,
        "ways": spec.ways,
        "shots": spec.shots,
        "queries": spec.queries,
        "n_episodes": n_episodes,
        "k": k,
        "seed": seed,
        "bypass": bypass,
        "temperature": temperature,
        "train_dataset": train_dataset,
    }
    fingerprint = hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode()
    ).hexdigest()
    return EvalReport(
        accuracies=accuracies,
        mean=float(acc.mean()) if acc.size else 0.0,
        ci95=_confidence_interval(acc),
        n=len(accuracies),
        k=k,
        fingerprint=fingerprint,
        dataset=dataset.name,
        split=spec.split,
        ways=spec.ways,
        shots=spec.shots,
        queries=spec.queries,
        seed=seed,
        bypass=bypass,
        train_dataset=train_dataset,
        episode_stream=stream.hexdigest()[:16],
    )


@dataclass
class SweepReport:
    rows: list[EvalReport]
    ks: list[int]
    spread: float  # max - min of the per-k mean accuracies

    def to_json(self) -> str:
        return json.dumps(
            {
                "ks": self.ks,
                "means": [r.mean for r in self.rows],
                "ci95s": [r.ci95 for r in self.rows],
                "spread": self.spread,
                "rows": [r.summary_dict() for r in self.rows],
            },
            sort_keys=True,
        )


def sweep_k(model: ModelParams, dataset: Dataset, spec: EpisodeSpec,
            ks: list[int], n_episodes: int = 600, seed: int = 0,
            bypass: bool = False, temperature: float = 0.0,
            model_fingerprint: str = "") -> SweepReport:
    """Evaluate at several k on identical episode streams (shared seed)."""
    if not ks:
        raise ConfigurationError("sweep_k needs at least one k")
    rows = []
    for k in ks:
        rows.append(
            evaluate(
                model, dataset, spec, n_episodes=n_episodes, k=k, seed=seed,
                bypass=bypass, temperature=temperature,
                model_fingerprint=model_fingerprint,
            )
        )
    streams = {r.episode_stream for r in rows}
    if len(streams) != 1:
        raise ConfigurationError("sweep rows diverged onto different episodes")
    means = [r.mean for r in rows]
    return SweepReport(rows=rows, ks=list(ks), spread=max(means) - min(means))


def cross_domain_eval(model: ModelParams, train_dataset_name: str,
                      eval_dataset: Dataset, spec: EpisodeSpec,
                      n_episodes: int = 600, k: int = 3, seed: int = 0,
                      bypass: bool = False, temperature: float = 0.0,
                      model_fingerprint: str = "") -> EvalReport:
    """Evaluate on a dataset other than the training one; both recorded."""
    return evaluate(
        model, eval_dataset, spec, n_episodes=n_episodes, k=k, seed=seed,
        bypass=bypass, temperature=temperature,
        model_fingerprint=model_fingerprint,
        train_dataset=train_dataset_name,
    )
