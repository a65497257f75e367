"""Dataset ingestion and the synthetic dataset generator.

A dataset on disk is ``root/{train,val,test}/<class>/<image>.png`` with
class directories disjoint across splits (checked), optionally pinned
by a ``manifest.json`` mapping class name to split. Images are decoded
to RGB, resized to the configured side, scaled to [0, 1] and normalised
per channel with statistics computed on the train split only.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError, UsageError

SPLIT_NAMES = ("train", "val", "test")


# -- resizing ---------------------------------------------------------------


def _sample_grid(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize_bilinear(img: np.ndarray, side: int) -> np.ndarray:
    """Edge-clamped bilinear resize of an (H, W, C) float image."""
    h, w = img.shape[:2]
    if (h, w) == (side, side):
        return img
    ys = _sample_grid(h, side)
    xs = _sample_grid(w, side)
    y0f, x0f = np.floor(ys), np.floor(xs)
    fy, fx = ys - y0f, xs - x0f
    y0 = np.clip(y0f.astype(int), 0, h - 1)
    y1 = np.clip(y0f.astype(int) + 1, 0, h - 1)
    x0 = np.clip(x0f.astype(int), 0, w - 1)
    x1 = np.clip(x0f.astype(int) + 1, 0, w - 1)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    return (
        img[y0][:, x0] * (1 - fy) * (1 - fx)
        + img[y1][:, x0] * fy * (1 - fx)
        + img[y0][:, x1] * (1 - fy) * fx
        + img[y1][:, x1] * fy * fx
    )


def resize_nearest(img: np.ndarray, side: int) -> np.ndarray:
    h, w = img.shape[:2]
    if (h, w) == (side, side):
        return img
    ys = np.clip(np.floor(_sample_grid(h, side) + 0.5).astype(int), 0, h - 1)
    xs = np.clip(np.floor(_sample_grid(w, side) + 0.5).astype(int), 0, w - 1)
    return img[ys][:, xs]


_RESIZERS = {"bilinear": resize_bilinear, "nearest": resize_nearest}


# -- in-memory dataset ------------------------------------------------------


@dataclass
class Split:
    name: str
    classes: list[str]
    images: dict[str, np.ndarray]  # class -> (n, 3, S, S) normalised

    def class_size(self, name: str) -> int:
        return self.images[name].shape[0]


@dataclass
class Dataset:
    name: str
    side: int
    mean: np.ndarray  # (3,)
    std: np.ndarray  # (3,)
    splits: dict[str, Split] = field(default_factory=dict)

    def split(self, name: str) -> Split:
        if name not in self.splits:
            raise DataError(f"dataset {self.name} has no split {name!r}")
        return self.splits[name]


def _decode_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64) / 255.0
    except Exception as exc:
        raise DataError(f"cannot decode image file {path}") from exc
    return arr


def _scan_layout(root: Path) -> dict[str, list[Path]]:
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    layout: dict[str, list[Path]] = {}
    for split in SPLIT_NAMES:
        split_dir = root / split
        if not split_dir.is_dir():
            raise DataError(f"dataset {root} is missing the {split}/ directory")
        class_dirs = sorted(p for p in split_dir.iterdir() if p.is_dir())
        if not class_dirs:
            raise DataError(f"split {split} of {root} contains no class directories")
        layout[split] = class_dirs
    overlaps = set()
    seen: dict[str, str] = {}
    for split, dirs in layout.items():
        for d in dirs:
            if d.name in seen:
                overlaps.add(d.name)
            seen[d.name] = split
    if overlaps:
        raise DataError(
            "class directories appear in more than one split: "
            + ", ".join(sorted(overlaps))
        )
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        for split, dirs in layout.items():
            for d in dirs:
                if manifest.get(d.name) != split:
                    raise DataError(
                        f"manifest assigns class {d.name} to "
                        f"{manifest.get(d.name)!r} but it sits in {split}/"
                    )
    return layout


def load_dataset(root, side: int, resize: str = "bilinear") -> Dataset:
    """Load, resize and normalise a dataset tree.

    Normalisation statistics come from the train split only; the same
    statistics are applied to val and test.
    """
    root = Path(root)
    if resize not in _RESIZERS:
        raise ConfigurationError(f"unknown resize method {resize!r}")
    resizer = _RESIZERS[resize]
    layout = _scan_layout(root)

    raw: dict[str, dict[str, np.ndarray]] = {}
    for split, class_dirs in layout.items():
        per_class: dict[str, np.ndarray] = {}
        for class_dir in class_dirs:
            files = sorted(p for p in class_dir.iterdir() if p.is_file())
            if not files:
                raise DataError(f"class directory {class_dir} contains no images")
            imgs = np.stack(
                [resizer(_decode_image(p), side).transpose(2, 0, 1) for p in files]
            )
            per_class[class_dir.name] = imgs
        raw[split] = per_class

    train_pixels = np.concatenate(
        [imgs.transpose(1, 0, 2, 3).reshape(3, -1) for imgs in raw["train"].values()],
        axis=1,
    )
    mean = train_pixels.mean(axis=1)
    std = np.maximum(train_pixels.std(axis=1), 1e-8)

    splits = {}
    for split, per_class in raw.items():
        normalised = {
            name: (imgs - mean[:, None, None]) / std[:, None, None]
            for name, imgs in per_class.items()
        }
        splits[split] = Split(split, sorted(normalised), normalised)
    return Dataset(name=root.name, side=side, mean=mean, std=std, splits=splits)


# -- synthetic data ---------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Generator settings for a discriminable toy dataset.

    Classes get evenly spaced hues plus a per-class stripe orientation,
    frequency and phase; images within a class differ only through the
    noise level (pixel noise plus noise-scaled phase and brightness
    jitter), so noise 0 makes them identical.
    """

    train_classes: int = 10
    val_classes: int = 5
    test_classes: int = 5
    images_per_class: int = 30
    side: int = 32
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("train_classes", "val_classes", "test_classes",
                     "images_per_class", "side"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.noise < 0:
            raise ConfigurationError("noise must be >= 0")

    @classmethod
    def from_file(cls, path) -> "SyntheticSpec":
        raw = json.loads(Path(path).read_text())
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(
                "unknown synthetic spec keys: " + ", ".join(sorted(unknown))
            )
        return cls(**raw)


def _class_params(spec: SyntheticSpec, rng: np.random.Generator) -> list[dict]:
    total = spec.train_classes + spec.val_classes + spec.test_classes
    hue_order = rng.permutation(total)
    params = []
    for i in range(total):
        hue = (hue_order[i] + 0.5 * rng.uniform()) / total  # distinct by spacing
        base = np.array(colorsys.hsv_to_rgb(hue, 0.75, 0.85))
        other = np.array(colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.65, 0.55))
        params.append(
            {
                "base": base,
                "other": other,
                "theta": rng.choice([0.0, 45.0, 90.0, 135.0]) * np.pi / 180.0,
                "freq": rng.uniform(2.0, 6.0),
                "phase": rng.uniform(0.0, 2 * np.pi),
            }
        )
    return params


def _render_image(p: dict, side: int, noise: float,
                  rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side] / side
    u = xx * np.cos(p["theta"]) + yy * np.sin(p["theta"])
    phase = p["phase"] + noise * rng.normal() * 2 * np.pi
    mask = 0.5 * (1.0 + np.sin(2 * np.pi * p["freq"] * u + phase))
    img = p["base"][None, None, :] * (1 - mask[..., None]) + \
        p["other"][None, None, :] * mask[..., None]
    img = img * (1.0 + 0.3 * noise * rng.normal())
    img = img + noise * 0.15 * rng.normal(size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec, out_dir, overwrite: bool = False) -> Path:
    """Write a synthetic dataset tree; deterministic for a given seed."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise UsageError(
                f"output directory {out} exists and is not empty "
                "(pass overwrite to replace it)"
            )
        import shutil

        shutil.rmtree(out)
    rng = np.random.default_rng(spec.seed)
    params = _class_params(spec, rng)
    counts = {
        "train": spec.train_classes,
        "val": spec.val_classes,
        "test": spec.test_classes,
    }
    manifest = {}
    index = 0
    for split in SPLIT_NAMES:
        for _ in range(counts[split]):
            name = f"class_{index:03d}"
            manifest[name] = split
            class_dir = out / split / name
            class_dir.mkdir(parents=True)
            for img_i in range(spec.images_per_class):
                img = _render_image(params[index], spec.side, spec.noise, rng)
                pixels = (img * 255.0 + 0.5).astype(np.uint8)
                Image.fromarray(pixels, "RGB").save(class_dir / f"img_{img_i:03d}.png")
            index += 1
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return out
