"""Dataset ingestion, synthetic generation, resizing and seeded splitting.

All arrays are channel-first float32 with values in [0, 1]: images are
(3, H, W), masks are (1, H, W) and binary after ingestion.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import DataError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
MIN_SYNTHETIC_SIZE = 16


@dataclass
class SampleRecord:
    """One (image, mask) pair with a stable identifier."""

    id: str
    image: np.ndarray  # (3, H, W), float32 in [0, 1]
    mask: np.ndarray   # (1, H, W), float32 in [0, 1]

    def validate(self) -> "SampleRecord":
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"{self.id}: image must be (3, H, W), got {self.image.shape}")
        if self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise DataError(f"{self.id}: mask must be (1, H, W), got {self.mask.shape}")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise DataError(
                f"{self.id}: image dims {self.image.shape[1:]} != mask dims {self.mask.shape[1:]}"
            )
        for name, arr in (("image", self.image), ("mask", self.mask)):
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise DataError(f"{self.id}: {name} values outside [0, 1]")
        return self


@dataclass
class DatasetConfig:
    """Where samples come from and how they are prepared."""

    source: str = "synthetic"        # "synthetic" | "directory"
    target_size: int = 384
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 42
    root: str | None = None          # directory source only
    count: int = 256                 # synthetic source only

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "target_size": self.target_size,
            "split_ratios": list(self.split_ratios),
            "seed": self.seed,
            "root": self.root,
            "count": self.count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "split_ratios" in d:
            d["split_ratios"] = tuple(d["split_ratios"])
        return cls(**d)


@dataclass
class SplitIndex:
    """Seeded permutation of sample ids with train/val/test boundaries.

    Persisting this lets every model in a comparison train and evaluate on
    exactly the same partition.
    """

    seed: int
    permutation: list[str]
    ratios: tuple[float, float, float]
    boundaries: tuple[int, int, int]
    predetermined: bool = field(default=False)

    @property
    def train_ids(self) -> list[str]:
        return self.permutation[: self.boundaries[0]]

    @property
    def val_ids(self) -> list[str]:
        n_train, n_val, _ = self.boundaries
        return self.permutation[n_train : n_train + n_val]

    @property
    def test_ids(self) -> list[str]:
        n_train, n_val, _ = self.boundaries
        return self.permutation[n_train + n_val :]

    def label_of(self, sample_id: str) -> str:
        if sample_id in set(self.train_ids):
            return "train"
        if sample_id in set(self.val_ids):
            return "val"
        if sample_id in set(self.test_ids):
            return "test"
        raise DataError(f"id {sample_id!r} not present in split index")

    def to_dict(self) -> dict:
        labels = (["train"] * self.boundaries[0]
                  + ["val"] * self.boundaries[1]
                  + ["test"] * self.boundaries[2])
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "boundaries": list(self.boundaries),
            "predetermined": self.predetermined,
            "entries": [{"id": i, "split": s} for i, s in zip(self.permutation, labels)],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "SplitIndex":
        d = json.loads(Path(path).read_text())
        return cls(
            seed=d["seed"],
            permutation=[e["id"] for e in d["entries"]],
            ratios=tuple(d["ratios"]),
            boundaries=tuple(d["boundaries"]),
            predetermined=d.get("predetermined", False),
        )


def resize_bilinear(t: np.ndarray, size: int, *, mask: bool = False) -> np.ndarray:
    """Resize a (C, H, W) array to (C, size, size) with bilinear sampling.

    Masks are re-binarized at 0.5 after interpolation so downstream pixel
    counting stays well defined. Returns the input unchanged when it already
    has the target size (and, for masks, is already binary).
    """
    if size < 1:
        raise DataError(f"resize target must be >= 1, got {size}")
    if t.ndim != 3:
        raise DataError(f"expected (C, H, W) array, got shape {t.shape}")
    if t.shape[1] == size and t.shape[2] == size:
        return t
    x = torch.from_numpy(np.ascontiguousarray(t, dtype=np.float32)).unsqueeze(0)
    out = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    arr = out.squeeze(0).clamp_(0.0, 1.0).numpy()
    if mask:
        arr = (arr >= 0.5).astype(np.float32)
    return arr


def _textured_background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth per-channel gradients plus blurred noise, clipped to [0, 1]."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    channels = []
    for _ in range(3):
        a, b, c = rng.uniform(-0.3, 0.3, size=3)
        base = 0.45 + a * xx + b * yy + c * xx * yy
        noise = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 24.0)
        noise *= 0.35 / (np.abs(noise).max() + 1e-8)
        channels.append(base + noise)
    return np.clip(np.stack(channels), 0.0, 1.0).astype(np.float32)


def _ellipse_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean interior of one random rotated ellipse, fully inside the frame."""
    cy, cx = rng.uniform(0.3 * size, 0.7 * size, size=2)
    ay = rng.uniform(size / 10.0, size / 4.0)
    ax = rng.uniform(size / 10.0, size / 4.0)
    theta = rng.uniform(0.0, math.pi)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def generate_synthetic(count: int, size: int, seed: int) -> list[SampleRecord]:
    """Generate textured images containing 1-3 filled ellipses.

    The mask is the union of the ellipse interiors. Output is a pure
    function of (count, size, seed).
    """
    if count < 1:
        raise DataError(f"count must be >= 1, got {count}")
    if size < MIN_SYNTHETIC_SIZE:
        raise DataError(
            f"size {size} too small for the reduction pipeline (minimum {MIN_SYNTHETIC_SIZE})"
        )
    rng = np.random.default_rng(seed)
    records = []
    for i in range(count):
        image = _textured_background(size, rng)
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            mask |= _ellipse_mask(size, rng)
        # Foreground gets a strong per-channel color shift so the region is
        # separable from the textured background.
        shift = rng.uniform(0.25, 0.45, size=3) * rng.choice([-1.0, 1.0], size=3)
        for ch in range(3):
            image[ch][mask] = np.clip(image[ch][mask] + shift[ch], 0.0, 1.0)
        rec = SampleRecord(
            id=f"synthetic-{i:05d}",
            image=image,
            mask=mask[None].astype(np.float32),
        )
        records.append(rec.validate())
    return records


def make_split(ids: Sequence[str], ratios: Sequence[float], seed: int) -> SplitIndex:
    """Deterministically shuffle ids and cut train/val/test boundaries.

    Train and val sizes are floored; the remainder goes to test, so the
    boundaries always account for every sample.
    """
    ids = list(ids)
    if not ids:
        raise DataError("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        raise DataError("sample ids must be unique")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DataError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {sum(ratios)!r}")
    n = len(ids)
    n_train = math.floor(ratios[0] * n)
    n_val = math.floor(ratios[1] * n)
    n_test = n - n_train - n_val
    rng = np.random.default_rng(seed)
    perm = [ids[j] for j in rng.permutation(n)]
    return SplitIndex(seed=seed, permutation=perm, ratios=ratios,
                      boundaries=(n_train, n_val, n_test))


def _load_image_file(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert(mode)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"unreadable file {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def _collect_stems(folder: Path) -> dict[str, Path]:
    files = {}
    for p in sorted(folder.iterdir()):
        if p.suffix.lower() in IMAGE_EXTENSIONS:
            if p.stem in files:
                raise DataError(f"duplicate stem {p.stem!r} in {folder}")
            files[p.stem] = p
    return files


def _ingest_pair_folders(images_dir: Path, masks_dir: Path, target_size: int,
                         id_prefix: str = "") -> list[SampleRecord]:
    images = _collect_stems(images_dir)
    masks = _collect_stems(masks_dir)
    missing_masks = sorted(set(images) - set(masks))
    missing_images = sorted(set(masks) - set(images))
    if missing_masks or missing_images:
        parts = []
        if missing_masks:
            parts.append(f"images without masks: {', '.join(missing_masks)}")
        if missing_images:
            parts.append(f"masks without images: {', '.join(missing_images)}")
        raise DataError("unpaired samples -- " + "; ".join(parts))
    records = []
    for stem in sorted(images):
        image = resize_bilinear(_load_image_file(images[stem], "RGB"), target_size)
        mask = _load_image_file(masks[stem], "L")
        mask = (mask >= 0.5).astype(np.float32)
        mask = resize_bilinear(mask, target_size, mask=True)
        records.append(SampleRecord(id=id_prefix + stem, image=image, mask=mask).validate())
    return records


def ingest_directory(config: DatasetConfig) -> list[SampleRecord]:
    """Load paired image/mask files from disk, resized to the target size.

    Two layouts are accepted: a flat `<root>/images` + `<root>/masks` pair
    matched by filename stem, or a pre-split `<root>/{train,val,test}/{images,masks}`
    tree. Records come back in deterministic lexicographic order (splits in
    train, val, test order for the pre-split layout).
    """
    if config.root is None:
        raise DataError("directory source requires a root path")
    root = Path(config.root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    if (root / "images").is_dir() and (root / "masks").is_dir():
        records = _ingest_pair_folders(root / "images", root / "masks", config.target_size)
    elif any((root / s).is_dir() for s in ("train", "val", "test")):
        records = []
        for split in ("train", "val", "test"):
            split_dir = root / split
            if not split_dir.is_dir():
                continue
            if not (split_dir / "images").is_dir() or not (split_dir / "masks").is_dir():
                raise DataError(f"{split_dir} must contain images/ and masks/ folders")
            records.extend(
                _ingest_pair_folders(split_dir / "images", split_dir / "masks",
                                     config.target_size, id_prefix=f"{split}/")
            )
    else:
        raise DataError(
            f"{root} matches no supported layout (expected images/+masks/ or train|val|test subfolders)"
        )
    if not records:
        raise DataError(f"no samples found under {root}")
    return records


def presplit_index(records: Iterable[SampleRecord], ratios, seed: int) -> SplitIndex | None:
    """Build a SplitIndex from `train/`-style id prefixes, if present."""
    ids = [r.id for r in records]
    if not ids or not all("/" in i for i in ids):
        return None
    by_split = {"train": [], "val": [], "test": []}
    for i in ids:
        prefix = i.split("/", 1)[0]
        if prefix not in by_split:
            return None
        by_split[prefix].append(i)
    perm = by_split["train"] + by_split["val"] + by_split["test"]
    boundaries = (len(by_split["train"]), len(by_split["val"]), len(by_split["test"]))
    return SplitIndex(seed=seed, permutation=perm, ratios=tuple(ratios),
                      boundaries=boundaries, predetermined=True)


def prepare_dataset(config: DatasetConfig) -> tuple[list[SampleRecord], SplitIndex]:
    """Materialize records plus a split index for any dataset source.

    Pre-split directory layouts keep their on-disk assignment; everything
    else is split with a seeded permutation.
    """
    if config.source == "synthetic":
        records = generate_synthetic(config.count, config.target_size, config.seed)
    elif config.source == "directory":
        records = ingest_directory(config)
    else:
        raise DataError(f"unknown dataset source {config.source!r}")
    split = presplit_index(records, config.split_ratios, config.seed)
    if split is None:
        split = make_split([r.id for r in records], config.split_ratios, config.seed)
    return records, split


def records_by_id(records: Iterable[SampleRecord]) -> dict[str, SampleRecord]:
    return {r.id: r for r in records}


def select_records(records: Iterable[SampleRecord], ids: Sequence[str]) -> list[SampleRecord]:
    lookup = records_by_id(records)
    try:
        return [lookup[i] for i in ids]
    except KeyError as exc:
        raise DataError(f"split references unknown id {exc.args[0]!r}") from exc
