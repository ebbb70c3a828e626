"""Dataset ingestion, splitting, crop sampling and synthetic degradations.

Manifests are CSV files with header ``image_path,mos[,group_id,method,scale]``;
subjective scores are min-max normalized into [0, 1] at load time. The
synthetic-degradation generator produces seeded blur / noise / resampling
ladders with a documented monotone pseudo-score ``exp(-severity)``, which
gives desk-scale datasets with known ordinal structure.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, DataError, ShapeError
from .rng import derive_rng, derive_seed

__all__ = [
    "SampleRecord",
    "Manifest",
    "DegradationSpec",
    "DEGRADATION_KINDS",
    "load_image",
    "save_image",
    "load_manifest",
    "save_manifest",
    "split_manifest",
    "sample_crop",
    "synthesize",
    "make_synthetic_dataset",
    "procedural_image",
]

DEGRADATION_KINDS = ("gaussian_blur", "additive_noise", "bicubic_updown")
_SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# image I/O


def load_image(path) -> np.ndarray:
    """Decode an image file to an HxWx3 uint8 RGB array."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"image file not found: {p}")
    with Image.open(p) as im:
        return np.asarray(im.convert("RGB"))


def save_image(image: np.ndarray, path) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 uint8 image, got {image.dtype} {image.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# manifests


@dataclass
class SampleRecord:
    image_path: str
    mos: float
    mos_normalized: float = 0.0
    group_id: str | None = None
    method_tag: str | None = None
    scale_tag: str | None = None
    split: str | None = None


@dataclass
class Manifest:
    records: list
    dataset_min: float
    dataset_max: float
    base_dir: Path = field(default_factory=Path)
    split_seed: int | None = None
    normalization_degenerate: bool = False

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, split: str) -> list:
        if split not in _SPLITS:
            raise ConfigurationError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def resolve_path(self, record: SampleRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() else self.base_dir / p


def _normalize(records: list) -> tuple[float, float, bool]:
    values = [r.mos for r in records]
    lo, hi = min(values), max(values)
    degenerate = hi <= lo
    for r in records:
        # all-equal scores carry no ranking information; pin to mid-scale
        r.mos_normalized = 0.5 if degenerate else (r.mos - lo) / (hi - lo)
    return lo, hi, degenerate


def load_manifest(csv_path, check_files: bool = True) -> Manifest:
    """Parse a manifest CSV; row numbers in errors are 1-based data rows."""
    csv_path = Path(csv_path)
    if not csv_path.is_file():
        raise DataError(f"manifest not found: {csv_path}")
    base_dir = csv_path.parent
    records = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"image_path", "mos"} <= set(reader.fieldnames):
            raise DataError(
                f"{csv_path}: manifest must have columns image_path,mos "
                f"(got {reader.fieldnames})"
            )
        for row_no, row in enumerate(reader, start=1):
            try:
                mos = float(row["mos"])
            except (TypeError, ValueError):
                raise DataError(f"{csv_path}: row {row_no}: unparsable mos {row.get('mos')!r}")
            if not math.isfinite(mos):
                raise DataError(f"{csv_path}: row {row_no}: non-finite mos")
            rec = SampleRecord(
                image_path=row["image_path"],
                mos=mos,
                group_id=row.get("group_id") or None,
                method_tag=row.get("method") or None,
                scale_tag=row.get("scale") or None,
            )
            if check_files:
                p = Path(rec.image_path)
                p = p if p.is_absolute() else base_dir / p
                if not p.is_file():
                    raise DataError(f"{csv_path}: row {row_no}: missing image file {p}")
            records.append(rec)
    if not records:
        raise DataError(f"{csv_path}: manifest has no records")
    lo, hi, degenerate = _normalize(records)
    return Manifest(
        records=records,
        dataset_min=lo,
        dataset_max=hi,
        base_dir=base_dir,
        normalization_degenerate=degenerate,
    )


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_path", "mos", "group_id", "method", "scale"])
        for r in manifest.records:
            writer.writerow(
                [r.image_path, repr(r.mos), r.group_id or "", r.method_tag or "", r.scale_tag or ""]
            )


def _copy_manifest(m: Manifest) -> Manifest:
    recs = [SampleRecord(**vars(r)) for r in m.records]
    return Manifest(
        records=recs,
        dataset_min=m.dataset_min,
        dataset_max=m.dataset_max,
        base_dir=m.base_dir,
        split_seed=m.split_seed,
        normalization_degenerate=m.normalization_degenerate,
    )


def split_manifest(manifest: Manifest, seed: int, group_aware: bool = False) -> Manifest:
    """Assign train/val/test splits (60/20/20 by count, remainder to train).

    Record-random by default; with ``group_aware`` whole ``group_id``
    groups are kept inside one split (fractions then hold approximately).
    """
    n = len(manifest)
    if n < 5:
        raise DataError(f"need at least 5 records to split, got {n}")
    out = _copy_manifest(manifest)
    out.split_seed = seed
    n_val, n_test = n // 5, n // 5
    n_train = n - n_val - n_test
    rng = derive_rng(seed, "split")
    if not group_aware:
        order = rng.permutation(n)
        for pos, idx in enumerate(order):
            if pos < n_train:
                out.records[idx].split = "train"
            elif pos < n_train + n_val:
                out.records[idx].split = "val"
            else:
                out.records[idx].split = "test"
        return out

    groups: dict = {}
    for idx, rec in enumerate(out.records):
        key = rec.group_id if rec.group_id is not None else f"__solo_{idx}"
        groups.setdefault(key, []).append(idx)
    names = sorted(groups)
    rng.shuffle(names)
    counts = {"test": 0, "val": 0}
    quota = {"test": n_test, "val": n_val}
    for name in names:
        members = groups[name]
        target = "train"
        for split in ("test", "val"):
            if counts[split] < quota[split]:
                target = split
                break
        for idx in members:
            out.records[idx].split = target
        if target != "train":
            counts[target] += len(members)
    return out


# ---------------------------------------------------------------------------
# crop sampling


def sample_crop(image: np.ndarray, size: int = 224, seed: int = 0) -> np.ndarray:
    """Seeded random size x size crop; images smaller than ``size`` in a
    dimension are reflect-padded up to it first. Sides below 128 are
    rejected."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected HxWxC image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < 128 or w < 128:
        raise ShapeError(f"image {(h, w)} below the 128-pixel crop-sampling minimum")
    pad_h = max(0, size - h)
    pad_w = max(0, size - w)
    if pad_h or pad_w:
        if pad_h >= h or pad_w >= w:
            raise ShapeError(f"image {(h, w)} too small to reflect-pad to {size}")
        image = np.pad(
            image,
            (
                (pad_h // 2, pad_h - pad_h // 2),
                (pad_w // 2, pad_w - pad_w // 2),
                (0, 0),
            ),
            mode="reflect",
        )
        h, w = image.shape[:2]
    rng = derive_rng(seed, "crop")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[top : top + size, left : left + size]


# ---------------------------------------------------------------------------
# synthetic degradations


@dataclass(frozen=True)
class DegradationSpec:
    """One degradation: kind, severity >= 0 and the RNG seed for noise.

    ``pseudo_mos = exp(-severity)`` is the documented monotone labeling
    rule; only its ordinal structure is meaningful.
    """

    kind: str
    severity: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEGRADATION_KINDS:
            raise ConfigurationError(
                f"unknown degradation kind {self.kind!r}; choose from {DEGRADATION_KINDS}"
            )
        if not (self.severity >= 0.0) or not math.isfinite(self.severity):
            raise ConfigurationError(f"severity must be finite and >= 0, got {self.severity}")

    @property
    def pseudo_mos(self) -> float:
        return math.exp(-self.severity)


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def synthesize(image: np.ndarray, spec: DegradationSpec) -> tuple[np.ndarray, float]:
    """Apply ``spec`` to an HxWx3 uint8 image; returns (degraded, pseudo_mos).

    Severity 0 returns an identical copy. Noise std is in 8-bit counts;
    blur sigma is in pixels; resampling uses a bicubic round trip with
    scale factor (1 + severity).
    """
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 uint8 image, got {image.dtype} {image.shape}")
    if spec.severity == 0.0:
        return image.copy(), 1.0
    if spec.kind == "gaussian_blur":
        blurred = gaussian_filter(
            image.astype(np.float64), sigma=(spec.severity, spec.severity, 0.0)
        )
        return _to_uint8(blurred), spec.pseudo_mos
    if spec.kind == "additive_noise":
        rng = derive_rng(spec.seed, "noise")
        noise = rng.normal(0.0, spec.severity, size=image.shape)
        return _to_uint8(image.astype(np.float64) + noise), spec.pseudo_mos
    # bicubic_updown
    h, w = image.shape[:2]
    factor = 1.0 + spec.severity
    dw = max(1, round(w / factor))
    dh = max(1, round(h / factor))
    im = Image.fromarray(image, mode="RGB")
    down = im.resize((dw, dh), Image.BICUBIC)
    up = down.resize((w, h), Image.BICUBIC)
    return np.asarray(up), spec.pseudo_mos


def procedural_image(seed: int, size: tuple[int, int] = (128, 128)) -> np.ndarray:
    """Seeded synthetic RGB content mixing gradients, gratings, sharp
    rectangles, soft blobs and band-limited noise; used for desk-scale
    datasets."""
    h, w = size
    rng = derive_rng(seed, "procedural")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= h
    xx /= w
    img = np.empty((h, w, 3), dtype=np.float64)
    for c in range(3):
        img[:, :, c] = rng.uniform(0.25, 0.75) + rng.uniform(-0.4, 0.4) * xx + rng.uniform(
            -0.4, 0.4
        ) * yy
    for _ in range(3):
        fx, fy = rng.uniform(3, 22, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        grating = np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        img += grating[:, :, None] * rng.uniform(0.03, 0.12, size=3)
    for _ in range(4):
        y0, y1 = np.sort(rng.integers(0, h, size=2))
        x0, x1 = np.sort(rng.integers(0, w, size=2))
        img[y0 : y1 + 1, x0 : x1 + 1] += rng.uniform(-0.25, 0.25, size=3)
    for _ in range(2):
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.05, 0.25)
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r)))
        img += blob[:, :, None] * rng.uniform(-0.3, 0.3, size=3)
    noise = gaussian_filter(rng.normal(0, 1, size=(h, w)), sigma=1.2)
    img += noise[:, :, None] * 0.05
    return _to_uint8(img * 255.0)


def make_synthetic_dataset(
    sources: dict,
    out_dir,
    kinds=DEGRADATION_KINDS,
    severities=(0.5, 1.0, 2.0, 3.0),
    seed: int = 0,
) -> Path:
    """Emit a degraded dataset from ``{name: HxWx3 uint8}`` sources.

    Writes one PNG per (source, kind, severity), a manifest CSV with the
    pseudo-scores and tags, and a ``seeds.json`` sidecar recording every
    per-image noise seed. Returns the manifest path.
    """
    for kind in kinds:
        if kind not in DEGRADATION_KINDS:
            raise ConfigurationError(f"unknown degradation kind {kind!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    sidecar = {"root_seed": seed, "images": {}}
    for name in sorted(sources):
        image = sources[name]
        for kind in kinds:
            for severity in severities:
                img_seed = derive_seed(seed, "synth", name, kind, f"{severity!r}")
                spec = DegradationSpec(kind=kind, severity=float(severity), seed=img_seed)
                degraded, score = synthesize(image, spec)
                fname = f"{name}__{kind}__{severity:g}.png"
                save_image(degraded, out_dir / fname)
                sidecar["images"][fname] = img_seed
                records.append(
                    SampleRecord(
                        image_path=fname,
                        mos=score,
                        group_id=name,
                        method_tag=kind,
                        scale_tag=f"{severity:g}",
                    )
                )
    lo, hi, degenerate = _normalize(records)
    manifest = Manifest(
        records=records,
        dataset_min=lo,
        dataset_max=hi,
        base_dir=out_dir,
        normalization_degenerate=degenerate,
    )
    manifest_path = out_dir / "manifest.csv"
    save_manifest(manifest, manifest_path)
    with open(out_dir / "seeds.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return manifest_path
