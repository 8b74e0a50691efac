"""Deterministic minority-class expansion for the training split.

Each positive training image gets zero or more augmented replicas built from
horizontal flips, small rotations, small smooth distortions, and plain
duplication, until the positive count reaches the configured target. Every
replica's transform chain is drawn from a counter-based RNG keyed by (seed,
source path, replica index), so runs are reproducible image by image and
adding or removing one source image never perturbs the others.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InputError, ValidationError
from .manifest import DatasetManifest, ImageRecord, Label, Split, tally
from .seeds import make_rng


@dataclass(frozen=True)
class AugmentConfig:
    seed: int
    target_count: int = 496
    rotation_max_deg: float = 10.0
    distortion_amplitude_px: float = 3.0
    enable_hflip: bool = True

    def __post_init__(self):
        if self.target_count < 1:
            raise ValidationError(f"target_count must be >= 1, got {self.target_count}")
        if self.rotation_max_deg <= 0:
            raise ValidationError(
                f"rotation_max_deg must be > 0, got {self.rotation_max_deg}"
            )
        if self.distortion_amplitude_px < 0:
            raise ValidationError(
                f"distortion_amplitude_px must be >= 0, got {self.distortion_amplitude_px}"
            )


# ---------------------------------------------------------------------------
# Transforms. A chain is a tuple of ops; its text form is the
# augmentation_desc stored in the manifest, and parsing that text back gives
# an identical chain, so every augmented image is reproducible from its
# manifest row alone.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HFlip:
    def format(self) -> str:
        return "hflip"


@dataclass(frozen=True)
class Rotate:
    degrees: float  # quantized to 0.1 degree so the text form is exact

    def format(self) -> str:
        return f"rot={self.degrees:.1f}"


@dataclass(frozen=True)
class Distort:
    amplitude_px: float
    warp_seed: int

    def format(self) -> str:
        return f"dist={self.amplitude_px!r}:{self.warp_seed}"


@dataclass(frozen=True)
class Duplicate:
    index: int

    def format(self) -> str:
        return f"dup={self.index}"


TransformOp = HFlip | Rotate | Distort | Duplicate
TransformChain = tuple[TransformOp, ...]

_ROT_RE = re.compile(r"^rot=(-?\d+\.\d)$")
_DIST_RE = re.compile(r"^dist=([0-9.eE+-]+):(\d+)$")
_DUP_RE = re.compile(r"^dup=(\d+)$")


def format_chain(chain: TransformChain) -> str:
    return ";".join(op.format() for op in chain)


def parse_chain(desc: str) -> TransformChain:
    if desc == "":
        return ()
    ops: list[TransformOp] = []
    for token in desc.split(";"):
        if token == "hflip":
            ops.append(HFlip())
            continue
        m = _ROT_RE.match(token)
        if m:
            ops.append(Rotate(degrees=float(m.group(1))))
            continue
        m = _DIST_RE.match(token)
        if m:
            ops.append(Distort(amplitude_px=float(m.group(1)), warp_seed=int(m.group(2))))
            continue
        m = _DUP_RE.match(token)
        if m:
            ops.append(Duplicate(index=int(m.group(1))))
            continue
        raise ValidationError(f"unparseable transform token {token!r}")
    return tuple(ops)


def _rotate_array(arr: np.ndarray, degrees: float) -> np.ndarray:
    # reshape=False keeps dimensions; exposed corners fill with black
    return ndimage.rotate(
        arr,
        degrees,
        axes=(1, 0),
        reshape=False,
        order=1,
        mode="constant",
        cval=0.0,
        prefilter=False,
    )


def _distort_array(arr: np.ndarray, amplitude_px: float, warp_seed: int) -> np.ndarray:
    """Smooth random displacement field, max displacement == amplitude_px."""
    h, w = arr.shape[:2]
    rng = np.random.Generator(np.random.PCG64(warp_seed))
    sigma = min(h, w) / 8.0
    fields = []
    for _ in range(2):
        f = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="reflect")
        peak = np.max(np.abs(f))
        fields.append(f * (amplitude_px / peak) if peak > 0 else f * 0.0)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.array([rows + fields[0], cols + fields[1]])

    def warp_plane(plane: np.ndarray) -> np.ndarray:
        return ndimage.map_coordinates(plane, coords, order=1, mode="constant", cval=0.0)

    if arr.ndim == 2:
        return warp_plane(arr)
    return np.stack([warp_plane(arr[:, :, c]) for c in range(arr.shape[2])], axis=2)


def apply_transform(image: Image.Image, chain: TransformChain) -> Image.Image:
    """Apply a transform chain; output keeps the input's mode and size."""
    arr = np.asarray(image, dtype=np.float64)
    for op in chain:
        if isinstance(op, HFlip):
            arr = arr[:, ::-1].copy()
        elif isinstance(op, Rotate):
            arr = _rotate_array(arr, op.degrees)
        elif isinstance(op, Distort):
            if op.amplitude_px > 0:
                arr = _distort_array(arr, op.amplitude_px, op.warp_seed)
        elif isinstance(op, Duplicate):
            pass
        else:
            raise ValidationError(f"unknown transform op {op!r}")
    out = np.rint(np.clip(arr, 0.0, 255.0)).astype(np.uint8)
    return Image.fromarray(out, mode=image.mode)


def draw_chain(cfg: AugmentConfig, image_path: str, replica: int) -> TransformChain:
    """Transform chain for one replica of one source image.

    Draw order is fixed by config alone (never by drawn values), so a given
    (seed, path, replica) always yields the same chain. A chain that comes
    out empty becomes plain duplication, which the manifest still records.
    """
    rng = make_rng(cfg.seed, image_path, replica)
    ops: list[TransformOp] = []
    if cfg.enable_hflip:
        flip = int(rng.integers(2))
        if flip:
            ops.append(HFlip())
    degrees = round(float(rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)), 1)
    if degrees != 0.0:
        ops.append(Rotate(degrees=degrees))
    if cfg.distortion_amplitude_px > 0:
        use_dist = int(rng.integers(2))
        warp_seed = int(rng.integers(2**32))
        if use_dist:
            ops.append(Distort(amplitude_px=cfg.distortion_amplitude_px, warp_seed=warp_seed))
    if not ops:
        ops.append(Duplicate(index=replica))
    return tuple(ops)


def augment_minority(
    manifest: DatasetManifest, cfg: AugmentConfig, out_dir: str | Path
) -> DatasetManifest:
    """Expand TRAIN positives to exactly cfg.target_count records.

    Replica i (of target - n extras) derives from source i % n with replica
    index i // n, over sources sorted by path. Output images are PNG named
    <stem>__aug<replica>.png in out_dir. The input manifest must not already
    contain augmented records (augmentation is not stackable).
    """
    sources = [
        r
        for r in manifest.records
        if r.split is Split.TRAIN and r.label is Label.COVID
    ]
    if any(r.is_augmented for r in sources):
        raise ValidationError("manifest already contains augmented records")
    n = len(sources)
    if n == 0:
        raise ValidationError("no positive training images to augment")
    if cfg.target_count < n:
        raise ValidationError(
            f"target_count {cfg.target_count} is below the {n} existing positives"
        )
    if cfg.target_count == n:
        return manifest

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sources = sorted(sources, key=lambda r: r.image_path)

    # plan all outputs first so stem collisions between distinct sources are
    # caught before any file is written; reruns overwrite their own files
    plan: list[tuple[ImageRecord, int, Path]] = []
    planned_paths: set[str] = set()
    for i in range(cfg.target_count - n):
        src = sources[i % n]
        replica = i // n
        out_path = out / f"{Path(src.image_path).stem}__aug{replica}.png"
        if str(out_path) in planned_paths:
            raise InputError(
                f"augmented filename collision (two sources share a stem): {out_path}"
            )
        planned_paths.add(str(out_path))
        plan.append((src, replica, out_path))

    new_records: list[ImageRecord] = []
    for src, replica, out_path in plan:
        chain = draw_chain(cfg, src.image_path, replica)
        with Image.open(src.image_path) as img:
            img.load()
            result = apply_transform(img, chain)
        result.save(out_path, format="PNG")
        new_records.append(
            replace(
                src,
                image_path=str(out_path),
                is_augmented=True,
                augmentation_desc=format_chain(chain),
            )
        )

    records = tuple(sorted(list(manifest.records) + new_records, key=lambda r: r.image_path))
    return DatasetManifest(
        records=records, counts=tally(records), schema_version=manifest.schema_version
    )
