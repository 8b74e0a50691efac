"""Frozen-backbone feature extraction.

Images are preprocessed exactly one way (RGB, bilinear resize to 224x224,
scale to [0, 1], per-channel normalization) and pushed through a serialized
backbone graph whose classifier has been cut off, leaving a pooled feature
vector per image. Features are stored as float32 with their row ids and a
hash of the preprocessing recipe so downstream stages can refuse mismatched
inputs.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError, NumericError, ValidationError
from .manifest import DatasetManifest, ImageRecord
from .onnxlite import Graph, load_graph, run_graph

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
INPUT_SIZE = 224

FEATURE_DIMS = {
    "RESNET18": 512,
    "RESNET50": 2048,
    "SQUEEZENET": 512,
    "DENSENET121": 1024,
}

BACKBONE_CODES = {
    "RESNET18": 0,
    "RESNET50": 1,
    "SQUEEZENET": 2,
    "DENSENET121": 3,
    "SYNTHETIC": 255,
}
CODE_TO_BACKBONE = {v: k for k, v in BACKBONE_CODES.items()}

FEAT_MAGIC = b"FEAT1"


@dataclass(frozen=True)
class PreprocessConfig:
    size: int = INPUT_SIZE
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def digest(self) -> bytes:
        canon = json.dumps(
            {"size": self.size, "mean": list(self.mean), "std": list(self.std)},
            sort_keys=True,
        )
        return hashlib.sha256(canon.encode("utf-8")).digest()


def preprocess_image(path: str | Path, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Decoded image as a (3, size, size) float32 CHW tensor."""
    p = Path(path)
    if not p.is_file():
        raise InputError(f"image not found: {p}")
    try:
        with Image.open(p) as img:
            img = img.convert("RGB").resize((config.size, config.size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32) / 255.0
    except InputError:
        raise
    except Exception as exc:
        raise InputError(f"cannot decode image {p}: {exc}") from exc
    mean = np.array(config.mean, dtype=np.float32)
    std = np.array(config.std, dtype=np.float32)
    arr = (arr - mean) / std
    return arr.transpose(2, 0, 1)


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    graph: Graph

    def __post_init__(self):
        if self.name not in FEATURE_DIMS:
            raise ValidationError(f"unknown backbone {self.name!r}")
        expected_in = (1, 3, INPUT_SIZE, INPUT_SIZE)
        if self.graph.input_shape != expected_in:
            raise ValidationError(
                f"backbone input shape {self.graph.input_shape} != {expected_in}"
            )
        expected_out = (1, FEATURE_DIMS[self.name])
        if self.graph.output_shape != expected_out:
            raise ValidationError(
                f"backbone output shape {self.graph.output_shape} != {expected_out} "
                f"for {self.name}"
            )

    @property
    def feature_dim(self) -> int:
        return FEATURE_DIMS[self.name]


def load_backbone(name: str, model_path: str | Path) -> BackboneSpec:
    return BackboneSpec(name=name, graph=load_graph(model_path))


@dataclass
class FeatureMatrix:
    """Extracted features keyed by row id.

    row_ids are image paths from the manifest; labels and subgroups stay in
    the manifest and are re-joined by row id when needed.
    """

    matrix: np.ndarray  # (N, D) float32
    row_ids: list[str]
    backbone: str
    preprocessing_hash: bytes

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise ValidationError(f"feature matrix must be 2-D, got {self.matrix.shape}")
        if len(self.row_ids) != self.matrix.shape[0]:
            raise ValidationError("row_ids and matrix rows must line up")
        if self.backbone not in BACKBONE_CODES:
            raise ValidationError(f"unknown backbone {self.backbone!r}")
        if len(self.preprocessing_hash) != 32:
            raise ValidationError("preprocessing_hash must be 32 bytes")


def extract_features(
    spec: BackboneSpec,
    records: list[ImageRecord],
    config: PreprocessConfig = PreprocessConfig(),
) -> FeatureMatrix:
    """One feature row per record, in the order given."""
    dim = spec.feature_dim
    rows = np.zeros((len(records), dim), dtype=np.float32)
    for i, rec in enumerate(records):
        x = preprocess_image(rec.image_path, config)[None, ...]
        feat = run_graph(spec.graph, x)[0]
        if not np.all(np.isfinite(feat)):
            raise NumericError(f"non-finite features for {rec.image_path}")
        rows[i] = feat.astype(np.float32)
    return FeatureMatrix(
        matrix=rows,
        row_ids=[r.image_path for r in records],
        backbone=spec.name,
        preprocessing_hash=config.digest(),
    )


# ---------------------------------------------------------------------------
# Feature file format
# ---------------------------------------------------------------------------
# magic, u32 row count, u32 dim, u8 backbone code, 32-byte preprocessing
# hash, N*D float32 row-major, then N length-prefixed UTF-8 row ids.

def save_features(features: FeatureMatrix, path: str | Path) -> None:
    n, d = features.matrix.shape
    buf = io.BytesIO()
    buf.write(FEAT_MAGIC)
    buf.write(struct.pack("<II", n, d))
    buf.write(struct.pack("<B", BACKBONE_CODES[features.backbone]))
    buf.write(features.preprocessing_hash)
    buf.write(features.matrix.astype("<f4").tobytes(order="C"))
    for rid in features.row_ids:
        rid_bytes = rid.encode("utf-8")
        buf.write(struct.pack("<I", len(rid_bytes)))
        buf.write(rid_bytes)
    Path(path).write_bytes(buf.getvalue())


def load_features(path: str | Path) -> FeatureMatrix:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"feature file not found: {p}")
    raw = p.read_bytes()
    if raw[:5] != FEAT_MAGIC:
        raise InputError(f"not a feature file: {p}")
    off = 5
    n, d = struct.unpack_from("<II", raw, off)
    off += 8
    (code,) = struct.unpack_from("<B", raw, off)
    off += 1
    if code not in CODE_TO_BACKBONE:
        raise InputError(f"unknown backbone code {code} in {p}")
    prep_hash = raw[off : off + 32]
    off += 32
    mat_bytes = n * d * 4
    if off + mat_bytes > len(raw):
        raise InputError(f"truncated feature file: {p}")
    matrix = np.frombuffer(raw[off : off + mat_bytes], dtype="<f4").reshape(n, d).copy()
    off += mat_bytes
    row_ids: list[str] = []
    for _ in range(n):
        (rid_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        row_ids.append(raw[off : off + rid_len].decode("utf-8"))
        off += rid_len
    return FeatureMatrix(
        matrix=matrix,
        row_ids=row_ids,
        backbone=CODE_TO_BACKBONE[code],
        preprocessing_hash=prep_hash,
    )


def extract_manifest_features(
    spec: BackboneSpec,
    manifest: DatasetManifest,
    config: PreprocessConfig = PreprocessConfig(),
) -> tuple[FeatureMatrix, FeatureMatrix]:
    """(train, test) feature matrices for a manifest, rows in manifest order."""
    train = extract_features(spec, manifest.train_records, config)
    test = extract_features(spec, manifest.test_records, config)
    return train, test
