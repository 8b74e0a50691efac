"""Separable-Gaussian feature fixture.

Generates two well-separated Gaussian clouds as ready-made feature matrices
plus matching manifest records, so the train and evaluate stages (and the
test suite) can run the entire pipeline with no image corpus and no backbone
model file. Everything is derived from one seed and is bit-reproducible.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .backbone import FeatureMatrix
from .errors import ValidationError
from .manifest import (
    DatasetManifest,
    ImageRecord,
    Label,
    Source,
    Split,
    Subgroup,
    tally,
)
from .seeds import make_rng

SYNTHETIC_BACKBONE = "SYNTHETIC"
DEFAULT_DIM = 16
DEFAULT_SEPARATION = 6.0
DEFAULT_SEED = 2020


def _synthetic_preprocessing_hash(dim: int, separation: float, seed: int) -> bytes:
    canon = json.dumps(
        {"kind": "synthetic", "dim": dim, "separation": separation, "seed": seed},
        sort_keys=True,
    )
    return hashlib.sha256(canon.encode("utf-8")).digest()


@dataclass(frozen=True)
class SyntheticFixture:
    manifest: DatasetManifest
    train_features: FeatureMatrix
    test_features: FeatureMatrix


def make_gaussian_fixture(
    n_train: int = 400,
    n_test: int = 400,
    dim: int = DEFAULT_DIM,
    separation: float = DEFAULT_SEPARATION,
    seed: int = DEFAULT_SEED,
) -> SyntheticFixture:
    """Two unit-variance Gaussian clouds separation apart (Euclidean, between
    means), half positive / half negative per split.

    Negative rows alternate between the NORMAL and OTHER_DISEASE subgroups so
    subgroup histograms have all three populations.
    """
    if n_train < 2 or n_test < 2:
        raise ValidationError("need at least 2 rows per split")
    if n_train % 2 or n_test % 2:
        raise ValidationError("row counts must be even (half positive, half negative)")
    if dim < 1:
        raise ValidationError(f"dim must be >= 1, got {dim}")
    if separation <= 0:
        raise ValidationError(f"separation must be > 0, got {separation}")

    offset = separation / (2.0 * np.sqrt(dim))
    prep_hash = _synthetic_preprocessing_hash(dim, separation, seed)

    records: list[ImageRecord] = []
    features: dict[Split, FeatureMatrix] = {}
    for split, n_rows in ((Split.TRAIN, n_train), (Split.TEST, n_test)):
        half = n_rows // 2
        rng = make_rng("synthetic", seed, split.value)
        pos = rng.standard_normal((half, dim)) + offset
        neg = rng.standard_normal((half, dim)) - offset
        rows = np.concatenate([pos, neg]).astype(np.float32)

        row_ids: list[str] = []
        for i in range(n_rows):
            positive = i < half
            name = f"synthetic/{split.value.lower()}/{'pos' if positive else 'neg'}_{i:04d}.png"
            row_ids.append(name)
            if positive:
                subgroup = Subgroup.COVID
            else:
                subgroup = Subgroup.NORMAL if i % 2 == 0 else Subgroup.OTHER_DISEASE
            records.append(
                ImageRecord(
                    image_path=name,
                    patient_id=f"synth_{split.value.lower()}_{i:04d}",
                    label=Label.COVID if positive else Label.NON_COVID,
                    subgroup=subgroup,
                    split=split,
                    source=Source.COVID_CORPUS if positive else Source.NEGATIVE_CORPUS,
                    is_augmented=False,
                    augmentation_desc=None,
                )
            )
        order = np.argsort(np.array(row_ids))
        features[split] = FeatureMatrix(
            matrix=rows[order],
            row_ids=[row_ids[i] for i in order],
            backbone=SYNTHETIC_BACKBONE,
            preprocessing_hash=prep_hash,
        )

    records.sort(key=lambda r: r.image_path)
    manifest = DatasetManifest(records=tuple(records), counts=tally(records))
    return SyntheticFixture(
        manifest=manifest,
        train_features=features[Split.TRAIN],
        test_features=features[Split.TEST],
    )
