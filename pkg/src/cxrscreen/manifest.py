"""Dataset manifest construction and validation.

Ingests two source corpora (a COVID X-ray corpus and a negative corpus) into a
single patient-disjoint, split-labeled inventory. The manifest serializes to a
fixed-header CSV so it diffs cleanly and round-trips byte-identically.
"""

from __future__ import annotations

import csv
import enum
import io
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml
from PIL import Image, UnidentifiedImageError

from .errors import InputError, ValidationError

SCHEMA_VERSION = 1

MANIFEST_COLUMNS = (
    "image_path",
    "patient_id",
    "label",
    "subgroup",
    "split",
    "source",
    "is_augmented",
    "augmentation_desc",
)

# ChexPert observation sub-classes other than no-finding (13 of them).
NEGATIVE_SUBCLASSES = (
    "enlarged_cardiomediastinum",
    "cardiomegaly",
    "lung_opacity",
    "lung_lesion",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "pleural_effusion",
    "pleural_other",
    "fracture",
    "support_devices",
)


class Label(str, enum.Enum):
    COVID = "COVID"
    NON_COVID = "NON_COVID"


class Subgroup(str, enum.Enum):
    COVID = "COVID"
    NORMAL = "NORMAL"
    OTHER_DISEASE = "OTHER_DISEASE"


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    TEST = "TEST"


class Source(str, enum.Enum):
    COVID_CORPUS = "COVID_CORPUS"
    NEGATIVE_CORPUS = "NEGATIVE_CORPUS"


@dataclass(frozen=True)
class ImageRecord:
    image_path: str
    patient_id: str
    label: Label
    subgroup: Subgroup
    split: Split
    source: Source
    is_augmented: bool = False
    augmentation_desc: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    counts: dict[tuple[Split, Subgroup], int]
    schema_version: int = SCHEMA_VERSION

    @property
    def train_records(self) -> tuple[ImageRecord, ...]:
        return tuple(r for r in self.records if r.split is Split.TRAIN)

    @property
    def test_records(self) -> tuple[ImageRecord, ...]:
        return tuple(r for r in self.records if r.split is Split.TEST)


def tally(records: tuple[ImageRecord, ...] | list[ImageRecord]) -> dict[tuple[Split, Subgroup], int]:
    """Recompute the per (split x subgroup) counts from records."""
    counts: dict[tuple[Split, Subgroup], int] = {}
    for r in records:
        key = (r.split, r.subgroup)
        counts[key] = counts.get(key, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# Split specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitRule:
    """One glob worth of files: where they come from and where they go.

    count is a positive integer or None for "all". Globs are interpreted
    relative to the corpus directory implied by the subgroup (COVID subgroup
    reads the COVID corpus; NORMAL/OTHER_DISEASE read the negative corpus).
    """

    glob: str
    split: Split
    subgroup: Subgroup
    count: int | None = None


@dataclass(frozen=True)
class SplitSpec:
    rules: tuple[SplitRule, ...]
    covid_metadata: str | None = None
    negative_metadata: str | None = None
    patient_id_regex: str | None = None

    @classmethod
    def published_default(cls) -> "SplitSpec":
        """The shipped default: COVID globs take everything, negative cells
        take the published per-category counts (700 + 13x100 train,
        1700 + 13x100 test)."""
        rules = [
            SplitRule("train/*", Split.TRAIN, Subgroup.COVID, None),
            SplitRule("test/*", Split.TEST, Subgroup.COVID, None),
            SplitRule("train/no_finding/*", Split.TRAIN, Subgroup.NORMAL, 700),
            SplitRule("test/no_finding/*", Split.TEST, Subgroup.NORMAL, 1700),
        ]
        for sub in NEGATIVE_SUBCLASSES:
            rules.append(SplitRule(f"train/{sub}/*", Split.TRAIN, Subgroup.OTHER_DISEASE, 100))
            rules.append(SplitRule(f"test/{sub}/*", Split.TEST, Subgroup.OTHER_DISEASE, 100))
        return cls(rules=tuple(rules))

    @classmethod
    def from_yaml(cls, path: str | Path) -> "SplitSpec":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"split spec not found: {path}")
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
        if not isinstance(doc, dict) or "rules" not in doc:
            raise ValidationError(f"split spec {path} must be a mapping with a 'rules' list")
        rules = []
        for i, item in enumerate(doc["rules"]):
            try:
                count = item.get("count", "all")
                rules.append(
                    SplitRule(
                        glob=item["glob"],
                        split=Split(item["split"]),
                        subgroup=Subgroup(item["subgroup"]),
                        count=None if count in ("all", None) else int(count),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ValidationError(f"split spec {path} rule #{i}: {exc}") from exc
        patient = doc.get("patient_ids", {}) or {}
        return cls(
            rules=tuple(rules),
            covid_metadata=patient.get("covid_metadata"),
            negative_metadata=patient.get("negative_metadata"),
            patient_id_regex=patient.get("regex"),
        )


def _load_patient_map(corpus_dir: Path, metadata: str | None) -> dict[str, str]:
    """Read a filename -> patient_id CSV shipped with a corpus."""
    if metadata is None:
        return {}
    meta_path = Path(metadata)
    if not meta_path.is_absolute():
        meta_path = corpus_dir / meta_path
    if not meta_path.is_file():
        raise InputError(f"patient metadata file not found: {meta_path}")
    mapping: dict[str, str] = {}
    with open(meta_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"filename", "patient_id"} <= set(reader.fieldnames):
            raise ValidationError(f"{meta_path} must have 'filename' and 'patient_id' columns")
        for row in reader:
            mapping[row["filename"]] = row["patient_id"]
    return mapping


def _patient_id_for(path: Path, mapping: dict[str, str], regex: str | None) -> str:
    if path.name in mapping:
        return mapping[path.name]
    if path.stem in mapping:
        return mapping[path.stem]
    if regex:
        m = re.search(regex, path.stem)
        if m:
            return m.group(1) if m.groups() else m.group(0)
    return path.stem


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def build_manifest(covid_dir: str | Path, negative_dir: str | Path, split_spec: SplitSpec) -> DatasetManifest:
    """Scan both corpora per the split spec and assemble a validated manifest.

    Deterministic: files under each glob are taken in sorted order and the
    final record list is sorted by image_path, so identical inputs serialize
    byte-identically.
    """
    covid_dir, negative_dir = Path(covid_dir), Path(negative_dir)
    for d in (covid_dir, negative_dir):
        if not d.is_dir():
            raise InputError(f"corpus directory does not exist: {d}")

    covid_patients = _load_patient_map(covid_dir, split_spec.covid_metadata)
    negative_patients = _load_patient_map(negative_dir, split_spec.negative_metadata)

    records: list[ImageRecord] = []
    seen_paths: dict[str, str] = {}
    for rule in split_spec.rules:
        if rule.subgroup is Subgroup.COVID:
            base, mapping = covid_dir, covid_patients
            label, source = Label.COVID, Source.COVID_CORPUS
        else:
            base, mapping = negative_dir, negative_patients
            label, source = Label.NON_COVID, Source.NEGATIVE_CORPUS
        files = sorted(p for p in base.glob(rule.glob) if p.is_file())
        if rule.count is not None:
            if len(files) < rule.count:
                raise InputError(
                    f"insufficient images for glob '{rule.glob}' under {base}: "
                    f"need {rule.count}, found {len(files)}"
                )
            files = files[: rule.count]
        for f in files:
            key = str(f)
            if key in seen_paths:
                raise ValidationError(
                    f"duplicate image_path '{key}' (matched by '{seen_paths[key]}' and '{rule.glob}')"
                )
            seen_paths[key] = rule.glob
            records.append(
                ImageRecord(
                    image_path=key,
                    patient_id=_patient_id_for(f, mapping, split_spec.patient_id_regex),
                    label=label,
                    subgroup=rule.subgroup,
                    split=rule.split,
                    source=source,
                )
            )

    _check_patient_disjoint(records)
    records.sort(key=lambda r: r.image_path)
    records_t = tuple(records)
    return DatasetManifest(records=records_t, counts=tally(records_t))


def _check_patient_disjoint(records: list[ImageRecord]) -> None:
    by_split: dict[Split, set[str]] = {Split.TRAIN: set(), Split.TEST: set()}
    for r in records:
        by_split[r.split].add(r.patient_id)
    leaked = sorted(by_split[Split.TRAIN] & by_split[Split.TEST])
    if leaked:
        raise ValidationError(
            "patient(s) present in both TRAIN and TEST: " + ", ".join(leaked)
        )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

class IssueKind(str, enum.Enum):
    MISSING_FILE = "MISSING_FILE"
    UNDECODABLE_FILE = "UNDECODABLE_FILE"
    DUPLICATE_PATH = "DUPLICATE_PATH"
    PATIENT_LEAK = "PATIENT_LEAK"
    INCONSISTENT_LABEL = "INCONSISTENT_LABEL"
    AUGMENTED_IN_TEST = "AUGMENTED_IN_TEST"
    COUNT_MISMATCH = "COUNT_MISMATCH"


@dataclass(frozen=True)
class ValidationIssue:
    kind: IssueKind
    message: str


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple[ValidationIssue, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.issues

    def summary(self) -> str:
        if self.ok:
            return "manifest valid"
        lines = [f"{len(self.issues)} issue(s) found:"]
        lines += [f"  [{i.kind.value}] {i.message}" for i in self.issues]
        return "\n".join(lines)


def validate_manifest(manifest: DatasetManifest, check_images: bool = True) -> ValidationReport:
    """Enumerate every invariant violation; never raises on manifest content.

    The empty report is equivalent to a valid manifest. check_images=False
    skips the per-file existence/decode pass (used for synthetic manifests).
    """
    issues: list[ValidationIssue] = []
    seen: set[str] = set()
    train_patients: dict[str, str] = {}
    test_patients: dict[str, str] = {}

    for r in manifest.records:
        if r.image_path in seen:
            issues.append(ValidationIssue(IssueKind.DUPLICATE_PATH, r.image_path))
        seen.add(r.image_path)

        covid_bits = (r.label is Label.COVID, r.subgroup is Subgroup.COVID, r.source is Source.COVID_CORPUS)
        if len(set(covid_bits)) != 1:
            issues.append(
                ValidationIssue(
                    IssueKind.INCONSISTENT_LABEL,
                    f"{r.image_path}: label={r.label.value} subgroup={r.subgroup.value} source={r.source.value}",
                )
            )
        if r.is_augmented and r.split is not Split.TRAIN:
            issues.append(ValidationIssue(IssueKind.AUGMENTED_IN_TEST, r.image_path))

        bucket = train_patients if r.split is Split.TRAIN else test_patients
        bucket.setdefault(r.patient_id, r.image_path)

        if check_images:
            p = Path(r.image_path)
            if not p.is_file():
                issues.append(ValidationIssue(IssueKind.MISSING_FILE, r.image_path))
            else:
                try:
                    with Image.open(p) as img:
                        img.verify()
                except (UnidentifiedImageError, OSError, SyntaxError):
                    issues.append(ValidationIssue(IssueKind.UNDECODABLE_FILE, r.image_path))

    for patient in sorted(set(train_patients) & set(test_patients)):
        issues.append(
            ValidationIssue(
                IssueKind.PATIENT_LEAK,
                f"patient '{patient}' appears in both splits "
                f"(e.g. {train_patients[patient]} and {test_patients[patient]})",
            )
        )

    recomputed = tally(manifest.records)
    if recomputed != manifest.counts:
        issues.append(
            ValidationIssue(
                IssueKind.COUNT_MISMATCH,
                f"stored counts {_fmt_counts(manifest.counts)} != recomputed {_fmt_counts(recomputed)}",
            )
        )

    return ValidationReport(issues=tuple(issues))


def _fmt_counts(counts: dict[tuple[Split, Subgroup], int]) -> str:
    items = sorted(counts.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value))
    return "{" + ", ".join(f"{s.value}/{g.value}: {n}" for (s, g), n in items) + "}"


# ---------------------------------------------------------------------------
# CSV serialization
# ---------------------------------------------------------------------------

def manifest_to_csv(manifest: DatasetManifest) -> str:
    """Serialize to the fixed-header CSV, rows sorted by image_path."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in sorted(manifest.records, key=lambda r: r.image_path):
        writer.writerow(
            [
                r.image_path,
                r.patient_id,
                r.label.value,
                r.subgroup.value,
                r.split.value,
                r.source.value,
                "1" if r.is_augmented else "0",
                r.augmentation_desc or "",
            ]
        )
    return buf.getvalue()


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    Path(path).write_text(manifest_to_csv(manifest), encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest CSV; content problems are left for validate_manifest."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    records: list[ImageRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != list(MANIFEST_COLUMNS):
            raise ValidationError(f"{path}: unexpected manifest header {header}")
        for row in reader:
            if len(row) != len(MANIFEST_COLUMNS):
                raise ValidationError(f"{path}: malformed row {row}")
            try:
                records.append(
                    ImageRecord(
                        image_path=row[0],
                        patient_id=row[1],
                        label=Label(row[2]),
                        subgroup=Subgroup(row[3]),
                        split=Split(row[4]),
                        source=Source(row[5]),
                        is_augmented=row[6] == "1",
                        augmentation_desc=row[7] or None,
                    )
                )
            except ValueError as exc:
                raise ValidationError(f"{path}: bad enum value in row {row}: {exc}") from exc
    records_t = tuple(records)
    return DatasetManifest(records=records_t, counts=tally(records_t))


def with_counts(manifest: DatasetManifest, counts: dict[tuple[Split, Subgroup], int]) -> DatasetManifest:
    """Replace the stored counts field (used by tests to corrupt a tally)."""
    return replace(manifest, counts=counts)
