import io
import math
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))  # for the onnx_encode helper

from cxrscreen.evaluate import ScoreEntry, ScoreSet
from cxrscreen.manifest import NEGATIVE_SUBCLASSES, Label, Subgroup


def pytest_terminal_summary(terminalreporter):
    """One status line per acceptance criterion, after the normal summary."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None) if mod else None
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in results.items():
        terminalreporter.write_line(f"{status} {name}")


def make_png_bytes(size: int = 32, seed: int = 7, mode: str = "L") -> bytes:
    """Deterministic small PNG: a reproducible noise image."""
    rng = np.random.Generator(np.random.PCG64(seed))
    if mode == "L":
        arr = rng.integers(0, 256, size=(size, size), dtype=np.uint8)
    else:
        arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def _fill(directory: Path, prefix: str, count: int, png: bytes) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        (directory / f"{prefix}{i:05d}.png").write_bytes(png)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small two-corpus layout: 3 positive train, 4 positive test, a handful
    of negatives in two categories per split."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    covid = root / "covid"
    negative = root / "negative"
    png = make_png_bytes(seed=11)
    _fill(covid / "train", "cov_tr_", 3, png)
    _fill(covid / "test", "cov_te_", 4, png)
    _fill(negative / "train" / "no_finding", "nf_tr_", 6, png)
    _fill(negative / "test" / "no_finding", "nf_te_", 8, png)
    _fill(negative / "train" / "pneumonia", "pn_tr_", 4, png)
    _fill(negative / "test" / "pneumonia", "pn_te_", 5, png)
    return covid, negative


TINY_SPLIT_YAML = """\
rules:
  - {glob: "train/*", split: TRAIN, subgroup: COVID, count: all}
  - {glob: "test/*", split: TEST, subgroup: COVID, count: all}
  - {glob: "train/no_finding/*", split: TRAIN, subgroup: NORMAL, count: 5}
  - {glob: "test/no_finding/*", split: TEST, subgroup: NORMAL, count: 8}
  - {glob: "train/pneumonia/*", split: TRAIN, subgroup: OTHER_DISEASE, count: 3}
  - {glob: "test/pneumonia/*", split: TEST, subgroup: OTHER_DISEASE, count: 5}
"""


@pytest.fixture(scope="session")
def tiny_split_yaml(tmp_path_factory):
    path = tmp_path_factory.mktemp("split") / "tiny_split.yaml"
    path.write_text(TINY_SPLIT_YAML, encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def published_corpus(tmp_path_factory):
    """Corpus at the published scale: 31/40 positives, 700+13x100 train
    negatives, 1700+13x100 test negatives. One PNG byte string reused for
    every file, so creation stays cheap."""
    root = tmp_path_factory.mktemp("published_corpus")
    covid = root / "covid"
    negative = root / "negative"
    png = make_png_bytes(size=16, seed=3)
    _fill(covid / "train", "cov_tr_", 31, png)
    _fill(covid / "test", "cov_te_", 40, png)
    _fill(negative / "train" / "no_finding", "nf_tr_", 700, png)
    _fill(negative / "test" / "no_finding", "nf_te_", 1700, png)
    for sub in NEGATIVE_SUBCLASSES:
        _fill(negative / "train" / sub, f"{sub}_tr_", 100, png)
        _fill(negative / "test" / sub, f"{sub}_te_", 100, png)
    return covid, negative


@pytest.fixture()
def score_rng():
    return np.random.Generator(np.random.PCG64(20260817))


def entry(score, positive, subgroup=None, path=""):
    label = Label.COVID if positive else Label.NON_COVID
    if subgroup is None:
        subgroup = Subgroup.COVID if positive else Subgroup.NORMAL
    return ScoreEntry(score=score, label=label, subgroup=subgroup, image_path=path or f"{score}")


def random_score_set(rng, n_min=2, n_max=200, tie_grid=8):
    """Random set with both labels present and deliberate score ties."""
    n = int(rng.integers(n_min, n_max + 1))
    scores = np.where(
        rng.random(n) < 0.5,
        np.floor(rng.random(n) * tie_grid) / tie_grid + 1.0 / (2 * tie_grid),
        rng.random(n) * 0.98 + 0.01,
    )
    positive = rng.random(n) < 0.5
    positive[0], positive[1] = True, False  # both labels guaranteed
    entries = []
    for i in range(n):
        sub = (
            Subgroup.COVID
            if positive[i]
            else (Subgroup.NORMAL if rng.random() < 0.5 else Subgroup.OTHER_DISEASE)
        )
        entries.append(entry(float(scores[i]), bool(positive[i]), sub, path=f"img{i}"))
    return ScoreSet(tuple(entries))


def mann_whitney(scores: ScoreSet) -> float:
    """Brute-force pairwise estimate, half credit for ties, exact in floats."""
    pos, neg = scores.positives, scores.negatives
    greater = sum(1 for p in pos for q in neg if p > q)
    ties = sum(1 for p in pos for q in neg if p == q)
    return (2 * greater + ties) / (2 * len(pos) * len(neg))


def reference_adam(grad_fn, w0: float, steps: int, lr: float,
                   beta1=0.9, beta2=0.999, eps=1e-8) -> list[float]:
    """Line-by-line scalar transcription of the update recurrences, written
    without arrays so it shares no code path with the package optimizer."""
    w = w0
    m = 0.0
    v = 0.0
    trajectory = []
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        w = w - lr * m_hat / (math.sqrt(v_hat) + eps)
        trajectory.append(w)
    return trajectory
