import io
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from backbone_exporter import ARCHITECTURES, ExportResult, ExportSpec, export_backbone

SEED = 11


def pytest_terminal_summary(terminalreporter):
    """One status line per acceptance criterion, after the normal summary."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None) if mod else None
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in results.items():
        terminalreporter.write_line(f"{status} {name}")


@dataclass(frozen=True)
class ExportBundle:
    path: Path
    sidecar: Path
    result: ExportResult


@pytest.fixture(scope="session")
def exports(tmp_path_factory) -> dict[str, ExportBundle]:
    """All four architectures exported once with seeded random weights."""
    out_dir = tmp_path_factory.mktemp("exports")
    bundles = {}
    for arch in sorted(ARCHITECTURES):
        spec = ExportSpec(
            architecture=arch,
            out_path=out_dir / f"{arch.lower()}.onnx",
            weights="random",
            seed=SEED,
        )
        result = export_backbone(spec)
        bundles[arch] = ExportBundle(
            path=spec.out_path, sidecar=spec.sidecar_path, result=result
        )
    return bundles


@pytest.fixture(scope="session")
def reference_image(tmp_path_factory) -> Path:
    """Deterministic structured image: gradients plus seeded speckle."""
    rng = np.random.Generator(np.random.PCG64(2024))
    size = 64
    yy, xx = np.mgrid[0:size, 0:size]
    base = 90 + 60 * np.sin(2 * np.pi * xx / size) + 50 * np.cos(2 * np.pi * yy / size)
    arr = np.clip(base + rng.normal(scale=25, size=(size, size)), 0, 255).astype(np.uint8)
    path = tmp_path_factory.mktemp("refimg") / "reference.png"
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    path.write_bytes(buf.getvalue())
    return path
