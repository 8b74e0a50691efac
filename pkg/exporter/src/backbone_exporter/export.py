"""Export one torchvision backbone to the frozen exchange format.

The exported file is self-contained: weights are inlined as float32
initializers, the classifier is gone, global pooling and flattening are part
of the graph, and the declared interface is a static (1, 3, 224, 224) input
with a (1, feature_dim) output. Input normalization is deliberately NOT
baked in; the consumer owns preprocessing end to end.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import protowire as pw
from .errors import InputError, ValidationError
from .trace import ARCHITECTURES, INPUT_SHAPE, OpNode, TracedGraph, build_feature_module, translate


@dataclass(frozen=True)
class ExportSpec:
    architecture: str
    out_path: Path
    weights: str = "pretrained"
    seed: int = 0
    opset: int = pw.OPSET_VERSION
    feature_dim: int | None = None  # None: the architecture's documented width

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(
                f"unknown architecture {self.architecture!r}; "
                f"expected one of {sorted(ARCHITECTURES)}"
            )
        if self.opset != pw.OPSET_VERSION:
            raise ValidationError(
                f"only opset {pw.OPSET_VERSION} is supported, got {self.opset}"
            )
        object.__setattr__(self, "out_path", Path(self.out_path))

    @property
    def expected_dim(self) -> int:
        if self.feature_dim is not None:
            return self.feature_dim
        return ARCHITECTURES[self.architecture].feature_dim

    @property
    def sidecar_path(self) -> Path:
        return self.out_path.with_name(self.out_path.name + ".sidecar.txt")


@dataclass(frozen=True)
class ExportResult:
    spec: ExportSpec
    weights_desc: str
    feature_dim: int
    structural_hash: str


def _attr_bytes(attrs: dict) -> list[bytes]:
    out = []
    for key in sorted(attrs):
        value = attrs[key]
        if isinstance(value, (tuple, list)):
            out.append(pw.attr_ints(key, [int(v) for v in value]))
        elif isinstance(value, float):
            out.append(pw.attr_float(key, value))
        else:
            out.append(pw.attr_int(key, int(value)))
    return out


def _serialize(traced: TracedGraph, feature_dim: int) -> bytes:
    nodes = [
        pw.node(n.op_type, n.inputs, n.outputs, n.name, _attr_bytes(n.attrs))
        for n in traced.nodes
    ]
    initializers = [pw.tensor(name, arr) for name, arr in traced.weights.items()]
    inputs = [pw.value_info(traced.input_name, INPUT_SHAPE)]
    outputs = [pw.value_info(traced.output_name, (1, feature_dim))]
    return pw.model(pw.graph(nodes, initializers, inputs, outputs))


def _attr_text(attrs: dict) -> str:
    parts = []
    for key in sorted(attrs):
        value = attrs[key]
        if isinstance(value, (tuple, list)):
            value = ",".join(str(int(v)) for v in value)
        parts.append(f"{key}={value}")
    return " ".join(parts)


def structural_hash(traced: TracedGraph, feature_dim: int, opset: int) -> str:
    """Digest of topology, attributes, and tensor shapes; weight values excluded.

    Stable across exports of the same architecture regardless of where the
    weights came from, so reproducibility checks can compare it directly.
    """
    lines = [
        f"opset={opset}",
        f"input={traced.input_name}:{'x'.join(map(str, INPUT_SHAPE))}",
        f"output={traced.output_name}:1x{feature_dim}",
    ]
    for n in traced.nodes:
        lines.append(
            f"node {n.op_type} {','.join(n.inputs)} -> {','.join(n.outputs)} | {_attr_text(n.attrs)}"
        )
    for name in sorted(traced.weights):
        shape = "x".join(map(str, traced.weights[name].shape))
        lines.append(f"init {name} float32 {shape}")
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def _check_forward_shape(gm: torch.fx.GraphModule, expected_dim: int) -> None:
    with torch.no_grad():
        out = gm(torch.zeros(INPUT_SHAPE))["feat"]
    if tuple(out.shape) != (1, expected_dim):
        raise ValidationError(
            f"feature output shape {tuple(out.shape)} != (1, {expected_dim}); nothing written"
        )
    if not torch.all(torch.isfinite(out)):
        raise ValidationError("feature output is not finite; nothing written")


def _sidecar_text(spec: ExportSpec, result_hash: str, weights_desc: str, dim: int) -> str:
    arch = ARCHITECTURES[spec.architecture]
    fields = {
        "architecture": arch.name,
        "variant": arch.variant,
        "weights": weights_desc,
        "opset": spec.opset,
        "feature_dim": dim,
        "input_shape": "x".join(map(str, INPUT_SHAPE)),
        "output_shape": f"1x{dim}",
        "structural_hash": result_hash,
    }
    return "".join(f"{k}={v}\n" for k, v in fields.items())


def export_backbone(spec: ExportSpec) -> ExportResult:
    """Trace, translate, verify, and write one backbone plus its sidecar.

    The forward-pass shape check runs before anything touches the
    filesystem, so a mismatch leaves no partial artifacts behind.
    """
    gm, weights_desc = build_feature_module(spec.architecture, spec.weights, spec.seed)
    dim = spec.expected_dim
    _check_forward_shape(gm, dim)
    traced = translate(gm)
    digest = structural_hash(traced, dim, spec.opset)
    payload = _serialize(traced, dim)

    out = spec.out_path
    if not out.parent.is_dir():
        raise InputError(f"output directory does not exist: {out.parent}")
    out.write_bytes(payload)
    spec.sidecar_path.write_text(
        _sidecar_text(spec, digest, weights_desc, dim), encoding="utf-8"
    )
    return ExportResult(
        spec=spec, weights_desc=weights_desc, feature_dim=dim, structural_hash=digest
    )
