"""torchvision model -> flat operator list.

The model's forward pass is captured with torch.fx (via
create_feature_extractor, which handles the control flow in densenet), then
each fx node is translated into one operator of the small exchange-format
set: Conv, BatchNormalization, Relu, MaxPool, AveragePool,
GlobalAveragePool, Add, Concat, Flatten. Anything outside that set is
rejected rather than approximated.

The classifier head is never part of the trace: resnet and densenet are cut
at their own flatten step, and squeezenet's feature stack is wrapped with
the same global-pool-and-flatten tail, so every architecture exports with
pooling baked in and produces a (1, feature_dim) output.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models import densenet121, resnet18, resnet50, squeezenet1_1
from torchvision.models.feature_extraction import create_feature_extractor

from .errors import InputError, ValidationError

INPUT_SHAPE = (1, 3, 224, 224)


@dataclass(frozen=True)
class Architecture:
    name: str
    variant: str
    feature_dim: int


ARCHITECTURES = {
    "RESNET18": Architecture("RESNET18", "resnet18", 512),
    "RESNET50": Architecture("RESNET50", "resnet50", 2048),
    "SQUEEZENET": Architecture("SQUEEZENET", "squeezenet1_1", 512),
    "DENSENET121": Architecture("DENSENET121", "densenet121", 1024),
}

_BUILDERS = {
    "RESNET18": resnet18,
    "RESNET50": resnet50,
    "SQUEEZENET": squeezenet1_1,
    "DENSENET121": densenet121,
}


@dataclass
class OpNode:
    op_type: str
    inputs: list[str]
    outputs: list[str]
    name: str = ""
    attrs: dict = field(default_factory=dict)


@dataclass
class TracedGraph:
    nodes: list[OpNode]
    weights: dict[str, np.ndarray]
    input_name: str
    output_name: str


class _PooledFeatures(nn.Module):
    """Feature stack plus the global-pool tail squeezenet keeps in its head."""

    def __init__(self, features: nn.Module):
        super().__init__()
        self.features = features

    def forward(self, x):
        y = self.features(x)
        y = F.adaptive_avg_pool2d(y, (1, 1))
        return torch.flatten(y, 1)


def build_feature_module(arch: str, weights: str, seed: int) -> tuple[torch.fx.GraphModule, str]:
    """Feature-extractor GraphModule for one architecture.

    Returns (module, weights_description). weights is 'pretrained' or
    'random'; random initialization is seeded so repeated exports are
    byte-identical.
    """
    if arch not in ARCHITECTURES:
        raise ValidationError(
            f"unknown architecture {arch!r}; expected one of {sorted(ARCHITECTURES)}"
        )
    builder = _BUILDERS[arch]
    if weights == "pretrained":
        try:
            model = builder(weights="DEFAULT")
        except Exception as exc:
            raise InputError(
                f"pretrained weights for {arch} could not be obtained "
                f"(are downloads available?): {exc}"
            ) from exc
        desc = str(builder.__name__) + ":DEFAULT"
    elif weights == "random":
        torch.manual_seed(seed)
        model = builder(weights=None)
        desc = f"random(seed={seed})"
    else:
        raise ValidationError(f"weights must be 'pretrained' or 'random', got {weights!r}")
    model.eval()
    if arch == "SQUEEZENET":
        model = _PooledFeatures(model.features).eval()
    gm = create_feature_extractor(model, return_nodes={"flatten": "feat"})
    gm.eval()
    return gm, desc


def _pair(value) -> tuple[int, int]:
    if isinstance(value, (tuple, list)):
        if len(value) != 2:
            raise ValidationError(f"expected a 2-element size, got {value!r}")
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _param(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().cpu().numpy().astype(np.float32)


class _Translator:
    def __init__(self, gm: torch.fx.GraphModule):
        self.gm = gm
        self.modules = dict(gm.named_modules())
        self.nodes: list[OpNode] = []
        self.weights: dict[str, np.ndarray] = {}
        self.values: dict[torch.fx.Node, str] = {}
        self.input_name: str | None = None
        self.output_name: str | None = None

    def run(self) -> TracedGraph:
        for node in self.gm.graph.nodes:
            self._dispatch(node)
        if self.input_name is None or self.output_name is None:
            raise ValidationError("traced graph has no input or no output")
        return TracedGraph(
            nodes=self.nodes,
            weights=self.weights,
            input_name=self.input_name,
            output_name=self.output_name,
        )

    def _dispatch(self, node: torch.fx.Node) -> None:
        if node.op == "placeholder":
            if self.input_name is not None:
                raise ValidationError("expected a single graph input")
            self.input_name = node.name
            self.values[node] = node.name
        elif node.op == "call_module":
            self._module(node)
        elif node.op == "call_function":
            self._function(node)
        elif node.op == "output":
            self._output(node)
        else:
            raise ValidationError(f"unsupported fx node kind {node.op!r} ({node.name})")

    def _value(self, node) -> str:
        if not isinstance(node, torch.fx.Node):
            raise ValidationError(f"expected a tensor-producing node, got {node!r}")
        return self.values[node]

    def _emit(self, node: torch.fx.Node, op_type: str, inputs: list[str], attrs: dict | None = None):
        self.nodes.append(
            OpNode(op_type=op_type, inputs=inputs, outputs=[node.name], name=node.name, attrs=attrs or {})
        )
        self.values[node] = node.name

    def _weight(self, name: str, array: np.ndarray) -> str:
        self.weights[name] = array
        return name

    def _module(self, node: torch.fx.Node) -> None:
        mod = self.modules[node.target]
        x = self._value(node.args[0])
        if isinstance(mod, nn.Conv2d):
            self._conv(node, mod, x)
        elif isinstance(mod, nn.BatchNorm2d):
            self._batchnorm(node, mod, x)
        elif isinstance(mod, nn.ReLU):
            self._emit(node, "Relu", [x])
        elif isinstance(mod, nn.MaxPool2d):
            self._maxpool(node, mod, x)
        elif isinstance(mod, nn.AvgPool2d):
            self._avgpool(node, mod, x)
        elif isinstance(mod, nn.AdaptiveAvgPool2d):
            if _pair(mod.output_size) != (1, 1):
                raise ValidationError(
                    f"adaptive pooling to {mod.output_size!r} is not global pooling"
                )
            self._emit(node, "GlobalAveragePool", [x])
        elif isinstance(mod, (nn.Identity, nn.Dropout)):
            self.values[node] = x  # no-op at inference time; rewire around it
        else:
            raise ValidationError(
                f"unsupported module {type(mod).__name__} at {node.target!r}"
            )

    def _conv(self, node: torch.fx.Node, mod: nn.Conv2d, x: str) -> None:
        if mod.groups != 1:
            raise ValidationError(f"grouped convolution at {node.target!r} is not supported")
        if mod.padding_mode != "zeros":
            raise ValidationError(f"padding mode {mod.padding_mode!r} is not supported")
        if isinstance(mod.padding, str):
            raise ValidationError(f"string padding {mod.padding!r} is not supported")
        ph, pw = _pair(mod.padding)
        inputs = [x, self._weight(f"{node.target}.weight", _param(mod.weight))]
        if mod.bias is not None:
            inputs.append(self._weight(f"{node.target}.bias", _param(mod.bias)))
        self._emit(
            node,
            "Conv",
            inputs,
            {
                "dilations": _pair(mod.dilation),
                "group": 1,
                "kernel_shape": _pair(mod.kernel_size),
                "pads": (ph, pw, ph, pw),
                "strides": _pair(mod.stride),
            },
        )

    def _batchnorm(self, node: torch.fx.Node, mod: nn.BatchNorm2d, x: str) -> None:
        if not mod.track_running_stats or mod.running_mean is None:
            raise ValidationError(f"batch norm at {node.target!r} has no running statistics")
        if mod.weight is None or mod.bias is None:
            raise ValidationError(f"batch norm at {node.target!r} has no affine parameters")
        inputs = [
            x,
            self._weight(f"{node.target}.weight", _param(mod.weight)),
            self._weight(f"{node.target}.bias", _param(mod.bias)),
            self._weight(f"{node.target}.running_mean", _param(mod.running_mean)),
            self._weight(f"{node.target}.running_var", _param(mod.running_var)),
        ]
        self._emit(node, "BatchNormalization", inputs, {"epsilon": float(mod.eps)})

    def _maxpool(self, node: torch.fx.Node, mod: nn.MaxPool2d, x: str) -> None:
        if _pair(mod.dilation) != (1, 1):
            raise ValidationError(f"dilated max pooling at {node.target!r} is not supported")
        if mod.return_indices:
            raise ValidationError(f"max pooling with indices at {node.target!r} is not supported")
        ph, pw = _pair(mod.padding)
        self._emit(
            node,
            "MaxPool",
            [x],
            {
                "ceil_mode": int(bool(mod.ceil_mode)),
                "kernel_shape": _pair(mod.kernel_size),
                "pads": (ph, pw, ph, pw),
                "strides": _pair(mod.stride if mod.stride is not None else mod.kernel_size),
            },
        )

    def _avgpool(self, node: torch.fx.Node, mod: nn.AvgPool2d, x: str) -> None:
        ph, pw = _pair(mod.padding)
        # with zero padding both count modes are identical, so the padded
        # region is the only case that actually needs count_include_pad
        if (ph, pw) != (0, 0) and not mod.count_include_pad:
            raise ValidationError(
                f"average pooling at {node.target!r} excludes padding from its counts"
            )
        if mod.ceil_mode:
            raise ValidationError(f"ceil-mode average pooling at {node.target!r} is not supported")
        if mod.divisor_override is not None:
            raise ValidationError(f"divisor override at {node.target!r} is not supported")
        self._emit(
            node,
            "AveragePool",
            [x],
            {
                "count_include_pad": 1,
                "kernel_shape": _pair(mod.kernel_size),
                "pads": (ph, pw, ph, pw),
                "strides": _pair(mod.stride if mod.stride is not None else mod.kernel_size),
            },
        )

    def _function(self, node: torch.fx.Node) -> None:
        target = node.target
        if target in (operator.add, operator.iadd, torch.add):
            self._emit(node, "Add", [self._value(node.args[0]), self._value(node.args[1])])
        elif target is torch.cat:
            parts, axis = self._cat_args(node)
            self._emit(node, "Concat", [self._value(p) for p in parts], {"axis": int(axis)})
        elif target is torch.flatten:
            start = node.args[1] if len(node.args) > 1 else node.kwargs.get("start_dim", 0)
            if int(start) != 1 or len(node.args) > 2 or "end_dim" in node.kwargs:
                raise ValidationError(f"flatten at {node.name!r} must flatten axes 1..end")
            self._emit(node, "Flatten", [self._value(node.args[0])], {"axis": 1})
        elif target is F.relu:
            self._emit(node, "Relu", [self._value(node.args[0])])
        elif target is F.adaptive_avg_pool2d:
            size = node.args[1] if len(node.args) > 1 else node.kwargs.get("output_size")
            if _pair(size) != (1, 1):
                raise ValidationError(f"adaptive pooling to {size!r} is not global pooling")
            self._emit(node, "GlobalAveragePool", [self._value(node.args[0])])
        else:
            raise ValidationError(f"unsupported function {target!r} at {node.name!r}")

    def _cat_args(self, node: torch.fx.Node):
        parts = node.args[0]
        if not isinstance(parts, (list, tuple)) or not parts:
            raise ValidationError(f"concat at {node.name!r} has no tensor list")
        if len(node.args) > 1:
            axis = node.args[1]
        else:
            axis = node.kwargs.get("dim", 0)
        return parts, axis

    def _output(self, node: torch.fx.Node) -> None:
        if self.output_name is not None:
            raise ValidationError("expected a single graph output")
        result = node.args[0]
        if isinstance(result, dict):
            if len(result) != 1:
                raise ValidationError(f"expected one output, got {sorted(result)}")
            result = next(iter(result.values()))
        self.output_name = self._value(result)


def translate(gm: torch.fx.GraphModule) -> TracedGraph:
    return _Translator(gm).run()
