"""Minimal ONNX graph reader and numpy executor.

Parses the protobuf wire format directly (no protobuf runtime) and evaluates
the small operator set that frozen image-classifier backbones need: Conv,
BatchNormalization, Relu, MaxPool, AveragePool, GlobalAveragePool, Add,
Concat, Flatten, Gemm, Identity. Execution is float64 end to end so results
are a stable comparison target for other runtimes.

Only what those backbones use is supported: group=1 convolutions, explicit
pads (auto_pad NOTSET), single graph input and output, static declared
shapes. Anything else is rejected loudly rather than silently mis-executed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError, ValidationError

# TensorProto.DataType values for the dtypes we accept
TENSOR_FLOAT = 1
TENSOR_INT64 = 7

SUPPORTED_OPS = frozenset(
    {
        "Conv",
        "BatchNormalization",
        "Relu",
        "MaxPool",
        "AveragePool",
        "GlobalAveragePool",
        "Add",
        "Concat",
        "Flatten",
        "Gemm",
        "Identity",
    }
)


# ---------------------------------------------------------------------------
# Protobuf wire-format primitives
# ---------------------------------------------------------------------------

def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise InputError("truncated varint")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise InputError("varint too long")


def _iter_fields(buf: bytes):
    """Yield (field_number, wire_type, value) over one serialized message.

    Wire type 0 yields the varint, 2 yields the bytes payload, 5 yields the
    4-byte payload, 1 yields the 8-byte payload.
    """
    pos = 0
    n = len(buf)
    while pos < n:
        key, pos = _read_varint(buf, pos)
        field_num, wire_type = key >> 3, key & 0x7
        if wire_type == 0:
            value, pos = _read_varint(buf, pos)
        elif wire_type == 2:
            length, pos = _read_varint(buf, pos)
            if pos + length > n:
                raise InputError("truncated length-delimited field")
            value = buf[pos : pos + length]
            pos += length
        elif wire_type == 5:
            value = buf[pos : pos + 4]
            pos += 4
        elif wire_type == 1:
            value = buf[pos : pos + 8]
            pos += 8
        else:
            raise InputError(f"unsupported wire type {wire_type}")
        yield field_num, wire_type, value


def _zigzag_to_signed(value: int) -> int:
    """Protobuf int64 fields are stored two's-complement in a 64-bit varint."""
    if value >= 1 << 63:
        value -= 1 << 64
    return value


# ---------------------------------------------------------------------------
# Model structure
# ---------------------------------------------------------------------------

@dataclass
class Node:
    op_type: str
    name: str
    inputs: list[str]
    outputs: list[str]
    attrs: dict


@dataclass
class Graph:
    nodes: list[Node]
    initializers: dict[str, np.ndarray]
    input_name: str
    input_shape: tuple[int, ...]
    output_name: str
    output_shape: tuple[int, ...]
    opset: int


def _parse_tensor(buf: bytes) -> tuple[str, np.ndarray]:
    dims: list[int] = []
    data_type = 0
    name = ""
    raw = None
    float_data: list[float] = []
    int64_data: list[int] = []
    for field_num, wire_type, value in _iter_fields(buf):
        if field_num == 1:
            dims.append(_zigzag_to_signed(value))
        elif field_num == 2:
            data_type = value
        elif field_num == 4:
            if wire_type == 2:  # packed floats
                float_data.extend(np.frombuffer(value, dtype="<f4").tolist())
            else:
                float_data.append(np.frombuffer(value, dtype="<f4")[0])
        elif field_num == 7:
            if wire_type == 2:  # packed ints
                pos = 0
                while pos < len(value):
                    v, pos = _read_varint(value, pos)
                    int64_data.append(_zigzag_to_signed(v))
            else:
                int64_data.append(_zigzag_to_signed(value))
        elif field_num == 8:
            name = value.decode("utf-8")
        elif field_num == 9:
            raw = value
    if data_type == TENSOR_FLOAT:
        if raw is not None:
            arr = np.frombuffer(raw, dtype="<f4")
        else:
            arr = np.array(float_data, dtype=np.float32)
    elif data_type == TENSOR_INT64:
        if raw is not None:
            arr = np.frombuffer(raw, dtype="<i8")
        else:
            arr = np.array(int64_data, dtype=np.int64)
    else:
        raise InputError(f"initializer {name!r} has unsupported data type {data_type}")
    expected = int(np.prod(dims)) if dims else 1
    if arr.size != expected:
        raise InputError(f"initializer {name!r}: {arr.size} values for shape {dims}")
    return name, arr.reshape(dims).copy()


def _parse_attribute(buf: bytes) -> tuple[str, object]:
    name = ""
    f_val = None
    i_val = None
    s_val = None
    t_val = None
    floats: list[float] = []
    ints: list[int] = []
    for field_num, wire_type, value in _iter_fields(buf):
        if field_num == 1:
            name = value.decode("utf-8")
        elif field_num == 2:
            f_val = float(np.frombuffer(value, dtype="<f4")[0])
        elif field_num == 3:
            i_val = _zigzag_to_signed(value)
        elif field_num == 4:
            s_val = value.decode("utf-8")
        elif field_num == 5:
            t_val = _parse_tensor(value)[1]
        elif field_num == 7:
            if wire_type == 2:
                floats.extend(np.frombuffer(value, dtype="<f4").tolist())
            else:
                floats.append(float(np.frombuffer(value, dtype="<f4")[0]))
        elif field_num == 8:
            if wire_type == 2:
                pos = 0
                while pos < len(value):
                    v, pos = _read_varint(value, pos)
                    ints.append(_zigzag_to_signed(v))
            else:
                ints.append(_zigzag_to_signed(value))
    if t_val is not None:
        return name, t_val
    if f_val is not None:
        return name, f_val
    if i_val is not None:
        return name, i_val
    if s_val is not None:
        return name, s_val
    if floats:
        return name, floats
    return name, ints


def _parse_node(buf: bytes) -> Node:
    inputs: list[str] = []
    outputs: list[str] = []
    name = ""
    op_type = ""
    attrs: dict = {}
    for field_num, _, value in _iter_fields(buf):
        if field_num == 1:
            inputs.append(value.decode("utf-8"))
        elif field_num == 2:
            outputs.append(value.decode("utf-8"))
        elif field_num == 3:
            name = value.decode("utf-8")
        elif field_num == 4:
            op_type = value.decode("utf-8")
        elif field_num == 5:
            k, v = _parse_attribute(value)
            attrs[k] = v
    return Node(op_type=op_type, name=name, inputs=inputs, outputs=outputs, attrs=attrs)


def _parse_value_info(buf: bytes) -> tuple[str, tuple[int, ...]]:
    name = ""
    shape: tuple[int, ...] = ()
    for field_num, _, value in _iter_fields(buf):
        if field_num == 1:
            name = value.decode("utf-8")
        elif field_num == 2:  # TypeProto
            for f2, _, v2 in _iter_fields(value):
                if f2 != 1:  # tensor_type
                    continue
                for f3, _, v3 in _iter_fields(v2):
                    if f3 == 1 and v3 != TENSOR_FLOAT:
                        raise InputError(f"graph value {name!r} is not float")
                    if f3 == 2:  # TensorShapeProto
                        dims = []
                        for f4, _, v4 in _iter_fields(v3):
                            if f4 != 1:
                                continue
                            dim_value = None
                            for f5, _, v5 in _iter_fields(v4):
                                if f5 == 1:
                                    dim_value = _zigzag_to_signed(v5)
                                elif f5 == 3:
                                    raise InputError(
                                        f"graph value {name!r} has a symbolic dimension; "
                                        "static shapes are required"
                                    )
                            if dim_value is None:
                                raise InputError(
                                    f"graph value {name!r} has a dimension without a value"
                                )
                            dims.append(dim_value)
                        shape = tuple(dims)
    return name, shape


def _parse_graph(buf: bytes, opset: int) -> Graph:
    nodes: list[Node] = []
    initializers: dict[str, np.ndarray] = {}
    inputs: list[tuple[str, tuple[int, ...]]] = []
    outputs: list[tuple[str, tuple[int, ...]]] = []
    for field_num, _, value in _iter_fields(buf):
        if field_num == 1:
            nodes.append(_parse_node(value))
        elif field_num == 5:
            name, arr = _parse_tensor(value)
            initializers[name] = arr
        elif field_num == 11:
            inputs.append(_parse_value_info(value))
        elif field_num == 12:
            outputs.append(_parse_value_info(value))
    graph_inputs = [(n, s) for n, s in inputs if n not in initializers]
    if len(graph_inputs) != 1:
        raise InputError(f"expected exactly one graph input, found {len(graph_inputs)}")
    if len(outputs) != 1:
        raise InputError(f"expected exactly one graph output, found {len(outputs)}")
    return Graph(
        nodes=nodes,
        initializers=initializers,
        input_name=graph_inputs[0][0],
        input_shape=graph_inputs[0][1],
        output_name=outputs[0][0],
        output_shape=outputs[0][1],
        opset=opset,
    )


def load_graph(path: str | Path) -> Graph:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"model file not found: {p}")
    buf = p.read_bytes()
    graph_buf = None
    opset = 0
    for field_num, _, value in _iter_fields(buf):
        if field_num == 7:
            graph_buf = value
        elif field_num == 8:  # OperatorSetIdProto
            for f2, _, v2 in _iter_fields(value):
                if f2 == 2:
                    opset = max(opset, _zigzag_to_signed(v2))
    if graph_buf is None:
        raise InputError(f"no graph found in {p}")
    graph = _parse_graph(graph_buf, opset)
    for node in graph.nodes:
        if node.op_type not in SUPPORTED_OPS:
            raise InputError(f"unsupported operator {node.op_type!r} (node {node.name!r})")
    return graph


# ---------------------------------------------------------------------------
# Operator implementations (float64, NCHW)
# ---------------------------------------------------------------------------

def _pair(attrs: dict, key: str, default: tuple[int, int]) -> tuple[int, int]:
    v = attrs.get(key)
    if v is None:
        return default
    v = [int(x) for x in v] if isinstance(v, list) else [int(v), int(v)]
    if len(v) == 1:
        return v[0], v[0]
    return v[0], v[1]


def _pads4(attrs: dict) -> tuple[int, int, int, int]:
    v = attrs.get("pads")
    if v is None:
        return 0, 0, 0, 0
    v = [int(x) for x in v]
    if len(v) != 4:
        raise ValidationError(f"expected 4 pad values, got {v}")
    return v[0], v[1], v[2], v[3]  # top, left, bottom, right


def _check_auto_pad(node: Node) -> None:
    ap = node.attrs.get("auto_pad", "NOTSET")
    if ap not in ("NOTSET", ""):
        raise ValidationError(f"auto_pad {ap!r} is not supported (node {node.name!r})")


def _windows(
    x: np.ndarray,
    kernel: tuple[int, int],
    strides: tuple[int, int],
    dilations: tuple[int, int],
) -> np.ndarray:
    """Strided sliding windows over a padded NCHW tensor.

    Returns a view shaped (N, C, Ho, Wo, kh, kw). The stride subsample happens
    on the view, before anything is materialized, to keep memory flat.
    """
    kh, kw = kernel
    dh, dw = dilations
    eff_kh = (kh - 1) * dh + 1
    eff_kw = (kw - 1) * dw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (eff_kh, eff_kw), axis=(2, 3))
    win = win[:, :, :: strides[0], :: strides[1], :, :]
    if dh > 1 or dw > 1:
        win = win[:, :, :, :, ::dh, ::dw]
    return win


def _op_conv(node: Node, x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    _check_auto_pad(node)
    if int(node.attrs.get("group", 1)) != 1:
        raise ValidationError(f"grouped convolution is not supported (node {node.name!r})")
    kh, kw = w.shape[2], w.shape[3]
    strides = _pair(node.attrs, "strides", (1, 1))
    dilations = _pair(node.attrs, "dilations", (1, 1))
    pt, pl, pb, pr = _pads4(node.attrs)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = _windows(xp, (kh, kw), strides, dilations)
    # win: (N, C, Ho, Wo, kh, kw); w: (F, C, kh, kw) -> (N, Ho, Wo, F)
    out = np.tensordot(win, w.astype(np.float64), axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.astype(np.float64)[None, :, None, None]
    return out


def _op_batchnorm(node: Node, x, scale, bias, mean, var) -> np.ndarray:
    eps = float(node.attrs.get("epsilon", 1e-5))
    scale = scale.astype(np.float64)[None, :, None, None]
    bias = bias.astype(np.float64)[None, :, None, None]
    mean = mean.astype(np.float64)[None, :, None, None]
    var = var.astype(np.float64)[None, :, None, None]
    return (x - mean) / np.sqrt(var + eps) * scale + bias


def _pool_output_pads(
    size: tuple[int, int],
    kernel: tuple[int, int],
    strides: tuple[int, int],
    pads: tuple[int, int, int, int],
    ceil_mode: bool,
) -> tuple[tuple[int, int], tuple[int, int]]:
    """Output spatial size plus the extra bottom/right padding ceil mode needs."""
    h, w = size
    kh, kw = kernel
    sh, sw = strides
    pt, pl, pb, pr = pads
    if ceil_mode:
        ho = -(-(h + pt + pb - kh) // sh) + 1
        wo = -(-(w + pl + pr - kw) // sw) + 1
    else:
        ho = (h + pt + pb - kh) // sh + 1
        wo = (w + pl + pr - kw) // sw + 1
    extra_h = max(0, (ho - 1) * sh + kh - (h + pt + pb))
    extra_w = max(0, (wo - 1) * sw + kw - (w + pl + pr))
    return (ho, wo), (extra_h, extra_w)


def _op_maxpool(node: Node, x: np.ndarray) -> np.ndarray:
    _check_auto_pad(node)
    kernel = _pair(node.attrs, "kernel_shape", (1, 1))
    strides = _pair(node.attrs, "strides", kernel)
    pads = _pads4(node.attrs)
    ceil_mode = bool(node.attrs.get("ceil_mode", 0))
    (_, _), (extra_h, extra_w) = _pool_output_pads(x.shape[2:], kernel, strides, pads, ceil_mode)
    pt, pl, pb, pr = pads
    xp = np.pad(
        x,
        ((0, 0), (0, 0), (pt, pb + extra_h), (pl, pr + extra_w)),
        constant_values=-np.inf,
    )
    win = _windows(xp, kernel, strides, (1, 1))
    return win.max(axis=(4, 5))


def _op_averagepool(node: Node, x: np.ndarray) -> np.ndarray:
    _check_auto_pad(node)
    if not int(node.attrs.get("count_include_pad", 0)):
        raise ValidationError(
            f"AveragePool requires count_include_pad=1 (node {node.name!r})"
        )
    if int(node.attrs.get("ceil_mode", 0)):
        raise ValidationError(f"AveragePool ceil_mode is not supported (node {node.name!r})")
    kernel = _pair(node.attrs, "kernel_shape", (1, 1))
    strides = _pair(node.attrs, "strides", kernel)
    pt, pl, pb, pr = _pads4(node.attrs)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = _windows(xp, kernel, strides, (1, 1))
    return win.mean(axis=(4, 5))


def _op_gemm(node: Node, a: np.ndarray, b: np.ndarray, c: np.ndarray | None) -> np.ndarray:
    alpha = float(node.attrs.get("alpha", 1.0))
    beta = float(node.attrs.get("beta", 1.0))
    if int(node.attrs.get("transA", 0)):
        a = a.T
    if int(node.attrs.get("transB", 0)):
        b = b.T
    out = alpha * (a @ b.astype(np.float64))
    if c is not None:
        out = out + beta * c.astype(np.float64)
    return out


def _op_flatten(node: Node, x: np.ndarray) -> np.ndarray:
    axis = int(node.attrs.get("axis", 1))
    if axis < 0:
        axis += x.ndim
    lead = int(np.prod(x.shape[:axis])) if axis > 0 else 1
    return x.reshape(lead, -1)


def run_graph(graph: Graph, x: np.ndarray) -> np.ndarray:
    """Evaluate the graph on one input batch, float64 throughout."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != graph.input_shape:
        raise ValidationError(
            f"input shape {x.shape} does not match graph input {graph.input_shape}"
        )
    env: dict[str, np.ndarray] = {graph.input_name: x}

    def fetch(name: str) -> np.ndarray:
        if name in env:
            return env[name]
        if name in graph.initializers:
            return graph.initializers[name].astype(np.float64)
        raise ValidationError(f"node input {name!r} is not available")

    for node in graph.nodes:
        ins = [fetch(n) if n else None for n in node.inputs]
        if node.op_type == "Conv":
            out = _op_conv(node, ins[0], ins[1], ins[2] if len(ins) > 2 else None)
        elif node.op_type == "BatchNormalization":
            out = _op_batchnorm(node, *ins[:5])
        elif node.op_type == "Relu":
            out = np.maximum(ins[0], 0.0)
        elif node.op_type == "MaxPool":
            out = _op_maxpool(node, ins[0])
        elif node.op_type == "AveragePool":
            out = _op_averagepool(node, ins[0])
        elif node.op_type == "GlobalAveragePool":
            out = ins[0].mean(axis=(2, 3), keepdims=True)
        elif node.op_type == "Add":
            out = ins[0] + ins[1]
        elif node.op_type == "Concat":
            out = np.concatenate(ins, axis=int(node.attrs["axis"]))
        elif node.op_type == "Flatten":
            out = _op_flatten(node, ins[0])
        elif node.op_type == "Gemm":
            out = _op_gemm(node, ins[0], ins[1], ins[2] if len(ins) > 2 else None)
        elif node.op_type == "Identity":
            out = ins[0]
        else:
            raise ValidationError(f"unsupported operator {node.op_type!r}")
        env[node.outputs[0]] = out

    if graph.output_name not in env:
        raise ValidationError(f"graph output {graph.output_name!r} was never produced")
    out = env[graph.output_name]
    if out.shape != graph.output_shape:
        raise ValidationError(
            f"output shape {out.shape} does not match declared {graph.output_shape}"
        )
    return out
