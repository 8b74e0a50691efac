"""Hand-rolled protobuf wire encoding for the ONNX messages we emit.

Only the fields the exported graphs need are implemented: float32
initializers in raw_data form, int/float/ints attributes, static tensor
shapes. Writing the bytes directly keeps the tool free of a protobuf
runtime and of the onnx package itself.
"""

from __future__ import annotations

import struct

import numpy as np

IR_VERSION = 8
OPSET_VERSION = 13

TENSOR_FLOAT = 1

ATTR_FLOAT = 1
ATTR_INT = 2
ATTR_INTS = 7


def _varint(value: int) -> bytes:
    if value < 0:
        value += 1 << 64  # two's complement, as protobuf stores negatives
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _key(field: int, wire: int) -> bytes:
    return _varint(field << 3 | wire)


def field_varint(field: int, value: int) -> bytes:
    return _key(field, 0) + _varint(value)


def field_bytes(field: int, payload: bytes) -> bytes:
    return _key(field, 2) + _varint(len(payload)) + payload


def field_str(field: int, text: str) -> bytes:
    return field_bytes(field, text.encode("utf-8"))


def field_float(field: int, value: float) -> bytes:
    return _key(field, 5) + struct.pack("<f", value)


def tensor(name: str, array: np.ndarray) -> bytes:
    """TensorProto with float32 raw_data."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    out = b"".join(field_varint(1, d) for d in arr.shape)
    out += field_varint(2, TENSOR_FLOAT)
    out += field_str(8, name)
    out += field_bytes(9, arr.tobytes())
    return out


def attr_int(name: str, value: int) -> bytes:
    return field_str(1, name) + field_varint(3, value) + field_varint(20, ATTR_INT)


def attr_float(name: str, value: float) -> bytes:
    return field_str(1, name) + field_float(2, value) + field_varint(20, ATTR_FLOAT)


def attr_ints(name: str, values: list[int] | tuple[int, ...]) -> bytes:
    packed = b"".join(_varint(v) for v in values)
    return field_str(1, name) + field_bytes(8, packed) + field_varint(20, ATTR_INTS)


def node(
    op_type: str,
    inputs: list[str],
    outputs: list[str],
    name: str = "",
    attrs: list[bytes] | None = None,
) -> bytes:
    out = b"".join(field_str(1, i) for i in inputs)
    out += b"".join(field_str(2, o) for o in outputs)
    if name:
        out += field_str(3, name)
    out += field_str(4, op_type)
    out += b"".join(field_bytes(5, a) for a in attrs or [])
    return out


def value_info(name: str, dims: tuple[int, ...]) -> bytes:
    shape = b"".join(field_bytes(1, field_varint(1, d)) for d in dims)
    tensor_type = field_varint(1, TENSOR_FLOAT) + field_bytes(2, shape)
    return field_str(1, name) + field_bytes(2, field_bytes(1, tensor_type))


def graph(
    nodes: list[bytes],
    initializers: list[bytes],
    inputs: list[bytes],
    outputs: list[bytes],
    name: str = "backbone",
) -> bytes:
    out = b"".join(field_bytes(1, n) for n in nodes)
    out += field_str(2, name)
    out += b"".join(field_bytes(5, t) for t in initializers)
    out += b"".join(field_bytes(11, v) for v in inputs)
    out += b"".join(field_bytes(12, v) for v in outputs)
    return out


def model(graph_bytes: bytes) -> bytes:
    opset = field_str(1, "") + field_varint(2, OPSET_VERSION)
    return (
        field_varint(1, IR_VERSION)
        + field_bytes(7, graph_bytes)
        + field_bytes(8, opset)
    )
