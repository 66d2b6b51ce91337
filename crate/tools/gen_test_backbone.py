#!/usr/bin/env python3
"""Regenerate the tiny ONNX backbone fixture used by the test suite.

The network mirrors the tap contract expected by the loader: five conv+relu
stages with 2x2 max pooling between them (cumulative strides 1, 2, 4, 8, 16)
and non-decreasing channel counts (4, 8, 16, 32, 32). Spatial dims are
symbolic so the fixture runs at any input size.

The file is emitted with a minimal hand-rolled protobuf encoder so the
script has no dependencies beyond the standard library; weights come from a
fixed linear congruential generator, making the output reproducible.

Usage: python3 tools/gen_test_backbone.py [out.onnx]
"""

import struct
import sys

FLOAT = 1  # TensorProto.DataType.FLOAT


def varint(n):
    out = b""
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out += bytes([b | 0x80])
        else:
            return out + bytes([b])


def tag(field, wire):
    return varint(field << 3 | wire)


def field_varint(field, value):
    return tag(field, 0) + varint(value)


def field_bytes(field, payload):
    return tag(field, 2) + varint(len(payload)) + payload


def field_str(field, s):
    return field_bytes(field, s.encode())


def attr_ints(name, values):
    body = field_str(1, name) + field_varint(20, 7)  # type = INTS
    for v in values:
        body += field_varint(8, v)
    return field_bytes(5, body)


def node(op, inputs, outputs, name, attrs=b""):
    body = b"".join(field_str(1, i) for i in inputs)
    body += b"".join(field_str(2, o) for o in outputs)
    body += field_str(3, name) + field_str(4, op) + attrs
    return field_bytes(1, body)


def tensor(name, dims, values):
    body = b"".join(field_varint(1, d) for d in dims)
    body += field_varint(2, FLOAT)
    body += field_str(8, name)
    body += field_bytes(9, struct.pack(f"<{len(values)}f", *values))
    return field_bytes(5, body)  # GraphProto.initializer


def value_info(field, name, dims):
    shape = b""
    for d in dims:
        if isinstance(d, int):
            shape += field_bytes(1, field_varint(1, d))
        else:
            shape += field_bytes(1, field_str(2, d))
    tensor_type = field_varint(1, FLOAT) + field_bytes(2, shape)
    type_proto = field_bytes(1, tensor_type)
    return field_bytes(field, field_str(1, name) + field_bytes(2, type_proto))


class Lcg:
    def __init__(self, seed):
        self.state = seed

    def next_unit(self):
        self.state = (self.state * 6364136223846793005 + 1442695040888963407) % 2**64
        return (self.state >> 11) / 2**53


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/data/tiny_backbone.onnx"
    plan = [3, 4, 8, 16, 32, 32]
    rng = Lcg(7)

    graph = value_info(11, "input", [1, 3, "h", "w"])
    prev = "input"
    conv_attrs = (
        attr_ints("kernel_shape", [3, 3])
        + attr_ints("pads", [1, 1, 1, 1])
        + attr_ints("strides", [1, 1])
    )
    pool_attrs = (
        attr_ints("kernel_shape", [2, 2])
        + attr_ints("pads", [0, 0, 0, 0])
        + attr_ints("strides", [2, 2])
    )
    for s in range(5):
        cin, cout = plan[s], plan[s + 1]
        if s > 0:
            graph += node("MaxPool", [prev], [f"pool{s}"], f"pool{s}_node", pool_attrs)
            prev = f"pool{s}"
        scale = 0.5 / (9 * cin) ** 0.5
        weights = [(rng.next_unit() * 2 - 1) * scale for _ in range(cout * cin * 9)]
        bias = [(rng.next_unit() * 2 - 1) * 0.1 for _ in range(cout)]
        graph += tensor(f"w{s + 1}", [cout, cin, 3, 3], weights)
        graph += tensor(f"b{s + 1}", [cout], bias)
        graph += node(
            "Conv", [prev, f"w{s + 1}", f"b{s + 1}"], [f"conv{s + 1}"], f"conv{s + 1}_node", conv_attrs
        )
        graph += node("Relu", [f"conv{s + 1}"], [f"stage{s + 1}"], f"stage{s + 1}", b"")
        prev = f"stage{s + 1}"

    for s in range(1, 6):
        graph += value_info(12, f"stage{s}", [1, plan[s], "h", "w"])
    graph += field_str(2, "tiny_backbone")

    opset = field_bytes(8, field_str(1, "") + field_varint(2, 13))
    model = (
        field_varint(1, 8)  # ir_version
        + field_str(2, "smicqa-test-fixture")
        + opset
        + field_bytes(7, graph)
    )
    with open(out, "wb") as fh:
        fh.write(model)
    print(f"wrote {out} ({len(model)} bytes)")


if __name__ == "__main__":
    main()
