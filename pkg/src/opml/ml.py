"""Deterministic fixed-point inference engine.

All tensors are Q15.16: signed 32-bit raw values scaled by 2**16. Matrix
products accumulate exactly in 64-bit integers and apply a single arithmetic
right shift at the end; everything wraps two's-complement at 32 bits. There
is no floating point anywhere past quantization, which is what makes two
independent executions (and the VM-lowered path) bit-identical.

A model is a topologically ordered computation graph. Executing it node by
node yields a sequence of graph states; each state commits to the input, the
model and every node output produced so far, which is the sequence a
coarse-grained dispute game bisects over.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from . import merkle
from .hashing import GRAPH_STATE_PREFIX, HashScheme, active_scheme

FRAC = 16
SCALE = 1 << FRAC
INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1

#: Region level used for tensor-image commitments (matches the VM's output
#: region, so a node-output commitment and the VM output subtree root are
#: directly comparable).
TENSOR_REGION_LEVEL = 19

OPS = ("input", "const", "matmul", "bias_add", "relu", "argmax")


class QuantizationRangeError(ValueError):
    """Value outside the representable Q15.16 range; never silently wrapped."""


class ShapeError(ValueError):
    pass


class ModelParseError(ValueError):
    def __init__(self, offset: int, message: str):
        super().__init__(f"at byte {offset}: {message}")
        self.offset = offset


def wrap32s(v: int) -> int:
    """Two's-complement wrap to signed 32-bit."""
    return (v + (1 << 31)) % (1 << 32) - (1 << 31)


def wrap64s(v: int) -> int:
    return (v + (1 << 63)) % (1 << 64) - (1 << 63)


@dataclass(frozen=True)
class FixedTensor:
    shape: tuple[int, ...]
    data: tuple[int, ...]
    frac: int = FRAC

    def __post_init__(self):
        size = 1
        for d in self.shape:
            if d <= 0:
                raise ShapeError(f"bad dimension {d}")
            size *= d
        if len(self.data) != size:
            raise ShapeError(f"{len(self.data)} values for shape {self.shape}")
        for v in self.data:
            if not INT32_MIN <= v <= INT32_MAX:
                raise QuantizationRangeError(f"raw value {v} outside int32")

    def at(self, *idx: int) -> int:
        flat = 0
        for dim, i in zip(self.shape, idx):
            flat = flat * dim + i
        return self.data[flat]


def _flatten(values) -> tuple[tuple[int, ...], list]:
    if not isinstance(values, (list, tuple)):
        return (), [values]
    if not values:
        raise ShapeError("empty tensor")
    shape0, flat = _flatten(values[0])
    out = list(flat)
    for v in values[1:]:
        s, f = _flatten(v)
        if s != shape0:
            raise ShapeError("ragged nesting")
        out += f
    return (len(values),) + shape0, out


def _round_half_away(x: float) -> int:
    import math

    return math.floor(x + 0.5) if x >= 0 else math.ceil(x - 0.5)


def quantize(values, frac: int = FRAC) -> FixedTensor:
    """Reals to fixed point, rounding half away from zero.

    Raises on any value at or beyond 2**(31-frac) in magnitude rather than
    wrapping: quantization is the one boundary where wrapping would silently
    change the model.
    """
    shape, flat = _flatten(values)
    if shape == ():
        shape, flat = (1,), flat
    limit = 1 << (31 - frac)
    raw = []
    for v in flat:
        if not -limit < v < limit:
            raise QuantizationRangeError(f"{v} outside (-{limit}, {limit})")
        r = _round_half_away(v * (1 << frac))
        if not INT32_MIN <= r <= INT32_MAX:
            raise QuantizationRangeError(f"{v} rounds outside int32")
        raw.append(r)
    return FixedTensor(shape, tuple(raw), frac)


def dequantize(t: FixedTensor) -> list[float]:
    return [v / (1 << t.frac) for v in t.data]


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def matmul_fx(a: FixedTensor, b: FixedTensor) -> FixedTensor:
    """C[i,j] = wrap32((sum_h A[i,h]*B[h,j]) asr 16), exact 64-bit accumulation."""
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError("matmul needs rank-2 tensors")
    r, n = a.shape
    n2, p = b.shape
    if n != n2:
        raise ShapeError(f"inner dims differ: {n} vs {n2}")
    out = []
    for i in range(r):
        row = a.data[i * n : (i + 1) * n]
        for j in range(p):
            acc = 0
            for h in range(n):
                acc += row[h] * b.data[h * p + j]
            out.append(wrap32s(wrap64s(acc) >> FRAC))
    return FixedTensor((r, p), tuple(out), a.frac)


def bias_add_fx(x: FixedTensor, bias: FixedTensor) -> FixedTensor:
    """Broadcast bias over the last dimension; wrapping add."""
    if len(bias.shape) != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias {bias.shape} does not broadcast over {x.shape}")
    width = bias.shape[0]
    out = tuple(
        wrap32s(v + bias.data[i % width]) for i, v in enumerate(x.data)
    )
    return FixedTensor(x.shape, out, x.frac)


def relu_fx(x: FixedTensor) -> FixedTensor:
    return FixedTensor(x.shape, tuple(v if v > 0 else 0 for v in x.data), x.frac)


def argmax(x: FixedTensor) -> int:
    """Flat index of the maximum; ties break to the lowest index."""
    best, best_i = x.data[0], 0
    for i, v in enumerate(x.data):
        if v > best:
            best, best_i = v, i
    return best_i


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def serialize_tensor(t: FixedTensor) -> bytes:
    """u32 rank, u32 dims..., raw i32 data, all little-endian."""
    out = struct.pack("<I", len(t.shape))
    out += struct.pack(f"<{len(t.shape)}I", *t.shape)
    out += struct.pack(f"<{len(t.data)}i", *t.data)
    return out


def deserialize_tensor(data: bytes, offset: int = 0, frac: int = FRAC) -> tuple[FixedTensor, int]:
    if len(data) - offset < 4:
        raise ModelParseError(offset, "truncated tensor rank")
    rank = struct.unpack_from("<I", data, offset)[0]
    offset += 4
    if rank > 8:
        raise ModelParseError(offset - 4, f"unreasonable rank {rank}")
    if len(data) - offset < 4 * rank:
        raise ModelParseError(offset, "truncated tensor dims")
    shape = struct.unpack_from(f"<{rank}I", data, offset)
    offset += 4 * rank
    size = 1
    for d in shape:
        size *= d
    if len(data) - offset < 4 * size:
        raise ModelParseError(offset, "truncated tensor data")
    values = struct.unpack_from(f"<{size}i", data, offset)
    return FixedTensor(tuple(shape), tuple(values), frac), offset + 4 * size


def tensor_blob(t: FixedTensor) -> bytes:
    """Preimage-oracle value: u32 total payload length, then the payload."""
    payload = serialize_tensor(t)
    return struct.pack("<I", len(payload)) + payload


def tensor_key(t: FixedTensor, scheme: HashScheme | None = None) -> bytes:
    """Preimage key (content hash of the length-prefixed serialization)."""
    scheme = scheme or active_scheme()
    return scheme.digest(tensor_blob(t))


def tensor_region_root(t: FixedTensor, scheme: HashScheme | None = None) -> bytes:
    """Commitment to the tensor as a memory-region image (what a VM's output
    region holding exactly this tensor hashes to)."""
    scheme = scheme or active_scheme()
    return merkle.region_root(serialize_tensor(t), TENSOR_REGION_LEVEL, scheme)


# ---------------------------------------------------------------------------
# Computation graph
# ---------------------------------------------------------------------------


@dataclass
class GraphNode:
    id: int
    op: str
    input_ids: tuple[int, ...] = ()
    params: FixedTensor | None = None  # const payload
    shape: tuple[int, ...] | None = None  # declared shape for input nodes
    out: FixedTensor | None = None

    _ARITY = {"input": 0, "const": 0, "matmul": 2, "bias_add": 2, "relu": 1, "argmax": 1}

    def validate(self):
        if self.op not in OPS:
            raise ShapeError(f"unknown op {self.op!r}")
        if len(self.input_ids) != self._ARITY[self.op]:
            raise ShapeError(f"{self.op} takes {self._ARITY[self.op]} inputs")
        if self.op == "const" and self.params is None:
            raise ShapeError("const node without payload")
        if self.op == "input" and self.shape is None:
            raise ShapeError("input node without declared shape")


@dataclass
class CompGraph:
    nodes: list[GraphNode]
    output_id: int

    def __post_init__(self):
        self.validate()

    def validate(self):
        for pos, node in enumerate(self.nodes):
            if node.id != pos:
                raise ShapeError("node ids must equal topological positions")
            node.validate()
            for dep in node.input_ids:
                if not 0 <= dep < pos:
                    raise ShapeError(f"node {pos} depends on non-preceding {dep}")
        if not 0 <= self.output_id < len(self.nodes):
            raise ShapeError("bad output node")
        if len(self.input_ids) != 1:
            raise ShapeError("exactly one input node is supported")

    @property
    def input_ids(self) -> list[int]:
        return [n.id for n in self.nodes if n.op == "input"]

    def infer_shapes(self) -> list[tuple[int, ...]]:
        """Static output shape per node; raises ShapeError on mismatch."""
        shapes: list[tuple[int, ...]] = []
        for node in self.nodes:
            if node.op == "input":
                shapes.append(node.shape)
            elif node.op == "const":
                shapes.append(node.params.shape)
            elif node.op == "matmul":
                a, b = (shapes[i] for i in node.input_ids)
                if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
                    raise ShapeError(f"matmul {a} x {b}")
                shapes.append((a[0], b[1]))
            elif node.op == "bias_add":
                x, b = (shapes[i] for i in node.input_ids)
                if len(b) != 1 or x[-1] != b[0]:
                    raise ShapeError(f"bias_add {x} + {b}")
                shapes.append(x)
            elif node.op == "relu":
                shapes.append(shapes[node.input_ids[0]])
            elif node.op == "argmax":
                shapes.append((1,))
        return shapes

    def model_digest(self, scheme: HashScheme | None = None) -> bytes:
        scheme = scheme or active_scheme()
        return scheme.digest(save_model_bytes(self))


_OP_CODES = {op: i for i, op in enumerate(OPS)}
_OP_NAMES = {i: op for op, i in _OP_CODES.items()}

MODEL_MAGIC = b"OPML"
MODEL_VERSION = 1


def save_model_bytes(graph: CompGraph) -> bytes:
    out = bytearray(MODEL_MAGIC)
    out += struct.pack("<HH", MODEL_VERSION, FRAC)
    out += struct.pack("<II", len(graph.nodes), graph.output_id)
    consts: list[FixedTensor] = []
    for node in graph.nodes:
        out += struct.pack("<BB", _OP_CODES[node.op], len(node.input_ids))
        for dep in node.input_ids:
            out += struct.pack("<I", dep)
        if node.op == "input":
            out += struct.pack("<I", len(node.shape))
            out += struct.pack(f"<{len(node.shape)}I", *node.shape)
        elif node.op == "const":
            out += struct.pack("<I", len(consts))
            consts.append(node.params)
    out += struct.pack("<I", len(consts))
    for tensor in consts:
        out += serialize_tensor(tensor)
    return bytes(out)


def load_model_bytes(data: bytes) -> CompGraph:
    if data[:4] != MODEL_MAGIC:
        raise ModelParseError(0, "bad magic")
    if len(data) < 16:
        raise ModelParseError(4, "truncated header")
    version, frac = struct.unpack_from("<HH", data, 4)
    if version != MODEL_VERSION:
        raise ModelParseError(4, f"unsupported version {version}")
    if frac != FRAC:
        raise ModelParseError(6, f"unsupported frac {frac}")
    n_nodes, output_id = struct.unpack_from("<II", data, 8)
    offset = 16
    records = []
    for node_id in range(n_nodes):
        if len(data) - offset < 2:
            raise ModelParseError(offset, "truncated node record")
        op_code, n_inputs = struct.unpack_from("<BB", data, offset)
        offset += 2
        if op_code not in _OP_NAMES:
            raise ModelParseError(offset - 2, f"unknown op code {op_code}")
        if len(data) - offset < 4 * n_inputs:
            raise ModelParseError(offset, "truncated input ids")
        input_ids = struct.unpack_from(f"<{n_inputs}I", data, offset)
        offset += 4 * n_inputs
        op = _OP_NAMES[op_code]
        shape = None
        const_index = None
        if op == "input":
            if len(data) - offset < 4:
                raise ModelParseError(offset, "truncated input shape")
            rank = struct.unpack_from("<I", data, offset)[0]
            offset += 4
            if len(data) - offset < 4 * rank:
                raise ModelParseError(offset, "truncated input dims")
            shape = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
        elif op == "const":
            if len(data) - offset < 4:
                raise ModelParseError(offset, "truncated const index")
            const_index = struct.unpack_from("<I", data, offset)[0]
            offset += 4
        records.append((node_id, op, tuple(input_ids), shape, const_index))
    if len(data) - offset < 4:
        raise ModelParseError(offset, "truncated const count")
    n_consts = struct.unpack_from("<I", data, offset)[0]
    offset += 4
    consts = []
    for _ in range(n_consts):
        tensor, offset = deserialize_tensor(data, offset)
        consts.append(tensor)
    if offset != len(data):
        raise ModelParseError(offset, "trailing bytes")
    nodes = []
    for node_id, op, input_ids, shape, const_index in records:
        params = None
        if const_index is not None:
            if const_index >= len(consts):
                raise ModelParseError(offset, f"const index {const_index} out of range")
            params = consts[const_index]
        nodes.append(GraphNode(node_id, op, input_ids, params=params,
                               shape=tuple(shape) if shape is not None else None))
    return CompGraph(nodes, output_id)


def save_model(graph: CompGraph, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(save_model_bytes(graph))


def load_model(path: str) -> CompGraph:
    with open(path, "rb") as fh:
        return load_model_bytes(fh.read())


# ---------------------------------------------------------------------------
# Execution with per-node state commitments
# ---------------------------------------------------------------------------

_EMPTY_ENTRY = (b"\x00" * 32, b"\x00" * 32)


@dataclass(frozen=True)
class GraphState:
    """Inference state after `computed_prefix` nodes.

    `entries[j]` is (preimage key, region root) of node j's serialized
    output, or zero pairs while uncomputed. The commitment hashes the full
    entry vector plus the model digest and input key, so it moves exactly
    when some node output byte moves.
    """

    computed_prefix: int
    model_digest: bytes
    input_key: bytes
    entries: tuple[tuple[bytes, bytes], ...]
    commitment: bytes

    @staticmethod
    def commit(
        model_digest: bytes,
        input_key: bytes,
        entries: tuple[tuple[bytes, bytes], ...],
        scheme: HashScheme,
    ) -> bytes:
        acc = bytearray(GRAPH_STATE_PREFIX)
        acc += struct.pack("<I", len(entries))
        acc += model_digest
        acc += input_key
        for key, oroot in entries:
            acc += key
            acc += oroot
        return scheme.digest(bytes(acc))


@dataclass(frozen=True)
class GraphFault:
    """Deterministic corruption of one node's output (bit flip in one
    element); downstream nodes recompute from the corrupted value."""

    node_id: int
    element: int
    bit: int = 0

    def apply(self, t: FixedTensor) -> FixedTensor:
        data = list(t.data)
        idx = self.element % len(data)
        data[idx] = wrap32s((data[idx] & 0xFFFFFFFF) ^ (1 << (self.bit % 32)))
        return FixedTensor(t.shape, tuple(data), t.frac)


@dataclass
class GraphRun:
    """One party's full execution record: outputs, states, commitments."""

    graph: CompGraph
    input: FixedTensor
    outputs: list[FixedTensor]
    states: list[GraphState]

    @property
    def commitments(self) -> list[bytes]:
        return [s.commitment for s in self.states]

    @property
    def output(self) -> FixedTensor:
        return self.outputs[self.graph.output_id]

    def state_at(self, index: int) -> GraphState:
        return self.states[min(index, len(self.states) - 1)]

    def commitment_at(self, index: int) -> bytes:
        return self.state_at(index).commitment


def _compute_node(node: GraphNode, operands: list[FixedTensor], input_tensor: FixedTensor) -> FixedTensor:
    if node.op == "input":
        if input_tensor.shape != tuple(node.shape):
            raise ShapeError(f"input {input_tensor.shape} != declared {tuple(node.shape)}")
        return input_tensor
    if node.op == "const":
        return node.params
    if node.op == "matmul":
        return matmul_fx(*operands)
    if node.op == "bias_add":
        return bias_add_fx(*operands)
    if node.op == "relu":
        return relu_fx(*operands)
    if node.op == "argmax":
        return FixedTensor((1,), (argmax(operands[0]),))
    raise ShapeError(f"unknown op {node.op}")


def run_graph(
    graph: CompGraph,
    input_tensor: FixedTensor,
    fault: GraphFault | None = None,
    scheme: HashScheme | None = None,
) -> GraphRun:
    """Node-by-node execution producing the n+1 graph states."""
    scheme = scheme or active_scheme()
    graph.infer_shapes()
    if input_tensor.frac != FRAC:
        raise ShapeError(f"input frac {input_tensor.frac} != engine frac {FRAC}")
    model_digest = graph.model_digest(scheme)
    input_key = tensor_key(input_tensor, scheme)
    entries: list[tuple[bytes, bytes]] = [_EMPTY_ENTRY] * len(graph.nodes)
    states = [
        GraphState(0, model_digest, input_key, tuple(entries),
                   GraphState.commit(model_digest, input_key, tuple(entries), scheme))
    ]
    outputs: list[FixedTensor] = []
    for node in graph.nodes:
        operands = [outputs[i] for i in node.input_ids]
        out = _compute_node(node, operands, input_tensor)
        if fault is not None and fault.node_id == node.id:
            out = fault.apply(out)
        outputs.append(out)
        entries[node.id] = (tensor_key(out, scheme), tensor_region_root(out, scheme))
        snapshot = tuple(entries)
        states.append(
            GraphState(node.id + 1, model_digest, input_key, snapshot,
                       GraphState.commit(model_digest, input_key, snapshot, scheme))
        )
    return GraphRun(graph, input_tensor, outputs, states)


def execute_native(
    graph: CompGraph, input_tensor: FixedTensor, scheme: HashScheme | None = None
) -> tuple[FixedTensor, list[bytes]]:
    """Fast path: compute the output and the per-node commitment sequence."""
    record = run_graph(graph, input_tensor, scheme=scheme)
    return record.output, record.commitments
