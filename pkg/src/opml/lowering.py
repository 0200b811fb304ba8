"""Compiling graph nodes into MiniVM programs.

Two targets share the same unrolled kernels:

* per-node programs (`lower_node`): operands arrive as preimage keys in the
  input region, get pulled chunk-by-chunk through the oracle (lazy loading),
  and the serialized result lands in the output region. This is the program
  a phase-2 dispute runs over.
* a whole-graph program (`lower_graph`): input and constants sit in their
  memory regions, intermediates live on the heap, and the final output is
  serialized to the output region. This is the single-phase target.

The matmul kernel cannot keep a 64-bit accumulator in 32-bit registers, so
it accumulates the high part (MULFX, products shifted by 16) and the low
16-bit remainders (MUL + AND) separately and recombines at the end:

    (sum prod) asr 16  ==  sum(prod asr 16) + (sum(prod & 0xFFFF) asr 16)

holds exactly because the remainders are non-negative and their sum stays
below 2**31 for inner dimensions under 2**15. Modulo 2**32 the recombined
value equals the native engine's wrapped 64-bit result, so both paths stay
bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import fpvm, ml
from .fpvm import INPUT_BASE, MODEL_BASE, HEAP_BASE, ORACLE_KEY_BASE, ORACLE_VALUE_BASE, OUTPUT_BASE, encode
from .hashing import HashScheme, active_scheme


class LoweringError(ValueError):
    pass


# Registers: r1, r2 operand scratch, r3 main/high accumulator, r4 low
# accumulator or argmax index, r5 product scratch, r7 preimage dest,
# r13 constant 0xFFFF.
_MASK_REG = 13


def _li(words: list[int], rd: int, value: int) -> None:
    words.append(encode("LI", rd=rd))
    words.append(value & 0xFFFFFFFF)


def _emit_key_copy(words: list[int], operand_index: int) -> None:
    """Copy a 32-byte key from the input region into the oracle-key field."""
    _li(words, 1, INPUT_BASE + 32 * operand_index)
    _li(words, 2, ORACLE_KEY_BASE)
    for w in range(8):
        words.append(encode("LW", rd=3, rs=1, imm=4 * w))
        words.append(encode("SW", rt=3, rs=2, imm=4 * w))


def _emit_chunk_loads(words: list[int], slot_leaf: int, n_chunks: int) -> None:
    for ci in range(n_chunks):
        _li(words, 4, ci)
        _li(words, 7, slot_leaf + ci)
        words.append(encode("PREIMAGE", rd=7, rs=4))


def _emit_matmul(words, a_base, b_base, dst_base, r, n, p):
    for i in range(r):
        for j in range(p):
            words.append(encode("ADD", rd=3, rs=0, rt=0))
            words.append(encode("ADD", rd=4, rs=0, rt=0))
            for h in range(n):
                _li(words, 1, a_base + 4 * (i * n + h))
                words.append(encode("LW", rd=1, rs=1, imm=0))
                _li(words, 2, b_base + 4 * (h * p + j))
                words.append(encode("LW", rd=2, rs=2, imm=0))
                words.append(encode("MULFX", rd=5, rs=1, rt=2))
                words.append(encode("ADD", rd=3, rs=3, rt=5))
                words.append(encode("MUL", rd=5, rs=1, rt=2))
                words.append(encode("AND", rd=5, rs=5, rt=_MASK_REG))
                words.append(encode("ADD", rd=4, rs=4, rt=5))
            words.append(encode("SRA", rd=4, rs=4, imm=16))
            words.append(encode("ADD", rd=3, rs=3, rt=4))
            _li(words, 1, dst_base + 4 * (i * p + j))
            words.append(encode("SW", rt=3, rs=1, imm=0))


def _emit_bias_add(words, x_base, b_base, dst_base, count, width):
    for e in range(count):
        _li(words, 1, x_base + 4 * e)
        words.append(encode("LW", rd=1, rs=1, imm=0))
        _li(words, 2, b_base + 4 * (e % width))
        words.append(encode("LW", rd=2, rs=2, imm=0))
        words.append(encode("ADD", rd=3, rs=1, rt=2))
        _li(words, 2, dst_base + 4 * e)
        words.append(encode("SW", rt=3, rs=2, imm=0))


def _emit_relu(words, x_base, dst_base, count):
    for e in range(count):
        _li(words, 1, x_base + 4 * e)
        words.append(encode("LW", rd=2, rs=1, imm=0))
        words.append(encode("ADD", rd=3, rs=0, rt=0))
        words.append(encode("BLT", rs=2, rt=0, imm=1))  # negative: keep zero
        words.append(encode("ADD", rd=3, rs=2, rt=0))
        _li(words, 1, dst_base + 4 * e)
        words.append(encode("SW", rt=3, rs=1, imm=0))


def _emit_argmax(words, x_base, count, dst_base):
    _li(words, 1, x_base)
    words.append(encode("LW", rd=3, rs=1, imm=0))  # best value
    words.append(encode("ADD", rd=4, rs=0, rt=0))  # best index
    for e in range(1, count):
        _li(words, 1, x_base + 4 * e)
        words.append(encode("LW", rd=1, rs=1, imm=0))
        words.append(encode("BLT", rs=3, rt=1, imm=1))  # strictly greater wins
        words.append(encode("BEQ", rs=0, rt=0, imm=3))
        words.append(encode("ADD", rd=3, rs=1, rt=0))
        _li(words, 4, e)
    _li(words, 1, dst_base)
    words.append(encode("SW", rt=4, rs=1, imm=0))


def _emit_header(words, region_base, shape):
    _li(words, 1, region_base)
    _li(words, 2, len(shape))
    words.append(encode("SW", rt=2, rs=1, imm=0))
    for d, dim in enumerate(shape):
        _li(words, 2, dim)
        words.append(encode("SW", rt=2, rs=1, imm=4 * (1 + d)))


def _payload_offset(rank: int) -> int:
    """Offset of raw data inside a serialized tensor (rank word + dims)."""
    return 4 + 4 * rank


def _numel(shape) -> int:
    size = 1
    for d in shape:
        size *= d
    return size


def _emit_kernel(words, op, operand_bases, operand_shapes, dst_base):
    if op == "matmul":
        (r, n), (_, p) = operand_shapes
        _emit_matmul(words, operand_bases[0], operand_bases[1], dst_base, r, n, p)
    elif op == "bias_add":
        _emit_bias_add(words, operand_bases[0], operand_bases[1], dst_base,
                       _numel(operand_shapes[0]), operand_shapes[1][0])
    elif op == "relu":
        _emit_relu(words, operand_bases[0], dst_base, _numel(operand_shapes[0]))
    elif op == "argmax":
        _emit_argmax(words, operand_bases[0], _numel(operand_shapes[0]), dst_base)
    else:
        raise LoweringError(f"op {op!r} has no lowering")


@dataclass
class LoweredNode:
    """A single node compiled for lazy-loading execution."""

    op: str
    program: bytes
    operand_keys: list[bytes]
    preimages: dict[bytes, bytes]
    out_shape: tuple[int, ...]

    @property
    def input_blob(self) -> bytes:
        return b"".join(self.operand_keys)

    def program_root(self, scheme: HashScheme | None = None) -> bytes:
        from . import merkle

        scheme = scheme or active_scheme()
        return merkle.region_root(self.program, fpvm.PROGRAM_LEVEL, scheme)


def lower_node(
    node: ml.GraphNode,
    operands: list[ml.FixedTensor],
    scheme: HashScheme | None = None,
) -> LoweredNode:
    """Compile one graph node into a self-contained MiniVM program.

    The program expects the operand keys in the input region, fetches the
    operand payloads through the preimage oracle, and writes the serialized
    result tensor into the output region.
    """
    scheme = scheme or active_scheme()
    if node.op not in ("matmul", "bias_add", "relu", "argmax"):
        raise LoweringError(f"op {node.op!r} has no lowering")
    out_shape = _node_out_shape(node.op, [t.shape for t in operands])

    words: list[int] = []
    _li(words, _MASK_REG, 0xFFFF)

    keys, preimages, payload_bases = [], {}, []
    slot = 0
    for oi, tensor in enumerate(operands):
        blob = ml.tensor_blob(tensor)
        key = scheme.digest(blob)
        keys.append(key)
        preimages[key] = blob
        _emit_key_copy(words, oi)
        n_chunks = -(-len(blob) // 32)
        _emit_chunk_loads(words, slot // 32, n_chunks)
        # payload: skip the length prefix, the rank word and the dims
        payload_bases.append(ORACLE_VALUE_BASE + slot + 4 + _payload_offset(len(tensor.shape)))
        slot += 32 * n_chunks

    dst_base = OUTPUT_BASE + _payload_offset(len(out_shape))
    _emit_kernel(words, node.op, payload_bases, [t.shape for t in operands], dst_base)
    _emit_header(words, OUTPUT_BASE, out_shape)
    words.append(encode("HALT"))
    return LoweredNode(node.op, fpvm.assemble(words), keys, preimages, out_shape)


def _node_out_shape(op, operand_shapes):
    if op == "matmul":
        (r, n), (n2, p) = operand_shapes
        if n != n2:
            raise LoweringError(f"matmul {operand_shapes}")
        return (r, p)
    if op == "bias_add":
        return operand_shapes[0]
    if op == "relu":
        return operand_shapes[0]
    if op == "argmax":
        return (1,)
    raise LoweringError(op)


def node_initial_state(lowered: LoweredNode, scheme: HashScheme | None = None) -> fpvm.VmState:
    """Fresh VM image for a lowered node: program + operand keys, rest zero."""
    return fpvm.load_program(lowered.program, lowered.input_blob, b"", scheme)


def run_lowered_node(
    lowered: LoweredNode,
    oracle: fpvm.PreimageOracle,
    scheme: HashScheme | None = None,
    max_steps: int = 2_000_000,
) -> ml.FixedTensor:
    state = node_initial_state(lowered, scheme)
    final, _ = fpvm.run(state, oracle, max_steps)
    if final.exit_code != 0:
        raise LoweringError(f"node program trapped with code {final.exit_code}")
    return read_output_tensor(final)


def read_output_tensor(state: fpvm.VmState) -> ml.FixedTensor:
    header = fpvm.read_bytes(state.memory, OUTPUT_BASE, 4)
    rank = int.from_bytes(header, "little")
    size = _payload_offset(rank)
    shape_bytes = fpvm.read_bytes(state.memory, OUTPUT_BASE, size)
    tensor, _ = ml.deserialize_tensor(
        fpvm.read_bytes(state.memory, OUTPUT_BASE, size + 4 * _region_numel(shape_bytes, rank))
    )
    return tensor


def _region_numel(shape_bytes: bytes, rank: int) -> int:
    import struct

    dims = struct.unpack_from(f"<{rank}I", shape_bytes, 4)
    return _numel(dims)


def execute_via_vm(
    graph: ml.CompGraph,
    input_tensor: ml.FixedTensor,
    oracle: fpvm.PreimageOracle | None = None,
    scheme: HashScheme | None = None,
) -> ml.FixedTensor:
    """Prove-path execution: every compute node runs as its own VM program.

    Bit-identical to `ml.execute_native` by construction; the pair is the
    system's core determinism contract.
    """
    scheme = scheme or active_scheme()
    oracle = oracle if oracle is not None else fpvm.PreimageOracle(scheme)
    outputs: list[ml.FixedTensor] = []
    for node in graph.nodes:
        if node.op == "input":
            if input_tensor.shape != tuple(node.shape):
                raise ml.ShapeError("input shape mismatch")
            outputs.append(input_tensor)
            continue
        if node.op == "const":
            outputs.append(node.params)
            continue
        operands = [outputs[i] for i in node.input_ids]
        lowered = lower_node(node, operands, scheme)
        for value in lowered.preimages.values():
            oracle.put(value)
        outputs.append(run_lowered_node(lowered, oracle, scheme))
    return outputs[graph.output_id]


# ---------------------------------------------------------------------------
# Whole-graph (single-phase) program
# ---------------------------------------------------------------------------


@dataclass
class LoweredGraph:
    program: bytes
    model_blob: bytes
    out_shape: tuple[int, ...]
    heap_offsets: dict[int, int]

    def initial_state(
        self, input_tensor: ml.FixedTensor, scheme: HashScheme | None = None
    ) -> fpvm.VmState:
        return fpvm.load_program(
            self.program, ml.serialize_tensor(input_tensor), self.model_blob, scheme
        )


def lower_graph(graph: ml.CompGraph) -> LoweredGraph:
    """Compile the whole computation into one program (no lazy loading):
    input and constants are read in place, intermediates go to the heap,
    and the output node's serialized tensor lands in the output region."""
    shapes = graph.infer_shapes()

    const_offsets: dict[int, int] = {}
    model_parts: list[bytes] = []
    off = 0
    for node in graph.nodes:
        if node.op == "const":
            blob = ml.serialize_tensor(node.params)
            const_offsets[node.id] = off
            padded = blob + b"\x00" * (-len(blob) % 32)
            model_parts.append(padded)
            off += len(padded)
    model_blob = b"".join(model_parts)

    heap_offsets: dict[int, int] = {}
    off = 0
    for node in graph.nodes:
        if node.op in ("input", "const"):
            continue
        heap_offsets[node.id] = off
        off += 32 * -(-(4 * _numel(shapes[node.id])) // 32)

    def payload_base(node_id: int) -> int:
        node = graph.nodes[node_id]
        if node.op == "input":
            return INPUT_BASE + _payload_offset(len(shapes[node_id]))
        if node.op == "const":
            return MODEL_BASE + const_offsets[node_id] + _payload_offset(len(shapes[node_id]))
        return HEAP_BASE + heap_offsets[node_id]

    words: list[int] = []
    _li(words, _MASK_REG, 0xFFFF)
    for node in graph.nodes:
        if node.op in ("input", "const"):
            continue
        operand_bases = [payload_base(i) for i in node.input_ids]
        operand_shapes = [shapes[i] for i in node.input_ids]
        _emit_kernel(words, node.op, operand_bases, operand_shapes,
                     HEAP_BASE + heap_offsets[node.id])

    # Serialize the designated output into the output region.
    out_shape = shapes[graph.output_id]
    out_node = graph.nodes[graph.output_id]
    if out_node.op in ("input", "const"):
        raise LoweringError("output node must be a computed node")
    _emit_header(words, OUTPUT_BASE, out_shape)
    src = HEAP_BASE + heap_offsets[graph.output_id]
    dst = OUTPUT_BASE + _payload_offset(len(out_shape))
    for e in range(_numel(out_shape)):
        _li(words, 1, src + 4 * e)
        words.append(encode("LW", rd=2, rs=1, imm=0))
        _li(words, 1, dst + 4 * e)
        words.append(encode("SW", rt=2, rs=1, imm=0))
    words.append(encode("HALT"))
    return LoweredGraph(fpvm.assemble(words), model_blob, out_shape, heap_offsets)


def graph_fault_to_step_fault(
    lowered: LoweredGraph,
    graph: ml.CompGraph,
    honest_trace: "fpvm.Trace",
    fault: ml.GraphFault,
) -> fpvm.StepFault:
    """Map a node-output corruption onto the whole-graph program's trace.

    Flips the same bit in the store that writes the faulted element's heap
    word, so the corrupted single-phase trace commits to exactly the same
    wrong tensor as the natively corrupted graph run.
    """
    shapes = graph.infer_shapes()
    numel = _numel(shapes[fault.node_id])
    element = fault.element % numel
    addr = HEAP_BASE + lowered.heap_offsets[fault.node_id] + 4 * element
    step_no = fpvm.find_store_step(honest_trace, addr)
    bit_in_leaf = (addr % 32) * 8 + (fault.bit % 32)
    return fpvm.StepFault(step=step_no, leaf_index=addr // 32, bit=bit_in_leaf)
