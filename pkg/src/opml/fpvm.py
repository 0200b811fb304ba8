"""Deterministic fraud-proof virtual machine ("MiniVM").

The machine is a pure state transition function over Merkle-committed
memory: 16 x 32-bit registers (r0 wired to zero), a 32-bit program counter,
exit flags and a 27-level sparse memory tree. Every state hashes to a single
root, so two parties can dispute an execution by comparing roots, and a
single disputed step can be re-executed by a verifier that holds nothing but
the pre-state root and a small witness.

Instruction set (14 opcodes, all arithmetic two's-complement wrapping):

  LI rd           rd <- next 32-bit word, pc += 8
  LW rd, rs, imm  rd <- mem32[rs + imm]         (4-byte aligned, else trap)
  SW rt, rs, imm  mem32[rs + imm] <- rt
  ADD/SUB/MUL/AND rd, rs, rt
  MULFX rd, rs, rt   rd <- wrap32((rs * rt) asr 16), signed 64-bit product
  SRA rd, rs, imm    rd <- signed rs >> (imm & 31)
  BEQ rs, rt, imm    pc-relative branch, offset in words from pc+4
  BLT rs, rt, imm    signed less-than branch
  JMP rd, rs, imm    rd <- pc+4; pc <- rs + imm*4
  PREIMAGE rd, rs    load 32-byte chunk regs[rs] of the preimage keyed at
                     the oracle-key field into oracle-value leaf regs[rd]
  HALT imm           exited <- true, exit_code <- imm & 0xFF

Unknown opcodes and misaligned accesses trap (exit with a trap code),
never raise: hostile programs must still be arbitrable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import merkle
from .hashing import HashScheme, VM_STATE_PREFIX, active_scheme

# Fixed memory map. Regions are leaf-aligned and power-of-two sized so each
# one is a single Merkle subtree.
PROGRAM_BASE = 0x0000_0000
INPUT_BASE = 0x0200_0000
OUTPUT_BASE = 0x0300_0000
ORACLE_KEY_BASE = 0x0400_0000
ORACLE_VALUE_BASE = 0x0410_0000
MODEL_BASE = 0x0800_0000
HEAP_BASE = 0x1000_0000

PROGRAM_LEVEL = 20  # 2**20 leaves = 32 MiB
INPUT_LEVEL = 19  # 16 MiB
OUTPUT_LEVEL = 19
MODEL_LEVEL = 22  # 128 MiB

_ORACLE_VALUE_LEAVES = (MODEL_BASE - ORACLE_VALUE_BASE) // 32

MULFX_SHIFT = 16

MASK32 = 0xFFFF_FFFF

# Exit codes for trap states.
TRAP_BAD_OPCODE = 0xFE
TRAP_BAD_ALIGN = 0xFD
TRAP_BAD_PC = 0xFC
TRAP_BAD_REGION = 0xFB

OPCODES = {
    "LI": 0x01,
    "LW": 0x02,
    "SW": 0x03,
    "ADD": 0x10,
    "SUB": 0x11,
    "MUL": 0x12,
    "MULFX": 0x13,
    "SRA": 0x14,
    "AND": 0x15,
    "BEQ": 0x20,
    "BLT": 0x21,
    "JMP": 0x22,
    "PREIMAGE": 0x30,
    "HALT": 0x3F,
}
OPNAMES = {v: k for k, v in OPCODES.items()}


class MissingPreimageError(KeyError):
    """The host oracle has no value for a requested key."""


class BudgetExceededError(RuntimeError):
    """Step budget ran out before HALT; carries the partial state."""

    def __init__(self, state: "VmState", steps: int):
        super().__init__(f"no HALT within {steps} steps")
        self.state = state
        self.steps = steps


def wrap32(v: int) -> int:
    return v & MASK32


def sign32(v: int) -> int:
    v &= MASK32
    return v - 0x1_0000_0000 if v & 0x8000_0000 else v


def sext12(imm: int) -> int:
    imm &= 0xFFF
    return imm - 0x1000 if imm & 0x800 else imm


def encode(op: str, rd: int = 0, rs: int = 0, rt: int = 0, imm: int = 0) -> int:
    """Pack one instruction word; imm is a 12-bit signed field."""
    if not -0x800 <= imm < 0x800:
        raise ValueError(f"immediate {imm} out of 12-bit signed range")
    return (
        (OPCODES[op] << 24)
        | ((rd & 0xF) << 20)
        | ((rs & 0xF) << 16)
        | ((rt & 0xF) << 12)
        | (imm & 0xFFF)
    )


@dataclass(frozen=True)
class Instruction:
    op: str
    rd: int
    rs: int
    rt: int
    imm: int


def decode(word: int) -> Instruction | None:
    """Decode a word; None for unknown opcodes (the step logic traps)."""
    op = OPNAMES.get((word >> 24) & 0xFF)
    if op is None:
        return None
    return Instruction(
        op=op,
        rd=(word >> 20) & 0xF,
        rs=(word >> 16) & 0xF,
        rt=(word >> 12) & 0xF,
        imm=sext12(word),
    )


class PreimageOracle:
    """Content-addressed host store: key = H(value), checked on insertion."""

    def __init__(self, scheme: HashScheme | None = None):
        self.scheme = scheme or active_scheme()
        self._map: dict[bytes, bytes] = {}

    def put(self, value: bytes) -> bytes:
        key = self.scheme.digest(value)
        self._map[key] = value
        return key

    def get(self, key: bytes) -> bytes:
        if key not in self._map:
            raise MissingPreimageError(key.hex())
        return self._map[key]

    def chunk(self, key: bytes, index: int) -> bytes:
        """32-byte slice `index` of the value, zero padded past the end."""
        value = self.get(key)
        piece = value[32 * index : 32 * index + 32]
        return piece + b"\x00" * (32 - len(piece))

    def __contains__(self, key: bytes) -> bool:
        return key in self._map

    def merge(self, other: "PreimageOracle") -> None:
        self._map.update(other._map)


@dataclass(frozen=True)
class VmFields:
    """The non-memory half of a VM state; together with the memory root it
    is the exact preimage of the state root."""

    pc: int
    regs: tuple[int, ...]
    exited: bool
    exit_code: int
    memory_root: bytes

    def to_bytes(self) -> bytes:
        return (
            struct.pack("<I", self.pc)
            + struct.pack("<16I", *self.regs)
            + struct.pack("<BB", int(self.exited), self.exit_code)
            + self.memory_root
        )

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["VmFields", int]:
        if len(data) - offset < 102:
            raise ValueError("truncated vm fields")
        pc = struct.unpack_from("<I", data, offset)[0]
        regs = struct.unpack_from("<16I", data, offset + 4)
        exited, exit_code = struct.unpack_from("<BB", data, offset + 68)
        root = bytes(data[offset + 70 : offset + 102])
        return cls(pc, tuple(regs), bool(exited), exit_code, root), offset + 102

    def state_root(self, scheme: HashScheme | None = None) -> bytes:
        scheme = scheme or active_scheme()
        return scheme.digest(VM_STATE_PREFIX + self.to_bytes())


@dataclass
class VmState:
    pc: int
    regs: tuple[int, ...]
    memory: merkle.MemTree
    exited: bool = False
    exit_code: int = 0
    step_count: int = 0

    @property
    def scheme(self) -> HashScheme:
        return self.memory.scheme

    def fields(self) -> VmFields:
        return VmFields(self.pc, self.regs, self.exited, self.exit_code, self.memory.root())


def fresh_state(scheme: HashScheme | None = None) -> VmState:
    return VmState(pc=0, regs=(0,) * 16, memory=merkle.MemTree(scheme))


def state_root(state: VmState) -> bytes:
    """Commitment to the full machine state (registers, pc, flags, memory)."""
    return state.fields().state_root(state.scheme)


def write_bytes(tree: merkle.MemTree, base: int, data: bytes) -> merkle.MemTree:
    """Write a byte string at a leaf-aligned base address."""
    if base % 32 != 0:
        raise merkle.AlignmentError(f"base {base:#x} not leaf aligned")
    for i in range(0, len(data), 32):
        chunk = data[i : i + 32]
        chunk += b"\x00" * (32 - len(chunk))
        tree = tree.update_leaf((base + i) // 32, chunk)
    return tree


def read_bytes(tree: merkle.MemTree, base: int, length: int) -> bytes:
    out = bytearray()
    first_leaf = base // 32
    last_leaf = (base + length - 1) // 32 if length else first_leaf
    for leaf_index in range(first_leaf, last_leaf + 1):
        out += tree.get_leaf(leaf_index)
    skip = base % 32
    return bytes(out[skip : skip + length])


def load_program(
    program: bytes,
    input_blob: bytes = b"",
    model_blob: bytes = b"",
    scheme: HashScheme | None = None,
) -> VmState:
    """Fresh machine with code, input and model images in their regions."""
    tree = merkle.MemTree(scheme)
    tree = write_bytes(tree, PROGRAM_BASE, program)
    if input_blob:
        tree = write_bytes(tree, INPUT_BASE, input_blob)
    if model_blob:
        tree = write_bytes(tree, MODEL_BASE, model_blob)
    return VmState(pc=0, regs=(0,) * 16, memory=tree)


def assemble(instructions: list[int]) -> bytes:
    return b"".join(struct.pack("<I", w) for w in instructions)


def _read_word(tree: merkle.MemTree, addr: int) -> int:
    leaf = tree.get_leaf(addr >> 5)
    off = addr & 31
    return struct.unpack_from("<I", leaf, off)[0]


def _write_word(tree: merkle.MemTree, addr: int, value: int) -> merkle.MemTree:
    leaf_index = addr >> 5
    leaf = bytearray(tree.get_leaf(leaf_index))
    struct.pack_into("<I", leaf, addr & 31, value & MASK32)
    return tree.update_leaf(leaf_index, bytes(leaf))


def _set_reg(regs: tuple[int, ...], idx: int, value: int) -> tuple[int, ...]:
    if idx == 0:
        return regs  # r0 is hardwired to zero
    return regs[:idx] + (wrap32(value),) + regs[idx + 1 :]


def _trap(state: VmState, code: int) -> VmState:
    return VmState(
        pc=state.pc,
        regs=state.regs,
        memory=state.memory,
        exited=True,
        exit_code=code,
        step_count=state.step_count + 1,
    )


def step(state: VmState, oracle: PreimageOracle | None = None) -> VmState:
    """Execute exactly one instruction; identity once exited."""
    if state.exited:
        return state
    pc, regs, tree = state.pc, state.regs, state.memory
    if pc % 4 != 0:
        return _trap(state, TRAP_BAD_PC)
    instr = decode(_read_word(tree, pc))
    if instr is None:
        return _trap(state, TRAP_BAD_OPCODE)

    next_pc = wrap32(pc + 4)
    op = instr.op
    if op == "LI":
        regs = _set_reg(regs, instr.rd, _read_word(tree, next_pc))
        next_pc = wrap32(pc + 8)
    elif op == "LW":
        addr = wrap32(regs[instr.rs] + instr.imm)
        if addr % 4 != 0:
            return _trap(state, TRAP_BAD_ALIGN)
        regs = _set_reg(regs, instr.rd, _read_word(tree, addr))
    elif op == "SW":
        addr = wrap32(regs[instr.rs] + instr.imm)
        if addr % 4 != 0:
            return _trap(state, TRAP_BAD_ALIGN)
        tree = _write_word(tree, addr, regs[instr.rt])
    elif op == "ADD":
        regs = _set_reg(regs, instr.rd, regs[instr.rs] + regs[instr.rt])
    elif op == "SUB":
        regs = _set_reg(regs, instr.rd, regs[instr.rs] - regs[instr.rt])
    elif op == "MUL":
        regs = _set_reg(regs, instr.rd, regs[instr.rs] * regs[instr.rt])
    elif op == "MULFX":
        prod = sign32(regs[instr.rs]) * sign32(regs[instr.rt])
        regs = _set_reg(regs, instr.rd, prod >> MULFX_SHIFT)
    elif op == "SRA":
        regs = _set_reg(regs, instr.rd, sign32(regs[instr.rs]) >> (instr.imm & 31))
    elif op == "AND":
        regs = _set_reg(regs, instr.rd, regs[instr.rs] & regs[instr.rt])
    elif op == "BEQ":
        if regs[instr.rs] == regs[instr.rt]:
            next_pc = wrap32(pc + 4 + 4 * instr.imm)
    elif op == "BLT":
        if sign32(regs[instr.rs]) < sign32(regs[instr.rt]):
            next_pc = wrap32(pc + 4 + 4 * instr.imm)
    elif op == "JMP":
        target = wrap32(regs[instr.rs] + 4 * instr.imm)
        regs = _set_reg(regs, instr.rd, pc + 4)
        next_pc = target
    elif op == "PREIMAGE":
        if oracle is None:
            raise MissingPreimageError("no oracle attached to this machine")
        key = tree.get_leaf(ORACLE_KEY_BASE // 32)
        value_chunk = oracle.chunk(key, regs[instr.rs])
        dest_leaf = ORACLE_VALUE_BASE // 32 + regs[instr.rd]
        if regs[instr.rd] >= _ORACLE_VALUE_LEAVES:
            return _trap(state, TRAP_BAD_REGION)
        tree = tree.update_leaf(dest_leaf, value_chunk)
    elif op == "HALT":
        return VmState(
            pc=pc,
            regs=regs,
            memory=tree,
            exited=True,
            exit_code=instr.imm & 0xFF,
            step_count=state.step_count + 1,
        )
    return VmState(
        pc=next_pc,
        regs=regs,
        memory=tree,
        exited=False,
        exit_code=0,
        step_count=state.step_count + 1,
    )


def run(
    state: VmState, oracle: PreimageOracle | None = None, max_steps: int = 1_000_000
) -> tuple[VmState, int]:
    """Run until HALT; returns (final state, executed step count)."""
    if max_steps <= 0:
        raise ValueError("max_steps must be positive")
    steps = 0
    while not state.exited:
        if steps >= max_steps:
            raise BudgetExceededError(state, steps)
        state = step(state, oracle)
        steps += 1
    return state, steps


def snapshot_at(state: VmState, oracle: PreimageOracle | None, k: int) -> VmState:
    """State after exactly k steps (clamped past HALT by the exit fixpoint)."""
    for _ in range(k):
        if state.exited:
            break
        state = step(state, oracle)
    return state


@dataclass(frozen=True)
class StepFault:
    """Deterministic corruption: after executing step `step` (1-based),
    XOR one bit into the given memory leaf. Re-execution with the same fault
    reproduces the same corrupted trace, which is the self-consistent
    adversary the dispute protocol has to beat."""

    step: int
    leaf_index: int
    bit: int

    def apply(self, state: VmState) -> VmState:
        leaf = bytearray(state.memory.get_leaf(self.leaf_index))
        leaf[self.bit // 8] ^= 1 << (self.bit % 8)
        return VmState(
            pc=state.pc,
            regs=state.regs,
            memory=state.memory.update_leaf(self.leaf_index, bytes(leaf)),
            exited=state.exited,
            exit_code=state.exit_code,
            step_count=state.step_count,
        )


class Trace:
    """A full execution trace: states[i] is the machine after i steps.

    States share memory structurally, so holding a few thousand of them is
    cheap. `roots` is the per-index state-root sequence the dispute game
    bisects over.
    """

    def __init__(self, states: list[VmState], scheme: HashScheme):
        self.states = states
        self.scheme = scheme
        self.roots = [state_root(s) for s in states]

    def __len__(self) -> int:
        return len(self.states) - 1

    def root_at(self, index: int) -> bytes:
        """Root at `index`, extending past HALT by the exit fixpoint."""
        if index < len(self.roots):
            return self.roots[index]
        return self.roots[-1]

    def state_at(self, index: int) -> VmState:
        if index < len(self.states):
            return self.states[index]
        return self.states[-1]


def find_store_step(trace: Trace, addr: int) -> int:
    """1-based index of the step whose SW writes the given word address."""
    for s in range(1, len(trace.states)):
        pre = trace.states[s - 1]
        if pre.exited or pre.pc % 4 != 0:
            continue
        instr = decode(_read_word(pre.memory, pre.pc))
        if instr is None or instr.op != "SW":
            continue
        if wrap32(pre.regs[instr.rs] + instr.imm) == addr:
            return s
    raise ValueError(f"no store writes {addr:#x}")


def run_trace(
    state: VmState,
    oracle: PreimageOracle | None = None,
    max_steps: int = 1_000_000,
    fault: StepFault | None = None,
) -> Trace:
    """Execute to HALT recording every state; optionally inject a fault."""
    states = [state]
    steps = 0
    while not states[-1].exited:
        if steps >= max_steps:
            raise BudgetExceededError(states[-1], steps)
        nxt = step(states[-1], oracle)
        steps += 1
        if fault is not None and steps == fault.step:
            nxt = fault.apply(nxt)
        states.append(nxt)
    return Trace(states, state.scheme)


# ---------------------------------------------------------------------------
# One-step witnesses and the contract-side verifier.
# ---------------------------------------------------------------------------


@dataclass
class PreimageChunk:
    key: bytes
    index: int
    data: bytes


@dataclass
class StepWitness:
    """Everything an arbiter needs to re-execute one step against a root.

    Bounded by construction: at most one fetch read plus one extra fetch
    leaf (LI straddling a leaf), one data or oracle-key read, one write,
    and one 32-byte preimage chunk.
    """

    pre_fields: VmFields
    mem_reads: list[tuple[int, bytes, merkle.MerkleProof]] = field(default_factory=list)
    mem_writes: list[tuple[int, bytes, bytes, merkle.MerkleProof]] = field(default_factory=list)
    preimage_chunk: PreimageChunk | None = None

    def to_bytes(self) -> bytes:
        out = bytearray(self.pre_fields.to_bytes())
        out.append(len(self.mem_reads))
        for addr, leaf, proof in self.mem_reads:
            out += struct.pack("<I", addr)
            out += leaf
            out += proof.to_bytes()
        out.append(len(self.mem_writes))
        for addr, old, new, proof in self.mem_writes:
            out += struct.pack("<I", addr)
            out += old
            out += new
            out += proof.to_bytes()
        if self.preimage_chunk is None:
            out.append(0)
        else:
            out.append(1)
            out += self.preimage_chunk.key
            out += struct.pack("<I", self.preimage_chunk.index)
            out += self.preimage_chunk.data
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "StepWitness":
        fields_, off = VmFields.from_bytes(data)
        if len(data) <= off:
            raise ValueError("truncated witness")
        n_reads = data[off]
        off += 1
        reads = []
        for _ in range(n_reads):
            if len(data) - off < 36:
                raise ValueError("truncated read record")
            addr = struct.unpack_from("<I", data, off)[0]
            leaf = bytes(data[off + 4 : off + 36])
            proof, off = merkle.MerkleProof.from_bytes(data, off + 36)
            reads.append((addr, leaf, proof))
        if len(data) <= off:
            raise ValueError("truncated witness")
        n_writes = data[off]
        off += 1
        writes = []
        for _ in range(n_writes):
            if len(data) - off < 68:
                raise ValueError("truncated write record")
            addr = struct.unpack_from("<I", data, off)[0]
            old = bytes(data[off + 4 : off + 36])
            new = bytes(data[off + 36 : off + 68])
            proof, off = merkle.MerkleProof.from_bytes(data, off + 68)
            writes.append((addr, old, new, proof))
        if len(data) <= off:
            raise ValueError("truncated witness")
        chunk = None
        if data[off] == 1:
            if len(data) - off < 1 + 32 + 4 + 32:
                raise ValueError("truncated preimage chunk")
            key = bytes(data[off + 1 : off + 33])
            index = struct.unpack_from("<I", data, off + 33)[0]
            chunk_data = bytes(data[off + 37 : off + 69])
            chunk = PreimageChunk(key, index, chunk_data)
            off += 69
        elif data[off] == 0:
            off += 1
        else:
            raise ValueError("bad chunk flag")
        if off != len(data):
            raise ValueError("trailing bytes after witness")
        return cls(fields_, reads, writes, chunk)


def _required_accesses(state: VmState) -> tuple[list[int], Instruction | None]:
    """Leaf addresses the next step will read (fetch first)."""
    if state.pc % 4 != 0:
        return [], None  # misaligned-pc trap touches nothing
    reads = [state.pc & ~31]
    instr = decode(_read_word(state.memory, state.pc))
    if instr is None:
        return reads, None
    if instr.op == "LI":
        second = wrap32(state.pc + 4) & ~31
        if second not in reads:
            reads.append(second)
    elif instr.op == "LW":
        addr = wrap32(state.regs[instr.rs] + instr.imm)
        if addr % 4 == 0:
            leaf_base = addr & ~31
            if leaf_base not in reads:
                reads.append(leaf_base)
    elif instr.op == "PREIMAGE":
        reads.append(ORACLE_KEY_BASE)
    return reads, instr


def gen_step_witness(state: VmState, oracle: PreimageOracle | None = None) -> StepWitness:
    """Witness for the step about to execute from `state` (pre-state)."""
    if state.exited:
        raise ValueError("no step witness for an exited state")
    tree = state.memory
    read_bases, instr = _required_accesses(state)
    reads = [
        (base, tree.get_leaf(base // 32), tree.prove(base // 32))
        for base in read_bases
    ]
    writes: list[tuple[int, bytes, bytes, merkle.MerkleProof]] = []
    chunk: PreimageChunk | None = None
    if instr is not None:
        if instr.op == "SW":
            addr = wrap32(state.regs[instr.rs] + instr.imm)
            if addr % 4 == 0:
                base = addr & ~31
                old = tree.get_leaf(base // 32)
                new = bytearray(old)
                struct.pack_into("<I", new, addr & 31, state.regs[instr.rt])
                writes.append((base, old, bytes(new), tree.prove(base // 32)))
        elif instr.op == "PREIMAGE":
            if oracle is None:
                raise MissingPreimageError("witness generation needs the oracle")
            key = tree.get_leaf(ORACLE_KEY_BASE // 32)
            data = oracle.chunk(key, state.regs[instr.rs])
            chunk = PreimageChunk(key, state.regs[instr.rs], data)
            if state.regs[instr.rd] < _ORACLE_VALUE_LEAVES:
                dest = ORACLE_VALUE_BASE // 32 + state.regs[instr.rd]
                old = tree.get_leaf(dest)
                writes.append((dest * 32, old, data, tree.prove(dest)))
    return StepWitness(state.fields(), reads, writes, chunk)


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str
    recomputed_post: bytes | None
    #: False when the witness itself is inconsistent (bad hashes/proofs);
    #: arbitration charges such a rejection to the witness author.
    witness_ok: bool

    def __bool__(self) -> bool:
        return self.accepted


def _reject(reason: str, witness_ok: bool = False) -> Verdict:
    return Verdict(False, reason, None, witness_ok)


def verify_step(
    pre_root: bytes,
    claimed_post_root: bytes,
    witness: StepWitness,
    preimage_chunk_check: bool = True,
    preimages: PreimageOracle | None = None,
    scheme: HashScheme | None = None,
) -> Verdict:
    """Contract-side one-step check: O(1) work, no tree ever materialized.

    Accepts iff the witness fields hash to `pre_root`, every proof checks
    out against the witnessed memory root, and re-executing the fetched
    instruction over the witnessed leaves lands exactly on
    `claimed_post_root`. All inputs are treated as hostile.
    """
    scheme = scheme or active_scheme()
    f = witness.pre_fields
    if len(f.regs) != 16 or f.regs[0] != 0:
        return _reject("bad-register-file")
    if f.state_root(scheme) != pre_root:
        return _reject("pre-fields-mismatch")

    if f.exited:
        if witness.mem_reads or witness.mem_writes or witness.preimage_chunk:
            return _reject("witness-not-minimal")
        post = pre_root
        return Verdict(post == claimed_post_root, "" if post == claimed_post_root else "post-root-mismatch", post, True)

    # Validate read proofs and index them by leaf base address.
    leaves: dict[int, bytes] = {}
    for addr, leaf, proof in witness.mem_reads:
        if addr % 32 != 0 or len(leaf) != 32:
            return _reject("bad-read-record")
        if proof.leaf_index != addr // 32 or proof.subtree_level != 0:
            return _reject("read-proof-wrong-slot")
        if addr in leaves:
            return _reject("duplicate-read")
        if not merkle.verify(f.memory_root, scheme.leaf_hash(leaf), proof, scheme):
            return _reject("read-proof-invalid")
        leaves[addr] = leaf

    def fetch_word(addr: int) -> int | None:
        base = addr & ~31
        if base not in leaves:
            return None
        return struct.unpack_from("<I", leaves[base], addr & 31)[0]

    pc, regs = f.pc, f.regs
    next_pc = wrap32(pc + 4)
    exited, exit_code = False, 0
    want_write: tuple[int, bytes] | None = None  # (leaf base, new leaf)
    used_reads = set()

    def trap(code: int) -> None:
        nonlocal exited, exit_code, next_pc
        exited, exit_code, next_pc = True, code, pc

    if pc % 4 != 0:
        trap(TRAP_BAD_PC)
        instr = None
    else:
        word = fetch_word(pc)
        if word is None:
            return _reject("missing-fetch-leaf")
        used_reads.add(pc & ~31)
        instr = decode(word)
        if instr is None:
            trap(TRAP_BAD_OPCODE)

    if instr is not None and not exited:
        op = instr.op
        if op == "LI":
            word2 = fetch_word(wrap32(pc + 4))
            if word2 is None:
                return _reject("missing-li-leaf")
            used_reads.add(wrap32(pc + 4) & ~31)
            regs = _set_reg(regs, instr.rd, word2)
            next_pc = wrap32(pc + 8)
        elif op == "LW":
            addr = wrap32(regs[instr.rs] + instr.imm)
            if addr % 4 != 0:
                trap(TRAP_BAD_ALIGN)
            else:
                word = fetch_word(addr)
                if word is None:
                    return _reject("missing-load-leaf")
                used_reads.add(addr & ~31)
                regs = _set_reg(regs, instr.rd, word)
        elif op == "SW":
            addr = wrap32(regs[instr.rs] + instr.imm)
            if addr % 4 != 0:
                trap(TRAP_BAD_ALIGN)
            else:
                base = addr & ~31
                old = _witness_old_leaf(witness, base)
                if old is None:
                    return _reject("missing-write-record")
                new = bytearray(old)
                struct.pack_into("<I", new, addr & 31, regs[instr.rt])
                want_write = (base, bytes(new))
        elif op == "ADD":
            regs = _set_reg(regs, instr.rd, regs[instr.rs] + regs[instr.rt])
        elif op == "SUB":
            regs = _set_reg(regs, instr.rd, regs[instr.rs] - regs[instr.rt])
        elif op == "MUL":
            regs = _set_reg(regs, instr.rd, regs[instr.rs] * regs[instr.rt])
        elif op == "MULFX":
            prod = sign32(regs[instr.rs]) * sign32(regs[instr.rt])
            regs = _set_reg(regs, instr.rd, prod >> MULFX_SHIFT)
        elif op == "SRA":
            regs = _set_reg(regs, instr.rd, sign32(regs[instr.rs]) >> (instr.imm & 31))
        elif op == "AND":
            regs = _set_reg(regs, instr.rd, regs[instr.rs] & regs[instr.rt])
        elif op == "BEQ":
            if regs[instr.rs] == regs[instr.rt]:
                next_pc = wrap32(pc + 4 + 4 * instr.imm)
        elif op == "BLT":
            if sign32(regs[instr.rs]) < sign32(regs[instr.rt]):
                next_pc = wrap32(pc + 4 + 4 * instr.imm)
        elif op == "JMP":
            target = wrap32(regs[instr.rs] + 4 * instr.imm)
            regs = _set_reg(regs, instr.rd, pc + 4)
            next_pc = target
        elif op == "PREIMAGE":
            key_leaf = leaves.get(ORACLE_KEY_BASE)
            if key_leaf is None:
                return _reject("missing-key-leaf")
            used_reads.add(ORACLE_KEY_BASE)
            chunk = witness.preimage_chunk
            if chunk is None or len(chunk.data) != 32:
                return _reject("missing-preimage-chunk")
            if chunk.key != key_leaf or chunk.index != regs[instr.rs]:
                return _reject("preimage-chunk-wrong-slot")
            if preimage_chunk_check:
                if preimages is None:
                    return _reject("preimage-unavailable")
                try:
                    expect = preimages.chunk(chunk.key, chunk.index)
                except MissingPreimageError:
                    return _reject("preimage-unavailable")
                if expect != chunk.data:
                    return _reject("preimage-chunk-mismatch")
            if regs[instr.rd] >= _ORACLE_VALUE_LEAVES:
                trap(TRAP_BAD_REGION)
            else:
                base = (ORACLE_VALUE_BASE // 32 + regs[instr.rd]) * 32
                old = _witness_old_leaf(witness, base)
                if old is None:
                    return _reject("missing-write-record")
                want_write = (base, chunk.data)
        elif op == "HALT":
            exited, exit_code, next_pc = True, instr.imm & 0xFF, pc

    # The witness must be exactly the required access set, nothing more.
    if used_reads != set(leaves):
        return _reject("witness-not-minimal")
    if witness.preimage_chunk is not None and (instr is None or instr.op != "PREIMAGE"):
        return _reject("witness-not-minimal")

    post_mem_root = f.memory_root
    if want_write is None:
        if witness.mem_writes:
            return _reject("witness-not-minimal")
    else:
        if len(witness.mem_writes) != 1:
            return _reject("missing-write-record")
        addr, old, new, proof = witness.mem_writes[0]
        base, computed_new = want_write
        if addr != base or len(old) != 32 or len(new) != 32:
            return _reject("write-record-wrong-slot")
        if proof.leaf_index != base // 32 or proof.subtree_level != 0:
            return _reject("write-proof-wrong-slot")
        if not merkle.verify(f.memory_root, scheme.leaf_hash(old), proof, scheme):
            return _reject("write-proof-invalid")
        if new != computed_new:
            return _reject("write-value-mismatch")
        post_mem_root = merkle.recompute_root(scheme.leaf_hash(computed_new), proof, scheme)

    post_fields = VmFields(
        pc=next_pc if not exited else pc,
        regs=regs,
        exited=exited,
        exit_code=exit_code,
        memory_root=post_mem_root,
    )
    post_root = post_fields.state_root(scheme)
    if post_root != claimed_post_root:
        return Verdict(False, "post-root-mismatch", post_root, True)
    return Verdict(True, "", post_root, True)


def _witness_old_leaf(witness: StepWitness, base: int) -> bytes | None:
    for addr, old, _new, _proof in witness.mem_writes:
        if addr == base:
            return old
    return None
