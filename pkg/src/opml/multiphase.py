"""Two-phase dispute: coarse node-level bisection, then a VM sub-dispute.

Phase 1 bisects the sequence of graph-state commitments (one per computed
node) to pin a single disputed node. The descent into phase 2 is gated by
the entrance check: the initial VM memory image for the pinned node must be
exactly reconstructible from public data (the per-op program, an empty model
region) plus the operand-key field proven out of the agreed phase-1 state.
Phase 2 is the ordinary trace dispute over the lowered node program, ending
in m-step arbitration. The exit check then ties the winner's final VM output
region back to their phase-1 claim for the node's output.

Both checks recompute everything from roots, openings and public context;
they never trust structure supplied by the counterparty.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import dispute, fpvm, lowering, merkle, ml
from .dispute import (
    CHALLENGER,
    SUBMITTER,
    ChainSim,
    Claim,
    DisputeSession,
    interaction_count_bound,  # noqa: F401  (part of this module's surface)
    padded_length,
)
from .hashing import HashScheme, active_scheme


@dataclass(frozen=True)
class PhaseConfig:
    k_phase1: int = 1
    k_phase2: int = 1
    m: int = 1  # steps the simulated contract re-executes at the base
    deadline_per_move: int = 10

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("arbitration span must be >= 1")


def phase1_commitments(
    graph: ml.CompGraph, input_tensor: ml.FixedTensor, scheme: HashScheme | None = None
) -> list[bytes]:
    """The node-granular state roots a phase-1 game is played over."""
    _, commitments = ml.execute_native(graph, input_tensor, scheme)
    return commitments


@dataclass(frozen=True)
class FieldOpening:
    """Full preimage of a graph-state commitment: header plus the per-node
    (key, output-root) entries. O(n) but tiny at node granularity."""

    model_digest: bytes
    input_key: bytes
    entries: tuple[tuple[bytes, bytes], ...]

    def commitment(self, scheme: HashScheme) -> bytes:
        return ml.GraphState.commit(self.model_digest, self.input_key, self.entries, scheme)


@dataclass(frozen=True)
class EntranceBundle:
    s_prev_root: bytes  # agreed phase-1 state before the disputed node
    m0_root: bytes  # claimed initial VM memory root for phase 2
    node_id: int
    operand_keys_root: bytes  # input-region subtree root holding the keys
    opening: FieldOpening  # proves the operand keys against s_prev_root
    program_root: bytes
    model_root: bytes


@dataclass(frozen=True)
class ExitBundle:
    s_post_root: bytes  # winner's phase-1 state after the disputed node
    final_state_root: bytes  # winner's phase-2 final VM state root
    vm_fields: fpvm.VmFields  # opens final_state_root to the memory root
    output_region_root: bytes  # r_o
    output_proof: merkle.MerkleProof  # p_o against the memory root
    node_id: int
    node_output_root: bytes  # r_v claimed in the phase-1 state
    opening: FieldOpening  # proves r_v against s_post_root


_program_root_cache: dict = {}


def node_program_root(
    op: str, operand_shapes: tuple[tuple[int, ...], ...], scheme: HashScheme
) -> bytes:
    """Public registry of lowered-program roots, keyed by op and shapes.

    The program text depends only on the op and the operand shapes, so it is
    recomputable by anyone from the public model; values never enter it.
    """
    key = (op, operand_shapes, scheme.name)
    if key not in _program_root_cache:
        dummies = [
            ml.FixedTensor(shape, (0,) * _numel(shape)) for shape in operand_shapes
        ]
        node = ml.GraphNode(len(dummies), op, tuple(range(len(dummies))))
        lowered = lowering.lower_node(node, dummies, scheme)
        _program_root_cache[key] = lowered.program_root(scheme)
    return _program_root_cache[key]


def _numel(shape) -> int:
    size = 1
    for d in shape:
        size *= d
    return size


def operand_keys_blob(keys: list[bytes]) -> bytes:
    return b"".join(keys)


def build_entrance_state(
    run: ml.GraphRun, node_id: int, scheme: HashScheme | None = None
) -> tuple[fpvm.VmState, fpvm.PreimageOracle, EntranceBundle, lowering.LoweredNode]:
    """Construct the phase-2 initial machine and its entrance evidence.

    The machine holds the node's program, the operand keys in the input
    region (lazy-loading handles), and nothing else; the oracle carries the
    operand payloads.
    """
    scheme = scheme or active_scheme()
    node = run.graph.nodes[node_id]
    operands = [run.outputs[i] for i in node.input_ids]
    lowered = lowering.lower_node(node, operands, scheme)
    oracle = fpvm.PreimageOracle(scheme)
    for blob in lowered.preimages.values():
        oracle.put(blob)
    m0 = lowering.node_initial_state(lowered, scheme)
    s_prev = run.states[node_id]
    bundle = EntranceBundle(
        s_prev_root=s_prev.commitment,
        m0_root=m0.memory.root(),
        node_id=node_id,
        operand_keys_root=merkle.region_root(
            operand_keys_blob(lowered.operand_keys), fpvm.INPUT_LEVEL, scheme
        ),
        opening=FieldOpening(s_prev.model_digest, s_prev.input_key, s_prev.entries),
        program_root=lowered.program_root(scheme),
        model_root=scheme.zero_hashes[fpvm.MODEL_LEVEL],
    )
    return m0, oracle, bundle, lowered


def entrance_check(
    bundle: EntranceBundle, graph: ml.CompGraph, scheme: HashScheme | None = None
) -> tuple[bool, str]:
    """Validate the descent from the agreed phase-1 state into the VM.

    Accepts iff (a) the opening matches the agreed state and yields exactly
    the claimed operand-key field, and (b) recombining the public program
    and model roots with that field (all other regions zero) reproduces the
    claimed initial memory root.
    """
    scheme = scheme or active_scheme()
    if not 0 <= bundle.node_id < len(graph.nodes):
        return False, "node id out of range"
    node = graph.nodes[bundle.node_id]
    if node.op in ("input", "const"):
        return False, "node has no phase-2 computation"
    if len(bundle.opening.entries) != len(graph.nodes):
        return False, "opening has wrong arity"
    if bundle.opening.commitment(scheme) != bundle.s_prev_root:
        return False, "opening does not match the agreed state"
    keys = []
    for dep in node.input_ids:
        if dep >= bundle.node_id:
            return False, "operand not computed before the disputed node"
        key = bundle.opening.entries[dep][0]
        if key == b"\x00" * 32:
            return False, "operand entry empty in the agreed state"
        keys.append(key)
    if merkle.region_root(operand_keys_blob(keys), fpvm.INPUT_LEVEL, scheme) != bundle.operand_keys_root:
        return False, "operand key field mismatch"
    shapes = graph.infer_shapes()
    operand_shapes = tuple(shapes[i] for i in node.input_ids)
    if bundle.program_root != node_program_root(node.op, operand_shapes, scheme):
        return False, "program root not the registered one"
    if bundle.model_root != scheme.zero_hashes[fpvm.MODEL_LEVEL]:
        return False, "model field must be empty"
    rebuilt = merkle.root_from_regions(
        [
            (fpvm.PROGRAM_BASE // 32, fpvm.PROGRAM_LEVEL, bundle.program_root),
            (fpvm.INPUT_BASE // 32, fpvm.INPUT_LEVEL, bundle.operand_keys_root),
            (fpvm.MODEL_BASE // 32, fpvm.MODEL_LEVEL, bundle.model_root),
        ],
        scheme,
    )
    if rebuilt != bundle.m0_root:
        return False, "initial memory root not reconstructible"
    return True, ""


def build_exit_bundle(
    run: ml.GraphRun,
    node_id: int,
    final_state: fpvm.VmState,
    scheme: HashScheme | None = None,
) -> ExitBundle:
    """Evidence tying the phase-2 final machine to the phase-1 node output."""
    scheme = scheme or active_scheme()
    s_post = run.states[node_id + 1]
    fields = final_state.fields()
    return ExitBundle(
        s_post_root=s_post.commitment,
        final_state_root=fields.state_root(scheme),
        vm_fields=fields,
        output_region_root=final_state.memory.subtree_root(fpvm.OUTPUT_BASE, fpvm.OUTPUT_LEVEL),
        output_proof=final_state.memory.prove(fpvm.OUTPUT_BASE // 32, fpvm.OUTPUT_LEVEL),
        node_id=node_id,
        node_output_root=s_post.entries[node_id][1],
        opening=FieldOpening(s_post.model_digest, s_post.input_key, s_post.entries),
    )


def exit_check(
    bundle: ExitBundle, graph: ml.CompGraph, scheme: HashScheme | None = None
) -> tuple[bool, str]:
    """Require the VM's output field and the phase-1 node-output field to be
    one and the same commitment."""
    scheme = scheme or active_scheme()
    if not 0 <= bundle.node_id < len(graph.nodes):
        return False, "node id out of range"
    if bundle.vm_fields.state_root(scheme) != bundle.final_state_root:
        return False, "vm fields do not open the final state root"
    proof = bundle.output_proof
    if proof.leaf_index != fpvm.OUTPUT_BASE // 32 or proof.subtree_level != fpvm.OUTPUT_LEVEL:
        return False, "output proof aimed at the wrong field"
    if not merkle.verify(bundle.vm_fields.memory_root, bundle.output_region_root, proof, scheme):
        return False, "output field proof invalid"
    if len(bundle.opening.entries) != len(graph.nodes):
        return False, "opening has wrong arity"
    if bundle.opening.commitment(scheme) != bundle.s_post_root:
        return False, "opening does not match the claimed state"
    if bundle.opening.entries[bundle.node_id][1] != bundle.node_output_root:
        return False, "node output field mismatch"
    if bundle.output_region_root != bundle.node_output_root:
        return False, "vm output differs from the claimed node output"
    return True, ""


# ---------------------------------------------------------------------------
# The two-phase game
# ---------------------------------------------------------------------------


class GraphCommitActor(dispute.BisectionActor):
    """Phase-1 party answering from its own graph execution record."""

    def __init__(self, party_id, run: ml.GraphRun, strategy, scheme):
        super().__init__(party_id, strategy, scheme)
        self.run = run

    def _true_root(self, index: int) -> bytes:
        return self.run.commitment_at(index)

    def _horizon(self) -> int:
        return len(self.run.states)


@dataclass
class TwoPhaseParty:
    """A participant: execution record plus how it plays each phase."""

    party_id: str
    run: ml.GraphRun
    graph_fault: ml.GraphFault | None = None
    strategy: dispute.ActorStrategy = dispute.ActorStrategy()


def make_party(
    party_id: str,
    graph: ml.CompGraph,
    input_tensor: ml.FixedTensor,
    graph_fault: ml.GraphFault | None = None,
    strategy: dispute.ActorStrategy = dispute.ActorStrategy(),
    scheme: HashScheme | None = None,
) -> TwoPhaseParty:
    run = ml.run_graph(graph, input_tensor, fault=graph_fault, scheme=scheme)
    return TwoPhaseParty(party_id, run, graph_fault, strategy)


@dataclass
class TwoPhaseResult:
    winner: str
    phase1_rounds: int
    phase2_rounds: int
    pinned_node: int | None
    pinned_step: int | None
    reason: str
    transcript: list[dict]


def _phase2_trace(
    party: TwoPhaseParty,
    m0: fpvm.VmState,
    oracle: fpvm.PreimageOracle,
    node_id: int,
    honest_trace: fpvm.Trace,
) -> fpvm.Trace:
    """The VM trace this party defends for the pinned node.

    An honest party replays the node program. A party whose graph fault sits
    on this node corrupts the one store that writes the faulted element, so
    its VM trace ends in exactly the output it committed to in phase 1.
    """
    fault = party.graph_fault
    if fault is None or fault.node_id != node_id:
        return honest_trace
    out = party.run.outputs[node_id]
    element = fault.element % len(out.data)
    rank = len(out.shape)
    element_addr = fpvm.OUTPUT_BASE + 4 + 4 * rank + 4 * element
    step_no = fpvm.find_store_step(honest_trace, element_addr)
    bit_in_leaf = (element_addr % 32) * 8 + (fault.bit % 32)
    vm_fault = fpvm.StepFault(step=step_no, leaf_index=element_addr // 32, bit=bit_in_leaf)
    return fpvm.run_trace(m0, oracle, max_steps=2_000_000, fault=vm_fault)


def run_two_phase_dispute(
    graph: ml.CompGraph,
    input_tensor: ml.FixedTensor,
    submitter: TwoPhaseParty,
    challenger: TwoPhaseParty,
    cfg: PhaseConfig = PhaseConfig(),
    chain: ChainSim | None = None,
    scheme: HashScheme | None = None,
    stake: int = 100,
) -> TwoPhaseResult:
    """Full protocol: node-level k-section, entrance check, VM dispute,
    m-step arbitration, exit check, settlement."""
    scheme = scheme or active_scheme()
    chain = chain if chain is not None else ChainSim()
    for party in (submitter.party_id, challenger.party_id):
        if chain.stakes.get(party, 0) <= 0:
            raise dispute.ProtocolViolation(f"{party} is not staked")

    n_nodes = len(graph.nodes)
    claim = Claim(
        initial_root=submitter.run.commitments[0],
        final_root=submitter.run.commitment_at(padded_length(n_nodes, cfg.k_phase1, 1)),
        trace_len=n_nodes,
        submitter_id=submitter.party_id,
        stake=stake,
    )
    chain.open_dispute(claim.claim_id)
    transcript: list[dict] = []

    sub_actor = GraphCommitActor(submitter.party_id, submitter.run, submitter.strategy, scheme)
    chal_actor = GraphCommitActor(challenger.party_id, challenger.run, challenger.strategy, scheme)

    n_padded = padded_length(n_nodes, cfg.k_phase1, 1)
    challenger_end = chal_actor.claimed_root(n_padded)
    if challenger_end == claim.final_root:
        return _finish(SUBMITTER, "challenger has no counterclaim", 0, 0, None, None,
                       chain, claim, submitter, challenger, transcript)

    session = DisputeSession(i=0, j=n_padded, k_checkpoints=cfg.k_phase1,
                             deadline_per_move=cfg.deadline_per_move)
    outcome = dispute.drive_rounds(session, sub_actor, chal_actor, claim.initial_root,
                                   challenger_end, 1, chain, transcript, phase=1)
    phase1_rounds = outcome.session.round
    if outcome.forfeit_winner is not None:
        return _finish(outcome.forfeit_winner, outcome.reason, phase1_rounds, 0, None, None,
                       chain, claim, submitter, challenger, transcript)

    pinned_node = outcome.session.i

    # Entrance: the submitter supplies the descent evidence.
    m0, oracle, bundle, lowered = build_entrance_state(submitter.run, pinned_node, scheme)
    if bundle.s_prev_root != outcome.agreed_root:
        return _finish(CHALLENGER, "entrance built from a non-agreed state", phase1_rounds,
                       0, pinned_node, None, chain, claim, submitter, challenger, transcript)
    ok, why = entrance_check(bundle, graph, scheme)
    transcript.append({"phase": "transition", "check": "entrance", "accepted": ok, "reason": why})
    if not ok:
        return _finish(CHALLENGER, f"entrance check failed: {why}", phase1_rounds, 0,
                       pinned_node, None, chain, claim, submitter, challenger, transcript)

    honest_trace = fpvm.run_trace(m0, oracle, max_steps=2_000_000)
    sub_trace = _phase2_trace(submitter, m0, oracle, pinned_node, honest_trace)
    chal_trace = _phase2_trace(challenger, m0, oracle, pinned_node, honest_trace)

    sub_vm = dispute.VmTraceActor(submitter.party_id, sub_trace, submitter.strategy, scheme)
    chal_vm = dispute.VmTraceActor(challenger.party_id, chal_trace, challenger.strategy, scheme)
    inner_claim = Claim(
        initial_root=fpvm.state_root(m0),
        final_root=sub_trace.root_at(padded_length(len(sub_trace), cfg.k_phase2, cfg.m)),
        trace_len=len(sub_trace),
        submitter_id=submitter.party_id,
        stake=stake,
        claim_id=claim.claim_id + 1,
    )
    inner = dispute.run_dispute(
        inner_claim, sub_vm, chal_vm, k=cfg.k_phase2, chain=chain, m=cfg.m,
        oracle=oracle, scheme=scheme, phase=2, settle=False,
    )
    chain.close_dispute(inner_claim.claim_id)
    transcript.extend(inner.transcript)
    winner, reason = inner.winner, inner.reason

    # Exit: the phase-2 winner reconciles its VM result with its phase-1 claim.
    winner_party = submitter if winner == SUBMITTER else challenger
    winner_trace = sub_trace if winner == SUBMITTER else chal_trace
    exit_bundle = build_exit_bundle(winner_party.run, pinned_node,
                                    winner_trace.states[-1], scheme)
    ok, why = exit_check(exit_bundle, graph, scheme)
    transcript.append({"phase": "transition", "check": "exit", "accepted": ok, "reason": why})
    if not ok:
        winner = CHALLENGER if winner == SUBMITTER else SUBMITTER
        reason = f"exit check failed for the phase-2 winner: {why}"

    return _finish(winner, reason, phase1_rounds, inner.rounds, pinned_node,
                   inner.pinned_step, chain, claim, submitter, challenger, transcript)


def _finish(winner, reason, p1_rounds, p2_rounds, pinned_node, pinned_step,
            chain, claim, submitter, challenger, transcript):
    winner_id = submitter.party_id if winner == SUBMITTER else challenger.party_id
    loser_id = challenger.party_id if winner == SUBMITTER else submitter.party_id
    chain.slash(loser_id, winner_id)
    chain.release(winner_id)
    chain.close_dispute(claim.claim_id)
    transcript.append({
        "event": "verdict", "winner": winner, "reason": reason,
        "pinned_node": pinned_node, "pinned_step": pinned_step,
        "rounds": p1_rounds + p2_rounds,
    })
    return TwoPhaseResult(winner, p1_rounds, p2_rounds, pinned_node, pinned_step,
                          reason, transcript)
