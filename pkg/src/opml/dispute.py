"""Interactive dispute game over a VM execution trace.

A submitter posts a claim (initial root, final root, trace length). A
challenger who disagrees plays rounds of k-section: the challenger posts
state roots at k interior checkpoints, the submitter names the first
segment whose endpoint it disputes, and the disputed span shrinks by a
factor of k+1. When the span reaches the arbitration width m, the simulated
contract re-executes those m steps from one-step witnesses and settles.

The disputed span is padded to m * (k+1)**r using the machine's post-HALT
fixpoint (states past HALT are all equal), so every segment split is exact
and every responsive game takes the same number of rounds regardless of
where the fault sits.

Timeouts, stake slashing and the challenge period run against a small
in-process chain simulation with exact integer conservation.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import fpvm
from .hashing import HashScheme, active_scheme

SUBMITTER = "submitter"
CHALLENGER = "challenger"


class ProtocolViolation(ValueError):
    """A move outside the protocol; the violator forfeits."""


# ---------------------------------------------------------------------------
# Chain simulation
# ---------------------------------------------------------------------------


class ChainSim:
    """Toy ledger: balances, locked stakes, burn counter, event log, clock.

    Every operation conserves total value exactly (integers only):
    sum(balances) + sum(stakes) + burned is constant.
    """

    def __init__(self, challenge_period: int = 100, reward_bps: int = 5000):
        self.clock = 0
        self.balances: dict[str, int] = {}
        self.stakes: dict[str, int] = {}
        self.burned = 0
        self.events: list[tuple[int, dict]] = []
        self.challenge_period = challenge_period
        #: winner's share of a slashed stake in basis points; rest is burned
        self.reward_bps = reward_bps
        self.claim_posted_at: dict[int, int] = {}
        self.open_disputes: set[int] = set()

    def total(self) -> int:
        return sum(self.balances.values()) + sum(self.stakes.values()) + self.burned

    def tick(self, n: int = 1) -> None:
        self.clock += n

    def log(self, **event) -> None:
        self.events.append((self.clock, event))

    def deposit(self, party: str, amount: int) -> None:
        self.balances[party] = self.balances.get(party, 0) + amount

    def stake(self, party: str, amount: int) -> None:
        if self.balances.get(party, 0) < amount:
            raise ProtocolViolation(f"{party} cannot stake {amount}")
        self.balances[party] -= amount
        self.stakes[party] = self.stakes.get(party, 0) + amount
        self.log(kind="stake", party=party, amount=amount)

    def release(self, party: str) -> None:
        amount = self.stakes.pop(party, 0)
        self.balances[party] = self.balances.get(party, 0) + amount
        self.log(kind="release", party=party, amount=amount)

    def slash(self, loser: str, winner: str) -> None:
        """Loser's stake: the reward share goes to the winner, rest burns."""
        amount = self.stakes.pop(loser, 0)
        reward = amount * self.reward_bps // 10_000
        self.balances[winner] = self.balances.get(winner, 0) + reward
        self.burned += amount - reward
        self.log(kind="slash", loser=loser, winner=winner, reward=reward, burned=amount - reward)

    def penalize(self, party: str, amount: int, beneficiary: str) -> None:
        """Direct penalty: half to the beneficiary, half burned."""
        if self.balances.get(party, 0) < amount:
            raise ProtocolViolation(f"{party} cannot pay penalty {amount}")
        self.balances[party] -= amount
        reward = amount // 2
        self.balances[beneficiary] = self.balances.get(beneficiary, 0) + reward
        self.burned += amount - reward
        self.log(kind="penalty", party=party, amount=amount, beneficiary=beneficiary)

    def post_claim(self, claim_id: int) -> None:
        self.claim_posted_at[claim_id] = self.clock
        self.log(kind="claim", claim=claim_id)

    def open_dispute(self, claim_id: int) -> None:
        self.open_disputes.add(claim_id)
        self.log(kind="dispute-open", claim=claim_id)

    def close_dispute(self, claim_id: int) -> None:
        self.open_disputes.discard(claim_id)
        self.log(kind="dispute-closed", claim=claim_id)


@dataclass(frozen=True)
class Claim:
    initial_root: bytes
    final_root: bytes
    trace_len: int
    submitter_id: str
    stake: int
    claim_id: int = 0

    def __post_init__(self):
        if self.trace_len < 1:
            raise ValueError("trace_len must be >= 1")
        if self.stake <= 0:
            raise ValueError("stake must be positive")


def settle_challenge_period(chain: ChainSim, claim: Claim, elapsed: int) -> str:
    """'Confirmed' once the period passed with no open dispute, else 'Pending'."""
    if claim.claim_id in chain.open_disputes:
        return "Pending"
    if elapsed >= chain.challenge_period:
        return "Confirmed"
    return "Pending"


# ---------------------------------------------------------------------------
# Span geometry
# ---------------------------------------------------------------------------


def checkpoints(i: int, j: int, k: int) -> list[int]:
    """Interior checkpoint indices splitting span (i, i+j) into k+1 segments.

    k=1 is the classic midpoint i + floor(j/2); k>1 places points at
    i + ceil(j*t/(k+1)), deduplicated and kept strictly interior.
    """
    if j < 2:
        raise ValueError("span must cover at least 2 steps to split")
    if k < 1:
        raise ValueError("need at least one checkpoint")
    if k == 1:
        return [i + j // 2]
    pts = sorted({i + -(-j * t // (k + 1)) for t in range(1, k + 1)})
    return [p for p in pts if i < p < i + j]


def exact_log_ceil(q: int, base: int) -> int:
    """Smallest r with base**r >= q, computed in exact integers."""
    if q <= 1:
        return 0
    r, p = 0, 1
    while p < q:
        p *= base
        r += 1
    return r


def interaction_count_bound(n_steps: int, m: int, k: int) -> int:
    """Rounds needed to pin an m-step window in an n-step trace with k checkpoints."""
    if not n_steps >= m >= 1 or k < 1:
        raise ValueError("need n >= m >= 1 and k >= 1")
    return exact_log_ceil(-(-n_steps // m), k + 1)


def padded_length(n_steps: int, k: int, m: int = 1) -> int:
    """Dispute span: n rounded up to m * (k+1)**r via the post-HALT fixpoint."""
    segments = -(-n_steps // m)
    return m * (k + 1) ** exact_log_ceil(segments, k + 1)


@dataclass
class DisputeSession:
    i: int
    j: int
    k_checkpoints: int
    round: int = 0
    deadline_per_move: int = 10
    history: list[tuple[int, list[tuple[int, bytes]], int]] = field(default_factory=list)

    @property
    def finished(self) -> bool:
        return self.j <= 1


def bisection_round(
    session: DisputeSession,
    challenger_claims: list[tuple[int, bytes]],
    submitter_response: int,
) -> DisputeSession:
    """Apply one challenge-response exchange and shrink the span.

    `challenger_claims` are (index, root) posts at this round's checkpoints;
    `submitter_response` is the 1-based first segment whose endpoint the
    submitter disputes (len(claims)+1 means "all checkpoints agreed", i.e.
    the standing disagreement at the span end).
    """
    if session.finished:
        raise ProtocolViolation("game already finished")
    expected = checkpoints(session.i, session.j, session.k_checkpoints)
    if [idx for idx, _ in challenger_claims] != expected:
        raise ProtocolViolation("checkpoint posts at wrong indices")
    n_segments = len(challenger_claims) + 1
    if not 1 <= submitter_response <= n_segments:
        raise ProtocolViolation(f"segment choice {submitter_response} out of range")
    bounds = [session.i] + expected + [session.i + session.j]
    new_i = bounds[submitter_response - 1]
    new_j = bounds[submitter_response] - new_i
    if new_j >= session.j:
        raise ProtocolViolation("span did not shrink")
    new = DisputeSession(
        i=new_i,
        j=new_j,
        k_checkpoints=session.k_checkpoints,
        round=session.round + 1,
        deadline_per_move=session.deadline_per_move,
        history=session.history + [(session.round + 1, challenger_claims, submitter_response)],
    )
    return new


# ---------------------------------------------------------------------------
# Arbitration
# ---------------------------------------------------------------------------


def emulate_span(
    pre_root: bytes,
    witnesses: list[fpvm.StepWitness],
    preimages: fpvm.PreimageOracle | None,
    scheme: HashScheme,
) -> tuple[bytes | None, str]:
    """Re-execute a chain of steps from witnesses; None on any invalid link."""
    current = pre_root
    for n, witness in enumerate(witnesses):
        verdict = fpvm.verify_step(
            current, b"\x00" * 32, witness, preimage_chunk_check=True,
            preimages=preimages, scheme=scheme,
        )
        if not verdict.witness_ok:
            return None, f"step {n + 1}: {verdict.reason}"
        current = verdict.recomputed_post
    return current, ""


def arbitrate(
    pre_root: bytes,
    submitter_post_root: bytes,
    witness: fpvm.StepWitness,
    preimages: fpvm.PreimageOracle | None = None,
    scheme: HashScheme | None = None,
    supplier: str = CHALLENGER,
) -> tuple[str, str]:
    """One-step on-chain arbitration; returns (winner, reason).

    The challenger wins exactly when the re-executed step contradicts the
    submitter's claimed post root. A witness that fails its own integrity
    checks loses for its supplier instead.
    """
    return arbitrate_span(
        pre_root, submitter_post_root, [witness], preimages, scheme, supplier
    )


def arbitrate_span(
    pre_root: bytes,
    submitter_end_claim: bytes,
    witnesses: list[fpvm.StepWitness],
    preimages: fpvm.PreimageOracle | None = None,
    scheme: HashScheme | None = None,
    supplier: str = CHALLENGER,
) -> tuple[str, str]:
    """m-step arbitration: re-execute the span and compare the end root."""
    scheme = scheme or active_scheme()
    end_root, reason = emulate_span(pre_root, witnesses, preimages, scheme)
    if end_root is None:
        winner = SUBMITTER if supplier == CHALLENGER else CHALLENGER
        return winner, f"invalid witness from {supplier}: {reason}"
    if end_root == submitter_end_claim:
        return SUBMITTER, "one-step re-execution confirms the claim"
    return CHALLENGER, "one-step re-execution contradicts the claim"


# ---------------------------------------------------------------------------
# Actors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActorStrategy:
    """How a party plays: honestly, from a corrupted re-execution, with a
    bad checkpoint round, going silent, or posting random junk.

    fault_step composes with any kind: a silent or wrong-midpoint party
    still needs a corrupted trace to have something to claim."""

    kind: str = "honest"  # honest | fault | wrong-midpoint | silent | random
    fault_step: int | None = None
    fault_leaf: int | None = None
    fault_bit: int = 0
    wrong_round: int | None = None
    silent_after: int | None = None
    seed: int = 0


class BisectionActor:
    """Common challenge-response behavior over some root sequence."""

    def __init__(self, party_id: str, strategy: ActorStrategy, scheme: HashScheme):
        self.party_id = party_id
        self.strategy = strategy
        self.scheme = scheme
        self._rng = random.Random(strategy.seed)

    # subclasses supply the root sequence and its honest length
    def _true_root(self, index: int) -> bytes:
        raise NotImplementedError

    def _horizon(self) -> int:
        raise NotImplementedError

    def _silent(self, round_no: int) -> bool:
        after = self.strategy.silent_after
        return after is not None and round_no > after

    def claimed_root(self, index: int) -> bytes:
        junk = self.strategy.kind == "random" or (
            self.strategy.kind == "wrong-midpoint"
            and self.strategy.fault_step is None
            and index >= self._horizon()
        )
        if junk:
            return self.scheme.digest(
                b"junk" + self.party_id.encode() + index.to_bytes(8, "little")
                + self.strategy.seed.to_bytes(8, "little")
            )
        return self._true_root(index)

    def post_checkpoints(self, round_no: int, indices: list[int]) -> list[bytes] | None:
        if self._silent(round_no):
            return None
        if self.strategy.kind == "wrong-midpoint" and round_no == self.strategy.wrong_round:
            return [
                self.scheme.digest(b"wrong" + round_no.to_bytes(4, "little") + idx.to_bytes(8, "little"))
                for idx in indices
            ]
        return [self.claimed_root(idx) for idx in indices]

    def choose_segment(
        self, round_no: int, posts: list[tuple[int, bytes]]
    ) -> int | None:
        if self._silent(round_no):
            return None
        if self.strategy.kind == "random":
            return self._rng.randrange(1, len(posts) + 2)
        for t, (idx, claimed) in enumerate(posts, start=1):
            if self.claimed_root(idx) != claimed:
                return t
        return len(posts) + 1


class VmTraceActor(BisectionActor):
    """A dispute party backed by a (possibly corrupted) VM execution trace."""

    def __init__(
        self,
        party_id: str,
        trace: fpvm.Trace,
        strategy: ActorStrategy,
        scheme: HashScheme,
    ):
        super().__init__(party_id, strategy, scheme)
        self.trace = trace

    def _true_root(self, index: int) -> bytes:
        return self.trace.root_at(index)

    def _horizon(self) -> int:
        return len(self.trace)

    def witnesses(
        self,
        start_index: int,
        count: int,
        oracle: fpvm.PreimageOracle | None,
        round_no: int = 0,
    ) -> list[fpvm.StepWitness] | None:
        if self._silent(round_no):
            return None
        out = []
        for t in range(count):
            state = self.trace.state_at(start_index + t)
            if state.exited:
                out.append(fpvm.StepWitness(state.fields()))
            else:
                out.append(fpvm.gen_step_witness(state, oracle))
        return out


@dataclass
class DisputeResult:
    winner: str
    rounds: int
    pinned_step: int | None
    reason: str
    transcript: list[dict]


@dataclass
class BisectionOutcome:
    """Where the challenge-response rounds landed."""

    session: DisputeSession
    agreed_root: bytes
    challenger_end_claim: bytes
    forfeit_winner: str | None
    reason: str


def drive_rounds(
    session: DisputeSession,
    submitter: BisectionActor,
    challenger: BisectionActor,
    agreed_root: bytes,
    challenger_end_claim: bytes,
    stop_span: int,
    chain: ChainSim,
    transcript: list[dict],
    phase: int,
) -> BisectionOutcome:
    """Run k-section rounds until the span is at most stop_span wide."""
    k = session.k_checkpoints
    while session.j > stop_span:
        round_no = session.round + 1
        indices = checkpoints(session.i, session.j, k)
        posts = challenger.post_checkpoints(round_no, indices)
        if posts is None:
            chain.tick(session.deadline_per_move + 1)
            return BisectionOutcome(session, agreed_root, challenger_end_claim,
                                    SUBMITTER, "challenger timeout")
        if len(posts) != len(indices):
            return BisectionOutcome(session, agreed_root, challenger_end_claim,
                                    SUBMITTER, "challenger protocol violation: wrong post count")
        chain.tick(1)
        transcript.append({
            "phase": phase, "round": round_no, "mover": CHALLENGER,
            "i": session.i, "j": session.j,
            "posted": [(idx, root.hex()) for idx, root in zip(indices, posts)],
        })
        claims = list(zip(indices, posts))
        response = submitter.choose_segment(round_no, claims)
        if response is None:
            chain.tick(session.deadline_per_move + 1)
            return BisectionOutcome(session, agreed_root, challenger_end_claim,
                                    CHALLENGER, "submitter timeout")
        chain.tick(1)
        transcript.append({
            "phase": phase, "round": round_no, "mover": SUBMITTER, "decision": response,
            "i": session.i, "j": session.j,
        })
        try:
            session = bisection_round(session, claims, response)
        except ProtocolViolation as exc:
            return BisectionOutcome(session, agreed_root, challenger_end_claim,
                                    CHALLENGER, f"submitter protocol violation: {exc}")
        if response >= 2:
            agreed_root = posts[response - 2]
        if response <= len(posts):
            challenger_end_claim = posts[response - 1]
    return BisectionOutcome(session, agreed_root, challenger_end_claim, None, "")


def run_dispute(
    claim: Claim,
    submitter: VmTraceActor,
    challenger: VmTraceActor,
    k: int = 1,
    chain: ChainSim | None = None,
    m: int = 1,
    oracle: fpvm.PreimageOracle | None = None,
    scheme: HashScheme | None = None,
    phase: int = 2,
    settle: bool = True,
    deadline_per_move: int = 10,
) -> DisputeResult:
    """Drive a full game: k-section rounds, then m-step arbitration.

    Both parties must hold stakes in `chain`; the loser's stake is slashed
    (half to the winner, half burned) and a missed move forfeits. With
    settle=False the verdict is returned without touching stakes (used when
    this game is the inner phase of a larger one).
    """
    scheme = scheme or active_scheme()
    chain = chain if chain is not None else ChainSim()
    for party in (submitter.party_id, challenger.party_id):
        if chain.stakes.get(party, 0) <= 0:
            raise ProtocolViolation(f"{party} is not staked")
    chain.open_dispute(claim.claim_id)

    transcript: list[dict] = []
    n_padded = padded_length(claim.trace_len, k, m)
    session = DisputeSession(i=0, j=n_padded, k_checkpoints=k,
                             deadline_per_move=deadline_per_move)
    # The challenger-side claim at the disputed span end; starts at their
    # counterclaim to the posted final root and follows the narrowing.
    challenger_end_claim = challenger.claimed_root(n_padded)
    if challenger_end_claim == claim.final_root:
        # No actual disagreement: the challenge cannot open.
        return _settle(SUBMITTER, "challenger has no counterclaim", chain, claim,
                       submitter, challenger, 0, None, transcript, settle)

    outcome = drive_rounds(session, submitter, challenger, claim.initial_root,
                           challenger_end_claim, m, chain, transcript, phase)
    session = outcome.session
    if outcome.forfeit_winner is not None:
        return _settle(outcome.forfeit_winner, outcome.reason, chain, claim, submitter,
                       challenger, session.round, None, transcript, settle)

    # Arbitration over [i, i+j]; pinned step indices are 1-based.
    pinned = session.i + 1
    arb_round = session.round + 1
    witnesses = challenger.witnesses(session.i, session.j, oracle, arb_round)
    chain.tick(1)
    if witnesses is None:
        return _settle(SUBMITTER, "challenger missed arbitration", chain, claim,
                       submitter, challenger, session.round, pinned, transcript, settle)
    if submitter._silent(arb_round):
        return _settle(CHALLENGER, "submitter missed arbitration", chain, claim,
                       submitter, challenger, session.round, pinned, transcript, settle)
    submitter_end = submitter.claimed_root(session.i + session.j)
    if submitter_end == outcome.challenger_end_claim:
        # Posting the value one just disputed concedes the span.
        return _settle(CHALLENGER, "submitter conceded the disputed span", chain, claim,
                       submitter, challenger, session.round, pinned, transcript, settle)
    winner, why = arbitrate_span(
        outcome.agreed_root, submitter_end, witnesses, preimages=oracle,
        scheme=scheme, supplier=CHALLENGER,
    )
    return _settle(winner, why, chain, claim, submitter, challenger,
                   session.round, pinned, transcript, settle)


def _settle(winner, reason, chain, claim, submitter, challenger, rounds, pinned,
            transcript, settle=True):
    if settle:
        winner_id = submitter.party_id if winner == SUBMITTER else challenger.party_id
        loser_id = challenger.party_id if winner == SUBMITTER else submitter.party_id
        chain.slash(loser_id, winner_id)
        chain.release(winner_id)
        chain.close_dispute(claim.claim_id)
    transcript.append({
        "event": "verdict", "winner": winner, "reason": reason,
        "pinned_step": pinned, "rounds": rounds,
    })
    return DisputeResult(winner, rounds, pinned, reason, transcript)


# ---------------------------------------------------------------------------
# Adversary harness
# ---------------------------------------------------------------------------

#: Heap leaf far outside the window synthetic programs touch; flipping a bit
#: here never feeds back into execution, so corrupted traces stay divergent.
SCRATCH_FAULT_LEAF = (fpvm.HEAP_BASE + 0x10_0000) // 32

_ALU = ["ADD", "SUB", "MUL", "MULFX", "AND"]


def synthetic_program(rng: random.Random, n_steps: int) -> bytes:
    """Straight-line program executing exactly n_steps (including HALT)."""
    if n_steps < 2:
        raise ValueError("need at least 2 steps")
    words = [fpvm.encode("LI", rd=8), fpvm.HEAP_BASE]
    for _ in range(n_steps - 2):
        kind = rng.randrange(10)
        if kind < 4:
            words.append(fpvm.encode(
                rng.choice(_ALU),
                rd=rng.randrange(1, 8), rs=rng.randrange(0, 8), rt=rng.randrange(0, 8),
            ))
        elif kind < 6:
            words += [fpvm.encode("LI", rd=rng.randrange(1, 8)), rng.getrandbits(32)]
        elif kind == 6:
            words.append(fpvm.encode("SRA", rd=rng.randrange(1, 8),
                                     rs=rng.randrange(0, 8), imm=rng.randrange(0, 32)))
        elif kind < 9:
            words.append(fpvm.encode("SW", rt=rng.randrange(0, 8), rs=8,
                                     imm=4 * rng.randrange(0, 256)))
        else:
            words.append(fpvm.encode("LW", rd=rng.randrange(1, 8), rs=8,
                                     imm=4 * rng.randrange(0, 256)))
    words.append(fpvm.encode("HALT"))
    return fpvm.assemble(words)


def build_trace_actor(
    party_id: str,
    initial_state: fpvm.VmState,
    strategy: ActorStrategy,
    oracle: fpvm.PreimageOracle | None = None,
    max_steps: int = 2_000_000,
) -> VmTraceActor:
    """Replay the trace this party believes in (honest or corrupted).

    Any strategy kind may carry a fault_step: a silent or wrong-midpoint
    party still needs a corrupted trace to have a counterclaim to defend.
    """
    if strategy.kind == "fault" and strategy.fault_step is None:
        raise ValueError("fault strategy needs fault_step")
    fault = None
    if strategy.fault_step is not None:
        fault = fpvm.StepFault(
            step=strategy.fault_step,
            leaf_index=strategy.fault_leaf if strategy.fault_leaf is not None else SCRATCH_FAULT_LEAF,
            bit=strategy.fault_bit,
        )
    trace = fpvm.run_trace(initial_state, oracle, max_steps=max_steps, fault=fault)
    return VmTraceActor(party_id, trace, strategy, initial_state.scheme)
