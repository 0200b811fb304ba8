"""Scenario runner: execute models, stage dispute games, emit analysis tables.

Commands:
  opml run             execute a model and print the resulting claim
  opml dispute         play a (possibly adversarial) dispute game
  opml security        trust-model probability tables (CSV)
  opml economics       equilibrium / attention-challenge numbers
  opml verify-witness  offline one-step verification of a witness bundle

Every command that takes --seed is bit-reproducible: all randomness flows
through named streams derived from that one seed. Exit codes: 0 success,
2 usage or configuration, 3 I/O or parse failure, 4 internal invariant
violation (a dual-path mismatch is a bug, never a user error).
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys

from . import dispute, economics, fpvm, hashing, lowering, ml, multiphase, rng

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INTERNAL = 4

WITNESS_MAGIC = b"OPWB"


class ConfigError(Exception):
    pass


class IoError(Exception):
    pass


def _read_file(path: str) -> bytes:
    if not os.path.exists(path):
        raise ConfigError(f"file not found: {path}")
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc


def _load_model(path: str) -> ml.CompGraph:
    try:
        return ml.load_model_bytes(_read_file(path))
    except ml.ModelParseError as exc:
        raise IoError(f"{path}: {exc}") from exc


def _load_tensor(path: str) -> ml.FixedTensor:
    data = _read_file(path)
    try:
        tensor, offset = ml.deserialize_tensor(data)
    except ml.ModelParseError as exc:
        raise IoError(f"{path}: {exc}") from exc
    if offset != len(data):
        raise IoError(f"{path}: trailing bytes after tensor")
    return tensor


def read_config(path: str) -> dict[str, str]:
    """Flat key=value lines; blank lines and #-comments ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(_read_file(path).decode().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    scheme = hashing.active_scheme()
    graph = _load_model(args.model)
    input_tensor = _load_tensor(args.input)

    native, commitments = ml.execute_native(graph, input_tensor, scheme)
    lowered = lowering.lower_graph(graph)
    state0 = lowered.initial_state(input_tensor, scheme)
    trace = fpvm.run_trace(state0, None, max_steps=args.max_steps)
    vm_out = lowering.read_output_tensor(trace.states[-1])
    if vm_out != native:
        print("internal error: native and VM outputs diverged", file=sys.stderr)
        return EXIT_INTERNAL

    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(ml.serialize_tensor(native))
    if args.dump_trace:
        with open(args.dump_trace, "w") as fh:
            for i, state in enumerate(trace.states):
                fh.write(f"{i}, {state.pc:#010x}, {trace.roots[i].hex()}\n")

    print(f"hash={scheme.name}")
    print(f"input_digest={scheme.digest(ml.serialize_tensor(input_tensor)).hex()}")
    print(f"output_digest={scheme.digest(ml.serialize_tensor(native)).hex()}")
    print(f"output_region_root={ml.tensor_region_root(native, scheme).hex()}")
    print(f"trace_len={len(trace)}")
    print(f"final_state_root={trace.roots[-1].hex()}")
    print(f"graph_commitment={commitments[-1].hex()}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# dispute
# ---------------------------------------------------------------------------


def _scenario_from_args(args) -> dict:
    cfg: dict[str, str] = {}
    if args.config:
        cfg = read_config(args.config)

    def pick(flag_value, key, default=None):
        if flag_value is not None:
            return flag_value
        return cfg.get(key, default)

    default_protocol = "single"
    if "phases" in cfg:  # numeric alias for the protocol choice
        if cfg["phases"] not in ("1", "2"):
            raise ConfigError(f"phases must be 1 or 2, got {cfg['phases']}")
        default_protocol = "single" if cfg["phases"] == "1" else "two-phase"
    scenario = {
        "model": pick(args.model, "model"),
        "input": pick(args.input, "input"),
        "protocol": pick(args.protocol, "protocol", default_protocol),
        "k": int(pick(args.k, "k", 1)),
        "m": int(pick(args.m, "m", 1)),
        "fault_node": pick(args.fault_node, "fault.node"),
        "fault_step": pick(args.fault_step, "fault.step"),
        "fault_element": pick(args.fault_element, "fault.element"),
        "fault_bit": pick(args.fault_bit, "fault.bit"),
        "faulty": pick(args.faulty, "faulty", "submitter"),
        "strategy": pick(args.strategy, "strategy"),
        "silent_after": pick(args.silent_after, "silent.after"),
        "wrong_round": pick(args.wrong_round, "wrong.round"),
        "seed": int(pick(args.seed, "seed", 0)),
        "synthetic_n": pick(args.synthetic_n, "synthetic.n"),
        "challenge_period": int(pick(args.challenge_period, "challenge_period", 100)),
        "transcript": pick(args.transcript, "transcript"),
        "witness_out": pick(args.witness_out, "witness.out"),
    }
    for key in ("fault_node", "fault_step", "fault_element", "fault_bit",
                "silent_after", "wrong_round", "synthetic_n"):
        if scenario[key] is not None:
            scenario[key] = int(scenario[key])
    if scenario["protocol"] not in ("single", "two-phase"):
        raise ConfigError(f"unknown protocol {scenario['protocol']!r}")
    if scenario["k"] < 1 or scenario["m"] < 1:
        raise ConfigError("k and m must be >= 1")
    if scenario["faulty"] not in ("submitter", "challenger"):
        raise ConfigError("faulty must be submitter or challenger")
    return scenario


def _fresh_chain(scenario) -> dispute.ChainSim:
    chain = dispute.ChainSim(challenge_period=scenario["challenge_period"])
    for party in ("submitter", "challenger"):
        chain.deposit(party, 1000)
        chain.stake(party, 100)
    return chain


def _adversary_strategy(scenario, fault_step=None, fault_leaf=None, fault_bit=0):
    kind = scenario["strategy"]
    if kind is None:
        kind = "fault" if fault_step is not None else "honest"
    wrong_round = scenario["wrong_round"]
    if kind == "wrong-midpoint" and wrong_round is None:
        wrong_round = 1
    silent_after = scenario["silent_after"]
    if kind == "silent" and silent_after is None:
        silent_after = 1
    return dispute.ActorStrategy(
        kind=kind,
        fault_step=fault_step,
        fault_leaf=fault_leaf,
        fault_bit=fault_bit,
        wrong_round=wrong_round,
        silent_after=silent_after,
        seed=scenario["seed"],
    )


def _graph_fault(scenario, graph, streams) -> ml.GraphFault | None:
    if scenario["fault_node"] is None:
        return None
    node_id = scenario["fault_node"]
    if not 0 <= node_id < len(graph.nodes):
        raise ConfigError(f"fault node {node_id} out of range")
    if graph.nodes[node_id].op in ("input", "const"):
        raise ConfigError(f"node {node_id} has no computation to corrupt")
    shapes = graph.infer_shapes()
    numel = 1
    for d in shapes[node_id]:
        numel *= d
    element = scenario["fault_element"]
    bit = scenario["fault_bit"]
    return ml.GraphFault(
        node_id=node_id,
        element=element if element is not None else streams.randrange(numel),
        bit=bit if bit is not None else streams.randrange(32),
    )


def _run_single(scenario, scheme, transcript_records) -> dispute.DisputeResult:
    streams = rng.stream(scenario["seed"], "fault")
    chain = _fresh_chain(scenario)
    oracle = None
    witness_source = None

    if scenario["synthetic_n"] is not None:
        program = dispute.synthetic_program(
            rng.stream(scenario["seed"], "program"), scenario["synthetic_n"]
        )
        state0 = fpvm.load_program(program, scheme=scheme)
        fault_step = scenario["fault_step"]
        if fault_step is None and scenario["strategy"] == "fault":
            fault_step = streams.randrange(1, scenario["synthetic_n"] + 1)
        strategy = _adversary_strategy(scenario, fault_step=fault_step,
                                       fault_bit=streams.randrange(256))
    else:
        if not scenario["model"] or not scenario["input"]:
            raise ConfigError("dispute needs --model/--input or --synthetic-n")
        graph = _load_model(scenario["model"])
        input_tensor = _load_tensor(scenario["input"])
        lowered = lowering.lower_graph(graph)
        state0 = lowered.initial_state(input_tensor, scheme)
        honest_trace = fpvm.run_trace(state0, None, max_steps=10_000_000)
        witness_source = honest_trace
        fault_step = scenario["fault_step"]
        fault_leaf, fault_bit = None, 0
        gfault = _graph_fault(scenario, graph, streams)
        if gfault is not None:
            sf = lowering.graph_fault_to_step_fault(lowered, graph, honest_trace, gfault)
            fault_step, fault_leaf, fault_bit = sf.step, sf.leaf_index, sf.bit
        elif fault_step is not None:
            fault_bit = streams.randrange(256)
        strategy = _adversary_strategy(scenario, fault_step, fault_leaf, fault_bit)

    honest = dispute.ActorStrategy(seed=scenario["seed"])
    faulty_submitter = scenario["faulty"] == "submitter"
    sub_strategy = strategy if faulty_submitter else honest
    chal_strategy = honest if faulty_submitter else strategy
    submitter = dispute.build_trace_actor("submitter", state0, sub_strategy, oracle)
    challenger = dispute.build_trace_actor("challenger", state0, chal_strategy, oracle)
    if witness_source is None:
        witness_source = submitter.trace if not faulty_submitter else challenger.trace

    claim = dispute.Claim(
        initial_root=submitter.trace.roots[0],
        final_root=submitter.claimed_root(
            dispute.padded_length(len(submitter.trace), scenario["k"], scenario["m"])
        ),
        trace_len=len(submitter.trace),
        submitter_id="submitter",
        stake=100,
    )
    result = dispute.run_dispute(
        claim, submitter, challenger, k=scenario["k"], chain=chain,
        m=scenario["m"], oracle=oracle, scheme=scheme,
    )
    transcript_records.extend(result.transcript)

    if scenario["witness_out"]:
        step_no = result.pinned_step or 1
        pre = witness_source.states[min(step_no - 1, len(witness_source.states) - 1)]
        witness = (fpvm.StepWitness(pre.fields()) if pre.exited
                   else fpvm.gen_step_witness(pre, oracle))
        write_witness_bundle(
            scenario["witness_out"], scheme.name,
            witness_source.root_at(step_no - 1), witness_source.root_at(step_no),
            witness, [],
        )
    return result


def _run_two_phase(scenario, scheme, transcript_records) -> multiphase.TwoPhaseResult:
    if not scenario["model"] or not scenario["input"]:
        raise ConfigError("two-phase dispute needs --model and --input")
    graph = _load_model(scenario["model"])
    input_tensor = _load_tensor(scenario["input"])
    streams = rng.stream(scenario["seed"], "fault")
    gfault = _graph_fault(scenario, graph, streams)
    chain = _fresh_chain(scenario)
    faulty_submitter = scenario["faulty"] == "submitter"
    submitter = multiphase.make_party(
        "submitter", graph, input_tensor,
        graph_fault=gfault if faulty_submitter else None, scheme=scheme,
    )
    challenger = multiphase.make_party(
        "challenger", graph, input_tensor,
        graph_fault=None if faulty_submitter else gfault, scheme=scheme,
    )
    cfg = multiphase.PhaseConfig(k_phase1=scenario["k"], k_phase2=scenario["k"],
                                 m=scenario["m"])
    result = multiphase.run_two_phase_dispute(
        graph, input_tensor, submitter, challenger, cfg, chain, scheme,
    )
    transcript_records.extend(result.transcript)
    return result


def cmd_dispute(args) -> int:
    scheme = hashing.active_scheme()
    scenario = _scenario_from_args(args)
    records: list[dict] = [{
        "event": "scenario",
        "hash": scheme.name,
        "seed": scenario["seed"],
        "protocol": scenario["protocol"],
        "k": scenario["k"],
        "m": scenario["m"],
    }]
    if scenario["protocol"] == "single":
        result = _run_single(scenario, scheme, records)
        pinned_node = "-"
        pinned_step = result.pinned_step if result.pinned_step is not None else "-"
        rounds = result.rounds
    else:
        result = _run_two_phase(scenario, scheme, records)
        pinned_node = result.pinned_node if result.pinned_node is not None else "-"
        pinned_step = result.pinned_step if result.pinned_step is not None else "-"
        rounds = result.phase1_rounds + result.phase2_rounds
    if scenario["transcript"]:
        with open(scenario["transcript"], "w") as fh:
            for record in records:
                fh.write(json.dumps(record) + "\n")
    print(f"winner={result.winner} rounds={rounds} "
          f"pinned_node={pinned_node} pinned_step={pinned_step}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# security / economics reports
# ---------------------------------------------------------------------------


def _parse_range(spec: str) -> list[int]:
    if ":" in spec:
        lo, hi = spec.split(":", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(spec)]


def cmd_security(args) -> int:
    try:
        ms = _parse_range(args.m)
    except ValueError as exc:
        raise ConfigError(f"bad m range: {exc}") from exc
    print("p,m,f,p_any_trust,p_majority_trust")
    for m in ms:
        p_any = economics.any_trust_prob(args.p, m)
        p_maj = economics.majority_trust_prob(args.p, m, args.f)
        print(f"{args.p!r},{m},{args.f!r},{p_any!r},{p_maj!r}")
    return EXIT_OK


def cmd_economics(args) -> int:
    if args.kind == "equilibrium":
        payoffs = economics.GamePayoffs(C=args.C, R=args.R, L=args.L, B=args.B, S=args.S)
        table = economics.payoff_matrix(payoffs)
        print("action (validator/submitter)  validator  submitter")
        for (va, sa), (uv, us) in table.items():
            print(f"  {va}/{sa}: {uv!r} {us!r}")
        eq = economics.verifier_equilibrium(payoffs)
        print(f"cheat_probability={eq.p_c!r}")
        print(f"check_probability={eq.p_v!r}")
        print(f"interior={eq.interior}")
        return EXIT_OK
    # attention
    best = economics.optimal_attention(args.r, args.t, args.C)
    print(f"deposit={best.G!r}")
    print(f"response_probability={best.p_t!r}")
    print(f"min_cost={best.cost!r}")
    if args.simulate:
        report = economics.simulate_attention_rounds(
            rounds=args.simulate,
            p_t=args.p_t if args.p_t is not None else best.p_t,
            n_validators=args.validators,
            lazy_fraction=args.lazy_fraction,
            seed=args.seed,
            penalty=args.penalty,
        )
        print(f"rounds={report.rounds} samples={report.samples} "
              f"selected={report.selections} empirical_rate={report.empirical_rate!r} "
              f"penalized={report.penalized} burned={report.burned}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# witness bundles
# ---------------------------------------------------------------------------


def write_witness_bundle(path, scheme_name, pre_root, claimed_post, witness, preimages):
    blob = witness.to_bytes()
    with open(path, "wb") as fh:
        fh.write(WITNESS_MAGIC)
        name = scheme_name.encode()
        fh.write(struct.pack("<B", len(name)))
        fh.write(name)
        fh.write(pre_root)
        fh.write(claimed_post)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(preimages)))
        for value in preimages:
            fh.write(struct.pack("<I", len(value)))
            fh.write(value)


def read_witness_bundle(data: bytes):
    if data[:4] != WITNESS_MAGIC:
        raise IoError("bad witness bundle magic")
    off = 4
    name_len = data[off]
    off += 1
    scheme_name = data[off : off + name_len].decode()
    off += name_len
    pre_root = data[off : off + 32]
    claimed = data[off + 32 : off + 64]
    off += 64
    (blob_len,) = struct.unpack_from("<I", data, off)
    off += 4
    witness = fpvm.StepWitness.from_bytes(data[off : off + blob_len])
    off += blob_len
    (n_pre,) = struct.unpack_from("<I", data, off)
    off += 4
    preimages = []
    for _ in range(n_pre):
        (vlen,) = struct.unpack_from("<I", data, off)
        off += 4
        preimages.append(data[off : off + vlen])
        off += vlen
    return scheme_name, pre_root, claimed, witness, preimages


def cmd_verify_witness(args) -> int:
    data = _read_file(args.file)
    try:
        scheme_name, pre_root, claimed, witness, values = read_witness_bundle(data)
    except (ValueError, struct.error) as exc:
        raise IoError(f"{args.file}: {exc}") from exc
    scheme = hashing.get_scheme(scheme_name)
    oracle = fpvm.PreimageOracle(scheme)
    for value in values:
        oracle.put(value)
    verdict = fpvm.verify_step(pre_root, claimed, witness,
                               preimage_chunk_check=not args.skip_preimage_check,
                               preimages=oracle, scheme=scheme)
    status = "Accept" if verdict.accepted else "Reject"
    reason = f" reason={verdict.reason}" if verdict.reason else ""
    print(f"verdict={status}{reason}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opml", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a model, print the claim")
    p_run.add_argument("--model", required=True)
    p_run.add_argument("--input", required=True)
    p_run.add_argument("--out")
    p_run.add_argument("--dump-trace")
    p_run.add_argument("--max-steps", type=int, default=10_000_000)
    p_run.set_defaults(fn=cmd_run)

    p_disp = sub.add_parser("dispute", help="play a dispute game")
    p_disp.add_argument("--config")
    p_disp.add_argument("--model")
    p_disp.add_argument("--input")
    p_disp.add_argument("--protocol", choices=["single", "two-phase"])
    p_disp.add_argument("--k", type=int)
    p_disp.add_argument("--m", type=int)
    p_disp.add_argument("--n-from-model", action="store_true",
                        help="derive the trace from the model (default when --model given)")
    p_disp.add_argument("--synthetic-n", type=int,
                        help="use a synthetic program with this many steps instead of a model")
    p_disp.add_argument("--fault-node", type=int)
    p_disp.add_argument("--fault-step", type=int)
    p_disp.add_argument("--fault-element", type=int)
    p_disp.add_argument("--fault-bit", type=int)
    p_disp.add_argument("--faulty", choices=["submitter", "challenger"])
    p_disp.add_argument("--strategy", choices=["honest", "fault", "wrong-midpoint", "silent", "random"])
    p_disp.add_argument("--silent-after", type=int)
    p_disp.add_argument("--wrong-round", type=int)
    p_disp.add_argument("--seed", type=int)
    p_disp.add_argument("--challenge-period", type=int)
    p_disp.add_argument("--transcript")
    p_disp.add_argument("--witness-out")
    p_disp.set_defaults(fn=cmd_dispute)

    p_sec = sub.add_parser("security", help="trust-model probabilities (CSV)")
    p_sec.add_argument("--p", type=float, required=True)
    p_sec.add_argument("--m", required=True, help="validator count or range a:b")
    p_sec.add_argument("--f", type=float, default=0.5)
    p_sec.set_defaults(fn=cmd_security)

    p_eco = sub.add_parser("economics", help="incentive analysis")
    eco_sub = p_eco.add_subparsers(dest="kind", required=True)
    p_eq = eco_sub.add_parser("equilibrium")
    p_eq.add_argument("--C", type=float, required=True)
    p_eq.add_argument("--R", type=float, required=True)
    p_eq.add_argument("--L", type=float, required=True)
    p_eq.add_argument("--B", type=float, required=True)
    p_eq.add_argument("--S", type=float, required=True)
    p_eq.set_defaults(fn=cmd_economics)
    p_att = eco_sub.add_parser("attention")
    p_att.add_argument("--r", type=float, required=True)
    p_att.add_argument("--t", type=float, required=True)
    p_att.add_argument("--C", type=float, required=True)
    p_att.add_argument("--p-t", type=float, dest="p_t")
    p_att.add_argument("--simulate", type=int)
    p_att.add_argument("--validators", type=int, default=1)
    p_att.add_argument("--lazy-fraction", type=float, default=0.0)
    p_att.add_argument("--penalty", type=int, default=10)
    p_att.add_argument("--seed", type=int, default=0)
    p_att.set_defaults(fn=cmd_economics)

    p_vw = sub.add_parser("verify-witness", help="offline one-step verification")
    p_vw.add_argument("--file", required=True)
    p_vw.add_argument("--skip-preimage-check", action="store_true")
    p_vw.set_defaults(fn=cmd_verify_witness)
    return parser


def main(argv: list[str] | None = None) -> int:
    if "OPML_HASH" in os.environ:
        try:
            hashing.set_active_scheme(os.environ["OPML_HASH"])
        except KeyError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (dispute.ProtocolViolation, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
