"""Command line entry point.

Exit codes: 0 success, 2 validation error, 3 an acceptance bound was not met.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import biometric, harness, lsh
from .config import Config, ConfigError
from .ledger import (
    Ledger,
    LedgerError,
    TransactionRejected,
    keygen,
    read_chain_file,
    secret_from_bytes,
    secret_to_bytes,
)
from .passport import DuplicateEnrollment, PassportNode, PassportParams, ValidationError, VaccinationRecord, setup

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_BOUND = 3



class BoundFailure(Exception):
    pass


def _thresholds(text: str) -> tuple[float, ...]:
    """``lo:hi:step`` or a comma-separated list."""
    if ":" in text:
        lo, hi, step = (float(p) for p in text.split(":"))
        return harness.threshold_range(lo, hi, step)
    return tuple(float(p) for p in text.split(","))


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# --------------------------------------------------------------------------
# State directory shared by the ledger and passport commands


class StateDir:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.chain = self.root / "chain.bin"
        self.meta = self.root / "ledger.json"
        self.keys = self.root / "keys.json"
        self.params = self.root / "params.json"

    def load_ledger(self) -> Ledger:
        if not self.chain.exists():
            raise ConfigError(f"no ledger in {self.root}; run 'ledger init' first")
        meta = json.loads(self.meta.read_text(encoding="utf-8"))
        ledger = Ledger.from_encoded(read_chain_file(self.chain), empty_blocks=meta["empty_blocks"], now=meta["now"])
        ledger.restore_mempool(meta["mempool"])
        return ledger

    def save_ledger(self, ledger: Ledger, previous_blocks: int) -> None:
        ledger.append_to(self.chain, previous_blocks)
        meta = {"now": ledger.now, "empty_blocks": ledger.empty_blocks, "mempool": ledger.mempool_to_json()}
        self.meta.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")

    def secret(self, party: str):
        keys = json.loads(self.keys.read_text(encoding="utf-8"))
        if party not in keys:
            raise ValidationError(f"no secret key for party {party!r} in {self.keys}")
        return secret_from_bytes(bytes.fromhex(keys[party]))


# --------------------------------------------------------------------------
# Commands


def cmd_synth(args, cfg: Config) -> int:
    ds = biometric.synth_generate(
        args.subjects, args.samples, cfg.p_intra, cfg.mask_density, cfg.seed, rows=cfg.rows, cols=cfg.cols,
        max_rotation=args.max_rotation,
    )
    biometric.save_dataset(ds, args.out)
    if args.scans_dir:
        out = Path(args.scans_dir)
        out.mkdir(parents=True, exist_ok=True)
        for subject, sample, t, m in ds:
            biometric.write_scan(out / f"subject{subject:03d}-sample{sample:02d}.iris", t, m)
    _emit({"dataset": str(args.out), "subjects": ds.subjects, "samples_per_subject": ds.samples_per_subject})
    return EXIT_OK


def _eval_config(args, cfg: Config, domain: str) -> harness.EvalConfig:
    return harness.EvalConfig(
        thresholds=_thresholds(args.thresholds),
        domain=domain,
        subjects=args.subjects,
        samples_per_subject=args.samples,
        p_intra=cfg.p_intra,
        mask_density=cfg.mask_density,
        seed=cfg.seed,
        trials=args.trials,
        masking_mode=cfg.masking_mode,
        max_shifts=cfg.max_shifts,
        hash_bits=cfg.hash_bits,
        impostor_cap=cfg.impostor_cap,
        rows=cfg.rows,
        cols=cfg.cols,
    )


def cmd_eval_far_frr(args, cfg: Config) -> int:
    domains = ("raw", "hashed") if args.domain == "both" else (args.domain,)
    summary = {}
    ok = True
    for domain in domains:
        rows = harness.run_far_frr(_eval_config(args, cfg, domain))
        if args.out:
            path = Path(args.out)
            if len(domains) > 1:
                path = path.with_name(f"{path.stem}-{domain}{path.suffix}")
            harness.export_report(rows, path, args.format)
        far = [r.far for r in rows]
        frr = [r.frr for r in rows]
        monotone = all(a <= b for a, b in zip(far, far[1:])) and all(a >= b for a, b in zip(frr, frr[1:]))
        ok &= monotone
        summary[domain] = {
            "rows": [r.__dict__ for r in rows],
            "crossover_threshold": harness.crossover(rows),
            "monotone": monotone,
        }
    _emit(summary)
    if not ok:
        raise BoundFailure("FAR/FRR curves are not monotone")
    return EXIT_OK


def cmd_eval_security(args, cfg: Config) -> int:
    R = lsh.sample_projections(cfg.n, cfg.hash_bits, cfg.seed)
    ds = biometric.synth_generate(args.subjects, args.samples, cfg.p_intra, cfg.mask_density, cfg.seed, rows=cfg.rows, cols=cfg.cols)
    report = harness.run_security_suite(
        R,
        args.trials,
        cfg.seed,
        dataset=ds,
        masking_mode=cfg.masking_mode,
        security_lambda=cfg.security_lambda,
        census_n=args.census_n,
        census_m=args.census_m,
        census_trials=args.census_trials,
    )
    _emit(report.to_json())
    if not report.passed:
        raise BoundFailure("security probe outside configured bounds")
    return EXIT_OK


def cmd_scenario_run(args, cfg: Config) -> int:
    transcript = harness.run_scenario(args.file)
    data = harness.transcript_bytes(transcript)
    if args.out:
        Path(args.out).write_bytes(data)
    else:
        sys.stdout.write(data.decode("utf-8"))
    return EXIT_OK


def cmd_ledger_init(args, cfg: Config) -> int:
    state = StateDir(args.state)
    state.root.mkdir(parents=True, exist_ok=True)
    if state.chain.exists() and not args.force:
        raise ConfigError(f"{state.chain} exists; pass --force to overwrite")
    keys, parties = {}, []
    for i in range(args.parties):
        sk, party = keygen(f"party-{i}")
        keys[party.party_id] = secret_to_bytes(sk).hex()
        parties.append(party)
    ledger = Ledger(parties, empty_blocks=cfg.empty_blocks)
    state.chain.unlink(missing_ok=True)
    state.save_ledger(ledger, 0)
    state.keys.write_text(json.dumps(keys, indent=2) + "\n", encoding="utf-8")
    _emit({"members": ledger.members, "blocks": ledger.get_num_blocks()})
    return EXIT_OK


def cmd_ledger_tick(args, cfg: Config) -> int:
    state = StateDir(args.state)
    ledger = state.load_ledger()
    before = ledger.get_num_blocks()
    produced = ledger.step(args.count)
    state.save_ledger(ledger, before)
    _emit({"now": ledger.now, "blocks": ledger.get_num_blocks(), "produced": [b.height for b in produced]})
    return EXIT_OK


def cmd_ledger_verify(args, cfg: Config) -> int:
    blobs = read_chain_file(StateDir(args.state).chain)
    from .ledger import verify_encoded_chain

    check = verify_encoded_chain(blobs)
    _emit({"ok": check.ok, "height": check.height, "reason": check.reason, "blocks": len(blobs)})
    if not check:
        raise BoundFailure(f"chain invalid at height {check.height}: {check.reason}")
    return EXIT_OK


def cmd_ledger_show(args, cfg: Config) -> int:
    ledger = StateDir(args.state).load_ledger()
    _emit(ledger.retrieve_block(args.height).to_json())
    return EXIT_OK


def cmd_ledger_export(args, cfg: Config) -> int:
    ledger = StateDir(args.state).load_ledger()
    ledger.export_jsonl(args.out)
    return EXIT_OK


def cmd_passport_setup(args, cfg: Config) -> int:
    state = StateDir(args.state)
    state.root.mkdir(parents=True, exist_ok=True)
    params = setup(
        cfg.security_lambda,
        cfg.seed,
        m=cfg.hash_bits,
        rows=cfg.rows,
        cols=cfg.cols,
        threshold=cfg.threshold,
        rotation_search=cfg.rotation_search,
        max_shifts=cfg.max_shifts,
    )
    params.save(state.params)
    _emit({"params": str(state.params), "n": params.projections.n, "m": params.projections.m})
    return EXIT_OK


def _node(state: StateDir, cfg: Config) -> tuple[PassportNode, Ledger, int]:
    if not state.params.exists():
        raise ConfigError(f"no params in {state.root}; run 'passport setup' first")
    ledger = state.load_ledger()
    before = ledger.get_num_blocks()
    # delay draws must differ between invocations that share a seed
    node = PassportNode(PassportParams.load(state.params), ledger, seed=cfg.seed * 1_000_003 + ledger.now)
    return node, ledger, before


def _record(path: str) -> VaccinationRecord:
    return VaccinationRecord.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def cmd_passport_write(args, cfg: Config) -> int:
    state = StateDir(args.state)
    node, ledger, before = _node(state, cfg)
    scan = biometric.read_scan(args.scan)
    sk = state.secret(args.party)
    if args.action == "enroll":
        uid = node.enroll(args.party, sk, args.dob, args.gender, scan, _record(args.record))
        out = {"id": uid.hex(), "enrolled": True}
    else:
        rec = node.add_record(args.party, sk, args.dob, args.gender, scan, _record(args.record))
        out = {"id": rec.user_id.hex(), "enrolled": rec.enrolled}
    state.save_ledger(ledger, before)
    _emit(out)
    return EXIT_OK


def cmd_passport_auth(args, cfg: Config) -> int:
    node, _, _ = _node(StateDir(args.state), cfg)
    res = node.authenticate_detail(args.dob, args.gender, biometric.read_scan(args.scan))
    _emit({"id": None if res.user_id is None else res.user_id.hex(), "path": res.path, "distance": res.distance})
    return EXIT_OK


def cmd_passport_fetch(args, cfg: Config) -> int:
    node, _, _ = _node(StateDir(args.state), cfg)
    recs = node.fetch_records(args.dob, args.gender, biometric.read_scan(args.scan))
    _emit([r.to_json() for r in recs])
    return EXIT_OK


def cmd_passport_sync(args, cfg: Config) -> int:
    node, _, _ = _node(StateDir(args.state), cfg)
    st = node.state()
    _emit({"num_blocks": st.num_blocks, "ids": len(st.ids), "records": sum(node.records.values()), "hscans": len(st.hscans)})
    return EXIT_OK


def cmd_lsh_hash(args, cfg: Config) -> int:
    if args.params:
        params = PassportParams.load(args.params)
        R, mode, gm = params.projections, params.masking_mode, params.global_mask
    else:
        R, mode, gm = lsh.sample_projections(cfg.n, cfg.hash_bits, cfg.seed), cfg.masking_mode, None
    t, m = biometric.read_scan(args.scan)
    fv = biometric.extract_feature_vector(t, m, mode, gm)
    _emit({"hash": lsh.hash_to_hex(lsh.s3hash(R, fv)), "m": R.m})
    return EXIT_OK


def cmd_lsh_locality(args, cfg: Config) -> int:
    angles = [math.pi * k / 8 for k in (1, 2, 3, 4)]
    rows = lsh.eval_locality(angles, pairs=args.pairs, n=args.n, m=args.m, seed=cfg.seed)
    out = [r.__dict__ | {"error": r.error} for r in rows]
    _emit(out)
    if any(r.error > args.tolerance for r in rows):
        raise BoundFailure("locality law outside tolerance")
    return EXIT_OK


def cmd_lsh_census(args, cfg: Config) -> int:
    counts = lsh.preimage_census(args.n, args.m, args.trials, cfg.seed)
    expected = 2 ** (args.n - args.m)
    median = float(np.median(counts))
    _emit({"counts": counts, "median": median, "expected": expected, "ratio": median / expected})
    if not expected / 4 <= median <= expected * 4:
        raise BoundFailure("median preimage count outside a factor of 4")
    return EXIT_OK


def cmd_lsh_balance(args, cfg: Config) -> int:
    R = lsh.sample_projections(args.n or cfg.n, args.m or cfg.hash_bits, cfg.seed)
    rep = lsh.bit_balance_advantage(R, args.trials, cfg.seed)
    _emit({"max_advantage": rep.max_advantage, "mean_advantage": float(rep.advantages.mean()), "trials": rep.trials})
    if rep.max_advantage >= args.bound:
        raise BoundFailure("bit-balance advantage above bound")
    return EXIT_OK


def cmd_lsh_entropy(args, cfg: Config) -> int:
    ds = biometric.load_dataset(args.dataset)
    est = lsh.entropy_estimate(harness.feature_vectors(ds, cfg.masking_mode))
    sp = lsh.SecurityParams(cfg.security_lambda, cfg.hash_bits, est)
    _emit({"entropy_upper_bound_bits": est, "required_bits": cfg.hash_bits + cfg.security_lambda, "input_hiding_regime": sp.input_hiding_regime})
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vaxpass", description="Biometric vaccination passport simulator")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic iris dataset")
    s.add_argument("--subjects", type=int, default=20)
    s.add_argument("--samples", type=int, default=5)
    s.add_argument("--max-rotation", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--scans-dir", help="also write one scan file per sample here")
    s.set_defaults(func=cmd_synth)

    ev = sub.add_parser("eval").add_subparsers(dest="eval_command", required=True)
    f = ev.add_parser("far-frr", help="FAR/FRR threshold sweep")
    f.add_argument("--domain", choices=("raw", "hashed", "both"), default="hashed")
    f.add_argument("--thresholds", default="0.25:0.35:0.01")
    f.add_argument("--subjects", type=int, default=20)
    f.add_argument("--samples", type=int, default=5)
    f.add_argument("--trials", type=int, default=1)
    f.add_argument("--out")
    f.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    f.set_defaults(func=cmd_eval_far_frr)
    sec = ev.add_parser("security", help="input-hiding, preimage and entropy probes")
    sec.add_argument("--trials", type=int, default=5000)
    sec.add_argument("--subjects", type=int, default=50)
    sec.add_argument("--samples", type=int, default=2)
    sec.add_argument("--census-n", type=int, default=12)
    sec.add_argument("--census-m", type=int, default=4)
    sec.add_argument("--census-trials", type=int, default=50)
    sec.set_defaults(func=cmd_eval_security)

    sc = sub.add_parser("scenario").add_subparsers(dest="scenario_command", required=True)
    r = sc.add_parser("run", help="run a JSON scenario and print its transcript")
    r.add_argument("file")
    r.add_argument("--out")
    r.set_defaults(func=cmd_scenario_run)

    lg = sub.add_parser("ledger").add_subparsers(dest="ledger_command", required=True)
    for name, func in (("init", cmd_ledger_init), ("tick", cmd_ledger_tick), ("verify", cmd_ledger_verify),
                       ("show", cmd_ledger_show), ("export", cmd_ledger_export)):
        c = lg.add_parser(name)
        c.add_argument("--state", default="vaxpass-state")
        c.set_defaults(func=func)
        if name == "init":
            c.add_argument("--parties", type=int, default=3)
            c.add_argument("--force", action="store_true")
        elif name == "tick":
            c.add_argument("--count", type=int, default=1)
        elif name == "show":
            c.add_argument("height", type=int)
        elif name == "export":
            c.add_argument("--format", choices=("jsonl",), default="jsonl")
            c.add_argument("--out", required=True)

    pp = sub.add_parser("passport").add_subparsers(dest="passport_command", required=True)
    c = pp.add_parser("setup")
    c.add_argument("--state", default="vaxpass-state")
    c.set_defaults(func=cmd_passport_setup)
    for name in ("enroll", "add-record", "auth", "fetch"):
        c = pp.add_parser(name)
        c.add_argument("--state", default="vaxpass-state")
        c.add_argument("--dob", required=True)
        c.add_argument("--gender", required=True)
        c.add_argument("--scan", required=True)
        if name in ("enroll", "add-record"):
            c.add_argument("--party", required=True)
            c.add_argument("--record", required=True)
            c.set_defaults(func=cmd_passport_write, action=name)
        else:
            c.set_defaults(func=cmd_passport_auth if name == "auth" else cmd_passport_fetch)
    c = pp.add_parser("sync")
    c.add_argument("--state", default="vaxpass-state")
    c.set_defaults(func=cmd_passport_sync)

    ls = sub.add_parser("lsh").add_subparsers(dest="lsh_command", required=True)
    c = ls.add_parser("hash")
    c.add_argument("--scan", required=True)
    c.add_argument("--params")
    c.set_defaults(func=cmd_lsh_hash)
    c = ls.add_parser("eval-locality")
    c.add_argument("--pairs", type=int, default=10_000)
    c.add_argument("--n", type=int, default=1024)
    c.add_argument("--m", type=int, default=64)
    c.add_argument("--tolerance", type=float, default=0.03)
    c.set_defaults(func=cmd_lsh_locality)
    c = ls.add_parser("preimage-census")
    c.add_argument("--n", type=int, default=12)
    c.add_argument("--m", type=int, default=4)
    c.add_argument("--trials", type=int, default=50)
    c.set_defaults(func=cmd_lsh_census)
    c = ls.add_parser("bit-balance")
    c.add_argument("--n", type=int)
    c.add_argument("--m", type=int)
    c.add_argument("--trials", type=int, default=5000)
    c.add_argument("--bound", type=float, default=0.05)
    c.set_defaults(func=cmd_lsh_balance)
    c = ls.add_parser("entropy")
    c.add_argument("--dataset", required=True)
    c.set_defaults(func=cmd_lsh_entropy)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = Config.load(args.config) if args.config else Config()
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=args.seed)
        return args.func(args, cfg)
    except BoundFailure as exc:
        print(f"bound not met: {exc}", file=sys.stderr)
        return EXIT_BOUND
    except (ConfigError, ValidationError, DuplicateEnrollment, TransactionRejected, LedgerError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
