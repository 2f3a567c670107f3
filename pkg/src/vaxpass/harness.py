"""Evaluation engine: FAR/FRR sweeps, security probes and protocol scenarios."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from . import biometric, lsh
from .biometric import MaskingMode, SyntheticDataset
from .config import ConfigError
from .ledger import Ledger, LedgerError, keygen_from_seed
from .passport import PassportNode, ValidationError, VaccinationRecord, setup

REPORT_COLUMNS = ("threshold", "far", "frr", "genuine_comparisons", "impostor_comparisons")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...]
    domain: str = "hashed"
    subjects: int = 20
    samples_per_subject: int = 5
    p_intra: float = 0.1
    mask_density: float = 0.1
    seed: int = 0
    trials: int = 1
    masking_mode: str = "type1"
    max_shifts: int = 8
    hash_bits: int = 256
    impostor_cap: int = 10
    rows: int = 20
    cols: int = 480
    max_rotation: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ConfigError("thresholds must be strictly ascending")
        if any(not 0.0 <= t <= 1.0 for t in self.thresholds):
            raise ConfigError("thresholds must lie in [0, 1]")
        if self.domain not in ("raw", "hashed"):
            raise ConfigError(f"unknown domain {self.domain!r}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.impostor_cap < 1:
            raise ConfigError("impostor_cap must be >= 1")
        MaskingMode(self.masking_mode)


@dataclass(frozen=True)
class FarFrrRow:
    threshold: float
    far: float
    frr: float
    genuine_comparisons: int
    impostor_comparisons: int


def threshold_range(lo: float, hi: float, step: float) -> tuple[float, ...]:
    count = int(round((hi - lo) / step))
    return tuple(round(lo + k * step, 10) for k in range(count + 1))


# --------------------------------------------------------------------------
# Pair construction and scoring


def pair_counts(subjects: int, samples: int) -> tuple[int, int]:
    """Closed-form (genuine, all impostor) unordered pair counts."""
    genuine = subjects * math.comb(samples, 2)
    total = math.comb(subjects * samples, 2)
    return genuine, total - genuine


def build_pairs(
    subjects: int, samples: int, impostor_cap: int, rng: np.random.Generator
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Genuine and (capped, seeded) impostor pairs over flat sample indices."""
    if subjects < 2 or samples < 2:
        raise EvaluationError("need at least two subjects with two samples each")
    genuine = [
        (s * samples + a, s * samples + b) for s in range(subjects) for a, b in itertools.combinations(range(samples), 2)
    ]
    impostor = [
        (i, j) for i, j in itertools.combinations(range(subjects * samples), 2) if i // samples != j // samples
    ]
    cap = impostor_cap * len(genuine)
    if len(impostor) > cap:
        picked = np.sort(rng.choice(len(impostor), size=cap, replace=False))
        impostor = [impostor[k] for k in picked]
    return genuine, impostor


def feature_vectors(ds: SyntheticDataset, mode: str | MaskingMode) -> np.ndarray:
    mode = MaskingMode(mode)
    gmask = biometric.compute_global_mask(ds.masks()) if mode is MaskingMode.TYPE2 else None
    return np.stack([biometric.extract_feature_vector(t, m, mode, gmask) for _, _, t, m in ds])


def score_pairs(
    fvs: np.ndarray,
    pairs: Sequence[tuple[int, int]],
    domain: str,
    *,
    projections: Optional[lsh.ProjectionSet] = None,
    max_shifts: int = 8,
    rows: int = 20,
) -> np.ndarray:
    if domain == "hashed":
        if projections is None:
            raise EvaluationError("hashed domain needs a projection set")
        hashes = lsh.s3hash_many(projections, fvs)
        return np.array([np.count_nonzero(hashes[i] != hashes[j]) / hashes.shape[1] for i, j in pairs])
    return np.array([biometric.min_shift_distance(fvs[i], fvs[j], max_shifts, rows) for i, j in pairs])


def far_frr_rows(
    genuine: np.ndarray, impostor: np.ndarray, thresholds: Iterable[float]
) -> list[FarFrrRow]:
    """Strict acceptance ``d < t``: FAR counts accepted impostors, FRR rejected genuines."""
    genuine = np.asarray(genuine)
    impostor = np.asarray(impostor)
    if genuine.size == 0 or impostor.size == 0:
        raise EvaluationError("both genuine and impostor comparisons are required")
    rows = []
    for t in thresholds:
        far = 100.0 * np.count_nonzero(impostor < t) / impostor.size
        frr = 100.0 * np.count_nonzero(genuine >= t) / genuine.size
        rows.append(FarFrrRow(float(t), round(far, 3), round(frr, 3), int(genuine.size), int(impostor.size)))
    return rows


def collect_scores(cfg: EvalConfig) -> tuple[np.ndarray, np.ndarray]:
    """Genuine and impostor distances for every trial of ``cfg``."""
    gen_all, imp_all = [], []
    for trial in range(cfg.trials):
        seed = cfg.seed + trial
        ds = biometric.synth_generate(
            cfg.subjects,
            cfg.samples_per_subject,
            cfg.p_intra,
            cfg.mask_density,
            seed,
            rows=cfg.rows,
            cols=cfg.cols,
            max_rotation=cfg.max_rotation,
        )
        rng = np.random.default_rng([seed, 0x9A1F])
        genuine, impostor = build_pairs(cfg.subjects, cfg.samples_per_subject, cfg.impostor_cap, rng)
        fvs = feature_vectors(ds, cfg.masking_mode)
        proj = lsh.sample_projections(cfg.rows * cfg.cols, cfg.hash_bits, seed) if cfg.domain == "hashed" else None
        kw = dict(projections=proj, max_shifts=cfg.max_shifts, rows=cfg.rows)
        gen_all.append(score_pairs(fvs, genuine, cfg.domain, **kw))
        imp_all.append(score_pairs(fvs, impostor, cfg.domain, **kw))
    return np.concatenate(gen_all), np.concatenate(imp_all)


def run_far_frr(cfg: EvalConfig) -> list[FarFrrRow]:
    genuine, impostor = collect_scores(cfg)
    return far_frr_rows(genuine, impostor, cfg.thresholds)


def run_raw_baseline(cfg: EvalConfig) -> list[FarFrrRow]:
    return run_far_frr(EvalConfig(**{**asdict(cfg), "domain": "raw"}))


def crossover(rows: Sequence[FarFrrRow]) -> Optional[float]:
    """Threshold of the first row where FAR reaches or exceeds FRR."""
    for row in rows:
        if row.far >= row.frr:
            return row.threshold
    return None


# --------------------------------------------------------------------------
# Report files


def export_report(rows: Sequence[FarFrrRow], path: str | Path, fmt: str = "csv") -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_COLUMNS)
            for r in rows:
                writer.writerow([f"{r.threshold:g}", f"{r.far:.3f}", f"{r.frr:.3f}", r.genuine_comparisons, r.impostor_comparisons])
        elif fmt == "jsonl":
            for r in rows:
                fh.write(json.dumps({k: getattr(r, k) for k in REPORT_COLUMNS}) + "\n")
        else:
            raise ValueError(f"unknown report format {fmt!r}")


def parse_report(path: str | Path, fmt: str = "csv") -> list[FarFrrRow]:
    text = Path(path).read_text(encoding="utf-8")
    if fmt == "csv":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError("unexpected report header")
        recs: list[dict[str, Any]] = list(reader)
    elif fmt == "jsonl":
        recs = [json.loads(line) for line in text.splitlines() if line.strip()]
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return [
        FarFrrRow(
            float(r["threshold"]),
            float(r["far"]),
            float(r["frr"]),
            int(r["genuine_comparisons"]),
            int(r["impostor_comparisons"]),
        )
        for r in recs
    ]


# --------------------------------------------------------------------------
# Security probes


@dataclass
class SecurityBounds:
    max_advantage: float = 0.05
    census_factor: float = 4.0


@dataclass
class SecurityReport:
    bit_balance: dict
    census: dict
    entropy: Optional[dict]
    passed: bool

    def to_json(self) -> dict:
        return asdict(self)


def run_security_suite(
    projections: lsh.ProjectionSet,
    trials: int,
    seed: int,
    *,
    dataset: Optional[SyntheticDataset] = None,
    masking_mode: str = "type1",
    security_lambda: int = 128,
    census_n: int = 12,
    census_m: int = 4,
    census_trials: int = 50,
    bounds: Optional[SecurityBounds] = None,
) -> SecurityReport:
    bounds = bounds or SecurityBounds()
    adv = lsh.bit_balance_advantage(projections, trials, seed)
    balance = {
        "n": projections.n,
        "m": projections.m,
        "trials": trials,
        "max_advantage": adv.max_advantage,
        "mean_advantage": float(adv.advantages.mean()),
        "predicted_max": float(adv.predicted.max()),
        "bound": bounds.max_advantage,
        "degenerate": adv.degenerate,
        "adversary_class": "best single hash bit per input bit",
        "passed": adv.max_advantage < bounds.max_advantage,
    }

    counts = lsh.preimage_census(census_n, census_m, census_trials, seed)
    expected = 2 ** (census_n - census_m)
    median = float(np.median(counts))
    census = {
        "n": census_n,
        "m": census_m,
        "trials": census_trials,
        "counts": counts,
        "median": median,
        "mean": float(np.mean(counts)),
        "expected": expected,
        "ratio": median / expected,
        "passed": expected / bounds.census_factor <= median <= expected * bounds.census_factor,
    }

    entropy = None
    if dataset is not None:
        est = lsh.entropy_estimate(feature_vectors(dataset, masking_mode))
        sp = lsh.SecurityParams(security_lambda, projections.m, est)
        entropy = {
            "estimate_bits": est,
            "kind": "upper bound (sum of per-bit marginal entropies)",
            "required_bits": projections.m + security_lambda,
            "input_hiding_regime": sp.input_hiding_regime,
            "redundancy_bits": sp.redundancy(projections.n),
        }
    passed = balance["passed"] and census["passed"] and (entropy is None or entropy["input_hiding_regime"])
    return SecurityReport(balance, census, entropy, passed)


# --------------------------------------------------------------------------
# Scenarios

SCENARIO_OPS = ("setup", "enroll", "auth", "add-record", "fetch", "tick", "sync", "verify")


class ScenarioRunner:
    """Execute scenario steps against one simulated ledger and several nodes.

    Every party in the ledger runs its own :class:`PassportNode`.  User IDs
    in the transcript are replaced by aliases in order of first appearance.
    """

    def __init__(self) -> None:
        self.ledger: Optional[Ledger] = None
        self.nodes: dict[str, PassportNode] = {}
        self.keys: dict[str, Any] = {}
        self.dataset: Optional[SyntheticDataset] = None
        self.aliases: dict[bytes, str] = {}
        self.transcript: list[dict] = []

    def alias(self, user_id: Optional[bytes]) -> Optional[str]:
        if user_id is None:
            return None
        if user_id not in self.aliases:
            self.aliases[user_id] = f"user-{len(self.aliases) + 1}"
        return self.aliases[user_id]

    def run(self, steps: Sequence[dict]) -> list[dict]:
        for index, step in enumerate(steps):
            op = step.get("op")
            args = step.get("args", {})
            if op not in SCENARIO_OPS:
                raise EvaluationError(f"step {index}: unknown op {op!r}")
            if op != "setup" and self.ledger is None:
                raise EvaluationError(f"step {index}: scenario must start with setup")
            entry: dict[str, Any] = {"step": index, "op": op}
            try:
                entry.update(getattr(self, "_op_" + op.replace("-", "_"))(args))
            except (ValidationError, LedgerError, ValueError) as exc:
                entry["error"] = f"{type(exc).__name__}: {exc}"
            if self.ledger is not None:
                entry["height"] = self.ledger.get_num_blocks()
            self.transcript.append(entry)
        return self.transcript

    def _node(self, args: dict) -> PassportNode:
        name = args.get("node")
        if name not in self.nodes:
            raise ValidationError(f"unknown node {name!r}")
        return self.nodes[name]

    def _scan(self, args: dict):
        assert self.dataset is not None
        return self.dataset.scan(int(args["subject"]), int(args.get("sample", 0)))

    def _op_setup(self, args: dict) -> dict:
        seed = int(args.get("seed", 0))
        parties = int(args.get("parties", 2))
        rows, cols = int(args.get("rows", 20)), int(args.get("cols", 480))
        self.dataset = biometric.synth_generate(
            int(args.get("subjects", 4)),
            int(args.get("samples", 3)),
            float(args.get("p_intra", 0.05)),
            float(args.get("mask_density", 0.1)),
            seed,
            rows=rows,
            cols=cols,
        )
        params = setup(
            int(args.get("lambda", 128)),
            seed,
            m=int(args.get("m", 256)),
            rows=rows,
            cols=cols,
            threshold=float(args.get("threshold", 0.3)),
        )
        for i in range(parties):
            sk, party = keygen_from_seed(f"party-{i}", str(seed).encode())
            self.keys[party.party_id] = (sk, party)
        self.ledger = Ledger([p for _, p in self.keys.values()])
        self.nodes = {pid: PassportNode(params, self.ledger, seed=seed * 1000 + i) for i, pid in enumerate(sorted(self.keys))}
        return {"nodes": sorted(self.nodes)}

    def _op_enroll(self, args: dict) -> dict:
        node = self._node(args)
        sk, _ = self.keys[args["node"]]
        uid = node.enroll(args["node"], sk, args["dob"], args["gender"], self._scan(args), VaccinationRecord.from_json(args["record"]))
        return {"user": self.alias(uid), "state_digest": node.state_digest()}

    def _op_auth(self, args: dict) -> dict:
        node = self._node(args)
        res = node.authenticate_detail(args["dob"], args["gender"], self._scan(args))
        return {
            "user": self.alias(res.user_id),
            "path": res.path,
            "matching_candidates": res.matching_candidates,
            "state_digest": node.state_digest(),
        }

    def _op_add_record(self, args: dict) -> dict:
        node = self._node(args)
        sk, _ = self.keys[args["node"]]
        rec = node.add_record(args["node"], sk, args["dob"], args["gender"], self._scan(args), VaccinationRecord.from_json(args["record"]))
        return {"user": self.alias(rec.user_id), "enrolled": rec.enrolled, "state_digest": node.state_digest()}

    def _op_fetch(self, args: dict) -> dict:
        node = self._node(args)
        recs = node.fetch_records(args["dob"], args["gender"], self._scan(args))
        return {"records": [r.to_json() for r in recs], "state_digest": node.state_digest()}

    def _op_tick(self, args: dict) -> dict:
        assert self.ledger is not None
        self.ledger.step(int(args.get("count", 1)))
        return {"now": self.ledger.now}

    def _op_sync(self, args: dict) -> dict:
        nodes = [self._node(args)] if "node" in args else [self.nodes[k] for k in sorted(self.nodes)]
        for node in nodes:
            node.sync()
        return {"state_digests": {name: self.nodes[name].state_digest() for name in sorted(self.nodes)}}

    def _op_verify(self, args: dict) -> dict:
        assert self.ledger is not None
        check = self.ledger.verify_chain()
        return {"chain_ok": check.ok, "violation": check.reason}


def run_scenario(steps: Sequence[dict] | str | Path) -> list[dict]:
    if isinstance(steps, (str, Path)):
        steps = json.loads(Path(steps).read_text(encoding="utf-8"))
    if not isinstance(steps, list):
        raise EvaluationError("a scenario is a JSON list of {op, args} steps")
    return ScenarioRunner().run(steps)


def transcript_bytes(transcript: Sequence[dict]) -> bytes:
    return "".join(json.dumps(e, sort_keys=True) + "\n" for e in transcript).encode("utf-8")
