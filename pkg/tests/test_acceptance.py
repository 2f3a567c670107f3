"""Acceptance criteria, one test per criterion.

Each test records PASS/FAIL with its measured values; the summary is
printed at the end of the pytest run and written to
``artifacts/acceptance/summary.json``.  Run on its own with::

    pytest tests/test_acceptance.py -v
"""

import json
import math
import random
import time

import numpy as np
import pytest

from vaxpass import biometric, harness, lsh
from vaxpass.biometric import linearize, rotate
from vaxpass.harness import EvalConfig
from vaxpass.ledger import (
    Ledger,
    Transaction,
    TransactionRejected,
    decode_hscan_payload,
    encode_hscan_payload,
    encode_rec_payload,
    keygen_from_seed,
    signed_transaction,
    verify_blocks,
    verify_encoded_chain,
)
from vaxpass.passport import GENDERS, PassportNode, VaccinationRecord, compute_id, setup

VACCINES = ("comirnaty", "spikevax", "vaxzevria", "jcovden")


def people(rng: random.Random, k: int) -> list[tuple[str, str]]:
    out = []
    for _ in range(k):
        dob = f"{rng.randint(1, 28):02d}/{rng.randint(1, 12):02d}/{rng.randint(1930, 2015)}"
        out.append((dob, rng.choice(GENDERS)))
    return out


def vax_record(rng: random.Random, issuer: str, dose: int = 1) -> VaccinationRecord:
    return VaccinationRecord(
        date=f"2021-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}",
        vaccine=rng.choice(VACCINES),
        dose=dose,
        issuer=issuer,
    )


def chain_bytes(ledger: Ledger) -> bytes:
    return b"".join(ledger.stored_blocks())


@pytest.fixture(scope="module")
def shared_params():
    return setup(128, seed=0)


# --------------------------------------------------------------------------------------


def test_c1_locality_law(acceptance, artifact_dir):
    start = time.perf_counter()
    angles = [math.pi / 8, math.pi / 4, 3 * math.pi / 8, math.pi / 2]
    rows = lsh.eval_locality(angles, pairs=10_000, seed=0)
    elapsed = time.perf_counter() - start
    worst = max(r.error for r in rows)
    (artifact_dir / "c1_locality.json").write_text(
        json.dumps([{**r.__dict__, "error": r.error} for r in rows], indent=2) + "\n"
    )
    detail = " ".join(f"{r.theta:.3f}:{r.measured_agreement:.4f}/{r.expected_agreement:.4f}" for r in rows)
    ok = acceptance("C1", worst <= 0.03 and elapsed < 60, f"max error {worst:.4f}, {elapsed:.1f}s [{detail}]")
    assert ok


def test_c2_input_hiding(acceptance, artifact_dir):
    start = time.perf_counter()
    R = lsh.sample_projections(9600, 256, 0)
    rep = lsh.bit_balance_advantage(R, 5000, seed=0)
    elapsed = time.perf_counter() - start
    (artifact_dir / "c2_bit_balance.json").write_text(
        json.dumps(
            {
                "n": 9600,
                "m": 256,
                "trials": rep.trials,
                "max_advantage": rep.max_advantage,
                "mean_advantage": float(rep.advantages.mean()),
                "predicted_max": float(rep.predicted.max()),
                "advantages": rep.advantages.round(6).tolist(),
            }
        )
        + "\n"
    )
    ok = acceptance(
        "C2",
        rep.max_advantage < 0.05 and elapsed < 300,
        f"max advantage {rep.max_advantage:.4f} (mean {rep.advantages.mean():.4f}), {elapsed:.1f}s",
    )
    assert ok


def test_c3_preimage_census(acceptance, artifact_dir):
    start = time.perf_counter()
    counts = lsh.preimage_census(12, 4, 50, seed=0)
    elapsed = time.perf_counter() - start
    median = float(np.median(counts))
    (artifact_dir / "c3_census.json").write_text(
        json.dumps({"n": 12, "m": 4, "trials": 50, "seed": 0, "expected": 256, "median": median, "counts": counts}) + "\n"
    )
    ok = acceptance(
        "C3",
        64 <= median <= 1024 and elapsed < 120,
        f"median {median} vs 256 (ratio {median / 256:.2f}), mean {np.mean(counts):.1f}, {elapsed:.1f}s",
    )
    assert ok


def test_c4_protocol_round_trip(acceptance):
    exact_ok = noisy_ok = 0
    runs = 100
    for run in range(runs):
        rng = random.Random(run)
        params = setup(128, seed=run)
        ds = biometric.synth_generate(3, 2, 0.05, 0.1, seed=run)
        parties = [keygen_from_seed(f"party-{i}", b"c4") for i in range(2)]
        ledger = Ledger([p for _, p in parties])
        enroller = PassportNode(params, ledger, seed=run)
        who = people(rng, 3)
        uids = []
        for subject, (dob, gender) in enumerate(who):
            sk, p = parties[subject % 2]
            uids.append(enroller.enroll(p.party_id, sk, dob, gender, ds.scan(subject, 0), vax_record(rng, p.party_id)))
        ledger.step(101)
        verifier = PassportNode(params, ledger, seed=run + 1)
        dob, gender = who[0]
        exact_ok += verifier.authenticate(dob, gender, ds.scan(0, 0)) == uids[0]
        noisy_ok += verifier.authenticate(dob, gender, ds.scan(0, 1)) == uids[0]
    ok = acceptance(
        "C4",
        exact_ok == runs and noisy_ok / runs >= 0.9,
        f"exact {exact_ok}/{runs}, noisy rescan {noisy_ok}/{runs} (p_intra 0.05, threshold 0.3)",
    )
    assert ok


def test_c5_transaction_separation(acceptance, shared_params):
    rng = random.Random(5)
    ds = biometric.synth_generate(100, 1, 0.05, 0.1, seed=5)
    parties = [keygen_from_seed(f"party-{i}", b"c5") for i in range(3)]
    ledger = Ledger([p for _, p in parties])
    who = people(rng, 100)
    enrolled = {}
    for k, (dob, gender) in enumerate(who):
        sk, p = parties[k % 3]
        node = PassportNode(shared_params, ledger, seed=1000 + k)
        uid = node.enroll(p.party_id, sk, dob, gender, ds.scan(k, 0), vax_record(rng, p.party_id))
        enrolled[uid] = (dob, gender)
        ledger.step()
    ledger.step(101)

    rec_height, hscan_heights = {}, []
    for h in range(ledger.get_num_blocks()):
        for tx in ledger.retrieve_block(h).transactions:
            if tx.tx_type == "rec":
                rec_height[tx.payload[4:36]] = h
            else:
                hscan_heights.append((h, tx.payload))
    gaps = []
    for h, payload in hscan_heights:
        bits = decode_hscan_payload(payload)
        owners = [uid for uid, (dob, g) in enrolled.items() if compute_id(shared_params, dob, g, bits) == uid]
        assert len(owners) == 1
        gaps.append(h - rec_height[owners[0]])
    ok = acceptance(
        "C5",
        len(gaps) == 100 and len(rec_height) == 100 and min(gaps) >= 1,
        f"{len(gaps)} users, block gap min {min(gaps)} max {max(gaps)} mean {np.mean(gaps):.1f}",
    )
    assert ok


def test_c6_chain_integrity_and_fairness(acceptance):
    start = time.perf_counter()
    rng = random.Random(6)
    parties = [keygen_from_seed(f"party-{i}", b"c6") for i in range(3)]
    outsider_sk, _ = keygen_from_seed("intruder", b"c6")
    ledger = Ledger([p for _, p in parties])
    rejected = 0
    for op in range(500):
        roll = rng.random()
        sk, p = rng.choice(parties)
        if roll < 0.35:
            body = json.dumps({"op": op, "dose": rng.randint(1, 3)}).encode()
            uid = rng.getrandbits(256).to_bytes(32, "big")
            ledger.broadcast(p.party_id, sk, signed_transaction("rec", encode_rec_payload(uid, body), p.party_id, sk))
        elif roll < 0.6:
            bits = [rng.getrandbits(1) for _ in range(256)]
            ledger.anon_broadcast(sk, Transaction("hscan", encode_hscan_payload(bits)), delay_ticks=rng.randint(0, 10))
        elif roll < 0.7:
            try:
                tx = signed_transaction("rec", encode_rec_payload(bytes(32), b"{}"), "intruder", outsider_sk)
                ledger.broadcast("intruder", outsider_sk, tx)
            except TransactionRejected:
                rejected += 1
        else:
            ledger.step()
    while ledger.mempool():
        ledger.step()
    ledger.step((-(ledger.get_num_blocks() - 1)) % 3)

    check = ledger.verify_chain()
    counts = ledger.producer_counts()
    fair = len(set(counts.values())) == 1
    blobs = ledger.stored_blocks()

    # every byte of every block, each flipped by a random non-zero mask; only the
    # mutated block and its successor can be affected, so check just those
    mutations = undetected = 0
    for h, blob in enumerate(blobs):
        raw = bytearray(blob)
        for i in range(len(raw)):
            original = raw[i]
            raw[i] = original ^ rng.randint(1, 255)
            tampered = list(blobs)
            tampered[h] = bytes(raw)
            mutations += 1
            if verify_blocks(tampered, (h, h + 1)):
                undetected += 1
            raw[i] = original
    # and a sample through the full verifier
    full_misses = 0
    for _ in range(200):
        h = rng.randrange(len(blobs))
        raw = bytearray(blobs[h])
        raw[rng.randrange(len(raw))] ^= rng.randint(1, 255)
        tampered = list(blobs)
        tampered[h] = bytes(raw)
        full_misses += bool(verify_encoded_chain(tampered))
    elapsed = time.perf_counter() - start
    ok = acceptance(
        "C6",
        bool(check) and fair and undetected == 0 and full_misses == 0 and rejected > 0 and elapsed < 60,
        f"{len(blobs)} blocks, producers {counts}, {mutations} single-byte mutations, "
        f"{undetected} undetected, {rejected} intruder txs refused, {elapsed:.1f}s",
    )
    assert ok


def randomized_workload(seed: int, params, ds):
    """Random enroll/add-record/tick traffic from three parties over one ledger."""
    rng = random.Random(seed)
    parties = [keygen_from_seed(f"party-{i}", f"c7-{seed}".encode()) for i in range(3)]
    ledger = Ledger([p for _, p in parties])
    nodes = [PassportNode(params, ledger, seed=seed * 10 + i) for i in range(3)]
    who = people(rng, ds.subjects)
    used = set()
    for _ in range(rng.randint(8, 16)):
        i = rng.randrange(3)
        sk, p = parties[i]
        subject = rng.randrange(ds.subjects)
        dob, gender = who[subject]
        scan = ds.scan(subject, rng.randrange(ds.samples_per_subject))
        action = rng.random()
        if action < 0.6:
            nodes[i].add_record(p.party_id, sk, dob, gender, scan, vax_record(rng, p.party_id, rng.randint(1, 3)))
            used.add(subject)
        elif action < 0.8:
            nodes[i].fetch_records(dob, gender, scan)
        else:
            ledger.step(rng.randint(1, 30))
    ledger.step(101)
    return ledger, parties, nodes, [who[s] for s in sorted(used)], sorted(used)


def test_c7_c8_replay_and_privacy(acceptance, shared_params):
    ds = biometric.synth_generate(12, 3, 0.05, 0.1, seed=7)
    fvs = {
        (s, k): biometric.extract_feature_vector(*ds.scan(s, k)) for s in range(ds.subjects) for k in range(ds.samples_per_subject)
    }
    replay_ok = 0
    leaks: list[str] = []
    anon_count = 0
    for w in range(50):
        ledger, parties, writers, who, subjects = randomized_workload(w, shared_params, ds)
        a, b = PassportNode(shared_params, ledger, seed=1), PassportNode(shared_params, ledger, seed=2)
        states = [a.state(), b.state()] + [n.sync() for n in writers]
        replay_ok += all(states[0].same_contents(s) for s in states[1:])

        blob = chain_bytes(ledger)
        for dob, gender in who:
            if dob.encode() in blob:
                leaks.append(f"workload {w}: dob {dob}")
            if gender.encode() in blob:
                leaks.append(f"workload {w}: gender {gender}")
        for s in subjects:
            for k in range(ds.samples_per_subject):
                fv = fvs[(s, k)]
                if np.packbits(fv).tobytes() in blob or fv.tobytes() in blob:
                    leaks.append(f"workload {w}: feature vector {s}/{k}")
        for h in range(ledger.get_num_blocks()):
            for tx in ledger.retrieve_block(h).transactions:
                if not tx.anonymous:
                    continue
                anon_count += 1
                enc = tx.encode()
                for _, p in parties:
                    if p.party_id.encode() in enc or p.public_key in enc:
                        leaks.append(f"workload {w}: party {p.party_id} in anonymous tx")
    c7 = acceptance("C7", replay_ok == 50, f"{replay_ok}/50 workloads replay to set-equal state on 5 nodes")
    c8 = acceptance(
        "C8",
        not leaks and anon_count > 0,
        f"{len(leaks)} leaks across 50 chains, {anon_count} anonymous txs scanned" + (f": {leaks[:3]}" if leaks else ""),
    )
    assert c7 and c8


def test_c9_far_frr_shape(acceptance, artifact_dir):
    cfg = EvalConfig(thresholds=harness.threshold_range(0.25, 0.35, 0.01), domain="hashed", seed=0)
    rows = harness.run_far_frr(cfg)
    raw_rows = harness.run_raw_baseline(cfg)
    ends = harness.run_far_frr(EvalConfig(thresholds=(0.0, 1.0), domain="hashed", seed=0))
    harness.export_report(rows, artifact_dir / "c9_hashed.csv")
    harness.export_report(raw_rows, artifact_dir / "c9_raw.csv")
    far = [r.far for r in rows]
    frr = [r.frr for r in rows]
    shape = all(x <= y for x, y in zip(far, far[1:])) and all(x >= y for x, y in zip(frr, frr[1:]))
    rising = far[-1] > far[0] and frr[-1] <= frr[0]
    ok = acceptance(
        "C9",
        shape and rising and ends[0].far == 0.0 and ends[1].frr == 0.0,
        f"FAR {far[0]}->{far[-1]}, FRR {frr[0]}->{frr[-1]}, FAR(0)={ends[0].far}, FRR(1)={ends[1].frr}",
    )
    assert ok


def trivial_examples():
    """Every bitwise worked example, as (name, check) pairs."""
    z4 = np.zeros((20, 480), np.uint8)
    t = np.random.default_rng(0).integers(0, 2, (20, 480), dtype=np.uint8)
    m = np.random.default_rng(1).integers(0, 2, (20, 480), dtype=np.uint8)
    fv = linearize(t)
    single = z4.copy()
    single[0, 1] = 1
    R2 = lsh.ProjectionSet(n=3, m=2, seed=0, vectors=np.array([[1, -1, 0], [-1, -1, -1]], np.int8))
    R = lsh.sample_projections(40, 8, 3)
    x = np.random.default_rng(2).integers(0, 2, 40, dtype=np.uint8)
    return [
        ("type1 zero mask", lambda: np.array_equal(biometric.apply_mask_type1(t, z4).bits, t)),
        ("type1 full mask", lambda: not biometric.apply_mask_type1(t, 1 - z4).bits.any()),
        ("type1 row", lambda: biometric.apply_mask_type1([[1, 1, 0, 1]], [[0, 1, 0, 0]]).bits.tolist() == [[1, 0, 0, 1]]),
        ("global single", lambda: np.array_equal(biometric.compute_global_mask([m]), m)),
        ("global and", lambda: biometric.compute_global_mask([[[1, 1, 0]], [[1, 0, 0]]]).tolist() == [[1, 0, 0]]),
        ("global absorbing", lambda: not biometric.compute_global_mask([m, z4]).any()),
        ("type2 zero", lambda: np.array_equal(biometric.apply_mask_type2(t, z4).bits, t)),
        ("type2 own mask", lambda: np.array_equal(biometric.apply_mask_type2(t, m).bits, biometric.apply_mask_type1(t, m).bits)),
        ("linearize 2x2", lambda: linearize(np.array([[1, 0], [1, 1]])).tolist() == [1, 1, 0, 1]),
        ("linearize zeros", lambda: not linearize(z4).any()),
        ("linearize index", lambda: np.flatnonzero(linearize(single)).tolist() == [20]),
        ("rotate zero", lambda: np.array_equal(rotate(fv, 0), fv)),
        ("rotate inverse", lambda: np.array_equal(rotate(rotate(fv, 7), -7), fv)),
        ("rotate revolution", lambda: np.array_equal(rotate(fv, 480), fv)),
        ("rotate is 20 bits per step", lambda: np.array_equal(rotate(fv, 1), np.roll(fv, 20))),
        ("hamming equal", lambda: biometric.masked_hamming(t, m, t, z4) == 0.0),
        ("hamming complement", lambda: biometric.masked_hamming(t, z4, 1 - t, z4) == 1.0),
        ("shift exact", lambda: biometric.min_shift_distance(fv, rotate(fv, 3), 3) == 0.0),
        ("shift window 0", lambda: biometric.min_shift_distance(fv, linearize(m), 0) == biometric.hamming_fraction(fv, linearize(m))),
        ("shift minimum", lambda: biometric.min_shift_distance(fv, linearize(m), 8) <= biometric.hamming_fraction(fv, linearize(m))),
        ("extract type1 zero", lambda: np.array_equal(biometric.extract_feature_vector(t, z4), fv)),
        ("extract type2 = type1", lambda: np.array_equal(biometric.extract_feature_vector(t, m, "type2", m), biometric.extract_feature_vector(t, m))),
        ("synth no noise", lambda: all(np.array_equal(a[2], b[2]) for a, b in zip(*[list(biometric.synth_generate(2, 2, 0.0, 0.1, 1))[i::2] for i in (0, 1)]))),
        ("synth determinism", lambda: biometric.synth_generate(2, 2, 0.1, 0.1, 9).same_as(biometric.synth_generate(2, 2, 0.1, 0.1, 9))),
        ("projections determinism", lambda: lsh.sample_projections(4, 2, 7) == lsh.sample_projections(4, 2, 7)),
        ("projection length", lambda: lsh.sample_projections(4, 2, 7).vectors.shape[1] == 4),
        ("sgn(-3)=0", lambda: lsh.sgn(-3) == 0),
        ("sgn(0)=1", lambda: lsh.sgn(0) == 1),
        ("sgn(5)=1", lambda: lsh.sgn(5) == 1),
        ("hash of zeros", lambda: lsh.s3hash(R, np.zeros(40, np.uint8)).all()),
        ("hash worked example", lambda: lsh.s3hash(R2, [1, 1, 0]).tolist() == [1, 0]),
        ("hash pure", lambda: np.array_equal(lsh.s3hash(R, x), lsh.s3hash(R, x))),
        ("hash distance equal", lambda: lsh.hash_hamming([1, 0], [1, 0]) == 0.0),
        ("hash distance complement", lambda: lsh.hash_hamming([1, 0], [0, 1]) == 1.0),
        ("hash distance half", lambda: lsh.hash_hamming([1, 0, 1, 0], [1, 1, 1, 1]) == 0.5),
        ("collision same", lambda: lsh.collision_prob([1, 1], [1, 1]) == 1.0),
        ("collision orthogonal", lambda: abs(lsh.collision_prob([1, 0], [0, 1]) - 0.5) < 1e-12),
        ("collision pi/4", lambda: abs(lsh.collision_prob([1, 1, 0, 0], [1, 0, 0, 0]) - 0.75) < 1e-12),
        ("oracle membership", lambda: any(np.array_equal(r, x[:10]) for r in lsh.preimage_oracle(lsh.sample_projections(10, 3, 1), lsh.s3hash(lsh.sample_projections(10, 3, 1), x[:10])))),
        ("oracle unreachable", lambda: len(lsh.preimage_oracle(lsh.ProjectionSet(n=2, m=1, seed=0, vectors=np.array([[1, 1]], np.int8)), [0])) == 0),
        ("degenerate advantage", lambda: lsh.bit_balance_advantage(lsh.ProjectionSet(n=8, m=2, seed=0, vectors=np.zeros((2, 8), np.int8)), 1000, 0).max_advantage == 0.0),
        ("entropy point mass", lambda: lsh.entropy_estimate(np.ones((5, 6), np.uint8)) == 0.0),
    ]


def test_c10_bitwise_examples(acceptance):
    results = [(name, bool(check())) for name, check in trivial_examples()]
    failed = [name for name, ok in results if not ok]
    ok = acceptance("C10", not failed, f"{len(results) - len(failed)}/{len(results)} examples" + (f", failed: {failed}" if failed else ""))
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
