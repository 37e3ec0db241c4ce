"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the "acceptance criteria" section of the terminal summary.  Criteria 6-8
share one experiment run (trend, module ablation, bandwidth study) on the
default 200-scene suite.
"""

import math
import time

import numpy as np
import pytest

from conftest import record
from gradcases import CASES, EPS, N_INSTANCES, TOLERANCE
from test_rfea import brute_force_difference
from v2ifuse import comm
from v2ifuse.comm import deserialize, full_map_bytes, full_map_log2, request_map, select_features, selection_mask, serialize
from v2ifuse.gradcheck import check_gradients
from v2ifuse.harness.ablation import Lab, run_ablation, run_bandwidth, run_trend
from v2ifuse.harness.cli import ablation_checks, main
from v2ifuse.harness.config import ExperimentConfig
from v2ifuse.harness.pipeline import save_params
from v2ifuse.rfea import feature_difference_matrix, regional_difference_map

N_CASES = 10_000


def test_1_full_map_anchor():
    v = full_map_log2(100, 252, 64)
    ok = abs(v - 22.62) <= 0.01 and full_map_bytes(100, 252, 64) == 100 * 252 * 64 * 4
    record("1 full-map log2 anchor", ok, f"log2(100*252*64*4) = {v:.4f}, target 22.62 +/- 0.01")
    assert ok


def test_2_rfea_bit_exact():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(1000):
        F = rng.normal(size=(int(rng.integers(1, 5)), 16, 16)) * rng.uniform(0.1, 3.0)
        t = float(rng.uniform(0.05, 1.5))
        diff, mask = brute_force_difference(F, t)
        got = regional_difference_map(F, sigma=0.0, threshold=t)
        bad += not (np.array_equal(feature_difference_matrix(F, sigma=0.0), diff) and np.array_equal(got.mask, mask))
    centre = np.zeros((1, 3, 3))
    centre[0, 1, 1] = 1.0
    d = feature_difference_matrix(centre, sigma=0.0)
    hand = (d[1, 1] == 1.0 and d[0, 1] == 0.25 and d[0, 0] == 0.0
            and regional_difference_map(centre, 0.0, 3, 0.5).mask.tolist() == [[0, 0, 0], [0, 1, 0], [0, 0, 0]]
            and feature_difference_matrix(np.array([1.0, -3.0]).reshape(2, 1, 1), 0.0)[0, 0] == 2.0)
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and hand and elapsed < 10
    record("2 RFEA bit-exact vs brute force", ok, f"{bad} mismatches in 1000 random 16x16 maps; "
           f"hand examples {'ok' if hand else 'FAILED'}; {elapsed:.1f} s")
    assert ok


def test_3_mask_algebra():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    fails = {"xnor": 0, "involution": 0, "complement": 0, "sparse=dense": 0, "M_d monotone": 0}
    truth = {(0, 0): 1, (0, 1): 0, (1, 0): 0, (1, 1): 1}
    for _ in range(N_CASES):
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        a, b = rng.integers(0, 2, (h, w)), rng.integers(0, 2, (h, w))
        S = selection_mask(a, b)
        fails["xnor"] += not all(S[i, j] == truth[a[i, j], b[i, j]] for i in range(h) for j in range(w))
        R = request_map(a)
        fails["involution"] += not np.array_equal(request_map(R), a)
        fails["complement"] += not np.all(R + a == 1)
        F = rng.normal(size=(int(rng.integers(1, 4)), h, w)).astype(np.float32).astype(np.float64)
        fails["sparse=dense"] += not np.array_equal(select_features(F, a, b).densify(), F * S[None])
        t1, t2 = np.sort(rng.uniform(0.01, 1.0, 2))
        m1 = regional_difference_map(F, 0.0, 3, t1).mask
        m2 = regional_difference_map(F, 0.0, 3, t2).mask
        fails["M_d monotone"] += not np.all(m2 <= m1)
    elapsed = time.perf_counter() - t0
    ok = not any(fails.values()) and elapsed < 30
    record("3 mask algebra", ok, ", ".join(f"{k} {v} fails" for k, v in fails.items())
           + f" over {N_CASES} cases each; {elapsed:.1f} s")
    assert ok


def test_4_gradient_checks():
    t0 = time.perf_counter()
    worst = {}
    for name, build in CASES.items():
        w = 0.0
        for seed in range(N_INSTANCES):
            fn, arrays = build(np.random.default_rng(5000 + seed))
            w = max(w, max(check_gradients(fn, arrays, EPS)))
        worst[name] = w
    elapsed = time.perf_counter() - t0
    ok = all(v <= TOLERANCE for v in worst.values()) and elapsed < 120 and len(worst) >= 10
    top = max(worst, key=worst.get)
    record("4 gradient checks", ok, f"{len(worst)} ops x {N_INSTANCES} instances, worst rel err {worst[top]:.1e} "
           f"({top}), step {EPS:g}, {elapsed:.1f} s")
    assert ok


def test_5_wire_roundtrip():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    bad_trip = bad_size = 0
    for _ in range(N_CASES):
        h, w, c = int(rng.integers(1, 17)), int(rng.integers(1, 17)), int(rng.integers(1, 9))
        F = rng.normal(size=(c, h, w))
        F[:, rng.random((h, w)) < 0.2] = 0.0
        msg = select_features(F, rng.integers(0, 2, (h, w)), rng.integers(0, 2, (h, w)),
                              sender_id=int(rng.integers(0, 2**32)), frame_id=int(rng.integers(0, 2**63)))
        data = serialize(msg)
        back = deserialize(data)
        bad_trip += not (back == msg and serialize(back) == data
                         and np.array_equal(back.values.view(np.uint32), msg.values.view(np.uint32)))
        layout = comm.HEADER.size + math.ceil(h * w / 8) + 4 * msg.count + 4 * msg.count * c
        bad_size += len(data) != layout or msg.payload_bytes != 4 * msg.count * c
    elapsed = time.perf_counter() - t0
    ok = bad_trip == 0 and bad_size == 0 and elapsed < 30
    record("5 wire format round trip", ok, f"{bad_trip} round-trip and {bad_size} size mismatches "
           f"in {N_CASES} messages; {elapsed:.1f} s")
    assert ok


# ------------------------------------------------------------ experiments

@pytest.fixture(scope="module")
def experiment():
    cfg = ExperimentConfig()
    lab = Lab(cfg, log=lambda m: print(m, flush=True))
    t0 = time.process_time()
    trend = run_trend(lab)
    trend_cpu = time.process_time() - t0
    rows = run_ablation(lab, factor=4)
    bw = run_bandwidth(lab, cfg.with_(**{"sensors.degrade_factor": 4}))
    checks = {name: (passed, detail) for name, passed, detail in ablation_checks(trend, rows, bw)}
    params = lab.params(cfg.with_(**{"sensors.degrade_factor": 4}))
    return {"cfg": cfg, "trend": trend, "rows": rows, "bw": bw, "checks": checks, "trend_cpu": trend_cpu,
            "params": params, "n_scenes": len(lab.suite(cfg)[0])}


def _check(experiment, name):
    return experiment["checks"][name]


def test_6a_collaboration_gain(experiment):
    ok, detail = _check(experiment, "collaboration gain on occluded split >= 0.05")
    record("6a collaboration gain (occluded, factor 4)", ok, detail)
    assert ok


def test_6b_lidar_monotone(experiment):
    ok, detail = _check(experiment, "lidar-only AP falls monotonically with degradation")
    record("6b LiDAR-only AP falls with degradation 1->2->4", ok, detail)
    assert ok


def test_6c_full_pipeline_robust(experiment):
    ok, detail = _check(experiment, "full pipeline drops less than lidar-only")
    record("6c full pipeline drops less than LiDAR-only", ok, detail)
    assert ok


def test_6_budget(experiment):
    cpu, n = experiment["trend_cpu"], experiment["n_scenes"]
    ok = cpu <= 600 and n == 200
    record("6 trend budget", ok, f"{n} scenes, {cpu:.0f} s CPU for training and evaluation (limit 600 s)")
    assert ok


def test_7_ablation_order(experiment):
    ok, detail = _check(experiment, "+all row has the maximum AP")
    record("7 +all row is the maximum at factor 4", ok, detail)
    assert ok


def test_8a_score_diff_vs_score_only(experiment):
    ok, detail = _check(experiment, "score+diff >= score-only at matched payload")
    record("8a score+diff >= score-only at matched payload", ok, detail)
    assert ok


def test_8b_masked_payload(experiment):
    ok, detail = _check(experiment, "masked payload <= 50% of full map")
    record("8b masked payload <= 50% of full map", ok, detail)
    assert ok


def test_8c_masked_ap_loss(experiment):
    ok, detail = _check(experiment, "masked AP within 0.02 of full map")
    record("8c masked AP within 0.02 of full map", ok, detail)
    assert ok


def test_9_simulate_deterministic(experiment, tmp_path):
    params = tmp_path / "params.npz"
    save_params(experiment["params"], params)
    csvs, codes = [], []
    for k in range(2):
        out = tmp_path / f"run{k}"
        codes.append(main(["simulate", "--params", str(params), "--out", str(out), "--check", "--quiet"]))
        csvs.append((out / "simulate.csv").read_bytes())
    ok = csvs[0] == csvs[1] and codes == [0, 0]
    record("9 simulate --check is byte-identical", ok,
           f"exit codes {codes}, {len(csvs[0])} B CSV, {'identical' if csvs[0] == csvs[1] else 'DIFFERENT'}")
    assert ok
