"""Acceptance gate: the eight end-to-end criteria at their stated tolerances.

Run with ``pytest tests/test_acceptance.py``; a summary line per criterion is
printed at the end of the session.  The end-to-end training run (criterion 7)
dominates the runtime.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from mbse3 import checks
from mbse3.cli import main
from mbse3.geom import build_icosahedral_group, geodesic_angle, random_rotation
from mbse3.metrics import epe3d
from mbse3.scenegen import SceneSpec, generate_scene
from mbse3.trainer import Model, TrainerConfig, evaluate, train


def record(key, passed, detail):
    ACCEPTANCE[key] = (bool(passed), detail)
    assert passed, detail


# ------------------------------------------------------------------ 1

def test_criterion_1_group_algebra():
    t0 = time.perf_counter()
    G = build_icosahedral_group()
    ok, detail = checks.group_algebra(tol=1e-9)
    seconds = time.perf_counter() - t0
    record("1", ok and len(G) == 60 and seconds < 1.0, f"{detail}; built and checked in {seconds:.2f} s")


# ------------------------------------------------------------------ 2

def test_criterion_2_equivariance_suite():
    eq, d1 = checks.equivariance(n_clouds=10, n_points=128, tol=1e-5)
    tr, d2 = checks.translation_invariance(n_clouds=10, n_points=128, tol=1e-9)
    sg, d3 = checks.segmentation_invariance(n_clouds=10, n_points=128, tol=1e-5)
    record("2", eq and tr and sg, f"equivariance {d1}; translation {d2}; segmentation {d3}")


# ------------------------------------------------------------------ 3

def test_criterion_3_group_member_rotations_exact():
    ok, detail = checks.group_rotation_recovery()
    record("3a", ok, f"group-member pairs: {detail}")


def test_criterion_3_random_rotations_within_bound():
    # the head can only answer with one of the 60 elements; its error is
    # bounded below by the nearest-element distance, which reaches 44.48 deg
    rng = np.random.default_rng(30)
    model = Model.create(seed=30)
    X = checks.random_cloud(rng, 128)
    errs = []
    for _ in range(200):
        R = random_rotation(rng)
        errs.append(geodesic_angle(checks.single_body_rotation(model, X, X @ R.T), R))
    errs = np.array(errs)
    ok = errs.max() <= 37.4 and errs.mean() <= 25.0
    record("3b", ok, f"200 uniform rotations: max {errs.max():.2f} deg (limit 37.4), "
                     f"mean {errs.mean():.2f} deg (limit 25)")


# ------------------------------------------------------------------ 4

def test_criterion_4_kabsch_oracle():
    rec, d1 = checks.kabsch_recovery(n_problems=1000, n_points=50, tol=1e-9)
    mir, d2 = checks.kabsch_mirror(n_problems=1000, n_points=50)
    record("4", rec and mir, f"recovery: {d1}; mirrored: {d2}")


# ------------------------------------------------------------------ 5

def test_criterion_5_gradient_checks():
    ok, detail = checks.loss_gradients(n_entries=100, tol=1e-4, h=1e-4)
    record("5", ok, detail)


# ------------------------------------------------------------------ 6

def test_criterion_6_metric_oracles():
    ri, d1 = checks.rand_index_oracle(n_trials=100)
    hu, d2 = checks.hungarian_oracle(n_trials=100)
    pf, d3 = checks.perfect_metrics()
    record("6", ri and hu and pf, f"rand index: {d1}; hungarian: {d2}; perfect: {d3}")


# ------------------------------------------------------------------ 7

BENCH = SceneSpec(part_count=(2, 4), n_points=512, rotation_mode="group-member", flow_noise=0.02,
                  outlier_fraction=0.1, seed=0)
N_TRAIN, N_TEST = 200, 50
EPOCHS = 4
LEARNING_RATE = 5e-3
ABLATION_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def benchmark():
    train_set = [generate_scene(BENCH, i) for i in range(N_TRAIN)]
    test_set = [generate_scene(BENCH, N_TRAIN + i) for i in range(N_TEST)]
    return train_set, test_set


def _run(train_set, test_set, seed, use_consensus=True):
    t0 = time.perf_counter()
    model = Model.create(seed=seed)
    cfg = TrainerConfig(epochs=EPOCHS, seed=seed, use_consensus=use_consensus, learning_rate=LEARNING_RATE)
    _, rec, flows = train(train_set, cfg, model)
    _, agg = evaluate(model, test_set)
    initial = float(np.mean([epe3d(s.flow_noisy, s.flow_clean) for s in train_set]))
    updated = float(np.mean([epe3d(flows[s.id].flow, s.flow_clean) for s in train_set]))
    return agg, initial, updated, time.perf_counter() - t0


_RUNS: dict = {}


def _cached_run(benchmark, seed, use_consensus=True):
    key = (seed, use_consensus)
    if key not in _RUNS:
        _RUNS[key] = _run(*benchmark, seed, use_consensus)
    return _RUNS[key]


def test_criterion_7_end_to_end(benchmark):
    agg, initial, updated, seconds = _cached_run(benchmark, 0)
    ok = (agg["AP"] >= 0.70 and agg["angular_error"] is not None and agg["angular_error"] <= 10.0
          and updated < initial and seconds <= 15 * 60)
    record("7a", ok, f"{N_TRAIN}/{N_TEST} scenes, {EPOCHS} epochs: test AP {agg['AP']:.3f} (>= 0.70), "
                     f"angular error {agg['angular_error']:.2f} deg (<= 10), flow EPE3D {initial:.4f} -> "
                     f"{updated:.4f}, {seconds / 60:.1f} min on one core")


def test_criterion_7_consensus_ablation(benchmark):
    full = [_cached_run(benchmark, s)[0]["AP"] for s in ABLATION_SEEDS]
    plain = [_cached_run(benchmark, s, use_consensus=False)[0]["AP"] for s in ABLATION_SEEDS]
    ok = np.mean(plain) <= np.mean(full)
    record("7b", ok, f"AP with consensus {np.round(full, 3).tolist()} (mean {np.mean(full):.3f}) vs beta = 1 "
                     f"{np.round(plain, 3).tolist()} (mean {np.mean(plain):.3f})")


# ------------------------------------------------------------------ 8

def _pipeline(root):
    sets = ["--quiet", "--set", "counts.train=4", "--set", "counts.val=1", "--set", "counts.test=2",
            "--set", "trainer.epochs=2", "--set", f"paths.data_root={root / 'data'}",
            "--set", f"paths.checkpoint={root / 'run' / 'model.json'}",
            "--set", f"paths.record={root / 'run' / 'record.jsonl'}",
            "--set", f"paths.report={root / 'run' / 'report.json'}",
            "--set", f"paths.csv={root / 'run' / 'report.csv'}"]
    for cmd in ("gen", "train", "eval"):
        assert main([cmd] + sets) == 0
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_determinism(tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    same = a.keys() == b.keys() and all(a[k] == b[k] for k in a)
    kinds = sorted({k.suffix for k in a})
    record("8", same, f"{len(a)} files ({', '.join(kinds)}) byte-identical across two runs" if same
               else f"differing files: {[str(k) for k in a if a.get(k) != b.get(k)]}")
