"""Property suite behind ``mbse3 check``.

Each check generates its own inputs, compares the library against an
independent reference (matrix products, brute force, finite differences)
and returns a :class:`CheckResult`.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig, ConvGeometry, backbone_forward, extract_features, rotate_feature
from .geom import geodesic_angle, icosahedral_group, random_rotation
from .heads import HeadConfig, correlate, estimate_motion, part_features
from .metrics import hungarian, rand_index, segmentation_scores
from .rigidfit import weighted_kabsch
from .scenegen import SceneSpec, generate_scene
from .trainer import FlowState, Model, TrainerConfig, cold_start, pair_step


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _timed(name, fn, *args, **kwargs) -> CheckResult:
    t0 = time.perf_counter()
    passed, detail = fn(*args, **kwargs)
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t0)


def random_cloud(rng: np.random.Generator, n: int, scale: float = 0.5) -> np.ndarray:
    return rng.uniform(-scale, scale, (n, 3))


# ------------------------------------------------------------------ group

def group_algebra(tol: float = 1e-9):
    G = icosahedral_group()
    E = G.elements
    n = len(E)
    if n != 60:
        return False, f"{n} elements"
    prod = np.einsum("aij,bjk->abik", E, E)
    closure = np.abs(prod - E[G.cayley]).max()
    inv = np.abs(np.einsum("aij,ajk->aik", E, E[G.inverse]) - np.eye(3)).max()
    ident = np.abs(E[0] - np.eye(3)).max()
    orth = np.abs(np.einsum("aji,ajk->aik", E, E) - np.eye(3)).max()
    dets = np.abs(np.linalg.det(E) - 1).max()
    distinct = np.abs(E[:, None] - E[None]).reshape(n, n, -1).max(-1) + np.eye(n)
    worst = max(closure, inv, ident, orth, dets)
    ok = worst <= tol and distinct.min() > 1e-6
    return ok, f"max deviation {worst:.1e} over {n * n} products"


# ---------------------------------------------------------------- features

def _rel_err(a, b) -> float:
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def equivariance(n_clouds: int = 3, n_points: int = 128, seed: int = 0, tol: float = 1e-5):
    G = icosahedral_group()
    rng = np.random.default_rng(seed)
    cfg = BackboneConfig()
    model = Model.create(cfg, seed=seed)
    worst = 0.0
    for _ in range(n_clouds):
        X = random_cloud(rng, n_points)
        base = extract_features(X, cfg, model.params)
        for g in range(len(G)):
            rot = extract_features(X @ G.elements[g].T, cfg, model.params)
            for Fb, Fr in zip(base, rot):
                worst = max(worst, _rel_err(Fr.values, rotate_feature(Fb, g, G).values))
    return worst <= tol, f"max relative error {worst:.1e} ({n_clouds} clouds x 60 rotations)"


def translation_invariance(n_clouds: int = 3, n_points: int = 128, seed: int = 1, tol: float = 1e-9):
    rng = np.random.default_rng(seed)
    cfg = BackboneConfig()
    model = Model.create(cfg, seed=seed)
    worst = 0.0
    for _ in range(n_clouds):
        X = random_cloud(rng, n_points)
        t = rng.uniform(-2, 2, 3)
        for Fa, Fb in zip(extract_features(X, cfg, model.params), extract_features(X + t, cfg, model.params)):
            worst = max(worst, _rel_err(Fb.values, Fa.values))
    return worst <= tol, f"max relative error {worst:.1e}"


def segmentation_invariance(n_clouds: int = 3, n_points: int = 128, seed: int = 2, tol: float = 1e-5):
    G = icosahedral_group()
    rng = np.random.default_rng(seed)
    model = Model.create(seed=seed)
    worst = 0.0
    for _ in range(n_clouds):
        X = random_cloud(rng, n_points)
        M = model.predict(X)
        for g in range(len(G)):
            worst = max(worst, float(np.abs(model.predict(X @ G.elements[g].T) - M).max()))
        worst = max(worst, float(np.abs(model.predict(X + rng.uniform(-2, 2, 3)) - M).max()))
    return worst <= tol, f"max mask change {worst:.1e}"


def single_body_rotation(model: Model, Xk: np.ndarray, Xl: np.ndarray) -> np.ndarray:
    """Motion-head rotation for a cloud moved as one rigid body."""
    G = icosahedral_group()
    p = {k: model.params[k] for k in model.params.names()}
    Fk = backbone_forward(ConvGeometry(Xk, model.backbone), model.backbone, p)
    Fl = backbone_forward(ConvGeometry(Xl, model.backbone), model.backbone, p)
    M = np.ones((len(Xk), 1))
    C = correlate(part_features(Fk[-1], M), part_features(Fl[-1], M))
    return estimate_motion(C, Xk, Xl - Xk, M, G).rotations[0]


def group_rotation_recovery(n_points: int = 128, seed: int = 3):
    """Frame pairs related by each group element give 0 deg error."""
    G = icosahedral_group()
    rng = np.random.default_rng(seed)
    model = Model.create(seed=seed)
    X = random_cloud(rng, n_points)
    worst = 0.0
    for g in range(len(G)):
        t = rng.uniform(-0.5, 0.5, 3)
        R = single_body_rotation(model, X, X @ G.elements[g].T + t)
        worst = max(worst, geodesic_angle(R, G.elements[g]))
    return worst < 1e-6, f"max angular error {worst:.2e} deg over 60 group rotations"


# ------------------------------------------------------------------ kabsch

def kabsch_recovery(n_problems: int = 200, n_points: int = 50, seed: int = 4, tol: float = 1e-9,
                    reflection_fix: bool = True):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_problems):
        R, t = random_rotation(rng), rng.normal(size=3)
        src = rng.normal(size=(n_points, 3))
        w = rng.uniform(0.05, 1.0, n_points)
        fit = weighted_kabsch(src, src @ R.T + t, w, reflection_fix=reflection_fix)
        worst = max(worst, np.abs(fit.rotation - R).max(), np.abs(fit.translation - t).max())
    return worst <= tol, f"max entry error {worst:.1e} over {n_problems} problems"


def kabsch_mirror(n_problems: int = 100, n_points: int = 50, seed: int = 5, reflection_fix: bool = True):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_problems):
        src = rng.normal(size=(n_points, 3))
        mirrored = src * np.array([-1.0, 1.0, 1.0]) @ random_rotation(rng).T
        fit = weighted_kabsch(src, mirrored, rng.uniform(0.05, 1.0, n_points), reflection_fix=reflection_fix)
        bad += np.linalg.det(fit.rotation) < 0
    return bad == 0, f"{bad}/{n_problems} fits with det = -1"


# ---------------------------------------------------------------- gradients

def gradient_model_and_scene(seed: int = 6):
    """Small model and scene for finite-difference checks."""
    spec = SceneSpec(part_count=(2, 2), n_points=96, min_points_per_part=32, seed=seed)
    scene = generate_scene(spec, 0)
    model = Model.create(BackboneConfig(layer_dims=(4, 6), neighbors_k=8), HeadConfig(slots=4, hidden=12),
                         seed=seed)
    return model, scene


def loss_gradients(n_entries: int = 100, seed: int = 6, tol: float = 1e-4, h: float = 1e-4,
                   floor: float = 1e-5):
    """Taped gradients of each trainer loss graph against central differences,
    with the stop-gradient constants frozen.

    Entries whose +-h evaluations take a different branch of a non-smooth
    primitive (leaky-rectifier sign, max-pool winner) straddle a kink where
    the difference quotient is meaningless; they are redrawn and counted.
    Relative error uses max(|analytic|, |numeric|, floor) as denominator.
    The loss carries ~1e-13 of float64 round-off, so at h = 1e-4 the
    quotient itself is only good to ~1e-9 absolute; the floor keeps
    gradients smaller than that from being judged on round-off.
    """
    rng = np.random.default_rng(seed)
    model, scene = gradient_model_and_scene(seed)
    Pk = scene.points_k
    flow = FlowState(cold_start(scene).flow, "initial")
    geo_k, geo_l = ConvGeometry(Pk, model.backbone), ConvGeometry(scene.points_l, model.backbone)
    graphs = {
        "unsupervised": (TrainerConfig(), 1),
        "cold-start": (TrainerConfig(), 0),
        "supervised": (TrainerConfig(supervised=True), 0),
    }
    names = model.params.names()
    sizes = np.array([model.params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst, kinks = {}, 0
    for label, (cfg, epoch) in graphs.items():
        grads, info = pair_step(model, scene, flow, cfg, epoch, geo_k, geo_l)
        err, done = 0.0, 0
        for flat in rng.permutation(sizes.sum()):
            if done == n_entries:
                break
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, idx = names[k], int(flat - offsets[k])
            store = model.params.copy()
            base = store[name]

            def f(delta):
                x = base.copy().ravel()
                x[idx] += delta
                store.set(name, x.reshape(base.shape))
                out = pair_step(model, scene, flow, cfg, epoch, geo_k, geo_l, frozen=info, params=store,
                                with_grad=False)[1]
                return out["total"], out["branches"]

            fp, bp = f(h)
            fm, bm = f(-h)
            if bp != info["branches"] or bm != info["branches"]:
                kinks += 1
                continue
            num = (fp - fm) / (2 * h)
            ana = float(grads[name].ravel()[idx])
            err = max(err, abs(num - ana) / max(abs(num), abs(ana), floor))
            done += 1
        worst[label] = err
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return max(worst.values()) < tol, (f"max relative error: {detail} ({n_entries} entries each, "
                                       f"{kinks} kink-straddling entries redrawn)")


# ----------------------------------------------------------------- metrics

def brute_rand_index(a, b) -> float:
    n = len(a)
    agree = sum((a[i] == a[j]) == (b[i] == b[j]) for i in range(n) for j in range(i + 1, n))
    return agree / (n * (n - 1) // 2)


def rand_index_oracle(n_trials: int = 100, seed: int = 7):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_trials):
        n = int(rng.integers(2, 51))
        a, b = rng.integers(0, rng.integers(1, 6), n), rng.integers(0, rng.integers(1, 6), n)
        bad += rand_index(a, b) != brute_rand_index(a, b)
    return bad == 0, f"{bad}/{n_trials} mismatches (exact comparison)"


def hungarian_oracle(n_trials: int = 100, seed: int = 8):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(n_trials):
        r, c = (int(x) for x in rng.integers(1, 7, 2))
        score = rng.random((r, c))
        got = sum(score[i, j] for i, j in hungarian(score))
        if r <= c:
            best = max(sum(score[i, p[i]] for i in range(r)) for p in itertools.permutations(range(c), r))
        else:
            best = max(sum(score[p[j], j] for j in range(c)) for p in itertools.permutations(range(r), c))
        bad += abs(got - best) > 1e-12
    return bad == 0, f"{bad}/{n_trials} non-optimal assignments (up to 6x6)"


def perfect_metrics(n_trials: int = 20, seed: int = 9):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        gt = rng.integers(0, rng.integers(1, 6), 60)
        slots = rng.permutation(8)[gt]
        M = np.eye(8)[slots]
        scores = segmentation_scores(M, gt).as_dict()
        worst = max(worst, max(abs(v - 1.0) for v in scores.values()))
    return worst == 0.0, f"max deviation from 1.0: {worst:.1e}"


# --------------------------------------------------------------------- run

def run_all(reflection_fix: bool = True, quick: bool = True) -> list[CheckResult]:
    n = 2 if quick else 10
    return [
        _timed("group algebra", group_algebra),
        _timed("feature equivariance", equivariance, n_clouds=n),
        _timed("translation invariance", translation_invariance, n_clouds=n),
        _timed("segmentation invariance", segmentation_invariance, n_clouds=n),
        _timed("group-rotation recovery", group_rotation_recovery),
        _timed("kabsch recovery", kabsch_recovery, reflection_fix=reflection_fix),
        _timed("kabsch mirrored points", kabsch_mirror, reflection_fix=reflection_fix),
        _timed("loss gradients", loss_gradients, n_entries=30 if quick else 100),
        _timed("rand index oracle", rand_index_oracle),
        _timed("hungarian oracle", hungarian_oracle),
        _timed("perfect predictions", perfect_metrics),
    ]


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'property':<{width}}  result  seconds  detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  {r.seconds:7.2f}  {r.detail}")
    return "\n".join(lines)
