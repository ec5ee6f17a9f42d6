"""Invariant segmentation head and part-level equivariant motion head."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import diffcore as dc
from .geom import RotationGroup, icosahedral_group
from .rigidfit import MIN_WEIGHT, PartMotionSet

LEAK = 0.1


@dataclass
class HeadConfig:
    slots: int = 8
    hidden: int = 64
    motion_temperature: float = 1.0

    def __post_init__(self):
        if self.slots < 1 or self.hidden < 1:
            raise ValueError("slots and hidden must be positive")
        if self.motion_temperature <= 0:
            raise ValueError("motion_temperature must be positive")


def init_head_params(layer_dims, cfg: HeadConfig, store: dc.ParamStore, rng: np.random.Generator) -> None:
    for l, d in enumerate(layer_dims):
        store.register(f"pool.{l}.a", rng.normal(0, 1.0 / np.sqrt(d), d))
    d_in = int(np.sum(layer_dims))
    store.register("seg.W1", rng.normal(0, np.sqrt(2.0 / d_in), (d_in, cfg.hidden)))
    store.register("seg.b1", np.zeros(cfg.hidden))
    store.register("seg.W2", rng.normal(0, np.sqrt(1.0 / cfg.hidden), (cfg.hidden, cfg.slots)))
    store.register("seg.b2", np.zeros(cfg.slots))


def _vals(F):
    return F.values if hasattr(F, "layer") else F


def invariant_pool(F, a):
    """sum_j w_ij F[i, j, :] with w_i = softmax over the group axis of F[i] @ a."""
    F = _vals(F)
    logits = dc.matmul(F, dc.reshape(a, (-1, 1)) if isinstance(a, dc.Var) else np.reshape(a, (-1, 1)))
    w = dc.softmax(logits, axis=1)  # N x |G| x 1
    u = dc.matmul(dc.transpose(w, (0, 2, 1)), F)  # N x 1 x D
    n, d = np.shape(dc._val(u))[0], np.shape(dc._val(u))[2]
    return dc.reshape(u, (n, d))


def standardize(x, eps: float = 1e-4):
    """Zero mean, unit variance per channel over the points of one cloud."""
    c = dc.sub(x, dc.mean(x, axis=0))
    var = dc.mean(dc.mul(c, c), axis=0)
    return dc.mul(c, dc.exp(dc.mul(dc.log(dc.add(var, eps)), -0.5)))


def segment_logits(layers, params):
    pooled = [invariant_pool(F, params[f"pool.{l}.a"]) for l, F in enumerate(layers)]
    x = dc.concatenate(pooled, axis=1) if len(pooled) > 1 else pooled[0]
    x = standardize(x)
    hdn = dc.leaky_relu(dc.add(dc.matmul(x, params["seg.W1"]), params["seg.b1"]), LEAK)
    return dc.add(dc.matmul(hdn, params["seg.W2"]), params["seg.b2"])


def segment(layers, params):
    """Soft rigid-part mask (N x S) from the fused invariant features."""
    return dc.softmax(segment_logits(layers, params), axis=1)


def part_features(F, M):
    """Mask-weighted features max-pooled over points: |G| x D x S."""
    return dc.weighted_max_pool(_vals(F), M)


def correlate(Vk, Vl):
    """C[a, b, s] = <Vk[a, :, s], Vl[b, :, s]>."""
    a = dc.transpose(Vk, (2, 0, 1))  # S, J, D
    b = dc.transpose(Vl, (2, 1, 0))  # S, D, J
    return dc.transpose(dc.matmul(a, b), (1, 2, 0))


@lru_cache(maxsize=4)
def _shift_sum_matrix(G: RotationGroup) -> np.ndarray:
    J = len(G)
    P = np.zeros((J, J * J))
    for r in range(J):
        P[r, np.arange(J) * J + G.cayley[r, np.arange(J)]] = 1.0
    return P


def rotation_logits(C, G: RotationGroup | None = None):
    """z[r, s] = sum_j C[j, index(g_r g_j), s]  (|G| x S)."""
    G = G or icosahedral_group()
    J = len(G)
    S = np.shape(dc._val(C))[2]
    return dc.matmul(_shift_sum_matrix(G), dc.reshape(C, (J * J, S)))


def rotation_distribution(C, G: RotationGroup | None = None, temperature: float = 1.0):
    """Softmax over relative-rotation bins, returned as S x |G|."""
    z = rotation_logits(C, G)
    return dc.softmax(dc.transpose(dc.mul(z, 1.0 / temperature), (1, 0)), axis=1)


def mask_centroids(P, M):
    w = np.asarray(M, dtype=float)
    wsum = w.sum(axis=0)
    return (w.T @ np.asarray(P, dtype=float)) / np.maximum(wsum, 1e-300)[:, None], wsum


def estimate_motion(C, Pk, flow, Mk, G: RotationGroup | None = None, temperature: float = 1.0) -> PartMotionSet:
    G = G or icosahedral_group()
    C = dc._val(C)
    Mk = np.asarray(dc._val(Mk), dtype=float)
    dist = rotation_distribution(C, G, temperature)
    bins = dist.argmax(axis=1)
    conf = dist[np.arange(len(bins)), bins]
    R = G.elements[bins].copy()
    ck, wsum = mask_centroids(Pk, Mk)
    cl, _ = mask_centroids(np.asarray(Pk) + np.asarray(flow), Mk)
    t = cl - np.einsum("sab,sb->sa", R, ck)
    active = wsum >= MIN_WEIGHT
    R[~active] = np.eye(3)
    t[~active] = 0.0
    return PartMotionSet(R, t, distributions=dist, confidence=conf, bins=bins, active=active)
