"""Weighted Kabsch alignment and per-slot rigid motion fitting."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import RigidTransform

MIN_WEIGHT = 1e-6
_RANK_TOL = 1e-10


@dataclass(frozen=True)
class KabschFit(RigidTransform):
    degenerate: bool = False
    ill_conditioned: bool = False


@dataclass
class PartMotionSet:
    """Per-slot rigid motions.  ``distributions`` and ``confidence`` are only
    meaningful for motion-head estimates."""

    rotations: np.ndarray  # S x 3 x 3
    translations: np.ndarray  # S x 3
    distributions: np.ndarray | None = None  # S x |G|
    confidence: np.ndarray | None = None  # S
    bins: np.ndarray | None = None  # S, argmax group index
    active: np.ndarray | None = None  # S bool
    degenerate: np.ndarray | None = None
    ill_conditioned: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        S = len(self.rotations)
        if self.active is None:
            self.active = np.ones(S, dtype=bool)

    def __len__(self):
        return len(self.rotations)

    def transform(self, s: int) -> RigidTransform:
        return RigidTransform(self.rotations[s], self.translations[s])

    def apply(self, P: np.ndarray) -> np.ndarray:
        """Every slot's transform applied to every point: N x S x 3."""
        return np.einsum("sab,nb->nsa", self.rotations, P) + self.translations[None]

    def permuted(self, order) -> "PartMotionSet":
        order = np.asarray(order)
        pick = lambda a: None if a is None else np.asarray(a)[order]  # noqa: E731
        return PartMotionSet(self.rotations[order], self.translations[order], pick(self.distributions),
                             pick(self.confidence), pick(self.bins), pick(self.active),
                             pick(self.degenerate), pick(self.ill_conditioned), dict(self.extras))


def _min_rotation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest rotation taking direction a onto direction b."""
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(a @ b)
    s = np.linalg.norm(v)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # antiparallel: half-turn about any axis orthogonal to a
        axis = np.cross(a, np.eye(3)[np.argmin(np.abs(a))])
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    k = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + k + k @ k * ((1 - c) / s ** 2)


def weighted_kabsch(source, target, weights, reflection_fix: bool = True) -> KabschFit:
    """Least-squares R, t minimising sum w_i |R s_i + t - t_i|^2."""
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    w = np.asarray(weights, dtype=float)
    if src.shape != dst.shape or len(w) != len(src):
        raise ValueError("source, target and weights must have matching lengths")
    wsum = w.sum()
    if wsum < MIN_WEIGHT:
        return KabschFit(np.eye(3), np.zeros(3), degenerate=True)
    cs = w @ src / wsum
    ct = w @ dst / wsum
    a = src - cs
    b = dst - ct
    H = (a * w[:, None]).T @ b  # sum w a b^T
    U, sv, Vt = np.linalg.svd(H)
    scale = max(sv[0], 1e-300)
    ill = sv[1] <= _RANK_TOL * scale or sv[0] < 1e-300
    if sv[0] < 1e-300:
        R = np.eye(3)
    elif ill:
        R = _min_rotation(U[:, 0], Vt[0])
    else:
        d = np.sign(np.linalg.det(Vt.T @ U.T)) if reflection_fix else 1.0
        if d == 0:
            d = 1.0
        R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return KabschFit(R, ct - R @ cs, ill_conditioned=bool(ill))


def fit_multibody(Pk, flow, M, reflection_fix: bool = True) -> PartMotionSet:
    """One weighted Kabsch fit per mask column, source P_k, target P_k + flow."""
    Pk = np.asarray(Pk, dtype=float)
    M = np.asarray(M, dtype=float)
    target = Pk + np.asarray(flow, dtype=float)
    fits = [weighted_kabsch(Pk, target, M[:, s], reflection_fix) for s in range(M.shape[1])]
    return PartMotionSet(
        rotations=np.stack([f.rotation for f in fits]),
        translations=np.stack([f.translation for f in fits]),
        active=np.array([not f.degenerate for f in fits]),
        degenerate=np.array([f.degenerate for f in fits]),
        ill_conditioned=np.array([f.ill_conditioned for f in fits]),
    )


def residuals(Pk, flow, motions: PartMotionSet) -> np.ndarray:
    """|R_s p_i + t_s - (p_i + flow_i)| for every point and slot (N x S)."""
    Pk = np.asarray(Pk, dtype=float)
    target = Pk + np.asarray(flow, dtype=float)
    return np.linalg.norm(motions.apply(Pk) - target[:, None, :], axis=-1)
