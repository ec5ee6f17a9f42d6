"""Per-point rotation-group-equivariant point convolution.

Every group channel ``j`` correlates a point's neighbourhood with the kernel
points rotated by ``g_j``.  Rotating the input by ``g`` therefore permutes
the group axis by ``j -> g^{-1} g_j`` and only relative coordinates enter,
so the features are exactly equivariant to the 60 icosahedral rotations and
invariant to translation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import diffcore as dc
from .geom import RotationGroup, icosahedral_group

LEAK = 0.1


def _default_kernel(radius: float) -> np.ndarray:
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    return np.vstack([np.zeros(3), corners / np.sqrt(3.0) * radius])


@dataclass
class BackboneConfig:
    layer_dims: tuple = (16, 32)
    neighbors_k: int = 16
    kernel_radius: float = 0.2
    kernel_bandwidth: float = 0.1
    kernel_points: np.ndarray | None = None
    # take every `dilation`-th of the k*dilation nearest points
    dilation: int = 3

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 1:
            raise ValueError("need at least one layer")
        if self.neighbors_k < 4:
            raise ValueError("neighbors_k must be >= 4")
        if self.kernel_radius <= 0 or self.kernel_bandwidth <= 0:
            raise ValueError("kernel radius and bandwidth must be positive")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.kernel_points is None:
            self.kernel_points = _default_kernel(self.kernel_radius)
        self.kernel_points = np.asarray(self.kernel_points, dtype=float).reshape(-1, 3)

    @property
    def n_kernel(self) -> int:
        return len(self.kernel_points)


@dataclass
class EquivariantFeature:
    values: np.ndarray  # N x |G| x D
    layer: int = 0
    points: np.ndarray | None = field(default=None, repr=False)


def knn_neighborhoods(X: np.ndarray, k: int, dilation: int = 1) -> np.ndarray:
    """Indices of the k nearest points of every point (self first, ties to
    the lower index)."""
    X = np.asarray(X, dtype=float)
    n = len(X)
    if k * dilation > n:
        raise ValueError(f"k={k} (dilation {dilation}) exceeds number of points {n}")
    d2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, : k * dilation : dilation]


# group-axis smoothing over the 12 rotations nearest the identity (72 deg);
# right-composition commutes with the left group action
def _group_blur(G: RotationGroup) -> np.ndarray:
    ang = np.degrees(np.arccos(np.clip((np.trace(G.elements, axis1=1, axis2=2) - 1) / 2, -1, 1)))
    near = np.flatnonzero(np.isclose(ang, ang[ang > 1e-6].min()))
    B = np.zeros((len(G), len(G)))
    for j in range(len(G)):
        B[j, G.cayley[j, near]] = 1.0 / len(near)
    return B


class ConvGeometry:
    """Parameter-free part of the convolution for one cloud: neighbourhoods,
    kernel responses and the neighbour-aggregation operator."""

    def __init__(self, X: np.ndarray, cfg: BackboneConfig, G: RotationGroup | None = None):
        G = G or icosahedral_group()
        X = np.asarray(X, dtype=float)
        n, k, J, M = len(X), cfg.neighbors_k, len(G), cfg.n_kernel
        self.n = n
        self.nbr = knn_neighborhoods(X, k, cfg.dilation)
        rel = X[self.nbr] - X[:, None, :]  # N,k,3
        rk = np.einsum("jab,mb->jma", G.elements, cfg.kernel_points).reshape(J * M, 3)
        # |rel - g_j kappa_m|^2 expanded, laid out as (i, j, m, n); |g_j kappa_m| = |kappa_m|
        cross = rk @ np.transpose(rel, (0, 2, 1))  # N, J*M, k
        kappa2 = np.tile((cfg.kernel_points ** 2).sum(-1), J)
        h = cross  # reused in place: h = exp(-max(d2, 0) / bw^2) / k
        h *= 2.0
        h -= (rel ** 2).sum(-1)[:, None, :]
        h -= kappa2[None, :, None]
        np.minimum(h, 0.0, out=h)
        h *= 1.0 / cfg.kernel_bandwidth ** 2
        np.exp(h, out=h)
        h *= 1.0 / k
        self.response = h.sum(axis=2).reshape(n, J, M)
        data = h.reshape(-1)
        cols = self.nbr[:, None, None, :] * J + np.arange(J)[None, :, None, None]
        cols = np.broadcast_to(cols, (n, J, M, k)).reshape(-1).astype(np.int32)
        indptr = np.arange(0, n * J * M * k + 1, k)
        # rows (i, j, m), columns (neighbour, j)
        self.aggregate = sp.csr_matrix((data, cols, indptr), shape=(n * J * M, n * J))


def init_backbone_params(cfg: BackboneConfig, store: dc.ParamStore, rng: np.random.Generator,
                         prefix: str = "backbone") -> None:
    M = cfg.n_kernel
    d_in = None
    for l, d in enumerate(cfg.layer_dims):
        if l == 0:
            store.register(f"{prefix}.{l}.W", rng.normal(0, np.sqrt(2.0 / M), (M, d)) * 3.0)
        else:
            store.register(f"{prefix}.{l}.W", rng.normal(0, np.sqrt(2.0 / (M * d_in)), (M * d_in, d)) * 3.0)
            store.register(f"{prefix}.{l}.U", rng.normal(0, np.sqrt(1.0 / d_in), (d_in, d)))
            store.register(f"{prefix}.{l}.Q", rng.normal(0, np.sqrt(1.0 / d_in), (d_in, d)))
        store.register(f"{prefix}.{l}.b", np.zeros(d))
        d_in = d


def backbone_forward(geo: ConvGeometry, cfg: BackboneConfig, params, G: RotationGroup | None = None,
                     prefix: str = "backbone") -> list:
    """Layer outputs (N x |G| x D each) as taped :class:`Var` or arrays,
    depending on whether ``params`` holds tape variables."""
    G = G or icosahedral_group()
    n, J, M = geo.n, len(G), cfg.n_kernel
    blur = _group_blur(G)
    outs = []
    prev = None
    for l, d in enumerate(cfg.layer_dims):
        W, b = params[f"{prefix}.{l}.W"], params[f"{prefix}.{l}.b"]
        if l == 0:
            z = dc.matmul(geo.response, W)  # N,J,D
        else:
            d_in = cfg.layer_dims[l - 1]
            flat = dc.reshape(prev, (n * J, d_in))
            agg = dc.const_matmul(geo.aggregate, flat)  # (N J M) x d_in
            agg = dc.reshape(agg, (n * J, M * d_in))
            z = dc.reshape(dc.matmul(agg, W), (n, J, d))
            z = dc.add(z, dc.matmul(prev, params[f"{prefix}.{l}.U"]))
            blurred = dc.matmul(blur, prev)  # broadcast over points
            z = dc.add(z, dc.matmul(blurred, params[f"{prefix}.{l}.Q"]))
        prev = dc.leaky_relu(dc.add(z, b), LEAK)
        outs.append(prev)
    return outs


def extract_features(X: np.ndarray, cfg: BackboneConfig, params: dc.ParamStore,
                     G: RotationGroup | None = None) -> list[EquivariantFeature]:
    X = np.asarray(X, dtype=float)
    geo = ConvGeometry(X, cfg, G)
    pv = {k: params[k] for k in params.names()}
    vals = backbone_forward(geo, cfg, pv, G)
    for l, v in enumerate(vals):
        if not np.all(np.isfinite(v)):
            bad = int(np.argwhere(~np.isfinite(v))[0, 0])
            raise FloatingPointError(f"non-finite activation in layer {l} at point {bad}")
    return [EquivariantFeature(v, l, X) for l, v in enumerate(vals)]


def rotate_feature(F, g: int, G: RotationGroup | None = None):
    """Group action on the feature domain: ``out[:, j] = F[:, g^{-1} g_j]``."""
    G = G or icosahedral_group()
    perm = G.cayley[G.inverse[g]]
    if isinstance(F, EquivariantFeature):
        return EquivariantFeature(F.values[:, perm], F.layer, F.points)
    return np.asarray(F)[:, perm]
