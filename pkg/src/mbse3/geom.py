"""Rigid-body maths and the 60-element icosahedral rotation group."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GROUP_ORDER = 60
_DEDUP_TOL = 1e-9
_ORDER_DECIMALS = 6


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (np.allclose(r.T @ r, np.eye(3), atol=tol)
                and abs(np.linalg.det(r) - 1.0) < tol)


@dataclass(frozen=True, eq=False)
class RotationGroup:
    """Finite rotation group with precomputed multiplication tables.

    ``cayley[i, j]`` is the index of ``elements[i] @ elements[j]`` and
    ``inverse[i]`` the index of ``elements[i].T``.
    """

    elements: np.ndarray
    cayley: np.ndarray = field(repr=False)
    inverse: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.elements)


def _axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def _lookup(elements: np.ndarray, mats: np.ndarray) -> np.ndarray:
    # (m,3,3) vs (60,3,3) -> index of the matching element for each query
    diff = np.linalg.norm((mats[:, None] - elements[None]).reshape(len(mats), len(elements), 9), axis=-1)
    idx = diff.argmin(axis=1)
    if not np.all(diff[np.arange(len(mats)), idx] < _DEDUP_TOL):
        raise RuntimeError("group product fell outside the element list")
    return idx


def build_icosahedral_group() -> RotationGroup:
    """Close a 5-fold vertex rotation and a 2-fold edge rotation into the
    60-element chiral icosahedral group, in canonical order."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    gens = [_axis_angle([0.0, 1.0, phi], 2.0 * np.pi / 5.0),
            # midpoint of the edge (0,1,phi)-(0,-1,phi)
            _axis_angle([0.0, 0.0, 1.0], np.pi)]

    found = [np.eye(3)]
    frontier = [np.eye(3)]
    while frontier:
        nxt = []
        for a in frontier:
            for g in gens:
                prod = g @ a
                if all(np.linalg.norm(prod - b) >= _DEDUP_TOL for b in found):
                    found.append(prod)
                    nxt.append(prod)
        frontier = nxt
        if len(found) > GROUP_ORDER:
            break
    if len(found) != GROUP_ORDER:
        raise RuntimeError(f"closure produced {len(found)} elements, expected {GROUP_ORDER}")

    rest = sorted(found[1:], key=lambda m: tuple(np.round(m, _ORDER_DECIMALS).ravel() + 0.0))
    elements = np.stack([np.eye(3)] + rest)

    n = len(elements)
    prods = np.einsum("iab,jbc->ijac", elements, elements).reshape(n * n, 3, 3)
    cayley = _lookup(elements, prods).reshape(n, n)
    inverse = _lookup(elements, np.transpose(elements, (0, 2, 1)))
    elements.setflags(write=False)
    cayley.setflags(write=False)
    inverse.setflags(write=False)
    return RotationGroup(elements, cayley, inverse)


_GROUP: RotationGroup | None = None


def icosahedral_group() -> RotationGroup:
    """Cached shared instance of :func:`build_icosahedral_group`."""
    global _GROUP
    if _GROUP is None:
        _GROUP = build_icosahedral_group()
    return _GROUP


def apply_transform(T: RigidTransform, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X @ T.rotation.T + T.translation


def relative_rotation_index(G: RotationGroup, i: int, j: int) -> int:
    """Index k with g_k = g_i^{-1} g_j."""
    return int(G.cayley[G.inverse[i], j])


def _angle_from_relative(Rrel: np.ndarray) -> np.ndarray:
    # atan2 of sin and cos stays accurate near 0 and 180 degrees
    c = (np.trace(Rrel, axis1=-2, axis2=-1) - 1.0) / 2.0
    v = np.stack([Rrel[..., 2, 1] - Rrel[..., 1, 2], Rrel[..., 0, 2] - Rrel[..., 2, 0],
                  Rrel[..., 1, 0] - Rrel[..., 0, 1]], axis=-1)
    return np.degrees(np.arctan2(np.linalg.norm(v, axis=-1) / 2.0, c))


def geodesic_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Angle of the relative rotation Ra^T Rb, in degrees."""
    return float(_angle_from_relative(np.asarray(Ra).T @ np.asarray(Rb)))


def geodesic_angles(G: RotationGroup, R: np.ndarray) -> np.ndarray:
    """Angles (degrees) from R to every group element."""
    return _angle_from_relative(np.einsum("kba,bc->kac", G.elements, np.asarray(R)))


def nearest_group_element(G: RotationGroup, R: np.ndarray) -> tuple[int, float]:
    ang = geodesic_angles(G, R)
    k = int(np.argmin(ang))
    return k, float(ang[k])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation via a unit quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def axis_angle_rotation(axis, angle_rad: float) -> np.ndarray:
    return _axis_angle(axis, angle_rad)
