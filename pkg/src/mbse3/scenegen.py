"""Synthetic two-frame multi-body scenes and their JSON file format."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .geom import axis_angle_rotation, icosahedral_group, random_rotation

SHAPES = ("box", "cylinder", "L-bracket", "sphere")
SPLITS = ("train", "val", "test")


class SceneFormatError(ValueError):
    pass


class SceneSpecError(ValueError):
    pass


@dataclass
class SceneSpec:
    part_count: tuple = (2, 4)
    n_points: int = 512
    min_points_per_part: int = 48
    shapes: tuple = SHAPES
    rotation_deg: tuple = (10.0, 60.0)
    translation: tuple = (0.05, 0.4)
    rotation_mode: str = "group-member"
    flow_noise: float = 0.02
    outlier_fraction: float = 0.1
    seed: int = 0
    # extent of a part's longest side (meters) and half-width of the placement cube
    part_size: tuple = (0.3, 0.5)
    scene_extent: float = 0.6
    distinct_shapes: bool = True

    def __post_init__(self):
        self.part_count = tuple(int(x) for x in self.part_count)
        self.rotation_deg = tuple(float(x) for x in self.rotation_deg)
        self.translation = tuple(float(x) for x in self.translation)
        self.part_size = tuple(float(x) for x in self.part_size)
        self.shapes = tuple(self.shapes)
        self.validate()

    def validate(self) -> None:
        lo, hi = self.part_count
        if lo < 1 or hi < lo:
            raise SceneSpecError(f"part_count range {self.part_count} is empty")
        if self.n_points < hi * self.min_points_per_part:
            raise SceneSpecError(
                f"n_points={self.n_points} < part_count max ({hi}) x min_points_per_part ({self.min_points_per_part})")
        for name, (a, b) in (("rotation_deg", self.rotation_deg), ("translation", self.translation),
                             ("part_size", self.part_size)):
            if a < 0 or b < a:
                raise SceneSpecError(f"{name} range {(a, b)} is degenerate")
        if self.rotation_mode not in ("group-member", "continuous"):
            raise SceneSpecError(f"rotation_mode must be group-member or continuous, got {self.rotation_mode!r}")
        if self.flow_noise < 0 or not 0 <= self.outlier_fraction <= 1:
            raise SceneSpecError("flow_noise must be >= 0 and outlier_fraction in [0, 1]")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown or not self.shapes:
            raise SceneSpecError(f"unknown shapes {sorted(unknown)}; choose from {SHAPES}")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise SceneSpecError(f"unknown scene keys {sorted(extra)}")
        return cls(**d)


@dataclass
class SceneSample:
    id: str
    points_k: np.ndarray
    points_l: np.ndarray
    mask: np.ndarray  # part index per point
    rotations: np.ndarray  # P x 3 x 3
    translations: np.ndarray  # P x 3
    flow_clean: np.ndarray
    flow_noisy: np.ndarray | None = field(default=None)

    @property
    def n_parts(self) -> int:
        return len(self.rotations)

    def hard_mask(self) -> np.ndarray:
        """N x P one-hot ground-truth mask."""
        return np.eye(self.n_parts)[self.mask]


# ------------------------------------------------------------------ shapes

def _sample_box_surface(dims, n, rng):
    dims = np.asarray(dims, dtype=float)
    areas = np.array([dims[1] * dims[2], dims[0] * dims[2], dims[0] * dims[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = (rng.random((n, 3)) - 0.5) * dims
    axis = face % 3
    sign = np.where(face < 3, 0.5, -0.5)
    pts[np.arange(n), axis] = sign * dims[axis]
    return pts


def _sample_cylinder(radius, height, n, rng):
    side = 2 * np.pi * radius * height
    cap = np.pi * radius ** 2
    where = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.random(n) * 2 * np.pi
    r = np.where(where == 0, radius, radius * np.sqrt(rng.random(n)))
    z = np.where(where == 0, (rng.random(n) - 0.5) * height, np.where(where == 1, height / 2, -height / 2))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _sample_sphere(radius, n, rng):
    v = rng.normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_lbracket(long_a, long_b, thick, n, rng):
    # arm A along x from the corner, arm B along y; union surface by rejection
    boxes = [(np.array([long_a / 2, thick / 2, 0.0]), np.array([long_a, thick, thick])),
             (np.array([thick / 2, long_b / 2, 0.0]), np.array([thick, long_b, thick]))]
    out = []
    while sum(len(o) for o in out) < n:
        for i, (c, d) in enumerate(boxes):
            cand = _sample_box_surface(d, n, rng) + c
            oc, od = boxes[1 - i]
            inside = np.all(np.abs(cand - oc) < od / 2 - 1e-12, axis=1)
            out.append(cand[~inside])
    pts = np.concatenate(out)
    pts = pts[rng.permutation(len(pts))[:n]]
    return pts - np.array([long_a, long_b, thick]) / 4


def _shape_points(shape, size, n, rng):
    if shape == "box":
        dims = size * rng.uniform(0.55, 1.0, 3)
        dims[0] = size
        return _sample_box_surface(dims, n, rng)
    if shape == "cylinder":
        return _sample_cylinder(size * rng.uniform(0.2, 0.3), size, n, rng)
    if shape == "L-bracket":
        return _sample_lbracket(size, size * rng.uniform(0.55, 0.8), size * 0.15, n, rng)
    if shape == "sphere":
        return _sample_sphere(size / 2, n, rng)
    raise ValueError(shape)


def _allocate(n_total, n_parts, min_pts, weights):
    counts = np.full(n_parts, min_pts)
    rest = n_total - counts.sum()
    share = np.floor(rest * weights / weights.sum()).astype(int)
    counts += share
    counts[np.argsort(-weights, kind="stable")[: n_total - counts.sum()]] += 1
    return counts


# ---------------------------------------------------------------- generator

def _part_rotation(spec: SceneSpec, rng):
    lo, hi = np.radians(spec.rotation_deg)
    if spec.rotation_mode == "continuous":
        axis = rng.normal(size=3)
        return axis_angle_rotation(axis, rng.uniform(lo, hi))
    G = icosahedral_group()
    ang = np.degrees(np.arccos(np.clip((np.trace(G.elements, axis1=1, axis2=2) - 1) / 2, -1, 1)))
    cands = np.flatnonzero((ang > 1e-6) & (ang <= max(spec.rotation_deg[1], ang[ang > 1e-6].min()) + 1e-6))
    return G.elements[rng.choice(cands)].copy()


def generate_scene(spec: SceneSpec, index: int) -> SceneSample:
    rng = np.random.default_rng([spec.seed, index])
    n_parts = int(rng.integers(spec.part_count[0], spec.part_count[1] + 1))
    if spec.distinct_shapes and n_parts <= len(spec.shapes):
        shapes = list(rng.choice(spec.shapes, size=n_parts, replace=False))
    else:
        shapes = list(rng.choice(spec.shapes, size=n_parts, replace=True))
    sizes = rng.uniform(*spec.part_size, n_parts)
    counts = _allocate(spec.n_points, n_parts, spec.min_points_per_part, sizes ** 2)

    parts = []
    for shape, size, cnt in zip(shapes, sizes, counts):
        pts = _shape_points(shape, size, cnt, rng) @ random_rotation(rng).T
        parts.append(pts - pts.mean(axis=0))

    # place parts without overlapping (margin-padded) bounding boxes, in both frames
    placed, boxes = [], []
    margin = 0.05
    for attempt in range(1000):
        placed, boxes = [], []
        ok = True
        for pts in parts:
            found = False
            for _ in range(50):
                c = rng.uniform(-spec.scene_extent, spec.scene_extent, 3)
                lo = pts.min(0) + c - margin
                hi = pts.max(0) + c + margin
                if all(np.any(hi < blo) or np.any(lo > bhi) for blo, bhi in boxes):
                    boxes.append((lo, hi))
                    placed.append(pts + c)
                    found = True
                    break
            if not found:
                ok = False
                break
        if ok:
            break
    else:
        raise SceneSpecError(
            f"could not place {n_parts} parts without overlap within scene_extent={spec.scene_extent} "
            f"after 1000 attempts")

    points_k = np.concatenate(placed)
    mask = np.repeat(np.arange(n_parts), counts)
    order = rng.permutation(len(points_k))
    points_k = points_k[order]
    mask = mask[order]

    rotations, translations = [], []
    for s in range(n_parts):
        R = _part_rotation(spec, rng)
        direction = rng.normal(size=3)
        shift = direction / np.linalg.norm(direction) * rng.uniform(*spec.translation)
        centre = points_k[mask == s].mean(axis=0)
        rotations.append(R)
        translations.append(centre + shift - R @ centre)
    rotations = np.stack(rotations)
    translations = np.stack(translations)

    points_l = np.einsum("nab,nb->na", rotations[mask], points_k) + translations[mask]
    flow_clean = points_l - points_k

    # noise with E|n|^2 = sigma^2, then outliers uniform in the scene bounding box
    noisy = flow_clean + rng.normal(size=flow_clean.shape) * (spec.flow_noise / np.sqrt(3.0))
    n_out = int(round(spec.outlier_fraction * len(points_k)))
    if n_out:
        idx = rng.choice(len(points_k), size=n_out, replace=False)
        both = np.vstack([points_k, points_l])
        lo, hi = both.min(0), both.max(0)
        noisy[idx] = rng.uniform(lo, hi, (n_out, 3)) - points_k[idx]

    return SceneSample(f"scene-{spec.seed:04d}-{index:05d}", points_k, points_l, mask,
                       rotations, translations, flow_clean, noisy)


# ------------------------------------------------------------------- files

def scene_to_dict(s: SceneSample) -> dict:
    tolist = lambda a: [[float(x) for x in row] for row in np.asarray(a)]  # noqa: E731
    return {
        "id": s.id,
        "points_k": tolist(s.points_k),
        "points_l": tolist(s.points_l),
        "mask": [int(m) for m in s.mask],
        "transforms": [{"rotation": [float(x) for x in R.ravel()], "translation": [float(x) for x in t]}
                       for R, t in zip(s.rotations, s.translations)],
        "flow_clean": tolist(s.flow_clean),
        "flow_noisy": tolist(s.flow_noisy) if s.flow_noisy is not None else [],
    }


def save_scene(s: SceneSample, path) -> None:
    text = json.dumps(scene_to_dict(s), separators=(",", ":"))
    with open(path, "w") as fh:
        fh.write(text)


def _points(doc, key, n=None):
    if key not in doc:
        raise SceneFormatError(f"{key}: missing field")
    arr = doc[key]
    if not isinstance(arr, list) or len(arr) == 0:
        raise SceneFormatError(f"{key}: must be a non-empty list of [x, y, z]")
    for i, row in enumerate(arr):
        if not isinstance(row, list) or len(row) != 3:
            raise SceneFormatError(f"{key}[{i}]: expected 3 coordinates")
    out = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(out)):
        raise SceneFormatError(f"{key}: non-finite coordinate")
    if n is not None and len(out) != n:
        raise SceneFormatError(f"{key}: {len(out)} rows, expected {n}")
    return out


def scene_from_dict(doc: dict) -> SceneSample:
    if not isinstance(doc, dict):
        raise SceneFormatError("document must be a JSON object")
    if "id" not in doc or not isinstance(doc["id"], str):
        raise SceneFormatError("id: missing or not a string")
    pk = _points(doc, "points_k")
    n = len(pk)
    pl = _points(doc, "points_l", n)
    if "transforms" not in doc or not isinstance(doc["transforms"], list) or not doc["transforms"]:
        raise SceneFormatError("transforms: must be a non-empty list")
    rots, trans = [], []
    for i, t in enumerate(doc["transforms"]):
        r = t.get("rotation") if isinstance(t, dict) else None
        tr = t.get("translation") if isinstance(t, dict) else None
        if not isinstance(r, list) or len(r) != 9:
            raise SceneFormatError(f"transforms[{i}].rotation: expected 9 values")
        if not isinstance(tr, list) or len(tr) != 3:
            raise SceneFormatError(f"transforms[{i}].translation: expected 3 values")
        rots.append(np.asarray(r, dtype=float).reshape(3, 3))
        trans.append(np.asarray(tr, dtype=float))
    mask = doc.get("mask")
    if not isinstance(mask, list) or len(mask) != n:
        raise SceneFormatError(f"mask: expected {n} part indices")
    mask = np.asarray(mask)
    if mask.dtype.kind not in "iu" or mask.min() < 0 or mask.max() >= len(rots):
        raise SceneFormatError(f"mask: indices must be integers in [0, {len(rots)})")
    fc = _points(doc, "flow_clean", n)
    fn = _points(doc, "flow_noisy", n)
    return SceneSample(doc["id"], pk, pl, mask, np.stack(rots), np.stack(trans), fc, fn)


def load_scene(path) -> SceneSample:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise SceneFormatError(f"<root>: invalid JSON ({e})") from e
    return scene_from_dict(doc)


def split_offsets(counts: dict) -> dict:
    """First scene index of each split so indices never collide."""
    off, out = 0, {}
    for split in SPLITS:
        out[split] = off
        off += int(counts.get(split, 0))
    return out


def write_dataset(spec: SceneSpec, root, counts: dict) -> dict:
    """Write ``<root>/<split>/<scene-id>.json``; returns files per split."""
    offsets = split_offsets(counts)
    written = {}
    for split in SPLITS:
        n = int(counts.get(split, 0))
        d = Path(root) / split
        d.mkdir(parents=True, exist_ok=True)
        written[split] = []
        for i in range(n):
            s = generate_scene(spec, offsets[split] + i)
            path = d / f"{s.id}.json"
            save_scene(s, path)
            written[split].append(path)
    return written


def load_split(root, split: str) -> list[SceneSample]:
    d = Path(root) / split
    if not d.is_dir():
        return []
    return [load_scene(d / f) for f in sorted(os.listdir(d)) if f.endswith(".json")]
