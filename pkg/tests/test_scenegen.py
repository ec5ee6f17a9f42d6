import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbse3.geom import geodesic_angles
from mbse3.metrics import epe3d
from mbse3.scenegen import (SceneFormatError, SceneSpec, SceneSpecError, generate_scene, load_scene, load_split,
                            save_scene, scene_to_dict, write_dataset)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneSpec(seed=3), 5)


def test_clean_flow_is_per_part_rigid_motion(scene):
    for s in range(scene.n_parts):
        sel = scene.mask == s
        moved = scene.points_k[sel] @ scene.rotations[s].T + scene.translations[s]
        assert np.abs(scene.points_k[sel] + scene.flow_clean[sel] - moved).max() < 1e-12
    assert np.abs(scene.points_k + scene.flow_clean - scene.points_l).max() < 1e-12


def test_mask_covers_points_and_respects_minimum(scene):
    spec = SceneSpec()
    counts = np.bincount(scene.mask)
    assert len(counts) == scene.n_parts and counts.min() >= spec.min_points_per_part
    assert counts.sum() == spec.n_points
    H = scene.hard_mask()
    assert np.array_equal(H.sum(1), np.ones(spec.n_points))


def test_zero_noise_gives_clean_flow():
    s = generate_scene(SceneSpec(flow_noise=0.0, outlier_fraction=0.0), 0)
    assert np.array_equal(s.flow_noisy, s.flow_clean)


@pytest.mark.parametrize("sigma", [0.01, 0.02, 0.05])
def test_noise_level_band(sigma):
    spec = SceneSpec(flow_noise=sigma, outlier_fraction=0.0)
    e = np.mean([epe3d(generate_scene(spec, i).flow_noisy, generate_scene(spec, i).flow_clean) for i in range(4)])
    assert 0.8 * sigma <= e <= 1.6 * sigma


def test_outlier_fraction_replaces_points():
    s = generate_scene(SceneSpec(flow_noise=0.0, outlier_fraction=0.1), 1)
    moved = np.linalg.norm(s.flow_noisy - s.flow_clean, axis=1) > 0
    assert moved.sum() == round(0.1 * len(s.flow_clean))


def test_group_member_mode_uses_group_rotations(G):
    for i in range(5):
        s = generate_scene(SceneSpec(seed=1), i)
        for R in s.rotations:
            ang = geodesic_angles(G, R)
            assert ang.min() < 1e-6
            assert geodesic_angles(G, np.eye(3))[np.argmin(ang)] == pytest.approx(72.0)


def test_continuous_mode_respects_magnitude_range(G):
    spec = SceneSpec(rotation_mode="continuous", rotation_deg=(10.0, 60.0))
    for i in range(5):
        for R in generate_scene(spec, i).rotations:
            assert 10.0 - 1e-9 <= geodesic_angles(G, R)[0] <= 60.0 + 1e-9


def test_distinct_shapes_default_means_no_repeats_needed():
    spec = SceneSpec()
    assert len(spec.shapes) >= spec.part_count[1]


def test_same_seed_and_index_give_identical_files(tmp_path):
    spec = SceneSpec(seed=9)
    save_scene(generate_scene(spec, 2), tmp_path / "a.json")
    save_scene(generate_scene(spec, 2), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    save_scene(generate_scene(spec, 3), tmp_path / "c.json")
    assert (tmp_path / "a.json").read_bytes() != (tmp_path / "c.json").read_bytes()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 1000))
def test_save_load_round_trip(tmp_path_factory, seed, index):
    s = generate_scene(SceneSpec(seed=seed, n_points=200, min_points_per_part=40), index)
    path = tmp_path_factory.mktemp("rt") / "s.json"
    save_scene(s, path)
    t = load_scene(path)
    assert t.id == s.id
    for name in ("points_k", "points_l", "mask", "rotations", "translations", "flow_clean", "flow_noisy"):
        assert np.asarray(getattr(s, name)).tobytes() == np.asarray(getattr(t, name)).tobytes(), name


def test_document_layout(scene):
    doc = scene_to_dict(scene)
    assert set(doc) == {"id", "points_k", "points_l", "mask", "transforms", "flow_clean", "flow_noisy"}
    assert len(doc["transforms"][0]["rotation"]) == 9 and len(doc["transforms"][0]["translation"]) == 3
    assert max(doc["mask"]) < len(doc["transforms"])


def _write(tmp_path, doc):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    return p


def test_empty_flow_rejected_with_field_name(tmp_path, scene):
    doc = scene_to_dict(scene)
    doc["flow_noisy"] = []
    with pytest.raises(SceneFormatError, match="flow_noisy"):
        load_scene(_write(tmp_path, doc))


def test_mask_index_out_of_range_rejected(tmp_path, scene):
    doc = scene_to_dict(scene)
    doc["mask"][0] = len(doc["transforms"])
    with pytest.raises(SceneFormatError, match="mask"):
        load_scene(_write(tmp_path, doc))


def test_malformed_transform_rejected_with_path(tmp_path, scene):
    doc = scene_to_dict(scene)
    doc["transforms"][1]["rotation"] = [1.0, 0.0]
    with pytest.raises(SceneFormatError, match=r"transforms\[1\]\.rotation"):
        load_scene(_write(tmp_path, doc))


def test_invalid_json_rejected(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{not json")
    with pytest.raises(SceneFormatError):
        load_scene(p)


def test_spec_validation_names_constraint():
    with pytest.raises(SceneSpecError, match="min_points_per_part"):
        SceneSpec(n_points=100)
    with pytest.raises(SceneSpecError, match="rotation_deg"):
        SceneSpec(rotation_deg=(30.0, 10.0))
    with pytest.raises(SceneSpecError, match="shapes"):
        SceneSpec(shapes=("torus",))


def test_placement_exhaustion_names_constraint():
    spec = SceneSpec(part_count=(4, 4), scene_extent=0.01, part_size=(0.5, 0.5))
    with pytest.raises(SceneSpecError, match="scene_extent"):
        generate_scene(spec, 0)


def test_dataset_layout_and_disjoint_indices(tmp_path):
    spec = SceneSpec(n_points=200, min_points_per_part=40)
    written = write_dataset(spec, tmp_path, {"train": 3, "val": 1, "test": 2})
    assert {k: len(v) for k, v in written.items()} == {"train": 3, "val": 1, "test": 2}
    ids = [s.id for split in ("train", "val", "test") for s in load_split(tmp_path, split)]
    assert len(set(ids)) == 6
