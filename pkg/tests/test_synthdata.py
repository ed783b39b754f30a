import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from whcn.errors import EmptyCloud, InvalidConfig, IoError, ParseError
from whcn.synthdata import (
    LabeledCloud,
    Primitive,
    SceneConfig,
    allocate_points,
    derive_scene_labels,
    generate_scene,
    generate_suite,
    load_cloud,
    random_scene_config,
    save_cloud,
)


def _desk_config(seed=7):
    prims = (
        Primitive("plane", 0, (0, 0, 0), (4, 4, 0)),
        Primitive("plane", 1, (-2, 0, 1.25), (0, 4, 2.5)),
        Primitive("box", 2, (0.5, 0.5, 0.375), (1.2, 0.8, 0.75)),
        Primitive("box", 2, (-0.8, -1.0, 0.375), (1.0, 0.6, 0.75)),
    )
    return SceneConfig(rng_seed=seed, points_per_scene=2000, primitives=prims)


def _assert_clouds_equal(a, b):
    assert a.points.tobytes() == b.points.tobytes()
    assert a.colors.tobytes() == b.colors.tobytes()
    np.testing.assert_array_equal(a.gt_labels, b.gt_labels)
    assert a.scene_labels == b.scene_labels
    assert a.category_names == b.category_names


def test_generate_scene_counts_and_labels():
    cloud = generate_scene(_desk_config())
    assert cloud.n_points == 2000
    assert cloud.scene_labels == {0, 1, 2}
    assert cloud.colors.min() >= 0 and cloud.colors.max() <= 1


def test_generate_scene_is_deterministic():
    _assert_clouds_equal(generate_scene(_desk_config()), generate_scene(_desk_config()))


def test_single_plane_scene():
    cfg = SceneConfig(3, 500, (Primitive("plane", 1, (0, 0, 0), (0, 2, 2)),))
    cloud = generate_scene(cfg)
    assert len(set(cloud.gt_labels.tolist())) == 1
    assert cloud.scene_labels == {1}


def test_labels_match_generating_primitive():
    cfg = SceneConfig(
        1, 300,
        (Primitive("plane", 0, (0, 0, 0), (2, 2, 0), noise=0.0),
         Primitive("cluster", 5, (0, 0, 3), (0.05, 0.05, 0.05), weight=1.0, noise=0.0)),
    )
    cloud = generate_scene(cfg)
    assert np.all(cloud.points[cloud.gt_labels == 0, 2] == 0.0)
    assert np.all(cloud.points[cloud.gt_labels == 5, 2] > 2.0)


@pytest.mark.parametrize(
    "cfg",
    [
        SceneConfig(0, 0, (Primitive("plane", 0, (0, 0, 0), (1, 1, 0)),)),
        SceneConfig(0, 10, ()),
        SceneConfig(0, 10, (Primitive("plane", 0, (0, 0, 0), (1, 1, 1)),)),
        SceneConfig(0, 10, (Primitive("plane", 9, (0, 0, 0), (1, 1, 0)),)),
    ],
)
def test_invalid_config(cfg):
    with pytest.raises(InvalidConfig):
        generate_scene(cfg)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=8), st.integers(1, 5000))
def test_allocation_sums_to_total(weights, total):
    counts = allocate_points(weights, total)
    assert counts.sum() == total
    assert np.all(counts >= 0)


def test_suite_scene_labels_consistent():
    for cloud in generate_suite(2, n_scenes=6, points_per_scene=400):
        assert derive_scene_labels(cloud) == cloud.scene_labels
        assert len(cloud.scene_labels) >= 2


def test_random_config_is_pure():
    assert random_scene_config(5) == random_scene_config(5)


def test_roundtrip(tmp_path):
    cloud = generate_scene(_desk_config())
    path = tmp_path / "scene.cloud"
    save_cloud(cloud, path)
    _assert_clouds_equal(cloud, load_cloud(path))


def test_parse_error_names_token(tmp_path):
    path = tmp_path / "bad.cloud"
    path.write_text("WHCN-CLOUD v1 1 4\n1.0 2.0 oops 0.5 0.5 0.5 3\n")
    with pytest.raises(ParseError) as info:
        load_cloud(path)
    assert info.value.line == 2
    assert info.value.token == "oops"
    assert "oops" in str(info.value)


def test_parse_error_bad_header(tmp_path):
    path = tmp_path / "bad.cloud"
    path.write_text("PLY 1 2\n")
    with pytest.raises(ParseError) as info:
        load_cloud(path)
    assert info.value.line == 1


def test_header_only_is_empty(tmp_path):
    path = tmp_path / "empty.cloud"
    path.write_text("WHCN-CLOUD v1 0 3\n")
    with pytest.raises(EmptyCloud):
        load_cloud(path)


def test_missing_file_and_directory(tmp_path):
    with pytest.raises(IoError):
        load_cloud(tmp_path / "nope.cloud")
    cloud = generate_scene(_desk_config())
    with pytest.raises(IoError):
        save_cloud(cloud, tmp_path / "missing" / "x.cloud")


def test_derive_scene_labels_set_semantics():
    def cloud(labels):
        n = len(labels)
        return LabeledCloud(np.zeros((n, 3)), np.zeros((n, 3)), np.array(labels), frozenset())

    assert derive_scene_labels(cloud([0, 0, 1, 2, 2])) == {0, 1, 2}
    assert derive_scene_labels(cloud([4, 4, 4])) == {4}
    assert derive_scene_labels(cloud([2, 1, 0, 2, 0])) == {0, 1, 2}
