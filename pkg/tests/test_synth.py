import numpy as np
import pytest

from regionot.core import FeatureSet
from regionot.synth import (MaskRecord, SceneObject, SceneSpec, apply_mask, empty_fraction, footprint,
                            generate_pair, make_prototypes, mask_objects, parse_scene_config, random_scene,
                            without_jitter)


def spec_with(objects, **kw):
    kw.setdefault("jitter", 0)
    return SceneSpec((4, 4), 16, 5, tuple(objects), **kw)


def test_noiseless_single_object_matches_photo():
    spec = spec_with([SceneObject(2, (1, 2), 1)])
    photo, sketch, truth = generate_pair(spec, 7)
    cells = list(truth.photo_cells[0])
    assert truth.photo_cells == truth.sketch_cells
    assert np.array_equal(sketch.data[cells], photo.data[cells])
    assert np.allclose(np.linalg.norm(sketch.data[cells], axis=1), 1.0)
    others = np.setdiff1d(np.arange(16), cells)
    assert not np.any(sketch.data[others])
    assert np.allclose(np.linalg.norm(photo.data[others], axis=1), spec.background_scale)


def test_generate_pair_is_deterministic():
    spec = spec_with([SceneObject(0, (0, 0)), SceneObject(3, (2, 3), 1)], noise_sigma=0.2, jitter=1,
                     nonnegative=True)
    a = generate_pair(spec, 11)
    b = generate_pair(spec, 11)
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()
    assert generate_pair(spec, 12)[1].data.tobytes() != a[1].data.tobytes()


def test_channel_zero_is_empty():
    spec = spec_with([SceneObject(1, (1, 1))], noise_sigma=0.3)
    photo, sketch, _ = generate_pair(spec, 3)
    assert not np.any(photo.data[:, 0]) and not np.any(sketch.data[:, 0])


def test_nonnegative_instances():
    spec = spec_with([SceneObject(k, (k, k)) for k in range(4)], nonnegative=True)
    _, _, truth = generate_pair(spec, 5)
    assert np.all(truth.instances >= 0)
    assert np.allclose(np.linalg.norm(truth.instances, axis=1), 1.0)


def test_empty_fraction_matches_target():
    rng = np.random.default_rng(0)
    for radius, count in ((0, 5), (1, 2)):
        spec = random_scene(rng, (6, 6), 16, 4, count, radius=radius, jitter=0)
        _, sketch, _ = generate_pair(spec, 1)
        # overlapping footprints can only increase emptiness; allow one cell either way otherwise
        assert empty_fraction(sketch) >= spec.empty_fraction_target - 1 / 36
        if radius == 0:
            assert abs(empty_fraction(sketch) - spec.empty_fraction_target) <= 1 / 36


def test_later_object_wins_overlap():
    spec = spec_with([SceneObject(0, (1, 1), 1), SceneObject(1, (1, 2))])
    photo, _, truth = generate_pair(spec, 2)
    idx = 1 * 4 + 2
    assert idx not in truth.photo_cells[0]
    assert np.array_equal(photo.data[idx], truth.instances[1])


def test_footprint_clipped_to_grid():
    assert footprint((0, 0), 1, (3, 3)) == [0, 1, 3, 4]
    assert len(footprint((1, 1), 1, (3, 3))) == 9


def test_prototypes_near_orthogonal():
    p = make_prototypes(8, 64, np.random.default_rng(0))
    g = p @ p.T
    assert np.allclose(np.diag(g), 1.0)
    assert np.max(np.abs(g - np.eye(8))) < 0.5


@pytest.mark.parametrize("bad", [
    dict(grid=(0, 3)),
    dict(noise_sigma=-0.1),
    dict(objects=(SceneObject(0, (5, 0)),)),
    dict(objects=(SceneObject(9, (0, 0)),)),
])
def test_scene_spec_validation(bad):
    kw = dict(grid=(3, 3), channels=8, num_classes=2, objects=())
    kw.update(bad)
    with pytest.raises(ValueError):
        SceneSpec(**kw)


# -- masking ---------------------------------------------------------------------------


def ten_object_scene():
    spec = spec_with([SceneObject(k % 5, (k // 4, k % 4)) for k in range(10)])
    return generate_pair(spec, 4)


def test_mask_counts():
    _, sketch, truth = ten_object_scene()
    for p, expected in ((0.0, 0), (0.3, 3), (0.5, 5), (1.0, 10)):
        masked, record = mask_objects(sketch, truth, p, seed=9)
        assert len(record.masked_object_indices) == expected
        assert record.p_mask == p and record.seed == 9


def test_mask_zero_is_identity_and_one_clears_objects():
    _, sketch, truth = ten_object_scene()
    same, record = mask_objects(sketch, truth, 0.0, 1)
    assert same is sketch and not record.masked_object_indices
    cleared, _ = mask_objects(sketch, truth, 1.0, 1)
    assert not np.any(cleared.data)


def test_mask_touches_only_masked_cells_and_is_idempotent():
    _, sketch, truth = ten_object_scene()
    masked, record = mask_objects(sketch, truth, 0.3, 2)
    hit = sorted(c for i in record.masked_object_indices for c in truth.sketch_cells[i])
    keep = np.setdiff1d(np.arange(sketch.size), hit)
    assert not np.any(masked.data[hit])
    assert np.array_equal(masked.data[keep], sketch.data[keep])
    again = apply_mask(masked, truth, record)
    assert np.array_equal(again.data, masked.data)
    assert np.array_equal(mask_objects(sketch, truth, 0.3, 2)[0].data, masked.data)


def test_mask_rejects_bad_probability():
    _, sketch, truth = ten_object_scene()
    with pytest.raises(ValueError):
        mask_objects(sketch, truth, 1.5, 0)


def test_masked_sketch_normalizes_cleanly():
    _, sketch, truth = ten_object_scene()
    masked, _ = mask_objects(sketch, truth, 0.5, 3)
    n = masked.normalize()
    assert np.allclose(np.linalg.norm(n.data, axis=1), 1.0)


# -- config ----------------------------------------------------------------------------


def test_parse_scene_config():
    text = """[scene]
h = 3
w = 4
c = 8
num_classes = 2
objects = 0:1:1 1:2:3:1
noise_sigma = 0.05
nonnegative = yes
"""
    spec = parse_scene_config(text)
    assert spec.grid == (3, 4) and spec.channels == 8
    assert spec.objects == (SceneObject(0, (1, 1)), SceneObject(1, (2, 3), 1))
    assert spec.noise_sigma == 0.05 and spec.nonnegative
    assert without_jitter(spec).jitter == 0


@pytest.mark.parametrize("text, needle", [
    ("[other]\nh = 1\n", r"missing \[scene\]"),
    ("[scene]\nh = 2\nw = 2\nc = 4\n", "num_classes"),
    ("[scene]\nh = 2\nw = 2\nc = 4\nnum_classes = 1\ncolour = red\n", "unknown"),
    ("[scene]\nh = 2\nw = 2\nc = 4\nnum_classes = 1\nobjects = 0:1\n", "bad object"),
    ("[scene]\nh = 2\nw = 2\nc = 4\nnum_classes = 1\nobjects = 0:5:5\n", "outside"),
])
def test_scene_config_errors(text, needle):
    with pytest.raises(ValueError, match=needle):
        parse_scene_config(text, "scene.ini")
