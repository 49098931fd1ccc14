import json

import numpy as np
import pytest

from changealign.synthgen import (
    ChangeSpec,
    RadiometricSpec,
    SceneError,
    SceneSpec,
    WarpSpec,
    apply_warp,
    gen_dataset,
    gen_scene,
    load_dataset,
    regenerate,
    split_counts,
    write_dataset,
)

QUIET = RadiometricSpec(gain_range=(1.0, 1.0), bias_range=(0.0, 0.0), noise_std=0.0)


def test_identity_pipeline():
    spec = SceneSpec(seed=3, size=(32, 32), warp=WarpSpec("none"), radiometric=QUIET, changes=ChangeSpec(n_objects=0))
    s = gen_scene(spec)
    assert np.array_equal(s.t1, s.t2)
    assert not s.change_mask.any() and not s.true_warp.any()


def test_integer_translation_shifts_interior():
    spec = SceneSpec(
        seed=4, size=(32, 40), warp=WarpSpec("translation", 2.0, (2.0, 0.0)), radiometric=QUIET, changes=ChangeSpec(n_objects=0)
    )
    s = gen_scene(spec)
    np.testing.assert_array_equal(s.t2[:, :, :-2], s.t1[:, :, 2:])


def test_same_seed_bitwise_identical():
    a, b = gen_scene(SceneSpec(seed=11)), gen_scene(SceneSpec(seed=11))
    for x, y in ((a.t1, b.t1), (a.t2, b.t2), (a.change_mask, b.change_mask), (a.true_warp, b.true_warp)):
        assert np.array_equal(x, y)


@pytest.mark.parametrize("kind", ["translation", "affine", "smooth-field"])
def test_warp_bound_and_ranges(kind):
    for seed in range(5):
        s = gen_scene(SceneSpec(seed=seed, warp=WarpSpec(kind, 2.0)))
        assert np.abs(s.true_warp).max() <= 2.0
        assert s.t1.min() >= 0 and s.t2.max() <= 1
        assert s.t1.shape == (1, 96, 96) and s.change_mask.shape == (96, 96)


def test_mask_marks_exactly_the_changes():
    spec = SceneSpec(seed=5, warp=WarpSpec("translation", 1.5), radiometric=QUIET, changes=ChangeSpec(n_objects=3))
    s = gen_scene(spec)
    warped = apply_warp(s.t1, s.true_warp)
    outside = ~s.change_mask
    np.testing.assert_allclose(s.t2[:, outside], warped[:, outside], atol=1e-6)
    assert np.all(np.abs(s.t2[:, s.change_mask] - warped[:, s.change_mask]).mean() > 0.1)


def test_disk_objects_and_rgb():
    s = gen_scene(SceneSpec(seed=6, channels=3, changes=ChangeSpec(n_objects=2, shape="disk")))
    assert s.t1.shape == (3, 96, 96) and s.change_mask.any()


def test_spec_validation():
    with pytest.raises(SceneError):
        SceneSpec(warp=WarpSpec("spiral"))
    with pytest.raises(SceneError):
        SceneSpec(warp=WarpSpec("translation", 1.0, (2.0, 0.0)))
    with pytest.raises(SceneError):
        SceneSpec(size=(16, 16), changes=ChangeSpec(size_range=(12, 24)))
    with pytest.raises(SceneError):
        SceneSpec(radiometric=RadiometricSpec(noise_std=-1))


def test_split_arithmetic():
    assert split_counts(10, (9, 1)) == (9, 1, 0)
    assert split_counts(80, (8, 1, 1)) == (64, 8, 8)
    with pytest.raises(SceneError):
        split_counts(10, (0, 0, 0))


def test_distinct_seeds_give_distinct_samples():
    samples, _ = gen_dataset(100, 6, SceneSpec(size=(32, 32), changes=ChangeSpec(n_objects=1, size_range=(4, 8))))
    for i in range(6):
        for j in range(i + 1, 6):
            assert not np.array_equal(samples[i].t1, samples[j].t1)


def test_manifest_round_trip(tmp_path):
    spec = SceneSpec(size=(32, 32), changes=ChangeSpec(n_objects=1, size_range=(6, 10)))
    samples, manifest = gen_dataset(7, 5, spec)
    manifest = json.loads(json.dumps(manifest))
    again = regenerate(manifest)
    for a, b in zip(samples, again):
        assert np.array_equal(a.t2, b.t2) and np.array_equal(a.change_mask, b.change_mask)

    write_dataset(tmp_path, samples, manifest)
    loaded = load_dataset(tmp_path)
    assert [s.id for s in loaded] == ["0000", "0001", "0002", "0003", "0004"]
    assert np.array_equal(loaded[0].mask, samples[0].change_mask)
    np.testing.assert_allclose(loaded[0].t1, samples[0].t1, atol=0.5 / 255 + 1e-6)
    np.testing.assert_array_equal(loaded[0].warp, samples[0].true_warp)
    assert len(load_dataset(tmp_path, "train")) == 4


def test_load_missing_dataset(tmp_path):
    with pytest.raises(SceneError):
        load_dataset(tmp_path / "nope")
