"""
Tests for noisy task generation: carving, closed/open noise injection, synthesis and persistence.
Run with pytest, or directly: python test_noisegen.py
"""

import sys
import tempfile
from pathlib import Path

import numpy as np
from scipy.stats import chisquare

from errors import ConfigurationError, ContractError, InvalidSpecError
from noisegen import (NO_LABEL, SPLIT_TEST, SPLIT_TRAIN, CleanSource, NoiseSpec, NoiseTag, build_task,
                      carve_open_world, inject_closed_noise, inject_open_noise, load_dataset, load_source_npz,
                      save_dataset, synth_gaussian_source)
from suite import run_suite


def _flat_source(n: int, classes: int, train: bool = True) -> CleanSource:
    labels = np.arange(n) % classes
    split = np.full(n, SPLIT_TRAIN if train else SPLIT_TEST)
    return CleanSource(np.zeros((n, 2), dtype=np.float32), labels, split, classes)


def _expect(error, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except error:
        return
    raise AssertionError(f"{fn.__name__} did not raise {error.__name__}")


def test_carve_splits_known_and_open_classes():
    source = synth_gaussian_source(10, 4, 20, 3.0, seed=0)
    known, opened = carve_open_world(source, 8, seed=7)
    assert set(np.unique(known.true_label)) == set(range(8))
    assert set(np.unique(opened.true_label)) == {8, 9}
    assert len(known) + len(opened) == len(source)

    again_known, again_open = carve_open_world(source, 8, seed=7)
    assert np.array_equal(known.features, again_known.features)
    assert np.array_equal(opened.true_label, again_open.true_label)


def test_carve_closed_world_and_errors():
    source = synth_gaussian_source(10, 4, 10, 3.0, seed=0)
    known, opened = carve_open_world(source, 10, seed=0)
    assert len(opened) == 0 and len(known) == 100
    _expect(InvalidSpecError, carve_open_world, source, 11, 0)


def test_zero_noise_rate_keeps_labels():
    ds = inject_closed_noise(_flat_source(200, 4), NoiseSpec(4, "symmetric", 0.0, seed=1))
    assert np.array_equal(ds.given_label, ds.true_label)
    assert (ds.noise_tag == NoiseTag.CLEAN).all()


def test_symmetric_flip_count_and_uniform_targets():
    ds = inject_closed_noise(_flat_source(1000, 8), NoiseSpec(8, "symmetric", 0.4, seed=3))
    flipped = ds.given_label != ds.true_label
    assert flipped.sum() == 400
    assert np.array_equal(flipped, ds.noise_tag == NoiseTag.CLOSED)
    offsets = (ds.given_label[flipped] - ds.true_label[flipped]) % 8
    counts = np.bincount(offsets, minlength=8)
    assert counts[0] == 0
    assert chisquare(counts[1:]).pvalue > 1e-3


def test_asymmetric_flips_follow_circular_map():
    ds = inject_closed_noise(_flat_source(800, 8), NoiseSpec(8, "asymmetric", 0.4, seed=5))
    flipped = ds.noise_tag == NoiseTag.CLOSED
    assert flipped.sum() == 320
    assert (ds.given_label[flipped & (ds.true_label == 3)] == 4).all()
    assert np.array_equal(ds.given_label[flipped], (ds.true_label[flipped] + 1) % 8)


def test_test_split_untouched_by_closed_noise():
    source = synth_gaussian_source(4, 4, 50, 3.0, seed=0)
    ds = inject_closed_noise(source, NoiseSpec(4, "symmetric", 0.8, seed=0))
    test = ds.split == SPLIT_TEST
    assert np.array_equal(ds.given_label[test], ds.true_label[test])
    n_train = int((ds.split == SPLIT_TRAIN).sum())
    assert (ds.noise_tag == NoiseTag.CLOSED).sum() == int(np.floor(0.8 * n_train + 0.5))


def test_invalid_noise_spec():
    _expect(InvalidSpecError, NoiseSpec, 8, "symmetric", 1.5)
    _expect(InvalidSpecError, NoiseSpec, 8, "pairflip", 0.2)
    _expect(InvalidSpecError, synth_gaussian_source, 4, 4, 1, 3.0, 0)


def test_lond_task_composition():
    source = synth_gaussian_source(10, 8, 50, 3.0, seed=2)
    ds = build_task(source, NoiseSpec(8, "symmetric", 0.4, seed=2), mode="lond")
    ds.check_consistency()
    train, test = ds.train(), ds.test()
    # 40 train / 10 test per class
    assert len(train) == 400 and len(test) == 100
    open_train = train.noise_tag == NoiseTag.OPEN
    assert open_train.sum() == 80
    assert (train.given_label[open_train] < 8).all() and (train.given_label >= 0).all()
    assert (train.noise_tag == NoiseTag.CLOSED).sum() == 128
    open_test = test.true_label >= 8
    assert open_test.sum() == 20 and (~open_test).sum() == 80
    assert (test.given_label[open_test] == NO_LABEL).all()


def test_lcnd_equals_closed_noise_output():
    source = synth_gaussian_source(10, 8, 30, 3.0, seed=4)
    spec = NoiseSpec(8, "symmetric", 0.2, seed=4)
    known, opened = carve_open_world(source, 8, seed=4)
    closed = inject_closed_noise(known, spec)
    lcnd = inject_open_noise(closed, opened, len(closed.train()), seed=4, mode="lcnd")
    assert np.array_equal(lcnd.given_label, closed.given_label)
    assert np.array_equal(lcnd.features, closed.features)
    assert np.array_equal(build_task(source, spec, mode="lcnd").given_label, closed.given_label)


def test_lrnd_keeps_test_split_closed():
    source = synth_gaussian_source(10, 8, 30, 3.0, seed=1)
    ds = build_task(source, NoiseSpec(8, "symmetric", 0.2, seed=1), mode="lrnd", open_train_count=10)
    assert (ds.train().noise_tag == NoiseTag.OPEN).sum() == 10
    assert (ds.test().true_label < 8).all()


def test_open_noise_errors():
    source = synth_gaussian_source(4, 4, 20, 3.0, seed=0)
    known, opened = carve_open_world(source, 4, seed=0)
    closed = inject_closed_noise(known, NoiseSpec(4, "symmetric", 0.2, seed=0))
    _expect(ConfigurationError, inject_open_noise, closed, opened, 100, 0, "lond")

    source = synth_gaussian_source(6, 4, 20, 3.0, seed=0)
    known, opened = carve_open_world(source, 4, seed=0)
    closed = inject_closed_noise(known, NoiseSpec(4, "symmetric", 0.2, seed=0))
    n_known = len(closed.train())
    _expect(ConfigurationError, inject_open_noise, closed, opened, n_known + 10 ** 6, 0, "lond")
    _expect(ContractError, inject_open_noise, closed, opened, n_known + 5, 0, "lond",
            lambda x, rng, c: np.full(len(x), c))


def test_label_hook_sets_open_labels():
    source = synth_gaussian_source(6, 4, 20, 3.0, seed=0)
    ds = build_task(source, NoiseSpec(4, "symmetric", 0.0, seed=0), mode="lond",
                    label_hook=lambda x, rng, c: np.zeros(len(x), dtype=np.int64))
    open_train = (ds.noise_tag == NoiseTag.OPEN) & (ds.split == SPLIT_TRAIN)
    assert open_train.any() and (ds.given_label[open_train] == 0).all()


def test_synth_size_and_determinism():
    a = synth_gaussian_source(10, 6, 100, 3.0, seed=11)
    b = synth_gaussian_source(10, 6, 100, 3.0, seed=11)
    assert len(a) == 1000
    assert a.features.tobytes() == b.features.tobytes()
    assert np.array_equal(a.split, b.split)


def test_synth_well_separated_is_nearest_neighbor_separable():
    source = synth_gaussian_source(10, 16, 50, 20.0, seed=0)
    train = source.split == SPLIT_TRAIN
    x_tr, y_tr = source.features[train], source.true_label[train]
    x_te, y_te = source.features[~train], source.true_label[~train]
    dist = ((x_te[:, None, :] - x_tr[None, :, :]) ** 2).sum(-1)
    accuracy = (y_tr[dist.argmin(1)] == y_te).mean()
    assert accuracy > 0.99


def test_dataset_round_trip():
    source = synth_gaussian_source(6, 5, 20, 3.0, seed=9)
    ds = build_task(source, NoiseSpec(4, "asymmetric", 0.3, seed=9), mode="lond")
    with tempfile.TemporaryDirectory() as tmp:
        save_dataset(ds, tmp)
        back = load_dataset(tmp)
    for name in ("features", "given_label", "true_label", "noise_tag", "split"):
        assert np.array_equal(getattr(ds, name), getattr(back, name)), name
    assert back.num_classes == 4 and back.c_total == 6
    back.check_consistency()


def test_load_dataset_missing_files():
    with tempfile.TemporaryDirectory() as tmp:
        _expect(ConfigurationError, load_dataset, tmp)


def test_external_source_npz():
    source = synth_gaussian_source(5, 3, 10, 3.0, seed=0)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "source.npz"
        np.savez(path, features=source.features, labels=source.true_label, split=source.split)
        loaded = load_source_npz(path)
        np.savez(Path(tmp) / "partial.npz", features=source.features)
        _expect(ConfigurationError, load_source_npz, Path(tmp) / "partial.npz")
        _expect(ConfigurationError, load_source_npz, Path(tmp) / "missing.npz")
    assert loaded.c_total == 5
    assert np.array_equal(loaded.features, source.features) and np.array_equal(loaded.split, source.split)
    spec = NoiseSpec(4, "symmetric", 0.2, seed=0)
    assert np.array_equal(build_task(loaded, spec).given_label, build_task(source, spec).given_label)


def main():
    tests = [
        ("Carve known/open", test_carve_splits_known_and_open_classes),
        ("Carve closed world", test_carve_closed_world_and_errors),
        ("Zero noise", test_zero_noise_rate_keeps_labels),
        ("Symmetric flips", test_symmetric_flip_count_and_uniform_targets),
        ("Asymmetric flips", test_asymmetric_flips_follow_circular_map),
        ("Test split untouched", test_test_split_untouched_by_closed_noise),
        ("Invalid spec", test_invalid_noise_spec),
        ("LOND composition", test_lond_task_composition),
        ("LCND", test_lcnd_equals_closed_noise_output),
        ("LRND", test_lrnd_keeps_test_split_closed),
        ("Open noise errors", test_open_noise_errors),
        ("Label hook", test_label_hook_sets_open_labels),
        ("Synth determinism", test_synth_size_and_determinism),
        ("Synth separability", test_synth_well_separated_is_nearest_neighbor_separable),
        ("Dataset round trip", test_dataset_round_trip),
        ("Missing dataset files", test_load_dataset_missing_files),
        ("External .npz source", test_external_source_npz),
    ]
    sys.exit(0 if run_suite("Noise Generation Test Suite", tests) else 1)


if __name__ == "__main__":
    main()
