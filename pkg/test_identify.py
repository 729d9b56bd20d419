"""
Identification tests: k-NN against brute force, margins, clean/open selection, weights,
prototype initialization and randomized partition checks.
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch

from errors import ContractError
from identify import (EmbeddingBank, Subset, assign_weights, build_bank, identify_samples, init_prototypes, knn,
                      negative_margin, neighbor_label, neighbor_labels, neighbor_margin, select_clean, select_open,
                      write_identification_report)
from nets import build_model
from noisegen import NoiseTag
from suite import run_suite


def _bank(z, pos, labels, epoch=0):
    z = torch.nn.functional.normalize(torch.as_tensor(z, dtype=torch.float64), dim=1)
    pos = torch.as_tensor(pos, dtype=torch.float64)
    return EmbeddingBank(z=z, ova_pos=pos, ova_neg=1 - pos, labels=torch.as_tensor(labels), epoch=epoch)


def _random_bank(rng, n, C, d=6):
    labels = np.concatenate((np.arange(C), rng.integers(0, C, n - C)))
    return _bank(rng.standard_normal((n, d)), rng.uniform(0.05, 0.95, (n, C)), labels)


# ----------------------------------------------------------------------------
# bank and neighbors
# ----------------------------------------------------------------------------

def test_build_bank_snapshot():
    model = build_model((5,), 3, proj_dim=4, hidden_dim=8, seed=0)
    x = np.random.default_rng(0).standard_normal((20, 5)).astype(np.float32)
    labels = np.arange(20) % 3
    a = build_bank(model, x, labels, epoch=3, batch_size=7)
    b = build_bank(model, x, labels, epoch=3, batch_size=20)
    assert a.size == 20 and a.num_classes == 3 and a.epoch == 3
    assert torch.allclose(a.z, b.z, atol=1e-6)
    assert torch.allclose(a.z.norm(dim=1), torch.ones(20), atol=1e-6)
    assert torch.allclose(a.ova_pos + a.ova_neg, torch.ones(20, 3), atol=1e-6)
    assert model.training


def test_knn_matches_brute_force():
    rng = np.random.default_rng(1)
    for n in (10, 60, 150, 200):
        bank = _random_bank(rng, n, 4)
        k = min(12, n - 1)
        indices, sims = knn(bank, k)
        z = bank.z.numpy()
        for i in range(n):
            s = [(float(np.dot(z[i], z[j])), j) for j in range(n) if j != i]
            expected = [j for _, j in sorted(s, key=lambda t: (-t[0], t[1]))[:k]]
            assert set(indices[i].tolist()) == set(expected)
            assert i not in indices[i]
        assert (np.diff(sims, axis=1) <= 1e-12).all()


def test_knn_clamps_k():
    bank = _random_bank(np.random.default_rng(2), 5, 2)
    indices, _ = knn(bank, 10)
    assert indices.shape == (5, 4)


def test_neighbor_label_equidistant_one_hot():
    z = np.eye(4)
    pos = np.tile([0.0, 1.0, 0.0], (4, 1))
    q = neighbor_label(_bank(z, pos, [0, 1, 1, 1]), 0, k=3, tau=0.1)
    assert np.allclose(q, [0.0, 1.0, 0.0])


def test_neighbor_label_k1_is_nearest_row():
    z = [[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]]
    pos = [[0.1, 0.2], [0.7, 0.4], [0.3, 0.9]]
    q = neighbor_label(_bank(z, pos, [0, 0, 1]), 0, k=1, tau=0.1)
    assert np.allclose(q, pos[1])


def test_neighbor_label_hand_dataset():
    angles = np.array([0.0, 0.3, 0.5, 1.4, 2.0])
    z = np.stack((np.cos(angles), np.sin(angles)), axis=1)
    pos = np.array([[0.9, 0.1, 0.2], [0.8, 0.3, 0.1], [0.4, 0.6, 0.2], [0.1, 0.2, 0.9], [0.3, 0.3, 0.3]])
    bank = _bank(z, pos, [0, 0, 1, 2, 2])
    all_q = neighbor_labels(bank, k=3, tau=0.1)
    for i in range(5):
        sims = sorted(((math.cos(angles[i] - angles[j]), j) for j in range(5) if j != i), key=lambda t: (-t[0], t[1]))[:3]
        weights = np.exp(np.array([s for s, _ in sims]) / 0.1)
        weights /= weights.sum()
        expected = sum(w * pos[j] for w, (_, j) in zip(weights, sims))
        assert np.allclose(neighbor_label(bank, i, 3, 0.1), expected, atol=1e-9)
        assert np.allclose(all_q[i], expected, atol=1e-9)


# ----------------------------------------------------------------------------
# margins
# ----------------------------------------------------------------------------

def test_neighbor_margin_examples():
    assert neighbor_margin(np.array([0.0, 1.0, 0.0]), 1, 2) == 1.0
    assert neighbor_margin(np.array([0.0, 1.0, 0.0]), 0, 1) == -1.0
    assert abs(neighbor_margin(np.array([0.5, 0.3, 0.2]), 0, 2) - 0.25) < 1e-12
    # K above C-1 is clamped
    assert abs(neighbor_margin(np.array([0.5, 0.3, 0.2]), 0, 5) - 0.25) < 1e-12


def test_neighbor_margin_batched_and_permutation_invariant():
    rng = np.random.default_rng(3)
    q = rng.uniform(size=(20, 5))
    y = rng.integers(0, 5, 20)
    margins = neighbor_margin(q, y, 2)
    assert margins.shape == (20,) and (margins >= -1).all() and (margins <= 1).all()
    for i in range(20):
        others = [c for c in range(5) if c != y[i]]
        shuffled = q[i].copy()
        shuffled[others] = q[i][rng.permutation(others)]
        assert abs(neighbor_margin(shuffled, y[i], 2) - margins[i]) < 1e-12


def test_negative_margin_examples():
    assert negative_margin(np.array([0.9, 0.9, 0.1]), 0) == 0.0
    assert negative_margin(np.array([0.0, 1.0, 0.3]), 0) == 1.0
    assert abs(negative_margin(np.array([0.7, 0.9, 0.4]), 0) - 0.2) < 1e-12
    try:
        negative_margin(np.array([[0.5]]), np.array([0]))
        raise AssertionError("single-class negative margin accepted")
    except ContractError:
        pass


# ----------------------------------------------------------------------------
# selection
# ----------------------------------------------------------------------------

def test_select_clean_all_consistent_alpha_one():
    labels = np.arange(30) % 3
    clean, gamma = select_clean(np.linspace(-1, 1, 30), labels, labels, 1.0, 3)
    assert np.array_equal(clean, np.arange(30))
    assert not np.isnan(gamma).any()


def test_select_clean_tiny_alpha_keeps_one_per_class():
    rng = np.random.default_rng(4)
    labels = np.arange(40) % 4
    margins = rng.uniform(-1, 1, 40)
    clean, _ = select_clean(margins, labels, labels, 1e-6, 4)
    assert len(clean) == 4
    for c in range(4):
        rows = np.flatnonzero(labels == c)
        assert rows[margins[rows].argmax()] in clean


def test_select_clean_zero_consistency_floor():
    labels = np.array([0, 0, 0, 1, 1, 1])
    argmax = np.array([1, 1, 1, 1, 1, 1])
    margins = np.array([-0.5, -0.2, -0.9, 0.5, 0.6, 0.7])
    clean, gamma = select_clean(margins, labels, argmax, 0.9, 2)
    assert 1 in clean and 0 not in clean and 2 not in clean
    assert gamma[0] == -0.2
    assert set(clean.tolist()) >= {3, 4, 5}


def test_select_clean_planted_separation():
    n_clean, n_noisy, C, alpha = 20, 10, 4, 0.9
    labels, argmax, margins, hidden_clean = [], [], [], []
    for c in range(C):
        labels += [c] * (n_clean + n_noisy)
        argmax += [c] * n_clean + [(c + 1) % C] * n_noisy
        margins += [1.0] * n_clean + [-1.0] * n_noisy
        hidden_clean += [True] * n_clean + [False] * n_noisy
    hidden_clean = np.array(hidden_clean)
    clean, _ = select_clean(np.array(margins), np.array(labels), np.array(argmax), alpha, C)
    selected = np.zeros(len(labels), dtype=bool)
    selected[clean] = True
    precision = (selected & hidden_clean).sum() / selected.sum()
    recall = (selected & hidden_clean).sum() / hidden_clean.sum()
    assert precision == 1.0
    # ceil(0.9 * 20) = 18 per class
    assert recall == 18 / 20


def test_select_open_examples():
    rng = np.random.default_rng(5)
    margins = rng.uniform(0, 1, 100)
    assert len(select_open(margins, np.arange(10), 0.0)[0]) == 0
    assert len(select_open(margins, np.arange(100), 0.5)[0]) == 0

    clean = np.arange(0, 100, 3)
    chosen, gamma = select_open(margins, clean, 0.1)
    candidates = np.setdiff1d(np.arange(100), clean)
    expected = candidates[np.argsort(margins[candidates], kind="stable")[:10]]
    assert np.array_equal(chosen, np.sort(expected))
    assert gamma == margins[expected].max()


def test_select_open_quota_shortfall_takes_all():
    chosen, _ = select_open(np.linspace(0, 1, 10), np.arange(8), 0.5)
    assert np.array_equal(chosen, [8, 9])


def test_select_open_monotone_in_alpha():
    rng = np.random.default_rng(6)
    for _ in range(50):
        n = int(rng.integers(10, 80))
        margins = rng.uniform(0, 1, n)
        clean = np.sort(rng.choice(n, int(rng.integers(0, n // 2)), replace=False))
        a, b = sorted(rng.uniform(0, 0.9, 2))
        small, _ = select_open(margins, clean, a)
        large, _ = select_open(margins, clean, b)
        assert set(small.tolist()) <= set(large.tolist())


def test_assign_weights_examples():
    margins = np.array([0.8, 0.2, -1.0, 0.8, 0.5])
    w = assign_weights(np.array([4]), np.array([3]), margins)
    assert w[0] == 1.0
    assert abs(w[1] - 1.2 / 1.8) < 1e-12 and abs(w[1] - 0.6667) < 1e-4
    assert w[2] == 0.0
    assert w[3] == 0.0 and w[4] == 1.0


def test_assign_weights_degenerate_max():
    w = assign_weights(np.array([0]), np.array([]), np.full(4, -1.0))
    assert w[0] == 1.0 and (w[1:] == 0.5).all()


# ----------------------------------------------------------------------------
# orchestration
# ----------------------------------------------------------------------------

def test_identify_samples_fuzz_partition_law_and_weights():
    rng = np.random.default_rng(7)
    for _ in range(50):
        C = int(rng.integers(2, 5))
        n = int(rng.integers(20, 80))
        bank = _random_bank(rng, n, C)
        partition = identify_samples(bank, k=5, tau=0.1, K=min(2, C - 1),
                                     alpha_id=float(rng.uniform(0.1, 1.0)), alpha_ood=float(rng.uniform(0, 0.5)))
        everything = np.concatenate((partition.clean_idx, partition.close_idx, partition.open_idx))
        assert np.array_equal(np.sort(everything), np.arange(n))
        w = partition.weights
        assert ((w >= 0) & (w <= 1)).all()
        assert (w[partition.clean_idx] == 1).all() and (w[partition.open_idx] == 0).all()
        assert (w[partition.close_idx] > 0).all()
        membership = partition.membership()
        assert (membership[partition.open_idx] == Subset.OPEN).all()
        for c in range(C):
            assert (bank.labels.numpy()[partition.clean_idx] == c).any()


def test_identify_alpha_ood_zero_gives_empty_open_set():
    bank = _random_bank(np.random.default_rng(8), 40, 3)
    partition = identify_samples(bank, k=5, tau=0.1, K=2, alpha_id=0.5, alpha_ood=0.0)
    assert len(partition.open_idx) == 0
    assert partition.counts()["n_open"] == 0


def test_init_prototypes_examples():
    z = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.6, 0.8, 0.0], [0.0, 0.0, 1.0]])
    bank = _bank(z, np.full((4, 2), 0.5), [0, 1, 1, 0])
    P = init_prototypes(bank, np.array([0, 1]), num_classes=2)
    assert torch.allclose(P, bank.z[[0, 1]])

    P = init_prototypes(bank, np.array([0, 1, 2, 3]), num_classes=2)
    expected = bank.z[[1, 2]].mean(0)
    assert torch.allclose(P[1], expected / expected.norm())
    assert torch.allclose(P.norm(dim=1), torch.ones(2, dtype=P.dtype))


def test_init_prototypes_cancellation_fallback():
    z = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    bank = _bank(z, np.full((3, 2), 0.5), [0, 0, 1])
    P = init_prototypes(bank, np.array([0, 1, 2]), num_classes=2, seed=3)
    assert abs(P[0].norm().item() - 1) < 1e-9
    assert torch.allclose(P[1], bank.z[2])


def test_identification_report_records():
    bank = _random_bank(np.random.default_rng(9), 30, 3)
    partition = identify_samples(bank, k=5, tau=0.1, K=2, alpha_id=0.6, alpha_ood=0.1)
    tags = np.array([NoiseTag.CLEAN, NoiseTag.CLOSED, NoiseTag.OPEN] * 10, dtype=np.int8)
    with tempfile.TemporaryDirectory() as tmp:
        path = write_identification_report(Path(tmp) / "identify" / "epoch_001.jsonl", partition, tags)
        records = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(records) == 30
    assert set(records[0]) == {"index", "M_Neigh", "M_Neg", "partition", "weight", "noise_tag"}
    assert records[2]["noise_tag"] == "open"
    assert sum(r["partition"] == "open" for r in records) == len(partition.open_idx)


def main():
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    sys.exit(0 if run_suite("Identification Test Suite", tests) else 1)


if __name__ == "__main__":
    main()
