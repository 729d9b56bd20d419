"""
Tests for the model bundle, augmentation views, mixup and checkpoints.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from scipy.stats import kstest

from errors import ConfigurationError
from nets import (AugmentationPolicy, ConvBackbone, build_model, forward, load_checkpoint, make_views, mixup_batch,
                  save_checkpoint)
from suite import run_suite


def _model(dim=6, classes=4, **kwargs):
    return build_model((dim,), classes, proj_dim=8, hidden_dim=16, tau=0.1, seed=0, **kwargs)


def test_forward_shapes_and_simplex():
    model = _model()
    out = forward(model, torch.randn(5, 6))
    assert out.z.shape == (5, 8)
    assert out.ova_probs.shape == (5, 4, 2)
    assert out.proto_logits.shape == (5, 4)
    assert torch.allclose(out.ova_probs.sum(-1), torch.ones(5, 4), atol=1e-6)
    assert (out.ova_probs >= 0).all() and (out.ova_probs <= 1).all()


def test_embeddings_are_unit_norm():
    out = _model()(torch.randn(4, 6))
    assert torch.allclose(out.z.norm(dim=1), torch.ones(4), atol=1e-6)


def test_proto_logit_of_matching_prototype_is_inverse_tau():
    model = _model().eval()
    x = torch.randn(4, 6)
    with torch.no_grad():
        model.set_prototypes(model(x).z)
        out = model(x)
    assert torch.allclose(out.proto_logits.diagonal(), torch.full((4,), 10.0), atol=1e-4)
    assert model.has_prototypes


def test_forward_errors():
    model = _model()
    try:
        forward(model, torch.zeros(0, 6))
        raise AssertionError("empty batch accepted")
    except ConfigurationError:
        pass
    model.prototypes = nn.Parameter(torch.randn(4, 5))
    try:
        model(torch.randn(2, 6))
        raise AssertionError("prototype dimension mismatch accepted")
    except ConfigurationError:
        pass


def test_prototypes_renormalized_after_step():
    model = _model()
    optimizer = torch.optim.SGD(model.parameters(), lr=0.5)
    out = model(torch.randn(8, 6))
    loss = out.proto_logits.pow(2).sum()
    loss.backward()
    optimizer.step()
    model.renormalize_prototypes()
    assert (model.prototypes.norm(dim=1) - 1).abs().max() < 1e-6


def test_eval_forward_is_deterministic():
    model = _model().eval()
    x = torch.randn(3, 6)
    with torch.no_grad():
        a, b = model(x), model(x)
    assert torch.equal(a.z, b.z) and torch.equal(a.ova_probs, b.ova_probs)


def test_output_slicing():
    out = _model()(torch.randn(6, 6))
    head, tail = out[:2], out[2:]
    assert len(head) == 2 and len(tail) == 4
    assert torch.equal(tail.proto_logits, out.proto_logits[2:])


def test_conv_backbone_for_images():
    model = build_model((3, 8, 8), 3, proj_dim=8, hidden_dim=16, seed=0)
    assert isinstance(model.G, ConvBackbone)
    out = model(torch.randn(2, 3, 8, 8))
    assert out.ova_probs.shape == (2, 3, 2)


def test_zero_policy_views_equal_input():
    x = torch.randn(10, 6)
    weak, strong = make_views(AugmentationPolicy.zero(), x, seed=0)
    assert torch.equal(weak, x) and torch.equal(strong, x)
    images = torch.rand(2, 3, 8, 8)
    weak, strong = make_views(AugmentationPolicy.zero("image"), images, seed=0)
    assert torch.equal(weak, images) and torch.equal(strong, images)


def test_views_deterministic_given_seed():
    policy = AugmentationPolicy()
    x = torch.randn(16, 6)
    a = make_views(policy, x, seed=3)
    b = make_views(policy, x, seed=3)
    c = make_views(policy, x, seed=4)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    assert not torch.equal(a[0], c[0])

    images = torch.rand(4, 3, 8, 8)
    a = make_views(AugmentationPolicy(kind="image"), images, seed=1)
    b = make_views(AugmentationPolicy(kind="image"), images, seed=1)
    assert torch.equal(a[1], b[1]) and a[1].shape == images.shape


def test_weak_view_deviation_matches_half_normal_mean():
    policy = AugmentationPolicy(weak_sigma=0.05, scale=1.0)
    x = torch.zeros(1000, 100)
    weak, _ = make_views(policy, x, seed=0)
    expected = 0.05 * np.sqrt(2 / np.pi)
    assert abs(weak.abs().mean().item() - expected) < 1e-3


def test_mixup_small_batch_is_identity():
    x = torch.randn(1, 4)
    draw = mixup_batch(x, 1.0, seed=0)
    assert draw.lam == 1.0 and torch.equal(draw.mixed, x)
    assert draw.pair_index.tolist() == [0]


def test_mixup_mixes_with_permutation():
    x = torch.randn(8, 3)
    draw = mixup_batch(x, 1.0, seed=2)
    assert sorted(draw.pair_index.tolist()) == list(range(8))
    assert torch.allclose(draw.mixed, draw.lam * x + (1 - draw.lam) * x[draw.pair_index])
    same = torch.ones(5, 3)
    assert torch.allclose(mixup_batch(same, 1.0, seed=0).mixed, same)


def test_mixup_rejects_nonpositive_alpha():
    try:
        mixup_batch(torch.randn(4, 2), 0.0)
        raise AssertionError("alpha=0 accepted")
    except ConfigurationError:
        pass


def test_mixup_lambda_uniform_for_alpha_one():
    rng = np.random.default_rng(0)
    x = torch.randn(2, 1)
    lams = [mixup_batch(x, 1.0, rng=rng).lam for _ in range(10000)]
    assert kstest(lams, "uniform").pvalue > 1e-3


def test_checkpoint_round_trip():
    model = _model().eval()
    with torch.no_grad():
        model.set_prototypes(torch.randn(4, 8))
    x = torch.randn(3, 6)
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(Path(tmp) / "ckpt.pt", model, epoch=7, hyper={"tau": 0.1})
        restored, state = load_checkpoint(path)
    restored.eval()
    with torch.no_grad():
        a, b = model(x), restored(x)
    assert state["epoch"] == 7 and state["hyper"] == {"tau": 0.1}
    assert restored.has_prototypes
    assert torch.equal(a.proto_logits, b.proto_logits) and torch.equal(a.ova_probs, b.ova_probs)


def test_missing_checkpoint():
    try:
        load_checkpoint("/nonexistent/ckpt.pt")
        raise AssertionError("missing checkpoint accepted")
    except ConfigurationError:
        pass


def main():
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    sys.exit(0 if run_suite("Model Test Suite", tests) else 1)


if __name__ == "__main__":
    main()
