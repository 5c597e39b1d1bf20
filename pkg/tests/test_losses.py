from __future__ import annotations

import pytest
import torch

from conftest import skimage_color
from refcolor import losses as L
from refcolor.features import sample_points
from refcolor.image_core import to_grayscale, to_tensor
from refcolor.metrics import MetricConfig


@pytest.fixture(scope="module")
def pair():
    o = to_tensor(to_grayscale(skimage_color("chelsea", 32)))
    r = to_tensor(skimage_color("coffee", 32))
    return o, r


def test_default_weights():
    assert L.LossWeights.for_metric("cx") == L.LossWeights(6.0, 1.0)
    assert L.LossWeights.for_metric("fs").lambda_fda == 2.0
    assert L.LossWeights.for_metric("cmd").lambda_fda == 0.5
    assert L.LossWeights.for_metric("remd").lambda_fda == 1.0
    with pytest.raises(ValueError):
        L.LossWeights(-1.0)
    with pytest.raises(ValueError):
        L.LossWeights(0.0, 0.0)


@pytest.mark.parametrize("kind", ["fs", "cmd", "remd"])
def test_fda_zero_for_identical_image(extractors, pair, kind):
    _, r = pair
    rm = sample_points(L.hypercolumn_of(extractors, r), 256, 3)
    v = L.fda_loss(r.clone(), rm, extractors, MetricConfig(kind=kind), seed=3)
    assert abs(v.item()) < 1e-5


def test_perceptual_self_zero_and_oracle(extractors, pair):
    o, r = pair
    og = L.structure_of(extractors, o)
    assert abs(L.perceptual_loss(o.clone(), og, extractors).item()) < 1e-6
    o64 = to_tensor(to_grayscale(skimage_color("chelsea", 64)))
    r64 = to_tensor(skimage_color("coffee", 64))
    a, b = L.structure_of(extractors, r64), L.structure_of(extractors, o64)
    oracle = []
    for fa, fb in zip(a.maps, b.maps):
        va, vb = fa.double().flatten(), fb.double().flatten()
        oracle.append(1 - torch.dot(va, vb) / (va.norm() * vb.norm()))
    assert abs(L.perceptual_loss(r64, b, extractors).item() - torch.stack(oracle).mean().item()) < 1e-6


def test_structure_input_multiple_of_patch():
    assert L.structure_input(torch.rand(1, 3, 30, 17)).shape[-2:] == (32, 16)
    assert L.structure_input(torch.rand(1, 3, 3, 3)).shape[-2:] == (8, 8)
    x = torch.rand(1, 3, 16, 24)
    assert L.structure_input(x) is x


@pytest.mark.parametrize("kind", ["fs", "cx", "cmd", "remd"])
def test_additivity(extractors64, pair, kind):
    extractors = extractors64
    o, r = (t.double() for t in pair)
    w = L.LossWeights(lambda_fda=1.7, lambda_p=0.6)
    ctx = L.LossContext(extractors, r, o, MetricConfig(kind=kind), w, seed=1, n_samples=200)
    x = (o * 0.8 + 0.1).requires_grad_(True)
    terms = L.total_loss(x, ctx)
    fda = L.fda_loss(x, ctx.r_matrix, extractors, ctx.mcfg, 1, ctx.n)
    p = L.perceptual_loss(x, ctx.o_set, extractors)
    assert abs(terms.total.item() - (1.7 * fda.item() + 0.6 * p.item())) < 1e-6
    assert terms.fda == pytest.approx(fda.item()) and terms.p == pytest.approx(p.item())
    terms.total.backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()


def test_cx_defaults_total(extractors, pair):
    o, r = pair
    ctx = L.LossContext(extractors, r, o, MetricConfig("cx"), L.LossWeights.for_metric("cx"), seed=0, n_samples=128)
    t = L.total_loss(o.clone(), ctx)
    assert abs(t.total.item() - (6 * t.fda + 1 * t.p)) < 1e-5


def test_zero_weights_skip_terms(extractors, pair):
    o, r = pair
    ctx = L.LossContext(extractors, r, o, MetricConfig("cx"), L.LossWeights(0.0, 1.0), seed=0)
    assert ctx.r_set is None
    t = L.total_loss(o.clone(), ctx)
    assert t.fda is None and abs(t.total.item()) < 1e-6
    ctx = L.LossContext(extractors, r, o, MetricConfig("cx"), L.LossWeights(6.0, 0.0), seed=0, n_samples=64)
    assert ctx.o_set is None and L.total_loss(o.clone(), ctx).p is None


def test_reference_features_extracted_once(extractors, pair):
    o, r = pair
    h0, s0 = extractors.hypercolumn_calls, extractors.structure_calls
    ctx = L.LossContext(extractors, r, o, MetricConfig("cx"), L.LossWeights.for_metric("cx"), seed=0, n_samples=64)
    assert (extractors.hypercolumn_calls - h0, extractors.structure_calls - s0) == (1, 1)
    x = o.clone().requires_grad_(True)
    for it in range(5):
        L.total_loss(x, ctx, it)
    # one extraction of x per term per iteration, none for r or o
    assert extractors.hypercolumn_calls - h0 == 1 + 5
    assert extractors.structure_calls - s0 == 1 + 5


def test_resampling_uses_cached_maps(extractors, pair):
    o, r = pair
    ctx = L.LossContext(extractors, r, o, MetricConfig("cx"), L.LossWeights.for_metric("cx"), seed=4,
                        n_samples=64, resample=True)
    h0 = extractors.hypercolumn_calls
    a, b = ctx.reference_matrix(0), ctx.reference_matrix(1)
    assert extractors.hypercolumn_calls == h0
    assert not torch.equal(a.vectors, b.vectors)
    assert ctx.seed_at(3) == 7
