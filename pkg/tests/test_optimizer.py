from __future__ import annotations

import numpy as np
import pytest
import torch

from conftest import skimage_color
from refcolor.image_core import resize, to_grayscale, to_tensor
from refcolor.losses import LossContext, LossWeights
from refcolor.metrics import MetricConfig
from refcolor.optimizer import (
    RunAborted,
    RunConfig,
    ScaleState,
    init_scale,
    run,
    step,
)
from refcolor.pyramid import decompose, freeze_top_bands, high_frequency


def _const(h, w, c):
    return torch.full((1, 3, h, w), c)


def test_config_defaults_and_validation():
    cfg = RunConfig()
    assert (cfg.K, cfg.T, cfg.L, cfg.lr, cfg.lr_final_scale, cfg.n_frozen) == (3, 200, 5, 0.002, 0.001, 2)
    assert cfg.weights == LossWeights(6.0, 1.0)
    assert RunConfig(metric=MetricConfig("cmd")).weights.lambda_fda == 0.5
    for bad in ({"K": -1}, {"T": 0}, {"ablation": "nope"}, {"size": (16, 16), "K": 3}, {"lr": 0}):
        with pytest.raises(ValueError):
            RunConfig(**bad)
    with pytest.raises(ValueError):
        RunConfig.from_dict({"K": 1, "bogus": 2})
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_scale_schedule():
    cfg = RunConfig(K=3, size=(256, 256))
    assert cfg.scale_shapes() == [(256, 256), (128, 128), (64, 64), (32, 32)]
    assert [cfg.lr_at(i) for i in range(3, -1, -1)] == [0.002, 0.002, 0.002, 0.001]
    assert RunConfig(K=2, size=(100, 75)).scale_shapes() == [(100, 75), (50, 38), (25, 19)]


def test_ablation_switches():
    assert RunConfig(ablation="fda_only").effective_weights().lambda_p == 0
    assert RunConfig(ablation="fda_only").effective_n_frozen() == 0
    assert RunConfig(ablation="no_spm_f").effective_n_frozen() == 2
    assert RunConfig(ablation="no_spm_p").effective_weights().lambda_p == 1.0
    assert RunConfig(ablation="no_spm_p").effective_n_frozen() == 0


def test_init_coarsest_constant_is_zero():
    cfg = RunConfig(K=1, size=(32, 32))
    st = init_scale(1, None, _const(16, 16, 0.4), cfg)
    assert st.x.reconstruct().abs().max() < 1e-6
    with pytest.raises(ValueError):
        init_scale(0, None, _const(32, 32, 0.4), cfg)


def test_init_finer_constant_carries_previous():
    cfg = RunConfig(K=1, size=(32, 32))
    st = init_scale(0, _const(16, 16, 0.3), _const(32, 32, 0.7), cfg)
    assert torch.allclose(st.x.reconstruct(), _const(32, 32, 0.3), atol=1e-6)
    assert st.lr == 0.001


def test_init_frozen_bands_match_initial_pyramid():
    o = to_tensor(to_grayscale(skimage_color("astronaut", 64)))
    prev = torch.rand(1, 3, 32, 32)
    cfg = RunConfig(K=1, size=(64, 64))
    st = init_scale(0, prev, o, cfg)
    x0 = resize(prev, 64, 64) + high_frequency(o)
    ref = decompose(x0, st.levels)
    assert st.n_frozen == 2 and st.levels == 5
    assert all(torch.equal(a, b) for a, b in zip(st.x.frozen, ref.bands[:2]))


def test_n_frozen_clamped_on_shallow_scales():
    cfg = RunConfig(K=0, size=(8, 8))
    st = init_scale(0, None, torch.rand(1, 3, 8, 8), cfg)
    assert st.levels == 2 and st.n_frozen == 1


def _state(x0: torch.Tensor, lr: float, levels: int = 4, n_frozen: int = 2) -> ScaleState:
    fp = freeze_top_bands(decompose(x0, levels), n_frozen)
    return ScaleState(index=0, x=fp, o_scaled=x0, r_scaled=x0, lr=lr, levels=levels, n_frozen=n_frozen,
                      optimizer=torch.optim.RMSprop(fp.parameters(), lr=lr, alpha=0.99, eps=1e-8))


def test_stationary_point(extractors):
    o = to_tensor(to_grayscale(skimage_color("chelsea", 32)))
    ctx = LossContext(extractors, o, o, MetricConfig("cx"), LossWeights(0.0, 1.0), seed=0)
    st = _state(o, 0.002)
    x0 = st.x.reconstruct().detach().clone()
    for _ in range(5):
        step(st, ctx)
    assert (st.x.reconstruct() - x0).abs().max() < 1e-6


def test_descent_with_small_lr(extractors):
    o = to_tensor(to_grayscale(skimage_color("chelsea", 32)))
    r = to_tensor(skimage_color("coffee", 32))
    ctx = LossContext(extractors, r, o, MetricConfig("cx"), LossWeights.for_metric("cx"), seed=0, n_samples=256)
    st = _state(o, 1e-4)
    step(st, ctx)
    step(st, ctx)
    (_, _, _, l0), (_, _, _, l1) = st.loss_history
    assert l1 < l0


def test_frozen_bands_untouched_after_50_steps(extractors):
    o = to_tensor(to_grayscale(skimage_color("chelsea", 32)))
    r = to_tensor(skimage_color("coffee", 32))
    ctx = LossContext(extractors, r, o, MetricConfig("fs"), LossWeights.for_metric("fs"), seed=0, n_samples=128)
    st = _state(o * 0.9, 0.01)
    before = [b.clone() for b in st.x.frozen]
    trainable = [t.detach().clone() for t in st.x.trainable]
    for _ in range(50):
        step(st, ctx)
    assert all(torch.equal(a, b) for a, b in zip(before, st.x.frozen))
    assert any(not torch.equal(a, b) for a, b in zip(trainable, st.x.trainable))


def test_non_finite_loss_aborts(extractors, monkeypatch):
    import refcolor.optimizer as opt

    def boom(x, ctx, iteration=0):
        from refcolor.losses import LossTerms
        return LossTerms(total=x.sum() * float("nan"), fda=None, p=None)

    monkeypatch.setattr(opt, "total_loss", boom)
    img = skimage_color("coffee", 16)
    with pytest.raises(RunAborted) as info:
        run(img, img, RunConfig(K=0, T=3, size=(16, 16)), extractors)
    assert info.value.report.status == "aborted"
    assert info.value.iterate.shape == (16, 16, 3)


def test_single_scale_run_and_report(extractors):
    o = to_grayscale(skimage_color("astronaut", 24))
    r = skimage_color("coffee", 24)
    snaps = []
    out, report = run(o, r, RunConfig(K=0, T=4, size=(24, 24), n_samples=64), extractors,
                      snapshot_stride=2, on_snapshot=lambda s, t, img: snaps.append((s, t)))
    assert out.shape == (24, 24, 3) and out.min() >= 0 and out.max() <= 1
    assert len(report.scales) == 1 and [row[0] for row in report.scales[0].losses] == [0, 1, 2, 3]
    assert snaps == [(0, 0), (0, 2), (0, 4)]
    assert report.loss_csv().splitlines()[0] == "scale,iter,loss_fda,loss_p,loss_total"


def test_run_deterministic_and_extractors_unchanged(extractors):
    o = to_grayscale(skimage_color("astronaut", 32))
    r = skimage_color("coffee", 32)
    cfg = RunConfig(K=1, T=3, size=(32, 32), n_samples=128)
    before = extractors.checksums()
    a, ra = run(o, r, cfg, extractors)
    b, rb = run(o, r, cfg, extractors)
    assert np.array_equal(a, b)
    assert ra.loss_csv() == rb.loss_csv()
    assert extractors.checksums() == before


@pytest.mark.parametrize("ablation", ["fda_only", "no_spm_f", "no_spm_p", "lab_ab_only"])
def test_ablations_run(extractors, ablation):
    o = to_grayscale(skimage_color("astronaut", 24))
    r = skimage_color("coffee", 24)
    out, report = run(o, r, RunConfig(K=1, T=2, size=(24, 24), n_samples=64, ablation=ablation), extractors)
    assert np.isfinite(out).all()
    if ablation in ("fda_only", "no_spm_f", "lab_ab_only"):
        assert all(row[2] is None for s in report.scales for row in s.losses)
    if ablation == "lab_ab_only":
        from refcolor.image_core import rgb_to_lab
        lum_in = rgb_to_lab(to_tensor(o))[:, 0]
        lum_out = rgb_to_lab(to_tensor(out))[:, 0]
        assert (lum_in - lum_out).abs().max() < 1.0  # L* held fixed, up to gamut clamping
