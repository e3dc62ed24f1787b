"""Network assembly tests: extractors, blocks, the full model and census."""

import numpy as np
import pytest

import colanet.tensor as T
from colanet.errors import ShapeError
from colanet.network import (
    ModelConfig,
    build_weights,
    cab_forward,
    cab_params,
    cola_forward,
    fem_basic,
    fem_enhanced,
    l2_loss,
    model_config_from_text,
    model_config_to_text,
    param_census,
    run_tiled,
)
from colanet.tensor import Tensor, grad_check


def micro_config(**kw):
    base = dict(variant="basic", num_cab=1, channels=8, in_channels=1,
                patch_h=3, patch_w=3, patch_stride=3, ca_reduction=4,
                local_bottleneck=2)
    base.update(kw)
    return ModelConfig(**base)


class TestFemBasic:
    def test_shape_and_relu_range(self):
        cfg = micro_config(fem_depth=2)
        w = build_weights(cfg, seed=0)
        blocks, _, _, _ = cab_params(w, 0, cfg)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 8, 6, 6)))
        out = fem_basic(x, blocks, mode="train")
        assert out.shape == x.shape
        assert np.all(out.data >= 0)

    def test_two_block_manual_composition(self):
        cfg = micro_config(channels=4, fem_depth=2, local_bottleneck=1)
        w = build_weights(cfg, seed=1)
        blocks, _, _, _ = cab_params(w, 0, cfg)
        x = Tensor(np.random.default_rng(1).normal(size=(1, 4, 5, 5)))

        manual = x
        for cw, cb, gamma, beta, rm, rv in blocks:
            rm2, rv2 = rm.copy(), rv.copy()
            manual = T.activate(
                T.batch_norm(T.conv2d(manual, cw, cb, pad=1), gamma, beta,
                             rm2, rv2, mode="train"), "relu")
        want = manual.data

        blocks_fresh, _, _, _ = cab_params(build_weights(cfg, seed=1), 0, cfg)
        got = fem_basic(x, blocks_fresh, mode="train").data
        assert np.array_equal(got, want)


class TestFemEnhanced:
    def test_zero_residual_branch_is_identity(self):
        cfg = micro_config(variant="enhanced")
        w = build_weights(cfg, seed=2)
        for name, p in w.params.items():
            if ".fem." in name:
                p.value.data[:] = 0
        blocks, _, _, _ = cab_params(w, 0, cfg)
        x = np.random.default_rng(2).normal(size=(1, 8, 6, 6)).astype(np.float32)
        out = fem_enhanced(Tensor(x), blocks)
        assert np.array_equal(out.data, x)

    def test_shape_contract(self):
        cfg = micro_config(variant="enhanced")
        w = build_weights(cfg, seed=3)
        blocks, _, _, _ = cab_params(w, 0, cfg)
        out = fem_enhanced(Tensor(np.zeros((2, 8, 7, 9))), blocks)
        assert out.shape == (2, 8, 7, 9)

    def test_single_block_stepwise(self):
        cfg = micro_config(variant="enhanced", fem_depth=1)
        w = build_weights(cfg, seed=4)
        blocks, _, _, _ = cab_params(w, 0, cfg)
        (w1, b1, w2, b2), = blocks
        x = Tensor(np.random.default_rng(4).normal(size=(1, 8, 5, 5)))
        want = T.add(x, T.conv2d(T.activate(T.conv2d(x, w1, b1, pad=1),
                                            "relu"), w2, b2, pad=1)).data
        assert np.array_equal(fem_enhanced(x, blocks).data, want)


class TestCabForward:
    def test_shape_and_trace_invariants(self):
        cfg = micro_config()
        w = build_weights(cfg, seed=5)
        x = Tensor(np.random.default_rng(5).normal(size=(2, 8, 6, 6)))
        out, trace = cab_forward(x, cab_params(w, 0, cfg), cfg, mode="train")
        assert out.shape == x.shape
        assert np.allclose(trace.distance_matrix.sum(axis=2), 1.0, atol=1e-5)
        assert np.allclose(trace.fusion_w_nl + trace.fusion_w_l, 1.0,
                           atol=1e-5)
        assert all(0.0 <= h <= 1.0 for h in trace.heat_values)

    def test_matches_manual_chain(self):
        from colanet.attention import (fuse_branches,
                                       local_attention_submodule,
                                       nonlocal_attention)
        from colanet.patches import PatchGeometry

        cfg = micro_config()
        x = Tensor(np.random.default_rng(6).normal(size=(1, 8, 6, 6)))

        w1 = build_weights(cfg, seed=6)
        out, _ = cab_forward(x, cab_params(w1, 0, cfg), cfg, mode="train")

        w2 = build_weights(cfg, seed=6)
        blocks, nl, local, fuse = cab_params(w2, 0, cfg)
        feat = fem_basic(x, blocks, mode="train", eps=cfg.bn_eps,
                         momentum=cfg.bn_momentum)
        g = PatchGeometry(8, 6, 6, cfg.patch_h, cfg.patch_w, cfg.patch_stride)
        f_nl, _ = nonlocal_attention(feat, nl, g)
        f_l = local_attention_submodule(feat, local)
        want, _ = fuse_branches(f_nl, f_l, fuse)
        assert np.array_equal(out.data, want.data)


class TestColaForward:
    def test_zero_tail_residual_identity(self):
        cfg = micro_config()
        w = build_weights(cfg, seed=7)
        w["tail.weight"].value.data[:] = 0
        w["tail.bias"].value.data[:] = 0
        x = np.random.default_rng(7).normal(size=(2, 1, 9, 9)).astype(np.float32)
        out, _ = cola_forward(x, w, cfg, mode="infer")
        assert np.array_equal(out.data, x)

    def test_shape_preserved_for_awkward_sizes(self):
        cfg = micro_config(patch_stride=2)
        w = build_weights(cfg, seed=8)
        for h, wd in [(7, 9), (12, 5), (3, 3)]:
            x = np.zeros((1, 1, h, wd), dtype=np.float32)
            out, _ = cola_forward(x, w, cfg)
            assert out.shape == (1, 1, h, wd)

    def test_input_smaller_than_patch_rejected(self):
        cfg = micro_config()
        w = build_weights(cfg, seed=9)
        with pytest.raises(ShapeError):
            cola_forward(np.zeros((1, 1, 2, 2), np.float32), w, cfg)

    def test_deterministic_repeat(self):
        cfg = micro_config()
        w = build_weights(cfg, seed=10)
        x = np.random.default_rng(10).normal(size=(1, 1, 8, 8)).astype(np.float32)
        a, _ = cola_forward(x, w, cfg, mode="infer")
        b, _ = cola_forward(x, w, cfg, mode="infer")
        assert np.array_equal(a.data, b.data)

    def test_traces_one_per_block(self):
        cfg = micro_config(num_cab=3)
        w = build_weights(cfg, seed=11)
        _, traces = cola_forward(np.zeros((1, 1, 6, 6), np.float32), w, cfg)
        assert [t.cab_index for t in traces] == [0, 1, 2]

    def test_grad_check_one_cab_graph(self):
        """Finite differences through a full 1-block model at micro shapes."""
        from helpers import clear_relu_kinks

        cfg = micro_config()
        w = build_weights(cfg, seed=12)
        rng = np.random.default_rng(12)
        x = rng.normal(size=(1, 1, 12, 12)).astype(np.float32) + 0.5
        target = rng.normal(size=(1, 1, 12, 12)).astype(np.float32)
        clear_relu_kinks(w, cfg, x, margin=0.1)
        params = w.param_list()

        def f():
            out, _ = cola_forward(x, w, cfg, mode="train")
            return l2_loss(out, target)

        rep = grad_check(f, params, eps=1e-3, tol=2e-3, max_coords=2)
        assert rep.passed, {k: v for k, v in rep.per_param.items()
                            if v > 2e-3}


class TestLoss:
    def test_identical_zero(self):
        x = np.random.default_rng(13).normal(size=(2, 1, 4, 4))
        assert l2_loss(Tensor(x), Tensor(x.copy())).item() == 0.0

    def test_constant_difference(self):
        a = np.zeros((2, 3, 4, 4), np.float32)
        b = np.full_like(a, 0.5)
        assert l2_loss(Tensor(a), Tensor(b)).item() == pytest.approx(0.25)

    def test_symmetry(self):
        rng = np.random.default_rng(14)
        a = rng.normal(size=(1, 2, 3, 3)).astype(np.float32)
        b = rng.normal(size=(1, 2, 3, 3)).astype(np.float32)
        assert (l2_loss(Tensor(a), Tensor(b)).item()
                == l2_loss(Tensor(b), Tensor(a)).item())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            l2_loss(Tensor(np.zeros((1, 1, 2, 2))),
                    Tensor(np.zeros((1, 1, 2, 3))))


class TestCensus:
    def test_single_conv_arithmetic(self):
        cfg = ModelConfig()
        w = build_weights(cfg, seed=0)
        conv_w = w["cab0.fem.b0.conv.weight"].value.data.size
        conv_b = w["cab0.fem.b0.conv.bias"].value.data.size
        assert conv_w + conv_b == 64 * 64 * 9 + 64 == 36928

    def test_totals_are_exact_sums(self):
        cfg = micro_config()
        w = build_weights(cfg, seed=0)
        total, breakdown = param_census(w)
        assert total == sum(breakdown.values())
        assert total == sum(p.value.data.size for p in w.param_list())

    def test_affine_growth_in_blocks(self):
        totals = {}
        for n in (1, 2, 4):
            w = build_weights(ModelConfig(num_cab=n), seed=0)
            totals[n], _ = param_census(w)
        per_cab = totals[2] - totals[1]
        assert totals[4] - totals[1] == 3 * per_cab

    def test_default_totals_near_reference_sizes(self):
        total_b4, _ = param_census(build_weights(ModelConfig(), seed=0))
        total_e4, _ = param_census(
            build_weights(ModelConfig(variant="enhanced"), seed=0))
        assert abs(total_b4 / 1.10e6 - 1.0) <= 0.15
        assert abs(total_e4 / 1.88e6 - 1.0) <= 0.15

    def test_buffers_not_counted(self):
        cfg = micro_config(fem_depth=1)
        w = build_weights(cfg, seed=0)
        total, _ = param_census(w)
        assert "cab0.fem.b0.bn.running_mean" in w.buffers
        assert total == sum(p.value.data.size for p in w.param_list())


class TestConfigText:
    def test_round_trip(self):
        cfg = ModelConfig(variant="enhanced", num_cab=2, channels=32,
                          patch_stride=3, attn_scale_by_dim=True)
        assert model_config_from_text(model_config_to_text(cfg)) == cfg

    def test_unknown_key_rejected(self):
        from colanet.errors import FormatError
        with pytest.raises(FormatError):
            model_config_from_text("model.bogus=1\n")


class TestTiledInference:
    def test_matches_single_pass_when_image_fits(self):
        cfg = micro_config()
        w = build_weights(cfg, seed=15)
        x = np.random.default_rng(15).normal(size=(1, 12, 12)).astype(np.float32)
        direct, _ = cola_forward(x[None], w, cfg)
        tiled, _ = run_tiled(x, w, cfg, tile=16, overlap=4)
        assert np.allclose(tiled, direct.data[0], atol=1e-6)

    def test_covers_large_images(self):
        cfg = micro_config()
        w = build_weights(cfg, seed=16)
        x = np.random.default_rng(16).normal(size=(20, 26)).astype(np.float32)
        out, tiles = run_tiled(x, w, cfg, tile=12, overlap=4, want_traces=True)
        assert out.shape == (20, 26)
        assert np.all(np.isfinite(out))
        assert len(tiles) == 6  # 2 tile rows x 3 tile cols
