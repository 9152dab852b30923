"""Tests for din_blocks.py: config, topology, blocks, fusion, forward pass and accounting."""
from dataclasses import replace

import numpy as np
import pytest

from din_blocks import (
    DIHEDRAL_GROUP,
    PUBLISHED_PARAMS,
    SOURCE,
    InterleaveTopology,
    ModelConfig,
    ablation_grid,
    asyca_forward,
    build_din_params,
    count_parameters,
    dihedral,
    dihedral_inverse,
    din_forward,
    fuse_node,
    rdb_forward,
    self_ensemble_infer,
    wrdb_forward,
)
from tensor_engine import Tape, Tensor, finite_diff_check_many, mean_all, mul, sub
from training import l1_loss
from utils import ConfigError

TINY = ModelConfig(branches=2, wrdbs_per_branch=2, rdbs_per_wrdb=1, convs_per_rdb=2, growth=8, base_channels=16, attn_reduction=4)


def conv_count(in_c, out_c, k):
    return out_c * in_c * k * k + out_c


def closed_form_count(cfg: ModelConfig) -> int:
    """Parameter total written out layer by layer."""
    c, g, r = cfg.base_channels, cfg.growth, cfg.scale
    rdb = sum(conv_count(c + i * g, g, 3) for i in range(cfg.convs_per_rdb))
    rdb += conv_count(c + cfg.convs_per_rdb * g, c, 1)
    links = c * (cfg.rdbs_per_wrdb * (cfg.rdbs_per_wrdb + 1) // 2 + 1) if cfg.use_dwc else 0
    wrdb = conv_count(c, c, 3) + cfg.rdbs_per_wrdb * rdb + links
    nodes = (cfg.branches - 1) * cfg.wrdbs_per_branch
    if cfg.fusion == "asyca":
        hidden = c // cfg.attn_reduction
        fusion = conv_count(2 * c, c, 1) + conv_count(c, hidden, 1) + conv_count(hidden, 2 * c, 1)
    elif cfg.fusion == "concat":
        fusion = conv_count(2 * c, c, 1)
    else:
        fusion = 0
    gff = conv_count(cfg.branches * c, c, 1) + conv_count(c, c, 3) if cfg.use_gff else 0
    head = conv_count(c, 3 * r * r, 3) + conv_count(3, 3, 3)
    return conv_count(3, c, 3) + cfg.branches * cfg.wrdbs_per_branch * wrdb + nodes * fusion + gff + head


def lr_input(seed=0, size=(1, 3, 5, 4)):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, size=size))


class TestModelConfig:
    def test_defaults_are_published(self):
        cfg = ModelConfig()
        assert (cfg.branches, cfg.wrdbs_per_branch, cfg.rdbs_per_wrdb, cfg.convs_per_rdb) == (4, 5, 3, 6)
        assert (cfg.growth, cfg.base_channels, cfg.fusion) == (32, 64, "asyca")

    @pytest.mark.parametrize("field,value", [
        ("branches", 0), ("growth", -1), ("base_channels", 2.5), ("convs_per_rdb", True), ("scale", 5),
        ("fusion_mode", "max"), ("use_gff", "yes"),
    ])
    def test_invalid_fields(self, field, value):
        with pytest.raises(ConfigError, match=field):
            ModelConfig(**{field: value})

    def test_attn_reduction_must_divide(self):
        with pytest.raises(ConfigError, match="attn_reduction"):
            ModelConfig(base_channels=16, attn_reduction=5)

    def test_non_attention_mode_disables_asyca(self):
        cfg = ModelConfig(fusion_mode="sum", use_asyca=True)
        assert cfg.use_asyca is False and cfg.fusion == "sum"

    def test_asyca_switch_off_falls_back_to_sum(self):
        assert ModelConfig(use_asyca=False).fusion == "sum"

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ConfigError, match="unknown key"):
            ModelConfig.from_dict({"branches": 2, "width": 3})

    def test_digest(self):
        assert TINY.digest() == replace(TINY).digest()
        assert TINY.digest() != replace(TINY, growth=4).digest()
        assert len(TINY.digest()) == 32


class TestTopology:
    @pytest.mark.parametrize("m,d", [(2, 2), (3, 3), (4, 5)])
    def test_wiring(self, m, d):
        topo = InterleaveTopology(m, d)
        assert len(topo.evaluation_order()) == m * d
        assert len(topo.fusion_nodes()) == (m - 1) * d
        assert topo.is_topologically_ordered()
        assert topo.node_inputs(1, 1) == (SOURCE,)
        for depth in range(2, d + 1):
            assert topo.node_inputs(1, depth) == ((1, depth - 1),)
        for branch in range(2, m + 1):
            assert topo.node_inputs(branch, 1) == ((branch - 1, d), (branch - 1, 1))
            for depth in range(2, d + 1):
                assert topo.node_inputs(branch, depth) == ((branch - 1, depth), (branch, depth - 1))

    def test_single_branch_has_no_fusion(self):
        assert InterleaveTopology(1, 4).fusion_nodes() == []

    def test_outside_grid(self):
        with pytest.raises(ValueError):
            InterleaveTopology(2, 2).node_inputs(3, 1)

    def test_forward_trace_follows_topology(self):
        params = build_din_params(TINY, seed=0, dtype=np.float64)
        trace = []
        din_forward(lr_input(), params, trace)
        topo = TINY.topology
        assert [node for node, _ in trace] == topo.evaluation_order()
        for node, sources in trace:
            assert sources == topo.node_inputs(*node)


class TestForward:
    @pytest.mark.parametrize("scale", [2, 3, 4])
    def test_output_shape(self, scale):
        params = build_din_params(replace(TINY, scale=scale), dtype=np.float64)
        out = din_forward(lr_input(size=(2, 3, 5, 4)), params)
        assert out.shape == (2, 3, 5 * scale, 4 * scale)

    @pytest.mark.parametrize("mode", ["sum", "mean", "concat"])
    def test_fusion_modes_run(self, mode):
        params = build_din_params(replace(TINY, fusion_mode=mode), dtype=np.float64)
        assert din_forward(lr_input(), params).shape == (1, 3, 10, 8)

    def test_without_gff(self):
        params = build_din_params(replace(TINY, use_gff=False), dtype=np.float64)
        assert params.gff_reduce is None and "gff.reduce.weight" not in params.store
        assert din_forward(lr_input(), params).shape == (1, 3, 10, 8)

    def test_wrong_input_channels(self):
        params = build_din_params(TINY, dtype=np.float64)
        with pytest.raises(ValueError, match="channels"):
            din_forward(Tensor(np.zeros((1, 4, 4, 4))), params)

    def test_float32_stays_float32(self):
        params = build_din_params(TINY, dtype=np.float32)
        out = din_forward(Tensor(lr_input().data.astype(np.float32)), params)
        assert out.dtype == np.float32

    def test_unit_dwc_equals_plain_connections(self):
        x = lr_input(3)
        weighted = din_forward(x, build_din_params(TINY, seed=4, dtype=np.float64))
        plain = din_forward(x, build_din_params(replace(TINY, use_dwc=False), seed=4, dtype=np.float64))
        np.testing.assert_array_equal(weighted.data, plain.data)

    def test_dwc_weights_change_output(self):
        cfg = replace(TINY, rdbs_per_wrdb=2)
        params = build_din_params(cfg, seed=1, dtype=np.float64)
        wrdb = params.branches[0][0]
        assert sorted(wrdb.links) == [(1, 0), (2, 0), (2, 1), (3, 0)]
        x = Tensor(np.random.default_rng(0).normal(size=(1, 16, 3, 3)))
        before = wrdb_forward(x, wrdb).data
        wrdb.links[(2, 1)].weight.data[...] = 2.0
        assert not np.allclose(before, wrdb_forward(x, wrdb).data)


class TestRDB:
    def test_zero_fusion_is_identity(self):
        rdb = build_din_params(TINY, seed=2, dtype=np.float64).branches[0][0].rdbs[0]
        rdb.fusion.weight.data[...] = 0.0
        x = Tensor(np.random.default_rng(5).normal(size=(1, 16, 3, 3)))
        np.testing.assert_array_equal(rdb_forward(x, rdb).data, x.data)

    def test_dense_growth(self):
        rdb = build_din_params(TINY, dtype=np.float64).branches[0][0].rdbs[0]
        assert [layer.in_channels for layer in rdb.layers] == [16, 24]
        assert rdb.fusion.in_channels == 16 + 2 * 8
        assert rdb_forward(Tensor(np.zeros((2, 16, 4, 5))), rdb).shape == (2, 16, 4, 5)

    def test_channel_mismatch(self):
        rdb = build_din_params(TINY, dtype=np.float64).branches[0][0].rdbs[0]
        with pytest.raises(ValueError, match="channels"):
            rdb_forward(Tensor(np.zeros((1, 8, 4, 4))), rdb)

    def test_input_gradient_through_dense_block(self):
        rdb = build_din_params(TINY, seed=1, dtype=np.float64).branches[0][0].rdbs[0]
        x = Tensor(np.random.default_rng(6).normal(size=(1, 16, 3, 3)), requires_grad=True)
        weights = Tensor(np.random.default_rng(7).normal(size=(1, 16, 3, 3)))
        report = finite_diff_check_many(lambda: mean_all(mul(rdb_forward(x, rdb), weights)), {"x": x}, 1e-6, 1e-4)
        assert report.passed, report.worst


class TestAsyCA:
    @pytest.fixture
    def attention(self):
        params = build_din_params(TINY, seed=2, dtype=np.float64)
        return params.fusions[(2, 1)].attention

    def test_convex_per_channel(self, attention):
        rng = np.random.default_rng(7)
        for _ in range(1000 // 50):
            x1 = Tensor(rng.normal(size=(50, 16, 2, 2)))
            x2 = Tensor(rng.normal(size=(50, 16, 2, 2)))
            out = asyca_forward(x1, x2, attention).data
            low, high = np.minimum(x1.data, x2.data), np.maximum(x1.data, x2.data)
            assert np.all(out >= low - 1e-12) and np.all(out <= high + 1e-12)

    def test_zero_excitation_is_mean(self):
        params = build_din_params(replace(TINY, attn_zero_init=True), seed=2, dtype=np.float64)
        attention = params.fusions[(2, 1)].attention
        rng = np.random.default_rng(8)
        x1, x2 = Tensor(rng.normal(size=(2, 16, 3, 3))), Tensor(rng.normal(size=(2, 16, 3, 3)))
        out = asyca_forward(x1, x2, attention).data
        np.testing.assert_array_equal(out, fuse_node(x1, x2, "mean").data)
        np.testing.assert_array_equal(out, (x1.data + x2.data) / 2)

    def test_zero_init_model_matches_mean_model(self):
        x = lr_input(5)
        asyca = din_forward(x, build_din_params(replace(TINY, attn_zero_init=True), seed=6, dtype=np.float64))
        mean = din_forward(x, build_din_params(replace(TINY, fusion_mode="mean"), seed=6, dtype=np.float64))
        np.testing.assert_array_equal(asyca.data, mean.data)

    def test_operand_shape_mismatch(self, attention):
        with pytest.raises(ValueError, match="shape"):
            asyca_forward(Tensor(np.zeros((1, 16, 2, 2))), Tensor(np.zeros((1, 16, 3, 2))), attention)


class TestSelfEnsemble:
    def test_group_has_eight_distinct_transforms(self):
        x = np.arange(12.0).reshape(1, 1, 3, 4)
        images = {dihedral(x, k, flip).tobytes() + bytes(dihedral(x, k, flip).shape) for k, flip in DIHEDRAL_GROUP}
        assert len(DIHEDRAL_GROUP) == 8 and len(images) == 8

    def test_inverse(self):
        x = np.random.default_rng(0).normal(size=(1, 3, 3, 5))
        for k, flip in DIHEDRAL_GROUP:
            np.testing.assert_array_equal(dihedral_inverse(dihedral(x, k, flip), k, flip), x)

    def test_ensemble_shape_and_symmetry(self):
        params = build_din_params(TINY, seed=3, dtype=np.float64)
        x = lr_input(1, size=(1, 3, 4, 4))
        out = self_ensemble_infer(x, params)
        assert out.shape == (1, 3, 8, 8)
        # Averaging over the group makes the result equivariant to a flip of the input.
        flipped = self_ensemble_infer(Tensor(x.data[..., ::-1].copy()), params)
        np.testing.assert_allclose(flipped.data, out.data[..., ::-1], atol=1e-10)


class TestGradients:
    def test_every_parameter_receives_gradient(self):
        params = build_din_params(TINY, seed=0, dtype=np.float64)
        x = lr_input()
        target = Tensor(np.random.default_rng(1).uniform(0, 1, size=(1, 3, 10, 8)))
        with Tape() as tape:
            loss = l1_loss(din_forward(x, params), target)
            tape.backward(loss)
        for name, tensor in params.store.items():
            assert tensor.grad is not None, name
            assert np.all(np.isfinite(tensor.grad)), name
        assert np.abs(params.sfe.weight.grad).sum() > 0
        assert np.abs(params.fusions[(2, 2)].attention.excite.weight.grad).sum() > 0

    def test_no_tensor_without_gradient_across_trials(self):
        touched = {}
        for trial in range(3):
            params = build_din_params(TINY, seed=trial, dtype=np.float64)
            x = lr_input(trial, size=(2, 3, 5, 4))
            target = Tensor(np.random.default_rng(10 + trial).uniform(0, 1, size=(2, 3, 10, 8)))
            with Tape() as tape:
                tape.backward(l1_loss(din_forward(x, params), target))
            for name, tensor in params.store.items():
                touched[name] = touched.get(name, False) or bool(np.any(tensor.grad))
        assert [name for name, hit in touched.items() if not hit] == []

    def test_initial_loss_is_order_one(self):
        params = build_din_params(TINY, seed=0, dtype=np.float64)
        target = Tensor(np.random.default_rng(4).uniform(0, 1, size=(2, 3, 10, 8)))
        loss = l1_loss(din_forward(lr_input(size=(2, 3, 5, 4)), params), target).item()
        assert loss < 2.0

    def test_sampled_finite_difference(self):
        params = build_din_params(TINY, seed=9, dtype=np.float64)
        rng = np.random.default_rng(9)
        for values in params.store.arrays().values():
            values += rng.normal(0.0, 1e-2, size=values.shape)
        x = lr_input(2, size=(1, 3, 3, 3))
        target = Tensor(din_forward(x, params).data + 0.3)
        report = finite_diff_check_many(
            lambda: mean_all(sub(din_forward(x, params), target)),
            dict(params.store.items()), sample=2, seed=9,
        )
        assert report.passed, report.worst


class TestParameterCount:
    def test_tiny_matches_closed_form(self):
        counted = count_parameters(TINY)
        assert counted.total == closed_form_count(TINY) == 29_736
        assert sum(counted.breakdown.values()) == counted.total
        assert list(counted.breakdown) == ["sfe", "branch1", "branch2", "fusion", "gff", "head"]

    @pytest.mark.parametrize("changes", [
        {"fusion_mode": "concat"}, {"fusion_mode": "sum"}, {"use_dwc": False}, {"use_gff": False},
        {"scale": 3}, {"rdbs_per_wrdb": 3},
    ])
    def test_variants_match_closed_form(self, changes):
        cfg = replace(TINY, **changes)
        assert count_parameters(cfg).total == closed_form_count(cfg)

    def test_published_configuration(self):
        counted = count_parameters(ModelConfig())
        assert counted.total == closed_form_count(ModelConfig()) == 16_875_356
        assert counted.published_delta == pytest.approx((16_875_356 - PUBLISHED_PARAMS) / PUBLISHED_PARAMS)
        assert counted.breakdown["fusion"] == 15 * 9_156

    def test_uninitialized_weights_are_zero(self):
        params = build_din_params(TINY, initialize=False)
        for name, values in params.store.arrays().items():
            expected = 1.0 if ".dwc" in name else 0.0
            assert np.all(values == expected), name


class TestAblationGrid:
    def test_eight_unique_runs(self):
        grid = ablation_grid(TINY)
        labels = [label for label, _ in grid]
        assert len(set(labels)) == 8
        assert "asyca0-dwc0-gff0" in labels and "asyca1-dwc1-gff1" in labels

    def test_switches_applied(self):
        for label, cfg in ablation_grid(replace(TINY, fusion_mode="sum")):
            assert cfg.fusion == ("asyca" if label.startswith("asyca1") else "sum")
            assert cfg.use_dwc == ("dwc1" in label)
            assert cfg.use_gff == ("gff1" in label)
            assert cfg.growth == TINY.growth
