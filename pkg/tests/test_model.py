import math

import numpy as np
import pytest

from stgcn_svs import autodiff as ad
from stgcn_svs import model as m
from stgcn_svs.errors import DimensionMismatch, ShapeMismatch, StgcnError, TopologyMismatch
from stgcn_svs.graph import (
    Topology,
    build_cheb_bank,
    build_laplacian,
    khop_pattern,
    make_random_connected,
    make_ring,
)


def bank_of(topology, K):
    return build_cheb_bank(build_laplacian(topology), K)


def random_sample(rng, n, N, label=0):
    return m.SvsSample(
        V=rng.normal(1.0, 0.1, size=(N, n)),
        P=rng.normal(0.0, 0.5, size=(N, n)),
        Q=rng.normal(0.0, 0.5, size=(N, n)),
        label=label,
    )


class TestModelConfig:
    def test_validation(self):
        with pytest.raises(StgcnError):
            m.ModelConfig(num_buses=4, window_len=4, kernel_t=2)
        with pytest.raises(StgcnError):
            m.ModelConfig(num_buses=4, window_len=1)
        with pytest.raises(StgcnError):
            m.ModelConfig(num_buses=4, window_len=4, dropout_rate=1.0)
        with pytest.raises(StgcnError):
            m.ModelConfig(num_buses=4, window_len=4, cheb_order=0)

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(num_buses=5, window_len=10, cheb_order=2, num_blocks=2, hidden=2),
            dict(num_buses=10, window_len=25, cheb_order=2, num_blocks=5, hidden=8),
            dict(num_buses=3, window_len=4, cheb_order=3, num_blocks=1, hidden=1, kernel_t=1),
        ],
    )
    def test_golden_parameter_count(self, kwargs):
        cfg = m.ModelConfig(**kwargs)
        params = m.ModelParams.init(cfg, np.random.default_rng(0))
        assert params.count() == m.ModelParams.expected_count(cfg)

    def test_channel_towers_share_nothing(self):
        cfg = m.ModelConfig(num_buses=4, window_len=4, num_blocks=2, hidden=2)
        params = m.ModelParams.init(cfg, np.random.default_rng(0))
        ids = [id(p) for p in params]
        assert len(ids) == len(set(ids))
        for j in (1, 2):
            names = {params.block(j, ch)[0].name for ch in m.CHANNELS}
            assert len(names) == 3


class TestGraphConv:
    def test_identity_embedding_half_gain(self):
        # K=0-style check via a K=1 bank with zero weight on T_1:
        # value half picks T_0 = I, gate half zero, so out = x * sigmoid(0)
        topo = Topology.from_edges(2, [(0, 1, 1.0)])
        bank = bank_of(topo, 1)
        theta = np.zeros((2, 1, 2))
        theta[0, 0, 0] = 1.0  # T_0 into value half, gate stays zero
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 2, 1))
        out = m.graph_conv(x, bank, theta)
        np.testing.assert_allclose(out.data, 0.5 * x, atol=1e-12)

    def test_pure_t1_term_hand_value(self):
        # L_tilde = [[0,-1],[-1,0]]; x = [1, 0] -> L_tilde x = [0, -1]
        topo = Topology.from_edges(2, [(0, 1, 1.0)])
        bank = bank_of(topo, 1)
        theta = np.zeros((2, 1, 2))
        theta[1, 0, 0] = 1.0  # value half = pure T_1 response
        x = np.array([[[1.0], [0.0]]])  # (N=1... N>=1 fine for the op) shape (1,2,1)
        pre = m.graph_conv(x, bank, theta, pre_activation=True)
        np.testing.assert_allclose(pre.data[0, :, 0], [0.0, -1.0], atol=1e-9)

    def test_impulse_locality_two_hops(self):
        topo = make_random_connected(12, extra_edges=3, seed=4)
        bank = bank_of(topo, 2)
        rng = np.random.default_rng(1)
        theta = rng.normal(size=(3, 1, 4))
        x = np.zeros((5, 12, 1))
        x[:, 7, 0] = 1.0  # impulse at bus 7
        pre = m.graph_conv(x, bank, theta, pre_activation=True)
        reach = khop_pattern(topo, 2)[7]
        outside = pre.data[:, ~reach, :]
        np.testing.assert_array_equal(outside, np.zeros_like(outside))

    def test_bank_mismatch_errors(self):
        topo = Topology.from_edges(2, [(0, 1, 1.0)])
        bank = bank_of(topo, 1)
        with pytest.raises(ShapeMismatch):
            m.graph_conv(np.zeros((2, 2, 1)), bank, np.zeros((3, 1, 2)))
        with pytest.raises(TopologyMismatch):
            m.graph_conv(np.zeros((2, 5, 1)), bank, np.zeros((2, 1, 2)))


class TestTemporalConv:
    def test_kt1_identity_half_gain(self):
        kernel = np.zeros((1, 1, 2))
        kernel[0, 0, 0] = 1.0
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 3, 1))
        out = m.temporal_conv(x, kernel)
        np.testing.assert_allclose(out.data, 0.5 * x, atol=1e-12)

    def test_constant_input_stays_constant_kt1(self):
        kernel = np.random.default_rng(3).normal(size=(1, 2, 4))
        x = np.tile(np.array([0.3, -1.2]), (5, 3, 1))
        out = m.temporal_conv(x, kernel)
        for t in range(1, 5):
            np.testing.assert_allclose(out.data[t], out.data[0])

    def test_difference_kernel_hand_value(self):
        sig = np.array([0.5, 2.0, -1.0, 3.0])
        kernel = np.zeros((3, 1, 2))
        kernel[:, 0, 0] = [1.0, 0.0, -1.0]  # value half; gate half zero
        x = sig.reshape(4, 1, 1)
        out = m.temporal_conv(x, kernel)
        padded = np.concatenate([[0.0], sig, [0.0]])
        expect = np.array([padded[t] - padded[t + 2] for t in range(4)])
        np.testing.assert_allclose(out.data.ravel(), 0.5 * expect, atol=1e-12)


class TestStBlockAndFusion:
    def _setup(self, n=4, N=5, H=2, K=2, seed=0):
        topo = make_ring(n)
        bank = bank_of(topo, K)
        rng = np.random.default_rng(seed)
        block = {
            ch: (
                rng.normal(size=(K + 1, 1, 2 * H)) * 0.3,
                rng.normal(size=(3, H, 2 * H)) * 0.3,
                np.ones(H),
                np.zeros(H),
            )
            for ch in m.CHANNELS
        }
        inputs = {ch: rng.normal(size=(N, n, 1)) for ch in m.CHANNELS}
        return topo, bank, block, inputs

    def test_inference_deterministic(self):
        _, bank, block, inputs = self._setup()
        a = m.st_block(inputs, bank, block, dropout_rate=0.0, training=False)
        b = m.st_block(inputs, bank, block, dropout_rate=0.0, training=False)
        for ch in m.CHANNELS:
            np.testing.assert_array_equal(a[ch].data, b[ch].data)

    def test_training_mask_reproducible_by_seed(self):
        _, bank, block, inputs = self._setup()
        a = m.st_block(inputs, bank, block, 0.5, True, np.random.default_rng(11))
        b = m.st_block(inputs, bank, block, 0.5, True, np.random.default_rng(11))
        c = m.st_block(inputs, bank, block, 0.5, True, np.random.default_rng(12))
        for ch in m.CHANNELS:
            np.testing.assert_array_equal(a[ch].data, b[ch].data)
        assert any(not np.array_equal(a[ch].data, c[ch].data) for ch in m.CHANNELS)

    def test_zero_input_gives_zeros(self):
        _, bank, block, inputs = self._setup()
        zeros = {ch: np.zeros_like(inputs[ch]) for ch in m.CHANNELS}
        out = m.st_block(zeros, bank, block, dropout_rate=0.0, training=False)
        for ch in m.CHANNELS:
            np.testing.assert_allclose(out[ch].data, 0.0, atol=1e-12)

    def test_fusion_identity_and_zero(self):
        rng = np.random.default_rng(5)
        blk1 = {ch: rng.normal(size=(4, 3, 2)) for ch in m.CHANNELS}
        blk0 = {ch: np.zeros((4, 3, 2)) for ch in m.CHANNELS}
        fused_single = m.fuse_blocks([blk1])
        fused_zero = m.fuse_blocks([blk1, blk0])
        for ch in m.CHANNELS:
            np.testing.assert_array_equal(fused_single[ch].data, blk1[ch])
            np.testing.assert_array_equal(fused_zero[ch].data, blk1[ch])

    def test_fusion_matches_direct_sum(self):
        rng = np.random.default_rng(6)
        blocks = [{ch: rng.normal(size=(4, 3, 2)) for ch in m.CHANNELS} for _ in range(3)]
        fused = m.fuse_blocks(blocks)
        for ch in m.CHANNELS:
            expect = blocks[0][ch] + blocks[1][ch] + blocks[2][ch]
            np.testing.assert_allclose(fused[ch].data, expect, atol=1e-12)


class TestNodeLayer:
    def test_zero_weights_give_zero_scores(self):
        rng = np.random.default_rng(7)
        fused = [rng.normal(size=(5, 4, 2)) for _ in range(3)]
        out = m.node_layer(*fused, psi=np.zeros(3))
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_two_bus_hand_value(self):
        # s = (a, -a): after layer norm across buses the scores are
        # +-a/sqrt(a^2 + eps), so Snode ~ (1, 1)
        a = 1.0
        v = np.zeros((3, 2, 2))
        v[:, 0, :] = a
        v[:, 1, :] = -a
        zeros = np.zeros_like(v)
        out = m.node_layer(v, zeros, zeros, psi=np.array([0.0, 0.0, 1.0]))
        expect = a / math.sqrt(a * a + m.LAYER_NORM_EPS)
        np.testing.assert_allclose(out.data, [expect, expect], atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        fused = [rng.normal(size=(4, 6, 3)) for _ in range(3)]
        out = m.node_layer(*fused, psi=rng.normal(size=3))
        assert np.all(out.data >= 0)


class TestSystemLayer:
    def test_uniform_assignment(self):
        res = m.system_layer(np.array([0.4, 1.2, 0.1]), np.zeros((2, 3)))
        np.testing.assert_allclose(res.probs, [0.5, 0.5], atol=1e-12)
        np.testing.assert_array_equal(res.influence, np.zeros(3))
        assert res.predicted == "stable"  # tie goes to stable

    def test_zero_scores(self):
        rng = np.random.default_rng(8)
        res = m.system_layer(np.zeros(4), rng.normal(size=(2, 4)))
        np.testing.assert_allclose(res.probs, [0.5, 0.5], atol=1e-12)

    def test_single_bus_scalar_oracle(self):
        # hand arithmetic with math.exp, independent of the model code
        res = m.system_layer(np.array([2.0]), np.array([[1.0], [-1.0]]))
        a0 = math.exp(1) / (math.exp(1) + math.exp(-1))
        a1 = math.exp(-1) / (math.exp(1) + math.exp(-1))
        l0, l1 = 2 * a0, 2 * a1
        p0 = math.exp(l0) / (math.exp(l0) + math.exp(l1))
        np.testing.assert_allclose(res.probs, [p0, 1 - p0], atol=1e-12)
        assert res.probs[0] == pytest.approx(0.8210, abs=5e-5)
        np.testing.assert_allclose(res.influence, [a0 - a1], atol=1e-12)

    def test_influence_bounded_by_one(self):
        rng = np.random.default_rng(9)
        s = m.influence_weights(rng.normal(size=(2, 7)) * 5)
        assert np.all(np.abs(s) <= 1.0)


class TestForward:
    def _tiny(self, n=5, N=6, seed=0, dropout=0.0, blocks=2):
        topo = make_random_connected(n, extra_edges=2, seed=seed)
        cfg = m.ModelConfig(
            num_buses=n, window_len=N, cheb_order=2, num_blocks=blocks,
            hidden=2, kernel_t=3, dropout_rate=dropout,
        )
        params = m.ModelParams.init(cfg, np.random.default_rng(seed + 1))
        return topo, cfg, params

    def test_untrained_loss_is_near_ln2(self):
        topo, cfg, params = self._tiny()
        rng = np.random.default_rng(3)
        losses = []
        bank = m.bank_for(topo, cfg.cheb_order)
        for i in range(100):
            sample = random_sample(rng, 5, 6, label=int(i % 2))
            _, loss = m.forward(sample, topo, params, bank=bank)
            losses.append(loss.item())
        assert abs(np.mean(losses) - math.log(2)) < 0.2

    def test_inference_repeatable(self):
        topo, cfg, params = self._tiny(dropout=0.3)
        sample = random_sample(np.random.default_rng(4), 5, 6)
        bank = m.bank_for(topo, cfg.cheb_order)
        r1, _ = m.forward(sample, topo, params, bank=bank)
        r2, _ = m.forward(sample, topo, params, bank=bank)
        np.testing.assert_array_equal(r1.probs, r2.probs)

    def test_probs_valid_distribution(self):
        topo, cfg, params = self._tiny(seed=5)
        rng = np.random.default_rng(6)
        bank = m.bank_for(topo, cfg.cheb_order)
        for _ in range(5):
            res, _ = m.forward(random_sample(rng, 5, 6), topo, params, bank=bank)
            assert np.all(res.probs > 0)
            assert abs(res.probs.sum() - 1.0) < 1e-9

    def test_dimension_mismatch(self):
        topo, cfg, params = self._tiny()
        sample = random_sample(np.random.default_rng(0), 4, 6)
        with pytest.raises(TopologyMismatch):
            m.forward(sample, make_ring(4), params)
        with pytest.raises(DimensionMismatch):
            m.forward(sample, topo, params)

    def test_full_model_gradcheck_small(self):
        topo, cfg, params = self._tiny(n=4, N=4, seed=7)
        sample = random_sample(np.random.default_rng(8), 4, 4, label=1)
        bank = m.bank_for(topo, cfg.cheb_order)

        def f():
            return m.forward(sample, topo, params, bank=bank)[1]

        report = ad.grad_check(f, list(params), h=1e-5, tol=1e-4)
        assert report.passed, report.lines()


class TestModelInvariants:
    def _make(self, n=6, N=5, seed=0, blocks=2, hidden=2, K=2):
        topo = make_random_connected(n, extra_edges=3, seed=seed)
        cfg = m.ModelConfig(
            num_buses=n, window_len=N, cheb_order=K, num_blocks=blocks,
            hidden=hidden, kernel_t=3, dropout_rate=0.0,
        )
        params = m.ModelParams.init(cfg, np.random.default_rng(seed + 50))
        return topo, cfg, params

    def test_channel_separation(self):
        topo, cfg, params = self._make()
        # zero the P and Q towers and their node-layer weights
        for j in range(1, cfg.num_blocks + 1):
            for ch in ("p", "q"):
                theta, tk, _, _ = params.block(j, ch)
                theta.data[...] = 0.0
                tk.data[...] = 0.0
        params.psi.data[...] = [0.0, 0.0, 1.0]
        rng = np.random.default_rng(1)
        sample = random_sample(rng, 6, 5)
        bank = m.bank_for(topo, cfg.cheb_order)
        base, _ = m.forward(sample, topo, params, bank=bank)
        perturbed = m.SvsSample(
            V=sample.V, P=sample.P + rng.normal(size=sample.P.shape),
            Q=sample.Q - rng.normal(size=sample.Q.shape), label=sample.label,
        )
        got, _ = m.forward(perturbed, topo, params, bank=bank)
        np.testing.assert_array_equal(base.probs, got.probs)

    def test_single_block_spatial_locality(self):
        topo, cfg, params = self._make(n=9, blocks=1, seed=3)
        rng = np.random.default_rng(2)
        sample = random_sample(rng, 9, 5)
        bank = m.bank_for(topo, cfg.cheb_order)
        out_a = m.forward_batch(
            sample.panel()[None], None, bank, params, m.NormStats.identity(),
            want_features=True,
        )
        bus = 4
        pert = sample.panel().copy()
        pert[:, :, bus] += 0.7
        out_b = m.forward_batch(
            pert[None], None, bank, params, m.NormStats.identity(), want_features=True,
        )
        reach = khop_pattern(topo, cfg.cheb_order)[bus]
        for ch in m.CHANNELS:
            delta = np.abs(out_a["fused"][ch].data - out_b["fused"][ch].data).max(axis=(1, 2, 3))
            assert np.all(delta[~reach] == 0.0)
            assert delta[bus] > 0

    def test_permutation_equivariance(self):
        topo, cfg, params = self._make(n=7, seed=9)
        rng = np.random.default_rng(10)
        sample = random_sample(rng, 7, 5)
        perm = rng.permutation(7)
        res, _ = m.forward(sample, topo, params, bank=m.bank_for(topo, cfg.cheb_order))

        w = topo.dense()[np.ix_(perm, perm)]
        topo_p = Topology.from_matrix(w)
        params.assign.data[...] = params.assign.data  # unchanged view for clarity
        assign_orig = params.assign.data.copy()
        params.assign.data[...] = assign_orig[:, perm]
        sample_p = m.SvsSample(
            V=sample.V[:, perm], P=sample.P[:, perm], Q=sample.Q[:, perm],
            label=sample.label,
        )
        res_p, _ = m.forward(sample_p, topo_p, params, bank=m.bank_for(topo_p, cfg.cheb_order))
        params.assign.data[...] = assign_orig
        np.testing.assert_allclose(res_p.probs, res.probs, atol=1e-9)
        np.testing.assert_allclose(res_p.influence, res.influence[perm], atol=1e-9)

    def test_argmax_invariant_under_node_scaling(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            snode = np.abs(rng.normal(size=5))
            sb = rng.normal(size=(2, 5))
            base = m.system_layer(snode, sb)
            scaled = m.system_layer(snode * rng.uniform(0.1, 10.0), sb)
            assert base.predicted == scaled.predicted
