import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kpgan import gradcore as gc
from kpgan.checkpoint import Checkpoint
from kpgan.condnet import Generator, GeneratorSpec, UnknownClassError
from kpgan.gradcore import Tensor
from kpgan.transfer import (
    ABLATION_VARIANTS,
    DirectBlock,
    TransferBlock,
    TransferConfig,
    export_scores,
    prior_parameter_count,
    regularization_loss,
    trainable_parameters,
    transfer_regularization,
)

from gradcheck import assert_grads_match


def _pretrained(n=3, widths=(4, 5), seed=0):
    gen = Generator(GeneratorSpec(latent_dim=3, widths=widths), n, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 100)
    for layer in gen.cbn:
        layer.gamma.data = 1.0 + 0.5 * rng.normal(size=layer.gamma.shape)
        layer.beta.data = 0.5 * rng.normal(size=layer.beta.shape)
    return gen


def _block(gen, m=2, **flags):
    return TransferBlock.initialize(gen, TransferConfig(num_old=gen.num_classes, num_new=m, **flags))


def _randomize(block, seed=1):
    rng = np.random.default_rng(seed)
    for t in block.named_tensors().values():
        t.data = rng.normal(size=t.shape)


class TestPropagate:
    def _single_layer(self, gamma_hat, s_row, r_row):
        gen = Generator(GeneratorSpec(latent_dim=2, widths=(2,)), 3, np.random.default_rng(0))
        block = _block(gen, m=1)
        block.prior.gamma_hat[0].data = np.array(gamma_hat, dtype=float)
        block.scores.s_gamma[0].data = np.array([s_row], dtype=float)
        block.residuals.r_gamma[0].data = np.array([r_row], dtype=float)
        return block

    def test_one_hot_plus_residual(self):
        block = self._single_layer([[1, 0], [0, 1], [2, 2]], [0, 0, 1], [0.1, -0.1])
        gamma, _ = block.propagate_params(0, 0)
        np.testing.assert_allclose(gamma.data, [2.1, 1.9], rtol=0, atol=1e-15)

    def test_convex_combination(self):
        block = self._single_layer([[1, 0], [0, 1], [2, 2]], [0.5, 0.5, 0], [0, 0])
        gamma, _ = block.propagate_params(0, 0)
        np.testing.assert_allclose(gamma.data, [0.5, 0.5], rtol=0, atol=1e-15)

    def test_matches_double_loop_oracle(self):
        gen = _pretrained(n=5, widths=(4,))
        block = _block(gen, m=3)
        _randomize(block)
        s, g, r = block.scores.s_gamma[0].data, block.prior.gamma_hat[0].data, block.residuals.r_gamma[0].data
        for j in range(3):
            expected = [sum(s[j, i] * g[i, c] for i in range(5)) + r[j, c] for c in range(4)]
            gamma, _ = block.propagate_params(0, j)
            np.testing.assert_allclose(gamma.data, expected, rtol=0, atol=1e-12)

    def test_residuals_disabled_contribute_nothing(self):
        gen = _pretrained()
        block = _block(gen, residuals_enabled=False)
        block.residuals.r_gamma[0].data[:] = 5.0  # ignored while disabled
        gamma, _ = block.propagate_params(0, 1)
        expected = block.scores.s_gamma[0].data[1] @ block.prior.gamma_hat[0].data
        np.testing.assert_allclose(gamma.data, expected, rtol=0, atol=1e-15)

    def test_index_errors(self):
        block = _block(_pretrained(), m=2)
        with pytest.raises(IndexError):
            block.propagate_params(0, 2)
        with pytest.raises(IndexError):
            block.propagate_params(5, 0)

    def test_initialization(self):
        gen = _pretrained(n=4)
        block = _block(gen, m=2)
        for l, layer in enumerate(gen.cbn):
            np.testing.assert_array_equal(block.prior.gamma_hat[l].data, layer.gamma.data)
            assert block.prior.gamma_hat[l].data is not layer.gamma.data
            np.testing.assert_array_equal(block.scores.s_beta[l].data, 0.25)
            np.testing.assert_array_equal(block.residuals.r_gamma[l].data, 0.0)


class TestResolveClass:
    def test_old_class_uses_original_rows(self):
        gen = _pretrained()
        block = _block(gen)
        _randomize(block)
        for c in range(3):
            for l, (g, b) in enumerate(block.resolve_class(c)):
                assert g.tobytes() == gen.cbn[l].gamma.data[c].tobytes()
                assert b.tobytes() == gen.cbn[l].beta.data[c].tobytes()

    def test_identity_transfer_rows(self):
        gen = _pretrained(n=4)
        block = _block(gen, m=2)
        for l in range(block.num_layers):
            for s in (block.scores.s_gamma[l], block.scores.s_beta[l]):
                s.data = np.zeros_like(s.data)
                s.data[1, 2] = 1.0
        for l, (g, b) in enumerate(block.resolve_class(5)):
            assert g.tobytes() == gen.cbn[l].gamma.data[2].tobytes()
            assert b.tobytes() == gen.cbn[l].beta.data[2].tobytes()

    def test_identity_transfer_generator_output(self):
        gen = _pretrained(n=4)
        block = _block(gen, m=1)
        for l in range(block.num_layers):
            for s in (block.scores.s_gamma[l], block.scores.s_beta[l]):
                s.data = np.eye(4)[[3]]
        z = np.random.default_rng(0).normal(size=(100, 3))
        before = gen.forward(z, np.full(100, 3)).data
        after = gen.forward(z, np.full(100, 4), block.resolver).data
        assert before.tobytes() == after.tobytes()

    def test_out_of_range(self):
        block = _block(_pretrained(), m=2)
        with pytest.raises(UnknownClassError):
            block.resolve_class(5)

    def test_mixed_batch_matches_per_class(self):
        gen = _pretrained()
        block = _block(gen)
        _randomize(block)
        ids = np.array([0, 4, 2, 3, 4])
        with gc.no_grad():
            for l in range(block.num_layers):
                g, b = block.resolver(l, ids)
                for row, c in enumerate(ids):
                    rg, rb = block.resolve_class(int(c))[l]
                    np.testing.assert_array_equal(g.data[row], rg)
                    np.testing.assert_array_equal(b.data[row], rb)

    def test_checkpoint_roundtrip_recomputes_new_rows(self):
        gen = _pretrained()
        block = _block(gen)
        _randomize(block, seed=3)
        ckpt = Checkpoint({"kind": "block"}, {k: t.data for k, t in block.named_tensors().items()})
        loaded = Checkpoint.from_bytes(ckpt.to_bytes())
        fresh = _block(gen)
        for k, t in fresh.named_tensors().items():
            t.data = loaded.tensors[k]
        for c in (3, 4):
            for (g1, b1), (g2, b2) in zip(block.resolve_class(c), fresh.resolve_class(c)):
                assert g1.tobytes() == g2.tobytes() and b1.tobytes() == b2.tobytes()

    def test_bake_matches_resolve(self):
        gen = _pretrained()
        block = _block(gen)
        _randomize(block)
        baked = block.bake()
        for l, (g, b) in enumerate(baked):
            np.testing.assert_array_equal(g[1], block.resolve_class(4)[l][0])


class TestRegularization:
    def test_zero_block(self):
        block = _block(_pretrained())
        for t in (*block.scores.s_gamma, *block.scores.s_beta):
            t.data = np.zeros_like(t.data)
        l_r, l_s = transfer_regularization(block)
        assert (l_r.item(), l_s.item()) == (0.0, 0.0)

    def test_direct_formula_example(self):
        gen = Generator(GeneratorSpec(latent_dim=2, widths=(2,)), 2, np.random.default_rng(0))
        block = _block(gen, m=1)
        block.residuals.r_gamma[0].data = np.array([[3.0, 4.0]])
        block.residuals.r_beta[0].data = np.zeros((1, 2))
        block.scores.s_gamma[0].data = np.array([[1.0, -2.0]])
        block.scores.s_beta[0].data = np.zeros((1, 2))
        l_r, l_s = transfer_regularization(block)
        assert l_r.item() == 25.0
        assert l_s.item() == 3.0

    def test_matches_naive_summation(self):
        block = _block(_pretrained(n=4, widths=(3, 5, 2)), m=3)
        _randomize(block, seed=7)
        l_r = l_s = 0.0
        for l in range(block.num_layers):
            for r in (block.residuals.r_gamma[l].data, block.residuals.r_beta[l].data):
                for j in range(r.shape[0]):
                    for c in range(r.shape[1]):
                        l_r += r[j, c] ** 2
            for s in (block.scores.s_gamma[l].data, block.scores.s_beta[l].data):
                for j in range(s.shape[0]):
                    for i in range(s.shape[1]):
                        l_s += abs(s[j, i])
        got_r, got_s = transfer_regularization(block)
        assert got_r.item() == pytest.approx(l_r, rel=1e-10)
        assert got_s.item() == pytest.approx(l_s, rel=1e-10)

    def test_shared_scores_counted_once(self):
        block = _block(_pretrained(n=3, widths=(4, 4, 4)), m=1, shared_scores=True)
        _, l_s = transfer_regularization(block)
        assert l_s.item() == pytest.approx(2.0)  # one gamma row plus one beta row, each summing to 1

    def test_weighting_follows_flags(self):
        block = _block(_pretrained(), lambda_r=0.5, lambda_s=0.25, use_l1=False)
        _randomize(block)
        l_r, _ = transfer_regularization(block)
        assert regularization_loss(block).item() == pytest.approx(0.5 * l_r.item())

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**16), zero_r=st.booleans(), zero_s=st.booleans())
    def test_nonnegative_and_zero_iff_params_zero(self, seed, zero_r, zero_s):
        block = _block(_pretrained(), m=2)
        _randomize(block, seed)
        for t in (*block.residuals.r_gamma, *block.residuals.r_beta):
            if zero_r:
                t.data = np.zeros_like(t.data)
        for t in (*block.scores.s_gamma, *block.scores.s_beta):
            if zero_s:
                t.data = np.zeros_like(t.data)
        l_r, l_s = transfer_regularization(block)
        assert l_r.item() >= 0 and l_s.item() >= 0
        assert (l_r.item() == 0.0) == zero_r
        assert (l_s.item() == 0.0) == zero_s


class TestTrainableParameters:
    def test_default_count(self):
        gen = Generator(GeneratorSpec(), 8, np.random.default_rng(0))
        _, count = trainable_parameters(_block(gen, m=2))
        assert count == 2 * (3 * (2 * 8) + 3 * (2 * 64)) == 864

    def test_count_linear_in_m(self):
        gen = Generator(GeneratorSpec(), 8, np.random.default_rng(0))
        counts = {m: trainable_parameters(_block(gen, m=m))[1] for m in (1, 2, 4)}
        assert counts[2] == 2 * counts[1] and counts[4] == 4 * counts[1]

    def test_residuals_excluded_when_disabled(self):
        params, count = trainable_parameters(_block(_pretrained(), residuals_enabled=False))
        assert not any(k.startswith("resid") for k in params)
        assert count == 2 * 2 * 2 * 3  # M * layers * (gamma, beta) * N

    def test_shared_scores_count_one_pair(self):
        gen = Generator(GeneratorSpec(), 8, np.random.default_rng(0))
        _, count = trainable_parameters(_block(gen, m=1, shared_scores=True, residuals_enabled=False))
        assert count == 2 * 8

    def test_frozen_prior_no_res_is_exactly_scores(self):
        block = _block(_pretrained(), **ABLATION_VARIANTS["frozen_prior_no_res"])
        params, _ = trainable_parameters(block)
        scores = {id(t) for t in (*block.scores.s_gamma, *block.scores.s_beta)}
        assert {id(t) for t in params.values()} == scores
        assert prior_parameter_count(block) == 0

    def test_tunable_prior_included(self):
        gen = _pretrained()
        block = _block(gen)
        params, _ = trainable_parameters(block)
        assert "prior.gamma.0" in params
        assert prior_parameter_count(block) == 2 * 3 * (4 + 5)


class TestExportScores:
    def _block_with_row(self, row):
        gen = Generator(GeneratorSpec(latent_dim=2, widths=(2,)), len(row), np.random.default_rng(0))
        block = _block(gen, m=1)
        block.scores.s_gamma[0].data = np.array([row], dtype=float)
        return block

    def test_sorted_by_magnitude(self):
        rows = export_scores(self._block_with_row([0.1, -0.9, 0.5]), 2)
        gamma = [(src, s) for layer, p, _, _, src, s in rows if p == "gamma"]
        assert gamma == [(1, -0.9), (2, 0.5)]

    def test_zero_scores_tie_break(self):
        rows = export_scores(self._block_with_row([0.0, 0.0, 0.0, 0.0]), 3)
        gamma = [(src, s) for _, p, _, _, src, s in rows if p == "gamma"]
        assert gamma == [(0, 0.0), (1, 0.0), (2, 0.0)]

    def test_row_layout(self):
        rows = export_scores(_block(_pretrained(), m=2), 2)
        assert len(rows) == 2 * 2 * 2 * 2  # layers * types * new classes * k
        assert rows[0] == (0, "gamma", 3, 0, 0, pytest.approx(1 / 3))

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            export_scores(_block(_pretrained()), 4)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(-3, 3), min_size=2, max_size=9), st.data())
    def test_agrees_with_full_sort(self, ints, data):
        row = [v / 2 for v in ints]  # coarse values so ties actually occur
        k = data.draw(st.integers(0, len(row)))
        rows = export_scores(self._block_with_row(row), k)
        got = [(src, s) for _, p, _, _, src, s in rows if p == "gamma"]
        expected = sorted(enumerate(row), key=lambda t: (-abs(t[1]), t[0]))[:k]
        assert got == expected


class TestSharedScores:
    def test_layers_alias_one_matrix(self):
        block = _block(_pretrained(n=3, widths=(4, 4, 4)), shared_scores=True)
        assert block.scores.s_gamma[0] is block.scores.s_gamma[2]

    def test_identical_after_training_step(self):
        gen = _pretrained(n=3, widths=(4, 4, 4))
        block = _block(gen, shared_scores=True)
        params, _ = trainable_parameters(block)
        z = np.random.default_rng(0).normal(size=(6, 3))
        loss = gc.sum_(gc.square(gen.forward(z, np.array([3, 4, 3, 4, 0, 1]), block.resolver)))
        gc.adam_step(params, gc.backward(loss + regularization_loss(block), params), gc.AdamState(), 0.1)
        mats = block.score_matrices()
        assert not np.allclose(mats[0][0], 1 / 3)
        for l in range(1, 3):
            assert mats[l][0].tobytes() == mats[0][0].tobytes()
            assert mats[l][1].tobytes() == mats[0][1].tobytes()


def _install(block, tensors):
    """Swap the named block tensors for the given ones, keeping any aliasing."""
    for group in (block.prior.gamma_hat, block.prior.beta_hat, block.scores.s_gamma,
                  block.scores.s_beta, block.residuals.r_gamma, block.residuals.r_beta):
        for i, t in enumerate(group):
            group[i] = tensors.get(t.name, t)


def _flag_combinations():
    keys = ("prior_tunable", "residuals_enabled", "shared_scores", "use_l1", "use_l2")
    return [dict(zip(keys, vals)) for vals in itertools.product([False, True], repeat=5)]


class TestGradients:
    @pytest.mark.parametrize("flags", _flag_combinations(), ids=lambda f: "-".join(k for k, v in f.items() if v) or "none")
    def test_total_loss_matches_finite_differences(self, flags):
        gen = _pretrained(n=3, widths=(4, 3))
        block = _block(gen, m=2, lambda_r=0.3, lambda_s=0.2, **flags)
        _randomize(block, seed=11)
        z = np.random.default_rng(2).normal(size=(6, 3))
        ids = np.array([3, 4, 0, 3, 4, 1])
        params, _ = trainable_parameters(block)

        def loss(p):
            _install(block, p)
            return gc.sum_(gc.tanh(gen.forward(z, ids, block.resolver))) + regularization_loss(block)

        values = {k: t.data.copy() for k, t in params.items()}
        assert_grads_match(loss, values)


class TestDirectBlock:
    def test_fresh_rows(self):
        gen = _pretrained()
        block = DirectBlock(gen.cbn, 2)
        g, b = block.resolver(0, np.array([3, 4]))
        np.testing.assert_array_equal(g.data, 1.0)
        np.testing.assert_array_equal(b.data, 0.0)

    def test_old_rows_pass_through(self):
        gen = _pretrained()
        block = DirectBlock(gen.cbn, 2)
        g, _ = block.resolver(1, np.array([0, 2]))
        np.testing.assert_array_equal(g.data, gen.cbn[1].gamma.data[[0, 2]])
