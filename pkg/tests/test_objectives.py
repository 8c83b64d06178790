"""Loss oracles: per-step probes for the attention branch, exhaustive path
enumeration for CTC, closed-form and Monte-Carlo agreement for the KL, and
finite-difference checks for the variational bound."""

import itertools

import numpy as np
import pytest

from lhuc_asr import autodiff as ad
from lhuc_asr import objectives as obj
from lhuc_asr.autodiff import Tensor
from lhuc_asr.errors import (DimMismatch, EmptyTarget, NotScalar,
                             TargetTooLongForFrames)
from lhuc_asr.model import EOS_ID, SOS_ID, ConformerModel, ModelConfig

RNG = np.random.default_rng(404)
VOCAB = 11  # blank, sos, eos + 8 real tokens


@pytest.fixture(scope="module")
def model():
    return ConformerModel(ModelConfig(vocab_size=VOCAB), seed=9)


@pytest.fixture(scope="module")
def feats():
    return RNG.normal(size=(24, 8))


class _StubModel:
    """Fixed per-step distribution, for analytic attention-loss cases."""

    def __init__(self, rows):
        self.rows = np.asarray(rows, dtype=np.float64)

    def decoder_forward(self, enc, tokens, training=False, rng=None):
        return Tensor(self.rows[:len(tokens)]), None


class TestAttentionLoss:
    def test_perfect_predictor_zero_loss(self):
        target = [3, 4, 5]
        rows = np.full((4, VOCAB), -50.0)
        for i, tok in enumerate(target + [EOS_ID]):
            rows[i, tok] = 0.0
        loss = obj.attention_loss(_StubModel(rows), None, target)
        assert loss.item() == 0.0

    def test_uniform_predictor_entropy(self):
        # U real tokens plus the eos prediction, each -log(1/V).
        target = [3, 4, 5]
        rows = np.full((4, VOCAB), -np.log(VOCAB))
        loss = obj.attention_loss(_StubModel(rows), None, target)
        assert loss.item() == pytest.approx((len(target) + 1) * np.log(VOCAB),
                                            abs=1e-12)

    def test_per_step_probe_oracle(self, model, feats):
        target = [3, 7, 5]
        enc = model.encode(feats)
        loss = obj.attention_loss(model, enc, target).item()
        probe = 0.0
        prefix = [SOS_ID]
        for tok in target + [EOS_ID]:
            log_probs, _ = model.decode_step(enc, prefix)
            probe -= log_probs[tok]
            prefix.append(tok)
        assert loss == pytest.approx(probe, abs=1e-10)

    def test_empty_target(self, model, feats):
        with pytest.raises(EmptyTarget):
            obj.attention_loss(model, model.encode(feats), [])


def _random_log_probs(t_len, vocab, rng):
    logits = rng.normal(size=(t_len, vocab))
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def _brute_force_ctc(log_probs, target, blank=0):
    """Sum path probabilities over every possible frame labeling."""
    t_len, vocab = log_probs.shape
    total = 0.0
    for path in itertools.product(range(vocab), repeat=t_len):
        collapsed = [k for k, _ in itertools.groupby(path)]
        collapsed = [c for c in collapsed if c != blank]
        if collapsed == list(target):
            total += np.exp(sum(log_probs[t, path[t]] for t in range(t_len)))
    return total


class TestCtcLoss:
    def test_single_frame_single_token(self):
        lp = _random_log_probs(1, 5, RNG)
        loss = obj.ctc_loss(Tensor(lp), [3])
        assert loss.item() == pytest.approx(-lp[0, 3], abs=1e-12)

    def test_repeat_needs_blank(self):
        lp = _random_log_probs(2, 5, RNG)
        with pytest.raises(TargetTooLongForFrames):
            obj.ctc_loss(Tensor(lp), [3, 3])
        obj.ctc_loss(Tensor(_random_log_probs(3, 5, RNG)), [3, 3])

    @pytest.mark.parametrize("t_len", [2, 4, 6])
    def test_matches_exhaustive_enumeration(self, t_len):
        vocab = 5
        lp = _random_log_probs(t_len, vocab, np.random.default_rng(t_len))
        for u_len in (1, 2, 3):
            for target in itertools.product(range(3, vocab), repeat=u_len):
                expected = _brute_force_ctc(lp, list(target))
                if obj.min_ctc_frames(target) > t_len:
                    assert expected == 0.0
                    with pytest.raises(TargetTooLongForFrames):
                        obj.ctc_loss(Tensor(lp), list(target))
                    continue
                loss = obj.ctc_loss(Tensor(lp), list(target)).item()
                assert loss == pytest.approx(-np.log(expected), abs=1e-6)

    def test_loss_nonnegative_and_finite(self):
        for trial in range(25):
            rng = np.random.default_rng(trial)
            t_len = int(rng.integers(3, 9))
            lp = _random_log_probs(t_len, 6, rng)
            target = [int(rng.integers(3, 6))]
            while len(target) < 3 and rng.random() < 0.7:
                nxt = int(rng.integers(3, 6))
                if nxt != target[-1]:
                    target.append(nxt)
            loss = obj.ctc_loss(Tensor(lp), target).item()
            assert np.isfinite(loss) and loss >= -1e-9


class TestMultitask:
    def test_lambda_endpoints(self, model, feats):
        target = [3, 4]
        att = obj.multitask_loss(model, feats, target, cfg=obj.MultitaskConfig(0.0))
        enc = model.encode(feats)
        assert att.item() == pytest.approx(
            obj.attention_loss(model, enc, target).item(), abs=1e-12)
        ctc = obj.multitask_loss(model, feats, target, cfg=obj.MultitaskConfig(1.0))
        assert ctc.item() == pytest.approx(
            obj.ctc_loss(model.ctc_logits(enc), target).item(), abs=1e-12)

    def test_default_interpolation(self, model, feats):
        target = [3, 4, 6]
        enc = model.encode(feats)
        att = obj.attention_loss(model, enc, target).item()
        ctc = obj.ctc_loss(model.ctc_logits(enc), target).item()
        combined = obj.multitask_loss(model, feats, target,
                                      cfg=obj.MultitaskConfig(0.2)).item()
        assert combined == pytest.approx(0.8 * att + 0.2 * ctc, abs=1e-12)

    def test_monotone_in_components(self):
        lam = 0.2
        base = obj.combine_losses(Tensor(np.asarray(2.0)), Tensor(np.asarray(3.0)),
                                  lam).item()
        higher_att = obj.combine_losses(Tensor(np.asarray(2.5)),
                                        Tensor(np.asarray(3.0)), lam).item()
        higher_ctc = obj.combine_losses(Tensor(np.asarray(2.0)),
                                        Tensor(np.asarray(3.5)), lam).item()
        assert higher_att > base and higher_ctc > base

    def test_lambda_immutable(self):
        cfg = obj.MultitaskConfig(0.2)
        with pytest.raises(Exception):
            cfg.lam = 0.5

    def test_gradient_wrt_speaker_vector(self, model, feats):
        target = [3, 4, 5]

        def loss_of_r(r):
            return obj.multitask_loss(model, feats, target, speaker=r)

        err = ad.finite_difference_check(loss_of_r,
                                         Tensor(np.zeros(model.d_lhuc)), eps=1e-5)
        assert err < 1e-4


class TestKlGaussians:
    def test_equal_distributions_zero(self):
        q = obj.VariationalPosterior(np.array([0.3, -0.2]), np.log([0.5, 2.0]))
        p = obj.PriorSpec(np.array([0.3, -0.2]), np.array([0.5, 2.0]))
        assert obj.kl_gaussians(q, p) == pytest.approx(0.0, abs=1e-15)

    def test_unit_shift_half_nat(self):
        # mu=1, sigma=1 against the standard prior: 0.5*(2 + 0 - 1) = 0.5.
        q = obj.VariationalPosterior(np.array([1.0]), np.array([0.0]))
        assert obj.kl_gaussians(q, obj.PriorSpec.standard(1)) \
            == pytest.approx(0.5, abs=1e-12)

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(31)
        for _ in range(100):
            d = int(rng.integers(1, 6))
            q = obj.VariationalPosterior(rng.normal(size=d), rng.normal(size=d))
            p = obj.PriorSpec(rng.normal(size=d), np.abs(rng.normal(size=d)) + 0.1)
            assert obj.kl_gaussians(q, p) >= 0.0

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(7)
        d = 3
        q = obj.VariationalPosterior(rng.normal(size=d), rng.normal(size=d) * 0.3)
        p = obj.PriorSpec(rng.normal(size=d), np.abs(rng.normal(size=d)) + 0.5)
        closed = obj.kl_gaussians(q, p)
        n = 1_000_000
        z = q.mu + q.sigma * rng.standard_normal((n, d))
        log_q = -0.5 * (((z - q.mu) / q.sigma) ** 2
                        + np.log(2 * np.pi)) - np.log(q.sigma)
        log_p = -0.5 * (((z - p.mu) / p.sigma) ** 2
                        + np.log(2 * np.pi)) - np.log(p.sigma)
        per_sample = (log_q - log_p).sum(axis=1)
        se = per_sample.std(ddof=1) / np.sqrt(n)
        assert abs(per_sample.mean() - closed) < 3 * se

    def test_zero_gradient_at_prior(self):
        prior = obj.PriorSpec(np.array([0.5, -1.0]), np.array([0.7, 1.3]))
        mu = Tensor(prior.mu.copy(), requires_grad=True)
        log_sigma = Tensor(np.log(prior.sigma), requires_grad=True)
        ad.backward(obj.kl_gaussian_term(mu, log_sigma, prior))
        np.testing.assert_allclose(mu.grad, 0.0, atol=1e-12)
        np.testing.assert_allclose(log_sigma.grad, 0.0, atol=1e-12)

    def test_dim_mismatch(self):
        q = obj.VariationalPosterior(np.zeros(2), np.zeros(2))
        with pytest.raises(DimMismatch):
            obj.kl_gaussians(q, obj.PriorSpec.standard(3))


class TestVariationalLoss:
    def _setup(self, model):
        d = model.d_lhuc
        mu = Tensor(RNG.normal(size=d) * 0.1, requires_grad=True)
        log_sigma = Tensor(np.full(d, np.log(0.01)), requires_grad=True)
        return mu, log_sigma, obj.PriorSpec.standard(d)

    def test_degenerate_posterior_matches_deterministic(self, model, feats):
        target = [3, 4, 5]
        d = model.d_lhuc
        mu_val = RNG.normal(size=d) * 0.2
        mu = Tensor(mu_val, requires_grad=True)
        log_sigma = Tensor(np.full(d, -30.0), requires_grad=True)
        prior = obj.PriorSpec.standard(d)
        eps = [np.random.default_rng(0).standard_normal(d)]
        total = obj.variational_loss(model, [(feats, target)], mu, log_sigma,
                                     prior, eps_draws=eps).item()
        kl = obj.kl_gaussians(obj.VariationalPosterior(mu_val, np.full(d, -30.0)),
                              prior)
        det = obj.multitask_loss(model, feats, target, speaker=mu_val).item()
        assert total - kl == pytest.approx(det, abs=1e-6)

    def test_single_draw_consumes_one_sample(self, model, feats):
        mu, log_sigma, prior = self._setup(model)

        calls = []

        class CountingRng:
            def __init__(self):
                self.rng = np.random.default_rng(5)

            def standard_normal(self, shape):
                calls.append(shape)
                return self.rng.standard_normal(shape)

        obj.variational_loss(model, [(feats, [3, 4])], mu, log_sigma, prior,
                             num_samples=1, rng=CountingRng())
        assert calls == [mu.data.shape]

    def test_mc_average_linearity(self, model, feats):
        mu, log_sigma, prior = self._setup(model)
        d = model.d_lhuc
        eps = [np.random.default_rng(k).standard_normal(d) for k in range(4)]
        batched = obj.variational_loss(model, [(feats, [3, 4])], mu, log_sigma,
                                       prior, eps_draws=eps).item()
        singles = [obj.variational_loss(model, [(feats, [3, 4])], mu, log_sigma,
                                        prior, eps_draws=[e]).item() for e in eps]
        assert batched == pytest.approx(np.mean(singles), abs=1e-12)

    def test_gradients_with_frozen_eps(self, model, feats):
        d = model.d_lhuc
        prior = obj.PriorSpec.standard(d)
        eps = [np.random.default_rng(3).standard_normal(d)]
        target = [3, 4]
        base_mu = RNG.normal(size=d) * 0.1
        base_ls = np.full(d, np.log(0.5))

        def wrt_mu(mu):
            return obj.variational_loss(model, [(feats, target)], mu,
                                        ad.constant(base_ls), prior, eps_draws=eps)

        def wrt_ls(log_sigma):
            return obj.variational_loss(model, [(feats, target)],
                                        ad.constant(base_mu), log_sigma, prior,
                                        eps_draws=eps)

        assert ad.finite_difference_check(wrt_mu, Tensor(base_mu), eps=1e-5) < 1e-4
        assert ad.finite_difference_check(wrt_ls, Tensor(base_ls), eps=1e-5) < 1e-4
