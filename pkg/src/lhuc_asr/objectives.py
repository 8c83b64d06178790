"""Training losses: attention cross-entropy, CTC, their interpolation, and
the variational objective for Bayesian speaker-parameter estimation.

The interpolated loss is (1-lam) * att_nll + lam * ctc_nll with lam fixed for
a run. The variational objective is a Monte-Carlo bound: reparameterized
sample losses averaged over draws plus the closed-form Gaussian KL to the
prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimMismatch, EmptyTarget, TargetTooLongForFrames
from .model import EOS_ID, SOS_ID, ConformerModel, EncoderOutput

NEG_INF = -np.inf


@dataclass(frozen=True)
class MultitaskConfig:
    """Interpolation weight between attention and CTC losses."""

    lam: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must be in [0, 1], got {self.lam}")


@dataclass
class VariationalPosterior:
    """Diagonal Gaussian q(r) = N(mu, sigma^2), sigma = exp(log_sigma)."""

    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64)
        if self.mu.shape != self.log_sigma.shape:
            raise DimMismatch(
                f"mu {self.mu.shape} vs log_sigma {self.log_sigma.shape}")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.log_sigma))):
            raise DimMismatch("non-finite posterior parameters")

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)


@dataclass
class PriorSpec:
    """Gaussian prior over speaker parameters; standard normal by default."""

    mu: np.ndarray = field(default_factory=lambda: np.zeros(1))
    sigma: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape:
            raise DimMismatch(f"mu {self.mu.shape} vs sigma {self.sigma.shape}")
        if np.any(self.sigma <= 0):
            raise ValueError("prior sigma must be positive")

    @classmethod
    def standard(cls, dim: int) -> "PriorSpec":
        return cls(np.zeros(dim), np.ones(dim))


# -- attention branch ---------------------------------------------------------

def attention_loss(model: ConformerModel, enc: EncoderOutput, target: Sequence[int],
                   training: bool = False, rng=None) -> Tensor:
    """Negative log-likelihood of the reference under teacher forcing."""
    target = list(int(t) for t in target)
    if not target:
        raise EmptyTarget("attention loss needs a non-empty target")
    log_probs, _ = model.decoder_forward(enc, [SOS_ID] + target,
                                         training=training, rng=rng)
    picked = ad.pick(log_probs, target + [EOS_ID])
    return ad.neg(ad.sum_(picked))


# -- CTC branch ---------------------------------------------------------------

def min_ctc_frames(target: Sequence[int]) -> int:
    """Shortest alignment: one frame per token plus a blank between repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _ctc_augment(target: Sequence[int], blank: int) -> np.ndarray:
    aug = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    aug[1::2] = target
    return aug


def _ctc_alpha(lp: np.ndarray, aug: np.ndarray) -> np.ndarray:
    t_len, s_len = lp.shape[0], aug.shape[0]
    # Skip transition s-2 -> s is legal only onto a non-blank that differs
    # from the previous non-blank.
    allow_skip = np.zeros(s_len, dtype=bool)
    if s_len > 2:
        allow_skip[2:] = (aug[2:] != aug[0]) & (aug[2:] != aug[:-2])
        allow_skip[2::2] = False
    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = lp[0, aug[0]]
    if s_len > 1:
        alpha[0, 1] = lp[0, aug[1]]
    with np.errstate(invalid="ignore", divide="ignore"):
        for t in range(1, t_len):
            prev = alpha[t - 1]
            stay = prev
            step = np.concatenate([[NEG_INF], prev[:-1]])
            skip = np.concatenate([[NEG_INF, NEG_INF], prev[:-2]])
            skip = np.where(allow_skip, skip, NEG_INF)
            m = np.maximum(np.maximum(stay, step), skip)
            safe_m = np.where(np.isfinite(m), m, 0.0)
            total = (np.exp(np.where(np.isfinite(stay), stay - safe_m, NEG_INF))
                     + np.exp(np.where(np.isfinite(step), step - safe_m, NEG_INF))
                     + np.exp(np.where(np.isfinite(skip), skip - safe_m, NEG_INF)))
            merged = np.where(np.isfinite(m), safe_m + np.log(total), NEG_INF)
            alpha[t] = merged + lp[t, aug]
    return alpha


def ctc_nll(log_probs: Tensor, target: Sequence[int], blank: int = 0) -> Tensor:
    """Negative log of the summed probability of all blank-augmented alignments.

    Forward recursion in log space; the gradient w.r.t. each per-frame
    log-probability is minus the alignment posterior mass on that symbol.
    """
    target = [int(t) for t in target]
    lp = log_probs.data
    t_len = lp.shape[0]
    need = min_ctc_frames(target)
    if t_len < need:
        raise TargetTooLongForFrames(len(target), need, t_len)
    aug = _ctc_augment(target, blank)
    s_len = aug.shape[0]
    alpha = _ctc_alpha(lp, aug)
    tails = [alpha[-1, -1]] + ([alpha[-1, -2]] if s_len > 1 else [])
    m = max(tails)
    log_p = m + np.log(sum(np.exp(v - m) for v in tails))
    out = np.asarray(-log_p)

    def bwd(g):
        beta = _ctc_alpha(lp[::-1], aug[::-1])[::-1, ::-1]
        with np.errstate(invalid="ignore"):
            gamma = alpha + beta - lp[:, aug] - log_p
        post = np.where(np.isfinite(gamma), np.exp(gamma), 0.0)
        grad_lp = np.zeros_like(lp)
        for s in range(s_len):
            grad_lp[:, aug[s]] += post[:, s]
        return (-float(g) * grad_lp,)

    return ad._node("ctc_nll", out, (log_probs,), bwd)


ad.OPS["ctc_nll"] = ctc_nll


def ctc_loss(log_probs: Tensor, target: Sequence[int], blank: int = 0) -> Tensor:
    return ctc_nll(log_probs, target, blank=blank)


# -- interpolation ------------------------------------------------------------

def combine_losses(att, ctc, lam: float):
    """Convex combination (1-lam)*att + lam*ctc; exact at the endpoints."""
    if lam == 0.0:
        return att
    if lam == 1.0:
        return ctc
    return (1.0 - lam) * att + lam * ctc


def multitask_loss(model: ConformerModel, features, target: Sequence[int],
                   speaker=None, cfg: MultitaskConfig = MultitaskConfig(),
                   training: bool = False, rng=None,
                   subsample_out: Optional[Tensor] = None) -> Tensor:
    """Interpolated attention + CTC loss on one utterance."""
    enc = model.encode(features, speaker=speaker, training=training, rng=rng,
                       subsample_out=subsample_out)
    att = attention_loss(model, enc, target, training=training, rng=rng)
    ctc = ctc_loss(model.ctc_logits(enc), target)
    return combine_losses(att, ctc, cfg.lam)


# -- variational objective ------------------------------------------------------

def kl_gaussian_term(mu: Tensor, log_sigma: Tensor, prior: PriorSpec) -> Tensor:
    """Differentiable KL( N(mu, sigma^2) || prior ) for diagonal Gaussians.

    0.5 * sum_i [ (sigma_i^2 + (mu_i - mu_ri)^2) / sigma_ri^2
                  + 2*log(sigma_ri / sigma_i) - 1 ]
    """
    if mu.data.shape != prior.mu.shape:
        raise DimMismatch(f"posterior {mu.data.shape} vs prior {prior.mu.shape}")
    var = ad.exp(log_sigma * 2.0)
    diff = mu - ad.constant(prior.mu)
    inv_prior_var = ad.constant(1.0 / (prior.sigma ** 2))
    log_prior_sigma = ad.constant(np.log(prior.sigma))
    terms = (var + ad.square(diff)) * inv_prior_var \
        + 2.0 * (log_prior_sigma - log_sigma) - 1.0
    return 0.5 * ad.sum_(terms)


def kl_gaussians(q: VariationalPosterior, p: PriorSpec) -> float:
    """Closed-form KL divergence between the posterior and the prior."""
    if q.mu.shape != p.mu.shape:
        raise DimMismatch(f"posterior {q.mu.shape} vs prior {p.mu.shape}")
    sigma = q.sigma
    val = 0.5 * np.sum((sigma ** 2 + (q.mu - p.mu) ** 2) / (p.sigma ** 2)
                       + 2.0 * np.log(p.sigma / sigma) - 1.0)
    return float(val)


def _iter_pairs(utterances):
    # Accepts an AdaptationSet, utterance-like objects, or raw pairs.
    if hasattr(utterances, "utterances"):
        utterances = utterances.utterances
    for utt in utterances:
        if hasattr(utt, "features"):
            target = getattr(utt, "supervision", None)
            if target is None:
                target = utt.reference
            yield utt.features, target
        else:
            features, target = utt
            yield features, target


def variational_loss(model: ConformerModel, utterances, mu: Tensor,
                     log_sigma: Tensor, prior: PriorSpec,
                     cfg: MultitaskConfig = MultitaskConfig(),
                     num_samples: int = 1, eps_draws=None, rng=None,
                     subsample_cache: Optional[dict] = None) -> Tensor:
    """Monte-Carlo bound: mean sampled data loss plus KL to the prior.

    Each draw k uses r_k = mu + sigma * eps_k (reparameterized, so gradients
    flow to mu and log_sigma). Pass eps_draws to pin the noise for checks.
    """
    pairs = list(_iter_pairs(utterances))
    if not pairs:
        raise EmptyTarget("variational loss needs at least one utterance")
    if eps_draws is None:
        if num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        eps_draws = [rng.standard_normal(mu.data.shape) for _ in range(num_samples)]
    sample_losses = []
    for eps in eps_draws:
        r = ad.reparam_gaussian(mu, log_sigma, eps)
        per_utt = []
        for i, (features, target) in enumerate(pairs):
            cached = None
            if subsample_cache is not None:
                cached = subsample_cache.get(i)
            per_utt.append(multitask_loss(model, features, target, speaker=r,
                                          cfg=cfg, subsample_out=cached))
        total = per_utt[0]
        for term in per_utt[1:]:
            total = total + term
        sample_losses.append(total)
    data_term = sample_losses[0]
    for term in sample_losses[1:]:
        data_term = data_term + term
    data_term = data_term * (1.0 / len(eps_draws))
    return data_term + kl_gaussian_term(mu, log_sigma, prior)
