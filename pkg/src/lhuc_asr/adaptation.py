"""Speaker-adaptive training, test-time LHUC estimation (deterministic and
Bayesian), and the two-pass unsupervised adaptation protocol.

Adaptation never touches shared model weights: only the per-speaker vector
(or its variational posterior) moves, by plain gradient descent with a fixed
learning rate. SAT alternates one shared-weight pass and one speaker-vector
pass per epoch.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .confidence import CemModel, records_from_hypothesis, score_records, \
    select_top_percentile, utterance_confidence
from .corpus import Utterance
from .decoding import DecodeConfig, Hypothesis, beam_search, word_error_rate
from .errors import ConfigError, DivergedLoss, EmptyAdaptationSet, NonFinite
from .model import ConformerModel, SpeakerParams
from .objectives import MultitaskConfig, PriorSpec, VariationalPosterior, \
    ctc_loss, min_ctc_frames, multitask_loss, variational_loss

RANKING_MODES = ("att", "att_ctc", "cem", "oracle")


@dataclass
class AdaptUtterance:
    utterance_id: str
    features: np.ndarray
    supervision: list
    confidence: Optional[float] = None
    source: str = "oracle"   # or "first-pass-hypothesis"

    def __post_init__(self):
        self.supervision = [int(t) for t in self.supervision]
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ConfigError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class AdaptationSet:
    speaker_id: str
    utterances: list


@dataclass
class AdaptConfig:
    mode: str = "deterministic"     # or "bayesian"
    steps: int = 50
    learning_rate: float = 0.1
    mc_samples: int = 1
    prior: Optional[PriorSpec] = None
    selection_percentile: Optional[float] = None
    log_sigma_init: float = math.log(0.01)
    # Divergence (NaN or >10x the initial loss) rolls the parameters back to
    # their init; set False to raise DivergedLoss instead.
    rollback_on_divergence: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("deterministic", "bayesian"):
            raise ConfigError(f"unknown adaptation mode {self.mode!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.selection_percentile is not None \
                and not 0.0 < self.selection_percentile <= 100.0:
            raise ConfigError(
                f"selection_percentile {self.selection_percentile} outside (0, 100]")


_DIVERGENCE_FACTOR = 10.0


def _subsample_cache(model: ConformerModel, adapt_set: AdaptationSet):
    if model.config.lhuc_location == "pre_projection":
        return None
    cache = {}
    with ad.no_grad():
        for i, utt in enumerate(adapt_set.utterances):
            cache[i] = model.subsample(utt.features)
    return cache


def _descent(loss_fn: Callable[[int], Tensor], tensors: Sequence[Tensor],
             cfg: AdaptConfig, kl_fn: Callable[[], float],
             log_sink: Optional[list]) -> None:
    """Shared GD loop with the divergence guard and CSV-style logging."""
    initial = None
    inits = [t.data.copy() for t in tensors]
    for step in range(1, cfg.steps + 1):
        try:
            loss = loss_fn(step)
            value = loss.item()
        except NonFinite:
            value = float("nan")
            loss = None
        diverged = not np.isfinite(value) or (
            initial is not None and value > _DIVERGENCE_FACTOR * max(initial, 1e-12))
        if diverged:
            if not cfg.rollback_on_divergence:
                raise DivergedLoss(step, value, initial if initial is not None else value)
            for t, init in zip(tensors, inits):
                t.data = init.copy()
                t.grad = None
            if log_sink is not None:
                log_sink.append((step, value, kl_fn(), 0.0))
            return
        if initial is None:
            initial = value
        ad.backward(loss)
        for t in tensors:
            if t.grad is not None:
                t.data -= cfg.learning_rate * t.grad
                t.grad = None
        if log_sink is not None:
            log_sink.append((step, value, kl_fn(), cfg.learning_rate))


def estimate_lhuc(model: ConformerModel, adapt_set: AdaptationSet,
                  cfg: AdaptConfig, mt_cfg: MultitaskConfig = MultitaskConfig(),
                  log_sink: Optional[list] = None) -> SpeakerParams:
    """Deterministic LHUC: gradient descent on the multitask loss from r=0."""
    if cfg.mode != "deterministic":
        raise ConfigError("estimate_lhuc requires mode='deterministic'")
    if not adapt_set.utterances:
        raise EmptyAdaptationSet(f"speaker {adapt_set.speaker_id}")
    r = Tensor(np.zeros(model.d_lhuc), requires_grad=True)
    cache = _subsample_cache(model, adapt_set)

    def loss_fn(_step):
        total = None
        for i, utt in enumerate(adapt_set.utterances):
            term = multitask_loss(model, utt.features, utt.supervision, speaker=r,
                                  cfg=mt_cfg,
                                  subsample_out=None if cache is None else cache[i])
            total = term if total is None else total + term
        return total

    _descent(loss_fn, [r], cfg, lambda: 0.0, log_sink)
    return SpeakerParams(adapt_set.speaker_id, r.data)


def bayes_adapt(model: ConformerModel, adapt_set: AdaptationSet,
                cfg: AdaptConfig, mt_cfg: MultitaskConfig = MultitaskConfig(),
                log_sink: Optional[list] = None) -> VariationalPosterior:
    """Variational LHUC: optimize (mu, log_sigma) on the sampled bound + KL."""
    if cfg.mode != "bayesian":
        raise ConfigError("bayes_adapt requires mode='bayesian'")
    if not adapt_set.utterances:
        raise EmptyAdaptationSet(f"speaker {adapt_set.speaker_id}")
    d = model.d_lhuc
    prior = cfg.prior if cfg.prior is not None else PriorSpec.standard(d)
    mu = Tensor(np.zeros(d), requires_grad=True)
    log_sigma = Tensor(np.full(d, cfg.log_sigma_init), requires_grad=True)
    cache = _subsample_cache(model, adapt_set)

    def loss_fn(step):
        rng = np.random.default_rng(np.random.SeedSequence(
            [cfg.seed, _crc(adapt_set.speaker_id), step]))
        return variational_loss(model, adapt_set.utterances, mu, log_sigma, prior,
                                cfg=mt_cfg, num_samples=cfg.mc_samples, rng=rng,
                                subsample_cache=cache)

    def kl_now() -> float:
        from .objectives import kl_gaussians
        return kl_gaussians(VariationalPosterior(mu.data, log_sigma.data), prior)

    _descent(loss_fn, [mu, log_sigma], cfg, kl_now, log_sink)
    return VariationalPosterior(mu.data, log_sigma.data)


def _crc(text: str) -> int:
    import zlib
    return zlib.crc32(text.encode())


def predict_with_posterior(model: ConformerModel, posterior: VariationalPosterior,
                           features):
    """Encode with r = posterior mean; no sampling happens at test time."""
    speaker = SpeakerParams("posterior-mean", posterior.mu)
    with ad.no_grad():
        return model.encode(features, speaker=speaker)


# -- speaker-adaptive training ------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 8
    noam_warmup: int = 300
    noam_scale: float = 1.0
    grad_clip: float = 5.0
    speaker_lr: float = 0.1
    speaker_passes: int = 1    # sweeps over each speaker's data per epoch
    average_last: int = 3
    update_speaker_params: bool = True
    seed: int = 0
    lam: float = 0.2


class NoamOptimizer:
    """Adam under the warmup-then-decay schedule
    lr = scale * d_model^-1/2 * min(step^-1/2, step * warmup^-3/2)."""

    def __init__(self, d_model: int, warmup: int, scale: float,
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.d_model = d_model
        self.warmup = warmup
        self.scale = scale
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_num = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def rate(self) -> float:
        s = self.step_num
        return self.scale * self.d_model ** -0.5 \
            * min(s ** -0.5, s * self.warmup ** -1.5)

    def step(self, params: Sequence[Tensor], grad_clip: float = 0.0):
        self.step_num += 1
        lr = self.rate()
        grads = [p.grad for p in params if p.grad is not None]
        factor = 1.0
        if grad_clip > 0.0 and grads:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > grad_clip:
                factor = grad_clip / norm
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(params):
            if p.grad is None:
                continue
            g = factor * p.grad
            m = self._m.get(i)
            if m is None:
                m = np.zeros_like(p.data)
                self._m[i] = m
                self._v[i] = np.zeros_like(p.data)
            v = self._v[i]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.step_num)
            v_hat = v / (1 - b2 ** self.step_num)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


def _epoch_rng(seed: int, *keys) -> np.random.Generator:
    parts = [seed] + [k if isinstance(k, int) else _crc(str(k)) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(parts))


def _zero_all_grads(model: ConformerModel):
    for p in model.params.values():
        p.grad = None


def sat_train(model: ConformerModel, train_utts: Sequence[Utterance],
              cfg: TrainConfig) -> tuple:
    """Interleave shared-weight and per-speaker LHUC updates each epoch.

    Returns (model, {speaker_id: SpeakerParams}). With update_speaker_params
    False the loop reduces exactly to speaker-independent training.
    """
    mt_cfg = MultitaskConfig(cfg.lam)
    utts = list(train_utts)
    speakers = sorted({u.speaker_id for u in utts})
    r_map = {s: np.zeros(model.d_lhuc) for s in speakers}
    params = list(model.params.values())
    opt = NoamOptimizer(model.config.d_model, cfg.noam_warmup, cfg.noam_scale)
    snapshots: list = []

    for epoch in range(cfg.epochs):
        order = _epoch_rng(cfg.seed, "order", epoch).permutation(len(utts))
        for step_in_epoch, idx in enumerate(order):
            utt = utts[idx]
            rng = _epoch_rng(cfg.seed, "dropout", epoch, int(step_in_epoch))
            speaker = r_map[utt.speaker_id] if cfg.update_speaker_params else None
            loss = multitask_loss(model, utt.features, utt.reference,
                                  speaker=speaker, cfg=mt_cfg, training=True, rng=rng)
            ad.backward(loss)
            opt.step(params, cfg.grad_clip)
        if cfg.update_speaker_params:
            for speaker_id in speakers:
                r = Tensor(r_map[speaker_id], requires_grad=True)
                own = [u for u in utts if u.speaker_id == speaker_id]
                for _ in range(cfg.speaker_passes):
                    for utt in own:
                        loss = multitask_loss(model, utt.features, utt.reference,
                                              speaker=r, cfg=mt_cfg)
                        ad.backward(loss)
                        r.data -= cfg.speaker_lr * r.grad
                        r.grad = None
                        _zero_all_grads(model)
                r_map[speaker_id] = r.data
        if cfg.epochs - epoch <= cfg.average_last:
            snapshots.append(model.state_arrays())

    if len(snapshots) > 1:
        averaged = {name: np.mean([s[name] for s in snapshots], axis=0)
                    for name in snapshots[0]}
        model.load_state_arrays(averaged)
    speaker_params = {s: SpeakerParams(s, r_map[s]) for s in speakers}
    return model, speaker_params


def train_si(model: ConformerModel, train_utts: Sequence[Utterance],
             cfg: TrainConfig) -> ConformerModel:
    """Speaker-independent training: the SAT loop with LHUC frozen out."""
    si_cfg = TrainConfig(**{**cfg.__dict__, "update_speaker_params": False})
    trained, _ = sat_train(model, train_utts, si_cfg)
    return trained


# -- two-pass unsupervised adaptation --------------------------------------------------

@dataclass
class FirstPassUtterance:
    utterance_id: str
    speaker_id: str
    features: np.ndarray
    reference: list
    hypothesis: Hypothesis
    records: list
    confidence: Optional[float] = None


@dataclass
class SpeakerAdaptResult:
    speaker_id: str
    params: object
    pass1: dict
    pass2: dict
    pass1_wer: object
    pass2_wer: object
    supervision_wer: object
    selected_ids: list
    skipped_ids: list
    adaptation_log: list


def run_first_pass(model: ConformerModel, utterances: Sequence[Utterance],
                   decode_cfg: DecodeConfig,
                   cem: Optional[CemModel] = None) -> list:
    """Decode every utterance with r=0 and attach per-token records."""
    out = []
    for utt in utterances:
        hyp = beam_search(model, utt.features, decode_cfg, speaker=None)
        records = records_from_hypothesis(utt.utterance_id, hyp)
        if cem is not None and records:
            score_records(cem, records)
        out.append(FirstPassUtterance(
            utterance_id=utt.utterance_id, speaker_id=utt.speaker_id,
            features=utt.features, reference=utt.reference,
            hypothesis=hyp, records=records))
    return out


def _ranking_confidence(model: ConformerModel, fp: FirstPassUtterance,
                        ranking: str, decode_cfg: DecodeConfig) -> float:
    hyp = fp.hypothesis
    token_probs = hyp.per_token_probs[:len(hyp.tokens)]
    if not hyp.tokens:
        return 0.0
    if ranking == "att":
        return float(np.mean(token_probs))
    if ranking == "att_ctc":
        att = float(np.mean(token_probs))
        frames = model.config.subsampled_length(fp.features.shape[0])
        if min_ctc_frames(hyp.tokens) > frames:
            return 0.5 * att
        with ad.no_grad():
            enc = model.encode(fp.features)
            nll = ctc_loss(model.ctc_logits(enc), hyp.tokens).item()
        ctc_conf = math.exp(-nll / max(1, len(hyp.tokens)))
        return 0.5 * (att + ctc_conf)
    if ranking == "cem":
        if not fp.records or any(r.smoothed is None for r in fp.records):
            raise ConfigError("cem ranking needs scored records (pass a CemModel)")
        return utterance_confidence(fp.records)
    if ranking == "oracle":
        wer = word_error_rate([hyp.tokens], [fp.reference]).wer
        return 1.0 / (1.0 + wer)
    raise ConfigError(f"unknown ranking mode {ranking!r}")


def _adapt_one_speaker(model: ConformerModel, speaker_id: str,
                       first_pass: list, adapt_cfg: AdaptConfig,
                       mt_cfg: MultitaskConfig, decode_cfg: DecodeConfig,
                       ranking: str,
                       adapt_utterance_ids: Optional[set] = None) -> SpeakerAdaptResult:
    skipped, usable = [], []
    for fp in first_pass:
        if adapt_utterance_ids is not None \
                and fp.utterance_id not in adapt_utterance_ids:
            continue
        frames = model.config.subsampled_length(fp.features.shape[0])
        tokens = fp.hypothesis.tokens
        if not tokens or min_ctc_frames(tokens) > frames:
            skipped.append(fp.utterance_id)
            continue
        usable.append(AdaptUtterance(
            utterance_id=fp.utterance_id, features=fp.features,
            supervision=list(tokens), confidence=fp.confidence,
            source="first-pass-hypothesis"))
    adapt_set = AdaptationSet(speaker_id, usable)
    if adapt_cfg.selection_percentile is not None and usable:
        adapt_set = select_top_percentile(adapt_set, adapt_cfg.selection_percentile)
    selected_ids = [u.utterance_id for u in adapt_set.utterances]

    log: list = []
    if not adapt_set.utterances:
        params = SpeakerParams.identity(speaker_id, model.d_lhuc)
    elif adapt_cfg.mode == "deterministic":
        params = estimate_lhuc(model, adapt_set, adapt_cfg, mt_cfg, log_sink=log)
    else:
        params = bayes_adapt(model, adapt_set, adapt_cfg, mt_cfg, log_sink=log)

    if isinstance(params, VariationalPosterior):
        decode_speaker = SpeakerParams(speaker_id, params.mu)
    else:
        decode_speaker = params
    pass2 = {}
    for fp in first_pass:
        hyp = beam_search(model, fp.features, decode_cfg, speaker=decode_speaker)
        pass2[fp.utterance_id] = hyp

    refs = [fp.reference for fp in first_pass]
    pass1_hyps = {fp.utterance_id: fp.hypothesis for fp in first_pass}
    pass1_wer = word_error_rate([fp.hypothesis.tokens for fp in first_pass], refs)
    pass2_wer = word_error_rate([pass2[fp.utterance_id].tokens
                                 for fp in first_pass], refs)
    sel = set(selected_ids)
    sel_pairs = [(fp.hypothesis.tokens, fp.reference)
                 for fp in first_pass if fp.utterance_id in sel]
    supervision_wer = word_error_rate([p[0] for p in sel_pairs],
                                      [p[1] for p in sel_pairs]) if sel_pairs else None
    return SpeakerAdaptResult(
        speaker_id=speaker_id, params=params, pass1=pass1_hyps, pass2=pass2,
        pass1_wer=pass1_wer, pass2_wer=pass2_wer, supervision_wer=supervision_wer,
        selected_ids=selected_ids, skipped_ids=skipped, adaptation_log=log)


def adaptation_threads() -> int:
    value = os.environ.get("LHUC_ADAPT_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def two_pass_adapt(model: ConformerModel, test_utts: Sequence[Utterance],
                   adapt_cfg: AdaptConfig,
                   decode_cfg: DecodeConfig = DecodeConfig(),
                   mt_cfg: MultitaskConfig = MultitaskConfig(),
                   cem: Optional[CemModel] = None, ranking: str = "att",
                   first_pass: Optional[list] = None,
                   adapt_utterance_ids: Optional[set] = None) -> dict:
    """Decode, select, adapt, re-decode; per-speaker results keyed by id.

    Pass a precomputed `first_pass` (from run_first_pass) to amortize the
    initial decode across selection sweeps; it never depends on the
    adaptation configuration. `adapt_utterance_ids`, when given, restricts
    the adaptation data (pass 2 still re-decodes every utterance).
    """
    utts = list(test_utts)
    if first_pass is None:
        first_pass = run_first_pass(model, utts, decode_cfg, cem=cem)
    by_speaker: dict[str, list] = {}
    for fp in first_pass:
        fp.confidence = _ranking_confidence(model, fp, ranking, decode_cfg)
        by_speaker.setdefault(fp.speaker_id, []).append(fp)

    def job(speaker_id):
        return _adapt_one_speaker(model, speaker_id, by_speaker[speaker_id],
                                  adapt_cfg, mt_cfg, decode_cfg, ranking,
                                  adapt_utterance_ids=adapt_utterance_ids)

    speaker_ids = sorted(by_speaker)
    threads = adaptation_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, speaker_ids))
    else:
        results = [job(s) for s in speaker_ids]
    return {r.speaker_id: r for r in results}
