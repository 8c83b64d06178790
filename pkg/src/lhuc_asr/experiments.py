"""Seeded benchmark harness shared by the acceptance suite and the CLI.

One "seed run" generates a corpus, trains speaker-independent and
speaker-adaptive models, trains the confidence estimator on a held-out dev
dump, and caches the first test-decode pass. Everything downstream
(adaptation gain, supervision-noise curves, percentile sweeps, sparsity
comparisons) reuses those artifacts, so the expensive work happens once per
seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import adaptation as ada
from .confidence import CemConfig, CemModel, cem_train, label_records, \
    records_from_hypothesis, score_records
from .corpus import Corpus, CorpusSpec, corrupt_references, generate_corpus
from .decoding import DecodeConfig, beam_search, word_error_rate
from .errors import ConfigError, SingleClassDump
from .model import ConformerModel, ModelConfig
from .objectives import MultitaskConfig

SWEEP_MODES = ("att", "att_ctc", "cem", "oracle", "cem_bayes", "oracle_bayes")
PERCENTILE_GRID = (50.0, 60.0, 70.0, 80.0, 90.0, 100.0)


def parse_sweep_mode(mode: str) -> tuple:
    """'cem_bayes' -> ('cem', 'bayesian'); plain modes are deterministic."""
    if mode.endswith("_bayes"):
        return mode[:-len("_bayes")], "bayesian"
    return mode, "deterministic"


@dataclass
class BenchmarkConfig:
    corpus: CorpusSpec = field(default_factory=lambda: CorpusSpec(
        num_speakers=20, num_test_speakers=8, utterances_per_speaker=24,
        utterances_per_test_speaker=12, vocab_size=8, token_len_range=(3, 6),
        frames_per_token=4, feat_dim=8, speaker_gain_log_std=0.5,
        noise_std=0.1, dev_fraction=0.2))
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        vocab_size=11, feat_dim=8, num_heads=2))
    train: ada.TrainConfig = field(default_factory=lambda: ada.TrainConfig(
        epochs=8, noam_warmup=300, noam_scale=1.0, average_last=3))
    decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(
        beam_size=2, ctc_weight=0.3))
    adapt_steps: int = 50
    adapt_lr: float = 0.1
    cem: CemConfig = field(default_factory=lambda: CemConfig(epochs=40))

    def with_seed(self, seed: int) -> "BenchmarkConfig":
        return replace(
            self,
            corpus=replace(self.corpus, seed=seed),
            train=replace(self.train, seed=seed),
            cem=replace(self.cem, seed=seed),
        )

    def adapt_config(self, mode: str = "deterministic",
                     percentile: Optional[float] = None,
                     seed: int = 0) -> ada.AdaptConfig:
        return ada.AdaptConfig(mode=mode, steps=self.adapt_steps,
                               learning_rate=self.adapt_lr,
                               selection_percentile=percentile, seed=seed)


@dataclass
class SeedRun:
    seed: int
    config: BenchmarkConfig
    corpus: Corpus
    si_model: ConformerModel
    sat_model: ConformerModel
    sat_speakers: dict
    cem: Optional[CemModel]
    si_pass1: list          # test split decoded by the SI model, r = 0
    sat_pass1: list         # test split decoded by the SAT model, r = 0


def labeled_dump(model: ConformerModel, utterances, decode_cfg: DecodeConfig,
                 cem: Optional[CemModel] = None) -> list:
    """Decode a split and label every emitted token against the reference."""
    records = []
    for utt in utterances:
        hyp = beam_search(model, utt.features, decode_cfg)
        utt_records = records_from_hypothesis(utt.utterance_id, hyp)
        if utt_records:
            label_records(utt_records, hyp.tokens, utt.reference)
            if cem is not None:
                score_records(cem, utt_records)
            records.extend(utt_records)
    return records


def run_benchmark_seed(seed: int, config: Optional[BenchmarkConfig] = None,
                       train_cem: bool = True) -> SeedRun:
    """Train SI and SAT systems and cache the SI first pass of the test split.

    Supervision for unsupervised adaptation comes from decoding with the
    baseline speaker-independent model; the confidence estimator is trained
    on that same model's held-out dev dump so its features match the
    hypotheses it scores.
    """
    cfg = (config or BenchmarkConfig()).with_seed(seed)
    corpus = generate_corpus(cfg.corpus)

    si_model = ada.train_si(ConformerModel(cfg.model, seed=seed),
                            corpus.train, cfg.train)
    sat_model, sat_speakers = ada.sat_train(ConformerModel(cfg.model, seed=seed),
                                            corpus.train, cfg.train)
    cem = None
    if train_cem:
        dev_records = labeled_dump(si_model, corpus.dev, cfg.decode)
        try:
            cem = cem_train(dev_records, cfg.cem)
        except SingleClassDump:
            cem = None
    si_pass1 = ada.run_first_pass(si_model, corpus.test, cfg.decode, cem=cem)
    sat_pass1 = ada.run_first_pass(sat_model, corpus.test, cfg.decode, cem=None)
    return SeedRun(seed=seed, config=cfg, corpus=corpus, si_model=si_model,
                   sat_model=sat_model, sat_speakers=sat_speakers, cem=cem,
                   si_pass1=si_pass1, sat_pass1=sat_pass1)


def _clone_first_pass(first_pass: list) -> list:
    # two_pass_adapt mutates fp.confidence; keep the cached pass pristine.
    return [replace(fp) for fp in first_pass]


def pass1_wer(run: SeedRun, base: str = "si") -> float:
    first_pass = run.si_pass1 if base == "si" else run.sat_pass1
    hyps = [fp.hypothesis.tokens for fp in first_pass]
    refs = [fp.reference for fp in first_pass]
    return word_error_rate(hyps, refs).wer


def dev_wer(run: SeedRun, base: str = "si") -> float:
    model = run.si_model if base == "si" else run.sat_model
    hyps, refs = [], []
    for utt in run.corpus.dev:
        hyps.append(beam_search(model, utt.features, run.config.decode).tokens)
        refs.append(utt.reference)
    return word_error_rate(hyps, refs).wer


def adapted_wer(run: SeedRun, mode: str = "deterministic",
                ranking: str = "att", percentile: Optional[float] = None,
                base: str = "sat", max_adapt_utts: Optional[int] = None,
                supervision: str = "hypothesis",
                supervision_noise: float = 0.0) -> float:
    """Adaptation on the cached SI first pass; returns overall pass-2 test WER.

    Supervision, confidences and selection always come from the baseline SI
    decode; `base` chooses which system is adapted and re-decoded.
    supervision="oracle" swaps the hypotheses for (optionally noise-corrupted)
    reference transcripts; max_adapt_utts truncates the per-speaker adaptation
    pool while pass 2 still re-decodes every utterance.
    """
    model = run.sat_model if base == "sat" else run.si_model
    first_pass = _clone_first_pass(run.si_pass1)
    if ranking in ("cem",) and run.cem is None:
        raise ConfigError("this seed run has no trained confidence estimator")
    if supervision == "oracle":
        refs = {u.utterance_id: list(u.reference) for u in run.corpus.test}
        if supervision_noise > 0.0:
            corrupted = corrupt_references(run.corpus.test, supervision_noise,
                                           run.config.corpus.vocab_size,
                                           seed=run.seed)
            refs = {u.utterance_id: list(u.reference) for u in corrupted}
        for fp in first_pass:
            fp.hypothesis = replace(fp.hypothesis, tokens=refs[fp.utterance_id])

    adapt_ids = None
    if max_adapt_utts is not None:
        adapt_ids = set()
        per_speaker: dict = {}
        for fp in first_pass:
            count = per_speaker.setdefault(fp.speaker_id, 0)
            if count < max_adapt_utts:
                adapt_ids.add(fp.utterance_id)
                per_speaker[fp.speaker_id] = count + 1

    adapt_cfg = run.config.adapt_config(mode=mode, percentile=percentile,
                                        seed=run.seed)
    results = ada.two_pass_adapt(model, run.corpus.test, adapt_cfg,
                                 run.config.decode, MultitaskConfig(),
                                 cem=run.cem, ranking=ranking,
                                 first_pass=first_pass,
                                 adapt_utterance_ids=adapt_ids)
    hyps, refs_out = [], []
    for fp in run.si_pass1:
        hyps.append(results[fp.speaker_id].pass2[fp.utterance_id].tokens)
        refs_out.append(fp.reference)
    return word_error_rate(hyps, refs_out).wer


def percentile_sweep(run: SeedRun, modes=SWEEP_MODES,
                     percentiles=PERCENTILE_GRID) -> list:
    """(mode, percentile, wer) rows over the cached first pass of one seed."""
    rows = []
    for mode in modes:
        ranking, estimation = parse_sweep_mode(mode)
        for pct in percentiles:
            wer = adapted_wer(run, mode=estimation, ranking=ranking,
                              percentile=pct)
            rows.append((mode, float(pct), wer))
    return rows


def supervision_noise_curve(run: SeedRun, rates=(0.0, 0.1, 0.3, 0.5)) -> list:
    """(rate, adapted WER) using noise-corrupted oracle supervision."""
    return [(rate, adapted_wer(run, supervision="oracle",
                               supervision_noise=rate)) for rate in rates]


def spearman_rho(xs, ys) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    def ranks(values):
        values = np.asarray(values, dtype=np.float64)
        order = np.argsort(values, kind="mergesort")
        out = np.empty(values.size)
        i = 0
        sorted_vals = values[order]
        while i < values.size:
            j = i
            while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
                j += 1
            out[order[i:j + 1]] = (i + j) / 2.0 + 1.0
            i = j + 1
        return out

    rx, ry = ranks(xs), ranks(ys)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    return float((rx * ry).sum() / denom) if denom > 0 else 0.0
