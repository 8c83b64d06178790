"""Beam-search decoding and evaluation metrics (WER, ECE, AUC).

The beam keeps one decoder pass per live hypothesis per step, optionally
interpolating the attention score with a CTC prefix score. Hypotheses carry
per-token probabilities and decoder hidden states so the confidence module
can score them without re-decoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import EmptyReferenceSet
from .model import BLANK_ID, EOS_ID, SOS_ID, ConformerModel, EncoderOutput

TOP_K = 10


@dataclass
class DecodeConfig:
    beam_size: int = 4
    max_len_ratio: float = 1.0
    ctc_weight: float = 0.3

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must be in [0, 1]")


@dataclass
class Hypothesis:
    """Best decode of one utterance.

    `per_token_probs` lists the decoder probability of every emitted symbol
    including the final eos when the hypothesis finished, so `att_log_prob`
    (and `score` when ctc_weight=0) equals the sum of their logs. The hidden
    states and top-k blocks cover only the real tokens (eos feeds no
    confidence record).
    """

    tokens: list
    score: float
    att_log_prob: float
    per_token_probs: list
    per_token_hidden: list
    per_token_top_probs: list
    per_token_top_log_probs: list
    finished: bool


class CtcPrefixScorer:
    """Prefix-probability scoring over per-frame CTC log-probs.

    State per hypothesis: (gamma_n, gamma_b) arrays over frames, the log
    probabilities of emitting the prefix with paths ending in the last
    non-blank symbol / in blank.
    """

    def __init__(self, log_probs: np.ndarray, blank: int = BLANK_ID):
        self.x = np.asarray(log_probs, dtype=np.float64)
        self.blank = blank
        self.t_len = self.x.shape[0]

    def initial_state(self):
        gamma_n = np.full(self.t_len, -np.inf)
        gamma_b = np.cumsum(self.x[:, self.blank])
        return gamma_n, gamma_b

    def score_candidates(self, state, last_token: Optional[int], cand_ids):
        """Return (prefix_scores, new_states) for extending by each candidate."""
        gamma_n, gamma_b = state
        cands = np.asarray(cand_ids, dtype=np.int64)
        c = cands.shape[0]
        xs = self.x[:, cands]
        if last_token is None:
            same = np.zeros(c, dtype=bool)
        else:
            same = cands == last_token
        # Repeating the last label needs an intervening blank: only gamma_b feeds it.
        phi = np.logaddexp(gamma_b[:, None],
                           np.where(same[None, :], -np.inf, gamma_n[:, None]))
        new_n = np.full((self.t_len, c), -np.inf)
        first = xs[0] if last_token is None else np.full(c, -np.inf)
        new_n[0] = first
        for t in range(1, self.t_len):
            new_n[t] = np.logaddexp(new_n[t - 1], phi[t - 1]) + xs[t]
        new_b = np.full((self.t_len, c), -np.inf)
        for t in range(1, self.t_len):
            new_b[t] = np.logaddexp(new_b[t - 1], new_n[t - 1]) \
                + self.x[t, self.blank]
        # psi: total prefix probability of emitting the extended sequence.
        terms = phi[:-1] + xs[1:]
        psi = np.logaddexp(first, _logsumexp_rows(terms)) if self.t_len > 1 else first
        states = [(new_n[:, j].copy(), new_b[:, j].copy()) for j in range(c)]
        return psi, states

    def final_score(self, state) -> float:
        gamma_n, gamma_b = state
        return float(np.logaddexp(gamma_n[-1], gamma_b[-1]))


def _logsumexp_rows(arr: np.ndarray) -> np.ndarray:
    if arr.shape[0] == 0:
        return np.full(arr.shape[1], -np.inf)
    m = arr.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.exp(arr - safe).sum(axis=0))
    return np.where(np.isfinite(m), out, -np.inf)


def _top_k_blocks(log_probs: np.ndarray, k: int = TOP_K):
    probs = np.exp(log_probs)
    order = np.argsort(-probs, kind="stable")[:k]
    top_p = np.zeros(k)
    top_lp = np.zeros(k)
    top_p[:order.size] = probs[order]
    top_lp[:order.size] = log_probs[order]
    return top_p, top_lp


@dataclass
class _Beam:
    tokens: tuple
    att_lp: float
    score: float
    ctc_state: object
    probs: list
    hidden: list
    top_p: list
    top_lp: list


def beam_search(model: ConformerModel, enc, cfg: DecodeConfig,
                speaker=None) -> Hypothesis:
    """Length-bounded beam search; returns the best finished hypothesis.

    `enc` may be an EncoderOutput or raw features (encoded here with the
    given speaker). When nothing finishes within the length bound the best
    live hypothesis is returned with finished=False.
    """
    if not isinstance(enc, EncoderOutput):
        with ad.no_grad():
            enc = model.encode(enc, speaker=speaker)
    max_len = max(1, int(cfg.max_len_ratio * enc.frame_count))
    max_len = min(max_len, model.config.max_decode_len - 3)
    scorer = None
    if cfg.ctc_weight > 0.0:
        with ad.no_grad():
            scorer = CtcPrefixScorer(model.ctc_logits(enc).data)
    vocab = model.config.vocab_size
    cand_ids = np.array([v for v in range(vocab) if v not in (BLANK_ID, SOS_ID)],
                        dtype=np.int64)
    w = cfg.ctc_weight

    init_state = scorer.initial_state() if scorer else None
    beams = [_Beam((), 0.0, 0.0, init_state, [], [], [], [])]
    finished: list[Hypothesis] = []

    # One extra step restricted to eos so a hypothesis may use the full token
    # budget and still terminate.
    for step in range(max_len + 1):
        last_step = step == max_len
        step_cands = np.array([EOS_ID]) if last_step else cand_ids
        candidates: list[tuple] = []
        for beam in beams:
            log_probs, hidden = model.decode_step(enc, [SOS_ID, *beam.tokens])
            if scorer is not None:
                last = beam.tokens[-1] if beam.tokens else None
                ctc_scores, ctc_states = scorer.score_candidates(
                    beam.ctc_state, last, step_cands)
            for j, v in enumerate(step_cands):
                att_lp = beam.att_lp + float(log_probs[v])
                if scorer is not None:
                    if v == EOS_ID:
                        ctc_part = scorer.final_score(beam.ctc_state)
                        state = beam.ctc_state
                    else:
                        ctc_part = float(ctc_scores[j])
                        state = ctc_states[j]
                    score = (1.0 - w) * att_lp + w * ctc_part
                else:
                    state = None
                    score = att_lp
                candidates.append((score, att_lp, int(v), beam, state,
                                   log_probs, hidden))
        candidates.sort(key=lambda cand: (-cand[0], cand[2], cand[3].tokens))
        next_beams = []
        for rank, cand in enumerate(candidates):
            score, att_lp, v, beam, state, log_probs, hidden = cand
            if v == EOS_ID:
                # eos finishes a hypothesis only from within the beam top-k,
                # keeping beam_size=1 identical to greedy argmax decoding.
                if rank < cfg.beam_size:
                    finished.append(Hypothesis(
                        tokens=list(beam.tokens), score=score, att_log_prob=att_lp,
                        per_token_probs=beam.probs + [float(np.exp(log_probs[v]))],
                        per_token_hidden=list(beam.hidden),
                        per_token_top_probs=list(beam.top_p),
                        per_token_top_log_probs=list(beam.top_lp),
                        finished=True))
                continue
            if len(next_beams) >= cfg.beam_size:
                continue
            top_p, top_lp = _top_k_blocks(log_probs)
            next_beams.append(_Beam(
                tokens=beam.tokens + (v,), att_lp=att_lp, score=score,
                ctc_state=state,
                probs=beam.probs + [float(np.exp(log_probs[v]))],
                hidden=beam.hidden + [hidden],
                top_p=beam.top_p + [top_p],
                top_lp=beam.top_lp + [top_lp]))
        beams = next_beams
        if not beams:
            break

    if finished:
        finished.sort(key=lambda h: (-h.score, h.tokens))
        return finished[0]
    best = max(beams, key=lambda b: b.score)
    return Hypothesis(tokens=list(best.tokens), score=best.score,
                      att_log_prob=best.att_lp, per_token_probs=list(best.probs),
                      per_token_hidden=list(best.hidden),
                      per_token_top_probs=list(best.top_p),
                      per_token_top_log_probs=list(best.top_lp),
                      finished=False)


# -- alignment / WER ------------------------------------------------------------

def levenshtein_alignment(hyp: Sequence, ref: Sequence) -> list:
    """Minimal edit alignment as a list of ops over hypothesis tokens.

    Ops are ("match"|"sub"|"ins"|"del"); walking from the front and preferring
    match > sub > ins > del among cost-consistent moves makes ties
    deterministic and matches the leftmost-match convention.
    """
    hyp, ref = list(hyp), list(ref)
    n, m = len(hyp), len(ref)
    suffix = np.zeros((n + 1, m + 1), dtype=np.int64)
    suffix[n, :] = np.arange(m, -1, -1)
    suffix[:, m] = np.arange(n, -1, -1)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            diag = suffix[i + 1, j + 1] + (0 if hyp[i] == ref[j] else 1)
            suffix[i, j] = min(diag, suffix[i + 1, j] + 1, suffix[i, j + 1] + 1)
    ops = []
    i = j = 0
    while i < n or j < m:
        cost = suffix[i, j]
        if i < n and j < m and hyp[i] == ref[j] and cost == suffix[i + 1, j + 1]:
            ops.append("match")
            i, j = i + 1, j + 1
        elif i < n and j < m and cost == suffix[i + 1, j + 1] + 1:
            ops.append("sub")
            i, j = i + 1, j + 1
        elif i < n and cost == suffix[i + 1, j] + 1:
            ops.append("ins")
            i += 1
        else:
            ops.append("del")
            j += 1
    return ops


class WerCounts(NamedTuple):
    wer: float
    substitutions: int
    deletions: int
    insertions: int
    ref_tokens: int


def word_error_rate(hyps: Sequence[Sequence], refs: Sequence[Sequence]) -> WerCounts:
    """(S+D+I) / total reference tokens over paired hypothesis/reference lists."""
    hyps, refs = list(hyps), list(refs)
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not refs:
        raise EmptyReferenceSet("no reference utterances")
    subs = dels = ins = ref_total = 0
    for hyp, ref in zip(hyps, refs):
        ref_total += len(ref)
        for op in levenshtein_alignment(hyp, ref):
            if op == "sub":
                subs += 1
            elif op == "del":
                dels += 1
            elif op == "ins":
                ins += 1
    if ref_total == 0:
        raise EmptyReferenceSet("references contain no tokens")
    wer = (subs + dels + ins) / ref_total
    return WerCounts(wer, subs, dels, ins, ref_total)


# -- calibration ------------------------------------------------------------------

class CalibrationReport(NamedTuple):
    ece: float
    auc: float
    auc_defined: bool


def ece_score(scores, labels, num_bins: int = 10) -> float:
    """Equal-width expected calibration error over [0, 1]."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    bins = np.clip((scores * num_bins).astype(np.int64), 0, num_bins - 1)
    total = scores.size
    ece = 0.0
    for b in range(num_bins):
        mask = bins == b
        count = int(mask.sum())
        if count == 0:
            continue
        ece += (count / total) * abs(labels[mask].mean() - scores[mask].mean())
    return float(ece)


def _rankdata(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_score(scores, labels):
    """Rank-statistic AUC with midranks for ties; (value, defined) pair."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        return float("nan"), False
    ranks = _rankdata(scores)
    auc = (ranks[labels == 1].sum() - pos * (pos + 1) / 2.0) / (pos * neg)
    return float(auc), True


def calibration_metrics(records, score_field: str = "smoothed") -> CalibrationReport:
    """ECE and AUC of per-token confidence records against correctness labels."""
    scores = [getattr(r, score_field) for r in records]
    labels = [r.label for r in records]
    ece = ece_score(scores, labels)
    auc, defined = auc_score(scores, labels)
    return CalibrationReport(ece, auc, defined)


_DECODE_MAGIC = "# lhuc-asr decode output v1"


def write_decode_output(path, rows) -> None:
    """rows: iterable of (utterance_id, tokens, score, confidence-or-None)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{_DECODE_MAGIC}\tcolumns=utterance_id,tokens,score,confidence\n")
        for utterance_id, tokens, score, confidence in rows:
            toks = " ".join(str(t) for t in tokens)
            conf = "NA" if confidence is None else repr(float(confidence))
            fh.write(f"{utterance_id}\t{toks}\t{repr(float(score))}\t{conf}\n")


def read_decode_output(path) -> list:
    from .errors import MalformedLine
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith(_DECODE_MAGIC):
            raise MalformedLine(1, "bad decode output header")
        for lineno, line in enumerate(fh, start=2):
            cols = line.rstrip("\n").split("\t")
            if len(cols) != 4:
                raise MalformedLine(lineno, f"expected 4 columns, got {len(cols)}")
            tokens = [int(t) for t in cols[1].split()] if cols[1] else []
            conf = None if cols[3] == "NA" else float(cols[3])
            rows.append((cols[0], tokens, float(cols[2]), conf))
    return rows


def greedy_decode(model: ConformerModel, enc, cfg: DecodeConfig,
                  speaker=None) -> Hypothesis:
    """Stepwise argmax under the same scoring as the beam; reference path."""
    if not isinstance(enc, EncoderOutput):
        with ad.no_grad():
            enc = model.encode(enc, speaker=speaker)
    max_len = max(1, int(cfg.max_len_ratio * enc.frame_count))
    max_len = min(max_len, model.config.max_decode_len - 3)
    scorer = None
    if cfg.ctc_weight > 0.0:
        with ad.no_grad():
            scorer = CtcPrefixScorer(model.ctc_logits(enc).data)
    vocab = model.config.vocab_size
    cand_ids = np.array([v for v in range(vocab) if v not in (BLANK_ID, SOS_ID)],
                        dtype=np.int64)
    w = cfg.ctc_weight
    tokens: list[int] = []
    att_lp = 0.0
    state = scorer.initial_state() if scorer else None
    probs, hiddens, tops_p, tops_lp = [], [], [], []
    for step in range(max_len + 1):
        step_cands = np.array([EOS_ID]) if step == max_len else cand_ids
        log_probs, hidden = model.decode_step(enc, [SOS_ID, *tokens])
        att_cands = att_lp + log_probs[step_cands]
        if scorer is not None:
            last = tokens[-1] if tokens else None
            ctc_scores, ctc_states = scorer.score_candidates(state, last,
                                                             step_cands)
            ctc_scores = ctc_scores.copy()
            for j, v in enumerate(step_cands):
                if v == EOS_ID:
                    ctc_scores[j] = scorer.final_score(state)
            scores = (1.0 - w) * att_cands + w * ctc_scores
        else:
            scores = att_cands
        j = int(np.argmax(scores))
        v = int(step_cands[j])
        att_lp = float(att_cands[j])
        if v == EOS_ID:
            return Hypothesis(tokens=tokens, score=float(scores[j]),
                              att_log_prob=att_lp,
                              per_token_probs=probs + [float(np.exp(log_probs[v]))],
                              per_token_hidden=hiddens,
                              per_token_top_probs=tops_p,
                              per_token_top_log_probs=tops_lp, finished=True)
        top_p, top_lp = _top_k_blocks(log_probs)
        tokens.append(v)
        probs.append(float(np.exp(log_probs[v])))
        hiddens.append(hidden)
        tops_p.append(top_p)
        tops_lp.append(top_lp)
        if scorer is not None:
            state = ctc_states[j]
        last_score = float(scores[j])
    return Hypothesis(tokens=tokens, score=last_score, att_log_prob=att_lp,
                      per_token_probs=probs, per_token_hidden=hiddens,
                      per_token_top_probs=tops_p, per_token_top_log_probs=tops_lp,
                      finished=False)
