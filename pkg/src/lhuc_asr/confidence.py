"""Confidence estimation: smoothing decoder probabilities with a small
residual classifier, correctness labels from edit-distance alignment, and
percentile-based selection of trustworthy utterances.

Raw decoder softmax probabilities are over-confident; the estimation module
maps (last decoder hidden state ++ top-10 softmax block) to a calibrated
per-token correctness probability. Utterance confidence is the mean over its
tokens.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoding import Hypothesis, auc_score, levenshtein_alignment
from .errors import DimMismatch, EmptyUtterance, MalformedLine, NoConfidences, \
    SingleClassDump

CEM_HIDDEN = 64
CEM_TOP_K = 10
_CLAMP = 1e-12


@dataclass
class ConfidenceRecord:
    """Per-token features and scores for one emitted hypothesis token."""

    utterance_id: str
    token_index: int
    token_id: int
    raw_prob: float
    hidden: np.ndarray
    top_probs: np.ndarray
    top_log_probs: np.ndarray
    smoothed: Optional[float] = None
    label: Optional[int] = None

    def __post_init__(self):
        self.hidden = np.asarray(self.hidden, dtype=np.float64)
        self.top_probs = np.asarray(self.top_probs, dtype=np.float64)
        self.top_log_probs = np.asarray(self.top_log_probs, dtype=np.float64)
        if not 0.0 < self.raw_prob <= 1.0:
            raise ValueError(f"raw_prob {self.raw_prob} outside (0, 1]")

    def cem_features(self, block: str = "probs") -> np.ndarray:
        """d_model + 10 feature vector; `block` picks the top-k representation."""
        top = self.top_probs if block == "probs" else self.top_log_probs
        return np.concatenate([self.hidden, top])


def records_from_hypothesis(utterance_id: str, hyp: Hypothesis) -> list:
    return [
        ConfidenceRecord(
            utterance_id=utterance_id, token_index=i, token_id=tok,
            raw_prob=hyp.per_token_probs[i], hidden=hyp.per_token_hidden[i],
            top_probs=hyp.per_token_top_probs[i],
            top_log_probs=hyp.per_token_top_log_probs[i])
        for i, tok in enumerate(hyp.tokens)
    ]


# -- labels -------------------------------------------------------------------

def align_labels(hypothesis: Sequence, reference: Sequence) -> list:
    """1 for hypothesis tokens aligned to an equal reference token, else 0.

    Deletions produce no hypothesis label, so the output length equals the
    hypothesis length. Ties between minimal alignments are broken by walking
    from the front preferring match > substitution > insertion > deletion.
    """
    labels = []
    for op in levenshtein_alignment(hypothesis, reference):
        if op == "match":
            labels.append(1)
        elif op in ("sub", "ins"):
            labels.append(0)
    return labels


def label_records(records: Sequence[ConfidenceRecord], hypothesis: Sequence,
                  reference: Sequence) -> None:
    labels = align_labels(hypothesis, reference)
    if len(labels) != len(records):
        raise DimMismatch(f"{len(records)} records vs {len(labels)} labels")
    for record, label in zip(records, labels):
        record.label = label


# -- the estimation model ------------------------------------------------------

@dataclass
class CemConfig:
    epochs: int = 40
    learning_rate: float = 0.05
    batch_size: int = 64
    dropout_rate: float = 0.1
    feature_block: str = "probs"   # or "log_probs"
    val_fraction: float = 0.1
    seed: int = 0


class CemModel:
    """3-layer residual feed-forward scorer with batch-norm and dropout.

    Scoring runs in inference mode with training-set running statistics.
    """

    def __init__(self, input_dim: int, cfg: CemConfig):
        self.input_dim = input_dim
        self.cfg = cfg
        self.validation_auc: Optional[float] = None
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xCE]))
        self.params: dict[str, Tensor] = {}

        def xavier(name, din, dout):
            a = math.sqrt(6.0 / (din + dout))
            self.params[name] = Tensor(rng.uniform(-a, a, (din, dout)),
                                       requires_grad=True)

        xavier("in.w", input_dim, CEM_HIDDEN)
        self.params["in.b"] = Tensor(np.zeros(CEM_HIDDEN), requires_grad=True)
        for i in range(3):
            xavier(f"l{i}.w", CEM_HIDDEN, CEM_HIDDEN)
            self.params[f"l{i}.b"] = Tensor(np.zeros(CEM_HIDDEN), requires_grad=True)
            self.params[f"bn{i}.g"] = Tensor(np.ones(CEM_HIDDEN), requires_grad=True)
            self.params[f"bn{i}.b"] = Tensor(np.zeros(CEM_HIDDEN), requires_grad=True)
        xavier("out.w", CEM_HIDDEN, 1)
        self.params["out.b"] = Tensor(np.zeros(1), requires_grad=True)
        self.running_mean = [np.zeros(CEM_HIDDEN) for _ in range(3)]
        self.running_var = [np.ones(CEM_HIDDEN) for _ in range(3)]
        self._bn_momentum = 0.1

    def _batchnorm(self, i: int, z: Tensor, training: bool) -> Tensor:
        eps = 1e-8
        if training:
            m = ad.mean(z, axis=0)
            centered = z - m
            var = ad.mean(ad.square(centered), axis=0)
            zn = centered / ad.sqrt(var + eps)
            mom = self._bn_momentum
            self.running_mean[i] = (1 - mom) * self.running_mean[i] + mom * m.data
            self.running_var[i] = (1 - mom) * self.running_var[i] + mom * var.data
        else:
            zn = (z - ad.constant(self.running_mean[i])) \
                / ad.constant(np.sqrt(self.running_var[i] + eps))
        return zn * self.params[f"bn{i}.g"] + self.params[f"bn{i}.b"]

    def logits(self, features: np.ndarray, training: bool = False,
               rng=None) -> Tensor:
        """Pre-sigmoid scores for a [batch, input_dim] feature matrix."""
        if features.ndim != 2 or features.shape[1] != self.input_dim:
            raise DimMismatch(
                f"features {features.shape} vs input_dim {self.input_dim}")
        h = ad.conv1d_pointwise(ad.constant(features), self.params["in.w"],
                                self.params["in.b"])
        for i in range(3):
            z = ad.conv1d_pointwise(h, self.params[f"l{i}.w"], self.params[f"l{i}.b"])
            z = self._batchnorm(i, z, training)
            z = ad.relu(z)
            z = ad.dropout(z, self.cfg.dropout_rate, rng, training)
            h = h + z
        out = ad.conv1d_pointwise(h, self.params["out.w"], self.params["out.b"])
        return ad.slice_tensor(out, np.s_[:, 0])

    def scores(self, features: np.ndarray) -> np.ndarray:
        """Smoothed confidences, clamped strictly inside (0, 1)."""
        with ad.no_grad():
            z = self.logits(features, training=False).data
        return np.clip(1.0 / (1.0 + np.exp(-z)), _CLAMP, 1.0 - _CLAMP)


def cem_train(records: Sequence[ConfidenceRecord], cfg: CemConfig = CemConfig(),
              input_dim: Optional[int] = None) -> CemModel:
    """Binary cross-entropy training on labeled records from a held-out dump."""
    labeled = [r for r in records if r.label is not None]
    if not labeled:
        raise SingleClassDump("no labeled records")
    labels = np.array([r.label for r in labeled], dtype=np.float64)
    if labels.min() == labels.max():
        raise SingleClassDump(f"all labels equal {labels[0]}")
    feats = np.stack([r.cem_features(cfg.feature_block) for r in labeled])
    if input_dim is None:
        input_dim = feats.shape[1]
    model = CemModel(input_dim, cfg)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xCE, 1]))
    order = rng.permutation(len(labeled))
    n_val = max(1, int(cfg.val_fraction * len(labeled))) if len(labeled) > 10 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    x_train, y_train = feats[train_idx], labels[train_idx]
    params = list(model.params.values())

    step = 0
    for epoch in range(cfg.epochs):
        erng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xCE, 2, epoch]))
        perm = erng.permutation(len(x_train))
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if idx.size < 2:
                continue  # batch-norm needs batch statistics
            step += 1
            srng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, 0xCE, 3, step]))
            z = model.logits(x_train[idx], training=True, rng=srng)
            y = ad.constant(y_train[idx])
            # BCE from logits: y*softplus(-z) + (1-y)*softplus(z), tail-stable.
            loss = ad.mean(y * ad.softplus(-z) + (1.0 - y) * ad.softplus(z))
            ad.backward(loss)
            for p in params:
                if p.grad is not None:
                    p.data -= cfg.learning_rate * p.grad
                    p.grad = None
    if n_val:
        val_scores = model.scores(feats[val_idx])
        auc, defined = auc_score(val_scores, labels[val_idx])
        model.validation_auc = auc if defined else None
    return model


def token_confidence(cem: CemModel, record: ConfidenceRecord,
                     block: Optional[str] = None) -> float:
    """Deterministic smoothed score in (0, 1) for one record."""
    feats = record.cem_features(block or cem.cfg.feature_block)[None, :]
    return float(cem.scores(feats)[0])


def score_records(cem: CemModel, records: Sequence[ConfidenceRecord]) -> None:
    """Batch variant of token_confidence; fills record.smoothed in place."""
    if not records:
        return
    feats = np.stack([r.cem_features(cem.cfg.feature_block) for r in records])
    for record, score in zip(records, cem.scores(feats)):
        record.smoothed = float(score)


def utterance_confidence(records: Sequence[ConfidenceRecord]) -> float:
    """Arithmetic mean of the smoothed token scores of one utterance."""
    records = list(records)
    if not records:
        raise EmptyUtterance("utterance confidence needs at least one token")
    if any(r.smoothed is None for r in records):
        raise NoConfidences("records missing smoothed scores")
    return float(np.mean([r.smoothed for r in records]))


# -- selection -------------------------------------------------------------------

def select_top_percentile(adapt_set, percentile: float):
    """Keep the ceil(p/100 * n) highest-confidence utterances of the speaker.

    Stable original order; confidence ties broken by utterance_id so the
    result is deterministic. Returns a new set of the same type.
    """
    if not 0.0 < percentile <= 100.0:
        raise ValueError(f"percentile {percentile} outside (0, 100]")
    utts = list(adapt_set.utterances)
    if any(u.confidence is None for u in utts):
        raise NoConfidences(f"speaker {adapt_set.speaker_id}: missing confidences")
    if not utts:
        return dataclasses.replace(adapt_set, utterances=[])
    keep = math.ceil(percentile / 100.0 * len(utts))
    ranked = sorted(utts, key=lambda u: (-u.confidence, u.utterance_id))
    chosen = {id(u) for u in ranked[:keep]}
    return dataclasses.replace(
        adapt_set, utterances=[u for u in utts if id(u) in chosen])


# -- dump file -------------------------------------------------------------------

_DUMP_MAGIC = "# lhuc-asr confidence dump v1"


def write_confidence_dump(path, records: Sequence[ConfidenceRecord]) -> None:
    """One record per line: id, token_index, token_id, raw_prob, smoothed,
    label, then hidden ++ top_probs ++ top_log_probs columns."""
    records = list(records)
    d_hidden = records[0].hidden.shape[0] if records else 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{_DUMP_MAGIC}\td_hidden={d_hidden}\ttop_k={CEM_TOP_K}\n")
        for r in records:
            cols = [r.utterance_id, str(r.token_index), str(r.token_id),
                    repr(float(r.raw_prob)),
                    "NA" if r.smoothed is None else repr(float(r.smoothed)),
                    "NA" if r.label is None else str(r.label)]
            cols += [repr(float(v)) for v in r.hidden]
            cols += [repr(float(v)) for v in r.top_probs]
            cols += [repr(float(v)) for v in r.top_log_probs]
            fh.write("\t".join(cols) + "\n")


def read_confidence_dump(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(_DUMP_MAGIC):
            raise MalformedLine(1, "bad dump header")
        try:
            d_hidden = int(header.split("d_hidden=")[1].split("\t")[0])
        except (IndexError, ValueError) as exc:
            raise MalformedLine(1, f"bad dump header: {exc}") from exc
        records = []
        for lineno, line in enumerate(fh, start=2):
            cols = line.rstrip("\n").split("\t")
            expected = 6 + d_hidden + 2 * CEM_TOP_K
            if len(cols) != expected:
                raise MalformedLine(lineno, f"expected {expected} columns, got {len(cols)}")
            try:
                vec = np.array([float(v) for v in cols[6:]], dtype=np.float64)
                records.append(ConfidenceRecord(
                    utterance_id=cols[0], token_index=int(cols[1]),
                    token_id=int(cols[2]), raw_prob=float(cols[3]),
                    smoothed=None if cols[4] == "NA" else float(cols[4]),
                    label=None if cols[5] == "NA" else int(cols[5]),
                    hidden=vec[:d_hidden],
                    top_probs=vec[d_hidden:d_hidden + CEM_TOP_K],
                    top_log_probs=vec[d_hidden + CEM_TOP_K:]))
            except ValueError as exc:
                raise MalformedLine(lineno, str(exc)) from exc
    return records
