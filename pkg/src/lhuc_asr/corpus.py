"""Deterministic synthetic multi-speaker corpus.

Every token has a fixed prototype feature pattern; an utterance concatenates
its tokens' prototypes, multiplies elementwise by a per-speaker channel gain
vector, and adds Gaussian noise. The gain is exactly the nuisance the LHUC
scale can absorb, and gains are clamped inside (0.1, 1.9) so an inverse
compensation always exists within the (0, 2) scaling range.

Train/dev splits share speakers (dev holds out utterances); test speakers are
disjoint from both.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import MalformedLine, MissingFeatureFile, SpecInvalid
from .model import FIRST_TOKEN_ID

GAIN_MIN, GAIN_MAX = 0.1, 1.9
_FEATURE_MAGIC = b"LHUCFEAT"
_MANIFEST_MAGIC = "# lhuc-asr manifest v1"


def _stable_stream(*parts) -> np.random.Generator:
    """Generator derived from a global seed plus stable string/int keys."""
    keys = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return np.random.default_rng(np.random.SeedSequence(keys))


@dataclass
class CorpusSpec:
    num_speakers: int = 20
    num_test_speakers: int = 8
    utterances_per_speaker: int = 30
    utterances_per_test_speaker: Optional[int] = None   # None: same as train
    vocab_size: int = 8              # real tokens; model vocab adds blank/sos/eos
    token_len_range: tuple = (3, 6)
    frames_per_token: int = 4
    feat_dim: int = 8
    speaker_gain_log_std: float = 0.5
    noise_std: float = 0.1
    dev_fraction: float = 0.2
    seed: int = 0

    def validate(self):
        counts = (self.num_speakers, self.num_test_speakers,
                  self.utterances_per_speaker,
                  self.utterances_per_test_speaker or 1, self.vocab_size,
                  self.frames_per_token, self.feat_dim)
        if any(c < 1 for c in counts):
            raise SpecInvalid(f"all counts must be >= 1: {self}")
        lo, hi = self.token_len_range
        if not (1 <= lo <= hi):
            raise SpecInvalid(f"bad token_len_range {self.token_len_range}")
        if self.speaker_gain_log_std < 0 or self.noise_std < 0:
            raise SpecInvalid("spreads must be non-negative")
        if not 0.0 <= self.dev_fraction < 1.0:
            raise SpecInvalid(f"bad dev_fraction {self.dev_fraction}")


@dataclass
class Utterance:
    utterance_id: str
    speaker_id: str
    features: np.ndarray
    reference: list

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.reference = [int(t) for t in self.reference]


@dataclass
class Corpus:
    spec: CorpusSpec
    train: list = field(default_factory=list)
    dev: list = field(default_factory=list)
    test: list = field(default_factory=list)
    prototypes: Optional[np.ndarray] = None      # [vocab, frames_per_token, feat]
    speaker_gains: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return {"train": self.train, "dev": self.dev, "test": self.test}[name]

    def speakers(self, split: str) -> list:
        seen = {}
        for utt in self.split(split):
            seen.setdefault(utt.speaker_id, True)
        return list(seen)


def token_prototypes(spec: CorpusSpec) -> np.ndarray:
    # Energy-like non-negative patterns (cf. filterbank features): identity is
    # carried by per-channel magnitudes, so multiplicative speaker gains are
    # genuinely confusable and per-channel rescaling is the right correction.
    rng = _stable_stream(spec.seed, "prototypes")
    shape = (spec.vocab_size, spec.frames_per_token, spec.feat_dim)
    return np.abs(rng.normal(0.0, 1.0, shape)) + 0.2


def speaker_gain(spec: CorpusSpec, speaker_id: str) -> np.ndarray:
    rng = _stable_stream(spec.seed, "gain", speaker_id)
    gains = np.exp(rng.normal(0.0, spec.speaker_gain_log_std, spec.feat_dim))
    return np.clip(gains, GAIN_MIN, GAIN_MAX)


def _make_utterance(spec: CorpusSpec, protos: np.ndarray, gain: np.ndarray,
                    speaker_id: str, index: int) -> Utterance:
    rng = _stable_stream(spec.seed, "utt", speaker_id, index)
    lo, hi = spec.token_len_range
    length = int(rng.integers(lo, hi + 1))
    # No adjacent repeats: keeps every oracle reference CTC-alignable even at
    # one post-subsampling frame per token.
    tokens: list = []
    while len(tokens) < length:
        t = int(rng.integers(0, spec.vocab_size))
        if not tokens or t != tokens[-1] or spec.vocab_size == 1:
            tokens.append(t)
    feats = np.concatenate([protos[t] for t in tokens], axis=0)
    feats = feats * gain[None, :]
    if spec.noise_std > 0:
        feats = feats + rng.normal(0.0, spec.noise_std, feats.shape)
    reference = [int(t) + FIRST_TOKEN_ID for t in tokens]
    return Utterance(f"{speaker_id}-u{index:03d}", speaker_id, feats, reference)


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Build speaker-disjoint train/dev/test splits deterministically."""
    spec.validate()
    protos = token_prototypes(spec)
    corpus = Corpus(spec=spec, prototypes=protos)
    train_speakers = [f"spk{i:03d}" for i in range(spec.num_speakers)]
    test_speakers = [f"tst{i:03d}" for i in range(spec.num_test_speakers)]
    if set(train_speakers) & set(test_speakers):
        raise SpecInvalid("train/test speaker overlap")
    n_dev = int(round(spec.dev_fraction * spec.utterances_per_speaker))
    for speaker_id in train_speakers:
        gain = speaker_gain(spec, speaker_id)
        corpus.speaker_gains[speaker_id] = gain
        for i in range(spec.utterances_per_speaker):
            utt = _make_utterance(spec, protos, gain, speaker_id, i)
            (corpus.dev if i < n_dev else corpus.train).append(utt)
    n_test = spec.utterances_per_test_speaker or spec.utterances_per_speaker
    for speaker_id in test_speakers:
        gain = speaker_gain(spec, speaker_id)
        corpus.speaker_gains[speaker_id] = gain
        for i in range(n_test):
            corpus.test.append(_make_utterance(spec, protos, gain, speaker_id, i))
    return corpus


def corrupt_references(utterances: Sequence[Utterance], token_error_rate: float,
                       vocab_size: int, seed: int) -> list:
    """Substitute tokens independently at the requested rate (controlled
    supervision noise for the selection experiments)."""
    if not 0.0 <= token_error_rate <= 1.0:
        raise SpecInvalid(f"token_error_rate {token_error_rate} outside [0, 1]")
    out = []
    for utt in utterances:
        rng = _stable_stream(seed, "corrupt", utt.utterance_id)
        ref = list(utt.reference)
        for i in range(len(ref)):
            if rng.random() < token_error_rate:
                banned = {ref[i]}
                if i > 0:
                    banned.add(ref[i - 1])
                if i + 1 < len(ref):
                    banned.add(ref[i + 1])
                choices = [FIRST_TOKEN_ID + v for v in range(vocab_size)
                           if FIRST_TOKEN_ID + v not in banned]
                if not choices:  # tiny vocab: allow adjacent repeats
                    choices = [FIRST_TOKEN_ID + v for v in range(vocab_size)
                               if FIRST_TOKEN_ID + v != ref[i]]
                if choices:
                    ref[i] = int(choices[rng.integers(0, len(choices))])
        out.append(replace(utt, reference=ref))
    return out


# -- feature files ----------------------------------------------------------------

def write_features(path, array: np.ndarray) -> None:
    """Raw little-endian float64 with a 16-byte header (magic, rows, cols)."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    if arr.ndim != 2:
        raise SpecInvalid(f"feature arrays are 2-D, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_features(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFeatureFile(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != _FEATURE_MAGIC:
        raise MalformedLine(0, f"bad feature header in {path}")
    rows, cols = struct.unpack("<II", raw[8:16])
    expected = 16 + rows * cols * 8
    if len(raw) != expected:
        raise MalformedLine(0, f"feature file {path} truncated")
    return np.frombuffer(raw[16:], dtype="<f8").reshape(rows, cols).copy()


# -- manifest -----------------------------------------------------------------------

def write_manifest(corpus_dir, corpus: Corpus) -> Path:
    """Write features plus a line-per-utterance index; returns manifest path."""
    corpus_dir = Path(corpus_dir)
    feat_dir = corpus_dir / "feats"
    feat_dir.mkdir(parents=True, exist_ok=True)
    manifest = corpus_dir / "manifest.tsv"
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write(f"{_MANIFEST_MAGIC}\tcolumns=utterance_id,speaker_id,split,"
                 f"features,reference\n")
        for split in ("train", "dev", "test"):
            for utt in corpus.split(split):
                rel = f"feats/{utt.utterance_id}.f64"
                write_features(corpus_dir / rel, utt.features)
                ref = " ".join(str(t) for t in utt.reference)
                fh.write(f"{utt.utterance_id}\t{utt.speaker_id}\t{split}\t{rel}\t{ref}\n")
    return manifest


def read_manifest(manifest_path) -> dict:
    """Load the index back into {split: [Utterance]}; round-trips exactly."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    splits: dict = {"train": [], "dev": [], "test": []}
    with open(manifest_path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(_MANIFEST_MAGIC):
            raise MalformedLine(1, "bad manifest header")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise MalformedLine(lineno, f"expected 5 columns, got {len(cols)}")
            utterance_id, speaker_id, split, rel, ref = cols
            if split not in splits:
                raise MalformedLine(lineno, f"unknown split {split!r}")
            try:
                reference = [int(t) for t in ref.split()] if ref else []
            except ValueError as exc:
                raise MalformedLine(lineno, f"bad reference: {exc}") from exc
            features = read_features(base / rel)
            splits[split].append(Utterance(utterance_id, speaker_id, features,
                                           reference))
    return splits
