"""Toy-scale Conformer encoder / Transformer decoder with LHUC scaling.

The encoder is a stack of Conformer blocks fed by a two-layer strided 2-D
convolution subsampler. A per-speaker LHUC vector rescales the subsampler's
hidden output elementwise through 2*sigmoid, so r=0 is exactly the identity
and the speaker-independent model is the r=0 special case.

Vocabulary layout is fixed: index 0 is the CTC blank, 1 is sos, 2 is eos and
real tokens start at 3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimMismatch, InputTooShort, PrefixTooLong

BLANK_ID = 0
SOS_ID = 1
EOS_ID = 2
FIRST_TOKEN_ID = 3


def _ceil_div(n: int, d: int) -> int:
    return -(-n // d)


@dataclass
class ModelConfig:
    num_encoder_blocks: int = 2
    num_decoder_blocks: int = 2
    d_model: int = 16
    d_ffn: int = 32
    num_heads: int = 4
    conv_kernel: int = 3
    vocab_size: int = 11
    feat_dim: int = 8
    subsample_strides: tuple = (2, 2)
    subsample_channels: int = 4
    dropout_rate: float = 0.1
    max_decode_len: int = 48
    # Test-only construction: diagonal subsampling with activations bypassed,
    # so a per-channel input gain commutes with the LHUC scale.
    linear_probe: bool = False
    # Where the speaker scale is applied; 'subsample_output' is the default
    # placement, 'pre_projection' scales the flattened conv features instead.
    lhuc_location: str = "subsample_output"

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.num_heads} heads")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be >= 4 (blank, sos, eos + tokens)")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd")
        if self.lhuc_location not in ("subsample_output", "pre_projection"):
            raise ConfigError(f"unknown lhuc_location {self.lhuc_location!r}")
        if self.linear_probe and self.feat_dim != self.d_model:
            raise ConfigError("linear_probe requires feat_dim == d_model")
        self.subsample_strides = tuple(int(s) for s in self.subsample_strides)

    @property
    def num_real_tokens(self) -> int:
        return self.vocab_size - FIRST_TOKEN_ID

    def subsampled_length(self, frames: int) -> int:
        n = frames
        for s in self.subsample_strides:
            n = _ceil_div(n, s)
        return n

    def subsampled_feat(self) -> int:
        n = self.feat_dim
        for s in self.subsample_strides:
            n = _ceil_div(n, s)
        return n


@dataclass
class SpeakerParams:
    """Per-speaker LHUC vector; r=0 makes the scaling the exact identity."""

    speaker_id: str
    r: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64)
        if not np.all(np.isfinite(self.r)):
            raise DimMismatch(f"speaker {self.speaker_id}: non-finite r")

    @classmethod
    def identity(cls, speaker_id: str, d_lhuc: int) -> "SpeakerParams":
        return cls(speaker_id, np.zeros(d_lhuc))

    def scale(self) -> np.ndarray:
        return 2.0 / (1.0 + np.exp(-self.r))


@dataclass
class EncoderOutput:
    states: Tensor
    frame_count: int


def apply_lhuc(hidden: Tensor, speaker) -> Tensor:
    """Scale hidden channels by 2*sigmoid(r): identity at r=0, range (0, 2)."""
    r = _speaker_r(speaker)
    if r.data.shape != (hidden.data.shape[-1],):
        raise DimMismatch(
            f"LHUC dim {r.data.shape} vs hidden channels {hidden.data.shape[-1]}")
    return ad.mul(hidden, ad.two_sigmoid(r))


def _speaker_r(speaker) -> Tensor:
    if isinstance(speaker, Tensor):
        return speaker
    if isinstance(speaker, SpeakerParams):
        return ad.constant(speaker.r)
    return ad.constant(np.asarray(speaker, dtype=np.float64))


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


class ConformerModel:
    """Holds all shared weights; speaker state lives outside the model."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 params: Optional[dict] = None):
        self.config = config
        self.params: dict[str, Tensor] = params if params is not None \
            else self._init_params(seed)

    # -- parameters -------------------------------------------------------

    @property
    def d_lhuc(self) -> int:
        if self.config.linear_probe:
            return self.config.d_model
        if self.config.lhuc_location == "pre_projection":
            return self.config.subsample_channels * self.config.subsampled_feat()
        return self.config.d_model

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def parameter_tensors(self) -> dict[str, Tensor]:
        return self.params

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        cfg = self.config
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        p: dict[str, Tensor] = {}

        def xavier(name, din, dout, shape=None, gain=1.0):
            a = gain * math.sqrt(6.0 / (din + dout))
            p[name] = Tensor(rng.uniform(-a, a, shape or (din, dout)),
                             requires_grad=True)

        def zeros(name, shape):
            p[name] = Tensor(np.zeros(shape), requires_grad=True)

        def ones(name, shape):
            p[name] = Tensor(np.ones(shape), requires_grad=True)

        def linear(prefix, din, dout, gain=1.0):
            xavier(prefix + ".w", din, dout, gain=gain)
            zeros(prefix + ".b", (dout,))

        def lnorm(prefix, d):
            ones(prefix + ".g", (d,))
            zeros(prefix + ".b", (d,))

        def attention(prefix, d):
            for part in ("q", "k", "v", "o"):
                linear(f"{prefix}.w{part}", d, d)

        ch, k = cfg.subsample_channels, 3
        xavier("sub.conv1.w", 1 * k * k, ch * k * k, shape=(ch, 1, k, k))
        zeros("sub.conv1.b", (ch,))
        xavier("sub.conv2.w", ch * k * k, ch * k * k, shape=(ch, ch, k, k))
        zeros("sub.conv2.b", (ch,))
        linear("sub.proj", ch * cfg.subsampled_feat(), cfg.d_model)

        d, dffn = cfg.d_model, cfg.d_ffn
        for i in range(cfg.num_encoder_blocks):
            pre = f"enc{i}"
            for j in (1, 2, 3, 4):
                lnorm(f"{pre}.ln{j}", d)
            linear(f"{pre}.ffn1.lin1", d, dffn)
            linear(f"{pre}.ffn1.lin2", dffn, d)
            attention(f"{pre}.att", d)
            linear(f"{pre}.conv.pw1", d, 2 * d)
            linear(f"{pre}.conv.pw2", d, d)
            xavier(f"{pre}.conv.dw.w", cfg.conv_kernel, cfg.conv_kernel,
                   shape=(cfg.conv_kernel, d))
            zeros(f"{pre}.conv.dw.b", (d,))
            linear(f"{pre}.conv.pw3", d, d)
            linear(f"{pre}.ffn2.lin1", d, dffn)
            linear(f"{pre}.ffn2.lin2", dffn, d)
            lnorm(f"{pre}.ln_out", d)

        p["dec.embed"] = Tensor(rng.normal(0.0, d ** -0.5, (cfg.vocab_size, d)),
                                requires_grad=True)
        for i in range(cfg.num_decoder_blocks):
            pre = f"dec{i}"
            for j in (1, 2, 3):
                lnorm(f"{pre}.ln{j}", d)
            attention(f"{pre}.self", d)
            attention(f"{pre}.cross", d)
            linear(f"{pre}.ffn.lin1", d, dffn)
            linear(f"{pre}.ffn.lin2", dffn, d)
        lnorm("dec.ln_out", d)
        # Small output heads keep the untrained predictive distribution
        # near uniform and early training stable.
        linear("dec.out", d, cfg.vocab_size, gain=0.1)
        linear("ctc.out", d, cfg.vocab_size, gain=0.1)
        return p

    # -- building blocks ----------------------------------------------------

    def _linear(self, prefix: str, x: Tensor) -> Tensor:
        return ad.conv1d_pointwise(x, self.params[prefix + ".w"],
                                   self.params[prefix + ".b"])

    def _layernorm(self, prefix: str, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def _dropout(self, x: Tensor, training: bool, rng) -> Tensor:
        return ad.dropout(x, self.config.dropout_rate, rng, training)

    def _ffn(self, prefix: str, x: Tensor, training: bool, rng) -> Tensor:
        h = ad.swish(self._linear(prefix + ".lin1", x))
        h = self._dropout(h, training, rng)
        return self._dropout(self._linear(prefix + ".lin2", h), training, rng)

    def _attention(self, prefix: str, q_in: Tensor, kv_in: Tensor,
                   mask: Optional[np.ndarray], training: bool, rng) -> Tensor:
        cfg = self.config
        dk = cfg.d_model // cfg.num_heads
        q = self._linear(prefix + ".wq", q_in)
        k = self._linear(prefix + ".wk", kv_in)
        v = self._linear(prefix + ".wv", kv_in)
        scale = 1.0 / math.sqrt(dk)
        heads = []
        for h in range(cfg.num_heads):
            sl = np.s_[:, h * dk:(h + 1) * dk]
            scores = ad.matmul(q[sl], ad.transpose(k[sl])) * scale
            if mask is not None:
                scores = scores + ad.constant(mask)
            attn = ad.softmax(scores, axis=-1)
            heads.append(ad.matmul(attn, v[sl]))
        out = ad.concat(heads, axis=1) if len(heads) > 1 else heads[0]
        return self._dropout(self._linear(prefix + ".wo", out), training, rng)

    def _conv_module(self, prefix: str, x: Tensor, training: bool, rng) -> Tensor:
        h = ad.glu(self._linear(prefix + ".pw1", x))
        h = self._linear(prefix + ".pw2", h)
        h = ad.conv1d_depthwise(h, self.params[prefix + ".dw.w"],
                                self.params[prefix + ".dw.b"])
        h = ad.swish(h)
        return self._dropout(self._linear(prefix + ".pw3", h), training, rng)

    def _encoder_block(self, i: int, x: Tensor, training: bool, rng) -> Tensor:
        pre = f"enc{i}"
        x = x + 0.5 * self._ffn(f"{pre}.ffn1", self._layernorm(f"{pre}.ln1", x),
                                training, rng)
        normed = self._layernorm(f"{pre}.ln2", x)
        x = x + self._attention(f"{pre}.att", normed, normed, None, training, rng)
        x = x + self._conv_module(f"{pre}.conv", self._layernorm(f"{pre}.ln3", x),
                                  training, rng)
        x = x + 0.5 * self._ffn(f"{pre}.ffn2", self._layernorm(f"{pre}.ln4", x),
                                training, rng)
        return self._layernorm(f"{pre}.ln_out", x)

    # -- subsampling ---------------------------------------------------------

    def subsample(self, features, speaker=None, training: bool = False,
                  rng=None) -> Tensor:
        """Two stride-2 conv layers then projection to d_model.

        Output length is the ceil-division of the input frames by the product
        of the strides. In linear-probe mode the convolution is replaced by a
        diagonal frame gather so channel gains commute through.
        """
        feats = features if isinstance(features, Tensor) else ad.constant(features)
        frames, feat_dim = feats.data.shape
        if frames < 4:
            raise InputTooShort(frames, 4)
        if feat_dim != self.config.feat_dim:
            raise DimMismatch(f"feat_dim {feat_dim} != config {self.config.feat_dim}")
        out_len = self.config.subsampled_length(frames)

        if self.config.linear_probe:
            step = int(np.prod(self.config.subsample_strides))
            idx = np.minimum(np.arange(out_len) * step, frames - 1)
            return ad.embedding(feats, idx)

        x = feats[np.newaxis, :, :]
        s1, s2 = self.config.subsample_strides
        x = ad.relu(ad.conv2d(x, self.params["sub.conv1.w"], self.params["sub.conv1.b"],
                    stride=(s1, s1), padding=(1, 1)))
        x = ad.relu(ad.conv2d(x, self.params["sub.conv2.w"], self.params["sub.conv2.b"],
                    stride=(s2, s2), padding=(1, 1)))
        ch = x.data.shape[0]
        # [ch, F', D'] -> [F', ch*D'] keeping frame order.
        cols = [x[c] for c in range(ch)]
        flat = ad.concat(cols, axis=1)
        if speaker is not None and self.config.lhuc_location == "pre_projection":
            flat = apply_lhuc(flat, speaker)
        out = self._linear("sub.proj", flat)
        assert out.data.shape[0] == out_len
        return out

    # -- encoder / decoder -----------------------------------------------------

    def encode(self, features, speaker=None, training: bool = False, rng=None,
               subsample_out: Optional[Tensor] = None) -> EncoderOutput:
        """Subsample, scale by the speaker's LHUC vector, run encoder blocks.

        `subsample_out` short-circuits the (speaker-independent) subsampler;
        adaptation loops use it to cache the expensive convolution.
        """
        if subsample_out is not None:
            if speaker is not None and self.config.lhuc_location == "pre_projection":
                raise ConfigError("subsample cache is invalid for pre_projection LHUC")
            hidden = subsample_out
        else:
            hidden = self.subsample(features, speaker=speaker, training=training, rng=rng)
        if speaker is not None and self.config.lhuc_location == "subsample_output":
            hidden = apply_lhuc(hidden, speaker)
        for i in range(self.config.num_encoder_blocks):
            hidden = self._encoder_block(i, hidden, training, rng)
        return EncoderOutput(states=hidden, frame_count=hidden.data.shape[0])

    def decoder_forward(self, enc: EncoderOutput, tokens,
                        training: bool = False, rng=None):
        """Teacher-forced decoder pass over a token prefix.

        Returns (log_probs [L, vocab], hidden [L, d_model]); hidden is the
        final decoder-layer state feeding the output projection.
        """
        cfg = self.config
        ids = np.asarray(tokens, dtype=np.int64)
        length = ids.shape[0]
        x = ad.embedding(self.params["dec.embed"], ids) * math.sqrt(cfg.d_model)
        x = x + ad.constant(sinusoidal_positions(length, cfg.d_model))
        x = self._dropout(x, training, rng)
        mask = np.triu(np.full((length, length), -1e30), k=1)
        for i in range(cfg.num_decoder_blocks):
            pre = f"dec{i}"
            normed = self._layernorm(f"{pre}.ln1", x)
            x = x + self._attention(f"{pre}.self", normed, normed, mask, training, rng)
            x = x + self._attention(f"{pre}.cross", self._layernorm(f"{pre}.ln2", x),
                                    enc.states, None, training, rng)
            x = x + self._ffn(f"{pre}.ffn", self._layernorm(f"{pre}.ln3", x),
                              training, rng)
        hidden = self._layernorm("dec.ln_out", x)
        log_probs = ad.log_softmax(self._linear("dec.out", hidden), axis=-1)
        return log_probs, hidden

    def decode_step(self, enc: EncoderOutput, prefix):
        """Next-token log-distribution after `prefix` (which starts with sos).

        Returns (log_probs [vocab], hidden [d_model]) as plain arrays; the
        hidden state is the CEM feature source.
        """
        prefix = list(prefix)
        if not prefix or prefix[0] != SOS_ID:
            raise ValueError(f"prefix must begin with sos={SOS_ID}")
        if len(prefix) >= self.config.max_decode_len:
            raise PrefixTooLong(
                f"prefix length {len(prefix)} >= max_decode_len {self.config.max_decode_len}")
        with ad.no_grad():
            log_probs, hidden = self.decoder_forward(enc, prefix, training=False)
        return log_probs.data[-1].copy(), hidden.data[-1].copy()

    def ctc_logits(self, enc: EncoderOutput) -> Tensor:
        """Per-frame log-softmax over the vocab (blank at index 0)."""
        return ad.log_softmax(self._linear("ctc.out", enc.states), axis=-1)

    # -- state management -------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        if set(state) != set(self.params):
            raise ConfigError("parameter name mismatch in state")
        for name, arr in state.items():
            if self.params[name].data.shape != arr.shape:
                raise ConfigError(f"shape mismatch for {name}")
            self.params[name].data = np.asarray(arr, dtype=np.float64).copy()

    def clone(self) -> "ConformerModel":
        params = {name: Tensor(t.data.copy(), requires_grad=True)
                  for name, t in self.params.items()}
        return ConformerModel(self.config, params=params)
