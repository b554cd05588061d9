"""Encoder-decoder sequence model with a subsampling frontend.

Encoder: 2x convolutional subsampling, sinusoidal positions, then
pre-layer-norm blocks of (self-attention, optional depthwise-conv
module, feed-forward) with residuals. Self-attention is dense or
windowed per the attention spec. Decoder: causal self-attention plus
cross-attention onto the encoder output, a CTC head over encoder
frames, and a token head for teacher forcing / beam search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import tensor as tz
from .attention import AttentionSpec, cross_attention, dense_mha, restricted_mha
from .data import BLANK, EOS, PAD, SOS
from .tensor import Tensor

CONV_KERNEL = 3
DW_KERNEL = 15


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; the documented defaults are the full-scale
    reference configuration, desk_config() shrinks them for CPU runs."""

    vocab_size: int
    d_model: int = 256
    enc_layers: int = 12
    enc_ff: int = 2048
    enc_heads: int = 8
    dec_layers: int = 6
    dec_ff: int = 512
    dec_heads: int = 4
    attention: AttentionSpec = AttentionSpec()
    conv_module: bool = False
    feature_dim: int = 43
    frontend_channels: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        if self.vocab_size < 6:
            raise ValueError("vocab must hold the 5 reserved tokens plus content")
        for heads, what in ((self.enc_heads, "enc_heads"), (self.dec_heads, "dec_heads")):
            if self.d_model % heads != 0:
                raise ValueError(f"d_model={self.d_model} not divisible by {what}={heads}")
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even for sinusoidal positions")

    @property
    def enc_spec(self) -> AttentionSpec:
        return replace(self.attention, heads=self.enc_heads)

    def to_json(self) -> dict:
        d = self.__dict__.copy()
        d["attention"] = self.attention.__dict__.copy()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["attention"] = AttentionSpec(**d["attention"])
        return cls(**d)


def desk_config(vocab_size: int, **overrides) -> ModelConfig:
    """Small configuration that trains in CPU-minutes."""
    base = dict(
        vocab_size=vocab_size,
        d_model=64,
        enc_layers=4,
        enc_ff=256,
        enc_heads=2,
        dec_layers=2,
        dec_ff=256,
        dec_heads=2,
        attention=AttentionSpec(mode="windowed", window=40, dilation=1),
        frontend_channels=16,
        dropout=0.05,
    )
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

ModelParams = dict[str, Tensor]


def _param_shapes(config: ModelConfig) -> dict[str, tuple]:
    d, v, ff = config.d_model, config.vocab_size, config.enc_ff
    c, f = config.frontend_channels, config.feature_dim
    shapes: dict[str, tuple] = {
        "frontend.conv.w": (CONV_KERNEL, CONV_KERNEL, c),
        "frontend.conv.b": (c,),
        "frontend.proj.w": (f * c, d),
        "frontend.proj.b": (d,),
    }

    def attn(prefix):
        shapes[f"{prefix}.norm.g"] = (d,)
        shapes[f"{prefix}.norm.b"] = (d,)
        for nm in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{nm}"] = (d, d)
            shapes[f"{prefix}.b{nm}"] = (d,)

    def ffn(prefix, width):
        shapes[f"{prefix}.norm.g"] = (d,)
        shapes[f"{prefix}.norm.b"] = (d,)
        shapes[f"{prefix}.w1"] = (d, width)
        shapes[f"{prefix}.b1"] = (width,)
        shapes[f"{prefix}.w2"] = (width, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(config.enc_layers):
        attn(f"enc.{i}.att")
        if config.conv_module:
            shapes[f"enc.{i}.conv.norm.g"] = (d,)
            shapes[f"enc.{i}.conv.norm.b"] = (d,)
            shapes[f"enc.{i}.conv.pw1.w"] = (d, d)
            shapes[f"enc.{i}.conv.pw1.b"] = (d,)
            shapes[f"enc.{i}.conv.dw.w"] = (DW_KERNEL, d)
            shapes[f"enc.{i}.conv.dw.b"] = (d,)
            shapes[f"enc.{i}.conv.pw2.w"] = (d, d)
            shapes[f"enc.{i}.conv.pw2.b"] = (d,)
        ffn(f"enc.{i}.ffn", ff)
    shapes["enc.final.g"] = (d,)
    shapes["enc.final.b"] = (d,)

    shapes["dec.embed"] = (v, d)
    for i in range(config.dec_layers):
        attn(f"dec.{i}.self")
        attn(f"dec.{i}.cross")
        ffn(f"dec.{i}.ffn", config.dec_ff)
    shapes["dec.final.g"] = (d,)
    shapes["dec.final.b"] = (d,)
    shapes["ctc.w"] = (d, v)
    shapes["ctc.b"] = (v,)
    shapes["out.w"] = (d, v)
    shapes["out.b"] = (v,)
    return shapes


VOCAB_DEPENDENT = ("dec.embed", "ctc.w", "ctc.b", "out.w", "out.b")


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, identity layer norms;
    deterministic in (config, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params: ModelParams = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith((".b", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo")):
            data = np.zeros(shape)
        elif name == "frontend.conv.w":
            k2 = CONV_KERNEL * CONV_KERNEL
            limit = math.sqrt(6.0 / (k2 + k2 * shape[2]))
            data = rng.uniform(-limit, limit, size=shape)
        elif name.endswith("conv.dw.w"):
            limit = math.sqrt(6.0 / (2 * DW_KERNEL))
            data = rng.uniform(-limit, limit, size=shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, size=shape)
        params[name] = tz.param(data)
    return params


def count_params(config: ModelConfig) -> int:
    """Closed-form parameter count; must equal the enumerated sizes."""
    d, v = config.d_model, config.vocab_size
    c, f = config.frontend_channels, config.feature_dim
    frontend = 9 * c + c + f * c * d + d
    attn = 2 * d + 4 * (d * d + d)
    conv = 2 * d + 2 * (d * d + d) + DW_KERNEL * d + d if config.conv_module else 0
    enc_ffn = 2 * d + d * config.enc_ff + config.enc_ff + config.enc_ff * d + d
    enc = config.enc_layers * (attn + conv + enc_ffn) + 2 * d
    dec_ffn = 2 * d + d * config.dec_ff + config.dec_ff + config.dec_ff * d + d
    dec = v * d + config.dec_layers * (2 * attn + dec_ffn) + 2 * d
    heads = 2 * (d * v + v)
    return frontend + enc + dec + heads


def subsampled_length(t: int) -> int:
    return (t - 1) // 2 + 1


_PE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    key = (n, d)
    if key not in _PE_CACHE:
        pos = np.arange(n, dtype=np.float64)[:, None]
        inv = np.exp(-math.log(10000.0) * np.arange(0, d, 2) / d)
        pe = np.zeros((n, d), dtype=np.float32)
        pe[:, 0::2] = np.sin(pos * inv)
        pe[:, 1::2] = np.cos(pos * inv)
        _PE_CACHE[key] = pe
    return _PE_CACHE[key][:n]


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _self_attention_block(x, p, prefix, spec, rate, rng):
    h = tz.layer_norm(x, p[f"{prefix}.norm.g"], p[f"{prefix}.norm.b"])
    q = tz.linear(h, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k = tz.linear(h, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v = tz.linear(h, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    if spec.mode == "windowed":
        a = restricted_mha(q, k, v, spec)
    else:
        a = dense_mha(q, k, v, spec)
    a = tz.linear(a, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    return x + tz.dropout(a, rate, rng)


def _causal_block(x, p, prefix, heads, rate, rng):
    L = x.data.shape[0]
    causal = np.tril(np.ones((L, L), dtype=bool))
    h = tz.layer_norm(x, p[f"{prefix}.norm.g"], p[f"{prefix}.norm.b"])
    q = tz.linear(h, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k = tz.linear(h, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v = tz.linear(h, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    a = dense_mha(q, k, v, AttentionSpec(heads=heads), extra_mask=causal)
    a = tz.linear(a, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    return x + tz.dropout(a, rate, rng)


def _cross_block(x, enc_out, p, prefix, heads, rate, rng):
    h = tz.layer_norm(x, p[f"{prefix}.norm.g"], p[f"{prefix}.norm.b"])
    q = tz.linear(h, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
    k = tz.linear(enc_out, p[f"{prefix}.wk"], p[f"{prefix}.bk"])
    v = tz.linear(enc_out, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
    a = cross_attention(q, k, v, heads)
    a = tz.linear(a, p[f"{prefix}.wo"], p[f"{prefix}.bo"])
    return x + tz.dropout(a, rate, rng)


def _ffn_block(x, p, prefix, rate, rng):
    h = tz.layer_norm(x, p[f"{prefix}.norm.g"], p[f"{prefix}.norm.b"])
    h = tz.gelu(tz.linear(h, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    h = tz.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])
    return x + tz.dropout(h, rate, rng)


def _conv_block(x, p, prefix, rate, rng):
    h = tz.layer_norm(x, p[f"{prefix}.norm.g"], p[f"{prefix}.norm.b"])
    h = tz.gelu(tz.linear(h, p[f"{prefix}.pw1.w"], p[f"{prefix}.pw1.b"]))
    h = tz.gelu(tz.depthwise_conv1d(h, p[f"{prefix}.dw.w"], p[f"{prefix}.dw.b"]))
    h = tz.linear(h, p[f"{prefix}.pw2.w"], p[f"{prefix}.pw2.b"])
    return x + tz.dropout(h, rate, rng)


def encode(
    config: ModelConfig,
    params: ModelParams,
    features: Tensor,
    spec: Optional[AttentionSpec] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """features (T, feature_dim) -> encoder states (ceil(T/2), d_model).

    ``spec`` overrides the configured encoder attention (heads are taken
    from the config either way); ``rng`` enables dropout.
    """
    if features.data.shape[1] != config.feature_dim:
        raise tz.ShapeError(
            f"expected {config.feature_dim}-dim features, got {features.data.shape}"
        )
    spec = replace(spec or config.attention, heads=config.enc_heads)
    rate = config.dropout
    p = params

    x = tz.conv_subsample(features, p["frontend.conv.w"], p["frontend.conv.b"])
    x = tz.gelu(x)
    x = tz.linear(x, p["frontend.proj.w"], p["frontend.proj.b"])
    # sqrt(d) gain keeps content comparable to the position signal
    x = x * math.sqrt(config.d_model)
    pe = Tensor(sinusoidal_positions(x.data.shape[0], config.d_model))
    x = tz.dropout(x + pe, rate, rng)
    for i in range(config.enc_layers):
        x = _self_attention_block(x, p, f"enc.{i}.att", spec, rate, rng)
        if config.conv_module:
            x = _conv_block(x, p, f"enc.{i}.conv", rate, rng)
        x = _ffn_block(x, p, f"enc.{i}.ffn", rate, rng)
    return tz.layer_norm(x, p["enc.final.g"], p["enc.final.b"])


def decode_teacher_forced(
    config: ModelConfig,
    params: ModelParams,
    enc_out: Tensor,
    targets,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Logits (L, vocab) for target prefix rows; causal over targets."""
    ids = np.asarray(targets, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("targets must be non-empty")
    if ids[0] != SOS:
        raise ValueError("targets must begin with the start-of-sequence token")
    rate = config.dropout
    p = params
    x = tz.embedding(p["dec.embed"], ids) * math.sqrt(config.d_model)
    pe = Tensor(sinusoidal_positions(len(ids), config.d_model))
    x = tz.dropout(x + pe, rate, rng)
    for i in range(config.dec_layers):
        x = _causal_block(x, p, f"dec.{i}.self", config.dec_heads, rate, rng)
        x = _cross_block(x, enc_out, p, f"dec.{i}.cross", config.dec_heads, rate, rng)
        x = _ffn_block(x, p, f"dec.{i}.ffn", rate, rng)
    x = tz.layer_norm(x, p["dec.final.g"], p["dec.final.b"])
    return tz.linear(x, p["out.w"], p["out.b"])


def ctc_head(config: ModelConfig, params: ModelParams, enc_out: Tensor) -> Tensor:
    """Per-frame log-distributions over the vocabulary (blank included)."""
    return tz.log_softmax(tz.linear(enc_out, params["ctc.w"], params["ctc.b"]))


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BeamResult:
    tokens: tuple[int, ...]  # generated ids, eos stripped
    score: float  # length-normalized log-probability
    ended: bool  # False when max_len was hit before eos


BANNED_OUTPUT_IDS = (PAD, SOS, BLANK)


def beam_search_steps(
    step_fn, beam: int, max_len: int, length_penalty: float = 1.0
) -> BeamResult:
    """Length-normalized beam search driven by a next-token closure.

    ``step_fn(prefix)`` returns the log-probability vector over the
    vocabulary given the generated prefix (excluding sos). beam=1 is
    greedy decoding. Ties at equal score go to the lexicographically
    smaller token sequence (lower ids win). Hitting max_len yields the
    best partial hypothesis, flagged via ``ended``.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[float, tuple[int, ...], bool]] = []

    def normalized(total: float, n_tokens: int) -> float:
        return total / (n_tokens**length_penalty) if n_tokens else -math.inf

    for _ in range(max_len):
        candidates: list[tuple[float, tuple[int, ...]]] = []
        for tokens, total in live:
            logp = np.asarray(step_fn(tokens), dtype=np.float64)
            for tok in range(len(logp)):
                if math.isinf(logp[tok]):
                    continue
                candidates.append((total + logp[tok], tokens + (tok,)))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for total, tokens in candidates[:beam]:
            if tokens[-1] == EOS:
                finished.append((normalized(total, len(tokens)), tokens[:-1], True))
            else:
                live.append((tokens, total))
        if not live:
            break

    for tokens, total in live:
        finished.append((normalized(total, len(tokens)), tokens, False))
    finished.sort(key=lambda f: (-f[0], f[1]))
    score, tokens, ended = finished[0]
    return BeamResult(tokens=tokens, score=score, ended=ended)


def model_step_fn(config: ModelConfig, params: ModelParams, enc_out: Tensor):
    """Next-token log-probabilities from the decoder, generation ids only."""

    def step_fn(prefix: tuple[int, ...]) -> np.ndarray:
        logits = (
            decode_teacher_forced(config, params, enc_out, (SOS,) + tuple(prefix))
            .data[-1]
            .astype(np.float64)
        )
        logits[list(BANNED_OUTPUT_IDS)] = -np.inf
        shifted = logits - logits.max()
        return shifted - math.log(np.exp(shifted).sum())

    return step_fn


def beam_search(
    config: ModelConfig,
    params: ModelParams,
    enc_out: Tensor,
    beam: int,
    max_len: int,
    length_penalty: float = 1.0,
) -> BeamResult:
    return beam_search_steps(
        model_step_fn(config, params, enc_out), beam, max_len, length_penalty
    )


def greedy_decode(config, params, enc_out, max_len: int) -> BeamResult:
    return beam_search(config, params, enc_out, beam=1, max_len=max_len)
