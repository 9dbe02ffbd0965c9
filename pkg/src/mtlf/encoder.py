"""The shared transformer encoder.

Token + learned absolute position embeddings feed a stack of post-norm
blocks (self-attention then feed-forward, each with residual + layer
norm); the position-0 vector of the last hidden state is the sentence
representation handed to task heads.

Two config profiles ship: ``paper`` (6 layers, 12 heads, hidden 768,
ffn 3072) and ``desk`` (2 layers, 2 heads, hidden 64, ffn 128), the
latter small enough that the whole test suite trains in seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import MASK_NEG, Tensor
from .errors import ConfigError, DimensionError, EncodingError


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    max_len: int = 128
    hidden_dim: int = 768
    num_layers: int = 6
    num_heads: int = 12
    ffn_dim: int = 3072
    dropout_p: float = 0.1
    seed: int = 0

    def __post_init__(self):
        counts = (self.vocab_size, self.max_len, self.hidden_dim, self.num_layers, self.num_heads, self.ffn_dim)
        if any(c < 1 for c in counts):
            raise ConfigError("all encoder size fields must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.ffn_dim < self.hidden_dim:
            raise ConfigError("ffn_dim must be >= hidden_dim")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "hidden_dim": self.hidden_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "dropout_p": self.dropout_p,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderConfig":
        return cls(**obj)


# architecture profiles; vocab_size/max_len/seed are filled per experiment
PROFILES = {
    "paper": dict(hidden_dim=768, num_layers=6, num_heads=12, ffn_dim=3072, dropout_p=0.1),
    "desk": dict(hidden_dim=64, num_layers=2, num_heads=2, ffn_dim=128, dropout_p=0.1),
}


def profile_config(name: str, vocab_size: int, max_len: int = 128, seed: int = 0) -> EncoderConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile '{name}' (have {sorted(PROFILES)})")
    return EncoderConfig(vocab_size=vocab_size, max_len=max_len, seed=seed, **PROFILES[name])


@dataclass
class LayerParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor


@dataclass
class EncoderParams:
    config: EncoderConfig
    token_emb: Tensor
    pos_emb: Tensor
    layers: list[LayerParams]

    def named_parameters(self):
        yield "token_emb", self.token_emb
        yield "pos_emb", self.pos_emb
        for i, layer in enumerate(self.layers):
            for name in (
                "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                "ln1_gamma", "ln1_beta", "w1", "b1", "w2", "b2",
                "ln2_gamma", "ln2_beta",
            ):
                yield f"layers.{i}.{name}", getattr(layer, name)

    def copy(self) -> "EncoderParams":
        """Independent deep copy (same config object, fresh arrays)."""

        def dup(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), requires_grad=t.requires_grad)

        layers = [
            LayerParams(**{f.name: dup(getattr(layer, f.name)) for f in fields(LayerParams)})
            for layer in self.layers
        ]
        return EncoderParams(
            config=self.config,
            token_emb=dup(self.token_emb),
            pos_emb=dup(self.pos_emb),
            layers=layers,
        )


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) with values beyond 2 std resampled."""
    out = rng.normal(scale=std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(scale=std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def init_encoder(config: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> EncoderParams:
    """Truncated-normal weights (std 0.02), zero biases, unit layer-norm gains."""
    d, f = config.hidden_dim, config.ffn_dim

    def w(shape):
        return Tensor(trunc_normal(rng, shape, dtype=dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    layers = [
        LayerParams(
            wq=w((d, d)), bq=zeros(d), wk=w((d, d)), bk=zeros(d),
            wv=w((d, d)), bv=zeros(d), wo=w((d, d)), bo=zeros(d),
            ln1_gamma=ones(d), ln1_beta=zeros(d),
            w1=w((d, f)), b1=zeros(f), w2=w((f, d)), b2=zeros(d),
            ln2_gamma=ones(d), ln2_beta=zeros(d),
        )
        for _ in range(config.num_layers)
    ]
    return EncoderParams(
        config=config,
        token_emb=w((config.vocab_size, d)),
        pos_emb=w((config.max_len, d)),
        layers=layers,
    )


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ag.add(ag.matmul(x, w), b)


def multi_head_self_attention(
    x: Tensor,
    mask: np.ndarray,
    layer: LayerParams,
    num_heads: int,
) -> Tensor:
    """Scaled dot-product attention with padded keys masked out pre-softmax."""
    b, t, d = x.shape
    mask = np.asarray(mask)
    if mask.shape != (b, t):
        raise DimensionError(f"mask shape {mask.shape} does not match input {(b, t)}")
    head_dim = d // num_heads

    def split_heads(proj: Tensor) -> Tensor:
        return ag.swapaxes(ag.reshape(proj, (b, t, num_heads, head_dim)), 1, 2)

    q = split_heads(_linear(x, layer.wq, layer.bq))
    k = split_heads(_linear(x, layer.wk, layer.bk))
    v = split_heads(_linear(x, layer.wv, layer.bv))

    scores = ag.mul(ag.matmul(q, ag.swapaxes(k, 2, 3)), 1.0 / math.sqrt(head_dim))
    bias = ((1.0 - mask) * MASK_NEG).astype(x.data.dtype).reshape(b, 1, 1, t)
    weights = ag.softmax(ag.add(scores, Tensor(bias)), axis=-1)
    context = ag.reshape(ag.swapaxes(ag.matmul(weights, v), 1, 2), (b, t, d))
    return _linear(context, layer.wo, layer.bo)


def attention_weights(x: Tensor, mask: np.ndarray, layer: LayerParams, num_heads: int) -> np.ndarray:
    """The [B, H, T, T] softmax weights of one attention sublayer (eval only)."""
    b, t, d = x.shape
    head_dim = d // num_heads
    with ag.no_grad():
        q = ag.swapaxes(ag.reshape(_linear(x, layer.wq, layer.bq), (b, t, num_heads, head_dim)), 1, 2)
        k = ag.swapaxes(ag.reshape(_linear(x, layer.wk, layer.bk), (b, t, num_heads, head_dim)), 1, 2)
        scores = ag.mul(ag.matmul(q, ag.swapaxes(k, 2, 3)), 1.0 / math.sqrt(head_dim))
        bias = ((1.0 - np.asarray(mask)) * MASK_NEG).astype(x.data.dtype).reshape(b, 1, 1, t)
        return ag.softmax(ag.add(scores, Tensor(bias)), axis=-1).data


def encode_sequence(
    params: EncoderParams,
    token_ids: np.ndarray,
    mask: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Last hidden states [B, T, d] for a batch of id/mask rows."""
    config = params.config
    token_ids = np.asarray(token_ids)
    mask = np.asarray(mask)
    if token_ids.ndim != 2:
        raise EncodingError(f"token_ids must be [B, T], got shape {token_ids.shape}")
    b, t = token_ids.shape
    if t > config.max_len:
        raise EncodingError(f"sequence length {t} exceeds max_len {config.max_len}")
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= config.vocab_size):
        raise EncodingError(
            f"token id out of range for vocab of {config.vocab_size}"
        )
    if mask.shape != (b, t):
        raise DimensionError(f"mask shape {mask.shape} does not match ids {(b, t)}")

    p = config.dropout_p
    x = ag.add(ag.embedding(params.token_emb, token_ids), ag.take(params.pos_emb, slice(0, t)))
    x = ag.dropout(x, p, training, rng)
    for layer in params.layers:
        attn = multi_head_self_attention(x, mask, layer, config.num_heads)
        x = ag.layer_norm(ag.add(x, ag.dropout(attn, p, training, rng)), layer.ln1_gamma, layer.ln1_beta)
        ffn = _linear(ag.gelu(_linear(x, layer.w1, layer.b1)), layer.w2, layer.b2)
        x = ag.layer_norm(ag.add(x, ag.dropout(ffn, p, training, rng)), layer.ln2_gamma, layer.ln2_beta)
    return x


def pool_cls(hidden: Tensor) -> Tensor:
    """The position-0 vectors of the last hidden state, [B, d]."""
    if hidden.data.ndim != 3 or hidden.shape[1] < 1:
        raise DimensionError(f"pool_cls expects [B, T, d] with T >= 1, got {hidden.shape}")
    return ag.take(hidden, (slice(None), 0))
