"""Token encoders: a small post-LN transformer and a bidirectional LSTM.

Both map a padded (B, L) id matrix plus true lengths to (B, L, d) encodings
whose padded rows carry no information into the valid ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError, VocabularyError
from .tensor import Tensor

PAD_ID = 0
CLS_ID = 1


@dataclass
class TokenSequence:
    """Token ids for one text; ``ids[0]`` is [CLS], padding uses [PAD]."""

    ids: np.ndarray
    valid_len: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1 or self.ids.size == 0:
            raise ContractError("TokenSequence ids must be a non-empty 1-D array")
        if not 1 <= self.valid_len <= self.ids.size:
            raise ContractError(f"valid_len {self.valid_len} outside [1, {self.ids.size}]")
        if self.ids[0] != CLS_ID:
            raise ContractError("TokenSequence must start with the [CLS] id")

    def padded(self, length: int) -> "TokenSequence":
        if length < self.valid_len:
            raise ContractError(f"cannot pad to {length} < valid_len {self.valid_len}")
        ids = np.full(length, PAD_ID, dtype=np.int64)
        ids[: self.valid_len] = self.ids[: self.valid_len]
        return TokenSequence(ids, self.valid_len)


@dataclass
class TokenEncodings:
    """Encoded tokens (m, d) of one sequence; rows past ``valid_len`` are padding."""

    matrix: Tensor
    valid_len: int


@dataclass
class EncoderParams:
    kind: str
    vocab_size: int
    d: int
    max_len: int
    n_layers: int = 2
    n_heads: int = 2
    ffn_mult: int = 4
    weights: dict[str, Tensor] = field(default_factory=dict)

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "vocab_size": self.vocab_size,
            "d": self.d,
            "max_len": self.max_len,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "ffn_mult": self.ffn_mult,
        }

    @property
    def width(self) -> int:
        return self.d


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


def _xavier(rng, fan_in, fan_out):
    return _uniform(rng, (fan_in, fan_out), math.sqrt(6.0 / (fan_in + fan_out)))


def weight_shapes(desc: dict) -> dict[str, tuple]:
    """Shapes of every named weight implied by an architecture descriptor."""
    kind, V, d = desc["kind"], desc["vocab_size"], desc["d"]
    shapes: dict[str, tuple] = {"tok_emb": (V, d)}
    if kind == "transformer":
        H = desc["n_heads"]
        if d % H:
            raise ConfigurationError(f"d={d} is not divisible by n_heads={H}")
        dh, f = d // H, desc["ffn_mult"] * d
        shapes["pos_emb"] = (desc["max_len"], d)
        shapes["emb_ln.g"] = (d,)
        shapes["emb_ln.b"] = (d,)
        for layer in range(desc["n_layers"]):
            p = f"l{layer}."
            for h in range(H):
                for w in ("q", "k", "v"):
                    shapes[f"{p}w{w}{h}"] = (d, dh)
            shapes[p + "wo"] = (d, d)
            shapes[p + "bo"] = (d,)
            shapes[p + "ln1.g"] = (d,)
            shapes[p + "ln1.b"] = (d,)
            shapes[p + "w1"] = (d, f)
            shapes[p + "b1"] = (f,)
            shapes[p + "w2"] = (f, d)
            shapes[p + "b2"] = (d,)
            shapes[p + "ln2.g"] = (d,)
            shapes[p + "ln2.b"] = (d,)
    elif kind == "bilstm":
        if d % 2:
            raise ConfigurationError(f"bilstm width d={d} must be even (d/2 per direction)")
        hd = d // 2
        for direction in ("fwd", "bwd"):
            shapes[f"{direction}.w"] = (d, 4 * hd)
            shapes[f"{direction}.u"] = (hd, 4 * hd)
            shapes[f"{direction}.b"] = (4 * hd,)
    else:
        raise ConfigurationError(f"unknown encoder kind {kind!r}")
    return shapes


def init_encoder(
    kind: str,
    vocab_size: int,
    d: int = 32,
    max_len: int = 32,
    n_layers: int = 2,
    n_heads: int = 2,
    ffn_mult: int = 4,
    rng: np.random.Generator | int | None = 0,
) -> EncoderParams:
    rng = np.random.default_rng(rng)
    params = EncoderParams(kind, vocab_size, d, max_len, n_layers, n_heads, ffn_mult)
    for name, shape in weight_shapes(params.descriptor()).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "tok_emb" and kind == "bilstm":
            # no normalisation layer downstream, so embeddings start at unit scale
            value = rng.normal(size=shape)
        elif name in ("tok_emb", "pos_emb"):
            value = _uniform(rng, shape, 0.05)
        elif leaf == "g":
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
            if kind == "bilstm":
                hd = d // 2
                value[hd:2 * hd] = 1.0  # forget-gate bias
        else:
            value = _xavier(rng, *shape)
        params.weights[name] = T.parameter(value, name=name)
    return params


def _check_ids(params: EncoderParams, ids: np.ndarray, lengths: np.ndarray):
    if ids.ndim != 2 or lengths.shape != (ids.shape[0],):
        raise DimensionError(f"encode: ids {ids.shape} / lengths {lengths.shape} disagree")
    if ids.size and (ids.max() >= params.vocab_size or ids.min() < 0):
        bad = int(ids.max()) if ids.max() >= params.vocab_size else int(ids.min())
        raise VocabularyError(f"token id {bad} outside vocabulary of size {params.vocab_size}")
    if (lengths < 1).any() or (lengths > ids.shape[1]).any():
        raise ContractError("every sequence needs 1 <= valid_len <= padded length")
    if params.kind == "transformer" and ids.shape[1] > params.max_len:
        raise ContractError(f"sequence length {ids.shape[1]} exceeds max_len {params.max_len}")


def _transformer(params: EncoderParams, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
    w = params.weights
    B, L = ids.shape
    d, H = params.d, params.n_heads
    dh = d // H
    x = T.embedding(w["tok_emb"], ids)
    pos = T.embedding(w["pos_emb"], np.broadcast_to(np.arange(L), (B, L)))
    x = T.layer_norm(T.add(x, pos), w["emb_ln.g"], w["emb_ln.b"])
    key_mask = (np.arange(L)[None, :] < lengths[:, None])[:, None, :]
    inv_sqrt = 1.0 / math.sqrt(dh)
    for layer in range(params.n_layers):
        p = f"l{layer}."
        heads = []
        for h in range(H):
            q = T.matmul(x, w[f"{p}wq{h}"])
            k = T.matmul(x, w[f"{p}wk{h}"])
            v = T.matmul(x, w[f"{p}wv{h}"])
            att = T.softmax_rows(T.scale(T.matmul(q, T.transpose(k)), inv_sqrt), mask=key_mask)
            heads.append(T.matmul(att, v))
        mixed = heads[0] if H == 1 else T.concat(heads, axis=-1)
        attn_out = T.add_bias(T.matmul(mixed, w[p + "wo"]), w[p + "bo"])
        x = T.layer_norm(T.add(x, attn_out), w[p + "ln1.g"], w[p + "ln1.b"])
        hidden = T.relu(T.add_bias(T.matmul(x, w[p + "w1"]), w[p + "b1"]))
        ffn = T.add_bias(T.matmul(hidden, w[p + "w2"]), w[p + "b2"])
        x = T.layer_norm(T.add(x, ffn), w[p + "ln2.g"], w[p + "ln2.b"])
    return x


def _lstm_direction(params, emb, lengths, direction):
    w = params.weights
    gx = T.add_bias(T.matmul(emb, w[f"{direction}.w"]), w[f"{direction}.b"])
    return T.lstm(gx, w[f"{direction}.u"], lengths)


def _bilstm(params: EncoderParams, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
    emb = T.embedding(params.weights["tok_emb"], ids)
    forward = _lstm_direction(params, emb, lengths, "fwd")
    backward = T.reverse_valid(_lstm_direction(params, T.reverse_valid(emb, lengths), lengths, "bwd"), lengths)
    return T.concat([forward, backward], axis=-1)


def encode_batch(params: EncoderParams, ids, lengths) -> Tensor:
    """Encode a padded (B, L) batch into (B, L, d)."""
    ids = np.asarray(ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    _check_ids(params, ids, lengths)
    if params.kind == "transformer":
        return _transformer(params, ids, lengths)
    return _bilstm(params, ids, lengths)


def encode(params: EncoderParams, seq: TokenSequence) -> TokenEncodings:
    out = encode_batch(params, seq.ids[None, :], [seq.valid_len])
    m = seq.ids.size
    return TokenEncodings(T.reshape(out, (m, params.d)), seq.valid_len)


# ----------------------------------------------------------------------------
# aggregation
# ----------------------------------------------------------------------------


def cls_rows(x: Tensor) -> Tensor:
    """Row 0 of every sequence in a (B, L, d) batch -> (B, d)."""
    return T.select(x, 0, axis=1)


def cls_max_mean(x: Tensor, lengths) -> Tensor:
    """[CLS] row, valid-row max and valid-row mean, concatenated -> (B, 3d)."""
    return T.concat([cls_rows(x), T.masked_pool(x, lengths, "max"), T.masked_pool(x, lengths, "mean")], axis=-1)


def aggregate_cls(enc: TokenEncodings) -> Tensor:
    return T.select(enc.matrix, 0, axis=0)


def aggregate_cls_max_mean(enc: TokenEncodings) -> Tensor:
    m = enc.matrix
    return T.concat([T.select(m, 0, axis=0), T.pool(m, "max", enc.valid_len), T.pool(m, "mean", enc.valid_len)])
