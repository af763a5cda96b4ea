"""Matching heads g(c, r): bi-encoder dot product, plain cross-encoder, and
the enhanced cross-encoder (cross attention + SubMult comparison).

Batched entry points take ``EncodedBatch`` objects; the single-instance
functions (``submult``, ``scaled_dot_attention``, ``cross_attend``,
``score_enhanced`` ...) run the same code with a batch of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import TokenEncodings, cls_max_mean, cls_rows
from .errors import ConfigurationError, DimensionError, EmptySequenceError, UnsupportedHeadError
from .tensor import Tensor

HEAD_KINDS = ("bi", "plain_cross", "enhanced_cross")


@dataclass
class EncodedBatch:
    """(B, L, d) encodings plus each row's valid length."""

    values: Tensor
    lengths: np.ndarray

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.values.ndim != 3 or self.lengths.shape != (self.values.shape[0],):
            raise DimensionError(f"EncodedBatch: values {self.values.shape} vs lengths {self.lengths.shape}")

    def __len__(self):
        return self.values.shape[0]

    def take(self, index) -> "EncodedBatch":
        index = np.asarray(index, dtype=np.int64)
        return EncodedBatch(T.index_rows(self.values, index), self.lengths[index])

    @classmethod
    def single(cls, enc: TokenEncodings) -> "EncodedBatch":
        m, d = enc.matrix.shape
        return cls(T.reshape(enc.matrix, (1, m, d)), [enc.valid_len])


@dataclass
class HeadParams:
    kind: str
    d: int
    use_submult: bool = True
    use_cross_attention: bool = True
    use_bias: bool = True
    bi_aggregation: str = "cls"
    weights: dict[str, Tensor] = field(default_factory=dict)

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.d,
            "use_submult": self.use_submult,
            "use_cross_attention": self.use_cross_attention,
            "use_bias": self.use_bias,
            "bi_aggregation": self.bi_aggregation,
        }


def head_weight_shapes(desc: dict) -> dict[str, tuple]:
    kind, d = desc["kind"], desc["d"]
    if kind not in HEAD_KINDS:
        raise ConfigurationError(f"unknown head kind {kind!r}")
    if kind != "enhanced_cross" and not (desc.get("use_submult", True) and desc.get("use_cross_attention", True)):
        raise ConfigurationError("ablation flags only apply to the enhanced_cross head")
    if desc.get("bi_aggregation", "cls") not in ("cls", "cls_max_mean"):
        raise ConfigurationError(f"unknown bi aggregation {desc['bi_aggregation']!r}")
    shapes: dict[str, tuple] = {}
    bias = desc.get("use_bias", True)
    if kind == "enhanced_cross":
        if desc.get("use_cross_attention", True):
            shapes["W1"] = (4 * d, d)
        compare = 12 * d if desc.get("use_submult", True) else 6 * d
        shapes["W_proj"] = (compare, d)
        if bias:
            shapes["b_proj"] = (d,)
        shapes["w_out"] = (d, 1)
        if bias:
            shapes["b_out"] = (1,)
    elif kind == "plain_cross":
        shapes["W_hidden"] = (d, d)
        if bias:
            shapes["b_hidden"] = (d,)
        shapes["w_out"] = (d, 1)
        if bias:
            shapes["b_out"] = (1,)
    return shapes


def init_head(kind: str, d: int, rng=0, **flags) -> HeadParams:
    rng = np.random.default_rng(rng)
    head = HeadParams(kind, d, **flags)
    for name, shape in head_weight_shapes(head.descriptor()).items():
        if len(shape) == 1:
            value = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-bound, bound, size=shape)
        head.weights[name] = T.parameter(value, name=name)
    return head


# ----------------------------------------------------------------------------
# components
# ----------------------------------------------------------------------------


def submult(a: Tensor, b: Tensor) -> Tensor:
    """a ⊕ b ⊕ (a − b) ⊕ (a ⊙ b) along the last axis."""
    if a.shape != b.shape:
        raise DimensionError(f"submult: shape mismatch {a.shape} vs {b.shape}")
    return T.concat([a, b, T.sub(a, b), T.hadamard(a, b)], axis=-1)


def attend(q: Tensor, k: Tensor, k_lengths) -> Tensor:
    """Batched scaled dot-product attention with k as both keys and values.

    q: (P, n_q, d), k: (P, n_k, d); key rows at or past ``k_lengths[p]`` get
    exactly zero weight.
    """
    k_lengths = np.asarray(k_lengths, dtype=np.int64)
    if q.ndim != 3 or k.ndim != 3 or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise DimensionError(f"attention: query {q.shape} and key {k.shape} disagree")
    if (k_lengths < 1).any():
        raise EmptySequenceError("attention over an empty key sequence (k_valid = 0)")
    d = q.shape[2]
    mask = (np.arange(k.shape[1])[None, :] < k_lengths[:, None])[:, None, :]
    weights = T.softmax_rows(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d)), mask=mask)
    return T.matmul(weights, k)


def scaled_dot_attention(q: Tensor, k: Tensor, k_valid: int) -> Tensor:
    """softmax(q kᵀ / √d) k for one (n_q, d) query against (n_k, d) keys."""
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise DimensionError(f"attention: query {q.shape} and key {k.shape} disagree")
    if k_valid < 1:
        raise EmptySequenceError("attention over an empty key sequence (k_valid = 0)")
    out = attend(T.reshape(q, (1,) + q.shape), T.reshape(k, (1,) + k.shape), [k_valid])
    return T.reshape(out, q.shape)


def cross_attend_batch(c: EncodedBatch, r: EncodedBatch, head: HeadParams) -> tuple[Tensor, Tensor]:
    if c.values.shape[0] != r.values.shape[0] or c.values.shape[2] != r.values.shape[2]:
        raise DimensionError(f"cross_attend: {c.values.shape} vs {r.values.shape}")
    if not head.use_cross_attention:
        return c.values, r.values
    W1 = head.weights["W1"]
    c_hat = T.matmul(submult(c.values, attend(c.values, r.values, r.lengths)), W1)
    r_hat = T.matmul(submult(r.values, attend(r.values, c.values, c.lengths)), W1)
    return c_hat, r_hat


def cross_attend(c_enc: TokenEncodings, r_enc: TokenEncodings, head: HeadParams) -> tuple[Tensor, Tensor]:
    c_hat, r_hat = cross_attend_batch(EncodedBatch.single(c_enc), EncodedBatch.single(r_enc), head)
    return T.reshape(c_hat, c_hat.shape[1:]), T.reshape(r_hat, r_hat.shape[1:])


def _two_layer(x: Tensor, head: HeadParams, hidden: str, hidden_bias: str) -> Tensor:
    w = head.weights
    z = T.matmul(x, w[hidden])
    if head.use_bias:
        z = T.add_bias(z, w[hidden_bias])
    out = T.matmul(T.relu(z), w["w_out"])
    if head.use_bias:
        out = T.add_bias(out, w["b_out"])
    return T.reshape(out, (x.shape[0],))


# ----------------------------------------------------------------------------
# scorers
# ----------------------------------------------------------------------------


def enhanced_pair_scores(c: EncodedBatch, r: EncodedBatch, head: HeadParams) -> Tensor:
    """Scores (P,) for P aligned (context, response) pairs."""
    if head.kind != "enhanced_cross":
        raise ConfigurationError(f"enhanced scorer called with a {head.kind!r} head")
    expected = (12 if head.use_submult else 6) * head.d
    if head.weights["W_proj"].shape[0] != expected:
        raise ConfigurationError(
            f"W_proj has {head.weights['W_proj'].shape[0]} rows, flags imply {expected}"
        )
    c_hat, r_hat = cross_attend_batch(c, r, head)
    c_bar = cls_max_mean(c_hat, c.lengths)
    r_bar = cls_max_mean(r_hat, r.lengths)
    compared = submult(c_bar, r_bar) if head.use_submult else T.concat([c_bar, r_bar], axis=-1)
    return _two_layer(compared, head, "W_proj", "b_proj")


def score_enhanced(c_enc: TokenEncodings, r_enc: TokenEncodings, head: HeadParams) -> Tensor:
    out = enhanced_pair_scores(EncodedBatch.single(c_enc), EncodedBatch.single(r_enc), head)
    return T.reshape(out, ())


def score_bi(c_vec: Tensor, r_vec: Tensor) -> Tensor:
    if c_vec.shape != r_vec.shape:
        raise DimensionError(f"score_bi: length mismatch {c_vec.shape} vs {r_vec.shape}")
    return T.dot(c_vec, r_vec)


def plain_cross_scores(joint: EncodedBatch, head: HeadParams) -> Tensor:
    if head.kind != "plain_cross":
        raise ConfigurationError(f"plain cross scorer called with a {head.kind!r} head")
    return _two_layer(cls_rows(joint.values), head, "W_hidden", "b_hidden")


def score_plain_cross(joint: TokenEncodings, head: HeadParams) -> Tensor:
    return T.reshape(plain_cross_scores(EncodedBatch.single(joint), head), ())


def bi_vectors(batch: EncodedBatch, head: HeadParams) -> Tensor:
    """Aggregate each sequence to the vector the bi-encoder compares."""
    if head.bi_aggregation == "cls_max_mean":
        return cls_max_mean(batch.values, batch.lengths)
    return cls_rows(batch.values)


def batch_score_matrix(contexts: EncodedBatch, responses: EncodedBatch, head: HeadParams) -> Tensor:
    """(B, B) scores of context i against response j; the diagonal holds gold pairs."""
    B = len(contexts)
    if len(responses) != B:
        raise DimensionError(f"batch_score_matrix: {B} contexts vs {len(responses)} responses")
    if head.kind == "bi":
        return T.matmul(bi_vectors(contexts, head), T.transpose(bi_vectors(responses, head)))
    if head.kind == "enhanced_cross":
        rows = np.repeat(np.arange(B), B)
        cols = np.tile(np.arange(B), B)
        flat = enhanced_pair_scores(contexts.take(rows), responses.take(cols), head)
        return T.reshape(flat, (B, B))
    raise UnsupportedHeadError(
        "plain_cross encodes each (context, response) pair jointly and cannot reuse encodings across a batch"
    )
