"""A ranking model = encoder + head + the tokenization settings it was built for."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import heads as H
from . import tensor as T
from .data import Vocab, joint_ids
from .encoders import EncoderParams, encode_batch, init_encoder, weight_shapes
from .errors import ConfigurationError, DataError
from .heads import EncodedBatch, HeadParams, head_weight_shapes, init_head
from .tensor import Tensor

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    encoder: str = "transformer"
    head: str = "enhanced_cross"
    d: int = 32
    n_layers: int = 2
    n_heads: int = 2
    ffn_mult: int = 4
    use_submult: bool = True
    use_cross_attention: bool = True
    use_bias: bool = True
    bi_aggregation: str | None = None

    def __post_init__(self):
        if self.encoder not in ("transformer", "bilstm"):
            raise ConfigurationError(f"unknown encoder {self.encoder!r}")
        if self.head not in H.HEAD_KINDS:
            raise ConfigurationError(f"unknown head {self.head!r}")
        if self.head == "plain_cross" and self.encoder != "transformer":
            raise ConfigurationError("the plain cross-encoder needs a transformer encoder")
        if self.bi_aggregation is None:
            self.bi_aggregation = "cls_max_mean" if self.encoder == "bilstm" else "cls"

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)


class RankingModel:
    def __init__(self, config: ModelConfig, encoder: EncoderParams, head: HeadParams,
                 vocab: Vocab, ctx_max: int, resp_max: int):
        self.config = config
        self.encoder = encoder
        self.head = head
        self.vocab = vocab
        self.ctx_max = ctx_max
        self.resp_max = resp_max

    # -- parameters ----------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        out = {f"enc.{k}": v for k, v in self.encoder.weights.items()}
        out.update({f"head.{k}": v for k, v in self.head.weights.items()})
        return out

    def descriptor(self) -> dict:
        return {
            "config": asdict(self.config),
            "encoder": self.encoder.descriptor(),
            "head": self.head.descriptor(),
            "ctx_max": self.ctx_max,
            "resp_max": self.resp_max,
        }

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            raise ConfigurationError("parameter names do not match the architecture")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ConfigurationError(f"{k}: stored shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]

    def encoder_checksum(self) -> str:
        h = hashlib.sha256(json.dumps(self.encoder.descriptor(), sort_keys=True).encode())
        for name in sorted(self.encoder.weights):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.encoder.weights[name].data).tobytes())
        return h.hexdigest()

    # -- forward -------------------------------------------------------------
    def encode(self, ids, lengths) -> EncodedBatch:
        ids = np.asarray(ids, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        width = int(lengths.max()) if lengths.size else 1
        return EncodedBatch(encode_batch(self.encoder, ids[:, :width], lengths), lengths)

    def in_batch_scores(self, ctx, ctx_len, resp, resp_len) -> Tensor:
        """(B, B) score matrix, gold pairs on the diagonal."""
        return H.batch_score_matrix(self.encode(ctx, ctx_len), self.encode(resp, resp_len), self.head)

    def candidate_scores(self, ctx, ctx_len, cand, cand_len) -> Tensor:
        """(B, K) scores of each context against its own K candidates."""
        B, K, Lr = cand.shape
        flat, flat_len = cand.reshape(B * K, Lr), cand_len.reshape(B * K)
        kind = self.head.kind
        if kind == "plain_cross":
            rows = np.repeat(np.arange(B), K)
            jid, jlen = joint_ids(ctx[rows], ctx_len[rows], flat, flat_len)
            return T.reshape(H.plain_cross_scores(self.encode(jid, jlen), self.head), (B, K))
        c = self.encode(ctx, ctx_len)
        r = self.encode(flat, flat_len)
        if kind == "bi":
            cv = H.bi_vectors(c, self.head)
            rv = H.bi_vectors(r, self.head)
            D = cv.shape[1]
            prod = T.matmul(T.reshape(rv, (B, K, D)), T.reshape(cv, (B, D, 1)))
            return T.reshape(prod, (B, K))
        rows = np.repeat(np.arange(B), K)
        return T.reshape(H.enhanced_pair_scores(c.take(rows), r, self.head), (B, K))

    def vectors(self, ids, lengths) -> np.ndarray:
        """Bi-encoder comparison vectors for a padded batch (no gradient)."""
        if self.head.kind != "bi":
            raise H.UnsupportedHeadError(f"{self.head.kind!r} heads do not produce standalone vectors")
        with T.no_grad():
            return H.bi_vectors(self.encode(ids, lengths), self.head).data


def build_model(config: ModelConfig, vocab: Vocab, ctx_max: int, resp_max: int, seed: int = 0) -> RankingModel:
    rng = np.random.default_rng(seed)
    positions = ctx_max + resp_max if config.head == "plain_cross" else max(ctx_max, resp_max)
    encoder = init_encoder(
        config.encoder, len(vocab), d=config.d, max_len=positions, n_layers=config.n_layers,
        n_heads=config.n_heads, ffn_mult=config.ffn_mult, rng=rng,
    )
    head = init_head(
        config.head, config.d, rng=rng, use_submult=config.use_submult,
        use_cross_attention=config.use_cross_attention, use_bias=config.use_bias,
        bi_aggregation=config.bi_aggregation,
    )
    return RankingModel(config, encoder, head, vocab, ctx_max, resp_max)


def copy_model(model: RankingModel) -> RankingModel:
    twin = build_model(model.config, model.vocab, model.ctx_max, model.resp_max)
    twin.load_state(model.state())
    return twin


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------


def save_checkpoint(path, model: RankingModel, train_config: dict | None = None,
                    seed: int | None = None, metrics: dict | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "architecture": model.descriptor(),
        "vocab": model.vocab.tokens,
        "train_config": train_config or {},
        "seed": seed,
        "metrics": metrics or {},
    }
    arrays = {f"param/{k}": v for k, v in model.state().items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[RankingModel, dict]:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode("utf-8"))
            state = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{path}: not a readable checkpoint ({exc})") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    arch = meta["architecture"]
    model = build_model(ModelConfig.from_dict(arch["config"]), Vocab(meta["vocab"]), arch["ctx_max"], arch["resp_max"])
    expected = {f"enc.{k}": s for k, s in weight_shapes(arch["encoder"]).items()}
    expected.update({f"head.{k}": s for k, s in head_weight_shapes(arch["head"]).items()})
    if {k: tuple(v.shape) for k, v in state.items()} != expected:
        raise DataError(f"{path}: parameter arrays do not match the stored architecture")
    model.load_state(state)
    return model, meta
