"""Losses, Adam, teacher-logit caching and the training loop.

The distillation pipeline is two-phase: a teacher is trained and frozen, its
logits over every training example's explicit candidate list are cached, and
the student then trains on ``alpha * CE + (1 - alpha) * MSE(teacher, student)``.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import heads as H
from . import tensor as T
from ._kernels import KERNELS
from .data import TokenizedSet
from .errors import ConfigurationError, ContractError, DataError, DimensionError, DivergenceError
from .evaluation import evaluate_model, score_dataset
from .model import RankingModel
from .tensor import Tensor

log = logging.getLogger(__name__)

ALPHA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class TrainConfig:
    alpha: float = 0.5
    lr: float | None = None  # None: 5e-5 for transformers, 1e-3 for the BiLSTM
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0
    negatives_mode: str = "in_batch"
    patience: int = 3
    clip_norm: float | None = 1.0
    distill_normalize: bool = True
    distill_center: bool = False
    eval_batch_size: int = 64

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.negatives_mode not in ("in_batch", "explicit"):
            raise ConfigurationError(f"unknown negatives_mode {self.negatives_mode!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")

    def learning_rate(self, encoder_kind: str) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-3 if encoder_kind == "bilstm" else 5e-5

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------


def ce_loss(scores: Tensor, target: int) -> Tensor:
    """-log softmax(scores)[target] for one K-vector of scores."""
    if scores.ndim != 1:
        raise DimensionError(f"ce_loss expects a score vector, got {scores.shape}")
    K = scores.shape[0]
    if not 0 <= target < K:
        raise ContractError(f"target {target} outside [0, {K})")
    return T.cross_entropy(T.reshape(scores, (1, K)), [target])


def distill_loss(z_teacher, z_student, normalize: bool = True, center: bool = False) -> Tensor:
    """Squared distance between teacher and student logits.

    For (K,) inputs: sum of squares, divided by K when ``normalize``.  For
    (B, K) inputs the per-row values are averaged over B.  ``center`` first
    subtracts each row's mean from both sides, which removes the per-example
    offset that softmax ranking ignores.
    """
    zt = z_teacher if isinstance(z_teacher, Tensor) else Tensor(z_teacher)
    zs = z_student if isinstance(z_student, Tensor) else Tensor(z_student)
    if zt.shape != zs.shape or zt.ndim not in (1, 2):
        raise DimensionError(f"distill_loss: logit shapes {zt.shape} vs {zs.shape}")
    diff = T.sub(zs, zt)
    if center:
        K = zt.shape[-1]
        centering = Tensor(np.eye(K) - 1.0 / K)
        diff = T.reshape(T.matmul(T.reshape(diff, (-1, K)), centering), zt.shape)
    total = T.sum_all(T.hadamard(diff, diff))
    rows = 1 if zt.ndim == 1 else zt.shape[0]
    per_row = zt.shape[-1] if normalize else 1
    return T.scale(total, 1.0 / (rows * per_row))


def combined_loss(alpha: float, l_ce, l_distill):
    """alpha * l_ce + (1 - alpha) * l_distill for Tensors or plain floats."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    if not isinstance(l_ce, Tensor) and not isinstance(l_distill, Tensor):
        return alpha * l_ce + (1.0 - alpha) * l_distill
    if alpha == 1.0:
        return l_ce
    if alpha == 0.0:
        return l_distill
    return T.add(T.scale(l_ce, alpha), T.scale(l_distill, 1.0 - alpha))


# ----------------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if set(grads) != set(params):
        raise DimensionError("adam_step: gradient names do not match parameter names")
    state.step += 1
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: {name} gradient {g.shape} vs parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if state.m[name].shape != p.shape:
            raise DimensionError(f"adam_step: moment buffers for {name} have the wrong shape")
        KERNELS.adam_update(p.data, np.ascontiguousarray(g), state.m[name], state.v[name],
                            lr, state.beta1, state.beta2, state.eps, state.step)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= factor
    return total


# ----------------------------------------------------------------------------
# teacher logits
# ----------------------------------------------------------------------------


@dataclass
class DistillationRecord:
    id: str
    teacher_logits: list[float]

    def __post_init__(self):
        self.teacher_logits = [float(x) for x in self.teacher_logits]
        if not all(math.isfinite(x) for x in self.teacher_logits):
            raise DataError(f"record {self.id}: non-finite teacher logit")


def cache_teacher_logits(teacher: RankingModel, data: TokenizedSet, batch_size: int = 64,
                         workers: int = 1) -> list[DistillationRecord]:
    """Teacher scores over each example's own candidate list, in dataset order."""
    starts = list(range(0, len(data), batch_size))

    def run(start):
        return score_dataset(teacher, data.subset(range(start, min(start + batch_size, len(data)))), batch_size)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    logits = np.concatenate(parts) if parts else np.zeros((0, data.n_candidates))
    records = [DistillationRecord(i, row.tolist()) for i, row in zip(data.ids, logits)]
    for rec, n_valid in zip(records, (data.cand_len > 0).sum(axis=1)):
        if len(rec.teacher_logits) != n_valid:
            raise DataError(f"record {rec.id}: {len(rec.teacher_logits)} logits for {n_valid} candidates")
    return records


def save_records(records: Sequence[DistillationRecord], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"id": rec.id, "teacher_logits": rec.teacher_logits}) + "\n")


def load_records(path) -> list[DistillationRecord]:
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(DistillationRecord(str(obj["id"]), obj["teacher_logits"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed distillation record ({exc})") from exc
    return records


def align_records(records: Sequence[DistillationRecord], data: TokenizedSet) -> np.ndarray:
    """(N, K) teacher logits ordered like ``data``; every example must be covered."""
    by_id = {r.id: r for r in records}
    missing = [i for i in data.ids if i not in by_id]
    if missing:
        raise ConfigurationError(f"no teacher logits for {len(missing)} training examples (first: {missing[0]})")
    K = data.n_candidates
    out = np.empty((len(data), K))
    for row, ex_id in enumerate(data.ids):
        z = by_id[ex_id].teacher_logits
        if len(z) != K:
            raise DataError(f"record {ex_id}: {len(z)} logits for {K} candidates")
        out[row] = z
    return out


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_valid_r1: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def forward_batch(model: RankingModel, data: TokenizedSet, index, in_batch: bool, candidates: bool):
    """Scores needed by one training step: (B, B) in-batch and/or (B, K) explicit."""
    idx = np.asarray(index)
    ctx, ctx_len = data.ctx[idx], data.ctx_len[idx]
    cand, cand_len, gold = data.cand[idx], data.cand_len[idx], data.gold[idx]
    B, K, Lr = cand.shape
    if model.head.kind == "plain_cross":
        if in_batch:
            raise H.UnsupportedHeadError("plain_cross cannot train with in-batch negatives")
        return None, model.candidate_scores(ctx, ctx_len, cand, cand_len)
    rows = np.arange(B)
    c = model.encode(ctx, ctx_len)
    ib = cs = None
    if candidates:
        r = model.encode(cand.reshape(B * K, Lr), cand_len.reshape(B * K))
        if model.head.kind == "bi":
            cv = H.bi_vectors(c, model.head)
            rv = H.bi_vectors(r, model.head)
            D = cv.shape[1]
            cs = T.reshape(T.matmul(T.reshape(rv, (B, K, D)), T.reshape(cv, (B, D, 1))), (B, K))
            if in_batch:
                gold_vecs = T.index_rows(rv, rows * K + gold)
                ib = T.matmul(cv, T.transpose(gold_vecs))
        else:
            cs = T.reshape(H.enhanced_pair_scores(c.take(np.repeat(rows, K)), r, model.head), (B, K))
            if in_batch:
                ib = H.batch_score_matrix(c, r.take(rows * K + gold), model.head)
    elif in_batch:
        ib = H.batch_score_matrix(c, model.encode(cand[rows, gold], cand_len[rows, gold]), model.head)
    return ib, cs


def train(model: RankingModel, data: TokenizedSet, config: TrainConfig,
          teacher_records: Sequence[DistillationRecord] | None = None,
          valid: TokenizedSet | None = None) -> tuple[RankingModel, History]:
    """Train ``model`` in place; returns it (best validation state restored) and its history."""
    use_kd = teacher_records is not None and config.alpha < 1.0
    if config.alpha < 1.0 and teacher_records is None:
        raise ConfigurationError(f"alpha={config.alpha} needs teacher records (use alpha=1 for plain training)")
    teacher = align_records(teacher_records, data) if use_kd else None
    explicit_ce = config.negatives_mode == "explicit" or model.head.kind == "plain_cross"
    lr = config.learning_rate(model.encoder.kind)
    params = model.parameters()
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    history = History()
    best_state, stale = None, 0
    N, B = len(data), config.batch_size

    for epoch in range(config.epochs):
        order = rng.permutation(N)
        losses = []
        for bi, start in enumerate(range(0, N, B)):
            idx = order[start:start + B]
            if len(idx) < 2 and not explicit_ce:
                continue
            for p in params.values():
                p.zero_grad()
            ib, cs = forward_batch(model, data, idx, in_batch=not explicit_ce, candidates=explicit_ce or use_kd)
            if explicit_ce:
                l_ce = T.cross_entropy(cs, data.gold[idx])
            else:
                l_ce = T.cross_entropy(ib, np.arange(len(idx)))
            if use_kd:
                loss = combined_loss(config.alpha, l_ce, distill_loss(teacher[idx], cs, config.distill_normalize, config.distill_center))
            else:
                loss = l_ce
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi}")
            T.backward(loss)
            grads = {k: p.grad for k, p in params.items()}
            if config.clip_norm is not None:
                clip_grad_norm(grads, config.clip_norm)
            adam_step(params, grads, state, lr)
            losses.append(value)
        row = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan")}
        if valid is not None:
            r1 = evaluate_model(model, valid, config.eval_batch_size)["recall_at_1"]
            row["valid_r1"] = r1
            if history.best_valid_r1 is None or r1 > history.best_valid_r1:
                history.best_valid_r1, history.best_epoch = r1, epoch
                best_state, stale = model.state(), 0
            else:
                stale += 1
        history.epochs.append(row)
        log.info("epoch %d loss %.4f valid R@1 %s", epoch, row["loss"], row.get("valid_r1"))
        if valid is not None and stale >= config.patience:
            break
    if best_state is not None:
        model.load_state(best_state)
    return model, history
