"""Datasets, vocabulary, tokenization and the synthetic topic-mixture corpus."""

from __future__ import annotations

import json
import logging
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoders import CLS_ID, PAD_ID, TokenSequence
from .errors import ContractError, DataError

log = logging.getLogger(__name__)

RESERVED = ("[PAD]", "[CLS]", "[SEP]", "[TURN]", "[UNK]")
SEP_ID, TURN_ID, UNK_ID = 2, 3, 4
TURN_MARKER = "__eot__"
SPLITS = ("train", "valid", "test")


@dataclass
class Example:
    id: str
    context: str
    candidates: list[str]
    gold: int

    def __post_init__(self):
        if isinstance(self.context, list):
            self.context = f" {TURN_MARKER} ".join(self.context)
        if not isinstance(self.context, str) or not self.context.strip():
            raise DataError(f"example {self.id}: empty context")
        if len(self.candidates) < 2:
            raise DataError(f"example {self.id}: needs at least 2 candidates, got {len(self.candidates)}")
        if not isinstance(self.gold, int) or not 0 <= self.gold < len(self.candidates):
            raise DataError(f"example {self.id}: gold index {self.gold} outside [0, {len(self.candidates)})")

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)


# ----------------------------------------------------------------------------
# JSONL persistence
# ----------------------------------------------------------------------------


def load_dataset(path) -> list[Example]:
    path = Path(path)
    examples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                fields = {k: obj[k] for k in ("id", "context", "candidates", "gold")}
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed example line ({exc})") from exc
            fields["id"] = str(fields["id"])
            examples.append(Example(**fields))
    if not examples:
        warnings.warn(f"{path} holds no examples", stacklevel=2)
    log.info("loaded %d examples from %s", len(examples), path)
    return examples


def save_dataset(examples: Iterable[Example], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


def load_splits(data_dir, splits: Sequence[str] = SPLITS) -> dict[str, list[Example]]:
    data_dir = Path(data_dir)
    out = {}
    for name in splits:
        path = data_dir / f"{name}.jsonl"
        if not path.exists():
            raise DataError(f"missing split file {path}")
        out[name] = load_dataset(path)
    return out


# ----------------------------------------------------------------------------
# vocabulary and tokenization
# ----------------------------------------------------------------------------


def words(text: str) -> list[str]:
    return text.split()


class Vocab:
    """Token <-> id map with five fixed reserved ids."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        clash = set(tokens) & set(RESERVED)
        if clash or TURN_MARKER in tokens:
            raise DataError(f"vocabulary may not contain reserved tokens: {sorted(clash)}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary tokens must be unique")
        self.itos = list(RESERVED) + tokens
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def tokens(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def id(self, token: str) -> int:
        if token == TURN_MARKER:
            return TURN_ID
        return self.stoi.get(token, UNK_ID)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None) -> "Vocab":
        """Most frequent first, ties broken lexicographically."""
        counts = Counter(w for text in texts for w in words(text) if w != TURN_MARKER and w not in RESERVED)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if max_size is not None:
            ranked = ranked[:max_size]
        return cls([w for w, _ in ranked])

    @classmethod
    def from_examples(cls, examples: Iterable[Example], max_size: int | None = None) -> "Vocab":
        def texts():
            for ex in examples:
                yield ex.context
                yield from ex.candidates

        return cls.build(texts(), max_size)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.split("\n") if line])


def tokenize(text: str, vocab: Vocab, max_len: int, side: str = "response") -> TokenSequence:
    """[CLS] + ids, truncated to ``max_len``.

    Contexts keep their most recent tokens, responses keep their first ones.
    """
    if max_len < 2:
        raise ContractError(f"max_len must be >= 2, got {max_len}")
    if side not in ("context", "response"):
        raise ContractError(f"side must be 'context' or 'response', got {side!r}")
    ids = [vocab.id(w) for w in words(text)]
    room = max_len - 1
    if len(ids) > room:
        ids = ids[-room:] if side == "context" else ids[:room]
    return TokenSequence(np.array([CLS_ID] + ids, dtype=np.int64), 1 + len(ids))


def token_length(text: str) -> int:
    """Length after tokenization without truncation, [CLS] included."""
    return 1 + len(words(text))


def choose_max_len(lengths: Iterable[int], quantile: float = 0.8) -> int:
    """Smallest L such that at least ``quantile`` of the lengths are <= L."""
    arr = np.sort(np.asarray(list(lengths), dtype=np.int64))
    if arr.size == 0:
        raise ContractError("choose_max_len needs a non-empty corpus")
    if not 0.0 < quantile <= 1.0:
        raise ContractError(f"quantile must lie in (0, 1], got {quantile}")
    need = math.ceil(quantile * arr.size - 1e-9)
    return int(arr[max(need, 1) - 1])


def choose_max_lens(examples: Sequence[Example], quantile: float = 0.8) -> tuple[int, int]:
    """Context and response limits, each from its own length distribution."""
    ctx = choose_max_len((token_length(ex.context) for ex in examples), quantile)
    resp = choose_max_len((token_length(c) for ex in examples for c in ex.candidates), quantile)
    return max(ctx, 2), max(resp, 2)


# ----------------------------------------------------------------------------
# tensorized datasets
# ----------------------------------------------------------------------------


@dataclass
class TokenizedSet:
    """Padded id arrays for a list of examples sharing one candidate count K."""

    ids: list[str]
    ctx: np.ndarray  # (N, Lc)
    ctx_len: np.ndarray  # (N,)
    cand: np.ndarray  # (N, K, Lr)
    cand_len: np.ndarray  # (N, K)
    gold: np.ndarray  # (N,)

    def __len__(self):
        return len(self.ids)

    @property
    def n_candidates(self) -> int:
        return self.cand.shape[1]

    def subset(self, index) -> "TokenizedSet":
        index = np.asarray(index, dtype=np.int64)
        return TokenizedSet(
            [self.ids[i] for i in index],
            self.ctx[index],
            self.ctx_len[index],
            self.cand[index],
            self.cand_len[index],
            self.gold[index],
        )


def _pad(seqs: Sequence[TokenSequence], length: int) -> np.ndarray:
    out = np.full((len(seqs), length), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : s.valid_len] = s.ids[: s.valid_len]
    return out


def tensorize(examples: Sequence[Example], vocab: Vocab, ctx_max: int, resp_max: int) -> TokenizedSet:
    if not examples:
        raise DataError("cannot tensorize an empty dataset")
    K = len(examples[0].candidates)
    if any(len(ex.candidates) != K for ex in examples):
        raise DataError("all examples in a split must share one candidate count")
    ctx = [tokenize(ex.context, vocab, ctx_max, "context") for ex in examples]
    cand = [tokenize(c, vocab, resp_max, "response") for ex in examples for c in ex.candidates]
    N = len(examples)
    return TokenizedSet(
        ids=[ex.id for ex in examples],
        ctx=_pad(ctx, ctx_max),
        ctx_len=np.array([s.valid_len for s in ctx], dtype=np.int64),
        cand=_pad(cand, resp_max).reshape(N, K, resp_max),
        cand_len=np.array([s.valid_len for s in cand], dtype=np.int64).reshape(N, K),
        gold=np.array([ex.gold for ex in examples], dtype=np.int64),
    )


def joint_ids(ctx, ctx_len, resp, resp_len):
    """[CLS] context [SEP] response for aligned rows of padded id arrays.

    Both inputs carry their own leading [CLS]; the response's is dropped.
    """
    n = ctx.shape[0]
    lengths = ctx_len + resp_len
    out = np.full((n, ctx.shape[1] + resp.shape[1]), PAD_ID, dtype=np.int64)
    for i in range(n):
        a, b = ctx_len[i], resp_len[i]
        out[i, :a] = ctx[i, :a]
        out[i, a] = SEP_ID
        out[i, a + 1 : a + b] = resp[i, 1:b]
    return out, lengths


# ----------------------------------------------------------------------------
# synthetic corpus
# ----------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    vocab_size: int = 200
    n_topics: int = 20
    tokens_per_turn: int = 6
    turns_per_context: int = 3
    n_candidates: int = 10
    n_train: int = 2000
    n_valid: int = 500
    n_test: int = 500
    noise: float = 0.3
    words_per_topic: int = 16
    topics_per_cluster: int = 1
    shared_words: int = 0
    hard_negatives: int = 0
    seed: int = 0

    def __post_init__(self):
        positive = ("vocab_size", "n_topics", "tokens_per_turn", "turns_per_context",
                    "n_train", "n_valid", "n_test", "words_per_topic")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ContractError(f"SyntheticSpec.{name} must be positive")
        if self.n_candidates < 2:
            raise ContractError("SyntheticSpec.n_candidates must be at least 2")
        if not 0.0 <= self.noise < 1.0:
            raise ContractError(f"noise rate must lie in [0, 1), got {self.noise}")
        if self.words_per_topic > self.vocab_size:
            raise ContractError("words_per_topic cannot exceed vocab_size")
        if self.topics_per_cluster < 1 or self.shared_words < 0 or self.hard_negatives < 0:
            raise ContractError("cluster settings must be non-negative (topics_per_cluster >= 1)")
        if self.shared_words >= self.words_per_topic:
            raise ContractError("shared_words must leave at least one topic-specific word")
        if self.hard_negatives > min(self.n_candidates - 1, self.topics_per_cluster - 1):
            raise ContractError("hard_negatives exceeds the sibling topics or distractor slots available")

    @classmethod
    def from_file(cls, path) -> "SyntheticSpec":
        return cls(**json.loads(Path(path).read_text()))


def _vocab_words(n: int) -> list[str]:
    width = len(str(n - 1))
    return [f"w{i:0{width}d}" for i in range(n)]


class _TopicModel:
    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        self.spec = spec
        self.words = _vocab_words(spec.vocab_size)
        self.topics = []
        ranks = np.arange(1, spec.words_per_topic + 1, dtype=np.float64)
        weights = 1.0 / ranks
        weights /= weights.sum()
        own = spec.words_per_topic - spec.shared_words
        shared = None
        for t in range(spec.n_topics):
            if t % spec.topics_per_cluster == 0:
                shared = rng.choice(spec.vocab_size, size=spec.shared_words, replace=False)
            pool = np.setdiff1d(np.arange(spec.vocab_size), shared)
            members = np.concatenate([rng.choice(pool, size=own, replace=False), shared])
            self.topics.append((members.astype(np.int64), weights))

    def siblings(self, topic: int) -> np.ndarray:
        size = self.spec.topics_per_cluster
        start = topic - topic % size
        group = np.arange(start, min(start + size, self.spec.n_topics))
        return group[group != topic]

    def tokens(self, topic: int, n: int, rng: np.random.Generator) -> list[str]:
        members, weights = self.topics[topic]
        own = members[rng.choice(members.size, size=n, p=weights)]
        uniform = rng.integers(0, self.spec.vocab_size, size=n)
        noisy = rng.random(n) < self.spec.noise
        return [self.words[i] for i in np.where(noisy, uniform, own)]

    def utterance(self, topic: int, rng: np.random.Generator) -> str:
        tpt = self.spec.tokens_per_turn
        n = int(rng.integers(max(1, tpt // 2), tpt + tpt // 2 + 1))
        return " ".join(self.tokens(topic, n, rng))


def generate_synthetic(spec: SyntheticSpec) -> dict[str, list[Example]]:
    """Topic-mixture response-selection corpus, deterministic in ``spec.seed``.

    Each context and its gold response come from one topic; distractors come
    from other topics.  Topics may be grouped into clusters that share a few
    of their rarer words, and ``hard_negatives`` distractors per example are
    then drawn from the gold topic's own cluster.  Context strings are unique
    across all splits.
    """
    rng = np.random.default_rng(spec.seed)
    model = _TopicModel(spec, rng)
    K = spec.n_candidates
    if K - 1 > spec.n_topics - 1:
        warnings.warn(
            f"{K} candidates but only {spec.n_topics} topics: distractor topics will repeat", stacklevel=2
        )
    seen: set[str] = set()
    out: dict[str, list[Example]] = {}
    for split, n in zip(SPLITS, (spec.n_train, spec.n_valid, spec.n_test)):
        examples = []
        while len(examples) < n:
            topic = int(rng.integers(spec.n_topics))
            n_turns = int(rng.integers(1, spec.turns_per_context + 1))
            context = f" {TURN_MARKER} ".join(model.utterance(topic, rng) for _ in range(n_turns))
            near = model.siblings(topic)
            n_hard = min(spec.hard_negatives, near.size)
            hard = rng.choice(near, size=n_hard, replace=False) if n_hard else np.zeros(0, dtype=np.int64)
            others = np.setdiff1d(np.arange(spec.n_topics), np.append(hard, topic))
            replace = others.size < K - 1 - n_hard
            distract = np.concatenate([hard, rng.choice(others, size=K - 1 - n_hard, replace=replace)])
            rng.shuffle(distract)
            gold = int(rng.integers(K))
            responses = [model.utterance(int(t), rng) for t in distract]
            responses.insert(gold, model.utterance(topic, rng))
            if context in seen:
                continue
            seen.add(context)
            examples.append(Example(f"{split}-{len(examples)}", context, responses, gold))
        out[split] = examples
    return out


def write_splits(splits: dict[str, list[Example]], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, examples in splits.items():
        save_dataset(examples, out_dir / f"{name}.jsonl")
