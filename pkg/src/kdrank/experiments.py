"""Bundled desk-scale configurations and small end-to-end helpers.

The acceptance suite and the CLI both go through these so that "the bundled
synthetic spec" and "the default teacher/student recipes" mean one thing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from .data import SPLITS, SyntheticSpec, TokenizedSet, Vocab, choose_max_lens, generate_synthetic, tensorize
from .errors import ConfigurationError
from .evaluation import evaluate_model
from .model import ModelConfig, RankingModel, build_model
from .training import DistillationRecord, History, TrainConfig, train

CONFIG_DIR = Path(__file__).parent / "configs"


def bundled_config(name: str) -> dict:
    path = CONFIG_DIR / f"{name}.json"
    if not path.exists():
        known = sorted(p.stem for p in CONFIG_DIR.glob("*.json"))
        raise ConfigurationError(f"no bundled config {name!r}; available: {known}")
    return json.loads(path.read_text())


def bundled_spec() -> SyntheticSpec:
    return SyntheticSpec(**bundled_config("tiny_spec"))


def recipe(name: str, **model_overrides) -> tuple[ModelConfig, TrainConfig]:
    """Model and training configs of a bundled recipe (``teacher``, ``student``, ``student_bilstm``)."""
    cfg = bundled_config(name)
    model = ModelConfig.from_dict({**cfg["model"], **model_overrides})
    return model, TrainConfig.from_dict(cfg["train"])


@dataclass
class Corpus:
    splits: dict
    vocab: Vocab
    ctx_max: int
    resp_max: int
    sets: dict[str, TokenizedSet]

    @classmethod
    def from_splits(cls, splits: dict, vocab: Vocab | None = None) -> "Corpus":
        vocab = vocab or Vocab.from_examples(splits["train"])
        ctx_max, resp_max = choose_max_lens(splits["train"])
        sets = {name: tensorize(splits[name], vocab, ctx_max, resp_max) for name in SPLITS if name in splits}
        return cls(splits, vocab, ctx_max, resp_max, sets)


def prepare_corpus(spec: SyntheticSpec | None = None) -> Corpus:
    return Corpus.from_splits(generate_synthetic(spec or bundled_spec()))


def fit(corpus: Corpus, model_config: ModelConfig, train_config: TrainConfig, seed: int,
        records: list[DistillationRecord] | None = None) -> tuple[RankingModel, History]:
    """Build with ``seed``, train with ``seed``, keep the best validation state."""
    model = build_model(model_config, corpus.vocab, corpus.ctx_max, corpus.resp_max, seed=seed)
    return train(model, corpus.sets["train"], replace(train_config, seed=seed), records, corpus.sets.get("valid"))


def held_out_recall(model: RankingModel, corpus: Corpus) -> float:
    return evaluate_model(model, corpus.sets["test"])["recall_at_1"]

