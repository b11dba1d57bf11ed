"""Synthetic key-value facts standing in for passage/QA edit datapoints.

A datapoint is one invented subject with a few relations, e.g. passage
``"kavo color red. kavo pet owl."`` and QA pairs ``("kavo color?", "red")``.
Objects are drawn from small per-relation pools, so an untrained model can
still guess right by chance, and pools are disjoint so a subject's answers
are pairwise distinct.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DatasetError
from .metrics import AnchorItem
from .model import TokenSequence, Vocabulary, qa_sequence, text_sequence, tokenize

RELATIONS: dict[str, tuple[str, ...]] = {
    "color": ("red", "blue", "green", "pink", "gray", "gold"),
    "city": ("rome", "oslo", "lima", "bern", "baku", "doha"),
    "pet": ("cat", "dog", "owl", "fox", "yak", "emu"),
    "food": ("rice", "corn", "fig", "plum", "kale", "pear"),
}
_CONSONANTS = "bdfghklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class EditDatapoint:
    id: str
    passage: str
    qa: tuple[tuple[str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "qa", tuple((str(q), str(a)) for q, a in self.qa))
        if not self.qa:
            raise DatasetError(f"datapoint {self.id!r} has no QA pairs")

    def to_json(self) -> dict:
        return {"id": self.id, "passage": self.passage, "qa": [{"prompt": q, "answer": a} for q, a in self.qa]}

    @classmethod
    def from_json(cls, obj) -> "EditDatapoint":
        return cls(obj["id"], obj["passage"], tuple((p["prompt"], p["answer"]) for p in obj["qa"]))

    def subject(self) -> str:
        return self.passage.split(" ", 1)[0]

    def anchors(self, step: int = 0) -> list[AnchorItem]:
        return [AnchorItem(q, a, self.id, step) for q, a in self.qa]

    def training_sequences(self, vocab: Vocabulary, include_passage: bool = True) -> list[TokenSequence]:
        seqs = [qa_sequence(q, a, vocab) for q, a in self.qa]
        if include_passage:
            seqs.append(text_sequence(self.passage, vocab))
        return seqs


def _subject_space() -> int:
    return (len(_CONSONANTS) * len(_VOWELS)) ** 2


def generate_dataset(n_datapoints: int, qa_per_datapoint: int = 2, vocab: Vocabulary | None = None,
                     seed: int = 0, exclude_subjects: Iterable[str] = (), id_prefix: str = "dp") -> list[EditDatapoint]:
    """Deterministic synthetic facts with unique subjects."""
    vocab = vocab or Vocabulary.default()
    if n_datapoints < 1:
        raise DatasetError("n_datapoints must be >= 1")
    if not 1 <= qa_per_datapoint <= len(RELATIONS):
        raise DatasetError(f"qa_per_datapoint must be in [1, {len(RELATIONS)}]")
    exclude = set(exclude_subjects)
    if n_datapoints > _subject_space() - len(exclude):
        raise DatasetError(f"cannot realize {n_datapoints} unique subjects from the syllable space")
    alphabet = set(vocab.symbols)
    needed = set(_CONSONANTS + _VOWELS + " ?.") | {c for pool in RELATIONS.values() for w in pool for c in w}
    needed |= {c for r in RELATIONS for c in r}
    if not needed <= alphabet:
        raise DatasetError(f"vocabulary lacks characters {''.join(sorted(needed - alphabet))!r}")
    rng = np.random.default_rng(seed)
    relations = list(RELATIONS)
    seen = set(exclude)
    out = []
    while len(out) < n_datapoints:
        subj = "".join(rng.choice(list(_CONSONANTS)) + rng.choice(list(_VOWELS)) for _ in range(2))
        if subj in seen:
            continue
        seen.add(subj)
        rels = [relations[i] for i in sorted(rng.choice(len(relations), qa_per_datapoint, replace=False))]
        objs = [RELATIONS[r][rng.integers(len(RELATIONS[r]))] for r in rels]
        passage = " ".join(f"{subj} {r} {o}." for r, o in zip(rels, objs))
        qa = tuple((f"{subj} {r}?", o) for r, o in zip(rels, objs))
        dp = EditDatapoint(f"{id_prefix}{len(out):04d}", passage, qa)
        tokenize(dp.passage, vocab)
        out.append(dp)
    return out


def save_dataset(path: str | Path, datapoints: Sequence[EditDatapoint]) -> None:
    with open(path, "w") as fh:
        for dp in datapoints:
            fh.write(json.dumps(dp.to_json(), sort_keys=True) + "\n")


def load_dataset(path: str | Path) -> list[EditDatapoint]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(EditDatapoint.from_json(json.loads(line)))
                except (KeyError, TypeError, json.JSONDecodeError) as exc:
                    raise DatasetError(f"{path}:{lineno}: malformed datapoint ({exc})") from None
    if not out:
        raise DatasetError(f"{path}: dataset is empty")
    return out
