"""Structured trial documents: parsing, validation, indexing, and splits.

A trial record carries short key attributes (title, intervention, disease,
outcome, optional keywords) plus a long free-text context assembled from the
descriptive sections. Corpora are stored as JSON Lines, one record per line.
"""

from __future__ import annotations

import json
import random
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

from .text import normalize

KEY_ATTRIBUTES = ("title", "intervention", "disease", "outcome", "keywords")

_COMPLETION_STATUSES = frozenset({"approved", "completed"})
_TERMINATION_STATUSES = frozenset({"suspended", "terminated", "withdrawn"})

_REQUIRED_FIELDS = ("id", "title", "intervention", "disease", "outcome")
_OPTIONAL_FIELDS = ("keywords", "description", "criteria", "status")


class CorpusError(ValueError):
    """Malformed corpus file or record."""


@dataclass(frozen=True)
class Trial:
    """One structured document.

    Validation lives in :func:`trial_from_record`, not here: augmentation
    builds derived variants with key attributes deliberately blanked out.
    """

    id: str
    title: str
    intervention: str
    disease: str
    outcome: str
    keywords: str = ""
    context: str = ""
    status: str | None = None
    # Long sections are kept so serialization round-trips the raw record.
    description: str = ""
    criteria: str = ""

    def validate(self, where: str = "trial") -> "Trial":
        if not self.id:
            raise CorpusError(f"{where}: trial id must be non-empty")
        if not self.title.strip():
            raise CorpusError(f"{where}: title must be non-empty (trial {self.id!r})")
        if not self.disease.strip():
            raise CorpusError(f"{where}: disease must be non-empty (trial {self.id!r})")
        return self

    @property
    def disease_key(self) -> str:
        return disease_key(self.disease)

    def key_attributes(self) -> dict[str, str]:
        """Non-empty key attributes, in canonical attribute order."""
        out = {}
        for name in KEY_ATTRIBUTES:
            value = getattr(self, name)
            if value and value.strip():
                out[name] = value
        return out

    def document_text(self) -> str:
        """Full concatenation of all attributes and the context."""
        parts = [v for v in (self.title, self.intervention, self.disease,
                             self.outcome, self.keywords, self.context) if v]
        return "\n".join(parts)


def disease_key(disease: str) -> str:
    """Normalized disease equality key: lowercase, whitespace collapsed."""
    return " ".join(disease.lower().split())


def build_context(description: str, criteria: str, outcome: str) -> str:
    """Join the long sections with blank-line separators, skipping empties."""
    return "\n\n".join(s for s in (description, criteria, outcome) if s and s.strip())


@dataclass
class Corpus:
    """Immutable-after-build trial collection with a disease index."""

    trials: list[Trial] = field(default_factory=list)
    disease_index: dict[str, list[str]] = field(default_factory=dict)
    _by_id: dict[str, Trial] = field(default_factory=dict, repr=False)

    @classmethod
    def from_trials(cls, trials: list[Trial]) -> "Corpus":
        corpus = cls()
        for trial in trials:
            corpus._add(trial)
        return corpus

    def _add(self, trial: Trial) -> None:
        if trial.id in self._by_id:
            raise CorpusError(f"duplicate trial id {trial.id!r}")
        self.trials.append(trial)
        self._by_id[trial.id] = trial
        self.disease_index.setdefault(trial.disease_key, []).append(trial.id)

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    def __contains__(self, trial_id: str) -> bool:
        return trial_id in self._by_id

    def get(self, trial_id: str) -> Trial:
        try:
            return self._by_id[trial_id]
        except KeyError:
            raise KeyError(f"unknown trial id {trial_id!r}") from None

    def ids(self) -> list[str]:
        return [t.id for t in self.trials]

    def co_disease_ids(self, trial: Trial) -> list[str]:
        """Ids of other trials sharing the trial's disease key."""
        return [i for i in self.disease_index.get(trial.disease_key, []) if i != trial.id]


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float
    valid_frac: float
    test_frac: float
    seed: int = 0

    def __post_init__(self) -> None:
        for frac in (self.train_frac, self.valid_frac, self.test_frac):
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"split fraction {frac} outside [0, 1]")
        total = self.train_frac + self.valid_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions sum to {total}, expected 1")


def trial_from_record(record: dict, where: str = "record") -> Trial:
    """Build a Trial from one decoded JSONL record."""
    if not isinstance(record, dict):
        raise CorpusError(f"{where}: expected a JSON object, got {type(record).__name__}")
    for name in _REQUIRED_FIELDS:
        if name not in record:
            raise CorpusError(f"{where}: missing required field {name!r}")
    unknown = set(record) - set(_REQUIRED_FIELDS) - set(_OPTIONAL_FIELDS)
    if unknown:
        raise CorpusError(f"{where}: unknown fields {sorted(unknown)}")

    def text_field(name: str) -> str:
        value = record.get(name) or ""
        if not isinstance(value, str):
            raise CorpusError(f"{where}: field {name!r} must be a string")
        return value

    description = text_field("description")
    criteria = text_field("criteria")
    outcome = text_field("outcome")
    status = record.get("status")
    if status is not None and not isinstance(status, str):
        raise CorpusError(f"{where}: field 'status' must be a string")
    return Trial(
        id=text_field("id"),
        title=text_field("title"),
        intervention=text_field("intervention"),
        disease=text_field("disease"),
        outcome=outcome,
        keywords=text_field("keywords"),
        context=build_context(description, criteria, outcome),
        status=status,
        description=description,
        criteria=criteria,
    ).validate(where)


def trial_to_record(trial: Trial) -> dict:
    """Inverse of trial_from_record, dropping absent optional fields."""
    record: dict = {
        "id": trial.id,
        "title": trial.title,
        "intervention": trial.intervention,
        "disease": trial.disease,
        "outcome": trial.outcome,
    }
    if trial.keywords:
        record["keywords"] = trial.keywords
    if trial.description:
        record["description"] = trial.description
    if trial.criteria:
        record["criteria"] = trial.criteria
    if trial.status is not None:
        record["status"] = trial.status
    return record


def parse_corpus(path: str | Path, format: str = "jsonl") -> Corpus:
    """Parse a JSONL corpus file; empty contexts are tolerated, bad lines are not."""
    if format != "jsonl":
        raise ValueError(f"unsupported corpus format {format!r}")
    path = Path(path)
    corpus = Corpus()
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            trial = trial_from_record(record, where=f"{path}:{lineno}")
            corpus._add(trial)
    return corpus


def serialize_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write the corpus back out as JSONL, preserving trial order."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for trial in corpus:
            handle.write(json.dumps(trial_to_record(trial), ensure_ascii=False))
            handle.write("\n")


def status_label(trial: Trial) -> str:
    """Map a raw registry status to completion / termination / unlabeled."""
    status = (trial.status or "").strip().lower()
    if status in _COMPLETION_STATUSES:
        return "completion"
    if status in _TERMINATION_STATUSES:
        return "termination"
    return "unlabeled"


def split_corpus(corpus: Corpus, spec: SplitSpec) -> tuple[Corpus, Corpus, Corpus]:
    """Deterministic disjoint train/valid/test split matching the fractions."""
    if len(corpus) == 0:
        raise CorpusError("cannot split an empty corpus")
    n = len(corpus)
    order = list(range(n))
    random.Random(spec.seed).shuffle(order)

    n_train = int(n * spec.train_frac + 0.5)
    n_valid = int(n * spec.valid_frac + 0.5)
    n_train = min(n_train, n)
    n_valid = min(n_valid, n - n_train)

    for name, frac, size in (
        ("train", spec.train_frac, n_train),
        ("valid", spec.valid_frac, n_valid),
        ("test", spec.test_frac, n - n_train - n_valid),
    ):
        if frac > 0 and size == 0:
            warnings.warn(f"{name} split is empty despite fraction {frac}", stacklevel=2)

    picks = [corpus.trials[i] for i in order]
    return (
        Corpus.from_trials(picks[:n_train]),
        Corpus.from_trials(picks[n_train:n_train + n_valid]),
        Corpus.from_trials(picks[n_train + n_valid:]),
    )


def drop_attribute(trial: Trial, name: str) -> Trial:
    """Copy of the trial with one key attribute blanked out."""
    if name not in KEY_ATTRIBUTES:
        raise ValueError(f"{name!r} is not a key attribute")
    return replace(trial, **{name: ""})


def replace_attribute(trial: Trial, name: str, value: str) -> Trial:
    """Copy of the trial with one field substituted."""
    if name not in KEY_ATTRIBUTES and name != "context":
        raise ValueError(f"{name!r} is not a replaceable field")
    return replace(trial, **{name: value})
