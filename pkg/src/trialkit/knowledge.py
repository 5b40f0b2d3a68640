"""Concept dictionary and dictionary-based entity extraction.

The knowledge map is a flat one-level taxonomy: every concept has a canonical
name, a set of surface forms, and a parent concept key. "Similar" means
same-parent, "dissimilar" means different-parent. Extraction is greedy
longest-match over word boundaries, case-insensitive.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .text import normalize, token_spans


class KnowledgeError(ValueError):
    """Malformed knowledge-map file or entry."""


@dataclass(frozen=True)
class ConceptEntry:
    canonical: str
    surface_forms: tuple[str, ...]
    parent: str

    def __post_init__(self) -> None:
        if not self.canonical.strip():
            raise KnowledgeError("concept canonical name must be non-empty")
        if not self.parent.strip():
            raise KnowledgeError(f"concept {self.canonical!r}: parent must be non-empty")
        if not self.surface_forms:
            raise KnowledgeError(f"concept {self.canonical!r}: needs at least one surface form")
        for form in self.surface_forms:
            if not form.strip():
                raise KnowledgeError(f"concept {self.canonical!r}: empty surface form")


@dataclass(frozen=True)
class EntityMention:
    surface: str
    span: tuple[int, int]
    entry: int


@dataclass
class KnowledgeMap:
    """Immutable-after-load dictionary with surface and parent indices."""

    entries: list[ConceptEntry] = field(default_factory=list)
    surface_index: dict[str, int] = field(default_factory=dict)
    parent_index: dict[str, list[int]] = field(default_factory=dict)
    # token-length of the longest surface form, bounds the matcher's lookahead
    max_form_tokens: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, entry: ConceptEntry) -> None:
        index = len(self.entries)
        forms = list(entry.surface_forms)
        if normalize(entry.canonical) not in {normalize(f) for f in forms}:
            forms.append(entry.canonical)
        entry = ConceptEntry(entry.canonical, tuple(forms), entry.parent)

        keys: dict[str, str] = {}
        for form in entry.surface_forms:
            key = normalize(form)
            if not key:
                raise KnowledgeError(f"concept {entry.canonical!r}: surface form {form!r} "
                                     "has no word tokens")
            owner = self.surface_index.get(key)
            if owner is not None:
                raise KnowledgeError(
                    f"surface form {form!r} already claimed by "
                    f"{self.entries[owner].canonical!r}")
            keys.setdefault(key, form)

        self.entries.append(entry)
        self.parent_index.setdefault(entry.parent, []).append(index)
        for key in keys:
            self.surface_index[key] = index
            self.max_form_tokens = max(self.max_form_tokens, len(key.split()))

    def entry_for_surface(self, surface: str) -> int | None:
        return self.surface_index.get(normalize(surface))

    def parents(self) -> list[str]:
        return list(self.parent_index)

    def siblings(self, entry_index: int) -> list[int]:
        """Indices of other entries sharing the entry's parent."""
        parent = self.entries[entry_index].parent
        return [i for i in self.parent_index[parent] if i != entry_index]


def load_map(path: str | Path) -> KnowledgeMap:
    """Load a JSONL knowledge map; duplicate surface claims are load errors."""
    path = Path(path)
    kmap = KnowledgeMap()
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise KnowledgeError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            for name in ("canonical", "surface_forms", "parent"):
                if name not in record:
                    raise KnowledgeError(f"{path}:{lineno}: missing field {name!r}")
            try:
                kmap.add(ConceptEntry(
                    canonical=record["canonical"],
                    surface_forms=tuple(record["surface_forms"]),
                    parent=record["parent"],
                ))
            except KnowledgeError as exc:
                raise KnowledgeError(f"{path}:{lineno}: {exc}") from exc
    return kmap


def save_map(kmap: KnowledgeMap, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for entry in kmap.entries:
            handle.write(json.dumps({
                "canonical": entry.canonical,
                "surface_forms": list(entry.surface_forms),
                "parent": entry.parent,
            }, ensure_ascii=False))
            handle.write("\n")


def extract_entities(text: str, kmap: KnowledgeMap,
                     max_entities: int = 4) -> list[EntityMention]:
    """Greedy longest-match extraction, left to right, non-overlapping.

    Matches are case-insensitive and aligned to word boundaries; at most
    max_entities mentions are returned, in text order.
    """
    if max_entities < 1:
        raise ValueError("max_entities must be >= 1")
    if not kmap.entries:
        return []
    spans = token_spans(text)
    tokens = [text[a:b].lower() for a, b in spans]
    mentions: list[EntityMention] = []
    i = 0
    while i < len(tokens) and len(mentions) < max_entities:
        matched = False
        for length in range(min(kmap.max_form_tokens, len(tokens) - i), 0, -1):
            key = " ".join(tokens[i:i + length])
            entry = kmap.surface_index.get(key)
            if entry is not None:
                start = spans[i][0]
                end = spans[i + length - 1][1]
                mentions.append(EntityMention(text[start:end], (start, end), entry))
                i += length
                matched = True
                break
        if not matched:
            i += 1
    return mentions


def sample_similar(entry: int, kmap: KnowledgeMap, rng: random.Random,
                   avoid: str | None = None) -> str:
    """Canonical name of the entry or of a same-parent sibling, uniformly.

    `avoid` (typically the mention's surface form) is excluded from the
    options unless it is the only one left.
    """
    concept = kmap.entries[entry]
    options = [concept.canonical]
    options += [kmap.entries[i].canonical for i in kmap.siblings(entry)]
    if avoid is not None:
        avoid_key = normalize(avoid)
        filtered = [o for o in options if normalize(o) != avoid_key]
        if filtered:
            options = filtered
    if len(options) == 1:
        return options[0]
    return rng.choice(options)


def sample_dissimilar(entry: int, kmap: KnowledgeMap, rng: random.Random) -> str:
    """Canonical name of a uniformly sampled entry under a different parent."""
    parent = kmap.entries[entry].parent
    candidates = [i for i, e in enumerate(kmap.entries) if e.parent != parent]
    if not candidates:
        raise KnowledgeError("no dissimilar concept available")
    return kmap.entries[rng.choice(candidates)].canonical
