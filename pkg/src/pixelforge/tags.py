"""OSM tag atoms, multi-tag compositions and tile-frequency vocabularies."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

SENTENCE_SEP = ", "


class TagParseError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class TagAtom:
    key: str
    value: str

    def __post_init__(self):
        if not self.key or any(ch.isspace() for ch in self.key):
            raise TagParseError(f"invalid tag key {self.key!r}")
        if not self.value or self.value != " ".join(self.value.split()):
            raise TagParseError(f"invalid tag value {self.value!r}")
        if "," in self.key or "," in self.value:
            raise TagParseError("tag tokens may not contain commas")

    @property
    def rendered(self) -> str:
        return f"{self.key} {self.value}"

    def __str__(self):
        return self.rendered


def parse_tag(text: str) -> TagAtom:
    """Parse ``"key value..."``; whitespace is collapsed and everything lowercased."""
    tokens = text.lower().split()
    if not tokens:
        raise TagParseError("empty tag string")
    if len(tokens) < 2:
        raise TagParseError(f"tag {text!r} has no value")
    return TagAtom(tokens[0], " ".join(tokens[1:]))


def tag_from_kv(key, value) -> TagAtom:
    """Build an atom from a raw OSM key/value pair (e.g. GeoJSON properties).

    Whitespace inside keys becomes ``_`` and commas become ``;`` so that the
    rendered sentence stays parseable.
    """
    k = "_".join(str(key).lower().replace(",", ";").split())
    v = " ".join(str(value).lower().replace(",", ";").split())
    return TagAtom(k, v)


@dataclass(frozen=True)
class Composition:
    """Canonical (sorted, deduplicated) multi-tag set; empty means unlabeled."""

    atoms: tuple = ()

    def __post_init__(self):
        canon = tuple(sorted(set(self.atoms), key=lambda a: a.rendered))
        object.__setattr__(self, "atoms", canon)

    def __len__(self):
        return len(self.atoms)

    def __iter__(self):
        return iter(self.atoms)

    def __bool__(self):
        return bool(self.atoms)

    @property
    def keys(self) -> frozenset:
        return frozenset(a.key for a in self.atoms)

    def __str__(self):
        return render_sentence(self)


EMPTY = Composition()


def normalize_composition(atoms: Iterable[TagAtom]) -> Composition:
    return Composition(tuple(atoms))


def render_sentence(c: Composition) -> str:
    return SENTENCE_SEP.join(a.rendered for a in c.atoms)


def parse_sentence(text: str) -> Composition:
    """Inverse of :func:`render_sentence`."""
    if not text.strip():
        return EMPTY
    return normalize_composition(parse_tag(part) for part in text.split(","))


def split_parent_child(a: TagAtom) -> tuple[str, str]:
    return a.key, a.value


def subsample_tags(c: Composition, keep_prob: float, rng: np.random.Generator) -> Composition:
    """Keep each atom independently with ``keep_prob``; never empty a nonempty input."""
    if not 0.0 <= keep_prob <= 1.0:
        raise ValueError("keep_prob must lie in [0, 1]")
    if not c:
        return c
    draws = rng.random(len(c.atoms))
    kept = [a for a, u in zip(c.atoms, draws) if u < keep_prob]
    if not kept:
        kept = [c.atoms[int(rng.integers(len(c.atoms)))]]
    return Composition(tuple(kept))


@dataclass
class TagVocabulary:
    """Tile-frequency counts per rendered tag."""

    total_tiles: int = 0
    counts: dict = field(default_factory=dict)

    @classmethod
    def from_tiles(cls, tiles: Iterable[Iterable[TagAtom]]) -> "TagVocabulary":
        counter: Counter = Counter()
        total = 0
        for atoms in tiles:
            total += 1
            counter.update({a.rendered for a in atoms})
        return cls(total_tiles=total, counts=dict(sorted(counter.items())))

    @property
    def parents(self) -> set[str]:
        return {parse_tag(t).key for t in self.counts}

    def to_json(self) -> str:
        return json.dumps({"total_tiles": self.total_tiles, "counts": self.counts}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TagVocabulary":
        obj = json.loads(text)
        vocab = cls(total_tiles=int(obj["total_tiles"]), counts={k: int(v) for k, v in obj["counts"].items()})
        if any(v > vocab.total_tiles for v in vocab.counts.values()):
            raise ValueError("tag frequency exceeds total tile count")
        return vocab


def filter_rare_tags(v: TagVocabulary, threshold: float = 0.002) -> set[TagAtom]:
    """Tags whose tile frequency is not strictly below ``threshold``."""
    if v.total_tiles <= 0:
        raise ValueError("vocabulary has no tiles")
    # compare counts rather than fractions so the boundary is exact
    return {parse_tag(t) for t, n in v.counts.items() if n >= threshold * v.total_tiles - 1e-9}
