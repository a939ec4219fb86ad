"""Textual hard negatives: noun swaps and same-POS substitutions.

Tagging and mask filling go through :class:`PosLexicon`, a word list keyed by
part of speech. Anything exposing ``tag(word)`` and ``candidates(tag)`` can
stand in for it (a statistical tagger, a masked language model).
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

logger = logging.getLogger(__name__)

TAGS = ("NOUN", "VERB", "ADJ", "DET", "ADP", "OTHER")
MASKABLE = ("NOUN", "VERB", "ADJ")
NOUN_SWAP = "NOUN_SWAP"
SUBSTITUTION = "SUBSTITUTION"


class NotApplicable(Exception):
    """The requested perturbation cannot be applied to this caption."""


@dataclass(frozen=True)
class Caption:
    id: str
    tokens: tuple[str, ...]
    tags: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) == 0 or len(self.tokens) != len(self.tags):
            raise ValueError("tokens and tags must have equal, non-zero length")
        if any(not t for t in self.tokens):
            raise ValueError("empty token")
        bad = set(self.tags) - set(TAGS)
        if bad:
            raise ValueError(f"unknown tags {sorted(bad)}")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def replace(self, tokens: Sequence[str], tags: Sequence[str] | None = None) -> "Caption":
        return Caption(self.id, tuple(tokens), tuple(self.tags if tags is None else tags))


class Tagger(Protocol):
    def tag(self, word: str) -> str: ...


class Substituter(Protocol):
    def candidates(self, tag: str) -> Sequence[str]: ...


@dataclass
class PosLexicon:
    """Word -> tag map with the inverse tag -> candidate words index."""

    word_tags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for word, tag in self.word_tags.items():
            if tag not in TAGS:
                raise ValueError(f"{word!r}: unknown tag {tag!r}")
        self._by_tag: dict[str, tuple[str, ...]] = {}
        for tag in TAGS:
            self._by_tag[tag] = tuple(sorted(w for w, t in self.word_tags.items() if t == tag))
        missing = [t for t in MASKABLE if not self._by_tag[t]]
        if missing:
            raise ValueError(f"lexicon has no candidates for {missing}")

    @classmethod
    def from_groups(cls, groups: Mapping[str, Iterable[str]]) -> "PosLexicon":
        word_tags: dict[str, str] = {}
        for tag, words in groups.items():
            for w in words:
                if w in word_tags and word_tags[w] != tag:
                    raise ValueError(f"{w!r} tagged both {word_tags[w]} and {tag}")
                word_tags[w] = tag
        return cls(word_tags)

    def tag(self, word: str) -> str:
        return self.word_tags.get(word, "OTHER")

    def candidates(self, tag: str) -> tuple[str, ...]:
        return self._by_tag.get(tag, ())

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for word in sorted(self.word_tags):
                fh.write(f"{word}\t{self.word_tags[word]}\n")

    @classmethod
    def from_file(cls, path) -> "PosLexicon":
        word_tags = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            word, sep, tag = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'word<TAB>TAG'")
            word_tags[word.strip()] = tag.strip()
        return cls(word_tags)


def pos_tag(tokens: Sequence[str], lexicon: Tagger, caption_id: str = "") -> Caption:
    tokens = [t.lower() for t in tokens]
    if not tokens:
        raise ValueError("cannot tag an empty token list")
    return Caption(caption_id, tuple(tokens), tuple(lexicon.tag(t) for t in tokens))


def _noun_pairs(caption: Caption) -> list[tuple[int, int]]:
    nouns = [i for i, t in enumerate(caption.tags) if t == "NOUN"]
    return [(i, j) for i, j in itertools.combinations(nouns, 2) if caption.tokens[i] != caption.tokens[j]]


def _swap(caption: Caption, i: int, j: int) -> Caption:
    tokens = list(caption.tokens)
    tokens[i], tokens[j] = tokens[j], tokens[i]
    return caption.replace(tokens)


def swap_nouns(caption: Caption, rng: np.random.Generator) -> Caption:
    """Exchange two nouns with different surface forms, chosen uniformly."""
    pairs = _noun_pairs(caption)
    if not pairs:
        raise NotApplicable("fewer than two distinct nouns")
    i, j = pairs[int(rng.integers(len(pairs)))]
    return _swap(caption, i, j)


def _substitution_options(caption: Caption, lexicon: Substituter) -> list[tuple[int, str]]:
    options = []
    for pos, (tok, tag) in enumerate(zip(caption.tokens, caption.tags)):
        if tag in MASKABLE:
            options.extend((pos, w) for w in lexicon.candidates(tag) if w != tok)
    return options


def _substitute(caption: Caption, pos: int, word: str) -> Caption:
    tokens = list(caption.tokens)
    tokens[pos] = word
    return caption.replace(tokens)


def substitute_masked(caption: Caption, lexicon: Substituter, rng: np.random.Generator) -> Caption:
    """Mask one NOUN/VERB/ADJ position and refill it with another word of that tag."""
    positions = [i for i, t in enumerate(caption.tags) if t in MASKABLE]
    if not positions:
        raise NotApplicable("no maskable token")
    positions = [i for i in positions if any(w != caption.tokens[i] for w in lexicon.candidates(caption.tags[i]))]
    if not positions:
        raise NotApplicable("no alternative candidates for any maskable token")
    pos = positions[int(rng.integers(len(positions)))]
    alts = [w for w in lexicon.candidates(caption.tags[pos]) if w != caption.tokens[pos]]
    return _substitute(caption, pos, alts[int(rng.integers(len(alts)))])


@dataclass(frozen=True)
class TextualNegative:
    caption: Caption
    kind: str
    slot: int


@dataclass
class TextualNegativeSet:
    source_id: str
    negatives: list[TextualNegative] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.negatives)

    def __iter__(self):
        return iter(self.negatives)


def generate_negative_set(
    caption: Caption,
    k_per_kind: int,
    lexicon: Substituter,
    rng: np.random.Generator,
) -> TextualNegativeSet:
    """Up to ``k_per_kind`` noun swaps then up to ``k_per_kind`` substitutions.

    Candidates of each kind are enumerated and drawn without replacement, so a
    kind yields fewer than ``k_per_kind`` only when it runs out of options.
    Slots follow generation order.
    """
    if k_per_kind < 1:
        raise ValueError("k_per_kind must be >= 1")
    seen = {caption.tokens}
    out = TextualNegativeSet(caption.id)

    def take(candidates: list[Caption], kind: str) -> None:
        order = rng.permutation(len(candidates)) if candidates else []
        added = 0
        for idx in order:
            if added == k_per_kind:
                break
            neg = candidates[int(idx)]
            if neg.tokens in seen:
                continue
            seen.add(neg.tokens)
            out.negatives.append(TextualNegative(neg, kind, len(out.negatives)))
            added += 1

    take([_swap(caption, i, j) for i, j in _noun_pairs(caption)], NOUN_SWAP)
    take([_substitute(caption, p, w) for p, w in _substitution_options(caption, lexicon)], SUBSTITUTION)
    return out


# -- corpus files ----------------------------------------------------------


def read_corpus(path) -> list[tuple[str, list[str]]]:
    """Lines of ``id<TAB>token token ...``."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cid, sep, body = line.partition("\t")
        if not sep or not body.split():
            raise ValueError(f"{path}:{lineno}: expected 'id<TAB>tokens'")
        rows.append((cid, body.split()))
    return rows


def write_corpus(path, rows: Iterable[tuple[str, Sequence[str]]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for cid, tokens in rows:
            fh.write(f"{cid}\t{' '.join(tokens)}\n")


def write_negatives(path, sets: Iterable[TextualNegativeSet]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sets:
            for neg in s.negatives:
                fh.write(f"{s.source_id}\t{neg.slot}\t{neg.kind}\t{' '.join(neg.caption.tokens)}\n")


def read_negatives(path, lexicon: Tagger) -> dict[str, TextualNegativeSet]:
    sets: dict[str, TextualNegativeSet] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4 or parts[2] not in (NOUN_SWAP, SUBSTITUTION):
            raise ValueError(f"{path}:{lineno}: expected 'source_id<TAB>slot<TAB>kind<TAB>tokens'")
        sid, slot, kind, body = parts
        cap = pos_tag(body.split(), lexicon, sid)
        s = sets.setdefault(sid, TextualNegativeSet(sid))
        s.negatives.append(TextualNegative(cap, kind, int(slot)))
    return sets
