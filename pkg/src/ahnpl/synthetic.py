"""Compositional toy scenes: "a <att> <obj> <rel> a <att> <obj>".

Image features are role-specific one-hot blocks, so binding an attribute to
the wrong object or swapping subject and object yields a different feature
vector. Benchmark items pair a scene with its caption and a minimally edited,
wrong caption, one of six edit categories.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ahnpl.embedding import read_embeddings, write_embeddings
from ahnpl.textgen import Caption, PosLexicon, pos_tag

OBJECTS = ("cube", "ball", "cone", "ring", "box", "star", "disk", "rod", "cup", "key", "bell", "drum")
ATTRIBUTES = ("red", "blue", "green", "yellow", "purple", "orange", "black", "white")
RELATIONS = ("touches", "faces", "follows", "holds", "pushes", "lifts")

CATEGORIES = ("SWAP_OBJ", "SWAP_ATT", "REPLACE_REL", "REPLACE_ATT", "REPLACE_OBJ", "ADD_ATT")
TEMPLATE_TAGS = ("DET", "ADJ", "NOUN", "VERB", "DET", "ADJ", "NOUN")


@dataclass(frozen=True)
class SceneVocab:
    n_objects: int = 8
    n_attributes: int = 6
    n_relations: int = 4

    def __post_init__(self):
        if not 3 <= self.n_objects <= len(OBJECTS):
            raise ValueError(f"n_objects must be in [3, {len(OBJECTS)}]")
        if not 2 <= self.n_attributes <= len(ATTRIBUTES):
            raise ValueError(f"n_attributes must be in [2, {len(ATTRIBUTES)}]")
        if not 2 <= self.n_relations <= len(RELATIONS):
            raise ValueError(f"n_relations must be in [2, {len(RELATIONS)}]")

    @property
    def objects(self):
        return OBJECTS[: self.n_objects]

    @property
    def attributes(self):
        return ATTRIBUTES[: self.n_attributes]

    @property
    def relations(self):
        return RELATIONS[: self.n_relations]

    @property
    def feature_dim(self) -> int:
        return 2 * self.n_objects + 2 * self.n_attributes + self.n_relations

    def lexicon(self) -> PosLexicon:
        return PosLexicon.from_groups(
            {"NOUN": self.objects, "ADJ": self.attributes, "VERB": self.relations, "DET": ("a",)}
        )

    def tokens(self) -> list[str]:
        return ["a", *self.objects, *self.attributes, *self.relations]


@dataclass(frozen=True)
class Scene:
    subject: tuple[int, int]  # (object id, attribute id)
    relation: int
    object: tuple[int, int]

    def __post_init__(self):
        if self.subject[0] == self.object[0]:
            raise ValueError("subject and object must be different objects")

    def ids(self) -> tuple[int, int, int, int, int]:
        return (self.subject[0], self.subject[1], self.relation, self.object[0], self.object[1])

    def key(self) -> str:
        return "-".join(str(i) for i in self.ids())


def generate_scene(rng: np.random.Generator, vocab: SceneVocab = SceneVocab()) -> Scene:
    o1 = int(rng.integers(vocab.n_objects))
    o2 = int(rng.integers(vocab.n_objects - 1))
    if o2 >= o1:
        o2 += 1
    return Scene(
        (o1, int(rng.integers(vocab.n_attributes))),
        int(rng.integers(vocab.n_relations)),
        (o2, int(rng.integers(vocab.n_attributes))),
    )


def is_benchmark_scene(scene: Scene, holdout: int = 5) -> bool:
    """Stable hash split: roughly 1/holdout of all scenes are reserved for evaluation."""
    digest = hashlib.sha256(scene.key().encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big") % holdout == 0


def render_tokens(scene: Scene, vocab: SceneVocab = SceneVocab()) -> list[str]:
    (o1, a1), r, (o2, a2) = scene.subject, scene.relation, scene.object
    return ["a", vocab.attributes[a1], vocab.objects[o1], vocab.relations[r], "a", vocab.attributes[a2], vocab.objects[o2]]


def render_caption(scene: Scene, vocab: SceneVocab = SceneVocab(), caption_id: str = "") -> Caption:
    return Caption(caption_id, tuple(render_tokens(scene, vocab)), TEMPLATE_TAGS)


def parse_caption(tokens: Sequence[str], vocab: SceneVocab = SceneVocab()) -> Scene:
    """Inverse of :func:`render_caption` for well-formed template captions."""
    if len(tokens) != 7 or tokens[0] != "a" or tokens[4] != "a":
        raise ValueError(f"not a template caption: {' '.join(tokens)}")
    try:
        return Scene(
            (vocab.objects.index(tokens[2]), vocab.attributes.index(tokens[1])),
            vocab.relations.index(tokens[3]),
            (vocab.objects.index(tokens[6]), vocab.attributes.index(tokens[5])),
        )
    except ValueError:
        raise ValueError(f"unknown word in caption: {' '.join(tokens)}") from None


def render_image_features(
    scene: Scene, noise_sigma: float, rng: np.random.Generator, vocab: SceneVocab = SceneVocab()
) -> np.ndarray:
    """One-hot blocks [obj1 | att1 | rel | obj2 | att2] plus N(0, sigma^2) noise."""
    sizes = (vocab.n_objects, vocab.n_attributes, vocab.n_relations, vocab.n_objects, vocab.n_attributes)
    x = np.zeros(vocab.feature_dim)
    offset = 0
    for idx, size in zip(scene.ids(), sizes):
        x[offset + idx] = 1.0
        offset += size
    if noise_sigma > 0:
        x += noise_sigma * rng.standard_normal(x.shape[0])
    return x


@dataclass
class Pair:
    id: str
    scene: Scene
    caption: Caption
    features: np.ndarray


@dataclass
class ChoiceItem:
    id: str
    category: str
    positive: Caption
    negative: Caption
    features: np.ndarray
    scene: Scene | None = None


def _draw(rng, vocab, benchmark: bool, accept=lambda s: True) -> Scene:
    while True:
        s = generate_scene(rng, vocab)
        if is_benchmark_scene(s) == benchmark and accept(s):
            return s


def generate_pairs(n: int, rng: np.random.Generator, vocab: SceneVocab = SceneVocab(), noise_sigma: float = 0.1) -> list[Pair]:
    """Training pairs drawn from the non-benchmark half of the scene hash split."""
    pairs = []
    for i in range(n):
        scene = _draw(rng, vocab, benchmark=False)
        cid = f"train{i:05d}"
        pairs.append(Pair(cid, scene, render_caption(scene, vocab, cid), render_image_features(scene, noise_sigma, rng, vocab)))
    return pairs


def _other(rng, n: int, exclude: Sequence[int]) -> int:
    choices = [i for i in range(n) if i not in exclude]
    return choices[int(rng.integers(len(choices)))]


def apply_edit(scene: Scene, category: str, rng: np.random.Generator, vocab: SceneVocab = SceneVocab()) -> list[str]:
    """Token list of a wrong caption for ``scene`` under ``category``."""
    (o1, a1), r, (o2, a2) = scene.subject, scene.relation, scene.object
    tokens = render_tokens(scene, vocab)
    if category == "SWAP_OBJ":
        tokens[2], tokens[6] = tokens[6], tokens[2]
    elif category == "SWAP_ATT":
        if a1 == a2:
            raise ValueError("SWAP_ATT needs two different attributes")
        tokens[1], tokens[5] = tokens[5], tokens[1]
    elif category == "REPLACE_REL":
        tokens[3] = vocab.relations[_other(rng, vocab.n_relations, [r])]
    elif category == "REPLACE_ATT":
        if rng.integers(2) == 0:
            tokens[1] = vocab.attributes[_other(rng, vocab.n_attributes, [a1])]
        else:
            tokens[5] = vocab.attributes[_other(rng, vocab.n_attributes, [a2])]
    elif category == "REPLACE_OBJ":
        # new object absent from the scene, so the edit is never a disguised swap
        new = vocab.objects[_other(rng, vocab.n_objects, [o1, o2])]
        tokens[2 if rng.integers(2) == 0 else 6] = new
    elif category == "ADD_ATT":
        if rng.integers(2) == 0:
            tokens.insert(1, vocab.attributes[_other(rng, vocab.n_attributes, [a1])])
        else:
            tokens.insert(5, vocab.attributes[_other(rng, vocab.n_attributes, [a2])])
    else:
        raise ValueError(f"unknown category {category!r}")
    return tokens


def build_benchmark(
    n: int,
    rng: np.random.Generator,
    categories: Sequence[str] = CATEGORIES,
    vocab: SceneVocab = SceneVocab(),
    noise_sigma: float = 0.1,
) -> list[ChoiceItem]:
    """Items cycle through ``categories`` so counts differ by at most one."""
    lexicon = vocab.lexicon()
    items = []
    for i in range(n):
        category = categories[i % len(categories)]
        accept = (lambda s: s.subject[1] != s.object[1]) if category == "SWAP_ATT" else (lambda s: True)
        scene = _draw(rng, vocab, benchmark=True, accept=accept)
        iid = f"bench{i:05d}"
        pos = render_caption(scene, vocab, iid)
        neg = pos_tag(apply_edit(scene, category, rng, vocab), lexicon, iid)
        items.append(ChoiceItem(iid, category, pos, neg, render_image_features(scene, noise_sigma, rng, vocab), scene))
    return items


# -- benchmark files -------------------------------------------------------


def write_benchmark(path, items: Sequence[ChoiceItem], features_path=None) -> Path:
    """Writes the item TSV and a sibling feature file; returns the feature file path."""
    path = Path(path)
    features_path = Path(features_path) if features_path else path.with_suffix(".features.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for it in items:
            fh.write(f"{it.id}\t{it.category}\t{' '.join(it.positive.tokens)}\t{' '.join(it.negative.tokens)}\n")
    write_embeddings(features_path, [(it.id, it.features) for it in items])
    return features_path


def read_benchmark(path, lexicon: PosLexicon, features_path=None) -> list[ChoiceItem]:
    path = Path(path)
    features = read_embeddings(features_path or path.with_suffix(".features.txt"))
    items = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
        iid, category, pos, neg = parts
        if iid not in features:
            raise ValueError(f"{path}:{lineno}: no features for {iid!r}")
        items.append(
            ChoiceItem(iid, category, pos_tag(pos.split(), lexicon, iid), pos_tag(neg.split(), lexicon, iid), features[iid])
        )
    return items


@dataclass(frozen=True)
class DataConfig:
    n_objects: int = 8
    n_attributes: int = 6
    n_relations: int = 4
    n_train: int = 2000
    n_benchmark: int = 600
    noise_sigma: float = 0.1

    @property
    def vocab(self) -> SceneVocab:
        return SceneVocab(self.n_objects, self.n_attributes, self.n_relations)
