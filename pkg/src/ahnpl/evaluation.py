"""Binary-choice accuracy and embedding distance reports."""

from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ahnpl import encoders as enc
from ahnpl.embedding import cosine_similarity, format_float, row_cosine
from ahnpl.perturbation import deviation_embedding, perturb_image_embedding


def score_pair(params: enc.EncoderParams, vocab: enc.Vocabulary, caption_tokens: Sequence[str], features) -> float:
    """Cosine similarity between an encoded caption and an encoded image."""
    e_text = enc.encode_text(params, vocab.encode(caption_tokens))
    e_image = enc.encode_image(params, features)
    return cosine_similarity(e_text, e_image)


@dataclass
class EvalReport:
    accuracy: float
    per_category: dict[str, float]
    counts: dict[str, int]
    item_ids: list[str] = field(default_factory=list)
    categories: list[str] = field(default_factory=list)
    margins: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def total(self) -> int:
        return int(sum(self.counts.values()))

    def accuracy_from_margins(self) -> float:
        return float(np.mean(self.margins > 0)) if self.margins.size else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "count", "accuracy"])
        for cat, n in self.counts.items():
            w.writerow([cat, n, format_float(self.per_category[cat])])
        w.writerow(["ALL", self.total, format_float(self.accuracy)])
        return buf.getvalue()

    def items_tsv(self) -> str:
        lines = ["item_id\tcategory\tmargin\tcorrect"]
        for iid, cat, m in zip(self.item_ids, self.categories, self.margins):
            lines.append(f"{iid}\t{cat}\t{format_float(m)}\t{int(m > 0)}")
        return "\n".join(lines) + "\n"


def _encode_captions(params, vocab, captions):
    return enc.encode_texts(params, [vocab.encode(c.tokens) for c in captions])[0]


def evaluate_choice(params: enc.EncoderParams, vocab: enc.Vocabulary, items) -> EvalReport:
    """An item is correct iff S(I, T+) > S(I, T-); exact ties count as wrong."""
    if len(items) == 0:
        raise ValueError("no benchmark items")
    image = enc.encode_images(params, np.stack([it.features for it in items]))
    s_pos = row_cosine(_encode_captions(params, vocab, [it.positive for it in items]), image)
    s_neg = row_cosine(_encode_captions(params, vocab, [it.negative for it in items]), image)
    margins = s_pos - s_neg
    correct = s_pos > s_neg
    cats = [it.category for it in items]
    counts: dict[str, int] = OrderedDict()
    hits: dict[str, int] = {}
    for cat, ok in zip(cats, correct):
        counts[cat] = counts.get(cat, 0) + 1
        hits[cat] = hits.get(cat, 0) + int(ok)
    per_category = {c: hits[c] / counts[c] for c in counts}
    return EvalReport(
        accuracy=float(np.mean(correct)),
        per_category=per_category,
        counts=dict(counts),
        item_ids=[it.id for it in items],
        categories=cats,
        margins=margins,
    )


DISTANCE_PAIRS = (
    ("image", "text"),
    ("image", "text_neg"),
    ("image", "image_neg"),
    ("text", "text_neg"),
    ("text", "image_neg"),
    ("text_neg", "image_neg"),
)


def cosine_distance(a, b) -> float:
    return 1.0 - cosine_similarity(a, b)


def distance_report(params: enc.EncoderParams, vocab: enc.Vocabulary, examples) -> list[dict]:
    """Pairwise cosine distances among e_image, e_text, e_text_neg and the derived e_image_neg.

    ``examples`` are items with ``positive``, ``negative`` and ``features``; the
    visual negative is rebuilt here from the three encoder outputs.
    """
    rows = []
    for ex in examples:
        emb = {
            "image": enc.encode_image(params, ex.features),
            "text": enc.encode_text(params, vocab.encode(ex.positive.tokens)),
            "text_neg": enc.encode_text(params, vocab.encode(ex.negative.tokens)),
        }
        emb["image_neg"] = perturb_image_embedding(emb["image"], deviation_embedding(emb["text"], emb["text_neg"]))
        row = {"id": ex.id}
        for a, b in DISTANCE_PAIRS:
            row[f"{a}|{b}"] = cosine_distance(emb[a], emb[b])
        rows.append(row)
    return rows


def distance_table_tsv(rows: list[dict]) -> str:
    cols = ["id"] + [f"{a}|{b}" for a, b in DISTANCE_PAIRS]
    lines = ["\t".join(cols)]
    for r in rows:
        lines.append("\t".join([r["id"]] + [format_float(r[c]) for c in cols[1:]]))
    return "\n".join(lines) + "\n"
