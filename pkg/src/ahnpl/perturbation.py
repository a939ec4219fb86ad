"""Visual hard negatives from text-side semantic shift.

The shift between a caption and its negative is carried over to the image
embedding unchanged: ``e_img_neg = e_img + (e_txt_neg - e_txt)``. Everything
works on raw encoder outputs; cosine similarity normalizes later.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ahnpl.embedding import as_vector


def _check_same_dim(*vs: np.ndarray) -> None:
    dims = {v.shape[-1] for v in vs}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch: {sorted(dims)}")


def deviation_embedding(e_text_orig, e_text_neg) -> np.ndarray:
    a, b = as_vector(e_text_orig), as_vector(e_text_neg)
    _check_same_dim(a, b)
    return b - a


def perturb_image_embedding(e_image_orig, delta) -> np.ndarray:
    a, d = as_vector(e_image_orig), as_vector(delta)
    _check_same_dim(a, d)
    return a + d


@dataclass
class VisualNegativeSet:
    source_image_id: str
    negatives: list[tuple[np.ndarray, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.negatives)


def build_visual_negatives(
    e_image_orig,
    e_text_orig,
    text_negative_embeddings: Sequence,
    source_image_id: str = "",
) -> VisualNegativeSet:
    """One visual negative per textual negative, sharing its slot index."""
    img = as_vector(e_image_orig)
    txt = as_vector(e_text_orig)
    _check_same_dim(img, txt)
    out = VisualNegativeSet(source_image_id)
    for slot, neg in enumerate(text_negative_embeddings):
        delta = deviation_embedding(txt, neg)
        out.negatives.append((perturb_image_embedding(img, delta), slot))
    return out


def perturb_batch(image: np.ndarray, text: np.ndarray, text_neg: np.ndarray) -> np.ndarray:
    """Batched form: ``image`` (N, D), ``text`` (N, D), ``text_neg`` (N, K, D) -> (N, K, D).

    Same two-step arithmetic as :func:`build_visual_negatives`, so results agree bitwise.
    """
    delta = text_neg - text[:, None, :]
    return image[:, None, :] + delta
