"""Forward and backward through encoders, visual perturbation and losses together."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ahnpl import encoders as enc
from ahnpl.losses import (
    BatchTensors,
    EmbeddingGrads,
    GradCheckReport,
    LossBreakdown,
    LossFlags,
    MarginState,
    finite_difference_check,
    negative_margins,
    positive_margins,
    total_loss,
)
from ahnpl.perturbation import perturb_batch


@dataclass
class RawBatch:
    """Token ids and image features for N samples with K textual negatives each."""

    pos_ids: list[np.ndarray]
    neg_ids: list[list[np.ndarray]]
    features: np.ndarray

    def __post_init__(self):
        n = len(self.pos_ids)
        if n == 0:
            raise ValueError("empty batch")
        if len(self.neg_ids) != n or np.shape(self.features)[0] != n:
            raise ValueError("pos_ids, neg_ids and features must have the same length")
        ks = {len(row) for row in self.neg_ids}
        if len(ks) != 1:
            raise ValueError(f"every sample needs the same number of negatives, got {sorted(ks)}")
        self.features = np.asarray(self.features, dtype=np.float64)

    @property
    def n(self) -> int:
        return len(self.pos_ids)

    @property
    def k(self) -> int:
        return len(self.neg_ids[0])


@dataclass
class Forward:
    batch: BatchTensors
    text_cache: enc.TextCache
    features: np.ndarray


def forward(params: enc.EncoderParams, raw: RawBatch, tau: float) -> Forward:
    n, k = raw.n, raw.k
    all_ids = list(raw.pos_ids) + [ids for row in raw.neg_ids for ids in row]
    text_all, cache = enc.encode_texts(params, all_ids)
    d = text_all.shape[1]
    text = text_all[:n]
    text_neg = text_all[n:].reshape(n, k, d)
    image = enc.encode_images(params, raw.features)
    image_neg = perturb_batch(image, text, text_neg)
    return Forward(BatchTensors(text, image, text_neg, image_neg, tau), cache, raw.features)


def embedding_to_param_grads(
    params: enc.EncoderParams, fwd: Forward, g: EmbeddingGrads, detach_visual: bool = False
) -> dict[str, np.ndarray]:
    """Route embedding gradients through ``image_neg = image + text_neg - text`` into parameters."""
    n, k, d = fwd.batch.text_neg.shape
    d_text = g.text.copy()
    d_text_neg = g.text_neg.copy()
    d_image = g.image + g.image_neg.sum(axis=1)
    if not detach_visual:
        d_text -= g.image_neg.sum(axis=1)
        d_text_neg += g.image_neg
    d_text_all = np.concatenate([d_text, d_text_neg.reshape(n * k, d)], axis=0)
    grads = enc.backward(params, fwd.text_cache, d_text_all, fwd.features, d_image)
    grads["a"] = np.array([g.a])
    return grads


def loss_and_grads(
    params: enc.EncoderParams,
    raw: RawBatch,
    state: MarginState,
    flags: LossFlags = LossFlags(),
    tau: float = 0.07,
    detach_visual: bool = False,
    terms: Sequence[str] = ("l_total",),
):
    """Returns ``(fwd, breakdown, {term: param grads})`` for the requested terms."""
    fwd = forward(params, raw, tau)
    breakdown = total_loss(fwd.batch, state, flags)
    grads = {t: embedding_to_param_grads(params, fwd, breakdown.term_grads[t], detach_visual) for t in terms}
    return fwd, breakdown, grads


# -- gradient check over the full parameter set ----------------------------


def _split(params: enc.EncoderParams, flat: Mapping[str, np.ndarray]):
    p = enc.EncoderParams(params.dims, {name: flat[name] for name in params.names()})
    return p, float(flat["a"][0])


def gradcheck(
    params: enc.EncoderParams,
    raw: RawBatch,
    state: MarginState,
    term: str,
    flags: LossFlags = LossFlags(),
    tau: float = 0.07,
    epsilon: float = 1e-5,
    detach_visual: bool = False,
    max_coords_per_group: int | None = None,
    seed: int = 0,
    corrupt: float = 0.0,
) -> GradCheckReport:
    """Central-difference check of one loss term against its analytic parameter gradient.

    ``corrupt`` is added to the first coordinate of the analytic text projection
    gradient, as a canary that the check can fail.
    """
    _, _, grads = loss_and_grads(params, raw, state, flags, tau, detach_visual, terms=(term,))
    analytic = {k: v.copy() for k, v in grads[term].items()}
    if corrupt:
        analytic["text_proj"].flat[0] += corrupt

    def fn(flat):
        p, a = _split(params, flat)
        s = MarginState(a=a, thresholds=state.thresholds, step=state.step)
        b = total_loss(forward(p, raw, tau).batch, s, flags)
        return float(getattr(b, term))

    def hinges(flat):
        p, a = _split(params, flat)
        s = MarginState(a=a, thresholds=state.thresholds, step=state.step)
        batch = forward(p, raw, tau).batch
        parts = [positive_margins(batch, s) > 0]
        if batch.k:
            parts.append((negative_margins(batch, s) > 0).ravel())
        return np.concatenate(parts)

    flat = {name: params[name] for name in params.names()}
    flat["a"] = np.array([state.a])
    return finite_difference_check(
        fn,
        flat,
        analytic,
        epsilon=epsilon,
        hinge_states=hinges,
        max_coords_per_group=max_coords_per_group,
        rng=np.random.default_rng(seed),
        name=term,
    )


def toy_problem(seed: int, n: int = 4, k: int = 2, dim: int = 8, vocab_size: int = 12, image_dim: int = 10):
    """Small random encoder, batch and margin state for gradient verification."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    dims = enc.EncoderDims(vocab_size=vocab_size, image_dim=image_dim, hidden_dim=dim, embed_dim=dim, max_len=8)
    params = enc.init_params(rng, dims)

    def caption():
        return rng.integers(0, vocab_size, size=int(rng.integers(3, 8)))

    raw = RawBatch([caption() for _ in range(n)], [[caption() for _ in range(k)] for _ in range(n)], rng.standard_normal((n, image_dim)))
    state = MarginState(a=float(rng.uniform(0.2, 0.8)), thresholds=rng.uniform(-0.1, 0.2, size=k))
    return params, raw, state
