"""Loss terms of the adaptive hard-negative objective and their analytic gradients.

Every loss takes a :class:`BatchTensors` of raw (unnormalized) embeddings and
returns ``(value, EmbeddingGrads)``. Gradients are with respect to the four
embedding blocks and the learnable margin ``a``; chaining into encoder
parameters happens in :mod:`ahnpl.pipeline`.

Terms, per batch B of matched (image, text) pairs:

* contrastive: symmetric InfoNCE over the N x N cosine matrix, summed (not
  averaged) over the batch, temperature ``tau``;
* visual / textual negative: per-sample logsumexp of cosine similarity to the
  sample's visual / textual hard negatives;
* positive margin: ``sum max(0, a - S(I, T))``;
* negative margin: ``sum_n max(0, S(I, T_n) - S(I, T) + M_n)`` where ``M_n``
  is the batch-mean positive/negative gap for slot ``n`` one step earlier.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from ahnpl.embedding import cosine_matrix, cosine_matrix_grad, row_cosine, row_cosine_grad

logger = logging.getLogger(__name__)

A_LOWER_BOUND = 0.2
DEFAULT_TAU = 0.07

LOSS_NAMES = ("l_cont", "l_neg_visual", "l_neg_textual", "l_mar_pos", "l_mar_neg", "l_total")


class ConfigurationError(ValueError):
    pass


@dataclass
class BatchTensors:
    text: np.ndarray  # (N, D)
    image: np.ndarray  # (N, D)
    text_neg: np.ndarray  # (N, K, D)
    image_neg: np.ndarray  # (N, K, D)
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        self.text = np.asarray(self.text, dtype=np.float64)
        self.image = np.asarray(self.image, dtype=np.float64)
        n, d = self.text.shape
        if n < 1 or self.image.shape != (n, d):
            raise ValueError(f"text {self.text.shape} and image {self.image.shape} must both be (N>=1, D)")
        self.text_neg = np.asarray(self.text_neg, dtype=np.float64).reshape(n, -1, d)
        self.image_neg = np.asarray(self.image_neg, dtype=np.float64).reshape(n, -1, d)
        if self.text_neg.shape != self.image_neg.shape:
            raise ValueError("textual and visual negatives must be slot-aligned")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        for name in ("text", "image", "text_neg", "image_neg"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise FloatingPointError(f"non-finite values in {name}")

    @property
    def n(self) -> int:
        return self.text.shape[0]

    @property
    def k(self) -> int:
        return self.text_neg.shape[1]

    @property
    def dim(self) -> int:
        return self.text.shape[1]


@dataclass
class EmbeddingGrads:
    text: np.ndarray
    image: np.ndarray
    text_neg: np.ndarray
    image_neg: np.ndarray
    a: float = 0.0

    @classmethod
    def zeros(cls, batch: BatchTensors) -> "EmbeddingGrads":
        return cls(
            np.zeros_like(batch.text),
            np.zeros_like(batch.image),
            np.zeros_like(batch.text_neg),
            np.zeros_like(batch.image_neg),
            0.0,
        )

    def __add__(self, other: "EmbeddingGrads") -> "EmbeddingGrads":
        return EmbeddingGrads(
            self.text + other.text,
            self.image + other.image,
            self.text_neg + other.text_neg,
            self.image_neg + other.image_neg,
            self.a + other.a,
        )


@dataclass
class MarginState:
    """Learnable positive margin ``a`` plus per-slot adaptive thresholds.

    ``prev_similarities`` holds ``(S(I, T) of shape (N,), S(I, T_n) of shape (N, K))``
    from the last completed step, or ``None`` before the first step.
    """

    a: float
    thresholds: np.ndarray = field(default_factory=lambda: np.zeros(0))
    prev_similarities: tuple[np.ndarray, np.ndarray] | None = None
    step: int = 0

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64).ravel()
        if self.step < 0:
            raise ValueError("step must be >= 0")

    @classmethod
    def initial(cls, rng: np.random.Generator, n_slots: int = 0) -> "MarginState":
        # one standard-normal draw, then the lower bound
        a = clamp_a(float(rng.standard_normal()))
        return cls(a=a, thresholds=np.zeros(n_slots))


def clamp_a(a: float) -> float:
    return max(A_LOWER_BOUND, float(a))


# -- kernels ---------------------------------------------------------------


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def negative_log_inverse_sum_exp(s) -> float:
    """The hard-negative penalty written literally: ``-log(1 / sum_n exp(s_n))``."""
    s = np.asarray(s, dtype=np.float64)
    return -math.log(1.0 / float(np.sum(np.exp(s))))


# -- loss terms ------------------------------------------------------------


def contrastive_loss(batch: BatchTensors, with_negatives: bool = False):
    """Symmetric InfoNCE summed over the batch.

    With ``with_negatives`` every textual hard negative in the batch joins the
    candidate texts of the image-to-text softmax (the "+ negatives" ablation
    row); the text-to-image direction is unchanged.
    """
    tau = batch.tau
    n = batch.n
    s = cosine_matrix(batch.text, batch.image)  # rows texts, cols images
    z = s / tau
    eye = np.eye(n)

    loss_t2i = -np.sum(np.diag(z) - logsumexp(z, axis=1))
    d_z = softmax(z, axis=1) - eye

    text_pool = batch.text_neg.reshape(-1, batch.dim) if with_negatives and batch.k else None
    if text_pool is None:
        loss_i2t = -np.sum(np.diag(z) - logsumexp(z, axis=0))
        d_z = d_z + softmax(z, axis=0) - eye
        d_zx = None
    else:
        sx = cosine_matrix(text_pool, batch.image)  # (N*K, N)
        zfull = np.concatenate([z, sx / tau], axis=0)
        loss_i2t = -np.sum(np.diag(z) - logsumexp(zfull, axis=0))
        p = softmax(zfull, axis=0)
        d_z = d_z + p[:n] - eye
        d_zx = p[n:]

    grads = EmbeddingGrads.zeros(batch)
    d_text, d_image = cosine_matrix_grad(batch.text, batch.image, d_z / tau)
    grads.text += d_text
    grads.image += d_image
    if d_zx is not None:
        d_pool, d_image_x = cosine_matrix_grad(text_pool, batch.image, d_zx / tau)
        grads.text_neg += d_pool.reshape(batch.text_neg.shape)
        grads.image += d_image_x
    return float(loss_t2i + loss_i2t), grads


def _negative_kernel(anchor: np.ndarray, negs: np.ndarray):
    s = row_cosine(anchor[:, None, :], negs)  # (N, K)
    value = float(np.sum(logsumexp(s, axis=1)))
    d_anchor, d_negs = row_cosine_grad(anchor[:, None, :], negs, softmax(s, axis=1))
    return value, d_anchor.sum(axis=1), d_negs


def visual_negative_loss(batch: BatchTensors):
    grads = EmbeddingGrads.zeros(batch)
    if batch.k == 0:
        return 0.0, grads
    value, grads.image, grads.image_neg = _negative_kernel(batch.image, batch.image_neg)
    return value, grads


def textual_negative_loss(batch: BatchTensors):
    grads = EmbeddingGrads.zeros(batch)
    if batch.k == 0:
        return 0.0, grads
    value, grads.text, grads.text_neg = _negative_kernel(batch.text, batch.text_neg)
    return value, grads


def negative_loss(batch: BatchTensors):
    v_vis, g_vis = visual_negative_loss(batch)
    v_txt, g_txt = textual_negative_loss(batch)
    return v_vis + v_txt, g_vis + g_txt


def positive_similarities(batch: BatchTensors) -> np.ndarray:
    return row_cosine(batch.image, batch.text)


def negative_similarities(batch: BatchTensors) -> np.ndarray:
    """S(I, T_n): image against each of its textual negatives, shape (N, K)."""
    return row_cosine(batch.image[:, None, :], batch.text_neg)


def positive_margins(batch: BatchTensors, state: MarginState) -> np.ndarray:
    return state.a - positive_similarities(batch)


def negative_margins(batch: BatchTensors, state: MarginState) -> np.ndarray:
    if state.thresholds.shape[0] < batch.k:
        raise ConfigurationError(f"thresholds cover {state.thresholds.shape[0]} slots, batch has {batch.k}")
    m = state.thresholds[: batch.k]
    return negative_similarities(batch) - positive_similarities(batch)[:, None] + m[None, :]


def positive_margin_loss(batch: BatchTensors, state: MarginState):
    margins = positive_margins(batch, state)
    active = margins > 0  # subgradient 0 at the kink
    grads = EmbeddingGrads.zeros(batch)
    grads.image, grads.text = row_cosine_grad(batch.image, batch.text, -active.astype(np.float64))
    grads.a = float(np.count_nonzero(active))
    return float(np.sum(margins[active])), grads


def negative_margin_loss(batch: BatchTensors, state: MarginState):
    grads = EmbeddingGrads.zeros(batch)
    if batch.k == 0:
        return 0.0, grads
    margins = negative_margins(batch, state)
    active = (margins > 0).astype(np.float64)
    d_img_n, grads.text_neg = row_cosine_grad(batch.image[:, None, :], batch.text_neg, active)
    d_img_p, grads.text = row_cosine_grad(batch.image, batch.text, -active.sum(axis=1))
    grads.image = d_img_n.sum(axis=1) + d_img_p
    return float(np.sum(margins[active > 0])), grads


def margin_loss(batch: BatchTensors, state: MarginState):
    v_pos, g_pos = positive_margin_loss(batch, state)
    v_neg, g_neg = negative_margin_loss(batch, state)
    return v_pos + v_neg, g_pos + g_neg


def update_adaptive_thresholds(prev_batch_similarities, state: MarginState, n_slots: int | None = None) -> MarginState:
    """Advance ``state`` one step, recomputing slot thresholds from step t-1.

    ``prev_batch_similarities`` is ``(S(I, T) (N,), S(I, T_n) (N, K))`` from the
    previous step, or ``None`` when there is no previous step, in which case
    every threshold starts at zero. Current-step embeddings are never read.
    """
    if n_slots is None:
        n_slots = state.thresholds.shape[0] if prev_batch_similarities is None else np.shape(prev_batch_similarities[1])[1]
    thresholds = np.zeros(n_slots)
    if prev_batch_similarities is not None:
        pos, neg = (np.asarray(x, dtype=np.float64) for x in prev_batch_similarities)
        if neg.ndim != 2 or neg.shape[0] != pos.shape[0]:
            raise ValueError(f"shape mismatch: pos {pos.shape}, neg {neg.shape}")
        k_prev = neg.shape[1]
        if k_prev != n_slots:
            logger.warning("slot count changed %d -> %d; reinitializing unmatched slots to 0", k_prev, n_slots)
        shared = min(k_prev, n_slots)
        thresholds[:shared] = np.mean(pos) - np.mean(neg[:, :shared], axis=0)
    return replace(state, thresholds=thresholds, step=state.step + 1)


def cache_similarities(batch: BatchTensors, state: MarginState) -> MarginState:
    """Record this step's positive and per-slot negative similarities for the next update."""
    prev = (positive_similarities(batch).copy(), negative_similarities(batch).copy())
    return replace(state, prev_similarities=prev)


# -- composition -----------------------------------------------------------


@dataclass(frozen=True)
class LossFlags:
    """Which terms are switched on. ``use_negatives`` adds textual hard
    negatives to the contrastive softmax; the other two gate the multimodal
    hard negative loss and the dynamic margin loss."""

    use_negatives: bool = True
    use_mhnl: bool = True
    use_dmcl: bool = True


@dataclass
class LossBreakdown:
    l_cont: float = 0.0
    l_neg_visual: float = 0.0
    l_neg_textual: float = 0.0
    l_neg: float = 0.0
    l_mar_pos: float = 0.0
    l_mar_neg: float = 0.0
    l_mar: float = 0.0
    l_total: float = 0.0
    grads: EmbeddingGrads | None = None
    term_grads: dict[str, EmbeddingGrads] = field(default_factory=dict, repr=False)

    def values(self) -> dict[str, float]:
        return {
            "l_cont": self.l_cont,
            "l_neg_visual": self.l_neg_visual,
            "l_neg_textual": self.l_neg_textual,
            "l_neg": self.l_neg,
            "l_mar_pos": self.l_mar_pos,
            "l_mar_neg": self.l_mar_neg,
            "l_mar": self.l_mar,
            "l_total": self.l_total,
        }


def total_loss(batch: BatchTensors, state: MarginState, flags: LossFlags = LossFlags()) -> LossBreakdown:
    """Unit-weighted sum of the contrastive, negative and margin terms.

    A switched-off term contributes exactly 0 to the value and to the gradients.
    """
    out = LossBreakdown()
    zero = EmbeddingGrads.zeros(batch)
    terms: dict[str, tuple[float, EmbeddingGrads]] = {
        "l_cont": contrastive_loss(batch, with_negatives=flags.use_negatives),
        "l_neg_visual": visual_negative_loss(batch) if flags.use_mhnl else (0.0, zero),
        "l_neg_textual": textual_negative_loss(batch) if flags.use_mhnl else (0.0, zero),
        "l_mar_pos": positive_margin_loss(batch, state) if flags.use_dmcl else (0.0, zero),
        "l_mar_neg": negative_margin_loss(batch, state) if flags.use_dmcl else (0.0, zero),
    }
    for name, (value, g) in terms.items():
        setattr(out, name, value)
        out.term_grads[name] = g
    out.l_neg = out.l_neg_visual + out.l_neg_textual
    out.l_mar = out.l_mar_pos + out.l_mar_neg
    out.l_total = out.l_cont + out.l_neg + out.l_mar
    grads = zero
    for g in out.term_grads.values():
        grads = grads + g
    out.grads = grads
    out.term_grads["l_total"] = grads
    if not math.isfinite(out.l_total):
        raise FloatingPointError(f"non-finite total loss: {out.values()}")
    return out


# -- finite-difference verification ----------------------------------------


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    n_checked: int
    n_kink: int
    worst: tuple[str, int] | None = None
    per_group: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float = 1e-6) -> bool:
        return self.n_checked > 0 and self.max_rel_error < tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients from
    turning finite-difference round-off into huge ratios."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(
    fn: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    hinge_states: Callable[[Mapping[str, np.ndarray]], np.ndarray] | None = None,
    max_coords_per_group: int | None = None,
    rng: np.random.Generator | None = None,
    name: str = "",
) -> GradCheckReport:
    """Compare analytic gradients with central differences, coordinate by coordinate.

    ``fn`` evaluates the loss for a dict of parameter arrays (it must not keep
    references to them). A coordinate whose ±epsilon probes flip any hinge
    reported by ``hinge_states`` sits on a kink; it is skipped and counted in
    ``n_kink``. Groups larger than ``max_coords_per_group`` are checked on a
    seeded random subset.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    rng = rng if rng is not None else np.random.default_rng(0)
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    centre_states = hinge_states(work) if hinge_states is not None else None
    report = GradCheckReport(name=name, max_rel_error=0.0, n_checked=0, n_kink=0)
    for group in sorted(work):
        arr = work[group]
        flat = arr.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_group is not None and flat.size > max_coords_per_group:
            coords = np.sort(rng.choice(flat.size, size=max_coords_per_group, replace=False))
        g_analytic = np.asarray(analytic[group], dtype=np.float64).reshape(-1)
        group_err = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            f_plus = fn(work)
            kink = hinge_states is not None and not np.array_equal(hinge_states(work), centre_states)
            flat[c] = orig - epsilon
            f_minus = fn(work)
            kink = kink or (hinge_states is not None and not np.array_equal(hinge_states(work), centre_states))
            flat[c] = orig
            if kink:
                report.n_kink += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = relative_error(float(g_analytic[c]), numeric)
            report.n_checked += 1
            if err > group_err:
                group_err = err
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = (group, int(c))
        report.per_group[group] = group_err
    return report
