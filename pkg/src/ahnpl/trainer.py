"""Batch assembly, optimization loop and margin-state lifecycle."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from ahnpl import encoders as enc
from ahnpl.embedding import format_float
from ahnpl.evaluation import evaluate_choice
from ahnpl.losses import (
    BatchTensors,
    LossBreakdown,
    LossFlags,
    MarginState,
    cache_similarities,
    clamp_a,
    total_loss,
    update_adaptive_thresholds,
)
from ahnpl.pipeline import RawBatch, embedding_to_param_grads, forward
from ahnpl.textgen import Caption, PosLexicon, TextualNegativeSet, generate_negative_set

logger = logging.getLogger(__name__)

STREAMS = {"data": 0, "negatives": 1, "init": 2, "shuffle": 3, "benchmark": 4, "pad": 5}


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named sub-stream of the run seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAMS[name]]))


class NumericalError(FloatingPointError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 3
    lr: float = 1e-3
    weight_decay: float = 0.1
    tau: float = 0.07
    k_per_kind: int = 2
    seed: int = 0
    use_negatives: bool = True
    use_mhnl: bool = True
    use_dmcl: bool = True
    hidden_dim: int = 32
    embed_dim: int = 32
    max_len: int = 16
    position_aware: bool = True
    position_init_std: float | None = None
    optimizer: str = "adamw"
    detach_visual: bool = False
    eval_each_epoch: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("batch_size", "epochs", "k_per_kind", "hidden_dim", "embed_dim", "max_len"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.optimizer != "adamw":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")

    @property
    def flags(self) -> LossFlags:
        return LossFlags(self.use_negatives, self.use_mhnl, self.use_dmcl)

    @property
    def needs_negatives(self) -> bool:
        return self.use_negatives or self.use_mhnl or self.use_dmcl

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    # fine-tuning stage; tau matches the logit scale a pretrained CLIP ends up with
    "desk": TrainConfig(tau=0.01),
    # order-blind contrastive pretraining that "desk" fine-tunes from
    "desk-pretrain": TrainConfig(
        epochs=5, lr=5e-3, tau=0.01, position_aware=False, use_negatives=False, use_mhnl=False, use_dmcl=False
    ),
    # fine-tuning schedule reported for CLIP on MSCOCO
    "paper-mscoco": TrainConfig(batch_size=128, lr=2e-5, weight_decay=0.1, epochs=10),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


# -- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def optimizer_update(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    no_decay: Sequence[str] = ("a",),
):
    """One AdamW step. Weight decay shrinks weights directly and never enters the moments."""
    b1, b2 = betas
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        decay = 0.0 if name in no_decay else weight_decay
        p = p * (1 - lr * decay)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


# -- data plumbing ---------------------------------------------------------


@dataclass
class Sample:
    id: str
    caption: Caption
    features: np.ndarray


def prepare_negatives(
    samples: Sequence[Sample],
    lexicon: PosLexicon,
    k_per_kind: int,
    seed: int,
    negative_sets: dict[str, TextualNegativeSet] | None = None,
):
    """Generate (or look up) negatives, drop samples without any, pad to a fixed K.

    Returns ``(kept samples, {id: list of K negative token tuples}, K)``. Short
    sets are padded by redrawing from the sample's own negatives, never the positive.
    """
    rng = stream(seed, "negatives")
    sets = {}
    for s in samples:
        if negative_sets is not None:
            sets[s.id] = negative_sets.get(s.id, TextualNegativeSet(s.id))
        else:
            sets[s.id] = generate_negative_set(s.caption, k_per_kind, lexicon, rng)
    kept = [s for s in samples if len(sets[s.id]) > 0]
    dropped = len(samples) - len(kept)
    if dropped:
        logger.info("dropped %d samples with no applicable negatives", dropped)
    if not kept:
        raise ValueError("no sample has a textual negative")
    k = max(len(sets[s.id]) for s in kept)
    pad_rng = stream(seed, "pad")
    padded = {}
    for s in kept:
        negs = [n.caption.tokens for n in sorted(sets[s.id].negatives, key=lambda n: n.slot)]
        while len(negs) < k:
            negs.append(negs[int(pad_rng.integers(len(sets[s.id])))])
        padded[s.id] = negs
    return kept, padded, k


def build_raw_batch(samples: Sequence[Sample], negatives: dict, vocab: enc.Vocabulary, k: int) -> RawBatch:
    if len(samples) == 0:
        raise ValueError("empty batch")
    return RawBatch(
        [vocab.encode(s.caption.tokens) for s in samples],
        [[vocab.encode(t) for t in negatives[s.id][:k]] for s in samples] if k else [[] for _ in samples],
        np.stack([s.features for s in samples]),
    )


def assemble_batch(samples, negatives, params: enc.EncoderParams, vocab: enc.Vocabulary, k: int, tau: float = 0.07) -> BatchTensors:
    """Encode captions, negatives and images, and attach slot-aligned visual negatives."""
    return forward(params, build_raw_batch(samples, negatives, vocab, k), tau).batch


# -- training --------------------------------------------------------------


@dataclass
class StepResult:
    params: enc.EncoderParams
    margin: MarginState
    opt: AdamState
    breakdown: LossBreakdown


def train_step(raw: RawBatch, params: enc.EncoderParams, margin: MarginState, opt: AdamState, config: TrainConfig) -> StepResult:
    # thresholds for this step come only from the previous step's cache
    margin = update_adaptive_thresholds(margin.prev_similarities, margin, n_slots=raw.k)
    fwd = forward(params, raw, config.tau)
    breakdown = _total(fwd.batch, margin, config)
    grads = embedding_to_param_grads(params, fwd, breakdown.grads, config.detach_visual)
    current = dict(params.arrays)
    current["a"] = np.array([margin.a])
    updated, opt = optimizer_update(current, grads, opt, config.lr, config.weight_decay)
    a = clamp_a(float(updated.pop("a")[0]))
    new_params = enc.EncoderParams(params.dims, updated)
    margin = cache_similarities(fwd.batch, replace(margin, a=a))
    return StepResult(new_params, margin, opt, breakdown)


def _total(batch, margin, config):
    try:
        out = total_loss(batch, margin, config.flags)
    except FloatingPointError as exc:
        raise NumericalError(str(exc), {"a": margin.a, "thresholds": margin.thresholds.tolist(), "step": margin.step}) from exc
    return out


METRIC_COLUMNS = ("step", "l_cont", "l_neg_visual", "l_neg_textual", "l_mar_pos", "l_mar_neg", "l_total", "a")


@dataclass
class TrainReport:
    config: dict
    k: int
    history: list[dict] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint_id: str = ""
    n_dropped: int = 0

    @property
    def a_trajectory(self) -> list[float]:
        return [row["a"] for row in self.history]

    @property
    def threshold_trajectories(self) -> list[list[float]]:
        return [row["thresholds"] for row in self.history]

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(METRIC_COLUMNS) + [f"M_{n}" for n in range(self.k)])
        for row in self.history:
            w.writerow(
                [row["step"]]
                + [format_float(row[c]) for c in METRIC_COLUMNS[1:]]
                + [format_float(m) for m in row["thresholds"]]
            )
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        return cls(**json.loads(text))


@dataclass
class TrainResult:
    params: enc.EncoderParams
    vocab: enc.Vocabulary
    margin: MarginState
    report: TrainReport


def train(
    config: TrainConfig,
    corpus: Sequence[Sample],
    benchmark=None,
    lexicon: PosLexicon | None = None,
    vocab: enc.Vocabulary | None = None,
    negative_sets: dict[str, TextualNegativeSet] | None = None,
    init: enc.EncoderParams | None = None,
) -> TrainResult:
    """Seeded epochs over the corpus; the benchmark (if given) is scored after each epoch."""
    config.validate()
    t0 = time.perf_counter()
    if config.needs_negatives:
        if lexicon is None and negative_sets is None:
            raise ValueError("a lexicon or precomputed negative sets are required when negatives are used")
        kept, negatives, k = prepare_negatives(corpus, lexicon, config.k_per_kind, config.seed, negative_sets)
    else:
        kept, negatives, k = list(corpus), {}, 0
    if not kept:
        raise ValueError("empty corpus")
    if init is not None and vocab is None:
        raise ValueError("fine-tuning from existing parameters needs their vocabulary")
    if vocab is None:
        words = {t for s in kept for t in s.caption.tokens}
        words.update(t for negs in negatives.values() for n in negs for t in n)
        if lexicon is not None:
            words.update(lexicon.word_tags)
        if benchmark is not None:
            words.update(t for it in benchmark for c in (it.positive, it.negative) for t in c.tokens)
        vocab = enc.Vocabulary(words)
    dims = enc.EncoderDims(
        vocab_size=len(vocab),
        image_dim=kept[0].features.shape[0],
        hidden_dim=config.hidden_dim,
        embed_dim=config.embed_dim,
        max_len=config.max_len,
        position_aware=config.position_aware,
    )
    init_rng = stream(config.seed, "init")
    if init is None:
        params = enc.init_params(init_rng, dims, config.position_init_std)
    else:
        params = init.copy()
        if config.position_aware and not params.dims.position_aware:
            params = enc.with_positions(params, config.max_len, init_rng, config.position_init_std or 0.0)
        if params.dims != dims:
            raise ValueError(f"initial parameters have dims {params.dims}, config implies {dims}")
    margin = MarginState.initial(init_rng, n_slots=k)
    opt = AdamState()
    shuffle = stream(config.seed, "shuffle")
    report = TrainReport(config=asdict(config), k=k, n_dropped=len(corpus) - len(kept))

    step = 0
    for epoch in range(config.epochs):
        order = shuffle.permutation(len(kept))
        for start in range(0, len(order), config.batch_size):
            batch = [kept[i] for i in order[start : start + config.batch_size]]
            raw = build_raw_batch(batch, negatives, vocab, k)
            res = train_step(raw, params, margin, opt, config)
            params, margin, opt = res.params, res.margin, res.opt
            step += 1
            row = {"step": step, **res.breakdown.values()}
            row["a"] = margin.a
            row["thresholds"] = margin.thresholds.tolist()
            report.history.append(row)
        if benchmark is not None and config.eval_each_epoch:
            acc = evaluate_choice(params, vocab, benchmark).accuracy
            report.epoch_accuracy.append(acc)
            logger.info("epoch %d: loss %.4f, choice accuracy %.4f", epoch + 1, report.history[-1]["l_total"], acc)
    report.wall_clock = time.perf_counter() - t0
    return TrainResult(params, vocab, margin, report)
