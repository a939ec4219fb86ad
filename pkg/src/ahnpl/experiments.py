"""Seeded end-to-end runs: data generation, pretraining, fine-tuning ablations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ahnpl import encoders as enc
from ahnpl import synthetic as syn
from ahnpl.evaluation import evaluate_choice
from ahnpl.trainer import PRESETS, Sample, TrainConfig, TrainResult, stream, train

logger = logging.getLogger(__name__)

# rows of the loss ablation, from plain contrastive fine-tuning to the full objective
ABLATION_ROWS = {
    "contrastive": dict(use_negatives=False, use_mhnl=False, use_dmcl=False),
    "negatives": dict(use_negatives=True, use_mhnl=False, use_dmcl=False),
    "negatives+mhnl": dict(use_negatives=True, use_mhnl=True, use_dmcl=False),
    "negatives+dmcl": dict(use_negatives=True, use_mhnl=False, use_dmcl=True),
    "full": dict(use_negatives=True, use_mhnl=True, use_dmcl=True),
}


@dataclass
class Dataset:
    corpus: list[Sample]
    benchmark: list[syn.ChoiceItem]
    vocab: syn.SceneVocab
    tokens: enc.Vocabulary

    @property
    def lexicon(self):
        return self.vocab.lexicon()


def make_dataset(seed: int, data: syn.DataConfig = syn.DataConfig()) -> Dataset:
    vocab = data.vocab
    pairs = syn.generate_pairs(data.n_train, stream(seed, "data"), vocab, data.noise_sigma)
    bench = syn.build_benchmark(data.n_benchmark, stream(seed, "benchmark"), vocab=vocab, noise_sigma=data.noise_sigma)
    corpus = [Sample(p.id, p.caption, p.features) for p in pairs]
    return Dataset(corpus, bench, vocab, enc.Vocabulary(vocab.tokens()))


def pretrain(ds: Dataset, seed: int, config: TrainConfig | None = None) -> TrainResult:
    config = replace(config or PRESETS["desk-pretrain"], seed=seed, eval_each_epoch=False)
    return train(config, ds.corpus, ds.benchmark, ds.lexicon, vocab=ds.tokens)


def run_ablation(
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    rows: Sequence[str] = tuple(ABLATION_ROWS),
    finetune: TrainConfig | None = None,
    pretrain_config: TrainConfig | None = None,
    data: syn.DataConfig = syn.DataConfig(),
) -> dict[str, list[float]]:
    """Benchmark accuracy per ablation row and seed.

    Each seed gets its own data, one shared pretrained encoder, and one
    fine-tuning run per row starting from it.
    """
    finetune = finetune or PRESETS["desk"]
    out: dict[str, list[float]] = {r: [] for r in rows}
    for seed in seeds:
        ds = make_dataset(seed, data)
        base = pretrain(ds, seed, pretrain_config)
        for r in rows:
            cfg = replace(finetune, seed=seed, eval_each_epoch=False, **ABLATION_ROWS[r])
            res = train(cfg, ds.corpus, ds.benchmark, ds.lexicon, vocab=ds.tokens, init=base.params)
            acc = evaluate_choice(res.params, res.vocab, ds.benchmark).accuracy
            out[r].append(acc)
            logger.info("seed %d %-15s accuracy %.4f", seed, r, acc)
    return out


def summarize(results: dict[str, list[float]]) -> dict[str, float]:
    return {r: float(np.mean(v)) for r, v in results.items()}
