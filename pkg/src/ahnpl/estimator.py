"""scikit-learn style front end for the dual encoder."""

from __future__ import annotations

from dataclasses import fields, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ahnpl import encoders as enc
from ahnpl.embedding import row_cosine
from ahnpl.textgen import PosLexicon, pos_tag
from ahnpl.trainer import PRESETS, Sample, TrainConfig, train

_CONFIG_FIELDS = {f.name for f in fields(TrainConfig)}


def _as_token_lists(captions) -> list[list[str]]:
    out = []
    for c in captions:
        toks = c.split() if isinstance(c, str) else list(getattr(c, "tokens", c))
        if not toks:
            raise ValueError("empty caption")
        out.append([t.lower() for t in toks])
    return out


class AHNPLDualEncoder(BaseEstimator):
    """Image/caption dual encoder trained with hard-negative contrastive losses.

    ``fit(X, y)`` takes image feature rows ``X`` and their captions ``y``
    (strings or token lists). When ``pretrain_epochs > 0`` an order-blind
    encoder is first trained with the plain contrastive loss and then
    fine-tuned with the full objective, mirroring fine-tuning of a pretrained
    model. Textual negatives come from ``lexicon``.

    Parameters not listed here mirror :class:`ahnpl.trainer.TrainConfig`.

    Parameters
    ----------
    lexicon : PosLexicon
        Part-of-speech lexicon used to tag captions and draw substitutions.
    pretrain_epochs : int, default=5
        Epochs of bag-of-tokens contrastive pretraining; 0 trains from scratch.
    pretrain_lr : float, default=5e-3
    random_state : int, default=0
        Seed for every random stream of the fit.
    """

    def __init__(
        self,
        lexicon=None,
        batch_size=64,
        epochs=3,
        lr=1e-3,
        weight_decay=0.1,
        tau=0.01,
        k_per_kind=2,
        use_negatives=True,
        use_mhnl=True,
        use_dmcl=True,
        hidden_dim=32,
        embed_dim=32,
        max_len=16,
        detach_visual=False,
        pretrain_epochs=5,
        pretrain_lr=5e-3,
        random_state=0,
    ):
        self.lexicon = lexicon
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.tau = tau
        self.k_per_kind = k_per_kind
        self.use_negatives = use_negatives
        self.use_mhnl = use_mhnl
        self.use_dmcl = use_dmcl
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.max_len = max_len
        self.detach_visual = detach_visual
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_lr = pretrain_lr
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        params = {k: v for k, v in self.get_params().items() if k in _CONFIG_FIELDS}
        return TrainConfig(seed=int(self.random_state), eval_each_epoch=False, **params)

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        captions = _as_token_lists(y)
        if len(captions) != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {len(captions)} captions")
        if not isinstance(self.lexicon, PosLexicon):
            raise TypeError("lexicon must be a PosLexicon")
        config = self._config()
        corpus = [Sample(f"s{i}", pos_tag(c, self.lexicon, f"s{i}"), x) for i, (c, x) in enumerate(zip(captions, X))]
        vocab = enc.Vocabulary([t for c in captions for t in c] + list(self.lexicon.word_tags))
        init = None
        if self.pretrain_epochs > 0:
            pre = replace(
                PRESETS["desk-pretrain"],
                epochs=int(self.pretrain_epochs),
                lr=self.pretrain_lr,
                tau=self.tau,
                batch_size=self.batch_size,
                hidden_dim=self.hidden_dim,
                embed_dim=self.embed_dim,
                seed=config.seed,
                eval_each_epoch=False,
            )
            init = train(pre, corpus, lexicon=self.lexicon, vocab=vocab).params
        result = train(config, corpus, lexicon=self.lexicon, vocab=vocab, init=init)
        self.params_ = result.params
        self.vocab_ = result.vocab
        self.margin_state_ = result.margin
        self.report_ = result.report
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        """Raw image embeddings, shape (n_samples, embed_dim)."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return enc.encode_images(self.params_, X)

    def transform_text(self, captions) -> np.ndarray:
        check_is_fitted(self, "params_")
        ids = [self.vocab_.encode(c) for c in _as_token_lists(captions)]
        return enc.encode_texts(self.params_, ids)[0]

    def decision_function(self, X, captions) -> np.ndarray:
        """Cosine similarity of each image row with its caption."""
        return row_cosine(self.transform_text(captions), self.transform(X))

    def predict(self, X, positive, negative) -> np.ndarray:
        """True where the first caption scores strictly higher than the second."""
        return self.decision_function(X, positive) > self.decision_function(X, negative)

    def score(self, X, positive, negative) -> float:
        """Binary-choice accuracy; ties count as wrong."""
        return float(np.mean(self.predict(X, positive, negative)))
