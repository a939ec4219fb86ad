"""Toy dual encoders mapping captions and image features into one embedding space.

Text side: look up token embeddings, average them, then an affine projection.
The position-aware variant multiplies each token embedding elementwise by a
learned position embedding before averaging, so word order matters. Image
side: a single affine projection of the feature vector.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ahnpl.embedding import format_embedding_lines, parse_embedding_lines

CHECKPOINT_HEADER = "#ahnpl-ckpt v1"


@dataclass(frozen=True)
class EncoderDims:
    vocab_size: int
    image_dim: int
    hidden_dim: int = 32
    embed_dim: int = 32
    max_len: int = 16
    position_aware: bool = True

    def __post_init__(self):
        for name in ("vocab_size", "image_dim", "hidden_dim", "embed_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


class Vocabulary:
    """Whitespace-token vocabulary with a fixed, sorted id assignment."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens = tuple(sorted(set(tokens)))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.index[t] for t in tokens], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"out-of-vocabulary token {exc.args[0]!r}") from None


PARAM_ORDER = ("text_embed", "text_pos", "text_proj", "text_bias", "image_proj", "image_bias")
TEXT_PARAMS = ("text_embed", "text_pos", "text_proj", "text_bias")
IMAGE_PARAMS = ("image_proj", "image_bias")


@dataclass
class EncoderParams:
    dims: EncoderDims
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.shapes(self.dims)
        if set(self.arrays) != set(expected):
            raise ValueError(f"expected parameters {sorted(expected)}, got {sorted(self.arrays)}")
        for name, shape in expected.items():
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")
            self.arrays[name] = arr

    @staticmethod
    def shapes(dims: EncoderDims) -> dict[str, tuple[int, ...]]:
        shapes = {
            "text_embed": (dims.vocab_size, dims.hidden_dim),
            "text_proj": (dims.hidden_dim, dims.embed_dim),
            "text_bias": (dims.embed_dim,),
            "image_proj": (dims.image_dim, dims.embed_dim),
            "image_bias": (dims.embed_dim,),
        }
        if dims.position_aware:
            shapes["text_pos"] = (dims.max_len, dims.hidden_dim)
        return shapes

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return [n for n in PARAM_ORDER if n in self.arrays]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.dims, {k: v.copy() for k, v in self.arrays.items()})


def init_params(seed, dims: EncoderDims, position_init_std: float | None = None) -> EncoderParams:
    """Gaussian init with std 1/sqrt(fan_in); lookup tables count fan_in as 1, biases start at 0.

    With ``position_init_std`` the position table starts at ``1 + N(0, std^2)``
    instead, i.e. close to an order-blind bag of tokens.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    arrays = {}
    for name, shape in EncoderParams.shapes(dims).items():
        if name.endswith("_bias"):
            arrays[name] = np.zeros(shape)
        elif name == "text_pos" and position_init_std is not None:
            arrays[name] = 1.0 + position_init_std * rng.standard_normal(shape)
        elif name in ("text_embed", "text_pos"):
            arrays[name] = rng.standard_normal(shape)
        else:
            arrays[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return EncoderParams(dims, arrays)


def with_positions(params: EncoderParams, max_len: int, rng: np.random.Generator | None = None, std: float = 0.0) -> EncoderParams:
    """Position-aware copy of a bag-of-tokens encoder that computes the same function
    when ``std == 0`` (every position embedding starts at 1)."""
    if params.dims.position_aware:
        raise ValueError("encoder is already position-aware")
    dims = replace(params.dims, position_aware=True, max_len=max_len)
    arrays = {k: v.copy() for k, v in params.arrays.items()}
    pos = np.ones((max_len, dims.hidden_dim))
    if std:
        pos += std * rng.standard_normal(pos.shape)
    arrays["text_pos"] = pos
    return EncoderParams(dims, arrays)


@dataclass
class TextCache:
    ids: np.ndarray  # (M, L) padded with 0
    mask: np.ndarray  # (M, L)
    lengths: np.ndarray  # (M,)
    hidden: np.ndarray  # (M, H)


def pad_ids(token_ids: Sequence[np.ndarray], dims: EncoderDims):
    if len(token_ids) == 0:
        raise ValueError("no captions to encode")
    lengths = np.array([len(t) for t in token_ids], dtype=np.int64)
    if np.any(lengths == 0):
        raise ValueError("empty caption")
    width = int(lengths.max())
    if dims.position_aware and width > dims.max_len:
        raise ValueError(f"caption length {width} exceeds max_len {dims.max_len}")
    ids = np.zeros((len(token_ids), width), dtype=np.int64)
    mask = np.zeros((len(token_ids), width))
    for r, t in enumerate(token_ids):
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t >= dims.vocab_size):
            raise IndexError(f"token id out of vocabulary range [0, {dims.vocab_size})")
        ids[r, : len(t)] = t
        mask[r, : len(t)] = 1.0
    return ids, mask, lengths


def encode_texts(params: EncoderParams, token_ids: Sequence[np.ndarray]):
    """Encode a list of token-id arrays; returns ``(embeddings (M, D), cache)``."""
    ids, mask, lengths = pad_ids(token_ids, params.dims)
    if params.dims.position_aware:
        tok = params["text_embed"][ids] * params["text_pos"][None, : ids.shape[1], :]
        hidden = np.sum(tok * mask[:, :, None], axis=1) / lengths[:, None]
    else:
        # token counts make the bag exactly order-invariant, not just up to rounding
        counts = np.zeros((ids.shape[0], params.dims.vocab_size))
        np.add.at(counts, (np.repeat(np.arange(ids.shape[0]), ids.shape[1]), ids.ravel()), mask.ravel())
        hidden = (counts @ params["text_embed"]) / lengths[:, None]
    out = hidden @ params["text_proj"] + params["text_bias"]
    return out, TextCache(ids, mask, lengths, hidden)


def encode_text(params: EncoderParams, token_ids) -> np.ndarray:
    return encode_texts(params, [np.asarray(token_ids)])[0][0]


def encode_images(params: EncoderParams, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dims.image_dim:
        raise ValueError(f"expected features of shape (M, {params.dims.image_dim}), got {x.shape}")
    return x @ params["image_proj"] + params["image_bias"]


def encode_image(params: EncoderParams, features) -> np.ndarray:
    return encode_images(params, np.asarray(features, dtype=np.float64)[None, :])[0]


def backward_texts(params: EncoderParams, cache: TextCache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    grads = {
        "text_proj": cache.hidden.T @ d_out,
        "text_bias": d_out.sum(axis=0),
    }
    d_hidden = d_out @ params["text_proj"].T  # (M, H)
    weight = (cache.mask / cache.lengths[:, None])[:, :, None]  # (M, L, 1)
    d_tok = d_hidden[:, None, :] * weight  # grad wrt per-position input (M, L, H)
    d_embed = np.zeros_like(params["text_embed"])
    if params.dims.position_aware:
        width = cache.ids.shape[1]
        pos = params["text_pos"][None, :width, :]
        d_pos = np.zeros_like(params["text_pos"])
        d_pos[:width] = np.sum(d_tok * params["text_embed"][cache.ids], axis=0)
        grads["text_pos"] = d_pos
        d_tok = d_tok * pos
    np.add.at(d_embed, cache.ids.reshape(-1), d_tok.reshape(-1, d_tok.shape[-1]))
    grads["text_embed"] = d_embed
    return grads


def backward_images(params: EncoderParams, features: np.ndarray, d_out: np.ndarray) -> dict[str, np.ndarray]:
    return {"image_proj": features.T @ d_out, "image_bias": d_out.sum(axis=0)}


def backward(params: EncoderParams, text_cache: TextCache, d_text: np.ndarray, features: np.ndarray, d_image: np.ndarray):
    """Parameter gradients for both encoders given upstream embedding gradients."""
    grads = backward_texts(params, text_cache, d_text)
    grads.update(backward_images(params, features, d_image))
    return grads


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, params: EncoderParams, vocab: Vocabulary, a: float, extra: dict | None = None) -> None:
    meta = {"dims": asdict(params.dims), "vocab": list(vocab.tokens), "a": repr(float(a))}
    if extra:
        meta["extra"] = extra
    parts = [CHECKPOINT_HEADER + "\n", "#meta " + json.dumps(meta, sort_keys=True) + "\n"]
    for name in params.names():
        arr = params[name]
        rows = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
        parts.append(f"#block {name} {' '.join(str(s) for s in arr.shape)}\n")
        parts.append(f"#dim {rows.shape[1]}\n")
        parts.append(format_embedding_lines((str(i), row) for i, row in enumerate(rows)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(parts))


def load_checkpoint(path):
    """Returns ``(params, vocab, a, extra)``."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not an ahnpl checkpoint")
    if len(lines) < 2 or not lines[1].startswith("#meta "):
        raise ValueError(f"{path}: missing #meta line")
    meta = json.loads(lines[1][len("#meta "):])
    dims = EncoderDims(**meta["dims"])
    arrays = {}
    i = 2
    while i < len(lines):
        head = lines[i].split()
        if not head or head[0] != "#block":
            raise ValueError(f"{path}:{i + 1}: expected '#block'")
        name, shape = head[1], tuple(int(s) for s in head[2:])
        width = int(lines[i + 1].split()[1])
        n_rows = shape[0] if len(shape) > 1 else 1
        body = parse_embedding_lines(lines[i + 2 : i + 2 + n_rows], width)
        arrays[name] = np.stack([body[str(r)] for r in range(n_rows)]).reshape(shape)
        i += 2 + n_rows
    return EncoderParams(dims, arrays), Vocabulary(meta["vocab"]), float(meta["a"]), meta.get("extra", {})
