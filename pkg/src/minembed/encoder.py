"""Compact trainable sentence encoder.

Architecture: hashed-vocabulary token embeddings, mean or last-token
pooling, two affine layers with a tanh between them, low-rank adapters on
both weight matrices, and L2 normalization of the output.

The adapter composition is ``W_eff = W + (alpha / rank) * A^T B^T`` with
``A: [rank, in_dim]`` and ``B: [out_dim, rank]``. ``B`` starts at zero, so a
freshly initialized encoder computes exactly the base-weight forward pass.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import storage
from .errors import DataError, NumericError

DEFAULT_VOCAB_SIZE = 16384
DEFAULT_D_EMB = 64
DEFAULT_D_HID = 128
DEFAULT_D_OUT = 64
DEFAULT_LORA_RANK = 16
DEFAULT_LORA_ALPHA = 32.0
DEFAULT_LORA_DROPOUT = 0.05
INIT_WEIGHT_SCALE = 0.05
INIT_ADAPTER_SD = 0.02

POOLING_MEAN = "mean"
POOLING_LAST = "last_token"
POOLINGS = (POOLING_MEAN, POOLING_LAST)

# Canonical tensor order shared by checkpoints, gradients, optimizer state.
TENSOR_NAMES = ("E", "W1", "b1", "W2", "b2", "lora_A1", "lora_B1", "lora_A2", "lora_B2")
ADAPTER_NAMES = ("lora_A1", "lora_B1", "lora_A2", "lora_B2")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_TOKEN_RE = re.compile(r"[^\W_]+")


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass(frozen=True)
class Tokenizer:
    """Hash tokenizer: lowercase, split on non-alphanumeric runs, FNV-1a mod vocab."""

    vocab_size: int = DEFAULT_VOCAB_SIZE
    scheme: str = "fnv1a64"

    def __call__(self, text: str) -> list[int]:
        return [fnv1a_64(tok.encode("utf-8")) % self.vocab_size for tok in _TOKEN_RE.findall(text.lower())]


def tokenize(text: str, vocab_size: int = DEFAULT_VOCAB_SIZE) -> list[int]:
    """Token ids for a text under the default hash scheme."""
    return Tokenizer(vocab_size=vocab_size)(text)


@dataclass
class EncoderParams:
    """All trainable tensors plus the adapter hyperparameters."""

    emb: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    lora_a1: np.ndarray
    lora_b1: np.ndarray
    lora_a2: np.ndarray
    lora_b2: np.ndarray
    lora_rank: int = DEFAULT_LORA_RANK
    lora_alpha: float = DEFAULT_LORA_ALPHA
    lora_dropout: float = DEFAULT_LORA_DROPOUT
    tokenizer: Tokenizer = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.tokenizer is None:
            self.tokenizer = Tokenizer(vocab_size=self.emb.shape[0])
        if self.lora_rank < 1:
            raise DataError("E_BAD_RANK", f"lora_rank must be >= 1, got {self.lora_rank}")

    @property
    def scale(self) -> float:
        return self.lora_alpha / self.lora_rank

    def tensors(self) -> dict[str, np.ndarray]:
        """Named tensors in canonical order."""
        return {
            "E": self.emb,
            "W1": self.w1,
            "b1": self.b1,
            "W2": self.w2,
            "b2": self.b2,
            "lora_A1": self.lora_a1,
            "lora_B1": self.lora_b1,
            "lora_A2": self.lora_a2,
            "lora_B2": self.lora_b2,
        }

    def trainable_names(self, lora_only: bool) -> tuple[str, ...]:
        return ADAPTER_NAMES if lora_only else TENSOR_NAMES

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            emb=self.emb.copy(),
            w1=self.w1.copy(),
            b1=self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2.copy(),
            lora_a1=self.lora_a1.copy(),
            lora_b1=self.lora_b1.copy(),
            lora_a2=self.lora_a2.copy(),
            lora_b2=self.lora_b2.copy(),
            lora_rank=self.lora_rank,
            lora_alpha=self.lora_alpha,
            lora_dropout=self.lora_dropout,
            tokenizer=self.tokenizer,
        )


def init_params(
    seed: int,
    vocab_size: int = DEFAULT_VOCAB_SIZE,
    d_emb: int = DEFAULT_D_EMB,
    d_hid: int = DEFAULT_D_HID,
    d_out: int = DEFAULT_D_OUT,
    lora_rank: int = DEFAULT_LORA_RANK,
    lora_alpha: float = DEFAULT_LORA_ALPHA,
    lora_dropout: float = DEFAULT_LORA_DROPOUT,
) -> EncoderParams:
    """Seeded initialization: uniform base weights, Gaussian A, zero B.

    Values are rounded through float32 so checkpoints round-trip bit-exactly
    from the very first save.
    """
    rng = np.random.default_rng(seed)

    def uniform(shape):
        return rng.uniform(-INIT_WEIGHT_SCALE, INIT_WEIGHT_SCALE, shape).astype(np.float32).astype(np.float64)

    def gaussian(shape):
        return rng.normal(0.0, INIT_ADAPTER_SD, shape).astype(np.float32).astype(np.float64)

    return EncoderParams(
        emb=uniform((vocab_size, d_emb)),
        w1=uniform((d_emb, d_hid)),
        b1=np.zeros(d_hid),
        w2=uniform((d_hid, d_out)),
        b2=np.zeros(d_out),
        lora_a1=gaussian((lora_rank, d_emb)),
        lora_b1=np.zeros((d_hid, lora_rank)),
        lora_a2=gaussian((lora_rank, d_hid)),
        lora_b2=np.zeros((d_out, lora_rank)),
        lora_rank=lora_rank,
        lora_alpha=lora_alpha,
        lora_dropout=lora_dropout,
        tokenizer=Tokenizer(vocab_size=vocab_size),
    )


def effective_weight(w: np.ndarray, a: np.ndarray, b: np.ndarray, alpha: float, rank: int) -> np.ndarray:
    """Base weight plus scaled low-rank update: W + (alpha/rank) A^T B^T."""
    return w + (alpha / rank) * (a.T @ b.T)


@dataclass
class EncodeCache:
    """Intermediate activations kept for the backward pass."""

    token_ids: list[list[int]]
    pooled: np.ndarray
    mask1: np.ndarray
    mask2: np.ndarray
    hidden: np.ndarray
    raw_out: np.ndarray
    norms: np.ndarray
    outputs: np.ndarray
    pooling: str


def _dropout_masks(shape: tuple[int, int], p: float, rng: np.random.Generator) -> np.ndarray:
    # Inverted-scaling Bernoulli mask: kept units are divided by (1 - p).
    return (rng.random(shape) >= p) / (1.0 - p)


def forward_batch(
    texts: Sequence[str],
    params: EncoderParams,
    pooling: str = POOLING_LAST,
    train_mode: bool = False,
    seed: int = 0,
) -> tuple[np.ndarray, EncodeCache]:
    """Encode texts and keep activations for backpropagation."""
    if pooling not in POOLINGS:
        raise DataError("E_BAD_POOLING", f"pooling must be one of {POOLINGS}, got {pooling!r}")
    n = len(texts)
    d_emb = params.emb.shape[1]
    pooled = np.empty((n, d_emb))
    token_ids: list[list[int]] = []
    for i, text in enumerate(texts):
        ids = params.tokenizer(text)
        if not ids:
            raise DataError("E_EMPTY_TOKENS", f"text {i} produced no tokens: {text!r}")
        token_ids.append(ids)
        rows = params.emb[ids]
        pooled[i] = rows.mean(axis=0) if pooling == POOLING_MEAN else rows[-1]

    p = params.lora_dropout
    if train_mode and p > 0.0:
        rng = np.random.default_rng(seed)
        mask1 = _dropout_masks((n, d_emb), p, rng)
        mask2 = _dropout_masks((n, params.w1.shape[1]), p, rng)
    else:
        mask1 = np.ones((n, d_emb))
        mask2 = np.ones((n, params.w1.shape[1]))

    scale = params.scale
    adapter1 = params.lora_a1.T @ params.lora_b1.T
    adapter2 = params.lora_a2.T @ params.lora_b2.T
    pre_act = pooled @ params.w1 + params.b1 + scale * ((pooled * mask1) @ adapter1)
    hidden = np.tanh(pre_act)
    raw_out = hidden @ params.w2 + params.b2 + scale * ((hidden * mask2) @ adapter2)
    norms = np.linalg.norm(raw_out, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericError("E_ZERO_VECTOR", "encoder produced a zero vector before normalization")
    outputs = raw_out / norms
    cache = EncodeCache(
        token_ids=token_ids,
        pooled=pooled,
        mask1=mask1,
        mask2=mask2,
        hidden=hidden,
        raw_out=raw_out,
        norms=norms,
        outputs=outputs,
        pooling=pooling,
    )
    return outputs, cache


def backward_batch(
    grad_outputs: np.ndarray,
    cache: EncodeCache,
    params: EncoderParams,
    grads: dict[str, np.ndarray],
    lora_only: bool = False,
) -> None:
    """Accumulate parameter gradients given d(loss)/d(normalized outputs)."""
    scale = params.scale
    y, norms = cache.outputs, cache.norms
    # Through y = u / ||u||: project out the radial component, divide by norm.
    grad_u = (grad_outputs - (y * grad_outputs).sum(axis=1, keepdims=True) * y) / norms

    hidden, hidden_d = cache.hidden, cache.hidden * cache.mask2
    if not lora_only:
        grads["W2"] += hidden.T @ grad_u
        grads["b2"] += grad_u.sum(axis=0)
    g2 = hidden_d.T @ grad_u
    grads["lora_A2"] += scale * (g2 @ params.lora_b2).T
    grads["lora_B2"] += scale * g2.T @ params.lora_a2.T

    adapter2 = params.lora_a2.T @ params.lora_b2.T
    grad_hidden = grad_u @ params.w2.T + (scale * grad_u @ adapter2.T) * cache.mask2
    grad_pre = grad_hidden * (1.0 - hidden * hidden)

    pooled, pooled_d = cache.pooled, cache.pooled * cache.mask1
    if not lora_only:
        grads["W1"] += pooled.T @ grad_pre
        grads["b1"] += grad_pre.sum(axis=0)
    g1 = pooled_d.T @ grad_pre
    grads["lora_A1"] += scale * (g1 @ params.lora_b1).T
    grads["lora_B1"] += scale * g1.T @ params.lora_a1.T

    if not lora_only:
        adapter1 = params.lora_a1.T @ params.lora_b1.T
        grad_pooled = grad_pre @ params.w1.T + (scale * grad_pre @ adapter1.T) * cache.mask1
        for i, ids in enumerate(cache.token_ids):
            if cache.pooling == POOLING_MEAN:
                np.add.at(grads["E"], ids, grad_pooled[i] / len(ids))
            else:
                grads["E"][ids[-1]] += grad_pooled[i]


def encode_batch(
    texts: Sequence[str],
    params: EncoderParams,
    pooling: str = POOLING_LAST,
    train_mode: bool = False,
    seed: int = 0,
) -> np.ndarray:
    """Encode texts into unit-norm embedding vectors, one row per text."""
    outputs, _ = forward_batch(texts, params, pooling, train_mode, seed)
    return outputs


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between two vectors."""
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise NumericError("E_ZERO_VECTOR", "cosine similarity of a zero vector is undefined")
    return float(np.dot(u, v) / (nu * nv))


_SCALAR_FIELDS = ("lora_rank", "lora_alpha", "lora_dropout")


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    """Write all tensors plus adapter hyperparameters in CEMB format."""
    tensors = dict(params.tensors())
    tensors["lora_rank"] = np.array([params.lora_rank], dtype=np.float32)
    tensors["lora_alpha"] = np.array([params.lora_alpha], dtype=np.float32)
    tensors["lora_dropout"] = np.array([params.lora_dropout], dtype=np.float32)
    storage.write_tensors(path, tensors)


def load_checkpoint(path: str | Path) -> EncoderParams:
    """Read a CEMB checkpoint back into encoder parameters."""
    tensors = storage.read_tensors(path)
    missing = [n for n in (*TENSOR_NAMES, *_SCALAR_FIELDS) if n not in tensors]
    if missing:
        raise DataError("E_SHAPE_MISMATCH", f"{path}: missing tensors {missing}")

    def arr(name: str) -> np.ndarray:
        return tensors[name].astype(np.float64)

    params = EncoderParams(
        emb=arr("E"),
        w1=arr("W1"),
        b1=arr("b1"),
        w2=arr("W2"),
        b2=arr("b2"),
        lora_a1=arr("lora_A1"),
        lora_b1=arr("lora_B1"),
        lora_a2=arr("lora_A2"),
        lora_b2=arr("lora_B2"),
        lora_rank=int(tensors["lora_rank"][0]),
        lora_alpha=float(tensors["lora_alpha"][0]),
        lora_dropout=float(tensors["lora_dropout"][0]),
    )
    shapes_ok = (
        params.w1.shape[0] == params.emb.shape[1]
        and params.b1.shape == (params.w1.shape[1],)
        and params.w2.shape[0] == params.w1.shape[1]
        and params.b2.shape == (params.w2.shape[1],)
        and params.lora_a1.shape == (params.lora_rank, params.emb.shape[1])
        and params.lora_b1.shape == (params.w1.shape[1], params.lora_rank)
        and params.lora_a2.shape == (params.lora_rank, params.w1.shape[1])
        and params.lora_b2.shape == (params.w2.shape[1], params.lora_rank)
    )
    if not shapes_ok:
        raise DataError("E_SHAPE_MISMATCH", f"{path}: inconsistent tensor shapes")
    return params
