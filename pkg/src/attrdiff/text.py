"""Closed-vocabulary prompt encoding with learnable placeholder tokens.

The vocabulary covers the corpus factor names, the prompt template's function
words, the three attribute words, and one placeholder token per attribute
(*m for shape, *a for appearance, *s for style). Token embeddings are rows of
a learned table; a fixed sinusoidal position code is added at encode time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .corpus import APPEARANCES, SHAPES, STYLES
from .errors import VocabularyError

FUNCTION_WORDS = ("a", "in", "the", "of")
ATTRIBUTE_WORDS = ("shape", "appearance", "style")
PLACEHOLDERS = {"shape": "*m", "appearance": "*a", "style": "*s"}
PLACEHOLDER_TOKENS = tuple(PLACEHOLDERS.values())

TOKENS: tuple[str, ...] = (
    FUNCTION_WORDS + ATTRIBUTE_WORDS + SHAPES + APPEARANCES + STYLES + PLACEHOLDER_TOKENS
)
TOKEN_INDEX = {tok: i for i, tok in enumerate(TOKENS)}
VOCAB_SIZE = len(TOKENS)


def prompt_template(class_name: str, attribute: str, value: str) -> str:
    """The one prompt form the pipeline uses: 'a C in the A of V'."""
    return f"a {class_name} in the {attribute} of {value}"


def tokenize(text: str) -> list[int]:
    ids = []
    for word in text.lower().split():
        if word not in TOKEN_INDEX:
            raise VocabularyError(f"token {word!r} is not in the vocabulary")
        ids.append(TOKEN_INDEX[word])
    return ids


def detokenize(ids) -> str:
    return " ".join(TOKENS[int(i)] for i in ids)


POSITION_SCALE = 0.25  # keep position codes subordinate to token identity


def position_codes(length: int, dim: int) -> np.ndarray:
    """Sinusoidal position encoding, (length, dim), scaled down so token
    identity dominates the embedding sum."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, (2.0 * (i // 2)) / dim)
    codes = np.empty((length, dim), dtype=np.float64)
    codes[:, 0::2] = np.sin(angles[:, 0::2])
    codes[:, 1::2] = np.cos(angles[:, 1::2])
    return POSITION_SCALE * codes


@dataclass
class PromptEncoding:
    """Token ids plus the embedded sequence and placeholder slot positions."""

    ids: np.ndarray                 # (L,) int
    embeddings: np.ndarray          # (L, d) float64
    placeholder_slots: list[int]

    @property
    def text(self) -> str:
        return detokenize(self.ids)


def encode_prompt(text: str, table: np.ndarray) -> PromptEncoding:
    """Embed a prompt against a (VOCAB_SIZE, d) embedding table."""
    ids = np.array(tokenize(text), dtype=np.int64)
    d = table.shape[1]
    emb = table[ids] + position_codes(len(ids), d)
    slots = [i for i, t in enumerate(ids) if TOKENS[t] in PLACEHOLDER_TOKENS]
    return PromptEncoding(ids=ids, embeddings=emb, placeholder_slots=slots)


def embed_with_placeholder(ids: np.ndarray, slot: int, table: np.ndarray,
                           placeholder_row: ad.Tensor) -> ad.Tensor:
    """Build a (1, L, d) embedding sequence where one row is a trainable tensor.

    Non-placeholder rows come from the frozen table; gradients only reach the
    placeholder row.
    """
    d = table.shape[1]
    codes = position_codes(len(ids), d)
    rows = []
    for i, tok in enumerate(ids):
        if i == slot:
            rows.append(placeholder_row + codes[i])
        else:
            rows.append(ad.Tensor(table[tok] + codes[i]))
    return ad.reshape(ad.stack(rows, axis=0), (1, len(ids), d))
