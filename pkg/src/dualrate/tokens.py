"""Closed instruction vocabulary and tokenization.

Instructions are short verb-color-object phrases over a fixed vocabulary,
padded to a fixed length with a dedicated pad id. Pad positions are masked
out of attention everywhere downstream.
"""

from __future__ import annotations

import numpy as np

PAD_TOKEN = "<pad>"
COLOR_NAMES = ["red", "green", "blue", "yellow", "cyan", "magenta"]

VOCAB = [PAD_TOKEN, "pick", "push", "hold", "block", "disc"] + COLOR_NAMES
PAD_ID = 0
VOCAB_SIZE = len(VOCAB)
INSTRUCTION_LENGTH = 8

_TOKEN_IDS = {tok: i for i, tok in enumerate(VOCAB)}


def token_id(token: str) -> int:
    try:
        return _TOKEN_IDS[token]
    except KeyError:
        raise KeyError(f"token '{token}' not in vocabulary") from None


def encode_instruction(color: str, verb: str = "pick", obj: str = "block") -> np.ndarray:
    """Token ids for '<verb> <color> <obj>', padded to INSTRUCTION_LENGTH."""
    ids = [token_id(verb), token_id(color), token_id(obj)]
    ids += [PAD_ID] * (INSTRUCTION_LENGTH - len(ids))
    return np.array(ids, dtype=np.int64)


def pad_mask(ids: np.ndarray) -> np.ndarray:
    """True at padded positions. Works on [L] or [batch, L] id arrays."""
    return np.asarray(ids) == PAD_ID
