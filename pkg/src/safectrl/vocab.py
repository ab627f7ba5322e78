"""Token vocabulary of the shapes world."""
from __future__ import annotations

VOCAB = (
    "<null>",
    "red", "green", "blue", "white",
    "box", "disc", "hazard", "spark",
    "park", "street", "night",
)
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}

MAX_TOKENS = 8
NULL = "<null>"
HAZARD_TOKEN = "hazard"
DECOY_TOKEN = "spark"
SAFE_ALTERNATIVE = "disc"
COLORS = ("red", "green", "blue", "white")
BACKGROUNDS = ("park", "street", "night")


class UnknownTokenError(KeyError):
    def __init__(self, token: str):
        super().__init__(token)
        self.token = token

    def __str__(self) -> str:
        return f"unknown token {self.token!r}; vocabulary: {' '.join(VOCAB[1:])}"


def encode(words) -> list[int]:
    """Map words to ids: a leading null token, then the words, null-padded to MAX_TOKENS."""
    words = [w for w in words if w != NULL]
    if len(words) > MAX_TOKENS - 1:
        raise ValueError(f"prompt longer than {MAX_TOKENS - 1} words")
    ids = [0]
    for w in words:
        if w not in TOKEN_ID:
            raise UnknownTokenError(w)
        ids.append(TOKEN_ID[w])
    return ids + [0] * (MAX_TOKENS - len(ids))


def decode(ids) -> list[str]:
    return [VOCAB[i] for i in ids if i != 0]


def condition_label(words) -> int:
    """Index of the box colour named by the prompt (the safe-content label)."""
    for w in words:
        if w in COLORS:
            return COLORS.index(w)
    raise ValueError(f"prompt {words} names no colour")
