"""Synthetic sequence classification tasks for the desk-scale trainer.

Three labelings over uniformly random token sequences:

    majority   each token votes its residue class token mod C; the label is
               the most common vote (ties -> lowest class)
    parity     the label is (number of occurrences of token id 0) mod C
    copyfirst  the label is first_token mod C

Majority needs a global vote over every position; parity needs attention to
land on the rare marker positions and a count-sensitive readout on top. The
pair majority -> parity is therefore a real transfer: the input distribution
is shared, but the positions worth attending to and the decision rule both
change. Marker-count parity, unlike parity of all positions, is learnable at
desk scale.

Train and eval splits come from separate child streams of the task seed, so
they never overlap draws and regenerate identically on every call.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError


class TaskKind(str, Enum):
    PARITY = "parity"
    MAJORITY = "majority"
    COPYFIRST = "copyfirst"


@dataclass(frozen=True)
class SynthTask:
    kind: TaskKind
    seq_len: int = 16
    vocab: int = 32
    num_classes: int = 2
    sample_count: int = 2048
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be positive, got {self.seq_len}")
        if self.vocab < 2:
            raise ConfigError(f"vocab must be at least 2, got {self.vocab}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.sample_count < 1:
            raise ConfigError(f"sample_count must be positive, got {self.sample_count}")

    def labels(self, tokens: np.ndarray) -> np.ndarray:
        if self.kind is TaskKind.PARITY:
            return (tokens == 0).sum(axis=1) % self.num_classes
        if self.kind is TaskKind.MAJORITY:
            votes = tokens % self.num_classes
            counts = np.stack(
                [(votes == c).sum(axis=1) for c in range(self.num_classes)], axis=1
            )
            return counts.argmax(axis=1)
        return tokens[:, 0] % self.num_classes

    def _draw(self, stream: int, count: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, stream])))
        tokens = rng.integers(0, self.vocab, size=(count, self.seq_len), dtype=np.int64)
        return tokens, self.labels(tokens)

    def train_data(self) -> tuple[np.ndarray, np.ndarray]:
        return self._draw(0, self.sample_count)

    def eval_data(self, count: int = 512) -> tuple[np.ndarray, np.ndarray]:
        return self._draw(1, count)
