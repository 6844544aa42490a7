"""Deterministic assembly-encoder stand-in.

Each instruction becomes one feature vector: sub-tokens of its text map to
fixed unit Gaussian vectors drawn from a hash-seeded generator, and the
instruction vector is their normalized mean.  The virtual embedding table is
a pure function of (sub-token, dimension, seed), so the encoder carries no
trainable state and serializes to its configuration alone.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from .listings import AsmFunction

_SUBTOKEN_RE = re.compile(r"[A-Za-z0-9_.]+|\S")


def subtokens(text: str) -> list[str]:
    return _SUBTOKEN_RE.findall(text)


def hash_unit_vector(token: str, dim: int, namespace: str, seed: int) -> np.ndarray:
    """Unit vector drawn deterministically from a hash of the token."""
    digest = hashlib.blake2b(
        f"{namespace}:{seed}:{token}".encode("utf-8"), digest_size=8
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    vec = rng.standard_normal(dim)
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


@dataclass(frozen=True)
class EncoderStub:
    dim: int = 32
    max_instructions: int = 64
    seed: int = 0
    two_tap: bool = False

    @property
    def output_dim(self) -> int:
        return self.dim * 2 if self.two_tap else self.dim

    def _instruction_vector(self, text: str) -> np.ndarray:
        parts = subtokens(text)
        if not parts:
            return np.zeros(self.dim)
        vec = np.mean(
            [hash_unit_vector(p, self.dim, "enc", self.seed) for p in parts], axis=0
        )
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def encode(self, fn: AsmFunction) -> np.ndarray:
        """Feature rows for a function, one per instruction, truncated from
        the tail at ``max_instructions``.  Output shape (m, output_dim)."""
        if not fn.instructions:
            raise ValueError(f"function {fn.id!r} has no instructions")
        rows = [
            self._instruction_vector(ins.text)
            for ins in fn.instructions[: self.max_instructions]
        ]
        base = np.stack(rows)
        if not self.two_tap:
            return base
        # Second tap mixes each instruction with its predecessor, a cheap
        # stand-in for a deeper feature layer.
        shifted = np.vstack([base[:1], base[:-1]])
        mixed = 0.5 * (base + shifted)
        return np.hstack([base, mixed])

    def config(self) -> dict:
        return {
            "dim": self.dim,
            "max_instructions": self.max_instructions,
            "seed": self.seed,
            "two_tap": self.two_tap,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "EncoderStub":
        return cls(
            dim=cfg["dim"],
            max_instructions=cfg["max_instructions"],
            seed=cfg["seed"],
            two_tap=cfg["two_tap"],
        )
