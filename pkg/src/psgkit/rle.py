"""Run-length encoding of binary masks (row-major, zeros first)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class RleFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RleMask:
    height: int
    width: int
    runs: tuple[int, ...]

    def __post_init__(self):
        if any(r < 0 for r in self.runs):
            raise RleFormatError("negative run length")
        if sum(self.runs) != self.height * self.width:
            raise RleFormatError(
                f"runs sum to {sum(self.runs)}, expected {self.height}x{self.width}={self.height * self.width}")


def encode_rle(mask) -> RleMask:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise RleFormatError(f"mask must be 2-D, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise RleFormatError("mask is not binary")
    flat = m.reshape(-1).astype(np.int8)
    if flat.size == 0:
        return RleMask(m.shape[0], m.shape[1], ())
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs = [0] + runs
    return RleMask(m.shape[0], m.shape[1], tuple(int(r) for r in runs))


def decode_rle(rle: RleMask) -> np.ndarray:
    if sum(rle.runs) != rle.height * rle.width:
        raise RleFormatError("runs do not cover the mask")
    values = np.arange(len(rle.runs)) % 2
    flat = np.repeat(values.astype(bool), rle.runs)
    return flat.reshape(rle.height, rle.width)
