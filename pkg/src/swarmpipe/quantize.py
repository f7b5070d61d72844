"""Dynamic blockwise int8 codec for activation payloads.

Values are split row-major into blocks of 64; each block is scaled by
absmax/127 and rounded to signed 8-bit codes. Round-trip error is bounded
by the block scale. The encoded form is ~1.06 bytes/element versus 4 raw,
well under half the raw wire size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BLOCK_SIZE = 64


@dataclass
class QuantizedHidden:
    """Blockwise-quantized activation matrix."""

    shape: tuple[int, ...]
    block_size: int
    scales: np.ndarray   # float32 [n_blocks]
    codes: np.ndarray    # int8 [n_elements]

    @property
    def n_blocks(self) -> int:
        return self.scales.shape[0]

    def encoded_nbytes(self) -> int:
        # scales + codes; shape/block_size live in the payload header
        return 4 * self.n_blocks + self.codes.size


def quantize_hidden(h: np.ndarray, block_size: int = BLOCK_SIZE) -> QuantizedHidden:
    flat = np.ascontiguousarray(h, dtype=np.float32).ravel()
    n = flat.size
    n_blocks = (n + block_size - 1) // block_size
    padded = np.zeros(n_blocks * block_size, np.float32)
    padded[:n] = flat
    blocks = padded.reshape(n_blocks, block_size)
    absmax = np.abs(blocks).max(axis=1)
    scales = (absmax / 127.0).astype(np.float32)
    safe = np.where(scales > 0, scales, 1.0).astype(np.float32)
    codes = np.rint(blocks / safe[:, None]).astype(np.int8)
    codes[scales == 0] = 0
    return QuantizedHidden(tuple(h.shape), block_size, scales, codes.ravel()[:n].copy()
                           if n % block_size else codes.ravel())


def dequantize_hidden(q: QuantizedHidden) -> np.ndarray:
    n = int(np.prod(q.shape))
    codes = np.zeros(q.n_blocks * q.block_size, np.int8)
    codes[:q.codes.size] = q.codes
    blocks = codes.reshape(q.n_blocks, q.block_size).astype(np.float32)
    out = blocks * q.scales[:, None]
    return out.ravel()[:n].reshape(q.shape).astype(np.float32)
