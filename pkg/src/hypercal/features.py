"""Grid tile coding with asymmetric tiling offsets and an exact (unhashed) index table."""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _encode(state, low, inv_width, offsets, tiles, out):
    n_tilings, dims = offsets.shape
    block = tiles ** dims
    for i in range(n_tilings):
        flat = 0
        for d in range(dims):
            x = (state[d] - low[d]) * inv_width[d]
            x = min(max(x, 0.0), float(tiles))
            c = int(math.floor(x + offsets[i, d]))
            if c >= tiles:
                c = tiles - 1
            flat = flat * tiles + c
        out[i] = i * block + flat
    return out


class TileCoder:
    """Maps a bounded real vector to ``num_tilings`` active indices in ``[0, table_size)``.

    Tiling ``i`` is shifted by ``((i * (2d + 1)) mod n) / n`` of a tile width along
    dimension ``d``; states outside the bounds are clipped onto the edge tiles.
    """

    def __init__(self, num_tilings: int, tiles_per_dim: int, low, high):
        if num_tilings < 1 or tiles_per_dim < 1:
            raise ValueError("num_tilings and tiles_per_dim must be positive")
        self.num_tilings = int(num_tilings)
        self.tiles_per_dim = int(tiles_per_dim)
        self.low = np.asarray(low, dtype=float)
        self.high = np.asarray(high, dtype=float)
        if self.low.shape != self.high.shape or np.any(self.high <= self.low):
            raise ValueError("state bounds must satisfy low < high per dimension")
        self.dims = self.low.size
        self.table_size = self.num_tilings * self.tiles_per_dim ** self.dims
        self.inv_width = self.tiles_per_dim / (self.high - self.low)
        n = self.num_tilings
        self.offsets = np.array(
            [[((i * (2 * d + 1)) % n) / n for d in range(self.dims)] for i in range(n)]
        )

    def encode(self, state) -> np.ndarray:
        out = np.empty(self.num_tilings, dtype=np.int64)
        return _encode(np.asarray(state, dtype=float), self.low, self.inv_width,
                       self.offsets, self.tiles_per_dim, out)

    def encode_many(self, states) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=float))
        out = np.empty((len(states), self.num_tilings), dtype=np.int64)
        for j, s in enumerate(states):
            _encode(s, self.low, self.inv_width, self.offsets, self.tiles_per_dim, out[j])
        return out

    def __repr__(self):
        return (f"TileCoder(num_tilings={self.num_tilings}, tiles_per_dim={self.tiles_per_dim}, "
                f"dims={self.dims}, table_size={self.table_size})")
