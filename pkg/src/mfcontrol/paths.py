"""Time grids and reproducible Brownian increments.

Each particle owns a Philox stream keyed by ``(seed, stream id)``, so the
increments of particle ``i`` never depend on how many workers generated
the bundle or in which order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import GridError


@dataclass(frozen=True, eq=False)
class TimeGrid:
    t0: float
    T: float
    K: int
    knots: np.ndarray

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.knots)

    def tail(self, k: int) -> "TimeGrid":
        """The grid restricted to knots ``k..K``."""
        return TimeGrid(float(self.knots[k]), self.T, self.K - k, self.knots[k:].copy())


def make_grid(t0: float, T: float, K: int) -> TimeGrid:
    if not T > t0:
        raise GridError("need T > t0", t0=t0, T=T)
    if int(K) < 1:
        raise GridError("need at least one step", K=K)
    K = int(K)
    knots = t0 + (T - t0) * np.arange(K + 1) / K
    knots[0], knots[-1] = t0, T
    return TimeGrid(float(t0), float(T), K, knots)


@dataclass(frozen=True, eq=False)
class BrownianBundle:
    """Increments ``(N, K, n)`` with ``increments[i, k] ~ N(0, dt_k I)``."""

    increments: np.ndarray
    seed: int
    stream_ids: np.ndarray

    @property
    def N(self) -> int:
        return self.increments.shape[0]

    def tail(self, k: int) -> "BrownianBundle":
        return BrownianBundle(self.increments[:, k:], self.seed, self.stream_ids)

    def take(self, idx) -> "BrownianBundle":
        idx = np.asarray(idx)
        return BrownianBundle(self.increments[idx], self.seed, self.stream_ids[idx])

    def concat(self, other: "BrownianBundle") -> "BrownianBundle":
        return BrownianBundle(np.concatenate([self.increments, other.increments]), self.seed,
                              np.concatenate([self.stream_ids, other.stream_ids]))


def _stream_normals(seed: int, stream: int, K: int, n: int) -> np.ndarray:
    key = ((int(seed) & (2**64 - 1)) << 64) | (int(stream) & (2**64 - 1))
    return np.random.Generator(np.random.Philox(key=key)).standard_normal((K, n))


def standard_normals(seed: int, streams, K: int, n: int, jobs: int = 1) -> np.ndarray:
    streams = np.asarray(streams, dtype=np.int64).reshape(-1)
    out = np.empty((streams.shape[0], K, n))

    def fill(chunk):
        for i in chunk:
            out[i] = _stream_normals(seed, int(streams[i]), K, n)

    idx = np.arange(streams.shape[0])
    if jobs <= 1 or streams.shape[0] < 2:
        fill(idx)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(fill, np.array_split(idx, jobs)))
    return out


def sample_increments(grid: TimeGrid, N: int, n: int, seed: int, stream_offset: int = 0,
                      jobs: int = 1) -> BrownianBundle:
    if int(N) < 1:
        raise GridError("need at least one particle", N=N)
    streams = stream_offset + np.arange(int(N))
    z = standard_normals(seed, streams, grid.K, n, jobs)
    inc = z * np.sqrt(grid.dt)[None, :, None]
    inc.setflags(write=False)
    return BrownianBundle(inc, int(seed), streams)
