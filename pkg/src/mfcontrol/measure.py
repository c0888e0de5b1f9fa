"""Particle ensembles standing in for measures in P2(R^n).

An ensemble is a weighted cloud of atoms.  The solver reads measures only
through ensemble averages, so everything here is plain numpy on an
``(N, n)`` state array plus an ``(N,)`` weight vector.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.special import logsumexp

from .errors import MeasureError

WEIGHT_TOL = 1e-12
ASSIGNMENT_CAP = 512


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """Weighted atoms ``states[i]`` with mass ``weights[i]``."""

    states: np.ndarray
    weights: np.ndarray = None
    generation_seed: int = 0

    def __post_init__(self):
        x = np.asarray(self.states, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1:
            raise MeasureError("states must be an (N, n) array with N >= 1", shape=list(x.shape))
        if self.weights is None:
            w = np.full(x.shape[0], 1.0 / x.shape[0])
        else:
            w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.shape[0] != x.shape[0]:
            raise MeasureError("weights and states disagree in length", N=x.shape[0], M=w.shape[0])
        if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise MeasureError("weights must be nonnegative and sum to 1", total=float(w.sum()))
        x.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "states", x)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.states

    def second_moment(self) -> float:
        return float(self.weights @ np.sum(self.states**2, axis=1))

    def covariance(self) -> np.ndarray:
        c = self.states - self.mean()
        return (c * self.weights[:, None]).T @ c

    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def with_states(self, states: np.ndarray) -> "ParticleEnsemble":
        return ParticleEnsemble(states, self.weights, self.generation_seed)

    def permuted(self, perm) -> "ParticleEnsemble":
        perm = np.asarray(perm)
        return ParticleEnsemble(self.states[perm], self.weights[perm], self.generation_seed)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["weight"] + [f"x_{j + 1}" for j in range(self.dim)])
            for wi, xi in zip(self.weights, self.states):
                wr.writerow([repr(float(wi))] + [repr(float(v)) for v in xi])

    @classmethod
    def from_csv(cls, path, generation_seed: int = 0) -> "ParticleEnsemble":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "weight":
            raise MeasureError("ensemble CSV must start with a 'weight' column", path=str(path))
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
        return cls(data[:, 1:], data[:, 0] / data[:, 0].sum(), generation_seed)

    @classmethod
    def gaussian(cls, N: int, mean, std, seed: int = 0) -> "ParticleEnsemble":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        std = np.atleast_1d(np.asarray(std, dtype=float))
        rng = np.random.Generator(np.random.Philox(key=_key(seed, 2**62)))
        z = rng.standard_normal((N, mean.shape[0]))
        return cls(mean + std * z, None, seed)


def _key(seed: int, stream: int) -> int:
    return ((int(seed) & (2**64 - 1)) << 64) | (int(stream) & (2**64 - 1))


@dataclass(frozen=True, eq=False)
class DiracPerturbation:
    """The mixture ``(1 - eps) m + eps delta_xi``."""

    base: ParticleEnsemble
    atom: np.ndarray
    eps: float
    copies: int = field(default=1)

    def materialize(self, copies: int | None = None) -> ParticleEnsemble:
        """Base atoms with scaled weights followed by ``copies`` atoms at xi.

        Duplicated atoms share the mass ``eps`` equally; the solver gives each
        one its own Brownian stream so that the copies average over paths.
        """
        c = self.copies if copies is None else int(copies)
        xi = np.broadcast_to(self.atom, (c, self.base.dim))
        x = np.vstack([self.base.states, xi])
        w = np.concatenate([(1.0 - self.eps) * self.base.weights, np.full(c, self.eps / c)])
        return ParticleEnsemble(x, w / w.sum(), self.base.generation_seed)

    def mean(self) -> np.ndarray:
        return (1.0 - self.eps) * self.base.mean() + self.eps * self.atom


def ensemble_mean(ensemble: ParticleEnsemble) -> np.ndarray:
    return ensemble.mean()


def pushforward(ensemble: ParticleEnsemble, fmap: Callable[[np.ndarray], np.ndarray]) -> ParticleEnsemble:
    """Apply ``fmap`` atomwise, keeping weights."""
    x = ensemble.states
    try:
        y = np.asarray(fmap(x), dtype=float)
        if y.shape != x.shape:
            raise ValueError
    except Exception:
        y = np.array([np.asarray(fmap(xi), dtype=float).reshape(x.shape[1]) for xi in x])
    return ParticleEnsemble(y, ensemble.weights, ensemble.generation_seed)


def perturb_dirac(ensemble: ParticleEnsemble, xi, eps: float) -> DiracPerturbation:
    if not 0.0 < eps < 1.0:
        raise MeasureError("Dirac weight must lie in (0, 1)", eps=eps)
    xi = np.asarray(xi, dtype=float).reshape(ensemble.dim)
    return DiracPerturbation(ensemble, xi, float(eps))


def resample_copy(ensemble: ParticleEnsemble, seed: int) -> ParticleEnsemble:
    """Bootstrap draw representing an independent copy of the ensemble."""
    rng = np.random.Generator(np.random.Philox(key=_key(seed, 2**63)))
    idx = rng.choice(ensemble.size, size=ensemble.size, replace=True, p=ensemble.weights)
    return ParticleEnsemble(ensemble.states[idx], None, seed)


# ---------------------------------------------------------------------------
# Wasserstein-2
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class W2Info:
    value: float
    method: str
    regularization: float = 0.0


def wasserstein2(a: ParticleEnsemble, b: ParticleEnsemble, cap: int = ASSIGNMENT_CAP,
                 return_info: bool = False):
    """W2 distance between two ensembles.

    Exact in 1-D (quantile coupling) and for small multi-dimensional
    ensembles (assignment or transport LP); entropic above ``cap``.
    """
    if a.dim != b.dim:
        raise MeasureError("dimension mismatch", a=a.dim, b=b.dim)
    # canonical argument order makes the result bitwise symmetric
    if _order_key(a) > _order_key(b):
        a, b = b, a
    if a.dim == 1:
        info = W2Info(_w2_1d(a, b), "quantile")
    elif max(a.size, b.size) <= cap:
        info = _w2_exact(a, b)
    else:
        info = _w2_entropic(a, b)
    return info if return_info else info.value


def _order_key(e: ParticleEnsemble) -> bytes:
    return e.states.tobytes() + e.weights.tobytes()


def _w2_1d(a: ParticleEnsemble, b: ParticleEnsemble) -> float:
    xa, xb = a.states[:, 0], b.states[:, 0]
    if a.size == b.size and a.is_uniform() and b.is_uniform():
        d = np.sort(xa) - np.sort(xb)
        return math.sqrt(math.fsum(d * d) / a.size)
    ia, ib = np.argsort(xa, kind="stable"), np.argsort(xb, kind="stable")
    qa, qb = xa[ia], xb[ib]
    ca, cb = np.cumsum(a.weights[ia]), np.cumsum(b.weights[ib])
    ca[-1] = cb[-1] = 1.0
    cuts = np.union1d(ca, cb)
    lo = np.concatenate([[0.0], cuts[:-1]])
    mass = cuts - lo
    mid = 0.5 * (lo + cuts)
    ja = np.minimum(np.searchsorted(ca, mid), a.size - 1)
    jb = np.minimum(np.searchsorted(cb, mid), b.size - 1)
    d = qa[ja] - qb[jb]
    return math.sqrt(max(math.fsum(mass * d * d), 0.0))


def _cost_matrix(a: ParticleEnsemble, b: ParticleEnsemble) -> np.ndarray:
    diff = a.states[:, None, :] - b.states[None, :, :]
    return np.sum(diff * diff, axis=2)


def _w2_exact(a: ParticleEnsemble, b: ParticleEnsemble) -> W2Info:
    C = _cost_matrix(a, b)
    if a.size == b.size and a.is_uniform() and b.is_uniform():
        r, c = linear_sum_assignment(C)
        return W2Info(math.sqrt(math.fsum(C[r, c]) / a.size), "assignment")
    na, nb = a.size, b.size
    A_eq = np.zeros((na + nb, na * nb))
    for i in range(na):
        A_eq[i, i * nb:(i + 1) * nb] = 1.0
    for j in range(nb):
        A_eq[na + j, j::nb] = 1.0
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a.weights, b.weights]),
                  bounds=(0, None), method="highs")
    if not res.success:  # pragma: no cover
        raise MeasureError("transport LP failed", status=res.status)
    return W2Info(math.sqrt(max(res.fun, 0.0)), "transport_lp")


def _w2_entropic(a: ParticleEnsemble, b: ParticleEnsemble, iters: int = 2000, tol: float = 1e-10) -> W2Info:
    C = _cost_matrix(a, b)
    reg = 0.01 * float(np.median(C))
    if reg <= 0:
        reg = 1e-12
    la, lb = np.log(a.weights + 1e-300), np.log(b.weights + 1e-300)
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    for _ in range(iters):
        f_new = -reg * logsumexp((g[None, :] - C) / reg + lb[None, :], axis=1)
        g = -reg * logsumexp((f_new[:, None] - C) / reg + la[:, None], axis=0)
        done = np.max(np.abs(f_new - f)) < tol
        f = f_new
        if done:
            break
    logp = (f[:, None] + g[None, :] - C) / reg + la[:, None] + lb[None, :]
    cost = float(np.sum(np.exp(logp) * C))
    return W2Info(math.sqrt(max(cost, 0.0)), "entropic", reg)


def _random_ensemble(rng, n: int, size: int, weighted: bool) -> ParticleEnsemble:
    x = rng.standard_normal((size, n)) * rng.uniform(0.1, 3.0)
    w = rng.uniform(0.1, 1.0, size) if weighted else None
    if w is not None:
        w = w / w.sum()
    return ParticleEnsemble(x, w)


def metric_property_check(samples: int = 1000, seed: int = 0, max_atoms: int = 64, tol: float = 1e-9) -> dict:
    """Metric axioms of W2 and the coupling bound for pushed-forward ensembles on random small inputs.

    Weighted inputs stay at 12 atoms or fewer so the transport LP stays cheap.
    ``tol`` is a relative slack for the LP and the triangle inequality.
    """
    rng = np.random.Generator(np.random.Philox(key=_key(seed, 2**62)))
    fails = {"zero": 0, "symmetry": 0, "nonnegative": 0, "triangle": 0, "permutation": 0, "lifting": 0}
    for _ in range(samples):
        n = int(rng.integers(1, 4))
        weighted = bool(rng.random() < 0.3)
        size = int(rng.integers(1, 13 if weighted else max_atoms + 1))
        a, b, c = (_random_ensemble(rng, n, size, weighted) for _ in range(3))
        dab, dba = wasserstein2(a, b), wasserstein2(b, a)
        dbc, dac = wasserstein2(b, c), wasserstein2(a, c)
        scale = 1.0 + dab + dbc + dac
        fails["zero"] += wasserstein2(a, a) > tol * scale
        fails["symmetry"] += dab != dba
        fails["nonnegative"] += min(dab, dbc, dac) < 0
        fails["triangle"] += dac > dab + dbc + tol * scale
        fails["permutation"] += wasserstein2(a, a.permuted(rng.permutation(size))) > tol * scale
        # coupling bound: W2(X#m, X'#m) <= ||X - X'||_{L2(m)}
        X, X2 = b.states, c.states
        lhs = wasserstein2(a.with_states(X), a.with_states(X2))
        rhs = math.sqrt(math.fsum(a.weights * np.sum((X - X2) ** 2, axis=1)))
        fails["lifting"] += lhs > rhs + tol * (1.0 + rhs)
    fails = {k: int(v) for k, v in fails.items()}
    return {"samples": samples, "failures": fails, "passed": not any(fails.values())}
