"""Problem specification: linear dynamics, costs and assumption checks.

Array conventions used across the package:

* states ``x`` are ``(N, n)``, controls ``v`` are ``(N, d)``;
* ``sigma0(s)`` has shape ``(n, n)`` with row ``j`` the column vector
  sigma_0^j; ``sigma1``/``sigma2`` are ``(n, n, n)`` and ``sigma3`` is
  ``(n, n, d)``, all indexed by the noise component ``j`` first;
* the diffusion matrix ``S`` is ``(N, n, n)`` with ``S[i, :, j]`` the
  j-th diffusion column, and martingale integrands ``Q`` use the same
  layout, so ``sum_j q^j . sigma^j == (Q * S).sum((-2, -1))``.
"""

from __future__ import annotations

import importlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import yaml

from .errors import ConfigError, SpecificationError
from .measure import ParticleEnsemble

FD_REL_STEP = 1e-5
PAIRWISE_CHUNK = 1024


# ---------------------------------------------------------------------------
# time profiles
# ---------------------------------------------------------------------------


def constant_profile(value) -> Callable[[float], np.ndarray]:
    arr = np.asarray(value, dtype=float)
    arr.setflags(write=False)
    return lambda s: arr


def as_profile(value) -> Callable[[float], np.ndarray]:
    if callable(value):
        return value
    return constant_profile(value)


NAMED_PROFILES = {
    "constant": lambda base, rate: (lambda s: base),
    "linear": lambda base, rate: (lambda s: base * (1.0 + rate * s)),
    "exp": lambda base, rate: (lambda s: base * np.exp(rate * s)),
    "cosine": lambda base, rate: (lambda s: base * (1.0 + 0.5 * np.cos(rate * s))),
}


def profile_from_config(entry) -> Callable[[float], np.ndarray]:
    if isinstance(entry, dict):
        kind = entry.get("profile", "constant")
        if kind not in NAMED_PROFILES:
            raise ConfigError(f"unknown time profile {kind!r}", known=sorted(NAMED_PROFILES))
        base = np.asarray(entry["value"], dtype=float)
        base.setflags(write=False)
        return NAMED_PROFILES[kind](base, float(entry.get("rate", 0.0)))
    return constant_profile(entry)


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Coefficients:
    f0: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    f3: np.ndarray
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray


@dataclass(frozen=True)
class LinearDynamics:
    """f = f0 + f1 x + f2 mbar + f3 v and sigma^j = s0^j + s1^j x + s2^j mbar + s3^j v."""

    n: int
    d: int
    f0: Callable
    f1: Callable
    f2: Callable
    f3: Callable
    sigma0: Callable
    sigma1: Callable
    sigma2: Callable
    sigma3: Callable
    bound: float = 10.0

    @classmethod
    def build(cls, n: int, d: int, f0=None, f1=None, f2=None, f3=None, sigma0=None,
              sigma1=None, sigma2=None, sigma3=None, bound: float = 10.0) -> "LinearDynamics":
        def pick(v, shape):
            return as_profile(np.zeros(shape) if v is None else v)

        return cls(n, d, pick(f0, (n,)), pick(f1, (n, n)), pick(f2, (n, n)), pick(f3, (n, d)),
                   pick(sigma0, (n, n)), pick(sigma1, (n, n, n)), pick(sigma2, (n, n, n)),
                   pick(sigma3, (n, n, d)), float(bound))

    def at(self, s: float) -> Coefficients:
        return Coefficients(*(np.asarray(c(s), dtype=float) for c in (
            self.f0, self.f1, self.f2, self.f3, self.sigma0, self.sigma1, self.sigma2, self.sigma3)))

    def expected_shapes(self) -> dict:
        n, d = self.n, self.d
        return {"f0": (n,), "f1": (n, n), "f2": (n, n), "f3": (n, d), "sigma0": (n, n),
                "sigma1": (n, n, n), "sigma2": (n, n, n), "sigma3": (n, n, d)}

    def is_control_free(self, times: Sequence[float]) -> bool:
        return all(not np.any(self.at(s).s3) for s in times)

    def is_deterministic(self, times: Sequence[float]) -> bool:
        return all(not (np.any(c.s0) or np.any(c.s1) or np.any(c.s2) or np.any(c.s3))
                   for c in (self.at(s) for s in times))


# ---------------------------------------------------------------------------
# costs
# ---------------------------------------------------------------------------


def _mbar_of(m, N: int, n: int) -> np.ndarray:
    if isinstance(m, ParticleEnsemble):
        mb = m.mean()
    else:
        mb = np.asarray(m, dtype=float)
    return np.broadcast_to(mb, (N, n))


class CostModel:
    """Running and terminal costs that may depend on the whole measure.

    Subclasses supply the pointwise callbacks.  Mean-field terms of the
    form sum_j w_j D_xi dg/dnu(y_j, m, v_j)(x) default to a chunked
    pairwise average; :class:`MeanFieldCost` overrides them in closed form.
    """

    mode = "full"
    has_third = False

    def __init__(self, n: int, d: int, lam: float, bound: float = 10.0, name: str = "custom"):
        self.n, self.d = int(n), int(d)
        self.lam = float(lam)
        self.bound = float(bound)
        self.name = name

    # running cost -------------------------------------------------------
    def g(self, x, m, v, s):
        raise NotImplementedError

    def g_x(self, x, m, v, s):
        raise NotImplementedError

    def g_v(self, x, m, v, s):
        raise NotImplementedError

    def g_xx(self, x, m, v, s):
        raise NotImplementedError

    def g_vx(self, x, m, v, s):
        raise NotImplementedError

    def g_vv(self, x, m, v, s):
        raise NotImplementedError

    def dg_dnu(self, xd, m, vd, s, xe):
        """dg/dnu(xd_a, m, vd_a, s)(xe_b) as an ``(Nd, Ne)`` array."""
        raise NotImplementedError

    def dxi_dg_dnu(self, xd, m, vd, s, xe):
        """D_xi dg/dnu(xd_a, m, vd_a, s)(xe_b) as an ``(Nd, Ne, n)`` array."""
        raise NotImplementedError

    # terminal cost ------------------------------------------------------
    def gT(self, x, m):
        raise NotImplementedError

    def gT_x(self, x, m):
        raise NotImplementedError

    def dgT_dnu(self, xd, m, xe):
        raise NotImplementedError

    def dxi_dgT_dnu(self, xd, m, xe):
        raise NotImplementedError

    # ensemble averages -------------------------------------------------
    def mean_term(self, m: ParticleEnsemble, v, s, xe):
        """sum_j w_j D_xi dg/dnu(y_j, m, v_j, s)(xe) for every row of ``xe``."""
        return self._pairwise_average(lambda a, b: self.dxi_dg_dnu(m.states[a:b], m, v[a:b], s, xe), m)

    def mean_term_T(self, m: ParticleEnsemble, xe):
        return self._pairwise_average(lambda a, b: self.dxi_dgT_dnu(m.states[a:b], m, xe), m)

    def mean_value(self, m: ParticleEnsemble, v, s, xe):
        """sum_j w_j dg/dnu(y_j, m, v_j, s)(xe), shape ``(Ne,)``."""
        out = 0.0
        for a in range(0, m.size, PAIRWISE_CHUNK):
            b = min(a + PAIRWISE_CHUNK, m.size)
            out = out + m.weights[a:b] @ self.dg_dnu(m.states[a:b], m, v[a:b], s, xe)
        return np.asarray(out)

    def mean_value_T(self, m: ParticleEnsemble, xe):
        out = 0.0
        for a in range(0, m.size, PAIRWISE_CHUNK):
            b = min(a + PAIRWISE_CHUNK, m.size)
            out = out + m.weights[a:b] @ self.dgT_dnu(m.states[a:b], m, xe)
        return np.asarray(out)

    def _pairwise_average(self, block, m: ParticleEnsemble):
        out = 0.0
        for a in range(0, m.size, PAIRWISE_CHUNK):
            b = min(a + PAIRWISE_CHUNK, m.size)
            out = out + np.einsum("a,abi->bi", m.weights[a:b], block(a, b))
        return out


def _fd_jacobian(fun: Callable[[np.ndarray], np.ndarray], z: np.ndarray) -> np.ndarray:
    """Central differences along the last axis of ``z``; derivative axis appended last."""
    cols = []
    for a in range(z.shape[-1]):
        h = FD_REL_STEP * (1.0 + np.abs(z[..., a]))
        zp, zm = z.copy(), z.copy()
        zp[..., a] += h
        zm[..., a] -= h
        fp, fm = fun(zp), fun(zm)
        hb = h.reshape(h.shape + (1,) * (fp.ndim - h.ndim))
        cols.append((fp - fm) / (2.0 * hb))
    return np.stack(cols, axis=-1)


class MeanFieldCost(CostModel):
    """Costs that see the measure only through its mean: g = G(x, mbar, v, s).

    Everything is expressed through partial derivatives in the stacked
    variable ``z = (x, mbar, v)`` of length ``2n + d`` (``(x, mbar)`` for the
    terminal cost).  Missing derivative callbacks fall back to central
    differences of the next lower order that is available.
    """

    mode = "mean"

    def __init__(self, n: int, d: int, G, GT, grad=None, hess=None, third=None,
                 gradT=None, hessT=None, thirdT=None, lam: float = 0.5, bound: float = 10.0,
                 name: str = "meanfield"):
        super().__init__(n, d, lam, bound, name)
        self._G, self._GT = G, GT
        self._grad, self._hess, self._third = grad, hess, third
        self._gradT, self._hessT, self._thirdT = gradT, hessT, thirdT
        self.has_third = True
        self.analytic = {"grad": grad is not None, "hess": hess is not None, "third": third is not None,
                         "gradT": gradT is not None, "hessT": hessT is not None,
                         "thirdT": thirdT is not None}
        n_ = self.n
        self.ix, self.im, self.iv = slice(0, n_), slice(n_, 2 * n_), slice(2 * n_, 2 * n_ + self.d)

    # z plumbing ---------------------------------------------------------
    def _split(self, z):
        return z[..., self.ix], z[..., self.im], z[..., self.iv]

    def _stack(self, x, m, v):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        N = x.shape[0]
        mb = _mbar_of(m, N, self.n)
        v = np.broadcast_to(np.asarray(v, dtype=float), (N, self.d))
        return np.concatenate([x, mb, v], axis=1)

    def _stackT(self, x, m):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.concatenate([x, _mbar_of(m, x.shape[0], self.n)], axis=1)

    def G_z(self, z, s):
        return np.asarray(self._G(*self._split(z), s), dtype=float)

    def grad_z(self, z, s):
        if self._grad is not None:
            return np.asarray(self._grad(*self._split(z), s), dtype=float)
        return _fd_jacobian(lambda zz: self.G_z(zz, s), z)

    def hess_z(self, z, s):
        if self._hess is not None:
            return np.asarray(self._hess(*self._split(z), s), dtype=float)
        return _fd_jacobian(lambda zz: self.grad_z(zz, s), z)

    def third_z(self, z, s):
        if self._third is not None:
            return np.asarray(self._third(*self._split(z), s), dtype=float)
        return _fd_jacobian(lambda zz: self.hess_z(zz, s), z)

    def GT_z(self, z):
        return np.asarray(self._GT(z[..., self.ix], z[..., self.im]), dtype=float)

    def gradT_z(self, z):
        if self._gradT is not None:
            return np.asarray(self._gradT(z[..., self.ix], z[..., self.im]), dtype=float)
        return _fd_jacobian(self.GT_z, z)

    def hessT_z(self, z):
        if self._hessT is not None:
            return np.asarray(self._hessT(z[..., self.ix], z[..., self.im]), dtype=float)
        return _fd_jacobian(self.gradT_z, z)

    def thirdT_z(self, z):
        if self._thirdT is not None:
            return np.asarray(self._thirdT(z[..., self.ix], z[..., self.im]), dtype=float)
        return _fd_jacobian(self.hessT_z, z)

    # CostModel interface ----------------------------------------------
    def g(self, x, m, v, s):
        return self.G_z(self._stack(x, m, v), s)

    def g_x(self, x, m, v, s):
        return self.grad_z(self._stack(x, m, v), s)[:, self.ix]

    def g_m(self, x, m, v, s):
        return self.grad_z(self._stack(x, m, v), s)[:, self.im]

    def g_v(self, x, m, v, s):
        return self.grad_z(self._stack(x, m, v), s)[:, self.iv]

    def g_xx(self, x, m, v, s):
        return self.hess_z(self._stack(x, m, v), s)[:, self.ix, self.ix]

    def g_vx(self, x, m, v, s):
        return self.hess_z(self._stack(x, m, v), s)[:, self.iv, self.ix]

    def g_vv(self, x, m, v, s):
        return self.hess_z(self._stack(x, m, v), s)[:, self.iv, self.iv]

    def dg_dnu(self, xd, m, vd, s, xe):
        gm = self.g_m(xd, m, vd, s)
        return gm @ np.atleast_2d(xe).T

    def dxi_dg_dnu(self, xd, m, vd, s, xe):
        gm = self.g_m(xd, m, vd, s)
        return np.broadcast_to(gm[:, None, :], (gm.shape[0], np.atleast_2d(xe).shape[0], self.n))

    def gT(self, x, m):
        return self.GT_z(self._stackT(x, m))

    def gT_x(self, x, m):
        return self.gradT_z(self._stackT(x, m))[:, self.ix]

    def gT_m(self, x, m):
        return self.gradT_z(self._stackT(x, m))[:, self.im]

    def gT_xx(self, x, m):
        return self.hessT_z(self._stackT(x, m))[:, self.ix, self.ix]

    def dgT_dnu(self, xd, m, xe):
        return self.gT_m(xd, m) @ np.atleast_2d(xe).T

    def dxi_dgT_dnu(self, xd, m, xe):
        gm = self.gT_m(xd, m)
        return np.broadcast_to(gm[:, None, :], (gm.shape[0], np.atleast_2d(xe).shape[0], self.n))

    def mean_term(self, m, v, s, xe):
        avg = m.weights @ self.g_m(m.states, m, v, s)
        return np.broadcast_to(avg, (np.atleast_2d(xe).shape[0], self.n)).copy()

    def mean_term_T(self, m, xe):
        avg = m.weights @ self.gT_m(m.states, m)
        return np.broadcast_to(avg, (np.atleast_2d(xe).shape[0], self.n)).copy()

    def mean_value(self, m, v, s, xe):
        return (m.weights @ self.g_m(m.states, m, v, s)) @ np.atleast_2d(xe).T

    def mean_value_T(self, m, xe):
        return (m.weights @ self.gT_m(m.states, m)) @ np.atleast_2d(xe).T

    # blocks used by the linearized solvers ------------------------------
    def blocks(self, x, mbar, v, s) -> dict:
        H = self.hess_z(self._stack(x, mbar, v), s)
        ix, im, iv = self.ix, self.im, self.iv
        return {"xx": H[:, ix, ix], "xm": H[:, ix, im], "xv": H[:, ix, iv],
                "mx": H[:, im, ix], "mm": H[:, im, im], "mv": H[:, im, iv],
                "vx": H[:, iv, ix], "vm": H[:, iv, im], "vv": H[:, iv, iv]}

    def blocksT(self, x, mbar) -> dict:
        H = self.hessT_z(self._stackT(x, mbar))
        ix, im = self.ix, self.im
        return {"xx": H[:, ix, ix], "xm": H[:, ix, im], "mx": H[:, im, ix], "mm": H[:, im, im]}


# ---------------------------------------------------------------------------
# built-in costs
# ---------------------------------------------------------------------------


def _mat(a, k: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return a * np.eye(k)
    return a.reshape(k, k)


def lq_meanfield(n: int, d: int, q, qbar, r, q_T, qbar_T, bound: float = 10.0,
                 kappa: float = 0.0, name: str | None = None) -> MeanFieldCost:
    """g = x'qx/2 + mbar'qbar mbar/2 + v'rv/2 (+ kappa |v|^4),  g_T = x'q_T x/2 + mbar'qbar_T mbar/2."""
    q, qb, r = _mat(q, n), _mat(qbar, n), _mat(r, d)
    qT, qbT = _mat(q_T, n), _mat(qbar_T, n)
    kappa = float(kappa)
    D, DT = 2 * n + d, 2 * n
    Hc = np.zeros((D, D))
    Hc[:n, :n], Hc[n:2 * n, n:2 * n], Hc[2 * n:, 2 * n:] = q, qb, r
    HT = np.zeros((DT, DT))
    HT[:n, :n], HT[n:, n:] = qT, qbT
    eye_d = np.eye(d)

    def G(x, m, v, s):
        out = 0.5 * (np.einsum("ia,ab,ib->i", x, q, x) + np.einsum("ia,ab,ib->i", m, qb, m)
                     + np.einsum("ia,ab,ib->i", v, r, v))
        if kappa:
            out = out + kappa * np.sum(v * v, axis=1) ** 2
        return out

    def grad(x, m, v, s):
        gv = v @ r.T
        if kappa:
            gv = gv + 4.0 * kappa * np.sum(v * v, axis=1, keepdims=True) * v
        return np.concatenate([x @ q.T, m @ qb.T, gv], axis=1)

    def hess(x, m, v, s):
        H = np.broadcast_to(Hc, (x.shape[0], D, D)).copy()
        if kappa:
            vv = np.sum(v * v, axis=1)
            H[:, 2 * n:, 2 * n:] += 4.0 * kappa * (vv[:, None, None] * eye_d + 2.0 * v[:, :, None] * v[:, None, :])
        return H

    def third(x, m, v, s):
        T3 = np.zeros((x.shape[0], D, D, D))
        if kappa:
            blk = 8.0 * kappa * (np.einsum("ia,bc->iabc", v, eye_d) + np.einsum("ib,ac->iabc", v, eye_d)
                                 + np.einsum("ic,ab->iabc", v, eye_d))
            T3[:, 2 * n:, 2 * n:, 2 * n:] = blk
        return T3

    def GT(x, m):
        return 0.5 * (np.einsum("ia,ab,ib->i", x, qT, x) + np.einsum("ia,ab,ib->i", m, qbT, m))

    def gradT(x, m):
        return np.concatenate([x @ qT.T, m @ qbT.T], axis=1)

    def hessT(x, m):
        return np.broadcast_to(HT, (x.shape[0], DT, DT)).copy()

    def thirdT(x, m):
        return np.zeros((x.shape[0], DT, DT, DT))

    lam = 0.5 * float(np.min(np.linalg.eigvalsh(0.5 * (r + r.T))))
    label = name or ("quadratic_plus_quartic" if kappa else "lq_meanfield")
    cost = MeanFieldCost(n, d, G, GT, grad, hess, third, gradT, hessT, thirdT, lam=lam, bound=bound, name=label)
    cost.params = {"q": q, "qbar": qb, "r": r, "q_T": qT, "qbar_T": qbT, "kappa": kappa}
    return cost


def quadratic_plus_quartic(n: int, d: int, q, qbar, r, q_T, qbar_T, kappa: float = 0.1,
                           bound: float = 10.0) -> MeanFieldCost:
    return lq_meanfield(n, d, q, qbar, r, q_T, qbar_T, bound=bound, kappa=kappa)


BUILTIN_COSTS = {"lq_meanfield": lq_meanfield, "quadratic_plus_quartic": quadratic_plus_quartic}


# ---------------------------------------------------------------------------
# problem spec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProblemSpec:
    dynamics: LinearDynamics
    cost: CostModel
    T: float
    n: int
    d: int
    mode: str = ""
    name: str = "problem"

    def __post_init__(self):
        if not self.T > 0:
            raise SpecificationError("horizon must be positive", T=self.T)
        if self.n < 1 or self.d < 1:
            raise SpecificationError("dimensions must be positive", n=self.n, d=self.d)
        if not self.mode:
            object.__setattr__(self, "mode", self.cost.mode)
        if self.mode not in ("mean", "full"):
            raise SpecificationError("mode must be 'mean' or 'full'", mode=self.mode)

    def coefficients(self, s: float) -> Coefficients:
        return self.dynamics.at(s)


def _check_x(spec: ProblemSpec, x, v):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if x.shape[-1] != spec.n:
        raise SpecificationError("state dimension mismatch", expected=spec.n, got=x.shape[-1])
    if v.shape[-1] != spec.d:
        raise SpecificationError("control dimension mismatch", expected=spec.d, got=v.shape[-1])
    return x, v


def _check_coeffs(spec: ProblemSpec, c: Coefficients):
    want = spec.dynamics.expected_shapes()
    got = {"f0": c.f0.shape, "f1": c.f1.shape, "f2": c.f2.shape, "f3": c.f3.shape,
           "sigma0": c.s0.shape, "sigma1": c.s1.shape, "sigma2": c.s2.shape, "sigma3": c.s3.shape}
    bad = {k: (list(want[k]), list(got[k])) for k in want if tuple(want[k]) != tuple(got[k])}
    if bad:
        raise SpecificationError("coefficient shape mismatch", mismatches=bad)


def eval_drift(spec: ProblemSpec, x, mbar, v, s: float) -> np.ndarray:
    x, v = _check_x(spec, x, v)
    c = spec.coefficients(s)
    _check_coeffs(spec, c)
    return c.f0 + x @ c.f1.T + np.asarray(mbar, dtype=float) @ c.f2.T + v @ c.f3.T


def diffusion_matrix(spec: ProblemSpec, x, mbar, v, s: float, coeffs: Coefficients | None = None) -> np.ndarray:
    x, v = _check_x(spec, x, v)
    c = coeffs if coeffs is not None else spec.coefficients(s)
    mb = np.broadcast_to(np.asarray(mbar, dtype=float), x.shape)
    S = (c.s0.T[None] + np.einsum("jab,ib->iaj", c.s1, x) + np.einsum("jab,ib->iaj", c.s2, mb)
         + np.einsum("jab,ib->iaj", c.s3, v))
    return S


def eval_diffusion_col(spec: ProblemSpec, j: int, x, mbar, v, s: float) -> np.ndarray:
    if not 0 <= j < spec.n:
        raise SpecificationError("diffusion column out of range", j=j, n=spec.n)
    return diffusion_matrix(spec, x, mbar, v, s)[:, :, j]


# ---------------------------------------------------------------------------
# assumption checks
# ---------------------------------------------------------------------------


@dataclass
class ConvexityReport:
    lam_hat: float
    worst: dict
    ok: bool


def _sample_measure(spec: ProblemSpec, rng) -> ParticleEnsemble:
    return ParticleEnsemble(rng.standard_normal((8, spec.n)))


def estimate_convexity(spec: ProblemSpec, sample_count: int, rng_seed: int = 0,
                       v_scale: float = 1.0, x_scale: float = 1.0, s: float | None = None) -> ConvexityReport:
    """Largest lam with g(v') - g(v) >= D_v g(v).(v'-v) + lam |v'-v|^2 on sampled tuples."""
    if sample_count < 2:
        raise SpecificationError("need at least two samples", sample_count=sample_count)
    rng = np.random.Generator(np.random.Philox(key=(int(rng_seed) << 64) | 7))
    n, d = spec.n, spec.d
    s = 0.0 if s is None else s
    x = x_scale * rng.standard_normal((sample_count, n))
    v = rng.uniform(-v_scale, v_scale, (sample_count, d))
    v2 = rng.uniform(-v_scale, v_scale, (sample_count, d))
    cost = spec.cost
    if cost.mode == "mean":
        m = x_scale * rng.standard_normal((sample_count, n))
    else:
        m = _sample_measure(spec, rng)
    gap = cost.g(x, m, v2, s) - cost.g(x, m, v, s) - np.sum(cost.g_v(x, m, v, s) * (v2 - v), axis=1)
    dist2 = np.sum((v2 - v) ** 2, axis=1)
    keep = dist2 > 1e-12
    ratio = np.where(keep, gap / np.where(keep, dist2, 1.0), np.inf)
    i = int(np.argmin(ratio))
    lam_hat = float(ratio[i])
    worst = {"x": x[i].tolist(), "v": v[i].tolist(), "v_prime": v2[i].tolist(), "ratio": lam_hat}
    if cost.mode == "mean":
        worst["mbar"] = m[i].tolist()
    return ConvexityReport(lam_hat, worst, lam_hat > 0)


@dataclass
class Check:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "checks": [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in self.checks]}


def validate_spec(spec: ProblemSpec, layers: Sequence[str] = ("solver",), sample_count: int = 256,
                  seed: int = 0) -> ValidationReport:
    """Sampled certification of the standing assumptions; never raises."""
    checks = []
    times = np.linspace(0.0, spec.T, 11)
    dyn = spec.dynamics

    # dimensions
    bad = {}
    for s in (0.0, spec.T):
        c = dyn.at(s)
        got = {"f0": c.f0.shape, "f1": c.f1.shape, "f2": c.f2.shape, "f3": c.f3.shape,
               "sigma0": c.s0.shape, "sigma1": c.s1.shape, "sigma2": c.s2.shape, "sigma3": c.s3.shape}
        for k, want in dyn.expected_shapes().items():
            if tuple(got[k]) != tuple(want):
                bad[k] = {"expected": list(want), "got": list(got[k])}
    if spec.cost.n != spec.n or spec.cost.d != spec.d:
        bad["cost"] = {"expected": [spec.n, spec.d], "got": [spec.cost.n, spec.cost.d]}
    checks.append(Check("dimensions", not bad, bad))
    if bad:
        return ValidationReport(checks)

    # coefficient bound
    worst = 0.0
    for s in times:
        c = dyn.at(s)
        for arr in (c.f0, c.f1, c.f2, c.f3, c.s0, c.s1, c.s2, c.s3):
            if arr.size:
                worst = max(worst, float(np.max(np.abs(arr))))
    checks.append(Check("B1_bound", worst <= dyn.bound, {"max_coefficient": worst, "l": dyn.bound}))

    # quadratic growth
    rng = np.random.Generator(np.random.Philox(key=(int(seed) << 64) | 11))
    x = 2.0 * rng.standard_normal((sample_count, spec.n))
    v = 2.0 * rng.standard_normal((sample_count, spec.d))
    ens = ParticleEnsemble(rng.standard_normal((16, spec.n)))
    cost = spec.cost
    l = cost.bound
    m2 = ens.second_moment()
    rhs = l * (1.0 + np.sum(x * x, axis=1) + m2 + np.sum(v * v, axis=1))
    ok_g = True
    ratio = 0.0
    try:
        for s in times[::5]:
            gv = np.abs(cost.g(x, ens if cost.mode == "full" else ens.mean(), v, s))
            ratio = max(ratio, float(np.max(gv / rhs)))
        gt = np.abs(cost.gT(x, ens if cost.mode == "full" else ens.mean()))
        ratio = max(ratio, float(np.max(gt / (l * (1.0 + np.sum(x * x, axis=1) + m2)))))
        ok_g = ratio <= 1.0
    except Exception as exc:  # report-only
        ok_g = False
        ratio = repr(exc)
    checks.append(Check("B2_growth", ok_g, {"max_ratio": ratio, "l": l}))

    # convexity in v
    conv = estimate_convexity(spec, sample_count, seed)
    checks.append(Check("B3_convexity", conv.ok, {"lam_hat": conv.lam_hat, "lam": cost.lam,
                                                   "worst": conv.worst}))

    if any(layer in ("bellman", "master") for layer in layers):
        free = dyn.is_control_free(times)
        checks.append(Check("B4_control_free_diffusion", free,
                            {} if free else {"witness": "sigma3 has nonzero entries"}))
    if "master" in layers:
        checks.append(Check("B2prime_third_derivatives", bool(cost.has_third),
                            {"cost": cost.name, "mode": cost.mode}))
    return ValidationReport(checks)


# ---------------------------------------------------------------------------
# configuration files
# ---------------------------------------------------------------------------


@dataclass
class ProblemConfig:
    name: str
    spec: ProblemSpec
    initial: dict
    solver: dict
    raw: dict

    def initial_ensemble(self, N: int, seed: int) -> ParticleEnsemble:
        init = self.initial
        kind = init.get("distribution", "normal")
        if kind == "normal":
            return ParticleEnsemble.gaussian(N, init.get("mean", [0.0] * self.spec.n),
                                             init.get("std", [1.0] * self.spec.n), seed)
        if kind == "csv":
            return ParticleEnsemble.from_csv(init["path"], seed)
        raise ConfigError(f"unknown initial distribution {kind!r}")


def _build_cost(n: int, d: int, c: dict) -> CostModel:
    kind = c.get("kind", "lq_meanfield")
    bound = float(c.get("bound", 10.0))
    if kind in BUILTIN_COSTS:
        kw = {k: c[k] for k in ("q", "qbar", "r", "q_T", "qbar_T") if k in c}
        missing = {"q", "qbar", "r", "q_T", "qbar_T"} - set(kw)
        if missing:
            raise ConfigError("cost entry misses weights", missing=sorted(missing))
        if kind == "quadratic_plus_quartic":
            kw["kappa"] = float(c.get("kappa", 0.1))
        return BUILTIN_COSTS[kind](n, d, bound=bound, **kw)
    if kind == "plugin":
        target = c.get("target", "")
        if ":" not in target:
            raise ConfigError("plugin target must look like 'module:factory'", target=target)
        mod, attr = target.split(":", 1)
        try:
            factory = getattr(importlib.import_module(mod), attr)
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"cannot load cost plugin {target!r}: {exc}") from exc
        cost = factory(n=n, d=d, **c.get("params", {}))
        if not isinstance(cost, CostModel):
            raise ConfigError("plugin did not return a CostModel", target=target)
        return cost
    raise ConfigError(f"unknown cost kind {kind!r}", known=sorted(BUILTIN_COSTS) + ["plugin"])


def problem_from_dict(raw: dict) -> ProblemConfig:
    try:
        n = int(raw["state_dim"])
        d = int(raw["control_dim"])
        T = float(raw["horizon"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"config needs state_dim, control_dim and horizon: {exc}") from exc
    dyn_raw = raw.get("dynamics", {})
    known = {"f0", "f1", "f2", "f3", "sigma0", "sigma1", "sigma2", "sigma3"}
    unknown = set(dyn_raw) - known - {"bound"}
    if unknown:
        raise ConfigError("unknown dynamics keys", keys=sorted(unknown))
    kw = {k: profile_from_config(dyn_raw[k]) for k in known if k in dyn_raw}
    dyn = LinearDynamics.build(n, d, bound=float(dyn_raw.get("bound", raw.get("bound", 10.0))), **kw)
    cost = _build_cost(n, d, raw.get("cost", {}))
    name = str(raw.get("name", "problem"))
    spec = ProblemSpec(dyn, cost, T, n, d, name=name)
    return ProblemConfig(name, spec, dict(raw.get("initial", {})), dict(raw.get("solver", {})), raw)


def resolve_config_path(path) -> Path:
    """The file itself if it exists, else the packaged config of that name."""
    p = Path(path)
    if p.is_file():
        return p
    candidate = Path(__file__).parent / "configs" / p.name
    if str(path) and candidate.is_file():
        return candidate
    raise ConfigError(f"config file not found: {path}")


def load_config(path) -> ProblemConfig:
    p = resolve_config_path(path)
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {p} must be a mapping")
    return problem_from_dict(raw)


def builtin_config_path(name: str) -> Path:
    return Path(__file__).parent / "configs" / f"{name}.yaml"


def plugin_example(n: int, d: int, **params: Any) -> CostModel:
    """Reference plugin: the LQ cost with weights taken from ``params``."""
    return lq_meanfield(n, d, **params)
