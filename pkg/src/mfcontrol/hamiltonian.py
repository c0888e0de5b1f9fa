"""Lagrangian, its minimizer over the control, and the Hamiltonian family.

All functions are batched over a leading particle axis.  ``q`` always has
shape ``(N, n, n)`` with ``q[i, :, j]`` the j-th costate column, matching
the diffusion-matrix layout of :mod:`mfcontrol.model`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvexityError, SolverError, SpecificationError
from .measure import ParticleEnsemble
from .model import Coefficients, ProblemSpec, diffusion_matrix

FOC_TOL = 1e-10
NEWTON_MAX = 50


@dataclass(frozen=True)
class CostateTuple:
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p, q = np.atleast_2d(self.p), np.asarray(self.q, dtype=float)
        if q.ndim == 2:
            q = q[None]
        n = p.shape[-1]
        if q.shape[-2:] != (n, n):
            raise SpecificationError("q must hold n columns of length n", p=list(p.shape), q=list(q.shape))
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)


@dataclass
class HamiltonianEval:
    v_hat: np.ndarray
    H: np.ndarray
    D_pH: np.ndarray
    D_qH: np.ndarray
    D_xH: np.ndarray
    newton_iterations: int
    foc_residual: float


def _arrays(spec, x, p, q):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    N = x.shape[0]
    p = np.broadcast_to(np.atleast_2d(np.asarray(p, dtype=float)), (N, spec.n))
    if q is None:
        q = np.zeros((N, spec.n, spec.n))
    q = np.broadcast_to(np.asarray(q, dtype=float), (N, spec.n, spec.n))
    return x, p, q


def _mbar(m) -> np.ndarray:
    return m.mean() if isinstance(m, ParticleEnsemble) else np.asarray(m, dtype=float)


def foc(spec: ProblemSpec, x, m, v, s, p, q, c: Coefficients | None = None) -> np.ndarray:
    """D_v L = f3' p + sum_j sigma3^j' q^j + D_v g, shape ``(N, d)``."""
    c = c if c is not None else spec.coefficients(s)
    return p @ c.f3 + np.einsum("jad,iaj->id", c.s3, q) + spec.cost.g_v(x, m, v, s)


def lagrangian(spec: ProblemSpec, x, m, v, s, p, q) -> np.ndarray:
    x, p, q = _arrays(spec, x, p, q)
    v = np.broadcast_to(np.atleast_2d(np.asarray(v, dtype=float)), (x.shape[0], spec.d))
    c = spec.coefficients(s)
    mb = _mbar(m)
    f = c.f0 + x @ c.f1.T + np.broadcast_to(mb, x.shape) @ c.f2.T + v @ c.f3.T
    S = diffusion_matrix(spec, x, mb, v, s, c)
    return np.sum(p * f, axis=1) + np.sum(q * S, axis=(1, 2)) + spec.cost.g(x, m, v, s)


def minimize_control(spec: ProblemSpec, x, m, s, p, q=None, v0=None, foc_tol: float = FOC_TOL,
                     max_iter: int = NEWTON_MAX, return_info: bool = False):
    """Damped Newton on D_v L; exact in one step for quadratic costs."""
    x, p, q = _arrays(spec, x, p, q)
    N, d = x.shape[0], spec.d
    c = spec.coefficients(s)
    lin = p @ c.f3 + np.einsum("jad,iaj->id", c.s3, q)
    cost = spec.cost
    v = np.zeros((N, d)) if v0 is None else np.array(np.broadcast_to(v0, (N, d)), dtype=float)
    F = lin + cost.g_v(x, m, v, s)
    res = np.linalg.norm(F, axis=1)
    it = 0
    while np.max(res, initial=0.0) > foc_tol and it < max_iter:
        it += 1
        J = cost.g_vv(x, m, v, s)
        if d == 1:
            if not np.all(J > 0):
                raise ConvexityError("D_v^2 g is not positive definite", iteration=it)
            step = F / J[:, :, 0]
        else:
            try:
                np.linalg.cholesky(J)
            except np.linalg.LinAlgError as exc:
                raise ConvexityError("D_v^2 g is not positive definite", iteration=it) from exc
            step = np.linalg.solve(J, F[..., None])[..., 0]
        t = np.ones(N)
        active = res > foc_tol
        for _ in range(30):
            vt = v - t[:, None] * step * active[:, None]
            Ft = lin + cost.g_v(x, m, vt, s)
            rt = np.linalg.norm(Ft, axis=1)
            worse = active & (rt > res) & (rt > foc_tol)
            if not np.any(worse):
                break
            t = np.where(worse, 0.5 * t, t)
        v, F, res = vt, Ft, rt
    if np.max(res, initial=0.0) > foc_tol:
        raise SolverError("Newton iteration for the control did not converge",
                          residual=float(np.max(res)), iterations=it)
    if return_info:
        return v, it, float(np.max(res, initial=0.0))
    return v


def hamiltonian(spec: ProblemSpec, x, m, s, p, q=None, v0=None, foc_tol: float = FOC_TOL) -> HamiltonianEval:
    x, p, q = _arrays(spec, x, p, q)
    v, it, r = minimize_control(spec, x, m, s, p, q, v0=v0, foc_tol=foc_tol, return_info=True)
    c = spec.coefficients(s)
    mb = np.broadcast_to(_mbar(m), x.shape)
    f = c.f0 + x @ c.f1.T + mb @ c.f2.T + v @ c.f3.T
    S = diffusion_matrix(spec, x, mb, v, s, c)
    H = np.sum(p * f, axis=1) + np.sum(q * S, axis=(1, 2)) + spec.cost.g(x, m, v, s)
    DxH = p @ c.f1 + np.einsum("jba,ibj->ia", c.s1, q) + spec.cost.g_x(x, m, v, s)
    return HamiltonianEval(v, H, f, S, DxH, it, r)


def hamiltonian_measure_term(spec: ProblemSpec, x_eval, donor_state, donor_v, donor_p, donor_q, s,
                             m: ParticleEnsemble | None = None) -> np.ndarray:
    """Integrand f2' p + sum_j sigma2^j' q^j + D_xi dg/dnu(donor)(x_eval), row by row."""
    xe = np.atleast_2d(np.asarray(x_eval, dtype=float))
    xd, p, q = _arrays(spec, donor_state, donor_p, donor_q)
    vd = np.atleast_2d(np.asarray(donor_v, dtype=float))
    if m is None:
        m = ParticleEnsemble(xd)
    c = spec.coefficients(s)
    out = p @ c.f2 + np.einsum("jba,ibj->ia", c.s2, q)
    cost = spec.cost
    if cost.mode == "mean":
        return out + cost.g_m(xd, m, vd, s)
    rows = []
    for a in range(0, xd.shape[0], 256):
        b = min(a + 256, xd.shape[0])
        blk = cost.dxi_dg_dnu(xd[a:b], m, vd[a:b], s, xe[a:b])
        rows.append(np.einsum("iia->ia", blk))
    return out + np.concatenate(rows, axis=0)


def measure_average(spec: ProblemSpec, m: ParticleEnsemble, v, p, q, s, x_eval,
                    c: Coefficients | None = None) -> np.ndarray:
    """Ensemble average over donors of :func:`hamiltonian_measure_term`."""
    c = c if c is not None else spec.coefficients(s)
    w = m.weights
    lin = (w @ p) @ c.f2 + np.einsum("jba,bj->a", c.s2, np.einsum("i,iaj->aj", w, q))
    return lin + spec.cost.mean_term(m, v, s, x_eval)


def backward_driver(spec: ProblemSpec, m: ParticleEnsemble, v, p, q, s, x_eval=None, v_eval=None,
                    p_eval=None, q_eval=None, c: Coefficients | None = None) -> np.ndarray:
    """D_xH along the particles plus the averaged measure term.

    Donors are the atoms of ``m`` with controls ``v`` and costates ``(p, q)``.
    The evaluation rows default to the donors themselves; a tagged point
    passes its own state, control and costates.
    """
    c = c if c is not None else spec.coefficients(s)
    if x_eval is None:
        x_eval, v_eval, p_eval, q_eval = m.states, v, p, q
    local = p_eval @ c.f1 + np.einsum("jba,ibj->ia", c.s1, q_eval) + spec.cost.g_x(x_eval, m, v_eval, s)
    return local + measure_average(spec, m, v, p, q, s, x_eval, c)


def dH_dnu(spec: ProblemSpec, donor_state, s, donor_p, donor_q, x_eval, m: ParticleEnsemble,
           v_hat=None) -> np.ndarray:
    """dH/dnu(xi, m, s; p, q)(x) for every donor xi and evaluation point x, shape ``(M, E)``."""
    c = spec.coefficients(s)
    if np.any(c.s3):
        raise SpecificationError("dH/dnu needs control-free diffusion (sigma3 = 0)")
    xd, p, q = _arrays(spec, donor_state, donor_p, donor_q)
    xe = np.atleast_2d(np.asarray(x_eval, dtype=float))
    if v_hat is None:
        v_hat = minimize_control(spec, xd, m, s, p, q)
    t1 = p @ (xe @ c.f2.T).T
    s2x = np.einsum("jab,eb->eaj", c.s2, xe)
    t2 = np.einsum("maj,eaj->me", q, s2x)
    return t1 + t2 + spec.cost.dg_dnu(xd, m, v_hat, s, xe)


def control_lipschitz_ratio(spec: ProblemSpec, m, s: float, samples: int = 10_000, seed: int = 0,
                            scale: float = 1.0) -> float:
    """max |v(x',p',q') - v(x,p,q)| / (|x'-x| + |p'-p| + sum_j |q'^j - q^j|) over random pairs."""
    rng = np.random.Generator(np.random.Philox(key=(int(seed) << 64) | 13))
    n = spec.n
    x, x2 = scale * rng.standard_normal((2, samples, n))
    p, p2 = scale * rng.standard_normal((2, samples, n))
    q, q2 = scale * rng.standard_normal((2, samples, n, n))
    v = minimize_control(spec, x, m, s, p, q)
    v2 = minimize_control(spec, x2, m, s, p2, q2)
    den = (np.linalg.norm(x2 - x, axis=1) + np.linalg.norm(p2 - p, axis=1)
           + np.sum(np.linalg.norm(q2 - q, axis=1), axis=1))
    return float(np.max(np.linalg.norm(v2 - v, axis=1) / den))
