"""Closed-form and brute-force oracles.

* :func:`riccati_oracle` integrates the deviation and mean Riccati equations
  of the linear-quadratic problem (derivation in ``docs/riccati.md``);
* :func:`shooting_oracle` solves the deterministic Pontryagin system of a
  particle ensemble by Newton shooting on the initial costates, at ten
  times the solver resolution with RK4;
* :func:`run_lq_benchmark`, :func:`deterministic_benchmark` and
  :func:`convergence_study` compare the particle solver against them.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CapabilityError, SolverError, SpecificationError
from .fbsde import SolverOptions, residuals, solve
from .hamiltonian import minimize_control
from .measure import ParticleEnsemble
from .model import LinearDynamics, MeanFieldCost, ProblemSpec, lq_meanfield
from .paths import make_grid, sample_increments

REFINE = 10
RICCATI_TOL = 1e-10
SHOOTING_TOL = 1e-10


def _mat(a, rows: int, cols: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return a * np.eye(rows, cols)
    return a.reshape(rows, cols)


@dataclass(frozen=True)
class LqParams:
    """Linear-quadratic instance; ``c`` holds the noise columns (``c[:, j]`` drives ``W^j``)."""

    a: np.ndarray
    abar: np.ndarray
    b: np.ndarray
    c: np.ndarray
    q: np.ndarray
    qbar: np.ndarray
    r: np.ndarray
    q_T: np.ndarray
    qbar_T: np.ndarray
    T: float = 1.0

    @classmethod
    def build(cls, n: int = 1, d: int = 1, a=0.0, abar=0.0, b=1.0, c=0.0, q=0.0, qbar=0.0, r=1.0,
              q_T=0.0, qbar_T=0.0, T: float = 1.0) -> "LqParams":
        p = cls(_mat(a, n, n), _mat(abar, n, n), _mat(b, n, d), _mat(c, n, n), _mat(q, n, n),
                _mat(qbar, n, n), _mat(r, d, d), _mat(q_T, n, n), _mat(qbar_T, n, n), float(T))
        p.check()
        return p

    @classmethod
    def from_spec(cls, spec: ProblemSpec) -> "LqParams":
        """Read an LQ instance back out of a time-constant spec with the built-in LQ cost."""
        cp = getattr(spec.cost, "params", None)
        if cp is None or cp.get("kappa", 0.0):
            raise CapabilityError("spec does not carry a pure LQ cost")
        ts = np.linspace(0.0, spec.T, 5)
        c0 = spec.coefficients(0.0)
        for s in ts[1:]:
            cs = spec.coefficients(float(s))
            if any(not np.allclose(getattr(c0, k), getattr(cs, k)) for k in ("f0", "f1", "f2", "f3", "s0")):
                raise CapabilityError("the Riccati oracle needs time-constant coefficients")
        if np.any(c0.f0) or np.any(c0.s1) or np.any(c0.s2) or np.any(c0.s3):
            raise CapabilityError("the Riccati oracle needs f0 = 0 and constant additive noise")
        p = cls(c0.f1, c0.f2, c0.f3, c0.s0.T.copy(), cp["q"], cp["qbar"], cp["r"], cp["q_T"], cp["qbar_T"],
                float(spec.T))
        p.check()
        return p

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def d(self) -> int:
        return self.b.shape[1]

    def check(self) -> None:
        if not self.T > 0:
            raise SpecificationError("horizon must be positive", T=self.T)
        rs = 0.5 * (self.r + self.r.T)
        if np.min(np.linalg.eigvalsh(rs)) <= 0:
            raise SpecificationError("control weight r must be positive definite")

    def to_dict(self) -> dict:
        out = {k: getattr(self, k).tolist() for k in ("a", "abar", "b", "c", "q", "qbar", "r", "q_T", "qbar_T")}
        out["T"] = self.T
        return out


def lq_spec(params: LqParams, name: str = "lq") -> ProblemSpec:
    n, d = params.n, params.d
    dyn = LinearDynamics.build(n, d, f1=params.a, f2=params.abar, f3=params.b, sigma0=params.c.T)
    cost = lq_meanfield(n, d, params.q, params.qbar, params.r, params.q_T, params.qbar_T)
    return ProblemSpec(dyn, cost, params.T, n, d, name=name)


# ---------------------------------------------------------------------------
# Riccati oracle
# ---------------------------------------------------------------------------


@dataclass
class RiccatiSolution:
    params: LqParams
    t: np.ndarray
    Pi: np.ndarray
    Gamma: np.ndarray
    chi: np.ndarray
    residual: float

    @property
    def gain(self) -> np.ndarray:
        """K(t) = r^-1 b' Pi(t)."""
        rinv_bt = np.linalg.solve(self.params.r, self.params.b.T)
        return np.einsum("da,kab->kdb", rinv_bt, self.Pi)

    @property
    def gain_bar(self) -> np.ndarray:
        """Kbar(t) = r^-1 b' Gamma(t)."""
        rinv_bt = np.linalg.solve(self.params.r, self.params.b.T)
        return np.einsum("da,kab->kdb", rinv_bt, self.Gamma)

    def _interp(self, t: float, Y: np.ndarray, rhs) -> np.ndarray:
        t = float(t)
        if t < self.t[0] - 1e-12 or t > self.t[-1] + 1e-12:
            raise SpecificationError("time outside the oracle horizon", t=t)
        j = int(np.clip(np.searchsorted(self.t, t) - 1, 0, len(self.t) - 2))
        t0, t1 = self.t[j], self.t[j + 1]
        h = t1 - t0
        u = (t - t0) / h
        if u <= 1e-14:
            return Y[j].copy()
        if u >= 1 - 1e-14:
            return Y[j + 1].copy()
        d0, d1 = rhs(Y[j]), rhs(Y[j + 1])
        h00, h10 = 2 * u**3 - 3 * u**2 + 1, u**3 - 2 * u**2 + u
        h01, h11 = -2 * u**3 + 3 * u**2, u**3 - u**2
        return h00 * Y[j] + h10 * h * d0 + h01 * Y[j + 1] + h11 * h * d1

    def Pi_at(self, t: float) -> np.ndarray:
        return self._interp(t, self.Pi, lambda P: _pi_rhs(self.params, P))

    def Gamma_at(self, t: float) -> np.ndarray:
        return self._interp(t, self.Gamma, lambda G: _gamma_rhs(self.params, G))

    def value(self, ensemble: ParticleEnsemble) -> float:
        """V(m) = (1/2) tr(Pi(0) Cov m) + (1/2) mbar' Gamma(0) mbar + chi(0)."""
        mb = ensemble.mean()
        return float(0.5 * np.trace(self.Pi[0] @ ensemble.covariance()) + 0.5 * mb @ self.Gamma[0] @ mb + self.chi[0])

    def costate(self, k_or_t: float, x, mbar) -> np.ndarray:
        """P = Pi (x - mbar) + Gamma mbar."""
        Pi, G = self.Pi_at(k_or_t), self.Gamma_at(k_or_t)
        x = np.atleast_2d(x)
        mbar = np.asarray(mbar, dtype=float)
        return (x - mbar) @ Pi.T + mbar @ G.T

    def feedback(self, t: float, x, mbar) -> np.ndarray:
        """v = -r^-1 b' (Pi (x - mbar) + Gamma mbar)."""
        p = self.costate(t, x, mbar)
        return -np.linalg.solve(self.params.r, (p @ self.params.b).T).T

    def mean_path(self, mbar0, times) -> np.ndarray:
        """mbar(t) under the optimal feedback: mbar' = (a + abar - b r^-1 b' Gamma) mbar, RK4 on the oracle grid."""
        p = self.params
        B = p.b @ np.linalg.solve(p.r, p.b.T)
        A = p.a + p.abar
        m = np.empty((len(self.t), p.n))
        m[0] = np.asarray(mbar0, dtype=float).reshape(p.n)
        for j in range(len(self.t) - 1):
            h = self.t[j + 1] - self.t[j]
            Gm = self.Gamma_at(self.t[j] + 0.5 * h)
            f = lambda y, G: (A - B @ G) @ y  # noqa: E731
            k1 = f(m[j], self.Gamma[j])
            k2 = f(m[j] + 0.5 * h * k1, Gm)
            k3 = f(m[j] + 0.5 * h * k2, Gm)
            k4 = f(m[j] + h * k3, self.Gamma[j + 1])
            m[j + 1] = m[j] + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out = []
        for t in np.atleast_1d(times):
            j = int(np.argmin(np.abs(self.t - t)))
            if abs(self.t[j] - t) > 1e-12:
                raise SpecificationError("mean path is reported on oracle nodes only", t=float(t))
            out.append(m[j])
        return np.array(out)


def _pi_rhs(p: LqParams, P: np.ndarray) -> np.ndarray:
    B = p.b @ np.linalg.solve(p.r, p.b.T)
    return -P @ p.a - p.a.T @ P + P @ B @ P - p.q


def _gamma_rhs(p: LqParams, G: np.ndarray) -> np.ndarray:
    B = p.b @ np.linalg.solve(p.r, p.b.T)
    A = p.a + p.abar
    return -G @ A - A.T @ G + G @ B @ G - (p.q + p.qbar)


def _chi_rhs(p: LqParams, P: np.ndarray) -> float:
    return -0.5 * float(np.trace(p.c.T @ P @ p.c))


def _rk4_back(f, YT: np.ndarray, t: np.ndarray) -> np.ndarray:
    Y = np.empty((len(t),) + YT.shape)
    Y[-1] = YT
    for j in range(len(t) - 1, 0, -1):
        h = t[j - 1] - t[j]
        y = Y[j]
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        Y[j - 1] = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(Y[j - 1])) or np.max(np.abs(Y[j - 1])) > 1e12:
            raise SolverError("Riccati solution blew up", t=float(t[j - 1]))
    return Y


def _integrate(params: LqParams, M: int):
    t = params.T * np.arange(M + 1) / M
    t[-1] = params.T
    Pi = _rk4_back(lambda P: _pi_rhs(params, P), params.q_T.copy(), t)
    Gm = _rk4_back(lambda G: _gamma_rhs(params, G), params.q_T + params.qbar_T, t)
    # chi' = -(1/2) tr(c' Pi c), integrated with the same RK4 stages as Pi
    chi = np.zeros(M + 1)
    for j in range(M, 0, -1):
        h = t[j - 1] - t[j]
        P = Pi[j]
        k1 = _pi_rhs(params, P)
        k2 = _pi_rhs(params, P + 0.5 * h * k1)
        k3 = _pi_rhs(params, P + 0.5 * h * k2)
        chi[j - 1] = chi[j] + h / 6 * (_chi_rhs(params, P) + 2 * _chi_rhs(params, P + 0.5 * h * k1)
                                       + 2 * _chi_rhs(params, P + 0.5 * h * k2) + _chi_rhs(params, P + h * k3))
    return t, Pi, Gm, chi


def riccati_oracle(params: LqParams, K: int = 50, refine: int = REFINE) -> RiccatiSolution:
    """Backward RK4 for (Pi, Gamma, chi) at ``refine * K`` steps.

    The residual is a step-doubling defect: the sup over nodes of the gap to
    an RK4 solve at twice the resolution, relative to ``max(1, |Y|)``.
    """
    params.check()
    M = int(refine) * int(K)
    if M < 1:
        raise SpecificationError("oracle grid too coarse", steps=M)
    t, Pi, Gm, chi = _integrate(params, M)
    _, Pi2, Gm2, chi2 = _integrate(params, 2 * M)
    res = 0.0
    for Y, Y2 in ((Pi, Pi2[::2]), (Gm, Gm2[::2]), (chi, chi2[::2])):
        res = max(res, float(np.max(np.abs(Y - Y2) / np.maximum(1.0, np.abs(Y)))))
    return RiccatiSolution(params, t, Pi, Gm, chi, res)


# ---------------------------------------------------------------------------
# LQ benchmark
# ---------------------------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    value_solver: float
    value_oracle: float
    value_error: float
    feedback_error: float
    gradient_error: float
    foc_max: float
    picard_iterations: int
    runtime: float


@dataclass
class LqBenchmarkReport:
    params: LqParams
    N: int
    K: int
    rows: list
    riccati_residual: float
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"params": self.params.to_dict(), "N": self.N, "K": self.K,
                "riccati_residual": self.riccati_residual, "summary": self.summary,
                "seeds": [r.__dict__ for r in self.rows]}


def _summ(vals) -> dict:
    a = np.asarray(vals, dtype=float)
    return {"mean": float(a.mean()), "std": float(a.std(ddof=1)) if a.size > 1 else 0.0,
            "min": float(a.min()), "max": float(a.max())}


def feedback_error(sol, oracle: RiccatiSolution) -> float:
    """RMS relative error of the solver control against the Riccati feedback at the solver's own states."""
    w = sol.weights
    num = den = 0.0
    mpath = oracle.mean_path(sol.ensemble.mean(), sol.grid.knots[:-1])
    for k in range(sol.K):
        ref = oracle.feedback(sol.grid.knots[k], sol.Y[:, k], mpath[k])
        num += float(w @ np.sum((sol.v_hat[:, k] - ref) ** 2, axis=1))
        den += float(w @ np.sum(ref ** 2, axis=1))
    return float(np.sqrt(num / den))


def gradient_error(sol, oracle: RiccatiSolution) -> float:
    """RMS relative error of P(t0) against Pi(0)(x - mbar) + Gamma(0) mbar."""
    x = sol.Y[:, 0]
    ref = oracle.costate(sol.grid.knots[0], x, sol.ensemble.mean())
    w = sol.weights
    return float(np.sqrt((w @ np.sum((sol.P[:, 0] - ref) ** 2, axis=1)) / (w @ np.sum(ref ** 2, axis=1))))


def _lq_seed(params, spec, oracle, N, K, seed, mean0, std0, options) -> SeedResult:
    t = time.perf_counter()
    ens = ParticleEnsemble.gaussian(N, mean0, std0, seed)
    grid = make_grid(0.0, params.T, K)
    opts = replace(options, seed=seed)
    sol = solve(spec, ens, grid, sample_increments(grid, N, params.n, seed), opts)
    from .analysis import solution_value
    V = solution_value(sol)
    V0 = oracle.value(ens)
    res = residuals(spec, sol)
    return SeedResult(int(seed), V, V0, abs(V - V0) / abs(V0), feedback_error(sol, oracle), gradient_error(sol, oracle),
                      float(res["foc_max"]), int(sol.diagnostics.get("picard_iterations", -1)),
                      time.perf_counter() - t)


def run_lq_benchmark(params: LqParams, N: int = 4096, K: int = 50, seeds=(0, 1, 2, 3, 4), mean0=(1.0,),
                     std0=(0.5,), options: SolverOptions | None = None, jobs: int = 1) -> LqBenchmarkReport:
    """Solver vs Riccati oracle on Gaussian initial ensembles, one solve per seed."""
    options = options or SolverOptions()
    spec = lq_spec(params)
    oracle = riccati_oracle(params, K)
    args = [(params, spec, oracle, N, K, s, mean0, std0, options) for s in seeds]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda a: _lq_seed(*a), args))
    else:
        rows = [_lq_seed(*a) for a in args]
    rep = LqBenchmarkReport(params, N, K, rows, oracle.residual)
    for key in ("value_error", "feedback_error", "gradient_error", "foc_max", "runtime"):
        rep.summary[key] = _summ([getattr(r, key) for r in rows])
    return rep


# ---------------------------------------------------------------------------
# deterministic benchmark
# ---------------------------------------------------------------------------


@dataclass
class ShootingSolution:
    t: np.ndarray
    X: np.ndarray
    P: np.ndarray
    v: np.ndarray
    boundary_residual: float
    iterations: int


def _shooting_rhs(spec: ProblemSpec, w: np.ndarray, s: float, X: np.ndarray, P: np.ndarray, v0=None):
    """Pontryagin right-hand side for a batch ``(B, N, n)`` of ensembles with weights ``w``."""
    B, N, n = X.shape
    c = spec.coefficients(s)
    mb = np.einsum("i,bia->ba", w, X)
    mrow = np.repeat(mb, N, axis=0)
    x, p = X.reshape(B * N, n), P.reshape(B * N, n)
    v = minimize_control(spec, x, mrow, s, p, None, v0=None if v0 is None else v0.reshape(B * N, -1), foc_tol=1e-12)
    cost = spec.cost
    dX = c.f0 + x @ c.f1.T + mrow @ c.f2.T + v @ c.f3.T
    loc = p @ c.f1 + cost.g_x(x, mrow, v, s)
    mean_part = (p @ c.f2 + cost.g_m(x, mrow, v, s)).reshape(B, N, n)
    avg = np.einsum("i,bia->ba", w, mean_part)
    dP = -(loc.reshape(B, N, n) + avg[:, None, :])
    return dX.reshape(B, N, n), dP, v.reshape(B, N, -1)


def _shoot(spec: ProblemSpec, w, t, X0, P0, record: bool = False):
    """RK4 sweep of the batch; with ``record`` also returns the path of batch member 0."""
    X, P = X0.copy(), P0.copy()
    path, v = [], None
    for j in range(len(t) - 1):
        h = t[j + 1] - t[j]
        s = t[j]
        a1, b1, v1 = _shooting_rhs(spec, w, s, X, P, v)
        if record:
            path.append((X[0], P[0], v1[0]))
        a2, b2, v = _shooting_rhs(spec, w, s + 0.5 * h, X + 0.5 * h * a1, P + 0.5 * h * b1, v1)
        a3, b3, v = _shooting_rhs(spec, w, s + 0.5 * h, X + 0.5 * h * a2, P + 0.5 * h * b2, v)
        a4, b4, v = _shooting_rhs(spec, w, s + h, X + h * a3, P + h * b3, v)
        X = X + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
        P = P + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(P))):
            raise SolverError("shooting trajectory diverged", t=float(t[j + 1]))
    if record:
        path.append((X[0], P[0], _shooting_rhs(spec, w, t[-1], X[:1], P[:1], v[:1])[2][0]))
    return X, P, path


def _terminal_mismatch(spec: ProblemSpec, w, X, P):
    B, N, n = X.shape
    mb = np.einsum("i,bia->ba", w, X)
    mrow = np.repeat(mb, N, axis=0)
    x = X.reshape(B * N, n)
    cost = spec.cost
    avg = np.einsum("i,bia->ba", w, cost.gT_m(x, mrow).reshape(B, N, n))
    return P - (cost.gT_x(x, mrow).reshape(B, N, n) + avg[:, None, :])


def shooting_oracle(spec: ProblemSpec, ensemble: ParticleEnsemble, steps: int, P0_guess=None,
                    tol: float = SHOOTING_TOL, max_iter: int = 30, fd_step: float = 1e-7) -> ShootingSolution:
    """Newton shooting on the stacked initial costates, damped by backtracking.

    The Jacobian comes from forward differences of one batched RK4 sweep in
    which every column perturbs one costate coordinate.
    """
    if not spec.dynamics.is_deterministic(np.linspace(0.0, spec.T, 11)):
        raise CapabilityError("the shooting oracle needs sigma = 0")
    if spec.cost.mode != "mean" or not isinstance(spec.cost, MeanFieldCost):
        raise CapabilityError("the shooting oracle supports mean-mode costs only")
    X0 = ensemble.states
    N, n = X0.shape
    w = ensemble.weights
    t = spec.T * np.arange(steps + 1) / steps
    t[-1] = spec.T
    D = N * n
    z = np.zeros(D) if P0_guess is None else np.asarray(P0_guess, dtype=float).reshape(D)

    def F(zb):
        B = zb.shape[0]
        Xb = np.broadcast_to(X0, (B, N, n))
        XT, PT, path = _shoot(spec, w, t, Xb, zb.reshape(B, N, n), record=True)
        return _terminal_mismatch(spec, w, XT, PT).reshape(B, D), path

    def batch(z):
        return np.vstack([z[None], z[None] + fd_step * np.eye(D)])

    Fb, path = F(batch(z))
    it = 0
    while np.max(np.abs(Fb[0])) > tol and it < max_iter:
        it += 1
        r = Fb[0]
        J = (Fb[1:] - r).T / fd_step
        step = np.linalg.solve(J, r)
        lam = 1.0
        for _ in range(20):
            zt = z - lam * step
            Ft, pt = F(batch(zt))
            if np.max(np.abs(Ft[0])) < np.max(np.abs(r)):
                break
            lam *= 0.5
        z, Fb, path = zt, Ft, pt
    res = float(np.max(np.abs(Fb[0])))
    if res > tol:
        raise SolverError("shooting did not converge", residual=res, iterations=it)
    X, P, v = (np.stack([p[i] for p in path], axis=1) for i in range(3))
    return ShootingSolution(t, X, P, v, res, it)


@dataclass
class DeterministicReport:
    N: int
    K: int
    control_rms: float
    costate_rms: float
    shooting_residual: float
    shooting_iterations: int
    riccati: dict | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def deterministic_benchmark(spec: ProblemSpec, ensemble: ParticleEnsemble, K: int = 500,
                            options: SolverOptions | None = None, refine: int = REFINE) -> DeterministicReport:
    """Pathwise particle solve against the shooting oracle at ``refine * K`` RK4 steps.

    For a pure LQ spec the Riccati feedback closes the consistency triangle.
    """
    options = options or SolverOptions()
    grid = make_grid(0.0, spec.T, K)
    sol = solve(spec, ensemble, grid, sample_increments(grid, ensemble.size, spec.n, options.seed), options)
    sh = shooting_oracle(spec, ensemble, refine * K, P0_guess=sol.P[:, 0])
    w = ensemble.weights
    idx = refine * np.arange(K)
    dv = sol.v_hat[:, :K] - sh.v[:, idx]
    dp = sol.P[:, :K] - sh.P[:, idx]
    rms = lambda d: float(np.sqrt(w @ np.mean(np.sum(d * d, axis=2), axis=1)))  # noqa: E731
    rep = DeterministicReport(ensemble.size, K, rms(dv), rms(dp), sh.boundary_residual, sh.iterations)
    try:
        params = LqParams.from_spec(spec)
    except CapabilityError:
        return rep
    ric = riccati_oracle(params, K, refine)
    mpath = ric.mean_path(ensemble.mean(), grid.knots[:-1])
    vr = np.stack([ric.feedback(grid.knots[k], sh.X[:, refine * k], mpath[k]) for k in range(K)], axis=1)
    vs = np.stack([ric.feedback(grid.knots[k], sol.Y[:, k], mpath[k]) for k in range(K)], axis=1)
    rep.riccati = {"solver_vs_riccati": rms(sol.v_hat[:, :K] - vs), "shooting_vs_riccati": rms(sh.v[:, idx] - vr),
                   "solver_vs_shooting": rep.control_rms, "riccati_residual": ric.residual}
    return rep


# ---------------------------------------------------------------------------
# convergence study
# ---------------------------------------------------------------------------


def _rate(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ok = y > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def convergence_study(spec: ProblemSpec, N_list, K_list, seeds=(0, 1, 2), initial=None, oracle=None,
                      options: SolverOptions | None = None) -> dict:
    """Value error against ``oracle(ensemble)`` (or the finest-grid mean) over N at the finest K and over K at the largest N.

    ``initial(N, seed)`` builds the initial ensemble.  Rows report the
    seed-mean error (bias) and the seed-RMS error; rates are log-log slopes.
    """
    from .analysis import solution_value

    options = options or SolverOptions()
    if initial is None:
        initial = lambda N, seed: ParticleEnsemble.gaussian(N, [1.0] * spec.n, [0.5] * spec.n, seed)  # noqa: E731
    N_list, K_list = sorted(int(v) for v in N_list), sorted(int(v) for v in K_list)

    def run(N, K):
        vals = []
        for s in seeds:
            ens = initial(N, s)
            grid = make_grid(0.0, spec.T, K)
            sol = solve(spec, ens, grid, sample_increments(grid, N, spec.n, s),
                        replace(options, seed=s))
            vals.append((solution_value(sol), oracle(ens) if oracle else None))
        return vals

    cells = {}
    for K in K_list:
        cells[(N_list[-1], K)] = run(N_list[-1], K)
    for N in N_list[:-1]:
        cells[(N, K_list[-1])] = run(N, K_list[-1])
    if oracle is None:
        ref = float(np.mean([v for v, _ in cells[(N_list[-1], K_list[-1])]]))
    rows = []
    for (N, K), vals in sorted(cells.items()):
        err = np.array([v - (o if oracle else ref) for v, o in vals])
        rows.append({"N": N, "K": K, "bias": float(abs(err.mean())), "rms": float(np.sqrt(np.mean(err ** 2))),
                     "value": float(np.mean([v for v, _ in vals]))})
    krows = [r for r in rows if r["N"] == N_list[-1]]
    nrows = [r for r in rows if r["K"] == K_list[-1]]
    if oracle is None:
        krows, nrows = krows[:-1], nrows[:-1]
    return {"rows": rows, "rate_K": _rate([r["K"] for r in krows], [r["bias"] for r in krows]),
            "rate_N": _rate([r["N"] for r in nrows], [r["rms"] for r in nrows]), "reference": "oracle" if oracle else "finest"}
