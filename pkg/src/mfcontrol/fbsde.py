"""Particle solver for the maximum-principle FBSDE and its linearizations.

Discrete scheme (uniform Euler grid, ``m_k`` the live ensemble at knot k):

    Y_{k+1} = Y_k + f(Y_k, mbar_k, v_k) dt + S(Y_k, mbar_k, v_k) dw_k
    v_k     = argmin_v L(Y_k, m_k, v; Pc_k, Q_k)
    P_K     = D_x g_T + E-bar D_xi dg_T/dnu
    Pc_k    = Proj_k[P_{k+1}],   Q_k = Proj_k[P_{k+1} dw_k' / dt]
    P_k     = Pc_k + dt * (D_xH-part + averaged measure term)

``Proj_k`` is weighted least squares on a basis of the knot-k state.  The
control is driven by ``Pc_k`` (the regression estimate of E[P_{k+1} | Y_k]),
which makes ``P_0`` the exact gradient of the left-Riemann discrete cost.
When every diffusion coefficient vanishes, conditional expectations are
identities and the backward pass runs pathwise with ``Q = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BasisError, CapabilityError, DivergenceError, SolverError
from .hamiltonian import backward_driver, foc, minimize_control
from .measure import ParticleEnsemble
from .model import MeanFieldCost, ProblemSpec, diffusion_matrix
from .paths import BrownianBundle, TimeGrid

BASES = ("affine", "quadratic")


# ---------------------------------------------------------------------------
# regression bases
# ---------------------------------------------------------------------------


def _quad_pairs(n: int):
    return [(a, b) for a in range(n) for b in range(a, n)]


def features(basis: str, y: np.ndarray) -> np.ndarray:
    y = np.atleast_2d(y)
    one = np.ones((y.shape[0], 1))
    if basis == "affine":
        return np.hstack([one, y])
    if basis == "quadratic":
        quad = [y[:, a] * y[:, b] for a, b in _quad_pairs(y.shape[1])]
        return np.hstack([one, y, np.stack(quad, axis=1)])
    raise SolverError(f"unknown regression basis {basis!r}", known=list(BASES))


def feature_jacobian(basis: str, y: np.ndarray) -> np.ndarray:
    """d phi / d y, shape ``(N, nb, n)``."""
    N, n = y.shape
    J = [np.zeros((N, 1, n)), np.broadcast_to(np.eye(n), (N, n, n))]
    if basis == "quadratic":
        rows = []
        for a, b in _quad_pairs(n):
            r = np.zeros((N, n))
            r[:, a] += y[:, b]
            r[:, b] += y[:, a]
            rows.append(r)
        J.append(np.stack(rows, axis=1))
    return np.concatenate(J, axis=1)


def feature_hessian(basis: str, n: int) -> np.ndarray:
    """Constant second derivative of the features, shape ``(nb, n, n)``."""
    blocks = [np.zeros((1 + n, n, n))]
    if basis == "quadratic":
        Hq = []
        for a, b in _quad_pairs(n):
            h = np.zeros((n, n))
            h[a, b] += 1.0
            h[b, a] += 1.0
            Hq.append(h)
        blocks.append(np.stack(Hq))
    return np.concatenate(blocks, axis=0)


def basis_size(basis: str, n: int) -> int:
    return 1 + n + (len(_quad_pairs(n)) if basis == "quadratic" else 0)


# ---------------------------------------------------------------------------
# options, policy, solution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverOptions:
    picard_max: int = 400
    picard_tol: float = 1e-11
    damping: float = 0.5
    continuation_steps: int = 4
    basis: str = "affine"
    seed: int = 0
    foc_tol: float = 1e-10
    pathwise: bool | None = None
    auto_continuation: bool = True
    divergence_factor: float = 1e8
    max_bisections: int = 6
    acceleration: str = "anderson"
    anderson_memory: int = 5

    def __post_init__(self):
        if not self.picard_tol > 0:
            raise SolverError("picard_tol must be positive", picard_tol=self.picard_tol)
        if not 0 < self.damping <= 1:
            raise SolverError("damping must lie in (0, 1]", damping=self.damping)
        if self.basis not in BASES:
            raise SolverError(f"unknown regression basis {self.basis!r}", known=list(BASES))
        if self.acceleration not in ("anderson", "none"):
            raise SolverError(f"unknown acceleration {self.acceleration!r}", known=["anderson", "none"])


@dataclass
class PolicyRepresentation:
    """Per-knot maps y -> (Pc_k(y), Q_k(y)).

    Regression mode stores basis coefficients; pathwise mode (no noise)
    stores one costate per particle and knot and cannot be queried off the
    ensemble.
    """

    basis: str
    n: int
    K: int
    coef_p: np.ndarray | None = None
    coef_q: np.ndarray | None = None
    path_p: np.ndarray | None = None

    @classmethod
    def zero(cls, basis: str, n: int, K: int, pathwise: bool, N: int = 0) -> "PolicyRepresentation":
        if pathwise:
            return cls(basis, n, K, path_p=np.zeros((N, K, n)))
        nb = basis_size(basis, n)
        return cls(basis, n, K, np.zeros((K, nb, n)), np.zeros((K, nb, n, n)))

    @property
    def pathwise(self) -> bool:
        return self.path_p is not None

    def evaluate(self, k: int, y: np.ndarray):
        if self.pathwise:
            if y.shape[0] != self.path_p.shape[0]:
                raise CapabilityError("pathwise policies cannot be evaluated off the ensemble")
            return self.path_p[:, k], np.zeros((y.shape[0], self.n, self.n))
        Phi = features(self.basis, y)
        return Phi @ self.coef_p[k], np.einsum("ib,baj->iaj", Phi, self.coef_q[k])

    def blend(self, new: "PolicyRepresentation", theta: float) -> "PolicyRepresentation":
        if self.pathwise:
            return replace(self, path_p=self.path_p + theta * (new.path_p - self.path_p))
        return replace(self, coef_p=self.coef_p + theta * (new.coef_p - self.coef_p),
                       coef_q=self.coef_q + theta * (new.coef_q - self.coef_q))

    def to_vector(self) -> np.ndarray:
        if self.pathwise:
            return self.path_p.ravel().copy()
        return np.concatenate([self.coef_p.ravel(), self.coef_q.ravel()])

    def from_vector(self, vec: np.ndarray) -> "PolicyRepresentation":
        if self.pathwise:
            return replace(self, path_p=vec.reshape(self.path_p.shape).copy())
        a = self.coef_p.size
        return replace(self, coef_p=vec[:a].reshape(self.coef_p.shape).copy(),
                       coef_q=vec[a:].reshape(self.coef_q.shape).copy())

    def tail(self, k: int) -> "PolicyRepresentation":
        if self.pathwise:
            return replace(self, K=self.K - k, path_p=self.path_p[:, k:])
        return replace(self, K=self.K - k, coef_p=self.coef_p[k:], coef_q=self.coef_q[k:])


@dataclass
class FbsdeSolution:
    spec: ProblemSpec
    ensemble: ParticleEnsemble
    grid: TimeGrid
    bundle: BrownianBundle
    options: SolverOptions
    Y: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    P_ctrl: np.ndarray
    v_hat: np.ndarray
    means: np.ndarray
    policy: PolicyRepresentation
    fit: PolicyRepresentation
    diagnostics: dict = field(default_factory=dict)
    converged: bool = True
    rho: float = 1.0

    @property
    def weights(self) -> np.ndarray:
        return self.ensemble.weights

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def K(self) -> int:
        return self.grid.K

    @property
    def pathwise(self) -> bool:
        return self.policy.pathwise

    def ensemble_at(self, k: int) -> ParticleEnsemble:
        return ParticleEnsemble(self.Y[:, k], self.weights, self.ensemble.generation_seed)


def _is_deterministic(spec: ProblemSpec, grid: TimeGrid) -> bool:
    return spec.dynamics.is_deterministic(grid.knots)


def _rms(diff: np.ndarray, w: np.ndarray) -> float:
    return float(np.sqrt(w @ np.sum(diff.reshape(diff.shape[0], -1) ** 2, axis=1)))


# ---------------------------------------------------------------------------
# forward / backward passes
# ---------------------------------------------------------------------------


@dataclass
class ForwardResult:
    Y: np.ndarray
    means: np.ndarray
    v: np.ndarray
    pc: np.ndarray
    q: np.ndarray


def forward_pass(spec: ProblemSpec, ensemble: ParticleEnsemble, grid: TimeGrid, bundle: BrownianBundle,
                 policy: PolicyRepresentation, rho: float = 1.0, v_warm: np.ndarray | None = None,
                 foc_tol: float = 1e-10) -> ForwardResult:
    """Euler-Maruyama under the control the policy's costates induce."""
    N, n, K = ensemble.size, spec.n, grid.K
    w = ensemble.weights
    Y = np.empty((N, K + 1, n))
    v = np.empty((N, K, spec.d))
    pc = np.empty((N, K, n))
    q = np.empty((N, K, n, n))
    means = np.empty((K + 1, n))
    Y[:, 0] = ensemble.states
    dw = bundle.increments
    for k in range(K):
        y = Y[:, k]
        mk = ParticleEnsemble(y, w)
        mb = w @ y
        means[k] = mb
        s = grid.knots[k]
        dt = grid.knots[k + 1] - s
        pc[:, k], q[:, k] = policy.evaluate(k, y)
        warm = None if v_warm is None else v_warm[:, k]
        v[:, k] = minimize_control(spec, y, mk, s, rho * pc[:, k], rho * q[:, k], v0=warm, foc_tol=foc_tol)
        c = spec.coefficients(s)
        drift = c.f0 + y @ c.f1.T + mb @ c.f2.T + v[:, k] @ c.f3.T
        S = diffusion_matrix(spec, y, mb, v[:, k], s, c)
        Y[:, k + 1] = y + drift * dt + np.einsum("iaj,ij->ia", S, dw[:, k])
        if not np.all(np.isfinite(Y[:, k + 1])):
            raise DivergenceError("forward pass produced non-finite states", step=k)
    means[K] = w @ Y[:, K]
    return ForwardResult(Y, means, v, pc, q)


@dataclass
class BackwardResult:
    P: np.ndarray
    Pc: np.ndarray
    Q: np.ndarray
    policy: PolicyRepresentation
    drivers: np.ndarray


def terminal_costate(spec: ProblemSpec, m: ParticleEnsemble, x_eval: np.ndarray) -> np.ndarray:
    return spec.cost.gT_x(x_eval, m) + spec.cost.mean_term_T(m, x_eval)


def _fit(Phi: np.ndarray, target: np.ndarray, sw: np.ndarray):
    A = Phi * sw[:, None]
    coef, _, rank, sv = np.linalg.lstsq(A, target * sw[:, None], rcond=None)
    if rank < Phi.shape[1]:
        raise BasisError("rank-deficient regression design; use a smaller basis or more particles",
                         rank=int(rank), basis_size=int(Phi.shape[1]))
    return coef


def backward_pass(spec: ProblemSpec, fw: ForwardResult, grid: TimeGrid, bundle: BrownianBundle,
                  weights: np.ndarray, basis: str = "affine", pathwise: bool = False,
                  stochastic: bool = True) -> BackwardResult:
    """Regression (or pathwise) backward induction for (P, Q)."""
    Y, v = fw.Y, fw.v
    N, Kp1, n = Y.shape
    K = Kp1 - 1
    w = weights
    sw = np.sqrt(w)
    dw = bundle.increments
    P = np.empty((N, K + 1, n))
    Pc = np.empty((N, K, n))
    Q = np.zeros((N, K, n, n))
    D = np.empty((N, K, n))
    mK = ParticleEnsemble(Y[:, K], w)
    P[:, K] = terminal_costate(spec, mK, Y[:, K])
    if pathwise:
        policy = PolicyRepresentation(basis, n, K, path_p=np.empty((N, K, n)))
    else:
        nb = basis_size(basis, n)
        policy = PolicyRepresentation(basis, n, K, np.zeros((K, nb, n)), np.zeros((K, nb, n, n)))
    for k in range(K - 1, -1, -1):
        s = grid.knots[k]
        dt = grid.knots[k + 1] - s
        y = Y[:, k]
        if pathwise:
            Pc[:, k] = P[:, k + 1]
            policy.path_p[:, k] = Pc[:, k]
        else:
            Phi = features(basis, y)
            if stochastic:
                tq = (P[:, k + 1, :, None] * dw[:, k, None, :] / dt).reshape(N, n * n)
                coef = _fit(Phi, np.hstack([P[:, k + 1], tq]), sw)
                policy.coef_p[k] = coef[:, :n]
                policy.coef_q[k] = coef[:, n:].reshape(-1, n, n)
                Q[:, k] = np.einsum("ib,baj->iaj", Phi, policy.coef_q[k])
            else:
                policy.coef_p[k] = _fit(Phi, P[:, k + 1], sw)
            Pc[:, k] = Phi @ policy.coef_p[k]
        mk = ParticleEnsemble(y, w)
        D[:, k] = backward_driver(spec, mk, v[:, k], Pc[:, k], Q[:, k], s)
        P[:, k] = Pc[:, k] + dt * D[:, k]
    if not np.all(np.isfinite(P)):
        raise DivergenceError("backward pass produced non-finite costates")
    return BackwardResult(P, Pc, Q, policy, D)


def _policy_change(old: PolicyRepresentation, new: PolicyRepresentation, Y: np.ndarray, w: np.ndarray) -> float:
    K = old.K
    worst = 0.0
    for k in range(K):
        po, qo = old.evaluate(k, Y[:, k])
        pn, qn = new.evaluate(k, Y[:, k])
        worst = max(worst, _rms(pn - po, w), _rms(qn - qo, w))
    return worst


# ---------------------------------------------------------------------------
# Picard and continuation
# ---------------------------------------------------------------------------


class AndersonMixer:
    """Type-II Anderson mixing of a fixed-point map with damping ``theta``.

    Falls back to the plain damped step whenever the least-squares
    combination is ill-conditioned or the residual grew.
    """

    def __init__(self, memory: int, theta: float):
        self.m, self.theta = int(memory), float(theta)
        self.X: list[np.ndarray] = []
        self.F: list[np.ndarray] = []

    def step(self, x: np.ndarray, gx: np.ndarray) -> np.ndarray:
        f = gx - x
        self.X.append(x)
        self.F.append(f)
        if len(self.X) > self.m + 1:
            self.X.pop(0)
            self.F.pop(0)
        plain = x + self.theta * f
        if self.m == 0 or len(self.X) < 2:
            return plain
        if np.linalg.norm(f) > 2.0 * np.linalg.norm(self.F[-2]):
            self.X, self.F = [x], [f]
            return plain
        dF = np.stack([self.F[i + 1] - self.F[i] for i in range(len(self.F) - 1)], axis=1)
        dX = np.stack([self.X[i + 1] - self.X[i] for i in range(len(self.X) - 1)], axis=1)
        gamma, *_ = np.linalg.lstsq(dF, f, rcond=1e-10)
        if not np.all(np.isfinite(gamma)) or np.max(np.abs(gamma)) > 1e6:
            self.X, self.F = [x], [f]
            return plain
        return x + self.theta * f - (dX + self.theta * dF) @ gamma


def _resolve_mode(spec: ProblemSpec, grid: TimeGrid, options: SolverOptions):
    det = _is_deterministic(spec, grid)
    pathwise = det if options.pathwise is None else bool(options.pathwise)
    return pathwise, not det


def picard_solve(spec: ProblemSpec, ensemble: ParticleEnsemble, grid: TimeGrid, bundle: BrownianBundle,
                 options: SolverOptions = SolverOptions(), initial_policy: PolicyRepresentation | None = None,
                 rho: float = 1.0, damping: float | None = None, raise_on_failure: bool = True) -> FbsdeSolution:
    """Damped fixed-point iteration on the policy until the sup-knot RMS change drops below tol."""
    if bundle.increments.shape[:2] != (ensemble.size, grid.K):
        raise SolverError("Brownian bundle does not match ensemble and grid",
                          bundle=list(bundle.increments.shape), N=ensemble.size, K=grid.K)
    pathwise, stochastic = _resolve_mode(spec, grid, options)
    theta = options.damping if damping is None else damping
    if rho == 0.0:
        theta = 1.0
    w = ensemble.weights
    policy = initial_policy or PolicyRepresentation.zero(options.basis, spec.n, grid.K, pathwise, ensemble.size)
    deltas: list[float] = []
    converged = False
    v_warm = None
    fw = bw = None
    mixer = AndersonMixer(options.anderson_memory if options.acceleration == "anderson" else 0, theta)
    for it in range(1, options.picard_max + 1):
        try:
            fw = forward_pass(spec, ensemble, grid, bundle, policy, rho, v_warm, options.foc_tol)
            bw = backward_pass(spec, fw, grid, bundle, w, options.basis, pathwise, stochastic)
        except DivergenceError:
            deltas.append(float("inf"))
            break
        v_warm = fw.v
        delta = _policy_change(policy, bw.policy, fw.Y, w)
        deltas.append(delta)
        if delta < options.picard_tol:
            converged = True
            break
        if not np.isfinite(delta) or delta > options.divergence_factor * max(deltas[0], 1.0):
            break
        policy = policy.from_vector(mixer.step(policy.to_vector(), bw.policy.to_vector()))
    if not converged and raise_on_failure:
        raise SolverError("Picard iteration did not converge", iterations=len(deltas),
                          deltas=deltas[-10:], rho=rho, damping=theta)
    if fw is None or bw is None:
        raise SolverError("Picard iteration failed before the first sweep", deltas=deltas)
    Q = np.zeros((ensemble.size, grid.K + 1, spec.n, spec.n))
    Q[:, :-1] = fw.q
    return FbsdeSolution(spec, ensemble, grid, bundle, options, fw.Y, bw.P, Q, fw.pc, fw.v, fw.means,
                         policy, bw.policy,
                         {"picard_iterations": len(deltas), "deltas": deltas, "damping": theta,
                          "pathwise": pathwise},
                         converged, rho)


def continuation_solve(spec: ProblemSpec, ensemble: ParticleEnsemble, grid: TimeGrid, bundle: BrownianBundle,
                       options: SolverOptions = SolverOptions(), schedule=None) -> FbsdeSolution:
    """Homotopy in the costate-to-control coupling rho from 0 (decoupled) to 1.

    At stage rho the forward control is v(Y, m; rho Pc, rho Q).  A stage
    that fails is retried from the last converged rho with half the step
    and half the damping, up to ``max_bisections`` times.
    """
    if schedule is None:
        M = max(int(options.continuation_steps), 0)
        schedule = [1.0] if M == 0 else list(np.linspace(0.0, 1.0, M + 1))
    targets = [float(r) for r in schedule]
    if targets[-1] != 1.0:
        targets.append(1.0)
    policy = None
    done = None
    depth = 0
    theta = options.damping
    stages = []
    sol = None
    while targets:
        r = targets[0]
        sol = picard_solve(spec, ensemble, grid, bundle, options, policy, rho=r, damping=theta,
                           raise_on_failure=False)
        stages.append({"rho": r, "converged": sol.converged, "iterations": sol.diagnostics["picard_iterations"],
                       "damping": sol.diagnostics["damping"]})
        if sol.converged:
            policy, done = sol.policy, r
            targets.pop(0)
            continue
        if done is None or depth >= options.max_bisections:
            raise SolverError("continuation stage failed", stage=len(stages) - 1, rho=r, stages=stages)
        depth += 1
        theta = max(theta * 0.5, 1.0 / 64)
        targets.insert(0, 0.5 * (done + r))
    sol.diagnostics["continuation"] = stages
    return sol


def solve(spec: ProblemSpec, ensemble: ParticleEnsemble, grid: TimeGrid, bundle: BrownianBundle,
          options: SolverOptions = SolverOptions(), initial_policy: PolicyRepresentation | None = None) -> FbsdeSolution:
    """Picard first, continuation on failure when the options allow it."""
    sol = picard_solve(spec, ensemble, grid, bundle, options, initial_policy, raise_on_failure=False)
    if sol.converged or not options.auto_continuation:
        if not sol.converged:
            raise SolverError("Picard iteration did not converge", deltas=sol.diagnostics["deltas"][-10:])
        return sol
    return continuation_solve(spec, ensemble, grid, bundle, options)


# ---------------------------------------------------------------------------
# evaluations off the stored trajectories
# ---------------------------------------------------------------------------


def costate_at(sol: FbsdeSolution, k: int, y: np.ndarray) -> dict:
    """Pc, Q, control and P at arbitrary points ``y`` of knot ``k`` (tagged particles)."""
    spec = sol.spec
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if k == sol.K:
        mK = sol.ensemble_at(sol.K)
        return {"P": terminal_costate(spec, mK, y)}
    mk = sol.ensemble_at(k)
    s = sol.grid.knots[k]
    dt = sol.grid.knots[k + 1] - s
    pc, q = sol.fit.evaluate(k, y)
    v = minimize_control(spec, y, mk, s, pc, q, foc_tol=sol.options.foc_tol)
    D = backward_driver(spec, mk, sol.v_hat[:, k], sol.fit.evaluate(k, sol.Y[:, k])[0],
                        sol.fit.evaluate(k, sol.Y[:, k])[1], s, y, v, pc, q)
    return {"Pc": pc, "Q": q, "v": v, "P": pc + dt * D, "driver": D}


def simulate_tagged(sol: FbsdeSolution, x0: np.ndarray, bundle: BrownianBundle) -> dict:
    """Paths of tagged particles that follow the solved feedback without moving the ensemble."""
    spec = sol.spec
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    M, n, K = x0.shape[0], spec.n, sol.K
    Y = np.empty((M, K + 1, n))
    v = np.empty((M, K, spec.d))
    pc = np.empty((M, K, n))
    q = np.empty((M, K, n, n))
    P = np.empty((M, K + 1, n))
    Y[:, 0] = x0
    for k in range(K):
        mk = sol.ensemble_at(k)
        s = sol.grid.knots[k]
        dt = sol.grid.knots[k + 1] - s
        pc[:, k], q[:, k] = sol.fit.evaluate(k, Y[:, k])
        v[:, k] = minimize_control(spec, Y[:, k], mk, s, pc[:, k], q[:, k], foc_tol=sol.options.foc_tol)
        c = spec.coefficients(s)
        mb = sol.means[k]
        drift = c.f0 + Y[:, k] @ c.f1.T + mb @ c.f2.T + v[:, k] @ c.f3.T
        S = diffusion_matrix(spec, Y[:, k], mb, v[:, k], s, c)
        Y[:, k + 1] = Y[:, k] + drift * dt + np.einsum("iaj,ij->ia", S, bundle.increments[:, k])
    P[:, K] = terminal_costate(spec, sol.ensemble_at(K), Y[:, K])
    bpc, bq = sol.P_ctrl, sol.Q
    for k in range(K):
        mk = sol.ensemble_at(k)
        s = sol.grid.knots[k]
        dt = sol.grid.knots[k + 1] - s
        D = backward_driver(spec, mk, sol.v_hat[:, k], bpc[:, k], bq[:, k], s, Y[:, k], v[:, k], pc[:, k], q[:, k])
        P[:, k] = pc[:, k] + dt * D
    return {"Y": Y, "v": v, "Pc": pc, "Q": q, "P": P}


# ---------------------------------------------------------------------------
# a posteriori residuals
# ---------------------------------------------------------------------------


def residuals(spec: ProblemSpec, solution: FbsdeSolution, bundle: BrownianBundle | None = None) -> dict:
    sol = solution
    bundle = bundle or sol.bundle
    w = sol.weights
    K = sol.K
    # (a) forward reconstruction under the stored controls
    Y = np.empty_like(sol.Y)
    Y[:, 0] = sol.Y[:, 0]
    for k in range(K):
        s = sol.grid.knots[k]
        dt = sol.grid.knots[k + 1] - s
        c = spec.coefficients(s)
        mb = w @ Y[:, k]
        drift = c.f0 + Y[:, k] @ c.f1.T + mb @ c.f2.T + sol.v_hat[:, k] @ c.f3.T
        S = diffusion_matrix(spec, Y[:, k], mb, sol.v_hat[:, k], s, c)
        Y[:, k + 1] = Y[:, k] + drift * dt + np.einsum("iaj,ij->ia", S, bundle.increments[:, k])
    fwd = float(np.max(np.abs(Y - sol.Y)))
    back, mart, focr = [], [], 0.0
    for k in range(K):
        s = sol.grid.knots[k]
        dt = sol.grid.knots[k + 1] - s
        mk = sol.ensemble_at(k)
        Qk = sol.Q[:, k]
        D = backward_driver(spec, mk, sol.v_hat[:, k], sol.P_ctrl[:, k], Qk, s)
        target = sol.P[:, k + 1] + D * dt
        if sol.pathwise:
            proj = target
        else:
            Phi = features(sol.options.basis, sol.Y[:, k])
            proj = Phi @ _fit(Phi, target, np.sqrt(w))
        back.append(_rms(sol.P[:, k] - proj, w))
        inc = sol.P[:, k + 1] - sol.P[:, k] + D * dt - np.einsum("iaj,ij->ia", Qk, bundle.increments[:, k])
        mart.append(float(np.linalg.norm(w @ inc)))
        F = foc(spec, sol.Y[:, k], mk, sol.v_hat[:, k], s, sol.rho * sol.P_ctrl[:, k], sol.rho * Qk)
        focr = max(focr, float(np.max(np.linalg.norm(F, axis=1))))
    return {"forward_reconstruction": fwd,
            "backward_rms": float(np.sqrt(np.mean(np.square(back)))),
            "backward_max": float(np.max(back)),
            "martingale_rms": float(np.sqrt(np.mean(np.square(mart)))),
            "foc_max": focr}


# ---------------------------------------------------------------------------
# monotonicity certificate
# ---------------------------------------------------------------------------


def _lifted_coefficients(spec: ProblemSpec, X, P, Q, w, s):
    m = ParticleEnsemble(X, w)
    v = minimize_control(spec, X, m, s, P, Q)
    c = spec.coefficients(s)
    mb = w @ X
    F = c.f0 + X @ c.f1.T + mb @ c.f2.T + v @ c.f3.T
    A = diffusion_matrix(spec, X, mb, v, s, c)
    G = -backward_driver(spec, m, v, P, Q, s)
    return F, A, G, v


def monotonicity_constants(spec: ProblemSpec, samples: int = 2000, seed: int = 0, scale: float = 2.0) -> dict:
    """Lambda and alpha of the monotonicity inequality from sampled Hessian bounds.

    With A bounding the lifted state Hessian of the cost and B its
    state-control cross block, Young's inequality gives Lambda = lam and
    alpha = A + B^2 / lam.
    """
    cost = spec.cost
    if not isinstance(cost, MeanFieldCost):
        raise CapabilityError("monotonicity constants need a mean-field cost with Hessian blocks")
    rng = np.random.Generator(np.random.Philox(key=(int(seed) << 64) | 17))
    x = scale * rng.standard_normal((samples, spec.n))
    mb = scale * rng.standard_normal((samples, spec.n))
    v = scale * rng.standard_normal((samples, spec.d))
    A = B = 0.0
    for s in np.linspace(0.0, spec.T, 5):
        b = cost.blocks(x, mb, v, s)
        nrm = lambda M: np.linalg.norm(M, ord=2, axis=(1, 2))
        A = max(A, float(np.max(nrm(b["xx"]) + nrm(b["xm"]) + nrm(b["mx"]) + nrm(b["mm"]))))
        B = max(B, float(np.max(nrm(b["xv"]) + nrm(b["mv"]))))
    lam = cost.lam
    return {"Lambda": lam, "alpha": A + B * B / lam, "A": A, "B": B}


def monotonicity_certificate(spec: ProblemSpec, tuples: int = 10_000, N: int = 8, seed: int = 0,
                             scale: float = 1.0, constants: dict | None = None) -> dict:
    """Sampled check of the monotonicity inequality with beta = v-hat."""
    const = constants or monotonicity_constants(spec, seed=seed)
    lam, alpha = const["Lambda"], const["alpha"]
    rng = np.random.Generator(np.random.Philox(key=(int(seed) << 64) | 19))
    n = spec.n
    w = np.full(N, 1.0 / N)
    worst = -np.inf
    worst_gap = None
    for t in range(tuples):
        s = float(rng.uniform(0.0, spec.T))
        X, X2 = scale * rng.standard_normal((2, N, n))
        P, P2 = scale * rng.standard_normal((2, N, n))
        Q, Q2 = scale * rng.standard_normal((2, N, n, n))
        F, A, G, v = _lifted_coefficients(spec, X, P, Q, w, s)
        F2, A2, G2, v2 = _lifted_coefficients(spec, X2, P2, Q2, w, s)
        lhs = (w @ np.sum((G2 - G) * (X2 - X), axis=1) + w @ np.sum((F2 - F) * (P2 - P), axis=1)
               + w @ np.sum((A2 - A) * (Q2 - Q), axis=(1, 2)))
        rhs = (-lam * (w @ np.sum((v2 - v) ** 2, axis=1))
               + alpha * (w @ np.sum((X2 - X) ** 2, axis=1) + w @ np.sum((P2 - P) ** 2, axis=1)
                          + w @ np.sum((Q2 - Q) ** 2, axis=(1, 2))))
        gap = lhs - rhs
        if gap > worst:
            worst, worst_gap = gap, {"lhs": float(lhs), "rhs": float(rhs), "s": s, "index": t}
    tol = 1e-9
    return {"passed": bool(worst <= tol), "max_violation": float(worst), "worst": worst_gap,
            "tuples": tuples, **const}


# ---------------------------------------------------------------------------
# linear FBSDEs (Jacobian and measure-derivative flows)
# ---------------------------------------------------------------------------


@dataclass
class LinearDrivers:
    """Initial data, coupling switches and sources of a linearized system.

    Shapes carry a trailing column axis ``C`` (one column per direction).
    ``coupling`` switches on the ensemble-mean feedback of the flow itself;
    ``coef_change`` lets the regression coefficients respond to the flow
    (a perturbation of the ensemble) instead of staying frozen (tagged
    particles).
    """

    dy0: np.ndarray
    coupling: bool
    coef_change: bool
    s_m: np.ndarray | None = None
    s_f: np.ndarray | None = None
    s_v: np.ndarray | None = None
    s_b: np.ndarray | None = None
    s_T: np.ndarray | None = None
    s_pc: np.ndarray | None = None
    s_q: np.ndarray | None = None
    s_dbeta_p: np.ndarray | None = None
    s_dbeta_q: np.ndarray | None = None


@dataclass
class LinearFlowSolution:
    """Flow trajectories with a trailing column axis ``C``."""

    DY: np.ndarray
    DP: np.ndarray
    DQ: np.ndarray
    Dv: np.ndarray
    DPc: np.ndarray
    Dm: np.ndarray
    dbeta_p: np.ndarray | None
    dbeta_q: np.ndarray | None
    kind: str = "gateaux"
    anchor: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict)

    def column(self, c: int = 0) -> "LinearFlowSolution":
        pick = lambda a: None if a is None else a[..., c:c + 1]
        return replace(self, DY=pick(self.DY), DP=pick(self.DP), DQ=pick(self.DQ), Dv=pick(self.Dv),
                       DPc=pick(self.DPc), Dm=pick(self.Dm), dbeta_p=pick(self.dbeta_p),
                       dbeta_q=pick(self.dbeta_q))


class Linearization:
    """Coefficients of the discrete scheme frozen along a set of paths.

    ``paths`` are either the ensemble itself or tagged particles that follow
    the ensemble's feedback; means and regression fits always come from the
    base solution.
    """

    def __init__(self, base: FbsdeSolution, paths: dict | None = None, dw: np.ndarray | None = None):
        spec = base.spec
        if not isinstance(spec.cost, MeanFieldCost):
            raise CapabilityError("flows need a mean-only cost with Hessian callbacks",
                                  cost=spec.cost.name, mode=spec.cost.mode)
        self.base = base
        self.spec = spec
        self.own = paths is None
        if paths is None:
            paths = {"Y": base.Y, "v": base.v_hat, "Pc": base.P_ctrl, "Q": base.Q[:, :-1], "P": base.P}
            dw = base.bundle.increments
            self.w = base.weights
        else:
            self.w = np.full(paths["Y"].shape[0], 1.0 / paths["Y"].shape[0])
        self.paths = paths
        self.dw = dw
        self.pathwise = base.pathwise
        self.stochastic = not _is_deterministic(spec, base.grid)
        Y, v = paths["Y"], paths["v"]
        M, Kp1, n = Y.shape
        K = Kp1 - 1
        self.M, self.K, self.n, self.d = M, K, n, spec.d
        cost = spec.cost
        self.coef = [spec.coefficients(s) for s in base.grid.knots]
        self.blk = []
        self.donor = []
        for k in range(K):
            s = base.grid.knots[k]
            mb = base.means[k]
            b = cost.blocks(Y[:, k], mb, v[:, k], s)
            b["vv_inv"] = np.linalg.inv(b["vv"])
            self.blk.append(b)
            bb = cost.blocks(base.Y[:, k], mb, base.v_hat[:, k], s)
            wb = base.weights
            self.donor.append({"mx": bb["mx"], "mv": bb["mv"], "mm_avg": np.einsum("i,iab->ab", wb, bb["mm"])})
        self.blkT = cost.blocksT(Y[:, K], base.means[K])
        bT = cost.blocksT(base.Y[:, K], base.means[K])
        self.donorT = {"mx": bT["mx"], "mm_avg": np.einsum("i,iab->ab", base.weights, bT["mm"])}
        # regression data of the base fit (at the base particles)
        self.basis = base.options.basis
        if not self.pathwise:
            self.reg = []
            sw = base.weights
            for k in range(K):
                dt = base.grid.knots[k + 1] - base.grid.knots[k]
                Phi = features(self.basis, base.Y[:, k])
                A = np.einsum("i,ib,ic->bc", sw, Phi, Phi)
                bp, bq = base.fit.coef_p[k], base.fit.coef_q[k]
                rp = base.P[:, k + 1] - Phi @ bp
                tq = base.P[:, k + 1, :, None] * base.bundle.increments[:, k, None, :] / dt
                rq = tq - np.einsum("ib,baj->iaj", Phi, bq) if self.stochastic else np.zeros_like(tq)
                self.reg.append({"Phi": Phi, "J": feature_jacobian(self.basis, base.Y[:, k]),
                                 "Ainv": np.linalg.inv(A), "bp": bp, "bq": bq, "rp": rp, "rq": rq})
            self.Jown = [feature_jacobian(self.basis, Y[:, k]) for k in range(K)]
            self.Phiown = [features(self.basis, Y[:, k]) for k in range(K)]

    # ------------------------------------------------------------------
    def solve(self, drv: LinearDrivers, options: SolverOptions | None = None) -> LinearFlowSolution:
        opts = options or self.base.options
        base = self.base
        M, K, n, d = self.M, self.K, self.n, self.d
        C = drv.dy0.shape[-1]
        w = self.w
        knots = base.grid.knots
        coupling = bool(drv.coupling)
        if coupling and not self.own:
            raise CapabilityError("coupled flows must run on the ensemble itself")
        nb = basis_size(self.basis, n)
        get = lambda a, k: 0.0 if a is None else a[k]
        pathwise = self.pathwise
        # Picard state: coefficient changes (regression) or pathwise DPc
        if pathwise:
            DPc_path = np.zeros((M, K, n, C))
        dbp = np.zeros((K, nb, n, C))
        dbq = np.zeros((K, nb, n, n, C))
        need_picard = pathwise or drv.coef_change
        theta = opts.damping
        deltas = []
        DY = np.empty((M, K + 1, n, C))
        Dv = np.empty((M, K, d, C))
        DPc = np.empty((M, K, n, C))
        DQ = np.zeros((M, K + 1, n, n, C))
        DP = np.empty((M, K + 1, n, C))
        Dm = np.zeros((K + 1, n, C))
        for it in range(1, opts.picard_max + 1):
            # forward sweep
            DY[:, 0] = drv.dy0
            for k in range(K):
                c = self.coef[k]
                b = self.blk[k]
                dt = knots[k + 1] - knots[k]
                dy = DY[:, k]
                Dm[k] = (np.einsum("i,iac->ac", w, dy) if coupling else 0.0) + get(drv.s_m, k)
                if pathwise:
                    DPc[:, k] = DPc_path[:, k]
                    dq = np.zeros((M, n, n, C))
                else:
                    r = self.reg[k]
                    dphi = np.einsum("ibn,inc->ibc", self.Jown[k], dy)
                    dpc = np.einsum("ibc,ba->iac", dphi, r["bp"]) + np.einsum("ib,bac->iac", self.Phiown[k], dbp[k])
                    dq = np.einsum("ibc,baj->iajc", dphi, r["bq"]) + np.einsum("ib,bajc->iajc", self.Phiown[k], dbq[k])
                    DPc[:, k] = dpc + get(drv.s_pc, k)
                    dq = dq + get(drv.s_q, k)
                DQ[:, k] = dq
                rhs = (np.einsum("iva,iac->ivc", b["vx"], dy) + np.einsum("iva,ac->ivc", b["vm"], Dm[k])
                       + np.einsum("av,iac->ivc", c.f3, DPc[:, k]) + np.einsum("jav,iajc->ivc", c.s3, dq)
                       + get(drv.s_v, k))
                Dv[:, k] = -np.einsum("iuv,ivc->iuc", b["vv_inv"], rhs)
                drift = (np.einsum("ab,ibc->iac", c.f1, dy) + np.einsum("ab,bc->ac", c.f2, Dm[k])[None]
                         + np.einsum("av,ivc->iac", c.f3, Dv[:, k]) + get(drv.s_f, k))
                noise = (np.einsum("jab,ibc->iajc", c.s1, dy) + np.einsum("jab,bc->ajc", c.s2, Dm[k])[None]
                         + np.einsum("jav,ivc->iajc", c.s3, Dv[:, k]))
                DY[:, k + 1] = dy + drift * dt + np.einsum("iajc,ij->iac", noise, self.dw[:, k])
            Dm[K] = (np.einsum("i,iac->ac", w, DY[:, K]) if coupling else 0.0) + get(drv.s_m, K)
            # backward sweep
            bT, dT = self.blkT, self.donorT
            DP[:, K] = (np.einsum("iab,ibc->iac", bT["xx"], DY[:, K]) + np.einsum("iab,bc->iac", bT["xm"], Dm[K])
                        + np.einsum("ab,bc->ac", dT["mm_avg"], Dm[K])[None])
            if coupling:
                DP[:, K] += np.einsum("i,iab,ibc->ac", w, dT["mx"], DY[:, K])[None]
            if drv.s_T is not None:
                DP[:, K] += drv.s_T
            new_dbp = np.zeros_like(dbp)
            new_dbq = np.zeros_like(dbq)
            if pathwise:
                new_path = np.empty_like(DPc_path)
            for k in range(K - 1, -1, -1):
                c = self.coef[k]
                b = self.blk[k]
                dn = self.donor[k]
                dt = knots[k + 1] - knots[k]
                dy = DY[:, k]
                if pathwise:
                    dpc_new = DP[:, k + 1]
                    dq_new = np.zeros((M, n, n, C))
                    new_path[:, k] = dpc_new
                else:
                    r = self.reg[k]
                    dphi = np.einsum("ibn,inc->ibc", self.Jown[k], dy)
                    own_p = np.einsum("ibc,ba->iac", dphi, r["bp"])
                    own_q = np.einsum("ibc,baj->iajc", dphi, r["bq"])
                    if drv.coef_change:
                        Phi, wb = r["Phi"], base.weights
                        ydp = DP[:, k + 1]
                        m1 = np.einsum("i,ibc,ia->bac", wb, dphi, r["rp"])
                        m2 = np.einsum("i,ib,iac->bac", wb, Phi, ydp - own_p)
                        new_dbp[k] = np.einsum("gb,bac->gac", r["Ainv"], m1 + m2)
                        if self.stochastic:
                            tq = ydp[:, :, None, :] * self.dw[:, k, None, :, None] / dt
                            m1q = np.einsum("i,ibc,iaj->bajc", wb, dphi, r["rq"])
                            m2q = np.einsum("i,ib,iajc->bajc", wb, Phi, tq - own_q)
                            new_dbq[k] = np.einsum("gb,bajc->gajc", r["Ainv"], m1q + m2q)
                    if drv.s_dbeta_p is not None:
                        new_dbp[k] = new_dbp[k] + drv.s_dbeta_p[k]
                    if drv.s_dbeta_q is not None:
                        new_dbq[k] = new_dbq[k] + drv.s_dbeta_q[k]
                    Phio = self.Phiown[k]
                    dpc_new = own_p + np.einsum("ib,bac->iac", Phio, new_dbp[k]) + get(drv.s_pc, k)
                    dq_new = own_q + np.einsum("ib,bajc->iajc", Phio, new_dbq[k]) + get(drv.s_q, k)
                drv_k = (np.einsum("ba,ibc->iac", c.f1, dpc_new) + np.einsum("jba,ibjc->iac", c.s1, dq_new)
                         + np.einsum("iab,ibc->iac", b["xx"], dy) + np.einsum("iab,bc->iac", b["xm"], Dm[k])
                         + np.einsum("iav,ivc->iac", b["xv"], Dv[:, k])
                         + np.einsum("ab,bc->ac", dn["mm_avg"], Dm[k])[None])
                if coupling:
                    don = (np.einsum("ba,i,ibc->ac", c.f2, w, dpc_new)
                           + np.einsum("jba,i,ibjc->ac", c.s2, w, dq_new)
                           + np.einsum("i,iab,ibc->ac", w, dn["mx"], dy)
                           + np.einsum("i,iav,ivc->ac", w, dn["mv"], Dv[:, k]))
                    drv_k = drv_k + don[None]
                drv_k = drv_k + get(drv.s_b, k)
                DP[:, k] = dpc_new + dt * drv_k
                if pathwise:
                    DQ[:, k] = dq_new
            if not need_picard:
                deltas.append(0.0)
                break
            if pathwise:
                delta = max(_rms(new_path[:, k] - DPc_path[:, k], w) for k in range(K))
                DPc_path = DPc_path + theta * (new_path - DPc_path)
            else:
                delta = 0.0
                for k in range(K):
                    Phio = self.Phiown[k]
                    delta = max(delta, _rms(np.einsum("ib,bac->iac", Phio, new_dbp[k] - dbp[k]), w),
                                _rms(np.einsum("ib,bajc->iajc", Phio, new_dbq[k] - dbq[k]), w))
                dbp = dbp + theta * (new_dbp - dbp)
                dbq = dbq + theta * (new_dbq - dbq)
            deltas.append(delta)
            if not np.isfinite(delta):
                break
            if delta < opts.picard_tol:
                if not pathwise:
                    dbp, dbq = new_dbp, new_dbq
                break
        else:
            raise SolverError("linear FBSDE Picard iteration did not converge", deltas=deltas[-10:])
        if not np.isfinite(deltas[-1]):
            raise DivergenceError("linear FBSDE diverged", deltas=deltas[-10:])
        return LinearFlowSolution(DY, DP, DQ, Dv, DPc, Dm, None if pathwise else dbp, None if pathwise else dbq,
                                  diagnostics={"picard_iterations": len(deltas), "deltas": deltas})


def solve_linear_fbsde(drivers: LinearDrivers, base: FbsdeSolution, options: SolverOptions | None = None,
                       paths: dict | None = None, dw: np.ndarray | None = None,
                       linearization: Linearization | None = None) -> LinearFlowSolution:
    """Solve the linearization of the discrete scheme around ``base``."""
    lin = linearization or Linearization(base, paths, dw)
    return lin.solve(drivers, options)
