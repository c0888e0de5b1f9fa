"""Value function, Bellman residual and the master field.

Every quantity is read off particle solves:

* ``V`` is the left-Riemann cost of the converged particle system;
* its gradient field is ``P`` at the first knot and its Hessian action the
  Gateaux flow;
* time derivatives are one-sided differences with step ``T / 200``;
* the master field ``U(x, m, t)`` is a Dirac difference quotient of ``V``
  (two weights, linear extrapolation) shifted by the ensemble average of
  the tagged-particle cost, which fixes the additive constant that a
  mixture quotient cannot see.  Path costs entering the master field carry
  the zero-mean control variate ``sum_k Pc_k . sigma dW_k``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, SpecificationError
from .fbsde import (FbsdeSolution, SolverOptions, costate_at, simulate_tagged, solve)
from .flows import (gateaux_flow, measure_flow, measure_spatial_flow, spatial_jacobian, tagged_bundle)
from .hamiltonian import backward_driver, dH_dnu, hamiltonian, minimize_control
from .measure import ParticleEnsemble, perturb_dirac
from .model import MeanFieldCost, ProblemSpec, diffusion_matrix
from .paths import make_grid, sample_increments

DIRAC_EPS = (0.02, 0.01)
TIME_STEP_FRACTION = 1.0 / 200


@dataclass
class SolveContext:
    """Discretization shared by all sub-solves of a report."""

    K: int = 50
    seed: int = 0
    options: SolverOptions = field(default_factory=SolverOptions)
    copies: int = 64
    master_copies: int = 1024
    jobs: int = 1

    def grid(self, spec: ProblemSpec, t0: float):
        return make_grid(t0, spec.T, self.K)

    def bundle(self, spec: ProblemSpec, grid, N: int):
        return sample_increments(grid, N, spec.n, self.seed, jobs=self.jobs)

    def solve(self, spec: ProblemSpec, ensemble: ParticleEnsemble, t0: float, initial_policy=None,
              grid=None) -> FbsdeSolution:
        grid = grid or self.grid(spec, t0)
        return solve(spec, ensemble, grid, self.bundle(spec, grid, ensemble.size), self.options, initial_policy)


def _require_b4(spec: ProblemSpec, t0: float) -> None:
    if not spec.dynamics.is_control_free(np.linspace(t0, spec.T, 11)):
        raise SpecificationError("this layer needs control-free diffusion")


# ---------------------------------------------------------------------------
# value and its derivatives
# ---------------------------------------------------------------------------


def terminal_value(spec: ProblemSpec, ensemble: ParticleEnsemble) -> float:
    m = ensemble if spec.cost.mode == "full" else ensemble.mean()
    return float(ensemble.weights @ spec.cost.gT(ensemble.states, m))


def evaluate_value(spec: ProblemSpec, ensemble: ParticleEnsemble, t0: float, solution: FbsdeSolution | None = None,
                   ctx: SolveContext | None = None) -> float:
    """Left-Riemann cost of the solved particle system."""
    if t0 >= spec.T:
        return terminal_value(spec, ensemble)
    sol = solution if solution is not None else (ctx or SolveContext()).solve(spec, ensemble, t0)
    return solution_value(sol)


def solution_value(sol: FbsdeSolution) -> float:
    spec = sol.spec
    w = sol.weights
    total = 0.0
    for k in range(sol.K):
        s = sol.grid.knots[k]
        mk = sol.ensemble_at(k) if spec.cost.mode == "full" else sol.means[k]
        total += (sol.grid.knots[k + 1] - s) * float(w @ spec.cost.g(sol.Y[:, k], mk, sol.v_hat[:, k], s))
    mK = sol.ensemble_at(sol.K) if spec.cost.mode == "full" else sol.means[sol.K]
    return total + float(w @ spec.cost.gT(sol.Y[:, sol.K], mK))


def value_gradient(solution: FbsdeSolution) -> np.ndarray:
    return solution.P[:, 0].copy()


def value_hessian_action(base: FbsdeSolution, direction) -> np.ndarray:
    return gateaux_flow(base, direction).DP[:, 0, :, 0]


def gradient_identity(spec: ProblemSpec, ensemble: ParticleEnsemble, direction, eps_list=(1e-1, 1e-2, 1e-3),
                      ctx: SolveContext | None = None, base: FbsdeSolution | None = None) -> dict:
    """(J(X + eps X~) - J(X)) / eps against <P(t0), X~> under common random numbers."""
    ctx = ctx or SolveContext()
    base = base or ctx.solve(spec, ensemble, 0.0)
    t0 = float(base.grid.knots[0])
    X = np.asarray(direction, dtype=float).reshape(ensemble.states.shape)
    J0 = solution_value(base)
    pred = float(ensemble.weights @ np.sum(base.P[:, 0] * X, axis=1))
    rows = []
    for eps in eps_list:
        sol = ctx.solve(spec, ensemble.with_states(ensemble.states + eps * X), t0, base.policy)
        quot = (solution_value(sol) - J0) / eps
        rows.append({"eps": float(eps), "quotient": quot, "error": abs(quot - pred)})
    e = np.array([r["error"] for r in rows])
    h = np.array([r["eps"] for r in rows])
    slope = float(np.polyfit(np.log(h), np.log(np.maximum(e, 1e-300)), 1)[0])
    return {"predicted": pred, "rows": rows, "slope": slope}


def _hamiltonian_field(sol: FbsdeSolution, DxP: np.ndarray, grad_scale: float = 1.0):
    """H at every atom with p = P(t0) and q^j = D_xP sigma^j / 2."""
    spec = sol.spec
    s = float(sol.grid.knots[0])
    x = sol.Y[:, 0]
    m0 = sol.ensemble_at(0)
    S = diffusion_matrix(spec, x, sol.means[0], np.zeros((x.shape[0], spec.d)), s)
    q = 0.5 * np.einsum("iab,ibj->iaj", DxP, S)
    return hamiltonian(spec, x, m0, s, grad_scale * sol.P[:, 0], q)


def value_time_derivative(spec: ProblemSpec, ensemble: ParticleEnsemble, t0: float,
                          solution: FbsdeSolution | None = None, ctx: SolveContext | None = None) -> float:
    """-(ensemble average of H) with the gradient field and its spatial Jacobian."""
    _require_b4(spec, t0)
    sol = solution if solution is not None else (ctx or SolveContext()).solve(spec, ensemble, t0)
    sj = spatial_jacobian(sol)
    H = _hamiltonian_field(sol, sj.DP[:, 0, :, :]).H
    return -float(sol.weights @ H)


def bellman_residual(spec: ProblemSpec, ensemble: ParticleEnsemble, t0: float, ctx: SolveContext | None = None,
                     solution: FbsdeSolution | None = None, grad_scale: float = 1.0, h: float | None = None) -> dict:
    """|dV/dt + avg H|, raw and relative to |avg H|; dV/dt by a one-sided difference."""
    _require_b4(spec, t0)
    ctx = ctx or SolveContext()
    sol = solution if solution is not None else ctx.solve(spec, ensemble, t0)
    h = spec.T * TIME_STEP_FRACTION if h is None else h
    V0 = solution_value(sol)
    Vh = evaluate_value(spec, ensemble, t0 + h, None, ctx)
    dVdt = (Vh - V0) / h
    sj = spatial_jacobian(sol)
    Havg = float(sol.weights @ _hamiltonian_field(sol, sj.DP[:, 0], grad_scale).H)
    raw = abs(dVdt + Havg)
    return {"raw": raw, "relative": raw / max(abs(Havg), 1e-300), "dV_dt_fd": dVdt, "H_avg": Havg,
            "V": V0, "h": h, "grad_scale": grad_scale}


def sensitivity_check(spec: ProblemSpec, ensemble: ParticleEnsemble, t0: float, solution: FbsdeSolution,
                      knots, ctx: SolveContext | None = None, same_tail: bool = False) -> list:
    """Re-solve from (Y(s) law, s) and compare the fresh P(s) (and Q(s)) with the stored ones.

    ``same_tail`` reuses the stored Brownian increments after ``s`` (the
    flow property); otherwise the restart draws an independent tail.
    """
    ctx = ctx or SolveContext()
    sol = solution
    w = sol.weights
    out = []
    for k in knots:
        k = int(k)
        if k >= sol.K:
            out.append({"knot": k, "t": float(sol.grid.knots[k]), "p_error": 0.0, "q_error": 0.0})
            continue
        ens_k = sol.ensemble_at(k)
        grid = sol.grid.tail(k)
        if same_tail:
            bundle = sol.bundle.tail(k)
        else:
            bundle = sample_increments(grid, sol.N, spec.n, ctx.seed + 7919 * (k + 1), jobs=ctx.jobs)
        new = solve(spec, ens_k, grid, bundle, sol.options, sol.policy.tail(k))
        Pk = sol.P[:, k]
        fresh = new.P[:, 0]
        rel = float(np.sqrt(w @ np.sum((fresh - Pk) ** 2, axis=1)) / np.sqrt(w @ np.sum(Pk**2, axis=1)))
        qs = float(np.sqrt(w @ np.sum(sol.Q[:, k] ** 2, axis=(1, 2))))
        qerr = float(np.sqrt(w @ np.sum((new.Q[:, 0] - sol.Q[:, k]) ** 2, axis=(1, 2))))
        entry = {"knot": k, "t": float(sol.grid.knots[k]), "p_error": rel,
                 "q_error": qerr / qs if qs > 0 else qerr}
        if same_tail:
            entry["y_sup_rms"] = float(np.max(np.sqrt(np.einsum("i,ik->k", w, np.sum((new.Y - sol.Y[:, k:]) ** 2, axis=2)))))
            entry["p_sup_rms"] = float(np.max(np.sqrt(np.einsum("i,ik->k", w, np.sum((new.P - sol.P[:, k:]) ** 2, axis=2)))))
        out.append(entry)
    return out


def one_step_local_error(sol: FbsdeSolution, seed: int = 0) -> dict:
    """Empirical one-step local errors.

    State: one Euler step against two half steps on a Brownian-bridge split
    of the same increment.  Costate: left-point against midpoint quadrature
    of the backward driver over one step.
    """
    spec = sol.spec
    w = sol.weights
    rng = np.random.Generator(np.random.Philox(key=(int(seed) << 64) | 23))
    errY, errP = 0.0, 0.0
    for k in range(sol.K):
        s = sol.grid.knots[k]
        dt = sol.grid.knots[k + 1] - s
        dW = sol.bundle.increments[:, k]
        dW1 = 0.5 * dW + np.sqrt(dt / 4.0) * rng.standard_normal(dW.shape)
        y = sol.Y[:, k]
        mid = None
        for half, inc in ((0, dW1), (1, dW - dW1)):
            t = s + half * dt / 2
            m = ParticleEnsemble(y, w)
            pc, q = sol.fit.evaluate(k, y)
            v = minimize_control(spec, y, m, t, pc, q)
            if half == 1:
                mid = backward_driver(spec, m, v, pc, q, t)
            c = spec.coefficients(t)
            mb = w @ y
            drift = c.f0 + y @ c.f1.T + mb @ c.f2.T + v @ c.f3.T
            y = y + drift * dt / 2 + np.einsum("iaj,ij->ia", diffusion_matrix(spec, y, mb, v, t, c), inc)
        errY = max(errY, float(np.sqrt(w @ np.sum((y - sol.Y[:, k + 1]) ** 2, axis=1))))
        left = (sol.P[:, k] - sol.P_ctrl[:, k]) / dt
        errP = max(errP, float(np.sqrt(w @ np.sum((0.5 * dt * (mid - left)) ** 2, axis=1))))
    return {"y": errY, "p": errP}


def restart_check(sol: FbsdeSolution, k: int, ctx: SolveContext | None = None) -> dict:
    """Flow property: restart at knot k on the stored Brownian tail."""
    res = sensitivity_check(sol.spec, sol.ensemble, float(sol.grid.knots[0]), sol, [k], ctx, same_tail=True)[0]
    bound = one_step_local_error(sol)
    return {"knot": k, "y_error": res["y_sup_rms"], "p_error": res["p_sup_rms"],
            "y_bound": 2 * bound["y"], "p_bound": 2 * bound["p"],
            "passed": res["y_sup_rms"] <= 2 * bound["y"] and res["p_sup_rms"] <= 2 * bound["p"]}


@dataclass
class ValueReport:
    V: float
    grad_X: np.ndarray
    dV_dt: float
    bellman_residual: float
    bellman_residual_rel: float
    sensitivity_errors: list
    solution: FbsdeSolution | None = None

    def hessian_action(self, direction) -> np.ndarray:
        return value_hessian_action(self.solution, direction)

    def to_dict(self) -> dict:
        return {"value": self.V, "gradient_norm": float(np.sqrt(np.mean(np.sum(self.grad_X**2, axis=1)))),
                "dV_dt": self.dV_dt, "bellman_residual_raw": self.bellman_residual,
                "bellman_residual_rel": self.bellman_residual_rel, "sensitivity": self.sensitivity_errors}


def value_report(spec: ProblemSpec, ensemble: ParticleEnsemble, t0: float = 0.0, ctx: SolveContext | None = None,
                 sensitivity_knots=()) -> ValueReport:
    ctx = ctx or SolveContext()
    sol = ctx.solve(spec, ensemble, t0)
    bell = bellman_residual(spec, ensemble, t0, ctx, sol)
    sens = sensitivity_check(spec, ensemble, t0, sol, sensitivity_knots, ctx) if len(sensitivity_knots) else []
    return ValueReport(bell["V"], value_gradient(sol), -bell["H_avg"], bell["raw"], bell["relative"], sens, sol)


# ---------------------------------------------------------------------------
# master field
# ---------------------------------------------------------------------------


def tagged_cost(sol: FbsdeSolution, paths: dict) -> np.ndarray:
    """Per-path cost of tagged particles including the measure-derivative terms."""
    spec = sol.spec
    cost = spec.cost
    full = cost.mode == "full"
    total = np.zeros(paths["Y"].shape[0])
    for k in range(sol.K):
        s = sol.grid.knots[k]
        dt = sol.grid.knots[k + 1] - s
        mk = sol.ensemble_at(k)
        y = paths["Y"][:, k]
        total += dt * (cost.g(y, mk if full else sol.means[k], paths["v"][:, k], s)
                       + cost.mean_value(mk, sol.v_hat[:, k], s, y))
    mK = sol.ensemble_at(sol.K)
    y = paths["Y"][:, sol.K]
    return total + cost.gT(y, mK if full else sol.means[sol.K]) + cost.mean_value_T(mK, y)


def _own_paths(sol: FbsdeSolution) -> dict:
    return {"Y": sol.Y, "v": sol.v_hat, "Pc": sol.P_ctrl, "dw": sol.bundle.increments}


def martingale_term(sol: FbsdeSolution, paths: dict) -> np.ndarray:
    """sum_k Pc_k . sigma_k dW_k along each path.

    Pc_k is a function of the state at knot k, so the sum has zero mean; it
    serves as a control variate for path costs.
    """
    spec = sol.spec
    out = np.zeros(paths["Y"].shape[0])
    for k in range(sol.K):
        s = sol.grid.knots[k]
        S = diffusion_matrix(spec, paths["Y"][:, k], sol.means[k], paths["v"][:, k], s)
        out += np.einsum("ia,iaj,ij->i", paths["Pc"][:, k], S, paths["dw"][:, k])
    return out


def corrected_value(sol: FbsdeSolution) -> float:
    """Left-Riemann value minus the ensemble average of the martingale control variate."""
    return solution_value(sol) - float(sol.weights @ martingale_term(sol, _own_paths(sol)))


def master_value(spec: ProblemSpec, x, ensemble: ParticleEnsemble, t0: float, ctx: SolveContext,
                 base: FbsdeSolution | None = None) -> dict:
    """U(x, m, t0) from the Dirac quotient of V plus the ensemble average of the tagged cost."""
    x = np.asarray(x, dtype=float).reshape(spec.n)
    if t0 >= spec.T:
        m = ensemble if spec.cost.mode == "full" else ensemble.mean()
        U = float(spec.cost.gT(x[None], m)[0] + spec.cost.mean_value_T(ensemble, x[None])[0])
        return {"U": U, "U_bar": None, "c": None, "U_rep": U}
    base = base or ctx.solve(spec, ensemble, t0)
    V0 = corrected_value(base)
    quot = {}
    for eps in DIRAC_EPS:
        pert = perturb_dirac(ensemble, x, eps).materialize(ctx.master_copies)
        quot[eps] = (corrected_value(ctx.solve(spec, pert, t0, base.policy)) - V0) / eps
    e1, e2 = DIRAC_EPS
    U_bar = (e1 * quot[e2] - e2 * quot[e1]) / (e1 - e2)
    own = _own_paths(base)
    c = float(base.weights @ (tagged_cost(base, own) - martingale_term(base, own)))
    rep = None
    if not base.pathwise:
        tb = tagged_bundle(base, ctx.master_copies)
        paths = simulate_tagged(base, np.broadcast_to(x, (ctx.master_copies, spec.n)), tb)
        paths["dw"] = tb.increments
        rep = float(np.mean(tagged_cost(base, paths) - martingale_term(base, paths)))
    return {"U": U_bar + c, "U_bar": U_bar, "c": c, "U_rep": rep, "quotients": quot, "V": V0}


@dataclass
class MasterReport:
    x: np.ndarray
    t0: float
    U: float
    D_xU: np.ndarray
    D_x2U: np.ndarray
    dU_dt: float
    Dxi_dU_dnu: np.ndarray
    Dxi2_dU_dnu: np.ndarray
    terms: dict
    master_residual: float
    master_residual_rel: float
    terminal_gap: float | None = None
    U_rep: float | None = None
    cross_checks: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"x": self.x.tolist(), "t0": self.t0, "U": self.U, "D_xU": self.D_xU.tolist(),
                "D_x2U": self.D_x2U.tolist(), "dU_dt": self.dU_dt, "terms": self.terms,
                "master_residual_raw": self.master_residual, "master_residual_rel": self.master_residual_rel,
                "terminal_gap": self.terminal_gap, "U_rep": self.U_rep, "cross_checks": self.cross_checks}


def _require_master(spec: ProblemSpec, t0: float) -> None:
    _require_b4(spec, t0)
    if not isinstance(spec.cost, MeanFieldCost) or not spec.cost.has_third:
        raise CapabilityError("the master layer needs third-derivative callbacks")


def terminal_gap(spec: ProblemSpec, x, ensemble: ParticleEnsemble, ctx: SolveContext | None = None) -> float:
    """|U(x, m, T) - g_T(x, m) - int dg_T/dnu(xi, m)(x) dm(xi)| through the Dirac quotient path."""
    ctx = ctx or SolveContext()
    x = np.asarray(x, dtype=float).reshape(spec.n)
    V0 = terminal_value(spec, ensemble)
    quot = {eps: (terminal_value(spec, perturb_dirac(ensemble, x, eps).materialize(ctx.copies)) - V0) / eps
            for eps in DIRAC_EPS}
    e1, e2 = DIRAC_EPS
    U_bar = (e1 * quot[e2] - e2 * quot[e1]) / (e1 - e2)
    m = ensemble if spec.cost.mode == "full" else ensemble.mean()
    gT_all = spec.cost.gT(ensemble.states, m) + spec.cost.mean_value_T(ensemble, ensemble.states)
    U = U_bar + float(ensemble.weights @ gT_all)
    exact = float(spec.cost.gT(x[None], m)[0] + spec.cost.mean_value_T(ensemble, x[None])[0])
    return abs(U - exact)


def evaluate_master(spec: ProblemSpec, x, ensemble: ParticleEnsemble, t0: float = 0.0,
                    ctx: SolveContext | None = None, corrupt_dU_dnu: float = 1.0,
                    cross_check: bool = False) -> MasterReport:
    """Master field, its derivative family and the master-equation residual at (x, m, t0)."""
    ctx = ctx or SolveContext()
    x = np.asarray(x, dtype=float).reshape(spec.n)
    if t0 >= spec.T:
        val = master_value(spec, x, ensemble, spec.T, ctx)
        gap = terminal_gap(spec, x, ensemble, ctx)
        z = np.zeros(spec.n)
        return MasterReport(x, spec.T, val["U"], z, np.zeros((spec.n, spec.n)), float("nan"), np.zeros((0, spec.n)),
                            np.zeros((0, spec.n, spec.n)), {}, float("nan"), float("nan"), gap, val["U_rep"])
    _require_master(spec, t0)
    base = ctx.solve(spec, ensemble, t0)
    h = spec.T * TIME_STEP_FRACTION
    U0 = master_value(spec, x, ensemble, t0, ctx, base)
    Uh = master_value(spec, x, ensemble, t0 + h, ctx)
    dUdt = (Uh["U"] - U0["U"]) / h
    s = float(base.grid.knots[0])
    m0 = base.ensemble_at(0)
    # spatial derivatives at x
    DxU = costate_at(base, 0, x[None])["P"][0]
    sj_x = spatial_jacobian(base, tagged=x[None])
    Dx2U = sj_x.DP[0, 0]
    # measure derivatives anchored at x, read at the atoms
    sj = spatial_jacobian(base)
    mf = measure_flow(base, x, "natural", ctx.master_copies)
    ms = measure_spatial_flow(base, x, "natural", ctx.master_copies, mflow=mf, sflow=sj)
    Dxi = corrupt_dU_dnu * mf.DP[:, 0, :, 0]
    Dxi2 = corrupt_dU_dnu * ms.DP[:, 0]
    w = base.weights
    xs = base.Y[:, 0]
    zero_v = np.zeros((base.N, spec.d))
    S_atoms = diffusion_matrix(spec, xs, base.means[0], zero_v, s)
    S_x = diffusion_matrix(spec, x[None], base.means[0], np.zeros((1, spec.d)), s)
    Hx = hamiltonian(spec, x[None], m0, s, DxU[None], 0.5 * np.einsum("ab,ibj->iaj", Dx2U, S_x))
    Hat = _hamiltonian_field(base, sj.DP[:, 0])
    q_atoms = 0.5 * np.einsum("iab,ibj->iaj", sj.DP[:, 0, :, :], S_atoms)
    dHdnu = dH_dnu(spec, xs, s, base.P[:, 0], q_atoms, x[None], m0, Hat.v_hat)[:, 0]
    terms = {
        "dU_dt": dUdt,
        "hamiltonian": float(Hx.H[0]),
        "transport": float(w @ np.sum(Hat.D_pH * Dxi, axis=1)),
        "trace": float(0.5 * (w @ np.einsum("iaj,ibj,iba->i", S_atoms, S_atoms, Dxi2))),
        "dH_dnu": float(w @ dHdnu),
    }
    R = sum(terms.values())
    rel = abs(R) / max(sum(abs(v) for v in terms.values()), 1e-300)
    report = MasterReport(x, t0, U0["U"], DxU, Dx2U, dUdt, Dxi, Dxi2, terms, abs(R), rel, None, U0["U_rep"])
    report.cross_checks["U_bar"] = U0["U_bar"]
    report.cross_checks["U_shift"] = U0["c"]
    if cross_check:
        report.cross_checks.update(master_cross_checks(spec, x, ensemble, ctx, base, sj=sj))
    return report


def master_residual(spec: ProblemSpec, x, ensemble: ParticleEnsemble, t0: float = 0.0,
                    ctx: SolveContext | None = None) -> dict:
    rep = evaluate_master(spec, x, ensemble, t0, ctx)
    return {"raw": rep.master_residual, "relative": rep.master_residual_rel, "terms": rep.terms}


def master_cross_checks(spec: ProblemSpec, x, ensemble: ParticleEnsemble, ctx: SolveContext,
                        base: FbsdeSolution, eps_list=(1e-2, 1e-3), delta: float = 1e-3, sj=None) -> dict:
    """Derivative identities against Dirac finite differences of fresh solves.

    * D_xU(x) = P(t0) at x vs a centered x-difference of the Dirac quotient;
    * D_xi dU/dnu vs the Dirac quotient of the atoms' P(t0) (centered flow);
    * D_xi^2 dU/dnu vs the Dirac quotient of the atoms' spatial Jacobian.
    """
    x = np.asarray(x, dtype=float).reshape(spec.n)
    t0 = float(base.grid.knots[0])
    N = base.N
    w = base.weights
    eps_u = DIRAC_EPS[-1]
    V0 = solution_value(base)
    DxU = costate_at(base, 0, x[None])["P"][0]
    fd = np.empty(spec.n)
    for a in range(spec.n):
        e = np.zeros(spec.n)
        e[a] = delta
        vals = []
        for sgn in (1.0, -1.0):
            pert = perturb_dirac(ensemble, x + sgn * e, eps_u).materialize(ctx.master_copies)
            vals.append(solution_value(ctx.solve(spec, pert, t0, base.policy)))
        fd[a] = (vals[0] - vals[1]) / (2 * delta * eps_u)
    out = {"D_xU": {"identity": DxU.tolist(), "fd": fd.tolist(),
                    "relative_error": float(np.linalg.norm(fd - DxU) / max(np.linalg.norm(DxU), 1e-300))}}
    sj = sj or spatial_jacobian(base)
    mf = measure_flow(base, x, "centered", ctx.master_copies)
    ms = measure_spatial_flow(base, x, "centered", ctx.master_copies, mflow=mf, sflow=sj)
    rows_p, rows_h = [], []
    for eps in eps_list:
        pert = perturb_dirac(ensemble, x, eps).materialize(ctx.master_copies)
        sol = ctx.solve(spec, pert, t0, base.policy)
        qp = (sol.P[:N, 0] - base.P[:, 0]) / eps
        rows_p.append(float(np.sqrt(w @ np.sum((qp - mf.DP[:, 0, :, 0]) ** 2, axis=1))))
        sje = spatial_jacobian(sol)
        qh = (sje.DP[:N, 0] - sj.DP[:, 0]) / eps
        rows_h.append(float(np.sqrt(w @ np.sum((qh - ms.DP[:, 0]) ** 2, axis=(1, 2)))))
    le = np.log(np.asarray(eps_list))
    slope = lambda r: float(np.polyfit(le, np.log(np.maximum(r, 1e-300)), 1)[0])
    out["Dxi_dU_dnu"] = {"eps": list(eps_list), "error": rows_p, "slope": slope(rows_p),
                         "scale": float(np.sqrt(w @ np.sum(mf.DP[:, 0, :, 0] ** 2, axis=1)))}
    out["Dxi2_dU_dnu"] = {"eps": list(eps_list), "error": rows_h, "slope": slope(rows_h),
                          "scale": float(np.sqrt(w @ np.sum(ms.DP[:, 0] ** 2, axis=(1, 2))))}
    return out
