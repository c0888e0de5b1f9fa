"""Jacobian and measure-derivative flows of a solved particle system.

Each flow is the exact derivative of the discrete scheme in
:mod:`mfcontrol.fbsde` along one perturbation:

* ``gateaux_flow``: initial atoms moved along a direction field;
* ``spatial_jacobian``: a tagged particle moved in x, the ensemble frozen;
* ``measure_flow``: mass moved onto a Dirac atom at xi;
* ``measure_spatial_flow``: the spatial Jacobian differentiated along the
  same Dirac perturbation.

The Dirac perturbation is realised by ``copies`` auxiliary particles at xi,
each on its own Brownian stream, which follow the base feedback.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, MeasureError, SolverError
from .fbsde import (FbsdeSolution, LinearDrivers, LinearFlowSolution, Linearization, SolverOptions,
                    feature_hessian, features, simulate_tagged, solve)
from .measure import ParticleEnsemble, perturb_dirac
from .model import MeanFieldCost
from .paths import BrownianBundle, sample_increments

MEASURE_MODES = ("natural", "centered")


@dataclass(frozen=True)
class DirectionField:
    X: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        object.__setattr__(self, "X", X)

    def check(self, ensemble: ParticleEnsemble) -> None:
        if self.X.shape != ensemble.states.shape:
            raise MeasureError("direction field does not match the ensemble",
                               direction=list(self.X.shape), ensemble=list(ensemble.states.shape))


def _require_converged(base: FbsdeSolution) -> None:
    if not base.converged:
        raise SolverError("flows need a converged base solution")
    if base.rho != 1.0:
        raise SolverError("flows need the target (rho = 1) solution", rho=base.rho)


def _linearization(base: FbsdeSolution) -> Linearization:
    cache = base.diagnostics.setdefault("_cache", {})
    if "lin" not in cache:
        cache["lin"] = Linearization(base)
    return cache["lin"]


# ---------------------------------------------------------------------------
# Gateaux flow
# ---------------------------------------------------------------------------


def gateaux_flow(base: FbsdeSolution, direction, options: SolverOptions | None = None) -> LinearFlowSolution:
    """Derivative of the whole particle solution along X -> X + eps X~."""
    _require_converged(base)
    d = direction if isinstance(direction, DirectionField) else DirectionField(direction)
    d.check(base.ensemble)
    drv = LinearDrivers(dy0=d.X[:, :, None], coupling=True, coef_change=True)
    sol = _linearization(base).solve(drv, options)
    sol.kind = "gateaux"
    return sol


# ---------------------------------------------------------------------------
# spatial Jacobian
# ---------------------------------------------------------------------------


def tagged_bundle(base: FbsdeSolution, M: int, offset: int | None = None) -> BrownianBundle:
    """Fresh streams for ``M`` tagged particles, disjoint from the ensemble's."""
    start = base.N if offset is None else offset
    return sample_increments(base.grid, M, base.spec.n, base.bundle.seed, stream_offset=start)


def spatial_jacobian(base: FbsdeSolution, tagged=None, bundle: BrownianBundle | None = None,
                     options: SolverOptions | None = None) -> LinearFlowSolution:
    """D_x of a tagged particle's (Y, P, Q, v) with the ensemble held fixed.

    Without ``tagged`` every ensemble atom is its own tagged particle and
    the paths are the stored ones.  Columns of the trailing axis are the
    unit directions.
    """
    _require_converged(base)
    n = base.spec.n
    if tagged is None:
        lin = _linearization(base)
        M = base.N
        paths = None
    else:
        x0 = np.atleast_2d(np.asarray(tagged, dtype=float))
        M = x0.shape[0]
        if base.pathwise:
            raise CapabilityError("tagged particles need a regression policy (noise present)")
        bundle = bundle or tagged_bundle(base, M)
        paths = simulate_tagged(base, x0, bundle)
        lin = Linearization(base, paths, bundle.increments)
    dy0 = np.broadcast_to(np.eye(n), (M, n, n)).copy()
    sol = lin.solve(LinearDrivers(dy0=dy0, coupling=False, coef_change=False), options)
    sol.kind = "spatial"
    if paths is not None:
        sol.aux["paths"] = paths
    return sol


# ---------------------------------------------------------------------------
# measure flow
# ---------------------------------------------------------------------------


def _aux_paths(base: FbsdeSolution, xi: np.ndarray, copies: int) -> tuple[dict, BrownianBundle]:
    bundle = tagged_bundle(base, copies)
    return simulate_tagged(base, np.broadcast_to(xi, (copies, base.spec.n)), bundle), bundle


def _measure_sources(base: FbsdeSolution, lin: Linearization, aux: dict, aux_dw: np.ndarray, mode: str) -> LinearDrivers:
    spec = base.spec
    cost: MeanFieldCost = spec.cost
    K, n, N = base.K, spec.n, base.N
    Ya, va, pca, qa, Pa = aux["Y"], aux["v"], aux["Pc"], aux["Q"], aux["P"]
    ua = np.full(Ya.shape[0], 1.0 / Ya.shape[0])
    centered = mode == "centered"
    s_m = np.empty((K + 1, n, 1))
    s_b = np.empty((K, 1, n, 1))
    nb = lin.reg[0]["Phi"].shape[1]
    s_dbp = np.zeros((K, nb, n, 1))
    s_dbq = np.zeros((K, nb, n, n, 1))
    w = base.weights
    for k in range(K):
        s = base.grid.knots[k]
        dt = base.grid.knots[k + 1] - s
        c = lin.coef[k]
        mb = base.means[k]
        aux_term = pca[:, k] @ c.f2 + np.einsum("jba,ibj->ia", c.s2, qa[:, k]) + cost.g_m(Ya[:, k], mb, va[:, k], s)
        src = ua @ aux_term
        ym = ua @ Ya[:, k]
        if centered:
            base_term = (base.P_ctrl[:, k] @ c.f2 + np.einsum("jba,ibj->ia", c.s2, base.Q[:, k])
                         + cost.g_m(base.Y[:, k], mb, base.v_hat[:, k], s))
            src = src - w @ base_term
            ym = ym - mb
        s_b[k, 0, :, 0] = src
        s_m[k, :, 0] = ym
        # the auxiliary atoms enter every regression with weight eps
        r = lin.reg[k]
        Phi_a = features(lin.basis, Ya[:, k])
        rp = Pa[:, k + 1] - Phi_a @ r["bp"]
        mp = np.einsum("i,ib,ia->ba", ua, Phi_a, rp)
        if lin.stochastic:
            tq = Pa[:, k + 1, :, None] * aux_dw[:, k, None, :] / dt
            rq = tq - np.einsum("ib,baj->iaj", Phi_a, r["bq"])
            mq = np.einsum("i,ib,iaj->baj", ua, Phi_a, rq)
        if centered:
            Phi = r["Phi"]
            mp = mp - np.einsum("i,ib,ia->ba", w, Phi, r["rp"])
            if lin.stochastic:
                mq = mq - np.einsum("i,ib,iaj->baj", w, Phi, r["rq"])
        s_dbp[k, :, :, 0] = r["Ainv"] @ mp
        if lin.stochastic:
            s_dbq[k, :, :, :, 0] = np.einsum("gb,baj->gaj", r["Ainv"], mq)
    ymK = ua @ Ya[:, K]
    mK = base.means[K]
    s_T = ua @ cost.gT_m(Ya[:, K], mK)
    if centered:
        ymK = ymK - mK
        s_T = s_T - w @ cost.gT_m(base.Y[:, K], mK)
    s_m[K, :, 0] = ymK
    return LinearDrivers(dy0=np.zeros((N, n, 1)), coupling=True, coef_change=True, s_m=s_m, s_b=s_b,
                         s_T=s_T[None, :, None], s_dbeta_p=s_dbp, s_dbeta_q=s_dbq)


def measure_flow(base: FbsdeSolution, xi, mode: str = "natural", copies: int = 64,
                 options: SolverOptions | None = None) -> LinearFlowSolution:
    """Linear functional derivative of the particle solution in the direction delta_xi.

    ``natural`` gives d/d eps at eps = 0 of the solution for m + eps delta_xi
    read as a signed perturbation (the convention of dU/dnu);
    ``centered`` subtracts the base average and matches the mixture
    (1 - eps) m + eps delta_xi, i.e. the normalized derivative.
    """
    _require_converged(base)
    if mode not in MEASURE_MODES:
        raise SolverError(f"unknown measure-flow mode {mode!r}", known=list(MEASURE_MODES))
    if not isinstance(base.spec.cost, MeanFieldCost) or not base.spec.cost.has_third:
        raise CapabilityError("measure flows need second- and third-derivative callbacks")
    if base.pathwise:
        raise CapabilityError("measure flows need a regression policy (noise present)")
    xi = np.asarray(xi, dtype=float).reshape(base.spec.n)
    lin = _linearization(base)
    aux, bundle = _aux_paths(base, xi, copies)
    drv = _measure_sources(base, lin, aux, bundle.increments, mode)
    sol = lin.solve(drv, options)
    sol.kind, sol.anchor = "measure", xi
    sol.aux.update({"paths": aux, "mode": mode, "copies": copies})
    return sol


# ---------------------------------------------------------------------------
# measure derivative of the spatial Jacobian
# ---------------------------------------------------------------------------


def _third_blocks(cost: MeanFieldCost, x, mb, v, s, dx, dm, dv):
    """Directional derivative of the Hessian blocks along (dx, dm, dv)."""
    z = cost._stack(x, mb, v)
    T3 = cost.third_z(z, s)
    dz = np.concatenate([dx, np.broadcast_to(dm, dx.shape), dv], axis=1)
    dH = np.einsum("iabc,ic->iab", T3, dz)
    ix, iv = cost.ix, cost.iv
    return {"xx": dH[:, ix, ix], "xv": dH[:, ix, iv], "vx": dH[:, iv, ix], "vv": dH[:, iv, iv]}


def measure_spatial_flow(base: FbsdeSolution, xi, mode: str = "natural", copies: int = 64,
                         mflow: LinearFlowSolution | None = None, sflow: LinearFlowSolution | None = None,
                         options: SolverOptions | None = None) -> LinearFlowSolution:
    """d/dnu of the spatial Jacobian of every ensemble atom, anchored at xi."""
    _require_converged(base)
    spec = base.spec
    cost = spec.cost
    if not isinstance(cost, MeanFieldCost) or not cost.has_third:
        raise CapabilityError("measure-spatial flows need third-derivative callbacks")
    xi = np.asarray(xi, dtype=float).reshape(spec.n)
    mflow = mflow or measure_flow(base, xi, mode, copies, options)
    sflow = sflow or spatial_jacobian(base, options=options)
    lin = _linearization(base)
    K, n, N = base.K, spec.n, base.N
    C = n
    s_v = np.empty((K, N, spec.d, C))
    s_b = np.empty((K, N, n, C))
    s_pc = np.empty((K, N, n, C))
    s_q = np.zeros((K, N, n, n, C))
    Hphi = feature_hessian(lin.basis, n)
    for k in range(K):
        s = base.grid.knots[k]
        dY, dm, dv = mflow.DY[:, k, :, 0], mflow.Dm[k, :, 0], mflow.Dv[:, k, :, 0]
        tb = _third_blocks(cost, base.Y[:, k], base.means[k], base.v_hat[:, k], s, dY, dm, dv)
        DxY, Dxv = sflow.DY[:, k], sflow.Dv[:, k]
        s_v[k] = np.einsum("iuv,ivc->iuc", tb["vv"], Dxv) + np.einsum("iva,iac->ivc", tb["vx"], DxY)
        s_b[k] = np.einsum("iab,ibc->iac", tb["xx"], DxY) + np.einsum("iav,ivc->iac", tb["xv"], Dxv)
        # coefficient change and curvature of the regression features
        r = lin.reg[k]
        J = lin.Jown[k]
        dJ = np.einsum("bnm,im->ibn", Hphi, dY)
        dbp = mflow.dbeta_p[k][..., 0]
        dbq = mflow.dbeta_q[k][..., 0]
        s_pc[k] = (np.einsum("ba,ibn,inc->iac", dbp, J, DxY) + np.einsum("ba,ibn,inc->iac", r["bp"], dJ, DxY))
        if lin.stochastic:
            s_q[k] = (np.einsum("baj,ibn,inc->iajc", dbq, J, DxY)
                      + np.einsum("baj,ibn,inc->iajc", r["bq"], dJ, DxY))
    z = cost._stackT(base.Y[:, K], base.means[K])
    T3 = cost.thirdT_z(z)
    dz = np.concatenate([mflow.DY[:, K, :, 0], np.broadcast_to(mflow.Dm[K, :, 0], (N, n))], axis=1)
    dHT = np.einsum("iabc,ic->iab", T3, dz)[:, cost.ix, cost.ix]
    s_T = np.einsum("iab,ibc->iac", dHT, sflow.DY[:, K])
    drv = LinearDrivers(dy0=np.zeros((N, n, C)), coupling=False, coef_change=False, s_v=s_v, s_b=s_b,
                        s_T=s_T, s_pc=s_pc, s_q=s_q)
    sol = lin.solve(drv, options)
    sol.kind, sol.anchor = "measure-spatial", xi
    sol.aux["mode"] = mode
    return sol


# ---------------------------------------------------------------------------
# finite-difference validation
# ---------------------------------------------------------------------------


def _sup_rms(a: np.ndarray, w: np.ndarray) -> float:
    """max over knots of the weighted RMS over particles; ``a`` is (N, K+1, ...)."""
    flat = a.reshape(a.shape[0], a.shape[1], -1)
    return float(np.max(np.sqrt(np.einsum("i,ik->k", w, np.sum(flat**2, axis=2)))))


def fd_convergence_check(base: FbsdeSolution, eps_list=(1e-1, 1e-2, 1e-3), direction=None, xi=None,
                         copies: int = 64, flow: LinearFlowSolution | None = None) -> dict:
    """Sup-knot RMS distance between difference quotients and the flow, per eps."""
    spec, grid, opts = base.spec, base.grid, base.options
    w = base.weights
    N = base.N
    if (direction is None) == (xi is None):
        raise SolverError("pass exactly one of direction or xi")
    if direction is not None:
        d = direction if isinstance(direction, DirectionField) else DirectionField(direction)
        flow = flow or gateaux_flow(base, d)
    else:
        xi = np.asarray(xi, dtype=float).reshape(spec.n)
        flow = flow or measure_flow(base, xi, "centered", copies)
        aux_bundle = tagged_bundle(base, copies)
        bundle_eps = base.bundle.concat(aux_bundle)
    fY, fP = flow.DY[..., 0], flow.DP[..., 0]
    scale = max(_sup_rms(np.concatenate([fY, fP], axis=2), w), 1e-300)
    rows = []
    for eps in eps_list:
        if direction is not None:
            ens = base.ensemble.with_states(base.ensemble.states + eps * d.X)
            sol = solve(spec, ens, grid, base.bundle, opts, initial_policy=base.policy)
        else:
            ens = perturb_dirac(base.ensemble, xi, eps).materialize(copies)
            sol = solve(spec, ens, grid, bundle_eps, opts, initial_policy=base.policy)
        qY = (sol.Y[:N] - base.Y) / eps
        qP = (sol.P[:N] - base.P) / eps
        err = _sup_rms(np.concatenate([qY - fY, qP - fP], axis=2), w)
        rows.append({"eps": float(eps), "error": err, "relative_error": err / scale})
    errs = np.array([r["error"] for r in rows])
    eps = np.array([r["eps"] for r in rows])
    ok = errs > 0
    slope = float(np.polyfit(np.log(eps[ok]), np.log(errs[ok]), 1)[0]) if ok.sum() >= 2 else float("nan")
    return {"rows": rows, "slope": slope, "flow_scale": scale}
