"""Independent brute-force references for testing.

Everything here exists to cross-check the production paths at small scale:
finite-difference gradients, Dykstra alternating projections, a direct
linear-algebra solution of the variational equilibrium when the cone
constraints are inactive, and Monte Carlo chance-constraint estimates.

The oracles re-derive their own constraint matrices from the set
description with plain dense assembly and solve with uncached
least-squares; they share no numerical kernels with the modules they
check beyond basic matrix arithmetic.  They are deliberately slow and
guarded by a size limit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .feasible_set import FeasibleSetSpec
from .game_model import DynamicGameSpec
from .sls_core import SystemResponse, objective, pseudo_gradient

__all__ = [
    "McChanceResult",
    "OracleInapplicableError",
    "OracleReport",
    "dykstra_project",
    "fd_gradient",
    "kkt_vgne",
    "mc_chance",
]

SIZE_GUARD = 5000


class OracleInapplicableError(RuntimeError):
    """The instance falls outside this oracle's validity conditions."""


@dataclass
class OracleReport:
    quantity: str
    oracle_value: float
    tested_value: float
    discrepancy: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.discrepancy <= self.tolerance

    def to_json(self) -> str:
        return json.dumps({
            "quantity": self.quantity,
            "oracle_value": self.oracle_value,
            "tested_value": self.tested_value,
            "discrepancy": self.discrepancy,
            "tolerance": self.tolerance,
            "passed": self.passed,
        })

    @classmethod
    def compare(cls, quantity: str, oracle_value, tested_value,
                tolerance: float) -> "OracleReport":
        oracle_arr = np.asarray(oracle_value, dtype=float)
        tested_arr = np.asarray(tested_value, dtype=float)
        disc = float(np.max(np.abs(oracle_arr - tested_arr))) if oracle_arr.size else 0.0
        return cls(quantity=quantity,
                   oracle_value=float(np.linalg.norm(oracle_arr)),
                   tested_value=float(np.linalg.norm(tested_arr)),
                   discrepancy=disc, tolerance=tolerance)


# ---------------------------------------------------------------------------
# Finite-difference gradient
# ---------------------------------------------------------------------------

def fd_gradient(spec: DynamicGameSpec, phi_u_all: np.ndarray, p: int,
                step: float = 1e-6) -> np.ndarray:
    """Entrywise central differences of player p's objective."""
    if step <= 0.0:
        raise ValueError("step must be positive")
    phi_u_all = np.asarray(phi_u_all, dtype=float)
    sl = spec.input_slices[p]
    grad = np.zeros((spec.fir_horizon + 1, spec.input_dims[p],
                     spec.state_dim + spec.output_dim))
    for n in range(grad.shape[0]):
        for i in range(grad.shape[1]):
            for c in range(grad.shape[2]):
                up = phi_u_all.copy()
                up[n, sl, :][i, c] += step
                um = phi_u_all.copy()
                um[n, sl, :][i, c] -= step
                jp = objective(spec, SystemResponse.from_phi_u(spec, up), p)
                jm = objective(spec, SystemResponse.from_phi_u(spec, um), p)
                grad[n, i, c] = (jp - jm) / (2.0 * step)
    return grad


# ---------------------------------------------------------------------------
# Own dense constraint assembly (shared by Dykstra and the VI oracle)
# ---------------------------------------------------------------------------

def _dims(fset: FeasibleSetSpec):
    s = fset.spec
    N, nx, nu, ny = s.fir_horizon, s.state_dim, s.input_dim, s.output_dim
    cols = nx + ny
    dim = (N + 1) * (nx + nu) * cols
    return s, N, nx, nu, ny, cols, dim


def _fx(n, i, c, nx, cols):
    return n * nx * cols + i * cols + c


def _fu(n, j, c, N, nx, nu, cols):
    return (N + 1) * nx * cols + n * nu * cols + j * cols + c


def _pack_flat(fset: FeasibleSetSpec, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    return np.concatenate([X.ravel(), U.ravel()])


def _unpack_flat(fset: FeasibleSetSpec, z: np.ndarray):
    nxt = int(np.prod(fset.x_shape))
    return z[:nxt].reshape(fset.x_shape), z[nxt:].reshape(fset.u_shape)


def _primal_rows(fset: FeasibleSetSpec):
    """Forward recursion + causality/terminal/mask pins, dense."""
    s, N, nx, nu, ny, cols, dim = _dims(fset)
    b_u = s.B_u_stacked
    rows, rhs = [], []
    for n in range(N):
        for i in range(nx):
            for c in range(cols):
                row = np.zeros(dim)
                row[_fx(n + 1, i, c, nx, cols)] = 1.0
                for k in range(nx):
                    row[_fx(n, k, c, nx, cols)] -= s.A[i, k]
                for j in range(nu):
                    row[_fu(n, j, c, N, nx, nu, cols)] -= b_u[i, j]
                rows.append(row)
                rhs.append(1.0 if (n == 0 and c < nx and i == c) else 0.0)
    for n in range(N + 1):
        for i in range(nx):
            for c in range(cols):
                if not fset.x_free[n, i, c]:
                    row = np.zeros(dim)
                    row[_fx(n, i, c, nx, cols)] = 1.0
                    rows.append(row)
                    rhs.append(0.0)
        for j in range(nu):
            for c in range(cols):
                if not fset.u_free[n, j, c]:
                    row = np.zeros(dim)
                    row[_fu(n, j, c, N, nx, nu, cols)] = 1.0
                    rows.append(row)
                    rhs.append(0.0)
    return np.array(rows), np.array(rhs)


def _dual_rows(fset: FeasibleSetSpec):
    """Adjoint recursion + anchor + mask-only pins, dense."""
    s, N, nx, nu, ny, cols, dim = _dims(fset)
    rows, rhs = [], []
    for r in range(nx):
        for c in range(nx):
            row = np.zeros(dim)
            row[_fx(1, r, c, nx, cols)] = 1.0
            rows.append(row)
            rhs.append(1.0 if r == c else 0.0)
    for n in range(1, N):
        for r in range(nx):
            for c in range(nx):
                row = np.zeros(dim)
                row[_fx(n + 1, r, c, nx, cols)] = 1.0
                for k in range(nx):
                    row[_fx(n, r, k, nx, cols)] -= s.A[k, c]
                for m in range(ny):
                    row[_fx(n, r, nx + m, nx, cols)] -= s.C[m, c]
                rows.append(row)
                rhs.append(0.0)
    for n in range(N):
        for r in range(nu):
            for c in range(nx):
                row = np.zeros(dim)
                row[_fu(n + 1, r, c, N, nx, nu, cols)] = 1.0
                for k in range(nx):
                    row[_fu(n, r, k, N, nx, nu, cols)] -= s.A[k, c]
                for m in range(ny):
                    row[_fu(n, r, nx + m, N, nx, nu, cols)] -= s.C[m, c]
                rows.append(row)
                rhs.append(0.0)
    xm, um = fset.mask.x_mask, fset.mask.u_mask_stacked()
    for n in range(N + 1):
        for i in range(nx):
            for c in range(cols):
                if not xm[n, i, c]:
                    row = np.zeros(dim)
                    row[_fx(n, i, c, nx, cols)] = 1.0
                    rows.append(row)
                    rhs.append(0.0)
        for j in range(nu):
            for c in range(cols):
                if not um[n, j, c]:
                    row = np.zeros(dim)
                    row[_fu(n, j, c, N, nx, nu, cols)] = 1.0
                    rows.append(row)
                    rhs.append(0.0)
    return np.array(rows), np.array(rhs)


def _soc_row_map(fset: FeasibleSetSpec, i: int) -> np.ndarray:
    """Dense matrix of the map z -> stacked noise image of SOC row i."""
    s, N, nx, nu, ny, cols, dim = _dims(fset)
    nw = s.noise_dim
    w_w = s.noise_stack
    gamma = fset.soc_gamma[i]
    m = np.zeros(((N + 1) * nw, dim))
    for n in range(N + 1):
        for j in range(nw):
            r = n * nw + j
            for a in range(nx):
                if gamma[a] == 0.0:
                    continue
                for c in range(cols):
                    m[r, _fx(n, a, c, nx, cols)] += gamma[a] * w_w[c, j]
            for a in range(nu):
                if gamma[nx + a] == 0.0:
                    continue
                for c in range(cols):
                    m[r, _fu(n, a, c, N, nx, nu, cols)] += gamma[nx + a] * w_w[c, j]
    return m


def _proj_affine_lstsq(a_mat: np.ndarray, b: np.ndarray, z: np.ndarray) -> np.ndarray:
    if a_mat.size == 0:
        return z
    corr, *_ = np.linalg.lstsq(a_mat, a_mat @ z - b, rcond=None)
    return z - corr


def _proj_norm_ball(m: np.ndarray, radius: float, z: np.ndarray) -> np.ndarray:
    """Projection onto {z: ||M z|| <= radius} via SVD + bisection."""
    u_svd, sv, vt = np.linalg.svd(m, full_matrices=False)
    keep = sv > 1e-14 * (sv[0] if sv.size and sv[0] > 0 else 1.0)
    sv, vt = sv[keep], vt[keep]
    t = vt @ z
    if float(np.sum((sv * t) ** 2)) <= radius * radius * (1.0 + 1e-14):
        return z.copy()
    lo, hi = 0.0, 1.0

    def norm2(mu):
        return float(np.sum((sv * t) ** 2 / (1.0 + mu * sv * sv) ** 2))

    while norm2(hi) > radius * radius:
        hi *= 4.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if norm2(mid) > radius * radius:
            lo = mid
        else:
            hi = mid
    mu = 0.5 * (lo + hi)
    t_new = t / (1.0 + mu * sv * sv)
    return z + vt.T @ (t_new - t)


def dykstra_project(fset: FeasibleSetSpec, phi_u_plus: np.ndarray,
                    iters: int = 2000, tol: float = 1e-12) -> np.ndarray:
    """Dykstra alternating projections onto the same constraint families.

    Converges to the exact Euclidean projection onto the intersection in
    the lifted (x, u) metric, unlike plain alternating projections.  Only
    intended at small scale: each sub-projection is an uncached dense
    least-squares or SVD solve.
    """
    from .sls_core import _propagate_phi_x

    _, N, nx, nu, ny, cols, dim = _dims(fset)
    if dim > SIZE_GUARD:
        raise OracleInapplicableError(
            f"{dim} variables exceed the oracle size guard ({SIZE_GUARD})")
    phi_u_plus = np.asarray(phi_u_plus, dtype=float)
    x_plus = _propagate_phi_x(fset.spec, phi_u_plus)
    z = _pack_flat(fset, x_plus, phi_u_plus)

    a1, b1 = _primal_rows(fset)
    a2, b2 = _dual_rows(fset)
    soc_maps = [_soc_row_map(fset, i) for i in range(fset.num_soc_rows)]
    projs = [lambda w: _proj_affine_lstsq(a1, b1, w),
             lambda w: _proj_affine_lstsq(a2, b2, w)]
    for m in soc_maps:
        projs.append(lambda w, m=m: _proj_norm_ball(m, fset.soc_radius, w))

    increments = [np.zeros(dim) for _ in projs]
    scale = max(1.0, float(np.linalg.norm(z)))
    for _ in range(iters):
        z_cycle = z.copy()
        for i, proj in enumerate(projs):
            y = proj(z + increments[i])
            increments[i] = z + increments[i] - y
            z = y
        if float(np.linalg.norm(z - z_cycle)) <= tol * scale:
            break
    _, U = _unpack_flat(fset, z)
    return U


# ---------------------------------------------------------------------------
# Direct variational-equilibrium solve (cone constraints inactive)
# ---------------------------------------------------------------------------

def kkt_vgne(fset: FeasibleSetSpec, stationarity_tol: float = 1e-10,
             slack_tol: float = 1e-8) -> np.ndarray:
    """Solve the equilibrium's first-order system directly.

    With the pseudo-gradient affine and all binding constraints affine
    (cone rows inactive), the variational condition reduces to one linear
    system in the lifted kernels and multipliers: F(z) + A' lam = 0 with
    A z = b, where F acts on the input-kernel part only.  The pseudo-
    gradient's linear part is recovered by probing the (separately
    finite-difference-validated) gradient evaluator on unit kernels.

    Verifies stationarity and feasibility residuals and that every cone
    row has positive slack; otherwise the oracle declares itself
    inapplicable.
    """
    spec = fset.spec
    _, N, nx, nu, ny, cols, dim = _dims(fset)
    if dim > SIZE_GUARD:
        raise OracleInapplicableError(
            f"{dim} variables exceed the oracle size guard ({SIZE_GUARD})")

    a1, b1 = _primal_rows(fset)
    a2, b2 = _dual_rows(fset)
    a_all = np.vstack([a1, a2])
    b_all = np.concatenate([b1, b2])

    # Affine pseudo-gradient in flat coordinates, by probing
    du = (N + 1) * nu * cols
    dx = (N + 1) * nx * cols
    f0 = pseudo_gradient(spec, np.zeros((N + 1, nu, cols))).ravel()
    f_lin = np.zeros((du, du))
    probe = np.zeros((N + 1, nu, cols))
    for j in range(du):
        probe.ravel()[j] = 1.0
        f_lin[:, j] = pseudo_gradient(spec, probe).ravel() - f0
        probe.ravel()[j] = 0.0

    n_con = a_all.shape[0]
    kkt = np.zeros((dim + n_con, dim + n_con))
    kkt[dx:dim, dx:dim] = f_lin
    kkt[:dim, dim:] = a_all.T
    kkt[dim:, :dim] = a_all
    rhs = np.concatenate([np.zeros(dx), -f0, b_all])
    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    z, lam = sol[:dim], sol[dim:]

    feas = float(np.max(np.abs(a_all @ z - b_all)))
    grad_u = f_lin @ z[dx:dim] + f0
    stat = np.concatenate([np.zeros(dx), grad_u]) + a_all.T @ lam
    stat_res = float(np.max(np.abs(stat)))
    scale = max(1.0, float(np.max(np.abs(grad_u))))
    if feas > stationarity_tol * 10 or stat_res > stationarity_tol * scale * 10:
        raise OracleInapplicableError(
            f"equilibrium system residuals too large (feas {feas:.2e}, "
            f"stationarity {stat_res:.2e})")
    norms = fset.soc_row_norms(z)
    if norms.size and float(np.min(fset.soc_radius - norms)) <= slack_tol:
        raise OracleInapplicableError(
            "a cone row is active or nearly active at the candidate "
            "equilibrium; the linear oracle does not apply")
    _, U = _unpack_flat(fset, z)
    return U


# ---------------------------------------------------------------------------
# Monte Carlo chance estimate
# ---------------------------------------------------------------------------

@dataclass
class McChanceResult:
    probability: float
    standard_error: float
    samples: int

    def to_dict(self) -> dict:
        return {"probability": self.probability,
                "standard_error": self.standard_error,
                "samples": self.samples}


def mc_chance(spec: DynamicGameSpec, realization, row: int, trials: int = 2000,
              horizon: int | None = None, seed: int = 0) -> McChanceResult:
    """Monte Carlo satisfaction probability of one constraint row.

    Simulates the closed loop under unit white Gaussian noise, discards a
    burn-in of the kernel horizon, and counts satisfaction (row value <= 1)
    at steps spaced one full kernel length apart; for feasible deadbeat
    responses those samples are independent, so the binomial standard
    error is exact.
    """
    from .simulator import NoiseModel, simulate

    if trials < 1000:
        raise ValueError("need at least 1000 trials for a usable estimate")
    N = spec.fir_horizon
    burn_in = N
    if horizon is None:
        horizon = burn_in + 10 * (N + 1)
    nglobal = spec.G_x.shape[0]
    if row < nglobal:
        gx = spec.G_x[row]
        gu = spec.G_u[row]
    else:
        r = row - nglobal
        gx = np.zeros(spec.state_dim)
        gu = np.zeros(spec.input_dim)
        for p, sl in enumerate(spec.input_slices):
            g = spec.G_up[p]
            if r < g.shape[0]:
                gu[sl] = g[r]
                break
            r -= g.shape[0]
        else:
            raise ValueError(f"constraint row {row} out of range")

    hits = 0
    total = 0
    for trial in range(trials):
        noise = NoiseModel(kind="gaussian", seed=seed + trial)
        trace = simulate(spec, realization, noise, horizon)
        vals = trace.x @ gx + trace.u @ gu
        picks = vals[burn_in::N + 1]
        hits += int(np.sum(picks <= 1.0))
        total += picks.size
    p_hat = hits / total
    se = float(np.sqrt(max(p_hat * (1.0 - p_hat), 1e-12) / total))
    return McChanceResult(probability=p_hat, standard_error=se, samples=total)
