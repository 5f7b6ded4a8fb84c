"""The coupled feasible set of closed-loop kernels and projections onto it.

The joint feasible set ties together, over the lifted variable
(phi_x, phi_u):

* the forward recursion linking x-kernels to input kernels (with the
  impulse anchor at n = 1),
* its adjoint recursion (with the same anchor),
* boundary zeros (strict causality at n = 0, terminal blocks at n = N),
* delay-induced support masks, and
* one second-order-cone ball per operational constraint row: the stacked
  noise-image of that row must have Euclidean norm at most 1/Q(chance),
  the deterministic surrogate of a Gaussian chance constraint.

Euclidean projections are computed by consensus ADMM over three closed-form
sub-projection families (primal+boundary+masks, dual+masks, per-row SOC
balls), with a direct single-solve fast path whenever the SOC balls turn
out inactive at the affine projection.  All equality sub-projections are
cached, factorized once per set, and reused across projections.

Two metrics are supported.  The default measures distance in the full
lifted variable; ``metric="exact"`` measures it in the input kernels only
(the x-part rides along unpenalized), which is the metric under which the
forward-backward seeker's fixed point is the variational equilibrium.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .game_model import DimensionMismatchError, DynamicGameSpec
from .sls_core import (SupportMask, SystemResponse, _propagate_phi_x,
                       phi_u_zeros, support_pattern)

__all__ = [
    "AdmmConfig",
    "FeasibleSetSpec",
    "FeasibilityReport",
    "InfeasibleSetError",
    "ProjectionConvergenceError",
    "ProjectionEngine",
    "assemble",
    "feasibility_report",
    "normal_quantile",
    "project",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ProjectionConvergenceError(RuntimeError):
    def __init__(self, iterations, primal_residual, dual_residual):
        self.iterations = iterations
        self.primal_residual = primal_residual
        self.dual_residual = dual_residual
        super().__init__(
            f"projection did not converge in {iterations} iterations "
            f"(primal {primal_residual:.3e}, dual {dual_residual:.3e})")


class InfeasibleSetError(RuntimeError):
    """The constraint families admit no common point."""


# ---------------------------------------------------------------------------
# Standard normal quantile
# ---------------------------------------------------------------------------

def normal_quantile(rho: float) -> float:
    """Quantile of the standard normal law, to absolute error below 1e-10.

    Bisection brackets the root of the complementary-error-function form of
    the Gaussian CDF, then safeguarded Newton polishes it to double
    precision.  Positive exactly when rho > 0.5.
    """
    if not (0.0 < rho < 1.0):
        raise ValueError(f"quantile level must lie in (0, 1), got {rho}")
    if rho == 0.5:
        return 0.0
    if rho < 0.5:
        return -normal_quantile(1.0 - rho)

    tail = 1.0 - rho

    def g(x: float) -> float:
        return tail - 0.5 * math.erfc(x / _SQRT2)

    lo, hi = 0.0, 40.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if g(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    x = 0.5 * (lo + hi)
    for _ in range(60):
        pdf = _INV_SQRT_2PI * math.exp(-0.5 * x * x)
        if pdf == 0.0:
            break
        step = g(x) / pdf
        x_new = x - step
        if not (lo <= x_new <= hi):
            x_new = 0.5 * (lo + hi)
        if g(x_new) < 0.0:
            lo = x_new
        else:
            hi = x_new
        converged = abs(x_new - x) <= 1e-14 * (1.0 + abs(x_new))
        x = x_new
        if converged:
            break
    return x


# ---------------------------------------------------------------------------
# Set description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdmmConfig:
    """Consensus-ADMM settings for the projection solver."""

    penalty: float = 1.0
    max_iters: int = 5000
    primal_tol: float = 1e-10      # relative
    dual_tol: float = 1e-10        # relative
    residual_balancing: bool = True

    def __post_init__(self):
        if self.penalty <= 0.0:
            raise ValueError("penalty must be positive")
        if self.primal_tol <= 0.0 or self.dual_tol <= 0.0:
            raise ValueError("tolerances must be positive")


@dataclass
class FeasibleSetSpec:
    """Assembled constraints and cached projection factorizations.

    ``x_free``/``u_free`` mark which kernel entries are decision variables;
    everything outside is pinned to exact zero (masks + boundary).  SOC rows
    are stored as their coefficient vectors over the stacked (x, u) rows.
    The factorization caches are built lazily and reused across projections.
    """

    spec: DynamicGameSpec
    mask: SupportMask
    x_free: np.ndarray              # (N+1, N_x, N_x+N_y) bool
    u_free: np.ndarray              # (N+1, N_u, N_x+N_y) bool
    soc_gamma: np.ndarray           # (n_soc, N_x+N_u)
    soc_radius: float
    direct_budget: float = 5e7
    _cache: dict = field(default_factory=dict, repr=False)

    # Dimensions ------------------------------------------------------------

    @property
    def fir_horizon(self) -> int:
        return self.spec.fir_horizon

    @property
    def x_shape(self) -> tuple:
        s = self.spec
        return (s.fir_horizon + 1, s.state_dim, s.state_dim + s.output_dim)

    @property
    def u_shape(self) -> tuple:
        s = self.spec
        return (s.fir_horizon + 1, s.input_dim, s.state_dim + s.output_dim)

    @property
    def num_soc_rows(self) -> int:
        return self.soc_gamma.shape[0]

    def constraint_counts(self) -> dict:
        """Scalar row counts of each constraint family."""
        s = self.spec
        N, nx, nu = s.fir_horizon, s.state_dim, s.input_dim
        cols = nx + s.output_dim
        return {
            "primal_rows": N * nx * cols,
            "dual_anchor_rows": nx * nx,
            "dual_x_rows": (N - 1) * nx * nx,
            "dual_u_rows": N * nu * nx,
            "boundary_pins": int(np.sum(self.mask.x_mask & ~self.x_free)
                                 + np.sum(self.mask.u_mask_stacked() & ~self.u_free)),
            "mask_pins": int(np.sum(~self.mask.x_mask) + np.sum(~self.mask.u_mask_stacked())),
            "soc_rows": self.num_soc_rows,
        }

    # Flat-vector packing ----------------------------------------------------

    def _pack(self, X: np.ndarray, U: np.ndarray) -> np.ndarray:
        return np.concatenate([X.ravel(), U.ravel()])

    def _unpack(self, z: np.ndarray):
        nxt = int(np.prod(self.x_shape))
        return z[:nxt].reshape(self.x_shape), z[nxt:].reshape(self.u_shape)

    def _pin_vector(self) -> np.ndarray:
        return self._pack(self.x_free.astype(float), self.u_free.astype(float))

    # Cached sub-projectors --------------------------------------------------

    def _column_vec_indices(self, c: int):
        """Flat indices of column c entries, X-part then U-part, all n."""
        N1, nx, cols = self.x_shape
        nu = self.u_shape[1]
        x_base = (np.arange(N1)[:, None] * (nx * cols)
                  + np.arange(nx)[None, :] * cols + c)
        u_off = N1 * nx * cols
        u_base = (u_off + np.arange(N1)[:, None] * (nu * cols)
                  + np.arange(nu)[None, :] * cols + c)
        return np.concatenate([x_base.ravel(), u_base.ravel()])

    def _row_vec_indices(self, kind: str, r: int):
        """Flat indices of x-row r (kind 'x') or u-row r (kind 'u'), all n."""
        N1, nx, cols = self.x_shape
        nu = self.u_shape[1]
        if kind == "x":
            base = np.arange(N1)[:, None] * (nx * cols) + r * cols + np.arange(cols)[None, :]
        else:
            off = N1 * nx * cols
            base = off + np.arange(N1)[:, None] * (nu * cols) + r * cols + np.arange(cols)[None, :]
        return base.ravel()

    @staticmethod
    def _affine_projector(a_mat: np.ndarray, b: np.ndarray, free: np.ndarray,
                          what: str):
        """(P, z0) with proj(v) = z0 + P v onto {z: A z[free] = b, z[~free] = 0}.

        Raises InfeasibleSetError when the equality system is certified
        inconsistent with the pins.
        """
        dim = free.size
        af = a_mat[:, free]
        if af.shape[0] == 0 or af.shape[1] == 0:
            z0 = np.zeros(dim)
            P = np.zeros((dim, dim))
            P[np.ix_(free, free)] = np.eye(int(np.sum(free)))
            if af.shape[0] and b.size and np.max(np.abs(b)) > 1e-9:
                raise InfeasibleSetError(
                    f"{what}: equations over fully pinned variables with nonzero rhs")
            return P, z0
        u_svd, s, vt = np.linalg.svd(af, full_matrices=False)
        cut = s > (1e-12 * s[0] if s[0] > 0 else np.inf)
        pinv = (vt[cut].T / s[cut]) @ u_svd[:, cut].T
        z0f = pinv @ b
        if np.max(np.abs(af @ z0f - b)) > 1e-8 * max(1.0, np.max(np.abs(b))):
            raise InfeasibleSetError(
                f"{what}: equality constraints are inconsistent with the "
                "support masks / boundary pins (empty feasible set)")
        nfree = af.shape[1]
        P_free = np.eye(nfree) - pinv @ af
        P = np.zeros((dim, dim))
        P[np.ix_(free, free)] = P_free
        z0 = np.zeros(dim)
        z0[free] = z0f
        return P, z0

    def _primal_column_cache(self):
        if "primal_cols" in self._cache:
            return self._cache["primal_cols"]
        s = self.spec
        N, nx, nu = s.fir_horizon, s.state_dim, s.input_dim
        cols = nx + s.output_dim
        b_u = s.B_u_stacked
        out = []
        for c in range(cols):
            # variables: [X[0..N][*, c], U[0..N][*, c]] flattened n-major
            dim = (N + 1) * (nx + nu)
            free = np.concatenate([self.x_free[:, :, c].ravel(),
                                   self.u_free[:, :, c].ravel()])
            a_mat = np.zeros((N * nx, dim))
            b = np.zeros(N * nx)
            u_off = (N + 1) * nx
            for n in range(N):
                r0 = n * nx
                a_mat[r0:r0 + nx, (n + 1) * nx:(n + 2) * nx] = np.eye(nx)
                a_mat[r0:r0 + nx, n * nx:(n + 1) * nx] -= s.A
                a_mat[r0:r0 + nx, u_off + n * nu:u_off + (n + 1) * nu] -= b_u
                if n == 0 and c < nx:
                    b[r0 + c] = 1.0
            out.append(self._affine_projector(a_mat, b, free,
                                              f"forward recursion, column {c}"))
        self._cache["primal_cols"] = out
        return out

    def _dual_row_cache(self):
        if "dual_rows" in self._cache:
            return self._cache["dual_rows"]
        s = self.spec
        N, nx, ny = s.fir_horizon, s.state_dim, s.output_dim
        cols = nx + ny
        x_rows, u_rows = [], []
        for r in range(nx):
            dim = (N + 1) * cols
            free = self.x_free[:, r, :].ravel()
            a_mat = np.zeros((nx + (N - 1) * nx, dim))
            b = np.zeros(nx + (N - 1) * nx)
            # anchor: X[1][r, 0:nx] = e_r
            a_mat[:nx, cols:cols + nx] = np.eye(nx)
            b[r] = 1.0
            for n in range(1, N):
                r0 = nx + (n - 1) * nx
                a_mat[r0:r0 + nx, (n + 1) * cols:(n + 1) * cols + nx] = np.eye(nx)
                a_mat[r0:r0 + nx, n * cols:n * cols + nx] -= s.A.T
                a_mat[r0:r0 + nx, n * cols + nx:(n + 1) * cols] -= s.C.T
            x_rows.append(self._affine_projector(a_mat, b, free,
                                                 f"adjoint recursion, x-row {r}"))
        for r in range(s.input_dim):
            dim = (N + 1) * cols
            free = self.u_free[:, r, :].ravel()
            a_mat = np.zeros((N * nx, dim))
            b = np.zeros(N * nx)
            for n in range(N):
                r0 = n * nx
                a_mat[r0:r0 + nx, (n + 1) * cols:(n + 1) * cols + nx] = np.eye(nx)
                a_mat[r0:r0 + nx, n * cols:n * cols + nx] -= s.A.T
                a_mat[r0:r0 + nx, n * cols + nx:(n + 1) * cols] -= s.C.T
            u_rows.append(self._affine_projector(a_mat, b, free,
                                                 f"adjoint recursion, u-row {r}"))
        self._cache["dual_rows"] = (x_rows, u_rows)
        return self._cache["dual_rows"]

    def _ww_eig(self):
        if "ww_eig" not in self._cache:
            ww2 = self.spec.noise_stack @ self.spec.noise_stack.T
            lam, q = np.linalg.eigh(ww2)
            lam = np.maximum(lam, 0.0)
            self._cache["ww_eig"] = (lam, q)
        return self._cache["ww_eig"]

    # Sub-projections ---------------------------------------------------------

    def project_primal_family(self, z: np.ndarray) -> np.ndarray:
        """Projection onto forward recursion + boundary + masks (column-wise)."""
        X, U = self._unpack(z)
        caches = self._primal_column_cache()
        Xo, Uo = np.zeros_like(X), np.zeros_like(U)
        N1, nx = self.x_shape[0], self.x_shape[1]
        for c, (P, z0) in enumerate(caches):
            v = np.concatenate([X[:, :, c].ravel(), U[:, :, c].ravel()])
            w = z0 + P @ v
            Xo[:, :, c] = w[:N1 * nx].reshape(N1, nx)
            Uo[:, :, c] = w[N1 * nx:].reshape(N1, self.u_shape[1])
        return self._pack(Xo, Uo)

    def project_dual_family(self, z: np.ndarray) -> np.ndarray:
        """Projection onto adjoint recursion + masks (row-wise)."""
        X, U = self._unpack(z)
        x_rows, u_rows = self._dual_row_cache()
        Xo, Uo = np.zeros_like(X), np.zeros_like(U)
        N1 = self.x_shape[0]
        cols = self.x_shape[2]
        for r, (P, z0) in enumerate(x_rows):
            w = z0 + P @ X[:, r, :].ravel()
            Xo[:, r, :] = w.reshape(N1, cols)
        for r, (P, z0) in enumerate(u_rows):
            w = z0 + P @ U[:, r, :].ravel()
            Uo[:, r, :] = w.reshape(N1, cols)
        return self._pack(Xo, Uo)

    def soc_image(self, z: np.ndarray, i: int) -> np.ndarray:
        """Stacked noise image of SOC row i, one (N_x+N_y)-vector per n,
        mapped through W_w; flattened to length (N+1) * N_w."""
        X, U = self._unpack(z)
        nx = self.x_shape[1]
        gx = self.soc_gamma[i, :nx]
        gu = self.soc_gamma[i, nx:]
        s = np.einsum("i,nij->nj", gx, X) + np.einsum("i,nij->nj", gu, U)
        return (s @ self.spec.noise_stack).ravel()

    def project_soc_row(self, z: np.ndarray, i: int) -> np.ndarray:
        """Euclidean projection onto {z : ||image_i(z)|| <= radius}.

        The row map has rank one across the (x, u) rows, so the projection
        reduces to scaling the row image in the eigenbasis of W_w W_w' by
        1/(1 + mu c lambda_j), with the scalar mu found by a safeguarded
        Newton solve of the secular equation.
        """
        X, U = self._unpack(z)
        nx = self.x_shape[1]
        gamma = self.soc_gamma[i]
        c = float(gamma @ gamma)
        if c == 0.0:
            return z.copy()
        lam, q = self._ww_eig()
        gx, gu = gamma[:nx], gamma[nx:]
        s = np.einsum("i,nij->nj", gx, X) + np.einsum("i,nij->nj", gu, U)
        t = s @ q                                   # (N+1, nx+ny) coords
        norm2 = float(np.sum(lam * t * t))
        r2 = self.soc_radius ** 2
        if norm2 <= r2 * (1.0 + 1e-14):
            return z.copy()

        t2 = t * t

        def image_norm2(mu: float) -> float:
            d = 1.0 + mu * c * lam
            return float(np.sum(lam * t2 / (d * d)))

        mu_lo, mu_hi = 0.0, 1.0
        while image_norm2(mu_hi) > r2:
            mu_hi *= 4.0
            if mu_hi > 1e300:
                break
        mu = 0.5 * mu_hi
        for _ in range(200):
            d = 1.0 + mu * c * lam
            f = float(np.sum(lam * t2 / (d * d))) - r2
            if f > 0.0:
                mu_lo = mu
            else:
                mu_hi = mu
            fp = float(np.sum(-2.0 * c * lam * lam * t2 / (d * d * d)))
            mu_new = mu - f / fp if fp != 0.0 else 0.5 * (mu_lo + mu_hi)
            if not (mu_lo < mu_new < mu_hi):
                mu_new = 0.5 * (mu_lo + mu_hi)
            if abs(mu_new - mu) <= 1e-15 * (1.0 + abs(mu)):
                mu = mu_new
                break
            mu = mu_new

        d = 1.0 + mu * c * lam
        s_star = (t / d) @ q.T
        # Z_n = V_n - mu gamma' (s_star ww2)
        corr = mu * (s_star @ (q * lam) @ q.T)       # s_star @ ww2
        Xo = X - np.einsum("i,nj->nij", gx, corr)
        Uo = U - np.einsum("i,nj->nij", gu, corr)
        return self._pack(Xo, Uo)

    # Direct (single-solve) affine projections --------------------------------

    def _direct_cache(self, metric: str):
        key = f"direct_{metric}"
        if key in self._cache:
            return self._cache[key]
        s = self.spec
        N, nx, nu, ny = s.fir_horizon, s.state_dim, s.input_dim, s.output_dim
        cols = nx + ny
        free = np.concatenate([self.x_free.ravel(), self.u_free.ravel()])
        n_free = int(np.sum(free))
        idx_of = -np.ones(free.size, dtype=int)
        idx_of[free] = np.arange(n_free)

        rows = []
        rhs = []

        def flat_x(n, i, c):
            return n * nx * cols + i * cols + c

        def flat_u(n, j, c):
            return (N + 1) * nx * cols + n * nu * cols + j * cols + c

        b_u = s.B_u_stacked
        # forward recursion
        for n in range(N):
            for i in range(nx):
                for c in range(cols):
                    row = {}
                    row[flat_x(n + 1, i, c)] = 1.0
                    for k in range(nx):
                        if s.A[i, k] != 0.0:
                            row[flat_x(n, k, c)] = row.get(flat_x(n, k, c), 0.0) - s.A[i, k]
                    for j in range(nu):
                        if b_u[i, j] != 0.0:
                            row[flat_u(n, j, c)] = row.get(flat_u(n, j, c), 0.0) - b_u[i, j]
                    rows.append(row)
                    rhs.append(1.0 if (n == 0 and c < nx and i == c) else 0.0)
        # adjoint anchor
        for r in range(nx):
            for c in range(nx):
                rows.append({flat_x(1, r, c): 1.0})
                rhs.append(1.0 if r == c else 0.0)
        # adjoint recursions
        for n in range(1, N):
            for r in range(nx):
                for c in range(nx):
                    row = {flat_x(n + 1, r, c): 1.0}
                    for k in range(nx):
                        if s.A[k, c] != 0.0:
                            row[flat_x(n, r, k)] = row.get(flat_x(n, r, k), 0.0) - s.A[k, c]
                    for m in range(ny):
                        if s.C[m, c] != 0.0:
                            row[flat_x(n, r, nx + m)] = row.get(flat_x(n, r, nx + m), 0.0) - s.C[m, c]
                    rows.append(row)
                    rhs.append(0.0)
        for n in range(N):
            for r in range(nu):
                for c in range(nx):
                    row = {flat_u(n + 1, r, c): 1.0}
                    for k in range(nx):
                        if s.A[k, c] != 0.0:
                            row[flat_u(n, r, k)] = row.get(flat_u(n, r, k), 0.0) - s.A[k, c]
                    for m in range(ny):
                        if s.C[m, c] != 0.0:
                            row[flat_u(n, r, nx + m)] = row.get(flat_u(n, r, nx + m), 0.0) - s.C[m, c]
                    rows.append(row)
                    rhs.append(0.0)

        n_con = len(rows)
        if metric == "lifted":
            budget_cost = n_con * n_free
        else:
            budget_cost = (n_con + n_free) ** 2
        if budget_cost > self.direct_budget:
            self._cache[key] = None
            return None

        a_mat = np.zeros((n_con, n_free))
        b = np.array(rhs)
        drop = np.zeros(n_con, dtype=bool)
        for ridx, row in enumerate(rows):
            for col, val in row.items():
                if free[col]:
                    a_mat[ridx, idx_of[col]] = val
        # rows touching only pinned variables must have zero rhs
        for ridx, row in enumerate(rows):
            if not any(free[col] for col in row):
                if abs(b[ridx]) > 1e-12:
                    raise InfeasibleSetError(
                        "affine constraints conflict with support masks / "
                        "boundary pins (empty feasible set)")
                drop[ridx] = True
        if np.any(drop):
            a_mat, b = a_mat[~drop], b[~drop]
            n_con = a_mat.shape[0]

        if metric == "lifted":
            u_svd, sv, vt = np.linalg.svd(a_mat, full_matrices=False)
            cut = sv > (1e-11 * sv[0] if sv.size and sv[0] > 0 else np.inf)
            pinv = (vt[cut].T / sv[cut]) @ u_svd[:, cut].T
            z0 = pinv @ b
            if a_mat.size and np.max(np.abs(a_mat @ z0 - b)) > 1e-7 * max(1.0, np.max(np.abs(b))):
                raise InfeasibleSetError(
                    "affine constraint families have no common point")
            self._cache[key] = ("lifted", free, pinv, a_mat, b)
        else:
            # KKT for min 0.5||U - vU||^2 s.t. A z = b (X-part unpenalized)
            p_diag = np.concatenate([
                np.zeros(int(np.prod(self.x_shape))),
                np.ones(int(np.prod(self.u_shape)))])[free]
            kkt = np.zeros((n_free + n_con, n_free + n_con))
            kkt[:n_free, :n_free] = np.diag(p_diag)
            kkt[:n_free, n_free:] = a_mat.T
            kkt[n_free:, :n_free] = a_mat
            pinv = np.linalg.pinv(kkt, rcond=1e-11)
            self._cache[key] = ("exact", free, pinv, a_mat, b, p_diag, n_free)
        return self._cache[key]

    def project_affine_direct(self, z: np.ndarray, metric: str):
        """One-shot projection onto all affine constraints (no SOC).

        Returns None when the cached factorization would exceed the element
        budget; callers then fall back to ADMM.
        """
        cache = self._direct_cache(metric)
        if cache is None:
            return None
        if cache[0] == "lifted":
            _, free, pinv, a_mat, b = cache
            out = np.zeros_like(z)
            vf = z[free]
            out[free] = vf - pinv @ (a_mat @ vf - b)
            return out
        _, free, pinv, a_mat, b, p_diag, n_free = cache
        vf = z[free]
        rhs = np.concatenate([p_diag * vf, b])
        sol = pinv @ rhs
        out = np.zeros_like(z)
        out[free] = sol[:n_free]
        return out

    def soc_row_norms(self, z: np.ndarray) -> np.ndarray:
        return np.array([float(np.linalg.norm(self.soc_image(z, i)))
                         for i in range(self.num_soc_rows)])


def assemble(spec: DynamicGameSpec) -> FeasibleSetSpec:
    """Build the joint feasible set of a game instance.

    Combines the forward/adjoint recursions, causality and terminal zeros,
    the delay support masks, and one SOC row of radius 1/Q(chance_level)
    per operational constraint row: the global rows [G_x G_u] followed by
    each player's local rows placed in its own input columns.
    """
    mask = support_pattern(spec)
    nx, nu = spec.state_dim, spec.input_dim
    N = spec.fir_horizon

    x_free = mask.x_mask.copy()
    x_free[0] = False
    x_free[N] = False
    u_free = mask.u_mask_stacked().copy()
    u_free[0, :, :nx] = False
    u_free[N] = False

    n_global = spec.G_x.shape[0]
    n_local = sum(g.shape[0] for g in spec.G_up)
    gamma = np.zeros((n_global + n_local, nx + nu))
    gamma[:n_global, :nx] = spec.G_x
    gamma[:n_global, nx:] = spec.G_u
    r = n_global
    for p, sl in enumerate(spec.input_slices):
        g = spec.G_up[p]
        if g.shape[0]:
            gamma[r:r + g.shape[0], nx + sl.start:nx + sl.stop] = g
            r += g.shape[0]

    radius = 1.0 / normal_quantile(spec.chance_level)
    return FeasibleSetSpec(spec=spec, mask=mask, x_free=x_free, u_free=u_free,
                           soc_gamma=gamma, soc_radius=radius)


# ---------------------------------------------------------------------------
# Projection driver
# ---------------------------------------------------------------------------

@dataclass
class ProjectionInfo:
    mode: str
    iterations: int
    primal_residual: float
    dual_residual: float
    penalty: float


class ProjectionEngine:
    """Reusable projection solver holding warm-start state across calls.

    One engine per (set, config, metric); reentrant in the sense that a
    fresh engine with the same arguments reproduces the same outputs.
    """

    def __init__(self, fset: FeasibleSetSpec, config: AdmmConfig | None = None,
                 metric: str = "lifted", on_iteration=None):
        if metric not in ("lifted", "exact"):
            raise ValueError(f"metric must be 'lifted' or 'exact', got {metric!r}")
        self.fset = fset
        self.config = config or AdmmConfig()
        self.metric = metric
        self.on_iteration = on_iteration
        self._state = None          # (z_list, u_list, rho)

    def reset(self):
        self._state = None

    def project(self, phi_u_plus: np.ndarray, warm: bool = True):
        """Project onto the full set; returns (phi_u, ProjectionInfo)."""
        fset = self.fset
        spec = fset.spec
        phi_u_plus = np.asarray(phi_u_plus, dtype=float)
        if phi_u_plus.shape != fset.u_shape:
            raise DimensionMismatchError(
                "phi_u,set", f"expected {fset.u_shape}, got {phi_u_plus.shape}")
        x_plus = _propagate_phi_x(spec, phi_u_plus)
        v = fset._pack(x_plus, phi_u_plus)

        direct = fset.project_affine_direct(v, self.metric)
        if direct is not None:
            norms = fset.soc_row_norms(direct)
            if norms.size == 0 or np.max(norms) <= fset.soc_radius * (1.0 + 1e-12):
                _, U = fset._unpack(direct)
                U = U * fset.u_free
                return U, ProjectionInfo("direct", 0, 0.0, 0.0, self.config.penalty)

        return self._admm(v, warm)

    # Consensus ADMM ----------------------------------------------------------

    def _sub_projections(self):
        fset = self.fset
        projs = [fset.project_primal_family, fset.project_dual_family]
        for i in range(fset.num_soc_rows):
            projs.append(lambda z, i=i: fset.project_soc_row(z, i))
        return projs

    def _admm(self, v: np.ndarray, warm: bool):
        fset = self.fset
        cfg = self.config
        projs = self._sub_projections()
        m = len(projs)
        dim = v.size
        u_sel = np.zeros(dim, dtype=bool)
        u_sel[int(np.prod(fset.x_shape)):] = True

        if warm and self._state is not None:
            z_list, u_list, rho = self._state
            z_list = [z.copy() for z in z_list]
            u_list = [u.copy() for u in u_list]
        else:
            seed = fset.project_affine_direct(v, self.metric)
            if seed is None:
                seed = fset.project_primal_family(v)
            z_list = [seed.copy() for _ in range(m)]
            u_list = [np.zeros(dim) for _ in range(m)]
            rho = cfg.penalty

        scale = max(1.0, float(np.linalg.norm(v)))
        x = np.zeros(dim)
        primal_res = dual_res = np.inf
        stall_window, last_best, best_res = 250, np.inf, np.inf
        grew = 0

        for it in range(1, cfg.max_iters + 1):
            zbar = np.mean(z_list, axis=0)
            ubar = np.mean(u_list, axis=0)
            x_prev = x
            if self.metric == "lifted":
                x = (v + m * rho * (zbar - ubar)) / (1.0 + m * rho)
            else:
                x = zbar - ubar
                x[u_sel] = (v[u_sel] + m * rho * (zbar - ubar)[u_sel]) / (1.0 + m * rho)

            primal_sq = 0.0
            dual_sq = 0.0
            for i, proj in enumerate(projs):
                z_new = proj(x + u_list[i])
                dual_sq += float(np.sum((z_new - z_list[i]) ** 2))
                z_list[i] = z_new
                u_list[i] += x - z_new
                primal_sq += float(np.sum((x - z_new) ** 2))
            primal_res = math.sqrt(primal_sq) / scale
            dual_res = rho * math.sqrt(dual_sq) / scale

            if self.on_iteration is not None:
                self.on_iteration({"iter": it, "primal_residual": primal_res,
                                   "dual_residual": dual_res, "penalty": rho})

            if primal_res <= cfg.primal_tol and dual_res <= cfg.dual_tol and it > 1:
                break

            if cfg.residual_balancing and it % 25 == 0:
                if primal_res > 10.0 * dual_res:
                    rho *= 2.0
                    u_list = [u / 2.0 for u in u_list]
                elif dual_res > 10.0 * primal_res:
                    rho /= 2.0
                    u_list = [u * 2.0 for u in u_list]

            # incompatibility heuristic: stalled primal residual with steadily
            # growing duals signals an empty intersection
            if it % stall_window == 0:
                unorm = math.sqrt(sum(float(np.sum(u * u)) for u in u_list))
                if primal_res > max(1e3 * cfg.primal_tol, 1e-6) and \
                        primal_res > 0.98 * last_best and unorm > 10.0 * scale:
                    grew += 1
                    if grew >= 3:
                        raise InfeasibleSetError(
                            "projection duals diverge while the primal residual "
                            f"stalls at {primal_res:.3e}: constraint families "
                            "appear incompatible")
                else:
                    grew = 0
                last_best = min(last_best, primal_res)
            best_res = min(best_res, primal_res)
        else:
            raise ProjectionConvergenceError(cfg.max_iters, primal_res, dual_res)

        self._state = ([z.copy() for z in z_list], [u.copy() for u in u_list], rho)
        _, U = fset._unpack(x)
        U = U * fset.u_free
        return U, ProjectionInfo("admm", it, primal_res, dual_res, rho)


def project(fset: FeasibleSetSpec, phi_u_plus: np.ndarray,
            config: AdmmConfig | None = None, metric: str = "lifted",
            on_iteration=None) -> np.ndarray:
    """Euclidean projection of input kernels onto the feasible set.

    Cold-start convenience wrapper around ProjectionEngine; see the module
    docstring for the two supported metrics.
    """
    engine = ProjectionEngine(fset, config=config, metric=metric,
                              on_iteration=on_iteration)
    phi_u, _ = engine.project(phi_u_plus, warm=False)
    return phi_u


# ---------------------------------------------------------------------------
# Feasibility reporting
# ---------------------------------------------------------------------------

@dataclass
class FeasibilityReport:
    primal_residual: float
    dual_residual: float
    anchor_residual: float
    boundary_residual: float
    mask_residual: float
    soc_slacks: np.ndarray

    @property
    def worst(self) -> float:
        worst = max(self.primal_residual, self.dual_residual,
                    self.anchor_residual, self.boundary_residual,
                    self.mask_residual)
        if self.soc_slacks.size:
            worst = max(worst, float(-np.min(self.soc_slacks)))
        return worst

    def to_dict(self) -> dict:
        return {
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "anchor_residual": self.anchor_residual,
            "boundary_residual": self.boundary_residual,
            "mask_residual": self.mask_residual,
            "soc_slacks": self.soc_slacks.tolist(),
            "worst": self.worst,
        }


def feasibility_report(fset: FeasibleSetSpec, phi_u) -> FeasibilityReport:
    """Named residuals of every constraint family at a point.

    Accepts either stacked input kernels (the x-kernels are then implied by
    forward propagation, so the forward-recursion residual is structurally
    zero) or a full SystemResponse with explicit x-kernels.
    """
    spec = fset.spec
    nx = spec.state_dim
    if isinstance(phi_u, SystemResponse):
        X = phi_u.phi_x_stacked()
        U = phi_u.phi_u_stacked()
    else:
        U = np.asarray(phi_u, dtype=float)
        X = _propagate_phi_x(spec, U)

    N = spec.fir_horizon
    b_u = spec.B_u_stacked
    impulse = np.hstack([np.eye(nx), np.zeros((nx, spec.output_dim))])
    primal = 0.0
    for n in range(N):
        target = impulse if n == 0 else spec.A @ X[n]
        res = X[n + 1] - target - b_u @ U[n]
        primal = max(primal, float(np.max(np.abs(res))))

    anchor = float(np.max(np.abs(X[1, :, :nx] - np.eye(nx))))

    dual = 0.0
    for n in range(1, N):
        res = X[n + 1, :, :nx] - X[n, :, :nx] @ spec.A - X[n, :, nx:] @ spec.C
        dual = max(dual, float(np.max(np.abs(res))))
    for n in range(N):
        res = U[n + 1, :, :nx] - U[n, :, :nx] @ spec.A - U[n, :, nx:] @ spec.C
        dual = max(dual, float(np.max(np.abs(res))))

    boundary = max(
        float(np.max(np.abs(X[0]))) if X[0].size else 0.0,
        float(np.max(np.abs(X[N]))) if X[N].size else 0.0,
        float(np.max(np.abs(U[0, :, :nx]))) if U[0, :, :nx].size else 0.0,
        float(np.max(np.abs(U[N]))) if U[N].size else 0.0)

    mask_res = 0.0
    xm = fset.mask.x_mask
    um = fset.mask.u_mask_stacked()
    if np.any(~xm):
        mask_res = max(mask_res, float(np.max(np.abs(X[~xm]))))
    if np.any(~um):
        mask_res = max(mask_res, float(np.max(np.abs(U[~um]))))

    z = fset._pack(X, U)
    norms = fset.soc_row_norms(z)
    slacks = fset.soc_radius - norms
    return FeasibilityReport(primal_residual=primal, dual_residual=dual,
                             anchor_residual=anchor,
                             boundary_residual=boundary,
                             mask_residual=mask_res, soc_slacks=slacks)
