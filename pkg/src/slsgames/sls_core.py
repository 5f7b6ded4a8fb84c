"""Finite-impulse-response closed-loop parametrization.

A joint policy is represented by its closed-loop kernels: per time index
n = 0..N, the blocks mapping process/measurement noise to state (phi_xx,
phi_xy) and to each player's input (phi_ux^p, phi_uy^p).  This module
provides the support masks that encode actuation/communication delays, the
forward (primal) and backward (dual) recursions the kernels must satisfy,
player objectives and their gradients, the dense coupling blocks behind
the monotonicity constants, and the reconstruction of a time-domain
controller from a feasible response.

Conventions
-----------
* All kernels are stored for n = 0..N inclusive; boundary-constrained
  blocks (n = 0 strictly causal zeros, n = N terminal zeros) are
  materialized so shapes stay uniform.
* The stacked input kernel ``phi_u`` is a single array of shape
  ``(N+1, N_u, N_x+N_y)``; players own contiguous row slices of it, with
  the first N_x columns the x-noise part and the rest the y-noise part.
* ``phi_x`` stacks [phi_xx, phi_xy] the same way, shape (N+1, N_x, N_x+N_y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .game_model import DimensionMismatchError, DynamicGameSpec

__all__ = [
    "ControllerRealization",
    "HessianBudgetError",
    "NoiseAggregate",
    "SupportMask",
    "SystemResponse",
    "delay_exponent",
    "gradient_player",
    "hessian_blocks",
    "monotonicity_constants",
    "objective",
    "propagate_primal",
    "pseudo_gradient",
    "reconstruct_policy",
    "residual_dual",
    "support_pattern",
]

CAUSALITY_ATOL = 1e-9


class HessianBudgetError(RuntimeError):
    """Dense coupling-block assembly would exceed the element budget.

    Gradients remain available through the matrix-free two-sweep path."""


@dataclass(frozen=True)
class NoiseAggregate:
    """Vertical stack of B_w over D_w: the joint noise injection map."""

    W_w: np.ndarray

    @classmethod
    def from_spec(cls, spec: DynamicGameSpec) -> "NoiseAggregate":
        return cls(W_w=spec.noise_stack)


def phi_u_zeros(spec: DynamicGameSpec) -> np.ndarray:
    return np.zeros((spec.fir_horizon + 1, spec.input_dim,
                     spec.state_dim + spec.output_dim))


def _check_phi_u(spec: DynamicGameSpec, phi_u: np.ndarray) -> np.ndarray:
    phi_u = np.asarray(phi_u, dtype=float)
    want = (spec.fir_horizon + 1, spec.input_dim, spec.state_dim + spec.output_dim)
    if phi_u.shape != want:
        raise DimensionMismatchError("phi_u,spec",
                                     f"expected {want}, got {phi_u.shape}")
    return phi_u


# ---------------------------------------------------------------------------
# System response container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SystemResponse:
    """Closed-loop kernels of a joint policy, n = 0..fir_horizon."""

    fir_horizon: int
    phi_xx: np.ndarray          # (N+1, N_x, N_x)
    phi_xy: np.ndarray          # (N+1, N_x, N_y)
    phi_ux: tuple               # per player (N+1, N_u^p, N_x)
    phi_uy: tuple               # per player (N+1, N_u^p, N_y)

    @property
    def state_dim(self) -> int:
        return self.phi_xx.shape[1]

    @property
    def output_dim(self) -> int:
        return self.phi_xy.shape[2]

    @property
    def num_players(self) -> int:
        return len(self.phi_ux)

    def phi_u_stacked(self) -> np.ndarray:
        """All players' kernels as one (N+1, N_u, N_x+N_y) array."""
        per_player = [np.concatenate([ux, uy], axis=2)
                      for ux, uy in zip(self.phi_ux, self.phi_uy)]
        return np.concatenate(per_player, axis=1)

    def phi_x_stacked(self) -> np.ndarray:
        return np.concatenate([self.phi_xx, self.phi_xy], axis=2)

    @classmethod
    def from_phi_u(cls, spec: DynamicGameSpec, phi_u: np.ndarray) -> "SystemResponse":
        """Build a full response by forward-propagating the x-kernels."""
        phi_u = _check_phi_u(spec, phi_u)
        phi_xx, phi_xy = propagate_primal(spec, phi_u)
        nx = spec.state_dim
        ux, uy = [], []
        for sl in spec.input_slices:
            ux.append(phi_u[:, sl, :nx].copy())
            uy.append(phi_u[:, sl, nx:].copy())
        return cls(fir_horizon=spec.fir_horizon, phi_xx=phi_xx, phi_xy=phi_xy,
                   phi_ux=tuple(ux), phi_uy=tuple(uy))

    def to_dict(self) -> dict:
        return {
            "fir_horizon": self.fir_horizon,
            "phi_xx": [b.tolist() for b in self.phi_xx],
            "phi_xy": [b.tolist() for b in self.phi_xy],
            "phi_ux": [[b.tolist() for b in kern] for kern in self.phi_ux],
            "phi_uy": [[b.tolist() for b in kern] for kern in self.phi_uy],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SystemResponse":
        return cls(
            fir_horizon=int(doc["fir_horizon"]),
            phi_xx=np.array(doc["phi_xx"], dtype=float),
            phi_xy=np.array(doc["phi_xy"], dtype=float),
            phi_ux=tuple(np.array(k, dtype=float) for k in doc["phi_ux"]),
            phi_uy=tuple(np.array(k, dtype=float) for k in doc["phi_uy"]))


# ---------------------------------------------------------------------------
# Support masks (actuation / communication delays)
# ---------------------------------------------------------------------------

def delay_exponent(n: int, d_a: int, d_c: int) -> int:
    """Hops of dynamics pattern reachable at kernel index n: max(0, floor((n-d_a)/d_c))."""
    return max(0, (n - d_a) // d_c)


@dataclass(frozen=True)
class SupportMask:
    """Boolean sparsity patterns for the x-block and per-player u-blocks."""

    x_mask: np.ndarray          # (N+1, N_x, N_x+N_y) bool
    u_masks: tuple              # per player (N+1, N_u^p, N_x+N_y) bool

    def u_mask_stacked(self) -> np.ndarray:
        return np.concatenate(self.u_masks, axis=1)


def support_pattern(spec: DynamicGameSpec) -> SupportMask:
    """Delay-induced sparsity patterns of the closed-loop kernels.

    At kernel index n both x- and u-blocks are confined to the support of

        [ A^a_n          A^a_n C'          ]
        [ B_u' A^a_n     B_u' A^a_{n+1} C' ]

    with a_n = max(0, floor((n - d_a)/d_c)).  Patterns are computed over the
    boolean semiring of |A|, |B_u|, |C| so numeric cancellation can never
    tighten a mask.
    """
    N = spec.fir_horizon
    pat_a = spec.A != 0.0
    pat_bu_t = spec.B_u_stacked.T != 0.0
    pat_ct = spec.C.T != 0.0
    nx = spec.state_dim

    max_exp = delay_exponent(N + 1, spec.d_a, spec.d_c)
    apows = [np.eye(nx, dtype=bool)]
    for _ in range(max_exp):
        apows.append((apows[-1].astype(np.uint8) @ pat_a.astype(np.uint8)) > 0)

    x_mask = np.zeros((N + 1, nx, nx + spec.output_dim), dtype=bool)
    u_mask = np.zeros((N + 1, spec.input_dim, nx + spec.output_dim), dtype=bool)
    bu8 = pat_bu_t.astype(np.uint8)
    for n in range(N + 1):
        a_n = apows[delay_exponent(n, spec.d_a, spec.d_c)]
        a_n1 = apows[delay_exponent(n + 1, spec.d_a, spec.d_c)]
        a8, a18, c8 = a_n.astype(np.uint8), a_n1.astype(np.uint8), pat_ct.astype(np.uint8)
        x_mask[n, :, :nx] = a_n
        x_mask[n, :, nx:] = (a8 @ c8) > 0
        u_mask[n, :, :nx] = (bu8 @ a8) > 0
        u_mask[n, :, nx:] = (bu8 @ a18 @ c8) > 0
    u_masks = tuple(u_mask[:, sl, :].copy() for sl in spec.input_slices)
    return SupportMask(x_mask=x_mask, u_masks=u_masks)


# ---------------------------------------------------------------------------
# Primal / dual recursions
# ---------------------------------------------------------------------------

def propagate_primal(spec: DynamicGameSpec, phi_u: np.ndarray):
    """Forward-propagate the unique x-kernels induced by the input kernels.

    phi_x[1] = [I 0] + B_u phi_u[0] and phi_x[n+1] = A phi_x[n] + B_u phi_u[n]
    for n = 1..N-1, with phi_x[0] = 0.  The terminal block phi_x[N] is
    whatever the recursion produces; feasibility of phi_x[N] = 0 is reported
    elsewhere, never enforced here.

    Returns (phi_xx, phi_xy).
    """
    phi_u = _check_phi_u(spec, phi_u)
    phi_x = _propagate_phi_x(spec, phi_u)
    nx = spec.state_dim
    return phi_x[:, :, :nx].copy(), phi_x[:, :, nx:].copy()


def _propagate_phi_x(spec: DynamicGameSpec, phi_u: np.ndarray) -> np.ndarray:
    N = spec.fir_horizon
    nx, ny = spec.state_dim, spec.output_dim
    b_u = spec.B_u_stacked
    phi_x = np.zeros((N + 1, nx, nx + ny))
    impulse = np.hstack([np.eye(nx), np.zeros((nx, ny))])
    phi_x[1] = impulse + b_u @ phi_u[0]
    for n in range(1, N):
        phi_x[n + 1] = spec.A @ phi_x[n] + b_u @ phi_u[n]
    return phi_x


def residual_dual(spec: DynamicGameSpec, response: SystemResponse) -> float:
    """Max-abs residual of the backward (adjoint) recursions and the anchor.

    Equations checked: phi_xx[1] = I; for n = 1..N-1,
    phi_xx[n+1] = phi_xx[n] A + phi_xy[n] C; and per player, for n = 0..N-1,
    phi_ux[n+1] = phi_ux[n] A + phi_uy[n] C.  Zero iff dual-feasible.
    """
    N = spec.fir_horizon
    res = float(np.max(np.abs(response.phi_xx[1] - np.eye(spec.state_dim))))
    for n in range(1, N):
        r = response.phi_xx[n + 1] - response.phi_xx[n] @ spec.A - response.phi_xy[n] @ spec.C
        res = max(res, float(np.max(np.abs(r))) if r.size else 0.0)
    for ux, uy in zip(response.phi_ux, response.phi_uy):
        for n in range(N):
            r = ux[n + 1] - ux[n] @ spec.A - uy[n] @ spec.C
            res = max(res, float(np.max(np.abs(r))) if r.size else 0.0)
    return res


# ---------------------------------------------------------------------------
# Objectives and gradients
# ---------------------------------------------------------------------------

def objective(spec: DynamicGameSpec, response: SystemResponse, p: int) -> float:
    """Player p's closed-loop cost: the steady-state energy of its
    performance signal, sum_n || [W_x^p W_u^p][phi_x[n]; phi_u^p[n]] W_w ||_F^2."""
    w_w = spec.noise_stack
    wx, wu = spec.W_x[p], spec.W_u[p]
    phi_x = response.phi_x_stacked()
    phi_up = np.concatenate([response.phi_ux[p], response.phi_uy[p]], axis=2)
    total = 0.0
    for n in range(spec.fir_horizon + 1):
        z = (wx @ phi_x[n] + wu @ phi_up[n]) @ w_w
        total += float(np.sum(z * z))
    return total


def gradient_player(spec: DynamicGameSpec, phi_u_all: np.ndarray, p: int,
                    phi_x: np.ndarray | None = None) -> np.ndarray:
    """Gradient of player p's objective in its own input kernel.

    Uses one forward sweep (shared x-kernels, pass ``phi_x`` to reuse it) and
    one backward sweep of sensitivities; no dense coupling blocks are formed.
    Valid under the standing orthogonality (W_u^p)' W_x^p = 0.
    """
    phi_u_all = _check_phi_u(spec, phi_u_all)
    N = spec.fir_horizon
    if phi_x is None:
        phi_x = _propagate_phi_x(spec, phi_u_all)
    wx2 = spec.W_x[p].T @ spec.W_x[p]
    wu2 = spec.W_u[p].T @ spec.W_u[p]
    ww2 = spec.noise_stack @ spec.noise_stack.T
    a_t = spec.A.T
    bu_p_t = spec.B_u[p].T

    delta = np.zeros_like(phi_x[0])
    grad = np.empty((N + 1, spec.input_dims[p], spec.state_dim + spec.output_dim))
    u_p = phi_u_all[:, spec.input_slices[p], :]
    grad[N] = 2.0 * (wu2 @ u_p[N]) @ ww2          # delta at the tail is zero
    for n in range(N, 0, -1):
        delta = a_t @ delta + wx2 @ phi_x[n]
        grad[n - 1] = 2.0 * (wu2 @ u_p[n - 1] + bu_p_t @ delta) @ ww2
    return grad


def pseudo_gradient(spec: DynamicGameSpec, phi_u_all: np.ndarray) -> np.ndarray:
    """All players' own-objective gradients, stacked like ``phi_u``."""
    phi_u_all = _check_phi_u(spec, phi_u_all)
    phi_x = _propagate_phi_x(spec, phi_u_all)
    out = np.empty_like(phi_u_all)
    for p, sl in enumerate(spec.input_slices):
        out[:, sl, :] = gradient_player(spec, phi_u_all, p, phi_x=phi_x)
    return out


# ---------------------------------------------------------------------------
# Dense coupling blocks and operator constants
# ---------------------------------------------------------------------------

def stack_playermajor(spec: DynamicGameSpec, phi_u: np.ndarray) -> np.ndarray:
    """Flatten (N+1, N_u, cols) to a 2D matrix ordered player-major, n-minor.

    This is the row ordering of the dense coupling blocks, so the affine
    form of the pseudo-gradient is a plain matrix product in it.
    """
    phi_u = _check_phi_u(spec, phi_u)
    rows = [phi_u[n, sl, :] for sl in spec.input_slices
            for n in range(spec.fir_horizon + 1)]
    return np.vstack(rows)


def unstack_playermajor(spec: DynamicGameSpec, mat: np.ndarray) -> np.ndarray:
    out = phi_u_zeros(spec)
    r = 0
    for p, sl in enumerate(spec.input_slices):
        nu_p = spec.input_dims[p]
        for n in range(spec.fir_horizon + 1):
            out[n, sl, :] = mat[r:r + nu_p, :]
            r += nu_p
    return out


def hessian_blocks(spec: DynamicGameSpec, element_budget: float = 2e7):
    """Dense block matrices (D, H) of the affine pseudo-gradient.

    Block (p, pt), (n, n') of H equals W_u^p when n = n' and p = pt,
    W_x^p A^(n-1-n') B_u^pt when n > n', and zero otherwise.  D keeps only
    the diagonal player blocks.  With U stacked player-major, the
    pseudo-gradient is F(U) = 2 (D' H) U (W_w W_w') + const.

    Exists for constants and cross-checks; refuses assembly beyond
    ``element_budget`` elements (use the matrix-free gradients instead).
    """
    N = spec.fir_horizon
    nz = [spec.W_x[p].shape[0] for p in range(spec.num_players)]
    rows = (N + 1) * sum(nz)
    cols = (N + 1) * spec.input_dim
    if rows * cols > element_budget:
        raise HessianBudgetError(
            f"dense blocks need {rows * cols:.3g} elements (> budget "
            f"{element_budget:.3g}); use the matrix-free gradient path")

    apows = [np.eye(spec.state_dim)]
    for _ in range(N - 1):
        apows.append(spec.A @ apows[-1])

    H = np.zeros((rows, cols))
    D = np.zeros((rows, cols))
    row0 = 0
    for p in range(spec.num_players):
        col0 = 0
        for pt in range(spec.num_players):
            nu_pt = spec.input_dims[pt]
            coupling = [spec.W_x[p] @ apows[k] @ spec.B_u[pt] for k in range(N)]
            for n in range(N + 1):
                r = row0 + n * nz[p]
                for n2 in range(N + 1):
                    c = col0 + n2 * nu_pt
                    if n == n2 and p == pt:
                        H[r:r + nz[p], c:c + nu_pt] = spec.W_u[p]
                    elif n > n2:
                        H[r:r + nz[p], c:c + nu_pt] = coupling[n - 1 - n2]
            if p == pt:
                D[row0:row0 + (N + 1) * nz[p], col0:col0 + (N + 1) * nu_pt] = \
                    H[row0:row0 + (N + 1) * nz[p], col0:col0 + (N + 1) * nu_pt]
            col0 += (N + 1) * nu_pt
        row0 += (N + 1) * nz[p]
    return D, H


def monotonicity_constants(spec: DynamicGameSpec,
                           element_budget: float = 2e7):
    """Strong-monotonicity and Lipschitz constants of the pseudo-gradient:

        M = 2 sigma_min(D' H) sigma_min(W_w)^2
        L = 2 sigma_max(D' H) sigma_max(W_w)^2

    The M formula can be optimistic for strongly asymmetric couplings (it
    uses singular rather than symmetrized eigen- values); the test suite
    witnesses both inequalities empirically on random kernel pairs.
    """
    D, H = hessian_blocks(spec, element_budget=element_budget)
    s_dh = np.linalg.svd(D.T @ H, compute_uv=False)
    s_ww = np.linalg.svd(spec.noise_stack, compute_uv=False)
    M = 2.0 * float(s_dh[-1]) * float(s_ww[-1]) ** 2
    L = 2.0 * float(s_dh[0]) * float(s_ww[0]) ** 2
    return M, L


# ---------------------------------------------------------------------------
# Controller reconstruction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControllerRealization:
    """Time-domain feedback coefficients recovered from a response.

    Running the controller with internal state xi (dim N_x) and measurement
    history y:

        xi[t+1] = - sum_n xi_from_xi[n] xi[t-n] - sum_n xi_from_y[n] y[t-n]
        u[t]    =   sum_n u_from_xi[n] xi[t-n]  + sum_n u_from_y[n] y[t-n]

    with all sums truncated at the kernel horizon.  Per-player rows of u
    follow the players' input slices.
    """

    fir_horizon: int
    state_dim: int
    output_dim: int
    input_dims: tuple
    xi_from_xi: np.ndarray      # (N-1, N_x, N_x): kernels phi_xx[2..N]
    xi_from_y: np.ndarray       # (N,   N_x, N_y): kernels phi_xy[1..N]
    u_from_xi: np.ndarray       # (N,   N_u, N_x): kernels phi_ux[1..N]
    u_from_y: np.ndarray        # (N+1, N_u, N_y): kernels phi_uy[0..N]

    @property
    def input_dim(self) -> int:
        return sum(self.input_dims)

    def player_rows(self, p: int) -> slice:
        start = sum(self.input_dims[:p])
        return slice(start, start + self.input_dims[p])


def reconstruct_policy(response: SystemResponse) -> ControllerRealization:
    """Package a (strictly causal) response as an executable controller.

    The realization drives an auxiliary internal state from measurements and
    reproduces the response's closed-loop maps exactly when the response is
    feasible.
    """
    for name, blk in (("phi_xx", response.phi_xx[0]), ("phi_xy", response.phi_xy[0])):
        if blk.size and np.max(np.abs(blk)) > CAUSALITY_ATOL:
            raise ValueError(f"response violates strict causality: {name}[0] != 0")
    for p, ux in enumerate(response.phi_ux):
        if ux[0].size and np.max(np.abs(ux[0])) > CAUSALITY_ATOL:
            raise ValueError(f"response violates strict causality: phi_ux[{p}][0] != 0")

    ux_stack = np.concatenate(response.phi_ux, axis=1)
    uy_stack = np.concatenate(response.phi_uy, axis=1)
    return ControllerRealization(
        fir_horizon=response.fir_horizon,
        state_dim=response.state_dim,
        output_dim=response.output_dim,
        input_dims=tuple(k.shape[1] for k in response.phi_ux),
        xi_from_xi=response.phi_xx[2:].copy(),
        xi_from_y=response.phi_xy[1:].copy(),
        u_from_xi=ux_stack[1:].copy(),
        u_from_y=uy_stack.copy())
