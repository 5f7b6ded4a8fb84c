"""Dynamic game descriptions, assumption checks, and the power-grid family.

A game instance couples linear stochastic dynamics

    x[t+1] = A x[t] + B_w w[t] + sum_p B_u^p u^p[t],    x[0] = 0
    y[t]   = C x[t] + D_w w[t]

with per-player quadratic performance weights (W_x^p, W_u^p), operational
constraint rows normalized to the "<= 1" convention, an information
structure given by an actuation delay ``d_a`` and a communication delay
``d_c``, a finite-impulse-response horizon for the closed-loop kernels, and
a chance level for the probabilistic constraint reformulation.

Instances are immutable after construction (arrays are frozen), so they can
be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "DimensionMismatchError",
    "DynamicGameSpec",
    "GridParams",
    "ValidationReport",
    "grid_power_game",
    "spec_from_dict",
    "spec_to_dict",
    "validate",
]

# Singular values below RANK_RTOL * sigma_max count as zero in rank tests;
# orthogonality checks use the absolute entry tolerance ORTHO_ATOL.
RANK_RTOL = 1e-9
ORTHO_ATOL = 1e-9


class DimensionMismatchError(ValueError):
    """Raised when two matrices of a game description disagree in shape."""

    def __init__(self, pair: str, detail: str):
        self.pair = pair
        super().__init__(f"dimension mismatch ({pair}): {detail}")


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.flags.writeable = False
    return out


def _check(cond: bool, pair: str, detail: str) -> None:
    if not cond:
        raise DimensionMismatchError(pair, detail)


@dataclass(frozen=True)
class DynamicGameSpec:
    """Immutable description of one dynamic game instance.

    Parameters
    ----------
    A, B_w, C, D_w : arrays
        State, process-noise, measurement, and measurement-noise matrices.
    B_u : sequence of arrays
        One input matrix per player, ``N_x x N_u^p``.
    W_x, W_u : sequences of arrays
        Per-player performance weights with a common row count per player.
    G_x, G_u : arrays
        Global constraint rows, normalized so the limit is 1.
    G_up : sequence of arrays
        Per-player local input constraint rows (may have zero rows).
    d_a, d_c : int
        Actuation delay (>= 0) and communication delay (>= 1), in steps.
    fir_horizon : int
        Closed-loop kernel length N (>= 2); kernels are indexed 0..N.
    chance_level : float
        Probability level in (0.5, 1) for chance-constraint reformulation.
    """

    A: np.ndarray
    B_u: tuple
    B_w: np.ndarray
    C: np.ndarray
    D_w: np.ndarray
    W_x: tuple
    W_u: tuple
    G_x: np.ndarray
    G_u: np.ndarray
    G_up: tuple
    d_a: int
    d_c: int
    fir_horizon: int
    chance_level: float

    def __init__(self, A, B_u, B_w, C, D_w, W_x, W_u, G_x=None, G_u=None,
                 G_up=None, d_a=1, d_c=1, fir_horizon=8, chance_level=0.975):
        A = _frozen(A)
        B_u = tuple(_frozen(b) for b in B_u)
        B_w = _frozen(B_w)
        C = _frozen(C)
        D_w = _frozen(D_w)
        W_x = tuple(_frozen(w) for w in W_x)
        W_u = tuple(_frozen(w) for w in W_u)

        nx = A.shape[0]
        _check(A.ndim == 2 and A.shape[1] == nx, "A", f"A must be square, got {A.shape}")
        nplayers = len(B_u)
        if nplayers == 0:
            raise DimensionMismatchError("B_u", "at least one player required")
        for p, b in enumerate(B_u):
            _check(b.ndim == 2 and b.shape[0] == nx, f"A,B_u[{p}]",
                   f"B_u[{p}] has {b.shape[0]} rows, state dim is {nx}")
        nu_each = tuple(b.shape[1] for b in B_u)
        nu = sum(nu_each)
        _check(B_w.ndim == 2 and B_w.shape[0] == nx, "A,B_w",
               f"B_w has {B_w.shape[0]} rows, state dim is {nx}")
        nw = B_w.shape[1]
        _check(C.ndim == 2 and C.shape[1] == nx, "A,C",
               f"C has {C.shape[1]} columns, state dim is {nx}")
        ny = C.shape[0]
        _check(D_w.shape == (ny, nw), "C,D_w / B_w,D_w",
               f"D_w must be {(ny, nw)}, got {D_w.shape}")

        _check(len(W_x) == nplayers and len(W_u) == nplayers, "W_x,W_u",
               "one weight pair per player required")
        for p in range(nplayers):
            _check(W_x[p].ndim == 2 and W_x[p].shape[1] == nx, f"W_x[{p}],A",
                   f"W_x[{p}] has {W_x[p].shape[1]} columns, state dim is {nx}")
            _check(W_u[p].shape == (W_x[p].shape[0], nu_each[p]), f"W_x[{p}],W_u[{p}]",
                   f"W_u[{p}] must be {(W_x[p].shape[0], nu_each[p])}, got {W_u[p].shape}")

        G_x = _frozen(G_x) if G_x is not None else _frozen(np.zeros((0, nx)))
        G_u = _frozen(G_u) if G_u is not None else _frozen(np.zeros((G_x.shape[0], nu)))
        _check(G_x.ndim == 2 and G_x.shape[1] == nx, "G_x,A",
               f"G_x has {G_x.shape[1]} columns, state dim is {nx}")
        _check(G_u.shape == (G_x.shape[0], nu), "G_x,G_u",
               f"G_u must be {(G_x.shape[0], nu)}, got {G_u.shape}")
        if G_up is None:
            G_up = tuple(_frozen(np.zeros((0, nu_each[p]))) for p in range(nplayers))
        else:
            G_up = tuple(_frozen(g) for g in G_up)
            _check(len(G_up) == nplayers, "G_up", "one local row block per player")
            for p, g in enumerate(G_up):
                _check(g.ndim == 2 and g.shape[1] == nu_each[p], f"G_up[{p}],B_u[{p}]",
                       f"G_up[{p}] has {g.shape[1]} columns, input dim is {nu_each[p]}")

        if d_a < 0:
            raise ValueError("actuation delay d_a must be >= 0")
        if d_c < 1:
            raise ValueError("communication delay d_c must be >= 1")
        if fir_horizon < 2:
            raise ValueError("fir_horizon must be >= 2")
        if not (0.5 < chance_level < 1.0):
            raise ValueError("chance_level must lie in (0.5, 1)")

        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B_u", B_u)
        object.__setattr__(self, "B_w", B_w)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D_w", D_w)
        object.__setattr__(self, "W_x", W_x)
        object.__setattr__(self, "W_u", W_u)
        object.__setattr__(self, "G_x", G_x)
        object.__setattr__(self, "G_u", G_u)
        object.__setattr__(self, "G_up", G_up)
        object.__setattr__(self, "d_a", int(d_a))
        object.__setattr__(self, "d_c", int(d_c))
        object.__setattr__(self, "fir_horizon", int(fir_horizon))
        object.__setattr__(self, "chance_level", float(chance_level))

    # Dimension helpers -----------------------------------------------------

    @property
    def num_players(self) -> int:
        return len(self.B_u)

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def output_dim(self) -> int:
        return self.C.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.B_w.shape[1]

    @property
    def input_dims(self) -> tuple:
        return tuple(b.shape[1] for b in self.B_u)

    @property
    def input_dim(self) -> int:
        return sum(self.input_dims)

    @property
    def input_slices(self) -> tuple:
        """Row slice of each player inside the stacked input vector."""
        out, start = [], 0
        for nu_p in self.input_dims:
            out.append(slice(start, start + nu_p))
            start += nu_p
        return tuple(out)

    @property
    def B_u_stacked(self) -> np.ndarray:
        return np.hstack(self.B_u)

    @property
    def noise_stack(self) -> np.ndarray:
        """Vertical stack of B_w over D_w — the noise-to-(x, y) injection."""
        return np.vstack([self.B_w, self.D_w])


# ---------------------------------------------------------------------------
# Assumption checks
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)
    spectral_radius: float = float("nan")

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, detail: str) -> None:
        self.checks.append(CheckResult(name, bool(passed), detail))

    def lines(self) -> list:
        out = [f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}"
               for c in self.checks]
        out.append(f"[info] spectral radius of A: {self.spectral_radius:.6g}")
        return out


def _numeric_rank(m: np.ndarray) -> int:
    if m.size == 0:
        return 0
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > RANK_RTOL * s[0]))


def _kalman_rank(A: np.ndarray, B: np.ndarray) -> int:
    """Rank of [B, AB, ..., A^(nx-1) B]."""
    nx = A.shape[0]
    blocks, cur = [], B
    for _ in range(nx):
        blocks.append(cur)
        cur = A @ cur
    return _numeric_rank(np.hstack(blocks))


def validate(spec: DynamicGameSpec) -> ValidationReport:
    """Check the standing assumptions on a game instance.

    The report covers, per player, full column rank of W_u^p and the
    orthogonality (W_u^p)' W_x^p = 0; full row rank of B_w and D_w plus
    B_w D_w' = 0; controllability of (A, [B_u^1 ... B_u^NP]) and
    observability of (A, C); and, informationally, the spectral radius
    of A.  Dimensional consistency was already enforced at construction.
    """
    report = ValidationReport()

    for p in range(spec.num_players):
        wu, wx = spec.W_u[p], spec.W_x[p]
        full_col = _numeric_rank(wu) == wu.shape[1]
        report.add(f"W_u[{p}] full column rank", full_col,
                   f"rank {_numeric_rank(wu)} of {wu.shape[1]}")
        cross = 0.0 if wu.size == 0 or wx.size == 0 else float(np.max(np.abs(wu.T @ wx)))
        report.add(f"W_u[{p}]' W_x[{p}] = 0", cross <= ORTHO_ATOL,
                   f"max |entry| = {cross:.3g}")

    for name, m in (("B_w", spec.B_w), ("D_w", spec.D_w)):
        full_row = _numeric_rank(m) == m.shape[0]
        report.add(f"{name} full row rank", full_row,
                   f"rank {_numeric_rank(m)} of {m.shape[0]}")
    cross = float(np.max(np.abs(spec.B_w @ spec.D_w.T))) if spec.B_w.size else 0.0
    report.add("B_w D_w' = 0", cross <= ORTHO_ATOL, f"max |entry| = {cross:.3g}")

    ctrb = _kalman_rank(spec.A, spec.B_u_stacked)
    report.add("(A, B_u) controllable", ctrb == spec.state_dim,
               f"controllability rank {ctrb} of {spec.state_dim}")
    obsv = _kalman_rank(spec.A.T, spec.C.T)
    report.add("(A, C) observable", obsv == spec.state_dim,
               f"observability rank {obsv} of {spec.state_dim}")

    report.spectral_radius = float(np.max(np.abs(np.linalg.eigvals(spec.A))))
    return report


# ---------------------------------------------------------------------------
# Power-grid benchmark family
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridParams:
    """Parameters for the rectangular power-grid benchmark generator.

    Each node is a swing-dynamics subsystem with inertia m, damping d, and
    symmetric couplings kappa to its grid neighbours, discretized with step
    ``dt``.  Inertia/damping/coupling values are drawn uniformly from the
    given closed intervals using the seeded parameter stream.
    """

    rows: int = 3
    cols: int = 3
    seed: int = 0
    m_range: tuple = (0.5, 1.0)
    d_range: tuple = (1.0, 1.5)
    k_range: tuple = (0.5, 1.0)
    dt: float = 0.1
    bus_limit: float = 5.0
    process_noise_std: float = 1.0
    measurement_noise_std: float = 0.1
    phase_noise_std: float = 0.01

    def __post_init__(self):
        if self.rows * self.cols < 1:
            raise ValueError("grid must contain at least one node")
        for name in ("m_range", "d_range", "k_range"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi):
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.bus_limit <= 0.0:
            raise ValueError("bus_limit must be positive")
        for name in ("process_noise_std", "measurement_noise_std", "phase_noise_std"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")


def grid_edges(rows: int, cols: int) -> list:
    """Edges (p, q), p < q, of the rows x cols grid; nodes indexed row-major."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            p = r * cols + c
            if c + 1 < cols:
                edges.append((p, p + 1))
            if r + 1 < rows:
                edges.append((p, p + cols))
    return edges


def grid_power_game(params: GridParams, *, d_a: int = 1, d_c: int = 1,
                    fir_horizon: int = 16,
                    chance_level: float = 0.975) -> DynamicGameSpec:
    """Generate a power-grid game instance.

    State is (phase deviation, frequency deviation) per node; each node's
    player actuates a load on its own frequency; measurements are noisy
    phases.  Bus flow limits |kappa_pq (theta_p - theta_q)| <= bus_limit
    become two "<= 1" rows per grid edge.  Identical params (incl. seed)
    yield bit-identical instances.
    """
    from . import rng

    n = params.rows * params.cols
    edges = grid_edges(params.rows, params.cols)
    stream = rng.Stream(params.seed, rng.STREAM_PARAMS)

    m = np.array([stream.uniform(*params.m_range) for _ in range(n)])
    d = np.array([stream.uniform(*params.d_range) for _ in range(n)])
    kappa = {e: stream.uniform(*params.k_range) for e in edges}

    dt = params.dt
    nx, ny = 2 * n, n

    A = np.zeros((nx, nx))
    for p in range(n):
        ksum = sum(k for e, k in kappa.items() if p in e)
        A[2 * p, 2 * p] = 1.0
        A[2 * p, 2 * p + 1] = dt
        A[2 * p + 1, 2 * p] = -dt * ksum / m[p]
        A[2 * p + 1, 2 * p + 1] = 1.0 - dt * d[p] / m[p]
    for (p, q), k in kappa.items():
        A[2 * p + 1, 2 * q] = dt * k / m[p]
        A[2 * q + 1, 2 * p] = dt * k / m[q]

    B_u = []
    for p in range(n):
        b = np.zeros((nx, 1))
        b[2 * p + 1, 0] = dt / m[p]
        B_u.append(b)

    C = np.zeros((ny, nx))
    for p in range(n):
        C[p, 2 * p] = 1.0

    # Noise channels: 2 process channels per node (phase kick, load kick)
    # followed by one measurement channel per output.
    nw = nx + ny
    B_w = np.zeros((nx, nw))
    for p in range(n):
        B_w[2 * p, 2 * p] = params.phase_noise_std
        B_w[2 * p + 1, 2 * p + 1] = dt * params.process_noise_std / m[p]
    D_w = np.zeros((ny, nw))
    D_w[:, nx:] = params.measurement_noise_std * np.eye(ny)

    # Player p penalizes its own two states (weight 0.01) and its own input;
    # the stacked [W_x | W_u] is block-diagonal so the weights are orthogonal.
    W_x, W_u = [], []
    for p in range(n):
        wx = np.zeros((nx + 1, nx))
        wx[2 * p, 2 * p] = 0.01
        wx[2 * p + 1, 2 * p + 1] = 0.01
        wu = np.zeros((nx + 1, 1))
        wu[nx, 0] = 1.0
        W_x.append(wx)
        W_u.append(wu)

    G_x = np.zeros((2 * len(edges), nx))
    for i, (p, q) in enumerate(edges):
        scale = kappa[(p, q)] / params.bus_limit
        G_x[2 * i, 2 * p] = scale
        G_x[2 * i, 2 * q] = -scale
        G_x[2 * i + 1, 2 * p] = -scale
        G_x[2 * i + 1, 2 * q] = scale
    G_u = np.zeros((G_x.shape[0], n))

    return DynamicGameSpec(
        A=A, B_u=B_u, B_w=B_w, C=C, D_w=D_w, W_x=W_x, W_u=W_u,
        G_x=G_x, G_u=G_u, G_up=None, d_a=d_a, d_c=d_c,
        fir_horizon=fir_horizon, chance_level=chance_level)


# ---------------------------------------------------------------------------
# JSON document form
# ---------------------------------------------------------------------------

def spec_to_dict(spec: DynamicGameSpec) -> dict:
    """Plain-JSON document form (row-major nested lists)."""
    return {
        "num_players": spec.num_players,
        "state_dim": spec.state_dim,
        "input_dims": list(spec.input_dims),
        "output_dim": spec.output_dim,
        "noise_dim": spec.noise_dim,
        "A": spec.A.tolist(),
        "B_u": [b.tolist() for b in spec.B_u],
        "B_w": spec.B_w.tolist(),
        "C": spec.C.tolist(),
        "D_w": spec.D_w.tolist(),
        "W_x": [w.tolist() for w in spec.W_x],
        "W_u": [w.tolist() for w in spec.W_u],
        "G_x": spec.G_x.tolist(),
        "G_u": spec.G_u.tolist(),
        "G_up": [g.tolist() for g in spec.G_up],
        "d_a": spec.d_a,
        "d_c": spec.d_c,
        "fir_horizon": spec.fir_horizon,
        "chance_level": spec.chance_level,
    }


def spec_from_dict(doc: dict) -> DynamicGameSpec:
    try:
        spec = DynamicGameSpec(
            A=doc["A"],
            B_u=[np.array(b, dtype=float).reshape(len(doc["A"]), -1) for b in doc["B_u"]],
            B_w=doc["B_w"], C=doc["C"], D_w=doc["D_w"],
            W_x=doc["W_x"], W_u=doc["W_u"],
            G_x=doc.get("G_x"), G_u=doc.get("G_u"), G_up=doc.get("G_up"),
            d_a=doc.get("d_a", 1), d_c=doc.get("d_c", 1),
            fir_horizon=doc.get("fir_horizon", 8),
            chance_level=doc.get("chance_level", 0.975))
    except KeyError as exc:
        raise DimensionMismatchError(str(exc), f"missing field {exc} in spec document")
    declared = (doc.get("num_players"), doc.get("state_dim"), doc.get("output_dim"))
    actual = (spec.num_players, spec.state_dim, spec.output_dim)
    for name, want, got in zip(("num_players", "state_dim", "output_dim"), declared, actual):
        if want is not None and int(want) != got:
            raise DimensionMismatchError(name, f"document declares {want}, matrices give {got}")
    if doc.get("input_dims") is not None and tuple(doc["input_dims"]) != spec.input_dims:
        raise DimensionMismatchError("input_dims",
                                     f"document declares {doc['input_dims']}, matrices give {list(spec.input_dims)}")
    return spec
