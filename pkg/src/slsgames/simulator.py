"""Seeded time-domain simulation under reconstructed feedback policies.

The simulator propagates the game dynamics with a controller realization
running on ring buffers of its internal state and the measurement history.
Policies can be hot-swapped mid-run (buffers are carried across swaps so no
artificial transient is injected), noise is drawn from the package's
counter-based streams (process and measurement channels on separate
substreams, Gaussians via Box-Muller), and every run is bit-reproducible
from its seed.

Also provides impulse experiments, constraint satisfaction statistics, and
the interleaved simulate-while-seeking loop.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .feasible_set import FeasibleSetSpec
from .game_model import DimensionMismatchError, DynamicGameSpec
from .seeker import IterateLog, SeekerConfig, SeekStepper
from .sls_core import ControllerRealization, SystemResponse, phi_u_zeros

__all__ = [
    "ConstraintStats",
    "NoiseModel",
    "SimTrace",
    "SimulationDivergedError",
    "SwapSchedule",
    "constraint_stats",
    "impulse_response",
    "run_with_live_seeking",
    "simulate",
    "trace_summary",
]

DIVERGENCE_LIMIT = 1e9


class SimulationDivergedError(RuntimeError):
    def __init__(self, time_index: int, value: float):
        self.time_index = time_index
        self.value = value
        super().__init__(
            f"state diverged at t={time_index} (max |x| = {value:.3e})")


@dataclass(frozen=True)
class NoiseModel:
    """Exogenous input description.

    kind "gaussian": unit white noise per channel, process and measurement
    channels on separate seeded substreams.  kind "impulse": a single unit
    kick on one channel at one time.  kind "zero": no noise.  kind "array":
    replay an explicit (T, N_w) noise sequence (testing hook).
    """

    kind: str = "gaussian"
    seed: int = 0
    channel: int = 0
    time: int = 0
    values: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "impulse", "zero", "array"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "impulse" and self.channel < 0:
            raise ValueError("impulse channel must be nonnegative")
        if self.kind == "array" and self.values is None:
            raise ValueError("array noise needs explicit values")


class _NoiseSource:
    def __init__(self, model: NoiseModel, spec: DynamicGameSpec):
        self.model = model
        self.nw = spec.noise_dim
        if model.kind == "impulse" and model.channel >= self.nw:
            raise ValueError(
                f"impulse channel {model.channel} out of range ({self.nw})")
        if model.kind == "gaussian":
            # a channel fed only into the measurement map draws from the
            # measurement stream; everything else from the process stream
            is_meas = [(not np.any(spec.B_w[:, j])) and np.any(spec.D_w[:, j])
                       for j in range(self.nw)]
            self._is_meas = np.array(is_meas)
            self._proc = rng.Stream(model.seed, rng.STREAM_PROCESS_NOISE)
            self._meas = rng.Stream(model.seed, rng.STREAM_MEASUREMENT_NOISE)

    def sample(self, t: int) -> np.ndarray:
        m = self.model
        if m.kind == "zero":
            return np.zeros(self.nw)
        if m.kind == "impulse":
            w = np.zeros(self.nw)
            if t == m.time:
                w[m.channel] = 1.0
            return w
        if m.kind == "array":
            vals = np.asarray(m.values, dtype=float)
            if t >= vals.shape[0]:
                return np.zeros(self.nw)
            return vals[t].copy()
        w = np.empty(self.nw)
        for j in range(self.nw):
            stream = self._meas if self._is_meas[j] else self._proc
            w[j] = stream.gauss()
        return w


@dataclass(frozen=True)
class SwapSchedule:
    """Policy replacement plan: every ``delta_k`` steps, the next entry of
    ``source`` (a list of realizations, or a callable k -> realization)
    becomes the active policy."""

    delta_k: int
    source: object

    def __post_init__(self):
        if self.delta_k < 1:
            raise ValueError("delta_k must be >= 1")

    def policy_for(self, k: int):
        if callable(self.source):
            return self.source(k)
        seq = list(self.source)
        return seq[min(k, len(seq) - 1)]


@dataclass
class SimTrace:
    """Time-indexed signals of one run; row t holds the values at step t."""

    x: np.ndarray               # (T, N_x)
    y: np.ndarray               # (T, N_y)
    u: np.ndarray               # (T, N_u)
    w: np.ndarray               # (T, N_w)
    xi: np.ndarray              # (T, N_x) controller internal state
    g: np.ndarray               # (T, n_rows) constraint row values
    swap_times: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return self.x.shape[0]

    def to_csv(self, fileobj, config_comment: str | None = None) -> None:
        if config_comment is not None:
            fileobj.write(f"# {config_comment}\n")
        writer = csv.writer(fileobj)
        header = (["t"]
                  + [f"x{i}" for i in range(self.x.shape[1])]
                  + [f"y{i}" for i in range(self.y.shape[1])]
                  + [f"u{i}" for i in range(self.u.shape[1])]
                  + [f"w{i}" for i in range(self.w.shape[1])]
                  + [f"xi{i}" for i in range(self.xi.shape[1])]
                  + [f"g{i}" for i in range(self.g.shape[1])]
                  + ["swap"])
        writer.writerow(header)
        swaps = set(self.swap_times)
        for t in range(self.steps):
            row = ([t] + list(self.x[t]) + list(self.y[t]) + list(self.u[t])
                   + list(self.w[t]) + list(self.xi[t]) + list(self.g[t])
                   + [1 if t in swaps else 0])
            writer.writerow(row)

    def to_csv_string(self, config_comment: str | None = None) -> str:
        buf = io.StringIO()
        self.to_csv(buf, config_comment)
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Core loop
# ---------------------------------------------------------------------------

class _SimCore:
    """Stepper holding the physical state and the controller buffers."""

    def __init__(self, spec: DynamicGameSpec,
                 realization: ControllerRealization | None,
                 noise: NoiseModel):
        if realization is not None:
            if realization.state_dim != spec.state_dim or \
                    realization.output_dim != spec.output_dim or \
                    realization.input_dims != spec.input_dims:
                raise DimensionMismatchError(
                    "realization,spec",
                    f"controller built for dims ({realization.state_dim}, "
                    f"{realization.output_dim}, {realization.input_dims}), "
                    f"game has ({spec.state_dim}, {spec.output_dim}, "
                    f"{spec.input_dims})")
            if realization.fir_horizon != spec.fir_horizon:
                raise DimensionMismatchError(
                    "realization,spec",
                    f"controller horizon {realization.fir_horizon} != "
                    f"game horizon {spec.fir_horizon}")
        self.spec = spec
        self.realization = realization
        self.noise = _NoiseSource(noise, spec)
        N, nx, ny = spec.fir_horizon, spec.state_dim, spec.output_dim
        self.x = np.zeros(nx)
        self.xi_hist = np.zeros((N, nx))        # row n = xi at time t-n
        self.y_hist = np.zeros((N + 1, ny))     # row n = y at time t-n
        self.t = 0
        self.rows = {k: [] for k in ("x", "y", "u", "w", "xi", "g")}
        self.swap_times: list = []

    def swap_policy(self, realization: ControllerRealization) -> None:
        """Install a new policy; history buffers carry over unchanged."""
        self.realization = realization
        self.swap_times.append(self.t)

    def run(self, steps: int) -> None:
        spec = self.spec
        real = self.realization
        b_u = spec.B_u_stacked
        for _ in range(steps):
            w = self.noise.sample(self.t)
            y = spec.C @ self.x + spec.D_w @ w
            self.y_hist[1:] = self.y_hist[:-1]
            self.y_hist[0] = y
            if real is None:
                u = np.zeros(spec.input_dim)
                xi_next = np.zeros(spec.state_dim)
                xi_now = np.zeros(spec.state_dim)
            else:
                xi_now = self.xi_hist[0]
                u = (np.einsum("nij,nj->i", real.u_from_xi, self.xi_hist)
                     + np.einsum("nij,nj->i", real.u_from_y, self.y_hist))
                xi_next = -(np.einsum("nij,nj->i", real.xi_from_xi,
                                      self.xi_hist[:real.xi_from_xi.shape[0]])
                            + np.einsum("nij,nj->i", real.xi_from_y,
                                        self.y_hist[:real.xi_from_y.shape[0]]))
            g = spec.G_x @ self.x + spec.G_u @ u

            self.rows["x"].append(self.x.copy())
            self.rows["y"].append(y)
            self.rows["u"].append(u)
            self.rows["w"].append(w)
            self.rows["xi"].append(xi_now.copy())
            self.rows["g"].append(g)

            self.x = spec.A @ self.x + spec.B_w @ w + b_u @ u
            if not np.all(np.isfinite(self.x)):
                raise SimulationDivergedError(self.t, float("nan"))
            peak = float(np.max(np.abs(self.x))) if self.x.size else 0.0
            if peak > DIVERGENCE_LIMIT:
                raise SimulationDivergedError(self.t, peak)
            self.xi_hist[1:] = self.xi_hist[:-1]
            self.xi_hist[0] = xi_next
            self.t += 1

    def trace(self) -> SimTrace:
        def stack(key):
            return np.array(self.rows[key]) if self.rows[key] else \
                np.zeros((0, 0))
        return SimTrace(x=stack("x"), y=stack("y"), u=stack("u"),
                        w=stack("w"), xi=stack("xi"), g=stack("g"),
                        swap_times=list(self.swap_times))


def simulate(spec: DynamicGameSpec, realization: ControllerRealization | None,
             noise: NoiseModel, T: int,
             schedule: SwapSchedule | None = None) -> SimTrace:
    """Run the closed loop for T steps from x[0] = 0.

    ``realization=None`` runs open loop (all inputs zero).  With a swap
    schedule, the active policy is replaced every ``delta_k`` steps by the
    schedule's entry for the new update index; internal-state and
    measurement buffers carry over.  Fully deterministic given the noise
    seed.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    core = _SimCore(spec, realization, noise)
    if schedule is None:
        core.run(T)
        return core.trace()
    t = 0
    k = 0
    while t < T:
        chunk = min(schedule.delta_k, T - t)
        core.run(chunk)
        t += chunk
        if t < T:
            k += 1
            core.swap_policy(schedule.policy_for(k))
    return core.trace()


def impulse_response(spec: DynamicGameSpec,
                     realization: ControllerRealization | None,
                     channel: int, T: int) -> SimTrace:
    """Closed-loop response to a unit kick on one noise channel at t = 0."""
    if T < spec.fir_horizon + 1:
        raise ValueError("T must cover at least the kernel horizon + 1")
    return simulate(spec, realization,
                    NoiseModel(kind="impulse", channel=channel, time=0), T)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

@dataclass
class ConstraintStats:
    per_row: np.ndarray
    joint: float

    def to_dict(self) -> dict:
        return {"per_row": self.per_row.tolist(), "joint": self.joint}


def constraint_stats(trace: SimTrace, spec: DynamicGameSpec) -> ConstraintStats:
    """Fractions of time steps with constraint rows at or below 1."""
    if trace.g.size == 0:
        return ConstraintStats(per_row=np.zeros(0), joint=1.0)
    if trace.g.shape[1] != spec.G_x.shape[0]:
        raise DimensionMismatchError(
            "trace,spec", f"trace carries {trace.g.shape[1]} constraint rows, "
            f"game has {spec.G_x.shape[0]}")
    ok = trace.g <= 1.0
    per_row = ok.mean(axis=0)
    joint = float(np.all(ok, axis=1).mean())
    return ConstraintStats(per_row=per_row, joint=joint)


def trace_summary(trace: SimTrace, spec: DynamicGameSpec) -> dict:
    """JSON-ready run summary: constraint stats and per-player signal energy."""
    stats = constraint_stats(trace, spec)
    energies = []
    means = []
    for p, sl in enumerate(spec.input_slices):
        z = trace.x @ spec.W_x[p].T + trace.u[:, sl] @ spec.W_u[p].T
        e = float(np.sum(z * z))
        energies.append(e)
        means.append(e / max(trace.steps, 1))
    return {
        "steps": trace.steps,
        "constraint_stats": stats.to_dict(),
        "performance_energy_total": energies,
        "performance_energy_per_step": means,
        "swap_times": list(trace.swap_times),
    }


# ---------------------------------------------------------------------------
# Live seeking
# ---------------------------------------------------------------------------

def run_with_live_seeking(spec: DynamicGameSpec, fset: FeasibleSetSpec,
                          config: SeekerConfig, noise: NoiseModel, T: int,
                          delta_k: int = 32, init: np.ndarray | None = None):
    """Operate the system while the players keep improving their policies.

    The simulation advances ``delta_k`` steps per policy update; between
    chunks the stepper performs one forward-backward update and the new
    controller is hot-swapped in (buffers carried over).  Seeking reads no
    simulation data, so the interleaving is purely sequential.

    Returns (SimTrace, IterateLog).
    """
    if delta_k < 1:
        raise ValueError("delta_k must be >= 1")
    if init is None:
        from .feasible_set import ProjectionEngine
        engine = ProjectionEngine(fset, config=config.projection,
                                  metric=config.metric)
        init, _ = engine.project(phi_u_zeros(spec), warm=False)
    stepper = SeekStepper(spec, fset, config, init)
    core = _SimCore(spec, stepper.realization(), noise)
    t = 0
    while t < T:
        chunk = min(delta_k, T - t)
        core.run(chunk)
        t += chunk
        if t < T and not stepper.converged \
                and stepper.updates < config.max_updates:
            stepper.step()
            core.swap_policy(stepper.realization())
    return core.trace(), stepper.log
