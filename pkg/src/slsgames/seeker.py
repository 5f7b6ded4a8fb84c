"""Forward-backward equilibrium seeking.

The generic engine iterates s <- proj(s - eta * F(s)) for a pseudo-gradient
F and a projection onto the joint feasible set; under strong monotonicity
and an admissible step the iteration contracts linearly to the unique
variational equilibrium.  The specialization to the closed-loop-kernel game
evaluates each player's gradient with the shared forward propagation, takes
the per-player forward steps (optionally in parallel), and delegates the
backward step to the coordinated projection.

Seeking never touches state or measurement data, so callers may run it
alongside a live simulation; SeekStepper exposes the iteration one update
at a time for exactly that interleaving, and the per-update callback hands
out reconstructed controllers for hot-swapping.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .feasible_set import AdmmConfig, FeasibleSetSpec, ProjectionEngine
from .game_model import DynamicGameSpec
from .sls_core import (ControllerRealization, SystemResponse,
                       _propagate_phi_x, gradient_player,
                       monotonicity_constants, objective, reconstruct_policy)

__all__ = [
    "IterateLog",
    "SeekStepper",
    "SeekerConfig",
    "SeekerDivergenceError",
    "auto_eta",
    "fb_step_static",
    "predicted_rate",
    "seek",
]


class SeekerDivergenceError(RuntimeError):
    def __init__(self, message, last_iterate=None, log=None):
        self.last_iterate = last_iterate
        self.log = log
        super().__init__(message)


@dataclass(frozen=True)
class SeekerConfig:
    """Settings for one seek run.

    ``eta="auto"`` resolves the step to M/L^2 from the operator constants;
    a numeric eta is validated against (0, 2M/L^2) whenever the constants
    are computable.  ``metric`` picks the projection distance; the default
    is the input-kernel metric under which the fixed point is the
    variational equilibrium.
    """

    eta: float | str = "auto"
    max_updates: int = 100_000
    rel_stop_tol: float = 1e-12
    checkpoint_every: int = 0
    projection: AdmmConfig = field(default_factory=AdmmConfig)
    metric: str = "exact"
    threads: int = 1

    def __post_init__(self):
        if self.eta != "auto" and float(self.eta) <= 0.0:
            raise ValueError("eta must be positive or 'auto'")
        if self.rel_stop_tol <= 0.0:
            raise ValueError("rel_stop_tol must be positive")
        if self.max_updates < 1:
            raise ValueError("max_updates must be >= 1")


@dataclass
class IterateRecord:
    k: int
    rel_step: float
    objectives: list
    proj_mode: str
    proj_iterations: int
    proj_primal_residual: float
    proj_dual_residual: float
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "rel_step": self.rel_step,
            "objectives": self.objectives,
            "proj_mode": self.proj_mode,
            "proj_iterations": self.proj_iterations,
            "proj_primal_residual": self.proj_primal_residual,
            "proj_dual_residual": self.proj_dual_residual,
            "wall_time": self.wall_time,
        }


@dataclass
class IterateLog:
    """Per-update history of one seek run plus the resolved constants."""

    eta: float = float("nan")
    strong_monotonicity: float = float("nan")
    lipschitz: float = float("nan")
    predicted_rate: float = float("nan")
    stopped_by: str = ""
    records: list = field(default_factory=list)

    @property
    def num_updates(self) -> int:
        return len(self.records)

    def rel_steps(self) -> np.ndarray:
        return np.array([r.rel_step for r in self.records])

    def to_jsonl_lines(self) -> list:
        head = {"eta": self.eta, "strong_monotonicity": self.strong_monotonicity,
                "lipschitz": self.lipschitz, "predicted_rate": self.predicted_rate,
                "stopped_by": self.stopped_by}
        return [json.dumps(head)] + [json.dumps(r.to_dict()) for r in self.records]


# ---------------------------------------------------------------------------
# Rates and step sizes
# ---------------------------------------------------------------------------

def predicted_rate(eta: float, M: float, L: float) -> float:
    """Linear contraction factor sqrt(1 - eta (2M - eta L^2)).

    Requires 0 < M <= L and an admissible step eta in (0, 2M/L^2).
    """
    if not (0.0 < M <= L):
        raise ValueError(f"need 0 < M <= L, got M={M}, L={L}")
    if not (0.0 < eta < 2.0 * M / (L * L)):
        raise ValueError(
            f"step {eta} outside the admissible interval (0, {2.0 * M / (L * L)})")
    return math.sqrt(max(0.0, 1.0 - eta * (2.0 * M - eta * L * L)))


def auto_eta(spec: DynamicGameSpec, constants: tuple | None = None) -> float:
    """Coordinator step size M/L^2 from the operator constants.

    Always admissible when M <= L; clipped to 0.99 * (2M/L^2) as a guard
    against user-supplied constants that violate that ordering.
    """
    M, L = constants if constants is not None else monotonicity_constants(spec)
    eta = M / (L * L)
    return min(eta, 0.99 * 2.0 * M / (L * L))


def fb_step_static(F, proj, s, eta: float):
    """One generic forward-backward update: proj(s - eta * F(s)).

    ``F`` maps a strategy profile to the stacked players' gradients (each
    player's component depends only on the profile, so the forward steps
    are independent); ``proj`` is the coordinator's projection.
    """
    s = np.asarray(s, dtype=float)
    return proj(s - eta * np.asarray(F(s), dtype=float))


# ---------------------------------------------------------------------------
# Closed-loop kernel game
# ---------------------------------------------------------------------------

def _pseudo_gradient_threaded(spec, phi_u, threads: int) -> np.ndarray:
    phi_x = _propagate_phi_x(spec, phi_u)
    out = np.empty_like(phi_u)
    if threads <= 1 or spec.num_players == 1:
        for p, sl in enumerate(spec.input_slices):
            out[:, sl, :] = gradient_player(spec, phi_u, p, phi_x=phi_x)
        return out
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futs = {p: pool.submit(gradient_player, spec, phi_u, p, phi_x=phi_x)
                for p in range(spec.num_players)}
        for p, sl in enumerate(spec.input_slices):
            out[:, sl, :] = futs[p].result()
    return out


class SeekStepper:
    """The seek iteration, one update at a time.

    Owns the current kernels, the warm-started projection engine, and the
    iterate log; ``step()`` performs one forward-backward update and
    returns its record (or None once converged).  Used by ``seek`` and by
    the simulator's live-seeking loop.
    """

    def __init__(self, spec: DynamicGameSpec, fset: FeasibleSetSpec,
                 config: SeekerConfig, init: np.ndarray):
        self.spec = spec
        self.fset = fset
        self.config = config
        self.phi_u = np.asarray(init, dtype=float).copy()
        self.log = IterateLog()
        self.converged = False
        self._window: list = []

        constants = None
        try:
            constants = monotonicity_constants(spec)
            self.log.strong_monotonicity, self.log.lipschitz = constants
        except Exception:
            constants = None

        if config.eta == "auto":
            if constants is None:
                raise ValueError("eta='auto' requires computable operator constants")
            self.eta = auto_eta(spec, constants)
        else:
            self.eta = float(config.eta)
            if constants is not None:
                M, L = constants
                if not (0.0 < self.eta < 2.0 * M / (L * L)):
                    raise ValueError(
                        f"step {self.eta} outside the admissible interval "
                        f"(0, {2.0 * M / (L * L):.6g})")
        self.log.eta = self.eta
        if constants is not None:
            try:
                self.log.predicted_rate = predicted_rate(self.eta, *constants)
            except ValueError:
                pass
        self.engine = ProjectionEngine(fset, config=config.projection,
                                       metric=config.metric)

    @property
    def updates(self) -> int:
        return self.log.num_updates

    def response(self) -> SystemResponse:
        return SystemResponse.from_phi_u(self.spec, self.phi_u)

    def realization(self) -> ControllerRealization:
        return reconstruct_policy(self.response())

    def step(self):
        """One forward-backward update; returns the IterateRecord or None."""
        if self.converged or self.updates >= self.config.max_updates:
            return None
        k = self.updates
        t0 = time.perf_counter()
        grad = _pseudo_gradient_threaded(self.spec, self.phi_u,
                                         self.config.threads)
        try:
            phi_next, info = self.engine.project(self.phi_u - self.eta * grad,
                                                 warm=True)
        except Exception as exc:
            self.log.stopped_by = "projection_failure"
            raise SeekerDivergenceError(
                f"projection failed at update {k}: {exc}",
                last_iterate=self.phi_u, log=self.log) from exc

        denom = max(float(np.linalg.norm(self.phi_u)), 1e-300)
        rel_step = float(np.linalg.norm(phi_next - self.phi_u)) / denom
        objs = [objective(self.spec,
                          SystemResponse.from_phi_u(self.spec, phi_next), p)
                for p in range(self.spec.num_players)]
        record = IterateRecord(
            k=k, rel_step=rel_step, objectives=objs, proj_mode=info.mode,
            proj_iterations=info.iterations,
            proj_primal_residual=info.primal_residual,
            proj_dual_residual=info.dual_residual,
            wall_time=time.perf_counter() - t0)
        self.log.records.append(record)
        self.phi_u = phi_next

        if rel_step <= self.config.rel_stop_tol:
            self.converged = True
            self.log.stopped_by = "rel_step"
            return record
        if self.updates >= self.config.max_updates:
            self.log.stopped_by = "max_updates"

        self._window.append(rel_step)
        if len(self._window) > 100:
            self._window.pop(0)
            if self._window[0] > 0.0 and rel_step > 10.0 * self._window[0] \
                    and rel_step == max(self._window):
                self.log.stopped_by = "divergence"
                raise SeekerDivergenceError(
                    f"relative step grew from {self._window[0]:.3e} to "
                    f"{rel_step:.3e} over 100 updates",
                    last_iterate=self.phi_u, log=self.log)
        return record


def seek(spec: DynamicGameSpec, fset: FeasibleSetSpec, config: SeekerConfig,
         init: np.ndarray, on_update=None, checkpoint_sink=None):
    """Run forward-backward seeking on the closed-loop kernel game.

    Iterates phi_u <- project(phi_u - eta * F(phi_u)) until the relative
    update norm drops below ``config.rel_stop_tol`` or ``max_updates`` is
    reached.  ``on_update(k, phi_u, realization)`` is invoked at the top of
    every iteration with the controller realization of the current iterate,
    enabling live hot-swap while seeking.  ``checkpoint_sink(k, response)``
    receives the full response every ``checkpoint_every`` updates.

    Returns (phi_u_star, IterateLog).  Projection failures abort with the
    last valid iterate attached to the raised error.
    """
    stepper = SeekStepper(spec, fset, config, init)
    while True:
        if on_update is not None:
            on_update(stepper.updates, stepper.phi_u.copy(),
                      stepper.realization())
        record = stepper.step()
        if record is None:
            break
        if checkpoint_sink is not None and config.checkpoint_every > 0 \
                and (record.k + 1) % config.checkpoint_every == 0:
            checkpoint_sink(record.k, stepper.response())
        if stepper.converged:
            break
    if not stepper.log.stopped_by:
        stepper.log.stopped_by = "max_updates"
    return stepper.phi_u, stepper.log
