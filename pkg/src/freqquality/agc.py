"""Centralized discrete AGC: integrator on CoI frequency error, sampled dispatch."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SHARE_RULES = ("droop", "inverse_droop", "rating")


class AgcError(RuntimeError):
    pass


@dataclass
class DroopRegistry:
    """Droops (and ratings) of AGC participants; index = machine position."""

    droops: np.ndarray
    ratings: np.ndarray
    in_service: np.ndarray

    @classmethod
    def build(cls, droops, ratings=None, participants=None):
        droops = np.asarray(droops, dtype=float)
        ratings = np.ones_like(droops) if ratings is None else np.asarray(ratings, dtype=float)
        mask = np.ones(droops.size, dtype=bool)
        if participants is not None:
            mask[:] = False
            mask[list(participants)] = True
        return cls(droops, ratings, mask)

    def trip(self, index: int) -> None:
        self.in_service[index] = False

    @property
    def r_tot(self) -> float:
        return float(np.sum(self.droops[self.in_service]))

    def weights(self, rule: str = "droop") -> np.ndarray:
        if rule == "droop":
            w = self.droops
        elif rule == "inverse_droop":
            w = self.ratings / self.droops
        elif rule == "rating":
            w = self.ratings
        else:
            raise ValueError(f"unknown share rule {rule!r}")
        w = np.where(self.in_service, w, 0.0)
        total = w.sum()
        if total <= 0:
            raise AgcError("no in-service AGC participants")
        return w / total


@dataclass
class AgcController:
    k_o: float = 25.0
    omega_ref: float = 1.0
    t_sample: float = 4.0
    dp_min: float = -0.5
    dp_max: float = 0.5
    enabled: bool = True
    share_rule: str = "droop"
    dp: float = 0.0
    held: float = 0.0
    shares: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.share_rule not in SHARE_RULES:
            raise ValueError(f"share_rule must be one of {SHARE_RULES}")
        if self.dp_min > self.dp_max:
            raise ValueError("dp_min > dp_max")


def agc_integrate(ctrl: AgcController, omega_coi: float, dt: float) -> float:
    """Forward-Euler step of d(dp)/dt = K_o (omega_ref - omega_coi), clamped.

    Clamping the state is the anti-windup: while held at a limit the
    integrator cannot drift past it and reacts as soon as the error reverses.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if not ctrl.enabled:
        return ctrl.dp
    dp = ctrl.dp + ctrl.k_o * (ctrl.omega_ref - omega_coi) * dt
    ctrl.dp = min(max(dp, ctrl.dp_min), ctrl.dp_max)
    return ctrl.dp


def agc_sample(ctrl: AgcController, registry: DroopRegistry, t: float | None = None) -> np.ndarray:
    """Latch the integrator output and split it over the participants.

    With the literal share rule, machine i receives ``dp * R_i / R_tot``.
    """
    w = registry.weights(ctrl.share_rule)
    ctrl.held = ctrl.dp
    ctrl.shares = ctrl.held * w
    return ctrl.shares


def redistribute(ctrl: AgcController, registry: DroopRegistry) -> np.ndarray:
    """Re-split the currently held value, e.g. after a participant trips."""
    ctrl.shares = ctrl.held * registry.weights(ctrl.share_rule)
    return ctrl.shares


def is_sampling_step(step_index: int, t_sample: float, dt: float) -> bool:
    """True when step ``step_index`` (t = step_index*dt) is a sampling instant."""
    period = max(int(round(t_sample / dt)), 1)
    return step_index > 0 and step_index % period == 0
