"""Mean-reverting noise and deterministic perturbation schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

EVENT_KINDS = ("step", "ramp", "trip")


@dataclass
class OuProcess:
    """Ornstein-Uhlenbeck process d(eta) = alpha (mu - eta) dt + sigma dW."""

    alpha: float
    mu: float = 0.0
    sigma: float = 0.0
    eta: float | None = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0), repr=False)

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.eta is None:
            self.eta = self.mu

    @property
    def stationary_variance(self) -> float:
        return self.sigma**2 / (2.0 * self.alpha)


def ou_step(p: OuProcess, dt: float) -> float:
    """One Euler-Maruyama step; mutates and returns ``p.eta``."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    xi = p.rng.standard_normal() if p.sigma > 0 else 0.0
    p.eta = p.eta + p.alpha * (p.mu - p.eta) * dt + p.sigma * np.sqrt(dt) * xi
    return p.eta


def stationary_sigma_to_diffusion(std: float, alpha: float) -> float:
    """Diffusion sigma giving a stationary standard deviation ``std``."""
    return std * np.sqrt(2.0 * alpha)


class OuBank:
    """Independent OU processes advanced together, one stream per process.

    Streams are spawned from one master seed so each process draws the
    same path no matter how many others exist or whether they are used.
    Normals are drawn in blocks per stream; the block size does not change
    the values.
    """

    block = 4096

    def __init__(self, alpha, mu, sigma, seed: int, keys: Iterable[str] | None = None):
        self.alpha = np.asarray(alpha, dtype=float)
        self.mu = np.asarray(mu, dtype=float)
        self.sigma = np.asarray(sigma, dtype=float)
        n = self.alpha.size
        if np.any(self.alpha <= 0) or np.any(self.sigma < 0):
            raise ValueError("need alpha > 0 and sigma >= 0")
        self.keys = list(keys) if keys is not None else [str(i) for i in range(n)]
        self.eta = self.mu.copy()
        children = np.random.SeedSequence(seed).spawn(n)
        self._rngs = [np.random.Generator(np.random.PCG64(c)) for c in children]
        self._buf = np.empty((n, 0))
        self._pos = 0

    def _normals(self) -> np.ndarray:
        if self._pos >= self._buf.shape[1]:
            self._buf = np.array([r.standard_normal(self.block) for r in self._rngs]).reshape(
                len(self._rngs), self.block)
            self._pos = 0
        xi = self._buf[:, self._pos]
        self._pos += 1
        return xi

    def step(self, dt: float) -> np.ndarray:
        if self.eta.size == 0:
            return self.eta
        xi = self._normals()
        self.eta = self.eta + self.alpha * (self.mu - self.eta) * dt + self.sigma * np.sqrt(dt) * xi
        return self.eta


@dataclass(frozen=True)
class Event:
    t_start: float
    target: str
    kind: str
    magnitude: float = 0.0
    ramp_duration: float = 0.0


class PerturbationSchedule:
    """Time-ordered steps, ramps and trips keyed by device id (``"load:4"``)."""

    def __init__(self, events: Iterable[Event] = ()):
        events = list(events)
        for ev in events:
            if ev.kind not in EVENT_KINDS:
                raise ValueError(f"unknown event kind {ev.kind!r}")
            if ev.kind == "ramp" and ev.ramp_duration <= 0:
                raise ValueError(f"ramp on {ev.target} needs ramp_duration > 0")
            if ev.kind == "trip" and not ev.target.startswith("machine:"):
                raise ValueError(f"trip target {ev.target} is not a machine")
        if any(b.t_start < a.t_start for a, b in zip(events, events[1:])):
            raise ValueError("events must be time-ordered")
        self.events = tuple(events)

    @classmethod
    def from_list(cls, raw: list[dict]) -> "PerturbationSchedule":
        return cls(Event(**ev) for ev in raw)

    def targets(self) -> set[str]:
        return {ev.target for ev in self.events}

    def trips(self) -> list[Event]:
        return [ev for ev in self.events if ev.kind == "trip"]

    def value(self, device: str, t: float) -> float:
        total = 0.0
        for ev in self.events:
            if ev.target != device or ev.t_start > t:
                continue
            if ev.kind == "step":
                total += ev.magnitude
            elif ev.kind == "ramp":
                frac = min((t - ev.t_start) / ev.ramp_duration, 1.0)
                total += ev.magnitude * frac
        return total

    def values(self, devices: list[str], t: float) -> np.ndarray:
        return np.array([self.value(d, t) for d in devices], dtype=float)


def schedule_value(s: PerturbationSchedule, device: str, t: float) -> float:
    return s.value(device, t)
