"""Synthetic appliance traces for desk-scale experiments.

Four behaviours are generated:

* ``I``   on/off: a square wave with random on and off durations.
* ``II``  finite-state: a Markov chain over two or more power levels that
  prefers to step to the next level in a fixed cycle, which gives the
  periodic pattern of fridges and washing programmes.
* ``III`` continuously varying: a smoothed random walk kept inside
  [0, max level].
* ``IV``  permanent: a constant draw.

Durations are given in seconds and converted with the sample period.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DataError, build_aggregate

KINDS = ("I", "II", "III", "IV")


@dataclass
class ApplianceSpec:
    name: str
    kind: str
    levels: list[float]
    duty: float = 0.5
    mean_on: float = 60.0
    mean_dwell: float = 40.0
    cycle_bias: float = 0.8
    smoothing: int = 25
    seed: int = 0

    def __post_init__(self):
        self.levels = [float(v) for v in np.atleast_1d(self.levels)]
        if self.kind not in KINDS:
            raise DataError(f"{self.name}: unknown appliance type {self.kind!r}")
        if not self.levels or min(self.levels) < 0:
            raise DataError(f"{self.name}: power levels must be non-negative")
        if self.kind == "II" and len(self.levels) < 2:
            raise DataError(f"{self.name}: a finite-state appliance needs at least 2 levels")
        if self.kind == "I" and not 0 < self.duty < 1:
            raise DataError(f"{self.name}: duty must lie in (0, 1)")
        if self.mean_on < 1 or self.mean_dwell < 1:
            raise DataError(f"{self.name}: mean durations must be at least one second")

    @classmethod
    def from_dict(cls, d: dict) -> "ApplianceSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown appliance spec keys: {sorted(unknown)}")
        return cls(**d)


def default_specs() -> list[ApplianceSpec]:
    """Three-appliance set used for the desk-scale checks."""
    return [
        ApplianceSpec("onoff", "I", [100.0], duty=0.3, mean_on=60.0),
        ApplianceSpec("fsm", "II", [0.0, 50.0, 200.0], mean_dwell=40.0),
        ApplianceSpec("standby", "IV", [30.0]),
    ]


def _on_off(spec: ApplianceSpec, n: int, period: float, rng: np.random.Generator) -> np.ndarray:
    mean_on = max(spec.mean_on / period, 1.0)
    mean_off = mean_on * (1 - spec.duty) / spec.duty
    out = np.zeros(n)
    on = rng.random() < spec.duty
    t = 0
    while t < n:
        dur = 1 + int(rng.exponential(max((mean_on if on else mean_off) - 0.5, 0.5)))
        if on:
            out[t:t + dur] = spec.levels[-1]
        t += dur
        on = not on
    return out


def _finite_state(spec: ApplianceSpec, n: int, period: float, rng: np.random.Generator) -> np.ndarray:
    levels = np.array(spec.levels)
    k = len(levels)
    leave = min(period / spec.mean_dwell, 1.0)
    state = int(rng.integers(k))
    states = np.empty(n, dtype=int)
    u = rng.random(n)
    jump = rng.random(n)
    pick = rng.integers(1, k, size=n)
    for t in range(n):
        states[t] = state
        if u[t] < leave:
            if jump[t] < spec.cycle_bias or k == 2:
                state = (state + 1) % k
            else:
                state = (state + pick[t]) % k
    return levels[states]


def _varying(spec: ApplianceSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    top = max(spec.levels)
    steps = rng.normal(0.0, top * 0.05, size=n + spec.smoothing)
    kernel = np.ones(spec.smoothing) / spec.smoothing
    smooth = np.convolve(steps, kernel, mode="valid")[:n]
    out = np.empty(n)
    level = top / 2
    for t in range(n):
        level = min(max(level + smooth[t], 0.0), top)
        out[t] = level
    return out


def generate_appliance(spec: ApplianceSpec, n: int, period: float, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "I":
        return _on_off(spec, n, period, rng)
    if spec.kind == "II":
        return _finite_state(spec, n, period, rng)
    if spec.kind == "III":
        return _varying(spec, n, rng)
    return np.full(n, spec.levels[0])


def gen_synthetic(specs: list[ApplianceSpec], length: int, period: float = 1.0,
                  noise_std: float = 0.0, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Return (mixture (T,), targets (C, T)) in watts, a pure function of ``seed``."""
    if not specs:
        raise DataError("at least one appliance spec is required")
    if length < 1 or period <= 0:
        raise DataError("length and period must be positive")
    targets = np.stack([
        generate_appliance(s, length, period, np.random.default_rng([seed, i, s.seed]))
        for i, s in enumerate(specs)
    ])
    mixture = build_aggregate(targets, noise_std=noise_std,
                              rng=np.random.default_rng([seed, len(specs), 0xA66]))
    return mixture, targets
