"""Inner-loop per-inverter var dispatch laws.

Three local controllers: the conventional piecewise-linear droop, its
delayed variant, and the adaptive law whose curve is shifted by an error
offset and re-sloped by the outer loop.  All laws are stateless total
functions of the local bus voltage; the simulation engine owns any state
(previous dispatch, adaptive parameters).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

_SLOPE_RTOL = 1e-9


class ControlError(ValueError):
    """Invalid controller parameters."""


def _clamp(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


@dataclass(frozen=True)
class DroopParams:
    """Conventional droop curve: set-point `mu`, deadband `deadband_d`,
    slope `slope_m` (pu var per pu volt), var limits and voltage cut-offs.

    The four set-points and the slope are redundant; use `from_slope` or
    `from_setpoints` to build a consistent curve.
    """

    mu: float
    deadband_d: float
    slope_m: float
    q_min: float
    q_max: float
    v_min: float
    v_max: float

    def __post_init__(self) -> None:
        if self.slope_m < 0:
            raise ControlError("slope_m must be >= 0")
        if self.deadband_d < 0:
            raise ControlError("deadband_d must be >= 0")
        if not (self.q_min <= 0.0 <= self.q_max):
            raise ControlError("need q_min <= 0 <= q_max")
        if not (self.v_min < self.mu < self.v_max):
            raise ControlError("need v_min < mu < v_max")

    @classmethod
    def from_slope(
        cls, mu: float, deadband_d: float, slope_m: float, q_min: float, q_max: float
    ) -> "DroopParams":
        """Derive voltage cut-offs from the slope and var limits."""
        if slope_m > 0:
            v_min = mu - deadband_d / 2 - q_max / slope_m
            v_max = mu + deadband_d / 2 - q_min / slope_m
        else:
            v_min, v_max = -math.inf, math.inf
        return cls(mu, deadband_d, slope_m, q_min, q_max, v_min, v_max)

    @classmethod
    def from_setpoints(
        cls,
        mu: float,
        deadband_d: float,
        v_min: float,
        v_max: float,
        q_min: float,
        q_max: float,
    ) -> "DroopParams":
        """Derive the slope from the four set-points, which must agree."""
        m_lo = q_max / (mu - deadband_d / 2 - v_min)
        m_hi = q_min / (mu + deadband_d / 2 - v_max)
        if abs(m_lo - m_hi) > _SLOPE_RTOL * max(abs(m_lo), abs(m_hi), 1.0):
            raise ControlError(
                f"inconsistent set-points: slopes {m_lo} vs {m_hi} disagree"
            )
        return cls(mu, deadband_d, m_lo, q_min, q_max, v_min, v_max)


def droop_dispatch(params: DroopParams, v: float) -> float:
    """Var output of the conventional droop at local voltage `v` (pu).

    Zero inside the deadband, -m*(v - mu -/+ d/2) outside, clamped to
    [q_min, q_max].
    """
    half_d = params.deadband_d / 2
    if abs(v - params.mu) <= half_d:
        return 0.0
    if v > params.mu:
        q = -params.slope_m * (v - params.mu - half_d)
    else:
        q = -params.slope_m * (v - params.mu + half_d)
    return _clamp(q, params.q_min, params.q_max)


def delayed_dispatch(params: DroopParams, tau: float, v: float, q_prev: float) -> float:
    """Delayed droop: droop term plus `tau` times the previous dispatch,
    saturated after the sum so the stored var stays physical."""
    if not 0.0 <= tau < 1.0:
        raise ControlError("tau must be in [0, 1)")
    return _clamp(droop_dispatch(params, v) + tau * q_prev, params.q_min, params.q_max)


@dataclass(frozen=True)
class AdaptiveParams:
    """Parameter block dispatched by the outer loop: slope `m_p`, error
    offset `q_p`, var limits and the voltage cut-offs they imply."""

    m_p: float
    q_p: float
    q_min_p: float
    q_max_p: float
    v_min_p: float
    v_max_p: float
    mu: float

    def __post_init__(self) -> None:
        if self.m_p < 0:
            raise ControlError("m_p must be >= 0")
        if not (self.q_min_p <= self.q_p <= self.q_max_p):
            raise ControlError("need q_min_p <= q_p <= q_max_p")
        if self.m_p > 0 and math.isfinite(self.v_min_p):
            implied = (self.q_max_p - self.q_p) * 1.0
            expect = self.m_p * (self.mu - self.v_min_p)
            if abs(implied - expect) > _SLOPE_RTOL * max(abs(implied), 1.0):
                raise ControlError("cut-offs inconsistent with slope")

    @classmethod
    def from_slope(
        cls, m_p: float, q_p: float, q_min_p: float, q_max_p: float, mu: float
    ) -> "AdaptiveParams":
        v_min_p, v_max_p = slope_to_cutoffs(m_p, q_p, q_min_p, q_max_p, mu)
        return cls(m_p, q_p, q_min_p, q_max_p, v_min_p, v_max_p, mu)


def adaptive_dispatch(params: AdaptiveParams, v: float) -> float:
    """Adaptive law: q_p - m_p*(v - mu), saturated at [q_min_p, q_max_p].

    Saturation is the only nonlinearity; with q_p = 0 and no saturation
    this is exactly the conventional droop with zero deadband.
    """
    return _clamp(
        params.q_p - params.m_p * (v - params.mu), params.q_min_p, params.q_max_p
    )


def slope_to_cutoffs(
    m_p: float, q_p: float, q_min_p: float, q_max_p: float, mu: float
) -> tuple[float, float]:
    """Voltage cut-offs implied by a slope and var limits.

    Inverse of the slope relation m = (q_lim - q_p)/(mu - v_cut); exact
    round-trip.  m_p = 0 yields the (-inf, +inf) sentinel pair.
    """
    if m_p < 0:
        raise ControlError("m_p must be >= 0")
    if m_p == 0:
        return -math.inf, math.inf
    v_max_p = mu - (q_min_p - q_p) / m_p
    v_min_p = mu - (q_max_p - q_p) / m_p
    return v_min_p, v_max_p


@dataclass(frozen=True)
class ControllerKind:
    """Which inner law an inverter runs: none, conventional, delayed(tau),
    or adaptive."""

    name: str
    tau: float = 0.0

    _NAMES = ("none", "conventional", "delayed", "adaptive")

    def __post_init__(self) -> None:
        if self.name not in self._NAMES:
            raise ControlError(f"unknown controller kind {self.name!r}")
        if not 0.0 <= self.tau < 1.0:
            raise ControlError("tau must be in [0, 1)")

    @classmethod
    def none(cls) -> "ControllerKind":
        return cls("none")

    @classmethod
    def conventional(cls) -> "ControllerKind":
        return cls("conventional")

    @classmethod
    def delayed(cls, tau: float = 0.5) -> "ControllerKind":
        return cls("delayed", tau=tau)

    @classmethod
    def adaptive(cls) -> "ControllerKind":
        return cls("adaptive")
