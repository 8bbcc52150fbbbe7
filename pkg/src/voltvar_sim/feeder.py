"""Distribution feeder model, Newton power flow, and voltage sensitivity.

Positive-sequence balanced model, per-unit on a single system VA base.
All functions are pure: models are immutable snapshots and every operation
returns new objects, so distinct snapshots are safe to use concurrently.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 30


class FeederError(Exception):
    """Invalid feeder description or topology request."""


class PowerFlowError(FeederError):
    """Power-flow level failure (disconnection, singular Jacobian)."""


@dataclass(frozen=True)
class Bus:
    """Network node. `kind` is "slack" (substation) or "load" (PQ).

    `v_set` is the substation voltage in pu and is only meaningful on the
    slack bus. `base_voltage` is in volts; every other quantity is pu.
    """

    id: str
    kind: str
    base_voltage: float = 4160.0
    load_p: float = 0.0
    load_q: float = 0.0
    v_set: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("slack", "load"):
            raise FeederError(f"bus {self.id}: unknown kind {self.kind!r}")
        if not self.base_voltage > 0:
            raise FeederError(f"bus {self.id}: base_voltage must be > 0")
        for name in ("load_p", "load_q", "v_set"):
            if not np.isfinite(getattr(self, name)):
                raise FeederError(f"bus {self.id}: {name} must be finite")


@dataclass(frozen=True)
class Line:
    """Series branch. `switch_state` is "closed", "open", or "none"
    (not a switch). Only switches may be operated by topology events."""

    from_bus: str
    to_bus: str
    resistance: float
    reactance: float
    switch_state: str = "none"
    id: str | None = None

    def __post_init__(self) -> None:
        if self.switch_state not in ("closed", "open", "none"):
            raise FeederError(
                f"line {self.name}: bad switch_state {self.switch_state!r}"
            )
        if abs(complex(self.resistance, self.reactance)) <= 0:
            raise FeederError(f"line {self.name}: impedance magnitude must be > 0")

    @property
    def name(self) -> str:
        return self.id if self.id is not None else f"{self.from_bus}-{self.to_bus}"

    @property
    def in_service(self) -> bool:
        return self.switch_state != "open"


@dataclass(frozen=True)
class PvUnit:
    """PV inverter attached to a bus. `p_out` is the time-varying real
    output and `q_inj` the reactive state, both pu on the system base."""

    bus: str
    rating_s: float
    p_out: float = 0.0
    q_inj: float = 0.0

    def __post_init__(self) -> None:
        if self.rating_s <= 0:
            raise FeederError(f"pv at {self.bus}: rating_s must be > 0")
        if self.p_out < 0:
            raise FeederError(f"pv at {self.bus}: p_out must be >= 0")
        if self.p_out > self.rating_s * (1 + 1e-9):
            raise FeederError(f"pv at {self.bus}: p_out exceeds rating_s")


@dataclass(frozen=True)
class FeederModel:
    """Immutable feeder snapshot: buses, lines, PV units.

    `detachable_buses` are buses that are de-energized in the as-built
    switch configuration (behind normally-open switches).  Switch events
    may re-island exactly those buses; islanding any other load/PV bus is
    an error.  The set is computed on construction and carried through
    topology events unchanged.
    """

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    pv_units: tuple[PvUnit, ...] = ()
    name: str = ""
    detachable_buses: frozenset[str] | None = None

    def __post_init__(self) -> None:
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise FeederError("duplicate bus ids")
        slacks = [b for b in self.buses if b.kind == "slack"]
        if len(slacks) != 1:
            raise FeederError(f"need exactly one slack bus, found {len(slacks)}")
        known = set(ids)
        for ln in self.lines:
            if ln.from_bus not in known or ln.to_bus not in known:
                raise FeederError(f"line {ln.name}: references unknown bus")
        pv_buses = [u.bus for u in self.pv_units]
        if len(set(pv_buses)) != len(pv_buses):
            raise FeederError("multiple PV units on one bus are not supported")
        for u in self.pv_units:
            if u.bus not in known:
                raise FeederError(f"pv unit references unknown bus {u.bus}")
        # every bus must be reachable from the slack with all switches closed
        full = self._reach(all_switches_closed=True)
        for bus_id in ids:
            if bus_id not in full:
                raise PowerFlowError(f"disconnected bus: {bus_id}")
        if self.detachable_buses is None:
            dark = frozenset(ids) - self._reach(all_switches_closed=False)
            object.__setattr__(self, "detachable_buses", dark)

    def _reach(self, all_switches_closed: bool) -> set[str]:
        adj: dict[str, list[str]] = {b.id: [] for b in self.buses}
        for ln in self.lines:
            if ln.in_service or all_switches_closed:
                adj[ln.from_bus].append(ln.to_bus)
                adj[ln.to_bus].append(ln.from_bus)
        seen = {self.slack_id}
        stack = [self.slack_id]
        while stack:
            for nxt in adj[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen

    @property
    def slack_id(self) -> str:
        return next(b.id for b in self.buses if b.kind == "slack")

    @property
    def slack(self) -> Bus:
        return next(b for b in self.buses if b.kind == "slack")

    @property
    def bus_ids(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.buses)

    @property
    def pv_buses(self) -> tuple[str, ...]:
        return tuple(u.bus for u in self.pv_units)

    @property
    def switch_ids(self) -> tuple[str, ...]:
        return tuple(ln.name for ln in self.lines if ln.switch_state != "none")

    def get_bus(self, bus_id: str) -> Bus:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise FeederError(f"no such bus: {bus_id}")

    def pv_at(self, bus_id: str) -> PvUnit:
        for u in self.pv_units:
            if u.bus == bus_id:
                return u
        raise FeederError(f"no pv unit at bus: {bus_id}")

    def energized_buses(self) -> tuple[str, ...]:
        reach = self._reach(all_switches_closed=False)
        return tuple(b.id for b in self.buses if b.id in reach)

    def with_slack_voltage(self, v_pu: float) -> "FeederModel":
        buses = tuple(
            replace(b, v_set=v_pu) if b.kind == "slack" else b for b in self.buses
        )
        return replace(self, buses=buses)

    def with_scaled_loads(self, factor: float) -> "FeederModel":
        if factor < 0:
            raise FeederError("load scale factor must be >= 0")
        buses = tuple(
            replace(b, load_p=b.load_p * factor, load_q=b.load_q * factor)
            for b in self.buses
        )
        return replace(self, buses=buses)


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    """Voltages over the energized island. Buses de-energized behind open
    switches are absent; `voltage()` returns NaN for them."""

    bus_ids: tuple[str, ...]
    v_mag: np.ndarray
    v_ang: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    slack_id: str

    @property
    def load_bus_ids(self) -> tuple[str, ...]:
        return tuple(b for b in self.bus_ids if b != self.slack_id)

    def voltage(self, bus_id: str) -> float:
        try:
            return float(self.v_mag[self.bus_ids.index(bus_id)])
        except ValueError:
            return float("nan")

    def angle(self, bus_id: str) -> float:
        try:
            return float(self.v_ang[self.bus_ids.index(bus_id)])
        except ValueError:
            return float("nan")

    @property
    def point_id(self) -> str:
        """Deterministic tag of the operating point (topology + voltages)."""
        h = hashlib.sha1()
        h.update(",".join(self.bus_ids).encode())
        h.update(np.round(self.v_mag, 10).tobytes())
        h.update(np.round(self.v_ang, 10).tobytes())
        return h.hexdigest()[:12]


def _island_ybus(model: FeederModel) -> tuple[tuple[str, ...], np.ndarray]:
    island = model.energized_buses()
    index = {b: i for i, b in enumerate(island)}
    n = len(island)
    ybus = np.zeros((n, n), dtype=complex)
    for ln in model.lines:
        if not ln.in_service:
            continue
        if ln.from_bus not in index or ln.to_bus not in index:
            continue
        y = 1.0 / complex(ln.resistance, ln.reactance)
        i, j = index[ln.from_bus], index[ln.to_bus]
        ybus[i, i] += y
        ybus[j, j] += y
        ybus[i, j] -= y
        ybus[j, i] -= y
    return island, ybus


def _spec_injections(
    model: FeederModel,
    island: tuple[str, ...],
    injections: Mapping[str, tuple[float, float]] | None,
) -> tuple[np.ndarray, np.ndarray]:
    index = {b: i for i, b in enumerate(island)}
    p = np.zeros(len(island))
    q = np.zeros(len(island))
    for b in model.buses:
        if b.id in index:
            p[index[b.id]] -= b.load_p
            q[index[b.id]] -= b.load_q
    for u in model.pv_units:
        if u.bus in index:
            p[index[u.bus]] += u.p_out
            q[index[u.bus]] += u.q_inj
    if injections:
        for bus_id, (pi, qi) in injections.items():
            if bus_id in index:  # injections at dark buses are inert
                p[index[bus_id]] += pi
                q[index[bus_id]] += qi
    return p, q


def _dsbus_dv(ybus: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ibus = ybus @ v
    diag_v = np.diag(v)
    diag_i = np.diag(ibus)
    diag_vnorm = np.diag(v / np.abs(v))
    ds_dvm = diag_v @ np.conj(ybus @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm
    ds_dva = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
    return ds_dva, ds_dvm


def _jacobian(ybus: np.ndarray, v: np.ndarray, pq: np.ndarray) -> np.ndarray:
    ds_dva, ds_dvm = _dsbus_dv(ybus, v)
    sel = np.ix_(pq, pq)
    top = np.hstack([ds_dva[sel].real, ds_dvm[sel].real])
    bot = np.hstack([ds_dva[sel].imag, ds_dvm[sel].imag])
    return np.vstack([top, bot])


def _newton(
    ybus: np.ndarray,
    p_spec: np.ndarray,
    q_spec: np.ndarray,
    slack_idx: int,
    v_slack: float,
    v0: np.ndarray | None,
    tol: float,
    max_iter: int,
) -> tuple[np.ndarray, np.ndarray, bool, int, float]:
    n = ybus.shape[0]
    pq = np.array([i for i in range(n) if i != slack_idx], dtype=int)
    v_mag = np.ones(n) if v0 is None else np.abs(v0).copy()
    v_ang = np.zeros(n) if v0 is None else np.angle(v0).copy()
    v_mag[slack_idx] = v_slack
    v_ang[slack_idx] = 0.0
    mismatch = np.inf
    iterations = 0
    converged = False
    for _ in range(max_iter + 1):
        v = v_mag * np.exp(1j * v_ang)
        s_calc = v * np.conj(ybus @ v)
        dp = p_spec[pq] - s_calc.real[pq]
        dq = q_spec[pq] - s_calc.imag[pq]
        mismatch = float(max(np.max(np.abs(dp), initial=0.0),
                             np.max(np.abs(dq), initial=0.0)))
        if mismatch <= tol:
            converged = True
            break
        if iterations >= max_iter:
            break
        jac = _jacobian(ybus, v, pq)
        try:
            dx = np.linalg.solve(jac, np.concatenate([dp, dq]))
        except np.linalg.LinAlgError:
            break
        npq = len(pq)
        v_ang[pq] += dx[:npq]
        v_mag[pq] += dx[npq:]
        iterations += 1
        if not np.all(np.isfinite(v_mag)) or np.any(v_mag <= 0):
            break
    bad = ~np.isfinite(v_mag) | (v_mag <= 0)
    if np.any(bad):
        converged = False
    return v_mag, v_ang, converged, iterations, mismatch


def solve_power_flow(
    model: FeederModel,
    injections: Mapping[str, tuple[float, float]] | None = None,
    v_init: PowerFlowSolution | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> PowerFlowSolution:
    """Solve the feeder power flow over the energized island.

    `injections` are extra per-bus (P, Q) pu injections added on top of
    the model's loads and PV unit outputs (the simulation engine feeds
    inverter dispatches through here).  `v_init` warm-starts Newton from a
    previous solution; on non-convergence the solver falls back to a flat
    start once.  Non-convergence is reported via `converged=False`, not
    raised.
    """
    island, ybus = _island_ybus(model)
    p_spec, q_spec = _spec_injections(model, island, injections)
    slack_idx = island.index(model.slack_id)
    v_slack = model.slack.v_set

    v0 = None
    if v_init is not None and v_init.bus_ids == island:
        v0 = v_init.v_mag * np.exp(1j * v_init.v_ang)
    v_mag, v_ang, converged, iterations, mismatch = _newton(
        ybus, p_spec, q_spec, slack_idx, v_slack, v0, tol, max_iter
    )
    if not converged and v0 is not None:
        v_mag, v_ang, converged, iterations, mismatch = _newton(
            ybus, p_spec, q_spec, slack_idx, v_slack, None, tol, max_iter
        )
    return PowerFlowSolution(
        bus_ids=island,
        v_mag=v_mag,
        v_ang=v_ang,
        converged=converged,
        iterations=iterations,
        max_mismatch=mismatch,
        slack_id=model.slack_id,
    )


def sensitivity_matrix(
    model: FeederModel,
    solution: PowerFlowSolution,
    buses: tuple[str, ...] | None = None,
) -> np.ndarray:
    """Voltage sensitivity A with A[i][j] = dV_i/dQ_j at the operating point.

    Extracted from the power-flow Jacobian, reduced by default to the
    energized PV-hosting buses (the per-inverter matrix the stability and
    convergence analyses use); pass `buses` for any other subset.  Row and
    column order follows the `buses` argument / island order.
    """
    if not solution.converged:
        raise PowerFlowError("sensitivity requires a converged operating point")
    island, ybus = _island_ybus(model)
    if island != solution.bus_ids:
        raise PowerFlowError("solution does not match the model topology")
    if buses is None:
        buses = tuple(b for b in island if b in set(model.pv_buses))
        if not buses:
            buses = tuple(b for b in island if b != model.slack_id)
    load_ids = [b for b in island if b != model.slack_id]
    for b in buses:
        if b not in load_ids:
            raise FeederError(f"bus {b} is not an energized load bus")

    slack_idx = island.index(model.slack_id)
    pq = np.array([i for i in range(len(island)) if i != slack_idx], dtype=int)
    v = solution.v_mag * np.exp(1j * solution.v_ang)
    jac = _jacobian(ybus, v, pq)
    npq = len(pq)
    rhs = np.vstack([np.zeros((npq, npq)), np.eye(npq)])
    try:
        x = np.linalg.solve(jac, rhs)
    except np.linalg.LinAlgError as exc:
        raise PowerFlowError(
            "singular Jacobian at operating point (near voltage collapse)"
        ) from exc
    a_full = x[npq:, :]
    sel = [load_ids.index(b) for b in buses]
    return a_full[np.ix_(sel, sel)]


def apply_topology_event(
    model: FeederModel, switch_id: str, new_state: str
) -> FeederModel:
    """Operate a switch and return the updated model.

    Opening may only de-energize buses that were already de-energized in
    the as-built configuration (normally-open switch semantics); islanding
    any other load/PV bus raises.
    """
    if new_state not in ("open", "closed"):
        raise FeederError(f"bad switch state {new_state!r}")
    hits = [ln for ln in model.lines if ln.name == switch_id]
    if not hits:
        raise FeederError(f"no such switch: {switch_id}")
    target = hits[0]
    if target.switch_state == "none":
        raise FeederError(f"line {switch_id} is not a switch")
    lines = tuple(
        replace(ln, switch_state=new_state) if ln.name == switch_id else ln
        for ln in model.lines
    )
    updated = replace(model, lines=lines)
    before = set(model.energized_buses())
    after = set(updated.energized_buses())
    newly_dark = before - after
    illegal = sorted(newly_dark - set(model.detachable_buses or frozenset()))
    if illegal:
        raise FeederError(
            f"opening {switch_id} would island bus(es): {', '.join(illegal)}"
        )
    return updated


def bus_injections(model: FeederModel, solution: PowerFlowSolution) -> np.ndarray:
    """Complex net power injection at each island bus, from the solution."""
    island, ybus = _island_ybus(model)
    if island != solution.bus_ids:
        raise PowerFlowError("solution does not match the model topology")
    v = solution.v_mag * np.exp(1j * solution.v_ang)
    return v * np.conj(ybus @ v)


def total_losses(model: FeederModel, solution: PowerFlowSolution) -> complex:
    """Sum of series losses over in-service lines of the energized island."""
    island = solution.bus_ids
    index = {b: i for i, b in enumerate(island)}
    v = solution.v_mag * np.exp(1j * solution.v_ang)
    loss = 0.0 + 0.0j
    for ln in model.lines:
        if not ln.in_service or ln.from_bus not in index or ln.to_bus not in index:
            continue
        z = complex(ln.resistance, ln.reactance)
        i_line = (v[index[ln.from_bus]] - v[index[ln.to_bus]]) / z
        loss += z * abs(i_line) ** 2
    return loss


def feeder_from_dict(data: dict) -> FeederModel:
    try:
        buses = tuple(
            Bus(
                id=str(b["id"]),
                kind=str(b.get("kind", "load")),
                base_voltage=float(b.get("base_voltage", 4160.0)),
                load_p=float(b.get("load_p", 0.0)),
                load_q=float(b.get("load_q", 0.0)),
                v_set=float(b.get("v_set", 1.0)),
            )
            for b in data["buses"]
        )
        lines = tuple(
            Line(
                from_bus=str(ln["from"]),
                to_bus=str(ln["to"]),
                resistance=float(ln["resistance"]),
                reactance=float(ln["reactance"]),
                switch_state=str(ln.get("switch_state", "none")),
                id=ln.get("id"),
            )
            for ln in data["lines"]
        )
        pv_units = tuple(
            PvUnit(
                bus=str(u["bus"]),
                rating_s=float(u["rating_s"]),
                p_out=float(u.get("p_out", 0.0)),
                q_inj=float(u.get("q_inj", 0.0)),
            )
            for u in data.get("pv_units", ())
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FeederError(f"malformed feeder description: {exc}") from exc
    return FeederModel(
        buses=buses, lines=lines, pv_units=pv_units, name=str(data.get("name", ""))
    )


def feeder_to_dict(model: FeederModel) -> dict:
    return {
        "name": model.name,
        "buses": [
            {
                "id": b.id,
                "kind": b.kind,
                "base_voltage": b.base_voltage,
                "load_p": b.load_p,
                "load_q": b.load_q,
                "v_set": b.v_set,
            }
            for b in model.buses
        ],
        "lines": [
            {
                "id": ln.id,
                "from": ln.from_bus,
                "to": ln.to_bus,
                "resistance": ln.resistance,
                "reactance": ln.reactance,
                "switch_state": ln.switch_state,
            }
            for ln in model.lines
        ],
        "pv_units": [
            {
                "bus": u.bus,
                "rating_s": u.rating_s,
                "p_out": u.p_out,
                "q_inj": u.q_inj,
            }
            for u in model.pv_units
        ],
    }


def load_feeder(path: str | Path) -> FeederModel:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise FeederError(f"invalid feeder JSON in {path}: {exc}") from exc
    return feeder_from_dict(data)
