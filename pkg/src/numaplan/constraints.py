"""Resource-capacity and allocation checks for execution plans.

Three capacity constraints are enforced per socket or socket pair: compute
time, local DRAM bandwidth, and cross-socket channel bandwidth.  Placement
groups produced by graph compression must additionally be co-located.
Capacity comparisons are non-strict with a 1e-9 relative slack.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from .domain import ExecutionGraph, ExecutionPlan, MachineSpec, Topology
from .rate_model import (
    FetchMode,
    RateReport,
    _EvalResult,
    _report,
    _result_for_plan,
)

REL_TOL = 1e-9

CPU = "cpu"
DRAM = "dram_bandwidth"
CHANNEL = "channel"
ALLOCATION = "allocation"


@dataclass(frozen=True)
class ConstraintViolation:
    """One capacity or allocation breach: demand exceeded capacity.

    ``where`` is a socket id, an ordered (source, destination) socket pair for
    channel violations, or a group id for co-location breaches.
    """

    kind: str
    where: int | tuple[int, int] | str
    demand: float
    capacity: float

    def to_dict(self) -> dict[str, Any]:
        where: Any = list(self.where) if isinstance(self.where, tuple) else self.where
        return {
            "kind": self.kind,
            "where": where,
            "demand": self.demand,
            "capacity": self.capacity,
        }


def fits(demand: float, capacity: float) -> bool:
    return demand <= capacity * (1.0 + REL_TOL)


def check_cpu(report: RateReport, machine: MachineSpec) -> list[ConstraintViolation]:
    """Per-socket compute demand against the socket budget."""
    cap = machine.cpu_capacity
    return [
        ConstraintViolation(CPU, i, used, cap)
        for i, used in enumerate(report.socket_cpu_used)
        if not fits(used, cap)
    ]


def check_dram_bandwidth(
    report: RateReport, machine: MachineSpec
) -> list[ConstraintViolation]:
    """Per-socket DRAM traffic against the local bandwidth limit."""
    return [
        ConstraintViolation(DRAM, i, used, machine.dram_bandwidth[i])
        for i, used in enumerate(report.socket_bw_used)
        if not fits(used, machine.dram_bandwidth[i])
    ]


def check_channel(
    report: RateReport, machine: MachineSpec
) -> list[ConstraintViolation]:
    """Directional cross-socket traffic against the channel limits."""
    out: list[ConstraintViolation] = []
    for i in range(machine.sockets):
        for j in range(machine.sockets):
            if i == j:
                continue
            used = report.channel_used[i][j]
            if not fits(used, machine.channel[i][j]):
                out.append(ConstraintViolation(CHANNEL, (i, j), used, machine.channel[i][j]))
    return out


def _allocation_violations(
    graph: ExecutionGraph,
    placement: dict[str, int],
    machine: MachineSpec,
    one_core_per_replica: bool,
) -> list[ConstraintViolation]:
    out: list[ConstraintViolation] = []
    for gid, members in graph.groups.items():
        sockets = {placement[r] for r in members}
        if len(sockets) > 1:
            out.append(ConstraintViolation(ALLOCATION, gid, float(len(sockets)), 1.0))
    if one_core_per_replica:
        counts = [0] * machine.sockets
        for r in graph.replicas:
            counts[placement[r.id]] += 1
        for i, c in enumerate(counts):
            if c > machine.cores_per_socket:
                out.append(
                    ConstraintViolation(ALLOCATION, i, float(c), float(machine.cores_per_socket))
                )
    return out


def _capacity_violations(
    result: _EvalResult, machine: MachineSpec
) -> list[ConstraintViolation]:
    cap = machine.cpu_capacity
    out = [
        ConstraintViolation(CPU, i, used, cap)
        for i, used in enumerate(result.cpu)
        if not fits(used, cap)
    ]
    out += [
        ConstraintViolation(DRAM, i, used, machine.dram_bandwidth[i])
        for i, used in enumerate(result.bw)
        if not fits(used, machine.dram_bandwidth[i])
    ]
    for i in range(machine.sockets):
        for j in range(machine.sockets):
            if i != j and not fits(result.channel[i][j], machine.channel[i][j]):
                out.append(
                    ConstraintViolation(CHANNEL, (i, j), result.channel[i][j], machine.channel[i][j])
                )
    return out


def check_plan(
    plan: ExecutionPlan,
    topology: Topology,
    machine: MachineSpec,
    mode: FetchMode = FetchMode.NORMAL,
    one_core_per_replica: bool = False,
) -> tuple[RateReport, list[ConstraintViolation]]:
    """Evaluate the model once and run every check.

    An empty violation list means the plan is a feasible solution.
    """
    result = _result_for_plan(plan, topology, machine, mode)
    violations = _capacity_violations(result, machine)
    violations += _allocation_violations(
        plan.graph, plan.placement, machine, one_core_per_replica
    )
    return _report(result), violations


def plan_value_and_feasibility(
    plan: ExecutionPlan,
    topology: Topology,
    machine: MachineSpec,
    mode: FetchMode = FetchMode.NORMAL,
    one_core_per_replica: bool = False,
) -> tuple[float, bool, _EvalResult]:
    """Lean variant of check_plan for enumeration-heavy callers.

    Shares the exact evaluation path with check_plan, so values compare
    bit-identically across the optimizer and the exhaustive oracle.
    """
    result = _result_for_plan(plan, topology, machine, mode)
    feasible = not _capacity_violations(result, machine) and not _allocation_violations(
        plan.graph, plan.placement, machine, one_core_per_replica
    )
    return result.throughput, feasible, result
