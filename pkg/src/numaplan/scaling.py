"""Iterative co-optimization of operator replication and placement.

Starting from one replica per operator, each round places the current graph,
then walks the operators sink-first (reverse topological order) and raises
the replication of every bottleneck by the over-supply ratio of its replicas.
The walk stops when a round has no bottleneck left to scale, the total
replica budget is exhausted, placement becomes infeasible, or the time
budget runs out; the best feasible plan seen wins.

A scaling step that makes placement infeasible is rolled back and its
operators are frozen for the rest of the run (opt-in: split them further
instead, which sometimes unblocks placement of too-coarse operators).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any

from .bnb import SearchOptions, SearchResult, search
from .domain import (
    ExecutionGraph,
    ExecutionPlan,
    MachineSpec,
    NoFeasiblePlanError,
    Topology,
    expand_execution_graph,
)
from .rate_model import FetchMode, RateReport


@dataclass
class OptimizeOptions:
    replication_limit: int | None = None  # default: total core count
    compress_ratio: int = 1
    time_budget_s: float = 600.0
    warm_start: bool = False
    mode: FetchMode = FetchMode.NORMAL
    one_core_per_replica: bool = False
    initial_replication: dict[str, int] | None = None
    split_on_failure: bool = False
    placement: str = "bnb"  # bnb | ff | rr


@dataclass
class OptimizeResult:
    plan: ExecutionPlan
    report: RateReport
    value: float
    topology: Topology  # input topology with the chosen replication applied
    trace: list[dict[str, Any]]
    timed_out: bool
    relaxed: bool = False


def bottleneck_step(r_in: float, r_out: float) -> int:
    """Replication increase for a bottleneck: ceiling of its over-supply
    ratio (aggregate input rate over aggregate output rate)."""
    if r_out <= 0:
        raise ValueError("bottleneck_step needs a positive output rate")
    return math.ceil(r_in / r_out)


def _operator_rates(report: RateReport, graph: ExecutionGraph, operator: str) -> tuple[float, float]:
    r_in = 0.0
    r_out = 0.0
    for rep in graph.replicas_of(operator):
        rates = report.rates[rep.id]
        r_in += sum(rates.lam.values())
        r_out += rates.output_total
    return r_in, r_out


def _place(
    graph: ExecutionGraph,
    topology: Topology,
    machine: MachineSpec,
    options: OptimizeOptions,
    budget_s: float,
) -> SearchResult:
    if options.placement == "bnb":
        return search(
            graph,
            topology,
            machine,
            SearchOptions(
                compress_ratio=options.compress_ratio,
                time_budget_s=budget_s,
                warm_start=options.warm_start,
                mode=options.mode,
                one_core_per_replica=options.one_core_per_replica,
            ),
        )
    from . import baselines  # deferred: baselines builds on this module

    if options.placement == "ff":
        fit = baselines.first_fit(
            graph,
            topology,
            machine,
            mode=options.mode,
            one_core_per_replica=options.one_core_per_replica,
        )
        plan, relaxed = fit.plan, fit.relaxed
    elif options.placement == "rr":
        plan = baselines.round_robin(graph, topology, machine)
        relaxed = False
    else:
        raise ValueError(f"unknown placement strategy '{options.placement}'")
    from .constraints import check_plan

    report, violations = check_plan(
        plan,
        topology,
        machine,
        mode=options.mode,
        one_core_per_replica=options.one_core_per_replica,
    )
    feasible = not relaxed and not violations
    return SearchResult(
        feasible=feasible,
        plan=plan if feasible else None,
        value=report.throughput if feasible else None,
        report=report if feasible else None,
        bottlenecks=report.bottlenecks,
        stats=None,  # type: ignore[arg-type]
        timed_out=False,
        graph=graph,
    )


def optimize(
    topology: Topology,
    machine: MachineSpec,
    options: OptimizeOptions | None = None,
) -> OptimizeResult:
    """Run the scaling loop and return the best plan found.

    Raises NoFeasiblePlanError when the starting replication already has no
    feasible placement.
    """
    options = options or OptimizeOptions()
    limit = options.replication_limit
    if limit is None:
        limit = machine.sockets * machine.cores_per_socket
    deadline = time.perf_counter() + options.time_budget_s

    replication = {op.id: 1 for op in topology.operators}
    if options.initial_replication:
        for oid, k in options.initial_replication.items():
            if oid not in replication:
                raise ValueError(f"initial replication for unknown operator '{oid}'")
            if k < 1:
                raise ValueError(f"initial replication must be >= 1 for '{oid}'")
            replication[oid] = int(k)
    if sum(replication.values()) > limit:
        raise ValueError("initial replication exceeds the replication limit")

    reverse_order = list(reversed(topology.topo_order))
    unscalable: set[str] = set()
    trace: list[dict[str, Any]] = []
    best: OptimizeResult | None = None
    timed_out = False

    current: SearchResult | None = None
    current_topology: Topology | None = None
    iteration = 0
    while True:
        budget = deadline - time.perf_counter()
        if budget <= 0:
            timed_out = True
            break
        scaled = topology.with_replication(replication)
        graph = expand_execution_graph(scaled)
        result = _place(graph, scaled, machine, options, budget)
        timed_out = timed_out or result.timed_out

        if not result.feasible:
            if current is None:
                raise NoFeasiblePlanError(
                    "no feasible plan: placement fails at the starting replication"
                )
            scaled_ops = [
                oid
                for oid in replication
                if replication[oid] != _previous_replication[oid]
            ]
            if options.split_on_failure:
                grown = False
                for oid in scaled_ops:
                    if sum(replication.values()) < limit:
                        replication[oid] += 1
                        grown = True
                if grown and not timed_out:
                    continue
            replication = dict(_previous_replication)
            unscalable.update(scaled_ops)
        else:
            trace.append(
                {
                    "iteration": iteration,
                    "replication": dict(replication),
                    "throughput": result.value,
                    "bottlenecks": result.bottlenecks,
                }
            )
            iteration += 1
            if best is None or result.value > best.value:
                best = OptimizeResult(
                    plan=result.plan,
                    report=result.report,
                    value=result.value,
                    topology=scaled,
                    trace=trace,
                    timed_out=False,
                )
            current = result
            current_topology = scaled
        if timed_out:
            break

        # scale every bottleneck of the current feasible plan, sink-first
        bottleneck_ops: set[str] = set()
        for rid in current.bottlenecks:
            for rep in current.graph.replicas:
                if rep.id == rid:
                    bottleneck_ops.add(rep.operator)
                    break
        _previous_replication = dict(replication)
        grew = False
        total = sum(replication.values())
        for oid in reverse_order:
            if oid not in bottleneck_ops or oid in unscalable:
                continue
            r_in, r_out = _operator_rates(current.report, current.graph, oid)
            if r_out <= 0:
                step = limit - total
            else:
                step = bottleneck_step(r_in, r_out)
            step = min(step, limit - total)
            if step <= 0:
                unscalable.add(oid)
                continue
            replication[oid] += step
            total += step
            grew = True
        if not grew:
            break

    if best is None:
        raise NoFeasiblePlanError("no feasible plan found within the time budget")
    best.trace = trace
    best.timed_out = timed_out
    return best
