"""Rate-based performance model of a placed streaming execution graph.

Every replica is modelled per producer: an input rate (tuples/s the producer
stream delivers), a demand (ns a tuple from that producer costs, including the
socket-distance-dependent fetch), and a basic processing rate (one core's
budget divided by the demand).  Tuples from several producers are served
first-come-first-serve, so a replica's total rate is the input-weighted
harmonic combination of its basic rates, each producer gets a cooperative
share proportional to its input, and the actual rate is capped by the input
itself.  Output rates chain through the DAG in one topological pass;
application throughput is the summed output rate of the sink replicas.

A replica whose cooperative share is strictly below its input rate is
over-supplied: it accumulates a backlog and is a bottleneck of the plan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any

from .domain import ExecutionGraph, ExecutionPlan, MachineSpec, Topology

EXTERNAL_SOURCE = "@external"


class FetchMode(Enum):
    """How per-tuple fetch cost reacts to placement.

    NORMAL is the placement-aware model.  ZERO ignores remote access entirely;
    WORST charges every edge the machine's worst remote distance.  The fixed
    modes exist for the distance-blind baseline optimizers.
    """

    NORMAL = "normal"
    ZERO = "zero"
    WORST = "worst"


def fetch_cost(
    tuple_bytes: float,
    consumer_socket: int,
    producer_socket: int,
    machine: MachineSpec,
    mode: FetchMode = FetchMode.NORMAL,
) -> float:
    """ns to fetch one tuple across sockets; 0 when collocated."""
    if mode is FetchMode.ZERO:
        return 0.0
    lines = math.ceil(tuple_bytes / machine.cacheline_bytes)
    if mode is FetchMode.WORST:
        return lines * machine.max_remote_latency
    if consumer_socket == producer_socket:
        return 0.0
    return lines * machine.latency[producer_socket][consumer_socket]


def demand_ns(sigma_br: float, exec_ns: float, fetch_ns: float) -> float:
    """Per-tuple cost for one producer stream: fetch plus the processed share
    of the execution cost."""
    return fetch_ns + sigma_br * exec_ns


def basic_rate(xi_ns: float, machine: MachineSpec) -> float:
    """Tuples/s one core sustains at a per-tuple cost of ``xi_ns``."""
    if xi_ns <= 0:
        raise ValueError("zero-cost operator: per-tuple demand must be > 0")
    return machine.core_budget / xi_ns


def total_rate(lambdas: dict[str, float], mus: dict[str, float]) -> float:
    """Input-weighted harmonic combination of per-producer basic rates."""
    if set(lambdas) != set(mus):
        raise ValueError("lambdas and mus must cover the same producers")
    lam_total = sum(lambdas.values())
    if lam_total == 0:
        return 0.0
    time_share = sum(lambdas[s] / mus[s] for s in lambdas)
    return lam_total / time_share


def cooperative_rate(mu_total: float, lam: float, lam_total: float) -> float:
    """Capacity share granted to one producer under first-come-first-serve."""
    if lam_total == 0:
        return 0.0
    return mu_total * lam / lam_total


def actual_rate(coop: float, lam: float) -> tuple[float, bool]:
    """Realized per-producer processing rate and the over-supply flag.

    A tie (cooperative share exactly equal to the input) counts as just
    fulfilled, not over-supplied.
    """
    return min(coop, lam), coop < lam


def output_rate(actual: float, sigma_out: float) -> float:
    return actual * sigma_out


def relative_error(measured: float, estimated: float) -> float:
    """|measured - estimated| / measured."""
    if measured <= 0:
        raise ValueError("measured throughput must be > 0")
    return abs(measured - estimated) / measured


# -- whole-plan evaluation ---------------------------------------------------


@dataclass
class ReplicaRates:
    """Per-replica model outputs, keyed by producer replica id.

    The external ingress of a spout appears under the pseudo producer
    ``@external``.
    """

    lam: dict[str, float]
    fetch: dict[str, float]
    demand: dict[str, float]
    basic: dict[str, float]
    total: float
    cooperative: dict[str, float]
    actual: dict[str, float]
    output: dict[str, float]
    output_total: float
    over_supplied: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "lambda": self.lam,
            "fetch_ns": self.fetch,
            "demand_ns": self.demand,
            "basic_rate": self.basic,
            "total_rate": self.total,
            "cooperative_rate": self.cooperative,
            "actual_rate": self.actual,
            "output_rate": self.output,
            "output_total": self.output_total,
            "over_supplied": self.over_supplied,
        }


@dataclass
class RateReport:
    """Model outputs for a total plan plus per-socket resource usage."""

    rates: dict[str, ReplicaRates]
    throughput: float
    bottlenecks: list[str]
    socket_cpu_used: list[float]
    socket_bw_used: list[float]
    channel_used: list[list[float]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "throughput": self.throughput,
            "bottlenecks": self.bottlenecks,
            "socket_cpu_used": self.socket_cpu_used,
            "socket_bw_used": self.socket_bw_used,
            "channel_used": self.channel_used,
            "replicas": {rid: r.to_dict() for rid, r in self.rates.items()},
        }


@dataclass
class _Node:
    """Topology-derived evaluation record for one replica."""

    rid: str
    exec_ns: float
    tuple_bytes: float
    dram_bytes: float
    sink: bool
    external_share: float  # ingress tuples/s if fed externally, else 0
    # (producer pos or -1 for external, sigma_in, sigma_br, sigma_out, ratio)
    inputs: list[tuple[int, float, float, float, float]]


class _EvalContext:
    """Flattened view of (graph, topology) reused across many placements."""

    def __init__(self, graph: ExecutionGraph, topology: Topology) -> None:
        order = graph.topo_order
        pos_of = {r.id: i for i, r in enumerate(order)}
        nodes: list[_Node] = []
        for rep in order:
            op = topology.operator_by_id[rep.operator]
            inputs: list[tuple[int, float, float, float, float]] = []
            external = 0.0
            in_edges = graph.in_edges(rep.id)
            if op.spout and not in_edges:
                external = topology.external_rate / len(graph.replicas_of(op.id))
                inputs.append((-1, 1.0, 1.0, 1.0, 1.0))
            else:
                for e in in_edges:
                    inputs.append(
                        (pos_of[e.producer], e.sigma_in, e.sigma_br, e.sigma_out, e.ratio)
                    )
            nodes.append(
                _Node(
                    rid=rep.id,
                    exec_ns=op.exec_ns,
                    tuple_bytes=op.tuple_bytes,
                    dram_bytes=op.dram_bytes,
                    sink=op.sink,
                    external_share=external,
                    inputs=inputs,
                )
            )
        self.nodes = nodes
        self.pos_of = pos_of


def _context(graph: ExecutionGraph, topology: Topology) -> _EvalContext:
    cached = getattr(graph, "_eval_cache", None)
    if cached is not None and cached[0] is topology:
        return cached[1]
    ctx = _EvalContext(graph, topology)
    graph._eval_cache = (topology, ctx)
    return ctx


@dataclass
class _EvalResult:
    """Lean per-position arrays produced by one model pass."""

    ctx: _EvalContext
    sockets: list[int]
    lam: list[list[float]]
    fetch: list[list[float]]
    xi: list[list[float]]
    mu: list[list[float]]
    mu_total: list[float]
    coop: list[list[float]]
    actual: list[list[float]]
    out: list[list[float]]
    out_total: list[float]
    over: list[bool]
    cpu: list[float]
    bw: list[float]
    channel: list[list[float]]
    throughput: float


def _evaluate(
    ctx: _EvalContext,
    sockets: list[int],
    machine: MachineSpec,
    mode: FetchMode,
) -> _EvalResult:
    n = machine.sockets
    budget = machine.core_budget
    cl = machine.cacheline_bytes
    worst = machine.max_remote_latency if mode is FetchMode.WORST else 0.0
    lat = machine.latency
    lam_a: list[list[float]] = []
    fetch_a: list[list[float]] = []
    xi_a: list[list[float]] = []
    mu_a: list[list[float]] = []
    mu_tot: list[float] = []
    coop_a: list[list[float]] = []
    act_a: list[list[float]] = []
    out_a: list[list[float]] = []
    out_tot: list[float] = []
    over_a: list[bool] = []
    cpu = [0.0] * n
    bw = [0.0] * n
    channel = [[0.0] * n for _ in range(n)]
    throughput = 0.0
    for pos, node in enumerate(ctx.nodes):
        k = sockets[pos]
        lines = math.ceil(node.tuple_bytes / cl)
        lams: list[float] = []
        fetches: list[float] = []
        xis: list[float] = []
        mus: list[float] = []
        for ppos, s_in, s_br, _s_out, ratio in node.inputs:
            if ppos < 0:
                lam = node.external_share
                f = 0.0
            else:
                lam = s_in * out_tot[ppos] * ratio
                if mode is FetchMode.ZERO:
                    f = 0.0
                elif mode is FetchMode.WORST:
                    f = lines * worst
                else:
                    pj = sockets[ppos]
                    f = 0.0 if pj == k else lines * lat[pj][k]
            xi = f + s_br * node.exec_ns
            if xi <= 0:
                raise ValueError(
                    f"zero-cost operator: replica '{node.rid}' has zero per-tuple demand"
                )
            lams.append(lam)
            fetches.append(f)
            xis.append(xi)
            mus.append(budget / xi)
        lam_total = sum(lams)
        if lam_total > 0:
            mu_c = lam_total / sum(l / m for l, m in zip(lams, mus))
        else:
            mu_c = 0.0
        coops: list[float] = []
        acts: list[float] = []
        outs: list[float] = []
        total_out = 0.0
        total_act = 0.0
        over = False
        for i, (ppos, _s_in, _s_br, s_out, _ratio) in enumerate(node.inputs):
            coop = mu_c * lams[i] / lam_total if lam_total > 0 else 0.0
            act = coop if coop < lams[i] else lams[i]
            if coop < lams[i]:
                over = True
            o = act * s_out
            coops.append(coop)
            acts.append(act)
            outs.append(o)
            total_out += o
            total_act += act
            cpu[k] += act * xis[i]
            if ppos >= 0:
                pj = sockets[ppos]
                if pj != k:
                    channel[pj][k] += o * node.tuple_bytes
        bw[k] += total_act * node.dram_bytes
        if node.sink:
            throughput += total_out
        lam_a.append(lams)
        fetch_a.append(fetches)
        xi_a.append(xis)
        mu_a.append(mus)
        mu_tot.append(mu_c)
        coop_a.append(coops)
        act_a.append(acts)
        out_a.append(outs)
        out_tot.append(total_out)
        over_a.append(over)
    return _EvalResult(
        ctx=ctx,
        sockets=sockets,
        lam=lam_a,
        fetch=fetch_a,
        xi=xi_a,
        mu=mu_a,
        mu_total=mu_tot,
        coop=coop_a,
        actual=act_a,
        out=out_a,
        out_total=out_tot,
        over=over_a,
        cpu=cpu,
        bw=bw,
        channel=channel,
        throughput=throughput,
    )


def _sockets_by_pos(
    plan: ExecutionPlan, ctx: _EvalContext, machine: MachineSpec
) -> list[int]:
    missing = [n.rid for n in ctx.nodes if n.rid not in plan.placement]
    if missing:
        raise ValueError(f"partial plan: replica '{missing[0]}' unplaced")
    plan.validate_sockets(machine)
    return [plan.placement[n.rid] for n in ctx.nodes]


def _result_for_plan(
    plan: ExecutionPlan,
    topology: Topology,
    machine: MachineSpec,
    mode: FetchMode = FetchMode.NORMAL,
) -> _EvalResult:
    ctx = _context(plan.graph, topology)
    return _evaluate(ctx, _sockets_by_pos(plan, ctx, machine), machine, mode)


def _report(result: _EvalResult) -> RateReport:
    ctx = result.ctx
    rates: dict[str, ReplicaRates] = {}
    bottlenecks: list[str] = []
    for pos, node in enumerate(ctx.nodes):
        keys = [
            EXTERNAL_SOURCE if ppos < 0 else ctx.nodes[ppos].rid
            for ppos, *_ in node.inputs
        ]
        rates[node.rid] = ReplicaRates(
            lam=dict(zip(keys, result.lam[pos])),
            fetch=dict(zip(keys, result.fetch[pos])),
            demand=dict(zip(keys, result.xi[pos])),
            basic=dict(zip(keys, result.mu[pos])),
            total=result.mu_total[pos],
            cooperative=dict(zip(keys, result.coop[pos])),
            actual=dict(zip(keys, result.actual[pos])),
            output=dict(zip(keys, result.out[pos])),
            output_total=result.out_total[pos],
            over_supplied=result.over[pos],
        )
        if result.over[pos]:
            bottlenecks.append(node.rid)
    return RateReport(
        rates=rates,
        throughput=result.throughput,
        bottlenecks=sorted(bottlenecks),
        socket_cpu_used=result.cpu,
        socket_bw_used=result.bw,
        channel_used=result.channel,
    )


def evaluate_plan(
    plan: ExecutionPlan,
    topology: Topology,
    machine: MachineSpec,
    mode: FetchMode = FetchMode.NORMAL,
) -> RateReport:
    """Evaluate a total plan in one topological pass.

    Raises ValueError on a partial plan or an invalid socket id.
    """
    return _report(_result_for_plan(plan, topology, machine, mode))


def communication_matrix(
    report: RateReport, plan: ExecutionPlan, machine: MachineSpec
) -> list[list[float]]:
    """Cross-socket fetch load (ns/s): entry [i][j] sums actual-rate x fetch
    cost over edges with the producer on socket i and the consumer on j."""
    n = machine.sockets
    matrix = [[0.0] * n for _ in range(n)]
    for rid, rates in report.rates.items():
        j = plan.placement[rid]
        for producer, f in rates.fetch.items():
            if producer == EXTERNAL_SOURCE or f == 0.0:
                continue
            i = plan.placement[producer]
            if i != j:
                matrix[i][j] += rates.actual[producer] * f
    return matrix


def matrix_to_csv(matrix: list[list[float]]) -> str:
    """CSV rendering, one row per source socket."""
    return "\n".join(",".join(repr(v) for v in row) for row in matrix) + "\n"
