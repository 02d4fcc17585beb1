"""Core data model: streaming topologies, machine specs, and execution plans.

A topology is a logical operator DAG with per-operator cost statistics and
per-edge selectivities.  Expanding a topology turns every operator into
``replication`` independent replicas wired producer-replica x consumer-replica
(full mesh, shuffle partitioning by default).  An execution plan maps each
replica to a CPU socket.

All values are immutable after construction and safe to share across threads.
Per-tuple costs are nanoseconds; a core budget defaults to 1e9 ns of compute
per second (one fully busy core).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping

DEFAULT_CORE_BUDGET = 1e9  # ns of compute per core per second
RATIO_TOL = 1e-9


class NoFeasiblePlanError(RuntimeError):
    """Raised when no placement satisfies the resource constraints."""


@dataclass(frozen=True)
class OperatorSpec:
    """One logical operator of the dataflow DAG.

    exec_ns:     execution time per input tuple (ns).
    tuple_bytes: bytes fetched from a producer per input tuple.
    dram_bytes:  DRAM traffic per processed tuple (bytes).
    """

    id: str
    exec_ns: float
    tuple_bytes: float = 0.0
    dram_bytes: float = 0.0
    replication: int = 1
    spout: bool = False
    sink: bool = False

    def validate(self) -> None:
        if not self.id:
            raise ValueError("operator id must be non-empty")
        for name in ("exec_ns", "tuple_bytes", "dram_bytes"):
            if getattr(self, name) < 0:
                raise ValueError(f"negative {name} on operator '{self.id}'")
        if self.replication < 1:
            raise ValueError(f"replication must be >= 1 on operator '{self.id}'")


@dataclass(frozen=True)
class EdgeSpec:
    """A producer->consumer stream with the consumer-side selectivities.

    sigma_in:  fraction of the producer's output this consumer receives.
    sigma_br:  fraction of received tuples actually processed (rest filtered
               before the execution cost is paid).
    sigma_out: tuples emitted per processed input; may exceed 1 (a splitter
               emitting ten words per sentence has sigma_out = 10).
    partition: optional explicit ratios keyed by consumer replica index;
               defaults to a uniform shuffle.
    """

    producer: str
    consumer: str
    sigma_in: float = 1.0
    sigma_br: float = 1.0
    sigma_out: float = 1.0
    partition: tuple[tuple[int, float], ...] | None = None

    def validate(self) -> None:
        for name in ("sigma_in", "sigma_br", "sigma_out"):
            if getattr(self, name) < 0:
                raise ValueError(
                    f"negative {name} on edge '{self.producer}'->'{self.consumer}'"
                )
        if self.sigma_in > 1.0 or self.sigma_br > 1.0:
            raise ValueError(
                "sigma_in and sigma_br are stream fractions and must be <= 1 "
                f"on edge '{self.producer}'->'{self.consumer}'"
            )
        if self.partition is not None:
            total = sum(r for _, r in self.partition)
            if any(r < 0 for _, r in self.partition):
                raise ValueError(
                    f"negative partition ratio on edge '{self.producer}'->'{self.consumer}'"
                )
            if abs(total - 1.0) > RATIO_TOL:
                raise ValueError(
                    f"partition ratios on edge '{self.producer}'->'{self.consumer}' "
                    f"sum to {total}, expected 1"
                )


@dataclass(frozen=True)
class Topology:
    """Validated operator DAG plus the external ingress rate per spout stream."""

    operators: tuple[OperatorSpec, ...]
    edges: tuple[EdgeSpec, ...]
    external_rate: float

    def __post_init__(self) -> None:
        self._validate()

    @cached_property
    def operator_by_id(self) -> dict[str, OperatorSpec]:
        return {op.id: op for op in self.operators}

    @cached_property
    def out_edges(self) -> dict[str, tuple[EdgeSpec, ...]]:
        out: dict[str, list[EdgeSpec]] = {op.id: [] for op in self.operators}
        for e in self.edges:
            out[e.producer].append(e)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def in_edges(self) -> dict[str, tuple[EdgeSpec, ...]]:
        inc: dict[str, list[EdgeSpec]] = {op.id: [] for op in self.operators}
        for e in self.edges:
            inc[e.consumer].append(e)
        return {k: tuple(v) for k, v in inc.items()}

    @cached_property
    def topo_order(self) -> tuple[str, ...]:
        """Operator ids topologically sorted, ties in definition order."""
        pending = {op.id: len(self.in_edges[op.id]) for op in self.operators}
        order: list[str] = []
        ready = [op.id for op in self.operators if pending[op.id] == 0]
        while ready:
            oid = ready.pop(0)
            order.append(oid)
            for e in self.out_edges[oid]:
                pending[e.consumer] -= 1
                if pending[e.consumer] == 0:
                    ready.append(e.consumer)
        return tuple(order)

    def _validate(self) -> None:
        seen: set[str] = set()
        for op in self.operators:
            op.validate()
            if op.id in seen:
                raise ValueError(f"duplicate operator id '{op.id}'")
            seen.add(op.id)
        if self.external_rate < 0:
            raise ValueError("external_rate must be >= 0")
        pairs: set[tuple[str, str]] = set()
        for e in self.edges:
            e.validate()
            for end in (e.producer, e.consumer):
                if end not in seen:
                    raise ValueError(f"dangling edge endpoint '{end}'")
            if (e.producer, e.consumer) in pairs:
                raise ValueError(
                    f"duplicate edge '{e.producer}'->'{e.consumer}'"
                )
            pairs.add((e.producer, e.consumer))
        for op in self.operators:
            if op.spout and self.in_edges[op.id]:
                raise ValueError(f"spout '{op.id}' has incoming edges")
            if op.sink and self.out_edges[op.id]:
                raise ValueError(f"sink '{op.id}' has outgoing edges")
        if not any(op.spout for op in self.operators):
            raise ValueError("topology has no spout")
        if not any(op.sink for op in self.operators):
            raise ValueError("topology has no sink")
        if len(self.topo_order) != len(self.operators):
            stuck = sorted(seen - set(self.topo_order))
            raise ValueError(f"cycle detected involving operator '{stuck[0]}'")

    def with_replication(self, replication: Mapping[str, int]) -> "Topology":
        """Copy of this topology with replication levels overridden."""
        unknown = sorted(set(replication) - {op.id for op in self.operators})
        if unknown:
            raise ValueError(f"replication for unknown operator '{unknown[0]}'")
        ops = tuple(
            OperatorSpec(
                id=op.id,
                exec_ns=op.exec_ns,
                tuple_bytes=op.tuple_bytes,
                dram_bytes=op.dram_bytes,
                replication=int(replication.get(op.id, op.replication)),
                spout=op.spout,
                sink=op.sink,
            )
            for op in self.operators
        )
        return Topology(ops, self.edges, self.external_rate)

    @property
    def total_replication(self) -> int:
        return sum(op.replication for op in self.operators)


@dataclass(frozen=True)
class MachineSpec:
    """A multi-socket shared-memory machine.

    latency[i][j] is the cost in ns of moving one cache line from socket i to
    socket j (zero diagonal); channel[i][j] the attainable bytes/s from i to j;
    dram_bandwidth[i] the attainable local-DRAM bytes/s on socket i.
    """

    sockets: int
    cores_per_socket: int
    dram_bandwidth: tuple[float, ...]
    latency: tuple[tuple[float, ...], ...]
    channel: tuple[tuple[float, ...], ...]
    cacheline_bytes: float = 64.0
    core_budget: float = DEFAULT_CORE_BUDGET

    def __post_init__(self) -> None:
        n = self.sockets
        if n < 1:
            raise ValueError("zero sockets")
        if self.cores_per_socket < 1:
            raise ValueError("cores_per_socket must be >= 1")
        if self.cacheline_bytes <= 0:
            raise ValueError("cacheline_bytes must be > 0")
        if self.core_budget <= 0:
            raise ValueError("core_budget must be > 0")
        if len(self.dram_bandwidth) != n:
            raise ValueError("dram_bandwidth must have one entry per socket")
        if any(b < 0 for b in self.dram_bandwidth):
            raise ValueError("negative dram_bandwidth entry")
        for name, m in (("latency", self.latency), ("channel", self.channel)):
            if len(m) != n or any(len(row) != n for row in m):
                raise ValueError(f"non-square {name} matrix")
            if any(v < 0 for row in m for v in row):
                raise ValueError(f"negative {name} entry")
        for i in range(n):
            if self.latency[i][i] != 0:
                raise ValueError(f"nonzero latency diagonal at socket {i}")

    @property
    def cpu_capacity(self) -> float:
        """Compute budget of one socket (ns/s)."""
        return self.core_budget * self.cores_per_socket

    @property
    def max_remote_latency(self) -> float:
        worst = 0.0
        for i in range(self.sockets):
            for j in range(self.sockets):
                if i != j and self.latency[i][j] > worst:
                    worst = self.latency[i][j]
        return worst


@dataclass(frozen=True)
class Replica:
    id: str
    operator: str
    index: int


@dataclass(frozen=True)
class ReplicaEdge:
    """One producer-replica -> consumer-replica stream of the expanded graph."""

    producer: str
    consumer: str
    sigma_in: float
    sigma_br: float
    sigma_out: float
    ratio: float  # partition ratio; sums to 1 across a producer's consumer replicas


@dataclass
class ExecutionGraph:
    """Replica-level execution graph; immutable once built.

    ``group_of`` maps a replica to its placement group: grouped replicas must
    land on the same socket.  Ungrouped graphs use the replica id itself.
    """

    replicas: list[Replica]
    replica_edges: list[ReplicaEdge]
    group_of: dict[str, str]

    def __post_init__(self) -> None:
        self._index = {r.id: i for i, r in enumerate(self.replicas)}
        inc: dict[str, list[ReplicaEdge]] = {r.id: [] for r in self.replicas}
        out: dict[str, list[ReplicaEdge]] = {r.id: [] for r in self.replicas}
        for e in self.replica_edges:
            inc[e.consumer].append(e)
            out[e.producer].append(e)
        self._in = inc
        self._out = out
        by_op: dict[str, list[Replica]] = {}
        for r in self.replicas:
            by_op.setdefault(r.operator, []).append(r)
        self._by_op = by_op
        groups: dict[str, list[str]] = {}
        for r in self.replicas:
            groups.setdefault(self.group_of[r.id], []).append(r.id)
        self._groups = groups

    def in_edges(self, replica_id: str) -> list[ReplicaEdge]:
        return self._in[replica_id]

    def out_edges(self, replica_id: str) -> list[ReplicaEdge]:
        return self._out[replica_id]

    def replicas_of(self, operator_id: str) -> list[Replica]:
        return self._by_op.get(operator_id, [])

    @property
    def groups(self) -> dict[str, list[str]]:
        """Group id -> member replica ids, in definition order."""
        return self._groups

    @property
    def topo_order(self) -> list[Replica]:
        """Replicas topologically sorted, ties in definition order."""
        try:
            return self._topo
        except AttributeError:
            pass
        pending = {r.id: len(self._in[r.id]) for r in self.replicas}
        ready = [r for r in self.replicas if pending[r.id] == 0]
        order: list[Replica] = []
        while ready:
            rep = ready.pop(0)
            order.append(rep)
            for e in self._out[rep.id]:
                pending[e.consumer] -= 1
                if pending[e.consumer] == 0:
                    ready.append(self.replicas[self._index[e.consumer]])
        self._topo = order
        return order


@dataclass
class ExecutionPlan:
    """A (possibly partial) assignment of replicas to sockets."""

    graph: ExecutionGraph
    placement: dict[str, int]

    def is_total(self) -> bool:
        return all(r.id in self.placement for r in self.graph.replicas)

    def unplaced(self) -> list[str]:
        return [r.id for r in self.graph.replicas if r.id not in self.placement]

    def validate_sockets(self, machine: MachineSpec) -> None:
        for rid, s in self.placement.items():
            if rid not in self.graph._index:
                raise ValueError(f"placement for unknown replica '{rid}'")
            if not (0 <= s < machine.sockets):
                raise ValueError(f"replica '{rid}' placed on invalid socket {s}")


def replica_id(operator_id: str, index: int) -> str:
    return f"{operator_id}{index}"


def expand_execution_graph(topology: Topology) -> ExecutionGraph:
    """Expand a logical DAG into its replica-level execution graph.

    Every logical edge becomes a full producer-replica x consumer-replica mesh.
    Partition ratios default to a uniform shuffle (1 / consumer replicas) and
    the external ingress is split evenly across each spout's replicas.
    """
    replicas: list[Replica] = []
    ids: set[str] = set()
    for oid in (op.id for op in topology.operators):
        op = topology.operator_by_id[oid]
        for i in range(op.replication):
            rid = replica_id(oid, i)
            if rid in ids:
                raise ValueError(f"replica id collision '{rid}'")
            ids.add(rid)
            replicas.append(Replica(rid, oid, i))
    edges: list[ReplicaEdge] = []
    for e in topology.edges:
        producers = range(topology.operator_by_id[e.producer].replication)
        n_cons = topology.operator_by_id[e.consumer].replication
        ratios = _partition_ratios(e, n_cons)
        for pi in producers:
            for ci in range(n_cons):
                edges.append(
                    ReplicaEdge(
                        producer=replica_id(e.producer, pi),
                        consumer=replica_id(e.consumer, ci),
                        sigma_in=e.sigma_in,
                        sigma_br=e.sigma_br,
                        sigma_out=e.sigma_out,
                        ratio=ratios[ci],
                    )
                )
    group_of = {r.id: r.id for r in replicas}
    return ExecutionGraph(replicas, edges, group_of)


def _partition_ratios(edge: EdgeSpec, n_consumers: int) -> list[float]:
    if edge.partition is None:
        return [1.0 / n_consumers] * n_consumers
    override = dict(edge.partition)
    missing = [i for i in range(n_consumers) if i not in override]
    if missing or len(override) != n_consumers:
        raise ValueError(
            f"partition override on edge '{edge.producer}'->'{edge.consumer}' "
            f"must cover exactly replica indexes 0..{n_consumers - 1}"
        )
    return [override[i] for i in range(n_consumers)]


def compress_graph(graph: ExecutionGraph, ratio: int) -> ExecutionGraph:
    """Group same-operator replicas into chunks of at most ``ratio``.

    Grouped replicas are scheduled as one unit (same socket).  ratio 1 is the
    identity; the last chunk of an operator may be smaller than ``ratio``.
    """
    if ratio < 1:
        raise ValueError("compress ratio must be >= 1")
    if ratio == 1:
        group_of = {r.id: r.id for r in graph.replicas}
    else:
        group_of = {}
        for op, members in graph._by_op.items():
            for chunk, start in enumerate(range(0, len(members), ratio)):
                gid = (
                    members[start].id
                    if len(members) <= ratio
                    else f"{op}~g{chunk}"
                )
                for rep in members[start : start + ratio]:
                    group_of[rep.id] = gid
    return ExecutionGraph(list(graph.replicas), list(graph.replica_edges), group_of)


# -- file ingestion ----------------------------------------------------------


def parse_topology(text: str) -> Topology:
    """Parse and validate a topology JSON document."""
    doc = _load_json(text, "topology")
    try:
        raw_ops = doc["operators"]
        raw_edges = doc.get("edges", [])
        rate = float(doc["external_rate"])
    except KeyError as err:
        raise ValueError(f"topology document missing key {err}") from None
    ops = tuple(
        OperatorSpec(
            id=str(o["id"]),
            exec_ns=float(o["Te_ns"]),
            tuple_bytes=float(o.get("N_bytes", 0.0)),
            dram_bytes=float(o.get("M_bytes", 0.0)),
            replication=int(o.get("replication", 1)),
            spout=bool(o.get("spout", False)),
            sink=bool(o.get("sink", False)),
        )
        for o in raw_ops
    )
    edges = tuple(
        EdgeSpec(
            producer=str(e["from"]),
            consumer=str(e["to"]),
            sigma_in=float(e.get("sigma_in", 1.0)),
            sigma_br=float(e.get("sigma_br", 1.0)),
            sigma_out=float(e.get("sigma_out", 1.0)),
            partition=_parse_partition(e.get("partition")),
        )
        for e in raw_edges
    )
    return Topology(ops, edges, rate)


def _parse_partition(raw: Any) -> tuple[tuple[int, float], ...] | None:
    if raw is None:
        return None
    return tuple(sorted((int(k), float(v)) for k, v in raw.items()))


def serialize_topology(topology: Topology) -> dict[str, Any]:
    """Canonical JSON form; parse_topology(json.dumps(...)) round-trips."""
    return {
        "external_rate": topology.external_rate,
        "operators": [
            {
                "id": op.id,
                "Te_ns": op.exec_ns,
                "N_bytes": op.tuple_bytes,
                "M_bytes": op.dram_bytes,
                "replication": op.replication,
                "spout": op.spout,
                "sink": op.sink,
            }
            for op in topology.operators
        ],
        "edges": [
            {
                "from": e.producer,
                "to": e.consumer,
                "sigma_in": e.sigma_in,
                "sigma_br": e.sigma_br,
                "sigma_out": e.sigma_out,
                **(
                    {"partition": {str(i): r for i, r in e.partition}}
                    if e.partition is not None
                    else {}
                ),
            }
            for e in topology.edges
        ],
    }


def parse_machine(text: str) -> MachineSpec:
    """Parse and validate a machine JSON document."""
    doc = _load_json(text, "machine")
    try:
        return MachineSpec(
            sockets=int(doc["sockets"]),
            cores_per_socket=int(doc["cores_per_socket"]),
            dram_bandwidth=tuple(float(b) for b in doc["dram_bandwidth_Bps"]),
            latency=tuple(
                tuple(float(v) for v in row) for row in doc["latency_ns_per_line"]
            ),
            channel=tuple(tuple(float(v) for v in row) for row in doc["channel_Bps"]),
            cacheline_bytes=float(doc.get("cacheline_bytes", 64.0)),
            core_budget=float(doc.get("core_budget_ns_per_s", DEFAULT_CORE_BUDGET)),
        )
    except KeyError as err:
        raise ValueError(f"machine document missing key {err}") from None


def serialize_machine(machine: MachineSpec) -> dict[str, Any]:
    return {
        "sockets": machine.sockets,
        "cores_per_socket": machine.cores_per_socket,
        "core_budget_ns_per_s": machine.core_budget,
        "dram_bandwidth_Bps": list(machine.dram_bandwidth),
        "latency_ns_per_line": [list(row) for row in machine.latency],
        "channel_Bps": [list(row) for row in machine.channel],
        "cacheline_bytes": machine.cacheline_bytes,
    }


def parse_plan(text: str, topology: Topology) -> tuple[ExecutionPlan, Topology]:
    """Parse a plan file against a topology.

    The plan's replication map overrides the topology's; the returned topology
    is the overridden one the plan's graph was expanded from.
    """
    doc = _load_json(text, "plan")
    replication = {str(k): int(v) for k, v in doc.get("replication", {}).items()}
    scaled = topology.with_replication(replication) if replication else topology
    graph = expand_execution_graph(scaled)
    placement = {str(k): int(v) for k, v in doc.get("placement", {}).items()}
    plan = ExecutionPlan(graph, placement)
    return plan, scaled


def serialize_plan(plan: ExecutionPlan, topology: Topology) -> dict[str, Any]:
    return {
        "replication": {
            op.id: op.replication for op in topology.operators
        },
        "placement": {rid: s for rid, s in sorted(plan.placement.items())},
    }


def _load_json(text: str, kind: str) -> dict[str, Any]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ValueError(f"malformed {kind} document: {err}") from None
    if not isinstance(doc, dict):
        raise ValueError(f"malformed {kind} document: expected an object")
    return doc
