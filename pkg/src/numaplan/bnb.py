"""Branch-and-bound search for the throughput-optimal placement.

The search assigns placement *groups* (replicas, or compressed bundles of
same-operator replicas) to sockets.  Branching follows collocation decisions:
one decision per directly connected producer/consumer group pair, with one
child per distinct way of placing the pair's still-unplaced members.  States
reachable through different decision orders or through interchangeable
sockets are folded together, so the enumeration stays complete without
revisiting equivalent placements.

Every node carries an upper bound on the value of all its total extensions:
settled replicas (whole producer cone placed) contribute their exact rates
and resource demands, unsettled ones an optimistic per-producer cap with
remote fetches waived.  A node is dropped when its settled demands already
exceed a capacity or its bound cannot beat the incumbent.  Solution values
always come from the exact model, so the returned value matches exhaustive
enumeration bit for bit.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Any, Mapping

from .constraints import _capacity_violations, fits
from .domain import (
    ExecutionGraph,
    ExecutionPlan,
    MachineSpec,
    Topology,
    compress_graph,
)
from .rate_model import (
    FetchMode,
    RateReport,
    _context,
    _evaluate,
    _report,
)

# Partial-node bounds are inflated by one part in 1e12: the admissibility
# argument holds over the reals, and this margin keeps it true under float
# rounding without affecting pruning in practice.
_BOUND_SLACK = 1.0 + 1e-12

UNPLACED = -1


@dataclass
class SearchOptions:
    compress_ratio: int = 1
    time_budget_s: float = 600.0
    warm_start: bool = False
    mode: FetchMode = FetchMode.NORMAL
    one_core_per_replica: bool = False


@dataclass
class SearchStats:
    nodes_expanded: int = 0
    nodes_pruned: int = 0
    best_value: float | None = None
    wall_ms: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "nodes_expanded": self.nodes_expanded,
            "nodes_pruned": self.nodes_pruned,
            "best_value": self.best_value,
            "wall_ms": self.wall_ms,
        }


@dataclass
class SearchNode:
    """One state of the placement search.

    ``placement`` assigns a socket (or UNPLACED) per group index.  ``bound``
    upper-bounds the model value of every feasible total extension; for a
    fully placed node it is the exact model value.
    """

    placement: tuple[int, ...]
    bound: float
    creation_index: int
    valid_count: int
    total: bool
    value: float | None = None
    parent: int | None = None


@dataclass
class SearchResult:
    feasible: bool
    plan: ExecutionPlan | None
    value: float | None
    report: RateReport | None
    bottlenecks: list[str]
    stats: SearchStats
    timed_out: bool
    graph: ExecutionGraph | None = None


def socket_automorphisms(machine: MachineSpec) -> list[tuple[int, ...]]:
    """Socket relabelings that leave the machine matrices unchanged.

    Placements that differ only by such a relabeling evaluate identically.
    Limited to 8 sockets; beyond that only the identity is used.
    """
    n = machine.sockets
    identity = tuple(range(n))
    if n > 8:
        return [identity]
    perms: list[tuple[int, ...]] = []
    for p in itertools.permutations(range(n)):
        if any(machine.dram_bandwidth[p[i]] != machine.dram_bandwidth[i] for i in range(n)):
            continue
        ok = True
        for i in range(n):
            for j in range(n):
                if (
                    machine.latency[p[i]][p[j]] != machine.latency[i][j]
                    or machine.channel[p[i]][p[j]] != machine.channel[i][j]
                ):
                    ok = False
                    break
            if not ok:
                break
        if ok:
            perms.append(p)
    return perms


class PlacementSearch:
    """Search state shared by bounding, branching, and the main loop."""

    def __init__(
        self,
        graph: ExecutionGraph,
        topology: Topology,
        machine: MachineSpec,
        options: SearchOptions | None = None,
    ) -> None:
        self.options = options or SearchOptions()
        if self.options.compress_ratio > 1:
            graph = compress_graph(graph, self.options.compress_ratio)
        self.graph = graph
        self.topology = topology
        self.machine = machine
        self.ctx = _context(graph, topology)
        self.groups: list[str] = list(graph.groups.keys())
        self.gidx = {g: i for i, g in enumerate(self.groups)}
        self.group_by_pos = [
            self.gidx[graph.group_of[node.rid]] for node in self.ctx.nodes
        ]
        self.decisions = self._collocation_decisions()
        self.autos = socket_automorphisms(machine)
        self._full_symmetry = len(self.autos) == math.factorial(machine.sockets)
        self._visited: set[tuple[int, ...]] = set()
        self._counter = 0

    # -- structure ---------------------------------------------------------

    def _collocation_decisions(self) -> list[tuple[int, int | None]]:
        """One decision per connected group pair, plus a direct placement
        decision for groups touched by no edge."""
        seen: set[tuple[int, int]] = set()
        decisions: list[tuple[int, int | None]] = []
        covered: set[int] = set()
        gof = self.graph.group_of
        for e in self.graph.replica_edges:
            a = self.gidx[gof[e.producer]]
            b = self.gidx[gof[e.consumer]]
            if a == b or (a, b) in seen:
                continue
            seen.add((a, b))
            decisions.append((a, b))
            covered.add(a)
            covered.add(b)
        for g in range(len(self.groups)):
            if g not in covered:
                decisions.append((g, None))
        return decisions

    def root(self) -> SearchNode:
        placement = tuple([UNPLACED] * len(self.groups))
        bound, feasible = self._bound_and_feasible(placement)
        self._visited.add(self._canonical(placement))
        node = SearchNode(
            placement=placement,
            bound=bound,
            creation_index=self._next_index(),
            valid_count=0,
            total=not self.groups,
        )
        if not feasible:
            node.bound = float("-inf")
        return node

    def _next_index(self) -> int:
        self._counter += 1
        return self._counter

    def _canonical(self, placement: tuple[int, ...]) -> tuple[int, ...]:
        if self._full_symmetry:
            relabel: dict[int, int] = {}
            out = []
            for s in placement:
                if s == UNPLACED:
                    out.append(UNPLACED)
                else:
                    if s not in relabel:
                        relabel[s] = len(relabel)
                    out.append(relabel[s])
            return tuple(out)
        if len(self.autos) == 1:
            return placement
        best = None
        for p in self.autos:
            cand = tuple(UNPLACED if s == UNPLACED else p[s] for s in placement)
            if best is None or cand < best:
                best = cand
        return best  # type: ignore[return-value]

    # -- bounding ----------------------------------------------------------

    def _sockets_by_pos(self, placement: tuple[int, ...]) -> list[int]:
        return [placement[g] for g in self.group_by_pos]

    def _bound_and_feasible(self, placement: tuple[int, ...]) -> tuple[float, bool]:
        """Admissible value bound plus soundness of the partial placement.

        The feasibility verdict only accumulates demands of settled replicas,
        whose rates are final in every extension, so False means every total
        extension violates a constraint.
        """
        machine = self.machine
        mode = self.options.mode
        n = machine.sockets
        budget = machine.core_budget
        cl = machine.cacheline_bytes
        lat = machine.latency
        worst = machine.max_remote_latency if mode is FetchMode.WORST else 0.0
        sock = self._sockets_by_pos(placement)
        nodes = self.ctx.nodes
        rate = [0.0] * len(nodes)
        settled = [False] * len(nodes)
        cpu = [0.0] * n
        bw = [0.0] * n
        channel = [[0.0] * n for _ in range(n)]
        counts = [0] * n
        throughput = 0.0
        for pos, node in enumerate(nodes):
            k = sock[pos]
            if k >= 0:
                counts[k] += 1
            lines = math.ceil(node.tuple_bytes / cl)
            all_settled = k >= 0
            lams: list[float] = []
            xis: list[float] = []
            mus: list[float] = []
            for ppos, s_in, s_br, _s_out, ratio in node.inputs:
                if ppos < 0:
                    lam = node.external_share
                    f = 0.0
                else:
                    if not settled[ppos]:
                        all_settled = False
                    lam = s_in * rate[ppos] * ratio
                    if mode is FetchMode.ZERO:
                        f = 0.0
                    elif mode is FetchMode.WORST:
                        f = lines * worst
                    else:
                        pj = sock[ppos]
                        f = lines * lat[pj][k] if k >= 0 and pj >= 0 and pj != k else 0.0
                xi = f + s_br * node.exec_ns
                if xi <= 0:
                    raise ValueError(
                        f"zero-cost operator: replica '{node.rid}' has zero per-tuple demand"
                    )
                lams.append(lam)
                xis.append(xi)
                mus.append(budget / xi)
            if all_settled:
                lam_total = sum(lams)
                if lam_total > 0:
                    mu_c = lam_total / sum(l / m for l, m in zip(lams, mus))
                else:
                    mu_c = 0.0
                total_out = 0.0
                total_act = 0.0
                for i, (ppos, _s_in, _s_br, s_out, _ratio) in enumerate(node.inputs):
                    coop = mu_c * lams[i] / lam_total if lam_total > 0 else 0.0
                    act = coop if coop < lams[i] else lams[i]
                    o = act * s_out
                    total_out += o
                    total_act += act
                    cpu[k] += act * xis[i]
                    if ppos >= 0:
                        pj = sock[ppos]
                        if pj != k:
                            channel[pj][k] += o * node.tuple_bytes
                bw[k] += total_act * node.dram_bytes
                settled[pos] = True
                r = total_out
            else:
                r = 0.0
                for i, (_ppos, _s_in, _s_br, s_out, _ratio) in enumerate(node.inputs):
                    r += s_out * (lams[i] if lams[i] < mus[i] else mus[i])
            rate[pos] = r
            if node.sink:
                throughput += r
        cap = machine.cpu_capacity
        feasible = all(fits(c, cap) for c in cpu)
        feasible = feasible and all(
            fits(bw[i], machine.dram_bandwidth[i]) for i in range(n)
        )
        if feasible:
            for i in range(n):
                for j in range(n):
                    if i != j and not fits(channel[i][j], machine.channel[i][j]):
                        feasible = False
                        break
                if not feasible:
                    break
        if feasible and self.options.one_core_per_replica:
            feasible = all(c <= machine.cores_per_socket for c in counts)
        if UNPLACED in placement:
            return throughput * _BOUND_SLACK, feasible
        return throughput, feasible

    def _exact(self, placement: tuple[int, ...]) -> tuple[float, bool]:
        """Exact model value and feasibility of a total placement.

        Uses the same evaluation core as check_plan, so values agree with the
        exhaustive oracle exactly.
        """
        sockets = self._sockets_by_pos(placement)
        result = _evaluate(self.ctx, sockets, self.machine, self.options.mode)
        feasible = not _capacity_violations(result, self.machine)
        if feasible and self.options.one_core_per_replica:
            counts = [0] * self.machine.sockets
            for s in sockets:
                counts[s] += 1
            feasible = all(c <= self.machine.cores_per_socket for c in counts)
        return result.throughput, feasible

    # -- branching ---------------------------------------------------------

    def pending_decisions(
        self, placement: tuple[int, ...]
    ) -> list[tuple[int, int | None]]:
        out = []
        for a, b in self.decisions:
            if placement[a] == UNPLACED or (b is not None and placement[b] == UNPLACED):
                out.append((a, b))
        return out

    def children(
        self, node: SearchNode, instrument: list[dict[str, Any]] | None = None
    ) -> list[SearchNode]:
        """Children of a live node, best bound first.

        When only the members of a single pending pair remain unplaced, their
        rates and the whole plan value are exact per assignment, so exactly
        one child is emitted: the best feasible assignment, preferring
        collocation and the tighter socket on value ties.
        """
        placement = node.placement
        pending = self.pending_decisions(placement)
        unplaced = frozenset(
            g for g, s in enumerate(placement) if s == UNPLACED
        )
        terminal = None
        for a, b in pending:
            ends = {a} if b is None else {a, b}
            if unplaced <= ends:
                terminal = (a, b)
                break
        if terminal is not None:
            children = self._best_fit_child(node, sorted(unplaced), instrument)
        else:
            children = []
            for decision in pending:
                for assign in self._assignments(placement, decision):
                    child = self._make_child(node, assign, instrument)
                    if child is not None:
                        children.append(child)
        children.sort(key=lambda c: (-c.bound, c.creation_index))
        return children

    def _assignments(
        self, placement: tuple[int, ...], decision: tuple[int, int | None]
    ) -> list[list[tuple[int, int]]]:
        a, b = decision
        n = self.machine.sockets
        if b is None:
            return [[(a, k)] for k in range(n)]
        if placement[a] != UNPLACED:
            return [[(b, k)] for k in range(n)]
        if placement[b] != UNPLACED:
            return [[(a, k)] for k in range(n)]
        collocated = [[(a, k), (b, k)] for k in range(n)]
        separated = [
            [(a, i), (b, j)] for i in range(n) for j in range(n) if i != j
        ]
        return collocated + separated

    def _make_child(
        self,
        node: SearchNode,
        assign: list[tuple[int, int]],
        instrument: list[dict[str, Any]] | None,
    ) -> SearchNode | None:
        placement = list(node.placement)
        for g, s in assign:
            placement[g] = s
        pl = tuple(placement)
        key = self._canonical(pl)
        if key in self._visited:
            return None
        self._visited.add(key)
        total = UNPLACED not in pl
        if total:
            value, feasible = self._exact(pl)
            bound = value
        else:
            value = None
            bound, feasible = self._bound_and_feasible(pl)
        child = SearchNode(
            placement=pl,
            bound=bound,
            creation_index=self._next_index(),
            valid_count=node.valid_count + len(assign),
            total=total,
            value=value,
            parent=node.creation_index,
        )
        if instrument is not None:
            instrument.append(
                {
                    "id": child.creation_index,
                    "parent": child.parent,
                    "bound": bound,
                    "total": total,
                    "feasible": feasible,
                    "value": value,
                }
            )
        return child if feasible else None

    def _best_fit_child(
        self,
        node: SearchNode,
        unplaced: list[int],
        instrument: list[dict[str, Any]] | None,
    ) -> list[SearchNode]:
        n = self.machine.sockets
        cap = self.machine.cpu_capacity
        best: tuple | None = None
        best_assign: list[tuple[int, int]] | None = None
        best_value = 0.0
        for combo in itertools.product(range(n), repeat=len(unplaced)):
            placement = list(node.placement)
            for g, s in zip(unplaced, combo):
                placement[g] = s
            pl = tuple(placement)
            value, feasible = self._exact(pl)
            if not feasible:
                continue
            sockets = self._sockets_by_pos(pl)
            result = _evaluate(self.ctx, sockets, self.machine, self.options.mode)
            slack = sum(cap - result.cpu[s] for s in set(combo))
            key = (-value, 0 if len(set(combo)) == 1 else 1, slack, combo)
            if best is None or key < best:
                best = key
                best_assign = [(g, s) for g, s in zip(unplaced, combo)]
                best_value = value
        if best_assign is None:
            return []
        child = self._make_child(node, best_assign, instrument)
        if child is None:
            # Equivalent state reached through another branch already.
            return []
        child.value = best_value
        return [child]

    # -- plan materialization ----------------------------------------------

    def plan_for(self, placement: tuple[int, ...]) -> ExecutionPlan:
        mapping = {
            node.rid: placement[self.group_by_pos[pos]]
            for pos, node in enumerate(self.ctx.nodes)
        }
        return ExecutionPlan(self.graph, mapping)


def bounding_value(
    placement: Mapping[str, int],
    graph: ExecutionGraph,
    topology: Topology,
    machine: MachineSpec,
    mode: FetchMode = FetchMode.NORMAL,
) -> float:
    """Upper bound on the throughput of any total extension of ``placement``.

    ``placement`` maps group ids (replica ids for uncompressed graphs) to
    sockets; for a total placement this is the exact model value.
    """
    searcher = PlacementSearch(graph, topology, machine, SearchOptions(mode=mode))
    pl = tuple(placement.get(g, UNPLACED) for g in searcher.groups)
    if UNPLACED not in pl:
        return searcher._exact(pl)[0]
    return searcher._bound_and_feasible(pl)[0]


def search(
    graph: ExecutionGraph,
    topology: Topology,
    machine: MachineSpec,
    options: SearchOptions | None = None,
    instrument: list[dict[str, Any]] | None = None,
) -> SearchResult:
    """Find the feasible placement maximizing model throughput.

    Depth-first over the decision tree, visiting same-level children in
    descending bound order; a node is pruned when its bound cannot strictly
    beat the incumbent.  On time-budget expiry the best incumbent found so
    far is returned and the result is flagged timed out.
    """
    options = options or SearchOptions()
    started = time.perf_counter()
    deadline = started + options.time_budget_s
    searcher = PlacementSearch(graph, topology, machine, options)
    stats = SearchStats()
    incumbent_value = float("-inf")
    incumbent: tuple[int, ...] | None = None

    if options.warm_start:
        seeded = _warm_start_placement(searcher)
        if seeded is not None:
            incumbent, incumbent_value = seeded

    root = searcher.root()
    if instrument is not None:
        instrument.append(
            {
                "id": root.creation_index,
                "parent": None,
                "bound": root.bound,
                "total": root.total,
                "feasible": root.bound > float("-inf"),
                "value": root.value,
            }
        )
    stack = [root]
    timed_out = False
    while stack:
        if time.perf_counter() > deadline:
            timed_out = True
            break
        node = stack.pop()
        if node.bound <= incumbent_value:
            stats.nodes_pruned += 1
            continue
        stats.nodes_expanded += 1
        if node.total:
            # bound == exact value for total nodes and it beat the incumbent
            incumbent_value = node.bound
            incumbent = node.placement
            continue
        stack.extend(reversed(searcher.children(node, instrument)))

    stats.wall_ms = (time.perf_counter() - started) * 1000.0
    if incumbent is None:
        stats.best_value = None
        return SearchResult(
            feasible=False,
            plan=None,
            value=None,
            report=None,
            bottlenecks=[],
            stats=stats,
            timed_out=timed_out,
            graph=searcher.graph,
        )
    stats.best_value = incumbent_value
    plan = searcher.plan_for(incumbent)
    sockets = searcher._sockets_by_pos(incumbent)
    report = _report(_evaluate(searcher.ctx, sockets, machine, options.mode))
    return SearchResult(
        feasible=True,
        plan=plan,
        value=incumbent_value,
        report=report,
        bottlenecks=report.bottlenecks,
        stats=stats,
        timed_out=timed_out,
        graph=searcher.graph,
    )


def _warm_start_placement(
    searcher: PlacementSearch,
) -> tuple[tuple[int, ...], float] | None:
    """Seed the incumbent with the greedy first-fit plan when it is feasible
    and respects the search's placement groups."""
    from .baselines import first_fit  # deferred: baselines builds on scaling

    ff = first_fit(
        searcher.graph,
        searcher.topology,
        searcher.machine,
        mode=searcher.options.mode,
        one_core_per_replica=searcher.options.one_core_per_replica,
    )
    if ff.relaxed:
        return None
    placement = ff.plan.placement
    by_group: dict[str, int] = {}
    for pos, node in enumerate(searcher.ctx.nodes):
        g = searcher.group_by_pos[pos]
        s = placement[node.rid]
        gid = searcher.groups[g]
        if gid in by_group and by_group[gid] != s:
            return None
        by_group[gid] = s
    pl = tuple(by_group[g] for g in searcher.groups)
    value, feasible = searcher._exact(pl)
    if not feasible:
        return None
    return pl, value
