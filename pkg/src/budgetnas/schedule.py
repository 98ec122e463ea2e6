"""Distributed computation cost: makespan of the selected modules on n machines.

Every module is expanded into unit operations, one per weighted layer it
contains (a BasicBlock is two chained convolutions plus, when present, a
projection that can run beside them; Identity is free). Each operation takes
one cycle on one machine. An operation may start once every operation
feeding its source layer has finished in an earlier cycle.

Two allocation policies are provided: greedy list scheduling with
critical-path priority, and an exhaustive search for the optimum on small
instances.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from functools import lru_cache

from .errors import NotConnected, TooLargeForBruteForce
from .graph import Mask, ModuleSpec, SuperNetGraph, needs_projection, sub_architecture

MAX_BRUTE_FORCE_OPS = 12


@dataclass(frozen=True)
class OpTemplate:
    """Unit operations of one module: names, chained dependencies, exits."""

    names: tuple = ()
    deps: tuple = ()  # (before, after) index pairs
    exits: tuple = ()

    @property
    def entries(self):
        dependent = {b for _, b in self.deps}
        return tuple(j for j in range(len(self.names)) if j not in dependent)


SINGLE = OpTemplate(("op",), (), (0,))
NO_OPS = OpTemplate()


def default_op_template(m: ModuleSpec) -> OpTemplate:
    if m.cost_meta is not None and "ops" in m.cost_meta:
        n = int(m.cost_meta["ops"])
        return OpTemplate(tuple(f"op{j}" for j in range(n)), tuple((j, j + 1) for j in range(n - 1)),
                          (n - 1,) if n else ())
    if m.kind == "Identity":
        return NO_OPS
    if m.kind == "BasicBlock":
        if needs_projection(m):
            return OpTemplate(("conv1", "conv2", "proj"), ((0, 1),), (1, 2))
        return OpTemplate(("conv1", "conv2"), ((0, 1),), (1,))
    return SINGLE


@dataclass
class OpGraph:
    labels: list  # (edge or "head", op name)
    preds: list  # list of tuple of op ids

    def __len__(self):
        return len(self.labels)


def build_op_graph(g: SuperNetGraph, h: Mask, op_template=default_op_template, include_head=True) -> OpGraph:
    """Unit-operation DAG of the live part of ``g`` under ``h``."""
    sub = sub_architecture(g, h)
    labels, preds = [], []
    feed = {sub.source: ()}

    def place(edge, m, upstream):
        t = op_template(m)
        if not t.names:
            return upstream
        base = len(labels)
        local = {j: [] for j in range(len(t.names))}
        for a, b in t.deps:
            local[b].append(base + a)
        for j, name in enumerate(t.names):
            labels.append((edge, name))
            preds.append(tuple(local[j]) if local[j] else tuple(upstream))
        return tuple(base + j for j in t.exits)

    for layer in sub.layers[1:]:
        i = layer.id
        acc = []
        for k in sub.incoming[i]:
            acc.extend(place((k, i), sub.edges[(k, i)], feed[k]))
        feed[i] = tuple(dict.fromkeys(acc))
    if include_head and sub.head is not None:
        place("head", sub.head, feed[sub.sink])
    return OpGraph(labels, preds)


@dataclass
class Schedule:
    """``assignment[op_id] = (machine, cycle)`` with machines and cycles numbered from 1."""

    ops: OpGraph
    machines: int
    assignment: dict = field(default_factory=dict)

    @property
    def makespan(self) -> int:
        return max((c for _, c in self.assignment.values()), default=0)

    def rows(self):
        for j in sorted(self.assignment, key=lambda j: (self.assignment[j][1], self.assignment[j][0])):
            edge, name = self.ops.labels[j]
            m, c = self.assignment[j]
            yield ("head" if edge == "head" else f"{edge[0]}->{edge[1]}", name, m, c)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["edge", "op", "machine", "cycle"])
        w.writerows(self.rows())
        return buf.getvalue()


def _remaining_path_lengths(ops: OpGraph):
    succ = [[] for _ in ops.labels]
    for j, ps in enumerate(ops.preds):
        for p in ps:
            succ[p].append(j)
    length = [0] * len(ops)
    for j in reversed(range(len(ops))):  # op ids are already topologically ordered
        length[j] = 1 + max((length[s] for s in succ[j]), default=0)
    return length


def greedy_list_schedule(ops: OpGraph, n: int) -> Schedule:
    """Each cycle, start up to ``n`` ready ops, longest remaining path first, ties by op id."""
    prio = _remaining_path_lengths(ops)
    finished_at = {}
    sched = Schedule(ops, n)
    cycle = 0
    while len(finished_at) < len(ops):
        cycle += 1
        ready = [j for j in range(len(ops)) if j not in finished_at
                 and all(finished_at.get(p, cycle) < cycle for p in ops.preds[j])]
        ready.sort(key=lambda j: (-prio[j], j))
        for machine, j in enumerate(ready[:n], start=1):
            finished_at[j] = cycle
            sched.assignment[j] = (machine, cycle)
    return sched


def optimal_schedule(ops: OpGraph, n: int) -> Schedule:
    """Minimum-makespan schedule by exhaustive search over non-idling schedules."""
    m = len(ops)
    if m > MAX_BRUTE_FORCE_OPS:
        raise TooLargeForBruteForce(f"{m} unit operations exceed the brute-force limit of {MAX_BRUTE_FORCE_OPS}")
    pred_mask = [sum(1 << p for p in ps) for ps in ops.preds]
    full = (1 << m) - 1

    @lru_cache(maxsize=None)
    def best(done):
        if done == full:
            return 0, ()
        ready = [j for j in range(m) if not done >> j & 1 and pred_mask[j] & done == pred_mask[j]]
        choice = None
        for combo in itertools.combinations(ready, min(n, len(ready))):
            bits = sum(1 << j for j in combo)
            cost, rest = best(done | bits)
            if choice is None or cost + 1 < choice[0]:
                choice = (cost + 1, (combo,) + rest)
        return choice

    _, steps = best(0)
    sched = Schedule(ops, n)
    for cycle, combo in enumerate(steps, start=1):
        for machine, j in enumerate(combo, start=1):
            sched.assignment[j] = (machine, cycle)
    return sched


def validate_schedule(sched: Schedule) -> list[str]:
    """Constraint violations of ``sched`` (empty when valid)."""
    problems = []
    ops = sched.ops
    if set(sched.assignment) != set(range(len(ops))):
        problems.append("not every op is scheduled exactly once")
    slots = {}
    for j, (machine, cycle) in sched.assignment.items():
        if not 1 <= machine <= sched.machines or cycle < 1:
            problems.append(f"op {j} has invalid slot {(machine, cycle)}")
        if (machine, cycle) in slots:
            problems.append(f"machine {machine} runs ops {slots[(machine, cycle)]} and {j} in cycle {cycle}")
        slots[(machine, cycle)] = j
        for p in ops.preds[j]:
            if p in sched.assignment and sched.assignment[p][1] >= cycle:
                problems.append(f"op {j} starts in cycle {cycle} before its predecessor {p} finished")
    return problems


def distributed_cost(g: SuperNetGraph, h: Mask, n: int, policy="GreedyList",
                     op_template=default_op_template) -> Schedule:
    if n < 1:
        raise ValueError("need at least one machine")
    try:
        ops = build_op_graph(g, h, op_template)
    except NotConnected:
        raise NotConnected("distributed cost needs a mask connecting input to output") from None
    if policy == "GreedyList":
        return greedy_list_schedule(ops, n)
    if policy == "BruteForceOptimal":
        return optimal_schedule(ops, n)
    raise ValueError(f"unknown scheduling policy {policy!r}")
