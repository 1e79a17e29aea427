"""Cost-aware placement of whole tasks onto the CPU or NDP units.

Placement granularity is the task (function); a task never splits across
unit classes, and a tiled stage goes to one class as a group, split across
that class's units.  The greedy list scheduler walks the deterministic
topological order stage by stage and picks, per group, the class minimizing
completion time plus the boundary-handoff overhead the placement creates.
Every cross-location data edge is one transfer; every CPU<->NDP data edge
additionally charges one context-handoff constant.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .analyzer import estimate_time
from .errors import CapacityError, DomainError, ScheduleError
from .machine import (CPU_SIDE, HOST, Location, MachineConfig, UnitClass,
                      UnitRef, bandwidth, mesh_hops)
from .workload import KernelFamily, TaskGraph

POLICIES = ("hybrid", "cpu_only", "ndp_only")

_CPU_LIKE = (HOST, CPU_SIDE)


@dataclass(frozen=True)
class Transfer:
    object_id: str
    bytes: int
    src: int           # HOST, CPU_SIDE, or stack id
    dst: int
    cause_task: str    # the consuming task; transfers are per data edge

    @property
    def crosses_boundary(self) -> bool:
        """True for CPU<->stack moves of task-produced data.

        Loads of host-resident inputs are staging, not scheduling overhead.
        """
        if self.src == HOST:
            return False
        return (self.src == CPU_SIDE) != (self.dst == CPU_SIDE)


@dataclass(frozen=True)
class OverheadBreakdown:
    dt_total: float
    cxt_total: float
    cxt_count: int

    @property
    def total(self) -> float:
        return self.dt_total + self.cxt_total


@dataclass
class Schedule:
    policy: str
    placements: dict[str, list[UnitRef]]
    transfers: list[Transfer]
    # Cross-boundary producer->consumer edges; each charges one CXT.
    crossing_edges: list[tuple[str, str, str]] = field(default_factory=list)
    overhead: OverheadBreakdown | None = None

    def units_of(self, task_id: str) -> list[UnitRef]:
        return self.placements[task_id]

    def to_csv(self, graph: TaskGraph, starts: dict[str, float] | None = None) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["task_id", "family", "unit_class", "stack_id", "unit_id",
                         "start_estimate_s"])
        for tid in sorted(self.placements):
            for u in self.placements[tid]:
                writer.writerow([
                    tid, graph.task(tid).family.value, u.cls.value,
                    "" if u.stack_id is None else u.stack_id,
                    "" if u.unit_id is None else u.unit_id,
                    repr(starts.get(tid, 0.0)) if starts else "",
                ])
        return out.getvalue()


def transfer_cost(n_bytes: float, src: int, dst: int, cfg: MachineConfig) -> float:
    """Seconds to move bytes between two endpoints, uncontended.

    Host memory sits on the CPU side, one hop from any stack over the CPU
    link; stacks reach each other over mesh links with Manhattan-distance
    hops.  Same endpoint (or host<->CPU) costs nothing.
    """
    if n_bytes < 0:
        raise DomainError("transfer bytes must be >= 0")
    for loc in (src, dst):
        if loc < HOST:
            raise DomainError(f"unknown location {loc}")
    if src == dst or (src in _CPU_LIKE and dst in _CPU_LIKE):
        return 0.0
    hop = cfg.interconnect.hop_latency_s
    if src in _CPU_LIKE or dst in _CPU_LIKE:
        return n_bytes / bandwidth(Location.CPU_LINK, cfg) + 1 * hop
    hops = mesh_hops(src, dst, cfg)
    return n_bytes / bandwidth(Location.MESH_HOP, cfg) + hops * hop


def scheduling_overhead(schedule: Schedule, cfg: MachineConfig) -> OverheadBreakdown:
    """Boundary-handoff cost of a schedule: data transfer plus per-edge constant.

    Only CPU<->NDP movements of task-produced data count; stack-to-stack
    traffic and host-side staging appear in the simulation timeline but are
    not scheduling overhead.
    """
    dt = sum(transfer_cost(t.bytes, t.src, t.dst, cfg)
             for t in schedule.transfers if t.crosses_boundary)
    n_cxt = len(schedule.crossing_edges)
    return OverheadBreakdown(dt_total=dt, cxt_total=n_cxt * cfg.cxt_s, cxt_count=n_cxt)


def schedule_from_placements(graph: TaskGraph, cfg: MachineConfig,
                             placements: dict[str, list[UnitRef]],
                             policy: str = "manual") -> Schedule:
    """Derive the full schedule (transfers, crossing edges, overhead) from a
    task->units map.

    Every data edge whose endpoints differ becomes one transfer; all-to-all
    tasks exchange partitions in place and stage nothing.  This is the single
    source of truth for the edge bookkeeping: plan() and the exhaustive
    oracle both go through it.
    """
    transfers: list[Transfer] = []
    crossings: list[tuple[str, str, str]] = []
    for tid in graph.topo_order():
        task = graph.task(tid)
        if tid not in placements or not placements[tid]:
            raise ScheduleError(f"task {tid} has no placement")
        if task.family is KernelFamily.ALLTOALL:
            continue
        dst = placements[tid][0].location()
        for oid in task.inputs:
            producer = graph.producers.get(oid)
            if producer is None:
                src = graph.data_objects[oid].initial_location
                if src is None:
                    raise ScheduleError(f"object {oid} has no producer or home")
            else:
                src = placements[producer][0].location()
            if src == dst or (src in _CPU_LIKE and dst in _CPU_LIKE):
                continue
            transfers.append(Transfer(
                object_id=oid, bytes=graph.data_objects[oid].size,
                src=src, dst=dst, cause_task=tid))
            if producer is not None and (src == CPU_SIDE) != (dst == CPU_SIDE):
                crossings.append((producer, tid, oid))
    schedule = Schedule(policy=policy, placements=dict(placements),
                        transfers=transfers, crossing_edges=crossings)
    schedule.overhead = scheduling_overhead(schedule, cfg)
    return schedule


@dataclass
class _Assignment:
    """Tentative placement of one stage group on one unit class."""

    units: dict[str, UnitRef]
    ends: dict[str, float]
    ndp_free: "object"          # np.ndarray of per-unit ready times
    cpu_free: float
    link_free: float
    transfers: list[Transfer]
    crossings: list[tuple[str, str, str]]
    completion: float
    overhead: float
    input_bytes_resident: float


class _PlanState:
    def __init__(self, graph: TaskGraph, cfg: MachineConfig):
        import numpy as np

        self.graph = graph
        self.cfg = cfg
        self.cpu = UnitRef.cpu()
        self.ups = cfg.ndp.units_per_stack
        self.ndp_units = [UnitRef.ndp(s, u)
                          for s in range(cfg.total_stacks)
                          for u in range(self.ups)]
        self.ndp_free = np.zeros(len(self.ndp_units))
        self.cpu_free = 0.0
        self.link_free = 0.0  # CPU link cursor for staging serialization
        self.obj_loc: dict[str, int] = {}
        self.obj_ready: dict[str, float] = {}
        for oid, obj in graph.data_objects.items():
            if obj.initial_location is not None:
                self.obj_loc[oid] = obj.initial_location
                self.obj_ready[oid] = 0.0
        self.transfers: list[Transfer] = []
        self.crossings: list[tuple[str, str, str]] = []
        self.placements: dict[str, list[UnitRef]] = {}

    def snapshot(self, members: list, chosen: "_Assignment") -> "_PlanState":
        """Clone with the assignment applied, for lookahead evaluation."""
        clone = object.__new__(_PlanState)
        clone.graph = self.graph
        clone.cfg = self.cfg
        clone.cpu = self.cpu
        clone.ups = self.ups
        clone.ndp_units = self.ndp_units
        clone.ndp_free = chosen.ndp_free.copy()
        clone.cpu_free = chosen.cpu_free
        clone.link_free = chosen.link_free
        clone.obj_loc = dict(self.obj_loc)
        clone.obj_ready = dict(self.obj_ready)
        clone.transfers = []
        clone.crossings = []
        clone.placements = {}
        for task in members:
            loc = chosen.units[task.id].location()
            for oid in task.outputs:
                clone.obj_loc[oid] = loc
                clone.obj_ready[oid] = chosen.ends[task.id]
        return clone

    def fits(self, task, unit: UnitRef) -> bool:
        """Streaming capacity: outputs plus the largest input window must
        fit in the NDP memory backing the unit."""
        if unit.cls is UnitClass.CPU:
            return True  # host memory backs the CPU side
        objs = self.graph.data_objects
        out_bytes = sum(objs[o].size for o in task.outputs)
        max_in = max((objs[o].size for o in task.inputs), default=0)
        return out_bytes + max_in <= self.cfg.hbm.total_capacity

    def stage_inputs(self, task, dst: int, link_free: float,
                     ) -> tuple[float, float, list[Transfer],
                                list[tuple[str, str, str]], float]:
        """Arrival time of the task's inputs at dst, creating per-edge moves.

        Returns (data_ready, new link cursor, transfers, crossing edges,
        crossing overhead).  All-to-all tasks exchange in place and stage
        nothing.
        """
        cfg = self.cfg
        graph = self.graph
        moves: list[Transfer] = []
        crossings: list[tuple[str, str, str]] = []
        overhead = 0.0
        data_ready = 0.0
        if task.family is KernelFamily.ALLTOALL:
            for oid in task.inputs:
                data_ready = max(data_ready, self.obj_ready.get(oid, 0.0))
            return data_ready, link_free, moves, crossings, overhead
        for oid in task.inputs:
            if oid not in self.obj_loc:
                raise ScheduleError(f"object {oid} consumed before production")
            src = self.obj_loc[oid]
            avail = self.obj_ready[oid]
            if src != dst and not (src in _CPU_LIKE and dst in _CPU_LIKE):
                size = graph.data_objects[oid].size
                dt = transfer_cost(size, src, dst, cfg)
                if src in _CPU_LIKE or dst in _CPU_LIKE:
                    # the CPU link is a serialized resource
                    start = max(avail, link_free)
                    link_free = start + dt
                    avail = link_free
                else:
                    avail += dt
                moves.append(Transfer(object_id=oid, bytes=size, src=src,
                                      dst=dst, cause_task=task.id))
                producer = graph.producers.get(oid)
                if producer is not None and (src == CPU_SIDE) != (dst == CPU_SIDE):
                    crossings.append((producer, task.id, oid))
                    overhead += dt + cfg.cxt_s
                    avail += cfg.cxt_s  # receiving side stalls for the handoff
            data_ready = max(data_ready, avail)
        return data_ready, link_free, moves, crossings, overhead

    def evaluate_group(self, members: list, cls: UnitClass) -> _Assignment | None:
        """Tentatively place a stage group on one class, round-robin by load."""
        import numpy as np

        cfg = self.cfg
        ndp_free = self.ndp_free.copy()
        cpu_free = self.cpu_free
        link_free = self.link_free
        units: dict[str, UnitRef] = {}
        ends: dict[str, float] = {}
        transfers: list[Transfer] = []
        crossings: list[tuple[str, str, str]] = []
        completion = 0.0
        overhead = 0.0
        resident = 0.0
        for task in members:
            if cls is UnitClass.CPU:
                candidates = [-1]
            else:
                candidates = [int(np.argmin(ndp_free))]
                # locality candidate: least-loaded unit in the stack holding
                # the largest staged input
                largest = max(
                    ((self.graph.data_objects[o].size, self.obj_loc.get(o, HOST))
                     for o in task.inputs), default=(0, HOST))
                if largest[1] >= 0:
                    stack = largest[1]
                    lo = stack * self.ups
                    local = lo + int(np.argmin(ndp_free[lo:lo + self.ups]))
                    if local != candidates[0]:
                        candidates.append(local)
                candidates = [i for i in candidates
                              if self.fits(task, self.ndp_units[i])]
                if not candidates:
                    return None  # nothing on this class can hold the task
            scored = []
            for idx in candidates:
                unit = self.cpu if idx < 0 else self.ndp_units[idx]
                free = cpu_free if idx < 0 else float(ndp_free[idx])
                ready, lf, moves, crosses, ovh = self.stage_inputs(
                    task, unit.location(), link_free)
                dur = estimate_time(task, unit, cfg).seconds
                scored.append((max(free, ready) + dur, idx, unit, lf, moves,
                               crosses, ovh))
            scored.sort(key=lambda row: (row[0], row[1]))
            eft, idx, unit, link_free, moves, crosses, ovh = scored[0]
            units[task.id] = unit
            ends[task.id] = eft
            if idx < 0:
                cpu_free = eft
            else:
                ndp_free[idx] = eft
            transfers.extend(moves)
            crossings.extend(crosses)
            overhead += ovh
            completion = max(completion, eft)
            for oid in task.inputs:
                if self.obj_loc.get(oid, HOST) == unit.location():
                    resident += self.graph.data_objects[oid].size
        return _Assignment(units=units, ends=ends, ndp_free=ndp_free,
                           cpu_free=cpu_free, link_free=link_free,
                           transfers=transfers, crossings=crossings,
                           completion=completion, overhead=overhead,
                           input_bytes_resident=resident)

    def commit(self, members: list, chosen: _Assignment) -> None:
        self.ndp_free = chosen.ndp_free
        self.cpu_free = chosen.cpu_free
        self.link_free = chosen.link_free
        self.transfers.extend(chosen.transfers)
        self.crossings.extend(chosen.crossings)
        for task in members:
            unit = chosen.units[task.id]
            self.placements[task.id] = [unit]
            loc = unit.location()
            for oid in task.outputs:
                self.obj_loc[oid] = loc
                self.obj_ready[oid] = chosen.ends[task.id]


def plan(graph: TaskGraph, cfg: MachineConfig, policy: str = "hybrid") -> Schedule:
    """List-schedule the graph under a placement policy.

    ``hybrid`` chooses per stage group between the CPU and the NDP fleet;
    ``cpu_only`` / ``ndp_only`` force one class and serve as the measurement
    baselines.
    """
    if policy not in POLICIES:
        raise DomainError(f"unknown policy {policy!r}")
    state = _PlanState(graph, cfg)

    order = graph.topo_order()
    groups: list[list] = []
    for tid in order:
        task = graph.task(tid)
        key = task.id.rsplit("_", 1)[0]
        if groups and groups[-1][0] == key:
            groups[-1][1].append(task)
        else:
            groups.append((key, [task]))

    def class_options(state_: _PlanState, members: list) -> list[UnitClass]:
        options = []
        if policy in ("hybrid", "cpu_only"):
            options.append(UnitClass.CPU)
        if policy in ("hybrid", "ndp_only"):
            options.append(UnitClass.NDP_UNIT)
        if members[0].family is KernelFamily.ALLTOALL and len(options) > 1:
            # A collective runs where its partitions live; it is not a
            # placement choice the boundary can hide behind.
            ndp_bytes = cpu_bytes = 0
            for task in members:
                for oid in task.inputs:
                    size = graph.data_objects[oid].size
                    if state_.obj_loc.get(oid, HOST) >= 0:
                        ndp_bytes += size
                    else:
                        cpu_bytes += size
            options = [UnitClass.NDP_UNIT if ndp_bytes > cpu_bytes
                       else UnitClass.CPU]
        return options

    for gi, (_key, members) in enumerate(groups):
        scored = []
        for cls in class_options(state, members):
            assignment = state.evaluate_group(members, cls)
            if assignment is None:
                continue
            score = assignment.completion + assignment.overhead
            # One-group lookahead: a placement that strands its outputs on
            # the wrong side of the boundary must pay for it now.
            if gi + 1 < len(groups):
                nxt = groups[gi + 1][1]
                after = state.snapshot(members, assignment)
                follow = []
                for nxt_cls in class_options(after, nxt):
                    nxt_asg = after.evaluate_group(nxt, nxt_cls)
                    if nxt_asg is not None:
                        follow.append(max(assignment.completion,
                                          nxt_asg.completion) + nxt_asg.overhead)
                if follow:
                    score = min(follow) + assignment.overhead
            # ties: prefer the class holding more input bytes, then CPU
            scored.append((score, -assignment.input_bytes_resident,
                           0 if cls is UnitClass.CPU else 1, assignment))
        if not scored:
            raise CapacityError(
                f"stage {_key} fits on no permitted unit under policy {policy}")
        scored.sort(key=lambda row: (row[0], row[1], row[2]))
        state.commit(members, scored[0][3])

    return schedule_from_placements(graph, cfg, state.placements, policy=policy)
