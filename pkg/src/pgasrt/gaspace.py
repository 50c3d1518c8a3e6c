"""Units, teams and global memory segments.

A run is a set of units executing concurrently inside one process.  Global
memory is organised in segments; a segment is exposed for one-sided access
from the moment it is allocated until it is freed, with no epoch calls in
between.  Collective segments have one region per member of a team,
non-collective segments a single region owned by the allocating unit.
"""
from __future__ import annotations

import copy
import enum
import itertools
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import (
    BoundsError,
    CollectiveMismatch,
    ConfigError,
    PGASError,
    RunAborted,
    RuntimeClosed,
    SegmentError,
    TeamError,
    UnitFailure,
)
from .transport import LatencyModel, RoutingMode, Topology, Transport

__all__ = [
    "TEAM_ALL",
    "SegmentKind",
    "Exposure",
    "GlobalPointer",
    "gptr_setunit",
    "gptr_incaddr",
    "Segment",
    "Team",
    "RuntimeConfig",
    "Runtime",
    "UnitContext",
    "LaunchResult",
    "launch",
]

log = logging.getLogger("pgasrt")

TEAM_ALL = 0
ALIGNMENT = 8


class SegmentKind(enum.Enum):
    COLLECTIVE = "collective"
    NON_COLLECTIVE = "non_collective"


class Exposure(enum.Enum):
    EXPOSED = "exposed"
    FREED = "freed"


class GlobalPointer(NamedTuple):
    """Byte address ``offset`` inside ``unit``'s region of a segment."""

    segment_id: int
    unit: int
    offset: int


def gptr_setunit(gptr, unit):
    """Rebind ``gptr`` to the same offset in ``unit``'s region."""
    return GlobalPointer(gptr.segment_id, unit, gptr.offset)


def gptr_incaddr(gptr, delta):
    offset = gptr.offset + delta
    if offset < 0:
        raise BoundsError(f"pointer offset would become negative ({offset})")
    return GlobalPointer(gptr.segment_id, gptr.unit, offset)


def _aligned_bytes(nbytes):
    raw = np.zeros(nbytes + ALIGNMENT, dtype=np.uint8)
    shift = (-raw.ctypes.data) % ALIGNMENT
    return raw[shift:shift + nbytes]


class Segment:
    """A registered global memory region set.

    ``pending`` maps an origin unit to the number of its non-blocking
    operations targeting this segment that have not been waited on.  Each
    origin only ever touches its own key.
    """

    def __init__(self, segment_id, kind, team, size_bytes, units):
        self.segment_id = segment_id
        self.kind = kind
        self.team = team
        self.size_bytes = size_bytes
        self.exposure = Exposure.EXPOSED
        self.arrays = {u: _aligned_bytes(size_bytes) for u in units}
        self.views = {u: memoryview(a) for u, a in self.arrays.items()}
        self.pending = {}

    @property
    def units(self):
        return tuple(self.arrays)

    @property
    def owner(self):
        if self.kind is SegmentKind.NON_COLLECTIVE:
            return next(iter(self.arrays))
        return None

    def region(self, unit, offset, nbytes):
        """Writable byte view of ``[offset, offset + nbytes)`` in ``unit``'s region."""
        if self.exposure is not Exposure.EXPOSED:
            raise SegmentError(f"segment {self.segment_id} has been freed")
        view = self.views.get(unit)
        if view is None:
            raise SegmentError(
                f"unit {unit} has no region in segment {self.segment_id}"
            )
        if offset < 0 or nbytes < 0 or offset + nbytes > self.size_bytes:
            raise BoundsError(
                f"access [{offset}, {offset + nbytes}) outside segment "
                f"{self.segment_id} of {self.size_bytes} bytes"
            )
        return view[offset:offset + nbytes]

    def outstanding(self):
        return sum(self.pending.values())

    def free(self):
        self.exposure = Exposure.FREED
        self.views = {}
        self.arrays = {}

    def __repr__(self):
        return (
            f"Segment(id={self.segment_id}, {self.kind.name}, team={self.team}, "
            f"size={self.size_bytes}, {self.exposure.name})"
        )


class _Barrier:
    """Reusable arrive/release counter barrier that honours run aborts."""

    def __init__(self, parties, runtime):
        self.parties = parties
        self._runtime = runtime
        self._cond = threading.Condition()
        self._count = 0
        self._generation = 0

    def wait(self):
        if self.parties == 1:
            return
        rt = self._runtime
        with self._cond:
            gen = self._generation
            self._count += 1
            if self._count == self.parties:
                self._count = 0
                self._generation += 1
                self._cond.notify_all()
                return
            deadline = None
            if rt.config.barrier_timeout is not None:
                deadline = time.monotonic() + rt.config.barrier_timeout
            while gen == self._generation:
                self._cond.wait(0.05)
                if rt.aborted.is_set():
                    raise RunAborted("run aborted while waiting in a barrier")
                if deadline is not None and time.monotonic() > deadline:
                    raise TimeoutError(
                        f"barrier timed out after {rt.config.barrier_timeout}s "
                        f"({self._count}/{self.parties} arrived)"
                    )


class _Slot:
    __slots__ = ("op", "values", "result", "left", "mismatch")

    def __init__(self, op):
        self.op = op
        self.values = {}
        self.result = None
        self.left = 0
        self.mismatch = None


class Team:
    """An ordered group of units with its own collective context."""

    def __init__(self, team_id, members, parent, runtime):
        self.id = team_id
        self.members = tuple(members)
        self.rank = {u: r for r, u in enumerate(self.members)}
        self.parent = parent
        self.alive = True
        self.segments = set()
        self.barrier = _Barrier(len(self.members), runtime)
        self._runtime = runtime
        self._lock = threading.Lock()
        self._seq = dict.fromkeys(self.members, 0)
        self._slots = {}

    def __len__(self):
        return len(self.members)

    def __contains__(self, unit):
        return unit in self.rank

    def collective(self, unit, op, value, finish):
        """Run a collective step for ``unit``.

        Every member contributes ``value``; after all arrived the team's
        rank 0 computes ``finish(values)`` (``values`` maps unit to value)
        and every member returns that result.  An exception produced by
        ``finish`` is raised on every member.
        """
        seq = self._seq[unit]
        self._seq[unit] = seq + 1
        with self._lock:
            slot = self._slots.get(seq)
            if slot is None:
                slot = self._slots[seq] = _Slot(op)
            elif slot.op != op:
                slot.mismatch = (slot.op, op)
            slot.values[unit] = value
        self.barrier.wait()
        if self.rank[unit] == 0:
            if slot.mismatch is not None:
                slot.result = CollectiveMismatch(
                    f"team {self.id} collective #{seq}: members called "
                    f"{slot.mismatch[0]!r} and {slot.mismatch[1]!r}"
                )
            else:
                try:
                    slot.result = finish(slot.values)
                except PGASError as exc:
                    slot.result = exc
        self.barrier.wait()
        result = slot.result
        with self._lock:
            slot.left += 1
            if slot.left == len(self.members):
                del self._slots[seq]
        if isinstance(result, BaseException):
            raise copy.copy(result)
        return result


@dataclass
class RuntimeConfig:
    """Parameters of one launch.

    ``latency_mode`` selects how simulated message latency reaches a
    unit's clock: ``"virtual"`` adds it to the unit's clock offset,
    ``"spin"`` burns that much CPU time on the unit's thread.
    """

    num_units: int = 1
    node_size: int = 16
    blades_per_chassis: int = 16
    chassis_per_group: int = 6
    latency: LatencyModel = field(default_factory=LatencyModel)
    routing_mode: RoutingMode = RoutingMode.LOCALITY_AWARE
    latency_mode: str = "virtual"
    barrier_timeout: float | None = None
    record_deliveries: bool = False

    def topology(self):
        return Topology(
            self.num_units, self.node_size, self.blades_per_chassis, self.chassis_per_group
        )

    def validate(self):
        self.routing_mode = RoutingMode.parse(self.routing_mode)
        if self.latency_mode not in ("virtual", "spin"):
            raise ConfigError(f"latency_mode must be 'virtual' or 'spin', got {self.latency_mode!r}")
        if not isinstance(self.latency, LatencyModel):
            raise ConfigError("latency must be a LatencyModel")
        if self.barrier_timeout is not None and self.barrier_timeout <= 0:
            raise ConfigError("barrier_timeout must be positive")
        return self.topology()


class Runtime:
    """State shared by all units of one launch."""

    def __init__(self, config):
        self.config = config
        self.topology = config.validate()
        self.transport = Transport(
            self.topology,
            config.latency,
            config.routing_mode,
            self.resolve,
            record_deliveries=config.record_deliveries,
        )
        self.segments = {}
        self.teams = {}
        self._segment_ids = itertools.count(1)
        self._team_ids = itertools.count(TEAM_ALL + 1)
        self.aborted = threading.Event()
        self.closed = False
        self.teams[TEAM_ALL] = Team(TEAM_ALL, range(config.num_units), None, self)

    def resolve(self, segment_id, unit, offset, nbytes):
        seg = self.segments.get(segment_id)
        if seg is None:
            raise SegmentError(f"unknown segment {segment_id}")
        return seg.region(unit, offset, nbytes)

    def new_segment(self, kind, team, nbytes, units):
        seg = Segment(next(self._segment_ids), kind, team, nbytes, units)
        self.segments[seg.segment_id] = seg
        return seg

    def live_segments(self):
        return [s for s in self.segments.values() if s.exposure is Exposure.EXPOSED]

    def teardown(self):
        """Drain the transport and free whatever the units left exposed."""
        self.transport.drain()
        leaked = self.live_segments()
        for seg in leaked:
            log.warning("freeing leaked %r at exit", seg)
            seg.free()
        self.closed = True
        return len(leaked)


class UnitContext:
    """Per-unit runtime handle: identity, teams and global memory.

    A handle belongs to the thread running its unit and must not be shared.
    """

    def __init__(self, runtime, unit_id):
        self._rt = runtime
        self._id = unit_id
        self.log = logging.LoggerAdapter(log, {"unit": unit_id})

    def _live(self):
        if self._rt.closed:
            raise RuntimeClosed("runtime handle used outside its launch")

    def myid(self):
        self._live()
        return self._id

    def size(self):
        self._live()
        return self._rt.config.num_units

    def _team(self, team):
        t = self._rt.teams.get(team)
        if t is None or not t.alive:
            raise TeamError(f"team {team} does not exist")
        return t

    def _member_team(self, team):
        t = self._team(team)
        if self._id not in t.rank:
            raise TeamError(f"unit {self._id} is not a member of team {team}")
        return t

    def team_size(self, team=TEAM_ALL):
        self._live()
        return len(self._team(team))

    def team_myid(self, team=TEAM_ALL):
        """Team-relative rank of the calling unit."""
        self._live()
        return self._member_team(team).rank[self._id]

    def team_members(self, team=TEAM_ALL):
        self._live()
        return self._team(team).members

    # -- teams ---------------------------------------------------------
    def team_create(self, parent, members):
        """Create a team from an ordered member list; collective over ``parent``.

        Every member of ``parent`` receives the new team id, including
        units that are not members of the new team.
        """
        self._live()
        parent_team = self._member_team(parent)
        members = tuple(int(u) for u in members)
        rt = self._rt

        def finish(values):
            lists = set(values.values())
            if len(lists) != 1:
                raise CollectiveMismatch("team_create called with different member lists")
            if not members:
                raise TeamError("a team needs at least one member")
            if len(set(members)) != len(members):
                raise TeamError(f"duplicate units in member list {members}")
            outside = [u for u in members if u not in parent_team.rank]
            if outside:
                raise TeamError(f"units {outside} are not members of team {parent}")
            team_id = next(rt._team_ids)
            rt.teams[team_id] = Team(team_id, members, parent, rt)
            return team_id

        return parent_team.collective(self._id, "team_create", members, finish)

    def team_destroy(self, team):
        """Destroy ``team``; collective over its members."""
        self._live()
        if team == TEAM_ALL:
            raise TeamError("TEAM_ALL is owned by the launch and cannot be destroyed")
        t = self._member_team(team)
        rt = self._rt

        def finish(values):
            if t.segments:
                sid = min(t.segments)
                raise TeamError(
                    f"team {team} still has live segment {sid} "
                    f"({len(t.segments)} in total); free it first"
                )
            t.alive = False
            del rt.teams[team]
            return None

        t.collective(self._id, "team_destroy", None, finish)

    # -- collective memory -----------------------------------------------
    def team_memalloc_aligned(self, team, nbytes):
        """Allocate ``nbytes`` per member of ``team``; collective.

        The returned pointer addresses offset 0 of the region of the
        team's rank-0 unit and is identical on every member.  The segment
        is accessible immediately.
        """
        self._live()
        t = self._member_team(team)
        nbytes = _check_nbytes(nbytes)
        rt = self._rt

        def finish(values):
            sizes = set(values.values())
            if len(sizes) != 1:
                raise CollectiveMismatch(
                    f"team_memalloc_aligned on team {team} with differing sizes {sorted(sizes)}"
                )
            seg = rt.new_segment(SegmentKind.COLLECTIVE, team, nbytes, t.members)
            t.segments.add(seg.segment_id)
            return GlobalPointer(seg.segment_id, t.members[0], 0)

        return t.collective(self._id, "memalloc", nbytes, finish)

    def team_memfree(self, team, gptr):
        """Free a collective segment of ``team``; collective."""
        self._live()
        t = self._member_team(team)
        rt = self._rt
        sid = gptr.segment_id

        def finish(values):
            if len(set(values.values())) != 1:
                raise CollectiveMismatch(f"team_memfree on team {team} with differing segments")
            seg = rt.segments.get(sid)
            if seg is None or seg.kind is not SegmentKind.COLLECTIVE or seg.team != team:
                raise SegmentError(f"segment {sid} is not a collective segment of team {team}")
            if seg.exposure is Exposure.FREED:
                raise SegmentError(f"segment {sid} already freed")
            if seg.outstanding():
                raise SegmentError(
                    f"segment {sid} has {seg.outstanding()} un-waited operations"
                )
            seg.free()
            t.segments.discard(sid)
            return None

        t.collective(self._id, "memfree", sid, finish)

    # -- non-collective memory -------------------------------------------
    def memalloc(self, nbytes):
        """Allocate ``nbytes`` owned by the calling unit, reachable by all."""
        self._live()
        nbytes = _check_nbytes(nbytes)
        seg = self._rt.new_segment(SegmentKind.NON_COLLECTIVE, TEAM_ALL, nbytes, (self._id,))
        return GlobalPointer(seg.segment_id, self._id, 0)

    def memfree(self, gptr):
        self._live()
        seg = self._rt.segments.get(gptr.segment_id)
        if seg is None or seg.kind is not SegmentKind.NON_COLLECTIVE:
            raise SegmentError(f"segment {gptr.segment_id} is not a non-collective segment")
        if seg.exposure is Exposure.FREED:
            raise SegmentError(f"segment {gptr.segment_id} already freed")
        if seg.owner != self._id:
            raise SegmentError(
                f"unit {self._id} cannot free segment {gptr.segment_id} owned by unit {seg.owner}"
            )
        if seg.outstanding():
            raise SegmentError(
                f"segment {gptr.segment_id} has {seg.outstanding()} un-waited operations"
            )
        seg.free()

    def segment(self, gptr):
        seg = self._rt.segments.get(gptr.segment_id)
        if seg is None:
            raise SegmentError(f"unknown segment {gptr.segment_id}")
        return seg

    def local(self, gptr, dtype=np.uint8):
        """NumPy view of the calling unit's region of ``gptr``'s segment.

        The pointer's unit is ignored; the view always covers the caller's
        own region, from ``gptr.offset`` to the end.
        """
        self._live()
        seg = self.segment(gptr)
        if seg.exposure is Exposure.FREED:
            raise SegmentError(f"segment {gptr.segment_id} has been freed")
        arr = seg.arrays.get(self._id)
        if arr is None:
            raise SegmentError(f"unit {self._id} has no region in segment {gptr.segment_id}")
        return arr[gptr.offset:].view(dtype)


def _check_nbytes(nbytes):
    if isinstance(nbytes, bool) or not isinstance(nbytes, (int, np.integer)) or nbytes < 0:
        raise ValueError(f"nbytes must be a non-negative integer, got {nbytes!r}")
    return int(nbytes)


@dataclass
class LaunchResult:
    """Outcome of :func:`launch`."""

    values: list
    units: list
    leaked_segments: int
    stats: object

    @property
    def statuses(self):
        return [0] * len(self.values)


class _UnitPrefix(logging.Filter):
    def filter(self, record):
        unit = getattr(record, "unit", None)
        record.unit_prefix = f"[unit {unit}] " if unit is not None else ""
        return True


def _ensure_log_handler():
    if not log.handlers:
        handler = logging.StreamHandler()
        handler.addFilter(_UnitPrefix())
        handler.setFormatter(logging.Formatter("%(unit_prefix)s%(levelname)s: %(message)s"))
        log.addHandler(handler)
        log.propagate = False


def launch(config: RuntimeConfig, unit_main: Callable, *args, unit_factory=None, **kwargs):
    """Run ``unit_main(unit, *args, **kwargs)`` on ``config.num_units`` units.

    Returns a :class:`LaunchResult`.  If any unit raises, the remaining
    units are released from their barriers and :class:`UnitFailure` is
    raised naming the first failing unit.  Segments still exposed when
    every unit has returned are freed and counted as leaked.
    """
    _ensure_log_handler()
    if not isinstance(config, RuntimeConfig):
        raise ConfigError("launch needs a RuntimeConfig")
    try:
        rt = Runtime(config)
    except (ConfigError, TypeError) as exc:
        log.error("launch refused: %s", exc)
        raise ConfigError(f"launch refused: {exc}") from exc
    if unit_factory is None:
        from .onesided import Unit as unit_factory
    units = [unit_factory(rt, u) for u in range(config.num_units)]
    values = [None] * config.num_units
    failures = []

    def body(u):
        try:
            values[u] = unit_main(units[u], *args, **kwargs)
        except BaseException as exc:  # noqa: BLE001 - reported below
            if not (isinstance(exc, RunAborted) and rt.aborted.is_set()):
                failures.append((u, exc))
                units[u].log.error("%s: %s", type(exc).__name__, exc)
            rt.aborted.set()

    threads = [
        threading.Thread(target=body, args=(u,), name=f"unit-{u}", daemon=True)
        for u in range(config.num_units)
    ]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if failures:
        rt.closed = True
        unit, exc = failures[0]
        raise UnitFailure(unit, exc) from exc
    leaked = rt.teardown()
    return LaunchResult(values, units, leaked, rt.transport.stats())
