"""Unit placement, hop classification and the two data paths.

Units are placed SMP style: a node is filled before the next one is used.
Nodes are grouped into chassis and chassis into groups, which yields four
hop classes for a pair of units.  Same-node transfers may take the direct
copy path; every other transfer is carried by :class:`Envelope` messages
through per-node service queues, charged by a linear latency model.

Progress on the message path is origin driven: a unit that needs a result
(``flush``) services the target node's queue itself, under that node's
service lock.  The target unit's own code never participates.
"""
from __future__ import annotations

import enum
import itertools
import threading
from collections import deque
from dataclasses import dataclass, field

from .errors import BoundsError, ConfigError, RoutingError, SegmentError

__all__ = [
    "HopClass",
    "RoutingMode",
    "Topology",
    "LatencyModel",
    "EnvelopeKind",
    "Envelope",
    "Transport",
]


class HopClass(enum.IntEnum):
    INTRA_NODE = 0
    RANK1 = 1
    RANK2 = 2
    RANK3 = 3


class RoutingMode(enum.Enum):
    LOCALITY_AWARE = "locality_aware"
    OBLIVIOUS = "oblivious"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigError(
                f"unknown routing mode {value!r}; expected one of "
                + ", ".join(m.value for m in cls)
            ) from None


@dataclass(frozen=True)
class Topology:
    """Placement of ``num_units`` units onto nodes, chassis and groups.

    Parameters
    ----------
    num_units : int
        Number of units in the run.
    node_size : int
        Units per node.
    blades_per_chassis : int
        Nodes per chassis.
    chassis_per_group : int
        Chassis per group.
    """

    num_units: int
    node_size: int
    blades_per_chassis: int = 16
    chassis_per_group: int = 6

    def __post_init__(self):
        for name in ("num_units", "node_size", "blades_per_chassis", "chassis_per_group"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")

    def node_of(self, unit):
        return unit // self.node_size

    def chassis_of(self, node):
        return node // self.blades_per_chassis

    def group_of(self, chassis):
        return chassis // self.chassis_per_group

    @property
    def num_nodes(self):
        return -(-self.num_units // self.node_size)

    def classify(self, origin, target):
        """Hop class of the pair ``(origin, target)``."""
        n = self.num_units
        if not (0 <= origin < n and 0 <= target < n):
            raise ValueError(f"unit pair ({origin}, {target}) outside [0, {n})")
        a = origin // self.node_size
        b = target // self.node_size
        if a == b:
            return HopClass.INTRA_NODE
        a //= self.blades_per_chassis
        b //= self.blades_per_chassis
        if a == b:
            return HopClass.RANK1
        if a // self.chassis_per_group == b // self.chassis_per_group:
            return HopClass.RANK2
        return HopClass.RANK3


def _us(x):
    return x * 1e-6


def _ns(x):
    return x * 1e-9


@dataclass(frozen=True)
class LatencyModel:
    """Linear message cost ``base[c] + nbytes * invbw[c]`` per hop class.

    Times are in seconds, inverse bandwidths in seconds per byte.  The
    defaults only encode the ordering of the interconnect tiers.
    """

    base: tuple = (_us(0.5), _us(2.0), _us(4.0), _us(8.0))
    invbw: tuple = (_ns(0.1), _ns(0.5), _ns(0.7), _ns(1.0))

    def __post_init__(self):
        if len(self.base) != 4 or len(self.invbw) != 4:
            raise ConfigError("latency model needs four base and four invbw values")
        if any(v < 0 for v in self.base) or any(v < 0 for v in self.invbw):
            raise ConfigError("latency parameters must be >= 0")
        if any(self.base[i] > self.base[i + 1] for i in range(3)):
            raise ConfigError(
                "base latencies must be non-decreasing from INTRA_NODE to RANK3"
            )

    def cost(self, hop, nbytes):
        return self.base[hop] + nbytes * self.invbw[hop]


class EnvelopeKind(enum.IntEnum):
    PUT = 0
    GET_REQUEST = 1
    GET_REPLY = 2
    ACK = 3


_PUT = EnvelopeKind.PUT
_GET_REQUEST = EnvelopeKind.GET_REQUEST
_GET_REPLY = EnvelopeKind.GET_REPLY
_ACK = EnvelopeKind.ACK


class Envelope:
    """One message on the transport.

    ``payload`` is a buffer for PUT and GET_REPLY.  A PUT payload is read
    when the envelope is serviced, not when it is sent, so the origin
    buffer must stay stable until the operation is flushed.  ``handle`` is
    the completion record the reply settles; ``error`` is set on replies
    whose request could not be applied.
    """

    __slots__ = (
        "kind", "origin", "target", "segment_id", "offset", "nbytes",
        "payload", "seq", "handle", "error", "hop", "cost",
    )

    def __init__(self, kind, origin, target, segment_id, offset, nbytes,
                 payload=None, handle=None):
        self.kind = kind
        self.origin = origin
        self.target = target
        self.segment_id = segment_id
        self.offset = offset
        self.nbytes = nbytes
        self.payload = payload
        self.handle = handle
        self.seq = -1
        self.error = None
        self.hop = None
        self.cost = 0.0

    def __repr__(self):
        return (
            f"Envelope({self.kind.name}, {self.origin}->{self.target}, "
            f"seg={self.segment_id}, off={self.offset}, n={self.nbytes}, seq={self.seq})"
        )


@dataclass
class TransportStats:
    """Snapshot of the message counters."""

    messages: int = 0
    by_kind: dict = field(default_factory=dict)
    by_hop: dict = field(default_factory=dict)
    charged_seconds: float = 0.0


class _Ledger:
    """Message counters written by a single owner (a unit or a node lock)."""

    __slots__ = ("messages", "kind", "hop", "charged")

    def __init__(self):
        self.messages = 0
        self.kind = [0, 0, 0, 0]
        self.hop = [0, 0, 0, 0]
        self.charged = 0.0


class Transport:
    """Message path and direct-copy path between the units of one run.

    Parameters
    ----------
    topology : Topology
    latency : LatencyModel
    routing_mode : RoutingMode
    resolve : callable
        ``resolve(segment_id, unit, offset, nbytes)`` returning a writable
        byte memoryview of the addressed region, raising
        :class:`SegmentError` when it is not accessible.
    record_deliveries : bool
        Keep a log of ``(origin, target, kind, seq)`` in application order.
    """

    def __init__(self, topology, latency, routing_mode, resolve, record_deliveries=False):
        self.topology = topology
        self.latency = latency
        self.routing_mode = RoutingMode.parse(routing_mode)
        self._resolve = resolve
        self._node_of = [topology.node_of(u) for u in range(topology.num_units)]
        nnodes = topology.num_nodes
        self._queues = [deque() for _ in range(nnodes)]
        self._locks = [threading.Lock() for _ in range(nnodes)]
        self._inbox = [deque() for _ in range(topology.num_units)]
        # per origin: target -> [outstanding count, max round trip seconds]
        self._pending = [dict() for _ in range(topology.num_units)]
        self._seq = [dict() for _ in range(topology.num_units)]
        self._unit_ledger = [_Ledger() for _ in range(topology.num_units)]
        self._node_ledger = [_Ledger() for _ in range(nnodes)]
        self.deliveries = [] if record_deliveries else None
        n = topology.num_units
        self._hop = [[topology.classify(o, t) for t in range(n)] for o in range(n)]
        self._base = tuple(latency.base)
        self._invbw = tuple(latency.invbw)

    # -- routing -------------------------------------------------------
    def classify(self, origin, target):
        return self.topology.classify(origin, target)

    def same_node(self, a, b):
        return self._node_of[a] == self._node_of[b]

    def use_direct(self, origin, target):
        """True when a blocking transfer between the pair takes the copy path."""
        return (
            self.routing_mode is RoutingMode.LOCALITY_AWARE
            and self._node_of[origin] == self._node_of[target]
        )

    def direct_copy(self, origin, target, dst, src, nbytes):
        """Copy ``nbytes`` from ``src`` to ``dst`` with plain memory access.

        No envelope is generated and no latency is charged.
        """
        if self.routing_mode is not RoutingMode.LOCALITY_AWARE:
            raise RoutingError("direct copy is disabled in OBLIVIOUS mode")
        if self._node_of[origin] != self._node_of[target]:
            raise RoutingError(
                f"units {origin} and {target} are on different nodes; use messages"
            )
        if nbytes:
            if len(dst) < nbytes or len(src) < nbytes:
                raise BoundsError(f"direct copy of {nbytes} bytes exceeds a region")
            dst[:nbytes] = src[:nbytes]

    # -- message path --------------------------------------------------
    def send(self, env):
        """Enqueue ``env``: requests at the target node's service queue,
        replies in the target unit's inbox.

        Returns the envelope's sequence number for its (origin, target)
        pair.  Request envelopes are sent by the origin's thread; replies
        are sent while the servicing thread holds the node lock.
        """
        if env.kind is _PUT or env.kind is _GET_REQUEST:
            return self._post(env)
        return self._reply(env)

    def _post(self, env):
        o = env.origin
        t = env.target
        row = self._seq[o]
        counter = row.get(t)
        if counter is None:
            counter = row.setdefault(t, itertools.count())
        env.seq = seq = next(counter)
        env.hop = hop = self._hop[o][t]
        base = self._base[hop]
        wire = env.nbytes * self._invbw[hop]
        if env.kind is _PUT:
            env.cost = cost = base + wire
            rtt = cost + base
        else:
            env.cost = cost = base
            rtt = cost + base + wire
        pending = self._pending[o]
        slot = pending.get(t)
        if slot is None:
            pending[t] = [1, rtt]
        else:
            slot[0] += 1
            if rtt > slot[1]:
                slot[1] = rtt
        self._queues[self._node_of[t]].append(env)
        ledger = self._unit_ledger[o]
        ledger.messages += 1
        ledger.kind[env.kind] += 1
        ledger.hop[hop] += 1
        ledger.charged += cost
        return seq

    def _reply(self, env):
        o = env.origin
        t = env.target
        row = self._seq[o]
        counter = row.get(t)
        if counter is None:
            counter = row.setdefault(t, itertools.count())
        env.seq = seq = next(counter)
        env.hop = hop = self._hop[o][t]
        if env.payload is not None:
            env.cost = cost = self._base[hop] + env.nbytes * self._invbw[hop]
        else:
            env.cost = cost = self._base[hop]
        self._inbox[t].append(env)
        ledger = self._node_ledger[self._node_of[o]]
        ledger.messages += 1
        ledger.kind[env.kind] += 1
        ledger.hop[hop] += 1
        ledger.charged += cost
        return seq

    def roundtrip(self, kind, origin, target, region, buf, nbytes):
        """Carry one blocking request and its reply without queueing them.

        Usable only when the target node has nothing queued and ``origin``
        has nothing outstanding towards ``target``, so per-pair FIFO order
        is unaffected.  Counters, sequence numbers and the delivery log are
        updated as if both envelopes had travelled through the queues.
        ``region`` is the already validated target byte view.  Returns the
        round trip in seconds, or ``None`` when the queued path must be used.
        """
        node = self._node_of[target]
        queue = self._queues[node]
        if queue or target in self._pending[origin]:
            return None
        hop = self._hop[origin][target]
        base = self._base[hop]
        wire = nbytes * self._invbw[hop]
        row = self._seq[origin]
        counter = row.get(target)
        if counter is None:
            counter = row.setdefault(target, itertools.count())
        back = self._seq[target]
        bcounter = back.get(origin)
        if bcounter is None:
            bcounter = back.setdefault(origin, itertools.count())
        if kind is _PUT:
            req_cost = base + wire
            reply_kind = _ACK
            reply_cost = base
        else:
            req_cost = base
            reply_kind = _GET_REPLY
            reply_cost = base + wire
        ledger = self._unit_ledger[origin]
        ledger.messages += 1
        ledger.kind[kind] += 1
        ledger.hop[hop] += 1
        ledger.charged += req_cost
        with self._locks[node]:
            seq = next(counter)
            if self.deliveries is not None:
                self.deliveries.append((origin, target, kind, seq))
            if nbytes:
                if kind is _PUT:
                    region[:] = buf[:nbytes]
                else:
                    buf[:nbytes] = region
            next(bcounter)
            ledger = self._node_ledger[node]
            ledger.messages += 1
            ledger.kind[reply_kind] += 1
            ledger.hop[hop] += 1
            ledger.charged += reply_cost
        return req_cost + reply_cost

    def serve(self, node):
        """Apply every envelope queued at ``node`` and emit the replies.

        A request envelope is turned into its own reply once applied.
        """
        queue = self._queues[node]
        resolve = self._resolve
        reply = self._reply
        log = self.deliveries
        with self._locks[node]:
            while queue:
                env = queue.popleft()
                if log is not None:
                    log.append((env.origin, env.target, env.kind, env.seq))
                nbytes = env.nbytes
                try:
                    region = resolve(env.segment_id, env.target, env.offset, nbytes)
                    if env.kind is _PUT:
                        if nbytes:
                            region[:] = env.payload[:nbytes]
                        env.payload = None
                    else:
                        env.payload = bytes(region)
                except SegmentError as exc:
                    env.error = exc
                    env.payload = None if env.kind is _PUT else b""
                if env.kind is _PUT:
                    env.kind = _ACK
                    env.nbytes = 0
                else:
                    env.kind = _GET_REPLY
                env.origin, env.target = env.target, env.origin
                reply(env)

    def _collect(self, origin):
        inbox = self._inbox[origin]
        pending = self._pending[origin]
        errors = []
        while inbox:
            reply = inbox.popleft()
            slot = pending.get(reply.origin)
            if slot is not None:
                slot[0] -= 1
            if reply.handle is not None:
                reply.handle._settle(reply)
            if reply.error is not None:
                errors.append(reply.error)
        return errors

    def flush(self, origin, target, raise_errors=True):
        """Complete every envelope ``origin`` has sent to ``target``.

        Returns the simulated round trip (seconds) the origin waited for:
        the largest round trip among the flushed operations, which are
        pipelined.  Raises the first delivery error among the replies
        collected unless ``raise_errors`` is false; the failed handles
        carry their error either way.
        """
        pending = self._pending[origin]
        slot = pending.get(target)
        if slot is None:
            return 0.0
        if slot[0] > 0:
            self.serve(self._node_of[target])
        inbox = self._inbox[origin]
        error = None
        while inbox:
            reply = inbox.popleft()
            s = pending.get(reply.origin)
            if s is not None:
                s[0] -= 1
            if reply.handle is not None:
                reply.handle._settle(reply)
            if reply.error is not None and error is None:
                error = reply.error
        if slot[0]:  # pragma: no cover - serve() above always empties the queue
            raise RuntimeError(f"flush({origin}, {target}) left {slot[0]} ops pending")
        del pending[target]
        if error is not None and raise_errors:
            raise error
        return slot[1]

    def outstanding(self, origin, target=None):
        pending = self._pending[origin]
        if target is not None:
            slot = pending.get(target)
            return slot[0] if slot else 0
        return sum(slot[0] for slot in pending.values())

    def drain(self):
        """Service every node queue and settle every reply."""
        for node in range(len(self._queues)):
            self.serve(node)
        for origin in range(len(self._inbox)):
            self._collect(origin)
            self._pending[origin].clear()

    # -- accounting ----------------------------------------------------
    @property
    def messages(self):
        return sum(l.messages for l in self._unit_ledger) + sum(
            l.messages for l in self._node_ledger
        )

    def stats(self):
        ledgers = self._unit_ledger + self._node_ledger
        return TransportStats(
            messages=sum(l.messages for l in ledgers),
            by_kind={k.name: sum(l.kind[k] for l in ledgers) for k in EnvelopeKind},
            by_hop={h.name: sum(l.hop[h] for l in ledgers) for h in HopClass},
            charged_seconds=sum(l.charged for l in ledgers),
        )
