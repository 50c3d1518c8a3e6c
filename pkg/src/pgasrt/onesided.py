"""Put/get API with locality-aware routing and flush-based completion.

Blocking transfers between units of the same node are plain memory copies
in LOCALITY_AWARE mode; everything else travels as envelopes and is
completed by flushing the target.  Non-blocking operations always use the
message path and are completed by :meth:`Unit.wait` / :meth:`Unit.waitall`,
each of which flushes the targets involved.
"""
from __future__ import annotations

import enum
import math
import time

from .errors import BoundsError, HandleError, SegmentError, TeamError
from .gaspace import TEAM_ALL, UnitContext
from .transport import Envelope, EnvelopeKind

__all__ = ["OpKind", "OpState", "OpHandle", "Unit"]


class OpKind(enum.Enum):
    PUT = "put"
    GET = "get"


class OpState(enum.Enum):
    PENDING = "pending"
    COMPLETE = "complete"
    FAILED = "failed"


class OpHandle:
    """Completion token of a non-blocking put or get."""

    __slots__ = ("origin", "target", "kind", "state", "dst", "nbytes",
                 "error", "consumed", "_segment")

    def __init__(self, origin, target, kind, dst=None, nbytes=0, segment=None):
        self.origin = origin
        self.target = target
        self.kind = kind
        self.state = OpState.PENDING
        self.dst = dst
        self.nbytes = nbytes
        self.error = None
        self.consumed = False
        self._segment = segment

    def _settle(self, reply):
        if reply.error is not None:
            self.state = OpState.FAILED
            self.error = reply.error
        else:
            if self.kind is _GET and self.nbytes:
                self.dst[:self.nbytes] = reply.payload
            self.state = OpState.COMPLETE
        seg = self._segment
        if seg is not None:
            seg.pending[self.origin] -= 1
            self._segment = None

    def __repr__(self):
        return f"OpHandle({self.kind.name} {self.origin}->{self.target}, {self.state.name})"


_PUT = OpKind.PUT
_GET = OpKind.GET
_FAILED = OpState.FAILED
_E_PUT = EnvelopeKind.PUT
_E_GET = EnvelopeKind.GET_REQUEST


def _byte_view(buf, nbytes, writable):
    mv = buf if type(buf) is memoryview else memoryview(buf)
    if mv.format != "B" or mv.ndim != 1:
        mv = mv.cast("B")
    if writable and mv.readonly:
        raise TypeError("destination buffer is read-only")
    if len(mv) < nbytes:
        raise BoundsError(f"local buffer of {len(mv)} bytes is shorter than {nbytes}")
    return mv


class Unit(UnitContext):
    """Per-unit handle passed to the entry procedure of :func:`launch`.

    Besides identity, teams and memory it carries the RMA operations and
    instrumentation counters (``gets``, ``puts``, ``barriers``,
    ``flushes``, ``direct_copies``).  :meth:`clock` is the unit's own
    time: CPU time of its thread plus simulated network latency.
    """

    def __init__(self, runtime, unit_id):
        super().__init__(runtime, unit_id)
        self._tp = runtime.transport
        self._segments = runtime.segments
        n = runtime.config.num_units
        # locality table: True where a blocking op may use direct copy
        self._direct = [self._tp.use_direct(unit_id, t) for t in range(n)]
        self._spin = runtime.config.latency_mode == "spin"
        self._charged = 0.0
        self.gets = 0
        self.puts = 0
        self.barriers = 0
        self.flushes = 0
        self.direct_copies = 0

    # -- time ------------------------------------------------------------
    def clock(self):
        return time.thread_time() + self._charged

    @property
    def charged_latency(self):
        """Simulated latency accumulated by this unit so far (seconds)."""
        return self._charged

    def _charge(self, seconds):
        if seconds <= 0.0:
            return
        if self._spin:
            end = time.thread_time() + seconds
            while time.thread_time() < end:
                pass
        else:
            self._charged += seconds

    def _flush(self, target):
        rtt = self._tp.flush(self._id, target, raise_errors=False)
        self.flushes += 1
        self._charge(rtt)

    def flush(self, target):
        """Complete every earlier operation of this unit towards ``target``."""
        self._live()
        rtt = self._tp.flush(self._id, target)
        self.flushes += 1
        self._charge(rtt)

    def _region(self, gptr, nbytes):
        seg = self._segments.get(gptr[0])
        if seg is None:
            raise SegmentError(f"unknown segment {gptr[0]}")
        return seg, seg.region(gptr[1], gptr[2], nbytes)

    # -- blocking --------------------------------------------------------
    # The two blocking calls carry the halo exchange, so their common case
    # (valid pointer, byte memoryview buffer) is written out inline.  Any
    # irregular argument falls back to the checked helpers.

    def put_blocking(self, gptr, src, nbytes):
        """Copy ``nbytes`` of ``src`` to ``gptr``; remotely complete on return."""
        if self._rt.closed:
            self._live()
        sid, target, off = gptr
        seg = self._segments.get(sid)
        view = seg.views.get(target) if seg is not None else None
        if view is None or off < 0 or nbytes < 0 or off + nbytes > seg.size_bytes:
            seg, view = self._region(gptr, nbytes)
            off = 0
        if type(src) is not memoryview or src.format != "B" or len(src) < nbytes:
            src = _byte_view(src, nbytes, False)
        self.puts += 1
        if self._direct[target]:
            if nbytes:
                view[off:off + nbytes] = src[:nbytes]
            self.direct_copies += 1
            return
        tp = self._tp
        rtt = tp.roundtrip(_E_PUT, self._id, target, view[off:off + nbytes], src, nbytes)
        h = None
        if rtt is None:
            h = OpHandle(self._id, target, _PUT)
            tp._post(Envelope(_E_PUT, self._id, target, sid, gptr[2], nbytes, src, h))
            rtt = tp.flush(self._id, target, False)
        self.flushes += 1
        if self._spin:
            self._charge(rtt)
        else:
            self._charged += rtt
        if h is not None and h.state is _FAILED:
            raise h.error

    def get_blocking(self, dst, gptr, nbytes):
        """Copy ``nbytes`` at ``gptr`` into ``dst``; filled on return."""
        if self._rt.closed:
            self._live()
        sid, target, off = gptr
        seg = self._segments.get(sid)
        view = seg.views.get(target) if seg is not None else None
        if view is None or off < 0 or nbytes < 0 or off + nbytes > seg.size_bytes:
            seg, view = self._region(gptr, nbytes)
            off = 0
        if (type(dst) is not memoryview or dst.format != "B" or dst.readonly
                or len(dst) < nbytes):
            dst = _byte_view(dst, nbytes, True)
        self.gets += 1
        if self._direct[target]:
            if nbytes:
                dst[:nbytes] = view[off:off + nbytes]
            self.direct_copies += 1
            return
        tp = self._tp
        rtt = tp.roundtrip(_E_GET, self._id, target, view[off:off + nbytes], dst, nbytes)
        h = None
        if rtt is None:
            h = OpHandle(self._id, target, _GET, dst, nbytes)
            tp._post(Envelope(_E_GET, self._id, target, sid, gptr[2], nbytes, None, h))
            rtt = tp.flush(self._id, target, False)
        self.flushes += 1
        if self._spin:
            self._charge(rtt)
        else:
            self._charged += rtt
        if h is not None and h.state is _FAILED:
            raise h.error

    # -- non-blocking ----------------------------------------------------
    def put(self, gptr, src, nbytes):
        """Start a put; ``src`` must stay unchanged until the handle is waited on."""
        self._live()
        seg, _ = self._region(gptr, nbytes)
        src = _byte_view(src, nbytes, False)
        target = gptr[1]
        self.puts += 1
        h = OpHandle(self._id, target, OpKind.PUT, segment=seg)
        seg.pending[self._id] = seg.pending.get(self._id, 0) + 1
        self._tp.send(Envelope(EnvelopeKind.PUT, self._id, target, gptr[0], gptr[2],
                               nbytes, src, h))
        return h

    def get(self, dst, gptr, nbytes):
        """Start a get; ``dst`` is filled once the handle has been waited on."""
        self._live()
        seg, _ = self._region(gptr, nbytes)
        dst = _byte_view(dst, nbytes, True)
        target = gptr[1]
        self.gets += 1
        h = OpHandle(self._id, target, OpKind.GET, dst, nbytes, segment=seg)
        seg.pending[self._id] = seg.pending.get(self._id, 0) + 1
        self._tp.send(Envelope(EnvelopeKind.GET_REQUEST, self._id, target, gptr[0],
                               gptr[2], nbytes, None, h))
        return h

    def _check_handle(self, h):
        if not isinstance(h, OpHandle):
            raise HandleError(f"not an operation handle: {h!r}")
        if h.origin != self._id:
            raise HandleError(f"handle {h!r} belongs to unit {h.origin}")
        if h.consumed:
            raise HandleError(f"handle {h!r} was already waited on")

    @staticmethod
    def _raise_failed(h):
        raise HandleError(f"{h!r} failed: {h.error}") from h.error

    def wait(self, h):
        """Wait for ``h``; flushes its target, completing earlier ops to it too."""
        self._live()
        self._check_handle(h)
        h.consumed = True
        self._flush(h.target)
        if h.state is OpState.FAILED:
            self._raise_failed(h)

    def waitall(self, handles):
        """Wait for all ``handles`` with one flush per distinct target."""
        self._live()
        handles = list(handles)
        if len({id(h) for h in handles}) != len(handles):
            raise HandleError("waitall got the same handle twice")
        for h in handles:
            self._check_handle(h)
        for h in handles:
            h.consumed = True
        for target in dict.fromkeys(h.target for h in handles):
            self._flush(target)
        for h in handles:
            if h.state is OpState.FAILED:
                self._raise_failed(h)

    # -- collectives -----------------------------------------------------
    def barrier(self, team=TEAM_ALL):
        """Block until every member of ``team`` has entered the barrier."""
        self._live()
        t = self._member_team(team)
        self.barriers += 1
        t.barrier.wait()

    def allreduce_max(self, value, team=TEAM_ALL):
        """Maximum of every member's ``value``; NaN contributions are rejected."""
        self._live()
        t = self._member_team(team)
        value = float(value)

        def finish(values):
            bad = sorted(u for u, v in values.items() if math.isnan(v))
            if bad:
                raise TeamError(f"allreduce_max got NaN from units {bad}")
            return max(values.values())

        return t.collective(self._id, "allreduce_max", value, finish)
