import itertools
import random
import threading

import pytest
from hypothesis import given, settings, strategies as st

from pgasrt import BoundsError, ConfigError, RoutingError, SegmentError
from pgasrt.transport import (
    Envelope,
    EnvelopeKind,
    HopClass,
    LatencyModel,
    RoutingMode,
    Topology,
    Transport,
)


def reference_class(topo, a, b):
    na, nb = a // topo.node_size, b // topo.node_size
    if na == nb:
        return HopClass.INTRA_NODE
    ca, cb = na // topo.blades_per_chassis, nb // topo.blades_per_chassis
    if ca == cb:
        return HopClass.RANK1
    if ca // topo.chassis_per_group == cb // topo.chassis_per_group:
        return HopClass.RANK2
    return HopClass.RANK3


class Memory:
    """Per-unit bytearrays standing in for one segment."""

    def __init__(self, num_units, size=256):
        self.regions = {u: bytearray(size) for u in range(num_units)}
        self.freed = False

    def resolve(self, segment_id, unit, offset, nbytes):
        if self.freed:
            raise SegmentError("freed")
        region = self.regions[unit]
        if offset + nbytes > len(region):
            raise BoundsError("out of range")
        return memoryview(region)[offset:offset + nbytes]


def make(num_units=8, node_size=2, mode=RoutingMode.OBLIVIOUS, latency=None, **kw):
    topo = Topology(num_units, node_size, 2, 2)
    mem = Memory(num_units)
    tp = Transport(topo, latency or LatencyModel(), mode, mem.resolve, **kw)
    return tp, mem


# -- topology ---------------------------------------------------------------

def test_classify_examples():
    assert Topology(32, 16).classify(0, 15) is HopClass.INTRA_NODE
    assert Topology(32, 16, 16).classify(0, 16) is HopClass.RANK1
    topo = Topology(8, 1, 2, 2)
    # unit 3 is on chassis 1 of group 0; unit 4 opens group 1
    assert topo.classify(0, 3) is HopClass.RANK2
    assert topo.classify(0, 4) is HopClass.RANK3


def test_classify_bruteforce_small():
    topo = Topology(8, 1, 2, 2)
    for a, b in itertools.product(range(8), repeat=2):
        assert topo.classify(a, b) is reference_class(topo, a, b)
    assert {topo.classify(0, b) for b in range(8)} == set(HopClass)


def test_placement_helpers():
    topo = Topology(64, 8, 2, 2)
    assert topo.node_of(17) == 2
    assert topo.chassis_of(3) == 1
    assert topo.group_of(3) == 1
    assert topo.num_nodes == 8


def test_classify_rejects_unknown_units():
    with pytest.raises(ValueError):
        Topology(4, 2).classify(0, 4)


@pytest.mark.parametrize("args", [(0, 1), (4, 0), (4, 1, 0), (4, 1, 1, 0)])
def test_topology_validation(args):
    with pytest.raises(ConfigError):
        Topology(*args)


topologies = st.builds(
    Topology,
    num_units=st.integers(1, 256),
    node_size=st.integers(1, 32),
    blades_per_chassis=st.integers(1, 8),
    chassis_per_group=st.integers(1, 8),
)


@given(topologies, st.data())
def test_classify_symmetric(topo, data):
    a = data.draw(st.integers(0, topo.num_units - 1))
    b = data.draw(st.integers(0, topo.num_units - 1))
    assert topo.classify(a, b) == topo.classify(b, a)


@given(topologies, st.data(), st.sampled_from(["node_size", "blades_per_chassis",
                                                "chassis_per_group"]),
       st.integers(2, 4))
def test_widening_never_raises_class(topo, data, param, factor):
    # widening by an integer multiple merges whole nodes/chassis/groups
    a = data.draw(st.integers(0, topo.num_units - 1))
    b = data.draw(st.integers(0, topo.num_units - 1))
    kw = dict(num_units=topo.num_units, node_size=topo.node_size,
              blades_per_chassis=topo.blades_per_chassis,
              chassis_per_group=topo.chassis_per_group)
    kw[param] *= factor
    assert Topology(**kw).classify(a, b) <= topo.classify(a, b)


# -- latency model ----------------------------------------------------------------

def test_latency_defaults_ordered():
    lat = LatencyModel()
    assert list(lat.base) == sorted(lat.base)
    assert lat.cost(HopClass.RANK1, 100) == pytest.approx(2e-6 + 100 * 0.5e-9)


@pytest.mark.parametrize("base,invbw", [
    ((1, 2, 3), (0, 0, 0, 0)),
    ((1, 2, 3, 4), (0, -1, 0, 0)),
    ((4, 3, 2, 1), (0, 0, 0, 0)),
])
def test_latency_validation(base, invbw):
    with pytest.raises(ConfigError):
        LatencyModel(base, invbw)


def test_routing_mode_parse():
    assert RoutingMode.parse("OBLIVIOUS") is RoutingMode.OBLIVIOUS
    with pytest.raises(ConfigError):
        RoutingMode.parse("fast")


# -- direct copy ------------------------------------------------------------------

def test_direct_copy_pattern_and_zero():
    tp, _ = make(mode=RoutingMode.LOCALITY_AWARE)
    src = bytes(range(256))
    dst = bytearray(256)
    tp.direct_copy(0, 1, memoryview(dst), memoryview(src), 0)
    assert dst == bytearray(256)
    tp.direct_copy(0, 1, memoryview(dst), memoryview(src), 256)
    assert dst == src
    assert tp.messages == 0
    assert tp.stats().charged_seconds == 0


def test_direct_copy_refusals():
    tp, _ = make(mode=RoutingMode.LOCALITY_AWARE)
    with pytest.raises(RoutingError):
        tp.direct_copy(0, 2, bytearray(4), bytes(4), 4)
    with pytest.raises(BoundsError):
        tp.direct_copy(0, 1, memoryview(bytearray(2)), bytes(4), 4)
    tp, _ = make(mode=RoutingMode.OBLIVIOUS)
    with pytest.raises(RoutingError):
        tp.direct_copy(0, 1, bytearray(4), bytes(4), 4)


def test_use_direct():
    tp, _ = make(mode=RoutingMode.LOCALITY_AWARE)
    assert tp.use_direct(0, 1) and not tp.use_direct(0, 2)
    tp, _ = make(mode=RoutingMode.OBLIVIOUS)
    assert not tp.use_direct(0, 1)


# -- message path ----------------------------------------------------------------------

def put(tp, o, t, off, data):
    return tp.send(Envelope(EnvelopeKind.PUT, o, t, 1, off, len(data), data))


def test_put_cost_rank1():
    tp, mem = make(mode=RoutingMode.LOCALITY_AWARE)
    lat = tp.latency
    n = 100
    put(tp, 0, 2, 0, bytes([7]) * n)   # nodes 0 and 1, same chassis
    rtt = tp.flush(0, 2)
    assert tp.classify(0, 2) is HopClass.RANK1
    assert rtt >= lat.base[1] + n * lat.invbw[1]
    assert rtt == pytest.approx(lat.base[1] + n * lat.invbw[1] + lat.base[1])
    assert mem.regions[2][:n] == bytes([7]) * n
    assert tp.stats().by_kind == {"PUT": 1, "GET_REQUEST": 0, "GET_REPLY": 0, "ACK": 1}


def test_charged_latency_exact_per_message():
    tp, _ = make()
    lat = tp.latency
    expected = 0.0
    rng = random.Random(3)
    for _ in range(50):
        o, t = rng.randrange(8), rng.randrange(8)
        n = rng.randrange(0, 64)
        hop = tp.classify(o, t)
        if rng.random() < 0.5:
            put(tp, o, t, 0, bytes(n))
            expected += lat.cost(hop, n) + lat.base[hop]
        else:
            tp.send(Envelope(EnvelopeKind.GET_REQUEST, o, t, 1, 0, n))
            expected += lat.base[hop] + lat.cost(hop, n)
        tp.flush(o, t)
    assert tp.stats().charged_seconds == pytest.approx(expected, rel=1e-12)
    assert tp.messages == 100


def test_two_puts_applied_in_send_order():
    tp, mem = make(record_deliveries=True)
    put(tp, 0, 5, 0, b"first---")
    put(tp, 0, 5, 0, b"second--")
    tp.flush(0, 5)
    assert mem.regions[5][:8] == b"second--"
    seqs = [d[3] for d in tp.deliveries if d[:2] == (0, 5)]
    assert seqs == sorted(seqs) and len(seqs) == 2


def test_oblivious_same_node_charged_intra():
    tp, _ = make(mode=RoutingMode.OBLIVIOUS)
    put(tp, 0, 1, 0, bytes(10))
    rtt = tp.flush(0, 1)
    lat = tp.latency
    assert rtt == pytest.approx(lat.cost(HopClass.INTRA_NODE, 10) + lat.base[0])
    assert tp.stats().by_hop["INTRA_NODE"] == 2


def test_flush_without_outstanding_ops():
    tp, _ = make()
    assert tp.flush(0, 3) == 0.0
    assert tp.messages == 0


def test_flush_is_per_target():
    tp, mem = make()
    put(tp, 0, 2, 0, b"A" * 4)
    put(tp, 0, 4, 0, b"B" * 4)
    tp.flush(0, 2)
    assert mem.regions[2][:4] == b"AAAA"
    assert tp.outstanding(0, 4) == 1
    assert mem.regions[4][:4] == bytes(4)
    tp.flush(0, 4)
    assert mem.regions[4][:4] == b"BBBB"
    assert tp.outstanding(0) == 0


def test_get_round_trip():
    tp, mem = make()
    mem.regions[3][8:16] = b"abcdefgh"

    class H:
        def _settle(self, reply):
            self.payload = bytes(reply.payload)
            self.error = reply.error

    h = H()
    tp.send(Envelope(EnvelopeKind.GET_REQUEST, 6, 3, 1, 8, 8, None, h))
    tp.flush(6, 3)
    assert h.payload == b"abcdefgh" and h.error is None


def test_error_reply_surfaces_at_flush():
    tp, mem = make()
    put(tp, 0, 3, 0, b"x")
    mem.freed = True
    with pytest.raises(SegmentError):
        tp.flush(0, 3)
    assert tp.outstanding(0) == 0


def test_drain_settles_everything():
    tp, mem = make()
    put(tp, 0, 3, 0, b"z")
    put(tp, 1, 6, 0, b"y")
    tp.drain()
    assert mem.regions[3][0:1] == b"z" and mem.regions[6][0:1] == b"y"
    assert tp.outstanding(0) == 0 and tp.outstanding(1) == 0


def test_fifo_stress_concurrent_origins():
    """Sequence-stamped payloads from many threads arrive in send order."""
    num_units = 8
    tp, mem = make(num_units=num_units, node_size=2, record_deliveries=True)
    per_origin = 300
    seen = {}

    def origin(o):
        rng = random.Random(o)
        for i in range(per_origin):
            t = rng.randrange(num_units)
            stamp = i.to_bytes(4, "little") + o.to_bytes(4, "little")
            put(tp, o, t, 8 * o, stamp)
            if rng.random() < 0.3:
                tp.flush(o, t)
        for t in range(num_units):
            tp.flush(o, t)

    threads = [threading.Thread(target=origin, args=(o,)) for o in range(num_units)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    for o, t, kind, seq in tp.deliveries:
        key = (o, t)
        assert seq > seen.get(key, -1), f"out of order delivery {key}"
        seen[key] = seq
    assert len(tp.deliveries) == num_units * per_origin
    # the last stamp written by each origin is its final value at each target
    for t in range(num_units):
        for o in range(num_units):
            raw = bytes(mem.regions[t][8 * o:8 * o + 8])
            if raw != bytes(8):
                assert int.from_bytes(raw[4:], "little") == o


def test_sequence_numbers_strictly_increase_per_pair():
    tp, _ = make()
    seqs = [put(tp, 2, 7, 0, b"a") for _ in range(5)]
    assert seqs == sorted(set(seqs))
    other = put(tp, 3, 7, 0, b"a")
    assert other == 0
    tp.drain()


@settings(deadline=None, max_examples=30)
@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7), st.integers(0, 32)),
                max_size=40))
def test_message_count_is_two_per_op(ops):
    tp, _ = make()
    for o, t, n in ops:
        put(tp, o, t, 0, bytes(n))
    tp.drain()
    assert tp.messages == 2 * len(ops)
