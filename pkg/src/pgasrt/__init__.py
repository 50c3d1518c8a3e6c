"""Locality-aware one-sided communication runtime with a 3D heat solver."""
from .errors import *  # noqa: F401,F403
from .gaspace import (
    TEAM_ALL,
    Exposure,
    GlobalPointer,
    RuntimeConfig,
    SegmentKind,
    gptr_incaddr,
    gptr_setunit,
    launch,
)
from .onesided import OpHandle, OpKind, OpState, Unit
from .transport import HopClass, LatencyModel, RoutingMode, Topology

__version__ = "0.1.0"
