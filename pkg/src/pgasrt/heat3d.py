"""Explicit 3D heat conduction on a checkerboard-decomposed grid.

Each unit owns a block of interior cells plus a one-cell halo, stored in
a collective global segment so neighbours can pull faces with blocking
gets.  The segment holds two copies of the block (double buffering); an
iteration reads buffer ``k % 2`` and writes the other one.

Per iteration the halo exchange runs six directional rounds, South,
North, West, East, Up, Down, each closed by a barrier over all units.
:func:`solve` performs the local update between the Down
round's gets and its barrier: neighbours may still be reading the current
buffer at that point, but the update only writes the other one, and the
barrier guarantees every block is updated before anybody pulls from it
in the next iteration.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .gaspace import TEAM_ALL, gptr_incaddr, gptr_setunit, launch
from .oracle import Field

__all__ = [
    "GridSpec",
    "SolverParams",
    "Direction",
    "CartTopology",
    "Decomposition",
    "decompose",
    "factor3",
    "split_extent",
    "SubDomain",
    "halo_exchange",
    "step",
    "solve",
    "run",
    "RunReport",
    "expected_gets",
]

CELL = 8


@dataclass(frozen=True)
class GridSpec:
    """Global grid: ``nx*ny*nz`` interior cells inside a Dirichlet boundary layer.

    With ``seed`` set the interior starts uniformly random in
    ``[0, initial_temp)``; otherwise it starts at ``initial_temp``.
    """

    nx: int
    ny: int
    nz: int
    dx: float = 1.0
    dy: float = 1.0
    dz: float = 1.0
    boundary_temp: float = 0.0
    initial_temp: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {v!r}")
        for name in ("dx", "dy", "dz"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    def initial_interior(self):
        if self.seed is None:
            return np.full(self.shape, float(self.initial_temp))
        rng = np.random.default_rng(self.seed)
        return rng.random(self.shape) * self.initial_temp

    def temperature_range(self):
        lo = min(self.boundary_temp, self.initial_temp)
        hi = max(self.boundary_temp, self.initial_temp)
        if self.seed is not None:
            lo, hi = min(lo, 0.0), max(hi, 0.0)
        return lo, hi


@dataclass(frozen=True)
class SolverParams:
    """Time stepping parameters.

    Diffusivity is ``max(alpha0 + alpha_slope * T, 0)`` evaluated at the
    cell's old temperature.  ``dt=None`` selects the largest stable step.
    The global maximum update is reduced every ``check_every``
    iterations; the run stops early when it falls below
    ``convergence_eps`` (disabled when ``None``).
    """

    iterations: int = 5000
    dt: float | None = None
    alpha0: float = 1.0
    alpha_slope: float = 0.0
    convergence_eps: float | None = None
    check_every: int = 100

    def alpha_max(self, grid):
        lo, hi = grid.temperature_range()
        return max(self.alpha0 + self.alpha_slope * lo, self.alpha0 + self.alpha_slope * hi, 0.0)

    def stability_limit(self, grid):
        amax = self.alpha_max(grid)
        s = 1.0 / grid.dx**2 + 1.0 / grid.dy**2 + 1.0 / grid.dz**2
        return math.inf if amax == 0 else 1.0 / (2.0 * amax * s)

    def checked_dt(self, grid):
        """The time step to use, after validating every parameter."""
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.check_every < 1:
            raise ConfigError("check_every must be >= 1")
        limit = self.stability_limit(grid)
        dt = self.dt
        if dt is None:
            if math.isinf(limit):
                raise ConfigError("zero diffusivity everywhere: give dt explicitly")
            return limit
        if not dt > 0:
            raise ConfigError(f"dt must be positive, got {dt}")
        if dt > limit * (1.0 + 1e-12):
            raise ConfigError(f"dt={dt} exceeds the explicit stability limit {limit}")
        return float(dt)


class Direction(enum.Enum):
    EAST = (0, +1)
    WEST = (0, -1)
    NORTH = (1, +1)
    SOUTH = (1, -1)
    UP = (2, +1)
    DOWN = (2, -1)

    @property
    def axis(self):
        return self.value[0]

    @property
    def sign(self):
        return self.value[1]


ROUNDS = (Direction.SOUTH, Direction.NORTH, Direction.WEST, Direction.EAST,
          Direction.UP, Direction.DOWN)


def factor3(n):
    """Near-cubic ``(px, py, pz)`` with ``px*py*pz == n``.

    Minimises ``max - min``; ties go to the larger ``pz``, then ``py``.
    """
    if n < 1:
        raise ConfigError(f"need at least one unit, got {n}")
    best = None
    for px in range(1, n + 1):
        if n % px:
            continue
        for py in range(1, n // px + 1):
            if (n // px) % py:
                continue
            pz = n // px // py
            key = (max(px, py, pz) - min(px, py, pz), -pz, -py)
            if best is None or key < best[0]:
                best = (key, (px, py, pz))
    return best[1]


def split_extent(n, parts):
    """Split ``n`` cells into ``parts`` blocks; lower blocks take the remainder."""
    base, rem = divmod(n, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


@dataclass(frozen=True)
class CartTopology:
    """Process grid; rank ``(cx*py + cy)*pz + cz``, no wraparound."""

    px: int
    py: int
    pz: int

    @property
    def size(self):
        return self.px * self.py * self.pz

    def coords(self, rank):
        cx, rest = divmod(rank, self.py * self.pz)
        cy, cz = divmod(rest, self.pz)
        return cx, cy, cz

    def rank(self, cx, cy, cz):
        return (cx * self.py + cy) * self.pz + cz

    def neighbor(self, rank, direction):
        c = list(self.coords(rank))
        c[direction.axis] += direction.sign
        dims = (self.px, self.py, self.pz)
        if not 0 <= c[direction.axis] < dims[direction.axis]:
            return None
        return self.rank(*c)


@dataclass(frozen=True)
class Decomposition:
    cart: CartTopology
    xs: tuple
    ys: tuple
    zs: tuple

    def extents(self, rank):
        cx, cy, cz = self.cart.coords(rank)
        return self.xs[cx], self.ys[cy], self.zs[cz]

    def origin(self, rank):
        """Global interior index of the rank's first interior cell."""
        cx, cy, cz = self.cart.coords(rank)
        return sum(self.xs[:cx]), sum(self.ys[:cy]), sum(self.zs[:cz])

    def block_bytes(self):
        """Bytes of one padded block big enough for every rank."""
        return (max(self.xs) + 2) * (max(self.ys) + 2) * (max(self.zs) + 2) * CELL


def decompose(grid, num_units):
    px, py, pz = factor3(num_units)
    for p, n, name in ((px, grid.nx, "x"), (py, grid.ny, "y"), (pz, grid.nz, "z")):
        if p > n:
            raise ConfigError(
                f"{num_units} units give {p} blocks along {name} but the grid has only {n} cells"
            )
    return Decomposition(
        CartTopology(px, py, pz),
        tuple(split_extent(grid.nx, px)),
        tuple(split_extent(grid.ny, py)),
        tuple(split_extent(grid.nz, pz)),
    )


def expected_gets(decomp, rank):
    """Gets one halo exchange issues on ``rank``."""
    xc, yc, _ = decomp.extents(rank)
    per_round = {
        Direction.SOUTH: xc, Direction.NORTH: xc,
        Direction.WEST: yc, Direction.EAST: yc,
        Direction.UP: xc * yc, Direction.DOWN: xc * yc,
    }
    return sum(n for d, n in per_round.items() if decomp.cart.neighbor(rank, d) is not None)


def _flat(shape, x, y, z):
    return (x * shape[1] + y) * shape[2] + z


class SubDomain:
    """A unit's block, its two buffers and its precomputed get plans."""

    def __init__(self, unit, grid, decomp, gptr):
        self.unit = unit
        self.grid = grid
        self.decomp = decomp
        self.rank = rank = unit.myid()
        self.xcell, self.ycell, self.zcell = xc, yc, zc = decomp.extents(rank)
        self.origin = decomp.origin(rank)
        self.shape = shape = (xc + 2, yc + 2, zc + 2)
        self.block_bytes = decomp.block_bytes()
        ncells = shape[0] * shape[1] * shape[2]
        raw = unit.local(gptr_setunit(gptr, rank))
        self.buffers = []
        self._views = []
        for b in range(2):
            chunk = raw[b * self.block_bytes:b * self.block_bytes + ncells * CELL]
            self.buffers.append(chunk.view(np.float64).reshape(shape))
            self._views.append(memoryview(chunk))
        self.current = 0
        cart = decomp.cart
        self.neighbors = {d: cart.neighbor(rank, d) for d in Direction}
        self.plans = [self._plan(gptr, b) for b in range(2)]

    def _plan(self, gptr, b):
        """Per round: list of ``(dst view, source pointer, nbytes)``."""
        xc, yc, zc = self.xcell, self.ycell, self.zcell
        shape = self.shape
        mine = self._views[b]
        base = gptr_incaddr(gptr, b * self.block_bytes)
        plan = []
        for d in ROUNDS:
            nbr = self.neighbors[d]
            gets = []
            if nbr is not None:
                nshape = tuple(e + 2 for e in self.decomp.extents(nbr))
                g = gptr_setunit(base, nbr)
                if d in (Direction.SOUTH, Direction.NORTH):
                    my_y = 0 if d is Direction.SOUTH else yc + 1
                    src_y = nshape[1] - 2 if d is Direction.SOUTH else 1
                    n = zc * CELL
                    for x in range(1, xc + 1):
                        dst = _flat(shape, x, my_y, 1) * CELL
                        src = _flat(nshape, x, src_y, 1) * CELL
                        gets.append((mine[dst:dst + n], gptr_incaddr(g, src), n))
                elif d in (Direction.WEST, Direction.EAST):
                    my_x = 0 if d is Direction.WEST else xc + 1
                    src_x = nshape[0] - 2 if d is Direction.WEST else 1
                    n = zc * CELL
                    for y in range(1, yc + 1):
                        dst = _flat(shape, my_x, y, 1) * CELL
                        src = _flat(nshape, src_x, y, 1) * CELL
                        gets.append((mine[dst:dst + n], gptr_incaddr(g, src), n))
                else:
                    my_z = zc + 1 if d is Direction.UP else 0
                    src_z = 1 if d is Direction.UP else nshape[2] - 2
                    for x in range(1, xc + 1):
                        for y in range(1, yc + 1):
                            dst = _flat(shape, x, y, my_z) * CELL
                            src = _flat(nshape, x, y, src_z) * CELL
                            gets.append((mine[dst:dst + CELL], gptr_incaddr(g, src), CELL))
            plan.append(gets)
        return plan

    @property
    def storage(self):
        return self.buffers[self.current]

    def interior(self):
        return self.storage[1:-1, 1:-1, 1:-1]

    def fill(self, initial):
        """Load this block's part of the global ``initial`` interior."""
        ox, oy, oz = self.origin
        for buf in self.buffers:
            buf[...] = self.grid.boundary_temp
            buf[1:-1, 1:-1, 1:-1] = initial[ox:ox + self.xcell, oy:oy + self.ycell,
                                            oz:oz + self.zcell]
        self.current = 0

    def fill_boundary(self, buf):
        """Reset the halo faces that lie on the global boundary."""
        bt = self.grid.boundary_temp
        nb = self.neighbors
        if nb[Direction.WEST] is None:
            buf[0, :, :] = bt
        if nb[Direction.EAST] is None:
            buf[-1, :, :] = bt
        if nb[Direction.SOUTH] is None:
            buf[:, 0, :] = bt
        if nb[Direction.NORTH] is None:
            buf[:, -1, :] = bt
        if nb[Direction.DOWN] is None:
            buf[:, :, 0] = bt
        if nb[Direction.UP] is None:
            buf[:, :, -1] = bt


def halo_exchange(sub, close=True):
    """Fill ``sub``'s halos from its neighbours' current buffers.

    Runs the six rounds, each followed by a barrier on TEAM_ALL.  With
    ``close=False`` the Down round's barrier is left to the caller.
    Returns ``(get_seconds, barrier_seconds)`` on the unit clock.
    """
    unit = sub.unit
    get = unit.get_blocking
    clock = unit.clock
    barrier = unit.barrier
    plan = sub.plans[sub.current]
    t_get = t_sync = 0.0
    last = len(plan) - 1
    for i, gets in enumerate(plan):
        t0 = clock()
        for dst, g, n in gets:
            get(dst, g, n)
        t1 = clock()
        t_get += t1 - t0
        if close or i != last:
            barrier(TEAM_ALL)
            t_sync += clock() - t1
    return t_get, t_sync


def step(sub, params, dt=None, want_delta=False):
    """Advance ``sub`` one explicit step into its other buffer, then swap.

    Returns the largest ``|T' - T|`` of the block when ``want_delta``.
    """
    if dt is None:
        dt = params.checked_dt(sub.grid)
    T = sub.buffers[sub.current]
    U = sub.buffers[1 - sub.current]
    g = sub.grid
    C = T[1:-1, 1:-1, 1:-1]
    two_c = 2.0 * C
    lap = ((T[2:, 1:-1, 1:-1] - two_c) + T[:-2, 1:-1, 1:-1]) / (g.dx * g.dx)
    lap += ((T[1:-1, 2:, 1:-1] - two_c) + T[1:-1, :-2, 1:-1]) / (g.dy * g.dy)
    lap += ((T[1:-1, 1:-1, 2:] - two_c) + T[1:-1, 1:-1, :-2]) / (g.dz * g.dz)
    alpha = params.alpha0 + params.alpha_slope * C
    np.maximum(alpha, 0.0, out=alpha)
    inner = U[1:-1, 1:-1, 1:-1]
    np.multiply(dt, alpha, out=alpha)
    np.multiply(alpha, lap, out=lap)
    np.add(C, lap, out=inner)
    sub.fill_boundary(U)
    delta = 0.0
    if want_delta and inner.size:
        delta = float(np.max(np.abs(inner - C)))
    sub.current = 1 - sub.current
    return delta


@dataclass
class UnitReport:
    rank: int
    compute_seconds: float = 0.0
    get_seconds: float = 0.0
    sync_seconds: float = 0.0
    iterations_done: int = 0
    final_max_delta: float = 0.0
    gets: int = 0
    barriers: int = 0
    get_counts: list = field(default_factory=list)
    barrier_counts: list = field(default_factory=list)
    interior: np.ndarray | None = None
    origin: tuple = (0, 0, 0)

    @property
    def exchange_seconds(self):
        return self.get_seconds + self.sync_seconds


def solve(unit, grid, params, initial=None, observer=None, trace_counts=False):
    """Per-unit entry procedure of the heat solver; collective over TEAM_ALL.

    ``initial`` is the global interior array (generated from ``grid`` when
    omitted).  ``observer(iteration, sub)`` runs after every update.
    With ``trace_counts`` the per-iteration get and barrier counts of the
    unit are recorded.
    """
    dt = params.checked_dt(grid)
    decomp = decompose(grid, unit.size())
    if initial is None:
        initial = grid.initial_interior()
    gptr = unit.team_memalloc_aligned(TEAM_ALL, 2 * decomp.block_bytes())
    sub = SubDomain(unit, grid, decomp, gptr)
    sub.fill(initial)
    unit.barrier(TEAM_ALL)
    report = UnitReport(rank=sub.rank, origin=sub.origin)
    gets0, barriers0 = unit.gets, unit.barriers
    clock = unit.clock
    delta = 0.0
    for it in range(params.iterations):
        g0, b0 = unit.gets, unit.barriers
        t_get, t_sync = halo_exchange(sub, close=False)
        done = it + 1
        cadence = done % params.check_every == 0
        t0 = clock()
        local = step(sub, params, dt, want_delta=cadence or done == params.iterations)
        t1 = clock()
        unit.barrier(TEAM_ALL)
        t_sync += clock() - t1
        report.compute_seconds += t1 - t0
        report.get_seconds += t_get
        report.sync_seconds += t_sync
        report.iterations_done = done
        if trace_counts:
            report.get_counts.append(unit.gets - g0)
            report.barrier_counts.append(unit.barriers - b0)
        if observer is not None:
            observer(it, sub)
        if cadence or done == params.iterations:
            delta = unit.allreduce_max(local)
            if cadence and params.convergence_eps is not None and delta < params.convergence_eps:
                break
    report.final_max_delta = delta
    report.gets = unit.gets - gets0
    report.barriers = unit.barriers - barriers0
    report.interior = sub.interior().copy()
    unit.barrier(TEAM_ALL)
    unit.team_memfree(TEAM_ALL, gptr)
    return report


@dataclass
class RunReport:
    """Timing breakdown of one run, averaged over units, and the final field.

    ``exchange_seconds`` is the whole halo exchange (gets and barriers);
    ``sync_seconds`` its barrier part; ``pure_exchange_seconds`` the rest.
    """

    compute_seconds: float
    exchange_seconds: float
    sync_seconds: float
    iterations_done: int
    final_max_delta: float
    field: Field
    units: list
    messages: int
    charged_latency: float

    @property
    def pure_exchange_seconds(self):
        return self.exchange_seconds - self.sync_seconds

    @property
    def total_gets(self):
        return sum(u.gets for u in self.units)


def run(grid, params, config, observer=None, trace_counts=False):
    """Launch ``config.num_units`` units on the solver and gather the result."""
    params.checked_dt(grid)
    decompose(grid, config.num_units)
    initial = grid.initial_interior()
    result = launch(config, solve, grid, params, initial, observer, trace_counts)
    units = sorted(result.values, key=lambda r: r.rank)
    arr = np.full((grid.nx + 2, grid.ny + 2, grid.nz + 2), float(grid.boundary_temp))
    for r in units:
        ox, oy, oz = r.origin
        xc, yc, zc = r.interior.shape
        arr[1 + ox:1 + ox + xc, 1 + oy:1 + oy + yc, 1 + oz:1 + oz + zc] = r.interior
    n = len(units)
    return RunReport(
        compute_seconds=sum(r.compute_seconds for r in units) / n,
        exchange_seconds=sum(r.exchange_seconds for r in units) / n,
        sync_seconds=sum(r.sync_seconds for r in units) / n,
        iterations_done=units[0].iterations_done,
        final_max_delta=units[0].final_max_delta,
        field=Field(grid.nx, grid.ny, grid.nz, arr, grid.dx, grid.dy, grid.dz),
        units=units,
        messages=result.stats.messages,
        charged_latency=result.stats.charged_seconds,
    )
