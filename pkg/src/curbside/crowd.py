"""Potential-field pedestrian simulation on a BEV grid.

Each tick rebuilds discomfort and speed fields, turns them into a unit cost
field, solves an arrival-cost potential toward every walker's destination and
moves walkers down its gradient.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .eikonal import GradientUnavailableError, sample_gradient, solve_eikonal
from .geometry import BevGrid


class CrowdError(Exception):
    pass


class EmptyPoolError(CrowdError):
    pass


class StuckError(CrowdError):
    pass


class PedState(str, enum.Enum):
    WALKING = "walking"
    WAITING = "waiting"
    ARRIVED = "arrived"


@dataclass(frozen=True)
class CrowdParams:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 2.0
    dt: float = 0.1
    arrival_eps: float = 0.5
    spawn_rate: float = 0.3
    v_max_ped: float = 1.4
    v_min: float = 0.2
    r_influence: float = 2.0
    w_edge: float = 0.5
    w_obs: float = 1.0
    w_ped: float = 1.0
    k_d: float = 0.8
    r_density: float = 1.0
    min_pair_distance: float = 5.0
    max_stuck_steps: int = 10
    keep_right_deg: float = 3.0   # breaks head-on symmetry in counterflow

    def __post_init__(self):
        if not self.dt >= 0:
            raise ValueError("dt must be non-negative")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("alpha, beta, gamma must be non-negative")
        if not 0 < self.v_min <= self.v_max_ped:
            raise ValueError("need 0 < v_min <= v_max_ped")


@dataclass
class Pedestrian:
    id: int
    position: np.ndarray
    origin: np.ndarray
    destination: np.ndarray
    preferred_speed: float = 1.4
    state: PedState = PedState.WALKING
    stalled: int = 0


@dataclass(frozen=True)
class TraceRow:
    tick: int
    id: int
    kind: str
    x: float
    y: float
    state: str
    lane: Optional[int] = None
    s_arc: Optional[float] = None
    speed: Optional[float] = None


@dataclass(frozen=True)
class ODPool:
    entries: np.ndarray   # (N, 2) pool cells
    pairs: np.ndarray     # (M, 2) indices into entries: origin, destination

    def __len__(self):
        return len(self.pairs)


# ---------- origin / destination pool ----------

def build_od_pool(bev: BevGrid, edge_cells=None, min_pair_distance: float = 5.0,
                  camera_xy=(0.0, 0.0)) -> ODPool:
    """Edge cells plus the farthest cell of every region; pairs stay inside one region."""
    edge = bev.edge if edge_cells is None else np.asarray(edge_cells, dtype=bool)
    if edge is None:
        edge = np.zeros(bev.shape, bool)
    usable = bev.walkable.copy()
    if bev.crosswalk is not None:
        usable &= ~bev.crosswalk
    regions = bev.regions()
    centers = bev.cell_centers()
    dist_cam = np.linalg.norm(centers - np.asarray(camera_xy, dtype=float), axis=-1)
    pool = edge & usable
    for r in range(regions.max() + 1):
        cand = (regions == r) & usable
        if not cand.any():
            continue
        d = np.where(cand, dist_cam, -np.inf).ravel()
        far = int(np.flatnonzero(d == d.max())[0])   # smallest index among ties
        pool.flat[far] = True
    entries = np.argwhere(pool)
    if len(entries) < 2:
        raise EmptyPoolError("fewer than two origin/destination cells")
    reg = regions[entries[:, 0], entries[:, 1]]
    pts = centers[entries[:, 0], entries[:, 1]]
    sep = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    ok = (reg[:, None] == reg[None, :]) & (sep >= max(min_pair_distance, 1e-9))
    pairs = np.argwhere(ok)
    if len(pairs) == 0:
        raise EmptyPoolError("no origin/destination pair shares a walkable region")
    return ODPool(entries, pairs)


# ---------- fields ----------

def kernel(r, r_influence: float):
    return np.maximum(0.0, 1.0 - np.asarray(r, dtype=float) / r_influence)


def static_discomfort(bev: BevGrid, params: CrowdParams) -> np.ndarray:
    """Edge and obstacle terms, which depend only on the map."""
    pad = np.pad(bev.walkable, 1, constant_values=False)
    d_edge = ndimage.distance_transform_edt(pad)[1:-1, 1:-1] * bev.cell_size
    g = params.w_edge * kernel(d_edge, params.r_influence)
    if bev.obstacle.any():
        d_obs = ndimage.distance_transform_edt(~bev.obstacle) * bev.cell_size
        g = g + params.w_obs * kernel(d_obs, params.r_influence)
    return g


def _splat(bev: BevGrid, positions, radius: float, fn) -> np.ndarray:
    """Sum fn(distance) over cells within ``radius`` of each position."""
    out = np.zeros(bev.shape)
    if len(positions) == 0:
        return out
    ny, nx = bev.shape
    cs = bev.cell_size
    reach = int(math.ceil(radius / cs)) + 1
    for p in np.asarray(positions, dtype=float).reshape(-1, 2):
        ci, cj = bev.cell_of(p)
        i0, i1 = max(ci - reach, 0), min(ci + reach + 1, ny)
        j0, j1 = max(cj - reach, 0), min(cj + reach + 1, nx)
        if i0 >= i1 or j0 >= j1:
            continue
        jj, ii = np.meshgrid(np.arange(j0, j1), np.arange(i0, i1))
        d = np.hypot(bev.origin[0] + jj * cs - p[0], bev.origin[1] + ii * cs - p[1])
        out[i0:i1, j0:j1] += np.where(d <= radius, fn(d), 0.0)
    return out


def pedestrian_discomfort(bev: BevGrid, positions, params: CrowdParams) -> np.ndarray:
    return params.w_ped * _splat(bev, positions, params.r_influence,
                                 lambda d: kernel(d, params.r_influence))


def compute_discomfort(bev: BevGrid, positions, gated=None, params: CrowdParams = CrowdParams(),
                       static: np.ndarray | None = None) -> np.ndarray:
    """Discomfort G from edges, obstacles and the given (other) pedestrians; gated cells get +inf."""
    g = (static_discomfort(bev, params) if static is None else static) + \
        pedestrian_discomfort(bev, positions, params)
    if gated is not None:
        g = np.where(gated, np.inf, g)
    return g


def pedestrian_density(bev: BevGrid, positions, r_density: float) -> np.ndarray:
    """Pedestrians per square meter within ``r_density`` of every cell center."""
    counts = _splat(bev, positions, r_density, lambda d: np.ones_like(d))
    return counts / (math.pi * r_density ** 2)


def compute_speed(density, params: CrowdParams = CrowdParams(), v_max: float | None = None) -> np.ndarray:
    v_max = params.v_max_ped if v_max is None else v_max
    v = v_max / (1.0 + params.k_d * np.asarray(density, dtype=float))
    return np.clip(v, params.v_min, v_max)


def unit_cost(speed, discomfort, params: CrowdParams = CrowdParams(), walkable=None) -> np.ndarray:
    """C = (alpha*V + beta + gamma*G) / V on walkable cells, +inf elsewhere."""
    v = np.asarray(speed, dtype=float)
    g = np.asarray(discomfort, dtype=float)
    with np.errstate(invalid="ignore"):
        c = (params.alpha * v + params.beta + params.gamma * g) / v
    c = np.where(np.isfinite(g), c, np.inf)
    if walkable is not None:
        c = np.where(walkable, c, np.inf)
    return c


# ---------- stepping ----------

@dataclass
class WalkPlan:
    """Per-pedestrian fields for one tick."""

    phi: np.ndarray
    speed: np.ndarray
    allowed: np.ndarray       # cells the walker may end the step in
    hold: bool = False        # reached its waiting spot
    cost: np.ndarray | None = None
    discomfort: np.ndarray | None = None


def nearest_allowed(bev: BevGrid, point, allowed: np.ndarray) -> np.ndarray:
    """Center of the allowed cell nearest ``point``; ties go to the smallest cell index."""
    ny, nx = allowed.shape
    ci, cj = bev.cell_of(point)
    for reach in (3, 8, max(ny, nx)):
        i0, i1 = max(ci - reach, 0), min(ci + reach + 1, ny)
        j0, j1 = max(cj - reach, 0), min(cj + reach + 1, nx)
        sub = allowed[i0:i1, j0:j1]
        if not sub.any():
            continue
        ii, jj = np.nonzero(sub)
        ii, jj = ii + i0, jj + j0
        d = np.hypot(bev.origin[0] + jj * bev.cell_size - point[0],
                     bev.origin[1] + ii * bev.cell_size - point[1])
        best = np.flatnonzero(d == d.min())
        k = best[np.argmin(ii[best] * nx + jj[best])]
        if reach >= max(ny, nx) or d[k] <= (reach - 1) * bev.cell_size:
            return bev.center((ii[k], jj[k]))
    raise CrowdError("no allowed cell to project onto")


def step_crowd(pedestrians, plans: dict, bev: BevGrid, params: CrowdParams, tick: int = 0):
    """Advance every pedestrian one tick along -grad(phi); returns (active, rows)."""
    rows, active = [], []
    for ped in sorted(pedestrians, key=lambda p: p.id):
        if np.linalg.norm(ped.position - ped.destination) < params.arrival_eps:
            ped.state = PedState.ARRIVED
        else:
            _advance(ped, plans[ped.id], bev, params)
            if np.linalg.norm(ped.position - ped.destination) < params.arrival_eps:
                ped.state = PedState.ARRIVED
        rows.append(TraceRow(tick, ped.id, "ped", float(ped.position[0]), float(ped.position[1]),
                             ped.state.value))
        if ped.state is not PedState.ARRIVED:
            active.append(ped)
    return active, rows


def _advance(ped: Pedestrian, plan: WalkPlan, bev: BevGrid, params: CrowdParams) -> None:
    if plan.hold or params.dt == 0:
        ped.state = PedState.WAITING if plan.hold else ped.state
        return
    try:
        grad = sample_gradient(plan.phi, ped.position, bev.cell_size, bev.origin)
        norm = float(np.hypot(grad[0], grad[1]))
    except GradientUnavailableError:
        norm = 0.0
    if norm == 0.0 or not math.isfinite(norm):
        ped.stalled += 1
        if ped.stalled >= params.max_stuck_steps:
            raise StuckError(f"pedestrian {ped.id} has had no usable gradient for {ped.stalled} steps")
        return
    ped.stalled = 0
    cell = bev.cell_of(ped.position)
    v = float(plan.speed[cell]) if bev.contains(cell) else params.v_min
    heading = -grad / norm
    if params.keep_right_deg:
        t = math.radians(params.keep_right_deg)
        ct, st = math.cos(t), math.sin(t)
        heading = np.array([ct * heading[0] + st * heading[1], -st * heading[0] + ct * heading[1]])
    tentative = ped.position + v * params.dt * heading
    c = bev.cell_of(tentative)
    if not (bev.contains(c) and plan.allowed[c]):
        tentative = nearest_allowed(bev, tentative, plan.allowed)
    ped.position = tentative


# ---------- spawning ----------

def spawn(pool: ODPool, occupied_positions, bev: BevGrid, rng: np.random.Generator, next_id: int,
          params: CrowdParams = CrowdParams(), blocked=None) -> Optional[Pedestrian]:
    """Pick one pair uniformly; place a walker if its origin cell and the 8 neighbors are free."""
    k = int(rng.integers(len(pool.pairs)))
    o_idx, d_idx = pool.pairs[k]
    oi, oj = pool.entries[o_idx]
    if blocked is not None and blocked[oi, oj]:
        return None
    for p in occupied_positions:
        pi, pj = bev.cell_of(p)
        if abs(pi - oi) <= 1 and abs(pj - oj) <= 1:
            return None
    origin = bev.center((oi, oj))
    dest = bev.center(tuple(pool.entries[d_idx]))
    return Pedestrian(next_id, origin.copy(), origin, dest, params.v_max_ped)


# ---------- simulation loop ----------

class CrowdSim:
    """Stateful tick loop; ``gates(time_s)`` returns the gated-cell mask (or None)."""

    def __init__(self, bev: BevGrid, params: CrowdParams = CrowdParams(), rng=None,
                 pool: ODPool | None = None, gates: Callable[[float], Optional[np.ndarray]] | None = None):
        if params.arrival_eps < bev.cell_size:
            raise ValueError("arrival_eps must be at least one cell")
        self.bev = bev
        self.params = params
        self.rng = np.random.default_rng(0) if rng is None else rng
        self.pool = pool if pool is not None else build_od_pool(bev, min_pair_distance=params.min_pair_distance)
        self.gates = gates
        self.static = static_discomfort(bev, params)
        self.regions = bev.regions()
        self.pedestrians: list[Pedestrian] = []
        self.next_id = 0
        self.tick = 0
        self.last_fields: dict = {}
        self._cache: dict = {}

    def add(self, origin, destination) -> Pedestrian:
        """Place a walker directly (tests and scripted scenarios)."""
        ped = Pedestrian(self.next_id, np.asarray(origin, float).copy(), np.asarray(origin, float),
                         np.asarray(destination, float), self.params.v_max_ped)
        self.next_id += 1
        self.pedestrians.append(ped)
        return ped

    def _solve(self, cost, target):
        key = (target, cost.tobytes())
        phi = self._cache.get(key)
        if phi is None:
            phi = solve_eikonal(cost, [target], self.bev.cell_size)
        self._next_cache[key] = phi
        return phi

    def plan(self, gated) -> dict:
        bev, params = self.bev, self.params
        peds = self.pedestrians
        positions = np.array([p.position for p in peds]).reshape(-1, 2)
        k_all = pedestrian_discomfort(bev, positions, params)
        dens_all = pedestrian_density(bev, positions, params.r_density)
        walk = bev.walkable
        allowed_gated = walk if gated is None else walk & ~gated
        plans = {}
        for ped, pos in zip(peds, positions):
            k_self = pedestrian_discomfort(bev, pos[None], params)
            d_self = pedestrian_density(bev, pos[None], params.r_density)
            g = self.static + np.maximum(k_all - k_self, 0.0)
            v = compute_speed(np.maximum(dens_all - d_self, 0.0), params, ped.preferred_speed)
            target = bev.cell_of(ped.destination)
            cell = bev.cell_of(pos)
            on_gate = gated is not None and bev.contains(cell) and bool(gated[cell])
            if gated is None or on_gate:
                cost = unit_cost(v, g, params, walk)
                plans[ped.id] = WalkPlan(self._solve(cost, target), v, walk, cost=cost, discomfort=g)
                continue
            g = np.where(gated, np.inf, g)
            cost = unit_cost(v, g, params, walk)
            phi = self._solve(cost, target)
            if bev.contains(cell) and math.isfinite(phi[cell]):
                plans[ped.id] = WalkPlan(phi, v, allowed_gated, cost=cost, discomfort=g)
                continue
            # destination behind a red light: walk to the crosswalk edge and wait there
            ped.state = PedState.WAITING
            plan = self._wait_plan(cost, v, gated, allowed_gated, cell)
            plan.cost, plan.discomfort = cost, g
            plans[ped.id] = plan
        return plans

    def _wait_plan(self, cost, v, gated, allowed, cell) -> WalkPlan:
        bev = self.bev
        grown = ndimage.binary_dilation(gated)
        spots = grown & allowed & np.isfinite(cost)
        reach = self.regions
        if bev.contains(cell) and reach[cell] >= 0:
            spots &= reach == reach[cell]
        hold = not spots.any() or (bev.contains(cell) and bool(spots[cell]))
        if hold:
            return WalkPlan(np.zeros(bev.shape), v, allowed, hold=True)
        targets = [tuple(c) for c in np.argwhere(spots)]
        phi = solve_eikonal(cost, targets, bev.cell_size)
        if not math.isfinite(phi[cell]):
            return WalkPlan(phi, v, allowed, hold=True)
        return WalkPlan(phi, v, allowed)

    def step(self) -> list[TraceRow]:
        params = self.params
        time_s = self.tick * params.dt
        gated = self.gates(time_s) if self.gates is not None else None
        if gated is not None and not gated.any():
            gated = None
        if params.spawn_rate > 0 and self.rng.random() < params.spawn_rate * params.dt:
            ped = spawn(self.pool, [p.position for p in self.pedestrians], self.bev, self.rng,
                        self.next_id, params, blocked=gated)
            if ped is not None:
                self.next_id += 1
                self.pedestrians.append(ped)
        for ped in self.pedestrians:
            if ped.state is PedState.WAITING:
                ped.state = PedState.WALKING
        self._next_cache = {}
        plans = self.plan(gated)
        self._cache = self._next_cache
        self.last_fields = plans
        self.pedestrians, rows = step_crowd(self.pedestrians, plans, self.bev, params, self.tick)
        self.tick += 1
        return rows


def simulate_crowd(bev: BevGrid, params: CrowdParams = CrowdParams(), duration_s: float = 60.0,
                   seed: int = 0, gates=None, pool: ODPool | None = None) -> list[TraceRow]:
    """Run the pedestrian loop for ``duration_s`` and return one row per walker per tick."""
    sim = CrowdSim(bev, params, np.random.default_rng(seed), pool, gates)
    n_ticks = int(round(duration_s / params.dt)) if params.dt > 0 else 0
    rows = []
    for _ in range(n_ticks):
        rows.extend(sim.step())
    return rows
