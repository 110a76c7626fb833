"""Car following along straight lanes with traffic-light gated crosswalks."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .crowd import TraceRow
from .geometry import BevGrid
from .scene_model import Crosswalk, Lane, TrafficLightSchedule, points_in_convex_polygon


class LightState(str, enum.Enum):
    GREEN_FOR_CARS = "green_for_cars"
    GREEN_FOR_PEDS = "green_for_peds"


@dataclass(frozen=True)
class TrafficParams:
    v_max: float = 8.0
    accel: float = 2.5
    min_gap: float = 2.0
    car_length: float = 4.5
    dt: float = 0.1
    spawn_rate: float = 0.15
    lane_spacing: float = 3.5
    stop_margin: float = 1.0

    def braking_distance(self, v: float) -> float:
        return v * v / (2.0 * self.accel) + self.min_gap


@dataclass
class Car:
    id: int
    lane_index: int
    s_arc: float          # front bumper, meters along the lane
    speed: float
    accel: float = 2.5
    length_m: float = 4.5
    v_max: float = 8.0
    state: str = "driving"


def light_state(schedule: Optional[TrafficLightSchedule], time_s: float) -> LightState:
    """Square wave: cars' green phase first, then pedestrians'. No schedule means cars always go."""
    if schedule is None:
        return LightState.GREEN_FOR_CARS
    phase = (time_s - schedule.offset_s) % schedule.cycle_s
    return LightState.GREEN_FOR_CARS if phase < schedule.green_for_cars_s else LightState.GREEN_FOR_PEDS


def _next_stop(car: Car, crosswalks, time_s):
    """(signed distance, red) for the nearest crosswalk stop line still ahead of the car."""
    best, red = math.inf, False
    for cw in crosswalks:
        stop = cw.stop_arcs.get(car.lane_index)
        if stop is None:
            continue
        d = stop - car.s_arc
        if 0 < d < best:
            best = d
            red = light_state(cw.schedule, time_s) is LightState.GREEN_FOR_PEDS
    return best, red


def step_cars(cars_by_lane: dict, crosswalks, params: TrafficParams, time_s: float,
              dt: float | None = None, lanes=None) -> dict:
    """One car-following update per car, leader first in every lane.

    Lists are re-sorted by arc position (descending). Cars whose rear leaves the
    lane are dropped when ``lanes`` is given.
    """
    dt = params.dt if dt is None else dt
    out = {}
    for lane_idx, cars in cars_by_lane.items():
        cars = sorted(cars, key=lambda c: (-c.s_arc, c.id))
        leader = None
        for car in cars:
            d_cross, red = _next_stop(car, crosswalks, time_s)
            d_car = (leader.s_arc - leader.length_m - car.s_arc) if leader is not None else math.inf
            threshold = car.speed ** 2 / (2.0 * car.accel) + params.min_gap
            if 0 < d_cross < threshold and red:
                car.speed = max(0.0, car.speed - car.accel * dt)
                car.state = "braking"
            elif 0 < d_car < threshold:
                car.speed = max(0.0, car.speed - car.accel * dt)
                car.state = "braking"
            elif car.speed < car.v_max and (not red or math.isinf(d_cross)):
                car.speed = min(car.v_max, car.speed + car.accel * dt)
                car.state = "driving"
            else:
                car.state = "driving"
            if car.speed == 0.0:
                car.state = "stopped"
            car.s_arc += car.speed * dt
            leader = car
        if lanes is not None:
            end = lanes[lane_idx].length
            cars = [c for c in cars if c.s_arc - c.length_m <= end]
        out[lane_idx] = cars
    return out


def gate_pedestrians(crosswalks, time_s: float, bev: BevGrid) -> np.ndarray:
    """Cells of every crosswalk whose light currently favors cars."""
    gated = np.zeros(bev.shape, bool)
    centers = bev.cell_centers().reshape(-1, 2)
    for cw in crosswalks:
        if light_state(cw.schedule, time_s) is LightState.GREEN_FOR_CARS:
            gated |= points_in_convex_polygon(centers, cw.polygon).reshape(bev.shape)
    return gated


def entry_clear(cars, params: TrafficParams) -> bool:
    """The lane start is free for a car entering at full speed."""
    if not cars:
        return True
    rear = min(c.s_arc - c.length_m for c in cars)
    needed = max(params.car_length + params.min_gap, params.braking_distance(params.v_max))
    return rear >= needed


def spawn_cars(lanes, cars_by_lane: dict, params: TrafficParams, rng: np.random.Generator,
               next_id: int) -> Optional[Car]:
    """Maybe add one car at the start of a random lane, entering at v_max."""
    if not lanes or rng.random() >= params.spawn_rate * params.dt:
        return None
    lane_idx = int(rng.integers(len(lanes)))
    if not entry_clear(cars_by_lane.get(lane_idx, []), params):
        return None
    return Car(next_id, lane_idx, 0.0, params.v_max, params.accel, params.car_length, params.v_max)


# ---------- lanes ----------

def derive_lanes(road_points, spacing: float = 3.5) -> tuple[Lane, ...]:
    """Straight lanes parallel to the principal axis of the drivable region.

    Lanes left of the region's midline run along +axis, the others run the
    opposite way.
    """
    pts = np.asarray(road_points, dtype=float).reshape(-1, 2)
    if len(pts) < 3:
        return ()
    mean = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - mean, full_matrices=False)
    axis = vt[0]
    if axis[np.argmax(np.abs(axis))] < 0:
        axis = -axis
    normal = np.array([-axis[1], axis[0]])
    along = (pts - mean) @ axis
    across = (pts - mean) @ normal
    s0, s1 = np.percentile(along, [0.5, 99.5])
    w0, w1 = np.percentile(across, [0.5, 99.5])
    # percentiles trim a little width; tolerate that before flooring
    n = max(1, int((w1 - w0) / spacing + 0.1))
    offsets = (w0 + w1) / 2 + (np.arange(n) - (n - 1) / 2) * spacing
    lanes = []
    for k, w in enumerate(offsets):
        a = mean + axis * s0 + normal * w
        b = mean + axis * s1 + normal * w
        forward = n == 1 or k >= n / 2
        line = (a, b) if forward else (b, a)
        lanes.append(Lane((tuple(line[0]), tuple(line[1])), spacing))
    return tuple(lanes)


def derive_stop_arcs(crosswalk: Crosswalk, lanes, margin: float = 1.0, step: float = 0.05) -> dict:
    """Stop line ``margin`` meters before where each lane first enters the crosswalk."""
    arcs = {}
    for idx, lane in enumerate(lanes):
        s = np.arange(0.0, lane.length, step)
        pts = np.array([lane.point_at(v) for v in s])
        inside = points_in_convex_polygon(pts, crosswalk.polygon)
        if inside.any():
            first = s[int(np.argmax(inside))]
            if first - margin > 0:
                arcs[idx] = float(first - margin)
    return arcs


class TrafficSim:
    def __init__(self, lanes, crosswalks, params: TrafficParams = TrafficParams(), rng=None):
        self.lanes = tuple(lanes)
        self.crosswalks = tuple(crosswalks)
        self.params = params
        self.rng = np.random.default_rng(0) if rng is None else rng
        self.cars: dict = {i: [] for i in range(len(self.lanes))}
        self.next_id = 0
        self.tick = 0

    def step(self) -> list[TraceRow]:
        p = self.params
        time_s = self.tick * p.dt
        car = spawn_cars(self.lanes, self.cars, p, self.rng, self.next_id)
        if car is not None:
            self.cars[car.lane_index].append(car)
            self.next_id += 1
        self.cars = step_cars(self.cars, self.crosswalks, p, time_s, p.dt, self.lanes)
        rows = []
        for lane_idx in sorted(self.cars):
            lane = self.lanes[lane_idx]
            for c in self.cars[lane_idx]:
                center = lane.point_at(c.s_arc - c.length_m / 2.0)
                rows.append(TraceRow(self.tick, c.id, "car", float(center[0]), float(center[1]),
                                     c.state, lane_idx, c.s_arc, c.speed))
        rows.sort(key=lambda r: r.id)
        self.tick += 1
        return rows
