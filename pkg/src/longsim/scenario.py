"""Scenario data model, on-disk format, validation and synthetic corpora.

A scenario is a static map (polylines) plus per-agent 10 Hz state tracks
with validity flags. The on-disk format is line-delimited JSON, one
scenario per line, with exact round-trip semantics (Python float repr).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

FPS = 10
DEFAULT_N_STEPS = 91

POLYLINE_KINDS = ("lane_center", "road_edge", "crosswalk", "stop_line", "other")
AGENT_TYPES = ("vehicle", "pedestrian", "cyclist")

# Tracks visible for less than 0.5 s (5 raw steps) are perception flicker
# and are dropped at load time.
MIN_PRESENCE_STEPS = 5


class ScenarioError(Exception):
    """Base error for scenario parsing/validation failures."""


class ParseError(ScenarioError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ValidationError(ScenarioError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def wrap_angle(a):
    """Normalize angle(s) to (-pi, pi]."""
    if isinstance(a, float) or isinstance(a, int):
        r = math.fmod(a + math.pi, 2.0 * math.pi)
        if r <= 0.0:
            r += 2.0 * math.pi
        return r - math.pi
    r = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi)
    r = np.where(r == 0.0, 2.0 * np.pi, r)
    out = r - np.pi
    if np.ndim(a) == 0:
        return float(out)
    return out


@dataclass
class Polyline:
    points: np.ndarray  # [P, 2] meters, world frame
    kind: str

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)


@dataclass
class AgentTrack:
    id: str
    type: str  # vehicle | pedestrian | cyclist
    shape: tuple  # (length, width, height) meters
    states: np.ndarray  # [n_steps, 4]: x, y, heading, valid

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)

    @property
    def xy(self) -> np.ndarray:
        return self.states[:, 0:2]

    @property
    def heading(self) -> np.ndarray:
        return self.states[:, 2]

    @property
    def valid(self) -> np.ndarray:
        return self.states[:, 3] > 0.5


@dataclass
class Scenario:
    map: list  # list[Polyline]
    agents: list  # list[AgentTrack]
    ego_index: int
    n_steps: int
    fps: int = FPS

    @property
    def ego(self) -> AgentTrack:
        return self.agents[self.ego_index]


def validate_scenario(s: Scenario) -> None:
    """Raise ValidationError naming the offending field on the first violation."""
    if s.fps != FPS:
        raise ValidationError("fps", f"must be {FPS}, got {s.fps}")
    if not s.map:
        raise ValidationError("map", "must contain at least one polyline")
    for i, pl in enumerate(s.map):
        if pl.kind not in POLYLINE_KINDS:
            raise ValidationError(f"map[{i}].kind", f"unknown kind {pl.kind!r}")
        pts = pl.points
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValidationError(f"map[{i}].points", "need >= 2 2D points")
        if not np.all(np.isfinite(pts)):
            raise ValidationError(f"map[{i}].points", "non-finite coordinate")
        if np.any(np.all(pts[1:] == pts[:-1], axis=1)):
            raise ValidationError(f"map[{i}].points", "consecutive duplicate points")
    if not s.agents:
        raise ValidationError("agents", "must contain at least one agent")
    if not (0 <= s.ego_index < len(s.agents)):
        raise ValidationError("ego_index", f"{s.ego_index} out of range")
    for i, a in enumerate(s.agents):
        if a.type not in AGENT_TYPES:
            raise ValidationError(f"agents[{i}].type", f"unknown type {a.type!r}")
        if len(a.shape) != 3 or any(not (v > 0) for v in a.shape):
            raise ValidationError(f"agents[{i}].shape", "components must be > 0")
        st = a.states
        if st.shape != (s.n_steps, 4):
            raise ValidationError(
                f"agents[{i}].states", f"length {st.shape[0]} != n_steps {s.n_steps}"
            )
        if not np.all(np.isfinite(st[a.valid, 0:3])):
            raise ValidationError(f"agents[{i}].states", "non-finite coordinate at valid step")
        h = st[a.valid, 2]
        if h.size and (np.any(h <= -math.pi) or np.any(h > math.pi)):
            raise ValidationError(
                f"agents[{i}].states", "heading out of (-pi, pi] at valid step"
            )
        if not np.all(np.isin(st[:, 3], (0.0, 1.0))):
            raise ValidationError(f"agents[{i}].states", "valid flag must be 0/1")
    ego = s.agents[s.ego_index]
    if not np.all(ego.valid):
        bad = int(np.argmin(ego.valid))
        raise ValidationError(
            f"agents[{s.ego_index}].states",
            f"ego must be valid at every step, invalid at step {bad}",
        )


def _longest_valid_run(valid: np.ndarray) -> int:
    best = run = 0
    for v in valid:
        run = run + 1 if v else 0
        best = max(best, run)
    return best


def _scenario_to_record(s: Scenario) -> dict:
    return {
        "map": [{"kind": pl.kind, "points": pl.points.tolist()} for pl in s.map],
        "agents": [
            {
                "id": a.id,
                "type": a.type,
                "shape": list(a.shape),
                "states": [
                    [st[0], st[1], st[2], int(st[3])] for st in a.states.tolist()
                ],
            }
            for a in s.agents
        ],
        "ego_index": s.ego_index,
        "n_steps": s.n_steps,
    }


def _record_to_scenario(rec: dict) -> Scenario:
    pls = [Polyline(points=np.array(p["points"], dtype=float), kind=p["kind"]) for p in rec["map"]]
    agents = [
        AgentTrack(
            id=str(a["id"]),
            type=a["type"],
            shape=tuple(float(v) for v in a["shape"]),
            states=np.array(a["states"], dtype=float),
        )
        for a in rec["agents"]
    ]
    return Scenario(map=pls, agents=agents, ego_index=int(rec["ego_index"]), n_steps=int(rec["n_steps"]))


def load_scenarios(path, drop_flicker: bool = True) -> list:
    """Load and validate scenarios from a line-delimited JSON file.

    Tracks visible for < MIN_PRESENCE_STEPS consecutive raw steps are
    dropped (ego excepted; an invalid ego is a validation error).
    """
    scenarios = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(line_no, f"invalid JSON ({e.msg})") from e
            try:
                s = _record_to_scenario(rec)
            except (KeyError, TypeError, ValueError) as e:
                raise ParseError(line_no, f"malformed record ({e})") from e
            if drop_flicker:
                keep = []
                for i, a in enumerate(s.agents):
                    if i == s.ego_index or _longest_valid_run(a.valid) >= MIN_PRESENCE_STEPS:
                        keep.append((i, a))
                new_ego = next(j for j, (i, _) in enumerate(keep) if i == s.ego_index)
                s = Scenario(map=s.map, agents=[a for _, a in keep], ego_index=new_ego, n_steps=s.n_steps)
            try:
                validate_scenario(s)
            except ValidationError as e:
                raise ValidationError(e.field, f"line {line_no}: {e}") from e
            scenarios.append(s)
    return scenarios


def write_scenarios(scenarios: Sequence[Scenario], path) -> None:
    """Write scenarios as line-delimited JSON. Validates before writing."""
    for s in scenarios:
        validate_scenario(s)
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenarios:
            fh.write(json.dumps(_scenario_to_record(s), separators=(",", ":")))
            fh.write("\n")


# ---------------------------------------------------------------------------
# Synthetic corpus generation
# ---------------------------------------------------------------------------

LANE_SPACING = 3.5
VISIBILITY_RADIUS = 50.0  # validity window: agents are "perceived" within this range of ego

TYPE_SHAPES = {
    "vehicle": (4.6, 1.9, 1.6),
    "pedestrian": (0.8, 0.8, 1.8),
    "cyclist": (1.8, 0.6, 1.7),
}


@dataclass
class CorpusConfig:
    count: int = 20
    n_steps: int = DEFAULT_N_STEPS
    templates: tuple = ("straight", "t_intersection", "four_way")
    min_agents: int = 8
    max_agents: int = 14
    through_traffic_rate: float = 0.5
    road_half_length: float = 220.0
    visibility_radius: float = VISIBILITY_RADIUS


class InfeasibleConfig(ScenarioError):
    pass


ROAD_WIGGLE_AMP = 0.2  # gentle lateral curvature; also keeps map-token
ROAD_WIGGLE_LEN = 83.0  # geometry off exact radius boundaries


def _road_wiggle(xs):
    return ROAD_WIGGLE_AMP * np.sin(2 * math.pi * xs / ROAD_WIGGLE_LEN)


def _straight_map(half_len: float, n_lanes: int = 4) -> list:
    """Bidirectional near-straight road along x: n_lanes lane centers + 2 edges."""
    xs = np.linspace(-half_len, half_len, int(half_len // 5) * 2 + 1)
    pls = []
    offsets = (np.arange(n_lanes) - (n_lanes - 1) / 2.0) * LANE_SPACING
    for off in offsets:
        pts = np.stack([xs, off + _road_wiggle(xs)], axis=1)
        pls.append(Polyline(points=pts, kind="lane_center"))
    edge = offsets[-1] + LANE_SPACING / 2 + 0.25
    for off in (-edge, edge):
        pts = np.stack([xs, off + _road_wiggle(xs)], axis=1)
        pls.append(Polyline(points=pts, kind="road_edge"))
    return pls


def _cross_map(half_len: float, arms: str) -> list:
    """Intersection map: full x-road plus a y-road ('t' = one-sided)."""
    pls = _straight_map(half_len, n_lanes=4)
    y0 = 0.0 if arms == "full" else 4.0
    ys = np.linspace(y0, half_len, max(2, int((half_len - y0) // 5) + 1))
    for off in (-LANE_SPACING / 2, LANE_SPACING / 2):
        pts = np.stack([off + _road_wiggle(ys), ys], axis=1)
        pls.append(Polyline(points=pts, kind="lane_center"))
    if arms == "full":
        ys2 = np.linspace(-half_len, -4.0, max(2, int((half_len - 4) // 5) + 1))
        for off in (-LANE_SPACING / 2, LANE_SPACING / 2):
            pts = np.stack([off + _road_wiggle(ys2), ys2], axis=1)
            pls.append(Polyline(points=pts, kind="lane_center"))
    cross = np.array([[-6.0, 2.0], [6.0, 2.0]])
    pls.append(Polyline(points=cross, kind="crosswalk"))
    pls.append(Polyline(points=np.array([[-8.0, -2.5], [-8.0, 2.5]]), kind="stop_line"))
    return pls


def _speed_profile(rng, n_steps: int, v0: float, allow_stop: bool) -> np.ndarray:
    """Per-step speeds: constant, gentle accel, or decelerate-to-stop."""
    mode = rng.integers(0, 3) if allow_stop else rng.integers(0, 2)
    t = np.arange(n_steps) / FPS
    if mode == 0:
        v = np.full(n_steps, v0)
    elif mode == 1:
        acc = rng.uniform(-0.6, 0.6)
        v = np.clip(v0 + acc * t, 0.5, 14.0)
    else:
        t_stop = rng.uniform(2.0, 6.0)
        v = np.clip(v0 * (1.0 - t / t_stop), 0.0, None)
    return v


def _lane_track(rng, n_steps: int, lane_y: float, x0: float, direction: float,
                v0: float, allow_stop: bool) -> np.ndarray:
    """States [n,4] driving along x at lane_y with gentle lateral wiggle.

    The wiggle amplitude is bounded away from zero so no trajectory is an
    exact straight line (exactly collinear motion puts relative-direction
    descriptors on the +/-pi wrap seam).
    """
    v = _speed_profile(rng, n_steps, v0, allow_stop)
    x = x0 + direction * np.concatenate([[0.0], np.cumsum(v[:-1])]) / FPS
    amp = rng.uniform(0.08, 0.3)
    phase = rng.uniform(0, 2 * math.pi)
    y = lane_y + amp * np.sin(2 * math.pi * np.arange(n_steps) / n_steps + phase)
    dx = np.gradient(x)
    dy = np.gradient(y)
    heading = np.where(np.abs(dx) + np.abs(dy) < 1e-9,
                       0.0 if direction > 0 else math.pi,
                       np.arctan2(dy, dx))
    heading = wrap_angle(heading)
    return np.stack([x, y, heading, np.ones(n_steps)], axis=1)


def _vertical_track(rng, n_steps: int, lane_x: float, y0: float, direction: float, v0: float) -> np.ndarray:
    v = _speed_profile(rng, n_steps, v0, allow_stop=False)
    y = y0 + direction * np.concatenate([[0.0], np.cumsum(v[:-1])]) / FPS
    amp = rng.uniform(0.05, 0.15)
    phase = rng.uniform(0, 2 * math.pi)
    x = lane_x + amp * np.sin(2 * math.pi * np.arange(n_steps) / n_steps + phase)
    dx = np.gradient(x)
    dy = np.gradient(y)
    heading = np.where(np.abs(dx) + np.abs(dy) < 1e-9,
                       math.pi / 2 if direction > 0 else -math.pi / 2,
                       np.arctan2(dy, dx))
    heading = wrap_angle(heading)
    return np.stack([x, y, heading, np.ones(n_steps)], axis=1)


def generate_synthetic_corpus(config: CorpusConfig, seed: int) -> list:
    """Deterministic synthetic scenarios with through-traffic validity spans.

    Non-ego agents are only valid while within config.visibility_radius of
    the ego, which produces enter/exit events exactly like perception-bound
    real logs. The configured fraction of agents is laid out so that their
    visibility span is strictly partial.
    """
    if config.count < 0:
        raise InfeasibleConfig("count must be >= 0")
    if config.min_agents < 1:
        raise InfeasibleConfig("need at least the ego agent")
    if config.through_traffic_rate > 0 and config.max_agents < 2:
        raise InfeasibleConfig("through-traffic requires at least 2 agents")
    rng = np.random.default_rng(seed)
    out = []
    for idx in range(config.count):
        template = config.templates[idx % len(config.templates)]
        out.append(_generate_one(rng, config, template, idx))
    return out


def _generate_one(rng, config: CorpusConfig, template: str, idx: int) -> Scenario:
    n = config.n_steps
    if template == "straight":
        pls = _straight_map(config.road_half_length)
    elif template == "t_intersection":
        pls = _cross_map(config.road_half_length, arms="t")
    else:
        pls = _cross_map(config.road_half_length, arms="full")

    lane_ys = (np.arange(4) - 1.5) * LANE_SPACING
    n_agents = int(rng.integers(config.min_agents, config.max_agents + 1))
    n_through = int(round(config.through_traffic_rate * (n_agents - 1)))

    # Ego: right-of-center lane, steady forward speed, valid throughout.
    ego_v = rng.uniform(6.5, 9.0)
    ego_states = _lane_track(rng, n, lane_ys[2], rng.uniform(-40, -20), 1.0, ego_v, allow_stop=False)
    agents = [AgentTrack(id="ego", type="vehicle", shape=TYPE_SHAPES["vehicle"], states=ego_states)]

    # Through-traffic agents: placed so their ego-distance crosses the
    # visibility radius mid-log (entering, exiting or both).
    made_through = 0
    k = 0
    while len(agents) < n_agents:
        k += 1
        want_through = made_through < n_through
        a_type = "vehicle"
        r = rng.uniform()
        if not want_through and r < 0.15 and template != "straight":
            a_type = "pedestrian"
        elif not want_through and r < 0.25:
            a_type = "cyclist"

        if a_type == "pedestrian":
            x0 = rng.uniform(-6, 6)
            states = _vertical_track(rng, n, x0, rng.uniform(-8, -4), 1.0, rng.uniform(0.8, 1.5))
        elif a_type == "cyclist":
            lane = lane_ys[3] + 2.2
            states = _lane_track(rng, n, lane, ego_states[0, 0] + rng.uniform(-30, 30), 1.0,
                                 rng.uniform(3.0, 5.0), allow_stop=False)
        else:
            oncoming = rng.uniform() < 0.5
            if oncoming:
                lane = lane_ys[int(rng.integers(0, 2))]
                direction, v0 = -1.0, rng.uniform(5.0, 11.0)
            else:
                lane = lane_ys[int(rng.integers(2, 4))]
                direction, v0 = 1.0, rng.uniform(3.0, 11.0)
            if want_through:
                # Spawn ahead/behind so the visibility window opens or closes mid-log.
                gap = config.visibility_radius + rng.uniform(5.0, 60.0)
                x0 = ego_states[0, 0] + (gap if oncoming or rng.uniform() < 0.5 else -gap)
            else:
                x0 = ego_states[0, 0] + rng.uniform(-35.0, 35.0)
            states = _lane_track(rng, n, lane, x0, direction, v0, allow_stop=not want_through)

        dist = np.linalg.norm(states[:, 0:2] - ego_states[:, 0:2], axis=1)
        visible = dist <= config.visibility_radius
        if visible.sum() < MIN_PRESENCE_STEPS or _longest_valid_run(visible) < MIN_PRESENCE_STEPS:
            if k > 200:
                raise InfeasibleConfig("could not place agents within visibility budget")
            continue
        partial = bool(visible[0] == False or visible[-1] == False)  # noqa: E712
        if want_through and not partial:
            if k > 200:
                raise InfeasibleConfig("through-traffic placement failed")
            continue
        states = states.copy()
        states[:, 3] = visible.astype(float)
        shape = tuple(float(v * rng.uniform(0.9, 1.1)) for v in TYPE_SHAPES[a_type])
        agents.append(AgentTrack(id=f"a{len(agents)}", type=a_type, shape=shape, states=states))
        if want_through and partial:
            made_through += 1

    s = Scenario(map=pls, agents=agents, ego_index=0, n_steps=n)
    validate_scenario(s)
    return s
