"""Long-horizon evaluation: sliding windows, reference histograms, NLL-based
component scores, placement statistics, agent-count error, and the
distance-threshold placement heuristic for motion-only baselines.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .scenario import FPS, Scenario, wrap_angle
from .tokenizer import DELTA, add_remove_slots, tokenize_time

COUNT_RADIUS = 50.0  # agents within this ego range count toward scene density

# histogram bin layouts (edges); indicators use two bins
BINS = {
    "speed": np.arange(0.0, 30.0 + 0.5, 0.5),
    "accel": np.arange(0.0, 10.0 + 0.5, 0.5),
    "nearest_dist": np.arange(0.0, 80.0 + 2.0, 2.0),
    "collision": np.array([0.0, 0.5, 1.0]),
    "offroad": np.array([0.0, 0.5, 1.0]),
    "n_add": np.arange(0.0, 21.0 + 1.0, 1.0),
    "n_remove": np.arange(0.0, 21.0 + 1.0, 1.0),
    "d_add": np.arange(0.0, 80.0 + 5.0, 5.0),
    "d_remove": np.arange(0.0, 80.0 + 5.0, 5.0),
}

OFFROAD_DISTANCE = 3.0
LAPLACE_ALPHA = 1.0

COMPONENT_STATS = {
    "kinematic": ("speed", "accel"),
    "interactive": ("nearest_dist", "collision"),
    "map": ("offroad",),
    "placement": ("n_add", "n_remove", "d_add", "d_remove"),
}


class MetricsError(Exception):
    pass


@dataclass
class WindowSpec:
    t_w: int = 80  # window length in raw steps (8 s)
    stride: int = 20  # raw steps (2 s)

    def window_count(self, future_len: int) -> int:
        """P such that stride*(P-1) + t_w == future_len, else error."""
        if future_len < self.t_w:
            raise MetricsError(f"future length {future_len} shorter than window {self.t_w}")
        rem = future_len - self.t_w
        if rem % self.stride != 0:
            raise MetricsError(
                f"no integral window count for (t_w={self.t_w}, stride={self.stride}, "
                f"future={future_len})")
        return rem // self.stride + 1


def slide_windows(future_len: int, spec: WindowSpec):
    """Window offsets [0, stride, ...]; the last window ends at the horizon."""
    p = spec.window_count(future_len)
    return [(i * spec.stride, i * spec.stride + spec.t_w) for i in range(p)]


# ---------------------------------------------------------------------------
# Per-trace statistics
# ---------------------------------------------------------------------------

def _speeds(states: np.ndarray):
    """Per-step speeds (m/s) over consecutive valid steps."""
    xy = states[:, 0:2]
    valid = states[:, 3] > 0.5
    ok = valid[1:] & valid[:-1]
    d = np.linalg.norm(xy[1:] - xy[:-1], axis=1) * FPS
    return d[ok]


def _accels(states: np.ndarray):
    xy = states[:, 0:2]
    valid = states[:, 3] > 0.5
    ok = valid[2:] & valid[1:-1] & valid[:-2]
    v = (xy[1:] - xy[:-1]) * FPS
    a = np.linalg.norm((v[1:] - v[:-1]) * FPS, axis=1)
    return a[ok]


def _obb_corners(x, y, heading, length, width):
    c, s = math.cos(heading), math.sin(heading)
    dx, dy = length / 2.0, width / 2.0
    local = np.array([[dx, dy], [dx, -dy], [-dx, -dy], [-dx, dy]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def _obb_overlap(c1, c2) -> bool:
    """Separating-axis test for two convex quads."""
    for quad_a, quad_b in ((c1, c2), (c2, c1)):
        for i in range(4):
            edge = quad_a[(i + 1) % 4] - quad_a[i]
            axis = np.array([-edge[1], edge[0]])
            pa = quad_a @ axis
            pb = quad_b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _agent_step_stats(agent_states, shapes, map_polylines):
    """Dict of per-agent-step samples across a trace set.

    agent_states: list of [n, 4]; shapes: list of (l, w, h).
    """
    out = {k: [] for k in ("speed", "accel", "nearest_dist", "collision", "offroad")}
    n_agents = len(agent_states)
    if n_agents == 0:
        return out
    n_steps = agent_states[0].shape[0]
    for st in agent_states:
        out["speed"].extend(_speeds(st))
        out["accel"].extend(_accels(st))
    road_pts = _road_points(map_polylines)
    for t in range(n_steps):
        pos, idxs = [], []
        for i, st in enumerate(agent_states):
            if st[t, 3] > 0.5:
                pos.append(st[t, 0:2])
                idxs.append(i)
        if not idxs:
            continue
        pos = np.array(pos)
        if len(idxs) >= 2:
            d = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
            np.fill_diagonal(d, np.inf)
            nearest = d.min(axis=1)
            out["nearest_dist"].extend(nearest)
            for a in range(len(idxs)):
                hit = 0.0
                ca = _obb_corners(*pos[a], agent_states[idxs[a]][t, 2],
                                  shapes[idxs[a]][0], shapes[idxs[a]][1])
                for b in range(len(idxs)):
                    if b == a or d[a, b] > 10.0:
                        continue
                    cb = _obb_corners(*pos[b], agent_states[idxs[b]][t, 2],
                                      shapes[idxs[b]][0], shapes[idxs[b]][1])
                    if _obb_overlap(ca, cb):
                        hit = 1.0
                        break
                out["collision"].append(hit)
        if road_pts.shape[0]:
            for i, a in enumerate(idxs):
                if _is_vehicle_like(shapes[a]):
                    dmin = np.min(np.linalg.norm(road_pts - pos[i], axis=1))
                    out["offroad"].append(1.0 if dmin > OFFROAD_DISTANCE else 0.0)
    return out


def _is_vehicle_like(shape) -> bool:
    return shape[0] >= 1.5  # pedestrians are exempt from offroad scoring


def _road_points(polylines, spacing: float = 2.0):
    """Dense points along lane-center/road-edge polylines."""
    pts = []
    for pl in polylines:
        if pl.kind not in ("lane_center", "road_edge"):
            continue
        p = pl.points
        for a, b in zip(p[:-1], p[1:]):
            seg = np.linalg.norm(b - a)
            n = max(2, int(seg / spacing) + 1)
            ts = np.linspace(0, 1, n)
            pts.extend(a + ts[:, None] * (b - a))
    return np.array(pts) if pts else np.zeros((0, 2))


# ---------------------------------------------------------------------------
# Reference distributions
# ---------------------------------------------------------------------------

@dataclass
class Histogram:
    edges: np.ndarray
    probs: np.ndarray  # Laplace-smoothed, sums to 1

    def nll(self, samples) -> np.ndarray:
        samples = np.asarray(samples, dtype=float)
        idx = np.clip(np.searchsorted(self.edges, samples, side="right") - 1,
                      0, self.probs.shape[0] - 1)
        return -np.log(self.probs[idx])

    def self_nll(self) -> float:
        """Mean NLL of the smoothed distribution against itself."""
        return float(-(self.probs * np.log(self.probs)).sum())


def _fit_histogram(samples, edges) -> Histogram:
    counts, _ = np.histogram(np.asarray(samples, dtype=float), bins=edges)
    # clip out-of-range samples into the boundary bins
    s = np.asarray(samples, dtype=float)
    counts = counts.astype(float)
    if s.size:
        counts[0] += (s < edges[0]).sum()
        counts[-1] += (s >= edges[-1]).sum()
    smoothed = counts + LAPLACE_ALPHA
    return Histogram(edges=edges, probs=smoothed / smoothed.sum())


@dataclass
class ReferenceDistributions:
    histograms: dict  # stat -> Histogram
    count_mean: float  # mean per-window agent count
    count_spread: float  # std of per-window agent counts

    def to_json(self) -> dict:
        return {
            "format": "longsim-reference-v1",
            "count_mean": self.count_mean,
            "count_spread": self.count_spread,
            "histograms": {
                k: {"edges": h.edges.tolist(), "probs": h.probs.tolist()}
                for k, h in self.histograms.items()
            },
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ReferenceDistributions":
        if doc.get("format") != "longsim-reference-v1":
            raise MetricsError("unsupported reference format")
        hists = {
            k: Histogram(edges=np.array(v["edges"]), probs=np.array(v["probs"]))
            for k, v in doc["histograms"].items()
        }
        return cls(histograms=hists, count_mean=doc["count_mean"],
                   count_spread=doc["count_spread"])


def save_reference(ref: ReferenceDistributions, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ref.to_json(), fh, separators=(",", ":"))
        fh.write("\n")


def load_reference(path) -> ReferenceDistributions:
    with open(path, "r", encoding="utf-8") as fh:
        return ReferenceDistributions.from_json(json.load(fh))


def gt_events(scenario: Scenario):
    """(entry, exit) events from validity spans: (raw_step, ego_distance)."""
    ego = scenario.ego
    entries, exits = [], []
    n_slots = scenario.n_steps // DELTA
    for i, a in enumerate(scenario.agents):
        if i == scenario.ego_index:
            continue
        tv = tokenize_time(a.valid)
        k1, k2 = add_remove_slots(tv)
        if k1 is None:
            continue
        if k1 > 0:
            r = DELTA * k1
            d = float(np.linalg.norm(a.xy[r] - ego.xy[r]))
            entries.append((r, d))
        if k2 is not None and k2 < n_slots - 1:
            r = DELTA * (k2 + 1)
            d = float(np.linalg.norm(a.xy[r] - ego.xy[r]))
            exits.append((r, d))
    return entries, exits


def _count_trace(agent_states, ego_states, radius=COUNT_RADIUS):
    """Active-agent count near the ego per raw step (the ego not counted)."""
    n_steps = ego_states.shape[0]
    counts = np.zeros(n_steps)
    for st in agent_states:
        valid = st[:, 3] > 0.5
        d = np.linalg.norm(st[:, 0:2] - ego_states[:, 0:2], axis=1)
        counts += (valid & (d <= radius)).astype(float)
    return counts


def estimate_reference(scenarios, spec: WindowSpec = WindowSpec()) -> ReferenceDistributions:
    """Reference histograms plus per-window count statistics from GT logs.

    Kinematic/interactive/map statistics are gathered per agent-step;
    placement statistics per window using the validity-derived entry/exit
    events. GT logs contribute one 8 s window each (their future span).
    """
    if not scenarios:
        raise MetricsError("empty corpus")
    samples = {k: [] for k in BINS}
    window_counts = []
    for s in scenarios:
        agent_states = [a.states for a in s.agents]
        shapes = [a.shape for a in s.agents]
        stats = _agent_step_stats(agent_states, shapes, s.map)
        for k in ("speed", "accel", "nearest_dist", "collision", "offroad"):
            samples[k].extend(stats[k])
        entries, exits = gt_events(s)
        future_start = s.n_steps - spec.t_w
        n_add = sum(1 for r, _ in entries if r >= future_start)
        n_rem = sum(1 for r, _ in exits if r >= future_start)
        samples["n_add"].append(n_add)
        samples["n_remove"].append(n_rem)
        samples["d_add"].extend(d for r, d in entries if r >= future_start)
        samples["d_remove"].extend(d for r, d in exits if r >= future_start)
        ego = s.ego
        others = [a.states for i, a in enumerate(s.agents) if i != s.ego_index]
        counts = _count_trace(others, ego.states)
        window_counts.append(counts[future_start:].mean())
    hists = {k: _fit_histogram(samples[k], BINS[k]) for k in BINS}
    wc = np.array(window_counts)
    return ReferenceDistributions(histograms=hists, count_mean=float(wc.mean()),
                                  count_spread=float(wc.std()))


# ---------------------------------------------------------------------------
# Rollout-side evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalTrace:
    """A rollout (or GT replay) in evaluation form."""
    agent_states: list  # list of [n_raw, 4]
    shapes: list
    ego_index: int
    map_polylines: list
    events_add: list  # (raw_step, ego_distance)
    events_remove: list
    history_raw: int = 11


def rollout_to_trace(rollout, scenario: Scenario) -> EvalTrace:
    ego_idx = next(i for i, a in enumerate(rollout.agents) if a["origin"] == "ego")
    return EvalTrace(
        agent_states=[np.asarray(a["states"]) for a in rollout.agents],
        shapes=[tuple(a["shape"]) for a in rollout.agents],
        ego_index=ego_idx,
        map_polylines=scenario.map,
        events_add=[(e.pose_time * DELTA, e.ego_distance) for e in rollout.events if e.kind == "add"],
        events_remove=[(e.pose_time * DELTA, e.ego_distance) for e in rollout.events if e.kind == "remove"],
    )


def scenario_to_trace(scenario: Scenario) -> EvalTrace:
    entries, exits = gt_events(scenario)
    return EvalTrace(
        agent_states=[a.states for a in scenario.agents],
        shapes=[a.shape for a in scenario.agents],
        ego_index=scenario.ego_index,
        map_polylines=scenario.map,
        events_add=entries,
        events_remove=exits,
    )


def placement_stats(trace: EvalTrace, windows):
    """Per-window (N+, N-, D+ samples, D- samples); events are attributed to
    every window covering their (future-relative) timestamp."""
    out = []
    for lo, hi in windows:
        n_add = n_rem = 0
        d_add, d_rem = [], []
        for r, d in trace.events_add:
            rr = r - trace.history_raw
            if lo <= rr < hi:
                n_add += 1
                d_add.append(d)
        for r, d in trace.events_remove:
            rr = r - trace.history_raw
            if lo <= rr < hi:
                n_rem += 1
                d_rem.append(d)
        out.append((n_add, n_rem, d_add, d_rem))
    return out


def heuristic_placement_baseline(trace: EvalTrace, radius: float = 75.0):
    """Synthetic entered/exited events from ego-distance threshold crossings."""
    ego = trace.agent_states[trace.ego_index]
    adds, removes = [], []
    for i, st in enumerate(trace.agent_states):
        if i == trace.ego_index:
            continue
        d = np.linalg.norm(st[:, 0:2] - ego[:, 0:2], axis=1)
        valid = (st[:, 3] > 0.5) & (ego[:, 3] > 0.5)
        inside_prev = None
        for t in range(st.shape[0]):
            if not valid[t]:
                continue
            inside = d[t] <= radius
            if inside_prev is not None:
                if inside and not inside_prev:
                    adds.append((t, float(d[t])))
                elif not inside and inside_prev:
                    removes.append((t, float(d[t])))
            inside_prev = inside
    return adds, removes


def _window_slice_stats(trace: EvalTrace, lo: int, hi: int):
    """Agent-step statistics restricted to one future window."""
    a = trace.history_raw + lo
    b = trace.history_raw + hi
    sliced = [st[a:b] for st in trace.agent_states]
    return _agent_step_stats(sliced, trace.shapes, trace.map_polylines)


def compute_component_scores(trace: EvalTrace, ref: ReferenceDistributions,
                             windows) -> dict:
    """exp(-NLL_sim / NLL_ref_self) per statistic, averaged into components."""
    samples = {k: [] for k in ("speed", "accel", "nearest_dist", "collision", "offroad")}
    for lo, hi in windows:
        stats = _window_slice_stats(trace, lo, hi)
        for k in samples:
            samples[k].extend(stats[k])
    pstats = placement_stats(trace, windows)
    samples["n_add"] = [p[0] for p in pstats]
    samples["n_remove"] = [p[1] for p in pstats]
    samples["d_add"] = [d for p in pstats for d in p[2]]
    samples["d_remove"] = [d for p in pstats for d in p[3]]

    stat_scores = {}
    for k, hist in ref.histograms.items():
        vals = samples.get(k, [])
        if len(vals) == 0:
            # no samples: an all-zero placement channel is scored against the
            # reference's zero bin; kinematic channels fall back to the floor
            if k.startswith("d_"):
                stat_scores[k] = math.exp(-hist.nll([0.0]).mean() / max(hist.self_nll(), 1e-9))
                continue
            stat_scores[k] = math.exp(-hist.nll([0.0]).mean() / max(hist.self_nll(), 1e-9))
            continue
        nll = hist.nll(vals).mean()
        stat_scores[k] = math.exp(-nll / max(hist.self_nll(), 1e-9))

    components = {}
    for comp, keys in COMPONENT_STATS.items():
        components[comp] = float(np.mean([stat_scores[k] for k in keys]))
    components["placement_sub"] = {k: stat_scores[k] for k in COMPONENT_STATS["placement"]}
    components["stat_scores"] = stat_scores
    return components


def compute_ace(trace: EvalTrace, ref: ReferenceDistributions, windows):
    """(mean ACE, ACE slope, per-window trace) against the reference count mean."""
    ego = trace.agent_states[trace.ego_index]
    others = [st for i, st in enumerate(trace.agent_states) if i != trace.ego_index]
    counts = _count_trace(others, ego)
    ace = []
    for lo, hi in windows:
        c = counts[trace.history_raw + lo: trace.history_raw + hi].mean()
        ace.append(abs(c - ref.count_mean))
    ace = np.array(ace)
    if ace.shape[0] >= 2:
        slope = float(np.polyfit(np.arange(ace.shape[0]), ace, 1)[0])
    else:
        slope = 0.0
    return float(ace.mean()), slope, ace


def composite_score(components: dict, weights: dict | None = None) -> float:
    names = ("kinematic", "interactive", "map", "placement")
    for n in names:
        if n not in components:
            raise MetricsError(f"missing component {n!r}")
    if weights is None:
        weights = {n: 1.0 for n in names}
    total_w = sum(weights[n] for n in names)
    return float(sum(components[n] * weights[n] for n in names) / total_w)


@dataclass
class MetricsReport:
    components: dict
    composite: float
    mean_ace: float
    ace_slope: float
    ace_trace: list
    weights: dict

    def to_json(self) -> dict:
        return {
            "format": "longsim-report-v1",
            "composite": self.composite,
            "kinematic": self.components["kinematic"],
            "interactive": self.components["interactive"],
            "map": self.components["map"],
            "placement": self.components["placement"],
            "placement_sub": self.components["placement_sub"],
            "mean_ace": self.mean_ace,
            "ace_slope": self.ace_slope,
            "ace_trace": list(self.ace_trace),
            "weights": self.weights,
        }


def evaluate_trace(trace: EvalTrace, ref: ReferenceDistributions,
                   spec: WindowSpec = WindowSpec(), weights=None) -> MetricsReport:
    n_raw = trace.agent_states[0].shape[0] if trace.agent_states else 0
    future = n_raw - trace.history_raw
    windows = slide_windows(future, spec)
    comps = compute_component_scores(trace, ref, windows)
    mean_ace, slope, ace = compute_ace(trace, ref, windows)
    w = weights or {n: 1.0 for n in ("kinematic", "interactive", "map", "placement")}
    return MetricsReport(
        components=comps,
        composite=composite_score(comps, w),
        mean_ace=mean_ace,
        ace_slope=slope,
        ace_trace=ace.tolist(),
        weights=w,
    )
