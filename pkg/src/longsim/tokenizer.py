"""Token spaces: motion primitives, map vectors, pose grids, control tokens.

Converts scenarios into per-agent token-level sequences plus the ordered
per-step spatial (insertion) sequences used for teacher forcing, and
provides the inverse decoders used during rollout.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .scenario import Scenario, wrap_angle

DELTA = 5  # raw steps per token (0.5 s at 10 Hz)

GRID_SIDE = 43
GRID_CELL = 3.0
GRID_HALF = GRID_SIDE // 2  # 21
N_POS = GRID_SIDE * GRID_SIDE  # 1849
CENTER_CELL = GRID_HALF * GRID_SIDE + GRID_HALF  # 924

N_HEADING = 120
HEADING_STEP = 2.0 * math.pi / N_HEADING  # 3 degrees

# Control token ids
BEGIN_MOTION = 0
ADD_AGENT = 1
KEEP_AGENT = 2
REMOVE_AGENT = 3
NULL = 4  # GT placeholder only, never a sampling outcome

CONTROL_NAMES = {0: "BEGIN_MOTION", 1: "ADD_AGENT", 2: "KEEP_AGENT", 3: "REMOVE_AGENT", 4: "NULL"}

# Motion-primitive distance: mean L2 over the 5 relative points plus this
# weight times the absolute rel-heading gap (0.5 rad ~ 1 m).
HEADING_WEIGHT = 2.0

VOCAB_FORMAT = "longsim-vocab-v1"


class TokenizerError(Exception):
    pass


class OutOfGridError(TokenizerError):
    pass


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------

def to_frame(points, frame_xy, frame_heading):
    """World points -> coordinates in the frame at frame_xy with x along frame_heading."""
    pts = np.asarray(points, dtype=float) - np.asarray(frame_xy, dtype=float)
    c, s = math.cos(frame_heading), math.sin(frame_heading)
    x = pts[..., 0] * c + pts[..., 1] * s
    y = -pts[..., 0] * s + pts[..., 1] * c
    return np.stack([x, y], axis=-1)


def from_frame(points, frame_xy, frame_heading):
    """Inverse of to_frame."""
    pts = np.asarray(points, dtype=float)
    c, s = math.cos(frame_heading), math.sin(frame_heading)
    x = pts[..., 0] * c - pts[..., 1] * s
    y = pts[..., 0] * s + pts[..., 1] * c
    return np.stack([x, y], axis=-1) + np.asarray(frame_xy, dtype=float)


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=float) + 0.5)


# ---------------------------------------------------------------------------
# Pose grid
# ---------------------------------------------------------------------------

def encode_position(point) -> int:
    """Ego-frame point -> grid cell id (row-major, x->col, y->row)."""
    x, y = float(point[0]), float(point[1])
    col = int(_round_half_up(x / GRID_CELL)) + GRID_HALF
    row = int(_round_half_up(y / GRID_CELL)) + GRID_HALF
    if not (0 <= col < GRID_SIDE and 0 <= row < GRID_SIDE):
        raise OutOfGridError(f"point ({x:.2f}, {y:.2f}) outside the position grid")
    return row * GRID_SIDE + col


def try_encode_position(point):
    """Like encode_position but returns None when the point is off-grid."""
    try:
        return encode_position(point)
    except OutOfGridError:
        return None


def decode_position(token_id: int) -> np.ndarray:
    if not (0 <= token_id < N_POS):
        raise TokenizerError(f"position id {token_id} out of range")
    row, col = divmod(int(token_id), GRID_SIDE)
    return np.array([(col - GRID_HALF) * GRID_CELL, (row - GRID_HALF) * GRID_CELL])


def encode_heading(angle: float) -> int:
    """Angle (rad) -> nearest 3-degree bin center with wraparound."""
    a = wrap_angle(float(angle)) % (2.0 * math.pi)
    return int(_round_half_up(a / HEADING_STEP)) % N_HEADING


def decode_heading(token_id: int) -> float:
    if not (0 <= token_id < N_HEADING):
        raise TokenizerError(f"heading id {token_id} out of range")
    return wrap_angle(token_id * HEADING_STEP)


# ---------------------------------------------------------------------------
# Temporal tokenization
# ---------------------------------------------------------------------------

def n_token_slots(n_steps: int) -> int:
    return n_steps // DELTA


def tokenize_time(valid: np.ndarray) -> np.ndarray:
    """Per-slot validity: slot k is valid iff raw steps 5k and 5(k+1) are both valid."""
    valid = np.asarray(valid).astype(bool)
    n = valid.shape[0]
    if n < DELTA + 1:
        raise TokenizerError(f"track of {n} steps is shorter than {DELTA + 1}")
    nt = n_token_slots(n)
    out = np.zeros(nt, dtype=bool)
    for k in range(nt):
        out[k] = valid[DELTA * k] and valid[DELTA * (k + 1)]
    return out


# ---------------------------------------------------------------------------
# Motion primitives and the k-disks vocabulary
# ---------------------------------------------------------------------------

@dataclass
class MotionPrimitive:
    rel_points: np.ndarray  # [5, 2] offsets in the frame at the segment start
    rel_heading: float  # total heading change over the segment

    def __post_init__(self):
        self.rel_points = np.asarray(self.rel_points, dtype=float)


@dataclass
class MotionVocabulary:
    entries: list  # list[MotionPrimitive]
    spec: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.entries)

    def points_array(self) -> np.ndarray:
        return np.stack([e.rel_points for e in self.entries])  # [V, 5, 2]

    def headings_array(self) -> np.ndarray:
        return np.array([e.rel_heading for e in self.entries])

    def content_hash(self) -> str:
        payload = json.dumps(
            {
                "spec": self.spec,
                "entries": [
                    {"points": e.rel_points.tolist(), "heading": e.rel_heading}
                    for e in self.entries
                ],
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def segment_to_primitive(xy: np.ndarray, heading: np.ndarray) -> MotionPrimitive:
    """0.5 s raw segment (6 poses: steps 5k..5(k+1)) -> agent-frame primitive."""
    rel = to_frame(xy[1:], xy[0], heading[0])
    dh = wrap_angle(heading[-1] - heading[0])
    return MotionPrimitive(rel_points=rel, rel_heading=float(dh))


def primitive_distance(a: MotionPrimitive, b: MotionPrimitive) -> float:
    d = np.linalg.norm(a.rel_points - b.rel_points, axis=1).mean()
    return float(d + HEADING_WEIGHT * abs(a.rel_heading - b.rel_heading))


def _distances_to_set(points, headings, set_points, set_headings):
    """Pairwise primitive distances [n_candidates, n_set]."""
    d = np.linalg.norm(points[:, None] - set_points[None, :], axis=-1).mean(axis=-1)
    return d + HEADING_WEIGHT * np.abs(headings[:, None] - set_headings[None, :])


def extract_segments(scenarios: Sequence[Scenario]) -> list:
    """All valid-slot 0.5 s primitives across a corpus, in scan order."""
    segs = []
    for s in scenarios:
        for a in s.agents:
            tv = tokenize_time(a.valid)
            for k in range(tv.shape[0]):
                if tv[k]:
                    lo, hi = DELTA * k, DELTA * (k + 1)
                    segs.append(segment_to_primitive(a.xy[lo:hi + 1], a.heading[lo:hi + 1]))
    return segs


def build_motion_vocabulary(scenarios: Sequence[Scenario], size: int = 2048,
                            k: int = 32, seed: int = 0) -> MotionVocabulary:
    """Greedy k-disks construction.

    Each round draws k candidate segments (without replacement) and admits
    the one maximizing its minimum distance to the current set; ties and the
    empty-set round resolve to the lowest candidate index. Duplicate-only
    rounds fall back to a full scan so coverage is guaranteed whenever the
    corpus has enough distinct segments.
    """
    segs = extract_segments(scenarios)
    if not segs:
        raise TokenizerError("corpus yields no valid segments")
    pts = np.stack([p.rel_points for p in segs])
    heads = np.array([p.rel_heading for p in segs])
    n = len(segs)

    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    min_dist = np.full(n, np.inf)

    def admit(idx: int):
        chosen.append(idx)
        d = _distances_to_set(pts, heads, pts[idx:idx + 1], heads[idx:idx + 1])[:, 0]
        np.minimum(min_dist, d, out=min_dist)

    admit(int(rng.integers(0, n)) if k < n else 0)
    stall = 0
    while len(chosen) < size:
        if k >= n or stall >= 64:
            cand = np.arange(n)
        else:
            cand = np.sort(rng.choice(n, size=k, replace=False))
        scores = min_dist[cand]
        best = int(cand[int(np.argmax(scores))])
        if min_dist[best] <= 0.0:
            if stall >= 64 or k >= n:
                raise TokenizerError(
                    f"insufficient distinct segments: {len(chosen)} found, {size} requested"
                )
            stall += 1
            continue
        stall = 0
        admit(best)

    spec = {
        "format": VOCAB_FORMAT,
        "delta": DELTA,
        "size": size,
        "k": k,
        "seed": seed,
        "point_weight": 1.0,
        "heading_weight": HEADING_WEIGHT,
    }
    return MotionVocabulary(entries=[segs[i] for i in chosen], spec=spec)


def encode_motion(segment: MotionPrimitive, vocab: MotionVocabulary) -> int:
    """Nearest vocabulary entry; ties break to the lowest index."""
    d = _distances_to_set(
        segment.rel_points[None], np.array([segment.rel_heading]),
        vocab.points_array(), vocab.headings_array(),
    )[0]
    return int(np.argmin(d))


def decode_motion(pose, token_id: int, vocab: MotionVocabulary):
    """Apply primitive token_id in the frame of pose -> next (x, y, heading)."""
    if not (0 <= token_id < vocab.size):
        raise TokenizerError(f"motion id {token_id} out of range")
    prim = vocab.entries[token_id]
    end = from_frame(prim.rel_points[-1], pose[:2], pose[2])
    return np.array([end[0], end[1], wrap_angle(pose[2] + prim.rel_heading)])


def decode_motion_path(pose, token_id: int, vocab: MotionVocabulary) -> np.ndarray:
    """All 5 intermediate raw-step (x, y) points of the decoded segment."""
    prim = vocab.entries[token_id]
    return from_frame(prim.rel_points, pose[:2], pose[2])


def save_vocabulary(vocab: MotionVocabulary, path) -> None:
    doc = {
        "format": VOCAB_FORMAT,
        "spec": vocab.spec,
        "hash": vocab.content_hash(),
        "entries": [
            {"points": e.rel_points.tolist(), "heading": e.rel_heading}
            for e in vocab.entries
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_vocabulary(path) -> MotionVocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != VOCAB_FORMAT:
        raise TokenizerError(f"unsupported vocabulary format {doc.get('format')!r}")
    entries = [
        MotionPrimitive(rel_points=np.array(e["points"]), rel_heading=float(e["heading"]))
        for e in doc["entries"]
    ]
    return MotionVocabulary(entries=entries, spec=doc["spec"])


# ---------------------------------------------------------------------------
# Map tokenization
# ---------------------------------------------------------------------------

MAP_SEGMENT_LENGTH = 5.0
KIND_IDS = {"lane_center": 0, "road_edge": 1, "crosswalk": 2, "stop_line": 3, "other": 4}


@dataclass
class MapTokenSet:
    start: np.ndarray  # [M, 2]
    end: np.ndarray  # [M, 2]
    kind: np.ndarray  # [M] int

    @property
    def size(self) -> int:
        return self.start.shape[0]

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.start + self.end)

    @property
    def direction(self) -> np.ndarray:
        d = self.end - self.start
        n = np.linalg.norm(d, axis=1, keepdims=True)
        return d / np.maximum(n, 1e-12)

    @property
    def angle(self) -> np.ndarray:
        d = self.end - self.start
        return np.arctan2(d[:, 1], d[:, 0])

    @property
    def length(self) -> np.ndarray:
        return np.linalg.norm(self.end - self.start, axis=1)


def _split_polyline(points: np.ndarray, seg_len: float):
    """Chords of arc length <= seg_len along the polyline."""
    diffs = np.diff(points, axis=0)
    lens = np.linalg.norm(diffs, axis=1)
    total = lens.sum()
    n_seg = max(1, int(math.ceil(total / seg_len - 1e-9)))
    cuts = np.linspace(0.0, total, n_seg + 1)
    cum = np.concatenate([[0.0], np.cumsum(lens)])
    out = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        pa = _point_at_arclen(points, cum, a)
        pb = _point_at_arclen(points, cum, b)
        if np.linalg.norm(pb - pa) > 1e-9:
            out.append((pa, pb))
    return out


def _point_at_arclen(points, cum, s):
    i = int(np.searchsorted(cum, s, side="right")) - 1
    i = min(max(i, 0), len(points) - 2)
    seg = cum[i + 1] - cum[i]
    t = 0.0 if seg <= 0 else (s - cum[i]) / seg
    return points[i] + t * (points[i + 1] - points[i])


def tokenize_map(polylines, ego_xy, cap: int = 1024,
                 segment_length: float = MAP_SEGMENT_LENGTH) -> MapTokenSet:
    """Split polylines into fixed-length vectors; keep the cap nearest to ego."""
    starts, ends, kinds = [], [], []
    for pl in polylines:
        for a, b in _split_polyline(pl.points, segment_length):
            starts.append(a)
            ends.append(b)
            kinds.append(KIND_IDS[pl.kind])
    if not starts:
        return MapTokenSet(start=np.zeros((0, 2)), end=np.zeros((0, 2)), kind=np.zeros(0, dtype=int))
    start = np.array(starts)
    end = np.array(ends)
    kind = np.array(kinds, dtype=int)
    if start.shape[0] > cap:
        mid = 0.5 * (start + end)
        d = np.linalg.norm(mid - np.asarray(ego_xy, dtype=float), axis=1)
        order = np.argsort(d, kind="stable")[:cap]
        order = np.sort(order)  # keep original ordering among the retained
        start, end, kind = start[order], end[order], kind[order]
    return MapTokenSet(start=start, end=end, kind=kind)


# ---------------------------------------------------------------------------
# Control sequences
# ---------------------------------------------------------------------------

def derive_control_sequence(validity: np.ndarray) -> np.ndarray:
    """Token-level controls from slot validity (Appendix-C style rules).

    ADD at the first valid slot with all-invalid predecessors, REMOVE at the
    last valid slot with all-invalid successors (demoted to KEEP when it
    falls on the final slot), KEEP strictly between, NULL elsewhere.
    """
    v = np.asarray(validity).astype(bool)
    n = v.shape[0]
    out = np.full(n, NULL, dtype=int)
    if not v.any():
        return out
    k1 = int(np.argmax(v))
    k2 = n - 1 - int(np.argmax(v[::-1]))
    out[k1] = ADD_AGENT
    for k in range(k1 + 1, k2):
        out[k] = KEEP_AGENT
    if k2 > k1:
        out[k2] = KEEP_AGENT if k2 == n - 1 else REMOVE_AGENT
    return out


def add_remove_slots(validity: np.ndarray):
    """(first valid slot, last valid slot) or (None, None) when never valid."""
    v = np.asarray(validity).astype(bool)
    if not v.any():
        return None, None
    k1 = int(np.argmax(v))
    k2 = v.shape[0] - 1 - int(np.argmax(v[::-1]))
    return k1, k2


# ---------------------------------------------------------------------------
# Occupancy grid
# ---------------------------------------------------------------------------

def build_occupancy_grid(agent_xy_world, ego_pose) -> np.ndarray:
    """Binary [N_POS] grid in the frame of ego_pose; ego's own cell is set."""
    grid = np.zeros(N_POS, dtype=np.int8)
    grid[CENTER_CELL] = 1
    pts = np.asarray(agent_xy_world, dtype=float).reshape(-1, 2)
    if pts.size:
        local = to_frame(pts, ego_pose[:2], ego_pose[2])
        for p in local:
            cell = try_encode_position(p)
            if cell is not None:
                grid[cell] = 1
    return grid


# ---------------------------------------------------------------------------
# Ground-truth tokenized scenario
# ---------------------------------------------------------------------------

@dataclass
class AgentTokens:
    index: int  # row index in the scenario agent list
    agent_id: str
    type_id: int  # 0 vehicle, 1 pedestrian, 2 cyclist
    shape: np.ndarray  # (3,)
    motion: np.ndarray  # [N] int, EMPTY-filled at invalid slots
    validity: np.ndarray  # [N] bool token-slot validity
    control: np.ndarray  # [N] int derived control sequence
    add_slot: int | None
    remove_slot: int | None
    poses: np.ndarray  # [N+1, 3] canonical token-replayed poses (nan where undefined)
    pose_defined: np.ndarray  # [N+1] bool


@dataclass
class SpatialInsertion:
    agent_index: int
    pos_token: int
    head_token: int
    ego_distance: float


@dataclass
class TokenizedScenario:
    n_slots: int
    agents: list  # list[AgentTokens], same order as scenario.agents
    ego_row: int
    map_tokens: MapTokenSet
    insertions: dict  # pose time p -> list[SpatialInsertion] (sorted by ego distance)
    skipped_out_of_grid: int

    def agent_count_at(self, p: int) -> int:
        return sum(1 for a in self.agents if a.pose_defined[p])


TYPE_IDS = {"vehicle": 0, "pedestrian": 1, "cyclist": 2}
EMPTY_MOTION_SLOT = -1  # marker inside AgentTokens.motion for invalid slots


def _canonical_trace(track, validity, vocab, start_pose):
    """Replay GT motion tokens from start_pose; re-anchor on raw poses across gaps.

    Returns (motion ids [N], poses [N+1, 3], pose_defined [N+1]).
    """
    n_slots = validity.shape[0]
    motion = np.full(n_slots, EMPTY_MOTION_SLOT, dtype=int)
    poses = np.full((n_slots + 1, 3), np.nan)
    defined = np.zeros(n_slots + 1, dtype=bool)
    k1, k2 = add_remove_slots(validity)
    if k1 is None:
        return motion, poses, defined
    poses[k1] = start_pose
    defined[k1] = True
    for k in range(k1, k2 + 1):
        if validity[k]:
            if not defined[k]:
                # gap re-anchor: take the raw pose at the slot start
                poses[k] = [track.xy[DELTA * k, 0], track.xy[DELTA * k, 1], track.heading[DELTA * k]]
                defined[k] = True
            lo, hi = DELTA * k, DELTA * (k + 1)
            seg = segment_to_primitive(track.xy[lo:hi + 1], track.heading[lo:hi + 1])
            tok = encode_motion(seg, vocab)
            motion[k] = tok
            poses[k + 1] = decode_motion(poses[k], tok, vocab)
            defined[k + 1] = True
    return motion, poses, defined


def tokenize_scenario(scenario: Scenario, vocab: MotionVocabulary,
                      map_cap: int = 1024) -> TokenizedScenario:
    """Full GT tokenization: per-agent sequences plus per-step insertion lists.

    Insertion pose tokens are expressed in the canonical (token-replayed) ego
    frame at the agent's first valid slot, and each inserted agent's canonical
    trace restarts from the decoded pose-token cell so training matches what
    rollout can actually reproduce. Agents landing outside the grid at their
    insertion step are counted and excluded from the spatial sequences.
    """
    n_slots = n_token_slots(scenario.n_steps)
    ego_track = scenario.agents[scenario.ego_index]
    ego_validity = tokenize_time(ego_track.valid)
    ego_start = np.array([ego_track.xy[0, 0], ego_track.xy[0, 1], ego_track.heading[0]])
    ego_motion, ego_poses, ego_defined = _canonical_trace(ego_track, ego_validity, vocab, ego_start)

    agents: list[AgentTokens] = []
    insertions: dict[int, list[SpatialInsertion]] = {}
    skipped = 0

    for idx, track in enumerate(scenario.agents):
        validity = tokenize_time(track.valid)
        control = derive_control_sequence(validity)
        k1, k2 = add_remove_slots(validity)
        if idx == scenario.ego_index:
            motion, poses, defined = ego_motion, ego_poses, ego_defined
        elif k1 is None:
            motion = np.full(n_slots, EMPTY_MOTION_SLOT, dtype=int)
            poses = np.full((n_slots + 1, 3), np.nan)
            defined = np.zeros(n_slots + 1, dtype=bool)
        else:
            raw_start = np.array([track.xy[DELTA * k1, 0], track.xy[DELTA * k1, 1],
                                  track.heading[DELTA * k1]])
            start_pose = raw_start
            if 1 <= k1 <= n_slots - 1 and ego_defined[k1]:
                ego_pose = ego_poses[k1]
                local = to_frame(raw_start[:2], ego_pose[:2], ego_pose[2])
                cell = try_encode_position(local)
                if cell is None:
                    skipped += 1
                else:
                    head_tok = encode_heading(raw_start[2] - ego_pose[2])
                    insertions.setdefault(k1, []).append(
                        SpatialInsertion(
                            agent_index=idx,
                            pos_token=cell,
                            head_token=head_tok,
                            ego_distance=float(np.linalg.norm(local)),
                        )
                    )
                    # trace restarts from the quantized pose the tokens encode
                    world = from_frame(decode_position(cell), ego_pose[:2], ego_pose[2])
                    start_pose = np.array([
                        world[0], world[1],
                        wrap_angle(ego_pose[2] + decode_heading(head_tok)),
                    ])
            motion, poses, defined = _canonical_trace(track, validity, vocab, start_pose)
        agents.append(
            AgentTokens(
                index=idx,
                agent_id=track.id,
                type_id=TYPE_IDS[track.type],
                shape=np.asarray(track.shape, dtype=float),
                motion=motion,
                validity=validity,
                control=control,
                add_slot=k1,
                remove_slot=k2,
                poses=poses,
                pose_defined=defined,
            )
        )

    for p in insertions:
        insertions[p].sort(key=lambda ins: (ins.ego_distance, ins.agent_index))

    ego_xy = ego_start[:2]
    map_tokens = tokenize_map(scenario.map, ego_xy, cap=map_cap)
    return TokenizedScenario(
        n_slots=n_slots,
        agents=agents,
        ego_row=scenario.ego_index,
        map_tokens=map_tokens,
        insertions=insertions,
        skipped_out_of_grid=skipped,
    )
