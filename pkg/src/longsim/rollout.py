"""Interleaved autoregressive inference.

Alternates a motion phase (parallel over agents; KEEP/REMOVE applied) with a
scene-generation phase (sequential ADD loop until BEGIN_MOTION), maintaining
the dynamic agent matrix with exact per-block feature caches so incremental
rollout reproduces the teacher-forced computation bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .model import (
    InterleavedModel, ScenarioFeatures, Z_INVALID, Z_TRANS, _pair_desc,
    displacement_delta,
)
from .scenario import Scenario, wrap_angle
from .tokenizer import (
    ADD_AGENT, BEGIN_MOTION, CENTER_CELL, DELTA, KEEP_AGENT, N_POS,
    REMOVE_AGENT, MotionVocabulary, TokenizedScenario, build_occupancy_grid,
    decode_heading, decode_motion, decode_motion_path, decode_position,
    encode_heading, from_frame, to_frame, tokenize_scenario, try_encode_position,
)

HISTORY_RAW_STEPS = 11  # 1.1 s at 10 Hz
HISTORY_POSE_TIMES = 3  # pose times 0, 1, 2 -> 2 context motion tokens

TYPE_NAMES = {0: "vehicle", 1: "pedestrian", 2: "cyclist"}


class RolloutError(Exception):
    pass


@dataclass
class SamplingPolicy:
    motion_temperature: float = 1.0
    motion_topk: int = 0  # 0 = full categorical
    position_topk: int = 10
    heading_argmax: bool = True
    type_argmax: bool = True
    control_temperature: float = 1.0

    def __post_init__(self):
        if self.motion_temperature <= 0 or self.control_temperature <= 0:
            raise ValueError("temperatures must be > 0")
        if self.position_topk < 1:
            raise ValueError("position top-K must be >= 1")


def _softmax(logits):
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def sample_token(logits, rng, top_k: int = 0, temperature: float = 1.0,
                 argmax: bool = False, support=None) -> int:
    """Generic token sampler.

    support restricts the candidate ids (renormalized); top_k keeps the K
    largest logits; argmax (or K=1) is deterministic with lowest-index
    tie-break.
    """
    logits = np.asarray(logits, dtype=float)
    ids = np.arange(logits.shape[0]) if support is None else np.asarray(support, dtype=int)
    vals = logits[ids]
    if argmax or top_k == 1:
        return int(ids[int(np.argmax(vals))])
    if top_k and top_k < ids.size:
        order = np.argsort(-vals, kind="stable")[:top_k]
        ids, vals = ids[order], vals[order]
    probs = _softmax(vals / temperature)
    choice = int(rng.choice(ids.size, p=probs))
    return int(ids[choice])


@dataclass
class AgentState:
    key: int  # stable row key
    agent_id: str
    type_id: int
    shape: np.ndarray
    origin: str  # "ego" | "initial" | "inserted"
    first_col: int  # first materialized (valid) column
    poses: dict  # col -> np.ndarray [3]
    motions: dict  # col -> incoming motion token at that column
    removed_at: int | None = None  # last pose column when REMOVE was sampled

    def latest_pose(self, col: int):
        c = col
        while c >= 0:
            if c in self.poses:
                return self.poses[c]
            c -= 1
        raise RolloutError("agent has no pose")


@dataclass
class RolloutEvent:
    kind: str  # "add" | "remove" | "add_rejected"
    pose_time: int
    agent_id: str
    ego_distance: float
    pose: tuple


@dataclass
class Rollout:
    horizon: int
    n_cols: int
    agents: list  # list of dicts with states arrays over raw steps
    events: list  # list[RolloutEvent]
    active_counts: list  # per pose time (after the scene phase)
    meta: dict


class RolloutState:
    """Dynamic agent matrix plus per-block feature caches."""

    def __init__(self, model: InterleavedModel, vocab: MotionVocabulary,
                 policy: SamplingPolicy, seed: int, ego_mode: str = "model",
                 motion_only: bool = False):
        if ego_mode not in ("model", "log"):
            raise RolloutError(f"unknown ego mode {ego_mode!r}")
        self.model = model
        self.vocab = vocab
        self.policy = policy
        self.rng = np.random.default_rng(seed)
        self.ego_mode = ego_mode
        self.motion_only = motion_only
        self.agents: list[AgentState] = []
        self.ego_key: int = -1
        self.next_key = 0
        self.cursor = 0  # latest pose time with poses materialized
        self.events: list[RolloutEvent] = []
        self.active_counts: list[int] = []
        # caches: x0 embeddings and per-block inputs, keyed [agent_key][col]
        nb = model.cfg.motion_blocks
        self.cache = [dict() for _ in range(nb + 1)]  # cache[b][key][col] -> np.ndarray [D]
        self.map_feats = None
        self.map_mid = None
        self.map_ang = None
        self.gt_ego_motion = None  # for log-replay ego mode
        self.n_context_motion_tokens = 0

    # ------------------------------------------------------------------

    def _new_agent(self, agent_id, type_id, shape, origin, first_col) -> AgentState:
        a = AgentState(key=self.next_key, agent_id=agent_id, type_id=int(type_id),
                       shape=np.asarray(shape, dtype=float), origin=origin,
                       first_col=first_col, poses={}, motions={})
        self.next_key += 1
        self.agents.append(a)
        for c in self.cache:
            c[a.key] = {}
        return a

    def _ego(self) -> AgentState:
        return next(a for a in self.agents if a.key == self.ego_key)

    def active(self) -> list:
        return [a for a in self.agents if a.removed_at is None]

    # ------------------------------------------------------------------
    # Embeddings
    # ------------------------------------------------------------------

    def _column_embedding_inputs(self, agent: AgentState, col: int):
        """Embedding inputs for a materialized (valid) column of an agent."""
        m = self.model
        ego = self._ego()
        pose = agent.poses[col]
        ego_pose = ego.poses[col]
        motion_id = agent.motions.get(col, m.EMPTY_MOTION)
        local = to_frame(pose[:2], ego_pose[:2], ego_pose[2])
        cell = try_encode_position(local)
        pos_id = cell if cell is not None else m.OUT_OF_GRID_POS
        head_id = encode_heading(pose[2] - ego_pose[2])
        if (col - 1) in agent.poses:
            delta = displacement_delta(agent.poses[col - 1], pose)
        else:
            delta = (Z_TRANS, Z_TRANS)
        return motion_id, pos_id, head_id, 1, agent.type_id, agent.shape, delta

    def _empty_embedding_inputs(self, agent: AgentState, col: int):
        # pre-insertion columns are invalid-invalid pairs throughout
        delta = (-Z_INVALID, -Z_INVALID)
        return self.model.EMPTY_MOTION, CENTER_CELL, 0, 0, agent.type_id, agent.shape, delta

    def _embed_columns_batch(self, rows):
        """rows: list of (agent, col, is_valid). Returns np [len, D]."""
        m = self.model
        mot, pos, hd, val, typ, shp, dlt = [], [], [], [], [], [], []
        for agent, col, is_valid in rows:
            f = self._column_embedding_inputs(agent, col) if is_valid \
                else self._empty_embedding_inputs(agent, col)
            mot.append(f[0]); pos.append(f[1]); hd.append(f[2]); val.append(f[3])
            typ.append(f[4]); shp.append(f[5]); dlt.append(f[6])
        with nn.no_grad():
            emb = m.fuse_embedding(
                np.array(mot), np.array(pos), np.array(hd), np.array(val),
                np.array(typ), np.stack(shp), np.array(dlt),
            )
        return emb.data

    # ------------------------------------------------------------------
    # Motion stack, incremental
    # ------------------------------------------------------------------

    def _backfill_empty_row(self, agent: AgentState, up_to_col: int):
        """Pre-insertion columns 0..up_to_col-1 as empty tokens, all blocks.

        The chain is scene-independent (empty columns admit no agent/map
        context and their temporal descriptors are the invalid-pair
        constants), so it can be computed block-parallel over columns.
        """
        if up_to_col <= 0:
            return
        m = self.model
        W = m.cfg.t_window
        n = up_to_col
        x = self._embed_columns_batch([(agent, c, False) for c in range(n)])  # [n, D]
        const_desc = np.full(4, -Z_INVALID)
        with nn.no_grad():
            for b in range(m.cfg.motion_blocks):
                for c in range(n):
                    self.cache[b][agent.key][c] = x[c]
                pairs = []
                for c in range(n):
                    lo = max(0, c - W)
                    pairs.append([(cc, tuple(const_desc)) for cc in range(lo, c)])
                from .model import _pad_pairs
                idx, mask, desc = _pad_pairs(n, pairs)
                rel = m.pe_t(desc)
                xt = m.motion_t[b](nn.Tensor(x), nn.Tensor(x), idx, mask, rel)
                no_ctx = np.zeros((n, 1), dtype=bool)
                zeros_idx = np.zeros((n, 1), dtype=int)
                zero_rel = m.pe_aa(np.zeros((n, 1, 4)))
                xa = m.motion_aa[b](xt, xt, zeros_idx, no_ctx, zero_rel)
                zero_rel_m = m.pe_ma(np.zeros((n, 1, 4)))
                ctx = self.map_feats if self.map_feats.shape[0] else nn.Tensor(np.zeros((1, m.cfg.d_model)))
                xm = m.motion_ma[b](xa, ctx, zeros_idx, no_ctx, zero_rel_m)
                x = xm.data
            for c in range(n):
                self.cache[m.cfg.motion_blocks][agent.key][c] = x[c]

    def _motion_forward_column(self, col: int):
        """Run the motion stack for all active agents at column `col`.

        Returns (motion_logits [A, Vm], control_logits [A, 4]) and fills the
        block caches for this column.
        """
        from .model import _pad_pairs
        m = self.model
        cfg = m.cfg
        act = self.active()
        A = len(act)
        x = self._embed_columns_batch([(a, col, True) for a in act])
        for i, a in enumerate(act):
            self.cache[0][a.key][col] = x[i]

        # temporal pairs against each agent's own cached columns
        W = cfg.t_window
        lo = max(0, col - W)
        ctx_cols = list(range(lo, col))
        nc = len(ctx_cols)

        # agent-agent pairs at this column
        poses = np.stack([a.poses[col] for a in act])
        aa_pairs = []
        for i in range(A):
            plist = []
            for j in range(A):
                if i == j:
                    continue
                d = _pair_desc(poses[j], poses[j, 2], 0, poses[i], poses[i, 2], 0)
                if d[0] <= cfg.r_a2a:
                    plist.append((j, d))
            aa_pairs.append(plist)
        aa_idx, aa_mask, aa_desc = _pad_pairs(A, aa_pairs)

        ma_pairs = []
        for i in range(A):
            plist = []
            if self.map_mid.shape[0]:
                dist = np.hypot(self.map_mid[:, 0] - poses[i, 0], self.map_mid[:, 1] - poses[i, 1])
                for j in np.flatnonzero(dist <= cfg.r_m2a):
                    plist.append((int(j), _pair_desc(self.map_mid[j], self.map_ang[j], 0,
                                                     poses[i], poses[i, 2], 0)))
            ma_pairs.append(plist)
        ma_idx, ma_mask, ma_desc = _pad_pairs(A, ma_pairs)

        with nn.no_grad():
            rel_aa = m.pe_aa(aa_desc)
            rel_ma = m.pe_ma(ma_desc)
            map_ctx = self.map_feats if self.map_feats.shape[0] else nn.Tensor(np.zeros((1, cfg.d_model)))
            cur = nn.Tensor(x)
            for b in range(cfg.motion_blocks):
                # gather this block's temporal keys from the cache; columns a
                # row never materialized (pathological validity gaps) are
                # skipped rather than invented
                if nc:
                    keys = np.stack([
                        np.stack([self.cache[b][a.key].get(c, np.zeros(cfg.d_model, dtype=x.dtype))
                                  for c in ctx_cols]) for a in act
                    ])  # [A, nc, D]
                    t_pairs = []
                    for i, a in enumerate(act):
                        plist = []
                        for s, c in enumerate(ctx_cols):
                            if c not in self.cache[b][a.key]:
                                continue
                            c_valid = c in a.poses and c >= a.first_col
                            if c_valid:
                                d = _pair_desc(a.poses[c], a.poses[c][2], c, poses[i], poses[i, 2], col)
                            else:
                                # query is valid at inference, context invalid
                                d = (-Z_TRANS,) * 4
                            plist.append((i * nc + s, d))
                        t_pairs.append(plist)
                    t_idx, t_mask, t_desc = _pad_pairs(A, t_pairs)
                    rel_t = m.pe_t(t_desc)
                    flat_keys = nn.Tensor(keys.reshape(A * nc, cfg.d_model))
                    cur = m.motion_t[b](cur, flat_keys, t_idx, t_mask, rel_t)
                else:
                    no_ctx = np.zeros((A, 1), dtype=bool)
                    zi = np.zeros((A, 1), dtype=int)
                    cur = m.motion_t[b](cur, cur, zi, no_ctx, m.pe_t(np.zeros((A, 1, 4))))
                cur = m.motion_aa[b](cur, cur, aa_idx, aa_mask, rel_aa)
                cur = m.motion_ma[b](cur, map_ctx, ma_idx, ma_mask, rel_ma)
                for i, a in enumerate(act):
                    self.cache[b + 1][a.key][col] = cur.data[i]
            motion_logits = m.motion_head(cur).data
            control_logits = m.control_head(cur).data
        return act, motion_logits, control_logits

    # ------------------------------------------------------------------
    # Scene phase
    # ------------------------------------------------------------------

    def _scene_context(self, col: int):
        """(rows, poses, embeddings) of the pre-deletion layout at pose time col."""
        rows = []
        for a in self.agents:
            if a.removed_at is not None and a.removed_at < col - 1:
                continue
            if a.first_col > col:
                continue
            rows.append(a)
        poses = np.stack([a.latest_pose(col) for a in rows]) if rows else np.zeros((0, 3))
        # the post-motion column embeddings may not exist yet; compute them
        # here (they double as the next motion phase's inputs)
        fresh = [a for a in rows if col in a.poses and col not in self.cache[0][a.key]]
        if fresh:
            emb = self._embed_columns_batch([(a, col, True) for a in fresh])
            for i, a in enumerate(fresh):
                self.cache[0][a.key][col] = emb[i]
        embs = []
        for a in rows:
            c = col if col in a.poses else max(k for k in a.poses)
            embs.append(self.cache[0][a.key][c])
        return rows, poses, embs

    def _scene_phase(self, col: int):
        """ADD loop at pose time `col`; returns list of inserted AgentState."""
        from .model import _pad_pairs  # noqa: F401
        m = self.model
        cfg = m.cfg
        ego = self._ego()
        ego_pose = ego.poses[col]
        rows, poses, embs = self._scene_context(col)
        inserted = []
        n_adds = 0
        while True:
            if len(self.active()) >= cfg.max_agents or n_adds >= cfg.max_adds_per_step:
                self.events.append(RolloutEvent("add_rejected", col, "", 0.0, ()))
                break
            ctrl, pos_feat = self._scene_query(col, ego_pose, rows, poses, embs, phase="position")
            control = sample_token(ctrl, self.rng, temperature=self.policy.control_temperature,
                                   support=(ADD_AGENT, BEGIN_MOTION))
            assert control in (ADD_AGENT, BEGIN_MOTION)
            if control == BEGIN_MOTION:
                break
            with nn.no_grad():
                pos_logits = m.position_head(pos_feat).data[0]
            cell = sample_token(pos_logits, self.rng, top_k=self.policy.position_topk)
            cell_world = from_frame(decode_position(cell), ego_pose[:2], ego_pose[2])
            q_pose = np.array([cell_world[0], cell_world[1], ego_pose[2]])
            head_feat = self._scene_query(col, q_pose, rows, poses, embs,
                                          phase="heading", pos_token=cell)
            with nn.no_grad():
                head_logits = m.heading_head(head_feat).data[0]
                shape_pred, type_logits = m.attribute_forward(head_feat)
            head_tok = sample_token(head_logits, self.rng, argmax=self.policy.heading_argmax,
                                    top_k=0 if not self.policy.heading_argmax else 1)
            type_id = sample_token(type_logits.data[0], self.rng, argmax=self.policy.type_argmax,
                                   top_k=0 if not self.policy.type_argmax else 1)
            shape = np.maximum(shape_pred.data[0], 1e-3)
            heading = wrap_angle(ego_pose[2] + decode_heading(head_tok))
            agent = self._new_agent(f"ins{self.next_key}", type_id, shape, "inserted", col)
            agent.poses[col] = np.array([q_pose[0], q_pose[1], heading])
            self._backfill_empty_row(agent, col)
            emb = self._embed_columns_batch([(agent, col, True)])
            self.cache[0][agent.key][col] = emb[0]
            dist = float(np.linalg.norm(decode_position(cell)))
            self.events.append(RolloutEvent("add", col, agent.agent_id, dist,
                                            tuple(agent.poses[col])))
            rows = rows + [agent]
            poses = np.vstack([poses, agent.poses[col][None]]) if poses.size else agent.poses[col][None]
            embs = embs + [emb[0]]
            inserted.append(agent)
            n_adds += 1
        return inserted

    def _scene_query(self, col, q_pose, rows, poses, embs, phase, pos_token=None):
        """One scene-stack pass for a single query at q_pose."""
        m = self.model
        cfg = m.cfg
        with nn.no_grad():
            if phase == "position":
                query = m.query_embedding()
            else:
                query = m.query_embedding(pos_token=pos_token)
            pool_rows = [np.asarray(e) for e in embs] + [query.data[0]]
            pool = nn.Tensor(np.stack(pool_rows)) if pool_rows else query
            plist = []
            for i in range(len(rows)):
                d = _pair_desc(poses[i], poses[i, 2], 0, q_pose, q_pose[2], 0)
                if d[0] <= cfg.r_q2a:
                    plist.append((i, d))
            plist.append((len(rows), (0.0, 0.0, 0.0, 0.0)))
            radius = cfg.r_q2m_pos if phase == "position" else cfg.r_q2m_head
            mlist = []
            if self.map_mid.shape[0]:
                dist = np.hypot(self.map_mid[:, 0] - q_pose[0], self.map_mid[:, 1] - q_pose[1])
                for j in np.flatnonzero(dist <= radius):
                    mlist.append((int(j), _pair_desc(self.map_mid[j], self.map_ang[j], 0,
                                                     q_pose, q_pose[2], 0)))
            map_ctx = self.map_feats if self.map_feats.shape[0] else nn.Tensor(np.zeros((1, cfg.d_model)))
            if phase == "position":
                grid = build_occupancy_grid(poses[:, :2] if poses.size else np.zeros((0, 2)),
                                            self._ego().poses[col])
                gf = m.encode_occupancy(grid[None])
                feat = m.scene_queries_forward(query, pool, [plist], [mlist],
                                               grid_feats=gf, grid_ids=np.zeros(1, dtype=int),
                                               map_feats=map_ctx, phase="position")
                ctrl = m.control_head(feat).data[0]
                return ctrl, feat
            feat = m.scene_queries_forward(query, pool, [plist], [mlist],
                                           map_feats=map_ctx, phase="heading")
            return feat


def init_rollout(scenario: Scenario, ts: TokenizedScenario, model: InterleavedModel,
                 vocab: MotionVocabulary, policy: SamplingPolicy, horizon: int,
                 seed: int, ego_mode: str = "model", motion_only: bool = False) -> RolloutState:
    """Load the 1.1 s history (2 context motion tokens) into the matrix."""
    if scenario.n_steps < HISTORY_RAW_STEPS:
        raise RolloutError(
            f"scenario has {scenario.n_steps} raw steps, need >= {HISTORY_RAW_STEPS}")
    state = RolloutState(model, vocab, policy, seed, ego_mode=ego_mode, motion_only=motion_only)
    with nn.no_grad():
        state.map_feats = model.encode_map(ts.map_tokens)
    state.map_mid = ts.map_tokens.midpoint
    state.map_ang = ts.map_tokens.angle
    h_end = HISTORY_POSE_TIMES - 1  # pose time 2

    for at in ts.agents:
        if at.add_slot is None:
            continue
        if at.add_slot > h_end or at.remove_slot < h_end:
            continue  # not valid at the history boundary slot
        origin = "ego" if at.index == ts.ego_row else "initial"
        a = state._new_agent(at.agent_id, at.type_id, at.shape, origin, at.add_slot)
        if origin == "ego":
            state.ego_key = a.key
            if ego_mode == "log":
                state.gt_ego_motion = at.motion.copy()
        for c in range(at.add_slot, h_end + 1):
            if at.pose_defined[c]:
                a.poses[c] = at.poses[c].copy()
            if c > at.add_slot and at.motion[c - 1] >= 0:
                a.motions[c] = int(at.motion[c - 1])
    if state.ego_key < 0:
        raise RolloutError("ego agent missing from history")

    # exact per-block caches for the history columns
    for a in state.agents:
        state._backfill_empty_row(a, a.first_col)
    for col in range(0, h_end + 1):
        # agents materialize exactly at their first column; absent rows were
        # backfilled above. Run the stack over the agents present at `col`.
        present = [a for a in state.agents if col >= a.first_col and col in a.poses]
        saved_agents = state.agents
        state.agents = present
        state._motion_forward_column(col)
        state.agents = saved_agents
    state.cursor = h_end
    state.n_context_motion_tokens = h_end  # 2 motion tokens precede pose time 2
    state.active_counts.append(len(state.active()))
    return state


def step_rollout(state: RolloutState):
    """One alternation: motion phase at the cursor, then the scene phase."""
    t = state.cursor
    act, motion_logits, control_logits = state._motion_forward_column(t)
    policy = state.policy
    removed = []
    for i, a in enumerate(act):
        if state.motion_only or a.key == state.ego_key:
            control = KEEP_AGENT
        else:
            control = sample_token(control_logits[i], state.rng,
                                   temperature=policy.control_temperature,
                                   support=(KEEP_AGENT, REMOVE_AGENT))
            assert control in (KEEP_AGENT, REMOVE_AGENT)
        if control == REMOVE_AGENT:
            removed.append(a)
            continue
        if (a.key == state.ego_key and state.gt_ego_motion is not None
                and t < state.gt_ego_motion.shape[0] and state.gt_ego_motion[t] >= 0):
            tok = int(state.gt_ego_motion[t])
        else:
            tok = sample_token(motion_logits[i], state.rng,
                               top_k=policy.motion_topk,
                               temperature=policy.motion_temperature)
        a.motions[t + 1] = tok
        a.poses[t + 1] = decode_motion(a.poses[t], tok, state.vocab)

    # scene phase at the post-motion pose time; removed rows are still part
    # of the layout and are deleted afterwards
    if not state.motion_only:
        state._scene_phase(t + 1)
    for a in removed:
        a.removed_at = t
        ego_pose = state._ego().poses.get(t, state._ego().latest_pose(t))
        d = float(np.linalg.norm(a.poses[t][:2] - ego_pose[:2]))
        state.events.append(RolloutEvent("remove", t, a.agent_id, d, tuple(a.poses[t])))
    state.cursor = t + 1
    state.active_counts.append(len(state.active()))


def run_rollout(model: InterleavedModel, scenario: Scenario, vocab: MotionVocabulary,
                policy: SamplingPolicy, horizon: int, seed: int,
                ego_mode: str = "model", motion_only: bool = False,
                ts: TokenizedScenario | None = None) -> Rollout:
    """Exactly `horizon` motion/scene alternations from the 1.1 s history."""
    if ts is None:
        ts = tokenize_scenario(scenario, vocab, map_cap=model.cfg.map_cap)
    state = init_rollout(scenario, ts, model, vocab, policy, horizon, seed,
                         ego_mode=ego_mode, motion_only=motion_only)
    for _ in range(horizon):
        step_rollout(state)
    return finalize_rollout(state, horizon, seed, ego_mode, motion_only)


def finalize_rollout(state: RolloutState, horizon: int, seed: int,
                     ego_mode: str, motion_only: bool) -> Rollout:
    """Expand token-level traces to 10 Hz states and package the result."""
    n_cols = state.cursor
    n_raw = n_cols * DELTA + 1
    agents_out = []
    for a in state.agents:
        states = np.zeros((n_raw, 4))
        cols = sorted(a.poses)
        for c in cols:
            r = c * DELTA
            if r < n_raw:
                states[r, 0:3] = a.poses[c]
                states[r, 3] = 1.0
        for c in cols:
            if (c + 1) in a.poses and (c + 1) in a.motions:
                path = decode_motion_path(a.poses[c], a.motions[c + 1], state.vocab)
                h0, h1 = a.poses[c][2], a.poses[c + 1][2]
                dh = wrap_angle(h1 - h0)
                for s in range(1, DELTA):
                    r = c * DELTA + s
                    if r < n_raw:
                        states[r, 0:2] = path[s - 1]
                        states[r, 2] = wrap_angle(h0 + dh * s / DELTA)
                        states[r, 3] = 1.0
        agents_out.append({
            "id": a.agent_id,
            "type": TYPE_NAMES[a.type_id],
            "shape": [float(v) for v in a.shape],
            "origin": a.origin,
            "states": states,
        })
    events = [e for e in state.events if e.kind in ("add", "remove")]
    return Rollout(
        horizon=horizon,
        n_cols=n_cols,
        agents=agents_out,
        events=events,
        active_counts=list(state.active_counts),
        meta={
            "seed": seed,
            "ego_mode": ego_mode,
            "motion_only": motion_only,
            "ego_id": state._ego().agent_id,
            "add_rejections": sum(1 for e in state.events if e.kind == "add_rejected"),
        },
    )


def save_rollout(rollout: Rollout, path) -> None:
    doc = {
        "format": "longsim-rollout-v1",
        "meta": rollout.meta,
        "horizon": rollout.horizon,
        "n_cols": rollout.n_cols,
        "active_counts": rollout.active_counts,
        "agents": [
            {**a, "states": np.asarray(a["states"]).tolist()} for a in rollout.agents
        ],
        "events": [
            {"kind": e.kind, "pose_time": e.pose_time, "raw_step": e.pose_time * DELTA,
             "agent_id": e.agent_id, "ego_distance": e.ego_distance,
             "pose": list(e.pose)}
            for e in rollout.events
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_rollout(path) -> Rollout:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "longsim-rollout-v1":
        raise RolloutError(f"unsupported rollout format {doc.get('format')!r}")
    events = [
        RolloutEvent(e["kind"], int(e["pose_time"]), e["agent_id"],
                     float(e["ego_distance"]), tuple(e["pose"]))
        for e in doc["events"]
    ]
    agents = [{**a, "states": np.array(a["states"])} for a in doc["agents"]]
    return Rollout(horizon=doc["horizon"], n_cols=doc["n_cols"], agents=agents,
                   events=events, active_counts=doc["active_counts"], meta=doc["meta"])
