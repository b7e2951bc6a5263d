"""The interleaved transformer: embedding fusion, map encoder, motion and
scene stacks, occupancy-grid encoder, agent query and output heads.

Everything positional enters either as ego-frame quantities or as relative
descriptors between (query, context) pairs, which makes the network exactly
SE(2)-invariant. Invalid slots are embedded with constant substitutes so
their content is inert.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import nn
from .nn import (
    Dense, Embedding, FourierEmbedding, LayerNorm, MLP, Module, Param,
    add, attention_core, concat, gather, mul, reshape, softplus,
)
from .scenario import wrap_angle
from .tokenizer import (
    CENTER_CELL, GRID_CELL, GRID_HALF, GRID_SIDE, N_HEADING, N_POS,
    MapTokenSet, TokenizedScenario, decode_position, encode_heading,
    to_frame, try_encode_position,
)

# pairwise-difference substitution constants for invalid slots
Z_TRANS = 1.0
Z_INVALID = -2.0

N_CONTROL = 4
N_TYPES = 3


@dataclass
class ModelConfig:
    d_model: int = 128
    n_heads: int = 8
    head_dim: int = 16
    motion_blocks: int = 6
    scene_blocks: int = 3
    map_blocks: int = 3
    ffn_hidden: int = 1024
    freq_bands: int = 64
    t_window: int = 12
    r_a2a: float = 60.0
    r_m2a: float = 30.0
    r_m2m: float = 10.0
    r_q2a: float = 10.0
    r_q2m_pos: float = 75.0
    r_q2m_head: float = 10.0
    vocab_motion: int = 2048
    map_cap: int = 1024
    max_agents: int = 128
    max_adds_per_step: int = 16

    def __post_init__(self):
        if self.n_heads * self.head_dim != self.d_model:
            raise ValueError("n_heads * head_dim must equal d_model")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _desc_const(c_valid, q_valid):
    """Descriptor substitution for pairs with an invalid side (context - query)."""
    if c_valid and q_valid:
        return None
    if c_valid and not q_valid:
        return Z_TRANS
    if q_valid and not c_valid:
        return -Z_TRANS
    return -Z_INVALID


_SEAM_EPS = 1e-9


def _wrap_scalar(a: float) -> float:
    """Wrap to (-pi, pi], snapping float noise around the +/-pi seam to +pi.

    Quantized headings make relative angles of exactly pi common (oncoming
    traffic); without the snap, sub-ulp jitter under rigid transforms flips
    the wrapped sign by 2*pi.
    """
    r = math.fmod(a + math.pi, 2.0 * math.pi)
    if r <= 0.0:
        r += 2.0 * math.pi
    if r < _SEAM_EPS or r > 2.0 * math.pi - _SEAM_EPS:
        r = 2.0 * math.pi
    return r - math.pi


def _pair_desc(pos_c, head_c, t_c, pos_q, head_q, t_q):
    """[dp, dd, dtheta, dt] for a valid (context, query) pair."""
    dx = pos_c[0] - pos_q[0]
    dy = pos_c[1] - pos_q[1]
    dp = math.hypot(dx, dy)
    dd = _wrap_scalar(math.atan2(dy, dx) - float(head_q)) if dp > 1e-9 else 0.0
    dth = _wrap_scalar(float(head_c) - float(head_q))
    return (dp, dd, dth, float(t_c - t_q))


def _wrap_arr(a):
    r = np.mod(a + np.pi, 2.0 * np.pi)
    r = np.where((r < _SEAM_EPS) | (r > 2.0 * np.pi - _SEAM_EPS), 2.0 * np.pi, r)
    return r - np.pi


def _desc_block(pos_c, head_c, pos_q, head_q, dt=None):
    """Vectorized descriptors (context - query); inputs broadcast together.

    pos_*: [..., 2]; head_*: [...]; dt: [...] or None (zeros). -> [..., 4]
    """
    dx = pos_c[..., 0] - pos_q[..., 0]
    dy = pos_c[..., 1] - pos_q[..., 1]
    dp = np.hypot(dx, dy)
    dd = np.where(dp > 1e-9, _wrap_arr(np.arctan2(dy, dx) - head_q), 0.0)
    dth = _wrap_arr(head_c - head_q)
    if dt is None:
        dt = np.zeros_like(dp)
    return np.stack(np.broadcast_arrays(dp, dd, dth, dt), axis=-1)


def _pad_blocks(n_q: int, blocks):
    """blocks[i] = (index array, desc array [n, 4]) -> padded (idx, mask, desc)."""
    cmax = max((len(b[0]) for b in blocks), default=0)
    cmax = max(cmax, 1)
    idx = np.zeros((n_q, cmax), dtype=int)
    mask = np.zeros((n_q, cmax), dtype=bool)
    desc = np.zeros((n_q, cmax, 4))
    for qi, (ii, dd) in enumerate(blocks):
        n = len(ii)
        if n:
            idx[qi, :n] = ii
            mask[qi, :n] = True
            desc[qi, :n] = dd
    return idx, mask, desc


class AttentionLayer(Module):
    """Pre-norm attention sublayer (with additive relative encodings added to
    keys and values) followed by a pre-norm feed-forward sublayer."""

    def __init__(self, rng, cfg: ModelConfig, name: str):
        d = cfg.d_model
        self.cfg = cfg
        self.ln_q = LayerNorm(d, name=f"{name}.ln_q")
        self.ln_kv = LayerNorm(d, name=f"{name}.ln_kv")
        self.phi_q = Dense(rng, d, d, name=f"{name}.q")
        self.phi_k = Dense(rng, d, d, name=f"{name}.k")
        self.phi_v = Dense(rng, d, d, name=f"{name}.v")
        self.out = Dense(rng, d, d, name=f"{name}.o")
        self.ln_f = LayerNorm(d, name=f"{name}.ln_f")
        self.ffn = MLP(rng, (d, cfg.ffn_hidden, d), name=f"{name}.ffn")

    def __call__(self, q_feat, kv_feat, idx, mask, rel):
        """q_feat [Q, D]; kv_feat [C, D]; idx [Q, Cmax] int; mask [Q, Cmax]
        bool; rel [Q, Cmax, D] relative encodings. Queries with no admitted
        context pass through the attention branch unchanged."""
        mask = np.asarray(mask, dtype=bool)
        has_ctx = mask.any(axis=1).astype(q_feat.data.dtype)[:, None]
        qn = self.ln_q(q_feat)
        kvn = self.ln_kv(kv_feat)
        k_pad = gather(self.phi_k(kvn), idx)
        v_pad = gather(self.phi_v(kvn), idx)
        k2 = add(k_pad, rel)
        v2 = add(v_pad, rel)
        att = attention_core(self.phi_q(qn), k2, v2, mask, self.cfg.n_heads)
        x = add(q_feat, mul(self.out(att), has_ctx))
        return add(x, self.ffn(self.ln_f(x)))


def _pad_pairs(n_q: int, pairs_per_q: list):
    """pairs_per_q: list of lists of (ctx_index, desc tuple). Returns padded
    (idx [Q, C], mask [Q, C], desc [Q, C, 4]) with zero-filled padding."""
    cmax = max((len(p) for p in pairs_per_q), default=0)
    cmax = max(cmax, 1)
    idx = np.zeros((n_q, cmax), dtype=int)
    mask = np.zeros((n_q, cmax), dtype=bool)
    desc = np.zeros((n_q, cmax, 4))
    for qi, plist in enumerate(pairs_per_q):
        for s, (ci, d) in enumerate(plist):
            idx[qi, s] = ci
            mask[qi, s] = True
            desc[qi, s] = d
    return idx, mask, desc


class InterleavedModel(Module):
    EMPTY_MOTION: int
    QUERY_MOTION: int
    OUT_OF_GRID_POS: int
    QUERY_TYPE = 3

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.cfg = config
        rng = np.random.default_rng(seed)
        d = config.d_model
        self.EMPTY_MOTION = config.vocab_motion
        self.QUERY_MOTION = config.vocab_motion + 1
        self.OUT_OF_GRID_POS = N_POS

        # token embeddings
        self.motion_emb = Embedding(rng, config.vocab_motion + 2, d, name="emb.motion")
        self.pos_emb = Embedding(rng, N_POS + 1, d, name="emb.pos")
        self.head_emb = Embedding(rng, N_HEADING, d, name="emb.head")
        self.valid_emb = Embedding(rng, 2, d, name="emb.valid")
        self.type_emb = Embedding(rng, N_TYPES + 1, d, name="emb.type")
        self.shape_mlp = Dense(rng, 3, d, name="emb.shape")
        self.delta_mlp = Dense(rng, 2, d, name="emb.delta")
        self.fuse = Dense(rng, 7 * d, d, name="emb.fuse")

        # map encoder
        self.kind_emb = Embedding(rng, 5, d, name="map.kind")
        self.len_proj = Dense(rng, 1, d, name="map.len")
        self.map_fuse = Dense(rng, 2 * d, d, name="map.fuse")
        self.map_layers = [AttentionLayer(rng, config, f"map.{i}") for i in range(config.map_blocks)]

        # relative positional encodings, one per attention kind
        self.pe_t = FourierEmbedding(rng, 4, d, config.freq_bands, name="pe.t")
        self.pe_aa = FourierEmbedding(rng, 4, d, config.freq_bands, name="pe.aa")
        self.pe_ma = FourierEmbedding(rng, 4, d, config.freq_bands, name="pe.ma")
        self.pe_mm = FourierEmbedding(rng, 4, d, config.freq_bands, name="pe.mm")
        self.pe_grid = FourierEmbedding(rng, 4, d, config.freq_bands, name="pe.grid")

        # motion stack: blocks of (temporal, agent-agent, map-agent)
        self.motion_t = [AttentionLayer(rng, config, f"mot.{i}.t") for i in range(config.motion_blocks)]
        self.motion_aa = [AttentionLayer(rng, config, f"mot.{i}.aa") for i in range(config.motion_blocks)]
        self.motion_ma = [AttentionLayer(rng, config, f"mot.{i}.ma") for i in range(config.motion_blocks)]

        # scene stack: blocks of (grid, agent-agent, map-agent)
        self.scene_grid = [AttentionLayer(rng, config, f"scn.{i}.g") for i in range(config.scene_blocks)]
        self.scene_aa = [AttentionLayer(rng, config, f"scn.{i}.aa") for i in range(config.scene_blocks)]
        self.scene_ma = [AttentionLayer(rng, config, f"scn.{i}.ma") for i in range(config.scene_blocks)]

        # occupancy grid encoder (occupancy bit + ego-frame cell center)
        self.grid_mlp = MLP(rng, (3, d, d), name="grid.mlp")

        # heads
        self.motion_head = MLP(rng, (d, d, config.vocab_motion), name="head.motion")
        self.control_head = MLP(rng, (d, d, N_CONTROL), name="head.control")
        self.position_head = MLP(rng, (d, d, N_POS), name="head.position")
        self.heading_head = MLP(rng, (d, d, N_HEADING), name="head.heading")
        self.shape_head = MLP(rng, (d, d, d, 3), name="head.shape")
        self.type_head = MLP(rng, (d, d, N_TYPES), name="head.type")

        # ego-frame cell centers and the (constant) grid-attention descriptors
        cols, rows = np.meshgrid(np.arange(GRID_SIDE), np.arange(GRID_SIDE))
        cx = (cols.reshape(-1) - GRID_HALF) * GRID_CELL
        cy = (rows.reshape(-1) - GRID_HALF) * GRID_CELL
        self.cell_centers = np.stack([cx, cy], axis=1)  # [N_POS, 2], row-major ids
        dp = np.hypot(cx, cy)
        dd = np.where(dp > 1e-9, np.arctan2(cy, cx), 0.0)
        self.grid_desc = np.stack([dp, dd, np.zeros(N_POS), np.zeros(N_POS)], axis=1)

    # ------------------------------------------------------------------
    # Embedding fusion
    # ------------------------------------------------------------------

    def fuse_embedding(self, motion_ids, pos_ids, head_ids, valid_bits, type_ids, shapes, deltas):
        """Fused agent embedding for arbitrary leading shape [...]."""
        feats = [
            self.motion_emb(motion_ids),
            self.pos_emb(pos_ids),
            self.head_emb(head_ids),
            self.valid_emb(valid_bits),
            self.type_emb(type_ids),
            self.shape_mlp(nn.Tensor(shapes)),
            self.delta_mlp(nn.Tensor(deltas)),
        ]
        return self.fuse(concat(feats, axis=-1))

    def query_embedding(self, pos_token: int = CENTER_CELL):
        """Agent-query embedding: special motion token, centered (or relocated)
        position, invalid validity, special type, zero shape."""
        return self.fuse_embedding(
            np.array([self.QUERY_MOTION]), np.array([pos_token]), np.array([0]),
            np.array([0]), np.array([self.QUERY_TYPE]),
            np.zeros((1, 3)), np.full((1, 2), -Z_INVALID),
        )

    # ------------------------------------------------------------------
    # Map encoding
    # ------------------------------------------------------------------

    def encode_map(self, mt: MapTokenSet):
        """Map features after map-map attention blocks. SE(2)-invariant: the
        per-token inputs are kind and length; geometry enters via relative
        descriptors only."""
        m = mt.size
        if m == 0:
            return nn.Tensor(np.zeros((0, self.cfg.d_model)))
        kind_f = self.kind_emb(mt.kind)
        len_f = self.len_proj(nn.Tensor(mt.length[:, None]))
        x = self.map_fuse(concat([kind_f, len_f], axis=-1))
        mid = mt.midpoint
        ang = mt.angle
        full = _desc_block(mid[None, :], ang[None, :], mid[:, None], ang[:, None])  # [q, c, 4]
        adm = (full[:, :, 0] <= self.cfg.r_m2m) & ~np.eye(m, dtype=bool)
        blocks = [(np.flatnonzero(adm[i]), full[i][adm[i]]) for i in range(m)]
        idx, mask, desc = _pad_blocks(m, blocks)
        rel = self.pe_mm(desc)
        for layer in self.map_layers:
            x = layer(x, x, idx, mask, rel)
        return x

    # ------------------------------------------------------------------
    # Motion stack (teacher-forced full grid)
    # ------------------------------------------------------------------

    def motion_grid_forward(self, emb, poses, pose_ok, valid, map_feats, map_mid, map_ang):
        """emb: Tensor [A, T, D]; poses [A, T, 3] column poses (nan where
        undefined); pose_ok [A, T] bool; valid [A, T] token-slot validity.
        Returns (motion_logits [A, T, Vm], control_logits [A, T, 4])."""
        A, T, D = emb.shape
        x = reshape(emb, (A * T, D))
        W = min(self.cfg.t_window, max(T - 1, 1))
        pos = np.nan_to_num(poses, nan=0.0)
        valid = np.asarray(valid, dtype=bool)

        # temporal pairs: strictly-past own columns within the window,
        # invalid-pair descriptors replaced by the constants
        tt = np.arange(T)[None, :, None]  # [1, T, 1]
        tau = np.arange(1, W + 1)[None, None, :]  # [1, 1, W]
        cidx = tt - tau  # [1, T, W]
        in_range = np.broadcast_to(cidx >= 0, (A, T, W))
        cc = np.clip(cidx[0], 0, None)  # [T, W]
        ctx_pos = pos[:, cc]  # [A, T, W, 3]
        vq = valid[:, :, None]
        vc = valid[:, cc]
        both = vq & vc
        real = _desc_block(ctx_pos[..., :2], ctx_pos[..., 2],
                           pos[:, :, None, :2], pos[:, :, None, 2],
                           dt=np.broadcast_to((cidx - tt).astype(float), (A, T, W)))
        const = np.where(vc & ~vq, Z_TRANS, np.where(vq & ~vc, -Z_TRANS, -Z_INVALID))
        t_desc = np.where(both[..., None], real, const[..., None])
        t_idx = (np.arange(A)[:, None, None] * T + cc[None]).reshape(A * T, W)
        t_mask = in_range.reshape(A * T, W)
        t_desc = t_desc.reshape(A * T, W, 4)
        rel_t = self.pe_t(t_desc)

        # agent-agent pairs per column among valid agents within radius
        act_grid = valid & pose_ok
        aa_blocks = [(np.zeros(0, dtype=int), np.zeros((0, 4)))] * (A * T)
        for t in range(T):
            act = np.flatnonzero(act_grid[:, t])
            if act.size == 0:
                continue
            P = pos[act, t]
            block = _desc_block(P[None, :, :2], P[None, :, 2], P[:, None, :2], P[:, None, 2])
            adm = (block[:, :, 0] <= self.cfg.r_a2a) & ~np.eye(act.size, dtype=bool)
            for i, a in enumerate(act):
                bs = np.flatnonzero(adm[i])
                aa_blocks[a * T + t] = (act[bs] * T + t, block[i][bs])
        aa_idx, aa_mask, aa_desc = _pad_blocks(A * T, aa_blocks)
        rel_aa = self.pe_aa(aa_desc)

        # map-agent pairs for valid columns
        ma_blocks = [(np.zeros(0, dtype=int), np.zeros((0, 4)))] * (A * T)
        if map_mid.shape[0]:
            for a in range(A):
                for t in range(T):
                    if not act_grid[a, t]:
                        continue
                    dist = np.hypot(map_mid[:, 0] - pos[a, t, 0], map_mid[:, 1] - pos[a, t, 1])
                    near = np.flatnonzero(dist <= self.cfg.r_m2a)
                    if near.size:
                        d = _desc_block(map_mid[near], map_ang[near],
                                        pos[a, t, :2][None], pos[a, t, 2])
                        ma_blocks[a * T + t] = (near, d)
        ma_idx, ma_mask, ma_desc = _pad_blocks(A * T, ma_blocks)
        rel_ma = self.pe_ma(ma_desc)

        for b in range(self.cfg.motion_blocks):
            x = self.motion_t[b](x, x, t_idx, t_mask, rel_t)
            x = self.motion_aa[b](x, x, aa_idx, aa_mask, rel_aa)
            x = self.motion_ma[b](x, map_feats, ma_idx, ma_mask, rel_ma)

        motion_logits = reshape(self.motion_head(x), (A, T, self.cfg.vocab_motion))
        control_logits = reshape(self.control_head(x), (A, T, N_CONTROL))
        return motion_logits, control_logits

    # ------------------------------------------------------------------
    # Occupancy + scene stack
    # ------------------------------------------------------------------

    def encode_occupancy(self, grids):
        """grids: [G, N_POS] binary -> Tensor [G, N_POS, D] (the Gamma MLP
        over occupancy bit and ego-frame cell center)."""
        g = np.asarray(grids, dtype=float).reshape(-1, N_POS)
        inp = np.concatenate(
            [g[:, :, None], np.broadcast_to(self.cell_centers, (g.shape[0], N_POS, 2))], axis=2
        )
        return self.grid_mlp(nn.Tensor(inp))

    def scene_queries_forward(self, queries, ctx_embs, aa_pairs, ma_pairs,
                              grid_feats=None, grid_ids=None, map_feats=None, phase="position"):
        """Run scene blocks for a batch of spatial queries.

        queries: Tensor [Q, D]; ctx_embs: Tensor [C, D] pooled agent/self
        embeddings; aa_pairs / ma_pairs: per-query admitted (index, desc)
        lists; grid_feats: Tensor [G, N_POS, D]; grid_ids: [Q] grid index per
        query (position phase only).
        """
        Q = queries.shape[0]
        aa_idx, aa_mask, aa_desc = _pad_pairs(Q, aa_pairs)
        rel_aa = self.pe_aa(aa_desc)
        ma_idx, ma_mask, ma_desc = _pad_pairs(Q, ma_pairs)
        rel_ma = self.pe_ma(ma_desc)
        x = queries
        if phase == "position":
            G = grid_feats.shape[0]
            flat_grid = reshape(grid_feats, (G * N_POS, self.cfg.d_model))
            g_idx = (np.asarray(grid_ids, dtype=int)[:, None] * N_POS) + np.arange(N_POS)[None, :]
            g_mask = np.ones((Q, N_POS), dtype=bool)
            # the grid descriptors are query-independent; broadcast one copy
            rel_g = self.pe_grid(self.grid_desc[None])
        for b in range(self.cfg.scene_blocks):
            if phase == "position":
                x = self.scene_grid[b](x, flat_grid, g_idx, g_mask, rel_g)
            x = self.scene_aa[b](x, ctx_embs, aa_idx, aa_mask, rel_aa)
            x = self.scene_ma[b](x, map_feats, ma_idx, ma_mask, rel_ma)
        return x

    def attribute_forward(self, feat):
        """Post-heading query feature -> (shape (softplus, >0), type logits)."""
        return softplus(self.shape_head(feat)), self.type_head(feat)


# ---------------------------------------------------------------------------
# Featurization: TokenizedScenario -> constant arrays for the model
# ---------------------------------------------------------------------------

@dataclass
class ScenarioFeatures:
    """Per-column constant inputs for the motion grid plus spatial-phase data."""
    n_slots: int
    motion_ids: np.ndarray  # [A, T]
    pos_ids: np.ndarray  # [A, T]
    head_ids: np.ndarray  # [A, T]
    valid: np.ndarray  # [A, T] bool (token-slot validity)
    pose_ok: np.ndarray  # [A, T] bool
    type_ids: np.ndarray  # [A]
    shapes: np.ndarray  # [A, 3]
    deltas: np.ndarray  # [A, T, 2]
    poses: np.ndarray  # [A, T, 3] column poses (nan where undefined)
    ego_row: int

    @property
    def n_agents(self) -> int:
        return self.motion_ids.shape[0]


def column_inputs(model: InterleavedModel, ts: TokenizedScenario) -> ScenarioFeatures:
    """Build the constant embedding inputs for every (agent, column) cell.

    Column k carries the pose at the start of slot k, the incoming motion
    token m_{k-1}, the slot validity bit, and the displacement delta from
    column k-1 (with the invalid-pair constant substitutions).
    """
    A = len(ts.agents)
    T = ts.n_slots
    motion_ids = np.full((A, T), model.EMPTY_MOTION, dtype=int)
    pos_ids = np.full((A, T), CENTER_CELL, dtype=int)
    head_ids = np.zeros((A, T), dtype=int)
    valid = np.zeros((A, T), dtype=bool)
    pose_ok = np.zeros((A, T), dtype=bool)
    deltas = np.zeros((A, T, 2))
    poses = np.full((A, T, 3), np.nan)
    type_ids = np.array([a.type_id for a in ts.agents], dtype=int)
    shapes = np.stack([a.shape for a in ts.agents])
    ego = ts.agents[ts.ego_row]

    for ai, at in enumerate(ts.agents):
        valid[ai] = at.validity[:T]
        for t in range(T):
            cur_v = bool(at.validity[t])
            prev_v = bool(at.validity[t - 1]) if t > 0 else False
            if at.pose_defined[t]:
                pose_ok[ai, t] = True
                poses[ai, t] = at.poses[t]
            # content is read only at valid columns; invalid columns keep the
            # empty-token constants (center cell, heading zero, EMPTY motion)
            if cur_v:
                if prev_v and at.motion[t - 1] >= 0:
                    motion_ids[ai, t] = at.motion[t - 1]
                if ego.pose_defined[t]:
                    local = to_frame(at.poses[t, :2], ego.poses[t, :2], ego.poses[t, 2])
                    cell = try_encode_position(local)
                    pos_ids[ai, t] = cell if cell is not None else model.OUT_OF_GRID_POS
                    head_ids[ai, t] = encode_heading(at.poses[t, 2] - ego.poses[t, 2])
            # displacement delta with the invalid-pair constant substitutions
            if cur_v and prev_v:
                deltas[ai, t] = displacement_delta(at.poses[t - 1], at.poses[t])
            elif cur_v and not prev_v:
                deltas[ai, t] = (Z_TRANS, Z_TRANS)
            elif prev_v and not cur_v:
                deltas[ai, t] = (-Z_TRANS, -Z_TRANS)
            else:
                deltas[ai, t] = (-Z_INVALID, -Z_INVALID)
    return ScenarioFeatures(
        n_slots=T, motion_ids=motion_ids, pos_ids=pos_ids, head_ids=head_ids,
        valid=valid, pose_ok=pose_ok, type_ids=type_ids, shapes=shapes,
        deltas=deltas, poses=poses, ego_row=ts.ego_row,
    )


def displacement_delta(prev_pose, cur_pose):
    """(distance, direction-in-current-heading-frame) of the column step."""
    dx = cur_pose[0] - prev_pose[0]
    dy = cur_pose[1] - prev_pose[1]
    dist = math.hypot(dx, dy)
    ang = wrap_angle(math.atan2(dy, dx) - cur_pose[2]) if dist > 1e-9 else 0.0
    return (dist, ang)


def embed_columns(model: InterleavedModel, feats: ScenarioFeatures):
    valid_bits = feats.valid.astype(int)
    A, T = feats.motion_ids.shape
    type_grid = np.repeat(feats.type_ids[:, None], T, axis=1)
    shape_grid = np.broadcast_to(feats.shapes[:, None, :], (A, T, 3))
    return model.fuse_embedding(
        feats.motion_ids, feats.pos_ids, feats.head_ids, valid_bits,
        type_grid, shape_grid, feats.deltas,
    )
