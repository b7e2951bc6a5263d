"""Supervision masks, the multi-term teacher-forced loss, and the train loop.

Column k of the agent grid predicts the motion token for slot k and the
control decision for slot k+1, so REMOVE supervision lands one slot before
the validity end and the masks below are shared between the two heads up to
their degenerate edge cases.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .model import InterleavedModel, ModelConfig, ScenarioFeatures, column_inputs, embed_columns, _pair_desc
from .tokenizer import (
    ADD_AGENT, BEGIN_MOTION, KEEP_AGENT, N_POS, REMOVE_AGENT,
    MotionVocabulary, TokenizedScenario, build_occupancy_grid, decode_position,
    from_frame, to_frame,
)

L_PRIME = 10  # spatial-sequence truncation during training

# control-token label weights for the class-imbalance correction
CONTROL_LABEL_WEIGHTS = {KEEP_AGENT: 0.1, REMOVE_AGENT: 0.9, ADD_AGENT: 0.1, BEGIN_MOTION: 0.9}


@dataclass
class LossWeights:
    motion: float = 1.0     # lambda_1
    position: float = 10.0  # lambda_2
    heading: float = 1.0    # lambda_3
    control: float = 10.0   # lambda_4
    shape: float = 0.2      # lambda_5
    type: float = 5.0       # lambda_6
    # per-class control label weights; the defaults follow the full-scale
    # imbalance (KEEP/ADD majority). Desk-scale corpora may invert the
    # imbalance, in which case equal weights converge much faster.
    control_labels: dict = field(default_factory=lambda: dict(CONTROL_LABEL_WEIGHTS))


def build_motion_mask(validity, s_bos, s_eos) -> np.ndarray:
    """Motion supervision mask: 1 at BOS; between BOS and EOS (exclusive)
    wherever the slot and both neighbors are valid; 0 elsewhere (EOS included,
    except when BOS and EOS coincide, where the BOS rule wins)."""
    v = np.asarray(validity).astype(bool)
    n = v.shape[0]
    mask = np.zeros(n, dtype=bool)
    if s_bos is None:
        return mask
    mask[s_bos] = True
    for s in range(s_bos + 1, s_eos):
        mask[s] = v[s - 1] and v[s] and v[s + 1]
    return mask


def build_temporal_control_mask(validity, s_bos, s_eos) -> np.ndarray:
    """Control supervision mask: same interior rule, but the EOS-onward zero
    rule wins over the BOS rule (a single-slot agent gets no control target)."""
    mask = build_motion_mask(validity, s_bos, s_eos)
    if s_bos is not None:
        mask[s_eos:] = False
    return mask


def temporal_control_targets(control_seq, mask) -> np.ndarray:
    """Target at column s is the derived control of slot s+1 (KEEP or REMOVE)."""
    n = control_seq.shape[0]
    targets = np.full(n, -1, dtype=int)
    for s in range(n):
        if mask[s]:
            targets[s] = control_seq[s + 1]
    return targets


def build_spatial_masks(n_insertions: int, a_prime: int, l_prime: int = L_PRIME):
    """(control mask over the ADD...BEGIN_MOTION query sequence, hybrid
    attention mask). Query i of the spatial sequence may attend the a_prime
    existing agents plus generated agents 0..i (itself included)."""
    n_q = n_insertions + 1
    control_mask = np.zeros(n_q, dtype=bool)
    control_mask[: min(n_q, l_prime)] = True
    hybrid = np.zeros((n_q, a_prime + n_q), dtype=bool)
    for i in range(n_q):
        hybrid[i, : a_prime + i + 1] = True
    return control_mask, hybrid


def masked_ce(logits, targets, mask, label_weights=None):
    """Masked mean cross-entropy; empty mask contributes exactly 0.

    logits: Tensor [..., V]; targets int array [...]; mask bool [...].
    With label_weights the mean is weighted per torch convention
    (sum w_i * ce_i / sum w_i).
    """
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return nn.Tensor(0.0), 0
    V = logits.shape[-1]
    flat = nn.reshape(logits, (-1, V))
    sel = nn.gather(flat, idx)
    logp = nn.log_softmax(sel)
    tgt = np.asarray(targets).reshape(-1)[idx]
    onehot = np.zeros((idx.size, V))
    onehot[np.arange(idx.size), tgt] = 1.0
    nll = nn.scale(nn.reduce_sum(nn.mul(logp, onehot), axis=-1), -1.0)
    if label_weights is None:
        return nn.reduce_mean(nll), idx.size
    w = np.array([label_weights.get(int(t), 1.0) for t in tgt])
    total = nn.reduce_sum(nn.mul(nll, w))
    return nn.scale(total, 1.0 / float(w.sum())), idx.size


def masked_l1(pred, targets, mask):
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return nn.Tensor(0.0)
    flat = nn.reshape(pred, (-1, pred.shape[-1]))
    sel = nn.gather(flat, idx)
    tgt = np.asarray(targets).reshape(-1, pred.shape[-1])[idx]
    return nn.reduce_mean(nn.absolute(sel - nn.Tensor(tgt)))


# ---------------------------------------------------------------------------
# Teacher-forced forward over one scenario
# ---------------------------------------------------------------------------

@dataclass
class SpatialBatch:
    """All spatial-phase queries of one scenario, flattened over (step, slot)."""
    n_q: int
    grid_per_query: np.ndarray  # [Qs] index into unique grids
    grids: np.ndarray  # [G, N_POS]
    aa_pairs: list
    ma_pairs_pos: list
    ma_pairs_head: list
    head_aa_pairs: list
    pos_targets: np.ndarray  # [Qs] (-1 for the BEGIN_MOTION query)
    control_targets: np.ndarray  # [Qs]
    control_mask: np.ndarray  # [Qs] bool
    head_targets: np.ndarray  # [Qh]
    head_supervised: np.ndarray  # [Qh] bool
    shape_targets: np.ndarray  # [Qh, 3]
    type_targets: np.ndarray  # [Qh]
    head_query_pos_tokens: np.ndarray  # [Qh]
    n_head_q: int


def _scene_context_rows(feats: ScenarioFeatures, p: int):
    """Agents forming the spatial-phase context at pose time p."""
    return [a for a in range(feats.n_agents) if feats.valid[a, p] and feats.pose_ok[a, p]]


def build_spatial_batch(ts: TokenizedScenario, feats: ScenarioFeatures,
                        cfg: ModelConfig, l_prime: int = L_PRIME) -> SpatialBatch:
    """Assemble the teacher-forced spatial sequences for pose times 1..T-1.

    Context indices address the pooled matrix [A*T agent columns] + [1 agent
    query row] (the self row sits at index A*T). Queries are generated in
    step order, insertion-distance order within a step, BEGIN_MOTION last.
    """
    A, T = feats.valid.shape
    self_row = A * T
    ego = feats.ego_row

    grids = []
    grid_per_query = []
    aa_pairs, ma_pairs_pos = [], []
    pos_targets, control_targets, control_mask = [], [], []
    head_aa_pairs, ma_pairs_head = [], []
    head_targets, head_supervised, shape_targets, type_targets = [], [], [], []
    head_query_pos_tokens = []

    for p in range(1, T):
        if not feats.pose_ok[ego, p]:
            continue
        ego_pose = feats.poses[ego, p]
        ins_list = ts.insertions.get(p, [])
        existing = [a for a in _scene_context_rows(feats, p) if a not in {i.agent_index for i in ins_list}]
        ctrl_mask_p, _ = build_spatial_masks(len(ins_list), len(existing), l_prime)
        occ = build_occupancy_grid(
            np.array([feats.poses[a, p, :2] for a in existing]).reshape(-1, 2), ego_pose
        )
        n_q = min(len(ins_list) + 1, l_prime)
        for j in range(n_q):
            # occupancy grid including previously inserted agents
            grids.append(occ.copy())
            grid_per_query.append(len(grids) - 1)
            # agent-agent context: existing + inserted < j + self, radius-gated
            plist = []
            for a in existing + [ins.agent_index for ins in ins_list[:j]]:
                d = _pair_desc(feats.poses[a, p], feats.poses[a, p, 2], 0,
                               ego_pose, ego_pose[2], 0)
                if d[0] <= cfg.r_q2a:
                    plist.append((a * T + p, d))
            plist.append((self_row, (0.0, 0.0, 0.0, 0.0)))
            aa_pairs.append(plist)
            ma_pairs_pos.append(("ego", p))  # resolved against map below
            if j < len(ins_list):
                ins = ins_list[j]
                pos_targets.append(ins.pos_token)
                control_targets.append(ADD_AGENT)
                # update the running occupancy with this insertion
                cell = ins.pos_token
                occ = occ.copy()
                occ[cell] = 1
                # heading-phase query, relocated to the decoded cell center
                cell_world = from_frame(decode_position(cell), ego_pose[:2], ego_pose[2])
                q_pose = np.array([cell_world[0], cell_world[1], ego_pose[2]])
                hlist = []
                for a in existing + [i2.agent_index for i2 in ins_list[:j]]:
                    d = _pair_desc(feats.poses[a, p], feats.poses[a, p, 2], 0, q_pose, q_pose[2], 0)
                    if d[0] <= cfg.r_q2a:
                        hlist.append((a * T + p, d))
                hlist.append((self_row, (0.0, 0.0, 0.0, 0.0)))
                head_aa_pairs.append(hlist)
                ma_pairs_head.append(("cell", p, q_pose))
                head_targets.append(ins.head_token)
                head_supervised.append(True)
                shape_targets.append(ts.agents[ins.agent_index].shape)
                type_targets.append(ts.agents[ins.agent_index].type_id)
                head_query_pos_tokens.append(cell)
            else:
                pos_targets.append(-1)
                control_targets.append(BEGIN_MOTION)
        control_mask.extend(ctrl_mask_p[:n_q].tolist())

    # deduplicate identical occupancy grids (most steps have no insertions)
    if grids:
        uniq: dict[bytes, int] = {}
        remap = []
        kept = []
        for g in grids:
            key = g.tobytes()
            if key not in uniq:
                uniq[key] = len(kept)
                kept.append(g)
            remap.append(uniq[key])
        grids_arr = np.stack(kept)
        grid_per_query = [remap[i] for i in grid_per_query]
    else:
        grids_arr = np.zeros((0, N_POS), dtype=np.int8)
    return SpatialBatch(
        n_q=len(aa_pairs),
        grid_per_query=np.array(grid_per_query, dtype=int),
        grids=grids_arr,
        aa_pairs=aa_pairs,
        ma_pairs_pos=ma_pairs_pos,
        ma_pairs_head=ma_pairs_head,
        head_aa_pairs=head_aa_pairs,
        pos_targets=np.array(pos_targets, dtype=int),
        control_targets=np.array(control_targets, dtype=int),
        control_mask=np.array(control_mask, dtype=bool),
        head_targets=np.array(head_targets, dtype=int),
        head_supervised=np.array(head_supervised, dtype=bool),
        shape_targets=np.array(shape_targets, dtype=float).reshape(-1, 3),
        type_targets=np.array(type_targets, dtype=int),
        head_query_pos_tokens=np.array(head_query_pos_tokens, dtype=int),
        n_head_q=len(head_aa_pairs),
    )


def _resolve_map_pairs(tagged, feats: ScenarioFeatures, map_mid, map_ang, radius_pos, radius_head):
    """Expand the ('ego', p) / ('cell', p, pose) tags into (index, desc) lists."""
    from .model import _desc_block

    ego = feats.ego_row
    out = []
    for tag in tagged:
        if tag[0] == "ego":
            pose = feats.poses[ego, tag[1]]
            radius = radius_pos
        else:
            pose = tag[2]
            radius = radius_head
        plist = []
        if map_mid.shape[0]:
            dist = np.hypot(map_mid[:, 0] - pose[0], map_mid[:, 1] - pose[1])
            near = np.flatnonzero(dist <= radius)
            if near.size:
                d = _desc_block(map_mid[near], map_ang[near], pose[None, :2], pose[2])
                plist = list(zip(near.tolist(), d))
        out.append(plist)
    return out


@dataclass
class ForwardOutputs:
    motion_logits: object
    control_logits: object
    pos_logits: object
    spatial_control_logits: object
    head_logits: object
    shape_pred: object
    type_logits: object
    spatial: SpatialBatch


def teacher_forced_forward(model: InterleavedModel, ts: TokenizedScenario,
                           feats: ScenarioFeatures, spatial: SpatialBatch):
    """One full training forward over a tokenized scenario."""
    cfg = model.cfg
    A, T = feats.valid.shape
    emb = embed_columns(model, feats)  # [A, T, D]
    map_feats = model.encode_map(ts.map_tokens)
    map_mid, map_ang = ts.map_tokens.midpoint, ts.map_tokens.angle

    motion_logits, control_logits = model.motion_grid_forward(
        emb, feats.poses, feats.pose_ok, feats.valid, map_feats, map_mid, map_ang
    )

    # spatial phase
    pool = nn.concat([nn.reshape(emb, (A * T, cfg.d_model)), model.query_embedding()], axis=0)
    q0 = model.query_embedding()
    if spatial.n_q:
        queries = nn.gather(q0, np.zeros(spatial.n_q, dtype=int))
        grid_feats = model.encode_occupancy(spatial.grids)
        ma_pos = _resolve_map_pairs(spatial.ma_pairs_pos, feats, map_mid, map_ang,
                                    cfg.r_q2m_pos, cfg.r_q2m_head)
        feat_pos = model.scene_queries_forward(
            queries, pool, spatial.aa_pairs, ma_pos,
            grid_feats=grid_feats, grid_ids=spatial.grid_per_query,
            map_feats=map_feats, phase="position",
        )
        pos_logits = model.position_head(feat_pos)
        spatial_control_logits = model.control_head(feat_pos)
    else:
        pos_logits = spatial_control_logits = None

    if spatial.n_head_q:
        hq = model.fuse_embedding(
            np.full(spatial.n_head_q, model.QUERY_MOTION, dtype=int),
            spatial.head_query_pos_tokens,
            np.zeros(spatial.n_head_q, dtype=int),
            np.zeros(spatial.n_head_q, dtype=int),
            np.full(spatial.n_head_q, model.QUERY_TYPE, dtype=int),
            np.zeros((spatial.n_head_q, 3)),
            np.full((spatial.n_head_q, 2), -2.0),
        )
        ma_head = _resolve_map_pairs(spatial.ma_pairs_head, feats, map_mid, map_ang,
                                     cfg.r_q2m_pos, cfg.r_q2m_head)
        feat_head = model.scene_queries_forward(
            hq, pool, spatial.head_aa_pairs, ma_head,
            map_feats=map_feats, phase="heading",
        )
        head_logits = model.heading_head(feat_head)
        shape_pred, type_logits = model.attribute_forward(feat_head)
    else:
        head_logits = shape_pred = type_logits = None

    return ForwardOutputs(
        motion_logits=motion_logits, control_logits=control_logits,
        pos_logits=pos_logits, spatial_control_logits=spatial_control_logits,
        head_logits=head_logits, shape_pred=shape_pred, type_logits=type_logits,
        spatial=spatial,
    )


def scenario_targets(ts: TokenizedScenario):
    """Per-agent motion/control targets and masks for the grid heads."""
    A, T = len(ts.agents), ts.n_slots
    motion_mask = np.zeros((A, T), dtype=bool)
    motion_targets = np.zeros((A, T), dtype=int)
    ctrl_mask = np.zeros((A, T), dtype=bool)
    ctrl_targets = np.zeros((A, T), dtype=int)
    for ai, at in enumerate(ts.agents):
        mm = build_motion_mask(at.validity, at.add_slot, at.remove_slot)
        cm = build_temporal_control_mask(at.validity, at.add_slot, at.remove_slot)
        motion_mask[ai] = mm
        ctrl_mask[ai] = cm
        motion_targets[ai] = np.where(at.motion >= 0, at.motion, 0)
        if at.add_slot is not None:
            tc = temporal_control_targets(at.control, cm)
            ctrl_targets[ai] = np.where(tc >= 0, tc, KEEP_AGENT)
    # a supervisable motion target must exist wherever the mask is set
    motion_mask &= np.array([at.motion >= 0 for at in ts.agents])
    return motion_targets, motion_mask, ctrl_targets, ctrl_mask


def compute_losses(outputs: ForwardOutputs, ts: TokenizedScenario,
                   weights: LossWeights = LossWeights()):
    """Total Eq.-style weighted loss plus the per-term breakdown."""
    motion_targets, motion_mask, ctrl_targets, ctrl_mask = scenario_targets(ts)
    terms = {}
    terms["motion"], _ = masked_ce(outputs.motion_logits, motion_targets, motion_mask)

    sp = outputs.spatial
    if outputs.pos_logits is not None:
        pos_mask = (sp.pos_targets >= 0) & sp.control_mask
        terms["position"], _ = masked_ce(outputs.pos_logits, np.maximum(sp.pos_targets, 0), pos_mask)
    else:
        terms["position"] = nn.Tensor(0.0)
    if outputs.head_logits is not None:
        terms["heading"], _ = masked_ce(outputs.head_logits, sp.head_targets, sp.head_supervised)
        terms["shape"] = masked_l1(outputs.shape_pred, sp.shape_targets, sp.head_supervised)
        terms["type"], _ = masked_ce(outputs.type_logits, sp.type_targets, sp.head_supervised)
    else:
        terms["heading"] = terms["shape"] = terms["type"] = nn.Tensor(0.0)

    # control: temporal and spatial sequences share the head and the
    # label-weighted mean
    ce_parts = []
    flat_t_mask = ctrl_mask.reshape(-1)
    if flat_t_mask.any() or (outputs.spatial_control_logits is not None and sp.control_mask.any()):
        logits_list, targets_list, mask_list = [], [], []
        A, T = ctrl_mask.shape
        logits_list.append(nn.reshape(outputs.control_logits, (A * T, 4)))
        targets_list.append(ctrl_targets.reshape(-1))
        mask_list.append(flat_t_mask)
        if outputs.spatial_control_logits is not None:
            logits_list.append(outputs.spatial_control_logits)
            targets_list.append(sp.control_targets)
            mask_list.append(sp.control_mask)
        all_logits = nn.concat(logits_list, axis=0)
        all_targets = np.concatenate(targets_list)
        all_mask = np.concatenate(mask_list)
        terms["control"], _ = masked_ce(all_logits, all_targets, all_mask,
                                        label_weights=weights.control_labels)
    else:
        terms["control"] = nn.Tensor(0.0)

    total = nn.add(
        nn.add(nn.scale(terms["motion"], weights.motion), nn.scale(terms["position"], weights.position)),
        nn.add(
            nn.add(nn.scale(terms["heading"], weights.heading), nn.scale(terms["control"], weights.control)),
            nn.add(nn.scale(terms["shape"], weights.shape), nn.scale(terms["type"], weights.type)),
        ),
    )
    return total, {k: float(v.data) for k, v in terms.items()}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 5e-4
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 = only final
    l_prime: int = L_PRIME
    loss_weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class PreparedScenario:
    ts: TokenizedScenario
    feats: ScenarioFeatures
    spatial: SpatialBatch


def prepare_scenario(model: InterleavedModel, ts: TokenizedScenario,
                     l_prime: int = L_PRIME) -> PreparedScenario:
    feats = column_inputs(model, ts)
    spatial = build_spatial_batch(ts, feats, model.cfg, l_prime)
    return PreparedScenario(ts=ts, feats=feats, spatial=spatial)


def train(model: InterleavedModel, prepared: list, cfg: TrainConfig,
          out_dir=None, vocab_hash: str = "", log_cb=None):
    """Teacher-forced AdamW training with cosine decay; deterministic in seed.

    Gradients are averaged over the batch. Loss history rows are
    (step, lr, total, per-term...). Returns the loss history list.
    """
    from .checkpoint import save_checkpoint  # local import to avoid a cycle

    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = nn.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(prepared)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    history = []
    term_names = ("motion", "position", "heading", "control", "shape", "type")

    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for bi in range(steps_per_epoch):
            batch = order[bi * cfg.batch_size: (bi + 1) * cfg.batch_size]
            if batch.size == 0:
                continue
            model.zero_grad()
            acc = {}
            total_val = 0.0
            term_vals = dict.fromkeys(term_names, 0.0)
            for si in batch:
                ps = prepared[si]
                outputs = teacher_forced_forward(model, ps.ts, ps.feats, ps.spatial)
                loss, terms = compute_losses(outputs, ps.ts, cfg.loss_weights)
                if not np.isfinite(loss.data):
                    raise FloatingPointError(f"non-finite loss at step {step}")
                scaled = nn.scale(loss, 1.0 / batch.size)
                scaled.backward()
                total_val += float(loss.data) / batch.size
                for k in term_names:
                    term_vals[k] += terms.get(k, 0.0) / batch.size
            lr = nn.cosine_lr(step, total_steps, cfg.lr)
            opt.step(lr=lr)
            history.append({"step": step, "lr": lr, "total": total_val, **term_vals})
            if log_cb:
                log_cb(history[-1])
            step += 1
        if out_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, os.path.join(out_dir, f"ckpt_{epoch + 1:05d}.npz"),
                            vocab_hash=vocab_hash, step=step)
    if out_dir:
        save_checkpoint(model, os.path.join(out_dir, "ckpt_final.npz"),
                        vocab_hash=vocab_hash, step=step)
        write_loss_log(history, os.path.join(out_dir, "loss_log.csv"))
    return history


def write_loss_log(history, path):
    cols = ["step", "lr", "total", "motion", "position", "heading", "control", "shape", "type"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in history:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])


def teacher_forced_accuracy(model: InterleavedModel, prepared: list):
    """Token accuracies over supervised positions (motion / temporal control /
    spatial control), used by the overfit gate."""
    hits = {"motion": 0, "t_control": 0, "s_control": 0}
    totals = {"motion": 0, "t_control": 0, "s_control": 0}
    with nn.no_grad():
        for ps in prepared:
            outputs = teacher_forced_forward(model, ps.ts, ps.feats, ps.spatial)
            motion_targets, motion_mask, ctrl_targets, ctrl_mask = scenario_targets(ps.ts)
            pred_m = np.argmax(outputs.motion_logits.data, axis=-1)
            hits["motion"] += int((pred_m[motion_mask] == motion_targets[motion_mask]).sum())
            totals["motion"] += int(motion_mask.sum())
            pred_c = np.argmax(outputs.control_logits.data, axis=-1)
            hits["t_control"] += int((pred_c[ctrl_mask] == ctrl_targets[ctrl_mask]).sum())
            totals["t_control"] += int(ctrl_mask.sum())
            sp = ps.spatial
            if outputs.spatial_control_logits is not None and sp.control_mask.any():
                pred_s = np.argmax(outputs.spatial_control_logits.data, axis=-1)
                m = sp.control_mask
                hits["s_control"] += int((pred_s[m] == sp.control_targets[m]).sum())
                totals["s_control"] += int(m.sum())
    return {k: (hits[k] / totals[k] if totals[k] else 1.0) for k in hits}
