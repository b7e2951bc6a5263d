from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from longsim.scenario import wrap_angle
from longsim.tokenizer import (
    ADD_AGENT, BEGIN_MOTION, CENTER_CELL, DELTA, GRID_CELL, KEEP_AGENT, N_HEADING,
    N_POS, NULL, REMOVE_AGENT, MotionPrimitive, MotionVocabulary, OutOfGridError,
    TokenizerError, add_remove_slots, build_motion_vocabulary, build_occupancy_grid,
    decode_heading, decode_motion, decode_position, derive_control_sequence,
    encode_heading, encode_motion, encode_position, load_vocabulary,
    primitive_distance, save_vocabulary, segment_to_primitive, tokenize_map,
    tokenize_scenario, tokenize_time, try_encode_position,
)


# ---------------------------------------------------------------------------
# temporal tokenization
# ---------------------------------------------------------------------------

def test_91_steps_gives_18_slots():
    assert tokenize_time(np.ones(91, dtype=bool)).shape[0] == 18


def test_all_valid_all_slots_valid():
    assert tokenize_time(np.ones(91, dtype=bool)).all()


def test_validity_and_rule_by_hand():
    valid = np.zeros(91, dtype=bool)
    valid[0:5] = True  # raw step 5 invalid -> slot 0 invalid
    tv = tokenize_time(valid)
    assert not tv.any()
    valid[5] = True  # both 0 and 5 valid now
    tv = tokenize_time(valid)
    assert tv[0] and not tv[1:].any()


def test_too_short_track_errors():
    with pytest.raises(TokenizerError):
        tokenize_time(np.ones(5, dtype=bool))


# ---------------------------------------------------------------------------
# pose grid
# ---------------------------------------------------------------------------

def _brute_force_cell(p):
    """Nearest cell center by L2 over all 1849 cells."""
    best, best_d = None, np.inf
    for cid in range(N_POS):
        c = decode_position(cid)
        d = float(np.hypot(c[0] - p[0], c[1] - p[1]))
        if d < best_d - 1e-12:
            best, best_d = cid, d
    return best


def test_position_origin_is_924():
    assert encode_position((0.0, 0.0)) == 924 == _brute_force_cell((0.0, 0.0))


def test_position_neighbor_cell():
    assert encode_position((3.0, 0.0)) == 925 == _brute_force_cell((3.0, 0.0))


def test_position_out_of_grid():
    with pytest.raises(OutOfGridError):
        encode_position((200.0, 0.0))
    assert try_encode_position((200.0, 0.0)) is None


def test_position_matches_brute_force_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = rng.uniform(-60, 60, size=2)
        # skip exact midpoints where the round-half-up tie rule differs from L2
        if np.any(np.abs(np.mod(p / GRID_CELL, 1.0) - 0.5) < 1e-6):
            continue
        assert encode_position(p) == _brute_force_cell(p)


def test_position_roundtrip_error_bound():
    rng = np.random.default_rng(1)
    for _ in range(500):
        p = rng.uniform(-64.4, 64.4, size=2)
        c = decode_position(encode_position(p))
        assert np.linalg.norm(c - p) <= GRID_CELL * math.sqrt(2) / 2 + 1e-9


def test_heading_bins():
    assert encode_heading(0.0) == 0
    assert N_HEADING == 120
    assert encode_heading(math.radians(92.0)) == 31  # center 93 degrees


def test_heading_wraparound_and_bound():
    rng = np.random.default_rng(2)
    for _ in range(300):
        a = rng.uniform(-10, 10)
        hid = encode_heading(a)
        err = abs(wrap_angle(decode_heading(hid) - a))
        assert err <= math.radians(1.5) + 1e-9
    assert encode_heading(math.radians(359.0)) == 0


# ---------------------------------------------------------------------------
# motion vocabulary
# ---------------------------------------------------------------------------

def _line_primitive(dx, dh=0.0):
    pts = np.stack([np.linspace(dx / 5, dx, 5), np.zeros(5)], axis=1)
    return MotionPrimitive(rel_points=pts, rel_heading=dh)


def test_encode_zero_distance_and_tie_break():
    entries = [_line_primitive(d) for d in (0.0, 1.0, 2.0, 3.0)]
    vocab = MotionVocabulary(entries=entries)
    assert encode_motion(entries[2], vocab) == 2
    # equidistant between entries 1 and 2 -> lowest index
    mid = _line_primitive(1.5)
    assert encode_motion(mid, vocab) == 1


def test_encode_matches_linear_scan(small_vocab):
    rng = np.random.default_rng(3)
    for _ in range(20):
        seg = MotionPrimitive(rel_points=rng.uniform(-2, 2, size=(5, 2)),
                              rel_heading=rng.uniform(-0.5, 0.5))
        got = encode_motion(seg, small_vocab)
        dists = [primitive_distance(seg, e) for e in small_vocab.entries]
        best = min(range(len(dists)), key=lambda i: (dists[i], i))
        assert got == best


def test_vocab_self_consistency(small_vocab):
    for i, e in enumerate(small_vocab.entries):
        assert encode_motion(e, small_vocab) == i


def test_vocab_determinism(small_corpus):
    a = build_motion_vocabulary(small_corpus, size=16, k=8, seed=5)
    b = build_motion_vocabulary(small_corpus, size=16, k=8, seed=5)
    for ea, eb in zip(a.entries, b.entries):
        np.testing.assert_array_equal(ea.rel_points, eb.rel_points)


def test_vocab_coverage_forced(small_corpus):
    # a corpus of exactly `size` distinct segments yields a permutation of them
    from longsim.tokenizer import extract_segments
    segs = extract_segments(small_corpus)
    uniq = []
    seen = set()
    for s in segs:
        key = (s.rel_points.tobytes(), s.rel_heading)
        if key not in seen:
            seen.add(key)
            uniq.append(s)
    n = 8
    target = uniq[:n]

    class FakeCorpus:
        pass

    # exercise via the greedy the same way: k >= corpus size forces full scans
    import longsim.tokenizer as tok
    saved = tok.extract_segments
    tok.extract_segments = lambda scenarios: list(target)
    try:
        vocab = build_motion_vocabulary([], size=n, k=10_000, seed=0)
    finally:
        tok.extract_segments = saved
    keys = {(e.rel_points.tobytes(), e.rel_heading) for e in vocab.entries}
    assert keys == {(e.rel_points.tobytes(), e.rel_heading) for e in target}


def test_vocab_greedy_matches_bruteforce_oracle():
    """size=4, k=all, 8 collinear segments: greedy == exhaustive greedy oracle."""
    segs = [_line_primitive(float(d)) for d in (0, 1, 2, 3, 4, 5, 6, 7)]
    import longsim.tokenizer as tok
    saved = tok.extract_segments
    tok.extract_segments = lambda scenarios: list(segs)
    try:
        vocab = build_motion_vocabulary([], size=4, k=10_000, seed=0)
    finally:
        tok.extract_segments = saved

    # oracle: same greedy order, computed with plain python loops
    chosen = [0]
    while len(chosen) < 4:
        best_i, best_d = None, -1.0
        for i in range(len(segs)):
            dmin = min(primitive_distance(segs[i], segs[j]) for j in chosen)
            if dmin > best_d + 1e-12:
                best_i, best_d = i, dmin
        chosen.append(best_i)
    got = [next(i for i, s in enumerate(segs) if np.allclose(s.rel_points, e.rel_points))
           for e in vocab.entries]
    assert got == chosen


def test_insufficient_distinct_segments():
    segs = [_line_primitive(1.0)] * 10
    import longsim.tokenizer as tok
    saved = tok.extract_segments
    tok.extract_segments = lambda scenarios: list(segs)
    try:
        with pytest.raises(TokenizerError, match="insufficient"):
            build_motion_vocabulary([], size=4, k=10_000, seed=0)
    finally:
        tok.extract_segments = saved


def test_decode_motion_frames(small_vocab):
    prim = MotionPrimitive(rel_points=np.stack([np.linspace(1, 5, 5), np.zeros(5)], axis=1),
                           rel_heading=0.0)
    vocab = MotionVocabulary(entries=[prim])
    out = decode_motion(np.array([0.0, 0.0, 0.0]), 0, vocab)
    np.testing.assert_allclose(out, [5.0, 0.0, 0.0], atol=1e-12)
    out = decode_motion(np.array([0.0, 0.0, math.pi / 2]), 0, vocab)
    np.testing.assert_allclose(out, [0.0, 5.0, math.pi / 2], atol=1e-12)


def test_decode_identity_primitive():
    prim = MotionPrimitive(rel_points=np.zeros((5, 2)), rel_heading=0.0)
    vocab = MotionVocabulary(entries=[prim])
    pose = np.array([3.0, -2.0, 0.7])
    np.testing.assert_allclose(decode_motion(pose, 0, vocab), pose, atol=1e-12)


def test_encode_decode_compose_on_entries(small_vocab):
    rng = np.random.default_rng(4)
    for i in rng.integers(0, small_vocab.size, size=10):
        e = small_vocab.entries[int(i)]
        pose = np.array([1.0, 2.0, 0.3])
        nxt = decode_motion(pose, int(i), small_vocab)
        # endpoint reproduced exactly in the pose frame
        from longsim.tokenizer import to_frame
        rel = to_frame(nxt[:2], pose[:2], pose[2])
        np.testing.assert_allclose(rel, e.rel_points[-1], atol=1e-9)


def test_vocab_file_roundtrip(small_vocab, tmp_path):
    path = tmp_path / "vocab.json"
    save_vocabulary(small_vocab, path)
    loaded = load_vocabulary(path)
    assert loaded.size == small_vocab.size
    assert loaded.content_hash() == small_vocab.content_hash()


# ---------------------------------------------------------------------------
# map tokenization
# ---------------------------------------------------------------------------

def _polyline(points, kind="lane_center"):
    from longsim.scenario import Polyline
    return Polyline(points=np.array(points, dtype=float), kind=kind)


def test_map_20m_lane_four_segments():
    mt = tokenize_map([_polyline([[0.0, 0.0], [20.0, 0.0]])], ego_xy=(0, 0))
    assert mt.size == 4
    np.testing.assert_allclose(mt.direction, np.tile([1.0, 0.0], (4, 1)), atol=1e-12)
    assert np.all(mt.length <= 5.0 + 1e-9)


def test_map_short_polyline_single_segment():
    mt = tokenize_map([_polyline([[0.0, 0.0], [3.0, 0.0]])], ego_xy=(0, 0))
    assert mt.size == 1


def test_map_cap_keeps_nearest():
    mt = tokenize_map([_polyline([[0.0, 0.0], [20.0, 0.0]])], ego_xy=(0, 0), cap=2)
    assert mt.size == 2
    assert np.all(mt.midpoint[:, 0] <= 10.0)


# ---------------------------------------------------------------------------
# control derivation
# ---------------------------------------------------------------------------

def _control_oracle(v):
    """Literal rule application, written independently of the implementation."""
    n = len(v)
    out = [NULL] * n
    if not any(v):
        return out
    k1 = next(i for i in range(n) if v[i])
    k2 = next(i for i in reversed(range(n)) if v[i])
    out[k1] = ADD_AGENT
    for k in range(k1 + 1, k2):
        out[k] = KEEP_AGENT
    if k2 > k1:
        out[k2] = KEEP_AGENT if k2 == n - 1 else REMOVE_AGENT
    return out


def test_control_all_valid_18():
    v = np.ones(18, dtype=bool)
    c = derive_control_sequence(v)
    assert c[0] == ADD_AGENT
    assert all(x == KEEP_AGENT for x in c[1:17])
    assert c[17] == KEEP_AGENT  # forced: REMOVE at the last slot demoted


def test_control_interior_span():
    v = np.zeros(18, dtype=bool)
    v[2:5] = True
    c = derive_control_sequence(v)
    assert c[2] == ADD_AGENT and c[3] == KEEP_AGENT and c[4] == REMOVE_AGENT
    assert all(c[i] == NULL for i in list(range(2)) + list(range(5, 18)))


def test_control_all_invalid():
    assert all(x == NULL for x in derive_control_sequence(np.zeros(18, dtype=bool)))


def test_control_exhaustive_n12():
    for bits in itertools.product((False, True), repeat=12):
        v = np.array(bits)
        got = derive_control_sequence(v).tolist()
        assert got == _control_oracle(list(bits)), f"mismatch at {bits}"


# ---------------------------------------------------------------------------
# occupancy grid
# ---------------------------------------------------------------------------

def test_grid_ego_only():
    g = build_occupancy_grid(np.zeros((0, 2)), np.array([10.0, 5.0, 0.3]))
    assert g.sum() == 1 and g[CENTER_CELL] == 1


def test_grid_two_agents_one_cell_binary():
    ego = np.array([0.0, 0.0, 0.0])
    pts = np.array([[6.0, 0.1], [6.1, -0.2]])
    g = build_occupancy_grid(pts, ego)
    assert g.max() == 1
    assert g.sum() == 2  # ego cell + the shared cell


def test_grid_far_agent_ignored():
    ego = np.array([0.0, 0.0, 0.0])
    g1 = build_occupancy_grid(np.zeros((0, 2)), ego)
    g2 = build_occupancy_grid(np.array([[200.0, 0.0]]), ego)
    np.testing.assert_array_equal(g1, g2)


# ---------------------------------------------------------------------------
# GT sequence assembly
# ---------------------------------------------------------------------------

def test_gt_insertion_sorted_by_ego_distance(small_corpus, small_vocab):
    found = False
    for s in small_corpus:
        ts = tokenize_scenario(s, small_vocab)
        for p, lst in ts.insertions.items():
            if len(lst) >= 2:
                found = True
                dists = [i.ego_distance for i in lst]
                assert dists == sorted(dists)
    # at least one multi-insertion step should exist across the session corpus
    # (not guaranteed for every seed; tolerate absence but check sortedness above)


def test_gt_agent_counts_match_validity(small_corpus, small_vocab):
    s = small_corpus[0]
    ts = tokenize_scenario(s, small_vocab)
    # reconstruct per-slot agent counts from add/remove slots and compare with
    # token validity counts
    for p in range(ts.n_slots):
        from_validity = sum(1 for a in ts.agents if a.validity[p])
        reconstructed = sum(
            1 for a in ts.agents
            if a.add_slot is not None and a.add_slot <= p <= a.remove_slot
            and a.validity[p]
        )
        assert from_validity == reconstructed


def test_gt_replay_drift_bound(small_corpus, small_vocab):
    """Replaying GT motion tokens from each agent's start pose stays within a
    frozen drift bound of the raw trajectory (regression value)."""
    worst = 0.0
    for s in small_corpus:
        ts = tokenize_scenario(s, small_vocab)
        for a_tok, track in zip(ts.agents, s.agents):
            if a_tok.add_slot is None:
                continue
            for k in range(ts.n_slots + 1):
                if a_tok.pose_defined[k] and track.valid[min(k * DELTA, s.n_steps - 1)]:
                    raw = track.xy[min(k * DELTA, s.n_steps - 1)]
                    worst = max(worst, float(np.linalg.norm(a_tok.poses[k][:2] - raw)))
    # frozen regression bound for the session corpus/vocab (measured 2025)
    assert worst < 6.0


def test_out_of_grid_insertions_counted(small_corpus, small_vocab):
    ts = tokenize_scenario(small_corpus[0], small_vocab)
    assert ts.skipped_out_of_grid >= 0
    for lst in ts.insertions.values():
        for ins in lst:
            assert 0 <= ins.pos_token < N_POS
