"""Single entry point: synth, vocab, tokenize, train, rollout, reference,
eval, render. Every sub-command is a pure function of (inputs, config, seed)
and echoes its resolved configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import metrics as met
from . import rollout as ro
from . import scenario as sc
from . import tokenizer as tok
from . import training as tr
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import InterleavedModel, ModelConfig
from .render import render_svg


def _echo_config(out_path: str, payload: dict) -> None:
    """Write the resolved run configuration next to the output."""
    base = out_path if os.path.isdir(out_path) else os.path.dirname(out_path) or "."
    name = os.path.basename(out_path.rstrip("/")) or "run"
    path = os.path.join(base, f"{name}.config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jobs(args) -> int:
    env = os.environ.get("LONGSIM_JOBS")
    if env:
        return max(1, int(env))
    return max(1, getattr(args, "jobs", 1) or 1)


def cmd_synth(args) -> int:
    cfg = sc.CorpusConfig(count=args.count, through_traffic_rate=args.through_rate,
                          min_agents=args.min_agents, max_agents=args.max_agents)
    scenarios = sc.generate_synthetic_corpus(cfg, args.seed)
    sc.write_scenarios(scenarios, args.out)
    _echo_config(args.out, {"command": "synth", "count": args.count, "seed": args.seed,
                            "through_rate": args.through_rate,
                            "min_agents": args.min_agents, "max_agents": args.max_agents})
    print(f"wrote {len(scenarios)} scenarios to {args.out}")
    return 0


def cmd_vocab(args) -> int:
    scenarios = sc.load_scenarios(args.corpus)
    vocab = tok.build_motion_vocabulary(scenarios, size=args.size, k=args.k, seed=args.seed)
    tok.save_vocabulary(vocab, args.out)
    _echo_config(args.out, {"command": "vocab", "corpus": args.corpus, "size": args.size,
                            "k": args.k, "seed": args.seed, "hash": vocab.content_hash()})
    print(f"built motion vocabulary of {vocab.size} primitives ({vocab.content_hash()})")
    return 0


def cmd_tokenize(args) -> int:
    scenarios = sc.load_scenarios(args.corpus)
    vocab = tok.load_vocabulary(args.vocab)
    skipped = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for s in scenarios:
            ts = tok.tokenize_scenario(s, vocab, map_cap=args.map_cap)
            skipped += ts.skipped_out_of_grid
            rec = {
                "n_slots": ts.n_slots,
                "ego_row": ts.ego_row,
                "agents": [
                    {
                        "id": at.agent_id,
                        "type_id": at.type_id,
                        "shape": at.shape.tolist(),
                        "motion": at.motion.tolist(),
                        "validity": at.validity.astype(int).tolist(),
                        "control": at.control.tolist(),
                    }
                    for at in ts.agents
                ],
                "insertions": {
                    str(p): [
                        {"agent_index": i.agent_index, "pos_token": i.pos_token,
                         "head_token": i.head_token, "ego_distance": i.ego_distance}
                        for i in lst
                    ]
                    for p, lst in sorted(ts.insertions.items())
                },
            }
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")
    _echo_config(args.out, {"command": "tokenize", "corpus": args.corpus,
                            "vocab": args.vocab, "vocab_hash": vocab.content_hash(),
                            "map_cap": args.map_cap, "skipped_out_of_grid": skipped})
    print(f"tokenized {len(scenarios)} scenarios ({skipped} out-of-grid insertions skipped)")
    return 0


def _load_model_config(path) -> ModelConfig:
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            return ModelConfig.from_dict(json.load(fh))
    return ModelConfig()


def cmd_train(args) -> int:
    scenarios = sc.load_scenarios(args.corpus)
    vocab = tok.load_vocabulary(args.vocab)
    mcfg = _load_model_config(args.config)
    if mcfg.vocab_motion != vocab.size:
        print(f"error: model config expects motion vocab {mcfg.vocab_motion}, "
              f"file has {vocab.size}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    model = InterleavedModel(mcfg, seed=args.seed)
    prepared = []
    for s in scenarios:
        ts = tok.tokenize_scenario(s, vocab, map_cap=mcfg.map_cap)
        prepared.append(tr.prepare_scenario(model, ts, l_prime=args.l_prime))
    tcfg = tr.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                          lr=args.lr, seed=args.seed, l_prime=args.l_prime,
                          checkpoint_every=args.checkpoint_every)
    history = tr.train(model, prepared, tcfg, out_dir=args.out,
                       vocab_hash=vocab.content_hash())
    _echo_config(args.out, {"command": "train", "corpus": args.corpus, "vocab": args.vocab,
                            "vocab_hash": vocab.content_hash(), "seed": args.seed,
                            "epochs": args.epochs, "batch_size": args.batch_size,
                            "lr": args.lr, "model_config": mcfg.to_dict(),
                            "config_hash": mcfg.config_hash()})
    print(f"trained {args.epochs} epochs; final loss {history[-1]['total']:.4f}; "
          f"checkpoints in {args.out}")
    return 0


def cmd_rollout(args) -> int:
    scenarios = sc.load_scenarios(args.scenario)
    vocab = tok.load_vocabulary(args.vocab)
    try:
        model, meta = load_checkpoint(args.model, expect_vocab_hash=vocab.content_hash())
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    policy = ro.SamplingPolicy(
        motion_temperature=args.motion_temp, motion_topk=args.motion_topk,
        position_topk=args.pos_topk,
    )
    idx = args.index
    if not (0 <= idx < len(scenarios)):
        print(f"error: scenario index {idx} out of range", file=sys.stderr)
        return 2
    rollout = ro.run_rollout(model, scenarios[idx], vocab, policy,
                             horizon=args.horizon, seed=args.seed,
                             ego_mode=args.ego, motion_only=args.motion_only)
    ro.save_rollout(rollout, args.out)
    _echo_config(args.out, {"command": "rollout", "model": args.model,
                            "scenario": args.scenario, "index": idx,
                            "horizon": args.horizon, "seed": args.seed,
                            "ego": args.ego, "motion_only": args.motion_only,
                            "motion_temp": args.motion_temp,
                            "motion_topk": args.motion_topk, "pos_topk": args.pos_topk})
    print(f"rollout of {args.horizon} token steps written to {args.out} "
          f"({len(rollout.events)} placement events)")
    return 0


def cmd_reference(args) -> int:
    scenarios = sc.load_scenarios(args.corpus)
    ref = met.estimate_reference(scenarios)
    met.save_reference(ref, args.out)
    _echo_config(args.out, {"command": "reference", "corpus": args.corpus})
    print(f"reference distributions from {len(scenarios)} scenarios -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    ref = met.load_reference(args.reference)
    scenarios = sc.load_scenarios(args.scenario)
    spec = met.WindowSpec(t_w=args.window, stride=args.stride)
    paths = sorted(
        os.path.join(args.rollouts, f) for f in os.listdir(args.rollouts)
        if f.endswith(".json") and not f.endswith(".config.json")
    ) if os.path.isdir(args.rollouts) else [args.rollouts]

    def score(path):
        rollout = ro.load_rollout(path)
        trace = met.rollout_to_trace(rollout, scenarios[args.index])
        return path, met.evaluate_trace(trace, ref, spec)

    jobs = _jobs(args)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(score, paths))
    else:
        results = [score(p) for p in paths]

    rows = []
    for path, report in results:
        doc = report.to_json()
        doc["rollout"] = os.path.basename(path)
        rows.append(doc)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump({"format": "longsim-eval-v1", "reports": rows}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    csv_path = os.path.splitext(args.out)[0] + ".csv"
    cols = ["rollout", "composite", "kinematic", "interactive", "map", "placement",
            "mean_ace", "ace_slope"]
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(str(r[c]) for c in cols) + "\n")
    _echo_config(args.out, {"command": "eval", "rollouts": args.rollouts,
                            "reference": args.reference, "window": args.window,
                            "stride": args.stride, "index": args.index})
    for r in rows:
        print(f"{r['rollout']}: composite={r['composite']:.4f} "
              f"meanACE={r['mean_ace']:.3f} slope={r['ace_slope']:.4f}")
    return 0


def cmd_render(args) -> int:
    rollout = ro.load_rollout(args.rollout)
    scenarios = sc.load_scenarios(args.scenario)
    s = scenarios[args.index]
    n_raw = rollout.agents[0]["states"].shape[0] if rollout.agents else 0
    steps = range(0, n_raw, args.every) if args.all else [args.step]
    os.makedirs(args.out, exist_ok=True)
    for st in steps:
        svg = render_svg(s.map, rollout.agents, st)
        path = os.path.join(args.out, f"frame_{st:05d}.svg")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(svg)
    _echo_config(args.out, {"command": "render", "rollout": args.rollout,
                            "scenario": args.scenario, "index": args.index,
                            "all": args.all, "step": args.step, "every": args.every})
    print(f"rendered {len(list(steps))} frame(s) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="longsim",
                                description="long-horizon closed-loop traffic simulation")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic scenario corpus")
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--through-rate", type=float, default=0.5, dest="through_rate")
    sp.add_argument("--min-agents", type=int, default=8)
    sp.add_argument("--max-agents", type=int, default=14)
    sp.set_defaults(func=cmd_synth)

    vp = sub.add_parser("vocab", help="build the motion-primitive vocabulary")
    vp.add_argument("--corpus", required=True)
    vp.add_argument("--size", type=int, default=2048)
    vp.add_argument("--k", type=int, default=32)
    vp.add_argument("--seed", type=int, required=True)
    vp.add_argument("--out", required=True)
    vp.set_defaults(func=cmd_vocab)

    tp = sub.add_parser("tokenize", help="tokenize a corpus against a vocabulary")
    tp.add_argument("--corpus", required=True)
    tp.add_argument("--vocab", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--map-cap", type=int, default=1024)
    tp.set_defaults(func=cmd_tokenize)

    rp = sub.add_parser("train", help="teacher-forced training")
    rp.add_argument("--corpus", required=True)
    rp.add_argument("--vocab", required=True)
    rp.add_argument("--config", default=None, help="model config JSON")
    rp.add_argument("--seed", type=int, required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--epochs", type=int, default=100)
    rp.add_argument("--batch-size", type=int, default=8)
    rp.add_argument("--lr", type=float, default=5e-4)
    rp.add_argument("--l-prime", type=int, default=10)
    rp.add_argument("--checkpoint-every", type=int, default=0)
    rp.set_defaults(func=cmd_train)

    op = sub.add_parser("rollout", help="closed-loop interleaved rollout")
    op.add_argument("--model", required=True)
    op.add_argument("--scenario", required=True)
    op.add_argument("--vocab", required=True)
    op.add_argument("--index", type=int, default=0)
    op.add_argument("--horizon", type=int, default=60)
    op.add_argument("--seed", type=int, required=True)
    op.add_argument("--out", required=True)
    op.add_argument("--motion-only", action="store_true")
    op.add_argument("--ego", choices=("log", "model"), default="model")
    op.add_argument("--motion-temp", type=float, default=1.0)
    op.add_argument("--motion-topk", type=int, default=0)
    op.add_argument("--pos-topk", type=int, default=10)
    op.set_defaults(func=cmd_rollout)

    fp = sub.add_parser("reference", help="estimate reference distributions")
    fp.add_argument("--corpus", required=True)
    fp.add_argument("--out", required=True)
    fp.set_defaults(func=cmd_reference)

    ep = sub.add_parser("eval", help="score rollouts against a reference")
    ep.add_argument("--rollouts", required=True, help="rollout file or directory")
    ep.add_argument("--reference", required=True)
    ep.add_argument("--scenario", required=True, help="scenario corpus (for maps)")
    ep.add_argument("--index", type=int, default=0)
    ep.add_argument("--out", required=True)
    ep.add_argument("--window", type=int, default=80)
    ep.add_argument("--stride", type=int, default=20)
    ep.add_argument("--jobs", type=int, default=1)
    ep.set_defaults(func=cmd_eval)

    gp = sub.add_parser("render", help="render rollout frames as SVG")
    gp.add_argument("--rollout", required=True)
    gp.add_argument("--scenario", required=True)
    gp.add_argument("--index", type=int, default=0)
    gp.add_argument("--step", type=int, default=0)
    gp.add_argument("--all", action="store_true")
    gp.add_argument("--every", type=int, default=10)
    gp.add_argument("--out", required=True)
    gp.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (sc.ScenarioError, tok.TokenizerError, met.MetricsError,
            ro.RolloutError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
