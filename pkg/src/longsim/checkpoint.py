"""Versioned checkpoint files: named parameter arrays + config/vocab hashes."""

from __future__ import annotations

import json

import numpy as np

from .model import InterleavedModel, ModelConfig

CKPT_FORMAT = "longsim-ckpt-v1"


class CheckpointError(Exception):
    pass


def save_checkpoint(model: InterleavedModel, path, vocab_hash: str = "", step: int = 0) -> None:
    params = model.parameters()
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names")
    meta = {
        "format": CKPT_FORMAT,
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.config_hash(),
        "vocab_hash": vocab_hash,
        "step": step,
    }
    arrays = {p.name: p.data for p in params}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path, expect_vocab_hash: str | None = None):
    """Returns (model, meta). Refuses on format or vocab-hash mismatch."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CKPT_FORMAT:
            raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
        if expect_vocab_hash is not None and meta["vocab_hash"] != expect_vocab_hash:
            raise CheckpointError(
                f"vocabulary hash mismatch: checkpoint was trained with "
                f"{meta['vocab_hash']!r}, got {expect_vocab_hash!r}"
            )
        cfg = ModelConfig.from_dict(meta["config"])
        if cfg.config_hash() != meta["config_hash"]:
            raise CheckpointError("config hash mismatch inside checkpoint")
        model = InterleavedModel(cfg, seed=0)
        for p in model.parameters():
            if p.name not in data:
                raise CheckpointError(f"missing parameter {p.name!r}")
            arr = data[p.name]
            if arr.shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {p.name!r}")
            p.data = arr.astype(p.data.dtype)
    return model, meta
