"""Image exports: decoded fused prompt pairs and per-prompt attention heat maps."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..data import PromptPair, write_image
from .engine import Workspace, encode_batch, iou, label_mask, topn_indices


def _prepare(ws: Workspace, query: PromptPair, n: int, exclude_self: bool):
    ex = ws.db._by_id.get(query.id) if exclude_self else None
    return [ws.db[i] for i in topn_indices(query.image, ws.db, n, ex)]


def fused_prompt_images(ws: Workspace, fuser, query: PromptPair, prompts: list[PromptPair]):
    """Decode the encoder's reading of the fused pair (argmax over its codebook logits)."""
    g = ws.backbone.cfg.grid
    with T.no_grad():
        logits, _, _, att = encode_batch(fuser, ws.backbone, query.image[None], [prompts])
    fx = ws.backbone.decode(logits.data[0, :g, :g].argmax(-1))
    fy = ws.backbone.decode(logits.data[0, :g, g:].argmax(-1))
    return fx, fy, att


def export_fused_prompt(ws: Workspace, fuser, query: PromptPair, out_path, n: int | None = None,
                        prompts: list[PromptPair] | None = None, exclude_self: bool = False) -> dict:
    """Write an H x 4W composite [fused image | fused label | query image | query label] plus a sidecar JSON."""
    out_path = Path(out_path)
    if not out_path.parent.exists():
        raise OSError(f"output directory {out_path.parent} does not exist")
    prompts = prompts or _prepare(ws, query, n or ws.cfg.fusion.num_prompts, exclude_self)
    fx, fy, _ = fused_prompt_images(ws, fuser, query, prompts)
    composite = np.concatenate([fx, fy, query.image, query.label], axis=1)
    write_image(out_path, composite)
    metrics = {"query_id": query.id, "prompt_ids": [p.id for p in prompts],
               "fused_label_iou": iou(label_mask(fy), label_mask(query.label)),
               "fused_image_mse": float(np.mean((fx - query.image) ** 2))}
    T.atomic_write(out_path.with_suffix(".json"), json.dumps(metrics, indent=2).encode("utf-8"))
    return metrics


def attention_heat(weights: np.ndarray, grid: tuple[int, int], n: int) -> tuple[np.ndarray, np.ndarray]:
    """(G, N*G) attention for one query -> (raw average mass, min-max normalized) each (N, G_h, G_w)."""
    gh, gw = grid
    mass = weights.reshape(gh * gw, n, gh, gw).mean(axis=0)
    heat = np.empty_like(mass)
    for k in range(n):
        lo, hi = mass[k].min(), mass[k].max()
        heat[k] = 0.0 if hi - lo <= 0 else (mass[k] - lo) / (hi - lo)
    return mass, heat


def export_attention_map(ws: Workspace, fuser, query: PromptPair, out_dir, n: int | None = None,
                         prompts: list[PromptPair] | None = None, exclude_self: bool = False) -> list[Path]:
    """One heat image per prompt (grid heat upscaled to the sub-image size) plus ``attention.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prompts = prompts or _prepare(ws, query, n or ws.cfg.fusion.num_prompts, exclude_self)
    _, _, att = fused_prompt_images(ws, fuser, query, prompts)
    mass, heat = attention_heat(att.weights.data[0], att.grid, att.num_prompts)
    p = ws.backbone.cfg.patch_size
    paths = []
    for k, h in enumerate(heat):
        up = np.kron(h, np.ones((p, p)))
        path = out_dir / f"attn_{k}.png"
        write_image(path, np.repeat(up[..., None], 3, axis=-1))
        paths.append(path)
    meta = {"query_id": query.id, "prompt_ids": [q.id for q in prompts],
            "mass": mass.tolist(), "total_mass": float(mass.sum())}
    T.atomic_write(out_dir / "attention.json", json.dumps(meta, indent=2).encode("utf-8"))
    return paths
