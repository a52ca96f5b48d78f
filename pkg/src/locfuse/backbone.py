"""Frozen inpainting backbone: VQ patch quantizer/decoder plus a transformer encoder.

The encoder reads a canvas of patch embeddings (four G x G quadrants) and emits,
per cell, a logit vector over the codebook. Those logit vectors are the
"continuous tokens" consumed by the fusion losses. The quantizer maps pixel
patches to codebook indices (0-based) and the decoder maps indices back to
pixels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import PromptPair, TaskSpec, pretraining_pairs

log = logging.getLogger(__name__)

BACKBONE_VERSION = 2


class PretrainingError(RuntimeError):
    def __init__(self, message: str, metric: float):
        super().__init__(f"{message} (final metric {metric:.5f})")
        self.metric = metric


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 4
    grid: int = 8
    dim: int = 32
    depth: int = 2
    ff_mult: int = 4

    @property
    def codebook_size(self) -> int:
        return self.dim

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """(..., H, W, 3) -> (..., H/p, W/p, p*p*3)."""
    *lead, h, w, c = images.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(*lead, h // p, p, w // p, p, c)
    x = np.moveaxis(x, -4, -3)
    return x.reshape(*lead, h // p, w // p, p * p * c)


def unpatchify(patches: np.ndarray, p: int) -> np.ndarray:
    *lead, gh, gw, _ = patches.shape
    x = patches.reshape(*lead, gh, gw, p, p, 3)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, gh * p, gw * p, 3)


def canvas_position_table(g: int, d: int) -> np.ndarray:
    """2-D sin-cos code of the within-quadrant cell position, repeated for all four quadrants.

    Starting every quadrant from the same code makes "same cell, other quadrant"
    an easy attention pattern; the table is trained from there.
    """
    rows, cols = np.meshgrid(np.arange(2 * g) % g, np.arange(2 * g) % g, indexing="ij")
    quarter = d // 4
    freq = 1.0 / (10.0 ** (np.arange(quarter) / max(quarter, 1)))
    parts = []
    for coord in (rows.reshape(-1), cols.reshape(-1)):
        ang = coord[:, None] * freq[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1)


def _init(rng, shape, name):
    fan_in, fan_out = shape[0], shape[-1]
    return T.xavier_uniform(rng, fan_in, fan_out, shape=shape, name=name)


class Backbone:
    """All weights live in ``self.params``; ``freeze`` turns gradients off for good."""

    def __init__(self, cfg: BackboneConfig = BackboneConfig(), seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, pd, g = cfg.dim, cfg.patch_dim, cfg.grid
        p = {
            "embed.weight": _init(rng, (pd, d), "embed.weight"),
            "embed.bias": T.Tensor(np.zeros(d), requires_grad=True),
            "embed.sub_pos": _init(rng, (g * g, d), "embed.sub_pos"),
            "encoder.canvas_pos": T.Tensor(canvas_position_table(g, d) + rng.uniform(-0.02, 0.02, size=(4 * g * g, d)),
                                           requires_grad=True),
            "encoder.mask_token": T.Tensor(rng.uniform(-0.1, 0.1, size=d), requires_grad=True),
        }
        for i in range(cfg.depth):
            for m in ("q", "k", "v", "o"):
                p[f"block{i}.attn.{m}"] = _init(rng, (d, d), f"block{i}.attn.{m}")
            for ln in ("ln1", "ln2"):
                p[f"block{i}.{ln}.gain"] = T.Tensor(np.ones(d), requires_grad=True)
                p[f"block{i}.{ln}.bias"] = T.Tensor(np.zeros(d), requires_grad=True)
            p[f"block{i}.ff.w1"] = _init(rng, (d, cfg.ff_mult * d), f"block{i}.ff.w1")
            p[f"block{i}.ff.b1"] = T.Tensor(np.zeros(cfg.ff_mult * d), requires_grad=True)
            p[f"block{i}.ff.w2"] = _init(rng, (cfg.ff_mult * d, d), f"block{i}.ff.w2")
            p[f"block{i}.ff.b2"] = T.Tensor(np.zeros(d), requires_grad=True)
        p["head.ln.gain"] = T.Tensor(np.ones(d), requires_grad=True)
        p["head.ln.bias"] = T.Tensor(np.zeros(d), requires_grad=True)
        p["head.weight"] = _init(rng, (d, cfg.codebook_size), "head.weight")
        p["head.bias"] = T.Tensor(np.zeros(cfg.codebook_size), requires_grad=True)
        p["vq.enc.weight"] = _init(rng, (pd, d), "vq.enc.weight")
        p["vq.enc.bias"] = T.Tensor(np.zeros(d), requires_grad=True)
        p["vq.codebook"] = T.Tensor(rng.normal(0, 0.1, size=(cfg.codebook_size, d)), requires_grad=True)
        p["vq.dec.weight"] = _init(rng, (d, pd), "vq.dec.weight")
        p["vq.dec.bias"] = T.Tensor(np.full(pd, 0.5), requires_grad=True)
        for k, t in p.items():
            t.name = k
        self.params: dict[str, T.Tensor] = p
        self.frozen = False

    # ------------------------------------------------------------ state

    def freeze(self) -> "Backbone":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True
        return self

    def subset(self, prefix: str) -> dict[str, T.Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def checksum(self) -> str:
        return T.checksum(self.state())

    @property
    def mask_token(self) -> T.Tensor:
        return self.params["encoder.mask_token"]

    @property
    def codebook(self) -> T.Tensor:
        return self.params["vq.codebook"]

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"backbone_version": BACKBONE_VERSION, "config": asdict(self.cfg), **(extra or {})}
        T.save_tensors(path, self.state(), meta)

    @classmethod
    def load(cls, path) -> "Backbone":
        arrays, meta = T.load_tensors(path)
        if meta.get("backbone_version") != BACKBONE_VERSION:
            raise ValueError(f"unsupported backbone version {meta.get('backbone_version')}")
        bb = cls(BackboneConfig(**meta["config"]))
        for k, arr in arrays.items():
            bb.params[k] = T.Tensor(arr, name=k, dtype=arr.dtype)
        bb.meta = meta
        return bb.freeze()

    # ------------------------------------------------------------ embedding / encoder

    def embed(self, images: np.ndarray) -> T.Tensor:
        """Patch embedding of (..., H, W, 3) images -> (..., G_h, G_w, D)."""
        p = self.params
        patches = patchify(np.asarray(images), self.cfg.patch_size)
        *lead, gh, gw, _ = patches.shape
        if gh * gw != p["embed.sub_pos"].shape[0]:
            raise ValueError(f"grid {gh}x{gw} does not match the positional table")
        x = T.Tensor(patches, dtype=p["embed.weight"].dtype) @ p["embed.weight"]
        pos = T.reshape(p["embed.sub_pos"], (gh, gw, self.cfg.dim))
        return x + p["embed.bias"] + pos

    def encode_continuous(self, canvas: T.Tensor) -> T.Tensor:
        """(..., 2G, 2G, D) canvas -> (..., 2G, 2G, N_c) codebook logits."""
        cfg, p = self.cfg, self.params
        g2 = 2 * cfg.grid
        if canvas.shape[-3:] != (g2, g2, cfg.dim):
            raise T.DimensionError(f"canvas shape {canvas.shape} != (..., {g2}, {g2}, {cfg.dim})")
        lead = canvas.shape[:-3]
        x = T.reshape(canvas, (-1, g2 * g2, cfg.dim)) + p["encoder.canvas_pos"]
        scale = 1.0 / math.sqrt(cfg.dim)
        for i in range(cfg.depth):
            xn = self._norm(x, f"block{i}.ln1")
            q = xn @ p[f"block{i}.attn.q"]
            k = xn @ p[f"block{i}.attn.k"]
            v = xn @ p[f"block{i}.attn.v"]
            att = T.softmax_lastdim(T.mul(q @ T.swapaxes(k, -1, -2), scale))
            x = x + (att @ v) @ p[f"block{i}.attn.o"]
            h = T.relu(self._norm(x, f"block{i}.ln2") @ p[f"block{i}.ff.w1"] + p[f"block{i}.ff.b1"])
            x = x + h @ p[f"block{i}.ff.w2"] + p[f"block{i}.ff.b2"]
        logits = self._norm(x, "head.ln") @ p["head.weight"] + p["head.bias"]
        return T.reshape(logits, lead + (g2, g2, cfg.codebook_size))

    def _norm(self, x: T.Tensor, name: str) -> T.Tensor:
        return T.layer_norm(x) * self.params[name + ".gain"] + self.params[name + ".bias"]

    def canvas(self, prompt_img: T.Tensor, prompt_lbl: T.Tensor, query_img: T.Tensor) -> T.Tensor:
        """Tile three (B, G, G, D) blocks and the mask token into (B, 2G, 2G, D)."""
        b, g = query_img.shape[0], self.cfg.grid
        mask = T.broadcast_to(self.mask_token, (b, g, g, self.cfg.dim))
        top = T.concat([prompt_img, prompt_lbl], axis=2)
        bottom = T.concat([query_img, mask], axis=2)
        return T.concat([top, bottom], axis=1)

    # ------------------------------------------------------------ quantizer / decoder

    def _vq_features(self, patches: np.ndarray) -> np.ndarray:
        p = self.params
        return patches.astype(np.float64) @ p["vq.enc.weight"].data.astype(np.float64) + p["vq.enc.bias"].data

    def _nearest(self, z: np.ndarray) -> np.ndarray:
        cb = self.codebook.data.astype(np.float64)
        d = ((z[..., None, :] - cb) ** 2).sum(-1)
        return np.argmin(d, axis=-1)  # first minimum wins ties

    def quantize(self, pixels: np.ndarray) -> np.ndarray:
        """(..., H, W, 3) pixels -> (..., H/P, W/P) int64 codebook indices."""
        patches = patchify(np.asarray(pixels), self.cfg.patch_size)
        return self._nearest(self._vq_features(patches)).astype(np.int64)

    def decode(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices)
        n = self.cfg.codebook_size
        if indices.size and (indices.min() < 0 or indices.max() >= n):
            raise IndexError(f"codebook index out of range [0, {n})")
        p = self.params
        vec = self.codebook.data[indices]
        pix = vec @ p["vq.dec.weight"].data + p["vq.dec.bias"].data
        return np.clip(unpatchify(pix, self.cfg.patch_size), 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------- pretraining


@dataclass(frozen=True)
class PretrainConfig:
    n_pairs: int = 1536
    n_heldout: int = 256
    vq_steps: int = 1500
    vq_batch: int = 512
    vq_lr: float = 3e-3
    commitment: float = 0.25
    enc_steps: int = 2500
    enc_batch: int = 32
    enc_lr: float = 2e-3
    visible_weight: float = 0.5
    self_prompt: float = 0.5
    max_recon_mse: float = 0.05
    seed: int = 0


def _canvas_pixels(pairs: list[tuple[PromptPair, PromptPair]]) -> np.ndarray:
    top = np.stack([np.concatenate([a.image, a.label], axis=1) for a, _ in pairs])
    bottom = np.stack([np.concatenate([b.image, b.label], axis=1) for _, b in pairs])
    return np.concatenate([top, bottom], axis=1)


def train_quantizer(bb: Backbone, patches: np.ndarray, pc: PretrainConfig, rng: np.random.Generator) -> float:
    """Straight-through VQ autoencoder with codebook/commitment losses and dead-code restarts."""
    params = {k: bb.params[k] for k in ("vq.enc.weight", "vq.enc.bias", "vq.codebook", "vq.dec.weight", "vq.dec.bias")}
    opt = T.Adam(params, lr=pc.vq_lr)
    n = len(patches)
    init = patches[rng.choice(n, size=bb.cfg.codebook_size, replace=False)]
    bb.codebook.data = bb._vq_features(init).astype(bb.codebook.data.dtype)
    usage = np.zeros(bb.cfg.codebook_size)
    for step in range(pc.vq_steps):
        batch = patches[rng.integers(n, size=pc.vq_batch)]
        x = T.Tensor(batch)
        z = x @ params["vq.enc.weight"] + params["vq.enc.bias"]
        idx = bb._nearest(z.data)
        usage += np.bincount(idx, minlength=len(usage))
        zq = T.take_rows(params["vq.codebook"], idx)
        z_st = z + (zq - z).detach()
        recon = z_st @ params["vq.dec.weight"] + params["vq.dec.bias"]
        rec = T.mean((recon - x) * (recon - x))
        cb = T.mean((zq - z.detach()) * (zq - z.detach()))
        commit = T.mean((z - zq.detach()) * (z - zq.detach()))
        T.backward(rec + cb + T.mul(commit, pc.commitment))
        opt.step(pc.vq_lr * 0.5 * (1 + math.cos(math.pi * step / pc.vq_steps)))
        if (step + 1) % 100 == 0 and step < pc.vq_steps * 0.8:
            dead = np.flatnonzero(usage == 0)
            if dead.size:
                fresh = patches[rng.integers(n, size=dead.size)]
                bb.codebook.data[dead] = bb._vq_features(fresh)
            usage[:] = 0
    idx = bb._nearest(bb._vq_features(patches))
    _retire_unused_codes(bb, np.unique(idx), rng)
    rec = bb.codebook.data[idx] @ bb.params["vq.dec.weight"].data + bb.params["vq.dec.bias"].data
    return float(np.mean((np.clip(rec, 0, 1) - patches) ** 2))


def _retire_unused_codes(bb: Backbone, used: np.ndarray, rng: np.random.Generator) -> None:
    """Park codes no training patch selects far outside the data, on distinct points."""
    cb = bb.codebook.data
    unused = np.setdiff1d(np.arange(len(cb)), used)
    if not unused.size:
        return
    radius = 10.0 * (np.linalg.norm(cb[used], axis=1).max() + 1.0)
    dirs = rng.normal(size=(unused.size, cb.shape[1]))
    cb[unused] = radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def self_prompted(pixels: np.ndarray, tokens: np.ndarray, rows: np.ndarray):
    """Copy the query pair over the prompt slot for the selected canvases."""
    pixels, tokens = pixels.copy(), tokens.copy()
    hp, ht = pixels.shape[1] // 2, tokens.shape[1] // 2
    pixels[rows, :hp] = pixels[rows, hp:]
    tokens[rows, :ht] = tokens[rows, ht:]
    return pixels, tokens


def _masked_batch(bb: Backbone, pixels: np.ndarray):
    g, half = bb.cfg.grid, pixels.shape[1] // 2
    prompt_img = bb.embed(pixels[:, :half, :half])
    prompt_lbl = bb.embed(pixels[:, :half, half:])
    query_img = bb.embed(pixels[:, half:, :half])
    return bb.encode_continuous(bb.canvas(prompt_img, prompt_lbl, query_img))


def masked_token_accuracy(bb: Backbone, pixels: np.ndarray, tokens: np.ndarray, batch: int = 64) -> float:
    g = bb.cfg.grid
    hits = total = 0
    with T.no_grad():
        for s in range(0, len(pixels), batch):
            logits = _masked_batch(bb, pixels[s: s + batch]).data
            pred = logits[:, g:, g:].argmax(-1)
            hits += int((pred == tokens[s: s + batch, g:, g:]).sum())
            total += pred.size
    return hits / total


def train_encoder(bb: Backbone, pixels: np.ndarray, tokens: np.ndarray, pc: PretrainConfig, rng) -> float:
    params = {k: v for k, v in bb.params.items() if not k.startswith("vq.")}
    opt = T.Adam(params, lr=pc.enc_lr)
    g = bb.cfg.grid
    visible = np.ones((2 * g, 2 * g), dtype=bool)
    visible[g:, g:] = False
    loss_val = float("nan")
    for step in range(pc.enc_steps):
        sel = rng.integers(len(pixels), size=pc.enc_batch)
        px, tok = self_prompted(pixels[sel], tokens[sel], rng.random(pc.enc_batch) < pc.self_prompt)
        logits = _masked_batch(bb, px)
        ce = T.cross_entropy(logits, tok)
        masked = T.mean(ce[:, g:, g:])
        seen = T.mean(T.mul(ce, T.Tensor(visible))) * (4.0 / 3.0)
        loss = masked + T.mul(seen, pc.visible_weight)
        loss_val = loss.item()
        T.backward(loss)
        warm = min(1.0, (step + 1) / 100)
        opt.step(pc.enc_lr * warm * 0.5 * (1 + math.cos(math.pi * step / pc.enc_steps)))
        if step % 500 == 0:
            log.info("encoder step %d loss %.4f", step, loss_val)
    return loss_val


def pretrain(spec: TaskSpec, pc: PretrainConfig = PretrainConfig(), cfg: BackboneConfig | None = None) -> tuple[Backbone, dict]:
    """Train quantizer, encoder and mask token on synthetic canvases; return a frozen backbone."""
    if pc.n_pairs <= 0:
        raise ValueError("pretraining dataset is empty")
    cfg = cfg or BackboneConfig(patch_size=spec.patch_size, grid=spec.grid)
    rng = np.random.default_rng(pc.seed)
    bb = Backbone(cfg, seed=pc.seed)
    pairs = pretraining_pairs(spec, pc.n_pairs + pc.n_heldout, seed=pc.seed + 1)
    pixels = _canvas_pixels(pairs)
    train_px, held_px = pixels[: pc.n_pairs], pixels[pc.n_pairs:]

    patches = patchify(train_px, cfg.patch_size).reshape(-1, cfg.patch_dim).astype(np.float64)
    train_quantizer(bb, patches, pc, rng)
    held_tokens = bb.quantize(held_px)
    recon_mse = float(np.mean((bb.decode(held_tokens) - held_px) ** 2))
    if recon_mse > pc.max_recon_mse:
        raise PretrainingError("quantizer reconstruction did not converge", recon_mse)

    train_tokens = bb.quantize(train_px)
    final_loss = train_encoder(bb, train_px, train_tokens, pc, rng)
    bb.freeze()
    acc = masked_token_accuracy(bb, held_px, held_tokens)
    roundtrip = float(np.mean(bb.quantize(bb.decode(held_tokens)) == held_tokens))
    report = {"recon_mse": recon_mse, "masked_token_accuracy": acc, "codebook_roundtrip": roundtrip,
              "encoder_loss": final_loss, "task": spec.kind.value}
    log.info("backbone pretraining: %s", report)
    return bb, report
