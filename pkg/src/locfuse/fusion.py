"""Locality-aware multi-prompt fusion.

Shapes are batched: a query grid is (B, G_h, G_w, D) and a prompt stack is
(B, N, G_h, G_w, D). Query and key positions are flattened row-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .locality import AdaptiveSigmaHead, LocalityConfig, all_centers, prior_from_sigma


class EmptyPromptError(ValueError):
    pass


class FusionWeights:
    NAMES = ("W_Q", "W_K", "W_VX", "W_VY", "sa.q", "sa.k", "sa.v", "sa.o")

    def __init__(self, dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.params = {n: T.xavier_uniform(rng, dim, dim, name=n) for n in self.NAMES}

    def __getitem__(self, name: str) -> T.Tensor:
        return self.params[name]

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.NAMES:
            self.params[k] = T.Tensor(arrays[k], requires_grad=True, name=k, dtype=arrays[k].dtype)

    def astype(self, dtype) -> "FusionWeights":
        for k, v in self.params.items():
            self.params[k] = T.Tensor(v.data.astype(dtype), requires_grad=True, name=k, dtype=dtype)
        return self


@dataclass
class FusedPrompt:
    fx: T.Tensor
    fy: T.Tensor


@dataclass
class AttentionRecord:
    """weights: (B, G_h*G_w, N*G_h*G_w); grid and prompt count kept for reshaping."""

    weights: T.Tensor
    grid: tuple[int, int]
    num_prompts: int

    def as_grid(self) -> np.ndarray:
        b = self.weights.shape[0]
        gh, gw = self.grid
        return self.weights.data.reshape(b, gh, gw, self.num_prompts, gh, gw)


def _flat(x: T.Tensor) -> T.Tensor:
    *lead, gh, gw, d = x.shape
    return T.reshape(x, tuple(lead) + (gh * gw, d))


def embed_patches(images: np.ndarray, backbone) -> T.Tensor:
    """Frozen backbone patch embedding; accepts any leading batch shape."""
    return backbone.embed(images)


def self_align(features: T.Tensor, weights: FusionWeights) -> T.Tensor:
    """Single-head self-attention within each sub-image, output projection, residual."""
    shape = features.shape
    x = _flat(features)
    scale = 1.0 / math.sqrt(shape[-1])
    q, k, v = x @ weights["sa.q"], x @ weights["sa.k"], x @ weights["sa.v"]
    att = T.softmax_lastdim(T.mul(q @ T.swapaxes(k, -1, -2), scale))
    return T.reshape(x + (att @ v) @ weights["sa.o"], shape)


def locality_attention(fq: T.Tensor, fx_prompts: T.Tensor, cfg: LocalityConfig, weights: FusionWeights,
                       sigma: T.Tensor | None = None) -> AttentionRecord:
    """Scaled scores against prompt-image keys, multiplied by Psi, softmax over all N*G keys.

    ``sigma`` (shape (B,)) overrides ``cfg.sigma`` per example when given.
    """
    if fx_prompts.ndim != 5 or fx_prompts.shape[1] == 0:
        raise EmptyPromptError("at least one prompt is required")
    b, n, gh, gw, d = fx_prompts.shape
    if fq.shape != (b, gh, gw, d):
        raise T.DimensionError(f"query {fq.shape} does not match prompts {fx_prompts.shape}")
    g = gh * gw
    q = _flat(fq) @ weights["W_Q"]
    k = T.reshape(fx_prompts, (b, n * g, d)) @ weights["W_K"]
    scores = T.mul(q @ T.swapaxes(k, -1, -2), 1.0 / math.sqrt(d))
    if sigma is None:
        psi = np.tile(all_centers(gh, gw, cfg), (1, n)).astype(scores.dtype)
        prior = T.Tensor(psi, dtype=scores.dtype)
    else:
        prior = T.concat([prior_from_sigma(sigma, gh, gw, cfg.kind)] * n, axis=2)
    return AttentionRecord(T.softmax_lastdim(T.mul(scores, prior)), (gh, gw), n)


def fuse(att: AttentionRecord, fx_prompts: T.Tensor, fy_prompts: T.Tensor, weights: FusionWeights) -> FusedPrompt:
    if fx_prompts.shape != fy_prompts.shape:
        raise T.DimensionError(f"prompt images {fx_prompts.shape} vs labels {fy_prompts.shape}")
    b, n, gh, gw, d = fx_prompts.shape
    if att.weights.shape != (b, gh * gw, n * gh * gw):
        raise T.DimensionError(f"attention {att.weights.shape} does not match prompts {fx_prompts.shape}")
    vx = T.reshape(fx_prompts, (b, n * gh * gw, d)) @ weights["W_VX"]
    vy = T.reshape(fy_prompts, (b, n * gh * gw, d)) @ weights["W_VY"]
    fx = T.reshape(att.weights @ vx, (b, gh, gw, d))
    fy = T.reshape(att.weights @ vy, (b, gh, gw, d))
    return FusedPrompt(fx, fy)


def assemble_canvas(fused: FusedPrompt, fq: T.Tensor, mask_token: T.Tensor) -> T.Tensor:
    """[[F_Xf, F_Yf], [F_Xq, mask]] as (B, 2G_h, 2G_w, D)."""
    if not fused.fx.shape == fused.fy.shape == fq.shape:
        raise T.DimensionError(f"block shapes differ: {fused.fx.shape}, {fused.fy.shape}, {fq.shape}")
    mask = T.broadcast_to(mask_token, fq.shape)
    top = T.concat([fused.fx, fused.fy], axis=-2)
    bottom = T.concat([fq, mask], axis=-2)
    return T.concat([top, bottom], axis=-3)


class PromptFuser:
    """Trainable fusion module: weights, locality config and the optional sigma head."""

    def __init__(self, dim: int, locality: LocalityConfig, seed: int = 0):
        self.weights = FusionWeights(dim, seed)
        self.locality = locality
        self.sigma_head = AdaptiveSigmaHead(dim, np.random.default_rng(seed + 7919)) if locality.adaptive else None

    def parameters(self) -> dict[str, T.Tensor]:
        params = dict(self.weights.params)
        if self.sigma_head is not None:
            params.update(self.sigma_head.parameters())
        return params

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.weights.load_state(arrays)
        if self.sigma_head is not None:
            self.sigma_head.projection = T.Tensor(arrays["sigma_head.projection"], requires_grad=True,
                                                  name="sigma_head.projection", dtype=arrays["sigma_head.projection"].dtype)
            self.sigma_head.bias = T.Tensor(arrays["sigma_head.bias"], requires_grad=True,
                                            name="sigma_head.bias", dtype=arrays["sigma_head.bias"].dtype)

    def forward(self, query_images: np.ndarray, prompt_images: np.ndarray, prompt_labels: np.ndarray,
                backbone) -> tuple[FusedPrompt, T.Tensor, AttentionRecord]:
        """query (B,H,W,3); prompts (B,N,H,W,3). Returns fused pair, aligned query grid, attention."""
        if prompt_images.ndim != 5 or prompt_images.shape[1] == 0:
            raise EmptyPromptError("at least one prompt is required")
        b, n = prompt_images.shape[:2]
        stacked = np.concatenate([query_images[:, None], prompt_images, prompt_labels], axis=1)
        emb = embed_patches(stacked, backbone)
        dtype = self.weights["W_Q"].dtype
        if emb.dtype != dtype:
            emb = T.Tensor(emb.data, dtype=dtype)
        aligned = self_align(emb, self.weights)
        fq = aligned[:, 0]
        fx_p = aligned[:, 1: 1 + n]
        fy_p = aligned[:, 1 + n:]
        sigma = self.sigma_head(fq) if self.sigma_head is not None else None
        att = locality_attention(fq, fx_p, self.locality, self.weights, sigma)
        return fuse(att, fx_p, fy_p, self.weights), fq, att


def stack_prompts(prompt_lists: Sequence[Sequence]) -> tuple[np.ndarray, np.ndarray]:
    """List (per example) of PromptPair lists -> (B, N, H, W, 3) image and label arrays."""
    imgs = np.stack([np.stack([p.image for p in ps]) for ps in prompt_lists])
    lbls = np.stack([np.stack([p.label for p in ps]) for ps in prompt_lists])
    return imgs, lbls
