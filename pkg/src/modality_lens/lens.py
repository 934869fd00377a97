"""The trainable lens: per-patch point embedding followed by a Perceiver.

The Perceiver repeatedly cross-attends a small learned latent array to the
patch tokens; its output latents take the place of image patch tokens at the
input of the frozen ViT. All residual output projections start at zero, so a
freshly built lens maps every input to the latent array itself.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .numerics import Tensor, quantize_f32
from .pointcloud import PointPatchSet


@dataclass(frozen=True)
class PointEmbedConfig:
    hidden_dim: int = 32
    token_dim: int = 32
    center_dim: int = 16

    def __post_init__(self):
        if min(self.hidden_dim, self.token_dim, self.center_dim) < 1:
            raise ConfigError("point-embedding dims must be >= 1")


@dataclass(frozen=True)
class PerceiverConfig:
    n_latents: int = 16
    latent_dim: int = 32
    depth: int = 4
    share_weights: bool = True
    n_heads: int = 4
    self_attn_per_block: int = 1
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("perceiver depth must be >= 1")
        if self.share_weights and self.depth < 2:
            raise ConfigError("weight sharing needs depth >= 2")
        if self.n_latents < 1 or self.latent_dim < 1 or self.n_heads < 1:
            raise ConfigError("perceiver sizes must be >= 1")
        if self.latent_dim % self.n_heads:
            raise ConfigError(f"latent_dim {self.latent_dim} not divisible by n_heads {self.n_heads}")
        if self.self_attn_per_block < 0:
            raise ConfigError("self_attn_per_block must be >= 0")

    @property
    def mlp_hidden(self) -> int:
        return max(1, int(round(self.latent_dim * self.mlp_ratio)))

    def block_schedule(self) -> list[int]:
        """Parameter-set index used by each block, in order."""
        if self.share_weights:
            return [0] + [1] * (self.depth - 1)
        return list(range(self.depth))

    @property
    def n_param_sets(self) -> int:
        return 2 if self.share_weights else self.depth


# ---------------------------------------------------------------- parameter layout


def point_embed_shapes(cfg: PointEmbedConfig) -> "OrderedDict[str, tuple]":
    h, c, d = cfg.hidden_dim, cfg.center_dim, cfg.token_dim
    return OrderedDict(
        [
            ("w1", (3, h)), ("b1", (h,)),
            ("w2", (h, h)), ("b2", (h,)),
            ("cw1", (3, c)), ("cb1", (c,)),
            ("cw2", (c, c)), ("cb2", (c,)),
            ("wp", (h + c, d)), ("bp", (d,)),
        ]
    )


def perceiver_block_shapes(cfg: PerceiverConfig, token_dim: int) -> "OrderedDict[str, tuple]":
    d, hm = cfg.latent_dim, cfg.mlp_hidden
    shapes = OrderedDict(
        [
            ("cross.ln_q.g", (d,)), ("cross.ln_q.b", (d,)),
            ("cross.ln_kv.g", (token_dim,)), ("cross.ln_kv.b", (token_dim,)),
            ("cross.wq", (d, d)), ("cross.wk", (token_dim, d)), ("cross.wv", (token_dim, d)),
            ("cross.wo", (d, d)), ("cross.bo", (d,)),
        ]
    )
    for s in range(cfg.self_attn_per_block):
        p = f"self{s}."
        shapes.update(
            [
                (p + "ln.g", (d,)), (p + "ln.b", (d,)),
                (p + "wqkv", (d, 3 * d)),
                (p + "wo", (d, d)), (p + "bo", (d,)),
            ]
        )
    shapes.update(
        [
            ("mlp.ln.g", (d,)), ("mlp.ln.b", (d,)),
            ("mlp.w1", (d, hm)), ("mlp.b1", (hm,)),
            ("mlp.w2", (hm, d)), ("mlp.b2", (d,)),
        ]
    )
    return shapes


def lens_param_count(embed_cfg: PointEmbedConfig, perceiver_cfg: PerceiverConfig) -> int:
    """Trainable parameters in point embedding + latents + Perceiver (backbone excluded)."""
    n = sum(int(np.prod(s)) for s in point_embed_shapes(embed_cfg).values())
    n += perceiver_cfg.n_latents * perceiver_cfg.latent_dim
    per_set = sum(int(np.prod(s)) for s in perceiver_block_shapes(perceiver_cfg, embed_cfg.token_dim).values())
    return n + perceiver_cfg.n_param_sets * per_set


def _zero_init(name: str) -> bool:
    # residual-branch output projections
    return name.endswith((".wo", ".bo", "mlp.w2", "mlp.b2")) or name in ("wo", "bo")


def _init(name: str, shape: tuple, rng: np.random.Generator, zero_out: bool) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        arr = np.ones(shape)
    elif len(shape) == 1:
        arr = np.zeros(shape)
    elif zero_out and _zero_init(name):
        arr = np.zeros(shape)
    else:
        arr = rng.standard_normal(shape) / np.sqrt(shape[0])
    return quantize_f32(arr)


# standard deviation of a unit normal truncated to [-2, 2]
_TRUNC2_STD = 0.8796256610342398


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples cut at two sigma, rescaled so the result has exactly ``std`` spread."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * (std / _TRUNC2_STD)


# ---------------------------------------------------------------- forward pieces


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return nx.transpose(nx.reshape(x, (b, n, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return nx.reshape(x, (1,) + x.shape), True
    return x, False


def point_embed(patches, params: dict, cfg: PointEmbedConfig) -> Tensor:
    """One token per patch: max-pooled point MLP joined with a center MLP.

    ``patches`` is a :class:`PointPatchSet` or a ``(centers, groups)`` pair
    with shapes ``(..., G, 3)`` and ``(..., G, k, 3)``.
    """
    if isinstance(patches, PointPatchSet):
        centers, groups = patches.centers, patches.groups
    else:
        centers, groups = patches
    centers = nx._as_tensor(centers)
    groups = nx._as_tensor(groups)
    if groups.shape[-1] != 3 or centers.shape[-1] != 3 or groups.shape[:-2] != centers.shape[:-1]:
        raise DimensionError(f"patch shapes disagree: centers {centers.shape}, groups {groups.shape}")
    if params["wp"].shape[1] != cfg.token_dim or params["w1"].shape[1] != cfg.hidden_dim:
        raise DimensionError("point-embedding parameters do not match the config")
    h = nx.gelu(groups @ params["w1"] + params["b1"])
    h = h @ params["w2"] + params["b2"]
    pooled = nx.max_(h, axis=-2)
    c = nx.gelu(centers @ params["cw1"] + params["cb1"])
    c = c @ params["cw2"] + params["cb2"]
    return nx.concat([pooled, c], axis=-1) @ params["wp"] + params["bp"]


def _ln(x: Tensor, p: dict, prefix: str) -> Tensor:
    return nx.layer_norm(x, p[prefix + ".g"], p[prefix + ".b"], 1e-5)


def self_attention(x: Tensor, p: dict, prefix: str, n_heads: int) -> Tensor:
    """Pre-norm multi-head self-attention branch (without the residual add)."""
    d = x.shape[-1]
    qkv = _ln(x, p, prefix + "ln") @ p[prefix + "wqkv"]
    if prefix + "bq" in p:
        # no key bias: it shifts every score of a query equally and softmax cancels it
        qkv = qkv + nx.concat([p[prefix + "bq"], np.zeros(d), p[prefix + "bv"]], axis=0)
    q = split_heads(qkv[..., 0:d], n_heads)
    k = split_heads(qkv[..., d : 2 * d], n_heads)
    v = split_heads(qkv[..., 2 * d : 3 * d], n_heads)
    o = merge_heads(nx.scaled_dot_attention(q, k, v))
    return o @ p[prefix + "wo"] + p[prefix + "bo"]


def perceiver_block(latents: Tensor, tokens: Tensor, params: dict, cfg: PerceiverConfig) -> Tensor:
    """Cross-attend latents to tokens, then self-attend, then MLP; all residual, pre-norm."""
    latents, squeeze = _batched(nx._as_tensor(latents))
    tokens, _ = _batched(nx._as_tensor(tokens))
    if latents.shape[-1] != cfg.latent_dim or tokens.shape[-1] != params["cross.wk"].shape[0]:
        raise DimensionError(f"perceiver block got latents {latents.shape}, tokens {tokens.shape}")
    if tokens.shape[0] != latents.shape[0]:
        latents = nx.broadcast_to(latents, (tokens.shape[0],) + latents.shape[1:])
    h = cfg.n_heads
    q = split_heads(_ln(latents, params, "cross.ln_q") @ params["cross.wq"], h)
    kv_in = _ln(tokens, params, "cross.ln_kv")
    k = split_heads(kv_in @ params["cross.wk"], h)
    v = split_heads(kv_in @ params["cross.wv"], h)
    attn = merge_heads(nx.scaled_dot_attention(q, k, v))
    x = latents + (attn @ params["cross.wo"] + params["cross.bo"])
    for s in range(cfg.self_attn_per_block):
        x = x + self_attention(x, params, f"self{s}.", h)
    m = nx.gelu(_ln(x, params, "mlp.ln") @ params["mlp.w1"] + params["mlp.b1"])
    x = x + (m @ params["mlp.w2"] + params["mlp.b2"])
    if squeeze:
        x = nx.reshape(x, x.shape[1:])
    return x


def perceiver_forward(tokens: Tensor, latent_init: Tensor, cfg: PerceiverConfig, block_params: list[dict]) -> Tensor:
    """Run ``cfg.depth`` blocks; with sharing, blocks 2..depth reuse one parameter set."""
    if len(block_params) != cfg.n_param_sets:
        raise ConfigError(f"expected {cfg.n_param_sets} perceiver parameter sets, got {len(block_params)}")
    tokens = nx._as_tensor(tokens)
    x = nx._as_tensor(latent_init)
    if tokens.ndim == 3 and x.ndim == 2:
        x = nx.broadcast_to(x, (tokens.shape[0],) + x.shape)
    for idx in cfg.block_schedule():
        x = perceiver_block(x, tokens, block_params[idx], cfg)
    return x


class Lens:
    """Parameter container plus forward pass for point embedding + Perceiver."""

    def __init__(self, embed_cfg: PointEmbedConfig, perceiver_cfg: PerceiverConfig, seed: int = 0, zero_init: bool = True):
        self.embed_cfg = embed_cfg
        self.perceiver_cfg = perceiver_cfg
        rng = np.random.default_rng([seed, 101])
        self.embed_params = OrderedDict(
            (k, Tensor(_init(k, s, rng, zero_init), requires_grad=True))
            for k, s in point_embed_shapes(embed_cfg).items()
        )
        self.latents = Tensor(
            quantize_f32(truncated_normal(rng, (perceiver_cfg.n_latents, perceiver_cfg.latent_dim))),
            requires_grad=True,
        )
        shapes = perceiver_block_shapes(perceiver_cfg, embed_cfg.token_dim)
        self.block_params = [
            OrderedDict((k, Tensor(_init(k, s, rng, zero_init), requires_grad=True)) for k, s in shapes.items())
            for _ in range(perceiver_cfg.n_param_sets)
        ]

    def named_params(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict(("embed." + k, v) for k, v in self.embed_params.items())
        out["latents"] = self.latents
        for i, blk in enumerate(self.block_params):
            tag = "shared" if self.perceiver_cfg.share_weights and i == 1 else f"block{i}"
            out.update((f"perceiver.{tag}.{k}", v) for k, v in blk.items())
        return out

    def embed(self, centers, groups) -> Tensor:
        return point_embed((centers, groups), self.embed_params, self.embed_cfg)

    def perceive(self, tokens: Tensor) -> Tensor:
        return perceiver_forward(tokens, self.latents, self.perceiver_cfg, self.block_params)

    def __call__(self, centers, groups) -> Tensor:
        return self.perceive(self.embed(centers, groups))
