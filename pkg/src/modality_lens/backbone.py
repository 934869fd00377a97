"""Frozen ViT backbone, selective unlocking, and the full shape encoder.

The "pretrained" ViT weights are drawn from a fixed seed and never touched by
training unless a component is explicitly unlocked.
"""

from __future__ import annotations

import hashlib
import re
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ContractError, DimensionError
from .lens import Lens, PerceiverConfig, PointEmbedConfig, self_attention
from .numerics import Tensor, quantize_f32, write_embd
from .pointcloud import PatchConfig, PointCloud, PointPatchSet, make_patches, normalize_cloud

VARIANTS = ("full", "perceiver_only", "pointembed_to_vit")


@dataclass(frozen=True)
class ViTConfig:
    pretrained_seq_len: int = 16
    embed_dim: int = 32
    n_blocks: int = 4
    n_heads: int = 4
    mlp_ratio: float = 2.0
    joint_dim: int = 32
    use_pos_embed: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if min(self.pretrained_seq_len, self.n_blocks, self.joint_dim) < 1:
            raise ConfigError("ViT sizes must be >= 1")

    @property
    def mlp_hidden(self) -> int:
        return max(1, int(round(self.embed_dim * self.mlp_ratio)))


def vit_shapes(cfg: ViTConfig) -> "OrderedDict[str, tuple]":
    d, hm = cfg.embed_dim, cfg.mlp_hidden
    shapes = OrderedDict([("cls", (1, d)), ("pos", (cfg.pretrained_seq_len + 1, d))])
    for i in range(1, cfg.n_blocks + 1):
        p = f"block{i}."
        shapes.update(
            [
                (p + "attn.ln.g", (d,)), (p + "attn.ln.b", (d,)),
                (p + "attn.wqkv", (d, 3 * d)), (p + "attn.bq", (d,)), (p + "attn.bv", (d,)),
                (p + "attn.wo", (d, d)), (p + "attn.bo", (d,)),
                (p + "mlp.ln.g", (d,)), (p + "mlp.ln.b", (d,)),
                (p + "mlp.w1", (d, hm)), (p + "mlp.b1", (hm,)),
                (p + "mlp.w2", (hm, d)), (p + "mlp.b2", (d,)),
            ]
        )
    shapes.update([("norm.g", (d,)), ("norm.b", (d,)), ("proj", (d, cfg.joint_dim))])
    return shapes


def _component(name: str) -> str:
    m = re.match(r"block(\d+)\.", name)
    if m:
        return f"block.{m.group(1)}"
    return name.split(".")[0]


class FrozenViT:
    """Seeded stand-in for a pretrained ViT, frozen unless components are unlocked."""

    def __init__(self, cfg: ViTConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 202])
        depth_scale = 1.0 / np.sqrt(2.0 * cfg.n_blocks)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, shape in vit_shapes(cfg).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                arr = np.ones(shape)
            elif name == "cls":
                arr = 0.02 * rng.standard_normal(shape)
            elif name == "pos":
                arr = 0.1 * rng.standard_normal(shape)
            elif len(shape) == 1:
                arr = 0.02 * rng.standard_normal(shape)
            else:
                arr = rng.standard_normal(shape) / np.sqrt(shape[0])
                if leaf in ("wo", "w2"):
                    arr *= depth_scale
            self.params[name] = Tensor(quantize_f32(arr))
        self.trainable_mask = OrderedDict((c, False) for c in self.components())

    def components(self) -> list[str]:
        seen = []
        for name in self.params:
            c = _component(name)
            if c not in seen:
                seen.append(c)
        return seen

    def component_params(self, component: str) -> list[str]:
        return [n for n in self.params if _component(n) == component]

    def trainable_params(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(
            ("vit." + n, t) for n, t in self.params.items() if self.trainable_mask[_component(n)]
        )

    def trainable_count(self) -> int:
        return sum(t.size for t in self.trainable_params().values())

    def block_params(self, i: int) -> dict:
        p = f"block{i}."
        return {n[len(p):]: t for n, t in self.params.items() if n.startswith(p)}

    def content_hash(self) -> str:
        """SHA-256 over the EMBD serialisation of every ViT tensor, in name order."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(write_embd(self.params[name]))
        return h.hexdigest()


def parse_selector(selector: str, n_blocks: int) -> set[str]:
    """Components named by an unlock selector such as ``cls+proj+blocks:1-2``."""
    sel = selector.strip().lower()
    if sel in ("", "none"):
        return set()
    comps: set[str] = set()
    for tok in sel.split("+"):
        tok = tok.strip()
        if tok == "all":
            comps |= {"cls", "pos", "norm", "proj"} | {f"block.{i}" for i in range(1, n_blocks + 1)}
        elif tok in ("cls", "proj", "pos", "norm"):
            comps.add(tok)
        elif m := re.fullmatch(r"blocks?[:.](\d+)(?:-(\d+))?", tok):
            lo = int(m.group(1))
            hi = int(m.group(2) or lo)
            if not 1 <= lo <= hi <= n_blocks:
                raise ContractError(f"block range {lo}-{hi} outside 1..{n_blocks}")
            comps |= {f"block.{i}" for i in range(lo, hi + 1)}
        else:
            raise ConfigError(f"unknown unlock token {tok!r} in selector {selector!r}")
    return comps


def unlock_components(vit: FrozenViT, selector: str) -> int:
    """Set the trainable mask from ``selector`` and return the ViT trainable count."""
    comps = parse_selector(selector, vit.cfg.n_blocks)
    for c in vit.trainable_mask:
        vit.trainable_mask[c] = c in comps
    for name, t in vit.params.items():
        t.requires_grad = vit.trainable_mask[_component(name)]
        if not t.requires_grad:
            t.grad = None
    return vit.trainable_count()


def interpolate_pos_embed(pos, m: int) -> np.ndarray:
    """Keep the CLS row; linearly resample the S patch rows to ``m`` rows, endpoints fixed."""
    pos = np.asarray(pos.data if isinstance(pos, Tensor) else pos, dtype=np.float64)
    if m < 1:
        raise ContractError("need at least one latent position")
    s = pos.shape[0] - 1
    if m == s:
        return pos.copy()
    patch = pos[1:]
    if s == 1:
        rows = np.repeat(patch, m, axis=0)
    elif m == 1:
        rows = patch[:1].copy()
    else:
        t = np.arange(m) * (s - 1) / (m - 1)
        lo = np.minimum(np.floor(t).astype(int), s - 2)
        frac = (t - lo)[:, None]
        rows = patch[lo] * (1.0 - frac) + patch[lo + 1] * frac
    return np.concatenate([pos[:1], rows], axis=0)


def vit_block(x: Tensor, p: dict, n_heads: int) -> Tensor:
    x = x + self_attention(x, p, "attn.", n_heads)
    h = nx.layer_norm(x, p["mlp.ln.g"], p["mlp.ln.b"], 1e-5)
    h = nx.gelu(h @ p["mlp.w1"] + p["mlp.b1"])
    return x + (h @ p["mlp.w2"] + p["mlp.b2"])


def _pos_tensor(vit: FrozenViT, m: int) -> Tensor:
    pos = vit.params["pos"]
    if m == vit.cfg.pretrained_seq_len:
        return pos
    if pos.requires_grad:
        # differentiable path: interpolation is a fixed linear map on the rows
        eye = np.eye(pos.shape[0])
        return nx.matmul(Tensor(interpolate_pos_embed(eye, m), _check=False), pos)
    return Tensor(interpolate_pos_embed(pos, m), _check=False)


def vit_encode(latents: Tensor, vit: FrozenViT, use_pos: bool | None = None) -> Tensor:
    """CLS + (optionally position-embedded) latents through the blocks; project the CLS row."""
    cfg = vit.cfg
    use_pos = cfg.use_pos_embed if use_pos is None else use_pos
    x = nx._as_tensor(latents)
    squeeze = x.ndim == 2
    if squeeze:
        x = nx.reshape(x, (1,) + x.shape)
    b, m, d = x.shape
    if d != cfg.embed_dim:
        raise DimensionError(f"latent dim {d} != ViT embed_dim {cfg.embed_dim}")
    cls = nx.broadcast_to(nx.reshape(vit.params["cls"], (1, 1, d)), (b, 1, d))
    x = nx.concat([cls, x], axis=1)
    if use_pos:
        x = x + _pos_tensor(vit, m)
    for i in range(1, cfg.n_blocks + 1):
        x = vit_block(x, vit.block_params(i), cfg.n_heads)
    x = nx.layer_norm(x, vit.params["norm.g"], vit.params["norm.b"], 1e-5)
    out = x[:, 0, :] @ vit.params["proj"]
    return nx.reshape(out, (cfg.joint_dim,)) if squeeze else out


class EncoderPipeline:
    """Point cloud -> joint embedding, in one of three layouts.

    ``full``: patches -> point embedding -> Perceiver -> frozen ViT.
    ``perceiver_only``: mean-pooled Perceiver latents through a learnable
    projection, no ViT. ``pointembed_to_vit``: patch tokens straight into the
    ViT (needs G == S and token_dim == embed_dim).
    """

    def __init__(
        self,
        patch_config: PatchConfig,
        embed_config: PointEmbedConfig,
        perceiver_config: PerceiverConfig,
        vit_config: ViTConfig,
        variant: str = "full",
        unlock: str = "none",
        seed: int = 0,
    ):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown pipeline variant {variant!r}")
        if variant != "pointembed_to_vit" and perceiver_config.latent_dim != vit_config.embed_dim:
            raise ConfigError("perceiver latent_dim must equal ViT embed_dim")
        if variant == "pointembed_to_vit":
            if patch_config.n_groups != vit_config.pretrained_seq_len:
                raise ConfigError(
                    f"pointembed_to_vit needs n_groups == pretrained_seq_len "
                    f"({patch_config.n_groups} != {vit_config.pretrained_seq_len})"
                )
            if embed_config.token_dim != vit_config.embed_dim:
                raise ConfigError("pointembed_to_vit needs token_dim == ViT embed_dim")
        self.patch_config = patch_config
        self.variant = variant
        self.lens = Lens(embed_config, perceiver_config, seed=seed)
        self.vit = FrozenViT(vit_config)
        self.head: "OrderedDict[str, Tensor]" = OrderedDict()
        if variant == "perceiver_only":
            rng = np.random.default_rng([seed, 303])
            d, j = perceiver_config.latent_dim, vit_config.joint_dim
            self.head["proj"] = Tensor(quantize_f32(rng.standard_normal((d, j)) / np.sqrt(d)), requires_grad=True)
        self.unlock = unlock
        unlock_components(self.vit, unlock)
        self._patch_cache: dict = {}
        active = set(self.trainable_params())
        for name, t in self.lens.named_params().items():
            t.requires_grad = name in active

    # parameters
    def trainable_params(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        lens = self.lens.named_params()
        if self.variant == "pointembed_to_vit":
            out.update((k, v) for k, v in lens.items() if k.startswith("embed."))
        else:
            out.update(lens)
        if self.variant == "perceiver_only":
            out.update(("head." + k, v) for k, v in self.head.items())
        else:
            out.update(self.vit.trainable_params())
        return out

    def all_params(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict(self.lens.named_params())
        out.update(("head." + k, v) for k, v in self.head.items())
        out.update(("vit." + k, v) for k, v in self.vit.params.items())
        return out

    def trainable_count(self) -> int:
        return sum(t.size for t in self.trainable_params().values())

    # data
    def patches_for(self, pc: PointCloud) -> PointPatchSet:
        key = (pc.source_id, hashlib.sha1(pc.points.tobytes()).hexdigest())
        hit = self._patch_cache.get(key)
        if hit is None:
            hit = make_patches(normalize_cloud(pc), self.patch_config)
            self._patch_cache[key] = hit
        return hit

    # forward
    def encode_patches(self, patch_sets: list[PointPatchSet]) -> Tensor:
        """Batch of patch sets -> (B, joint_dim) unnormalised features."""
        centers = np.stack([p.centers for p in patch_sets])
        groups = np.stack([p.groups for p in patch_sets])
        tokens = self.lens.embed(centers, groups)
        if self.variant == "pointembed_to_vit":
            return vit_encode(tokens, self.vit)
        latents = self.lens.perceive(tokens)
        if self.variant == "perceiver_only":
            return nx.mean(latents, axis=1) @ self.head["proj"]
        return vit_encode(latents, self.vit)

    def encode_clouds(self, clouds: list[PointCloud]) -> Tensor:
        return self.encode_patches([self.patches_for(pc) for pc in clouds])


def encode_shape(pc: PointCloud, pipe: EncoderPipeline) -> Tensor:
    """Unnormalised joint-space feature of one cloud."""
    out = pipe.encode_clouds([pc])
    return nx.reshape(out, (out.shape[-1],))


def estimate_flops(pipe: EncoderPipeline) -> int:
    """Rough multiply-add count x2 for one forward pass of one cloud."""
    pc = pipe.patch_config
    e = pipe.lens.embed_cfg
    p = pipe.lens.perceiver_cfg
    v = pipe.vit.cfg
    g, k = pc.n_groups, pc.group_size
    macs = g * k * (3 * e.hidden_dim + e.hidden_dim**2)
    macs += g * (3 * e.center_dim + e.center_dim**2 + (e.hidden_dim + e.center_dim) * e.token_dim)
    if pipe.variant == "pointembed_to_vit":
        seq = g
    else:
        m, d = p.n_latents, p.latent_dim
        cross = m * d * d + 2 * g * e.token_dim * d + 2 * m * g * d + m * d * d
        selfa = 3 * m * d * d + 2 * m * m * d + m * d * d
        mlp = 2 * m * d * p.mlp_hidden
        macs += p.depth * (cross + p.self_attn_per_block * selfa + mlp)
        seq = m
        if pipe.variant == "perceiver_only":
            return 2 * (macs + d * v.joint_dim)
    n, d = seq + 1, v.embed_dim
    block = 3 * n * d * d + 2 * n * n * d + n * d * d + 2 * n * d * v.mlp_hidden
    macs += v.n_blocks * block + d * v.joint_dim
    return 2 * macs
