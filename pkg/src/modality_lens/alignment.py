"""Tri-modal contrastive alignment of shape features to frozen teacher embeddings."""

from __future__ import annotations

import hashlib
import math
import re
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .backbone import EncoderPipeline
from .errors import ConfigError, ContractError, NumericError
from .numerics import ComputationTape, Tensor, backward, quantize_f32
from .pointcloud import PointCloud

LOGIT_SCALE_MIN = 1.0
LOGIT_SCALE_MAX = 100.0
_STOPWORDS = frozenset({"a", "an", "the", "of"})


# ---------------------------------------------------------------- teachers


def feature_hash(text: str, n_features: int) -> np.ndarray:
    """Signed bag-of-words hash, L2-normalised."""
    tokens = re.findall(r"[a-z0-9]+", text.lower())
    kept = [t for t in tokens if t not in _STOPWORDS] or tokens or [text]
    vec = np.zeros(n_features)
    for tok in kept:
        h = int.from_bytes(hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest(), "little")
        vec[h % n_features] += 1.0 if (h >> 63) & 1 else -1.0
    norm = np.sqrt((vec * vec).sum())
    return vec / norm if norm > 0 else vec


class TeacherEmbedder:
    """Frozen seeded MLP over a hashed bag of words; stands in for a pretrained image or text tower.

    Text and image teachers built with the same seed share weights, which
    plays the role of an already-aligned image/text space.
    """

    def __init__(self, kind: str, joint_dim: int, seed: int = 0, n_features: int = 256, hidden: int = 64):
        if kind not in ("text", "image"):
            raise ConfigError(f"teacher kind must be 'text' or 'image', got {kind!r}")
        self.kind = kind
        self.joint_dim = joint_dim
        self.n_features = n_features
        rng = np.random.default_rng([seed, 404])
        self._w1 = rng.standard_normal((n_features, hidden))
        self._b1 = 0.1 * rng.standard_normal(hidden)
        self._w2 = rng.standard_normal((hidden, joint_dim)) / np.sqrt(hidden)
        self._cache: dict[str, np.ndarray] = {}

    def embed_array(self, text: str) -> np.ndarray:
        if not text:
            raise ContractError("teacher input must be a non-empty string")
        hit = self._cache.get(text)
        if hit is None:
            x = feature_hash(text, self.n_features)
            hit = np.tanh(x @ self._w1 + self._b1) @ self._w2
            self._cache[text] = hit
        return hit

    def __call__(self, text: str) -> Tensor:
        return teacher_embed(self, text)


def teacher_embed(embedder: TeacherEmbedder, text: str) -> Tensor:
    """Unnormalised, constant (never trainable) teacher embedding of ``text``."""
    return Tensor(embedder.embed_array(text).copy())


# ---------------------------------------------------------------- features and loss


def normalize_feature(v) -> Tensor:
    """``v / ||v||`` along the last axis; raises on a zero vector instead of returning zeros."""
    v = nx._as_tensor(v)
    sq = nx.sum_(v * v, axis=-1, keepdims=True)
    if np.any(sq.data <= 0):
        raise NumericError("cannot normalise a zero vector")
    return v / nx.sqrt(sq)


def normalize_rows_np(x: np.ndarray) -> np.ndarray:
    n = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(n <= 0):
        raise NumericError("cannot normalise a zero vector")
    return x / n


@dataclass
class Triplet:
    points: PointCloud
    image_anchor: str
    text_anchor: str
    image_pool: tuple[str, ...] = ()
    text_pool: tuple[str, ...] = ()

    def __post_init__(self):
        if self.points is None or not self.image_anchor or not self.text_anchor:
            raise ContractError("a triplet needs points, an image anchor and a text anchor")


@dataclass
class ContrastiveBatch:
    shape_features: Tensor
    image_features: Tensor
    text_features: Tensor

    def __post_init__(self):
        self.shape_features = nx._as_tensor(self.shape_features)
        self.image_features = nx._as_tensor(self.image_features)
        self.text_features = nx._as_tensor(self.text_features)
        shapes = {self.shape_features.shape, self.image_features.shape, self.text_features.shape}
        if len(shapes) != 1 or self.shape_features.ndim != 2:
            raise ContractError(f"feature matrices must share one B x d shape, got {shapes}")
        if self.size < 1:
            raise ContractError("contrastive batch must hold at least one sample")
        for name in ("shape_features", "image_features", "text_features"):
            x = getattr(self, name).data
            if np.any(np.abs(np.sqrt((x * x).sum(axis=1)) - 1.0) > 1e-9):
                raise ContractError(f"{name} rows must have unit norm")

    @property
    def size(self) -> int:
        return self.shape_features.shape[0]


@dataclass
class LossBreakdown:
    """``total = l_p2i + l_p2t``; each part already carries the 1/(4B) factor."""

    total: Tensor
    l_p2i: Tensor
    l_p2t: Tensor

    def values(self) -> dict:
        return {"loss": self.total.item(), "l_p2i": self.l_p2i.item(), "l_p2t": self.l_p2t.item()}


def _pair_term(h_p: Tensor, h_o: Tensor, scale, eye: np.ndarray) -> Tensor:
    logits = (h_p @ nx.swap_last(h_o)) * scale
    # rows: point -> other; columns: other -> point
    fwd = nx.sum_(nx.log_softmax(logits, axis=1) * eye)
    rev = nx.sum_(nx.log_softmax(logits, axis=0) * eye)
    return fwd + rev


def contrastive_loss(batch: ContrastiveBatch, tau=None, *, logit_scale=None) -> LossBreakdown:
    """Symmetric point-image plus point-text InfoNCE with a single temperature.

    Pass either ``tau`` (float or Tensor) or ``logit_scale`` (= 1/tau). Only
    the shape features and the scale take part in differentiation.
    """
    if (tau is None) == (logit_scale is None):
        raise ContractError("pass exactly one of tau or logit_scale")
    if tau is not None:
        tval = tau.data if isinstance(tau, Tensor) else tau
        if not np.all(np.asarray(tval) > 0):
            raise ContractError("temperature must be positive")
        scale = 1.0 / tau if not isinstance(tau, Tensor) else nx.div(1.0, tau)
    else:
        scale = logit_scale
    b = batch.size
    eye = np.eye(b)
    h_p = batch.shape_features
    h_i = Tensor._wrap(batch.image_features.data)
    h_t = Tensor._wrap(batch.text_features.data)
    # 0 - x rather than -x so that a batch of one gives +0.0, not -0.0
    k = 1.0 / (4 * b)
    l_p2i = (0.0 - _pair_term(h_p, h_i, scale, eye)) * k
    l_p2t = (0.0 - _pair_term(h_p, h_t, scale, eye)) * k
    return LossBreakdown(l_p2i + l_p2t, l_p2i, l_p2t)


# ---------------------------------------------------------------- optimisation


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 800
    batch_size: int = 32
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    init_tau: float = 0.07
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or not self.init_tau > 0:
            raise ConfigError("lr and init_tau must be positive")


LOGIT_SCALE_KEY = "logit_scale.log"


class AlignmentState:
    """Trainable registry, learnable temperature and AdamW moments.

    All stored floats are kept exactly representable in float32 so that a
    checkpoint round-trip restores the state bit for bit.
    """

    def __init__(self, pipe: EncoderPipeline, cfg: TrainConfig, seed: int = 0,
                 teacher_seed: int = 0, teacher_features: int = 256, teacher_hidden: int = 64):
        self.cfg = cfg
        self.seed = seed
        self.step = 0
        self.params: "OrderedDict[str, Tensor]" = OrderedDict(pipe.trainable_params())
        init = math.log(min(max(1.0 / cfg.init_tau, LOGIT_SCALE_MIN), LOGIT_SCALE_MAX))
        self.params[LOGIT_SCALE_KEY] = Tensor(quantize_f32(np.array(init)), requires_grad=True)
        self.m = OrderedDict((k, np.zeros_like(v.data)) for k, v in self.params.items())
        self.v = OrderedDict((k, np.zeros_like(v.data)) for k, v in self.params.items())
        joint = pipe.vit.cfg.joint_dim
        self.image_teacher = TeacherEmbedder("image", joint, teacher_seed, teacher_features, teacher_hidden)
        self.text_teacher = TeacherEmbedder("text", joint, teacher_seed, teacher_features, teacher_hidden)

    @property
    def log_logit_scale(self) -> Tensor:
        return self.params[LOGIT_SCALE_KEY]

    @property
    def logit_scale(self) -> float:
        return math.exp(self.log_logit_scale.item())

    @property
    def tau(self) -> float:
        return 1.0 / self.logit_scale

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def apply_update(self) -> None:
        """One decoupled-weight-decay Adam update on every registered tensor."""
        c = self.cfg
        t = self.step + 1
        bc1 = 1.0 - c.beta1**t
        bc2 = 1.0 - c.beta2**t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            quantize_f32(m)
            quantize_f32(v)
            if name != LOGIT_SCALE_KEY and c.weight_decay:
                p.data *= 1.0 - c.lr * c.weight_decay
            p.data -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            quantize_f32(p.data)
        ls = self.params[LOGIT_SCALE_KEY].data
        np.clip(ls, math.log(LOGIT_SCALE_MIN), math.log(LOGIT_SCALE_MAX), out=ls)
        quantize_f32(ls)
        self.step += 1

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, v.data) for k, v in self.params.items())
        out.update(("adam.m/" + k, v) for k, v in self.m.items())
        out.update(("adam.v/" + k, v) for k, v in self.v.items())
        return out


def teacher_batch(embedder: TeacherEmbedder, texts: list[str]) -> np.ndarray:
    return normalize_rows_np(np.stack([embedder.embed_array(s) for s in texts]))


def batch_loss(state: AlignmentState, triplets: list[Triplet], pipe: EncoderPipeline,
               image_anchors=None, text_anchors=None) -> LossBreakdown:
    """Forward pass only: encode, normalise, contrast against the teachers."""
    image_anchors = image_anchors or [t.image_anchor for t in triplets]
    text_anchors = text_anchors or [t.text_anchor for t in triplets]
    feats = pipe.encode_clouds([t.points for t in triplets])
    batch = ContrastiveBatch(
        normalize_feature(feats),
        teacher_batch(state.image_teacher, image_anchors),
        teacher_batch(state.text_teacher, text_anchors),
    )
    return contrastive_loss(batch, logit_scale=nx.exp(state.log_logit_scale))


def train_step(state: AlignmentState, triplets: list[Triplet], pipe: EncoderPipeline,
               image_anchors=None, text_anchors=None) -> LossBreakdown:
    """Forward, backward and one optimiser update; returns the pre-update loss."""
    if not triplets:
        raise ContractError("train_step needs at least one triplet")
    state.zero_grad()
    with ComputationTape() as tape:
        out = batch_loss(state, triplets, pipe, image_anchors, text_anchors)
    if not np.isfinite(out.total.data).all():
        raise NumericError(f"non-finite loss at step {state.step}: {out.total.item()}")
    backward(out.total, tape)
    for name, p in state.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for {name} at step {state.step}")
    state.apply_update()
    return out


def batch_schedule(n: int, batch_size: int, seed: int, step: int) -> tuple[int, np.ndarray]:
    """(epoch, sample indices) for a 0-based global step; epochs reshuffle with a seeded RNG."""
    bs = min(batch_size, n)
    per_epoch = n // bs
    epoch, j = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return epoch, perm[j * bs : (j + 1) * bs]


def epoch_anchors(dataset: list[Triplet], seed: int, epoch: int) -> tuple[list[str], list[str]]:
    """Anchor strings for every sample in one epoch, drawn from the sample's pools if it has any."""
    rng = np.random.default_rng([seed, epoch, 1])
    u = rng.random((len(dataset), 2))
    imgs, txts = [], []
    for (ui, ut), t in zip(u, dataset):
        imgs.append(t.image_pool[int(ui * len(t.image_pool))] if t.image_pool else t.image_anchor)
        txts.append(t.text_pool[int(ut * len(t.text_pool))] if t.text_pool else t.text_anchor)
    return imgs, txts


def train_loop(
    cfg: TrainConfig,
    dataset: list[Triplet],
    pipe: EncoderPipeline,
    state: AlignmentState | None = None,
    *,
    seed: int = 0,
    on_record: Callable[[dict], None] | None = None,
    on_checkpoint: Callable[[AlignmentState], None] | None = None,
    **state_kwargs,
) -> tuple[AlignmentState, list[dict]]:
    """Train until ``state.step == cfg.steps``; resumes from ``state.step`` when given a state."""
    if not dataset:
        raise ConfigError("training dataset is empty")
    if state is None:
        state = AlignmentState(pipe, cfg, seed=seed, **state_kwargs)
    records = []
    anchors_epoch = None
    anchors = None
    while state.step < cfg.steps:
        epoch, idx = batch_schedule(len(dataset), cfg.batch_size, state.seed, state.step)
        if epoch != anchors_epoch:
            anchors = epoch_anchors(dataset, state.seed, epoch)
            anchors_epoch = epoch
        batch = [dataset[i] for i in idx]
        out = train_step(state, batch, pipe, [anchors[0][i] for i in idx], [anchors[1][i] for i in idx])
        rec = {"step": state.step, **out.values(), "logit_scale": state.logit_scale}
        records.append(rec)
        if on_record:
            on_record(rec)
        if on_checkpoint and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            on_checkpoint(state)
    return state, records


# ---------------------------------------------------------------- synthetic triplets

CAPTIONS = (
    "a {} shape",
    "a simple {}",
    "a {} object",
    "a small {} object",
    "a smooth {} surface",
    "an object shaped like a {}",
)
N_VIEWS = 12


def make_triplets(samples: list[tuple[PointCloud, int]], names: list[str], seed: int = 0) -> list[Triplet]:
    """Attach anchor pools (rendered-view surrogates, captions) to labelled clouds."""
    out = []
    for i, (pc, label) in enumerate(samples):
        name = names[label]
        views = tuple(f"rendered view {v} of a {name}" for v in range(N_VIEWS))
        caps = tuple(c.format(name) for c in CAPTIONS)
        rng = np.random.default_rng([seed, i, 2])
        out.append(Triplet(pc, views[rng.integers(N_VIEWS)], caps[rng.integers(len(caps))], views, caps))
    return out
