import numpy as np
import pytest

from modality_lens import numerics as nx
from modality_lens.backbone import (
    EncoderPipeline,
    FrozenViT,
    ViTConfig,
    encode_shape,
    interpolate_pos_embed,
    parse_selector,
    unlock_components,
    vit_encode,
)
from modality_lens.errors import ConfigError, ContractError, DimensionError
from modality_lens.lens import PerceiverConfig, PointEmbedConfig
from modality_lens.numerics import ComputationTape, Tensor, backward
from modality_lens.pointcloud import PatchConfig, PointCloud

from oracles import gelu, layer_norm, mha

SMALL_VIT = ViTConfig(pretrained_seq_len=6, embed_dim=8, n_blocks=2, n_heads=2, joint_dim=5)


def small_pipeline(variant="full", unlock="none", **kw):
    return EncoderPipeline(
        PatchConfig(n_sample=48, n_groups=6, group_size=4),
        PointEmbedConfig(hidden_dim=6, token_dim=8, center_dim=4),
        PerceiverConfig(n_latents=kw.pop("m", 4), latent_dim=8, depth=3, n_heads=2),
        kw.pop("vit", SMALL_VIT),
        variant=variant,
        unlock=unlock,
        seed=kw.pop("seed", 0),
    )


def vit_oracle(lat, vit, use_pos=True):
    cfg = vit.cfg
    p = {k: t.data for k, t in vit.params.items()}
    d = cfg.embed_dim
    x = np.concatenate([p["cls"].reshape(1, d), lat])
    if use_pos:
        x = x + interpolate_pos_embed(p["pos"], lat.shape[0])
    for i in range(1, cfg.n_blocks + 1):
        b = f"block{i}."
        qkv = layer_norm(x, p[b + "attn.ln.g"], p[b + "attn.ln.b"]) @ p[b + "attn.wqkv"]
        q = qkv[:, :d] + p[b + "attn.bq"]
        k = qkv[:, d : 2 * d]
        v = qkv[:, 2 * d :] + p[b + "attn.bv"]
        x = x + mha(q, k, v, cfg.n_heads) @ p[b + "attn.wo"] + p[b + "attn.bo"]
        h = gelu(layer_norm(x, p[b + "mlp.ln.g"], p[b + "mlp.ln.b"]) @ p[b + "mlp.w1"] + p[b + "mlp.b1"])
        x = x + h @ p[b + "mlp.w2"] + p[b + "mlp.b2"]
    x = layer_norm(x, p["norm.g"], p["norm.b"])
    return x[0] @ p["proj"]


class TestInterpolate:
    def test_identity_is_bit_exact(self, rng):
        pos = rng.standard_normal((9, 4))
        out = interpolate_pos_embed(pos, 8)
        assert out.tobytes() == pos.tobytes()

    def test_endpoints(self):
        cls, a, b, c = np.arange(4.0)[:, None] * np.ones((1, 3)) + 10
        out = interpolate_pos_embed(np.stack([cls, a, b, c]), 2)
        assert np.array_equal(out, np.stack([cls, a, c]))

    def test_linear_oracle(self, rng):
        pos = rng.standard_normal((5, 3))
        out = interpolate_pos_embed(pos, 7)
        grid = np.linspace(0, 3, 7)
        ref = np.stack([np.interp(grid, np.arange(4), pos[1:, j]) for j in range(3)], axis=1)
        assert np.array_equal(out[0], pos[0])
        assert np.abs(out[1:] - ref).max() < 1e-15

    @pytest.mark.parametrize("m", [1, 3, 12])
    def test_cls_row_verbatim(self, rng, m):
        pos = rng.standard_normal((6, 2))
        assert np.array_equal(interpolate_pos_embed(pos, m)[0], pos[0])
        assert interpolate_pos_embed(pos, m).shape == (m + 1, 2)

    def test_m_must_be_positive(self):
        with pytest.raises(ContractError):
            interpolate_pos_embed(np.ones((3, 2)), 0)


class TestVitEncode:
    @pytest.mark.parametrize("m", [1, 6, 10])
    def test_output_length(self, rng, m):
        vit = FrozenViT(SMALL_VIT)
        assert vit_encode(Tensor(rng.standard_normal((m, 8))), vit).shape == (5,)

    @pytest.mark.parametrize("m,use_pos", [(6, True), (3, True), (4, False)])
    def test_sublayer_oracle(self, rng, m, use_pos):
        vit = FrozenViT(SMALL_VIT)
        lat = rng.standard_normal((m, 8))
        out = vit_encode(Tensor(lat), vit, use_pos=use_pos).data
        assert np.abs(out - vit_oracle(lat, vit, use_pos)).max() < 1e-12

    def test_pos_matters(self, rng):
        vit = FrozenViT(SMALL_VIT)
        lat = Tensor(rng.standard_normal((6, 8)))
        assert not np.array_equal(vit_encode(lat, vit, True).data, vit_encode(lat, vit, False).data)

    def test_zero_pos_makes_no_difference(self, rng):
        vit = FrozenViT(SMALL_VIT)
        vit.params["pos"].data[...] = 0.0
        lat = Tensor(rng.standard_normal((6, 8)))
        assert np.array_equal(vit_encode(lat, vit, True).data, vit_encode(lat, vit, False).data)

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            vit_encode(Tensor(np.zeros((3, 7))), FrozenViT(SMALL_VIT))

    def test_seeded_weights(self):
        a, b = FrozenViT(SMALL_VIT), FrozenViT(SMALL_VIT)
        assert a.content_hash() == b.content_hash()
        c = FrozenViT(ViTConfig(**{**SMALL_VIT.__dict__, "seed": 1}))
        assert a.content_hash() != c.content_hash()


class TestUnlock:
    def _count(self, sel, cfg=ViTConfig()):
        return unlock_components(FrozenViT(cfg), sel)

    def test_none_is_zero(self):
        assert self._count("none") == 0

    def test_monotone(self):
        counts = [self._count(s) for s in ("none", "cls", "cls+proj", "cls+proj+blocks:1-2", "all")]
        assert counts == sorted(counts) and len(set(counts)) == len(counts)

    def test_cls_proj_enumerated(self):
        cfg = ViTConfig()
        assert self._count("cls+proj", cfg) == cfg.embed_dim + cfg.embed_dim * cfg.joint_dim

    def test_all_covers_everything(self):
        vit = FrozenViT(ViTConfig())
        assert unlock_components(vit, "all") == sum(t.size for t in vit.params.values())

    def test_block_range(self):
        vit = FrozenViT(ViTConfig())
        unlock_components(vit, "blocks:2-3")
        names = set(vit.trainable_params())
        assert any(n.startswith("vit.block2.") for n in names)
        assert any(n.startswith("vit.block3.") for n in names)
        assert not any(n.startswith(("vit.block1.", "vit.block4.", "vit.cls")) for n in names)

    @pytest.mark.parametrize("sel", ["blocks:0-1", "blocks:2-5", "blocks:3-2"])
    def test_out_of_range(self, sel):
        with pytest.raises(ContractError):
            parse_selector(sel, 4)

    def test_unknown_token(self):
        with pytest.raises(ConfigError):
            parse_selector("cls+head", 4)

    def test_relock_clears(self):
        vit = FrozenViT(ViTConfig())
        unlock_components(vit, "all")
        assert unlock_components(vit, "none") == 0
        assert not any(t.requires_grad for t in vit.params.values())


class TestPipeline:
    def cloud(self, rng, n=80):
        return PointCloud(rng.standard_normal((n, 3)), source_id="c")

    def test_full_shape(self, rng):
        assert encode_shape(self.cloud(rng), small_pipeline()).shape == (5,)

    def test_perceiver_only_mean_pool(self, rng):
        pipe = small_pipeline("perceiver_only")
        for t in pipe.lens.named_params().values():
            t.data += 0.2 * rng.standard_normal(t.shape)
        pc = self.cloud(rng)
        ps = pipe.patches_for(pc)
        lat = pipe.lens(ps.centers, ps.groups).data
        ref = lat.mean(axis=0) @ pipe.head["proj"].data
        assert np.abs(encode_shape(pc, pipe).data - ref).max() < 1e-12

    def test_pointembed_to_vit(self, rng):
        pipe = small_pipeline("pointembed_to_vit")
        pc = self.cloud(rng)
        ps = pipe.patches_for(pc)
        tokens = pipe.lens.embed(ps.centers, ps.groups).data
        assert np.abs(encode_shape(pc, pipe).data - vit_oracle(tokens, pipe.vit)).max() < 1e-12
        assert all(n.startswith("embed.") for n in pipe.trainable_params())

    def test_pointembed_to_vit_needs_matching_groups(self):
        with pytest.raises(ConfigError):
            EncoderPipeline(PatchConfig(n_sample=48, n_groups=5, group_size=4),
                            PointEmbedConfig(hidden_dim=6, token_dim=8, center_dim=4),
                            PerceiverConfig(n_latents=4, latent_dim=8, n_heads=2), SMALL_VIT,
                            variant="pointembed_to_vit")

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            small_pipeline("vit_only")

    def test_translation_invariance(self, rng):
        pipe = small_pipeline()
        for t in pipe.lens.named_params().values():
            t.data += 0.2 * rng.standard_normal(t.shape)
        pts = rng.standard_normal((80, 3))
        a = encode_shape(PointCloud(pts, source_id="a"), pipe).data
        b = encode_shape(PointCloud(pts + [5.0, -3.0, 11.0], source_id="b"), pipe).data
        # the translated centroid is recomputed in floating point, so allow roundoff
        assert np.abs(a - b).max() < 1e-9

    def test_deterministic(self, rng):
        pts = rng.standard_normal((80, 3))
        a = encode_shape(PointCloud(pts), small_pipeline(seed=4)).data
        b = encode_shape(PointCloud(pts), small_pipeline(seed=4)).data
        assert a.tobytes() == b.tobytes()

    def test_frozen_tensors_get_no_grad(self, rng, tiny_triplets):
        pipe = small_pipeline(unlock="cls")
        for t in pipe.lens.named_params().values():
            t.data += 0.2 * rng.standard_normal(t.shape)
        with ComputationTape() as tape:
            out = pipe.encode_clouds([t.points for t in tiny_triplets[:3]])
            loss = nx.sum_(out * out)
        backward(loss, tape)
        for name, t in pipe.vit.params.items():
            if name == "cls":
                assert t.grad is not None and np.abs(t.grad).max() > 0
            else:
                assert t.grad is None, name
        for t in pipe.lens.named_params().values():
            assert t.grad is not None

    def test_trainable_count_adds_vit(self):
        base = small_pipeline().trainable_count()
        assert small_pipeline(unlock="cls").trainable_count() == base + 8

    def test_latents_must_match_vit(self):
        with pytest.raises(ConfigError):
            small_pipeline(vit=ViTConfig(pretrained_seq_len=6, embed_dim=16, n_blocks=1, n_heads=2))

    def test_patch_cache_keys_on_content(self, rng):
        pipe = small_pipeline()
        a = PointCloud(rng.standard_normal((60, 3)), source_id="same")
        b = PointCloud(rng.standard_normal((60, 3)), source_id="same")
        assert not np.array_equal(pipe.patches_for(a).centers, pipe.patches_for(b).centers)
