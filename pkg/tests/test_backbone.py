"""Backbone forward pieces, parameter registry and GFFW weight files."""

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gff import numerics as nx
from gff.backbone import (
    BackboneConfig,
    ParameterRegistry,
    add_block_params,
    count_trainable,
    forward_backbone,
    gvit_block,
    init_backbone,
    mhsa,
    patch_embed,
    trunc_normal,
    vit_block,
)
from gff.errors import ContractError, DimensionError, FormatError
from gff.guidance import DFGM, dfgm_forward, init_dfgm
from gff.numerics import Tensor
from gff.weights import export_weights, import_weights


def make_block(dim, mlp_dim, seed=0, std=0.3, dtype=np.float64):
    reg = ParameterRegistry()
    add_block_params(reg, "b", dim, mlp_dim, np.random.default_rng(seed), frozen=True, std=std, dtype=dtype)
    return reg, reg.view("b")


def small_backbone(num_blocks=2, dim=16, image=16, patch=8, heads=2, dtype=np.float64, seed=0):
    cfg = BackboneConfig(image, patch, dim, heads, num_blocks, 2.0)
    reg = ParameterRegistry()
    init_backbone(reg, cfg, np.random.default_rng(seed), dtype=dtype)
    return cfg, reg


class TestConfig:
    def test_full_size_token_count(self):
        cfg = BackboneConfig(224, 14, 1024, 16, 24)
        assert cfg.num_patches == 256 and cfg.seq_len == 257

    def test_toy_token_count(self):
        cfg = BackboneConfig(32, 8, 16, 2, 2)
        assert cfg.num_patches == 16 and cfg.seq_len == 17

    @pytest.mark.parametrize("kw", [dict(image_size=30, patch_size=8), dict(embed_dim=10, num_heads=4),
                                    dict(num_blocks=0), dict(mlp_ratio=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            BackboneConfig(**kw)


class TestPatchEmbed:
    def test_zero_image_gives_positional_rows(self):
        cfg, reg = small_backbone()
        reg["backbone.embed.proj.w"].data[:] = 0
        seq = patch_embed(Tensor(np.zeros((16, 16, 3))), reg.view("backbone.embed"), cfg).data
        pos, cls = reg["backbone.embed.pos"].data, reg["backbone.embed.cls"].data
        np.testing.assert_array_equal(seq[1:], pos[1:])
        np.testing.assert_array_equal(seq[0], cls + pos[0])

    def test_patch_order_is_row_major(self):
        cfg, reg = small_backbone()
        reg["backbone.embed.pos"].data[:] = 0
        img = np.zeros((16, 16, 3))
        img[8:, :8, :] = 1.0  # bottom-left patch = grid index 2
        w = reg["backbone.embed.proj.w"].data
        seq = patch_embed(Tensor(img), reg.view("backbone.embed"), cfg).data
        np.testing.assert_allclose(seq[3], w.sum(axis=0))
        np.testing.assert_allclose(seq[[1, 2, 4]], 0.0)

    def test_wrong_size(self):
        cfg, reg = small_backbone()
        with pytest.raises(DimensionError):
            patch_embed(Tensor(np.zeros((8, 8, 3))), reg.view("backbone.embed"), cfg)

    def test_batch_matches_single(self):
        cfg, reg = small_backbone()
        imgs = np.random.default_rng(1).random((3, 16, 16, 3))
        batch = patch_embed(Tensor(imgs), reg.view("backbone.embed"), cfg).data
        for i in range(3):
            np.testing.assert_allclose(batch[i], patch_embed(Tensor(imgs[i]), reg.view("backbone.embed"), cfg).data,
                                       rtol=1e-13, atol=1e-15)


class TestVitBlock:
    def test_zero_weights_is_identity(self):
        reg, p = make_block(8, 16)
        for _, t in reg.items():
            t.data[:] = 0
        x = np.random.default_rng(0).standard_normal((5, 8))
        np.testing.assert_array_equal(vit_block(Tensor(x), p, 2).data, x)

    def test_shape_preserved(self):
        _, p = make_block(8, 16)
        x = Tensor(np.random.default_rng(0).standard_normal((3, 5, 8)))
        assert vit_block(x, p, 2).shape == (3, 5, 8)

    def test_dim_mismatch(self):
        _, p = make_block(8, 16)
        with pytest.raises(DimensionError):
            vit_block(Tensor(np.zeros((5, 6))), p, 2)

    def test_single_head_scalar_oracle(self):
        """D=2, two tokens, one head: recompute every scalar by hand."""
        rng = np.random.default_rng(3)
        reg, p = make_block(2, 3, std=0.7)
        for k in ("ln1.g", "ln1.b", "ln2.g", "ln2.b", "attn.qkv.b", "attn.proj.b", "mlp.fc1.b", "mlp.fc2.b"):
            p[k].data[:] = rng.standard_normal(p[k].shape)
        x = rng.standard_normal((2, 2))
        get = lambda k: p[k].data  # noqa: E731

        def ln(v, g, b):
            mu = sum(v) / len(v)
            var = sum((a - mu) ** 2 for a in v) / len(v)
            return [(a - mu) / math.sqrt(var + 1e-5) * g[i] + b[i] for i, a in enumerate(v)]

        def lin(v, w, b):
            return [sum(v[i] * w[i][j] for i in range(len(v))) + b[j] for j in range(len(b))]

        def gelu(a):
            return 0.5 * a * (1 + math.tanh(math.sqrt(2 / math.pi) * (a + 0.044715 * a**3)))

        h = [ln(list(r), get("ln1.g"), get("ln1.b")) for r in x]
        qkv = [lin(r, get("attn.qkv.w"), get("attn.qkv.b")) for r in h]
        q, k, v = [r[0:2] for r in qkv], [r[2:4] for r in qkv], [r[4:6] for r in qkv]
        z = []
        for i in range(2):
            s = [sum(q[i][c] * k[j][c] for c in range(2)) / math.sqrt(2) for j in range(2)]
            m = max(s)
            e = [math.exp(a - m) for a in s]
            a = [u / sum(e) for u in e]
            o = [sum(a[j] * v[j][c] for j in range(2)) for c in range(2)]
            z.append([x[i][c] + y for c, y in enumerate(lin(o, get("attn.proj.w"), get("attn.proj.b")))])
        out = []
        for r in z:
            hid = [gelu(a) for a in lin(ln(r, get("ln2.g"), get("ln2.b")), get("mlp.fc1.w"), get("mlp.fc1.b"))]
            out.append([r[c] + y for c, y in enumerate(lin(hid, get("mlp.fc2.w"), get("mlp.fc2.b")))])
        np.testing.assert_allclose(vit_block(Tensor(x), p, 1).data, out, rtol=1e-12, atol=1e-12)


class TestGvitBlock:
    def test_zero_up_is_bitwise_plain_block(self):
        reg, p = make_block(8, 16)
        adapter = init_dfgm(reg, "a", 8, 4, np.random.default_rng(1), dtype=np.float64)
        adapter.b_up.data[:] = 0
        x = Tensor(np.random.default_rng(2).standard_normal((2, 5, 8)))
        assert gvit_block(x, p, 2, adapter).data.tobytes() == vit_block(x, p, 2).data.tobytes()

    def test_no_adapter_is_plain_block(self):
        _, p = make_block(8, 16)
        x = Tensor(np.random.default_rng(2).standard_normal((5, 8)))
        assert gvit_block(x, p, 2, None).data.tobytes() == vit_block(x, p, 2).data.tobytes()

    def test_compositional_oracle(self):
        """D=8, d_hat=2: block == separately evaluated MHSA, DFGM and MLP steps."""
        reg, p = make_block(8, 16)
        adapter = init_dfgm(reg, "a", 8, 2, np.random.default_rng(1), dtype=np.float64)
        rng = np.random.default_rng(4)
        for t in adapter.tensors():
            t.data[:] = rng.standard_normal(t.shape) * 0.5
        x = Tensor(rng.standard_normal((5, 8)))
        z = mhsa(nx.layernorm(x, p["ln1.g"], p["ln1.b"]), p, 2).data + x.data
        z2 = dfgm_forward(Tensor(z), adapter).data + z
        h = nx.gelu(nx.linear(nx.layernorm(Tensor(z2), p["ln2.g"], p["ln2.b"]), p["mlp.fc1.w"], p["mlp.fc1.b"]))
        expect = nx.linear(h, p["mlp.fc2.w"], p["mlp.fc2.b"]).data + z2
        np.testing.assert_allclose(gvit_block(x, p, 2, adapter).data, expect, rtol=1e-12, atol=1e-12)


class TestForwardBackbone:
    @pytest.mark.parametrize("blocks", [1, 2, 5, 24])
    def test_stage_count(self, blocks):
        cfg, reg = small_backbone(num_blocks=blocks, dim=8)
        st_ = forward_backbone(Tensor(np.zeros((16, 16, 3))), reg, cfg)
        assert len(st_.cls) == blocks
        assert st_.patches.shape == (4, 8)

    def test_deterministic(self):
        cfg, reg = small_backbone()
        img = np.random.default_rng(0).random((16, 16, 3))
        a = forward_backbone(Tensor(img), reg, cfg)
        b = forward_backbone(Tensor(img.copy()), reg, cfg)
        for u, v in zip(a.cls, b.cls):
            assert u.data.tobytes() == v.data.tobytes()

    def test_final_cls_is_layernormed(self):
        cfg, reg = small_backbone()
        out = forward_backbone(Tensor(np.random.default_rng(0).random((16, 16, 3))), reg, cfg)
        f = out.final.data
        assert abs(f.mean()) < 1e-9 and abs(f.var() - 1) < 1e-3

    def test_adapter_count_checked(self):
        cfg, reg = small_backbone()
        with pytest.raises(DimensionError):
            forward_backbone(Tensor(np.zeros((16, 16, 3))), reg, cfg, adapters=[None])

    def test_zero_adapters_match_plain(self):
        cfg, reg = small_backbone()
        adapters = [init_dfgm(reg, f"dfgm.{i}", 16, 4, np.random.default_rng(i), dtype=np.float64) for i in range(2)]
        img = Tensor(np.random.default_rng(0).random((2, 16, 16, 3)))
        a = forward_backbone(img, reg, cfg, adapters)
        b = forward_backbone(img, reg, cfg, None)
        for u, v in zip(a.cls, b.cls):
            assert u.data.tobytes() == v.data.tobytes()


class TestRegistry:
    def test_duplicate_rejected(self):
        reg = ParameterRegistry()
        reg.add("a", np.zeros(2), frozen=True)
        with pytest.raises(ContractError):
            reg.add("a", np.zeros(2), frozen=True)

    def test_count_trainable(self):
        reg = ParameterRegistry()
        reg.add("frozen", np.zeros((3, 4)), frozen=True)
        reg.add("x.w", np.zeros((2, 5)), frozen=False)
        reg.add("y.w", np.zeros(7), frozen=False)
        assert count_trainable(reg) == 17
        assert count_trainable(reg, lambda n: n.startswith("x.")) == 10

    def test_all_frozen_counts_zero(self):
        _, reg = small_backbone()
        assert count_trainable(reg) == 0

    def test_set_active_never_enables_frozen(self):
        reg = ParameterRegistry()
        reg.add("f", np.zeros(1), frozen=True)
        reg.add("t", np.zeros(1), frozen=False)
        assert reg.set_active(lambda n: True) == ["t"]
        assert not reg["f"].requires_grad

    def test_trunc_normal_bounds(self):
        x = trunc_normal(np.random.default_rng(0), (10000,), std=0.02)
        assert np.abs(x).max() <= 0.04
        assert abs(x.std() - 0.02 * 0.88) < 0.002  # std of N(0,1) truncated at +-2 is ~0.880


# ---------------------------------------------------------------------------
# GFFW


names = st.text(alphabet=st.characters(codec="utf-8", exclude_categories=("Cs",)), min_size=1, max_size=12)
shapes = st.lists(st.integers(1, 4), min_size=0, max_size=3).map(tuple)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(names, shapes, st.booleans()), min_size=1, max_size=6, unique_by=lambda t: t[0]),
       st.integers(0, 2**32 - 1))
def test_gffw_round_trip_property(tmp_path_factory, entries, seed):
    rng = np.random.default_rng(seed)
    reg = ParameterRegistry()
    for name, shape, frozen in entries:
        reg.add(name, rng.standard_normal(shape).astype(np.float32), frozen)
    path = tmp_path_factory.mktemp("w") / "w.gffw"
    export_weights(reg, path)
    assert import_weights(path).equals(reg)


class TestWeights:
    @pytest.fixture
    def reg(self):
        reg = ParameterRegistry()
        reg.add("a.w", np.arange(6, dtype=np.float32).reshape(2, 3), frozen=True)
        reg.add("b", np.array([1.5, -2.0], dtype=np.float32), frozen=False)
        return reg

    def test_layout(self, reg, tmp_path):
        path = tmp_path / "w.gffw"
        export_weights(reg, path)
        raw = path.read_bytes()
        assert raw[:4] == b"GFFW"
        assert struct.unpack("<II", raw[4:12]) == (1, 2)
        assert struct.unpack("<I", raw[12:16]) == (3,)
        assert raw[16:19] == b"a.w"
        assert struct.unpack("<BIII", raw[19:32]) == (1, 2, 2, 3)
        np.testing.assert_array_equal(np.frombuffer(raw[32:56], "<f4"), np.arange(6))
        assert len(raw) == 56 + 4 + 1 + 1 + 4 + 4 + 8

    def test_empty_registry_rejected(self, tmp_path):
        with pytest.raises(ContractError):
            export_weights(ParameterRegistry(), tmp_path / "w.gffw")

    def test_bad_magic(self, reg, tmp_path):
        path = tmp_path / "w.gffw"
        export_weights(reg, path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(FormatError, match="magic"):
            import_weights(path)

    def test_bad_version(self, reg, tmp_path):
        path = tmp_path / "w.gffw"
        export_weights(reg, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            import_weights(path)

    @pytest.mark.parametrize("cut", [3, 10, 20, 40, 70])
    def test_truncation(self, reg, tmp_path, cut):
        path = tmp_path / "w.gffw"
        export_weights(reg, path)
        path.write_bytes(path.read_bytes()[:cut])
        with pytest.raises(FormatError):
            import_weights(path)

    def test_count_larger_than_content(self, reg, tmp_path):
        path = tmp_path / "w.gffw"
        export_weights(reg, path)
        raw = bytearray(path.read_bytes())
        raw[8:12] = struct.pack("<I", 3)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="truncated"):
            import_weights(path)

    def test_count_smaller_than_content(self, reg, tmp_path):
        path = tmp_path / "w.gffw"
        export_weights(reg, path)
        raw = bytearray(path.read_bytes())
        raw[8:12] = struct.pack("<I", 1)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="trailing"):
            import_weights(path)

    def test_shape_mismatch_names_tensor(self, reg, tmp_path):
        path = tmp_path / "w.gffw"
        export_weights(reg, path)
        template = ParameterRegistry()
        template.add("a.w", np.zeros((3, 2)), frozen=True)
        template.add("b", np.zeros(2), frozen=False)
        with pytest.raises(FormatError, match="'a.w'"):
            import_weights(path, template=template)

    def test_missing_tensor_names_tensor(self, reg, tmp_path):
        path = tmp_path / "w.gffw"
        export_weights(reg, path)
        template = reg.copy()
        template.add("c", np.zeros(1), frozen=False)
        with pytest.raises(FormatError, match="'c'"):
            import_weights(path, template=template)

    def test_frozen_flag_preserved(self, reg, tmp_path):
        path = tmp_path / "w.gffw"
        export_weights(reg, path)
        back = import_weights(path)
        assert back.is_frozen("a.w") and not back.is_frozen("b")


def test_dfgm_from_registry_round_trip(tmp_path):
    reg = ParameterRegistry()
    init_dfgm(reg, "dfgm.0", 8, 4, np.random.default_rng(0))
    export_weights(reg, tmp_path / "w.gffw")
    back = DFGM.from_registry(import_weights(tmp_path / "w.gffw"), "dfgm.0")
    assert back.dim == 8 and back.bottleneck == 4 and back.b_up is not None
