"""Acceptance gate: eleven end-to-end criteria, one PASS/FAIL summary line each.

Criteria 6 and 7 train on the 2,000-image toy corpus (a few CPU minutes).
"""

import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import criterion
from gff import config as gcfg
from gff import numerics as nx
from gff.backbone import BackboneConfig, ParameterRegistry, count_trainable, forward_backbone, init_backbone
from gff.errors import ContractError, FormatError
from gff.fusion import FuseFormerConfig, assemble_sequence, fuseformer_forward, init_fuseformer
from gff.guidance import DFGM, init_dfgm
from gff.metrics import average_precision
from gff.model import GFFModel, ModelConfig
from gff.numerics import Tensor
from gff.synthdata import (
    CorpusSpec,
    PerturbationConfig,
    generate_corpus,
    read_image,
    write_image,
)
from gff.trainer import DEFAULT_STAGE1, DEFAULT_STAGE2, AdamState, StagePlan, bce_loss, evaluate, run_stage, train
from gff.weights import export_weights, import_weights

TOY_CFG = Path(__file__).resolve().parents[1] / "configs" / "toy.cfg"


def test_c01_adapter_identity():
    with criterion(1, "adapter identity (W_up = 0) is 0 ulp on 50 configs") as notes:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        for trial in range(50):
            heads = int(rng.choice([1, 2, 4]))
            dim = heads * int(rng.integers(1, 5)) * 2
            patch = int(rng.choice([4, 8]))
            size = patch * int(rng.integers(2, 5))
            cfg = BackboneConfig(size, patch, dim, heads, int(rng.integers(1, 4)), float(rng.choice([1.0, 2.0, 4.0])))
            dtype = np.float32 if trial % 2 else np.float64
            reg = ParameterRegistry()
            init_backbone(reg, cfg, np.random.default_rng(trial), dtype=dtype)
            adapters = [init_dfgm(reg, f"dfgm.{i}", dim, max(1, dim // 2), np.random.default_rng(100 + i), dtype=dtype)
                        for i in range(cfg.num_blocks)]
            for a in adapters:  # everything but W_up non-trivial
                a.w_down.data[:] = rng.standard_normal(a.w_down.shape)
                a.w_mid.data[:] = rng.standard_normal(a.w_mid.shape)
                assert not a.w_up.data.any()
            img = Tensor(rng.random((2, size, size, 3)).astype(dtype))
            plain = forward_backbone(img, reg, cfg, None)
            guided = forward_backbone(img, reg, cfg, adapters)
            for c_plain, c_guided in zip(plain.cls, guided.cls):
                assert c_plain.data.tobytes() == c_guided.data.tobytes()
            assert plain.patches.data.tobytes() == guided.patches.data.tobytes()
        elapsed = time.perf_counter() - t0
        notes.append(f"{elapsed:.2f} s")
        assert elapsed < 10


def test_c02_frozen_immutability():
    with criterion(2, "frozen tensors bit-identical after a two-stage run") as notes:
        spec = CorpusSpec(seed=0, image_size=16, train_real=16, train_fake=16)
        data = generate_corpus(spec, ["train"])["train"]
        cfg = ModelConfig(BackboneConfig(16, 8, 16, 2, 2, 2.0), bottleneck=4, fuse_depth=1, fuse_heads=2)
        model = GFFModel.create(cfg, 0, "full")
        init = model.registry.snapshot()
        frozen = [k for k in init if model.registry.is_frozen(k)]
        train(model, data, (StagePlan(1, 1e-2, 2, 8), StagePlan(2, 1e-2, 2, 8)))  # run_stage asserts this too
        for k in frozen:
            assert init[k].tobytes() == model.registry[k].data.tobytes(), k
        moved = [k for k in init if init[k].tobytes() != model.registry[k].data.tobytes()]
        assert any(k.startswith("dfgm.") for k in moved) and any(k.startswith("fuse.") for k in moved)
        notes.append(f"{len(frozen)} frozen tensors checked")


def test_c03_parameter_arithmetic():
    with criterion(3, "adapter parameter counts 589,824 / 14,155,776") as notes:
        reg = ParameterRegistry()
        rng = np.random.default_rng(0)
        init_dfgm(reg, "dfgm.0", 1024, 256, rng, with_biases=False)
        one = count_trainable(reg)
        for i in range(1, 24):
            init_dfgm(reg, f"dfgm.{i}", 1024, 256, rng, with_biases=False)
        total = count_trainable(reg)
        notes.append(f"{one:,} / {total:,}")
        assert one == 589_824 and total == 14_155_776


def test_c04_gradient_correctness():
    with criterion(4, "end-to-end grad_check < 1e-4 (float64, h=1e-5)") as notes:
        t0 = time.perf_counter()
        cfg = ModelConfig(BackboneConfig(16, 8, 16, 2, 2, 2.0), bottleneck=4, fuse_depth=1, fuse_heads=2)
        model = GFFModel.create(cfg, 3, "full", dtype=np.float64)
        reg = model.registry
        rng = np.random.default_rng(7)
        for name in ("dfgm.0.up.w", "dfgm.1.up.w", "head.w"):  # zero-initialised; randomise for a live path
            reg[name].data[:] = rng.standard_normal(reg[name].shape) * 0.5
        images = Tensor(rng.random((2, 16, 16, 3)))
        labels = [1, 0]

        def loss(_):
            return bce_loss(nx.sigmoid(model.logits(images, fusion=True)), labels)

        errors = {}
        for name in ("dfgm.0.down.w", "dfgm.1.mid.w", "dfgm.1.up.b", "fuse.cls", "fuse.block0.attn.qkv.w",
                     "fuse.block0.mlp.fc2.w", "head.w", "head.b"):
            errors[name] = nx.grad_check(loss, reg[name])
        errors["image"] = nx.grad_check(loss, images)
        worst = max(errors, key=errors.get)
        elapsed = time.perf_counter() - t0
        notes.append(f"max err {errors[worst]:.2e} at {worst}, {elapsed:.1f} s")
        assert all(e < 1e-4 for e in errors.values()), errors
        assert elapsed < 60


def test_c05_protocol_fidelity():
    with criterion(5, "default stage plans, Adam and BCE settings"):
        assert (DEFAULT_STAGE1.lr, DEFAULT_STAGE1.epochs, DEFAULT_STAGE1.batch_size) == (5e-5, 3, 32)
        assert (DEFAULT_STAGE2.lr, DEFAULT_STAGE2.epochs, DEFAULT_STAGE2.batch_size) == (5e-6, 1, 128)
        assert gcfg.RunConfig().stage_plans() == (DEFAULT_STAGE1, DEFAULT_STAGE2)
        state = AdamState()
        assert (state.betas, state.eps) == ((0.9, 0.999), 1e-8)
        assert bce_loss(Tensor(np.array([0.5])), [1]).item() == pytest.approx(math.log(2))
        snapshot = gcfg.dumps(gcfg.RunConfig())
        for line in ("stage1_lr = 5e-05", "stage1_epochs = 3", "stage1_batch = 32",
                     "stage2_lr = 5e-06", "stage2_epochs = 1", "stage2_batch = 128"):
            assert line in snapshot.splitlines()


@pytest.fixture(scope="module")
def toy_results():
    """Train full / no-dfgm / no-fuse on the 2,000-image 64x64 corpus (seed 0)."""
    cfg = gcfg.load(TOY_CFG)
    t0 = time.perf_counter()
    spec = CorpusSpec(seed=0, image_size=64, train_real=1000, train_fake=1000, test_real=250, test_fake=250)
    corpus = generate_corpus(spec, ["train", "test-seen", "test-unseen"])
    splits = {s: corpus[s] for s in ("test-seen", "test-unseen")}
    results = {}
    for mode in ("full", "no-dfgm", "no-fuse"):
        model = GFFModel.create(cfg.model_config(), cfg.seed, mode)
        train(model, corpus["train"], cfg.stage_plans(), seed=cfg.seed)
        rep = evaluate(model, splits)
        results[mode] = {r.split: r.acc for r in rep.rows}
        if mode == "full":
            full_time = time.perf_counter() - t0
    return results, full_time


@pytest.mark.slow
def test_c06_toy_learning(toy_results):
    with criterion(6, "toy learning: seen >= 95%, unseen >= 75%, < 15 min") as notes:
        results, elapsed = toy_results
        seen, unseen = results["full"]["test-seen"], results["full"]["test-unseen"]
        notes.append(f"seen {seen:.3f}, unseen {unseen:.3f}, {elapsed / 60:.1f} min")
        assert seen >= 0.95 and unseen >= 0.75
        assert elapsed < 15 * 60


@pytest.mark.slow
def test_c07_ablation_ordering(toy_results):
    with criterion(7, "ablation ordering on test-unseen (1 pp slack)") as notes:
        results, _ = toy_results
        acc = {m: results[m]["test-unseen"] for m in results}
        notes.append(", ".join(f"{m} {a:.3f}" for m, a in acc.items()))
        assert acc["full"] >= acc["no-dfgm"] - 0.01
        assert acc["full"] >= acc["no-fuse"] - 0.01


def _oracle_ap(scores, labels):
    """Precision at every distinct threshold, weighted by the recall gained there."""
    pos = sum(labels)
    ap, prev = Fraction(0), Fraction(0)
    for t in sorted(set(scores), reverse=True):
        chosen = [y for s, y in zip(scores, labels) if s >= t]
        recall = Fraction(sum(chosen), pos)
        ap += (recall - prev) * Fraction(sum(chosen), len(chosen))
        prev = recall
    return float(ap)


def test_c08_metric_oracle():
    with criterion(8, "AP equals the all-thresholds oracle on 10,000 cases") as notes:
        assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == 5 / 6
        rng = np.random.default_rng(8)
        checked = 0
        while checked < 10_000:
            n = int(rng.integers(1, 9))
            levels = int(rng.integers(1, n + 1))  # few levels -> many ties
            scores = [float(v) for v in rng.integers(0, levels, n) / max(levels - 1, 1)]
            labels = [int(v) for v in rng.integers(0, 2, n)]
            if not any(labels):
                continue
            assert average_precision(scores, labels) == _oracle_ap(scores, labels), (scores, labels)
            checked += 1
        notes.append(f"{checked} cases")


def test_c09_permutation_invariance():
    with criterion(9, "fused output invariant to stage-token order (100 trials, 1e-6)") as notes:
        rng = np.random.default_rng(9)
        worst = 0.0
        for trial in range(100):
            stages = int(rng.integers(2, 7))
            cfg = FuseFormerConfig(16, stages, depth=int(rng.integers(1, 4)), num_heads=4, use_positional=False)
            reg = ParameterRegistry()
            init_fuseformer(reg, cfg, np.random.default_rng(trial), dtype=np.float64)
            for k in reg.names():  # non-trivial weights in every block
                reg[k].data[:] += rng.standard_normal(reg[k].shape) * 0.3
            cls = [Tensor(rng.standard_normal((3, 16))) for _ in range(stages)]
            perm = rng.permutation(stages)
            a = fuseformer_forward(assemble_sequence(cls, reg["fuse.cls"]), reg, cfg).data
            b = fuseformer_forward(assemble_sequence([cls[i] for i in perm], reg["fuse.cls"]), reg, cfg).data
            worst = max(worst, float(np.abs(a - b).max()))
        notes.append(f"max |diff| {worst:.1e}")
        assert worst <= 1e-6


def test_c10_format_round_trips(tmp_path):
    with criterion(10, "GFFW bit-exact, PPM within 1/255, malformed -> FormatError"):
        reg = ParameterRegistry()
        rng = np.random.default_rng(10)
        reg.add("a.w", rng.standard_normal((3, 5)).astype(np.float32), frozen=True)
        reg.add("b.b", rng.standard_normal(7), frozen=False)
        reg.add("c.s", np.float32(2.5), frozen=False)
        export_weights(reg, tmp_path / "w.gffw")
        back = import_weights(tmp_path / "w.gffw")
        assert back.names() == reg.names() and back.equals(reg)
        assert all(back[k].dtype == reg[k].dtype and back.is_frozen(k) == reg.is_frozen(k) for k in reg.names())
        raw = (tmp_path / "w.gffw").read_bytes()
        for bad in (raw[:-1], b"XXXX" + raw[4:], raw[:10], b""):
            (tmp_path / "bad.gffw").write_bytes(bad)
            with pytest.raises(FormatError):
                import_weights(tmp_path / "bad.gffw")

        img = rng.random((9, 11, 3))
        write_image(img, tmp_path / "i.ppm")
        assert np.abs(read_image(tmp_path / "i.ppm") - img).max() <= 1 / 255
        for bad in (b"P5\n1 1\n255\n\x00", b"P6\n2 2\n255\n\x00\x00", b"P6\n-1 1\n255\n"):
            (tmp_path / "bad.ppm").write_bytes(bad)
            with pytest.raises(FormatError):
                read_image(tmp_path / "bad.ppm")


def test_c11_robustness_harness():
    with criterion(11, "perturbed eval deterministic; p=0 equals clean bitwise"):
        spec = CorpusSpec(seed=1, image_size=16, train_real=16, train_fake=16, test_real=8, test_fake=8)
        corpus = generate_corpus(spec, ["train", "test-seen", "test-unseen"])
        cfg = ModelConfig(BackboneConfig(16, 8, 16, 2, 2, 2.0), bottleneck=4, fuse_depth=1, fuse_heads=2)
        model = GFFModel.create(cfg, 0, "full")
        train(model, corpus["train"], (StagePlan(1, 1e-2, 2, 8), StagePlan(2, 1e-2, 2, 8)))
        splits = {s: corpus[s] for s in ("test-seen", "test-unseen")}
        clean = evaluate(model, splits)
        half = PerturbationConfig(apply_probability=0.5)
        assert evaluate(model, splits, half, seed=11) == evaluate(model, splits, half, seed=11)
        assert evaluate(model, splits, PerturbationConfig(apply_probability=0.0), seed=11) == clean
        assert evaluate(model, splits, half, seed=11) != clean
