"""Two-stage training, evaluation and exports."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from gff import numerics as nx
from gff.errors import ContractError, DimensionError, NumericError, UndefinedMetricError
from gff.metrics import accuracy, average_precision
from gff.model import GFFModel, stage_predicate
from gff.numerics import Tensor
from gff.synthdata import (
    LabeledImage,
    PerturbationConfig,
    crop_array,
    derive_seed,
    perturb,
    resize,
    resize_size_for,
    write_pgm,
)

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class StagePlan:
    stage: int
    lr: float
    epochs: int
    batch_size: int

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ContractError(f"stage must be 1 or 2, got {self.stage}")
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ContractError(f"invalid plan {self}")


# Default protocol: 3 epochs at 5e-5 (batch 32), then 1 epoch at 5e-6 (batch 128).
DEFAULT_STAGE1 = StagePlan(stage=1, lr=5e-5, epochs=3, batch_size=32)
DEFAULT_STAGE2 = StagePlan(stage=2, lr=5e-6, epochs=1, batch_size=128)

# The default rates are tuned for a pre-trained backbone over hundreds of
# thousands of images; a randomly initialised toy backbone on a 2,000-image
# corpus needs larger steps and more epochs to move in a few minutes.
TOY_STAGE1 = StagePlan(stage=1, lr=1e-3, epochs=10, batch_size=32)
TOY_STAGE2 = StagePlan(stage=2, lr=1e-3, epochs=5, batch_size=128)


@dataclass
class AdamState:
    betas: tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place, for every name in ``grads``."""
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient {g.shape} vs parameter {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


def bce_loss(scores: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy with scores clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(labels, dtype=scores.dtype).reshape(scores.shape)
    s = nx.clip(scores, BCE_CLAMP, 1.0 - BCE_CLAMP)
    per = nx.add(nx.mul(nx.log(s), y), nx.mul(nx.log(nx.sub(1.0, s)), 1.0 - y))
    return nx.mul(nx.mean(per), -1.0)


@dataclass(frozen=True)
class LogRow:
    stage: int
    epoch: int
    step: int
    loss: float


class ResizedCache:
    """Deterministic resize is done once; random crops/flips happen per draw."""

    def __init__(self, images: Sequence[LabeledImage], crop: int):
        self.crop = crop
        size = resize_size_for(crop)
        self.arrays = [resize(img.pixels, size) for img in images]
        self.labels = np.array([img.label for img in images], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.arrays)


def run_stage(model: GFFModel, plan: StagePlan, data: Sequence[LabeledImage] | ResizedCache,
              seed: int = 0) -> list[LogRow]:
    """Train the stage's parameter set; everything else must come out bitwise unchanged."""
    pred = stage_predicate(plan.stage, model.mode)
    if pred is None:
        log.info("stage %d skipped in mode %s", plan.stage, model.mode)
        return []
    if plan.stage == 2 and stage_predicate(1, model.mode) is not None and 1 not in model.completed_stages:
        raise ContractError("stage 2 requires stage 1 to have run")
    reg = model.registry
    crop = model.cfg.backbone.image_size
    cache = data if isinstance(data, ResizedCache) else ResizedCache(data, crop)
    active = reg.set_active(pred)
    before = {k: t.data.copy() for k, t in reg.items() if k not in active}
    params = {k: reg[k] for k in active}
    state = AdamState()
    rng = np.random.default_rng(derive_seed(seed, plan.stage))
    fusion = model.uses_fusion if plan.stage == 2 else False
    rows: list[LogRow] = []
    n = len(cache)
    step = 0
    try:
        for epoch in range(plan.epochs):
            perm = rng.permutation(n)
            for start in range(0, n, plan.batch_size):
                idx = perm[start : start + plan.batch_size]
                aug = rng.integers(0, 2**63 - 1, size=len(idx))
                batch = np.stack(
                    [crop_array(cache.arrays[i], crop, True, np.random.default_rng(int(a))) for i, a in zip(idx, aug)]
                ).astype(model.dtype)
                scores = nx.sigmoid(model.logits(batch, fusion=fusion))
                loss = bce_loss(scores, cache.labels[idx])
                if not np.isfinite(loss.data).all():
                    raise NumericError(f"non-finite loss at stage {plan.stage} epoch {epoch} step {step}")
                nx.backward(loss)
                grads = {k: p.grad for k, p in params.items() if p.grad is not None}
                adam_step(params, grads, state, plan.lr)
                for p in params.values():
                    p.grad = None
                rows.append(LogRow(plan.stage, epoch, step, float(loss.data)))
                step += 1
    finally:
        reg.set_active(lambda name: False)
    for k, old in before.items():
        if old.tobytes() != reg[k].data.tobytes():
            raise ContractError(f"parameter {k} changed outside the stage {plan.stage} trainable set")
    model.completed_stages.add(plan.stage)
    return rows


def train(model: GFFModel, data: Sequence[LabeledImage], plans: Sequence[StagePlan] = (DEFAULT_STAGE1, DEFAULT_STAGE2),
          seed: int = 0) -> list[LogRow]:
    """Run the plans in order, sharing one resize cache."""
    cache = ResizedCache(data, model.cfg.backbone.image_size)
    rows: list[LogRow] = []
    for plan in plans:
        rows += run_stage(model, plan, cache, seed)
    return rows


def write_log(rows: Sequence[LogRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("stage", "epoch", "step", "loss"))
        for r in rows:
            wr.writerow((r.stage, r.epoch, r.step, repr(r.loss)))


# ---------------------------------------------------------------------------
# evaluation


def prepare_eval(images: Sequence[LabeledImage], crop: int, perturbation: PerturbationConfig | None = None,
                 seed: int = 0, stream: int = 0) -> np.ndarray:
    """Optional perturbation, then resize + center crop; returns [N, C, C, 3]."""
    size = resize_size_for(crop)
    out = []
    for i, img in enumerate(images):
        if perturbation is not None:
            img = perturb(img, perturbation, derive_seed(seed, stream, i))
        out.append(crop_array(resize(img.pixels, size), crop, False, None))
    return np.stack(out)


def predict(model: GFFModel, arrays: np.ndarray, batch_size: int = 64) -> np.ndarray:
    arrays = arrays.astype(model.dtype, copy=False)
    return np.concatenate([model.scores(arrays[i : i + batch_size]) for i in range(0, len(arrays), batch_size)])


@dataclass(frozen=True)
class EvalRow:
    split: str
    family: str
    n: int
    acc: float
    ap: float


@dataclass
class EvalReport:
    rows: list[EvalRow]

    @property
    def mean_acc(self) -> float:
        return float(np.mean([r.acc for r in self.rows]))

    @property
    def mean_ap(self) -> float:
        return float(np.mean([r.ap for r in self.rows]))

    def row(self, split: str, family: str | None = None) -> EvalRow:
        for r in self.rows:
            if r.split == split and (family is None or r.family == family):
                return r
        raise KeyError((split, family))

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(("split", "family", "n", "acc", "ap"))
            for r in self.rows:
                wr.writerow((r.split, r.family, r.n, repr(r.acc), repr(r.ap)))
            wr.writerow(("mean", "all", sum(r.n for r in self.rows), repr(self.mean_acc), repr(self.mean_ap)))


def evaluate(model: GFFModel, splits: Mapping[str, Sequence[LabeledImage]],
             perturbation: PerturbationConfig | None = None, seed: int = 0) -> EvalReport:
    """Center-crop evaluation. Each split yields one row per fake family,
    scored against all of that split's real images."""
    crop = model.cfg.backbone.image_size
    rows = []
    for stream, (name, images) in enumerate(splits.items()):
        labels = np.array([img.label for img in images], dtype=np.int64)
        fams = np.array([img.family for img in images])
        fake_fams = sorted(set(fams[labels == 1].tolist()))
        if not fake_fams or not (labels == 0).any():
            raise UndefinedMetricError(f"split {name!r} needs both real and fake images")
        scores = predict(model, prepare_eval(images, crop, perturbation, seed, stream))
        for fam in fake_fams:
            mask = (labels == 0) | (fams == fam)
            rows.append(EvalRow(name, fam, int(mask.sum()), accuracy(scores[mask], labels[mask]),
                                average_precision(scores[mask], labels[mask])))
    return EvalReport(rows)


# ---------------------------------------------------------------------------
# exports


def export_features(model: GFFModel, images: Sequence[LabeledImage], path: str | os.PathLike,
                    batch_size: int = 64) -> int:
    """CSV of fused features: ``path,label,family,f0..f{D-1}``; returns row count."""
    arrays = prepare_eval(images, model.cfg.backbone.image_size).astype(model.dtype)
    feats = np.concatenate([model.features(arrays[i : i + batch_size]) for i in range(0, len(arrays), batch_size)])
    d = feats.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["path", "label", "family"] + [f"f{j}" for j in range(d)])
        for img, f in zip(images, feats):
            wr.writerow([img.path, img.label, img.family] + [repr(float(v)) for v in f])
    return len(images)


def cam_map(model: GFFModel, image: LabeledImage) -> np.ndarray:
    """Gradient-weighted patch map scaled to [0, 1] at image resolution.

    Takes d(logit)/d(tokens entering the last block) times those tokens,
    sums over channels, applies ReLU, min-max normalises over the patch grid
    and repeats each patch value over its P x P pixels. A constant map
    (e.g. zero classifier weights) yields all zeros.
    """
    cfg = model.cfg.backbone
    arr = prepare_eval([image], cfg.image_size)[0].astype(model.dtype)
    held = {}

    def tap(x: Tensor) -> Tensor:
        leaf = Tensor._wrap(x.data.copy())
        leaf.requires_grad = True
        held["leaf"] = leaf
        return leaf

    flags = {k: t.requires_grad for k, t in model.registry.items()}
    model.registry.set_active(lambda name: False)
    try:
        logit = model.logits_from_tokens(model.stage_tokens(arr[None], tap=tap))
        nx.backward(nx.sum_(logit))
    finally:
        for k, f in flags.items():
            model.registry[k].requires_grad = f
    leaf = held["leaf"]
    grad = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
    heat = np.maximum((grad[0, 1:, :] * leaf.data[0, 1:, :]).sum(axis=-1), 0.0).astype(np.float64)
    lo, hi = heat.min(), heat.max()
    heat = (heat - lo) / (hi - lo) if hi > lo else np.zeros_like(heat)
    g = cfg.image_size // cfg.patch_size
    return np.kron(heat.reshape(g, g), np.ones((cfg.patch_size, cfg.patch_size)))


def export_cam(model: GFFModel, image: LabeledImage, path: str | os.PathLike) -> np.ndarray:
    heat = cam_map(model, image)
    write_pgm(heat, path)
    return heat
