"""Teacher-student training: supervised stages, the combined distillation loss,
EMA co-distillation, periodic labeled correction and the generation loop.

All randomness comes from the ``numpy.random.Generator`` handed to each call;
model initialization uses an explicit ``torch.Generator``. Nothing here reads
labels of unlabeled-pool records: the distillation entry points only accept
image arrays.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from distl.errors import InvalidConfigError, InvalidInputError, NonFiniteLossError
from distl.model import ModelSpec, VisionTransformer, build_model
from distl.pipeline import AugmentPolicy, multi_crop, weak_augment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 5
    warmup_epochs: int = 1
    batch_size: int = 16
    max_lr: float = 5e-5
    weight_decay: float = 0.04
    ema_momentum: float = 0.996
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    selftrain_temp: float = 1.0
    center_momentum: float = 0.9
    ssl_weight: float = 1.0
    correction_interval: int = 500
    correction_steps: int = 50
    global_crops: int = 2
    local_crops: int = 4
    clip_grad: float | None = 3.0
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.teacher_temp <= 0 or self.student_temp <= 0 or self.selftrain_temp <= 0:
            raise InvalidConfigError("temperatures must be > 0")
        if not 0.0 <= self.ema_momentum <= 1.0 or not 0.0 <= self.center_momentum <= 1.0:
            raise InvalidConfigError("momenta must lie in [0, 1]")
        if self.correction_interval < 1:
            raise InvalidConfigError("correction_interval must be >= 1")
        if self.correction_steps < 0 or self.epochs < 0 or self.warmup_epochs < 0:
            raise InvalidConfigError("step and epoch counts must be >= 0")
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        if self.global_crops < 1 or self.local_crops < 0:
            raise InvalidConfigError("need >= 1 global crop and >= 0 local crops")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        if isinstance(d.get("augment"), dict):
            d["augment"] = AugmentPolicy(**d["augment"])
        return cls(**d)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 5
    batch_size: int = 16
    lr: float = 1e-4
    step_size: int = 1  # epochs between lr decays
    gamma: float = 0.5
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)


@dataclass
class Checkpoint:
    spec: ModelSpec
    student: VisionTransformer
    teacher: VisionTransformer
    center: torch.Tensor
    optimizer: torch.optim.Optimizer | None = None
    generation: int = 0
    global_step: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def published(self) -> VisionTransformer:
        return self.teacher


# ---------------------------------------------------------------- schedules

def lr_at(step: int, total: int, warmup: int, max_lr: float) -> float:
    """Linear warmup 0 -> max_lr over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    if warmup > 0 and step < warmup:
        return max_lr * step / warmup
    if total <= warmup:
        return max_lr
    progress = min(max(step - warmup, 0) / (total - warmup), 1.0)
    return 0.5 * max_lr * (1.0 + math.cos(math.pi * progress))


def momentum_at(step: int, total: int, base: float) -> float:
    """Cosine ramp of the EMA momentum from ``base`` at step 0 to 1.0 at ``total``."""
    if total <= 0:
        return base
    progress = min(step / total, 1.0)
    return 1.0 - (1.0 - base) * (math.cos(math.pi * progress) + 1.0) / 2.0


# ---------------------------------------------------------------- losses

def _views(x: torch.Tensor) -> torch.Tensor:
    # (views, dim) is a single sample; normalize to (views, batch, dim)
    return x.unsqueeze(1) if x.dim() == 2 else x


def _pair_ce(targets: torch.Tensor, student_logp: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over every (target view g, student view v) with v != g."""
    total, terms = 0.0, 0
    for g in range(targets.shape[0]):
        for v in range(student_logp.shape[0]):
            if v == g:
                continue
            total = total + torch.sum(-targets[g] * student_logp[v], dim=-1).mean()
            terms += 1
    if terms == 0:
        raise InvalidInputError("need at least one student view that differs from the teacher view")
    return total / terms


def ssl_loss(teacher_proj, student_proj, center, teacher_temp: float, student_temp: float) -> torch.Tensor:
    """Centered, sharpened teacher targets against student softmax over all other views.

    ``teacher_proj`` is (globals, [batch,] dim), ``student_proj`` is
    (globals + locals, [batch,] dim) with the global views first.
    """
    if teacher_temp <= 0 or student_temp <= 0:
        raise InvalidConfigError("temperatures must be > 0")
    t = _views(teacher_proj).detach()
    s = _views(student_proj)
    targets = F.softmax((t - center) / teacher_temp, dim=-1)
    return _pair_ce(targets, F.log_softmax(s / student_temp, dim=-1))


def selftrain_loss(teacher_class_probs, student_class_logits, student_temp: float = 1.0) -> torch.Tensor:
    """Soft pseudo-label cross-entropy: teacher probabilities on clean views vs
    student softmax on noised views (global views first)."""
    if student_temp <= 0:
        raise InvalidConfigError("temperature must be > 0")
    p = _views(torch.as_tensor(teacher_class_probs)).detach()
    s = _views(torch.as_tensor(student_class_logits))
    if p.shape[-1] != s.shape[-1] or p.shape[1:-1] != s.shape[1:-1]:
        raise InvalidInputError(f"shape mismatch: teacher {tuple(p.shape)} vs student {tuple(s.shape)}")
    return _pair_ce(p, F.log_softmax(s / student_temp, dim=-1))


def multilabel_bce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-class sigmoid BCE, summed over classes and averaged over samples."""
    per = F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype), reduction="none")
    return per.sum(dim=-1).mean()


# ---------------------------------------------------------------- helpers

def _tensor(images, dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.stack(images), dtype=np.float32)).to(dtype)


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def update_teacher_ema(teacher, student, momentum: float) -> None:
    if momentum == 1.0:
        return
    for pt, ps in zip(teacher.parameters(), student.parameters()):
        pt.mul_(momentum).add_(ps.detach(), alpha=1.0 - momentum)


def make_optimizer(model, cfg: DistillConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.max_lr, weight_decay=cfg.weight_decay)


def _set_lr(opt, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def _step(model, opt, loss, clip: float | None) -> None:
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip)
    opt.step()


def _check_finite(loss: torch.Tensor, **context) -> None:
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss.item()}", context)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def rng_state(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state))


def initial_checkpoint(spec: ModelSpec, seed: int = 0) -> Checkpoint:
    student = build_model(spec, seed)
    return Checkpoint(
        spec=spec, student=student, teacher=copy.deepcopy(student),
        center=torch.zeros(spec.proj_dim), generation=0,
    )


# ---------------------------------------------------------------- supervised stages

def pretrain_multilabel(
    spec: ModelSpec,
    images: np.ndarray,
    targets: np.ndarray,
    cfg: PretrainConfig = PretrainConfig(),
    rng: np.random.Generator | None = None,
    seed: int = 0,
    downstream_classes: int = 2,
) -> Checkpoint:
    """Multi-label pretraining of the backbone with per-class BCE.

    ``targets`` is (N, K) binary. The classification head is rebuilt for
    ``downstream_classes`` afterwards.
    """
    if len(images) == 0:
        raise InvalidInputError("empty pretraining manifest")
    targets = np.asarray(targets, dtype=np.float32)
    if targets.ndim != 2 or len(targets) != len(images):
        raise InvalidInputError("targets must be (N, K) and match the images")
    rng = rng if rng is not None else np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    model = build_model(replace(spec, num_classes=targets.shape[1]), gen)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=max(cfg.step_size, 1), gamma=cfg.gamma)
    dtype = _dtype(model)
    history = []
    for epoch in range(cfg.epochs):
        model.train()
        for idx in _batches(len(images), cfg.batch_size, rng):
            x = _tensor([weak_augment(images[i], cfg.augment, rng) for i in idx], dtype)
            logits, _ = model(x)
            loss = multilabel_bce(logits, torch.from_numpy(targets[idx]))
            _check_finite(loss, stage="pretrain", epoch=epoch)
            _step(model, opt, loss, None)
            history.append(loss.item())
        sched.step()
    model.reset_classifier(downstream_classes, gen)
    spec_out = model.spec
    ckpt = Checkpoint(spec=spec_out, student=model, teacher=copy.deepcopy(model),
                      center=torch.zeros(spec.proj_dim), generation=-1)
    ckpt.meta["pretrain_loss"] = history
    ckpt.rng_state = rng_state(rng)
    return ckpt


def supervised_epochs(
    model: VisionTransformer,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: DistillConfig,
    rng: np.random.Generator,
    epochs: int | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> tuple[torch.optim.Optimizer, list[float]]:
    """Cross-entropy training with weak augmentation and warmup + cosine lr.

    Returns the optimizer and the mean training loss of each epoch.
    """
    epochs = cfg.epochs if epochs is None else epochs
    opt = optimizer or make_optimizer(model, cfg)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = model.spec.num_classes
    if len(labels) and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidInputError(f"labels must lie in [0, {n_classes})")
    per_epoch = math.ceil(len(images) / cfg.batch_size)
    total, warm = epochs * per_epoch, cfg.warmup_epochs * per_epoch
    dtype = _dtype(model)
    step, history = 0, []
    for epoch in range(epochs):
        model.train()
        losses = []
        for idx in _batches(len(images), cfg.batch_size, rng):
            _set_lr(opt, lr_at(step, total, warm, cfg.max_lr))
            x = _tensor([weak_augment(images[i], cfg.augment, rng) for i in idx], dtype)
            logits, _ = model(x)
            loss = F.cross_entropy(logits, torch.from_numpy(labels[idx]))
            _check_finite(loss, stage="supervised", epoch=epoch, step=step)
            _step(model, opt, loss, cfg.clip_grad)
            losses.append(loss.item())
            step += 1
        history.append(float(np.mean(losses)))
    return opt, history


def train_initial(
    start: Checkpoint | ModelSpec,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: DistillConfig,
    rng: np.random.Generator,
    seed: int = 0,
) -> Checkpoint:
    """Supervised training on the small labeled set; the result is generation 0
    with the teacher an exact copy of the student."""
    if len(images) == 0:
        raise InvalidInputError("labeled set is empty")
    if isinstance(start, Checkpoint):
        student = copy.deepcopy(start.student)
        spec = start.spec
    else:
        spec = start
        student = build_model(spec, seed)
    opt, history = supervised_epochs(student, images, labels, cfg, rng)
    ckpt = Checkpoint(
        spec=spec, student=student, teacher=copy.deepcopy(student),
        center=torch.zeros(spec.proj_dim, dtype=torch.float32), optimizer=opt,
        generation=0, global_step=0,
    )
    ckpt.meta["train_loss"] = history
    ckpt.rng_state = rng_state(rng)
    return ckpt


# ---------------------------------------------------------------- distillation

@dataclass
class CropBatch:
    teacher: torch.Tensor  # (G*B, S, S) clean global crops, view-major
    student_global: torch.Tensor  # (G*B, S, S) augmented global crops
    student_local: torch.Tensor | None  # (L*B, S/2, S/2) augmented local crops
    n_global: int
    n_local: int
    batch: int


def make_crops(images, cfg: DistillConfig, rng: np.random.Generator, dtype=torch.float32) -> CropBatch:
    g, l = cfg.global_crops, cfg.local_crops  # noqa: E741
    clean_g = [[None] * len(images) for _ in range(g)]
    noisy_g = [[None] * len(images) for _ in range(g)]
    noisy_l = [[None] * len(images) for _ in range(l)]
    for b, img in enumerate(images):
        crops = multi_crop(img, g, l, rng)
        for v, c in enumerate(crops.globals):
            clean_g[v][b] = c
            noisy_g[v][b] = weak_augment(c, cfg.augment, rng)
        for v, c in enumerate(crops.locals):
            noisy_l[v][b] = weak_augment(c, cfg.augment, rng)
    flat = lambda views: [x for view in views for x in view]  # noqa: E731
    return CropBatch(
        teacher=_tensor(flat(clean_g), dtype),
        student_global=_tensor(flat(noisy_g), dtype),
        student_local=_tensor(flat(noisy_l), dtype) if l else None,
        n_global=g, n_local=l, batch=len(images),
    )


def distl_objective(student, teacher, crops: CropBatch, center: torch.Tensor, cfg: DistillConfig):
    """Return (total, ssl, selftrain, teacher_proj) for one crop batch.

    The teacher side is evaluated without gradient tracking.
    """
    b, g = crops.batch, crops.n_global
    with torch.no_grad():
        t_logits, t_proj = teacher(crops.teacher)
    s_logits, s_proj = student(crops.student_global)
    if crops.student_local is not None:
        l_logits, l_proj = student(crops.student_local)
        s_logits = torch.cat([s_logits, l_logits])
        s_proj = torch.cat([s_proj, l_proj])
    views = g + crops.n_local
    t_logits = t_logits.reshape(g, b, -1)
    t_proj = t_proj.reshape(g, b, -1)
    s_logits = s_logits.reshape(views, b, -1)
    s_proj = s_proj.reshape(views, b, -1)
    l_ssl = ssl_loss(t_proj, s_proj, center.to(t_proj.dtype), cfg.teacher_temp, cfg.student_temp)
    l_st = selftrain_loss(F.softmax(t_logits, dim=-1), s_logits, cfg.selftrain_temp)
    return l_st + cfg.ssl_weight * l_ssl, l_ssl, l_st, t_proj


def distl_step(
    ckpt: Checkpoint,
    images,
    cfg: DistillConfig,
    rng: np.random.Generator,
    lr: float | None = None,
    momentum: float | None = None,
) -> dict:
    """One distillation update on a batch of unlabeled images (mutates ``ckpt``).

    Multi-crops every image, trains the student on the combined loss, then
    updates the teacher by EMA and the center by its running mean.
    """
    lr = cfg.max_lr if lr is None else lr
    m = cfg.ema_momentum if momentum is None else momentum
    if ckpt.optimizer is None:
        ckpt.optimizer = make_optimizer(ckpt.student, cfg)
    _set_lr(ckpt.optimizer, lr)
    ckpt.student.train()
    crops = make_crops(images, cfg, rng, _dtype(ckpt.student))
    total, l_ssl, l_st, t_proj = distl_objective(ckpt.student, ckpt.teacher, crops, ckpt.center, cfg)
    _check_finite(total, stage="distl", step=ckpt.global_step, generation=ckpt.generation,
                  ssl_loss=l_ssl.item(), selftrain_loss=l_st.item(), lr=lr)
    _step(ckpt.student, ckpt.optimizer, total, cfg.clip_grad)
    update_teacher_ema(ckpt.teacher, ckpt.student, m)
    with torch.no_grad():
        batch_center = t_proj.reshape(-1, t_proj.shape[-1]).mean(dim=0).to(ckpt.center.dtype)
        ckpt.center = ckpt.center * cfg.center_momentum + batch_center * (1.0 - cfg.center_momentum)
    ckpt.global_step += 1
    return {
        "step": ckpt.global_step, "generation": ckpt.generation,
        "ssl_loss": l_ssl.item(), "selftrain_loss": l_st.item(), "total_loss": total.item(),
        "correction": False, "lr": lr, "m": m,
    }


def correction_update(
    ckpt: Checkpoint,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: DistillConfig,
    rng: np.random.Generator,
    lr: float | None = None,
    momentum: float | None = None,
) -> dict | None:
    """``cfg.correction_steps`` supervised steps on the initial labeled set,
    applying the teacher EMA after each. Does not advance ``global_step``."""
    if cfg.correction_steps == 0:
        return None
    if len(images) == 0:
        raise InvalidConfigError("correction needs a nonempty labeled set")
    lr = cfg.max_lr if lr is None else lr
    m = cfg.ema_momentum if momentum is None else momentum
    if ckpt.optimizer is None:
        ckpt.optimizer = make_optimizer(ckpt.student, cfg)
    _set_lr(ckpt.optimizer, lr)
    labels = np.asarray(labels, dtype=np.int64)
    dtype = _dtype(ckpt.student)
    ckpt.student.train()
    losses = []
    for _ in range(cfg.correction_steps):
        idx = rng.choice(len(images), size=min(cfg.batch_size, len(images)), replace=False)
        x = _tensor([weak_augment(images[i], cfg.augment, rng) for i in idx], dtype)
        logits, _ = ckpt.student(x)
        loss = F.cross_entropy(logits, torch.from_numpy(labels[idx]))
        _check_finite(loss, stage="correction", step=ckpt.global_step)
        _step(ckpt.student, ckpt.optimizer, loss, cfg.clip_grad)
        update_teacher_ema(ckpt.teacher, ckpt.student, m)
        losses.append(loss.item())
    return {"step": ckpt.global_step, "generation": ckpt.generation, "correction": True,
            "correction_loss": float(np.mean(losses)), "lr": lr, "m": m}


def evolve_generation(
    prev: Checkpoint,
    pool_images: np.ndarray,
    labeled_images: np.ndarray,
    labeled_labels: np.ndarray,
    cfg: DistillConfig,
    rng: np.random.Generator,
    on_record: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Train generation ``prev.generation + 1`` on ``pool_images``.

    Student and teacher both start from the previous teacher; the returned
    checkpoint publishes the teacher.
    """
    if len(pool_images) == 0:
        raise InvalidInputError("unlabeled pool is empty")
    ckpt = Checkpoint(
        spec=prev.spec,
        student=copy.deepcopy(prev.teacher),
        teacher=copy.deepcopy(prev.teacher),
        center=prev.center.clone(),
        generation=prev.generation + 1,
        global_step=prev.global_step,
    )
    for p in ckpt.teacher.parameters():
        p.requires_grad_(False)
    ckpt.optimizer = make_optimizer(ckpt.student, cfg)
    per_epoch = math.ceil(len(pool_images) / cfg.batch_size)
    total, warm = cfg.epochs * per_epoch, cfg.warmup_epochs * per_epoch
    records = []
    k = 0
    for _ in range(cfg.epochs):
        for idx in _batches(len(pool_images), cfg.batch_size, rng):
            lr = lr_at(k, total, warm, cfg.max_lr)
            m = momentum_at(k, total, cfg.ema_momentum)
            rec = distl_step(ckpt, pool_images[idx], cfg, rng, lr=lr, momentum=m)
            records.append(rec)
            if on_record:
                on_record(rec)
            if ckpt.global_step % cfg.correction_interval == 0:
                corr = correction_update(ckpt, labeled_images, labeled_labels, cfg, rng, lr=lr, momentum=m)
                if corr is not None:
                    records.append(corr)
                    if on_record:
                        on_record(corr)
            k += 1
    for p in ckpt.teacher.parameters():
        p.requires_grad_(True)
    ckpt.meta["n_records"] = len(records)
    ckpt.meta["corrections"] = sum(1 for r in records if r.get("correction"))
    ckpt.rng_state = rng_state(rng)
    return ckpt


def train_cnn_adapter(
    cnn,
    images: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    epochs: int = 10,
    lr: float = 1e-3,
    batch_size: int = 32,
    augment: AugmentPolicy = AugmentPolicy(),
) -> list[float]:
    """Supervised training of the CNN used only for GradCAM comparisons."""
    if len(images) == 0:
        raise InvalidInputError("no images for the CNN adapter")
    opt = torch.optim.Adam(cnn.parameters(), lr=lr)
    labels = np.asarray(labels, dtype=np.int64)
    history = []
    for epoch in range(epochs):
        cnn.train()
        losses = []
        for idx in _batches(len(images), batch_size, rng):
            x = _tensor([weak_augment(images[i], augment, rng) for i in idx], torch.float32)
            loss = F.cross_entropy(cnn(x), torch.from_numpy(labels[idx]))
            _check_finite(loss, stage="cnn_adapter", epoch=epoch)
            _step(cnn, opt, loss, None)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    cnn.trained = True
    cnn.eval()
    return history
