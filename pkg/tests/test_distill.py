import copy
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from distl.distill import (
    DistillConfig,
    PretrainConfig,
    correction_update,
    distl_objective,
    distl_step,
    evolve_generation,
    initial_checkpoint,
    lr_at,
    make_crops,
    momentum_at,
    multilabel_bce,
    pretrain_multilabel,
    selftrain_loss,
    ssl_loss,
    train_initial,
)
from distl.errors import InvalidConfigError, InvalidInputError, NonFiniteLossError
from distl.model import ModelSpec, build_model
from distl.pipeline import AugmentPolicy, preprocess_image
from distl.synth import synth_dataset
from oracles import ce_direct, softmax_list

SMALL = ModelSpec(depth=2, embed_dim=32, head_hidden=64, proj_bottleneck=32, proj_dim=64)


def images(n, seed=0, side=32):
    return np.random.default_rng(seed).random((n, side, side)).astype(np.float32)


def params(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


# ---------------------------------------------------------------- losses

def test_ssl_uniform_teacher_is_log_d():
    D = 7
    t = torch.zeros(2, D)
    s = torch.zeros(6, D)
    assert float(ssl_loss(t, s, torch.zeros(D), 0.04, 0.1)) == pytest.approx(math.log(D), abs=1e-6)


def test_ssl_one_hot_limit():
    t = torch.full((2, 5), -10.0)
    t[:, 2] = 10.0
    s = torch.full((4, 5), -100.0)
    s[:, 2] = 100.0
    assert float(ssl_loss(t, s, torch.zeros(5), 0.04, 0.1)) < 1e-6


def test_ssl_matches_term_by_term_oracle():
    rng = np.random.default_rng(0)
    G, V, B, D = 2, 4, 2, 3
    t = rng.normal(size=(G, B, D))
    s = rng.normal(size=(V, B, D))
    c = rng.normal(size=D) * 0.1
    tt, ts = 0.04, 0.1
    total, terms = 0.0, 0
    for g in range(G):
        for v in range(V):
            if v == g:
                continue
            for b in range(B):
                p = softmax_list([(t[g, b, k] - c[k]) for k in range(D)], tt)
                q = softmax_list(list(s[v, b]), ts)
                total += ce_direct(p, q) / B
            terms += 1
    got = ssl_loss(torch.tensor(t), torch.tensor(s), torch.tensor(c), tt, ts)
    assert float(got) == pytest.approx(total / terms, abs=1e-9)


def test_selftrain_identities():
    p = torch.tensor([[0.2, 0.8]])
    s = torch.stack([torch.zeros(2), torch.log(p[0])])
    entropy = -(0.2 * math.log(0.2) + 0.8 * math.log(0.8))
    assert float(selftrain_loss(p, s)) == pytest.approx(entropy, abs=1e-6)
    uniform = torch.full((2, 2), 0.5)
    assert float(selftrain_loss(uniform, torch.zeros(6, 2))) == pytest.approx(math.log(2), abs=1e-7)


def test_selftrain_matches_oracle_and_rejects_mismatch():
    rng = np.random.default_rng(1)
    G, V, B = 2, 6, 3
    probs = rng.dirichlet([1, 1], size=(G, B))
    logits = rng.normal(size=(V, B, 2))
    expect, terms = 0.0, 0
    for g in range(G):
        for v in range(V):
            if v != g:
                expect += sum(ce_direct(probs[g, b], softmax_list(list(logits[v, b]))) for b in range(B)) / B
                terms += 1
    assert float(selftrain_loss(torch.tensor(probs), torch.tensor(logits))) == pytest.approx(expect / terms, abs=1e-9)
    with pytest.raises(InvalidInputError):
        selftrain_loss(torch.full((2, 3, 2), 0.5), torch.zeros(6, 3, 3))
    with pytest.raises(InvalidConfigError):
        ssl_loss(torch.zeros(2, 3), torch.zeros(4, 3), torch.zeros(3), 0.0, 0.1)


def test_bce_identities():
    K = 5
    targets = torch.from_numpy(np.random.default_rng(0).integers(0, 2, (64, K)).astype(np.float32))
    assert float(multilabel_bce(torch.zeros(64, K), targets)) == pytest.approx(K * math.log(2), abs=1e-6)
    perfect = (targets * 2 - 1) * 60.0
    assert float(multilabel_bce(perfect, targets)) < 1e-6
    model = build_model(SMALL.__class__(**{**SMALL.to_dict(), "num_classes": K}), 0)
    logits, _ = model(torch.from_numpy(images(64)))
    assert abs(float(multilabel_bce(logits.detach(), targets)) - K * math.log(2)) < 0.1 * K


# ---------------------------------------------------------------- schedules

def test_lr_schedule_shape():
    total, warm, lr = 100, 10, 5e-5
    vals = [lr_at(s, total, warm, lr) for s in range(total + 1)]
    assert vals[0] == 0.0 and vals[warm] == lr and vals[total] == 0.0
    assert all(a <= b for a, b in zip(vals[:warm], vals[1:warm + 1]))
    assert all(a >= b for a, b in zip(vals[warm:], vals[warm + 1:]))
    assert lr_at(5, total, warm, lr) == pytest.approx(lr / 2)


def test_momentum_schedule():
    assert momentum_at(0, 50, 0.996) == 0.996
    assert momentum_at(50, 50, 0.996) == 1.0
    vals = [momentum_at(s, 50, 0.996) for s in range(51)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_config_validation():
    for kw in (dict(teacher_temp=0), dict(student_temp=-1), dict(ema_momentum=1.5),
               dict(center_momentum=-0.1), dict(correction_interval=0)):
        with pytest.raises(InvalidConfigError):
            DistillConfig(**kw)
    cfg = DistillConfig(max_lr=1e-3, augment=AugmentPolicy(enabled=False))
    assert DistillConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- step mechanics

def fresh_ckpt(seed=0):
    ckpt = initial_checkpoint(SMALL, seed)
    with torch.no_grad():  # make teacher and student differ so the EMA check is not trivial
        for p in ckpt.teacher.parameters():
            p.add_(0.01 * torch.randn(p.shape, generator=torch.Generator().manual_seed(1)))
    return ckpt


def test_distl_step_ema_and_center_rules():
    cfg = DistillConfig(batch_size=4, center_momentum=0.9)
    ckpt = fresh_ckpt()
    ckpt.center = torch.randn(SMALL.proj_dim, generator=torch.Generator().manual_seed(2)) * 0.1
    teacher_old, center_old = copy.deepcopy(ckpt.teacher), ckpt.center.clone()
    batch = images(4)
    rng = np.random.default_rng(7)
    replay = copy.deepcopy(rng)
    m = 0.9
    rec = distl_step(ckpt, batch, cfg, rng, lr=1e-3, momentum=m)
    assert rec["step"] == 1 and not rec["correction"]
    for (name, t_new), t_old, s_new in zip(ckpt.teacher.state_dict().items(),
                                          teacher_old.state_dict().values(),
                                          ckpt.student.state_dict().values()):
        assert torch.allclose(t_new, m * t_old + (1 - m) * s_new, atol=1e-6), name
    crops = make_crops(batch, cfg, replay)
    with torch.no_grad():
        _, t_proj = teacher_old(crops.teacher)
    expect = 0.9 * center_old + 0.1 * t_proj.mean(dim=0)
    assert torch.allclose(ckpt.center, expect, atol=1e-6)
    assert all(p.grad is None for p in ckpt.teacher.parameters())


def test_momentum_one_freezes_teacher():
    ckpt = fresh_ckpt()
    before = params(ckpt.teacher)
    student_before = params(ckpt.student)
    distl_step(ckpt, images(4), DistillConfig(batch_size=4), np.random.default_rng(0), lr=1e-3, momentum=1.0)
    assert all(torch.equal(before[k], v) for k, v in ckpt.teacher.state_dict().items())
    assert any(not torch.equal(student_before[k], v) for k, v in ckpt.student.state_dict().items())


def test_distl_step_deterministic():
    outs = []
    for _ in range(2):
        ckpt = fresh_ckpt()
        distl_step(ckpt, images(4), DistillConfig(batch_size=4), np.random.default_rng(3), lr=1e-3)
        outs.append(params(ckpt.student) | {"center": ckpt.center})
    assert all(torch.equal(outs[0][k], outs[1][k]) for k in outs[0])


def test_non_finite_loss_aborts_with_diagnostics():
    ckpt = fresh_ckpt()
    bad = images(2)
    bad[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        distl_step(ckpt, bad, DistillConfig(batch_size=2, augment=AugmentPolicy(enabled=False)),
                   np.random.default_rng(0))
    assert info.value.diagnostics["stage"] == "distl"


def test_total_loss_gradient_matches_finite_differences():
    cfg = DistillConfig(local_crops=2)
    student = build_model(SMALL, 0).double()
    teacher = build_model(SMALL, 1).double()
    crops = make_crops(images(2), cfg, np.random.default_rng(0), dtype=torch.float64)
    center = torch.randn(SMALL.proj_dim, dtype=torch.float64, generator=torch.Generator().manual_seed(0)) * 0.1

    def total():
        return distl_objective(student, teacher, crops, center, cfg)[0]

    student.zero_grad()
    total().backward()
    plist = list(student.parameters())
    sizes = np.array([p.numel() for p in plist])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = np.random.default_rng(1).choice(sizes.sum(), size=110, replace=False)
    worst, eps = 0.0, 1e-6
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            p, i = plist[k].view(-1), int(flat - offsets[k])
            analytic = float(plist[k].grad.view(-1)[i])
            orig = float(p[i])
            p[i] = orig + eps
            up = float(total())
            p[i] = orig - eps
            down = float(total())
            p[i] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6))
    assert worst < 1e-3


# ---------------------------------------------------------------- supervised stages

def test_pretrain_shapes_and_errors():
    x = images(8)
    y = np.random.default_rng(0).integers(0, 2, (8, 5))
    ckpt = pretrain_multilabel(SMALL, x, y, PretrainConfig(epochs=1, batch_size=4), seed=0)
    assert ckpt.spec.num_classes == 2 and ckpt.generation == -1
    assert len(ckpt.meta["pretrain_loss"]) == 2
    with pytest.raises(InvalidInputError):
        pretrain_multilabel(SMALL, x[:0], y[:0])


def test_train_initial_zero_epochs_is_identity():
    init = initial_checkpoint(SMALL, 4)
    ckpt = train_initial(init, images(8), np.array([0, 1] * 4), DistillConfig(epochs=0), np.random.default_rng(0))
    assert ckpt.generation == 0
    for k, v in init.student.state_dict().items():
        assert torch.equal(ckpt.student.state_dict()[k], v)
        assert torch.equal(ckpt.teacher.state_dict()[k], v)
    with pytest.raises(InvalidInputError):
        train_initial(init, images(2), np.array([0, 2]), DistillConfig(epochs=1), np.random.default_rng(0))


def test_train_initial_loss_decreases_on_synthetic_task():
    histories = []
    for seed in range(3):
        data = synth_dataset(per_class=100, val_per_class=0, test_per_class_per_site=0,
                             difficulty=0.3, seed=seed)
        x = np.stack([preprocess_image(data.images[r.id], 32) for r in data.records])
        y = np.array([r.label for r in data.records])
        ckpt = train_initial(ModelSpec(), x, y, DistillConfig(epochs=3, max_lr=5e-4), np.random.default_rng(seed),
                             seed=seed)
        histories.append(ckpt.meta["train_loss"])
    med = np.median(np.array(histories), axis=0)
    assert med[0] > med[1] > med[2]


# ---------------------------------------------------------------- correction and generations

def test_correction_zero_steps_is_identity_and_empty_set_errors():
    ckpt = fresh_ckpt()
    before = params(ckpt.student) | {f"t.{k}": v for k, v in params(ckpt.teacher).items()}
    assert correction_update(ckpt, images(4), np.zeros(4), DistillConfig(correction_steps=0),
                             np.random.default_rng(0)) is None
    after = params(ckpt.student) | {f"t.{k}": v for k, v in params(ckpt.teacher).items()}
    assert all(torch.equal(before[k], after[k]) for k in before)
    with pytest.raises(InvalidConfigError):
        correction_update(ckpt, images(0), np.zeros(0), DistillConfig(), np.random.default_rng(0))


def test_correction_on_fitted_sample_barely_moves():
    ckpt = fresh_ckpt()
    with torch.no_grad():  # force a huge margin for class 1
        last = ckpt.student.cls_head[-1]
        last.weight.zero_()
        last.bias.copy_(torch.tensor([-30.0, 30.0]))
    cfg = DistillConfig(correction_steps=5, batch_size=1)
    x, y = images(1), np.array([1])
    logits, _ = ckpt.student(torch.from_numpy(x))
    assert float(F.cross_entropy(logits.detach(), torch.tensor([1]))) < 1e-6
    before = torch.cat([p.detach().flatten().clone() for p in ckpt.student.parameters()])
    lr = 1e-4
    correction_update(ckpt, x, y, cfg, np.random.default_rng(0), lr=lr)
    after = torch.cat([p.detach().flatten() for p in ckpt.student.parameters()])
    # AdamW: decoupled decay moves each step by lr*wd*|theta|; the gradient part is ~0
    bound = cfg.correction_steps * lr * (cfg.weight_decay * float(before.norm()) + 1e-6)
    assert float((after - before).norm()) < bound


def test_correction_cadence_and_generation_bookkeeping():
    cfg = DistillConfig(epochs=1, batch_size=4, correction_interval=3, correction_steps=2, local_crops=2)
    prev = train_initial(SMALL, images(8), np.array([0, 1] * 4), DistillConfig(epochs=0), np.random.default_rng(0))
    records = []
    ckpt = evolve_generation(prev, images(40, seed=1), images(8), np.array([0, 1] * 4), cfg,
                             np.random.default_rng(0), on_record=records.append)
    steps = [r["step"] for r in records if not r["correction"]]
    corr = [r["step"] for r in records if r["correction"]]
    assert steps == list(range(1, 11))
    assert corr == [3, 6, 9]
    assert ckpt.generation == 1 and ckpt.global_step == 10
    assert ckpt.published is ckpt.teacher
    assert {"step", "ssl_loss", "selftrain_loss", "correction", "lr", "m"} <= set(records[0])
    with pytest.raises(InvalidInputError):
        evolve_generation(prev, images(0), images(8), np.zeros(8), cfg, np.random.default_rng(0))


def test_three_generations_and_supervised_sanity_path():
    cfg = DistillConfig(epochs=1, batch_size=4, correction_interval=2, correction_steps=1, local_crops=2)
    x, y = images(8), np.array([0, 1] * 4)
    ckpt = train_initial(SMALL, x, y, DistillConfig(epochs=0), np.random.default_rng(0))
    for t in (1, 2, 3):
        ckpt = evolve_generation(ckpt, images(4 * t, seed=t), x, y, cfg, np.random.default_rng(t))
        assert ckpt.generation == t
    sanity = DistillConfig(epochs=1, batch_size=4, ssl_weight=0.0, local_crops=0)
    out = evolve_generation(ckpt, x, x, y, sanity, np.random.default_rng(0))
    assert out.generation == 4
