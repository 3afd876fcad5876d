import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualrecon.model import DualLatentModel
from dualrecon.oracles import Box, Sphere
from dualrecon.tensor import engine as E
from dualrecon.tensor.engine import Tensor
from dualrecon.trainer import (TrainConfig, TrainingDiverged, batch_loss, bce_loss, cosine_lr,
                           sample_training_pair, step_rng, train)

SMALL = dict(epochs=3, lr=1e-3, M=64, N=48, seed=0)


def _bce_reference(p, o):
    return -sum(math.log(pi) if oi else math.log(1 - pi) for pi, oi in zip(p, o)) / len(p)


def test_bce_uniform_is_ln2(f64):
    for targets in ([0, 0, 0, 0], [1, 0, 1, 1]):
        assert abs(float(bce_loss(Tensor(np.zeros(4)), targets).data) - math.log(2)) <= 1e-6


def test_bce_confident():
    assert float(bce_loss(Tensor(np.array([20.0, -20.0])), [1, 0]).data) < 1e-8


def test_bce_three_sample_case(f64):
    p = np.array([0.9, 0.2, 0.5])
    logits = np.log(p / (1 - p))
    got = float(bce_loss(Tensor(logits), [1, 0, 1]).data)
    assert abs(got - _bce_reference(p, [1, 0, 1])) <= 1e-12
    assert abs(got - 0.3405) <= 1e-4


def test_bce_stable_over_wide_logits():
    z = np.linspace(-50, 50, 1001)
    for t in (0, 1):
        x = Tensor(z, requires_grad=True)
        loss = bce_loss(x, np.full_like(z, t))
        loss.backward()
        assert np.isfinite(float(loss.data)) and np.all(np.isfinite(x.grad))


def test_bce_rejects_soft_targets():
    with pytest.raises(ValueError):
        bce_loss(Tensor(np.zeros(2)), [0.3, 1])


def test_cosine_examples():
    assert cosine_lr(0, 100, 1e-4) == 1e-4
    assert cosine_lr(100, 100, 1e-4, 1e-6) == 1e-6
    assert abs(cosine_lr(50, 100, 1e-4, 0.0) - 5e-5) < 1e-20
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5000), st.floats(1e-6, 1.0), st.floats(0, 1.0))
def test_cosine_non_increasing(total, lr_max, frac):
    lr_min = lr_max * frac
    lrs = [cosine_lr(s, total, lr_max, lr_min) for s in range(0, total + 1, max(1, total // 50))]
    assert all(b <= a + 1e-18 for a, b in zip(lrs, lrs[1:]))


def test_noise_free_samples_lie_on_sphere():
    raw, _, _ = sample_training_pair(Sphere(radius=0.3), 500, 10, 0.0, np.random.default_rng(0))
    np.testing.assert_allclose(np.linalg.norm(raw - 0.5, axis=1), 0.3, atol=1e-6)


def test_uniform_query_positives_match_box_volume():
    box = Box(half=(0.3, 0.25, 0.2))
    v = float(np.prod(2 * np.array(box.half)))
    M = 20000
    _, qb, targets = sample_training_pair(box, 10, M, 0.005, np.random.default_rng(1), near_fraction=0.0)
    assert not qb.near_surface.any()
    frac = targets.mean()
    assert abs(frac - v) <= 3 * math.sqrt(v * (1 - v) / M)


def test_query_mix_and_targets():
    o = Sphere()
    raw, qb, t = sample_training_pair(o, 100, 2048, 0.005, np.random.default_rng(2))
    assert raw.shape == (100, 3) and qb.world.shape == (2048, 3)
    assert qb.near_surface.sum() == 1024
    near = qb.world[qb.near_surface]
    assert np.std(o.sdf(near)) < 0.1  # concentrated around the surface
    np.testing.assert_array_equal(t, o.occupancy(qb.world))


def test_sampling_bit_identical_per_seed():
    a = sample_training_pair(Sphere(), 64, 64, 0.005, step_rng(7, 3))
    b = sample_training_pair(Sphere(), 64, 64, 0.005, step_rng(7, 3))
    for x, y in ((a[0], b[0]), (a[1].world, b[1].world), (a[2], b[2])):
        assert x.tobytes() == y.tobytes()
    c = sample_training_pair(Sphere(), 64, 64, 0.005, step_rng(7, 4))
    assert c[0].tobytes() != a[0].tobytes()


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(M=0)
    with pytest.raises(ValueError):
        TrainConfig(noise_sigma=-1)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"epochs": 1, "bogus": 2})
    cfg = TrainConfig(epochs=3, batch_size=2)
    assert cfg.total_steps(5) == 9
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_untrained_loss_near_ln2(tiny_cfg):
    model = DualLatentModel(tiny_cfg, seed=0)
    batch = [sample_training_pair(Sphere(), 48, 512, 0.005, step_rng(0, 0))]
    with E.no_grad():
        assert 0.6 <= float(batch_loss(model, batch).data) <= 0.8


def test_zero_lr_keeps_parameters(tiny_cfg, tmp_path):
    model = DualLatentModel(tiny_cfg, seed=0)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    train(model, TrainConfig(**{**SMALL, "lr": 0.0}), [Sphere()], tmp_path)
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_training_log_and_checkpoints(tiny_cfg, tmp_path):
    model = DualLatentModel(tiny_cfg, seed=0)
    res = train(model, TrainConfig(**SMALL), [Sphere()], tmp_path)
    recs = [json.loads(line) for line in (tmp_path / "train.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [0, 1, 2]
    assert set(recs[0]) == {"step", "loss", "lr", "wallclock"}
    assert recs[0]["lr"] == SMALL["lr"]
    assert [r["loss"] for r in recs] == res.losses
    assert res.final_checkpoint.exists() and res.best_checkpoint.exists()
    assert res.best_loss == min(res.losses)
    best = DualLatentModel.load(res.best_checkpoint)
    batch = [sample_training_pair(Sphere(), 48, 64, 0.005, step_rng(0, int(np.argmin(res.losses))))]
    with E.no_grad():
        assert float(batch_loss(best, batch).data) == pytest.approx(res.best_loss, rel=1e-6)


def test_seeded_runs_are_bit_identical(tiny_cfg, tmp_path):
    curves = []
    for run in ("a", "b"):
        res = train(DualLatentModel(tiny_cfg, seed=0), TrainConfig(**SMALL), [Sphere()], tmp_path / run)
        curves.append(res.losses)
    assert curves[0] == curves[1]
    assert (tmp_path / "a/final.dtck").read_bytes() == (tmp_path / "b/final.dtck").read_bytes()


def test_prefetch_matches_inline(tiny_cfg):
    a = train(DualLatentModel(tiny_cfg, seed=0), TrainConfig(**SMALL), [Sphere()]).losses
    b = train(DualLatentModel(tiny_cfg, seed=0), TrainConfig(**SMALL, prefetch=True), [Sphere()]).losses
    assert a == b


def test_nan_loss_aborts_with_dump(tiny_cfg, tmp_path):
    model = DualLatentModel(tiny_cfg, seed=0)
    model.decoder.w_out.bias.data[:] = np.nan
    with pytest.raises(TrainingDiverged, match="step 0"):
        train(model, TrainConfig(**SMALL), [Sphere()], tmp_path)
    dump = np.load(tmp_path / "nan_batch_step0.npz")
    assert dump["raw0"].shape == (48, 3) and dump["targets0"].shape == (64,)


def test_loss_trends_down(tiny_cfg):
    res = train(DualLatentModel(tiny_cfg, seed=0), TrainConfig(**{**SMALL, "epochs": 40, "lr": 3e-3, "M": 256}),
                [Sphere()])
    assert np.mean(res.losses[-8:]) < np.mean(res.losses[:8])
