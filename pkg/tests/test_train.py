import numpy as np
import pytest

from prefixvqa.errors import ConfigError, TrainingError
from prefixvqa.tensor import Tensor
from prefixvqa.train import (EarlyStopper, EncodedSplit, OptimizerState, TrainConfig, adamw_step,
                             early_stop_update, lr_at, split_loss, train)


@pytest.mark.parametrize("step,lr", [(599, 5e-3), (299, 2.5e-3), (10_000, 5e-3), (0, 5e-3 / 600)])
def test_warmup_schedule(step, lr):
    assert lr_at(step, TrainConfig()) == pytest.approx(lr, rel=1e-12)


def test_config_rejects_nonsense():
    for bad in ({"learning_rate": 0}, {"early_stop_tolerance": 0}, {"beta2": 1.0}, {"batch_size": 0}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_adamw_single_scalar_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    adamw_step({"x.w": p}, OptimizerState(), TrainConfig(weight_decay=0.0), lr=0.1)
    assert p.data[0] == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)
    assert p.grad is None


def test_adamw_zero_gradient_no_decay_keeps_values():
    p = Tensor(np.arange(4.0), requires_grad=True)
    p.grad = np.zeros(4)
    adamw_step({"x.w": p}, OptimizerState(), TrainConfig(weight_decay=0.0), lr=0.1)
    np.testing.assert_array_equal(p.data, np.arange(4.0))


def test_weight_decay_hits_matrices_only():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    prompt = Tensor(np.ones((2, 2)), requires_grad=True)
    for t in (w, b, prompt):
        t.grad = np.zeros(t.shape)
    adamw_step({"fc.w": w, "fc.b": b, "prompt": prompt}, OptimizerState(), TrainConfig(weight_decay=0.5), lr=0.1)
    np.testing.assert_allclose(w.data, 0.95)
    np.testing.assert_array_equal(b.data, 1.0)
    np.testing.assert_array_equal(prompt.data, 1.0)


def test_missing_gradient_is_an_error():
    with pytest.raises(TrainingError):
        adamw_step({"x.w": Tensor(np.ones(2), requires_grad=True)}, OptimizerState(), TrainConfig())


def _trace(losses, tolerance=3):
    stopper = EarlyStopper(tolerance)
    for i, v in enumerate(losses, 1):
        if early_stop_update(stopper, v) == "stop":
            return i, stopper.best_epoch
    return None, stopper.best_epoch


def test_early_stopping_traces():
    assert _trace([1.0, 0.9, 0.95, 0.96, 0.97]) == (5, 2)
    assert _trace([1.0 - 0.01 * i for i in range(50)])[0] is None
    assert _trace([0.5] * 10) == (4, 1)


def test_memorizes_one_sample(world):
    model, mapper = world.model("lora", embed_dim=16, base_scale=1.0)
    one = world.split("train")
    one = EncodedSplit(one.samples[:1], one.feats[:1])
    cfg = TrainConfig(learning_rate=1e-2, warmup_steps=10, batch_size=1, max_epochs=200,
                      max_steps=200, early_stop_tolerance=200)
    report = train(model, mapper, one, one, cfg)
    assert report.steps == 200
    assert report.best_val_loss < 0.05


def test_frozen_updates_mapper_only(world):
    model, mapper = world.model("frozen")
    base_before = model.base.checksum()
    mapper_before = {k: v.data.copy() for k, v in mapper.params.items()}
    train(model, mapper, world.split("train"), world.split("val"), TrainConfig(max_epochs=1))
    assert model.base.checksum() == base_before
    assert all(not np.array_equal(mapper.params[k].data, v) for k, v in mapper_before.items())


@pytest.mark.parametrize("variant", ["frozen", "prompt", "prefix", "lora"])
def test_first_epoch_reduces_loss(world, variant):
    model, mapper = world.model(variant, base_scale=0.5)
    tr = world.split("train")
    before = split_loss(model, mapper, tr)
    train(model, mapper, tr, world.split("val"), TrainConfig(max_epochs=1), restore_best=False)
    assert split_loss(model, mapper, tr) < before


def test_identical_seeds_identical_traces(world):
    reports = []
    for _ in range(2):
        model, mapper = world.model("prefix")
        reports.append(train(model, mapper, world.split("train"), world.split("val"),
                             TrainConfig(max_epochs=2, warmup_steps=5)))
    assert reports[0].step_losses == reports[1].step_losses
    assert reports[0].val_losses == reports[1].val_losses


def test_divergence_is_reported(world):
    model, mapper = world.model("frozen")
    split = world.split("train")
    split = EncodedSplit(split.samples, np.full_like(split.feats, np.nan))
    with pytest.raises(TrainingError, match="diverged"):
        train(model, mapper, split, world.split("val"), TrainConfig(max_epochs=1))


def test_empty_split_rejected(world):
    model, mapper = world.model("frozen")
    with pytest.raises(TrainingError):
        train(model, mapper, EncodedSplit([], np.zeros((0, 512))), world.split("val"), TrainConfig())
