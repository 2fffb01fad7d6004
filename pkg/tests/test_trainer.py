import numpy as np
import pytest

from ifrvis import tensor as T
from ifrvis.data import GeneratorSpec, generate_dataset
from ifrvis.losses import LossConfig, clip_loss
from ifrvis.model import IFRModel, ModelConfig
from ifrvis.tensor import Tensor
from ifrvis.tensor_io import load_tensors, save_tensors
from ifrvis.trainer import (
    Adam,
    CheckpointError,
    NumericError,
    TrainConfig,
    Trainer,
    clip_target,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
)

SPEC = GeneratorSpec(height=32, width=32, length=4, size_range=(3.0, 5.0), speed_range=(0.5, 2.0))
MODEL = ModelConfig(queries=4, dim=8, heads=2, layers=1, encoder_channels=(4, 8))


@pytest.fixture(scope="module")
def videos():
    return generate_dataset(SPEC, 4, 0)


def make_trainer(videos, **train_kw):
    kw = dict(steps=3, batch=2, lr=1e-3)
    kw.update(train_kw)
    return Trainer(MODEL, TrainConfig(**kw), LossConfig(), videos)


def params_equal(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_lr_zero_keeps_parameters(videos):
    tr = make_trainer(videos, lr=0.0)
    before = tr.model.state_dict()
    tr.run()
    assert params_equal(before, tr.model.state_dict())


def test_gradients_zeroed_after_step(videos):
    tr = make_trainer(videos)
    train_step(tr.model, tr.sample_batch(), tr.optimizer, tr.loss_cfg)
    assert all(p.grad is None for p in tr.model.parameters())


def test_deterministic_trajectory(videos):
    a, b = make_trainer(videos), make_trainer(videos)
    a.run()
    b.run()
    assert [r["total"] for r in a.log] == [r["total"] for r in b.log]
    assert params_equal(a.model.state_dict(), b.model.state_dict())


def test_steps_zero_is_initialization(videos):
    ck = train(MODEL, TrainConfig(steps=0), LossConfig(), videos)
    assert ck.step == 0 and ck.log == []
    assert params_equal(ck.params, IFRModel(MODEL).state_dict())


def test_loss_decreases_on_tiny_batch(videos):
    tr = make_trainer(videos[:1], steps=200, batch=1, lr=3e-3)
    tr.run()
    totals = [r["total"] for r in tr.log]
    assert np.mean(totals[-20:]) < 0.7 * np.mean(totals[:20])


def test_encoder_lr_multiplier(videos):
    tr = make_trainer(videos, encoder_lr_mult=0.1, lr=1e-3)
    before = tr.model.state_dict()
    tr.run(steps=1)
    after = tr.model.state_dict()
    enc = tr.model.encoder_parameter_names()
    # the first Adam step moves each coordinate by ~lr (sign of gradient) times its group multiplier
    enc_step = max(np.abs(after[k] - before[k]).max() for k in enc)
    rest_step = max(np.abs(after[k] - before[k]).max() for k in after if k not in enc)
    assert enc_step == pytest.approx(1e-4, rel=1e-3)
    assert rest_step == pytest.approx(1e-3, rel=1e-3)


def test_every_parameter_gets_gradient(videos):
    tr = make_trainer(videos)
    seen = set()
    named = dict(tr.model.named_parameters())
    for _ in range(3):
        batch = tr.sample_batch()
        out = tr.model(np.stack([c.frames for c in batch]).astype(float))
        loss, _ = clip_loss(out, [clip_target(c) for c in batch], tr.loss_cfg)
        T.backward(loss)
        seen |= {k for k, p in named.items() if p.grad is not None and np.any(p.grad != 0)}
        tr.model.zero_grad()
    assert seen == set(named)


def test_resume_is_bitwise(videos, tmp_path):
    full = make_trainer(videos, steps=6)
    full.run()

    part = make_trainer(videos, steps=6)
    part.run(steps=3, checkpoint_path=tmp_path / "half.ckpt")
    resumed = make_trainer(videos, steps=6)
    resumed.restore(load_checkpoint(tmp_path / "half.ckpt"))
    resumed.run()

    assert [r["total"] for r in resumed.log] == [r["total"] for r in full.log]
    assert params_equal(resumed.model.state_dict(), full.model.state_dict())
    assert all(np.array_equal(resumed.optimizer.m[k], full.optimizer.m[k]) for k in full.optimizer.m)


def test_first_update_after_resume(videos, tmp_path):
    a = make_trainer(videos, steps=2)
    a.run(steps=1)
    save_checkpoint(tmp_path / "c.ckpt", a.checkpoint())
    a.run()
    b = make_trainer(videos, steps=2)
    b.restore(load_checkpoint(tmp_path / "c.ckpt"))
    b.run()
    assert params_equal(a.model.state_dict(), b.model.state_dict())


def test_checkpoint_roundtrip(videos, tmp_path):
    tr = make_trainer(videos)
    tr.run()
    ck = tr.checkpoint()
    save_checkpoint(tmp_path / "m.ckpt", ck)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert params_equal(ck.params, back.params)
    assert params_equal(ck.adam_m, back.adam_m) and params_equal(ck.adam_v, back.adam_v)
    assert (back.step, back.adam_t, back.model, back.train, back.loss) == (ck.step, ck.adam_t, ck.model, ck.train, ck.loss)
    assert back.log == ck.log
    assert back.rng_state == ck.rng_state
    assert params_equal(back.build_model().state_dict(), ck.params)


def test_mismatched_config(videos, tmp_path):
    tr = make_trainer(videos)
    save_checkpoint(tmp_path / "m.ckpt", tr.checkpoint())
    other = Trainer(ModelConfig(queries=4, dim=16, heads=2, layers=1, encoder_channels=(4, 8)), TrainConfig(), LossConfig(), videos)
    with pytest.raises(CheckpointError):
        other.restore(load_checkpoint(tmp_path / "m.ckpt"))


def test_checkpoint_version(videos, tmp_path):
    tr = make_trainer(videos)
    save_checkpoint(tmp_path / "m.ckpt", tr.checkpoint())
    tensors, meta = load_tensors(tmp_path / "m.ckpt")
    meta["format_version"] = 99
    save_tensors(tmp_path / "m.ckpt", tensors, meta)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt")


def test_non_finite_loss_aborts(videos):
    tr = make_trainer(videos)
    tr.model.query_embed.data[0, 0] = np.nan
    with pytest.raises(NumericError):
        train_step(tr.model, tr.sample_batch(), tr.optimizer, tr.loss_cfg)


def test_step_decay(videos):
    tr = make_trainer(videos, lr=1.0, lr_decay_step=2, lr_decay_gamma=0.5)
    lrs = []
    for _ in range(5):
        lrs.append(tr.current_lr())
        tr.step += 1
    assert lrs == [1.0, 1.0, 0.5, 0.5, 0.25]


@pytest.mark.parametrize("batch", [1, 3, 4])
def test_each_epoch_visits_every_video_once(videos, batch):
    tr = make_trainer(videos, batch=batch, seed=5)
    order = []
    for _ in range(12):
        order.extend(tr.batch_indices().tolist())
        tr.step += 1
    epochs = [order[i : i + len(videos)] for i in range(0, len(order) - len(videos) + 1, len(videos))]
    assert all(sorted(e) == list(range(len(videos))) for e in epochs)
    assert len({tuple(e) for e in epochs}) > 1


@pytest.mark.parametrize("bad", [dict(steps=-1), dict(batch=0), dict(encoder_lr_mult=0.0), dict(encoder_lr_mult=1.5), dict(lr=-1.0)])
def test_invalid_train_config(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_empty_dataset():
    with pytest.raises(ValueError):
        Trainer(MODEL, TrainConfig(), LossConfig(), [])


def test_adam_matches_reference_formula():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    m = v = np.zeros(2)
    x = p.data.copy()
    for t, g in enumerate([np.array([0.5, -1.0]), np.array([0.2, 0.3])], start=1):
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=0, atol=1e-15)
