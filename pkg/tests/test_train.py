import math

import numpy as np
import pytest

from echoscape.model import EchoPTConfig, build_model
from echoscape.train import Adam, OptimSettings, TrainingDiverged, train

from test_model import TINY


def _data(n, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((n, 3, 16, 8)).astype(np.float32)
    v = rng.uniform(-0.3, 0.3, (n, 8))
    # learnable target: the last frame, slightly rescaled
    y = 0.8 * x[:, -1]
    return x, v, y


def test_optimizer_defaults_from_table():
    s = OptimSettings()
    assert (s.beta1, s.beta2, s.epsilon, s.learn_rate) == (0.9, 0.999, 1e-8, 5e-5)
    assert (s.batch_size, s.l2, s.shuffle, s.output_network) == (64, 1e-4, "every-epoch",
                                                                  "best-validation-loss")
    d = s.to_dict()
    assert d["Optimizer"] == "adam" and d["InitialLearnRate"] == 5e-5
    assert OptimSettings.from_dict(d) == s


def test_optimizer_settings_rejected():
    with pytest.raises(ValueError):
        OptimSettings.from_dict({"Optimizer": "sgdm"})
    with pytest.raises(ValueError):
        OptimSettings.from_dict({"LearnRate": 1})
    with pytest.raises(ValueError):
        OptimSettings(shuffle="sometimes")


def test_loss_decreases_in_ten_epochs():
    x, v, y = _data(64)
    res = train((x, v, y), OptimSettings(learn_rate=1e-3, batch_size=16, max_epochs=10),
                np.random.default_rng(0), cfg=EchoPTConfig(**TINY))
    losses = res.train_losses
    assert len(res.history) == 11
    assert losses[-1] < losses[0]


def test_overfit_four_samples():
    # two-channel convs cannot carry an image through the ReLUs; use eight
    x, v, y = _data(4, seed=1)
    cfg = EchoPTConfig(**{**TINY, "conv_channels": (8, 8, 8, 8, 8)})
    res = train((x, v, y), OptimSettings(learn_rate=3e-3, batch_size=4, max_epochs=500, l2=0.0,
                                         output_network="last-iteration"),
                np.random.default_rng(0), cfg=cfg)
    assert res.train_losses[-1] < 0.01 * res.train_losses[0]


def test_zero_learning_rate_only_moves_bn_stats():
    cfg = EchoPTConfig(**TINY)
    params = build_model(cfg, np.random.default_rng(0))
    before = {k: t.data.copy() for k, t in params.tensors.items()}
    bn_before = params.bn["bn_in"].running_mean.copy()
    x, v, y = _data(16)
    train((x, v, y), OptimSettings(learn_rate=0.0, batch_size=8, max_epochs=2), np.random.default_rng(0),
          params=params)
    for k, t in params.tensors.items():
        assert np.array_equal(t.data, before[k]), k
    assert not np.array_equal(params.bn["bn_in"].running_mean, bn_before)


def test_best_validation_retained():
    x, v, y = _data(32)
    xv, vv, yv = _data(16, seed=9)
    res = train((x, v, y), OptimSettings(learn_rate=1e-3, batch_size=8, max_epochs=4),
                np.random.default_rng(0), cfg=EchoPTConfig(**TINY), val_set=(xv, vv, yv))
    vals = [h["val_loss"] for h in res.history]
    assert res.best_epoch == int(np.argmin(vals))
    from echoscape.train import evaluate_loss
    assert evaluate_loss(res.params, xv, vv, yv) == pytest.approx(min(vals), rel=1e-6)


def test_divergence_reports_epoch():
    x, v, y = _data(8)
    y = y.copy()
    y[0, 0, 0] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        train((x, v, y), OptimSettings(learn_rate=1e-3, batch_size=8, max_epochs=3),
              np.random.default_rng(0), cfg=EchoPTConfig(**TINY))
    assert info.value.epoch == 1


def test_training_deterministic():
    x, v, y = _data(24)
    runs = [train((x, v, y), OptimSettings(learn_rate=1e-3, batch_size=8, max_epochs=3),
                  np.random.default_rng(7), cfg=EchoPTConfig(**TINY)).train_losses for _ in range(2)]
    assert runs[0] == runs[1]


def test_empty_training_set_rejected():
    x, v, y = _data(0)
    with pytest.raises(ValueError):
        train((x, v, y), OptimSettings(), np.random.default_rng(0), cfg=EchoPTConfig(**TINY))


def test_l2_skips_biases_and_norms():
    params = build_model(EchoPTConfig(**TINY), np.random.default_rng(0))
    opt = Adam(params, OptimSettings(l2=1.0, learn_rate=1e-2))
    for t in params.tensors.values():
        t.data[...] = 1.0
    params.zero_grad()
    opt.step()
    assert params.tensors["embed.w"].data.max() < 1.0     # decayed
    assert params.tensors["embed.b"].data.max() == 1.0    # untouched (zero gradient)
    assert params.tensors["block0.ln.gamma"].data.max() == 1.0
    assert math.isfinite(float(params.tensors["fc.w"].data.sum()))
