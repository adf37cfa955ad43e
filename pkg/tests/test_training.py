import json

import numpy as np
import pytest

from oodforge.data import (
    FIG2_MIXTURE,
    FIG5_MIXTURE,
    make_preset,
    sample_mixture,
)
from oodforge.losses import confidence_loss
from oodforge.nets import MlpSpec, init_params
from oodforge.training import (
    BETA_GRID,
    Adam,
    NumericalError,
    TrainConfig,
    adam_step,
    beta_sweep,
    train_classifier,
    train_gan,
    train_joint,
)
import oodforge.training as training


@pytest.fixture(scope="module")
def toy():
    ind = sample_mixture(FIG5_MIXTURE, 200, 1)
    ood = make_preset("fig5-ood-near", 40, 2)
    return ind, ood


def test_config_validation_and_schedule():
    with pytest.raises(ValueError):
        TrainConfig(adam=(1.0, 0.999, 1e-8))
    with pytest.raises(ValueError):
        TrainConfig(beta=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(loss_kind="hinge")
    cfg = TrainConfig.appendix_a(lr=0.001)
    assert cfg.epochs == 100 and cfg.lr_at(59) == 0.001
    assert cfg.lr_at(60) == pytest.approx(0.0001, abs=1e-18)
    assert TrainConfig().lr_at(99) == 0.002
    assert TrainConfig(beta=0.5).generator_beta == 0.5
    assert TrainConfig(beta=0.5, beta_generator=2.0).generator_beta == 2.0
    assert BETA_GRID[0] == 0.0 and BETA_GRID[-1] == 2.0 and len(BETA_GRID) == 21


def test_default_config_matches_toy_scale():
    cfg = TrainConfig()
    assert (cfg.beta, cfg.batch_size, cfg.lr, cfg.epochs) == (1.0, 400, 0.002, 100)
    assert cfg.adam == (0.9, 0.999, 1e-8)


def test_adam_zero_gradient_is_fixed_point():
    p = init_params(MlpSpec((3, 4, 2)), 0)
    state = Adam()
    q = p
    for _ in range(3):
        q = adam_step(state, q, {k: np.zeros_like(v) for k, v in q.named().items()}, 0.01)
    assert q.equals(p)


def test_adam_first_step_closed_form():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -4.0, 1e-3])}
    out = Adam().step(p, g, 0.01)
    # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    expected = p["w"] - 0.01 * g["w"] / (np.abs(g["w"]) + 1e-8)
    np.testing.assert_allclose(out["w"], expected, rtol=1e-14, atol=0)
    assert np.all(np.abs(out["w"] - p["w"]) <= 0.01)
    assert np.all(np.abs(out["w"] - p["w"]) > 0.01 * (1 - 1e-4))
    with pytest.raises(ValueError):
        Adam().step(p, {"w": np.zeros(2)}, 0.01)


def test_xent_separable_smoke():
    ind = sample_mixture(FIG5_MIXTURE, 200, 0)
    rep = train_classifier(TrainConfig(epochs=50, batch_size=50, lr=0.01), ind, hidden=16)
    assert len(rep.history["classifier"]) == 50
    assert rep.history["classifier"][-1]["ce"] < 0.05


def test_confidence_beta_zero_equals_xent(toy):
    ind, ood = toy
    a = train_classifier(TrainConfig(epochs=3, batch_size=64, loss_kind="xent"), ind, hidden=8)
    b = train_classifier(TrainConfig(epochs=3, batch_size=64, loss_kind="confidence", beta=0.0),
                         ind, ood, hidden=8)
    assert a.params["classifier"].equals(b.params["classifier"])


def test_missing_ood_data_is_an_error(toy):
    ind, _ = toy
    for kind in ("confidence", "kplus1"):
        with pytest.raises(ValueError, match="requires out-of-distribution"):
            train_classifier(TrainConfig(epochs=1, loss_kind=kind), ind, hidden=4)


def test_epoch_loss_is_batch_mean(toy):
    ind, ood = toy
    # one full batch per epoch and one full OOD batch: the record is the loss at the start
    cfg = TrainConfig(epochs=1, batch_size=len(ind), loss_kind="confidence", beta=0.7)
    rep = train_classifier(cfg, ind, ood, hidden=8)
    theta0 = init_params(rep.params["classifier"].spec, training._seed_for(0, "clf_init"))
    lv = confidence_loss(theta0, ind.inputs, ind.labels, ood.inputs, 0.7)
    rec = rep.history["classifier"][0]
    assert rec["value"] == pytest.approx(lv.value, abs=1e-9)
    assert rec["ce"] == pytest.approx(lv.terms["ce"], abs=1e-9)
    assert rec["kl"] == pytest.approx(lv.terms["kl"], abs=1e-9)


def test_training_is_deterministic(toy):
    ind, ood = toy
    cfg = TrainConfig(epochs=2, batch_size=64, loss_kind="confidence", seed=5)
    a = train_classifier(cfg, ind, ood, hidden=8)
    b = train_classifier(cfg, ind, ood, hidden=8)
    assert a.to_json() == b.to_json()
    assert a.params["classifier"].equals(b.params["classifier"])
    c = train_classifier(TrainConfig(epochs=2, batch_size=64, loss_kind="confidence", seed=6),
                         ind, ood, hidden=8)
    assert not c.params["classifier"].equals(a.params["classifier"])
    payload = json.loads(a.to_json())
    assert payload["epochs"] == 2 and "wall_clock" not in payload


def test_kplus1_training_width(toy):
    ind, ood = toy
    rep = train_classifier(TrainConfig(epochs=2, batch_size=64, loss_kind="kplus1"), ind, ood, hidden=8)
    assert rep.params["classifier"].spec.output_dim == 3
    assert set(rep.history["classifier"][0]) == {"value", "ce_in", "ce_out"}


def test_nonfinite_loss_aborts():
    ind = sample_mixture(FIG5_MIXTURE, 20, 0)
    with pytest.raises(NumericalError, match="non-finite"), np.errstate(all="ignore"):
        train_classifier(TrainConfig(epochs=5, batch_size=10, lr=1e307), ind, hidden=4)


# -- alternating training ---------------------------------------------------

def _joint(cfg, ind, **kw):
    from oodforge.nets import LatentPrior, toy_classifier_spec, toy_discriminator_spec, toy_generator_spec

    return train_joint(cfg, ind, toy_classifier_spec(2, 8), toy_generator_spec(4, 8),
                       toy_discriminator_spec(2, 8), LatentPrior(4), **kw)


def test_joint_beta_zero_classifier_matches_xent(toy):
    ind, _ = toy
    cfg = TrainConfig(epochs=2, batch_size=64, beta=0.0, loss_kind="joint")
    joint = _joint(cfg, ind)
    xent = train_classifier(TrainConfig(epochs=2, batch_size=64), ind, hidden=8)
    assert joint.params["classifier"].equals(xent.params["classifier"])


def test_joint_phases_touch_only_their_model(toy, monkeypatch):
    ind, _ = toy
    seen = []
    original = Adam.step

    def spy(self, params, grads, lr, sign=1.0):
        seen.append((sign, sorted({k.split(".")[0] for k in params} | {k.split(".")[0] for k in grads})))
        return original(self, params, grads, lr, sign)

    monkeypatch.setattr(Adam, "step", spy)
    _joint(TrainConfig(epochs=1, batch_size=100, loss_kind="joint"), ind)
    # per iteration: D ascends, then G, then C
    assert seen == [(-1.0, ["D"]), (1.0, ["G"]), (1.0, ["C"])] * 2


def test_joint_frozen_classifier_and_report(toy):
    ind, _ = toy
    init = init_params(MlpSpec((2, 8, 8, 2)), 3)
    rep = _joint(TrainConfig(epochs=2, batch_size=100, loss_kind="joint"), ind,
                 init_classifier=init, update_classifier=False)
    assert rep.params["classifier"].equals(init)
    assert set(rep.history) == {"discriminator", "generator", "classifier"}
    assert all(len(v) == 2 for v in rep.history.values())
    assert "pt" not in rep.history["generator"][0]
    rep = _joint(TrainConfig(epochs=1, batch_size=100, loss_kind="joint", pt_weight=0.3), ind)
    assert "pt" in rep.history["generator"][0]
    with pytest.raises(ValueError):
        train_joint(TrainConfig(loss_kind="xent"), ind)


def test_joint_reruns_are_identical(toy):
    ind, _ = toy
    cfg = TrainConfig(epochs=1, batch_size=100, loss_kind="joint", seed=3)
    a, b = _joint(cfg, ind), _joint(cfg, ind)
    assert a.to_json() == b.to_json()
    assert all(a.params[r].equals(b.params[r]) for r in a.params)


def test_joint_kl_on_generated_samples_decreases():
    ind = sample_mixture(FIG2_MIXTURE, 400, 0)
    # start from a confident classifier, as in the toy protocol
    pre = train_classifier(TrainConfig(epochs=20, batch_size=100, lr=0.01), ind, hidden=8)
    cfg = TrainConfig(epochs=30, batch_size=100, loss_kind="joint", adam=(0.5, 0.999, 1e-8))
    rep = _joint(cfg, ind, init_classifier=pre.params["classifier"])
    kl = [row["kl"] for row in rep.history["generator"]]
    assert kl[-1] < kl[0]


def test_objective_decreases_end_over_start(toy):
    ind, ood = toy
    rep = train_classifier(TrainConfig(epochs=20, batch_size=50, loss_kind="confidence"), ind, ood, hidden=16)
    hist = [row["value"] for row in rep.history["classifier"]]
    assert hist[-1] < hist[0]


def test_train_gan_has_two_phases(toy):
    ind, _ = toy
    from oodforge.nets import LatentPrior, toy_discriminator_spec, toy_generator_spec

    rep = train_gan(TrainConfig(epochs=1, batch_size=100), ind, toy_generator_spec(3, 8),
                    toy_discriminator_spec(2, 8), LatentPrior(3))
    assert set(rep.params) == {"generator", "discriminator"}
    assert set(rep.history) == {"generator", "discriminator"}


# -- beta sweep -------------------------------------------------------------

@pytest.fixture(scope="module")
def sweep_data():
    return (sample_mixture(FIG5_MIXTURE, 300, 11), make_preset("fig5-ood-near", 100, 12),
            sample_mixture(FIG5_MIXTURE, 200, 13), make_preset("fig5-annulus", 200, 14))


def test_sweep_singleton_and_duplicates(sweep_data):
    cfg = TrainConfig(epochs=2, batch_size=100)
    one = beta_sweep([0.4], cfg, *sweep_data, hidden=8)
    assert one.best_beta == 0.4 and len(one.table) == 1
    dup = beta_sweep([0.4, 0.4, 1.0], cfg, *sweep_data, hidden=8)
    assert dup.table[0][1] == dup.table[1][1]
    assert len(dup.table) == 3
    with pytest.raises(ValueError):
        beta_sweep([], cfg, *sweep_data)


def test_sweep_prefers_ood_aware_model(sweep_data):
    cfg = TrainConfig(epochs=40, batch_size=64, lr=0.005)
    res = beta_sweep([0.0, 1.0], cfg, *sweep_data, hidden=64)
    assert res.best_beta == 1.0
    assert json.loads(res.to_json())["best_beta"] == 1.0


def test_sweep_threads_give_same_table(sweep_data, monkeypatch):
    cfg = TrainConfig(epochs=1, batch_size=100)
    serial = beta_sweep([0.0, 0.5], cfg, *sweep_data, hidden=8)
    monkeypatch.setenv("OODFORGE_THREADS", "2")
    threaded = beta_sweep([0.0, 0.5], cfg, *sweep_data, hidden=8)
    assert serial.table == threaded.table
