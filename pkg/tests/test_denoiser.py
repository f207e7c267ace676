import math

import numpy as np
import pytest

from voldiff.denoiser import (AdamState, EmaState, GaussianOracle, TinyUNet,
                              TrainConfig, TrainingDivergedError, UNetDenoiser,
                              adam_step, augment, ema_update, get_weights,
                              load_denoiser, save_loss_history, save_oracle_stub,
                              save_weights, set_weights, train, unet_backward,
                              unet_forward)
from voldiff.param import PredictionKind, make_target
from voldiff.schedule import build_linear_schedule
from voldiff.volume import Volume


@pytest.fixture(scope="module")
def sched():
    return build_linear_schedule(1000, 1e-4, 0.02)


# ---------------------------------------------------------------------------
# Gaussian oracle
# ---------------------------------------------------------------------------

def test_oracle_delta_limit(sched):
    o = GaussianOracle(0.7, 1e-18, sched)
    xt = np.random.default_rng(0).standard_normal(10)
    np.testing.assert_allclose(o.predict(xt, 500), np.full(10, 0.7), atol=1e-12)


def test_oracle_no_noise_limit(sched):
    o = GaussianOracle(0.0, 1.0, sched)
    xt = np.random.default_rng(1).standard_normal(10)
    # ab[0] is nearly 1 under the default schedule
    np.testing.assert_allclose(o.predict(xt, 0), xt, atol=1e-3)


def test_oracle_half_signal_closed_form(sched):
    # m=0, s=1, ab=0.5 gives prediction sqrt(0.5)*xt
    o = GaussianOracle(0.0, 1.0, sched)
    t = int(np.argmin(np.abs(sched.alpha_bar - 0.5)))
    ab = float(sched.alpha_bar[t])
    xt = np.array([1.0, -2.0, 0.5])
    expected = math.sqrt(ab) * xt / (ab + (1 - ab))
    np.testing.assert_allclose(o.predict(xt, t), expected, atol=1e-12)


def test_oracle_matches_quadrature_posterior(sched):
    # direct numerical integration of the 1-D posterior mean
    m, s2 = 0.4, 0.09
    t = 300
    ab = float(sched.alpha_bar[t])
    o = GaussianOracle(m, s2, sched)
    grid = np.linspace(m - 10 * math.sqrt(s2), m + 10 * math.sqrt(s2), 20001)
    for xt in (-0.5, 0.1, 0.9):
        prior = np.exp(-0.5 * (grid - m) ** 2 / s2)
        lik = np.exp(-0.5 * (xt - math.sqrt(ab) * grid) ** 2 / (1 - ab))
        post = prior * lik
        expected = np.trapezoid(grid * post, grid) / np.trapezoid(post, grid)
        got = o.predict(np.array([xt]), t)[0]
        assert got == pytest.approx(expected, abs=1e-8)


@pytest.mark.parametrize("kind", [PredictionKind.VELOCITY, PredictionKind.FLOW])
def test_oracle_kind_conversion_consistent(sched, kind):
    m, s2, t = 0.2, 0.25, 400
    ab = float(sched.alpha_bar[t])
    base = GaussianOracle(m, s2, sched, PredictionKind.SAMPLE)
    conv = GaussianOracle(m, s2, sched, kind)
    xt = np.random.default_rng(4).standard_normal(16)
    x0h = base.predict(xt, t)
    epsh = (xt - math.sqrt(ab) * x0h) / math.sqrt(1 - ab)
    np.testing.assert_allclose(conv.predict(xt, t),
                               make_target(kind, x0h, epsh, ab), atol=1e-12)


def test_oracle_rejects_out_of_range_t(sched):
    o = GaussianOracle(0.0, 1.0, sched)
    with pytest.raises(ValueError):
        o.predict(np.zeros(2), 1000)


# ---------------------------------------------------------------------------
# Tiny U-Net
# ---------------------------------------------------------------------------

def test_unet_zero_weights_zero_output():
    net = TinyUNet((4, 8)).double()
    set_weights(net, np.zeros(net.parameter_count()))
    x = np.random.default_rng(0).standard_normal((16, 16, 16))
    assert np.abs(unet_forward(net, x, 10)).max() == 0.0


@pytest.mark.parametrize("shape", [(16, 16, 16), (16, 32, 16)])
def test_unet_shape_contract(shape):
    net = TinyUNet((4, 8)).double()
    out = unet_forward(net, np.zeros(shape), 3)
    assert out.shape == shape


def test_unet_rejects_indivisible_shape():
    net = TinyUNet((4, 8)).double()
    with pytest.raises(ValueError):
        unet_forward(net, np.zeros((15, 16, 16)), 0)


def _finite_difference_grad(net, x, t, upstream, h=1e-4):
    w = get_weights(net)
    fd = np.zeros_like(w)
    for i in range(w.size):
        wp = w.copy()
        wp[i] += h
        set_weights(net, wp)
        fp = float((unet_forward(net, x, t) * upstream).sum())
        wp[i] -= 2 * h
        set_weights(net, wp)
        fm = float((unet_forward(net, x, t) * upstream).sum())
        fd[i] = (fp - fm) / (2 * h)
    set_weights(net, w)
    return fd


def test_unet_gradient_check_small_config():
    net = TinyUNet((1, 2), time_dim=4).double()
    assert net.parameter_count() <= 500
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 4, 4))
    upstream = rng.standard_normal((4, 4, 4))
    g = unet_backward(net, x, 5, upstream)
    fd = _finite_difference_grad(net, x, 5, upstream)
    rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
    assert rel.max() < 1e-4


def test_unet_backward_zero_upstream():
    net = TinyUNet((2, 2), time_dim=4).double()
    x = np.random.default_rng(1).standard_normal((4, 4, 4))
    g = unet_backward(net, x, 2, np.zeros((4, 4, 4)))
    assert np.abs(g).max() == 0.0


def test_unet_backward_linearity_in_upstream():
    net = TinyUNet((2, 2), time_dim=4).double()
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 4, 4))
    u = rng.standard_normal((4, 4, 4))
    g1 = unet_backward(net, x, 7, u)
    g2 = unet_backward(net, x, 7, 2.0 * u)
    np.testing.assert_allclose(g2, 2.0 * g1, rtol=1e-10, atol=1e-12)


def test_weight_vector_round_trip():
    net = TinyUNet((2, 4)).double()
    w = get_weights(net)
    rng = np.random.default_rng(3)
    w2 = rng.standard_normal(w.size)
    set_weights(net, w2)
    np.testing.assert_allclose(get_weights(net), w2, atol=1e-15)
    with pytest.raises(ValueError):
        set_weights(net, np.zeros(w.size + 1))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_scale_invariant_first_step():
    # |update| = lr * g / (|g| + eps), so within eps-rounding of lr
    for scale in (1e-4, 1.0, 1e6):
        w = np.zeros(4)
        state = AdamState.zeros(4)
        g = np.full(4, scale)
        out = adam_step(w, g, state, lr=0.01)
        np.testing.assert_allclose(np.abs(out), 0.01, rtol=1e-3)


def test_adam_zero_gradient_no_move():
    w = np.array([1.0, -2.0])
    out = adam_step(w, np.zeros(2), AdamState.zeros(2), lr=0.1)
    np.testing.assert_array_equal(out, w)


def test_adam_quadratic_bowl_descends():
    w = np.array([5.0, -3.0])
    state = AdamState.zeros(2)
    losses = []
    for _ in range(500):
        losses.append(float(np.sum(w ** 2)))
        w = adam_step(w, 2.0 * w, state, lr=0.05)
    # monotone decrease after warmup, until the iterate reaches the
    # lr-scale floor where Adam hunts around the minimum
    floor = next(i for i, l in enumerate(losses) if l < 1e-4)
    assert floor > 50
    assert all(b <= a for a, b in zip(losses[10:floor], losses[11:floor]))
    assert losses[-1] < 1e-3 * losses[0]


def test_adam_rejects_nonfinite_gradient():
    with pytest.raises(TrainingDivergedError):
        adam_step(np.zeros(2), np.array([1.0, np.nan]), AdamState.zeros(2), lr=0.1)


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------

def test_ema_constant_fixed_point():
    ema = EmaState(momentum=0.1)
    w = np.array([1.0, 2.0])
    for _ in range(5):
        ema = ema_update(ema, w)
        np.testing.assert_array_equal(ema.shadow, w)


def test_ema_momentum_one_tracks_weights():
    ema = EmaState(momentum=1.0)
    ema = ema_update(ema, np.array([0.0]))
    ema = ema_update(ema, np.array([5.0]))
    assert ema.shadow[0] == 5.0


def test_ema_hand_recurrence():
    ema = EmaState(momentum=0.1)
    ema = ema_update(ema, np.array([0.0]))      # init shadow = 0
    ema = ema_update(ema, np.array([1.0]))
    assert ema.shadow[0] == pytest.approx(0.1)


def test_ema_shadow_within_history_envelope():
    rng = np.random.default_rng(0)
    ema = EmaState(momentum=0.1)
    history = []
    for _ in range(20):
        w = rng.standard_normal(8)
        history.append(w)
        ema = ema_update(ema, w)
    stack = np.stack(history)
    assert np.all(ema.shadow >= stack.min(axis=0) - 1e-12)
    assert np.all(ema.shadow <= stack.max(axis=0) + 1e-12)


def test_ema_dimension_mismatch():
    ema = ema_update(EmaState(), np.zeros(3))
    with pytest.raises(ValueError):
        ema_update(ema, np.zeros(4))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def _ball_volume(n=24, r=6.0):
    grid = np.indices((n, n, n)).astype(float) - (n - 1) / 2
    data = (np.sqrt((grid ** 2).sum(axis=0)) < r).astype(np.float32)
    return Volume(data=data)


def test_augment_identity_transform():
    v = _ball_volume()
    out = augment(v, seed=0, rot_deg=0.0, trans_mm=0.0)
    np.testing.assert_allclose(out.data, v.data, atol=1e-6)


def test_rigid_transform_integer_translation_is_exact_shift():
    from voldiff.denoiser import rigid_transform

    rng = np.random.default_rng(0)
    data = np.zeros((10, 10, 10), dtype=np.float32)
    data[3:7, 3:7, 3:7] = rng.random((4, 4, 4)).astype(np.float32)
    v = Volume(data=data)
    out = rigid_transform(v, (0.0, 0.0, 0.0), (2.0, 0.0, -1.0))
    expected = np.zeros_like(data)
    expected[5:9, 3:7, 2:6] = data[3:7, 3:7, 3:7]
    np.testing.assert_allclose(out.data, expected, atol=1e-6)


def test_augment_preserves_mean_for_interior_phantom():
    v = _ball_volume(n=32, r=7.0)
    base = float(v.data.mean())
    for seed in range(100):
        out = augment(v, seed=seed)
        assert abs(float(out.data.mean()) - base) / base < 0.01


def test_augment_bounded_displacement():
    v = _ball_volume()
    out = augment(v, seed=12)
    # rigid transform of a binary ball keeps values in [0, 1]
    assert out.data.min() >= -1e-6 and out.data.max() <= 1.0 + 1e-6


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _smoke_config(epochs=60, seed=7):
    return TrainConfig(learning_rate=1e-2, batch_size=1, epochs=epochs,
                       rotation_deg=0.0, translation_mm=0.0, seed=seed,
                       widths=(4, 8), time_dim=8)


def test_train_empty_dataset():
    with pytest.raises(ValueError):
        train([], PredictionKind.SAMPLE, _smoke_config())


def test_train_loss_decreases_on_constant_image():
    img = np.full((16, 16, 16), 0.5, dtype=np.float32)
    res = train([img], PredictionKind.SAMPLE, _smoke_config(epochs=60))
    assert not res.diverged
    assert res.loss_history[-1] < 0.5 * res.loss_history[0]
    assert res.ema.shadow is not None
    assert res.last_good_epoch == 60


def test_train_deterministic_same_seed():
    img = np.full((16, 16, 16), 0.5, dtype=np.float32)
    a = train([img], PredictionKind.VELOCITY, _smoke_config(epochs=5))
    b = train([img], PredictionKind.VELOCITY, _smoke_config(epochs=5))
    assert a.loss_history == b.loss_history
    np.testing.assert_array_equal(a.weights, b.weights)


def test_train_divergence_rolls_back_ema():
    img = np.full((16, 16, 16), 0.5, dtype=np.float32)

    def nan_at_epoch_4(epoch, step, xt):
        if epoch == 4:
            xt = xt.copy()
            xt[0, 0, 0, 0] = np.nan
        return xt

    clean = train([img], PredictionKind.SAMPLE, _smoke_config(epochs=3))
    res = train([img], PredictionKind.SAMPLE, _smoke_config(epochs=10),
                batch_hook=nan_at_epoch_4)
    assert res.diverged
    assert res.last_good_epoch == 3
    assert len(res.loss_history) == 4
    assert np.all(np.isfinite(res.weights))
    np.testing.assert_allclose(res.ema.shadow, clean.ema.shadow, atol=1e-12)
    np.testing.assert_allclose(res.weights, clean.weights, atol=1e-12)


def test_train_with_augmentation_runs():
    img = np.full((16, 16, 16), 0.5, dtype=np.float32)
    cfg = TrainConfig(learning_rate=1e-2, batch_size=1, epochs=2,
                      rotation_deg=10.0, translation_mm=5.0, seed=0,
                      widths=(2, 4), time_dim=4)
    res = train([img], PredictionKind.FLOW, cfg)
    assert len(res.loss_history) == 2
    assert not res.diverged


def test_config_rejects_negative_limits():
    with pytest.raises(ValueError):
        TrainConfig(rotation_deg=-1.0)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def test_weight_file_round_trip(tmp_path, sched):
    net = TinyUNet((2, 4)).double()
    w = get_weights(net)
    path = tmp_path / "weights.bin"
    save_weights(path, w, PredictionKind.VELOCITY, (2, 4), sched,
                 epoch=42, ema_momentum=0.1, time_dim=16)
    den = load_denoiser(path)
    assert isinstance(den, UNetDenoiser)
    assert den.kind is PredictionKind.VELOCITY
    # float32 storage round-trips the prediction, not the exact weights
    x = np.random.default_rng(0).standard_normal((8, 8, 8))
    np.testing.assert_allclose(den.predict(x, 3), unet_forward(net, x, 3),
                               atol=1e-5)


def test_oracle_stub_round_trip(tmp_path, sched):
    path = tmp_path / "oracle.bin"
    save_oracle_stub(path, mean=0.3, std=0.05, kind=PredictionKind.SAMPLE,
                     schedule=sched)
    den = load_denoiser(path)
    assert isinstance(den, GaussianOracle)
    assert den.var == pytest.approx(0.0025)
    assert den.schedule.T == 1000


def test_load_rejects_unknown_format(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_text('{"format": "other", "kind": "sample", '
                    '"schedule": {"T": 10, "beta_start": 1e-4, "beta_end": 0.02}}\n')
    with pytest.raises(IOError):
        load_denoiser(path)


def test_loss_history_csv(tmp_path):
    path = tmp_path / "loss.csv"
    save_loss_history(path, [0.5, 0.25, float("nan")], diverged=True)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,mean_loss,diverged"
    assert lines[1].startswith("1,0.5,0")
    assert lines[3].startswith("3,nan,1")
