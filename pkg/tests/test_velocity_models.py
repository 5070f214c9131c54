"""Velocity predictors: learned MLP head, Gaussian oracle, checkpoints.

The Gaussian oracle formula is the reference the whole sampler stack leans
on, so it gets a Monte Carlo conditional-expectation validation here before
anything else is allowed to trust it.
"""

import numpy as np
import pytest

from flowsync.errors import ConfigError, DataIOError, ShapeError
from flowsync.facegen import AudioTrack
from flowsync.numerics import Grid2D, MlpParams, RngStream, mlp_forward
from flowsync.velocity_models import (
    NULL_TOKEN_INIT,
    TAU_EMBED_DIM,
    ConditionBundle,
    GaussianOracleModel,
    LearnedVelocityModel,
    checkpoint_n_params,
    init_velocity_model,
    load_checkpoint,
    oracle_velocity,
    predict_velocity,
    save_checkpoint,
    tau_embedding,
)

from conftest import random_grid


def tiny_model(seed=0, h=4, w=4, hidden=(16,), audio_dim=1):
    return init_velocity_model(h, w, hidden, RngStream(seed, 0), audio_dim)


def bundle(frame, audio, tau):
    return ConditionBundle(cond_frames=(frame,), audio=audio, tau=tau)


class TestTauEmbedding:
    def test_layout_and_values(self):
        emb = tau_embedding(0.25)
        freqs = np.pi * np.array([1.0, 2.0, 4.0, 8.0])
        assert emb.shape == (TAU_EMBED_DIM,)
        assert np.allclose(emb[0::2], np.sin(freqs * 0.25))
        assert np.allclose(emb[1::2], np.cos(freqs * 0.25))

    def test_endpoints_distinct(self):
        assert not np.allclose(tau_embedding(0.0), tau_embedding(1.0))

    def test_dim_must_be_even(self):
        with pytest.raises(ShapeError):
            tau_embedding(0.5, dim=7)


class TestConditionBundle:
    def test_accepts_single_frame_audio_track(self):
        frame = random_grid(4, 4)
        track = AudioTrack(features=np.array([[0.3]]), fps=25.0)
        b = bundle(frame, track, 0.5)
        assert np.array_equal(b.audio, np.array([0.3]))

    def test_rejects_multi_frame_audio_track(self):
        frame = random_grid(4, 4)
        track = AudioTrack(features=np.array([[0.3], [0.4]]), fps=25.0)
        with pytest.raises(ShapeError):
            bundle(frame, track, 0.5)

    def test_requires_a_frame(self):
        with pytest.raises(ShapeError):
            ConditionBundle(cond_frames=(), audio=None, tau=0.5)

    def test_multi_frame_cond_averages(self):
        f1, f2 = random_grid(3, 3, seed=1), random_grid(3, 3, seed=2)
        b = ConditionBundle(cond_frames=(f1, f2), audio=None, tau=0.1)
        assert np.allclose(b.cond_vector(), (f1.values + f2.values) / 2)


class TestLearnedModel:
    def test_zero_weights_give_zero_velocity(self):
        model = tiny_model()
        x = random_grid(4, 4, seed=5)
        v = predict_velocity(model, x, bundle(random_grid(4, 4, seed=6), np.array([0.4]), 0.3))
        assert np.all(v.values == 0.0)  # fresh init zeroes the output layer

    def test_absent_audio_equals_null_token_substitution(self):
        model = tiny_model(seed=3)
        # make the net nontrivial
        model.mlp.weights[-1][:] = RngStream(8, 0).normal(
            model.mlp.weights[-1].size).reshape(model.mlp.weights[-1].shape)
        x = random_grid(4, 4, seed=9)
        cond_frame = random_grid(4, 4, seed=10)
        v_none = model.velocity(x, bundle(cond_frame, None, 0.7))
        v_token = model.velocity(x, bundle(cond_frame, model.null_audio_token.copy(), 0.7))
        assert np.array_equal(v_none.values, v_token.values)

    def test_forward_matches_straight_line_recomputation(self):
        model = tiny_model(seed=4)
        model.mlp.weights[-1][:] = 0.01
        x = random_grid(4, 4, seed=11)
        cond_frame = random_grid(4, 4, seed=12)
        audio = np.array([0.6])
        tau = 0.42
        v = model.velocity(x, bundle(cond_frame, audio, tau))
        vec = np.concatenate([x.values, cond_frame.values, audio, tau_embedding(tau)])
        expected = vec
        for i, (w, b) in enumerate(zip(model.mlp.weights, model.mlp.biases)):
            expected = w @ expected + b
            if i != len(model.mlp.weights) - 1:
                expected = np.tanh(expected)
        assert np.allclose(v.values, expected, atol=1e-12)

    def test_velocity_pair_matches_separate_calls(self):
        model = tiny_model(seed=5)
        model.mlp.weights[-1][:] = RngStream(13, 0).normal(
            model.mlp.weights[-1].size).reshape(model.mlp.weights[-1].shape)
        x = random_grid(4, 4, seed=14)
        src = random_grid(4, 4, seed=15)
        cond = bundle(src, np.array([0.2]), 0.5)
        uncond = bundle(src, None, 0.5)
        v_c, v_u = model.velocity_pair(x, cond, uncond)
        rows = np.stack([
            model.input_vector(x.values, src.values, cond.audio, 0.5),
            model.input_vector(x.values, src.values, None, 0.5),
        ])
        out = mlp_forward(model.mlp, rows)
        assert np.array_equal(v_c.values, out[0])
        assert np.array_equal(v_u.values, out[1])

    def test_frame_shape_is_checked(self):
        model = tiny_model()
        with pytest.raises(ShapeError):
            model.velocity(random_grid(5, 5), bundle(random_grid(5, 5), None, 0.5))

    def test_audio_dim_is_checked(self):
        model = tiny_model()
        with pytest.raises(ShapeError):
            model.velocity(random_grid(4, 4),
                           bundle(random_grid(4, 4), np.array([0.1, 0.2]), 0.5))

    def test_layout_mismatch_rejected_at_construction(self):
        mlp = MlpParams((10, 4), [np.zeros((4, 10))], [np.zeros(4)])
        with pytest.raises(ShapeError):
            LearnedVelocityModel(mlp, np.zeros(1), 2, 2, 1)

    def test_fresh_null_token_value(self):
        model = tiny_model()
        assert np.all(model.null_audio_token == NULL_TOKEN_INIT)


class TestGaussianOracle:
    def test_symbolic_reduction_mu_zero_sigma_one(self):
        model = GaussianOracleModel(mu=np.zeros(4), sigma2=1.0)
        x = Grid2D(2, 2, np.array([0.5, -1.0, 2.0, 0.0]))
        for tau in (0.0, 0.3, 0.8, 1.0):
            a, b = 1 - tau, tau
            want = ((b - a) / (a * a + b * b)) * x.values
            got = oracle_velocity(model, x, tau)
            assert np.allclose(got.values, want, atol=1e-12)

    def test_point_mass_limit_recovers_conditional_target(self):
        # sigma2 -> 0: velocity at x = (1-tau)*mu tends to -mu
        mu = np.full(4, 0.3)
        model = GaussianOracleModel(mu=mu, sigma2=1e-12)
        tau = 0.6
        x = Grid2D(2, 2, (1 - tau) * mu)
        v = oracle_velocity(model, x, tau)
        assert np.allclose(v.values, -mu, atol=1e-9)

    def test_tau_one_stays_finite(self):
        model = GaussianOracleModel(mu=np.zeros(4), sigma2=25.0)
        v = oracle_velocity(model, Grid2D(2, 2, np.ones(4)), 1.0)
        assert np.all(np.isfinite(v.values))
        assert np.allclose(v.values, 1.0)  # (b - 0)/b^2 * x with b=1

    def test_sigma2_must_be_positive(self):
        with pytest.raises(ConfigError):
            GaussianOracleModel(mu=np.zeros(2), sigma2=0.0)

    def test_branch_pair_is_identical(self):
        model = GaussianOracleModel(mu=np.zeros(4), sigma2=0.5)
        x = random_grid(2, 2, seed=3)
        c = bundle(random_grid(2, 2), np.array([0.5]), 0.4)
        u = bundle(random_grid(2, 2), None, 0.4)
        v_c, v_u = model.velocity_pair(x, c, u)
        assert v_c is v_u

    def test_monte_carlo_binned_regression(self):
        """Validate E[eps - x_data | x_tau] against 10^5 simulated pairs.

        Scalar case, tau = 0.5. Bin x_tau, compare the empirical mean of
        (eps - x_data) per bin with the formula at the bin center; every
        deviation must sit inside 3 standard errors of its bin.
        """
        mu_val, sigma2, tau = 0.3, 0.04, 0.5
        n = 10**5
        rng = RngStream(2024, 0)
        x_data = mu_val + np.sqrt(sigma2) * rng.normal(n)
        eps = rng.normal(n)
        x_tau = (1 - tau) * x_data + tau * eps
        target = eps - x_data

        model = GaussianOracleModel(mu=np.array([mu_val]), sigma2=sigma2)
        edges = np.quantile(x_tau, np.linspace(0.02, 0.98, 25))
        checked = 0
        for lo, hi in zip(edges[:-1], edges[1:]):
            mask = (x_tau >= lo) & (x_tau < hi)
            if mask.sum() < 500:
                continue
            emp_mean = target[mask].mean()
            se = target[mask].std(ddof=1) / np.sqrt(mask.sum())
            center = x_tau[mask].mean()
            pred = oracle_velocity(model, Grid2D(1, 1, np.array([center])), tau).values[0]
            assert abs(emp_mean - pred) < 3 * se, (
                f"bin [{lo:.3f},{hi:.3f}): |{emp_mean:.4f} - {pred:.4f}| >= 3*{se:.4f}"
            )
            checked += 1
        assert checked >= 20

    def test_shape_mismatch(self):
        model = GaussianOracleModel(mu=np.zeros(3), sigma2=1.0)
        with pytest.raises(ShapeError):
            oracle_velocity(model, Grid2D(2, 2, np.zeros(4)), 0.5)


class TestCheckpoint:
    def test_roundtrip_is_value_exact_at_32_bit(self, tmp_path):
        model = tiny_model(seed=7, hidden=(12, 9))
        for w in model.mlp.weights:
            w[:] = RngStream(70, 0).normal(w.size).reshape(w.shape)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, path)
        back = load_checkpoint(path)
        for a, b in zip(model.mlp.weights, back.mlp.weights):
            assert np.array_equal(a.astype(np.float32), b.astype(np.float32))
        save_checkpoint(back, tmp_path / "m2.ckpt")
        assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()

    def test_header_contents(self, tmp_path):
        model = tiny_model(hidden=(6,))
        save_checkpoint(model, tmp_path / "m.ckpt")
        header = (tmp_path / "m.ckpt").read_bytes().split(b"\n", 1)[0].decode().split()
        assert header[0] == "FSYNC1"
        assert int(header[1]) == checkpoint_n_params(model)
        assert header[2] == ",".join(str(s) for s in model.mlp.layer_sizes)
        assert header[3:] == ["1", "4", "4"]

    def test_loaded_model_predicts_identically_at_f32(self, tmp_path):
        model = tiny_model(seed=8)
        model.mlp.weights[-1][:] = np.float32(
            RngStream(81, 0).normal(model.mlp.weights[-1].size)
        ).reshape(model.mlp.weights[-1].shape)
        # params already representable in f32 => bitwise-equal predictions
        for w in model.mlp.weights:
            w[:] = w.astype(np.float32).astype(np.float64)
        save_checkpoint(model, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        x = random_grid(4, 4, seed=20)
        b = bundle(random_grid(4, 4, seed=21), np.array([0.3]), 0.6)
        assert np.array_equal(model.velocity(x, b).values, back.velocity(x, b).values)

    def test_wrong_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOTME 1 1,1 1 1 1\n" + b"\x00" * 4)
        with pytest.raises(DataIOError):
            load_checkpoint(p)

    def test_truncated_payload_rejected(self, tmp_path):
        model = tiny_model()
        p = tmp_path / "m.ckpt"
        save_checkpoint(model, p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(DataIOError):
            load_checkpoint(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataIOError):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_param_count_includes_token(self):
        model = tiny_model(hidden=(5,), audio_dim=3)
        assert checkpoint_n_params(model) == model.mlp.n_params + 3
