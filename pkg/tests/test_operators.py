import numpy as np
import pytest

from dope import autodiff as ad
from dope import pk
from dope.data import stack_observations, stream
from dope.operators import (CheckpointMismatchError, ConfigError, DeepONetConfig, FnoConfig, config_hash,
                            darcy_fno_config, deeponet_forward, fno_forward, init_params, load_checkpoint,
                            observed_mse, pk_fno_config, predict, save_checkpoint, spectral_conv,
                            train_solution_operator)
from dope.verify import gradient_suite


class TestConfig:
    def test_too_many_modes(self):
        # [TRIVIAL]
        with pytest.raises(ConfigError):
            FnoConfig(4, 8, 1, 2, (9,), (16,))

    def test_mode_axis_count(self):
        # [TRIVIAL]
        with pytest.raises(ConfigError):
            FnoConfig(3, 8, 1, 2, (3,), (9, 9))

    def test_deeponet_vector_output_rejected(self):
        # [TRIVIAL]
        with pytest.raises(ConfigError):
            DeepONetConfig(4, 128, (3,), out_channels=2)

    def test_hash_stable_and_sensitive(self):
        assert config_hash(pk_fno_config()) == config_hash(pk_fno_config())
        assert config_hash(pk_fno_config()) != config_hash(pk_fno_config(hidden=16))

    def test_parameter_count(self):
        # [DERIVED] lift 4*32+32, 3 x (2*12*32*32 + 32*32+32), proj 32+1
        c = 32
        expected = 4 * c + c + 3 * (2 * 12 * c * c + c * c + c) + c + 1
        assert init_params(pk_fno_config(), 0).n_parameters == expected


class TestForward:
    def test_shapes(self):
        P = init_params(pk_fno_config(), 0)
        x = np.random.default_rng(0).standard_normal((3, 128, 4))
        assert fno_forward(P, x).shape == (3, 128)
        P2 = init_params(darcy_fno_config(), 0)
        assert fno_forward(P2, np.random.default_rng(0).standard_normal((2, 289, 3))).shape == (2, 289)

    def test_wrong_channels(self):
        P = init_params(pk_fno_config(), 0)
        with pytest.raises(ValueError):
            fno_forward(P, np.zeros((1, 128, 3)))

    def test_spectral_conv_identity_weight(self):
        # [DERIVED] identity mixing on every retained mode is a low-pass projection
        t = np.arange(32) / 32
        h = np.stack([np.cos(2 * np.pi * 2 * t), np.sin(2 * np.pi * 5 * t) + np.cos(2 * np.pi * 12 * t)])[None]
        eye = np.broadcast_to(np.eye(2), (6, 2, 2))
        out = np.asarray(spectral_conv(h, eye, np.zeros_like(eye), (6,), (32,)))
        np.testing.assert_allclose(out[0, 0], h[0, 0], atol=1e-12)
        np.testing.assert_allclose(out[0, 1], np.sin(2 * np.pi * 5 * t), atol=1e-12)

    def test_batch_independence(self):
        # [DERIVED] each output row depends only on its own input row
        P = init_params(pk_fno_config(hidden=8, modes=4), 0)
        x = np.random.default_rng(1).standard_normal((4, 128, 4))
        np.testing.assert_allclose(fno_forward(P, x)[2:3], fno_forward(P, x[2:3]), atol=1e-12)

    def test_predict_chunks(self):
        P = init_params(pk_fno_config(hidden=8, modes=4), 0)
        x = np.random.default_rng(2).standard_normal((5, 128, 4))
        np.testing.assert_allclose(predict(P, x, chunk=2), predict(P, x), atol=1e-13)

    def test_deeponet_query_domain(self):
        cfg = DeepONetConfig(4, 128, (3,), 8, 8, 4)
        P = init_params(cfg, 0)
        x = pk.pk_features(pk.sample_pk_inputs(2, stream(0, "q"))[0])
        assert deeponet_forward(P, x, np.array([[0.0], [0.5], [1.0]])).shape == (2, 3)
        with pytest.raises(ValueError):
            deeponet_forward(P, x, np.array([[1.5]]))

    def test_params_read_only(self):
        P = init_params(pk_fno_config(hidden=8, modes=4), 0)
        with pytest.raises(ValueError):
            P.arrays[0][0, 0] = 1.0


class TestGradients:
    def test_every_block(self):
        # [DERIVED] taped gradients agree with central differences for every block
        for check in gradient_suite(seed=3):
            assert check.passed, check.line()

    def test_observed_mse_gradient(self):
        # [DERIVED] observed-MSE gradient agrees with a central difference
        data = stack_observations(pk.generate_pk_dataset(3, 0.5, 0), pk.pk_features)
        pred = np.random.default_rng(0).standard_normal((3, 128))
        _, (g,) = ad.reverse_gradient(lambda p: observed_mse(p, data), [pred])
        # only observed locations receive gradient
        mask = np.zeros_like(pred)
        np.put_along_axis(mask, data.idx, 1.0, axis=1)
        assert np.all(g[mask == 0] == 0)


class TestTraining:
    def test_loss_decreases_and_deterministic(self):
        data = stack_observations(pk.generate_pk_dataset(16, 0.5, 1), pk.pk_features)
        cfg = pk_fno_config(hidden=8, modes=6)
        a = train_solution_operator(data, cfg, epochs=5, seed=4)
        b = train_solution_operator(data, cfg, epochs=5, seed=4)
        assert a.meta["final_loss"] < a.meta["initial_loss"]
        assert a.fingerprint() == b.fingerprint()

    def test_checkpoint_round_trip(self, tmp_path):
        # [TRIVIAL]
        P = init_params(pk_fno_config(hidden=8, modes=4), 5)
        path = tmp_path / "ck.json"
        save_checkpoint(P, path)
        Q = load_checkpoint(path, pk_fno_config(hidden=8, modes=4))
        assert Q.fingerprint() == P.fingerprint()
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(path, pk_fno_config())

    def test_empty_data(self):
        # [TRIVIAL]
        data = stack_observations(pk.generate_pk_dataset(2, 0.5, 1), pk.pk_features).subset(np.array([], int))
        with pytest.raises(ValueError):
            train_solution_operator(data, pk_fno_config(hidden=4, modes=2), epochs=1)
