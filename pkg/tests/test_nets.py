import numpy as np
import pytest

from pmrf import autodiff as ad
from pmrf.autodiff import Tensor
from pmrf.nets import (
    ConfigError,
    UNetConfig,
    flow_field_forward,
    init_params,
    parameter_count,
    posterior_mean_forward,
    time_embedding,
    unet_forward,
)

SMALL = UNetConfig(base_width=8, depth=2, blocks_per_level=1, time_embed_dim=32)
SMALL_T = UNetConfig(base_width=8, depth=2, blocks_per_level=1, time_conditioned=True, time_embed_dim=32)


def _rand_patch(rng, side, n=1):
    return rng.standard_normal((n, 1, side, side, side)).astype(np.float32)


class TestPosteriorMean:
    def test_zero_head_gives_identity(self):
        params = init_params(SMALL, seed=0)
        params["head.w"].data[:] = 0.0
        params["head.b"].data[:] = 0.0
        x = _rand_patch(np.random.default_rng(0), 8)
        out = posterior_mean_forward(Tensor(x), params)
        assert np.array_equal(out.data, x)

    def test_deterministic_forward(self):
        params = init_params(SMALL, seed=1)
        x = _rand_patch(np.random.default_rng(1), 8)
        a = posterior_mean_forward(Tensor(x), params).data
        b = posterior_mean_forward(Tensor(x), params).data
        assert np.array_equal(a, b)

    def test_rejects_time_conditioned_params(self):
        params = init_params(SMALL_T, seed=0)
        with pytest.raises(ConfigError):
            posterior_mean_forward(Tensor(np.zeros((1, 1, 8, 8, 8), np.float32)), params)

    def test_indivisible_patch_rejected(self):
        params = init_params(SMALL, seed=0)
        with pytest.raises(ConfigError, match="divisible"):
            posterior_mean_forward(Tensor(np.zeros((1, 1, 6, 6, 6), np.float32)), params)

    def test_intensity_scale_robustness(self):
        params = init_params(SMALL, seed=2)
        rng = np.random.default_rng(2)
        for scale in (1e-3, 1e3):
            x = _rand_patch(rng, 8) * scale
            out = posterior_mean_forward(Tensor(x), params)
            assert out.shape == x.shape
            assert np.all(np.isfinite(out.data))


class TestFlowField:
    @pytest.mark.parametrize("side", [8, 16])
    def test_output_shape_matches_input(self, side):
        params = init_params(SMALL_T, seed=0)
        z = _rand_patch(np.random.default_rng(0), side)
        out = flow_field_forward(Tensor(z), 0.3, params)
        assert out.shape == z.shape

    def test_time_embedding_reaches_computation(self):
        params = init_params(SMALL_T, seed=3)
        z = _rand_patch(np.random.default_rng(3), 8)
        out0 = flow_field_forward(Tensor(z), 0.0, params).data
        out1 = flow_field_forward(Tensor(z), 1.0, params).data
        assert np.abs(out0 - out1).max() > 0.0

    def test_zero_head_gives_zero_field(self):
        params = init_params(SMALL_T, seed=0)
        params["head.w"].data[:] = 0.0
        params["head.b"].data[:] = 0.0
        z = _rand_patch(np.random.default_rng(0), 8)
        out = flow_field_forward(Tensor(z), 0.5, params)
        assert np.all(out.data == 0.0)

    def test_t_out_of_range_rejected(self):
        params = init_params(SMALL_T, seed=0)
        z = Tensor(np.zeros((1, 1, 8, 8, 8), np.float32))
        for bad in (-0.1, 1.1):
            with pytest.raises(ConfigError, match="\\[0, 1\\]"):
                flow_field_forward(z, bad, params)

    def test_per_sample_time_vector(self):
        params = init_params(SMALL_T, seed=4)
        z = _rand_patch(np.random.default_rng(4), 8, n=3)
        out = flow_field_forward(Tensor(z), np.array([0.0, 0.5, 1.0]), params)
        assert out.shape == z.shape


class TestTimeEmbedding:
    def test_t_zero(self):
        e = time_embedding(0.0, 8)
        assert np.allclose(e[:4], 0.0)
        assert np.allclose(e[4:], 1.0)

    def test_smoothness_bound(self):
        for t in (0.0, 0.25, 0.7, 0.999 - 1e-3):
            d = np.linalg.norm(time_embedding(t + 1e-3, 8) - time_embedding(t, 8))
            assert d < 0.1

    def test_sampled_injectivity(self):
        es = [time_embedding(t, 8) for t in (0.0, 0.5, 1.0)]
        for i in range(3):
            for j in range(i + 1, 3):
                assert not np.allclose(es[i], es[j])

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigError, match="even"):
            time_embedding(0.5, 7)


class TestParams:
    def test_count_is_pure_function_of_config(self):
        a = init_params(SMALL_T, seed=0)
        b = init_params(SMALL_T, seed=123)
        assert a.names() == b.names()
        assert [t.shape for t in a.tensors()] == [t.shape for t in b.tensors()]
        assert a.n_parameters == b.n_parameters == parameter_count(SMALL_T)

    def test_gradient_reaches_every_parameter(self):
        # one backward pass of either loss populates every parameter gradient
        from pmrf.train import stage1_loss, stage2_loss, make_flow_sample

        rng = np.random.default_rng(5)
        pm = init_params(SMALL, seed=5)
        x = _rand_patch(rng, 16)
        y = _rand_patch(rng, 16)
        stage1_loss(Tensor(x), y, pm).backward()
        assert all(t.grad is not None for t in pm.tensors()), "dead branch in stage-1 loss"

        fl = init_params(SMALL_T, seed=5)
        samples = [make_flow_sample(x[0, 0], y[0, 0], 0.1, rng) for _ in range(2)]
        stage2_loss(samples, fl).backward()
        assert all(t.grad is not None for t in fl.tensors()), "dead branch in flow loss"

    def test_copy_is_deep(self):
        p = init_params(SMALL, seed=0)
        q = p.copy()
        q["stem.w"].data[:] = 42.0
        assert not np.array_equal(p["stem.w"].data, q["stem.w"].data)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            UNetConfig(depth=0)
        with pytest.raises(ConfigError):
            UNetConfig(base_width=2)
        with pytest.raises(ConfigError):
            UNetConfig(time_embed_dim=9)

    def test_groups_divide_channels(self):
        cfg = UNetConfig(base_width=12, depth=1, norm_groups=8)
        assert cfg.width(0) % cfg.groups_for(cfg.width(0)) == 0


def test_unet_requires_t_consistency():
    params = init_params(SMALL_T, seed=0)
    with pytest.raises(ConfigError, match="requires t"):
        unet_forward(Tensor(np.zeros((1, 1, 8, 8, 8), np.float32)), params)
    pm = init_params(SMALL, seed=0)
    with pytest.raises(ConfigError, match="not time-conditioned"):
        unet_forward(Tensor(np.zeros((1, 1, 8, 8, 8), np.float32)), pm, t=0.5)
