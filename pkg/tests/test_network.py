"""Network contracts: locality, causality, equivariance, inductivity."""

import numpy as np
import pytest
import scipy.sparse as sp

from pgkrig import autodiff as ad
from pgkrig import graphs as g
from pgkrig import network as nw


def small_config(**overrides):
    defaults = dict(hidden_dim=8, tcn_layers=2, tcn_kernel_size=3, dilation_base=2,
                    gnn_layers=2, readout_hidden=8)
    defaults.update(overrides)
    return nw.ModelConfig(**defaults)


def toy_inputs(rng, n=4, t=8):
    """Random valid series plus matching operators."""
    positions = rng.uniform(0.0, 20.0, size=(n, 2))
    nodes = g.NodeSet(positions)
    geo = g.build_geo_adjacency(nodes, threshold_xi=50.0)
    diffusion = g.build_diffusion_operator(geo)
    wind = rng.normal(0.0, 2.0, size=(t, n, 2))
    advection = g.advection_sequence(nodes, wind, threshold_xi=50.0)
    emissions = rng.uniform(0.0, 3.0, size=(t, n))
    pm25 = rng.uniform(5.0, 30.0, size=(t, n))
    observed = (rng.random((t, n)) < 0.7).astype(float)
    series = nw.make_node_series(wind, emissions, pm25, observed)
    return series, diffusion, advection


class TestNodeSeries:
    def test_flag_must_be_binary(self):
        vals = np.zeros((2, 3, nw.N_CHANNELS))
        vals[0, 0, 4] = 0.5
        with pytest.raises(nw.ModelError):
            nw.NodeSeries(vals)

    def test_pollution_zero_where_unobserved(self):
        vals = np.zeros((2, 3, nw.N_CHANNELS))
        vals[0, 0, 3] = 7.0  # pollution present but flag 0
        with pytest.raises(nw.ModelError):
            nw.NodeSeries(vals)

    def test_builder_masks_pollution(self):
        t, n = 4, 3
        rng = np.random.default_rng(0)
        wind = rng.normal(size=(t, n, 2))
        emissions = rng.random((t, n))
        pm25 = rng.uniform(10, 20, size=(t, n))
        observed = np.zeros((t, n))
        observed[:, 0] = 1.0
        series = nw.make_node_series(wind, emissions, pm25, observed)
        assert series.values.shape == (n, t, nw.N_CHANNELS)
        np.testing.assert_array_equal(series.values[1:, :, 3], 0.0)
        np.testing.assert_array_equal(series.values[0, :, 3], pm25[:, 0])

    def test_builder_shape_mismatch(self):
        with pytest.raises(nw.ModelError):
            nw.make_node_series(np.zeros((4, 3, 2)), np.zeros((4, 2)),
                                np.zeros((4, 3)), np.zeros((4, 3)))


class TestModelConfig:
    def test_receptive_field(self):
        cfg = nw.ModelConfig(tcn_layers=3, tcn_kernel_size=3, dilation_base=2)
        assert cfg.dilations == (1, 2, 4)
        assert cfg.receptive_field == 15

    def test_dimension_validation(self):
        with pytest.raises(nw.ModelError):
            nw.ModelConfig(hidden_dim=0)

    def test_dict_round_trip(self):
        cfg = small_config(two_weight_propagation=True)
        assert nw.ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestEncode:
    def test_identical_nodes_identical_encodings(self):
        rng = np.random.default_rng(1)
        series, _, _ = toy_inputs(rng)
        vals = series.values.copy()
        vals[1] = vals[0]
        model = nw.KrigingModel(small_config(), seed=0)
        h = model.encode(nw.NodeSeries(vals)).data
        np.testing.assert_array_equal(h[0], h[1])

    def test_node_locality_bitwise(self):
        rng = np.random.default_rng(2)
        series, _, _ = toy_inputs(rng)
        model = nw.KrigingModel(small_config(), seed=0)
        base = model.encode(series).data
        vals = series.values.copy()
        vals[2, :, 0] += 5.0  # perturb node 2's wind
        bumped = model.encode(nw.NodeSeries(vals)).data
        np.testing.assert_array_equal(base[0], bumped[0])
        np.testing.assert_array_equal(base[1], bumped[1])
        assert not np.array_equal(base[2], bumped[2])

    def test_temporal_causality(self):
        rng = np.random.default_rng(3)
        series, _, _ = toy_inputs(rng, t=10)
        model = nw.KrigingModel(small_config(), seed=0)
        base = model.encode(series).data
        vals = series.values.copy()
        vals[:, 7:, 2] += 1.0  # perturb emissions from step 7 on
        bumped = model.encode(nw.NodeSeries(vals)).data
        np.testing.assert_array_equal(base[:, :7, :], bumped[:, :7, :])


class TestPropagate:
    def _zero_ops(self, n):
        zero = sp.csr_matrix((n, n))
        return (g.DiffusionOperator(weights=zero),
                g.AdvectionOperator(weights=zero, wind_source=np.zeros((n, 2))))

    def test_zero_operators_give_activated_bias(self):
        model = nw.KrigingModel(small_config(), seed=0)
        model.params["prop.0.bias"].data[:] = np.linspace(-1.0, 1.0, 8)
        diffusion, advection = self._zero_ops(3)
        h = ad.Tensor(np.random.default_rng(4).normal(size=(3, 8)))
        out = model.propagate(h, diffusion, advection, layer=0).data
        expected = np.maximum(np.linspace(-1.0, 1.0, 8), 0.0)
        for row in out:
            np.testing.assert_array_equal(row, expected)

    def test_zero_wind_equals_pure_diffusion(self):
        rng = np.random.default_rng(5)
        series, diffusion, _ = toy_inputs(rng)
        n = series.n
        model = nw.KrigingModel(small_config(), seed=0)
        h = ad.Tensor(rng.normal(size=(n, 8)))
        zero_adv = g.AdvectionOperator(weights=sp.csr_matrix((n, n)),
                                       wind_source=np.zeros((n, 2)))
        out = model.propagate(h, diffusion, zero_adv, layer=0).data
        # hand-computed pure-diffusion message
        w = model.params["prop.0.weight"].data
        b = model.params["prop.0.bias"].data
        expected = np.maximum(diffusion.weights.toarray() @ h.data @ w + b, 0.0)
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    def test_dimension_mismatch(self):
        model = nw.KrigingModel(small_config(), seed=0)
        diffusion, advection = self._zero_ops(3)
        with pytest.raises(nw.ModelError):
            model.propagate(ad.Tensor(np.zeros((4, 8))), diffusion, advection, 0)

    def test_two_weight_variant(self):
        rng = np.random.default_rng(6)
        series, diffusion, advection = toy_inputs(rng)
        model = nw.KrigingModel(small_config(two_weight_propagation=True), seed=0)
        h = ad.Tensor(rng.normal(size=(series.n, 8)))
        out = model.propagate(h, diffusion, advection[0], layer=0).data
        wd = model.params["prop.0.weight_diff"].data
        wa = model.params["prop.0.weight_adv"].data
        b = model.params["prop.0.bias"].data
        expected = np.maximum(diffusion.weights.toarray() @ h.data @ wd
                              + advection[0].weights.toarray() @ h.data @ wa + b, 0.0)
        np.testing.assert_allclose(out, expected, rtol=1e-12)


class TestReadout:
    def test_identical_rows_identical_outputs(self):
        model = nw.KrigingModel(small_config(), seed=0)
        h = np.random.default_rng(7).normal(size=(3, 5, 8))
        h[2] = h[0]
        out = model.readout(ad.Tensor(h)).data
        # identical rows may land in different BLAS blocks: allow last-ulp noise
        np.testing.assert_allclose(out[0], out[2], rtol=0.0, atol=1e-12)

    @pytest.mark.parametrize("n", [1, 4, 9])
    def test_output_shape_any_n(self, n):
        model = nw.KrigingModel(small_config(), seed=0)
        out = model.readout(ad.Tensor(np.zeros((n, 6, 8))))
        assert out.shape == (n, 6)

    def test_zero_hidden_gives_bias_path(self):
        model = nw.KrigingModel(small_config(), seed=1)
        out = model.readout(ad.Tensor(np.zeros((2, 3, 8)))).data
        b0 = model.params["readout.0.bias"].data
        w1 = model.params["readout.1.weight"].data
        b1 = model.params["readout.1.bias"].data
        expected = float(np.maximum(b0, 0.0) @ w1 + b1)
        np.testing.assert_allclose(out, np.full((2, 3), expected), rtol=1e-12)

    def test_init_readout_separate_weights(self):
        model = nw.KrigingModel(small_config(), seed=0)
        h = np.random.default_rng(8).normal(size=(3, 5, 8))
        a = model.readout(ad.Tensor(h)).data
        b = model.init_readout(ad.Tensor(h)).data
        assert not np.allclose(a, b)


class TestFullForward:
    def test_deterministic(self):
        rng = np.random.default_rng(9)
        series, diffusion, advection = toy_inputs(rng)
        model = nw.KrigingModel(small_config(), seed=0)
        a_init, a_hat = model.full_forward(series, diffusion, advection)
        b_init, b_hat = model.full_forward(series, diffusion, advection)
        np.testing.assert_array_equal(a_init.data, b_init.data)
        np.testing.assert_array_equal(a_hat.data, b_hat.data)

    def test_inductive_node_count(self):
        model = nw.KrigingModel(small_config(), seed=0)
        rng = np.random.default_rng(10)
        for n in (3, 7):
            series, diffusion, advection = toy_inputs(rng, n=n)
            x_init, x_hat = model.full_forward(series, diffusion, advection)
            assert x_init.shape == (n, 8) and x_hat.shape == (n, 8)

    def test_target_blindness_bitwise(self):
        rng = np.random.default_rng(11)
        t, n = 8, 5
        wind = rng.normal(size=(t, n, 2))
        emissions = rng.random((t, n))
        pm25 = rng.uniform(10, 30, size=(t, n))
        observed = np.ones((t, n))
        observed[:, [1, 3]] = 0.0  # held-out targets
        nodes = g.NodeSet(rng.uniform(0, 20, size=(n, 2)))
        geo = g.build_geo_adjacency(nodes, threshold_xi=50.0)
        diffusion = g.build_diffusion_operator(geo)
        advection = g.advection_sequence(nodes, wind, threshold_xi=50.0)
        model = nw.KrigingModel(small_config(), seed=0)

        series = nw.make_node_series(wind, emissions, pm25, observed)
        base_init, base_hat = model.full_forward(series, diffusion, advection)
        pm25_perturbed = pm25.copy()
        pm25_perturbed[:, [1, 3]] += rng.normal(0, 100, size=(t, 2))
        series2 = nw.make_node_series(wind, emissions, pm25_perturbed, observed)
        new_init, new_hat = model.full_forward(series2, diffusion, advection)
        np.testing.assert_array_equal(base_init.data, new_init.data)
        np.testing.assert_array_equal(base_hat.data, new_hat.data)

    def test_end_to_end_causality(self):
        rng = np.random.default_rng(12)
        series, diffusion, advection = toy_inputs(rng, t=10)
        model = nw.KrigingModel(small_config(), seed=0)
        _, base = model.full_forward(series, diffusion, advection)
        vals = series.values.copy()
        vals[:, 6:, :3] += 2.0  # perturb inputs from step 6 on
        _, bumped = model.full_forward(nw.NodeSeries(vals), diffusion, advection)
        np.testing.assert_array_equal(base.data[:, :6], bumped.data[:, :6])

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(13)
        n, t = 6, 8
        series, diffusion, advection = toy_inputs(rng, n=n, t=t)
        model = nw.KrigingModel(small_config(), seed=0)
        x_init, x_hat = model.full_forward(series, diffusion, advection)

        perm = rng.permutation(n)
        perm_series = nw.NodeSeries(series.values[perm])
        dperm = diffusion.weights.toarray()[np.ix_(perm, perm)]
        perm_diffusion = g.DiffusionOperator(weights=sp.csr_matrix(dperm))
        perm_advection = [
            g.AdvectionOperator(weights=sp.csr_matrix(op.weights.toarray()[np.ix_(perm, perm)]),
                                wind_source=op.wind_source[perm])
            for op in advection]
        p_init, p_hat = model.full_forward(perm_series, perm_diffusion, perm_advection)
        np.testing.assert_allclose(p_init.data, x_init.data[perm], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(p_hat.data, x_hat.data[perm], rtol=1e-10, atol=1e-12)

    def test_operator_count_mismatch(self):
        rng = np.random.default_rng(14)
        series, diffusion, advection = toy_inputs(rng, t=8)
        model = nw.KrigingModel(small_config(), seed=0)
        with pytest.raises(nw.ModelError):
            model.full_forward(series, diffusion, advection[:-1])

    def test_every_parameter_gets_gradient(self):
        rng = np.random.default_rng(15)
        series, diffusion, advection = toy_inputs(rng, n=5, t=8)
        model = nw.KrigingModel(small_config(), seed=3)
        x_init, x_hat = model.full_forward(series, diffusion, advection)
        target = rng.normal(10.0, 3.0, size=x_hat.shape)
        loss = ad.l1_loss(x_hat, ad.Tensor(target)) + ad.l1_loss(x_init, ad.Tensor(target))
        loss.backward()
        dead = [name for name, p in model.params.items()
                if p.grad is None or not np.any(p.grad != 0.0)]
        assert not dead, f"parameters with no gradient: {dead}"

    def test_softplus_output_positive(self):
        rng = np.random.default_rng(16)
        series, diffusion, advection = toy_inputs(rng)
        model = nw.KrigingModel(small_config(final_softplus=True), seed=0)
        _, x_hat = model.full_forward(series, diffusion, advection)
        assert np.all(x_hat.data > 0.0)


class TestParamStore:
    def test_rejects_wrong_names(self):
        cfg = small_config()
        good = nw.KrigingModel(cfg, seed=0).params
        bad = dict(good)
        bad.pop("readout.1.bias")
        with pytest.raises(nw.ModelError):
            nw.KrigingModel(cfg, params=bad)

    def test_rejects_wrong_shape(self):
        cfg = small_config()
        params = nw.KrigingModel(cfg, seed=0).params
        params["readout.1.bias"] = ad.Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(nw.ModelError):
            nw.KrigingModel(cfg, params=params)

    def test_seeded_init_reproducible(self):
        cfg = small_config()
        a = nw.KrigingModel(cfg, seed=5).params
        b = nw.KrigingModel(cfg, seed=5).params
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)
