import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from survkit.coxph import CoxRiskSets, cox_fit
from survkit.data import SurvivalDataset
from survkit.mixtures import (DSMModel, EMConfig, cmhe_fit, component_loglik, dcm_fit, dsm_fit,
                              dsm_objective, mixture_from_dict)
from survkit.mixtures.coxmix import effect_objective
from survkit.numerics import Net, check_gradient

from conftest import cohort, toy_dataset


def agreement(pred, truth):
    return max(np.mean(pred == truth), np.mean(pred == 1 - truth))


def two_groups(seed):
    return cohort("mixture_k", n=2000, d=2, K=2, covariate_signal=3.0, seed=seed,
                  group_shapes=[0.8, 3.0], group_scales=[0.3, 2.0])


# --- DSM -------------------------------------------------------------------

def test_unit_exponential_loglik():
    assert component_loglik("weibull", 1.0, 1, 1.0, 1.0) == pytest.approx(-1.0, abs=1e-15)


def test_single_weibull_matches_grid_mle():
    # reference: zooming grid search of the Weibull log-likelihood on the same draws
    t = 2.0 * np.random.default_rng(20240601).weibull(1.5, size=300)
    ds = SurvivalDataset(np.zeros((t.size, 1)), t, np.ones(t.size, int))
    shape, scale, _ = dsm_fit(ds, K=1, l2=0.0).components(np.zeros((1, 1)))
    assert abs(shape[0, 0] - 1.4978520400000002) < 1e-3
    assert abs(scale[0, 0] - 1.9478143490000002) < 1e-3


def test_censored_only_pushes_survival_up():
    rng = np.random.default_rng(5)
    t = rng.uniform(0.5, 3.0, 50)
    ds = SurvivalDataset(rng.normal(size=(50, 1)), t, np.zeros(50, int))
    model = dsm_fit(ds, K=2)
    assert np.all(model.predict_survival(ds.features, [t.max()]) >= 0.9)


def test_dsm_latent_posterior():
    ds, truth = two_groups(0)
    model = dsm_fit(ds, K=2, seed=0)
    P = model.predict_latent_z(ds.features)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    assert agreement(P.argmax(axis=1), truth.groups) >= 0.95
    one = dsm_fit(ds, K=1)
    np.testing.assert_array_equal(one.predict_latent_z(ds.features), 1.0)


@pytest.mark.parametrize("family", ["weibull", "lognormal"])
@pytest.mark.parametrize("hidden", [None, 3])
def test_dsm_gradient(family, hidden):
    ds = toy_dataset(n=40, seed=1)
    K = 2
    net = Net(ds.d, 3 * K, hidden=hidden)
    fun = dsm_objective(net, ds.features, ds.times, ds.events, np.ones(ds.n), K, family, 0.2,
                        float(np.median(ds.times)))
    rng = np.random.default_rng(11)
    for _ in range(10):
        theta = rng.normal(scale=0.5, size=net.n_params)
        assert check_gradient(lambda th: fun(th)[0], lambda th: fun(th)[1], theta) < 1e-5


@pytest.mark.parametrize("family", ["weibull", "lognormal"])
def test_dsm_predictions_and_roundtrip(family, small_ds):
    model = dsm_fit(small_ds, K=2, family=family, hidden=3, seed=4)
    S = model.predict_survival(small_ds.features, np.linspace(0.01, 4, 30))
    assert np.all((S >= 0) & (S <= 1)) and np.all(np.diff(S, axis=1) <= 1e-15)
    back = DSMModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(back.predict_survival(small_ds.features, [1.0]),
                                  model.predict_survival(small_ds.features, [1.0]))


# --- DCM / CMHE ------------------------------------------------------------

def test_single_component_dcm_is_cox(small_ds):
    dcm = dcm_fit(small_ds, K=1, l2=0.01)
    cox = cox_fit(small_ds, l2=0.01)
    np.testing.assert_allclose(dcm.thetas[0], cox.theta, atol=1e-8)
    np.testing.assert_array_equal(dcm.baselines[0].jump_times, cox.baseline.jump_times)
    np.testing.assert_allclose(dcm.baselines[0].values, cox.baseline.values, rtol=1e-8)


def test_dcm_recovers_groups():
    ds, truth = two_groups(1)
    model = dcm_fit(ds, K=2, seed=1)
    assert agreement(model.predict_latent_z(ds.features).argmax(axis=1), truth.groups) >= 0.9


@settings(max_examples=6, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_em_objective_monotone_and_posteriors_normalised(seed, K):
    ds = toy_dataset(n=80, seed=seed)
    ds = ds.replace(treatment=(np.arange(ds.n) % 2))
    for model in (dcm_fit(ds, K=K, seed=seed, config=EMConfig(max_iterations=30, n_init=1)),
                  cmhe_fit(ds, K=K, M=2, seed=seed, config=EMConfig(max_iterations=30, n_init=1))):
        assert np.all(np.diff(model.info["history"]) >= -1e-6)
        post = model.posterior(ds.features, ds.times, ds.events, ds.treatment)
        assert np.all(post >= 0)
        np.testing.assert_allclose(post.reshape(ds.n, -1).sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(model.predict_latent_z(ds.features).sum(axis=1), 1.0, atol=1e-9)
        S = model.predict_survival(ds.features, np.linspace(0.01, 3, 20), ds.treatment)
        assert np.all((S >= 0) & (S <= 1)) and np.all(np.diff(S, axis=1) <= 1e-15)


def test_frozen_effects_reduce_to_dcm():
    ds, _ = cohort("hte_subgroup", n=600, seed=2)
    cfg = EMConfig(n_init=1)
    dcm = dcm_fit(ds, K=2, seed=0, config=cfg)
    cmhe = cmhe_fit(ds, K=2, M=2, seed=0, config=cfg, freeze_omega=True)
    np.testing.assert_array_equal(cmhe.omega, 0.0)
    np.testing.assert_allclose(cmhe.thetas, dcm.thetas, atol=1e-4)
    for a, b in zip(cmhe.baselines, dcm.baselines):
        np.testing.assert_allclose(a.values, b.values, atol=1e-4)


def test_single_effect_group_matches_cox_treatment_coefficient():
    ds, _ = cohort("hte_subgroup", n=1000, seed=3)
    cmhe = cmhe_fit(ds, K=1, M=1, l2=0.01)
    cox = cox_fit(ds.replace(features=np.column_stack([ds.features, ds.treatment])), l2=0.01)
    assert abs(cmhe.omega[0] - cox.theta[-1]) < 1e-3


@pytest.mark.parametrize("hidden", [None, 3])
def test_effect_step_gradient(hidden):
    ds = toy_dataset(n=50, seed=2)
    a = (np.arange(ds.n) % 2).astype(float)
    K, M = 2, 2
    resp = np.random.default_rng(0).dirichlet(np.ones(K * M), size=ds.n).reshape(ds.n, K, M)
    t_rep, e_rep = np.tile(ds.times, M), np.tile(ds.events, M)
    rs = [CoxRiskSets(t_rep, e_rep, resp[:, k, :].T.ravel()) for k in range(K)]
    net = Net(ds.d, 1, hidden=hidden, bias=False)
    fun = effect_objective(net, ds.features, rs, a, K, M, 0.1, float(ds.n))
    rng = np.random.default_rng(3)
    for _ in range(10):
        params = rng.normal(size=K * net.n_params + M)
        assert check_gradient(lambda p: fun(p)[0], lambda p: fun(p)[1], params) < 1e-5


def test_mixture_roundtrip():
    ds, _ = cohort("hte_subgroup", n=300, seed=5)
    model = cmhe_fit(ds, K=2, M=2, hidden=3, config=EMConfig(max_iterations=10, n_init=1))
    back = mixture_from_dict(model.to_dict())
    np.testing.assert_array_equal(back.predict_survival(ds.features, [0.5], ds.treatment),
                                  model.predict_survival(ds.features, [0.5], ds.treatment))
    np.testing.assert_array_equal(back.predict_latent_phi(ds.features),
                                  model.predict_latent_phi(ds.features))


def test_cmhe_needs_both_arms():
    ds = toy_dataset()
    with pytest.raises(ValueError):
        cmhe_fit(ds)
    with pytest.raises(ValueError):
        cmhe_fit(ds.replace(treatment=np.ones(ds.n, int)), M=2)
