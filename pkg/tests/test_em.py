import numpy as np
import pytest

from lrds.coordinator import LocalSource, fitted_basis, run_em
from lrds.errors import DomainError, SpecError

from helpers import em_instance, random_instance


def test_default_em_is_monotone_and_converges():
    servers, spec = em_instance(J=1)
    res = run_em(LocalSource(servers, spec), 1.0)
    steps = np.diff(res.neg2_loglik)
    assert np.all(steps[:25] <= 1e-8)
    assert np.all(steps <= 1e-8)
    assert res.converged and res.steps[-1] < 1e-6


@pytest.mark.parametrize("J", [1, 2, 3, 5])
def test_exact_em_is_monotone_for_any_partition(J):
    servers, spec = em_instance(J=J)
    res = run_em(LocalSource(servers, spec), 1.0, trace="marginal", pooled=True)
    assert np.all(np.diff(res.neg2_loglik) <= 1e-8)
    assert res.converged


def test_exact_em_fixed_point_does_not_depend_on_partition():
    fits = [run_em(LocalSource(*em_instance(J=J)), 1.0, trace="marginal", pooled=True)
            for J in (1, 5)]
    assert fits[0].fine_scale_var == pytest.approx(fits[1].fine_scale_var, rel=1e-6)
    np.testing.assert_allclose(fits[0].K0, fits[1].K0, rtol=1e-5)
    assert fits[0].neg2_loglik[-1] == pytest.approx(fits[1].neg2_loglik[-1], abs=1e-6)


def test_exact_em_reaches_lower_deviance_than_printed_form():
    src = LocalSource(*em_instance(J=1))
    printed = run_em(src, 1.0)
    exact = run_em(src, 1.0, trace="marginal", pooled=True)
    assert exact.neg2_loglik[-1] < printed.neg2_loglik[-1]


def test_printed_form_overshoots_with_many_servers():
    with pytest.raises(DomainError):
        run_em(LocalSource(*em_instance(J=5)), 1.0)


@pytest.mark.parametrize("trace, pooled", [("omega", False), ("marginal", True)])
def test_one_pass_matches_two_rounds(trace, pooled):
    src = LocalSource(*em_instance(J=2))
    a = run_em(src, 1.0, max_iter=30, trace=trace, pooled=pooled)
    b = run_em(src, 1.0, max_iter=30, trace=trace, pooled=pooled, one_pass=True)
    np.testing.assert_allclose(b.neg2_loglik, a.neg2_loglik, rtol=1e-10)
    np.testing.assert_allclose(b.K0, a.K0, rtol=1e-8)


def test_em_needs_fixed_basis(rng):
    shards, spec, _, _ = random_instance(rng)
    with pytest.raises(SpecError):
        run_em(LocalSource.from_shards(shards, spec), 0.5)


def test_fitted_basis_carries_estimate():
    servers, spec = em_instance(J=1)
    res = run_em(LocalSource(servers, spec), 1.0, max_iter=5)
    fb = fitted_basis(spec, res)
    np.testing.assert_allclose(np.linalg.inv(fb.prior_precision.to_dense()), res.K0, rtol=1e-10)
