import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from freqcodec import tensor as T
from freqcodec.entropy import (
    LIKELIHOOD_FLOOR,
    SCALE_TABLE,
    CdfTable,
    FactorizedDensity,
    GaussianConditional,
    build_cdf_tables,
    build_table_from_pmfs,
    estimate_rate,
    factorized_table,
    gaussian_likelihood,
    quantize,
    quantize_pmf,
    rate_bits,
)
from freqcodec.optim import Adam
from freqcodec.tensor import Tensor

from conftest import gradcheck


def test_round_half_to_even():
    out = quantize(Tensor(np.array([1.4, -1.4, 2.5, -2.5, 0.5])), "round").data
    np.testing.assert_array_equal(out, [1.0, -1.0, 2.0, -2.0, 0.0])


def test_round_straight_through():
    y = Tensor(np.array([0.3, 1.7]), requires_grad=True)
    T.tsum(quantize(y, "round") * 3.0).backward()
    np.testing.assert_array_equal(y.grad, [3.0, 3.0])


def test_noise_statistics():
    y = Tensor(np.zeros(1_000_000))
    noise = quantize(y, "noise", np.random.default_rng(0)).data
    assert np.max(np.abs(noise)) <= 0.5
    assert abs(noise.mean()) < 0.005


def test_noise_requires_rng_and_valid_mode():
    with pytest.raises(ValueError, match="Generator"):
        quantize(Tensor(np.zeros(3)), "noise")
    with pytest.raises(ValueError, match="mode"):
        quantize(Tensor(np.zeros(3)), "floor")


def test_gaussian_reference_values():
    p = gaussian_likelihood(Tensor(np.array([0.0])), Tensor(np.array([1.0]))).data[0]
    assert abs(p - 0.382925) < 1e-6
    p = gaussian_likelihood(Tensor(np.array([0.0])), Tensor(np.array([1e-3]))).data[0]
    ref = special.ndtr(0.5 / 0.11) - special.ndtr(-0.5 / 0.11)
    assert abs(p - ref) < 1e-12 and abs(p - 0.999995) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.floats(-40, 40), st.floats(0.01, 100))
def test_gaussian_symmetry(v, sigma):
    s = Tensor(np.array([sigma]))
    a = gaussian_likelihood(Tensor(np.array([v])), s).data[0]
    b = gaussian_likelihood(Tensor(np.array([-v])), s).data[0]
    assert a == b
    assert LIKELIHOOD_FLOOR <= a <= 1.0


def test_gaussian_nonpositive_scale_counted():
    diag = {}
    p = gaussian_likelihood(Tensor(np.zeros(3)), Tensor(np.array([-1.0, 0.0, 2.0])), diagnostics=diag)
    assert diag["nonpositive_scales"] == 2
    assert np.all(np.isfinite(p.data))


@pytest.mark.parametrize("seed", range(5))
def test_gaussian_likelihood_gradients(seed):
    rng = np.random.default_rng(seed)
    y = rng.normal(0, 2, size=(3, 4))
    y = np.where(np.abs(y) < 0.05, 0.3, y)
    sigma = rng.uniform(0.5, 3.0, size=(3, 4))
    assert gradcheck(gaussian_likelihood, y, sigma) < 1e-4


def _density64(channels=2, seed=0):
    d = FactorizedDensity(channels)
    rng = np.random.default_rng(seed)
    for p in d.parameters():
        p.data = (p.data + rng.normal(0, 0.1, p.shape)).astype(np.float64)
    return d


@pytest.mark.parametrize("seed", range(5))
def test_factorized_likelihood_gradients(seed):
    d = _density64(2, seed)
    z = np.random.default_rng(seed).normal(0, 2, size=(1, 2, 2, 3))
    assert gradcheck(d.likelihood, z) < 1e-4
    names = [n for n, _ in d.named_parameters()]
    params = dict(d.named_parameters())
    mats = [params[n] for n in names if n.startswith("matrices")]

    def wrt(*ms):
        saved = list(d.matrices)
        d.matrices = list(ms)
        try:
            return d.likelihood(Tensor(z))
        finally:
            d.matrices = saved

    assert gradcheck(wrt, *(m.data for m in mats)) < 1e-4


def test_factorized_fresh_model_is_positive_and_monotone():
    d = FactorizedDensity(4)
    v = np.arange(-30, 31, dtype=np.float64)
    z = Tensor(np.broadcast_to(v, (1, 4, 1, 61)).astype(np.float32).copy())
    p = d.likelihood(z).data
    assert np.all(np.isfinite(p)) and np.all(p > 0)
    grid = np.linspace(-30.5, 30.5, 500)
    cum = d.cumulative_np(np.broadcast_to(grid, (4, 500)))
    assert np.all(np.diff(cum, axis=1) >= 0)
    assert np.all((cum >= 0) & (cum <= 1))


def test_factorized_fit_to_gaussian_integers():
    rng = np.random.default_rng(0)
    d = FactorizedDensity(1)
    opt = Adam(d.named_parameters(), lr=1e-2)
    for _ in range(300):
        z = np.round(rng.normal(size=(1, 1, 1, 512))).astype(np.float32)
        loss = rate_bits(d.likelihood(Tensor(z)))
        opt.zero_grad()
        loss.backward()
        opt.step()
    v = np.arange(-30, 31, dtype=np.float32).reshape(1, 1, 1, -1)
    total = float(d.likelihood(Tensor(v)).data.astype(np.float64).sum())
    assert 0.999 <= total <= 1.0001
    # cross-entropy of the fit is close to the exact entropy of rounded N(0, 1)
    ks = np.arange(-30, 31)
    true = special.ndtr(ks + 0.5) - special.ndtr(ks - 0.5)
    true = true[true > 0]
    model = d.likelihood(Tensor(v)).data.astype(np.float64).ravel()[np.abs(ks) <= 8]
    true = (special.ndtr(ks + 0.5) - special.ndtr(ks - 0.5))[np.abs(ks) <= 8]
    entropy = -np.sum(true * np.log2(true))
    assert -np.sum(true * np.log2(model)) < entropy + 0.1


def test_estimate_rate_cases():
    assert estimate_rate(np.ones(10)) == 0.0
    assert estimate_rate(np.full(8, 0.5)) == 8.0
    with pytest.raises(ValueError):
        estimate_rate(np.array([0.5, 0.0]))


def test_estimate_rate_high_precision():
    import mpmath

    p = np.random.default_rng(0).uniform(1e-6, 1.0, size=2000)
    ref = -mpmath.fsum(mpmath.log(mpmath.mpf(float(x)), 2) for x in p)
    assert abs(estimate_rate(p) - float(ref)) / float(ref) < 1e-9


def test_rate_bits_matches_estimate():
    p = np.random.default_rng(1).uniform(0.01, 1.0, size=100)
    assert rate_bits(Tensor(p)).item() == pytest.approx(estimate_rate(p), rel=1e-12)


# -- tables ------------------------------------------------------------------------


def _check_table(t: CdfTable):
    t.validate()
    for i in range(t.num_contexts):
        row = t.cdf[i, : t.nsym[i] + 2]
        assert row[0] == 0 and row[-1] == 1 << 16
        assert np.all(np.diff(row) >= 1)


def test_gaussian_table_construction():
    g = GaussianConditional()
    assert len(SCALE_TABLE) == 64
    assert SCALE_TABLE[0] == pytest.approx(0.11) and SCALE_TABLE[-1] == pytest.approx(256.0)
    t = build_cdf_tables(g)
    _check_table(t)
    # scale 1: exact table entry isn't required, compare against the nearest entry
    idx = int(np.argmin(np.abs(np.log(SCALE_TABLE))))
    zero = -t.offset[idx]
    ref = special.ndtr(0.5 / SCALE_TABLE[idx]) - special.ndtr(-0.5 / SCALE_TABLE[idx])
    assert abs(t.pmf(idx)[zero] - ref) < 1e-3
    unit = GaussianConditional(scale_table=[0.11, 1.0, 2.0]).build_table()
    assert abs(unit.pmf(1)[-unit.offset[1]] - 0.382925) < 1e-3


def test_scale_index_is_nearest_in_log_space():
    g = GaussianConditional()
    sig = np.exp(np.random.default_rng(0).uniform(np.log(0.05), np.log(400), 1000))
    idx = g.scale_indexes(sig)
    brute = np.argmin(np.abs(np.log(np.maximum(sig, 0.11))[:, None] - np.log(SCALE_TABLE)), axis=1)
    np.testing.assert_array_equal(idx, brute)


def test_factorized_table_construction():
    d = FactorizedDensity(3)
    t = factorized_table(d)
    _check_table(t)
    assert t.num_contexts == 3


def test_support_overflow_rejected():
    with pytest.raises(ValueError, match="exceeds"):
        build_table_from_pmfs([np.full(40000, 1 / 40000)], [0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-9, 1.0), min_size=1, max_size=300))
def test_quantize_pmf_invariants(pmf):
    f = quantize_pmf(np.array(pmf))
    assert f.sum() == 1 << 16
    assert np.all(f >= 1)


def test_table_code_length_matches_rate_estimate():
    """Expected code length under the quantized table vs the continuous model."""
    g = GaussianConditional()
    t = g.build_table()
    rng = np.random.default_rng(0)
    sigma = rng.uniform(0.5, 20, size=50_000)
    idx = g.scale_indexes(sigma)
    sig_t = SCALE_TABLE[idx]
    y = np.round(rng.normal(0, sig_t))
    model_bits = estimate_rate(gaussian_likelihood(Tensor(y), Tensor(sig_t)).data)
    table_bits = t.code_length(y, idx)
    assert abs(table_bits - model_bits) <= 0.005 * model_bits + 1e-3 * len(y)


def test_table_records_round_trip():
    t = GaussianConditional().build_table()
    back = CdfTable.from_records(t.to_records("y"), "y")
    np.testing.assert_array_equal(back.cdf, t.cdf)
    np.testing.assert_array_equal(back.offset, t.offset)
    np.testing.assert_array_equal(back.nsym, t.nsym)


def test_noise_rate_upper_bounds_round_rate():
    rng = np.random.default_rng(0)
    y = rng.normal(0, 3, size=20_000)
    sigma = Tensor(np.full_like(y, 3.0))
    rounded = estimate_rate(gaussian_likelihood(Tensor(np.round(y)), sigma).data)
    noisy = np.mean([
        estimate_rate(gaussian_likelihood(quantize(Tensor(y), "noise", rng), sigma).data)
        for _ in range(20)
    ])
    assert noisy >= rounded * (1 - 1e-3)


def test_clamp_only_where_true_mass_is_below_floor():
    g = GaussianConditional()
    rng = np.random.default_rng(0)
    for s in (0.11, 1.0, 30.0, 256.0):
        y = np.round(rng.normal(0, s, 10_000))
        p = g.likelihood(Tensor(y), Tensor(np.full_like(y, s))).data
        exact = special.ndtr((0.5 - np.abs(y)) / s) - special.ndtr((-0.5 - np.abs(y)) / s)
        clamped = p <= LIKELIHOOD_FLOOR
        assert np.all(exact[clamped] <= LIKELIHOOD_FLOOR)
        if s <= 30:
            assert not clamped.any()


def test_pmf_mismatch():
    from freqcodec.entropy import pmf_mismatch

    zeros = np.zeros((4, 4))
    ref = 1 - (special.ndtr(0.5 / 0.11) - special.ndtr(-0.5 / 0.11))
    assert pmf_mismatch(zeros, 0.05) == pytest.approx(ref, abs=1e-12)
    rng = np.random.default_rng(0)
    y = np.round(rng.normal(0, 2, 200_000))
    assert pmf_mismatch(y, 2.0) < 2e-3
    assert pmf_mismatch(y, 0.5) > 10 * pmf_mismatch(y, 2.0)
