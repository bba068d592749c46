import math

import numpy as np
import pytest
from src.quantnoise.cdf_estimator import CodeRecords
from src.quantnoise.exceptions import FitError
from src.quantnoise.models import NoiseModel, SineStimulus, StimulusPlan
from src.quantnoise.quantizer import make_uniform
from src.quantnoise.signal_noise import acquire, render_sequence
from src.quantnoise.sine_fit import (
    codes_to_voltages,
    design_matrix,
    fit_records,
    reconstruct,
    write_theta_csv,
)
from src.quantnoise.utils import read_frame

LSB = 2 / 256


@pytest.fixture
def noisy_records():
    rng = np.random.default_rng(12)
    clean = reconstruct(0.8, -1.1, 0.05, 13, 64)
    return clean[:, None] + rng.normal(0.0, 0.01, (64, 25))


def fig2_fit(sigma_lsb: float, seed: int):
    """Quantized fig2 acquisition and the sine fit of its codes."""
    q = make_uniform(8, -1.0, 1.0)
    plan = StimulusPlan(
        stimulus=SineStimulus(amplitude=5.37 * LSB, periods=35, samples=151, initial_phase=11 * math.pi / 2),
        noise=NoiseModel(scale=sigma_lsb * LSB, seed=seed),
        records=1000,
    )
    return render_sequence(plan.stimulus), fit_records(acquire(plan, q), 35, q)


def test_design_matrix_quarter_period():
    """Test the rows for one period over four samples."""
    H = design_matrix(1, 4)

    print(f'\nInput: \nlambda=1, N=4 \nOutput: \n{H}')
    np.testing.assert_allclose(H, [[0, 1, 1], [1, 0, 1], [0, -1, 1], [-1, 0, 1]], atol=1e-15)


def test_design_matrix_first_row():
    """Test that row 0 is exactly [0, 1, 1]."""
    for periods, samples in [(1, 4), (35, 151), (7, 10)]:
        assert design_matrix(periods, samples)[0].tolist() == [0.0, 1.0, 1.0]


def test_design_matrix_full_rank():
    """Test the rank and conditioning of the fig2 design."""
    H = design_matrix(35, 151)
    assert H.shape == (151, 3)
    assert np.linalg.matrix_rank(H) == 3
    assert np.isfinite(np.linalg.cond(H))


def test_design_matrix_needs_three_samples():
    """Test the N >= 3 requirement."""
    with pytest.raises(FitError):
        design_matrix(1, 2)


def test_noiseless_sine_recovered():
    """Test exact recovery of amplitude, phase and offset from an unquantized sine."""
    Y = np.tile(reconstruct(1.0, 0.3, 0.1, 7, 50)[:, None], (1, 3))
    result = fit_records(Y, 7)

    print(f'\nInput: \nA=1, phi0=0.3, C=0.1 \nOutput: \n{result.summary_line()}')
    assert result.amplitude == pytest.approx(1.0, abs=1e-10)
    assert result.phase == pytest.approx(0.3, abs=1e-10)
    assert result.offset == pytest.approx(0.1, abs=1e-10)
    np.testing.assert_allclose(result.sequence, Y[:, 0], atol=1e-10)
    assert result.theta.shape == (3, 3)


def test_single_record_vector():
    """Test that a 1-D waveform is treated as one record."""
    result = fit_records(reconstruct(2.0, -2.0, 0.0, 3, 20), 3)
    assert result.theta.shape == (3, 1)
    assert result.phase == pytest.approx(-2.0, abs=1e-10)


def test_theta_bar_is_record_mean(noisy_records):
    """Test that the averaged coefficients are the mean over records."""
    result = fit_records(noisy_records, 13)
    np.testing.assert_allclose(result.theta_bar, result.theta.mean(axis=1), rtol=0, atol=1e-15)
    assert result.amplitude >= 0
    assert -math.pi < result.phase <= math.pi


def test_residual_orthogonality(noisy_records):
    """Test H^T (Y_r - H theta_r) = 0 for every record."""
    result = fit_records(noisy_records, 13)
    H = design_matrix(13, 64)
    residual = noisy_records - H @ result.theta
    projection = H.T @ residual
    scale = np.abs(H.T @ noisy_records).max()
    assert np.abs(projection).max() <= 1e-9 * scale


def test_averaging_commutes(noisy_records):
    """Test that fitting the mean waveform equals averaging the per-record fits."""
    per_record = fit_records(noisy_records, 13)
    averaged = fit_records(noisy_records.mean(axis=1), 13)
    np.testing.assert_allclose(averaged.theta[:, 0], per_record.theta_bar, rtol=0, atol=1e-13)


def test_phase_wrap_invariance():
    """Test that adding 2 pi to the phase leaves the reconstruction unchanged."""
    a = reconstruct(1.3, 0.7, 0.0, 35, 151)
    b = reconstruct(1.3, 0.7 + 2 * math.pi, 0.0, 35, 151)
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("periods", [0, 20, 40])
def test_rank_deficient_design(periods):
    """Test that lambda a multiple of N is refused."""
    with pytest.raises(FitError, match="rank deficient"):
        fit_records(np.zeros((20, 2)), periods)


def test_codes_need_quantizer():
    """Test that codes are not fitted without a quantizer."""
    records = CodeRecords(np.ones((5, 2), dtype=int), 4, "q", "s")
    with pytest.raises(FitError):
        fit_records(records, 2)


def test_codes_to_voltages():
    """Test midpoint mapping with saturated codes on their inner transition."""
    q = make_uniform(2, 0.0, 4.0)
    records = CodeRecords(np.array([[1, 2, 3, 4]]), 4, q.fingerprint, "s")
    assert codes_to_voltages(records, q).tolist() == [[1.0, 1.5, 2.5, 3.0]]
    with pytest.raises(FitError):
        codes_to_voltages(records, make_uniform(3, 0.0, 4.0))


def test_fig2b_amplitude_and_phase():
    """Test the fit of quantized fig2b records against the generating sine."""
    s, result = fig2_fit(0.25, seed=31)

    print(f'\nInput: \nA=5.37 LSB, sigma=0.25 LSB \nOutput: \n{result.summary_line()}')
    assert abs(result.amplitude - 5.37 * LSB) <= 0.05 * LSB
    assert result.phase == pytest.approx(-math.pi / 2, abs=0.01)
    assert abs(result.offset) <= 0.01 * LSB
    assert np.max(np.abs(result.sequence - s)) <= 0.1 * LSB


def test_sine_fit_bias_grows_as_noise_shrinks():
    """Test that the worst stimulus error at sigma 0.18 LSB exceeds the one at 0.25 LSB."""
    s, wide = fig2_fit(0.25, seed=32)
    _, narrow = fig2_fit(0.18, seed=32)
    wide_error = np.max(np.abs(wide.sequence - s))
    narrow_error = np.max(np.abs(narrow.sequence - s))

    print(f'\nInput: \nsigma 0.25 vs 0.18 LSB \nOutput: \n{wide_error / LSB} vs {narrow_error / LSB} LSB')
    assert narrow_error > wide_error


def test_theta_csv(tmp_path, noisy_records):
    """Test the per-record coefficient export."""
    result = fit_records(noisy_records, 13)
    df, comments = read_frame(write_theta_csv(result, tmp_path / "theta.csv"))
    assert list(df.columns) == ['r', 'th1', 'th2', 'th3']
    assert len(df) == 25
    np.testing.assert_array_equal(df['th1'].to_numpy(), result.theta[0])
    assert float(comments['sinefit.A_hat']) == result.amplitude
