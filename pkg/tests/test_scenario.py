import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.special import ndtr
from src.quantnoise.cdf_estimator import read_estimate_csv
from src.quantnoise.distribution_fit import fit_gaussian_cdf
from src.quantnoise.exceptions import CalibrationError, ConfigurationError, PartitionError, StageError
from src.quantnoise.models import NAMED_SCENARIOS, ScenarioConfig
from src.quantnoise.scenario import (
    build_plan,
    build_quantizer,
    longest_converged_run,
    run_pipeline,
    run_replications,
    run_scenario,
    transition_window,
    write_outcome,
    write_replications,
)
from src.quantnoise.servoloop import CalibrationResult, ServoloopEntry
from src.quantnoise.signal_noise import render_sequence
from src.quantnoise.utils import read_frame, read_summary

LSB = 2 / 256


@pytest.fixture
def fig2a(tmp_path):
    return ScenarioConfig.named('fig2a', out_dir=tmp_path / 'fig2a')


@pytest.fixture
def small_sweep():
    """4-bit quantizer with a 1 V step, five DC levels around code 8."""
    return ScenarioConfig(
        bits=4,
        full_scale_low=-8.0,
        full_scale_high=8.0,
        stimulus='swept_dc',
        sweep_low_lsb=-0.5,
        sweep_high_lsb=0.5,
        sweep_step=0.25,
        noise_sigma_lsb=0.5,
        records=1000,
        seed=11,
    )


def test_named_scenarios_snapshot():
    """Test the parameters embedded in the named scenarios."""
    fig2a = ScenarioConfig.named('fig2a')
    assert (fig2a.bits, fig2a.full_scale_low, fig2a.full_scale_high) == (8, -1.0, 1.0)
    assert fig2a.lsb == 2 / 256
    assert (fig2a.amplitude_lsb, fig2a.periods, fig2a.samples) == (5.37, 35, 151)
    assert fig2a.initial_phase == 11 * math.pi / 2
    assert (fig2a.noise_sigma_lsb, fig2a.noise_mean_lsb, fig2a.records) == (0.25, 0.0, 1000)
    assert (fig2a.estimation, fig2a.bound_mode, fig2a.transitions) == ('known-s', 'none', 'truth')

    fig2b = ScenarioConfig.named('fig2b')
    assert (fig2b.estimation, fig2b.bound_mode, fig2b.noise_sigma_lsb) == ('sinefit-s', 'truth', 0.25)
    fig2c = ScenarioConfig.named('fig2c')
    assert (fig2c.estimation, fig2c.bound_mode, fig2c.noise_sigma_lsb) == ('sinefit-s', 'truth', 0.18)

    experiment = ScenarioConfig.named('experiment')
    assert (experiment.bits, experiment.full_scale_low, experiment.full_scale_high) == (12, -10.0, 10.0)
    assert experiment.lsb == 20 / 4096
    assert experiment.inl_lsb == 0.25
    assert (experiment.sweep_low_lsb, experiment.sweep_high_lsb, experiment.sweep_step) == (-4.0, 4.0, 2.45e-4)
    assert (experiment.noise_mean_lsb, experiment.noise_sigma_lsb) == (-0.0214, 0.1867)
    assert experiment.records == 250_000
    assert experiment.transitions == 'servoloop'
    assert sorted(NAMED_SCENARIOS) == ['experiment', 'fig2a', 'fig2b', 'fig2c']


def test_named_scenario_overrides():
    """Test that explicit values win over the preset and None leaves it alone."""
    cfg = ScenarioConfig(scenario='fig2a', records=50, noise_sigma_lsb=None, seed=3)
    assert cfg.records == 50
    assert cfg.noise_sigma_lsb == 0.25
    assert cfg.seed == 3
    with pytest.raises(ConfigurationError):
        ScenarioConfig.named('fig9')


@pytest.mark.parametrize("fields", [
    {'bits': 8},
    {'bits': 8, 'full_scale_low': 1.0, 'full_scale_high': -1.0, 'stimulus': 'sine', 'amplitude_lsb': 1.0,
     'periods': 3, 'samples': 10, 'noise_sigma_lsb': 0.2, 'records': 10},
    {'scenario': 'experiment', 'estimation': 'sinefit-s'},
    {'scenario': 'fig2a', 'bound_mode': 'user'},
    {'scenario': 'fig2a', 'colour': 'red'},
    {'scenario': 'fig2a', 'noise_sigma_lsb': -0.1},
])
def test_invalid_scenario_configs(fields):
    """Test incomplete custom configs, bad ranges, bad combinations and unknown keys."""
    with pytest.raises(ValidationError):
        ScenarioConfig(**fields)


def test_config_from_file(tmp_path):
    """Test a key=value config file with a command-line override."""
    path = tmp_path / 'run.env'
    path.write_text("# fig2c with more records\nscenario=fig2c\nrecords=2000\nseed=5\ndelta_eps=\n")
    cfg = ScenarioConfig.from_file(path, seed=9)

    print(f'\nInput: \n{path.read_text()} \nOutput: \n{cfg}')
    assert cfg.scenario == 'fig2c'
    assert cfg.noise_sigma_lsb == 0.18
    assert cfg.records == 2000
    assert cfg.seed == 9
    assert cfg.delta_eps is None
    with pytest.raises(ConfigurationError):
        ScenarioConfig.from_file(tmp_path / 'missing.env')


def test_build_plan_in_volts(fig2a):
    """Test the conversion of step-relative settings to volts."""
    plan = build_plan(fig2a)
    assert plan.stimulus.amplitude == 5.37 * LSB
    assert plan.noise.scale == 0.25 * LSB
    assert plan.records == 1000
    assert build_plan(fig2a).noise.seed == plan.noise.seed
    assert build_plan(fig2a.model_copy(update={'replicate': 1})).noise.seed != plan.noise.seed


def test_build_quantizer_experiment():
    """Test the seeded INL of the experiment quantizer."""
    cfg = ScenarioConfig.named('experiment')
    q = build_quantizer(cfg)
    ideal = np.linspace(-10.0, 10.0, 4097)
    assert q.bins == 4096
    assert np.max(np.abs(q.transitions - ideal)) <= cfg.lsb / 4
    assert build_quantizer(cfg) == q


def test_transition_window(fig2a):
    """Test the window of transitions around the stimulus centre."""
    cfg = fig2a.model_copy(update={'k_window': 8})
    q = build_quantizer(cfg)
    assert transition_window(cfg, q, render_sequence(build_plan(cfg).stimulus)) == (120, 136)
    assert transition_window(fig2a, q, np.zeros(3)) is None


def test_longest_converged_run():
    """Test the longest consecutive run of converged codes."""
    def entry(k, ok):
        return ServoloopEntry(k=k, level=float(k), iterations=1, final_fraction=0.5, converged=ok)

    result = CalibrationResult(
        entries=(entry(3, True), entry(4, False), entry(5, True), entry(6, True), entry(7, True), entry(8, False)),
        gain=1.0, offset=0.0, max_deviation=0.0,
    )
    assert longest_converged_run(result) == (5, 7)
    with pytest.raises(CalibrationError):
        longest_converged_run(result.model_copy(update={'entries': (entry(1, False),)}))


@pytest.mark.parametrize("seeds, required", [
    (20, 19),
    pytest.param(50, 48, marks=pytest.mark.slow),
])
def test_fig2a_recovers_noise_parameters(seeds, required):
    """Test sigma-hat in [0.24, 0.26] LSB and |mu-hat| <= 0.01 LSB in at least 95% of seeded runs."""
    hits = 0
    for seed in range(seeds):
        fit = run_pipeline(ScenarioConfig.named('fig2a', seed=seed)).estimate.fit
        if 0.24 <= fit.sigma / LSB <= 0.26 and abs(fit.mu) / LSB <= 0.01:
            hits += 1

    print(f'\nInput: \n{seeds} seeds of fig2a \nOutput: \n{hits} runs within bounds')
    assert hits >= required


def test_fig2a_replication_mean_is_unbiased():
    """Test the replication mean of F-hat against Phi(x / sigma) over 200 runs."""
    stats = run_replications(ScenarioConfig.named('fig2a', seed=4), 200)
    M = stats.count
    trials = M * stats.records * stats.sizes
    informative = (stats.true_F >= 0.05) & (stats.true_F <= 0.95) & (trials * stats.true_F * (1 - stats.true_F) >= 10)
    se = np.sqrt(stats.true_F * (1 - stats.true_F) / trials)
    z = np.abs(stats.mean_F - stats.true_F)[informative] / se[informative]

    print(f'\nInput: \nM={M}, {informative.sum()} points \nOutput: \nmax |z|={z.max()}')
    assert informative.sum() > 20
    assert z.max() <= 4


def test_variance_law():
    """Test replication variance against F(1 - F) / (R L_j) within 20% for F in [0.2, 0.8]."""
    cfg = ScenarioConfig(
        bits=4, full_scale_low=-8.0, full_scale_high=8.0, stimulus='swept_dc',
        sweep_low_lsb=-0.5, sweep_high_lsb=0.5, sweep_step=0.25,
        noise_sigma_lsb=0.5, records=1000, seed=12,
    )
    stats = run_replications(cfg, 500)
    middle = (stats.true_F >= 0.2) & (stats.true_F <= 0.8)
    ratio = stats.var_F[middle] / stats.var_theory[middle]

    print(f'\nInput: \nM=500 \nOutput: \n{stats.frame()[middle]}')
    assert middle.sum() >= 3
    assert np.all((ratio >= 0.8) & (ratio <= 1.2))


def expected_cdf(outcome, sigma):
    """Mean of Phi over the true differences T_k - s_n of every group's members."""
    part = outcome.partition
    group = np.repeat(np.arange(len(part)), part.sizes)
    true_x = outcome.quantizer.transitions[part.member_k] - outcome.stimulus[part.member_n]
    return np.bincount(group, weights=ndtr(true_x / sigma), minlength=len(part)) / part.sizes


@pytest.mark.parametrize("seeds, required", [
    (20, 18),
    pytest.param(50, 45, marks=pytest.mark.slow),
])
def test_sine_fit_bias_ordering(seeds, required):
    """Test that delta_eps at sigma 0.18 LSB exceeds the one at 0.25 LSB in at least 90% of paired seeds."""
    wider = 0
    for seed in range(seeds):
        b = run_pipeline(ScenarioConfig.named('fig2b', seed=seed))
        c = run_pipeline(ScenarioConfig.named('fig2c', seed=seed))
        if c.delta_eps > b.delta_eps:
            wider += 1

    print(f'\nInput: \n{seeds} paired seeds \nOutput: \n{wider} wider bands')
    assert wider >= required


def test_sine_fitted_estimate_error():
    """Test the raw F-hat of fig2b against the true CDF at the members' true abscissas."""
    sigma = 0.25 * LSB
    worst = []
    for seed in range(5):
        outcome = run_pipeline(ScenarioConfig.named('fig2b', seed=seed))
        est = outcome.estimate
        expected = expected_cdf(outcome, sigma)
        trials = est.records * est.sizes
        envelope = 5 * np.sqrt(expected * (1 - expected) / trials) + 1 / trials
        error = np.abs(est.F - expected)
        worst.append(float(error.max()))
        assert np.all(error <= envelope)

    print(f'\nInput: \nfig2b, 5 seeds \nOutput: \nmax |F_hat - F| = {worst}')


def test_sine_fitted_estimate_within_abscissa_band():
    """Test that every raw F-hat lies in the band Phi((x_j -/+ delta_eps) / sigma) up to sampling error."""
    sigma = 0.25 * LSB
    outcome = run_pipeline(ScenarioConfig.named('fig2b', seed=3))
    est = outcome.estimate
    low = ndtr((est.x - outcome.delta_eps) / sigma)
    high = ndtr((est.x + outcome.delta_eps) / sigma)
    trials = est.records * est.sizes
    straddles = (low <= 0.5) & (high >= 0.5)
    pq = np.where(straddles, 0.25, np.maximum(low * (1 - low), high * (1 - high)))
    slack = 5 * np.sqrt(pq / trials) + 1 / trials

    print(f'\nInput: \ndelta_eps={outcome.delta_eps / LSB} LSB \nOutput: \n{len(est)} points')
    assert np.all(est.F >= low - slack)
    assert np.all(est.F <= high + slack)


def test_fig2b_bounds_and_sine_fit(tmp_path):
    """Test the fig2b artifacts: bound curves, theta file and the sine summary."""
    outcome, artifacts = run_scenario(ScenarioConfig.named('fig2b', out_dir=tmp_path, seed=1))
    assert outcome.delta_eps > 0
    assert set(artifacts) >= {'estimate', 'partition', 'pdf', 'stimulus', 'bounds', 'theta', 'summary'}
    bounds, comments = read_frame(artifacts['bounds'])
    assert list(bounds.columns) == ['x', 'lower', 'upper']
    assert np.all(bounds['lower'] <= bounds['upper'])
    assert float(comments['delta_eps']) == outcome.delta_eps
    summary = read_summary(artifacts['summary'])
    assert float(summary['A_hat']) == pytest.approx(5.37 * LSB, abs=0.05 * LSB)


def test_experiment_with_calibrated_transitions(tmp_path):
    """Test the simulated experiment: residual bound and recovered noise parameters."""
    cfg = ScenarioConfig.named('experiment', out_dir=tmp_path, seed=2)
    outcome, artifacts = run_scenario(cfg)
    fit = outcome.estimate.fit
    sigma = cfg.noise_sigma_lsb * cfg.lsb
    # calibrated levels sit at T_k - median(eta), which absorbs the noise location
    median = build_plan(cfg).noise.distribution().median()

    print(f'\nInput: \n{cfg.scenario} \nOutput: \n{fit.summary_line()}')
    assert fit.converged
    assert fit.max_residual <= 0.03
    assert abs(fit.mu - (cfg.noise_mean_lsb * cfg.lsb - median)) <= 0.05 * sigma
    assert abs(fit.sigma - sigma) <= 0.05 * sigma
    assert outcome.calibration is not None
    assert 'calibration' in artifacts
    levels = [entry.level for entry in outcome.calibration.converged]
    assert np.all(np.diff(levels) > 0)


def test_experiment_with_true_transitions():
    """Test that known transitions recover the injected noise location itself."""
    cfg = ScenarioConfig.named('experiment', transitions='truth', k_window=8, records=20_000, seed=3)
    fit = run_pipeline(cfg).estimate.fit
    sigma = cfg.noise_sigma_lsb * cfg.lsb
    assert abs(fit.mu - cfg.noise_mean_lsb * cfg.lsb) <= 0.05 * sigma
    assert abs(fit.sigma - sigma) <= 0.05 * sigma


def test_artifacts_are_reproducible(tmp_path):
    """Test byte-identical artifacts for the same config and seed, for any worker count."""
    base = ScenarioConfig.named('fig2b', seed=7, records=300)
    _, first = run_scenario(base.model_copy(update={'out_dir': tmp_path / 'a'}), workers=1)
    _, second = run_scenario(base.model_copy(update={'out_dir': tmp_path / 'b'}), workers=2)
    assert set(first) == set(second)
    for name in first:
        assert first[name].read_bytes() == second[name].read_bytes(), name
    _, other = run_scenario(base.model_copy(update={'out_dir': tmp_path / 'c', 'seed': 8}))
    assert other['estimate'].read_bytes() != first['estimate'].read_bytes()


def test_summary_matches_refit_of_estimate(tmp_path, fig2a):
    """Test that sigma-hat in summary.txt equals a refit of the emitted estimate.csv."""
    _, artifacts = run_scenario(fig2a)
    summary = read_summary(artifacts['summary'])
    refit = fit_gaussian_cdf(read_estimate_csv(artifacts['estimate']))

    print(f'\nInput: \n{artifacts["estimate"]} \nOutput: \n{summary}')
    assert float(summary['sigma_hat']) == refit.sigma
    assert float(summary['mu_hat']) == refit.mu
    assert summary['converged'] == 'true'
    assert summary['delta_eps'] == 'none'


def test_pdf_artifact(fig2a):
    """Test the numeric and fitted densities in pdf.csv."""
    outcome, artifacts = run_scenario(fig2a)
    pdf, _ = read_frame(artifacts['pdf'])
    peak = 1 / (0.25 * LSB * math.sqrt(2 * math.pi))
    assert list(pdf.columns) == ['x', 'density_numeric', 'density_fit']
    assert pdf['density_fit'].max() == pytest.approx(peak, rel=0.05)
    assert len(pdf) == len(outcome.estimate) - 2 * fig2a.pdf_window


def test_stage_error_names_the_stage(fig2a):
    """Test that a failing stage is reported with its name and cause."""
    with pytest.raises(StageError) as info:
        run_pipeline(fig2a.model_copy(update={'tolerance': 0.01}))
    assert info.value.stage == 'partition'
    assert isinstance(info.value.cause, PartitionError)
    assert str(info.value).startswith('[partition] PartitionError')


def test_partial_artifacts_removed(tmp_path, fig2a):
    """Test that a failed write leaves no partial bundle behind."""
    cfg = fig2a.model_copy(update={'bound_mode': 'user', 'delta_eps': 0.001, 'out_dir': tmp_path / 'out'})
    outcome = run_pipeline(cfg)
    (tmp_path / 'out' / 'bounds.csv').mkdir(parents=True)
    with pytest.raises(StageError) as info:
        write_outcome(outcome, cfg.out_dir)
    assert info.value.stage == 'write'
    assert not (tmp_path / 'out' / 'estimate.csv').exists()
    assert not (tmp_path / 'out' / 'summary.txt').exists()


def test_replications_with_moving_abscissas(tmp_path):
    """Test that per-point statistics are skipped when the abscissas differ between runs."""
    stats = run_replications(ScenarioConfig.named('fig2b', records=200), 2)
    assert stats.x is None
    assert stats.frame().empty
    assert stats.sigma.shape == (2,)
    paths = write_replications(stats, tmp_path)
    fits, comments = read_frame(paths['fits'])
    assert list(fits.columns) == ['replicate', 'mu_hat', 'sigma_hat', 'max_residual', 'converged']
    assert comments == {}


def test_replications_independent_of_workers(small_sweep, tmp_path):
    """Test that process parallelism does not change the statistics."""
    serial = run_replications(small_sweep, 4, workers=1)
    parallel = run_replications(small_sweep, 4, workers=2)
    assert np.array_equal(serial.mean_F, parallel.mean_F)
    assert np.array_equal(serial.sigma, parallel.sigma)
    paths = write_replications(serial, tmp_path)
    df, comments = read_frame(paths['replications'])
    assert list(df.columns) == ['x_j', 'L_j', 'F_true', 'mean_F', 'var_F', 'var_theory']
    assert comments['count'] == '4'


def test_replications_need_two_runs(small_sweep):
    """Test the minimum replication count."""
    with pytest.raises(ConfigurationError):
        run_replications(small_sweep, 1)
