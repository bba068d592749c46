import numpy as np
import pytest
from src.quantnoise.exceptions import ConfigurationError
from src.quantnoise.quantizer import (
    QuantizerModel,
    make_perturbed,
    make_uniform,
    quantize,
    read_transitions,
    write_transitions,
)


@pytest.fixture
def three_level():
    return QuantizerModel([0.0, 1.0, 2.0])


def test_make_uniform_8_bit():
    """Test the 8-bit quantizer over [-1, 1]."""
    q = make_uniform(8, -1.0, 1.0)

    print(f'\nInput: \n(8, -1, 1) \nOutput: \n{q} step={q.step}')
    assert q.bins == 256
    assert q.transitions.size == 257
    assert q.step == 2 / 256 == 0.0078125
    assert q.transitions[0] == -1.0 and q.transitions[-1] == 1.0
    assert np.all(np.diff(q.transitions) == q.step)


def test_make_uniform_smallest():
    """Test the smallest legal quantizer."""
    q = make_uniform(1, 0.0, 1.0)
    assert q.transitions.tolist() == [0.0, 0.5, 1.0]
    assert q.bins == 2


def test_make_uniform_12_bit_step():
    """Test that the 12-bit step reads back exactly."""
    q = make_uniform(12, -10.0, 10.0)
    assert q.step == 20 / 4096 == 0.0048828125


@pytest.mark.parametrize("bits, low, high", [(0, -1.0, 1.0), (8, 1.0, 1.0), (8, 1.0, -1.0), (2.5, 0.0, 1.0)])
def test_make_uniform_invalid(bits, low, high):
    """Test rejection of invalid ranges and resolutions."""
    with pytest.raises(ConfigurationError):
        make_uniform(bits, low, high)


def test_quantize_interval_membership(three_level):
    """Test direct interval membership."""
    assert quantize(three_level, 0.5) == 1
    assert quantize(three_level, 1.5) == 2


def test_quantize_saturation(three_level):
    """Test saturation below T_0 and at or above T_K."""
    assert quantize(three_level, -0.3) == 1
    assert quantize(three_level, 2.7) == 2
    assert quantize(three_level, 2.0) == 2


def test_quantize_boundary_goes_up(three_level):
    """Test that an input equal to T_k belongs to the upper bin."""
    assert quantize(three_level, 1.0) == 2
    assert quantize(three_level, 0.0) == 1


def test_quantize_zero_on_8_bit():
    """Test hand-evaluated bin of x = 0 on the 8-bit quantizer."""
    q = make_uniform(8, -1.0, 1.0)
    assert quantize(q, 0.0) == 129
    assert quantize(q, -1e-12) == 128


def test_quantize_vectorized_shape(three_level):
    """Test that arrays keep their shape."""
    x = np.array([[-1.0, 0.5], [1.5, 9.0]])
    codes = three_level.quantize(x)

    print(f'\nInput: \n{x} \nOutput: \n{codes}')
    assert codes.shape == (2, 2)
    assert codes.tolist() == [[1, 1], [2, 2]]


def test_quantize_monotone():
    """Test monotonicity on random pairs."""
    q = make_perturbed(make_uniform(6, -1.0, 1.0), 0.01, seed=3)
    rng = np.random.default_rng(0)
    a = rng.uniform(-1.5, 1.5, 10_000)
    b = rng.uniform(-1.5, 1.5, 10_000)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    assert np.all(q.quantize(lo) <= q.quantize(hi))


def test_quantize_membership_every_bin():
    """Test that every x in [T_{k-1}, T_k) maps to k."""
    q = make_perturbed(make_uniform(5, 0.0, 1.0), 0.005, seed=11)
    rng = np.random.default_rng(1)
    t = q.transitions
    for k in range(1, q.bins + 1):
        x = rng.uniform(t[k - 1], t[k], 20)
        x = np.append(x, t[k - 1])
        assert np.all(q.quantize(x) == k)


def test_make_perturbed_bounded():
    """Test that perturbed levels stay within the INL bound of the ideal ones."""
    base = make_uniform(12, -10.0, 10.0)
    bound = base.step / 4
    q = make_perturbed(base, bound, seed=42)
    deviation = np.abs(q.transitions - base.transitions)

    print(f'\nInput: \nbound={bound} \nOutput: \nmax deviation={deviation.max()}')
    assert deviation.max() <= bound
    assert deviation.max() > 0
    assert q.transitions[0] == base.transitions[0]
    assert q.transitions[-1] == base.transitions[-1]
    assert np.all(np.diff(q.transitions) > 0)


def test_make_perturbed_seeded():
    """Test that the same seed gives the same perturbation."""
    base = make_uniform(8, -1.0, 1.0)
    assert make_perturbed(base, base.step / 4, 5) == make_perturbed(base, base.step / 4, 5)
    assert make_perturbed(base, base.step / 4, 5) != make_perturbed(base, base.step / 4, 6)


def test_make_perturbed_zero_is_identity():
    """Test zero perturbation."""
    base = make_uniform(8, -1.0, 1.0)
    assert make_perturbed(base, 0.0, seed=1) == base


@pytest.mark.parametrize("factor", [0.6, 0.5, -0.1])
def test_make_perturbed_rejects_large_bound(factor):
    """Test that bounds of half a step or more, and negative bounds, are rejected."""
    base = make_uniform(8, -1.0, 1.0)
    with pytest.raises(ConfigurationError):
        make_perturbed(base, factor * base.step, seed=1)


@pytest.mark.parametrize("levels", [[0.0, 1.0], [0.0, 1.0, 1.0], [0.0, 2.0, 1.0], [0.0, np.nan, 1.0]])
def test_quantizer_model_invalid(levels):
    """Test rejection of too few, repeated, decreasing or non-finite levels."""
    with pytest.raises(ConfigurationError):
        QuantizerModel(levels)


def test_quantizer_model_is_read_only(three_level):
    """Test that the transitions cannot be modified in place."""
    with pytest.raises(ValueError):
        three_level.transitions[1] = 0.5


def test_bin_midpoints(three_level):
    """Test midpoints with saturated codes mapped to their inner transition."""
    q = QuantizerModel([0.0, 1.0, 2.0, 4.0])
    assert q.bin_midpoints().tolist() == [1.0, 1.5, 2.0]
    assert three_level.bin_midpoints().tolist() == [1.0, 1.0]


def test_with_levels():
    """Test substitution of selected levels."""
    q = make_uniform(2, 0.0, 4.0)
    updated = q.with_levels({2: 2.25})
    assert updated.transitions.tolist() == [0.0, 1.0, 2.25, 3.0, 4.0]
    assert q.transitions[2] == 2.0
    with pytest.raises(ConfigurationError):
        q.with_levels({2: 3.5})
    with pytest.raises(ConfigurationError):
        q.with_levels({7: 1.0})


def test_code_dtype():
    """Test that codes fit the smallest unsigned type."""
    assert make_uniform(8, -1.0, 1.0).code_dtype == np.uint16
    assert make_uniform(17, -1.0, 1.0).code_dtype == np.uint32


def test_transitions_file_round_trip(tmp_path):
    """Test that write/read of a transitions file is bit-exact."""
    q = make_perturbed(make_uniform(10, -1.0, 1.0), 0.0003, seed=9)
    path = write_transitions(q, tmp_path / "transitions.txt")
    loaded = read_transitions(path)

    first_line = path.read_text().splitlines()[0]
    print(f'\nInput: \n{q} \nOutput: \n{loaded} header={first_line!r}')
    assert first_line == "# quantnoise-transitions v1 K=1024"
    assert np.array_equal(loaded.transitions, q.transitions)
    assert loaded.fingerprint == q.fingerprint


def test_transitions_file_rejects_bad_files(tmp_path):
    """Test missing header and mismatched level count."""
    no_header = tmp_path / "a.txt"
    no_header.write_text("0.0\n1.0\n2.0\n")
    wrong_count = tmp_path / "b.txt"
    wrong_count.write_text("# quantnoise-transitions v1 K=3\n0.0\n1.0\n2.0\n")
    with pytest.raises(ConfigurationError):
        read_transitions(no_header)
    with pytest.raises(ConfigurationError):
        read_transitions(wrong_count)
