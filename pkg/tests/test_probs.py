import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poxscreen.errors import DataError
from poxscreen.probs import ProbabilityMatrix, dumps_probs, loads_probs, read_probs_csv, write_probs_csv


def random_pm(seed, n=20, c=4):
    rng = np.random.default_rng(seed)
    return ProbabilityMatrix("xception", 1, tuple(f"Monkeypox/img_{i}.jpg" for i in range(n)),
                             rng.dirichlet(np.ones(c), n), rng.integers(0, c, n))


def test_header_and_format():
    text = dumps_probs(random_pm(0, n=2))
    lines = text.split("\n")
    assert lines[0] == "sample_id,true_label,p_0,p_1,p_2,p_3"
    assert "\r" not in text and text.endswith("\n")
    # 8 significant digits per probability
    mantissa = lines[1].split(",")[2].split("e")[0]
    assert len(mantissa.replace(".", "")) == 8


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 50), st.integers(2, 10))
def test_byte_exact_round_trip(seed, n, c):
    text = dumps_probs(random_pm(seed, n, c))
    again = loads_probs(text, "xception", 1)
    assert dumps_probs(again) == text
    assert np.allclose(again.probs.sum(axis=1), 1, atol=1e-5)


def test_file_round_trip(tmp_path):
    pm = random_pm(1)
    write_probs_csv(pm, tmp_path / "probs.csv")
    raw = (tmp_path / "probs.csv").read_bytes()
    back = read_probs_csv(tmp_path / "probs.csv", "xception", 1)
    write_probs_csv(back, tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == raw
    assert back.sample_ids == pm.sample_ids
    assert np.array_equal(back.true_labels, pm.true_labels)
    assert np.allclose(back.probs, pm.probs, rtol=1e-7)


def test_ids_with_commas_survive():
    pm = ProbabilityMatrix("m", 0, ('Normal/a,b "c".png',), np.array([[0.5, 0.5]]), np.array([1]))
    assert loads_probs(dumps_probs(pm)).sample_ids == pm.sample_ids


def test_bad_header():
    with pytest.raises(DataError):
        loads_probs("id,label,p0\nx,0,1.0\n")


def test_simplex_check():
    pm = ProbabilityMatrix("m", 0, ("a",), np.array([[0.6, 0.6]]), np.array([0]))
    with pytest.raises(DataError, match="'a'"):
        pm.check_simplex()


def test_non_finite_not_written():
    bad = ProbabilityMatrix("m", 0, ("a",), np.array([[np.nan, 1.0]]), np.array([0]))
    with pytest.raises(DataError, match="'a'"):
        dumps_probs(bad)
