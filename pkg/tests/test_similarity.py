import numpy as np
import pytest

from oracles import dtw_bruteforce, pearson_loop
from panelgraph import signals as sg
from panelgraph import similarity as sim


# --- DTW -------------------------------------------------------------------------


def test_dtw_small_case_matches_enumeration():
    # hand count: best path pays one unit of squared cost for the middle element
    assert sim.dtw([0, 1, 2], [0, 2]) == 1.0
    assert sim.dtw([0, 1, 2], [0, 2]) == dtw_bruteforce([0, 1, 2], [0, 2])


def test_dtw_matches_bruteforce_on_random_pairs(rng):
    for _ in range(200):
        a = rng.normal(size=rng.integers(1, 7))
        b = rng.normal(size=rng.integers(1, 7))
        assert abs(sim.dtw(a, b) - dtw_bruteforce(a, b)) <= 1e-12


def test_banded_dtw_matches_banded_bruteforce(rng):
    for _ in range(60):
        n = int(rng.integers(2, 7))
        m = int(rng.integers(max(1, n - 2), min(6, n + 2) + 1))
        band = abs(n - m) + int(rng.integers(0, 2))
        a, b = rng.normal(size=n), rng.normal(size=m)
        assert abs(sim.dtw(a, b, band) - dtw_bruteforce(a, b, band)) <= 1e-12


def test_vector_valued_dtw_matches_bruteforce(rng):
    for _ in range(30):
        a = rng.normal(size=(int(rng.integers(1, 5)), 3))
        b = rng.normal(size=(int(rng.integers(1, 5)), 3))
        assert abs(sim.dtw(a, b) - dtw_bruteforce(a, b)) <= 1e-12


def test_dtw_identity_and_symmetry(rng):
    for _ in range(20):
        x, y = rng.normal(size=9), rng.normal(size=6)
        assert sim.dtw(x, x) == 0.0
        assert sim.dtw(x, y) == sim.dtw(y, x)


def test_band_never_decreases_distance(rng):
    for _ in range(50):
        a, b = rng.normal(size=8), rng.normal(size=8)
        free = sim.dtw(a, b)
        for band in range(0, 8):
            assert sim.dtw(a, b, band) >= free - 1e-12


def test_dtw_errors():
    with pytest.raises(ValueError):
        sim.dtw([], [1.0])
    with pytest.raises(ValueError, match="band"):
        sim.dtw([1, 2, 3, 4], [1.0], band=1)
    with pytest.raises(ValueError, match="widths"):
        sim.dtw(np.ones((3, 2)), np.ones((3, 3)))


# --- shapelets ----------------------------------------------------------------------


def test_default_dictionary_is_orthonormal():
    d = sim.ShapeletDictionary.default()
    assert d.names == ("flat", "linear_up", "peak") and d.window == 4
    gram = d.shapelets @ d.shapelets.T
    assert np.max(np.abs(gram - np.eye(3))) < 1e-10


def test_dependent_templates_rejected():
    with pytest.raises(ValueError, match="dependent"):
        sim.ShapeletDictionary.from_templates(["a", "b"], [np.ones(4), 2 * np.ones(4)])
    with pytest.raises(ValueError):
        sim.ShapeletDictionary.default(2)


def test_constant_series_has_zero_descriptor():
    assert np.all(sim.shapelet_transform(np.full(10, 3.3)) == 0.0)


def test_ramp_projects_onto_linear_up_only():
    d = sim.ShapeletDictionary.default()
    desc = sim.shapelet_transform(np.array([1.0, 2.0, 3.0, 4.0, 5.0]), d)
    assert desc.shape == (3, 2)
    assert np.all(np.abs(desc[[0, 2]]) < 1e-9)
    # a z-normalized window has norm sqrt(w), all of it on linear_up
    assert np.allclose(desc[1], 2.0, atol=1e-9)


def test_negating_series_flips_linear_up(rng):
    x = rng.normal(size=12)
    a = sim.shapelet_transform(x)
    b = sim.shapelet_transform(-x)
    assert np.allclose(a[1], -b[1], atol=1e-12)


def test_shapelet_transform_too_short():
    with pytest.raises(ValueError):
        sim.shapelet_transform([1.0, 2.0, 3.0])


def test_dtw_s_range_and_identity(rng):
    for _ in range(100):
        x = rng.normal(size=int(rng.integers(4, 15)))
        assert sim.dtw_s(x, x) == 1.0
    for _ in range(30):
        s = sim.dtw_s(rng.normal(size=10), rng.normal(size=12))
        assert 0.0 < s <= 1.0


def test_shifted_trend_beats_noise():
    t = np.arange(40)
    wins = []
    for seed in range(20):
        r = np.random.default_rng(seed)
        base = np.sin(2 * np.pi * t / 16 + r.uniform(0, 6.3))
        shifted = np.roll(base, 2)
        noise = r.normal(size=40)
        wins.append(sim.dtw_s(base, shifted) > sim.dtw_s(base, noise))
    assert all(wins)


# --- lagged correlation ------------------------------------------------------------------


def test_lagged_copy_found_at_its_lag(rng):
    a = rng.normal(size=60)
    b = np.concatenate([[0.0], a[:-1]])
    c, lag = sim.lagged_correlation(a, b)
    assert lag == 1 and abs(c - 1.0) < 1e-9


def test_negated_series_has_unit_correlation(rng):
    a = rng.normal(size=30)
    c, lag = sim.lagged_correlation(a, -a)
    assert lag == 0 and abs(c - 1.0) < 1e-12


@pytest.mark.parametrize("lag", [0, 1, 2, 3])
def test_noiseless_driver_lag_recovered(lag):
    rel = sg.Relation(0, 1, lag, 5.0)
    p, _ = sg.synth_panel(sg.CouplingSpec(1, 2, 80, relations=((rel,),), noise=0.0), seed=lag)
    assert sim.lagged_correlation(p.values[0, 0], p.values[0, 1])[1] == lag


def test_independent_noise_is_weakly_correlated():
    hits = 0
    for seed in range(20):
        r = np.random.default_rng(seed)
        hits += sim.lagged_correlation(r.normal(size=500), r.normal(size=500))[0] < 0.2
    assert hits == 20


def test_pearson_matches_loop(rng):
    for _ in range(20):
        x, y = rng.normal(size=15), rng.normal(size=15)
        assert abs(sim._pearson(x, y) - pearson_loop(list(x), list(y))) < 1e-12


def test_zero_variance_overlap_counts_as_zero():
    assert sim.lagged_correlation(np.ones(10), np.arange(10.0)) == (0.0, 0)


def test_lagged_correlation_errors():
    with pytest.raises(ValueError):
        sim.lagged_correlation(np.ones(6), np.ones(6), max_lag=4)
    with pytest.raises(ValueError):
        sim.lagged_correlation(np.ones(10), np.ones(9))


# --- matrices -----------------------------------------------------------------------------


def test_identical_signals_give_unit_dtw_s_matrix():
    x = np.sin(np.arange(20) / 3)
    p = sg.panel_from_arrays(np.stack([x, x, x])[None])
    m = sim.similarity_matrix(p, "S00", "dtw_s")
    assert np.all(m.values == 1.0)


def test_dtw_s_matrix_symmetric_with_max_diagonal():
    p, _ = sg.synth_panel(sg.planted_coupling_spec(n_states=1, seed=1), seed=1)
    m = sim.similarity_matrix(p, "S00", "dtw_s")
    assert np.max(np.abs(m.values - m.values.T)) < 1e-9
    assert np.all(np.diag(m.values) >= m.values.max(axis=1))


def test_lagged_matrix_orientation_and_range():
    p, _ = sg.synth_panel(sg.planted_coupling_spec(n_states=1, seed=2), seed=2)
    m = sim.similarity_matrix(p, "S00", "lagged")
    assert np.all((m.values >= 0) & (m.values <= 1))
    x = p.values[0]
    assert m.values[3, 5] == sim.lagged_correlation(x[5], x[3])[0]


def test_split_restricts_to_training_weeks():
    p, _ = sg.synth_panel(sg.planted_coupling_spec(n_states=1, seed=0), seed=0)
    m = sim.similarity_matrix(p, "S00", "lagged", split=sg.SplitSpec(30))
    short = sim.similarity_matrix(p.truncate(30), "S00", "lagged")
    assert m.train_weeks == (0, 30) and np.array_equal(m.values, short.values)


def test_planted_source_in_row_top2():
    hits = total = 0
    for seed in range(5):
        spec = sg.planted_coupling_spec(n_states=2, gain=3.0, noise=0.0, seed=seed)
        p, planted = sg.synth_panel(spec, seed=seed)
        mats = {s: sim.similarity_matrix(p, s, "lagged") for s in p.states}
        for state, src, dst, _, _ in planted:
            row = mats[state].values[p.signals.index(dst)].copy()
            row[p.signals.index(dst)] = -np.inf
            top2 = np.argsort(-row, kind="stable")[:2]
            hits += p.signals.index(src) in top2
            total += 1
    assert hits / total >= 0.9


def test_matrix_errors():
    p = sg.panel_from_arrays(np.random.default_rng(0).normal(size=(1, 2, 12)))
    with pytest.raises(KeyError):
        sim.similarity_matrix(p, "nope")
    with pytest.raises(ValueError):
        sim.similarity_matrix(p, "S00", "cosine")


def test_matrix_file_round_trip(tmp_path):
    p, _ = sg.synth_panel(sg.planted_coupling_spec(n_states=1, seed=0), seed=0)
    for measure in sim.MEASURES:
        m = sim.similarity_matrix(p, "S00", measure)
        m.write(tmp_path / f"{measure}.csv")
        back = sim.SimilarityMatrix.read(tmp_path / f"{measure}.csv")
        assert np.array_equal(back.values, m.values) and back.measure == measure
        assert (back.lags is None) == (m.lags is None)
