import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from curveclust._core import ConfigError, DataError
from curveclust.dataset import (Curve, FunctionalDataset, WaveformSpec, WAVEFORM_GRID, WAVEFORM_PAIRS,
                                generate_regime_curves, generate_waveform, load_csv, save_csv, waveform_base)


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_basic(tmp_path):
    ds = load_csv(write(tmp_path, "curve_id,x,y\na,1,2.0\na,2,3.0\nb,1,0.0\nb,2,1.0\n"))
    assert ds.n == 2 and ds.common_grid
    assert [len(c.xs) for c in ds.curves] == [2, 2]


def test_load_sorts_rows(tmp_path):
    ds = load_csv(write(tmp_path, "curve_id,x,y\na,3,30\na,1,10\na,2,20\n"))
    np.testing.assert_array_equal(ds.curves[0].xs, [1, 2, 3])
    np.testing.assert_array_equal(ds.curves[0].ys, [10, 20, 30])


def test_load_inconsistent_label(tmp_path):
    with pytest.raises(DataError, match="inconsistent label"):
        load_csv(write(tmp_path, "curve_id,x,y,label\na,1,2,1\na,2,3,2\n"))


@pytest.mark.parametrize("text, pattern", [
    ("", "empty"),
    ("curve_id,x,y\n", "no data"),
    ("curve_id,x,y\na,1,oops\n", ":2: malformed"),
    ("curve_id,x,y\na,1,2\na,1,3\n", "duplicate x"),
    ("id,x,y\na,1,2\n", "header"),
    ("curve_id,x,y\na,1\n", ":2: expected 3"),
])
def test_load_errors(tmp_path, text, pattern):
    with pytest.raises(DataError, match=pattern):
        load_csv(write(tmp_path, text))


def test_non_common_grid(tmp_path):
    ds = load_csv(write(tmp_path, "curve_id,x,y\na,1,2\na,2,3\nb,1,0\nb,3,1\n"))
    assert not ds.common_grid
    with pytest.raises(DataError, match="b"):
        ds.require_common_grid("test")


def test_curve_invariants():
    with pytest.raises(DataError):
        Curve("a", [1, 1], [0, 0])
    with pytest.raises(DataError):
        Curve("a", [1, 2], [0])
    with pytest.raises(DataError):
        Curve("a", [1, 2], [0, np.nan])
    with pytest.raises(DataError):
        Curve("a", [], [])


def test_save_labels_and_unwritable(tmp_path):
    ds = FunctionalDataset.from_matrix([0, 1], [[1, 2], [3, 4]], labels=[1, 2])
    p = tmp_path / "o.csv"
    save_csv(ds, p)
    assert p.read_text().splitlines()[0] == "curve_id,x,y,label"
    with pytest.raises(OSError):
        save_csv(ds, tmp_path / "missing" / "o.csv")


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def datasets(draw):
    n = draw(st.integers(1, 4))
    curves = []
    for i in range(n):
        m = draw(st.integers(1, 6))
        xs = sorted(draw(st.sets(finite, min_size=m, max_size=m)))
        ys = draw(st.lists(finite, min_size=m, max_size=m))
        curves.append((f"c{i}", xs, ys))
    labeled = draw(st.booleans())
    return FunctionalDataset(tuple(Curve(cid, xs, ys, (i + 1 if labeled else None))
                                   for i, (cid, xs, ys) in enumerate(curves)))


@settings(max_examples=100, deadline=None)
@given(datasets())
def test_csv_round_trip(tmp_path_factory, ds):
    p = tmp_path_factory.mktemp("rt") / "d.csv"
    save_csv(ds, p)
    back = load_csv(p)
    assert back.curves == ds.curves


def test_waveform_base_peaks():
    assert waveform_base(1, 11) == 6 and waveform_base(2, 15) == 6 and waveform_base(3, 7) == 6
    np.testing.assert_array_equal(waveform_base(2, WAVEFORM_GRID), waveform_base(1, WAVEFORM_GRID - 4))
    np.testing.assert_array_equal(WAVEFORM_GRID, np.arange(1, 22))


def test_waveform_noiseless_endpoint():
    ds = generate_waveform(WaveformSpec(30, seed=3, noise_sd=0.0))
    u = np.array(ds.meta["u"])
    assert len(ds.grid()) == 21
    for c, ui in zip(ds.curves, u):
        a, b = WAVEFORM_PAIRS[c.label]
        np.testing.assert_allclose(c.ys, ui * waveform_base(a, WAVEFORM_GRID) + (1 - ui) * waveform_base(b, WAVEFORM_GRID))
    counts = np.bincount(ds.labels)[1:]
    assert counts.max() - counts.min() <= 1


def test_waveform_class_means():
    ds = generate_waveform(WaveformSpec(3000, seed=1, noise_sd=0.0))
    Y, lab = ds.matrix(), ds.labels
    for c, (a, b) in WAVEFORM_PAIRS.items():
        sub = Y[lab == c]
        target = 0.5 * (waveform_base(a, WAVEFORM_GRID) + waveform_base(b, WAVEFORM_GRID))
        se = sub.std(0, ddof=1) / np.sqrt(len(sub))
        assert np.all(np.abs(sub.mean(0) - target) <= 3 * se + 1e-12)


def test_waveform_spec_validation():
    with pytest.raises(ConfigError):
        WaveformSpec(2)
    with pytest.raises(ConfigError):
        WaveformSpec(10, noise_sd=-1)


def test_regime_generator():
    ds = generate_regime_curves(1, 1, 5, degree=0, noise_sd=0.0, seed=4)
    Y = ds.matrix()
    assert Y.shape == (5, 200)
    assert np.all(Y == Y[0, 0])
    ds = generate_regime_curves(2, 3, 100, proportions=(0.5, 0.5), seed=1)
    assert np.bincount(ds.labels)[1:].tolist() == [50, 50]
    cp = ds.meta["change_points"]
    assert len(cp) == 2 and all(c[0] == 0 and c[-1] == 200 and len(c) == 4 for c in cp)


def test_generators_deterministic(tmp_path):
    for make in (lambda: generate_waveform(WaveformSpec(50, seed=9)),
                 lambda: generate_regime_curves(3, 2, 40, degree=1, seed=9)):
        save_csv(make(), tmp_path / "a.csv")
        save_csv(make(), tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
