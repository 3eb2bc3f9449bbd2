import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elastosel.errors import FormatError
from elastosel.rf_core import (
    HEADER_SIZE,
    MAGIC,
    PairRecord,
    RfFrame,
    downsample_axial,
    frame_from_bytes,
    frame_to_bytes,
    load_frame,
    normalize_frame,
    partition_windows,
    read_labels,
    store_frame,
    write_labels,
)


def _frame(shape=(64, 16), seed=0, **kw):
    return RfFrame(np.random.default_rng(seed).standard_normal(shape).astype(np.float32), **kw)


# -- RfFrame ---------------------------------------------------------------------

@pytest.mark.parametrize("shape", [(63, 16), (64, 15), (64,)])
def test_frame_rejects_bad_shapes(shape):
    with pytest.raises(ValueError):
        RfFrame(np.zeros(shape))


def test_frame_rejects_nonfinite_and_nyquist():
    x = np.zeros((64, 16))
    x[3, 3] = np.inf
    with pytest.raises(ValueError):
        RfFrame(x)
    with pytest.raises(ValueError):
        RfFrame(np.zeros((64, 16)), fs_hz=17e6, f0_hz=8.5e6)
    with pytest.raises(ValueError):
        RfFrame(np.zeros((64, 16)), frame_id=-1)


def test_frame_is_immutable_copy():
    x = np.ones((64, 16))
    f = RfFrame(x)
    x[0, 0] = 5
    assert f.samples[0, 0] == 1
    with pytest.raises(ValueError):
        f.samples[0, 0] = 2


# -- .rf format ------------------------------------------------------------------

def test_roundtrip_bit_exact(tmp_path):
    f = _frame(frame_id=7)
    store_frame(f, tmp_path / "a.rf")
    g = load_frame(tmp_path / "a.rf")
    assert np.array_equal(f.samples.view(np.uint32), g.samples.view(np.uint32))
    assert (g.fs_hz, g.f0_hz, g.frame_id) == (40e6, 8.5e6, 7)


def test_store_is_deterministic_and_sized(tmp_path):
    f = _frame()
    store_frame(f, tmp_path / "a.rf")
    store_frame(f, tmp_path / "b.rf")
    a, b = (tmp_path / "a.rf").read_bytes(), (tmp_path / "b.rf").read_bytes()
    assert a == b
    assert len(a) == HEADER_SIZE + 64 * 16 * 4 == 24 + 4096


def test_header_layout():
    blob = frame_to_bytes(_frame(frame_id=3))
    magic, n_ax, n_lat, fs, f0, fid = struct.unpack("<4sIIffI", blob[:24])
    assert (magic, n_ax, n_lat, fs, f0, fid) == (b"RFF1", 64, 16, 40e6, 8.5e6, 3)


def test_store_rejects_nan_without_writing(tmp_path):
    f = _frame()
    bad = object.__new__(RfFrame)
    s = f.samples.copy()
    s[0, 0] = np.nan
    for k, v in dict(samples=s, fs_hz=f.fs_hz, f0_hz=f.f0_hz, frame_id=0).items():
        object.__setattr__(bad, k, v)
    with pytest.raises(ValueError):
        store_frame(bad, tmp_path / "nan.rf")
    assert not (tmp_path / "nan.rf").exists()


def test_load_errors(tmp_path):
    with pytest.raises(FormatError, match="missing file"):
        load_frame(tmp_path / "nope.rf")
    blob = frame_to_bytes(_frame())
    with pytest.raises(FormatError, match="bad magic"):
        frame_from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError, match="truncated header"):
        frame_from_bytes(blob[:10])
    header = struct.pack("<4sIIffI", MAGIC, 100, 10, 40e6, 8.5e6, 0)
    with pytest.raises(FormatError, match="payload size mismatch"):
        frame_from_bytes(header + np.zeros(999, "<f4").tobytes())
    payload = np.zeros(64 * 16, "<f4")
    payload[5] = np.nan
    with pytest.raises(FormatError, match="non-finite"):
        frame_from_bytes(blob[:24] + payload.tobytes())


@settings(max_examples=25, deadline=None)
@given(st.integers(64, 90), st.integers(16, 24), st.integers(0, 2**32 - 1), st.integers(0, 1000))
def test_roundtrip_property(n_ax, n_lat, seed, fid):
    f = _frame((n_ax, n_lat), seed, frame_id=fid)
    blob = frame_to_bytes(f)
    assert frame_to_bytes(frame_from_bytes(blob)) == blob


# -- downsampling and normalization ---------------------------------------------

def test_downsample_examples():
    f = RfFrame(np.zeros((2304, 384), np.float32))
    assert downsample_axial(f, 2).shape == (1152, 384)
    g = _frame()
    assert downsample_axial(g, 1) is g
    col = np.tile(np.array([1.0, 3.0, 5.0, 7.0] * 16)[:, None], (1, 16))
    out = downsample_axial(RfFrame(col), 2)
    np.testing.assert_array_equal(out.samples[:2, 0], [2, 6])
    assert out.fs_hz == 20e6
    with pytest.raises(ValueError):
        downsample_axial(g, 0)


def test_downsample_odd_length_floors():
    assert downsample_axial(_frame((65, 16)), 2).shape == (32, 16)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([(2, 2), (2, 3), (3, 2), (4, 2)]), st.integers(0, 10_000))
def test_downsample_composes(ab, seed):
    a, b = ab
    f = RfFrame(np.random.default_rng(seed).standard_normal((a * b * 16, 16)))
    once = downsample_axial(f, a * b).samples
    twice = downsample_axial(downsample_axial(f, a), b).samples
    np.testing.assert_allclose(once, twice, atol=1e-12)


def test_normalize_statistics_and_errors():
    x = np.arange(64 * 16, dtype=np.float64).reshape(64, 16)
    n1 = normalize_frame(RfFrame(x)).samples
    assert abs(n1.mean()) < 1e-6 and abs(n1.std() - 1) < 1e-6
    np.testing.assert_allclose(normalize_frame(RfFrame(37.5 * x)).samples, n1, atol=1e-6)
    with pytest.raises(ValueError, match="zero variance"):
        normalize_frame(RfFrame(np.full((64, 16), 3.0)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_normalize_idempotent(seed, scale):
    f = RfFrame(np.random.default_rng(seed).standard_normal((64, 16)) * scale + 4)
    once = normalize_frame(f)
    np.testing.assert_allclose(normalize_frame(once).samples, once.samples, atol=1e-6)


# -- window partition ------------------------------------------------------------

def test_partition_examples():
    assert {w[2:] for w in partition_windows(60, 60).windows} == {(20, 20)}
    assert {w[2:] for w in partition_windows(2304, 384).windows} == {(768, 128)}
    g = partition_windows(64, 16, 8, 2)
    assert {w[2:] for w in g.windows} == {(16, 4)}
    assert min(w[0] for w in g.windows) == 8 and min(w[1] for w in g.windows) == 2
    with pytest.raises(ValueError, match="interior too small"):
        partition_windows(64, 16, 9, 2)


def test_partition_remainder_goes_last():
    g = partition_windows(50, 14)
    rows = sorted({(w[0], w[2]) for w in g.windows})
    cols = sorted({(w[1], w[3]) for w in g.windows})
    assert rows == [(0, 16), (16, 16), (32, 18)]
    assert cols == [(0, 4), (4, 4), (8, 6)]


@settings(max_examples=50, deadline=None)
@given(st.integers(48, 400), st.integers(12, 100), st.integers(0, 20), st.integers(0, 10))
def test_partition_tiles_interior(n_ax, n_lat, ma, ml):
    rows, cols = n_ax - 2 * ma, n_lat - 2 * ml
    try:
        grid = partition_windows(n_ax, n_lat, ma, ml)
    except ValueError:
        assert rows // 3 < 16 or cols // 3 < 4
        return
    cover = np.zeros((n_ax, n_lat), int)
    for sr, sc in grid.slices():
        cover[sr, sc] += 1
    assert len(grid.windows) == 9
    assert all(w[2] >= 16 and w[3] >= 4 for w in grid.windows)
    assert cover[ma:n_ax - ma, ml:n_lat - ml].min() == 1
    assert cover.max() == 1
    assert cover.sum() == rows * cols


# -- records and labels ----------------------------------------------------------

def test_pair_record_invariants():
    with pytest.raises(ValueError):
        PairRecord("p", "a.rf", "a.rf", 1, 0.95, 1.0)
    with pytest.raises(ValueError):
        PairRecord("p", "a.rf", "b.rf", 2, 0.95, 1.0)
    with pytest.raises(ValueError):
        PairRecord("p", "a.rf", "b.rf", 1, 0.95, 1.0, source="clinic")


def test_labels_roundtrip(tmp_path):
    recs = [PairRecord("p0", "a.rf", "b.rf", 1, 0.953125, 1.25),
            PairRecord("p1", "c.rf", "d.rf", 0, -0.5, 0.0)]
    write_labels(recs, tmp_path / "l.csv")
    text = (tmp_path / "l.csv").read_text().splitlines()
    assert text[0] == "pair_id,frame_a,frame_b,min_ncc,mean_abs_disp,label"
    assert text[1] == "p0,a.rf,b.rf,0.953125,1.250000,1"
    assert read_labels(tmp_path / "l.csv") == recs


def test_labels_bad_header(tmp_path):
    (tmp_path / "l.csv").write_text("a,b\n1,2\n")
    with pytest.raises(FormatError):
        read_labels(tmp_path / "l.csv")
