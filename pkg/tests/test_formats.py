import numpy as np
import pytest

from sdcnet.formats import (
    CtpSeries,
    FormatError,
    PerfusionMaps,
    load_maps,
    load_series,
    maps_from_bytes,
    maps_to_bytes,
    maps_to_csv,
    read_pgm,
    save_maps,
    save_series,
    series_from_bytes,
    series_to_bytes,
    write_pgm,
)


def _series(aif=True):
    rng = np.random.default_rng(0)
    frames = rng.uniform(size=(5, 6, 7))
    mask = rng.uniform(size=(6, 7)) > 0.3
    return CtpSeries(frames, mask, 0.5, rng.uniform(size=5) if aif else None)


@pytest.mark.parametrize("aif", [True, False])
def test_series_roundtrip(tmp_path, aif):
    s = _series(aif)
    save_series(tmp_path / "s.ctp", s)
    again = load_series(tmp_path / "s.ctp")
    assert np.array_equal(again.frames, s.frames) and np.array_equal(again.mask, s.mask)
    assert again.dt == 0.5
    assert (again.aif is None) == (not aif)
    if aif:
        assert np.array_equal(again.aif, s.aif)


def test_series_bad_input():
    data = series_to_bytes(_series())
    with pytest.raises(FormatError, match="magic"):
        series_from_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(FormatError, match="truncated"):
        series_from_bytes(data[:-1])
    with pytest.raises(FormatError, match="trailing"):
        series_from_bytes(data + b"\0")
    with pytest.raises(FormatError, match="version"):
        series_from_bytes(data[:8] + (9).to_bytes(4, "little") + data[12:])


def test_maps_roundtrip_and_csv(tmp_path):
    cbf = np.array([[1.0, 2.5], [0.0, 4.0]])
    cbv = np.array([[0.1, 0.2], [0.0, 0.4]])
    mask = np.array([[True, True], [False, True]])
    maps = PerfusionMaps(cbf, cbv, mask)
    save_maps(tmp_path / "m.maps", maps)
    assert load_maps(tmp_path / "m.maps").equal(maps)
    assert maps_from_bytes(maps_to_bytes(maps)).equal(maps)
    assert maps_to_csv(maps).splitlines() == ["row,col,cbf,cbv", "0,0,1,0.1", "0,1,2.5,0.2", "1,1,4,0.4"]


def test_pgm_roundtrip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 3\n65535\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), np.round(img * 65535).astype(np.uint16))
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "b.pgm", np.zeros(3))
    (tmp_path / "c.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "c.pgm")
