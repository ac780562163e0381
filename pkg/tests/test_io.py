import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cemeit import io
from cemeit.errors import DimensionError
from cemeit.fem import MeasurementFrame


def test_raw_roundtrip(tmp_path, rng):
    a = rng.standard_normal((3, 5))
    io.write_raw(tmp_path / "a.f64", a, note="x")
    b, meta = io.read_raw(tmp_path / "a.f64")
    np.testing.assert_array_equal(a, b)
    assert meta["shape"] == [3, 5] and meta["note"] == "x"
    # little-endian float64, row-major, no header
    assert (tmp_path / "a.f64").read_bytes() == a.astype("<f8").tobytes()


def test_frame_roundtrips(tmp_path, rng):
    f = MeasurementFrame(rng.standard_normal(256), 16, 16, 0.005, seed=3, mesh_tag="m")
    io.write_frame(tmp_path / "f.f64", f)
    g = io.read_frame(tmp_path / "f.f64")
    np.testing.assert_array_equal(g.voltages, f.voltages)
    assert (g.K, g.L, g.delta, g.seed, g.mesh_tag) == (16, 16, 0.005, 3, "m")
    io.write_frame_csv(tmp_path / "f.csv", f)
    h = io.read_frame_csv(tmp_path / "f.csv")
    np.testing.assert_array_equal(h.voltages, f.voltages)


def test_csv_column_order(tmp_path):
    (tmp_path / "f.csv").write_text("E2,E1,E3\n2,1,3\n5,4,6\n")
    f = io.read_frame_csv(tmp_path / "f.csv")
    np.testing.assert_array_equal(f.matrix, [[1, 2, 3], [4, 5, 6]])
    (tmp_path / "bad.csv").write_text("E1,E2\n1,2,3\n")
    with pytest.raises(DimensionError):
        io.read_frame_csv(tmp_path / "bad.csv")


@settings(max_examples=20, deadline=None)
@given(img=arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_roundtrip(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("pgm") / "x.pgm"
    io.write_pgm(p, img, 0, 255)
    np.testing.assert_array_equal(io.read_pgm(p), img)


def test_pgm_scaling_and_16bit(tmp_path):
    io.write_pgm(tmp_path / "a.pgm", np.array([[0.0, 1.5, 3.0]]), 0.0, 3.0)
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "a.pgm"), [[0, 128, 255]])
    io.write_pgm(tmp_path / "b.pgm", np.array([[0.0, 1.0]]), bits=16)
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "b.pgm"), [[0, 65535]])
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n\x07\x09")
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "c.pgm"), [[7, 9]])
    (tmp_path / "d.pgm").write_bytes(b"P2\n1 1\n255\n7\n")
    with pytest.raises(ValueError):
        io.read_pgm(tmp_path / "d.pgm")


def test_json_numpy_types(tmp_path):
    io.write_json(tmp_path / "x.json", {"a": np.float64(1.5), "b": np.int64(2),
                                        "c": np.arange(3)})
    assert (tmp_path / "x.json").read_text().replace(" ", "").replace("\n", "") == \
        '{"a":1.5,"b":2,"c":[0,1,2]}'
