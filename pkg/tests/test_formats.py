import numpy as np
import pytest

from ocdc import formats
from ocdc.errors import FormatError
from ocdc.lowering import decompose_mvm


def test_tensor_round_trip(tmp_path):
    a = np.random.default_rng(0).normal(size=(3, 4, 2))
    formats.write_tensor(tmp_path / "a.ocdt", a)
    raw = (tmp_path / "a.ocdt").read_bytes()
    assert raw[:4] == b"OCDT" and raw[4:8] == b"\x01\x00\x00\x00"
    assert np.array_equal(formats.read_tensor(tmp_path / "a.ocdt"), a)


def test_schedule_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    s = decompose_mvm(rng.normal(size=7), rng.normal(size=(7, 3)), 3)
    formats.write_schedule(tmp_path / "s.ocds", s)
    back = formats.read_schedule(tmp_path / "s.ocds")
    assert np.array_equal(back.slow, s.slow) and np.array_equal(back.fast, s.fast)
    assert np.array_equal(back.accumulator, s.accumulator) and np.array_equal(back.scale, s.scale)
    assert back.accumulator_count == 3
    formats.schedule_to_csv(s, tmp_path / "s.csv")
    header, rows = formats.read_csv(tmp_path / "s.csv")
    assert header[:2] == ["step", "slow_0"] and len(rows) == s.n_steps


def test_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(FormatError):
        formats.read_tensor(p)
    formats.write_tensor(p, np.ones(10))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(FormatError):
        formats.read_tensor(p)
    p.write_bytes(b"OCDT\x02\x00\x00\x00")
    with pytest.raises(FormatError):
        formats.read_tensor(p)


def test_checkpoint_round_trip(tmp_path):
    layers = [(0, 1, [np.ones((2, 3)), np.zeros(3)]), (1, 2, [np.arange(8.0).reshape(2, 2, 1, 2), np.ones(2)])]
    formats.write_checkpoint(tmp_path / "w.ocdw", layers)
    back = formats.read_checkpoint(tmp_path / "w.ocdw")
    assert [(k, a) for k, a, _ in back] == [(0, 1), (1, 2)]
    assert np.array_equal(back[1][2][0], layers[1][2][0])


def test_csv_floats_round_trip_exactly(tmp_path):
    vals = [0.1, 1 / 3, 1e-300, -2.5]
    formats.write_csv(tmp_path / "v.csv", ["i", "v"], enumerate(vals))
    _, rows = formats.read_csv(tmp_path / "v.csv")
    assert [float(r[1]) for r in rows] == vals
    assert rows[1][0] == "1"


def test_pgm_round_trip(tmp_path):
    img = np.linspace(-1, 1, 12).reshape(3, 4)
    formats.write_pgm(tmp_path / "i.pgm", img)
    grey = formats.read_pgm(tmp_path / "i.pgm")
    assert grey.shape == (3, 4) and grey.min() == 0 and grey.max() == 255
    with pytest.raises(FormatError):
        (tmp_path / "bad.pgm").write_bytes(b"P2 nope")
        formats.read_pgm(tmp_path / "bad.pgm")


def test_svg_is_pure_function_of_csv(tmp_path):
    formats.write_csv(tmp_path / "d.csv", ["x", "y"], [(i, i * i / 3) for i in range(10)])
    for kind in ("line", "scatter", "bar"):
        a = formats.svg_from_csv(tmp_path / "d.csv", "x", ["y"], kind=kind, title="t<1>")
        b = formats.svg_from_csv(tmp_path / "d.csv", "x", ["y"], kind=kind, title="t<1>")
        assert a == b and a.startswith("<svg") and "t&lt;1&gt;" in a
    with pytest.raises(ValueError):
        formats.svg_plot([("a", [0, 1], [0, 1])], kind="pie")
