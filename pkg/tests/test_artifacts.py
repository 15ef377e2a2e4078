from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fluxsync.artifacts import (
    ArtifactError,
    atomic_write,
    compare_channels,
    parse_csv,
    read_csv,
    render_csv,
)

floats = st.floats(allow_nan=False, allow_infinity=False, width=64)


class TestCsv:
    @settings(max_examples=50)
    @given(arrays(np.float64, st.tuples(st.integers(0, 20), st.just(3)), elements=floats))
    def test_round_trip_is_exact(self, data):
        ch = {"time_s": data[:, 0], "x": data[:, 1], "y.z": data[:, 2]}
        back, units, meta = parse_csv(render_csv(ch, {"x": "V", "y.z": "pu"}).decode())
        assert list(back) == list(ch)
        for k in ch:
            assert np.array_equal(back[k], ch[k])
        assert units == {"time_s": "s", "x": "V", "y.z": "pu"}

    def test_header_layout(self):
        text = render_csv({"time_s": np.array([0.0, 1e-5]), "a": np.array([1.0, 2.0])},
                          {"a": "MW"}, {"config_sha256": "abc"}).decode()
        lines = text.splitlines()
        assert lines[0] == "# fluxsync timeseries v1"
        assert "%.17g" in lines[1]
        assert lines[2] == "# config_sha256: abc"
        assert lines[3] == "time_s [s],a [MW]"
        assert lines[4] == "0,1"
        assert lines[5] == "1.0000000000000001e-05,2"

    def test_metadata_read_back(self):
        _, _, meta = parse_csv(render_csv({"time_s": np.zeros(1)}, {}, {"status": "ok"}).decode())
        assert meta["status"] == "ok"

    def test_rejects_foreign_files(self):
        with pytest.raises(ArtifactError):
            parse_csv("a,b\n1,2\n")
        with pytest.raises(ValueError):
            render_csv({"x": np.zeros(2)}, {})
        with pytest.raises(ValueError):
            render_csv({"time_s": np.zeros(2), "x": np.zeros(3)}, {})

    def test_read_missing(self, tmp_path):
        with pytest.raises(ArtifactError):
            read_csv(tmp_path / "none.csv")


class TestAtomicWrite:
    def test_writes_and_replaces(self, tmp_path):
        p = tmp_path / "f.txt"
        atomic_write(p, b"one")
        atomic_write(p, b"two")
        assert p.read_bytes() == b"two"
        assert sorted(os.listdir(tmp_path)) == ["f.txt"]

    def test_failure_leaves_no_file(self, tmp_path, monkeypatch):
        p = tmp_path / "f.txt"

        def boom(src, dst):
            raise OSError(28, "No space left on device")

        monkeypatch.setattr(os, "replace", boom)
        with pytest.raises(OSError):
            atomic_write(p, b"data")
        assert os.listdir(tmp_path) == []

    def test_unwritable_directory(self, tmp_path):
        with pytest.raises(OSError):
            atomic_write(tmp_path / "missing" / "f.txt", b"x")


class TestCompare:
    def test_identical(self):
        a = {"time_s": np.arange(5.0), "x": np.arange(5.0)}
        res = compare_channels(a, a)
        assert res["same_time_grid"]
        assert res["channels"]["x"] == {"max_abs": 0.0, "rms": 0.0, "max_rel": 0.0}

    def test_against_hand_computed_difference(self):
        a = {"time_s": np.arange(4.0), "x": np.array([1.0, 2.0, 4.0, -2.0]), "only": np.zeros(4)}
        b = {"time_s": np.arange(4.0), "x": np.array([1.0, 2.5, 4.0, -3.0])}
        d = compare_channels(a, b)
        x = d["channels"]["x"]
        assert x["max_abs"] == 1.0
        assert x["rms"] == pytest.approx(np.sqrt((0.25 + 1.0) / 4))
        assert x["max_rel"] == 0.25
        assert d["only_in_a"] == ["only"]

    def test_interpolates_other_grid(self):
        a = {"time_s": np.linspace(0, 1, 11), "x": np.linspace(0, 1, 11)}
        b = {"time_s": np.linspace(0, 1, 3), "x": np.linspace(0, 1, 3)}
        d = compare_channels(a, b)
        assert not d["same_time_grid"]
        assert d["channels"]["x"]["max_abs"] == pytest.approx(0.0, abs=1e-15)
