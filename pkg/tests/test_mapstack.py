"""Grid geometry and map-stack persistence."""

import json

import numpy as np
import pytest

from abscope.mapstack import MAPSTACK_FORMAT, PGM_MAXVAL, MapStack, ScanGrid


def make_grid(width=7, height=5):
    return ScanGrid(origin=(-30.0, -20.0), pitch=10.0, width=width, height=height)


class TestScanGrid:
    def test_point_layout(self):
        grid = make_grid()
        assert grid.point(0, 0) == (-30.0, -20.0)
        assert grid.point(0, 3) == (0.0, -20.0)
        assert grid.point(2, 0) == (-30.0, 0.0)
        assert grid.shape == (5, 7)

    def test_coordinate_axes(self):
        grid = make_grid()
        xs = grid.x_coords()
        ys = grid.y_coords()
        assert xs.shape == (7,)
        assert ys.shape == (5,)
        assert xs[0] == -30.0 and xs[-1] == 30.0
        assert ys[0] == -20.0 and ys[-1] == 20.0

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            ScanGrid(origin=(0.0, 0.0), pitch=0.0, width=3, height=3)
        with pytest.raises(ValueError):
            ScanGrid(origin=(0.0, 0.0), pitch=1.0, width=0, height=3)

    def test_json_round_trip(self):
        grid = make_grid()
        assert ScanGrid.from_json(grid.to_json()) == grid


class TestMapStackLayers:
    def test_add_and_get(self):
        grid = make_grid()
        stack = MapStack(grid=grid)
        values = np.arange(35, dtype=float).reshape(5, 7)
        stack.add_layer("intensity", values)
        assert stack.has_layer("intensity")
        assert np.array_equal(stack.layer("intensity"), values)
        assert stack.mask("intensity").all()

    def test_masked_pixels_stored_as_zero(self):
        grid = make_grid()
        stack = MapStack(grid=grid)
        values = np.full(grid.shape, 7.5)
        mask = np.zeros(grid.shape, dtype=bool)
        mask[1, 2] = True
        stack.add_layer("g2", values, mask)
        out = stack.layer("g2")
        assert out[1, 2] == 7.5
        assert out.sum() == 7.5

    def test_shape_mismatch_rejected(self):
        stack = MapStack(grid=make_grid())
        with pytest.raises(ValueError):
            stack.add_layer("x", np.zeros((4, 4)))
        with pytest.raises(ValueError):
            stack.add_layer("x", np.zeros((5, 7)), np.ones((4, 4), dtype=bool))

    def test_unknown_layer(self):
        stack = MapStack(grid=make_grid())
        with pytest.raises(KeyError):
            stack.layer("nope")
        with pytest.raises(KeyError):
            stack.mask("nope")


class TestPersistence:
    def build_stack(self, seed=7):
        rng = np.random.default_rng(seed)
        grid = make_grid()
        stack = MapStack(grid=grid)
        # Awkward magnitudes on purpose: round-tripping must be exact.
        values = rng.standard_normal(grid.shape) * 10.0 ** rng.integers(
            -8, 8, grid.shape)
        mask = rng.random(grid.shape) > 0.3
        stack.add_layer("intensity", values)
        stack.add_layer("sr2", values ** 2, mask)
        return stack

    def test_round_trip_exact(self, tmp_path):
        stack = self.build_stack()
        stack.save(tmp_path / "out")
        back = MapStack.load(tmp_path / "out")
        assert back.grid == stack.grid
        assert back.layer_names() == stack.layer_names()
        for name in stack.layer_names():
            assert np.array_equal(back.layer(name), stack.layer(name))
            assert np.array_equal(back.mask(name), stack.mask(name))

    def test_csv_omits_undefined_pixels(self, tmp_path):
        stack = self.build_stack()
        stack.save(tmp_path / "out")
        lines = (tmp_path / "out" / "sr2.csv").read_text().splitlines()
        assert lines[0] == "row,col,value"
        assert len(lines) == 1 + int(stack.mask("sr2").sum())

    def test_save_is_deterministic(self, tmp_path):
        stack = self.build_stack()
        stack.save(tmp_path / "a")
        stack.save(tmp_path / "b")
        for name in ["mapstack.json", "intensity.csv", "intensity.pgm",
                     "intensity.pgm.json", "sr2.csv", "sr2.pgm", "sr2.pgm.json"]:
            assert (tmp_path / "a" / name).read_bytes() == \
                   (tmp_path / "b" / name).read_bytes()

    def test_pgm_structure(self, tmp_path):
        grid = make_grid(width=4, height=3)
        stack = MapStack(grid=grid)
        values = np.linspace(2.0, 13.0, 12).reshape(3, 4)
        stack.add_layer("intensity", values)
        stack.save(tmp_path)
        raw = (tmp_path / "intensity.pgm").read_bytes()
        header = f"P5\n4 3\n{PGM_MAXVAL}\n".encode()
        assert raw.startswith(header)
        pixels = np.frombuffer(raw[len(header):], dtype=">u2").reshape(3, 4)
        assert pixels[0, 0] == 0
        assert pixels[2, 3] == PGM_MAXVAL
        # Affine scale recorded in the sidecar reproduces the extremes.
        sidecar = json.loads((tmp_path / "intensity.pgm.json").read_text())
        assert sidecar["vmin"] == 2.0
        assert sidecar["vmax"] == 13.0
        assert sidecar["maxval"] == PGM_MAXVAL

    def test_pgm_constant_layer(self, tmp_path):
        grid = make_grid(width=3, height=2)
        stack = MapStack(grid=grid)
        stack.add_layer("flat", np.full(grid.shape, 4.25))
        stack.save(tmp_path)
        raw = (tmp_path / "flat.pgm").read_bytes()
        pixels = np.frombuffer(raw.split(b"\n", 3)[3], dtype=">u2")
        assert (pixels == 0).all()
        sidecar = json.loads((tmp_path / "flat.pgm.json").read_text())
        assert sidecar["vmin"] == sidecar["vmax"] == 4.25

    def test_fully_masked_layer(self, tmp_path):
        grid = make_grid(width=3, height=2)
        stack = MapStack(grid=grid)
        stack.add_layer("g5", np.zeros(grid.shape), np.zeros(grid.shape, dtype=bool))
        stack.save(tmp_path)
        assert (tmp_path / "g5.csv").read_text() == "row,col,value\n"
        back = MapStack.load(tmp_path)
        assert not back.mask("g5").any()

    def test_load_rejects_non_stack_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            MapStack.load(tmp_path)

    def test_load_rejects_unknown_format(self, tmp_path):
        (tmp_path / "mapstack.json").write_text(json.dumps(
            {"format": "something-else", "grid": make_grid().to_json(), "layers": []}))
        with pytest.raises(ValueError):
            MapStack.load(tmp_path)

    def test_manifest_contents(self, tmp_path):
        stack = self.build_stack()
        stack.save(tmp_path)
        meta = json.loads((tmp_path / "mapstack.json").read_text())
        assert meta["format"] == MAPSTACK_FORMAT
        assert meta["layers"] == ["intensity", "sr2"]
        assert meta["grid"]["pitch_nm"] == 10.0
