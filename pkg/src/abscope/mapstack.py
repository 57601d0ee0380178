"""Scan-grid rasters and their on-disk form.

A MapStack is a set of aligned 2D float layers (intensity, g orders,
super-resolved orders, standard errors) over one scan grid, each with a
defined-pixel mask.  Undefined pixels (dark pixels, unconverged estimates)
are carried as mask bits, never as NaN, so layers serialize bit-exactly.

On disk a stack is a directory holding ``mapstack.json`` (grid + layer
names) plus, per layer, a CSV of defined pixels (``row,col,value`` with
17-significant-digit values; absence of a pixel row means undefined) and a
16-bit binary PGM rendering with an affine scale recorded in a JSON sidecar.
The CSV is the canonical numeric form; the PGM is lossy convenience output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["ScanGrid", "MapStack", "MAPSTACK_FORMAT"]

MAPSTACK_FORMAT = "abscope-mapstack/1"
PGM_MAXVAL = 65535


@dataclass(frozen=True)
class ScanGrid:
    """Raster of scan positions: pixel (row, col) sits at
    (origin_x + col*pitch, origin_y + row*pitch) in nm."""

    origin: tuple[float, float]
    pitch: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.pitch <= 0:
            raise ValueError(f"pitch must be > 0, got {self.pitch}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def point(self, row: int, col: int) -> tuple[float, float]:
        return (self.origin[0] + col * self.pitch, self.origin[1] + row * self.pitch)

    def x_coords(self) -> np.ndarray:
        return self.origin[0] + self.pitch * np.arange(self.width)

    def y_coords(self) -> np.ndarray:
        return self.origin[1] + self.pitch * np.arange(self.height)

    def to_json(self) -> dict:
        return {"origin": [self.origin[0], self.origin[1]], "pitch_nm": self.pitch,
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, data: dict) -> "ScanGrid":
        return cls(origin=(float(data["origin"][0]), float(data["origin"][1])),
                   pitch=float(data["pitch_nm"]), width=int(data["width"]),
                   height=int(data["height"]))


@dataclass
class MapStack:
    grid: ScanGrid
    layers: dict[str, np.ndarray] = field(default_factory=dict)
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def add_layer(self, name: str, values: np.ndarray, mask: np.ndarray | None = None) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.grid.shape:
            raise ValueError(f"layer {name!r} shape {values.shape} does not match "
                             f"grid shape {self.grid.shape}")
        if mask is None:
            mask = np.ones(self.grid.shape, dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != self.grid.shape:
                raise ValueError(f"mask for {name!r} has wrong shape {mask.shape}")
        # Undefined pixels hold 0.0 by convention so arrays stay NaN-free.
        values = np.where(mask, values, 0.0)
        self.layers[name] = values
        self.masks[name] = mask

    def layer(self, name: str) -> np.ndarray:
        if name not in self.layers:
            raise KeyError(f"no layer {name!r}; have {sorted(self.layers)}")
        return self.layers[name]

    def mask(self, name: str) -> np.ndarray:
        if name not in self.masks:
            raise KeyError(f"no layer {name!r}; have {sorted(self.layers)}")
        return self.masks[name]

    def has_layer(self, name: str) -> bool:
        return name in self.layers

    def layer_names(self) -> list[str]:
        return list(self.layers)

    # -- persistence ---------------------------------------------------

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {"format": MAPSTACK_FORMAT, "grid": self.grid.to_json(),
                "layers": self.layer_names()}
        (directory / "mapstack.json").write_text(
            json.dumps(meta, indent=2, sort_keys=True) + "\n")
        for name in self.layers:
            self._write_layer_csv(directory / f"{name}.csv", name)
            self._write_layer_pgm(directory / f"{name}.pgm", name)

    def _write_layer_csv(self, path: Path, name: str) -> None:
        values = self.layers[name]
        mask = self.masks[name]
        lines = ["row,col,value"]
        for row in range(self.grid.height):
            for col in range(self.grid.width):
                if mask[row, col]:
                    lines.append(f"{row},{col},{values[row, col]:.17g}")
        path.write_text("\n".join(lines) + "\n")

    def _write_layer_pgm(self, path: Path, name: str) -> None:
        values = self.layers[name]
        mask = self.masks[name]
        defined = values[mask]
        if defined.size and math.isfinite(defined.min()):
            vmin = float(defined.min())
            vmax = float(defined.max())
        else:
            vmin = vmax = 0.0
        scaled = np.zeros(values.shape, dtype=np.uint16)
        if vmax > vmin:
            norm = (values - vmin) / (vmax - vmin)
            scaled = np.where(mask, np.rint(norm * PGM_MAXVAL), 0).astype(np.uint16)
        header = f"P5\n{self.grid.width} {self.grid.height}\n{PGM_MAXVAL}\n"
        path.write_bytes(header.encode("ascii") + scaled.astype(">u2").tobytes())
        sidecar = {"vmin": vmin, "vmax": vmax, "maxval": PGM_MAXVAL,
                   "undefined_pixel_value": 0}
        path.with_suffix(".pgm.json").write_text(
            json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "MapStack":
        directory = Path(directory)
        meta_path = directory / "mapstack.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"{directory} is not a map-stack directory "
                                    "(no mapstack.json)")
        meta = json.loads(meta_path.read_text())
        if meta.get("format") != MAPSTACK_FORMAT:
            raise ValueError(f"unsupported map-stack format {meta.get('format')!r}")
        grid = ScanGrid.from_json(meta["grid"])
        stack = cls(grid=grid)
        for name in meta["layers"]:
            values = np.zeros(grid.shape, dtype=np.float64)
            mask = np.zeros(grid.shape, dtype=bool)
            text = (directory / f"{name}.csv").read_text().splitlines()
            if not text or text[0] != "row,col,value":
                raise ValueError(f"layer file {name}.csv has no 'row,col,value' header")
            for line in text[1:]:
                row_s, col_s, value_s = line.split(",")
                row, col = int(row_s), int(col_s)
                values[row, col] = float(value_s)
                mask[row, col] = True
            stack.layers[name] = values
            stack.masks[name] = mask
        return stack
