"""Fusing patch-level attention maps into one interpretation heatmap.

Models emit attention on incomparable scales and grids, so each map is
min-max normalized, resampled onto a shared target grid, averaged, and
the result normalized again. The average is computed in a canonical
order so fusion is exactly invariant under permutation of the inputs,
bit for bit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import BadGrid, EmptyMapList, NonFiniteValue


def _check_values(values: tuple[float, ...], rows: int, cols: int) -> None:
    if rows < 1 or cols < 1:
        raise BadGrid(f"grid must be at least 1x1, got {rows}x{cols}")
    if rows * cols != len(values):
        raise ValueError(f"{rows}x{cols} grid needs {rows * cols} values, got {len(values)}")
    for v in values:
        if not math.isfinite(v):
            raise NonFiniteValue(f"map value {v!r} is not finite")


@dataclass(frozen=True)
class AttentionMap:
    """One model's attention over a rows x cols patch grid, row-major."""

    model_id: str
    rows: int
    cols: int
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        _check_values(self.values, self.rows, self.cols)
        if any(v < 0 for v in self.values):
            raise ValueError("attention values must be nonnegative")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64).reshape(self.rows, self.cols)


@dataclass(frozen=True)
class FusedMap:
    """The combined interpretation map, normalized to [0, 1].

    ``degenerate`` marks a constant pre-normalization result that was
    forced to zeros because min-max scaling is undefined on it.
    """

    rows: int
    cols: int
    values: tuple[float, ...]
    source_ids: tuple[str, ...]
    degenerate: bool = False

    def __post_init__(self) -> None:
        _check_values(self.values, self.rows, self.cols)
        if any(not 0.0 <= v <= 1.0 for v in self.values):
            raise ValueError("fused values must lie in [0, 1]")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64).reshape(self.rows, self.cols)


def _minmax(arr: np.ndarray) -> tuple[np.ndarray, bool]:
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        return np.zeros_like(arr), True
    return (arr - lo) / (hi - lo), False


def normalize_map(m: AttentionMap) -> tuple[AttentionMap, bool]:
    """Min-max scale a map to [0, 1].

    A constant map has no range to scale, so it becomes all zeros and the
    returned flag is True. Already-normalized maps pass through exactly.
    """
    scaled, degenerate = _minmax(m.as_array())
    out = AttentionMap(
        model_id=m.model_id,
        rows=m.rows,
        cols=m.cols,
        values=tuple(scaled.reshape(-1).tolist()),
    )
    return out, degenerate


def _axis_positions(src: int, dst: int) -> np.ndarray:
    # align-corners mapping; a single output point samples the source center
    if dst == 1:
        return np.asarray([(src - 1) / 2.0])
    return np.arange(dst, dtype=np.float64) * (src - 1) / (dst - 1)


def resample(m: AttentionMap, target_grid: tuple[int, int]) -> AttentionMap:
    """Bilinear resample onto ``target_grid`` with corner alignment.

    Output values stay within the input's [min, max]. Resampling onto the
    map's own grid returns the values untouched.
    """
    rows, cols = target_grid
    if rows < 1 or cols < 1:
        raise BadGrid(f"target grid must be at least 1x1, got {rows}x{cols}")
    if (rows, cols) == m.grid:
        return m
    src = m.as_array()
    r_pos = _axis_positions(m.rows, rows)
    c_pos = _axis_positions(m.cols, cols)
    r0 = np.floor(r_pos).astype(int)
    c0 = np.floor(c_pos).astype(int)
    r1 = np.minimum(r0 + 1, m.rows - 1)
    c1 = np.minimum(c0 + 1, m.cols - 1)
    fr = (r_pos - r0)[:, None]
    fc = (c_pos - c0)[None, :]
    top = src[np.ix_(r0, c0)] * (1.0 - fc) + src[np.ix_(r0, c1)] * fc
    bottom = src[np.ix_(r1, c0)] * (1.0 - fc) + src[np.ix_(r1, c1)] * fc
    out = top * (1.0 - fr) + bottom * fr
    return AttentionMap(
        model_id=m.model_id,
        rows=rows,
        cols=cols,
        values=tuple(out.reshape(-1).tolist()),
    )


def fuse(
    maps: list[AttentionMap],
    target_grid: tuple[int, int],
    mode: str = "mean",
) -> FusedMap:
    """Normalize, resample, and combine the maps, then normalize again.

    Mean combination sums per-pixel contributions in sorted order, so the
    result is exactly independent of the input order; "max" keeps the
    strongest signal instead. K copies of one map fuse to that map's
    normalized form exactly.
    """
    if not maps:
        raise EmptyMapList("fusion needs at least one map")
    if mode not in ("mean", "max"):
        raise ValueError(f"unknown fusion mode: {mode!r}")
    conditioned = []
    for m in maps:
        normalized, _ = normalize_map(m)
        conditioned.append(resample(normalized, target_grid).as_array())
    stack = np.stack(conditioned)
    if mode == "max":
        combined = stack.max(axis=0)
    else:
        # anchor at the per-pixel min and add the sorted offsets, making
        # the floating-point sum order canonical across permutations
        base = stack.min(axis=0)
        offsets = np.sort(stack - base, axis=0)
        combined = base + offsets.sum(axis=0) / len(maps)
    final, degenerate = _minmax(combined)
    return FusedMap(
        rows=target_grid[0],
        cols=target_grid[1],
        values=tuple(final.reshape(-1).tolist()),
        source_ids=tuple(m.model_id for m in maps),
        degenerate=degenerate,
    )


def render(fused: FusedMap, out_path: str | Path) -> tuple[Path, Path]:
    """Write the fused map as a grayscale PNG plus a JSON sidecar.

    Pixels are value*255 rounded half-up. The sidecar holds the exact raw
    values and reloads bit-identically; its path is the PNG path plus a
    .json suffix. Returns (png_path, sidecar_path).
    """
    png_path = Path(out_path)
    arr = fused.as_array()
    pixels = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(png_path, format="PNG")
    sidecar = png_path.with_name(png_path.name + ".json")
    payload = {
        "rows": fused.rows,
        "cols": fused.cols,
        "values": list(fused.values),
        "source_ids": list(fused.source_ids),
        "degenerate": fused.degenerate,
    }
    sidecar.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return png_path, sidecar


def load_map(path: str | Path, model_id: str | None = None) -> AttentionMap:
    """Read an attention map from a JSON {rows, cols, values} file."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise ValueError("attention map file must hold a JSON object")
    try:
        rows, cols, values = obj["rows"], obj["cols"], obj["values"]
    except KeyError as exc:
        raise ValueError(f"attention map file is missing {exc}") from None
    return AttentionMap(
        model_id=model_id or obj.get("model_id", Path(path).stem),
        rows=int(rows),
        cols=int(cols),
        values=tuple(float(v) for v in values),
    )
