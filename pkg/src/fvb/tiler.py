"""Static vs dynamic (AnyRes-style) input resolution.

Static plans feed the image to the encoder at its native resolution.
Dynamic plans resize the image to a ``rows*tile x cols*tile`` canvas, cut it
into row-major tiles, optionally append a base thumbnail (the whole image
resized to one tile) and concatenate every tile's tokens in that order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderModel, TokenGrid, forward
from .errors import ShapeError, UsageError
from .tensor import resize_bilinear

STATIC = "static"
DYNAMIC = "dynamic"


@dataclass(frozen=True)
class TilePlan:
    mode: str
    input_res: tuple  # (h, w) of the incoming image
    downsample_factor: int
    tile_size: int | None = None
    grid: tuple | None = None  # (rows, cols)
    include_base: bool = True

    @property
    def canvas(self) -> tuple:
        """Spatial size the image is resized to before splitting."""
        if self.mode == STATIC:
            return self.input_res
        return (self.grid[0] * self.tile_size, self.grid[1] * self.tile_size)

    @property
    def num_tiles(self) -> int:
        return 1 if self.mode == STATIC else self.grid[0] * self.grid[1]

    @property
    def num_encodings(self) -> int:
        if self.mode == STATIC:
            return 1
        return self.num_tiles + int(self.include_base)

    def token_count(self) -> int:
        f = self.downsample_factor
        if self.mode == STATIC:
            h, w = self.input_res
            return (h // f) * (w // f)
        return self.num_encodings * (self.tile_size // f) ** 2


def _pair(v) -> tuple:
    if isinstance(v, int):
        return (v, v)
    h, w = v
    return (int(h), int(w))


def plan(mode: str, input_res, tile_size: int | None = None, grid=None, downsample_factor: int = 64, include_base: bool = True) -> TilePlan:
    """Validate a tiling strategy for one image."""
    res = _pair(input_res)
    if downsample_factor < 1:
        raise UsageError("downsample factor must be positive")
    if min(res) < 1:
        raise ShapeError(f"invalid input resolution {res}")
    if mode == STATIC:
        if res[0] % downsample_factor or res[1] % downsample_factor:
            raise ShapeError(
                f"static input {res[0]}x{res[1]} not divisible by downsample factor {downsample_factor}"
            )
        return TilePlan(mode=STATIC, input_res=res, downsample_factor=downsample_factor)
    if mode != DYNAMIC:
        raise UsageError(f"unknown tiling mode {mode!r}")
    if tile_size is None or grid is None:
        raise UsageError("dynamic plans need tile_size and grid")
    grid = _pair(grid)
    if grid[0] < 1 or grid[1] < 1:
        raise ShapeError(f"zero-area tile grid {grid[0]}x{grid[1]}")
    if tile_size < 1 or tile_size % downsample_factor:
        raise ShapeError(f"tile size {tile_size} not divisible by downsample factor {downsample_factor}")
    return TilePlan(
        mode=DYNAMIC,
        input_res=res,
        downsample_factor=downsample_factor,
        tile_size=tile_size,
        grid=grid,
        include_base=bool(include_base),
    )


def parse_grid(text: str) -> tuple:
    """'2x2' -> (2, 2)."""
    try:
        rows, cols = text.lower().split("x")
        return (int(rows), int(cols))
    except ValueError as exc:
        raise UsageError(f"grid must look like ROWSxCOLS, got {text!r}") from exc


def canonicalize(image: np.ndarray, p: TilePlan) -> np.ndarray:
    if tuple(image.shape[2:]) != p.input_res:
        raise ShapeError(f"image is {image.shape[2]}x{image.shape[3]}, plan expects {p.input_res}")
    return resize_bilinear(image, *p.canvas)


def split(image: np.ndarray, p: TilePlan) -> list:
    if tuple(image.shape[2:]) != p.input_res:
        raise ShapeError(f"image is {image.shape[2]}x{image.shape[3]}, plan expects {p.input_res}")
    if p.mode == STATIC:
        return [image]
    canvas = canonicalize(image, p)
    t = p.tile_size
    tiles = [
        np.ascontiguousarray(canvas[:, :, r * t : (r + 1) * t, c * t : (c + 1) * t])
        for r in range(p.grid[0])
        for c in range(p.grid[1])
    ]
    if p.include_base:
        tiles.append(resize_bilinear(image, t, t))
    return tiles


def reassemble(tiles, p: TilePlan) -> np.ndarray:
    """Inverse of the crop step: stitch the grid tiles (base excluded) back together."""
    if p.mode == STATIC:
        return tiles[0]
    rows, cols = p.grid
    grid_tiles = tiles[: rows * cols]
    return np.concatenate(
        [np.concatenate(grid_tiles[r * cols : (r + 1) * cols], axis=3) for r in range(rows)], axis=2
    )


def encode_tiled(model: EncoderModel, image: np.ndarray, p: TilePlan, workers: int = 1) -> TokenGrid:
    """Encode every tile and concatenate tokens in split order.

    Tiles may run on a thread pool; the output order never depends on
    completion order. The result grid stacks tile grids vertically.
    """
    f = model.config.downsample_factor
    if p.mode == DYNAMIC and p.tile_size % f:
        raise ShapeError(f"tile size {p.tile_size} not divisible by encoder factor {f}")
    tiles = split(image, p)
    if workers > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            grids = list(pool.map(lambda t: forward(model, t), tiles))
    else:
        grids = [forward(model, t) for t in tiles]
    if len(grids) == 1:
        return grids[0]
    gh, gw = grids[0].grid
    tokens = np.concatenate([g.tokens for g in grids], axis=1)
    return TokenGrid(tokens=tokens, grid=(gh * len(grids), gw))
