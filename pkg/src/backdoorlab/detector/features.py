"""Anchor grid and the fixed colour-statistics feature extractor.

Every grid cell is one candidate box. The extractor pools colour statistics
over one or more *views* of the cell: a view is a window whose size and
centre offset are given relative to the cell, e.g. ``(1.0, 0, 0)`` is the
cell itself and ``(0.4, -0.3, -0.3)`` its top-left corner. Each view yields
one feature vector and hence one prediction, all sharing the cell box, which
is how several predictions come to overlap the same object. Pixels outside the
image count as black, so the extractor is translation-equivariant: the same
pixels around two cells give the same vectors.

Vector layout: ``[mean R, mean G, mean B, R hist (bins), G hist, B hist,
view one-hot (views 1..V-1), 1]``. Histogram masses are raised to ``power``
(0.5 by default) so that small patches stay visible to a linear head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import BoundingBox


@dataclass(frozen=True)
class AnchorGrid:
    rows: int
    cols: int
    image_width: int
    image_height: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs positive rows and cols")
        if self.image_width % self.cols or self.image_height % self.rows:
            raise ValueError("image size must be divisible by the grid")

    @property
    def cell_width(self) -> int:
        return self.image_width // self.cols

    @property
    def cell_height(self) -> int:
        return self.image_height // self.rows

    @property
    def anchors(self) -> list[BoundingBox]:
        cw, ch = self.cell_width, self.cell_height
        return [BoundingBox(c * cw, r * ch, (c + 1) * cw, (r + 1) * ch)
                for r in range(self.rows) for c in range(self.cols)]

    def boxes(self) -> np.ndarray:
        return np.array([a.as_list() for a in self.anchors], dtype=float)

    @classmethod
    def for_image(cls, image: np.ndarray, rows: int, cols: int) -> "AnchorGrid":
        return cls(rows, cols, image.shape[1], image.shape[0])


@dataclass(frozen=True)
class FeatureExtractor:
    bins: int = 4
    views: tuple[tuple[float, float, float], ...] = ((1.0, 0.0, 0.0),)
    power: float = 0.5

    def __post_init__(self):
        views = tuple(tuple(float(v) for v in view) for view in self.views)
        object.__setattr__(self, "views", views)
        if self.bins < 1 or not views or any(len(v) != 3 or v[0] <= 0 for v in views):
            raise ValueError("bad feature extractor spec")
        if views[0] != (1.0, 0.0, 0.0):
            raise ValueError("the first view must be the cell itself")
        if not self.power > 0:
            raise ValueError("power must be positive")

    @property
    def levels(self) -> int:
        """Number of views (predictions) per cell."""
        return len(self.views)

    @property
    def output_dim(self) -> int:
        return 3 + 3 * self.bins + (self.levels - 1) + 1

    def to_dict(self) -> dict:
        return {"bins": self.bins, "views": [list(v) for v in self.views], "power": self.power}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureExtractor":
        return cls(bins=d["bins"], views=tuple(tuple(v) for v in d["views"]), power=d["power"])

    def _block_table(self, image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Summed-area table over the rectilinear blocks cut by edges ``xs`` x ``ys``.

        ``xs``/``ys`` are sorted, start at 0 and end at the image size. Entry
        ``[i, j]`` holds channel sums over rows ``< ys[i]`` and columns ``< xs[j]``;
        histogram channels hold pixel counts. Integer sums keep it exact.
        """
        img = np.asarray(image)
        h, w = img.shape[:2]
        nby, nbx = len(ys) - 1, len(xs) - 1
        row_blk = np.searchsorted(ys, np.arange(h), side="right") - 1
        col_blk = np.searchsorted(xs, np.arange(w), side="right") - 1
        label = (row_blk[:, None] * nbx + col_blk[None, :])[..., None]
        n_ch = 3 + 3 * self.bins
        table = np.zeros((nby + 1, nbx + 1, n_ch), dtype=np.int64)
        if nby == 0 or nbx == 0:
            return table
        vals = np.add.reduceat(np.add.reduceat(img.astype(np.int64), ys[:-1], axis=0), xs[:-1], axis=1)
        bins = (img.astype(np.int64) * self.bins) // 256 + np.arange(3) * self.bins
        counts = np.bincount((label * (3 * self.bins) + bins).ravel(), minlength=nby * nbx * 3 * self.bins)
        blocks = np.concatenate([vals, counts.reshape(nby, nbx, 3 * self.bins)], axis=2)
        table[1:, 1:] = blocks.cumsum(0).cumsum(1)
        return table

    def _pool_windows(self, image: np.ndarray, x0, y0, x1, y1, level) -> np.ndarray:
        """Pooled features for windows given as arrays of corner coordinates.

        Windows may extend past the image; the outside counts as black pixels,
        i.e. zero value and histogram bin 0 in every channel.
        """
        x0, y0, x1, y1, level = (np.atleast_1d(np.asarray(v, dtype=np.int64)) for v in (x0, y0, x1, y1, level))
        h, w = image.shape[:2]
        cx0, cx1 = np.clip(x0, 0, w), np.clip(x1, 0, w)
        cy0, cy1 = np.clip(y0, 0, h), np.clip(y1, 0, h)
        xs = np.unique(np.concatenate([[0, w], cx0, cx1]))
        ys = np.unique(np.concatenate([[0, h], cy0, cy1]))
        table = self._block_table(image, xs, ys)
        i0, i1 = np.searchsorted(ys, cy0), np.searchsorted(ys, cy1)
        j0, j1 = np.searchsorted(xs, cx0), np.searchsorted(xs, cx1)
        s = (table[i1, j1] - table[i0, j1] - table[i1, j0] + table[i0, j0]).astype(float)
        s[:, :3] /= 255.0
        area = ((x1 - x0) * (y1 - y0)).astype(float)
        outside = area - (cx1 - cx0) * (cy1 - cy0)
        s[:, 3::self.bins] += outside[:, None]
        stats = s / area[:, None]
        hist = np.clip(stats[:, 3:], 0.0, None) ** self.power
        onehot = np.zeros((level.size, self.levels))
        onehot[np.arange(level.size), level] = 1.0
        return np.concatenate([stats[:, :3], hist, onehot[:, 1:], np.ones((level.size, 1))], axis=1)

    def _windows(self, box: BoundingBox):
        cx, cy = box.center
        for level, (scale, dx, dy) in enumerate(self.views):
            vx, vy = cx + dx * box.width, cy + dy * box.height
            half_w, half_h = scale * box.width / 2.0, scale * box.height / 2.0
            x0, y0 = int(round(vx - half_w)), int(round(vy - half_h))
            x1, y1 = max(int(round(vx + half_w)), x0 + 1), max(int(round(vy + half_h)), y0 + 1)
            yield level, (x0, y0, x1, y1)

    def extract(self, image: np.ndarray, anchor: BoundingBox, level: int = 0) -> np.ndarray:
        """Feature vector for one anchor and one view."""
        h, w = image.shape[:2]
        if anchor.x_min < 0 or anchor.y_min < 0 or anchor.x_max > w or anchor.y_max > h or anchor.degenerate:
            raise ValueError(f"anchor {anchor.as_list()} is outside the {w}x{h} image")
        lvl, (x0, y0, x1, y1) = list(self._windows(anchor))[level]
        return self._pool_windows(image, x0, y0, x1, y1, lvl)[0]

    def extract_grid(self, image: np.ndarray, grid: AnchorGrid) -> np.ndarray:
        """``(levels * cells, d)`` features; row ``level * cells + cell``."""
        wins = [(level,) + win for level in range(self.levels) for box in grid.anchors
                for lv, win in self._windows(box) if lv == level]
        lv, x0, y0, x1, y1 = (np.array(c) for c in zip(*wins))
        return self._pool_windows(image, x0, y0, x1, y1, lv)

    def anchor_boxes(self, grid: AnchorGrid) -> np.ndarray:
        """Boxes matching the rows of ``extract_grid``."""
        return np.tile(grid.boxes(), (self.levels, 1))


def extract_features(image: np.ndarray, anchor: BoundingBox, extractor: FeatureExtractor = FeatureExtractor()) -> np.ndarray:
    return extractor.extract(image, anchor)


def corner_views(size: float = 0.4, offset: float = 0.3) -> tuple[tuple[float, float, float], ...]:
    """The cell itself plus four corner windows of side ``size`` (relative to the cell)."""
    return ((1.0, 0.0, 0.0),) + tuple((size, sx * offset, sy * offset) for sy in (-1, 1) for sx in (-1, 1))
