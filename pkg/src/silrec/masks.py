"""Silhouette masks: PGM ingestion, foreground sampling, and rasterization.

Mask pixels are thresholded at 50% gray.  Sampling draws pixel centers
uniformly from the FILLED foreground region (the projected point cloud fills
the object's image region, so interior samples are what the two-sided Chamfer
term should see).  Sampled sets are mapped to the camera frame by flipping y
to mathematical orientation, centering on their centroid, and scaling the RMS
radius to ``MASK_RMS_RADIUS`` -- the RMS planar radius of an orthographically
projected uniformly-filled unit ball, sqrt(2/5).  Residual scale mismatch is
handled by the optional alignment variables in the inference config.

Rasterization covers the square [-1.2, 1.2]^2 with a resolution^2 grid and
splats a disk per point.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

MASK_RMS_RADIUS = float(np.sqrt(2.0 / 5.0))
RASTER_EXTENT = 1.2


class MaskParseError(ValueError):
    """Raised for malformed PGM files."""


class EmptyForegroundError(ValueError):
    """Raised when a mask has no foreground pixels."""


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray  # (height, width) bool, row 0 = top of image

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=bool)
        if b.ndim != 2 or b.size == 0:
            raise ValueError(f"bits must be a nonempty (H, W) grid, got {b.shape}")
        object.__setattr__(self, "bits", b)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def n_foreground(self) -> int:
        return int(self.bits.sum())


# ---------------------------------------------------------------------------
# PGM I/O


def _pgm_tokens(data: bytes):
    """Yield header tokens, skipping '#' comments, and report the byte offset."""
    i = 0
    while i < len(data):
        c = data[i : i + 1]
        if c.isspace():
            i += 1
        elif c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            yield data[i:j], j
            i = j


def load_mask(path: str | Path) -> BinaryMask:
    """Parse a P2 (ASCII) or P5 (binary) PGM; threshold at 50% of maxval."""
    data = Path(path).read_bytes()
    toks = _pgm_tokens(data)
    try:
        magic, _ = next(toks)
        (w, _), (h, _), (maxval, end) = (next(toks) for _ in range(3))
        w, h, maxval = int(w), int(h), int(maxval)
    except (StopIteration, ValueError) as e:
        raise MaskParseError(f"{path}: malformed PGM header") from e
    if magic not in (b"P2", b"P5") or w < 1 or h < 1 or maxval < 1:
        raise MaskParseError(f"{path}: unsupported PGM header {magic!r} {w}x{h} max {maxval}")
    if magic == b"P2":
        try:
            vals = np.array([int(t) for t, _ in toks], dtype=np.int64)
        except ValueError as e:
            raise MaskParseError(f"{path}: bad ASCII sample") from e
    else:
        body = data[end + 1 :]
        if maxval > 255:
            raise MaskParseError(f"{path}: 16-bit P5 not supported")
        vals = np.frombuffer(body[: w * h], dtype=np.uint8).astype(np.int64)
    if vals.size != w * h:
        raise MaskParseError(f"{path}: expected {w * h} samples, got {vals.size}")
    bits = (vals.reshape(h, w) * 2) > maxval
    mask = BinaryMask(bits)
    if mask.n_foreground == 0:
        raise EmptyForegroundError(f"{path}: mask has no foreground pixels")
    return mask


def save_mask(path: str | Path, mask: BinaryMask) -> None:
    """Write as binary P5 PGM (foreground 255, background 0)."""
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mask.width} {mask.height}\n255\n".encode())
        fh.write((mask.bits.astype(np.uint8) * 255).tobytes())


# ---------------------------------------------------------------------------
# sampling and rasterization


def erode(mask: BinaryMask, radius: float) -> BinaryMask:
    """Shrink the foreground by a disk of the given camera-frame radius.

    Undoes the dilation that :func:`rasterize` applies (one splat disk per
    point), so eroding a rasterized mask by its splat radius approximately
    recovers the footprint of the original point set.  If erosion would
    empty the mask, the input is returned unchanged.
    """
    from scipy.ndimage import binary_erosion

    if radius <= 0:
        return mask
    pitch = 2.0 * RASTER_EXTENT / mask.width
    r_pix = radius / pitch
    n = int(np.floor(r_pix))
    if n < 1:
        return mask
    yy, xx = np.mgrid[-n:n + 1, -n:n + 1]
    disk = (xx ** 2 + yy ** 2) <= r_pix ** 2
    bits = binary_erosion(mask.bits, structure=disk)
    return BinaryMask(bits) if bits.any() else mask


def sample_mask(mask: BinaryMask, m: int, seed: int,
                rms_radius: float = MASK_RMS_RADIUS,
                frame: str = "rms") -> np.ndarray:
    """Draw ``m`` foreground pixel centers and map them to the camera frame.

    ``frame="raster"`` inverts the :func:`rasterize` geometry exactly: pixel
    centers land in the [-RASTER_EXTENT, RASTER_EXTENT]^2 square, so masks
    produced by this pipeline need no further calibration (pair with
    :func:`erode` to undo splat dilation).  ``frame="rms"`` is for external
    masks of unknown scale: the samples are centered on their centroid and
    scaled so the RMS point norm equals ``rms_radius`` (a degenerate
    single-position sample keeps scale 1); residual error is left to the
    inference alignment variables.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if frame not in ("rms", "raster"):
        raise ValueError(f"unknown frame {frame!r}")
    rows, cols = np.nonzero(mask.bits)
    if rows.size == 0:
        raise EmptyForegroundError("mask has no foreground pixels")
    rng = np.random.default_rng(seed)
    pick = rng.integers(rows.size, size=m)
    if frame == "raster":
        if mask.width != mask.height:
            raise ValueError("raster frame requires a square mask")
        pitch = 2.0 * RASTER_EXTENT / mask.width
        x = -RASTER_EXTENT + (cols[pick] + 0.5) * pitch
        y = RASTER_EXTENT - (rows[pick] + 0.5) * pitch
        return np.column_stack([x, y]).astype(np.float64)
    # pixel centers, y flipped to mathematical orientation
    x = cols[pick] + 0.5
    y = mask.height - (rows[pick] + 0.5)
    pts = np.column_stack([x, y]).astype(np.float64)
    pts -= pts.mean(axis=0)
    rms = float(np.sqrt((pts ** 2).sum(axis=1).mean()))
    if rms > 1e-12:
        pts *= rms_radius / rms
    return pts


def rasterize(points: np.ndarray, resolution: int, splat_radius: float) -> BinaryMask:
    """Splat a disk per 2D point onto a grid covering [-1.2, 1.2]^2."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.size and not np.all(np.isfinite(pts)):
        raise ValueError("non-finite points")
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    bits = np.zeros((resolution, resolution), dtype=bool)
    if pts.size == 0:
        return BinaryMask(bits)
    pitch = 2.0 * RASTER_EXTENT / resolution
    # pixel-center coordinates (row 0 = top, so y decreasing with row index)
    cols_x = -RASTER_EXTENT + (np.arange(resolution) + 0.5) * pitch
    rows_y = RASTER_EXTENT - (np.arange(resolution) + 0.5) * pitch
    r_pix = splat_radius / pitch
    for px, py in pts:
        ci = (px + RASTER_EXTENT) / pitch - 0.5
        ri = (RASTER_EXTENT - py) / pitch - 0.5
        c_lo = max(int(np.floor(ci - r_pix)) - 1, 0)
        c_hi = min(int(np.ceil(ci + r_pix)) + 2, resolution)
        r_lo = max(int(np.floor(ri - r_pix)) - 1, 0)
        r_hi = min(int(np.ceil(ri + r_pix)) + 2, resolution)
        if c_lo >= c_hi or r_lo >= r_hi:
            continue
        dx = cols_x[c_lo:c_hi] - px
        dy = rows_y[r_lo:r_hi] - py
        hit = (dy[:, None] ** 2 + dx[None, :] ** 2) <= splat_radius ** 2
        bits[r_lo:r_hi, c_lo:c_hi] |= hit
    return BinaryMask(bits)


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    if a.bits.shape != b.bits.shape:
        raise ValueError("mask shapes differ")
    inter = np.logical_and(a.bits, b.bits).sum()
    union = np.logical_or(a.bits, b.bits).sum()
    return float(inter / union) if union else 1.0
