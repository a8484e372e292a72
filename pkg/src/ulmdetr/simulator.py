"""Synthetic ultrasound-like frames with point-scatterer microbubbles.

Each bubble is a stationary 2-D Gaussian PSF. Intensities are divided by the
single-bubble peak, then zero-mean Gaussian noise is added. Ground-truth boxes
span ``center +/- 3 sigma`` on each axis, and centers are drawn with that same
margin from the frame edge so boxes never leave the frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frames import Frame
from .geometry import BBoxN

MICROBUBBLE = 1
NO_OBJECT = 0
BOX_HALF_EXTENT_SIGMAS = 3.0


@dataclass(frozen=True)
class PsfModel:
    sigma_x: float = 2.0
    sigma_y: float = 2.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ValueError("PSF sigmas must be positive")
        if self.amplitude <= 0:
            raise ValueError("PSF amplitude must be positive")

    @property
    def margin(self) -> float:
        return BOX_HALF_EXTENT_SIGMAS * max(self.sigma_x, self.sigma_y)


@dataclass(frozen=True)
class GroundTruthItem:
    """One annotated bubble: COCO category id, normalized box and center."""

    box: BBoxN
    center: tuple[float, float] = field(default=None)
    class_label: int = MICROBUBBLE

    def __post_init__(self):
        if self.center is None:
            object.__setattr__(self, "center", (self.box.cx, self.box.cy))
        x0, y0, x1, y1 = self.box.corners()
        cx, cy = self.center
        if not (x0 <= cx <= x1 and y0 <= cy <= y1):
            raise ValueError("ground-truth center must lie inside its box")


def _admissible_range(size: int, margin: float) -> tuple[float, float]:
    return margin, size - margin


def _check_config(width, height, n_bubbles, psf, noise_std):
    if width < 1 or height < 1:
        raise ValueError("frame dimensions must be >= 1")
    if n_bubbles < 0:
        raise ValueError("n_bubbles must be >= 0")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if n_bubbles == 0:
        return
    m = psf.margin
    lo_x, hi_x = _admissible_range(width, m)
    lo_y, hi_y = _admissible_range(height, m)
    if hi_x < lo_x or hi_y < lo_y:
        raise ValueError(
            f"a {width}x{height} frame cannot hold a bubble {m:g} px from every edge"
        )
    # one bubble per admissible pixel site at most
    sites = (np.floor(hi_x) - np.ceil(lo_x) + 1) * (np.floor(hi_y) - np.ceil(lo_y) + 1)
    if n_bubbles > max(sites, 1):
        raise ValueError(f"{n_bubbles} bubbles do not fit in the {int(sites)} admissible sites")


def _sample_centers(rng, n, width, height, psf) -> np.ndarray:
    m = psf.margin
    xs = rng.uniform(*_admissible_range(width, m), size=n)
    ys = rng.uniform(*_admissible_range(height, m), size=n)
    return np.stack([xs, ys], axis=1)


def render_bubbles(width: int, height: int, centers: np.ndarray, psf: PsfModel) -> np.ndarray:
    """Noise-free PSF sum normalized by the single-bubble peak, as float64."""
    img = np.zeros((height, width), dtype=np.float64)
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    for cx, cy in np.asarray(centers, dtype=np.float64).reshape(-1, 2):
        gx = np.exp(-((xs - cx) ** 2) / (2 * psf.sigma_x**2))
        gy = np.exp(-((ys - cy) ** 2) / (2 * psf.sigma_y**2))
        img += psf.amplitude * np.outer(gy, gx)
    return img / psf.amplitude


def ground_truth_for(centers: np.ndarray, width: int, height: int, psf: PsfModel) -> list[GroundTruthItem]:
    hx = BOX_HALF_EXTENT_SIGMAS * psf.sigma_x
    hy = BOX_HALF_EXTENT_SIGMAS * psf.sigma_y
    items = []
    for cx, cy in np.asarray(centers, dtype=np.float64).reshape(-1, 2):
        box = BBoxN(cx / width, cy / height, 2 * hx / width, 2 * hy / height)
        items.append(GroundTruthItem(box=box))
    return items


def _compose(rng, centers, width, height, psf, noise_std, frame_id):
    img = render_bubbles(width, height, centers, psf)
    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return Frame(img, frame_id=frame_id), ground_truth_for(centers, width, height, psf)


def simulate_frame(width: int, height: int, n_bubbles: int, psf: PsfModel | None = None,
                   noise_std: float = 0.05, seed: int = 0, centers=None, frame_id: int = 0):
    """Simulate one frame and its ground truth.

    ``centers`` (pixel ``(x, y)`` pairs) overrides the random draw; it must
    respect the edge margin like sampled centers do.

    Returns ``(Frame, list[GroundTruthItem])``; identical seeds give
    bit-identical output.
    """
    psf = psf or PsfModel()
    rng = np.random.default_rng(seed)
    if centers is not None:
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
        n_bubbles = len(centers)
        _check_config(width, height, n_bubbles, psf, noise_std)
        m = psf.margin
        if n_bubbles and (
            centers[:, 0].min() < m or centers[:, 0].max() > width - m
            or centers[:, 1].min() < m or centers[:, 1].max() > height - m
        ):
            raise ValueError("forced centers violate the edge margin")
    else:
        _check_config(width, height, n_bubbles, psf, noise_std)
        centers = _sample_centers(rng, n_bubbles, width, height, psf)
    return _compose(rng, centers, width, height, psf, noise_std, frame_id)


def simulate_sequence(n_frames: int, width: int, height: int, n_bubbles: int,
                      psf: PsfModel | None = None, noise_std: float = 0.05, seed: int = 0,
                      flow=(0.0, 0.0), centers=None):
    """Simulate ``n_frames`` frames with bubbles advected by a constant ``flow`` (px/frame).

    A bubble whose center leaves the admissible region is respawned at a
    freshly sampled position. Frame 0 equals :func:`simulate_frame` for the
    same seed.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    psf = psf or PsfModel()
    frame0, gt0 = simulate_frame(width, height, n_bubbles, psf, noise_std, seed, centers=centers)
    out = [(frame0, gt0)]
    # replay the RNG to the state simulate_frame left it in
    rng = np.random.default_rng(seed)
    if centers is None:
        pos = _sample_centers(rng, n_bubbles, width, height, psf)
    else:
        pos = np.asarray(centers, dtype=np.float64).reshape(-1, 2).copy()
    if noise_std > 0:
        rng.normal(0.0, noise_std, size=(height, width))
    m = psf.margin
    step = np.asarray(flow, dtype=np.float64)
    for k in range(1, n_frames):
        pos = pos + step
        outside = (
            (pos[:, 0] < m) | (pos[:, 0] > width - m) | (pos[:, 1] < m) | (pos[:, 1] > height - m)
        )
        if outside.any():
            pos[outside] = _sample_centers(rng, int(outside.sum()), width, height, psf)
        out.append(_compose(rng, pos, width, height, psf, noise_std, k))
    return out


def simulate_dataset(n_frames: int, width: int = 64, height: int = 64, bubbles=(1, 5),
                     psf: PsfModel | None = None, noise_std: float = 0.05, seed: int = 42):
    """Independent frames whose bubble count is drawn uniformly from ``bubbles`` (inclusive).

    ``bubbles`` may also be a single int for a fixed count.
    """
    if isinstance(bubbles, (int, np.integer)):
        bubbles = (int(bubbles), int(bubbles))
    lo, hi = bubbles
    if lo < 0 or hi < lo:
        raise ValueError(f"invalid bubble range {bubbles}")
    seeds = np.random.SeedSequence(seed).generate_state(2 * n_frames)
    counts_rng = np.random.default_rng(seeds[:n_frames])
    counts = counts_rng.integers(lo, hi + 1, size=n_frames)
    return [
        simulate_frame(width, height, int(n), psf, noise_std, seed=int(s), frame_id=i)
        for i, (n, s) in enumerate(zip(counts, seeds[n_frames:]))
    ]
