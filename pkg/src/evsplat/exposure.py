"""Transmittance-controlled exposure imaging.

An aperture ramps its transmittance from 0 to 1 over [0, t_end].  A pixel of
scene intensity I accumulates charge I * h(t), h(t) = integral of TR up to t,
and fires an event at every crossing of the threshold charge C.  The first
positive event's timestamp t* encodes intensity as C / h(t*); dividing by the
frame maximum yields a normalized grayscale image whose scale is independent
of global illumination.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import EventModelConfig, EventStream, IntensityImage


@dataclass(frozen=True)
class TransmittanceProfile:
    """Aperture transmittance TR(t) on [0, t_end] (seconds); 1 beyond t_end.

    kind "linear" is t / t_end.  kind "sampled" interpolates a monotone table
    of (t, TR) rows covering [0, t_end].
    """

    kind: str = "linear"
    t_end: float = 1.0
    samples: np.ndarray | None = None

    def __post_init__(self):
        if self.t_end <= 0:
            raise ValueError("t_end must be > 0")
        if self.kind == "linear":
            if self.samples is not None:
                raise ValueError("linear profile takes no samples")
        elif self.kind == "sampled":
            s = np.asarray(self.samples, dtype=np.float64)
            if s.ndim != 2 or s.shape[1] != 2 or s.shape[0] < 2:
                raise ValueError("samples must be an (M, 2) table with M >= 2")
            if np.any(np.diff(s[:, 0]) <= 0):
                raise ValueError("sample times must be strictly increasing")
            if s[0, 0] != 0.0 or abs(s[-1, 0] - self.t_end) > 1e-12:
                raise ValueError("samples must cover [0, t_end]")
            if np.any(np.diff(s[:, 1]) < 0) or s[0, 1] < 0 or s[-1, 1] > 1:
                raise ValueError("TR samples must be non-decreasing within [0, 1]")
            object.__setattr__(self, "samples", s)
        else:
            raise ValueError(f"unknown profile kind: {self.kind!r}")


@dataclass(frozen=True)
class TemporalMatrix:
    """Per-pixel first-positive-event timestamps in seconds; NaN marks no-event pixels."""

    resolution: tuple[int, int]   # (width, height)
    t_star: np.ndarray            # (H, W) float seconds, NaN = invalid

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.t_star)


@dataclass(frozen=True)
class ExposureFrame:
    """Normalized [0, 1] grayscale image mapped from exposure events.

    mask is False on pixels that never fired a positive event; those render
    as 0 and carry no intensity claim.
    """

    image: np.ndarray
    mask: np.ndarray
    pose_id: int | None = None


def transmittance_at(profile: TransmittanceProfile, t):
    """TR(t) for scalar or array t >= 0."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("t must be >= 0")
    if profile.kind == "linear":
        tr = np.minimum(t_arr / profile.t_end, 1.0)
    else:
        s = profile.samples
        tr = np.interp(t_arr, s[:, 0], s[:, 1])
        tr = np.where(t_arr > profile.t_end, 1.0, tr)
    return float(tr) if np.isscalar(t) else tr


def cumulative_exposure(profile: TransmittanceProfile, t_star):
    """h(t*) = integral of TR from 0 to t*, in seconds of full-open-equivalent exposure.

    Closed form for the linear ramp; trapezoidal integration of the sample
    table otherwise.  Beyond t_end the integrand is 1.
    """
    t_arr = np.asarray(t_star, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("t_star must be >= 0")
    te = profile.t_end
    if profile.kind == "linear":
        inside = np.minimum(t_arr, te)
        h = inside * inside / (2.0 * te) + np.maximum(t_arr - te, 0.0)
    else:
        s = profile.samples
        seg = np.concatenate(([0.0], np.cumsum(np.diff(s[:, 0]) * (s[:, 1][1:] + s[:, 1][:-1]) / 2.0)))
        inside = np.minimum(t_arr, te)
        idx = np.clip(np.searchsorted(s[:, 0], inside, side="right") - 1, 0, len(s) - 2)
        t_lo = s[idx, 0]
        tr_lo = s[idx, 1]
        tr_at = tr_lo + (inside - t_lo) * (s[idx + 1, 1] - tr_lo) / (s[idx + 1, 0] - t_lo)
        h = seg[idx] + (inside - t_lo) * (tr_lo + tr_at) / 2.0
        h = h + np.maximum(t_arr - te, 0.0)
    return float(h) if np.isscalar(t_star) else h


def extract_ipe(stream: EventStream, t_open: int = 0) -> TemporalMatrix:
    """Per-pixel time of the initial positive event at or after t_open, in seconds."""
    w, h = stream.resolution
    t_star = np.full(h * w, np.nan)
    if len(stream):
        sel = np.flatnonzero((stream.p > 0) & (stream.t >= t_open))
        if sel.size:
            idx = stream.y[sel].astype(np.int64) * w + stream.x[sel]
            # stream is time sorted, so the first occurrence per pixel is the IPE
            uniq, first = np.unique(idx, return_index=True)
            t_star[uniq] = (stream.t[sel[first]] - t_open) * 1e-6
    return TemporalMatrix((w, h), t_star.reshape(h, w))


def map_temporal_to_intensity(
    tm: TemporalMatrix,
    profile: TransmittanceProfile,
    contrast: float,
    clip_percentile: float | None = None,
) -> ExposureFrame:
    """Convert IPE timestamps to a max-normalized intensity frame.

    Valid pixels get C / h(t*), then every valid value is divided by the
    maximum over valid pixels (scale-only normalization, zeros preserved).
    Invalid pixels (no IPE, or t* <= 0) become 0 with the mask cleared.
    The optional percentile clip guards against simulated hot pixels.
    """
    if contrast <= 0:
        raise ValueError("contrast must be > 0")
    t_star = tm.t_star
    valid = np.isfinite(t_star) & (t_star > 0)
    if not valid.any():
        raise ValueError("no valid pixels to normalize")
    image = np.zeros_like(t_star, dtype=np.float64)
    raw = contrast / cumulative_exposure(profile, t_star[valid])
    if clip_percentile is not None:
        # "lower" picks an actual data value, so one extreme outlier cannot
        # drag the clip level toward itself by interpolation
        raw = np.minimum(raw, np.percentile(raw, clip_percentile, method="lower"))
    image[valid] = raw / raw.max()
    return ExposureFrame(image=image, mask=valid)


def simulate_exposure_events(
    img: IntensityImage,
    profile: TransmittanceProfile,
    cfg: EventModelConfig,
    levels: int = 100,
) -> EventStream:
    """Forward exposure-event simulation over the aperture ramp [0, t_end].

    The ramp is discretized into `levels` steps; within each step the
    transmittance is held at its midpoint value, so the accumulated charge
    I * h(t) is piecewise linear and threshold crossings invert exactly
    within the step.  Every crossing of a multiple of C is emitted (the IPE
    is the first); all polarities are positive.  Pixels with I = 0 emit
    nothing.
    """
    img = np.asarray(img, dtype=np.float64)
    if np.any(img < 0):
        raise ValueError("intensity values must be >= 0")
    if levels < 2:
        raise ValueError("levels must be >= 2")
    h_px, w_px = img.shape
    c = cfg.contrast_threshold
    intensity = img.reshape(-1)
    dt = profile.t_end / levels
    mids = transmittance_at(profile, (np.arange(levels) + 0.5) * dt)

    # relative grace on the crossing quantizer so accumulated float error can
    # not miss a threshold hit that lands exactly on a multiple of C
    eps = 1e-9
    charge = np.zeros_like(intensity)
    xs, ys, ts = [], [], []
    for j in range(levels):
        rate = intensity * mids[j]
        new_charge = charge + rate * dt
        base = np.floor(charge / c + eps)
        n = (np.floor(new_charge / c + eps) - base).astype(np.int64)
        active = np.flatnonzero(n > 0)
        if active.size:
            counts = n[active]
            rep = np.repeat(active, counts)
            offs = np.concatenate(([0], np.cumsum(counts)))[:-1]
            kk = np.arange(counts.sum(), dtype=np.int64) - np.repeat(offs, counts) + 1
            level = (base[rep] + kk) * c
            tt = j * dt + np.maximum(level - charge[rep], 0.0) / rate[rep]
            tt_us = np.maximum(np.rint(tt * 1e6).astype(np.int64), 1)
            xs.append((rep % w_px).astype(np.int32))
            ys.append((rep // w_px).astype(np.int32))
            ts.append(tt_us)
        charge = new_charge

    if not ts:
        return EventStream.empty((w_px, h_px))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    t = np.concatenate(ts)
    order = np.argsort(t, kind="stable")
    p = np.ones(len(t), dtype=np.int8)
    return EventStream.create((w_px, h_px), x[order], y[order], t[order], p)


def scale_foreground(
    img: IntensityImage,
    mask: np.ndarray,
    factor: float,
    ceiling: float | None = None,
) -> IntensityImage:
    """Multiply masked pixels by factor, optionally clipping at a saturation ceiling.

    The ceiling models a frame camera's full-well limit for over-exposure
    studies; event-based exposure simulation is fed the unclipped image.
    """
    if factor <= 0:
        raise ValueError("factor must be > 0")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != np.asarray(img).shape:
        raise ValueError("mask resolution must match the image")
    out = np.array(img, dtype=np.float64, copy=True)
    out[mask] *= factor
    if ceiling is not None:
        out[mask] = np.minimum(out[mask], ceiling)
    return out
