"""Forward splatting renderer.

Gaussians are projected to screen space, depth sorted (stable, so equal
depths tie-break by index), and alpha-composited front to back against a
constant background.  Per-pixel blending terminates once transmittance falls
below TERMINATE_TRANSMITTANCE.

The per-Gaussian footprint is the region where the projected Gaussian's
alpha can exceed ALPHA_MIN; with ALPHA_MIN = 1e-12 the truncation sits below
double-precision visibility, so the rendered function is smooth to the
resolution of central finite differences, which the analytic backward pass
is verified against.

Implementation: flat arrays over (gaussian, pixel-in-footprint) pairs,
processed in depth-ordered chunks.  Within a chunk, elements are stably
sorted by pixel id (radix for 16-bit ids), making the per-pixel compositing
order the global depth order; transmittances are exclusive segmented
cumulative sums of log(1 - alpha) scaled by the transmittance entering the
chunk.  Pixels whose transmittance has already terminated cull later chunks'
elements before any transcendental work.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraModel
from .scene import Gaussian3D, GaussianScene, covariance_3d
from .quat import quat_normalize

ALPHA_MIN = 1e-12
ALPHA_MAX = 0.999
TERMINATE_TRANSMITTANCE = 1e-4
COV2D_DILATION = 0.3
NEAR_PLANE = 0.01
CHUNK_SIZE = 512


@dataclass
class Projection:
    """Screen-space quantities for the Gaussians kept after culling, in depth order."""

    orig_idx: np.ndarray    # (M,) indices into the scene
    p_cam: np.ndarray       # (M, 3)
    mean2d: np.ndarray      # (M, 2)
    cov2d: np.ndarray       # (M, 2, 2) after dilation
    cov2d_inv: np.ndarray   # (M, 2, 2)
    depth: np.ndarray       # (M,) camera z
    alpha_base: np.ndarray  # (M,) clipped sigmoid of opacity logit
    q_cut: np.ndarray       # (M,) Mahalanobis-squared footprint cutoff
    rect: np.ndarray        # (M, 4) x0, x1, y0, y1 inclusive pixel bounds


@dataclass
class RenderTape:
    """Forward state retained for the backward pass (flat arrays concatenated
    over depth chunks; within each chunk, grouped by pixel in depth order)."""

    proj: Projection
    chunk_offsets: np.ndarray   # (n_chunks + 1,) element offsets
    pix: np.ndarray             # (K,) int32 flat pixel ids
    gi: np.ndarray              # (K,) int32 index into proj arrays
    dx: np.ndarray
    dy: np.ndarray
    alpha: np.ndarray
    t_before: np.ndarray
    live: np.ndarray            # (K,) bool
    t_final: np.ndarray         # (P,) per-pixel final transmittance
    width: int
    height: int


@dataclass
class RenderOutput:
    image: np.ndarray
    final_transmittance: np.ndarray
    depth: np.ndarray | None = None
    tape: RenderTape | None = None


def project_gaussian(g: Gaussian3D, cam: CameraModel):
    """Project a single Gaussian: (mean2d, cov2d, depth), or None when culled."""
    p_cam = cam.R @ np.asarray(g.mean, dtype=np.float64) + cam.t
    z = p_cam[2]
    if z <= NEAR_PLANE:
        return None
    x, y = p_cam[0], p_cam[1]
    mean2d = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    J = np.array([[cam.fx / z, 0.0, -cam.fx * x / (z * z)],
                  [0.0, cam.fy / z, -cam.fy * y / (z * z)]])
    A = J @ cam.R
    sigma = covariance_3d(quat_normalize(g.rotation), g.log_scale)
    cov2d = A @ sigma @ A.T + COV2D_DILATION * np.eye(2)
    return mean2d, cov2d, float(z)


def _empty_projection() -> Projection:
    z0 = np.zeros(0, dtype=np.int64)
    return Projection(z0, np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 2, 2)),
                      np.zeros((0, 2, 2)), np.zeros(0), np.zeros(0), np.zeros(0),
                      np.zeros((0, 4), dtype=np.int64))


def _project(scene: GaussianScene, cam: CameraModel) -> Projection:
    n = len(scene)
    if n == 0:
        return _empty_projection()
    p_cam = scene.means @ cam.R.T + cam.t
    z = p_cam[:, 2]
    keep = z > NEAR_PLANE
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return _empty_projection()
    p_cam = p_cam[idx]
    z = z[idx]
    x, y = p_cam[:, 0], p_cam[:, 1]
    mx = cam.fx * x / z + cam.cx
    my = cam.fy * y / z + cam.cy
    mean2d = np.stack([mx, my], axis=1)

    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    A = np.einsum("mij,jk->mik", J, cam.R)
    sigma = covariance_3d(scene.quats[idx], scene.log_scales[idx])
    cov2d = np.einsum("mij,mjk,mlk->mil", A, sigma, A)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    ok = np.isfinite(det) & (det > 1e-12)

    logits = scene.opacity_logits[idx]
    alpha_base = np.minimum(1.0 / (1.0 + np.exp(-logits)), ALPHA_MAX)
    q_cut = 2.0 * (np.log(np.maximum(alpha_base, 1e-300)) - np.log(ALPHA_MIN))
    ok &= q_cut > 0

    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = np.sqrt(np.maximum(q_cut, 0.0) * lam_max)
    x0 = np.maximum(np.ceil(mx - radius), 0.0)
    x1 = np.minimum(np.floor(mx + radius), cam.width - 1.0)
    y0 = np.maximum(np.ceil(my - radius), 0.0)
    y1 = np.minimum(np.floor(my + radius), cam.height - 1.0)
    ok &= (x0 <= x1) & (y0 <= y1)

    sel = np.flatnonzero(ok)
    if sel.size == 0:
        return _empty_projection()
    order = sel[np.argsort(z[sel], kind="stable")]

    inv = np.empty((order.size, 2, 2))
    inv[:, 0, 0] = c[order] / det[order]
    inv[:, 0, 1] = -b[order] / det[order]
    inv[:, 1, 0] = inv[:, 0, 1]
    inv[:, 1, 1] = a[order] / det[order]
    rect = np.stack([x0[order], x1[order], y0[order], y1[order]], axis=1).astype(np.int64)
    return Projection(
        orig_idx=idx[order],
        p_cam=p_cam[order],
        mean2d=mean2d[order],
        cov2d=cov2d[order],
        cov2d_inv=inv,
        depth=z[order],
        alpha_base=alpha_base[order],
        q_cut=q_cut[order],
        rect=rect,
    )


def _chunk_footprints(proj: Projection, lo: int, hi: int, width: int,
                      keep_idx: np.ndarray | None = None):
    """Flat (gaussian, pixel) arrays for Gaussians [lo, hi) (optionally a
    pre-culled index subset), depth-major order."""
    ids = np.arange(lo, hi, dtype=np.int32) if keep_idx is None \
        else keep_idx.astype(np.int32)
    rect = proj.rect[ids]
    rw = (rect[:, 1] - rect[:, 0] + 1).astype(np.int32)
    rh = (rect[:, 3] - rect[:, 2] + 1).astype(np.int32)
    counts = (rw * rh).astype(np.int64)
    total = int(counts.sum())
    gi = np.repeat(ids, counts)
    offsets = np.concatenate(([0], np.cumsum(counts)))[:-1]
    local = (np.arange(total, dtype=np.int64)
             - np.repeat(offsets, counts)).astype(np.int32)
    gl = np.repeat(np.arange(len(ids), dtype=np.int32), counts)
    px = rect[gl, 0].astype(np.int32) + local % rw[gl]
    py = rect[gl, 2].astype(np.int32) + local // rw[gl]
    pix = py * np.int32(width) + px
    return gi, px, py, pix


def _stable_sort_by_pixel(pix: np.ndarray, pcount: int) -> np.ndarray:
    # numpy's stable argsort is radix only for <= 16-bit integer keys
    if pcount <= 65536:
        return np.argsort(pix.astype(np.uint16), kind="stable")
    return np.argsort(pix, kind="stable")


def _segment_first(sorted_keys: np.ndarray) -> np.ndarray:
    first = np.empty(len(sorted_keys), dtype=bool)
    if len(sorted_keys):
        first[0] = True
        first[1:] = sorted_keys[1:] != sorted_keys[:-1]
    return first


def _segment_exclusive_cumsum(values: np.ndarray, first: np.ndarray) -> np.ndarray:
    incl = np.cumsum(values)
    excl = incl - values
    starts = np.flatnonzero(first)
    reps = np.diff(np.append(starts, len(values)))
    return excl - np.repeat(excl[starts], reps)


def _composite(proj: Projection, colors: np.ndarray, background_value: float,
               width: int, height: int, keep_tape: bool,
               extra_weights: np.ndarray | None = None):
    """Chunked front-to-back compositor.

    Returns (image, t_final_flat, extra_image, tape_parts).
    """
    pcount = width * height
    m = len(proj.orig_idx)
    t_img = np.ones(pcount)
    image_acc = np.zeros(pcount)
    extra_acc = np.zeros(pcount) if extra_weights is not None else None

    # contiguous per-gaussian views keep the flat gathers cache-friendly
    mx = np.ascontiguousarray(proj.mean2d[:, 0])
    my = np.ascontiguousarray(proj.mean2d[:, 1])
    ia_g = np.ascontiguousarray(proj.cov2d_inv[:, 0, 0])
    ib_g = np.ascontiguousarray(proj.cov2d_inv[:, 0, 1])
    ic_g = np.ascontiguousarray(proj.cov2d_inv[:, 1, 1])

    parts = [] if keep_tape else None
    offsets = [0]
    total = 0

    tile = 8
    tw = -(-width // tile)
    th = -(-height // tile)
    pad_w, pad_h = tw * tile, th * tile
    tx0 = (proj.rect[:, 0] // tile).astype(np.int64)
    tx1 = (proj.rect[:, 1] // tile).astype(np.int64)
    ty0 = (proj.rect[:, 2] // tile).astype(np.int64)
    ty1 = (proj.rect[:, 3] // tile).astype(np.int64)
    any_dead = False

    for lo in range(0, m, CHUNK_SIZE):
        hi = min(lo + CHUNK_SIZE, m)
        keep_idx = None
        if any_dead and m > CHUNK_SIZE:
            # drop whole Gaussians whose footprint is fully terminated; a
            # padded tile max never reports a live pixel as dead
            padded = np.zeros((pad_h, pad_w))
            padded[:height, :width] = t_img.reshape(height, width)
            tile_t = padded.reshape(th, tile, tw, tile).max(axis=(1, 3))
            cx0, cx1 = tx0[lo:hi], tx1[lo:hi]
            cy0, cy1 = ty0[lo:hi], ty1[lo:hi]
            best = np.zeros(hi - lo)
            span = int(max((cx1 - cx0).max(), (cy1 - cy0).max())) + 1
            for oy in range(span):
                yy = np.minimum(cy0 + oy, cy1)
                for ox in range(span):
                    xx = np.minimum(cx0 + ox, cx1)
                    np.maximum(best, tile_t[yy, xx], out=best)
            keep_idx = np.flatnonzero(best >= TERMINATE_TRANSMITTANCE) + lo
            if len(keep_idx) == 0:
                continue
        gi, px, py, pix = _chunk_footprints(proj, lo, hi, width, keep_idx)
        if len(gi) == 0:
            continue
        if any_dead:
            alive = t_img[pix] >= TERMINATE_TRANSMITTANCE
            if not alive.all():
                gi, pix = gi[alive], pix[alive]
                px, py = px[alive], py[alive]
        if len(gi) == 0:
            continue
        dx = px - mx[gi]
        dy = py - my[gi]
        q = ia_g[gi] * dx * dx + 2.0 * ib_g[gi] * dx * dy + ic_g[gi] * dy * dy
        # q <= q_cut is exactly alpha >= ALPHA_MIN, tested before the exp
        inside = q <= proj.q_cut[gi]
        if not inside.all():
            gi, pix, dx, dy, q = (gi[inside], pix[inside], dx[inside],
                                  dy[inside], q[inside])
        if len(gi) == 0:
            continue
        alpha = proj.alpha_base[gi] * np.exp(-0.5 * q)

        perm = _stable_sort_by_pixel(pix, pcount)
        pix, gi = pix[perm], gi[perm]
        dx, dy, alpha = dx[perm], dy[perm], alpha[perm]

        first = _segment_first(pix)
        ln1m = np.log1p(-alpha)
        t_before = t_img[pix] * np.exp(_segment_exclusive_cumsum(ln1m, first))
        live = t_before >= TERMINATE_TRANSMITTANCE
        w_c = np.where(live, alpha * t_before, 0.0)

        image_acc += np.bincount(pix, weights=w_c * colors[gi], minlength=pcount)
        if extra_acc is not None:
            extra_acc += np.bincount(pix, weights=w_c * extra_weights[gi],
                                     minlength=pcount)
        t_img *= np.exp(np.bincount(pix, weights=np.where(live, ln1m, 0.0),
                                    minlength=pcount))
        if not any_dead:
            any_dead = bool(t_img.min() < TERMINATE_TRANSMITTANCE)
        if keep_tape:
            parts.append((pix, gi, dx, dy, alpha, t_before, live))
            total += len(pix)
            offsets.append(total)

    image = (image_acc + background_value * t_img).reshape(height, width)
    extra_image = extra_acc.reshape(height, width) if extra_acc is not None else None

    tape_parts = None
    if keep_tape:
        if parts:
            cat = [np.concatenate([p[i] for p in parts]) for i in range(7)]
        else:
            cat = [np.zeros(0, dtype=np.int32), np.zeros(0, dtype=np.int32),
                   np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0),
                   np.zeros(0, dtype=bool)]
        tape_parts = (np.asarray(offsets, dtype=np.int64), *cat, t_img)
    return image, t_img.reshape(height, width), extra_image, tape_parts


def render(scene: GaussianScene, cam: CameraModel, *,
           keep_tape: bool = False, compute_depth: bool = False) -> RenderOutput:
    """Render the scene from a camera; optionally keep state for render_backward.

    An empty (or fully culled) scene renders the pure background with unit
    transmittance.  The output satisfies
    image == sum of blended contributions + background * final_transmittance.
    """
    proj = _project(scene, cam)
    w, h = cam.width, cam.height
    if len(proj.orig_idx) == 0:
        img = np.full((h, w), float(scene.background))
        depth = np.zeros((h, w)) if compute_depth else None
        tape = None
        if keep_tape:
            tape = RenderTape(proj, np.zeros(1, dtype=np.int64),
                              np.zeros(0, dtype=np.int32), np.zeros(0, dtype=np.int32),
                              np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0),
                              np.zeros(0, dtype=bool), np.ones(h * w), w, h)
        return RenderOutput(img, np.ones((h, w)), depth, tape)

    colors = scene.intensities[proj.orig_idx]
    depths = proj.depth if compute_depth else None
    image, t_final, depth_img, tape_parts = _composite(
        proj, colors, float(scene.background), w, h, keep_tape, extra_weights=depths)

    tape = None
    if keep_tape:
        offs, pix, gi, dx, dy, alpha, t_before, live, tf = tape_parts
        tape = RenderTape(proj, offs, pix, gi, dx, dy, alpha, t_before, live, tf, w, h)
    return RenderOutput(image, t_final, depth_img, tape)


def render_depth(scene: GaussianScene, cam: CameraModel) -> np.ndarray:
    """Alpha-blended expected camera-space depth; background depth is 0."""
    out = render(scene, cam, compute_depth=True)
    if out.depth is None:
        return np.zeros((cam.height, cam.width))
    return out.depth
