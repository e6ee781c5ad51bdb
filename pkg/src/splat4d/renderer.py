"""Differentiable perspective splatting: project, depth-sort, alpha-composite.

Two implementations live here on purpose. :func:`render` is the vectorized,
autodiff-tracked path used everywhere; :func:`project_point` and
:func:`composite_pixel` are scalar numpy references implementing the same
math one splat / one pixel at a time, kept as an independent oracle for the
vectorized code.

Compositing is plain front-to-back over a global depth sort (ties broken by
storage index), with no tile binning: image sizes are small enough that
correctness and differentiability beat throughput.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gaussians import Camera, GaussianCloud, activate, covariance3d, quat_to_rotmat, sh_basis, sh_to_rgb


@dataclass(frozen=True)
class RenderSettings:
    near_plane: float = 0.01
    dilation: float = 0.3          # low-pass guard added to cov2d, px^2
    alpha_clamp: float = 0.99
    skip_threshold: float = 1.0 / 255.0
    truncation_sigma: float = 3.0  # splat support radius in Mahalanobis sigmas


@dataclass
class Splat2D:
    mean2d: np.ndarray            # (2,) pixel coordinates
    cov2d: np.ndarray             # (2, 2) symmetric, after dilation
    depth: float
    color: np.ndarray | None = None
    opacity: float | None = None


@dataclass
class RenderedImage:
    rgb: Tensor    # (H, W, 3) in [0, 1]
    alpha: Tensor  # (H, W) accumulated opacity
    depth: Tensor  # (H, W) expected depth (diagnostic)

    def rgb_array(self) -> np.ndarray:
        return self.rgb.data


def project_point(
    p: np.ndarray, cov3d: np.ndarray, cam: Camera, settings: RenderSettings = RenderSettings()
) -> Splat2D | None:
    """Scalar EWA projection of one Gaussian; None when culled behind the camera."""
    p = np.asarray(p, dtype=np.float64)
    r, t = cam.rotation, cam.translation
    p_cam = r @ p + t
    z = p_cam[2]
    if z <= settings.near_plane:
        return None
    x, y = p_cam[0], p_cam[1]
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    jac = np.array(
        [
            [cam.fx / z, 0.0, -cam.fx * x / (z * z)],
            [0.0, cam.fy / z, -cam.fy * y / (z * z)],
        ]
    )
    cov_cam = r @ np.asarray(cov3d, dtype=np.float64) @ r.T
    cov2 = jac @ cov_cam @ jac.T + settings.dilation * np.eye(2)
    return Splat2D(mean2d=np.array([u, v]), cov2d=cov2, depth=float(z))


def composite_pixel(
    splats, pixel, background, settings: RenderSettings = RenderSettings()
) -> np.ndarray:
    """Front-to-back compositing reference for one pixel.

    `splats` must already be sorted by depth ascending (ties by primitive
    index). alpha_i = min(clamp, o_i * exp(-0.5 d^T cov2d^-1 d)); entries
    below the skip threshold or outside the truncation radius contribute
    nothing and leave transmittance untouched.
    """
    pixel = np.asarray(pixel, dtype=np.float64)
    out = np.zeros(3)
    transmittance = 1.0
    r2 = settings.truncation_sigma**2
    for s in splats:
        a, b, c = s.cov2d[0, 0], s.cov2d[0, 1], s.cov2d[1, 1]
        det = a * c - b * b
        if det <= 0.0 or a <= 0.0:
            raise ValueError(f"composite_pixel: non-PSD cov2d {s.cov2d!r}")
        d = pixel - s.mean2d
        maha = (c * d[0] * d[0] - 2.0 * b * d[0] * d[1] + a * d[1] * d[1]) / det
        if maha > r2:
            continue
        alpha = min(settings.alpha_clamp, s.opacity * np.exp(-0.5 * maha))
        if alpha < settings.skip_threshold:
            continue
        out = out + np.clip(s.color, 0.0, 1.0) * alpha * transmittance
        transmittance *= 1.0 - alpha
    return np.clip(out + transmittance * np.asarray(background, dtype=np.float64), 0.0, 1.0)


def _ewa_alpha(u, v, inv_a, inv_b, inv_c, opac, px, py):
    """Fused per-pixel-per-splat opacity: o * exp(-0.5 d^T Cov2d^-1 d).

    Inputs are (S,1) tensors plus flat pixel-center vectors; output is the
    (P, S) pre-clamp alpha tensor (pixel-major so later cumulative products
    run along contiguous memory) and the raw Mahalanobis values for support
    masks. The hand-written backward reduces the pixel sums back onto the
    per-splat quantities; the render gradient finite-difference suite
    covers it.
    """
    ia, ib, ic = inv_a.data.T, inv_b.data.T, inv_c.data.T      # (1, S)
    dx = px[:, None] - u.data.T
    dy = py[:, None] - v.data.T
    t1 = dx * dx
    t1 *= ia
    t2 = dx * dy
    t2 *= ib
    t2 *= 2.0
    t3 = dy * dy
    t3 *= ic
    maha = t1
    maha += t2
    maha += t3
    np.multiply(maha, -0.5, out=t2)
    falloff = np.exp(t2, out=t2)
    alpha = opac.data.T * falloff

    def bw(g):
        contribs = []
        weighted = g * alpha
        if opac.requires_grad:
            contribs.append(
                (opac, (np.sum(weighted, axis=0) / opac.data[:, 0])[:, None])
            )
        wdx = weighted * dx
        wdy = weighted * dy
        if inv_a.requires_grad:
            contribs.append((inv_a, -0.5 * np.einsum("ps,ps->s", wdx, dx)[:, None]))
        if inv_b.requires_grad:
            contribs.append((inv_b, -np.einsum("ps,ps->s", wdx, dy)[:, None]))
        if inv_c.requires_grad:
            contribs.append((inv_c, -0.5 * np.einsum("ps,ps->s", wdy, dy)[:, None]))
        if u.requires_grad or v.requires_grad:
            rs_wdx = np.sum(wdx, axis=0)[:, None]
            rs_wdy = np.sum(wdy, axis=0)[:, None]
            if u.requires_grad:
                contribs.append((u, inv_a.data * rs_wdx + inv_b.data * rs_wdy))
            if v.requires_grad:
                contribs.append((v, inv_b.data * rs_wdx + inv_c.data * rs_wdy))
        return contribs

    out = ad.custom_op(alpha, (u, v, inv_a, inv_b, inv_c, opac), bw)
    return out, maha


def _composite_weights(alpha_eff):
    """Fused front-to-back weights w_i = alpha_i * prod_{j<i} (1 - alpha_j)
    along axis 1 of a (P, S) alpha array, plus the final transmittance.

    Backward uses dL/dalpha_i = G_i T_i - (sum_{j>i} G_j w_j) / (1 - alpha_i);
    the alpha clamp keeps every (1 - alpha) >= 0.01 so the division is safe.
    """
    a = alpha_eff.data
    q = 1.0 - a
    cum = np.cumprod(q, axis=1)
    trans = np.empty_like(cum)
    trans[:, 0] = 1.0
    trans[:, 1:] = cum[:, :-1]
    weights = a * trans
    t_end = np.ascontiguousarray(cum[:, -1:])

    def bw_weights(g):
        gw = g * weights
        suffix = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1]  # suffix_i = sum_{j>=i} gw_j
        tail = np.empty_like(gw)
        tail[:, -1] = 0.0
        tail[:, :-1] = suffix[:, 1:]
        tail /= q
        grad = g * trans
        grad -= tail
        return [(alpha_eff, grad)]

    w_out = ad.custom_op(weights, (alpha_eff,), bw_weights)

    def bw_tend(g):
        return [(alpha_eff, -(g * t_end) / q)]

    t_end_out = ad.custom_op(t_end, (alpha_eff,), bw_tend)
    return w_out, t_end_out


def _background_image(cam: Camera, background: np.ndarray) -> RenderedImage:
    h, w = cam.height, cam.width
    rgb = np.broadcast_to(np.asarray(background, dtype=np.float64), (h, w, 3)).copy()
    return RenderedImage(
        rgb=Tensor(rgb), alpha=Tensor(np.zeros((h, w))), depth=Tensor(np.zeros((h, w)))
    )


def render(
    cloud: GaussianCloud,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    settings: RenderSettings = RenderSettings(),
) -> RenderedImage:
    """Differentiable render of a cloud; deterministic given identical inputs."""
    h, w = cam.height, cam.width
    n = cloud.num_points
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    if n == 0:
        return _background_image(cam, bg)

    scales, opacities, quats = activate(cloud)
    rot_w2c, trans = cam.rotation, cam.translation

    p_cam = ad.add(
        ad.matmul(cloud.positions, Tensor(np.ascontiguousarray(rot_w2c.T))),
        ad.broadcast_to(Tensor(trans.reshape(1, 3)), (n, 3)),
    )
    z_all = p_cam.data[:, 2]
    visible = np.nonzero(z_all > settings.near_plane)[0]
    if visible.size == 0:
        return _background_image(cam, bg)
    # Depth sort among the visible set; stable sort keeps index-ascending ties.
    order = visible[np.argsort(z_all[visible], kind="stable")]
    s_count = order.size

    p_cam_s = ad.gather_rows(p_cam, order)
    pos_s = ad.gather_rows(cloud.positions, order)
    scale_s = ad.gather_rows(scales, order)
    quat_s = ad.gather_rows(quats, order)
    opac_s = ad.gather_rows(opacities, order)
    sh_s = ad.gather_rows(cloud.sh_coeffs, order)

    x = ad.slice_tensor(p_cam_s, (slice(None), slice(0, 1)))
    y = ad.slice_tensor(p_cam_s, (slice(None), slice(1, 2)))
    z = ad.slice_tensor(p_cam_s, (slice(None), slice(2, 3)))

    u = ad.add(ad.mul(ad.div(x, z), cam.fx), cam.cx)
    v = ad.add(ad.mul(ad.div(y, z), cam.fy), cam.cy)

    cov3 = covariance3d(scale_s, quat_to_rotmat(quat_s))
    rot_b = ad.constant(np.broadcast_to(rot_w2c, (s_count, 3, 3)))
    rot_bt = ad.constant(np.broadcast_to(rot_w2c.T, (s_count, 3, 3)))
    cov_cam = ad.matmul(ad.matmul(rot_b, cov3), rot_bt)
    cfl = ad.reshape(cov_cam, (s_count, 9))
    c00 = ad.slice_tensor(cfl, (slice(None), slice(0, 1)))
    c01 = ad.slice_tensor(cfl, (slice(None), slice(1, 2)))
    c02 = ad.slice_tensor(cfl, (slice(None), slice(2, 3)))
    c11 = ad.slice_tensor(cfl, (slice(None), slice(4, 5)))
    c12 = ad.slice_tensor(cfl, (slice(None), slice(5, 6)))
    c22 = ad.slice_tensor(cfl, (slice(None), slice(8, 9)))

    zz = ad.mul(z, z)
    j00 = ad.div(cam.fx, z)
    j02 = ad.mul(ad.div(x, zz), -cam.fx)
    j11 = ad.div(cam.fy, z)
    j12 = ad.mul(ad.div(y, zz), -cam.fy)

    cov_a = ad.add(
        ad.add(ad.mul(ad.mul(j00, j00), c00), ad.mul(ad.mul(ad.mul(j00, j02), c02), 2.0)),
        ad.add(ad.mul(ad.mul(j02, j02), c22), settings.dilation),
    )
    cov_b = ad.add(
        ad.add(ad.mul(ad.mul(j00, j11), c01), ad.mul(ad.mul(j00, j12), c02)),
        ad.add(ad.mul(ad.mul(j02, j11), c12), ad.mul(ad.mul(j02, j12), c22)),
    )
    cov_c = ad.add(
        ad.add(ad.mul(ad.mul(j11, j11), c11), ad.mul(ad.mul(ad.mul(j11, j12), c12), 2.0)),
        ad.add(ad.mul(ad.mul(j12, j12), c22), settings.dilation),
    )
    det = ad.sub(ad.mul(cov_a, cov_c), ad.mul(cov_b, cov_b))
    if np.any(det.data <= 0.0) or np.any(cov_a.data <= 0.0):
        raise ValueError("render: non-PSD projected covariance (upstream bug)")
    inv_a = ad.div(cov_c, det)
    inv_b = ad.div(ad.neg(cov_b), det)
    inv_c = ad.div(cov_a, det)

    # View-dependent color from the world-space direction camera -> Gaussian.
    center = cam.center
    view = ad.sub(pos_s, ad.broadcast_to(Tensor(center.reshape(1, 3)), (s_count, 3)))
    vnorm = ad.sqrt(ad.tsum(ad.mul(view, view), axis=1, keepdims=True))
    dirs = ad.div(view, ad.broadcast_to(vnorm, (s_count, 3)))
    rgb = ad.clamp(sh_to_rgb(sh_s, dirs, cloud.sh_degree), 0.0, 1.0)

    # Per-splat-per-pixel Gaussian falloff on the flattened pixel grid.
    p_total = h * w
    px = np.tile(np.arange(w, dtype=np.float64), h)
    py = np.repeat(np.arange(h, dtype=np.float64), w)
    alpha_raw, maha_values = _ewa_alpha(u, v, inv_a, inv_b, inv_c, opac_s, px, py)
    alpha = ad.clamp(alpha_raw, None, settings.alpha_clamp)
    keep = (maha_values <= settings.truncation_sigma**2) & (
        alpha.data >= settings.skip_threshold
    )
    alpha_eff = ad.mul(alpha, ad.constant(keep.astype(np.float64)))

    weights, t_end = _composite_weights(alpha_eff)  # (P, S) and (P, 1)

    color_flat = ad.matmul(weights, rgb)
    bg_term = ad.mul(ad.broadcast_to(t_end, (p_total, 3)),
                     ad.constant(np.broadcast_to(bg, (p_total, 3))))
    out = ad.clamp(ad.add(color_flat, bg_term), 0.0, 1.0)

    rgb_img = ad.reshape(out, (h, w, 3))
    alpha_img = ad.reshape(ad.sub(1.0, t_end), (h, w))
    depth_img = ad.reshape(ad.matmul(weights, z), (h, w))
    return RenderedImage(rgb=rgb_img, alpha=alpha_img, depth=depth_img)


def reference_render_pixel(
    cloud: GaussianCloud,
    cam: Camera,
    pixel,
    background=(0.0, 0.0, 0.0),
    settings: RenderSettings = RenderSettings(),
) -> np.ndarray:
    """Render one pixel via the scalar reference path (projection + compositing)."""
    scales, opacities, quats = activate(cloud)
    rots = quat_to_rotmat(quats)
    cov3 = covariance3d(scales, rots).data
    center = cam.center
    splats: list[Splat2D] = []
    for i in range(cloud.num_points):
        sp = project_point(cloud.positions.data[i], cov3[i], cam, settings)
        if sp is None:
            continue
        view = cloud.positions.data[i] - center
        view = view / np.linalg.norm(view)
        basis = sh_basis(view[None, :], cloud.sh_degree)[0]
        sp.color = 0.5 + basis @ cloud.sh_coeffs.data[i]
        sp.opacity = float(opacities.data[i, 0])
        splats.append(sp)
    splats.sort(key=lambda s: s.depth)  # python sort is stable: index-ascending ties
    return composite_pixel(splats, pixel, background, settings)
