"""Gaussian primitive storage, parameter activations, and SH color evaluation.

A cloud stores raw (unconstrained) parameters: scales in log-space, opacity
as a logit, rotations as unnormalized quaternions. Activation maps them to
physical values, which keeps plain Adam well-scaled and every constraint
(positive scale, opacity in (0,1), unit quaternion) true by construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CLOUD_MAGIC = b"G4DC"
CLOUD_VERSION = 1

# Real spherical harmonics constants, degrees 0..2.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)


@dataclass
class GaussianCloud:
    """N anisotropic Gaussians: position, log-scale, quaternion, opacity logit, SH."""

    positions: Tensor      # (N, 3)
    log_scales: Tensor     # (N, 3)
    rotations: Tensor      # (N, 4) raw quaternions
    opacity_logits: Tensor # (N, 1)
    sh_coeffs: Tensor      # (N, k, 3), k = (sh_degree + 1)^2
    sh_degree: int = 1

    def __post_init__(self):
        n = self.positions.shape[0]
        k = (self.sh_degree + 1) ** 2
        expect = {
            "positions": (n, 3),
            "log_scales": (n, 3),
            "rotations": (n, 4),
            "opacity_logits": (n, 1),
            "sh_coeffs": (n, k, 3),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"GaussianCloud.{name}: expected shape {shape}, got {got}")

    @property
    def num_points(self) -> int:
        return self.positions.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "opacity_logits": self.opacity_logits,
            "sh_coeffs": self.sh_coeffs,
        }

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters().values():
            t.requires_grad = flag

    def clone(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.detach(),
            log_scales=self.log_scales.detach(),
            rotations=self.rotations.detach(),
            opacity_logits=self.opacity_logits.detach(),
            sh_coeffs=self.sh_coeffs.detach(),
            sh_degree=self.sh_degree,
        )


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a rigid world-to-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray = field(default_factory=lambda: np.eye(4))
    cam_id: int = 0

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"Camera: fx and fy must be positive, got fx={self.fx}, fy={self.fy}")
        r = self.world_to_cam[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-8) or not np.isclose(
            np.linalg.det(r), 1.0, atol=1e-8
        ):
            raise ValueError("Camera: world_to_cam rotation block must be orthonormal with det +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        # Camera center in world coordinates: -R^T t.
        return -self.rotation.T @ self.translation


def look_at_camera(
    eye, target, up=(0.0, 0.0, 1.0), *, fx: float, fy: float, cx: float, cy: float,
    width: int, height: int, cam_id: int = 0,
) -> Camera:
    """Build a camera at `eye` looking toward `target` (+z forward, y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(upv, fwd)
    nrm = np.linalg.norm(right)
    if nrm < 1e-9:
        raise ValueError("look_at_camera: view direction is parallel to the up vector")
    right /= nrm
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd], axis=0)
    w2c = np.eye(4)
    w2c[:3, :3] = r
    w2c[:3, 3] = -r @ eye
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                  world_to_cam=w2c, cam_id=cam_id)


def activate(cloud: GaussianCloud) -> tuple[Tensor, Tensor, Tensor]:
    """Map raw parameters to physical ones: (scales, opacities, unit quaternions)."""
    raw_q = cloud.rotations
    norms = np.linalg.norm(raw_q.data, axis=1)
    if np.any(norms < 1e-12):
        bad = int(np.argmin(norms))
        raise ValueError(f"activate: degenerate quaternion at index {bad} (norm < 1e-12)")
    scales = ad.exp(cloud.log_scales)
    opacities = ad.sigmoid(cloud.opacity_logits)
    qnorm = ad.sqrt(ad.tsum(ad.mul(raw_q, raw_q), axis=1, keepdims=True))
    quats = ad.div(raw_q, ad.broadcast_to(qnorm, raw_q.shape))
    return scales, opacities, quats


def quat_to_rotmat(q: Tensor) -> Tensor:
    """Unit quaternions (N,4), (w,x,y,z) order -> rotation matrices (N,3,3)."""
    norms = np.linalg.norm(q.data, axis=-1)
    if not np.allclose(norms, 1.0, atol=1e-9):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValueError(f"quat_to_rotmat: quaternions must be unit (max |norm-1| = {worst:.3e})")
    n = q.shape[0]
    w = ad.slice_tensor(q, (slice(None), slice(0, 1)))
    x = ad.slice_tensor(q, (slice(None), slice(1, 2)))
    y = ad.slice_tensor(q, (slice(None), slice(2, 3)))
    z = ad.slice_tensor(q, (slice(None), slice(3, 4)))
    xx, yy, zz = ad.mul(x, x), ad.mul(y, y), ad.mul(z, z)
    xy, xz, yz = ad.mul(x, y), ad.mul(x, z), ad.mul(y, z)
    wx, wy, wz = ad.mul(w, x), ad.mul(w, y), ad.mul(w, z)
    one = ad.ones((n, 1))
    cols = [
        ad.sub(one, ad.mul(2.0, ad.add(yy, zz))),
        ad.mul(2.0, ad.sub(xy, wz)),
        ad.mul(2.0, ad.add(xz, wy)),
        ad.mul(2.0, ad.add(xy, wz)),
        ad.sub(one, ad.mul(2.0, ad.add(xx, zz))),
        ad.mul(2.0, ad.sub(yz, wx)),
        ad.mul(2.0, ad.sub(xz, wy)),
        ad.mul(2.0, ad.add(yz, wx)),
        ad.sub(one, ad.mul(2.0, ad.add(xx, yy))),
    ]
    return ad.reshape(ad.concat(cols, axis=1), (n, 3, 3))


def covariance3d(scales: Tensor, rotmats: Tensor) -> Tensor:
    """Sigma = R diag(s)^2 R^T, per Gaussian; symmetric positive-definite."""
    if np.any(scales.data <= 0.0):
        raise ValueError("covariance3d: scales must be strictly positive")
    n = scales.shape[0]
    s2 = ad.mul(scales, scales)
    # Sigma = R (diag(s^2) R^T); diag(s^2) R^T is a per-row scaling of R^T.
    rt = _batched_transpose(rotmats)
    scaled = ad.mul(ad.broadcast_to(ad.reshape(s2, (n, 3, 1)), (n, 3, 3)), rt)
    return ad.matmul(rotmats, scaled)


def _batched_transpose(m: Tensor) -> Tensor:
    n = m.shape[0]
    cols = [
        ad.reshape(ad.slice_tensor(m, (slice(None), slice(None), slice(j, j + 1))), (n, 1, 3))
        for j in range(3)
    ]
    return ad.concat(cols, axis=1)


def sh_basis(view_dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values at unit directions, shape (N, (degree+1)^2)."""
    n = view_dirs.shape[0]
    x, y, z = view_dirs[:, 0], view_dirs[:, 1], view_dirs[:, 2]
    cols = [np.full(n, SH_C0)]
    if degree >= 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        cols += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * z * z - x * x - y * y),
            SH_C2[3] * x * z,
            SH_C2[4] * (x * x - y * y),
        ]
    return np.stack(cols, axis=1)


def sh_to_rgb(coeffs: Tensor, view_dirs: Tensor, degree: int) -> Tensor:
    """Evaluate SH color: basis(view_dir) . coeffs + 0.5, per channel.

    Output is NOT clamped here; the renderer clamps at composite time so the
    color stays differentiable wherever supervision is active.
    """
    k = (degree + 1) ** 2
    if coeffs.shape[1] != k:
        raise ValueError(
            f"sh_to_rgb: coeffs have {coeffs.shape[1]} bands, degree {degree} needs {k}"
        )
    if degree > 2:
        raise ValueError("sh_to_rgb: degrees above 2 are unsupported")
    n = coeffs.shape[0]
    x = ad.slice_tensor(view_dirs, (slice(None), slice(0, 1)))
    y = ad.slice_tensor(view_dirs, (slice(None), slice(1, 2)))
    z = ad.slice_tensor(view_dirs, (slice(None), slice(2, 3)))
    basis_cols = [ad.mul(ad.ones((n, 1)), SH_C0)]
    if degree >= 1:
        basis_cols += [ad.mul(y, -SH_C1), ad.mul(z, SH_C1), ad.mul(x, -SH_C1)]
    if degree >= 2:
        xx, yy, zz = ad.mul(x, x), ad.mul(y, y), ad.mul(z, z)
        basis_cols += [
            ad.mul(ad.mul(x, y), SH_C2[0]),
            ad.mul(ad.mul(y, z), SH_C2[1]),
            ad.mul(ad.sub(ad.mul(zz, 2.0), ad.add(xx, yy)), SH_C2[2]),
            ad.mul(ad.mul(x, z), SH_C2[3]),
            ad.mul(ad.sub(xx, yy), SH_C2[4]),
        ]
    basis = ad.reshape(ad.concat(basis_cols, axis=1), (n, 1, k))
    rgb = ad.reshape(ad.matmul(basis, coeffs), (n, 3))
    return ad.add(rgb, 0.5)


def inverse_activate(scales: np.ndarray, opacities: np.ndarray, quats: np.ndarray):
    """Invert the activation where inverses exist (for round-trip checks)."""
    log_scales = np.log(scales)
    logits = np.log(opacities / (1.0 - opacities))
    qnorm = quats / np.linalg.norm(quats, axis=1, keepdims=True)
    return log_scales, logits, qnorm


# ---------------------------------------------------------------------------
# Checkpoint I/O: little-endian binary, arrays in declared order as float64.


def save_cloud(cloud: GaussianCloud, path) -> None:
    n = cloud.num_points
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<III", CLOUD_VERSION, n, cloud.sh_degree))
        for t in (
            cloud.positions,
            cloud.log_scales,
            cloud.rotations,
            cloud.opacity_logits,
            cloud.sh_coeffs,
        ):
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_cloud(path) -> GaussianCloud:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CLOUD_MAGIC:
            raise ValueError(f"load_cloud: bad magic {magic!r} in {path}")
        version, n, sh_degree = struct.unpack("<III", fh.read(12))
        if version != CLOUD_VERSION:
            raise ValueError(f"load_cloud: unsupported version {version}")
        k = (sh_degree + 1) ** 2

        def read(shape):
            count = int(np.prod(shape))
            arr = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
            return arr.astype(np.float64).reshape(shape)

        return GaussianCloud(
            positions=Tensor(read((n, 3))),
            log_scales=Tensor(read((n, 3))),
            rotations=Tensor(read((n, 4))),
            opacity_logits=Tensor(read((n, 1))),
            sh_coeffs=Tensor(read((n, k, 3))),
            sh_degree=sh_degree,
        )
