"""Hexplane deformation field: six multi-resolution feature planes over the
axis pairs of (x, y, z, t), fused by Hadamard product, decoded by a small
MLP into per-Gaussian position / scale / rotation offsets.

Queries bilinearly interpolate each plane at the normalized coordinates,
multiply the six per-level features elementwise, and concatenate the levels.
Decoder heads end in zero-initialized layers, so a fresh field is exactly
the identity deformation: rendering the deformed cloud reproduces the
canonical render bit-for-bit at every timestep.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gaussians import GaussianCloud

FIELD_MAGIC = b"G4DF"
FIELD_VERSION = 1

# Axis pairs (x=0, y=1, z=2, t=3) in canonical order.
PLANE_PAIRS: tuple[tuple[int, int], ...] = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
PAIR_NAMES = ("xy", "xz", "yz", "xt", "yt", "zt")
LEVELS = (1, 2)
HEAD_NAMES = ("position", "scale", "rotation")
HEAD_WIDTHS = {"position": 3, "scale": 3, "rotation": 4}


@dataclass
class SceneBounds:
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if not np.all(self.bbox_max > self.bbox_min):
            raise ValueError(
                f"SceneBounds: bbox_max must exceed bbox_min componentwise, "
                f"got {self.bbox_min} .. {self.bbox_max}"
            )


@dataclass
class DeformationDelta:
    dp: Tensor  # (N, 3) position offset
    ds: Tensor  # (N, 3) log-scale offset
    dr: Tensor  # (N, 4) raw-quaternion offset

    @property
    def num_points(self) -> int:
        return self.dp.shape[0]


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class HexplaneField:
    """Six feature planes per resolution level plus encoder/decoder MLPs."""

    def __init__(self, grids, encoder, heads, bounds: SceneBounds,
                 channels: int, base_res: int, time_res: int, hidden: int):
        if len(grids) != len(LEVELS) * len(PLANE_PAIRS):
            raise ValueError(f"HexplaneField: expected 12 grids, got {len(grids)}")
        self.grids: list[Tensor] = list(grids)
        self.encoder: list[tuple[Tensor, Tensor]] = encoder
        self.heads: dict[str, list[tuple[Tensor, Tensor]]] = heads
        self.bounds = bounds
        self.channels = channels
        self.base_res = base_res
        self.time_res = time_res
        self.hidden = hidden

    # -- construction -------------------------------------------------------

    @staticmethod
    def axis_resolution(axis: int, level: int, base_res: int, time_res: int) -> int:
        base = time_res if axis == 3 else base_res
        return base * (2 ** (level - 1))

    @classmethod
    def create(
        cls,
        bounds: SceneBounds,
        channels: int = 32,
        base_res: int = 64,
        time_res: int = 32,
        hidden: int = 64,
        seed: int = 0,
    ) -> "HexplaneField":
        if base_res < 2 or time_res < 2:
            raise ValueError("HexplaneField: resolutions must be at least 2")
        rng = np.random.default_rng(seed)
        grids = []
        for level in LEVELS:
            for (ai, aj) in PLANE_PAIRS:
                ru = cls.axis_resolution(ai, level, base_res, time_res)
                rv = cls.axis_resolution(aj, level, base_res, time_res)
                # Small symmetric perturbation around the multiplicative
                # identity, so the six-plane product starts near one.
                data = 1.0 + rng.uniform(-1e-4, 1e-4, size=(ru, rv, channels))
                grids.append(Tensor(data))
        feat = channels * len(LEVELS)
        encoder = [
            (Tensor(_xavier(rng, feat, hidden)), Tensor(np.zeros((1, hidden)))),
            (Tensor(_xavier(rng, hidden, hidden)), Tensor(np.zeros((1, hidden)))),
        ]
        heads = {}
        for name in HEAD_NAMES:
            out = HEAD_WIDTHS[name]
            heads[name] = [
                (Tensor(_xavier(rng, hidden, hidden)), Tensor(np.zeros((1, hidden)))),
                # Zero-initialized final layer: identity deformation at start.
                (Tensor(np.zeros((hidden, out))), Tensor(np.zeros((1, out)))),
            ]
        return cls(grids, encoder, heads, bounds, channels, base_res, time_res, hidden)

    # -- parameter access ----------------------------------------------------

    def grid_parameters(self) -> dict[str, Tensor]:
        out = {}
        i = 0
        for level in LEVELS:
            for name in PAIR_NAMES:
                out[f"grid_l{level}_{name}"] = self.grids[i]
                i += 1
        return out

    def mlp_parameters(self) -> dict[str, Tensor]:
        out = {}
        for li, (w, b) in enumerate(self.encoder):
            out[f"encoder_w{li}"] = w
            out[f"encoder_b{li}"] = b
        for name in HEAD_NAMES:
            for li, (w, b) in enumerate(self.heads[name]):
                out[f"{name}_w{li}"] = w
                out[f"{name}_b{li}"] = b
        return out

    def parameters(self) -> dict[str, Tensor]:
        return {**self.grid_parameters(), **self.mlp_parameters()}

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters().values():
            t.requires_grad = flag

    def state_bytes(self) -> bytes:
        """Serialized parameter payload; handy for freeze assertions."""
        return b"".join(
            np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            for t in self.parameters().values()
        )


def normalize_coords(positions: Tensor, t: float, bounds: SceneBounds) -> Tensor:
    """Map world positions + timestep into [0,1]^4; out-of-range clamps."""
    n = positions.shape[0]
    span = bounds.bbox_max - bounds.bbox_min
    shifted = ad.sub(positions, ad.broadcast_to(Tensor(bounds.bbox_min.reshape(1, 3)), (n, 3)))
    scaled = ad.mul(shifted, ad.broadcast_to(Tensor((1.0 / span).reshape(1, 3)), (n, 3)))
    xyz = ad.clamp(scaled, 0.0, 1.0)
    t_norm = float(np.clip(t, 0.0, 1.0))
    t_col = Tensor(np.full((n, 1), t_norm))
    return ad.concat([xyz, t_col], axis=1)


def plane_interp(grid: Tensor, u: Tensor, v: Tensor) -> Tensor:
    """Bilinear interpolation of a feature plane at normalized (u, v) in [0,1].

    Exact at grid nodes; differentiable w.r.t. grid values and coordinates.
    Fused op: the backward scatter-adds the four corner contributions and
    chains the blend weights back to the query coordinates.
    """
    ru, rv, channels = grid.shape
    gu = u.data * float(ru - 1)
    gv = v.data * float(rv - 1)
    iu = np.clip(np.floor(gu), 0, ru - 2).astype(np.int64)[:, 0]
    iv = np.clip(np.floor(gv), 0, rv - 2).astype(np.int64)[:, 0]
    fu = gu - iu[:, None]
    fv = gv - iv[:, None]

    flat = grid.data.reshape(ru * rv, channels)
    i00 = iu * rv + iv
    c00, c10, c01, c11 = flat[i00], flat[i00 + rv], flat[i00 + 1], flat[i00 + rv + 1]
    w00 = (1.0 - fu) * (1.0 - fv)
    w10 = fu * (1.0 - fv)
    w01 = (1.0 - fu) * fv
    w11 = fu * fv
    out = w00 * c00 + w10 * c10 + w01 * c01 + w11 * c11

    def bw(g):
        contribs = []
        if grid.requires_grad:
            acc = np.zeros_like(flat)
            np.add.at(acc, i00, w00 * g)
            np.add.at(acc, i00 + rv, w10 * g)
            np.add.at(acc, i00 + 1, w01 * g)
            np.add.at(acc, i00 + rv + 1, w11 * g)
            contribs.append((grid, acc.reshape(grid.shape)))
        if u.requires_grad:
            d_fu = (c10 - c00) * (1.0 - fv) + (c11 - c01) * fv
            contribs.append((u, np.sum(g * d_fu, axis=1, keepdims=True) * (ru - 1)))
        if v.requires_grad:
            d_fv = (c01 - c00) * (1.0 - fu) + (c11 - c10) * fu
            contribs.append((v, np.sum(g * d_fv, axis=1, keepdims=True) * (rv - 1)))
        return contribs

    return ad.custom_op(out, (grid, u, v), bw)


def query(field: HexplaneField, positions: Tensor, t: float) -> Tensor:
    """Fused plane features: per level, Hadamard product over the six planes;
    levels concatenated into a (N, 2*channels) feature."""
    coords = normalize_coords(positions, t, field.bounds)
    cols = [ad.slice_tensor(coords, (slice(None), slice(i, i + 1))) for i in range(4)]
    level_feats = []
    gi = 0
    for _level in LEVELS:
        feat = None
        for (ai, aj) in PLANE_PAIRS:
            val = plane_interp(field.grids[gi], cols[ai], cols[aj])
            feat = val if feat is None else ad.mul(feat, val)
            gi += 1
        level_feats.append(feat)
    return ad.concat(level_feats, axis=1)


def _mlp_forward(x: Tensor, layers, final_relu: bool) -> Tensor:
    n = x.shape[0]
    for li, (w, b) in enumerate(layers):
        x = ad.add(ad.matmul(x, w), ad.broadcast_to(b, (n, w.shape[1])))
        if final_relu or li < len(layers) - 1:
            x = ad.relu(x)
    return x


def deformation(field: HexplaneField, positions: Tensor, t: float) -> DeformationDelta:
    """Per-Gaussian offsets at timestep t; differentiable w.r.t. field
    parameters and positions."""
    f_h = query(field, positions, t)
    f_d = _mlp_forward(f_h, field.encoder, final_relu=True)
    dp = _mlp_forward(f_d, field.heads["position"], final_relu=False)
    ds = _mlp_forward(f_d, field.heads["scale"], final_relu=False)
    dr = _mlp_forward(f_d, field.heads["rotation"], final_relu=False)
    return DeformationDelta(dp=dp, ds=ds, dr=dr)


def deform_cloud(cloud: GaussianCloud, delta: DeformationDelta) -> GaussianCloud:
    """Apply offsets: positions += dp, log-scales += ds, raw quaternions += dr.

    Opacity and SH coefficients are passed through untouched (same tensors),
    so their state is bit-identical by construction.
    """
    if delta.num_points != cloud.num_points:
        raise ValueError(
            f"deform_cloud: delta for {delta.num_points} points, cloud has {cloud.num_points}"
        )
    return GaussianCloud(
        positions=ad.add(cloud.positions, delta.dp),
        log_scales=ad.add(cloud.log_scales, delta.ds),
        rotations=ad.add(cloud.rotations, delta.dr),
        opacity_logits=cloud.opacity_logits,
        sh_coeffs=cloud.sh_coeffs,
        sh_degree=cloud.sh_degree,
    )


def deformed_cloud_at(field: HexplaneField, cloud: GaussianCloud, t: float) -> GaussianCloud:
    return deform_cloud(cloud, deformation(field, cloud.positions, t))


def _grid_tv(grid: Tensor) -> tuple[Tensor, int]:
    """Sum of squared axis-adjacent feature differences plus the pair count.

    Fused op: d/d(grid) of sum(d^2) scatters +-2d onto the difference stencil.
    """
    ru, rv, _c = grid.shape
    g = grid.data
    d0 = g[1:] - g[:-1] if ru > 1 else None
    d1 = g[:, 1:] - g[:, :-1] if rv > 1 else None
    count = (d0.size if d0 is not None else 0) + (d1.size if d1 is not None else 0)
    total = 0.0
    if d0 is not None:
        total += float(np.sum(d0 * d0))
    if d1 is not None:
        total += float(np.sum(d1 * d1))

    def bw(gout):
        scale = 2.0 * float(gout.reshape(()))
        acc = np.zeros_like(g)
        if d0 is not None:
            acc[1:] += scale * d0
            acc[:-1] -= scale * d0
        if d1 is not None:
            acc[:, 1:] += scale * d1
            acc[:, :-1] -= scale * d1
        return [(grid, acc)]

    return ad.custom_op(np.array(total), (grid,), bw), count


def tv_loss(field: HexplaneField) -> Tensor:
    """Mean over grids of the mean squared difference between axis-adjacent
    node features (both axes pooled)."""
    per_grid = []
    for grid in field.grids:
        total, count = _grid_tv(grid)
        per_grid.append(ad.mul(total, 1.0 / max(count, 1)))
    acc = per_grid[0]
    for term in per_grid[1:]:
        acc = ad.add(acc, term)
    return ad.mul(acc, 1.0 / len(per_grid))


# ---------------------------------------------------------------------------
# Checkpoint I/O


def save_field(field: HexplaneField, path) -> None:
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<IIII", FIELD_VERSION, field.channels, field.hidden,
                             field.time_res))
        for (ai, aj) in PLANE_PAIRS:
            ru = HexplaneField.axis_resolution(ai, 1, field.base_res, field.time_res)
            rv = HexplaneField.axis_resolution(aj, 1, field.base_res, field.time_res)
            fh.write(struct.pack("<II", ru, rv))
        fh.write(np.ascontiguousarray(field.bounds.bbox_min, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(field.bounds.bbox_max, dtype="<f8").tobytes())
        for t in field.parameters().values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_field(path) -> HexplaneField:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FIELD_MAGIC:
            raise ValueError(f"load_field: bad magic {magic!r} in {path}")
        version, channels, hidden, time_res = struct.unpack("<IIII", fh.read(16))
        if version != FIELD_VERSION:
            raise ValueError(f"load_field: unsupported version {version}")
        res_table = [struct.unpack("<II", fh.read(8)) for _ in PLANE_PAIRS]
        base_res = res_table[0][0]  # x resolution of the (x, y) plane

        def read(shape):
            count = int(np.prod(shape))
            arr = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
            return arr.astype(np.float64).reshape(shape)

        bounds = SceneBounds(read((3,)), read((3,)))
        target = HexplaneField.create(
            bounds, channels=channels, base_res=base_res, time_res=time_res, hidden=hidden
        )
        for t in target.parameters().values():
            t.data = read(t.shape)
        return target
