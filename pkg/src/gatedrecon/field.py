"""Explicit voxel-grid scene representation.

Grids store values on vertices spanning the scene bounds inclusively, so a
grid with ``R`` vertices along an axis has ``R - 1`` cells of size
``extent / (R - 1)``. Density is stored raw and mapped through
``softplus(density_scale * raw)``; reflectance and ambient are stored as
real spherical-harmonic coefficients.

Checkpoint layout (``GFGRID1``, every number little-endian)::

    magic       8 bytes   b"GFGRID1\\0"
    version     uint32    1
    bounds      6 x f32   xmin ymin zmin xmax ymax zmax
    dens_scale  f64
    background  f64       ambient returned outside the bounds
    n_fields    uint32
    per field:
      name      16 bytes  ASCII, NUL padded
      shape     4 x u32   rx ry rz channels
      data      f32       rx*ry*rz*channels values, C order (x, y, z, channel)
"""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

N_REFL = 12  # 9 view-direction SH terms + 3 degree-1 illumination-direction terms
N_AMB = 9
EPS_GRAD = 1e-8
MAGIC = b"GFGRID1\0"


class GridFormatError(ValueError):
    pass


def sh_basis(d: torch.Tensor, order: int = 2) -> torch.Tensor:
    """Real spherical harmonics up to ``order`` (1 or 2) for unit vectors ``d``."""
    x, y, z = d.unbind(-1)
    out = [torch.full_like(x, 0.28209479177387814),
           0.4886025119029199 * y, 0.4886025119029199 * z, 0.4886025119029199 * x]
    if order >= 2:
        out += [1.0925484305920792 * x * y, 1.0925484305920792 * y * z,
                0.31539156525252005 * (3 * z * z - 1), 1.0925484305920792 * x * z,
                0.5462742152960396 * (x * x - y * y)]
    return torch.stack(out, -1)


def _res3(r) -> tuple[int, int, int]:
    r = (int(r),) * 3 if np.isscalar(r) else tuple(int(v) for v in r)
    if len(r) != 3 or min(r) < 2:
        raise ValueError(f"grid resolution must have 3 entries >= 2, got {r}")
    return r


class Corners:
    """Trilinear stencil of a batch of points against one grid."""

    __slots__ = ("idx", "w", "frac", "inside", "cell")

    def __init__(self, x: torch.Tensor, bounds: torch.Tensor, res: tuple[int, int, int]):
        lo, hi = bounds[0], bounds[1]
        rm1 = torch.tensor([r - 1 for r in res], dtype=x.dtype)
        self.cell = (hi - lo) / rm1
        u = (x - lo) / self.cell
        self.inside = ((u >= 0) & (u <= rm1)).all(-1)
        i0 = torch.minimum(u.detach().floor().clamp(min=0), rm1 - 1)
        f = (u - i0).clamp(0, 1)
        i0 = i0.long()
        ry, rz = res[1], res[2]
        base = i0[:, 0] * (ry * rz) + i0[:, 1] * rz + i0[:, 2]
        offs = torch.tensor([(dx * ry + dy) * rz + dz for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)])
        self.idx = base[:, None] + offs
        fx, fy, fz = f.unbind(-1)
        gx, gy = 1 - fx, 1 - fy
        wxy = torch.stack([gx * gy, gx * fy, fx * gy, fx * fy], -1)
        wz = torch.stack([1 - fz, fz], -1)
        self.w = (wxy[:, :, None] * wz[:, None, :]).reshape(-1, 8)
        self.frac = f

    def interp(self, grid: torch.Tensor) -> torch.Tensor:
        """Interpolate a ``(rx, ry, rz)`` or ``(rx, ry, rz, C)`` grid."""
        if grid.dim() == 3:
            return (grid.reshape(-1)[self.idx] * self.w).sum(-1)
        flat = grid.reshape(-1, grid.shape[-1])
        v = flat[self.idx.reshape(-1)].reshape(*self.idx.shape, -1)
        return torch.einsum("pk,pkc->pc", self.w, v)

    def spatial_grad(self, grid: torch.Tensor) -> torch.Tensor:
        """Analytic gradient of the scalar interpolant w.r.t. world position, ``(P, 3)``."""
        v = grid.reshape(-1)[self.idx].reshape(-1, 2, 2, 2)
        fx, fy, fz = self.frac.unbind(-1)
        wx = torch.stack([1 - fx, fx], -1)
        wy = torch.stack([1 - fy, fy], -1)
        wz = torch.stack([1 - fz, fz], -1)
        dx = v[:, 1] - v[:, 0]
        dy = v[:, :, 1] - v[:, :, 0]
        dz = v[:, :, :, 1] - v[:, :, :, 0]
        gx = torch.einsum("pbc,pb,pc->p", dx, wy, wz)
        gy = torch.einsum("pac,pa,pc->p", dy, wx, wz)
        gz = torch.einsum("pab,pa,pb->p", dz, wx, wy)
        return torch.stack([gx, gy, gz], -1) / self.cell


class SceneGrid(nn.Module):
    """Density, reflectance and ambient grids over an axis-aligned box."""

    def __init__(self, bounds, resolution=128, appearance_resolution=64, density_scale: float = 1.0,
                 background: float = 0.0, density_init: float = 0.0, dtype=torch.float32):
        super().__init__()
        bounds = torch.as_tensor(np.asarray(bounds, dtype=np.float64), dtype=dtype).reshape(2, 3)
        if not (bounds[1] > bounds[0]).all():
            raise ValueError("bounds must have max > min on every axis")
        self.register_buffer("bounds", bounds)
        self.res = _res3(resolution)
        self.app_res = _res3(appearance_resolution)
        self.density_scale = float(density_scale)
        self.background = float(background)
        self.density = nn.Parameter(torch.full(self.res, float(density_init), dtype=dtype))
        self.reflectance = nn.Parameter(torch.zeros(*self.app_res, N_REFL, dtype=dtype))
        self.ambient = nn.Parameter(torch.zeros(*self.app_res, N_AMB, dtype=dtype))

    @property
    def dtype(self):
        return self.density.dtype

    @property
    def voxel_size(self) -> torch.Tensor:
        return (self.bounds[1] - self.bounds[0]) / torch.tensor([r - 1 for r in self.res], dtype=self.dtype)

    def corners(self, x: torch.Tensor) -> Corners:
        return Corners(x.reshape(-1, 3), self.bounds, self.res)

    def app_corners(self, x: torch.Tensor) -> Corners:
        return Corners(x.reshape(-1, 3), self.bounds, self.app_res)

    def sigma(self, x: torch.Tensor, c: Corners | None = None) -> torch.Tensor:
        """Density at points ``x`` (any leading shape); zero outside the bounds."""
        c = c or self.corners(x)
        s = F.softplus(self.density_scale * c.interp(self.density))
        return torch.where(c.inside, s, torch.zeros_like(s)).reshape(x.shape[:-1])

    def normal(self, x: torch.Tensor, c: Corners | None = None):
        """``-grad(sigma) / |grad(sigma)|`` and a validity mask (False where degenerate or outside)."""
        c = c or self.corners(x)
        raw = self.density_scale * c.interp(self.density)
        g = torch.sigmoid(raw)[:, None] * self.density_scale * c.spatial_grad(self.density)
        norm = g.norm(dim=-1)
        ok = (norm > EPS_GRAD) & c.inside
        n = -g / torch.where(ok, norm, torch.ones_like(norm))[:, None]
        n = torch.where(ok[:, None], n, torch.zeros_like(n))
        return n.reshape(x.shape), ok.reshape(x.shape[:-1])

    def embedding(self, x: torch.Tensor, c: Corners | None = None) -> torch.Tensor:
        c = c or self.app_corners(x)
        return torch.cat([c.interp(self.reflectance), c.interp(self.ambient)], -1).reshape(
            *x.shape[:-1], N_REFL + N_AMB)

    def alpha_from_embedding(self, emb, d, omega):
        logit = (emb[..., :9] * sh_basis(d, 2)).sum(-1) + (emb[..., 9:N_REFL] * sh_basis(omega, 1)[..., 1:]).sum(-1)
        return torch.sigmoid(logit)

    def ambient_from_embedding(self, emb, d, inside=None):
        lam = F.softplus((emb[..., N_REFL:] * sh_basis(d, 2)).sum(-1))
        if inside is not None:
            lam = torch.where(inside, lam, torch.full_like(lam, self.background))
        return lam

    def inside(self, x: torch.Tensor) -> torch.Tensor:
        return ((x >= self.bounds[0]) & (x <= self.bounds[1])).all(-1)

    def query_density(self, x: torch.Tensor):
        return self.sigma(x), self.embedding(x)

    def query_normal(self, x: torch.Tensor):
        return self.normal(x)

    def query_reflectance(self, x, d, omega):
        return self.alpha_from_embedding(self.embedding(x), d, omega)

    def query_ambient(self, x, d):
        return self.ambient_from_embedding(self.embedding(x), d, self.inside(x))

    def vertex_sigma(self) -> torch.Tensor:
        with torch.no_grad():
            return F.softplus(self.density_scale * self.density)

    def vertex_positions(self, res=None) -> torch.Tensor:
        res = res or self.res
        lo, hi = self.bounds[0], self.bounds[1]
        axes = [torch.linspace(float(lo[a]), float(hi[a]), res[a], dtype=self.dtype) for a in range(3)]
        return torch.stack(torch.meshgrid(*axes, indexing="ij"), -1)


class ProposalGrid:
    """Coarse non-negative density used only to place samples."""

    def __init__(self, bounds: torch.Tensor, sigma: torch.Tensor):
        if (sigma < 0).any():
            raise ValueError("proposal densities must be non-negative")
        self.bounds = bounds
        self.sigma = sigma
        self.res = tuple(sigma.shape)

    @classmethod
    def empty(cls, bounds, resolution=16, dtype=torch.float32):
        return cls(torch.as_tensor(bounds, dtype=dtype).reshape(2, 3), torch.zeros(_res3(resolution), dtype=dtype))

    @classmethod
    def distill(cls, scene: SceneGrid, resolution=16, mode: str = "max",
                max_optical_depth: float | None = 0.25) -> "ProposalGrid":
        """Pool the scene density onto a coarse vertex grid.

        Each coarse vertex takes the max (or mean) of the fine vertex
        densities within half a coarse cell of it, so any fine surface lies
        within half a cell of a coarse vertex carrying its density. Values are
        then capped at ``max_optical_depth`` per coarse cell: pooled bands are
        wider than the surfaces in them, and an uncapped band would soak up
        all sampling mass at its leading edge and starve the surfaces behind it.
        """
        res = _res3(resolution)
        sig = scene.vertex_sigma()
        u = (scene.vertex_positions() - scene.bounds[0]) / (scene.bounds[1] - scene.bounds[0])
        u = u * torch.tensor([r - 1 for r in res], dtype=sig.dtype)
        near = torch.minimum(torch.round(u).long().clamp(min=0), torch.tensor([r - 1 for r in res]))
        flat = ((near[..., 0] * res[1] + near[..., 1]) * res[2] + near[..., 2]).reshape(-1)
        n = res[0] * res[1] * res[2]
        vals = sig.reshape(-1)
        if mode == "max":
            verts = torch.zeros(n, dtype=sig.dtype).scatter_reduce(0, flat, vals, "amax")
        elif mode == "mean":
            tot = torch.zeros(n, dtype=sig.dtype).index_add(0, flat, vals)
            cnt = torch.zeros(n, dtype=sig.dtype).index_add(0, flat, torch.ones_like(vals))
            verts = tot / cnt.clamp(min=1)
        else:
            raise ValueError(f"unknown distill mode {mode!r}")
        verts = verts.reshape(res)
        if max_optical_depth is not None:
            cell = (scene.bounds[1] - scene.bounds[0]) / torch.tensor([r - 1 for r in res], dtype=sig.dtype)
            verts = verts.clamp(max=max_optical_depth / float(cell.min()))
        return cls(scene.bounds.clone(), verts.contiguous())

    def density(self, x: torch.Tensor) -> torch.Tensor:
        c = Corners(x.reshape(-1, 3), self.bounds, self.res)
        s = c.interp(self.sigma)
        return torch.where(c.inside, s, torch.zeros_like(s)).reshape(x.shape[:-1])


# -- checkpoint I/O ---------------------------------------------------------------------


def _pack_field(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim == 3:
        arr = arr[..., None]
    head = name.encode("ascii").ljust(16, b"\0") + struct.pack("<4I", *arr.shape)
    return head + arr.tobytes()


def save_grid(path, scene: SceneGrid, proposal: ProposalGrid | None = None) -> None:
    b = scene.bounds.detach().double().cpu().numpy().reshape(-1)
    fields = [("density", scene.density), ("reflectance", scene.reflectance), ("ambient", scene.ambient)]
    if proposal is not None:
        fields.append(("proposal", proposal.sigma))
    out = [MAGIC, struct.pack("<I", 1), struct.pack("<6f", *b),
           struct.pack("<dd", scene.density_scale, scene.background), struct.pack("<I", len(fields))]
    for name, t in fields:
        out.append(_pack_field(name, t.detach().cpu().numpy()))
    Path(path).write_bytes(b"".join(out))


def load_grid(path, dtype=torch.float32) -> tuple[SceneGrid, ProposalGrid | None]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise GridFormatError(f"{path}: bad magic {buf[:8]!r}")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != 1:
        raise GridFormatError(f"{path}: unsupported version {version}")
    bounds = np.array(struct.unpack_from("<6f", buf, 12), dtype=np.float32).reshape(2, 3)
    dscale, bg = struct.unpack_from("<dd", buf, 36)
    (nf,) = struct.unpack_from("<I", buf, 52)
    off = 56
    arrays = {}
    for _ in range(nf):
        name = buf[off:off + 16].rstrip(b"\0").decode("ascii")
        shape = struct.unpack_from("<4I", buf, off + 16)
        off += 32
        n = math.prod(shape)
        if off + 4 * n > len(buf):
            raise GridFormatError(f"{path}: truncated field {name}")
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
    for need in ("density", "reflectance", "ambient"):
        if need not in arrays:
            raise GridFormatError(f"{path}: missing field {need}")
    dens = arrays["density"][..., 0]
    scene = SceneGrid(bounds, dens.shape, arrays["ambient"].shape[:3], density_scale=dscale,
                      background=bg, dtype=dtype)
    with torch.no_grad():
        scene.density.copy_(torch.from_numpy(dens.copy()))
        scene.reflectance.copy_(torch.from_numpy(arrays["reflectance"].copy()))
        scene.ambient.copy_(torch.from_numpy(arrays["ambient"].copy()))
    proposal = None
    if "proposal" in arrays:
        proposal = ProposalGrid(scene.bounds.clone(), torch.from_numpy(arrays["proposal"][..., 0].copy()).to(dtype))
    return scene, proposal
