"""Bidirectional sampling and discrete gated / passive volume rendering.

Camera rays are sampled from the proposal grid; every shaded camera sample
spawns a shadow segment toward the illuminator. With ``topk`` set, only the
``topk`` highest-weight samples of each ray are shaded (appearance, normals,
shadows) and their weighted sums are rescaled by ``sum(w) / sum(w_topk)``,
which keeps the ray's energy and leaves every weight differentiable; all
samples still enter transmittance and depth.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch

from .field import ProposalGrid, SceneGrid
from .gating import GatingModel
from .illum import IlluminatorModule, shadow_psi
from .sampling import deltas_from_t, proposal_samples, quadrature_weights, ray_aabb


@dataclass
class RenderOptions:
    n_samples: int = 64
    n_coarse: int = 64
    n_shadow: int = 32
    n_shadow_coarse: int = 16
    proposal_floor: float = 0.1
    topk: int | None = None
    shadows: bool = True
    shadow_bias: float | None = None  # metres; None -> 1.5 density voxels
    near: float = 0.0
    chunk: int = 4096

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.n_shadow < 1:
            raise ValueError("n_shadow must be >= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "RenderOptions":
        return cls(**d)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Rays:
    """A batch of camera rays; ``cam_R`` is the camera-to-world rotation of each ray's camera."""

    origins: torch.Tensor
    dirs: torch.Tensor
    cam_R: torch.Tensor
    near: torch.Tensor
    far: torch.Tensor
    hit: torch.Tensor

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, sl) -> "Rays":
        return Rays(*(getattr(self, f.name)[sl] for f in fields(self)))

    @classmethod
    def make(cls, origins, dirs, cam_R, bounds, near_min: float = 0.0) -> "Rays":
        dirs = dirs / dirs.norm(dim=-1, keepdim=True)
        near, far, hit = ray_aabb(origins, dirs, bounds)
        near = near.clamp(min=near_min)
        hit = hit & (far > near)
        far = torch.where(hit, far, near)
        return cls(origins, dirs, cam_R, near, far, hit)

    @classmethod
    def cat(cls, items: list["Rays"]) -> "Rays":
        return cls(*(torch.cat([getattr(r, f.name) for r in items]) for f in fields(cls)))


def pixel_directions(intr: Intrinsics, dtype=torch.float64) -> torch.Tensor:
    """Camera-frame directions (unnormalised, z = 1) for every pixel, row-major ``(H*W, 3)``."""
    v, u = torch.meshgrid(torch.arange(intr.height, dtype=dtype), torch.arange(intr.width, dtype=dtype),
                          indexing="ij")
    x = (u + 0.5 - intr.cx) / intr.fx
    y = (v + 0.5 - intr.cy) / intr.fy
    return torch.stack([x, y, torch.ones_like(x)], -1).reshape(-1, 3)


def camera_rays(intr: Intrinsics, pose, bounds, near_min: float = 0.0, dtype=torch.float32,
                pixels: torch.Tensor | None = None) -> Rays:
    """Rays for a camera-to-world ``pose`` (4x4, OpenCV axes: x right, y down, z forward)."""
    pose = torch.as_tensor(np.asarray(pose, dtype=np.float64))
    d = pixel_directions(intr)
    if pixels is not None:
        d = d[pixels]
    d = d / d.norm(dim=-1, keepdim=True)
    R, o = pose[:3, :3], pose[:3, 3]
    dw = (d @ R.T).to(dtype)
    n = dw.shape[0]
    return Rays.make(o.to(dtype).expand(n, 3).contiguous(), dw, R.to(dtype).expand(n, 3, 3),
                     torch.as_tensor(bounds, dtype=dtype), near_min)


@dataclass
class SampleSet:
    t: torch.Tensor        # camera distances l_j, (B, N)
    deltas: torch.Tensor   # (B, N)
    x: torch.Tensor        # (B, N, 3)
    sigma: torch.Tensor | None = None
    w: torch.Tensor | None = None
    T: torch.Tensor | None = None
    T_final: torch.Tensor | None = None
    l_i: torch.Tensor | None = None  # illuminator distances of shaded samples, (B, K)


@dataclass
class RenderOutput:
    gated: torch.Tensor        # (B, 3) rendered active slices incl. passive term and dark level
    passive: torch.Tensor      # (B,) rendered passive slice
    active: torch.Tensor       # (B, 3) active addend
    passive_sum: torch.Tensor  # (B,) passive addend
    depth: torch.Tensor        # (B,) NaN where the accumulated weight is <= 0.5
    acc: torch.Tensor          # (B,)
    shadow: torch.Tensor       # (B,) sum_j w_j psi_j over shaded samples
    samples: SampleSet
    shaded: dict = field(default_factory=dict)


def sample_camera_ray(rays: Rays, proposal: ProposalGrid, n_samples: int, n_coarse: int = 64,
                      floor: float = 0.1, noise: torch.Tensor | None = None) -> SampleSet:
    """Stratified inverse-CDF samples on ``[near, far]`` from the proposal grid."""
    t = proposal_samples(proposal, rays.origins, rays.dirs, rays.near, rays.far, n_samples, n_coarse,
                         floor, noise)
    x = rays.origins[:, None, :] + t[..., None] * rays.dirs[:, None, :]
    return SampleSet(t=t, deltas=deltas_from_t(t), x=x)


def expected_depth(w: torch.Tensor, t: torch.Tensor, min_acc: float = 0.5) -> torch.Tensor:
    acc = w.sum(-1)
    d = (w * t).sum(-1) / acc.clamp(min=1e-12)
    return torch.where(acc > min_acc, d, torch.full_like(d, float("nan")))


def _shadow_bias(scene: SceneGrid, opts: RenderOptions) -> float:
    if opts.shadow_bias is not None:
        return float(opts.shadow_bias)
    return 1.5 * float(scene.voxel_size.max())


def render_samples(scene: SceneGrid, proposal: ProposalGrid, gating: GatingModel, illum: IlluminatorModule,
                   rays: Rays, s: SampleSet, opts: RenderOptions,
                   shadow_noise: torch.Tensor | None = None) -> RenderOutput:
    """Shade a given sample set; the renderer core."""
    B, N = s.t.shape
    dt = scene.dtype
    valid = rays.hit[:, None] & (s.deltas > 0)
    c = scene.corners(s.x)
    sigma = scene.sigma(s.x, c).reshape(B, N)
    sigma = torch.where(valid, sigma, torch.zeros_like(sigma))
    w, T, T_final = quadrature_weights(sigma, s.deltas)
    s.sigma, s.w, s.T, s.T_final = sigma, w, T, T_final

    K = N if opts.topk is None else min(opts.topk, N)
    if K == N:
        idx = torch.arange(N).expand(B, N)
    else:
        idx = w.detach().topk(K, dim=-1).indices
    ws = w.gather(1, idx)
    ts = s.t.gather(1, idx)
    xs = rays.origins[:, None, :] + ts[..., None] * rays.dirs[:, None, :]
    flat = xs.reshape(-1, 3)
    nrm, ok = scene.normal(flat)
    emb = scene.embedding(flat)
    d = rays.dirs[:, None, :].expand(B, K, 3).reshape(-1, 3)

    o_i, R_i = illum.frame(rays.cam_R, rays.origins)
    omega, l_i, gamma = illum.ray(xs, o_i, R_i)
    omega_f = omega.reshape(-1, 3)
    alpha = scene.alpha_from_embedding(emb, d, omega_f).reshape(B, K)
    inside = scene.inside(flat)
    lam = scene.ambient_from_embedding(emb, d, inside).reshape(B, K)
    iota = illum.cone(gamma)
    cos = (nrm * omega_f).sum(-1).abs().reshape(B, K)
    if opts.shadows:
        psi = shadow_psi(scene, proposal, o_i, xs, opts.n_shadow, opts.n_shadow_coarse, opts.proposal_floor,
                         _shadow_bias(scene, opts), shadow_noise)
    else:
        psi = torch.ones_like(ws)
    gain = gating.active_gain(ts + l_i)  # (B, K, 3)
    if K < N:
        ws = ws * (w.sum(-1) / ws.sum(-1).clamp(min=1e-12))[:, None]
    shade = (ws * alpha * iota * psi * cos)[..., None] * gain
    active = shade.sum(1)
    passive_sum = (ws * lam).sum(1) + T_final * scene.background
    dark = gating.dark.to(dt)
    gated = active + passive_sum[:, None] + dark
    passive = passive_sum + gating.dark_p.to(dt)
    s.l_i = l_i
    shaded = dict(idx=idx, w=ws, t=ts, x=xs, normal=nrm.reshape(B, K, 3), normal_ok=ok.reshape(B, K),
                  omega=omega, alpha=alpha, ambient=lam, iota=iota, psi=psi, cos=cos)
    return RenderOutput(gated=gated, passive=passive, active=active, passive_sum=passive_sum,
                        depth=expected_depth(w, s.t), acc=w.sum(-1), shadow=(ws * psi).sum(1),
                        samples=s, shaded=shaded)


def render_rays(scene: SceneGrid, proposal: ProposalGrid, gating: GatingModel, illum: IlluminatorModule,
                rays: Rays, opts: RenderOptions, noise: dict | None = None) -> RenderOutput:
    """Full forward model for a batch of rays.

    ``noise`` may hold pre-drawn stratification jitter ``"cam"`` (``(B, n_samples)``)
    and ``"shadow"`` (``(B, K, n_shadow)``); absent entries use stratum midpoints.
    """
    noise = noise or {}
    s = sample_camera_ray(rays, proposal, opts.n_samples, opts.n_coarse, opts.proposal_floor, noise.get("cam"))
    return render_samples(scene, proposal, gating, illum, rays, s, opts, noise.get("shadow"))


def render_gated(rays, k, scene, proposal, gating, illum, opts) -> torch.Tensor:
    return render_rays(scene, proposal, gating, illum, rays, opts).gated[:, k]


def render_passive(rays, scene, proposal, gating, opts) -> torch.Tensor:
    s = sample_camera_ray(rays, proposal, opts.n_samples, opts.n_coarse, opts.proposal_floor)
    valid = rays.hit[:, None] & (s.deltas > 0)
    sigma = torch.where(valid, scene.sigma(s.x).reshape(s.t.shape), torch.zeros_like(s.t))
    w, _, T_final = quadrature_weights(sigma, s.deltas)
    B, N = s.t.shape
    d = rays.dirs[:, None, :].expand(B, N, 3).reshape(-1, 3)
    flat = s.x.reshape(-1, 3)
    lam = scene.ambient_from_embedding(scene.embedding(flat), d, scene.inside(flat)).reshape(B, N)
    return (w * lam).sum(1) + T_final * scene.background + gating.dark_p


def render_depth(rays, scene, proposal, opts) -> torch.Tensor:
    s = sample_camera_ray(rays, proposal, opts.n_samples, opts.n_coarse, opts.proposal_floor)
    valid = rays.hit[:, None] & (s.deltas > 0)
    sigma = torch.where(valid, scene.sigma(s.x).reshape(s.t.shape), torch.zeros_like(s.t))
    w, _, _ = quadrature_weights(sigma, s.deltas)
    return expected_depth(w, s.t)


def render_components(rays, scene, proposal, gating, illum, opts):
    """``(active_sum (B, 3), passive_sum (B,), expected shadow (B,), depth (B,))``."""
    out = render_rays(scene, proposal, gating, illum, rays, opts)
    shadow = out.shadow / out.shaded["w"].sum(1).clamp(min=1e-12)
    return out.active, out.passive_sum, shadow, out.depth


@torch.no_grad()
def render_image(scene, proposal, gating, illum, rays: Rays, opts: RenderOptions) -> dict[str, np.ndarray]:
    """Chunked, gradient-free rendering of a ray batch into flat numpy arrays."""
    parts = []
    for i in range(0, len(rays), opts.chunk):
        o = render_rays(scene, proposal, gating, illum, rays[i:i + opts.chunk], opts)
        parts.append(dict(gated=o.gated, passive=o.passive, active=o.active, passive_sum=o.passive_sum,
                          depth=o.depth, acc=o.acc,
                          shadow=o.shadow / o.shaded["w"].sum(1).clamp(min=1e-12)))
    return {k: torch.cat([p[k] for p in parts]).double().numpy() for k in parts[0]}
