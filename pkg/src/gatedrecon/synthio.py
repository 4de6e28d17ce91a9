"""Synthetic scenes, capture simulation and dataset file formats.

Scene config (JSON)::

    {
      "bounds": [[xmin, ymin, zmin], [xmax, ymax, zmax]],
      "background": 0.0,                     # ambient outside the bounds
      "intrinsics": {"fx", "fy", "cx", "cy", "width", "height"},
      "poses": [[[4x4 camera-to-world, OpenCV axes]], ...],
      "splits": ["train", ..., "test"],      # one tag per pose
      "gating": {GatingParams fields},
      "illuminator": {IlluminatorModel fields},
      "attenuation": {"kind", "z_ref", "z_min"},
      "primitives": [
        {"type": "plane", "point": [..], "normal": [..], "albedo": a, "ambient": L},
        {"type": "sphere", "center": [..], "radius": r, ...},
        {"type": "box", "center": [..], "half_size": [..], "rot": [axis-angle], ...}
      ],
      "shell_thickness": 2.0,                # m
      "shell_optical_depth": 20.0,           # integral of sigma across a shell
      "normalize": true,                     # pick m_k so slice plateaus peak near 1
      "noise_sigma": 0.0
    }

A plane's normal points toward free space; its solid side is behind it.
Surfaces are thin density shells lying just inside each solid.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .field import N_AMB, N_REFL, ProposalGrid, SceneGrid
from .gating import AttenuationModel, GatingModel, GatingParams
from .illum import IlluminatorModel, IlluminatorModule, axis_angle_matrix, shadow_transmittance
from .render import Intrinsics, RenderOptions, camera_rays, render_image

SH_C0 = 0.28209479177387814


class DataError(ValueError):
    pass


class PFMHeaderError(DataError):
    pass


class PFMEndianError(DataError):
    pass


class PFMDimensionError(DataError):
    pass


class MissingFileError(DataError, FileNotFoundError):
    pass


class SceneSpecError(DataError):
    pass


# -- primitives -------------------------------------------------------------------------


def _as3(v, what):
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise SceneSpecError(f"{what} must be a finite 3-vector")
    return a


@dataclass
class Primitive:
    type: str
    albedo: float = 0.5
    ambient: float = 0.1
    point: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, -1.0)
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    half_size: tuple = (1.0, 1.0, 1.0)
    rot: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.type not in ("plane", "sphere", "box"):
            raise SceneSpecError(f"unknown primitive type {self.type!r}")
        if not 0 < self.albedo < 1:
            raise SceneSpecError("albedo must lie in (0, 1)")
        if self.ambient < 0:
            raise SceneSpecError("ambient must be non-negative")
        if self.type == "plane":
            n = _as3(self.normal, "plane normal")
            if np.linalg.norm(n) < 1e-9:
                raise SceneSpecError("degenerate plane normal")
            self.normal = tuple(n / np.linalg.norm(n))
            self.point = tuple(_as3(self.point, "plane point"))
        elif self.type == "sphere":
            if not self.radius > 0:
                raise SceneSpecError("degenerate sphere radius")
            self.center = tuple(_as3(self.center, "sphere center"))
        else:
            h = _as3(self.half_size, "box half_size")
            if np.any(h <= 0):
                raise SceneSpecError("degenerate box extent")
            self.half_size = tuple(h)
            self.center = tuple(_as3(self.center, "box center"))
            self.rot = tuple(_as3(self.rot, "box rotation"))

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        try:
            return cls(**d)
        except TypeError as err:
            raise SceneSpecError(str(err)) from err

    def to_dict(self) -> dict:
        keep = {"plane": ("point", "normal"), "sphere": ("center", "radius"),
                "box": ("center", "half_size", "rot")}[self.type]
        d = {"type": self.type, "albedo": self.albedo, "ambient": self.ambient}
        for k in keep:
            v = getattr(self, k)
            d[k] = list(v) if isinstance(v, tuple) else v
        return d

    def sdf(self, x: np.ndarray) -> np.ndarray:
        """Signed distance, negative inside the solid."""
        if self.type == "plane":
            return (x - np.asarray(self.point)) @ np.asarray(self.normal)
        if self.type == "sphere":
            return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius
        R = axis_angle_matrix(self.rot)
        q = np.abs((x - np.asarray(self.center)) @ R) - np.asarray(self.half_size)
        outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
        return outside + np.minimum(q.max(-1), 0)

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Distance to the first surface hit along unit rays (inf on a miss)."""
        inf = np.full(d.shape[:-1], np.inf)
        if self.type == "plane":
            n = np.asarray(self.normal)
            denom = d @ n
            t = ((np.asarray(self.point) - o) @ n) / np.where(np.abs(denom) < 1e-12, 1e-12, denom)
            return np.where((np.abs(denom) >= 1e-12) & (t > 0), t, inf)
        if self.type == "sphere":
            oc = o - np.asarray(self.center)
            b = np.sum(oc * d, -1)
            c = np.sum(oc * oc, -1) - self.radius ** 2
            disc = b * b - c
            sq = np.sqrt(np.maximum(disc, 0))
            t0, t1 = -b - sq, -b + sq
            t = np.where(t0 > 0, t0, t1)
            return np.where((disc >= 0) & (t > 0), t, inf)
        R = axis_angle_matrix(self.rot)
        ol = (o - np.asarray(self.center)) @ R
        dl = d @ R
        h = np.asarray(self.half_size)
        inv = 1.0 / np.where(np.abs(dl) < 1e-12, 1e-12, dl)
        ta, tb = (-h - ol) * inv, (h - ol) * inv
        tn = np.minimum(ta, tb).max(-1)
        tf = np.maximum(ta, tb).min(-1)
        t = np.where(tn > 0, tn, tf)
        return np.where((tf >= tn) & (t > 0), t, inf)


@dataclass
class SceneSpec:
    bounds: list
    intrinsics: Intrinsics
    poses: list = field(default_factory=list)
    splits: list = field(default_factory=list)
    primitives: list = field(default_factory=list)
    background: float = 0.0
    gating: GatingParams = field(default_factory=GatingParams)
    illuminator: IlluminatorModel = field(default_factory=IlluminatorModel)
    attenuation: AttenuationModel = field(default_factory=AttenuationModel)
    shell_thickness: float = 2.0
    shell_optical_depth: float = 20.0
    normalize: bool = True
    noise_sigma: float = 0.0

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=float)
        if b.shape != (2, 3) or not np.all(b[1] > b[0]):
            raise SceneSpecError("bounds must be [[min xyz], [max xyz]] with max > min")
        self.bounds = b.tolist()
        if isinstance(self.intrinsics, dict):
            self.intrinsics = Intrinsics(**self.intrinsics)
        self.primitives = [p if isinstance(p, Primitive) else Primitive.from_dict(p) for p in self.primitives]
        if not self.primitives and self.background <= 0:
            raise SceneSpecError("a scene needs at least one primitive or a background")
        for i, P in enumerate(self.poses):
            check_pose(P, f"pose {i}")
        if self.splits and len(self.splits) != len(self.poses):
            raise SceneSpecError("splits must tag every pose")
        if not self.splits:
            self.splits = ["train"] * len(self.poses)
        if not self.shell_thickness > 0 or not self.shell_optical_depth > 0:
            raise SceneSpecError("shell thickness and optical depth must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        try:
            d["gating"] = GatingParams.from_dict(d.get("gating", {}))
            d["illuminator"] = IlluminatorModel.from_dict(d.get("illuminator", {}))
            d["attenuation"] = AttenuationModel(**d.get("attenuation", {}))
            return cls(**d)
        except (TypeError, KeyError) as err:
            raise SceneSpecError(str(err)) from err

    def to_dict(self) -> dict:
        return dict(bounds=self.bounds, intrinsics=self.intrinsics.to_dict(),
                    poses=[np.asarray(P).tolist() for P in self.poses], splits=list(self.splits),
                    primitives=[p.to_dict() for p in self.primitives], background=self.background,
                    gating=self.gating.to_dict(), illuminator=self.illuminator.to_dict(),
                    attenuation=self.attenuation.to_dict(), shell_thickness=self.shell_thickness,
                    shell_optical_depth=self.shell_optical_depth, normalize=self.normalize,
                    noise_sigma=self.noise_sigma)

    @classmethod
    def load(cls, path) -> "SceneSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as err:
            raise SceneSpecError(f"{path}: {err}") from err

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def check_pose(P, what="pose") -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.shape != (4, 4):
        raise SceneSpecError(f"{what}: expected a 4x4 matrix")
    R = P[:3, :3]
    if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
        raise SceneSpecError(f"{what}: not a rigid transform")
    if np.abs(P[3] - [0, 0, 0, 1]).max() > 0:
        raise SceneSpecError(f"{what}: last row must be [0, 0, 0, 1]")
    return P


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> np.ndarray:
    """Camera-to-world pose with OpenCV axes (z forward, y down)."""
    eye = np.asarray(eye, float)
    z = np.asarray(target, float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(-np.asarray(up, float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    P = np.eye(4)
    P[:3, 0], P[:3, 1], P[:3, 2], P[:3, 3] = x, y, z, eye
    return P


def default_scene(n_train: int = 20, n_test: int = 5, width: int = 160, height: int = 90) -> SceneSpec:
    """Three-primitive street-like scene: ground, a slanted back wall and a box standing on the ground.

    Cameras sit on a short lateral track looking down +z; ``n_test`` evenly
    spread poses are held out.
    """
    n = n_train + n_test
    poses = []
    for i in range(n):
        a = i / max(n - 1, 1)
        eye = np.array([-6 + 12 * a, -0.5 * np.sin(2 * np.pi * a), 0.0])
        target = np.array([6.0 * (a - 0.5), 0.0, 100.0])
        poses.append(look_at(eye, target))
    test = set(np.round(np.linspace(0, n - 1, n_test + 2)[1:-1]).astype(int).tolist()) if n_test else set()
    splits = ["test" if i in test else "train" for i in range(n)]
    fx = 240.0 * width / 160
    intr = Intrinsics(fx=fx, fy=fx, cx=width / 2, cy=height / 2, width=width, height=height)
    prims = [
        Primitive("plane", albedo=0.30, ambient=0.08, point=(0.0, 4.0, 0.0), normal=(0.0, -1.0, 0.0)),
        Primitive("plane", albedo=0.45, ambient=0.12, point=(0.0, 0.0, 150.0), normal=(0.4, 0.0, -1.0)),
        Primitive("box", albedo=0.70, ambient=0.20, center=(-10.0, 0.5, 70.0), half_size=(5.0, 3.5, 5.0),
                  rot=(0.0, 0.5, 0.0)),
    ]
    return SceneSpec(bounds=[[-65.0, -38.0, 5.0], [65.0, 6.0, 190.0]], intrinsics=intr, poses=poses,
                     splits=splits, primitives=prims, background=0.0,
                     illuminator=IlluminatorModel(trans=(4.0, 0.0, 0.0)))


# -- baking ------------------------------------------------------------------------------


def _inv_softplus(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30, y, np.log(np.expm1(np.maximum(y, 1e-12))))


def shell_raw(spec: SceneSpec, x: np.ndarray, density_scale: float = 1.0):
    """Raw density (before ``softplus(scale * raw)``) and nearest-primitive index at points ``x``.

    In depth-below-surface ``s`` each shell ramps up linearly to ``s = h``
    and then drops four times as steeply, so the integral of ``sigma``
    across it is ``shell_optical_depth``. The ramp is linear in ``s`` where
    shading samples carry weight, which trilinear interpolation reproduces
    exactly on planar pieces (including the gradient, hence the normals).
    """
    h = spec.shell_thickness
    slope = 2 * spec.shell_optical_depth / (density_scale * h * h)
    raw = np.full(x.shape[:-1], -1e4)
    near = np.zeros(x.shape[:-1], dtype=int)
    best = np.full(x.shape[:-1], np.inf)
    for i, p in enumerate(spec.primitives):
        s = -p.sdf(x)
        r = np.where(s <= h, slope * s, slope * h - 4 * slope * (s - h))
        raw = np.maximum(raw, r)
        dist = np.abs(s)
        near = np.where(dist < best, i, near)
        best = np.minimum(best, dist)
    return np.maximum(raw, -1e4), near


def bake_scene(spec: SceneSpec, resolution=128, appearance_resolution=None, density_scale: float = 1.0,
               dtype=torch.float32) -> SceneGrid:
    """Rasterize the primitives' shells, albedos and ambient levels into a :class:`SceneGrid`."""
    appearance_resolution = appearance_resolution or resolution
    grid = SceneGrid(spec.bounds, resolution, appearance_resolution, density_scale=density_scale,
                     background=spec.background, dtype=dtype)
    with torch.no_grad():
        if not spec.primitives:
            grid.density.fill_(-1e4)
            return grid
        xv = grid.vertex_positions().double().numpy()
        raw, _ = shell_raw(spec, xv, density_scale)
        grid.density.copy_(torch.from_numpy(raw))
        xa = grid.vertex_positions(grid.app_res).double().numpy()
        _, near = shell_raw(spec, xa, density_scale)
        alb = np.array([p.albedo for p in spec.primitives])[near]
        amb = np.array([p.ambient for p in spec.primitives])[near]
        refl = np.zeros(near.shape + (N_REFL,))
        refl[..., 0] = np.log(alb / (1 - alb)) / SH_C0
        ambc = np.zeros(near.shape + (N_AMB,))
        ambc[..., 0] = _inv_softplus(amb) / SH_C0
        grid.reflectance.copy_(torch.from_numpy(refl))
        grid.ambient.copy_(torch.from_numpy(ambc))
    return grid


def pixel_rays_np(intr: Intrinsics, pose):
    pose = np.asarray(pose, dtype=float)
    v, u = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
    d = np.stack([(u + 0.5 - intr.cx) / intr.fx, (v + 0.5 - intr.cy) / intr.fy, np.ones(u.shape)], -1)
    d = d.reshape(-1, 3)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    d = d @ pose[:3, :3].T
    return np.broadcast_to(pose[:3, 3], d.shape).copy(), d


def first_hit(spec: SceneSpec, o: np.ndarray, d: np.ndarray):
    t = np.full(d.shape[:-1], np.inf)
    idx = np.full(d.shape[:-1], -1)
    for i, p in enumerate(spec.primitives):
        ti = p.intersect(o, d)
        better = ti < t
        t = np.where(better, ti, t)
        idx = np.where(better, i, idx)
    # hits outside the scene box do not exist in the baked grid
    x = o + np.where(np.isfinite(t), t, 0)[..., None] * d
    lo, hi = np.asarray(spec.bounds)
    inside = np.all((x >= lo - 1e-9) & (x <= hi + 1e-9), -1)
    t = np.where(inside, t, np.inf)
    return t, np.where(np.isfinite(t), idx, -1)


def gt_depth(spec: SceneSpec, pose) -> np.ndarray:
    """Analytic distance along each pixel ray to the first surface, ``(H, W)``; NaN where nothing is hit."""
    intr = spec.intrinsics
    o, d = pixel_rays_np(intr, pose)
    t, _ = first_hit(spec, o, d)
    return np.where(np.isfinite(t), t, np.nan).reshape(intr.height, intr.width)


def normalized_gating(spec: SceneSpec) -> GatingParams:
    """Pulse counts chosen so a unit-albedo, head-on surface at each gate's opening distance reads 1."""
    g = spec.gating
    if not spec.normalize:
        return g
    eta = spec.illuminator.eta if spec.illuminator.eta > 0 else 1.0
    m = tuple(1.0 / (eta * g.t_l[k] * float(spec.attenuation(g.c * g.xi[k]))) for k in range(3))
    return g.replace(m=m)


@dataclass
class GatedStack:
    active: np.ndarray   # (3, H, W)
    passive: np.ndarray  # (H, W)
    depth: np.ndarray    # (H, W), NaN where no surface
    shadow: np.ndarray   # (H, W), 1 where the first surface is shadowed
    pose: np.ndarray
    intrinsics: Intrinsics


def simulation_options() -> RenderOptions:
    return RenderOptions(n_samples=192, n_coarse=128, n_shadow=32, n_shadow_coarse=32, topk=24, chunk=2048)


def simulate_capture(scene, pose, gating: GatingParams, illum: IlluminatorModel, noise_sigma: float = 0.0,
                     seed: int = 0, attenuation: AttenuationModel | None = None,
                     opts: RenderOptions | None = None, proposal: ProposalGrid | None = None,
                     spec: SceneSpec | None = None, intrinsics: Intrinsics | None = None) -> GatedStack:
    """Render three active slices and the passive slice of a scene from ``pose``.

    ``scene`` is a :class:`SceneSpec` (baked at 128 per axis) or a ready
    :class:`SceneGrid`; GT depth and the shadow mask need the analytic SceneSpec.
    """
    if isinstance(scene, SceneSpec):
        spec = scene
        scene = bake_scene(spec, *default_resolution(spec))
    intr = intrinsics or spec.intrinsics
    opts = opts or simulation_options()
    proposal = proposal or ProposalGrid.distill(scene, [max(2, r // 8) for r in scene.res])
    dt = scene.dtype
    gm = GatingModel(gating, attenuation, dtype=dt)
    im = IlluminatorModule(illum, dtype=dt)
    rays = camera_rays(intr, pose, scene.bounds, dtype=dt)
    out = render_image(scene, proposal, gm, im, rays, opts)
    H, W = intr.height, intr.width
    active = out["gated"].T.reshape(3, H, W)
    passive = out["passive"].reshape(H, W)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        active = active + rng.normal(0, noise_sigma, active.shape)
        passive = passive + rng.normal(0, noise_sigma, passive.shape)
    if spec is not None:
        depth = gt_depth(spec, pose)
        o, d = pixel_rays_np(intr, pose)
        hit = np.isfinite(depth.reshape(-1))
        x = o + np.nan_to_num(depth.reshape(-1))[:, None] * d
        psi = np.ones(hit.shape)
        if hit.any():
            bias = 1.5 * float(scene.voxel_size.max())
            psi[hit] = shadow_transmittance(x[hit], scene, illum, proposal, opts.n_shadow, cam_pose=pose,
                                            bias=bias, n_coarse=opts.n_shadow_coarse)
        shadow = (hit & (psi < 0.5)).astype(np.float64).reshape(H, W)
    else:
        depth = np.where(out["acc"] > 0.5, out["depth"], np.nan).reshape(H, W)
        shadow = np.zeros((H, W))
    return GatedStack(active=active, passive=passive, depth=depth, shadow=shadow,
                      pose=np.asarray(pose, dtype=float), intrinsics=intr)


# -- PFM ---------------------------------------------------------------------------------


def write_pfm(path, image: np.ndarray) -> None:
    """Grayscale little-endian PFM (scale -1.0), rows stored bottom-up."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise PFMDimensionError(f"expected a 2D image, got shape {img.shape}")
    h, w = img.shape
    head = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(head + np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(str(path))
    buf = path.read_bytes()
    parts, pos = [], 0
    for _ in range(3):
        end = buf.find(b"\n", pos)
        if end < 0:
            raise PFMHeaderError(f"{path}: truncated header")
        parts.append(buf[pos:end].decode("ascii", "replace").strip())
        pos = end + 1
    if parts[0] != "Pf":
        raise PFMHeaderError(f"{path}: expected grayscale 'Pf', got {parts[0]!r}")
    try:
        w, h = (int(v) for v in parts[1].split())
        scale = float(parts[2])
    except ValueError as err:
        raise PFMHeaderError(f"{path}: malformed header") from err
    if w <= 0 or h <= 0 or scale == 0:
        raise PFMHeaderError(f"{path}: malformed header")
    if scale > 0:
        raise PFMEndianError(f"{path}: big-endian PFM (scale {scale}) is not supported")
    data = buf[pos:]
    if len(data) != 4 * w * h:
        raise PFMDimensionError(f"{path}: {len(data)} payload bytes for a {w}x{h} image")
    return np.frombuffer(data, dtype="<f4").reshape(h, w)[::-1].astype(np.float32)


# -- manifest and datasets -----------------------------------------------------------------

SLICE_KEYS = ("active0", "active1", "active2", "passive")


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=1))


def read_manifest(path, validate: bool = True) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(str(path))
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise DataError(f"{path}: {err}") from err
    m["_root"] = str(path.parent)
    if validate:
        validate_manifest(m)
    return m


def validate_manifest(m: dict) -> None:
    root = Path(m.get("_root", "."))
    for key in ("intrinsics", "frames", "bounds", "gating", "illuminator"):
        if key not in m:
            raise DataError(f"manifest lacks {key!r}")
    try:
        intr = Intrinsics(**m["intrinsics"])
        for fr in m["frames"]:
            check_pose(fr["pose"], f"frame {fr.get('id')}")
    except (SceneSpecError, TypeError, KeyError) as err:
        raise DataError(f"invalid manifest: {err}") from err
    for fr in m["frames"]:
        try:
            files = [fr["slices"][k] for k in SLICE_KEYS] + [fr["depth"], fr["shadow"]]
        except KeyError as err:
            raise DataError(f"frame {fr.get('id')} lacks {err}") from err
        for rel in files:
            p = root / rel
            if not p.exists():
                raise MissingFileError(f"missing file referenced by manifest: {p}")
            with open(p, "rb") as fh:
                fh.readline()
                dims = fh.readline().split()
            if [v.decode("ascii", "replace") for v in dims] != [str(intr.width), str(intr.height)]:
                raise PFMDimensionError(f"{p}: size {dims} does not match intrinsics")


@dataclass
class GatedDataset:
    intrinsics: Intrinsics
    bounds: np.ndarray
    poses: np.ndarray     # (V, 4, 4)
    images: np.ndarray    # (V, 4, H, W): three active slices then passive
    depth: np.ndarray     # (V, H, W), NaN where no surface
    shadow: np.ndarray    # (V, H, W)
    splits: list
    gating: GatingParams
    illuminator: IlluminatorModel
    attenuation: AttenuationModel
    background: float = 0.0
    gt_grid: str | None = None

    def views(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def subset(self, idx) -> "GatedDataset":
        idx = list(idx)
        return GatedDataset(self.intrinsics, self.bounds, self.poses[idx], self.images[idx], self.depth[idx],
                            self.shadow[idx], [self.splits[i] for i in idx], self.gating, self.illuminator,
                            self.attenuation, self.background, self.gt_grid)


def load_dataset(path) -> GatedDataset:
    m = read_manifest(path)
    root = Path(m["_root"])
    imgs, depth, shadow, poses, splits = [], [], [], [], []
    for fr in m["frames"]:
        imgs.append(np.stack([read_pfm(root / fr["slices"][k]) for k in SLICE_KEYS]))
        depth.append(read_pfm(root / fr["depth"]))
        shadow.append(read_pfm(root / fr["shadow"]))
        poses.append(np.asarray(fr["pose"], dtype=float))
        splits.append(fr.get("split", "train"))
    gt = m.get("gt_grid")
    return GatedDataset(Intrinsics(**m["intrinsics"]), np.asarray(m["bounds"], dtype=float), np.stack(poses),
                        np.stack(imgs), np.stack(depth), np.stack(shadow), splits,
                        GatingParams.from_dict(m["gating"]), IlluminatorModel.from_dict(m["illuminator"]),
                        AttenuationModel(**m.get("attenuation", {})), float(m.get("background", 0.0)),
                        str(root / gt) if gt else None)


def default_resolution(spec: SceneSpec, base: int = 128, appearance: int = 64):
    """Isotropic GT density resolution with as many vertices as a ``base``-cubed grid."""
    ext = np.diff(np.asarray(spec.bounds), axis=0)[0]
    step = float(np.cbrt(np.prod(ext) / base ** 3))
    res = tuple(int(max(8, round(e / step))) + 1 for e in ext)
    return res, appearance


def simulate_dataset(spec: SceneSpec, out_dir, seed: int = 0, resolution=None, log=print) -> Path:
    """Render every pose of ``spec`` into PFMs plus a manifest; returns the manifest path."""
    from .field import save_grid

    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    res, app = (resolution, 64) if resolution is not None else default_resolution(spec)
    grid = bake_scene(spec, res, app)
    proposal = ProposalGrid.distill(grid, [max(2, r // 8) for r in grid.res])
    gating = normalized_gating(spec)
    frames = []
    for i, (P, split) in enumerate(zip(spec.poses, spec.splits)):
        st = simulate_capture(grid, P, gating, spec.illuminator, spec.noise_sigma, seed + i, spec.attenuation,
                              proposal=proposal, spec=spec)
        fid = f"{i:03d}"
        rel = {k: f"frames/{fid}_{k}.pfm" for k in SLICE_KEYS}
        for k in range(3):
            write_pfm(out / rel[f"active{k}"], st.active[k])
        write_pfm(out / rel["passive"], st.passive)
        write_pfm(out / f"frames/{fid}_depth.pfm", st.depth)
        write_pfm(out / f"frames/{fid}_shadow.pfm", st.shadow)
        frames.append(dict(id=fid, pose=np.asarray(P).tolist(), split=split, slices=rel,
                           depth=f"frames/{fid}_depth.pfm", shadow=f"frames/{fid}_shadow.pfm"))
        if log:
            log(f"simulated frame {fid} ({split})")
    save_grid(out / "gt_grid.gfgrid", grid, proposal)
    spec.save(out / "scene.json")
    manifest = dict(version=1, intrinsics=spec.intrinsics.to_dict(), bounds=spec.bounds,
                    background=spec.background, gating=gating.to_dict(), illuminator=spec.illuminator.to_dict(),
                    attenuation=spec.attenuation.to_dict(), frames=frames, gt_grid="gt_grid.gfgrid",
                    scene="scene.json")
    write_manifest(out / "manifest.json", manifest)
    return out / "manifest.json"
