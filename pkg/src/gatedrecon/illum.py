"""Illuminator cone, camera-to-illuminator extrinsics and shadow transmittance.

Extrinsics are expressed in the camera frame: the illuminator sits at ``trans``
and is rotated by ``rot`` (axis-angle) relative to the camera, so with camera
pose ``(R_c, o_c)`` its world origin is ``o_c + R_c @ trans`` and its optical
axis is ``R_c @ exp(rot) @ [0, 0, 1]``. Angular displacements ``gamma`` are
measured per axis in the illuminator frame (x right, y down, z forward).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .gating import ParameterDomainError


class DegenerateRayError(ValueError):
    pass


def _pair(v):
    v = tuple(float(x) for x in (v if np.ndim(v) else (v, v)))
    if len(v) != 2:
        raise ParameterDomainError("expected a 2-vector")
    return v


def _vec3(v):
    v = tuple(float(x) for x in v)
    if len(v) != 3:
        raise ParameterDomainError("expected a 3-vector")
    return v


@dataclass(frozen=True)
class IlluminatorModel:
    eta: float = 1.0
    Xi: tuple[float, float] = (0.0, 0.0)
    Omega: tuple[float, float] = (0.35, 0.25)
    Theta: tuple[float, float] = (2.0, 2.0)
    rot: tuple[float, float, float] = (0.0, 0.0, 0.0)
    trans: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "Xi", _pair(self.Xi))
        object.__setattr__(self, "Omega", _pair(self.Omega))
        object.__setattr__(self, "Theta", _pair(self.Theta))
        object.__setattr__(self, "rot", _vec3(self.rot))
        object.__setattr__(self, "trans", _vec3(self.trans))
        if self.eta < 0:
            raise ParameterDomainError("eta must be non-negative")
        if min(self.Omega) <= 0:
            raise ParameterDomainError("Omega components must be positive")
        if min(self.Theta) < 1:
            raise ParameterDomainError("Theta components must be >= 1")

    def replace(self, **kw) -> "IlluminatorModel":
        d = asdict(self)
        d.update(kw)
        return IlluminatorModel(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "IlluminatorModel":
        try:
            return cls(**d)
        except TypeError as err:
            raise ParameterDomainError(str(err)) from err


def axis_angle_matrix(r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    theta = np.linalg.norm(r)
    K = np.array([[0, -r[2], r[1]], [r[2], 0, -r[0]], [-r[1], r[0], 0]])
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def cone_intensity(gamma, model: IlluminatorModel):
    """Separable super-Gaussian ``eta * exp(-sum_a ((g_a - Xi_a)^2 / (2 Omega_a^2))^Theta_a)``."""
    gamma = np.asarray(gamma, dtype=float)
    u = (gamma - np.asarray(model.Xi)) ** 2 / (2 * np.asarray(model.Omega) ** 2)
    return model.eta * np.exp(-np.sum(u ** np.asarray(model.Theta), axis=-1))


def illuminator_frame(model: IlluminatorModel, cam_pose: np.ndarray | None = None):
    """World origin and world-from-illuminator rotation."""
    pose = np.eye(4) if cam_pose is None else np.asarray(cam_pose, dtype=float)
    R_c, o_c = pose[:3, :3], pose[:3, 3]
    return o_c + R_c @ np.asarray(model.trans), R_c @ axis_angle_matrix(model.rot)


def illuminator_ray(x, model: IlluminatorModel, cam_pose: np.ndarray | None = None):
    """Return ``(o_i, omega, l_i, gamma)`` for world point(s) ``x``."""
    o_i, R_i = illuminator_frame(model, cam_pose)
    v = np.asarray(x, dtype=float) - o_i
    l_i = np.linalg.norm(v, axis=-1)
    if np.any(l_i <= 1e-12):
        raise DegenerateRayError("point coincides with the illuminator origin")
    omega = v / l_i[..., None]
    local = omega @ R_i  # rows: R_i^T omega
    gamma = np.stack([np.arctan2(local[..., 0], local[..., 2]),
                      np.arctan2(local[..., 1], local[..., 2])], axis=-1)
    return o_i, omega, l_i, gamma


# -- differentiable counterpart -------------------------------------------------------


def axis_angle_torch(r: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula, smooth through ``r = 0``."""
    th2 = (r * r).sum()
    small = th2 < 1e-8
    safe = torch.where(small, torch.ones_like(th2), th2)
    th = safe.sqrt()
    a = torch.where(small, 1 - th2 / 6 + th2 * th2 / 120, torch.sin(th) / th)
    b = torch.where(small, 0.5 - th2 / 24 + th2 * th2 / 720, (1 - torch.cos(th)) / safe)
    z = torch.zeros_like(r[0])
    K = torch.stack([torch.stack([z, -r[2], r[1]]),
                     torch.stack([r[2], z, -r[0]]),
                     torch.stack([-r[1], r[0], z])])
    eye = torch.eye(3, dtype=r.dtype)
    return eye + a * K + b * (K @ K)


class IlluminatorModule(nn.Module):
    """Learnable cone and extrinsics. ``eta`` and ``Omega`` in log space; ``Theta`` clamped at 1."""

    def __init__(self, model: IlluminatorModel, dtype=torch.float32):
        super().__init__()
        f = lambda v: torch.tensor(v, dtype=dtype)
        self.log_eta = nn.Parameter(torch.log(f(max(model.eta, 1e-30))))
        self.Xi = nn.Parameter(f(model.Xi))
        self.log_Omega = nn.Parameter(torch.log(f(model.Omega)))
        self.Theta_raw = nn.Parameter(f(model.Theta))
        self.rot = nn.Parameter(f(model.rot))
        self.trans = nn.Parameter(f(model.trans))
        self.enabled = model.eta > 0

    @property
    def eta(self):
        e = self.log_eta.exp()
        return e if self.enabled else e * 0

    @property
    def Theta(self):
        return self.Theta_raw.clamp(min=1.0)

    def cone(self, gamma: torch.Tensor) -> torch.Tensor:
        u = (gamma - self.Xi) ** 2 / (2 * self.log_Omega.exp() ** 2)
        # d(u^Theta)/dTheta = u^Theta log u is NaN at u = 0 without the clamp
        return self.eta * torch.exp(-(u.clamp(min=1e-30) ** self.Theta).sum(-1))

    def frame(self, cam_R: torch.Tensor, cam_o: torch.Tensor):
        """Per-ray illuminator origin ``(B, 3)`` and world-from-illuminator rotation ``(B, 3, 3)``."""
        R_il = axis_angle_torch(self.rot)
        o_i = cam_o + torch.einsum("bij,j->bi", cam_R, self.trans)
        return o_i, cam_R @ R_il

    def ray(self, x: torch.Tensor, o_i: torch.Tensor, R_i: torch.Tensor):
        """``omega``, ``l_i``, ``gamma`` for points ``x`` of shape ``(B, S, 3)``."""
        v = x - o_i[:, None, :]
        l_i = v.norm(dim=-1).clamp(min=1e-9)
        omega = v / l_i[..., None]
        local = torch.einsum("bsi,bij->bsj", omega, R_i)
        gamma = torch.stack([torch.atan2(local[..., 0], local[..., 2]),
                             torch.atan2(local[..., 1], local[..., 2])], dim=-1)
        return omega, l_i, gamma

    def to_model(self) -> IlluminatorModel:
        with torch.no_grad():
            return IlluminatorModel(
                eta=float(self.eta), Xi=tuple(self.Xi.double().tolist()),
                Omega=tuple(self.log_Omega.exp().double().tolist()),
                Theta=tuple(self.Theta.double().tolist()),
                rot=tuple(self.rot.double().tolist()), trans=tuple(self.trans.double().tolist()),
            )


# -- shadows ----------------------------------------------------------------------------


def shadow_psi(scene, proposal, o_i: torch.Tensor, x: torch.Tensor, n_samples: int = 32,
               n_coarse: int = 16, floor: float = 0.1, bias: float = 0.0,
               noise: torch.Tensor | None = None) -> torch.Tensor:
    """Transmittance from the illuminator origin ``o_i`` (``(B, 3)``) to points ``x`` (``(B, K, 3)``).

    The segment stops ``bias`` metres short of ``x`` so that the shell the
    point itself sits in does not shadow it, and is clipped to the scene box.
    """
    from .sampling import deltas_from_t, proposal_samples, ray_aabb

    o = o_i[:, None, :].expand_as(x)
    v = x - o
    length = v.norm(dim=-1).clamp(min=1e-9)
    omega = v / length[..., None]
    end = (length - bias).clamp(min=0)
    near, far, hit = ray_aabb(o, omega, scene.bounds)
    a = torch.minimum(near, end)
    b = torch.minimum(far, end)
    valid = hit & (b > a)
    span = torch.where(valid, b - a, torch.zeros_like(a))
    with torch.no_grad():
        t0 = proposal_samples(proposal, o.detach(), omega.detach(), a.detach(), (a + span).detach(),
                              n_samples, n_coarse, floor, noise)
        s0 = span.detach()[..., None]
        frac = torch.where(s0 > 0, (t0 - a.detach()[..., None]) / s0.clamp(min=1e-30), torch.zeros_like(t0))
    # samples are fixed fractions of the segment, so its endpoints stay differentiable
    t = a[..., None] + frac * span[..., None]
    pts = o[..., None, :] + t[..., None] * omega[..., None, :]
    tau = (scene.sigma(pts) * deltas_from_t(t)).sum(-1)
    return torch.exp(-torch.where(valid, tau, torch.zeros_like(tau)))


def shadow_transmittance(x, scene, model: IlluminatorModel, proposal=None, n_shadow_samples: int = 32,
                         cam_pose=None, bias: float = 0.0, n_coarse: int = 16) -> np.ndarray:
    """Shadow indicator ``psi`` in ``[0, 1]`` for world point(s) ``x``."""
    from .field import ProposalGrid

    if n_shadow_samples < 1:
        raise ValueError("n_shadow_samples must be >= 1")
    x = np.asarray(x, dtype=float)
    pts = torch.as_tensor(x.reshape(1, -1, 3), dtype=scene.dtype)
    o_i, _ = illuminator_frame(model, cam_pose)
    proposal = proposal or ProposalGrid.empty(scene.bounds, 2, scene.dtype)
    with torch.no_grad():
        psi = shadow_psi(scene, proposal, torch.as_tensor(o_i[None], dtype=scene.dtype), pts,
                         max(n_shadow_samples, 2), n_coarse, bias=bias)
    out = psi.reshape(x.shape[:-1]).double().numpy()
    return out if out.ndim else float(out)
