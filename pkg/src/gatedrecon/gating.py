"""Gated image formation: range-intensity profiles and the per-pixel gated intensity.

Times are in nanoseconds, distances in metres. A profile is evaluated at the
*total* optical path ``z`` (camera -> point -> illuminator); the round-trip
time that enters the trapezoid is ``(z + d0) / c``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

SPEED_OF_LIGHT = 0.299792458  # m / ns
N_SLICES = 3


class ParameterDomainError(ValueError):
    """Raised when gating or illuminator parameters violate their invariants."""


def _triple(v) -> tuple[float, float, float]:
    if np.isscalar(v):
        return (float(v),) * N_SLICES
    v = tuple(float(x) for x in v)
    if len(v) != N_SLICES:
        raise ParameterDomainError(f"expected {N_SLICES} per-slice values, got {len(v)}")
    return v


@dataclass(frozen=True)
class GatingParams:
    """Per-slice gate/pulse timing plus the shared distance offset.

    ``dark_p`` is the dark level of the passive (laser-off) slice.
    """

    xi: tuple[float, float, float] = (240.0, 500.0, 900.0)
    t_l: tuple[float, float, float] = (240.0, 240.0, 240.0)
    t_g: tuple[float, float, float] = (300.0, 450.0, 600.0)
    m: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dark: tuple[float, float, float] = (0.0, 0.0, 0.0)
    dark_p: float = 0.0
    d0: float = 0.0
    c: float = SPEED_OF_LIGHT

    def __post_init__(self):
        for name in ("xi", "t_l", "t_g", "m", "dark"):
            object.__setattr__(self, name, _triple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        for k in range(N_SLICES):
            xi, tl, tg = self.xi[k], self.t_l[k], self.t_g[k]
            if not (tl > 0 and tg > 0):
                raise ParameterDomainError(f"slice {k}: pulse and gate widths must be positive")
            if tg < tl:
                raise ParameterDomainError(f"slice {k}: gate width {tg} < pulse width {tl}")
            if xi < tl:
                raise ParameterDomainError(f"slice {k}: delay {xi} < pulse width {tl}")
            if not self.m[k] > 0:
                raise ParameterDomainError(f"slice {k}: pulse count must be positive")
            if self.dark[k] < 0:
                raise ParameterDomainError(f"slice {k}: dark level must be non-negative")
        if self.dark_p < 0:
            raise ParameterDomainError("passive dark level must be non-negative")
        if not self.c > 0:
            raise ParameterDomainError("speed of light must be positive")

    def replace(self, **kw) -> "GatingParams":
        d = asdict(self)
        d.update(kw)
        return GatingParams(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GatingParams":
        try:
            return cls(**d)
        except TypeError as err:
            raise ParameterDomainError(str(err)) from err


@dataclass(frozen=True)
class AttenuationModel:
    """Distance decay of the returned pulse, ``(z_ref / max(z, z_min))**2``."""

    kind: str = "inverse-square"
    z_ref: float = 1.0
    z_min: float = 0.5

    def __post_init__(self):
        if self.kind not in ("inverse-square", "none"):
            raise ParameterDomainError(f"unknown attenuation kind {self.kind!r}")
        if not self.z_min > 0 or not self.z_ref > 0:
            raise ParameterDomainError("attenuation distances must be positive")

    def __call__(self, z):
        if self.kind == "none":
            if isinstance(z, torch.Tensor):
                return torch.ones_like(z)
            return np.ones_like(np.asarray(z, dtype=float))
        if isinstance(z, torch.Tensor):
            return (self.z_ref / z.clamp(min=self.z_min)) ** 2
        return (self.z_ref / np.maximum(np.asarray(z, dtype=float), self.z_min)) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


def _times(z, k: int, g: GatingParams):
    t = (np.asarray(z, dtype=float) + g.d0) / g.c
    return t, g.xi[k], g.t_l[k], g.t_g[k]


def profile(z, k: int, g: GatingParams):
    """Closed-form trapezoidal range-intensity profile, in ns.

    Rising edge on ``(xi - t_l, xi)``, plateau of height ``t_l`` up to
    ``xi + t_g - t_l``, falling edge down to zero at ``xi + t_g``.
    """
    t, xi, tl, tg = _times(z, k, g)
    out = np.zeros_like(t)
    rise = (t > xi - tl) & (t < xi)
    flat = (t >= xi) & (t <= xi + tg - tl)
    fall = (t > xi + tg - tl) & (t < xi + tg)
    out = np.where(rise, t - xi + tl, out)
    out = np.where(flat, tl, out)
    out = np.where(fall, xi + tg - t, out)
    return out if out.ndim else float(out)


def profile_numeric_oracle(z, k: int, g: GatingParams, n_steps: int = 2000):
    """Numerically integrate gate(t - xi) * pulse(t - tau) over t, with beta = 1.

    Composite midpoint rule over the union of both supports, on a uniform grid
    refined with the four edge times so each sub-interval sees a constant
    integrand. All points are integrated at once.
    Independent of :func:`profile`; meant for tests.
    """
    if n_steps < 1000:
        raise ValueError("n_steps must be >= 1000")
    tau, xi, tl, tg = _times(z, k, g)
    scalar = tau.ndim == 0
    tau = np.atleast_1d(tau).reshape(-1, 1)
    lo, hi = np.minimum(xi, tau), np.maximum(xi + tg, tau + tl)
    grid = lo + (hi - lo) * np.linspace(0, 1, n_steps + 1)
    edges = np.sort(np.concatenate([grid, np.broadcast_to([xi, xi + tg], tau.shape[:1] + (2,)), tau, tau + tl],
                                   axis=1), axis=1)
    edges = np.clip(edges, lo, hi)
    mid = 0.5 * (edges[:, 1:] + edges[:, :-1])
    inside = (mid >= xi) & (mid <= xi + tg) & (mid >= tau) & (mid <= tau + tl)
    out = np.sum(np.diff(edges, axis=1) * inside, axis=1)
    return float(out[0]) if scalar else out.reshape(np.shape(z))


def profile_grad(z, k: int, g: GatingParams) -> dict[str, np.ndarray]:
    """Partials of :func:`profile` w.r.t. ``xi``, ``t_l``, ``t_g`` and ``z``.

    Cases are half-open on the right so a point on a kink returns the
    right-limit subgradient. ``d/d d0`` equals ``d/dz``.
    """
    t, xi, tl, tg = _times(z, k, g)
    rise = (t >= xi - tl) & (t < xi)
    flat = (t >= xi) & (t < xi + tg - tl)
    fall = (t >= xi + tg - tl) & (t < xi + tg)
    zero = np.zeros_like(t)
    one = np.ones_like(t)
    return {
        "xi": np.where(rise, -one, np.where(fall, one, zero)),
        "t_l": np.where(rise | flat, one, zero),
        "t_g": np.where(fall, one, zero),
        "z": np.where(rise, one / g.c, np.where(fall, -one / g.c, zero)),
    }


def gated_pixel(alpha, iota, psi, cos_term, z, ambient, k: int, g: GatingParams,
                attenuation: AttenuationModel | None = None):
    """Single-surface gated intensity for slice ``k``."""
    beta = attenuation(z) if attenuation is not None else 1.0
    active = g.m[k] * alpha * iota * psi * cos_term * profile(z, k, g) * beta
    return active + ambient + g.dark[k]


# -- differentiable counterpart -------------------------------------------------------


def profile_torch(t: torch.Tensor, xi, t_l, t_g) -> torch.Tensor:
    """Overlap of a pulse starting at time ``t`` with the gate, any broadcastable shapes.

    ``min(t + t_l - xi, t_l, t_g, xi + t_g - t)`` clipped at zero. Equal to
    the trapezoid whenever ``t_g >= t_l`` and still a valid overlap when an
    optimizer steps outside that domain.
    """
    a = torch.minimum(t + t_l - xi, xi + t_g - t)
    b = torch.minimum(t_l, t_g)
    return torch.relu(torch.minimum(a, b))


class GatingModel(nn.Module):
    """Learnable gating parameters.

    Delays, widths and pulse counts live in log space so that fixed
    learning rates act relatively; dark levels and ``d0`` are raw.
    """

    def __init__(self, params: GatingParams, attenuation: AttenuationModel | None = None,
                 dtype=torch.float32):
        super().__init__()
        f = lambda v: torch.tensor(v, dtype=dtype)
        self.log_xi = nn.Parameter(torch.log(f(params.xi)))
        self.log_t_l = nn.Parameter(torch.log(f(params.t_l)))
        self.log_t_g = nn.Parameter(torch.log(f(params.t_g)))
        self.log_m = nn.Parameter(torch.log(f(params.m)))
        self.dark = nn.Parameter(f(params.dark))
        self.dark_p = nn.Parameter(f(params.dark_p))
        self.d0 = nn.Parameter(f(params.d0))
        self.c = params.c
        self.attenuation = attenuation or AttenuationModel()

    @property
    def xi(self):
        return self.log_xi.exp()

    @property
    def t_l(self):
        return self.log_t_l.exp()

    @property
    def t_g(self):
        return self.log_t_g.exp()

    @property
    def m(self):
        return self.log_m.exp()

    def profile(self, z: torch.Tensor) -> torch.Tensor:
        """Profiles of all slices at total path ``z``; output shape ``z.shape + (3,)``."""
        t = ((z + self.d0) / self.c).unsqueeze(-1)
        return profile_torch(t, self.xi, self.t_l, self.t_g)

    def active_gain(self, z: torch.Tensor) -> torch.Tensor:
        """``m_k * C_k(z) * beta(z)`` for every slice, shape ``z.shape + (3,)``."""
        return self.m * self.profile(z) * self.attenuation(z).unsqueeze(-1)

    def profile_case(self, z: torch.Tensor) -> torch.Tensor:
        """Integer case index per slice (0 outside, 1 rise, 2 plateau, 3 fall); for kink bookkeeping."""
        with torch.no_grad():
            t = ((z + self.d0) / self.c).unsqueeze(-1)
            xi, tl, tg = self.xi, self.t_l, self.t_g
            case = torch.zeros(t.shape[:-1] + (N_SLICES,), dtype=torch.int8)
            case[(t >= xi - tl) & (t < xi)] = 1
            case[(t >= xi) & (t < xi + tg - tl)] = 2
            case[(t >= xi + tg - tl) & (t < xi + tg)] = 3
        return case

    def to_params(self) -> GatingParams:
        with torch.no_grad():
            tl = self.t_l.double().tolist()
            tg = [max(a, b) for a, b in zip(self.t_g.double().tolist(), tl)]
            xi = [max(a, b) for a, b in zip(self.xi.double().tolist(), tl)]
            return GatingParams(
                xi=tuple(xi), t_l=tuple(tl), t_g=tuple(tg),
                m=tuple(self.m.double().tolist()),
                dark=tuple(max(0.0, v) for v in self.dark.double().tolist()),
                dark_p=max(0.0, float(self.dark_p)), d0=float(self.d0), c=self.c,
            )
