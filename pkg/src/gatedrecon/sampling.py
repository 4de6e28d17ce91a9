"""Ray/box clipping, piecewise-constant proposal PDFs, inverse-CDF sampling and quadrature."""
from __future__ import annotations

import torch


def ray_aabb(o: torch.Tensor, d: torch.Tensor, bounds: torch.Tensor):
    """Slab test. Returns ``(t_near, t_far, hit)``; ``t_near`` is clamped at zero."""
    inv = 1.0 / torch.where(d.abs() < 1e-12, torch.full_like(d, 1e-12), d)
    t0 = (bounds[0] - o) * inv
    t1 = (bounds[1] - o) * inv
    near = torch.minimum(t0, t1).amax(-1).clamp(min=0)
    far = torch.maximum(t0, t1).amin(-1)
    return near, far, far > near


def deltas_from_t(t: torch.Tensor) -> torch.Tensor:
    """``delta_j = t_{j+1} - t_j`` with the last spacing repeated."""
    d = t[..., 1:] - t[..., :-1]
    return torch.cat([d, d[..., -1:]], -1)


def quadrature_weights(sigmas: torch.Tensor, deltas: torch.Tensor):
    """Volume-rendering weights along the last axis.

    Returns ``(w, T, T_final)`` with ``T_j = exp(-sum_{k<j} sigma_k delta_k)``,
    ``w_j = T_j (1 - exp(-sigma_j delta_j))`` and ``T_final`` the transmittance
    past the last sample, so ``w.sum(-1) == 1 - T_final``.
    """
    tau = sigmas * deltas
    acc = torch.cumsum(tau, -1)
    excl = torch.cat([torch.zeros_like(acc[..., :1]), acc[..., :-1]], -1)
    T = torch.exp(-excl)
    w = T * -torch.expm1(-tau)
    return w, T, torch.exp(-acc[..., -1])


def proposal_pdf(sigmas: torch.Tensor, bin_len: torch.Tensor, floor: float = 0.1,
                 eps: float = 1e-3) -> torch.Tensor:
    """Turn coarse bin densities into a sampling PDF with a uniform floor.

    ``bin_len`` broadcasts against ``sigmas`` (one length per ray is typical).
    Rays with total proposal weight below ``eps`` fall back towards uniform.
    """
    w, _, _ = quadrature_weights(sigmas, bin_len.expand_as(sigmas))
    n = sigmas.shape[-1]
    total = w.sum(-1, keepdim=True)
    pdf = (1 - floor) * w / total.clamp(min=eps) + floor / n
    return pdf / pdf.sum(-1, keepdim=True)


def stratified_u(shape, noise: torch.Tensor | None = None) -> torch.Tensor:
    """Stratified uniforms ``(i + xi) / n`` along the last axis; ``xi = 0.5`` without noise."""
    n = shape[-1]
    i = torch.arange(n, dtype=noise.dtype if noise is not None else torch.get_default_dtype())
    xi = 0.5 if noise is None else noise
    return (i + xi) / n


def sample_pdf(edges: torch.Tensor, pdf: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Inverse CDF of a piecewise-constant PDF over bins ``edges`` (``n + 1`` per ray)."""
    cdf = torch.cumsum(pdf, -1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf], -1)
    cdf[..., -1] = 1.0
    u = u.clamp(0, 1).contiguous()
    hi = torch.searchsorted(cdf.contiguous(), u, right=True).clamp(1, cdf.shape[-1] - 1)
    lo = hi - 1
    c0, c1 = cdf.gather(-1, lo), cdf.gather(-1, hi)
    e0, e1 = edges.gather(-1, lo), edges.gather(-1, hi)
    span = c1 - c0
    frac = torch.where(span > 0, (u - c0) / torch.where(span > 0, span, torch.ones_like(span)), torch.zeros_like(u))
    return e0 + frac * (e1 - e0)


def proposal_samples(proposal, o, d, a, b, n_samples: int, n_coarse: int, floor: float,
                     noise: torch.Tensor | None = None) -> torch.Tensor:
    """Distances in ``[a, b]`` along rays ``o + t d`` drawn from the proposal grid.

    Shapes: ``o, d`` are ``(..., 3)``, ``a, b`` are ``(...)``; returns ``(..., n_samples)``.
    """
    with torch.no_grad():
        s = torch.linspace(0, 1, n_coarse + 1, dtype=o.dtype)
        span = (b - a).clamp(min=0)
        edges = a[..., None] + span[..., None] * s
        mids = 0.5 * (edges[..., 1:] + edges[..., :-1])
        x = o[..., None, :] + mids[..., None] * d[..., None, :]
        sig = proposal.density(x)
        pdf = proposal_pdf(sig, (span / n_coarse)[..., None], floor)
        u = stratified_u(mids.shape[:-1] + (n_samples,), noise)
        u = u.to(o.dtype).expand(*mids.shape[:-1], n_samples)
        return sample_pdf(edges, pdf, u)
