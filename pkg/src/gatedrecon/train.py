"""Losses, gradient evaluation and the reconstruction loop."""
from __future__ import annotations

import copy
import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .field import ProposalGrid, SceneGrid, load_grid, save_grid
from .gating import AttenuationModel, GatingModel, GatingParams
from .illum import IlluminatorModel, IlluminatorModule
from .parallel import ChunkRunner, chunk_slices, configure_determinism
from .render import RenderOptions, Rays, camera_rays, render_rays


class NumericalError(RuntimeError):
    pass


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.01
    lambda4: float = 1e-3
    lambda5: float = 1e-3
    s: float = 0.5
    eps_i: float = 0.05
    eps_x: float | None = None  # None -> half a density voxel
    eps_d_init: float = 0.5
    eps_d_decay: float = 0.999
    visibility: str = "any"  # slices that must exceed eps_i: "any" or "all"

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5) < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.s > 0 or not self.eps_i > 0:
            raise ValueError("s and eps_i must be positive")
        if not 0 < self.eps_d_decay <= 1:
            raise ValueError("eps_d_decay must lie in (0, 1]")
        if self.visibility not in ("any", "all"):
            raise ValueError("visibility must be 'any' or 'all'")

    def eps_d(self, step: int) -> float:
        return self.eps_d_init * self.eps_d_decay ** step

    @property
    def lambdas(self):
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)


@dataclass
class TrainConfig:
    steps: int = 35000
    batch_rays: int = 4096
    lr_fields: float = 1e-2
    lr_extrinsics: float = 1e-4
    lr_gating: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    lr_final: float = 1.0  # learning rates decay exponentially to this fraction at the last step
    seed: int = 0
    deterministic: bool = False
    threads: int = 1
    chunk_rays: int = 512
    trainable: tuple = ("fields", "extrinsics", "gating", "laser")
    frozen: tuple = ()  # individual parameter names held fixed, e.g. "gating.d0"
    proposal_every: int = 500
    proposal_resolution: int = 16
    checkpoint_every: int = 0
    val_every: int = 0
    val_rays: int = 4096
    log_every: int = 100
    shadows: bool = True
    stratified: bool = True  # jitter sample positions each step; False uses fixed midpoints
    render: RenderOptions = field(default_factory=RenderOptions)

    def __post_init__(self):
        if isinstance(self.render, dict):
            self.render = RenderOptions.from_dict(self.render)
        self.trainable = tuple(self.trainable)
        self.frozen = tuple(self.frozen)
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if min(self.lr_fields, self.lr_extrinsics, self.lr_gating) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.lr_final <= 1:
            raise ValueError("lr_final must lie in (0, 1]")
        bad = set(self.trainable) - set(PARAM_GROUPS)
        if bad:
            raise ValueError(f"unknown parameter groups {sorted(bad)}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["render"] = self.render.to_dict()
        d["trainable"] = list(self.trainable)
        d["frozen"] = list(self.frozen)
        return d


PARAM_GROUPS = ("fields", "extrinsics", "gating", "laser")


def load_config(path) -> tuple[TrainConfig, LossWeights]:
    d = json.loads(Path(path).read_text())
    return TrainConfig(**d.get("train", {})), LossWeights(**d.get("loss", {}))


# -- model --------------------------------------------------------------------------------


class ReconModel(nn.Module):
    """Scene grids plus sensor parameters, with the parameter groups used by the optimizer."""

    def __init__(self, scene: SceneGrid, gating: GatingModel, illum: IlluminatorModule,
                 proposal: ProposalGrid | None = None):
        super().__init__()
        self.scene, self.gating, self.illum = scene, gating, illum
        self.proposal = proposal or ProposalGrid.empty(scene.bounds, 16, scene.dtype)

    def groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        il = dict(self.illum.named_parameters())
        return {
            "fields": [(f"scene.{n}", p) for n, p in self.scene.named_parameters()],
            "extrinsics": [("illum.rot", il["rot"]), ("illum.trans", il["trans"])],
            "gating": [(f"gating.{n}", p) for n, p in self.gating.named_parameters()],
            "laser": [(f"illum.{n}", il[n]) for n in ("log_eta", "Xi", "log_Omega", "Theta_raw")],
        }

    def trainable(self, groups, frozen=()) -> list[tuple[str, nn.Parameter]]:
        out = []
        for g in groups:
            out += [(n, p) for n, p in self.groups()[g] if n not in frozen]
        return out

    def distill(self, resolution) -> None:
        self.proposal = ProposalGrid.distill(self.scene, resolution)


def init_model(bounds, gating: GatingParams, illum: IlluminatorModel, attenuation: AttenuationModel | None = None,
               resolution=64, appearance_resolution=None, density_scale: float = 10.0, density_init: float = -0.5,
               background: float = 0.0, dtype=torch.float32) -> ReconModel:
    scene = SceneGrid(bounds, resolution, appearance_resolution or resolution, density_scale=density_scale,
                      background=background, density_init=density_init, dtype=dtype)
    return ReconModel(scene, GatingModel(gating, attenuation, dtype=dtype), IlluminatorModule(illum, dtype=dtype))


# -- losses -------------------------------------------------------------------------------


def loss_photometric(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Sum over rays and slices of the per-slice residual norms; inputs ``(B, 4)``."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().sum()


def loss_depth(w: torch.Tensor, t: torch.Tensor, deltas: torch.Tensor, depth: torch.Tensor, s: float,
               eps_w: float = 1e-8) -> torch.Tensor:
    """Negative Gaussian-windowed log-weight of samples near the target depth; NaN targets are skipped."""
    ok = torch.isfinite(depth)
    if not ok.any():
        return w.sum() * 0
    w, t, deltas, dh = w[ok], t[ok], deltas[ok], depth[ok]
    g = torch.exp(-(t - dh[:, None]) ** 2 / (2 * s * s))
    return -(torch.log(w + eps_w) * g * deltas).sum()


def visible_rays(target: torch.Tensor, eps_i: float, mode: str = "any") -> torch.Tensor:
    """Rays whose measured active intensity ``I_k - I_P`` exceeds ``eps_i``; ``target`` is ``(B, 4)``."""
    act = target[:, :3] - target[:, 3:4]
    above = act > eps_i
    return above.any(-1) if mode == "any" else above.all(-1)


def loss_shadow(w_psi_sum: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
    """``sum over visible rays of |1 - sum_j w_j psi_j|``."""
    return ((1 - w_psi_sum).abs() * visible).sum()


def loss_normal_consistency(w: torch.Tensor, n_hat: torch.Tensor, d: torch.Tensor, ok: torch.Tensor,
                            n_pred: torch.Tensor | None = None) -> torch.Tensor:
    """Back-facing penalty, plus ``|n - n_hat|`` when a separately predicted normal is given.

    ``w``/``ok`` are ``(B, K)``, normals ``(B, K, 3)``, view directions ``(B, 3)`` or ``(B, K, 3)``.
    """
    if d.dim() == 2:
        d = d[:, None, :]
    term = F.relu((n_hat * d).sum(-1)) ** 2
    if n_pred is not None:
        term = term + (n_pred - n_hat).norm(dim=-1)
    return (w * torch.where(ok, term, torch.zeros_like(term))).sum()


def loss_reflectance_reg(w: torch.Tensor, alpha: torch.Tensor, alpha_jit: torch.Tensor) -> torch.Tensor:
    return (w * (alpha - alpha_jit).abs()).sum()


def loss_total(terms: dict, weights: LossWeights) -> torch.Tensor:
    lam = weights.lambdas
    keys = ("L_c", "L_d", "L_s", "L_nc", "L_alpha")
    return sum(l * terms[k] for l, k in zip(lam, keys))


LOSS_KEYS = ("L_c", "L_d", "L_s", "L_nc", "L_alpha")


def batch_terms(model: ReconModel, rays: Rays, target: torch.Tensor, depth: torch.Tensor, opts: RenderOptions,
                weights: LossWeights, eps_x: float, noise: dict | None = None) -> tuple[dict, object]:
    """Render a ray batch and evaluate all five loss terms (sums over the batch)."""
    noise = noise or {}
    out = render_rays(model.scene, model.proposal, model.gating, model.illum, rays, opts, noise)
    pred = torch.cat([out.gated, out.passive[:, None]], -1)
    sh = out.shaded
    s = out.samples
    terms = {
        "L_c": loss_photometric(pred, target),
        "L_d": loss_depth(s.w, s.t, s.deltas, depth, weights.s),
        "L_s": loss_shadow(out.shadow, visible_rays(target, weights.eps_i, weights.visibility)),
        "L_nc": loss_normal_consistency(sh["w"], sh["normal"], rays.dirs, sh["normal_ok"]),
    }
    if weights.lambda5 > 0:
        B, K = sh["w"].shape
        jx = noise.get("jit_x")
        jd = noise.get("jit_d")
        xj = sh["x"] + (jx * eps_x if jx is not None else 0)
        dj = rays.dirs[:, None, :].expand(B, K, 3)
        if jd is not None:
            dj = dj + jd
            dj = dj / dj.norm(dim=-1, keepdim=True)
        emb = model.scene.embedding(xj.reshape(-1, 3))
        a_j = model.scene.alpha_from_embedding(emb, dj.reshape(-1, 3), sh["omega"].reshape(-1, 3)).reshape(B, K)
        terms["L_alpha"] = loss_reflectance_reg(sh["w"], sh["alpha"], a_j)
    else:
        terms["L_alpha"] = torch.zeros((), dtype=pred.dtype)
    return terms, out


def _check_finite(named, grads):
    for (name, _), g in zip(named, grads):
        if g is not None and not torch.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name}")


def grad_all(model: ReconModel, rays: Rays, target, depth, opts: RenderOptions, weights: LossWeights,
             params: list[tuple[str, nn.Parameter]] | None = None, eps_x: float = 0.0, noise: dict | None = None,
             chunk: int = 512, runner: ChunkRunner | None = None, normalize: float = 1.0):
    """Loss terms and gradients of the total loss for every parameter in ``params``.

    The batch is split into fixed chunks; per-chunk gradients are summed in
    chunk order, so the result does not depend on how many workers ran them.
    Returns ``(terms, grads)`` with ``grads`` aligned to ``params``.
    """
    params = params if params is not None else model.trainable(PARAM_GROUPS)
    tensors = [p for _, p in params]
    noise = noise or {}
    n = len(rays)

    def work(sl):
        nz = {k: v[sl] for k, v in noise.items()}
        terms, _ = batch_terms(model, rays[sl], target[sl], depth[sl], opts, weights, eps_x, nz)
        total = loss_total(terms, weights) / normalize
        gs = torch.autograd.grad(total, tensors, allow_unused=True) if total.requires_grad else [None] * len(tensors)
        return {k: v.detach() for k, v in terms.items()}, gs

    runner = runner or ChunkRunner(1)
    results = runner.map(work, chunk_slices(n, chunk))
    terms = {k: sum(r[0][k] for r in results) for k in LOSS_KEYS}
    grads = []
    for i, p in enumerate(tensors):
        g = None
        for _, gs in results:
            if gs[i] is not None:
                g = gs[i].clone() if g is None else g + gs[i]
        grads.append(torch.zeros_like(p) if g is None else g)
    _check_finite(params, grads)
    terms["total"] = loss_total(terms, weights)
    return terms, grads


# -- data ---------------------------------------------------------------------------------


@dataclass
class RayBank:
    """All pixels of a set of views as one flat ray batch with targets."""

    rays: Rays
    target: torch.Tensor  # (P, 4)
    depth: torch.Tensor   # (P,)

    def __len__(self):
        return len(self.rays)

    def take(self, idx) -> tuple[Rays, torch.Tensor, torch.Tensor]:
        return self.rays[idx], self.target[idx], self.depth[idx]


def ray_bank(dataset, views, dtype=torch.float32) -> RayBank:
    rays, tg, dp = [], [], []
    for v in views:
        rays.append(camera_rays(dataset.intrinsics, dataset.poses[v], dataset.bounds, dtype=dtype))
        tg.append(torch.as_tensor(dataset.images[v].reshape(4, -1).T.copy(), dtype=dtype))
        dp.append(torch.as_tensor(dataset.depth[v].reshape(-1).copy(), dtype=dtype))
    return RayBank(Rays.cat(rays), torch.cat(tg), torch.cat(dp))


# -- checkpoints ----------------------------------------------------------------------------


def save_checkpoint(path, model: ReconModel, step: int = 0, extra: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_grid(path / "grid.gfgrid", model.scene, model.proposal)
    raw = {n: p.detach().double().tolist() for n, p in
           list(model.gating.named_parameters(prefix="gating")) + list(model.illum.named_parameters(prefix="illum"))}
    meta = dict(step=step, raw=raw, gating=model.gating.to_params().to_dict(),
                illuminator=model.illum.to_model().to_dict(), attenuation=model.gating.attenuation.to_dict(),
                illum_enabled=model.illum.enabled, **(extra or {}))
    (path / "calib.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_checkpoint(path, dtype=torch.float32) -> ReconModel:
    path = Path(path)
    scene, proposal = load_grid(path / "grid.gfgrid", dtype)
    meta = json.loads((path / "calib.json").read_text())
    gating = GatingModel(GatingParams.from_dict(meta["gating"]), AttenuationModel(**meta["attenuation"]), dtype=dtype)
    illum = IlluminatorModule(IlluminatorModel.from_dict(meta["illuminator"]), dtype=dtype)
    illum.enabled = meta.get("illum_enabled", True)
    model = ReconModel(scene, gating, illum, proposal)
    with torch.no_grad():
        named = dict(list(gating.named_parameters(prefix="gating")) + list(illum.named_parameters(prefix="illum")))
        for n, v in meta["raw"].items():
            named[n].copy_(torch.tensor(v, dtype=dtype))
    return model


# -- fit ----------------------------------------------------------------------------------


@dataclass
class FitResult:
    model: ReconModel
    history: list
    steps: int
    seconds: float


HISTORY_FIELDS = ("step",) + LOSS_KEYS + ("total", "psnr", "depth_mae", "seconds")


def _draw_noise(gen: torch.Generator, B: int, cfg: TrainConfig, weights: LossWeights, step: int, dtype) -> dict:
    o = cfg.render
    K = o.n_samples if o.topk is None else min(o.topk, o.n_samples)
    cam = torch.rand(B, o.n_samples, generator=gen, dtype=dtype)
    shadow = torch.rand(B, K, o.n_shadow, generator=gen, dtype=dtype)
    noise = dict(jit_x=torch.randn(B, K, 3, generator=gen, dtype=dtype),
                 jit_d=torch.randn(B, K, 3, generator=gen, dtype=dtype) * weights.eps_d(step))
    if cfg.stratified:
        noise.update(cam=cam, shadow=shadow)
    return noise


@torch.no_grad()
def evaluate_bank(model: ReconModel, bank: RayBank, opts: RenderOptions) -> dict:
    from .metrics import psnr

    pred, depth = [], []
    for sl in chunk_slices(len(bank), opts.chunk):
        out = render_rays(model.scene, model.proposal, model.gating, model.illum, bank.rays[sl], opts)
        pred.append(torch.cat([out.gated, out.passive[:, None]], -1))
        depth.append(out.depth)
    pred, depth = torch.cat(pred).double().numpy(), torch.cat(depth).double().numpy()
    gt = bank.depth.double().numpy()
    ok = np.isfinite(gt)
    err = np.where(np.isfinite(depth[ok]), np.abs(np.nan_to_num(depth[ok]) - gt[ok]), np.nan)
    return dict(psnr=psnr(pred, bank.target.double().numpy(), 1.0),
                depth_mae=float(np.nanmean(err)) if ok.any() else float("nan"))


def fit(dataset, cfg: TrainConfig, weights: LossWeights, model: ReconModel | None = None, out_dir=None,
        val_views=None, log=print, model_kw: dict | None = None) -> FitResult:
    """Optimize the model on the training views of ``dataset``.

    Every source of randomness is drawn from one generator seeded with
    ``cfg.seed``; in deterministic mode the result is bit-reproducible for
    any ``cfg.threads``.
    """
    configure_determinism(cfg.deterministic, cfg.threads)
    train_views = dataset.views("train")
    if len(train_views) < 2:
        raise ValueError("fitting needs at least two training views")
    dtype = torch.float32
    if model is None:
        model = init_model(dataset.bounds, dataset.gating, dataset.illuminator, dataset.attenuation,
                           background=dataset.background, **(model_kw or {}))
    opts = copy.deepcopy(cfg.render)
    opts.shadows = cfg.shadows and opts.shadows
    bank = ray_bank(dataset, train_views, dtype)
    val_views = val_views if val_views is not None else dataset.views("val")
    gen = torch.Generator().manual_seed(cfg.seed)
    val_bank = None
    if cfg.val_every and val_views:
        vb = ray_bank(dataset, val_views, dtype)
        sel = torch.randperm(len(vb), generator=torch.Generator().manual_seed(cfg.seed + 1))[:cfg.val_rays]
        val_bank = RayBank(vb.rays[sel], vb.target[sel], vb.depth[sel])
    params = model.trainable(cfg.trainable, cfg.frozen)
    lr = dict(fields=cfg.lr_fields, extrinsics=cfg.lr_extrinsics, gating=cfg.lr_gating, laser=cfg.lr_gating)
    groups = [dict(params=[p for _, p in model.trainable([g], cfg.frozen)], lr=lr[g]) for g in cfg.trainable]
    groups = [dict(g, initial_lr=g["lr"]) for g in groups if g["params"]]
    if cfg.steps and not params:
        raise ValueError("no trainable parameters")
    opt = torch.optim.AdamW(groups, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay) if params else None
    eps_x = weights.eps_x if weights.eps_x is not None else 0.5 * float(model.scene.voxel_size.min())
    history: list[dict] = []
    out = Path(out_dir) if out_dir else None
    hist_file = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        hist_file = open(out / "history.csv", "w", newline="")
        writer = csv.DictWriter(hist_file, HISTORY_FIELDS)
        writer.writeheader()
    good = copy.deepcopy(model.state_dict()), copy.deepcopy(model.proposal)
    t0 = time.perf_counter()
    runner = ChunkRunner(cfg.threads)
    fields_trained = "fields" in cfg.trainable
    if fields_trained and cfg.proposal_every:
        model.distill(cfg.proposal_resolution)
    try:
        for step in range(cfg.steps):
            if fields_trained and cfg.proposal_every and step and step % cfg.proposal_every == 0:
                model.distill(cfg.proposal_resolution)
            idx = torch.randint(len(bank), (cfg.batch_rays,), generator=gen)
            noise = _draw_noise(gen, cfg.batch_rays, cfg, weights, step, dtype)
            rays, target, depth = bank.take(idx)
            terms, grads = grad_all(model, rays, target, depth, opts, weights, params, eps_x, noise,
                                    cfg.chunk_rays, runner, normalize=cfg.batch_rays)
            if not all(math.isfinite(float(v)) for v in terms.values()):
                raise NumericalError(f"non-finite loss at step {step}: " +
                                     ", ".join(f"{k}={float(v):.4g}" for k, v in terms.items()))
            good = copy.deepcopy(model.state_dict()), model.proposal
            for (_, p), g in zip(params, grads):
                p.grad = g
            decay = cfg.lr_final ** (step / max(cfg.steps - 1, 1))
            for grp in opt.param_groups:
                grp["lr"] = grp["initial_lr"] * decay
            opt.step()
            opt.zero_grad(set_to_none=True)
            rec = {k: float(v) / cfg.batch_rays for k, v in terms.items()}
            rec["step"] = step + 1
            rec["seconds"] = time.perf_counter() - t0
            if val_bank is not None and ((step + 1) % cfg.val_every == 0 or step + 1 == cfg.steps):
                rec.update(evaluate_bank(model, val_bank, opts))
            history.append(rec)
            if hist_file:
                writer.writerow({k: rec.get(k, "") for k in HISTORY_FIELDS})
            if log and cfg.log_every and ((step + 1) % cfg.log_every == 0 or step == 0):
                log(f"step {step + 1:6d}  loss {rec['total']:.5f}  L_c {rec['L_c']:.5f}  "
                    f"L_d {rec['L_d']:.4f}  L_s {rec['L_s']:.4f}  {rec['seconds']:.0f}s")
            if out and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / "checkpoint", model, step + 1)
    except NumericalError:
        model.load_state_dict(good[0])
        model.proposal = good[1]
        if out:
            save_checkpoint(out / "checkpoint", model, len(history), extra={"aborted": True})
        raise
    finally:
        runner.close()
        if hist_file:
            hist_file.close()
    if out:
        save_checkpoint(out / "checkpoint", model, cfg.steps)
    return FitResult(model, history, cfg.steps, time.perf_counter() - t0)
