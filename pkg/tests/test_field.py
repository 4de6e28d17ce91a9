import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from gatedrecon.field import (N_AMB, N_REFL, GridFormatError, ProposalGrid, SceneGrid, load_grid, save_grid,
                              sh_basis)

B = [[0.0, 0.0, 0.0], [4.0, 4.0, 4.0]]


def grid(res=5, dtype=torch.float64, **kw):
    return SceneGrid(B, res, res, dtype=dtype, **kw)


def unit(v):
    v = torch.as_tensor(v, dtype=torch.float64)
    return v / v.norm(dim=-1, keepdim=True)


def test_uniform_and_vertex_values():
    g = grid()
    with torch.no_grad():
        g.density.fill_(0.7)
    x = torch.rand(50, 3, dtype=torch.float64) * 4
    np.testing.assert_allclose(g.sigma(x).detach().numpy(), F.softplus(torch.tensor(0.7, dtype=torch.float64)).item(), rtol=1e-12)
    with torch.no_grad():
        g.density.copy_(torch.randn(5, 5, 5, dtype=torch.float64))
    idx = torch.tensor([[1, 2, 3], [0, 4, 2], [4, 4, 4]])
    s = g.sigma(idx.double())
    np.testing.assert_allclose(s.detach().numpy(), F.softplus(g.density[idx[:, 0], idx[:, 1], idx[:, 2]]).detach().numpy())


def test_cell_center_one_corner():
    g = grid(density_init=0.0)
    with torch.no_grad():
        g.density[2, 2, 2] = 8.0
    raw = g.corners(torch.tensor([[2.5, 2.5, 2.5]], dtype=torch.float64)).interp(g.density)
    assert float(raw) == pytest.approx(1.0)


def test_outside_bounds():
    g = grid(background=0.25)
    with torch.no_grad():
        g.density.fill_(3.0)
        g.ambient.fill_(1.0)
    x = torch.tensor([[-0.1, 1.0, 1.0], [2.0, 2.0, 4.5]], dtype=torch.float64)
    assert torch.all(g.sigma(x) == 0)
    d = unit([[0, 0, 1.0], [1, 0, 0]])
    np.testing.assert_allclose(g.query_ambient(x, d).detach().numpy(), 0.25)


def test_normals():
    g = grid()
    with torch.no_grad():
        g.density.copy_(torch.arange(5, dtype=torch.float64)[:, None, None].expand(5, 5, 5) * 0.5)
    x = torch.rand(20, 3, dtype=torch.float64) * 4
    n, ok = g.query_normal(x)
    assert ok.all()
    np.testing.assert_allclose(n.detach().numpy(), np.tile([-1.0, 0, 0], (20, 1)), atol=1e-12)
    with torch.no_grad():
        g.density.fill_(1.0)
    _, ok = g.query_normal(x)
    assert not ok.any()


def test_normals_radial_bump():
    g = SceneGrid([[-2, -2, -2], [2, 2, 2]], 81, 2, dtype=torch.float64)
    v = g.vertex_positions()
    with torch.no_grad():
        g.density.copy_(-(v ** 2).sum(-1))
    rng = np.random.default_rng(1)
    d = unit(rng.normal(size=(40, 3)))
    x = d * 1.0
    n, ok = g.query_normal(x)
    assert ok.all()
    # outward normal of a density that falls off radially is +r
    assert float((n * d).sum(-1).min()) > 1 - 1e-3
    np.testing.assert_allclose(n.norm(dim=-1).detach().numpy(), 1.0, atol=1e-9)


def test_reflectance_examples():
    g = grid(3)
    x = torch.rand(10, 3, dtype=torch.float64) * 4
    d = unit(torch.randn(10, 3, dtype=torch.float64))
    w = unit(torch.randn(10, 3, dtype=torch.float64))
    np.testing.assert_allclose(g.query_reflectance(x, d, w).detach().numpy(), 0.5)
    with torch.no_grad():
        g.reflectance[..., 0] = 200.0
    assert float(g.query_reflectance(x, d, w).min()) > 1 - 1e-12
    with torch.no_grad():
        g.reflectance.zero_()
        g.reflectance[..., 3] = 1.0  # second degree-1 view-dependent basis function
    d2 = unit([[0.3, -0.2, 0.9], [-0.5, 0.6, 0.2]])
    x2 = x[:2]
    logit = torch.logit(g.query_reflectance(x2, d2, d2[:1].expand(2, 3)))
    basis = sh_basis(d2, 2)[:, 3]
    np.testing.assert_allclose(logit.detach().numpy(), basis.numpy(), rtol=1e-10)


def test_ambient_examples():
    g = grid(3)
    x = torch.rand(100, 3, dtype=torch.float64) * 4
    d = unit(torch.randn(100, 3, dtype=torch.float64))
    np.testing.assert_allclose(g.query_ambient(x, d).detach().numpy(), np.log(2.0), rtol=1e-12)
    with torch.no_grad():
        g.ambient[..., 0] = 0.8
    lam = g.query_ambient(x[:1].expand(100, 3), d).detach().numpy()
    np.testing.assert_allclose(lam, lam[0], rtol=1e-12)


def test_sh_basis_shapes():
    d = unit(torch.randn(7, 3, dtype=torch.float64))
    assert sh_basis(d, 2).shape == (7, 9)
    assert sh_basis(d, 1).shape == (7, 4)
    assert N_REFL == 12 and N_AMB == 9


def test_interp_grads_match_fd():
    g = grid(4)
    with torch.no_grad():
        g.density.copy_(torch.randn(4, 4, 4, dtype=torch.float64))
    x = torch.tensor([[0.7, 1.9, 2.2], [3.1, 0.4, 1.6]], dtype=torch.float64, requires_grad=True)
    s = g.sigma(x).sum()
    gx, gd = torch.autograd.grad(s, [x, g.density])
    h = 1e-6
    for i in range(2):
        for a in range(3):
            xp = x.detach().clone()
            xp[i, a] += h
            xm = x.detach().clone()
            xm[i, a] -= h
            fd = (g.sigma(xp).sum() - g.sigma(xm).sum()).item() / (2 * h)
            assert gx[i, a].item() == pytest.approx(fd, rel=1e-6, abs=1e-10)
    flat = g.density.data.view(-1)
    for j in torch.nonzero(gd.view(-1)).view(-1)[:6]:
        old = flat[j].item()
        flat[j] = old + h
        up = g.sigma(x.detach()).sum().item()
        flat[j] = old - h
        dn = g.sigma(x.detach()).sum().item()
        flat[j] = old
        assert gd.view(-1)[j].item() == pytest.approx((up - dn) / (2 * h), rel=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=8, max_size=8))
def test_sigma_nonnegative(vals):
    g = grid(2)
    with torch.no_grad():
        g.density.copy_(torch.tensor(vals, dtype=torch.float64).view(2, 2, 2))
    x = torch.rand(30, 3, dtype=torch.float64) * 6 - 1
    assert (g.sigma(x) >= 0).all()


def test_proposal_distill_covers_surfaces():
    g = SceneGrid(B, 33, 2, density_scale=1.0, dtype=torch.float64)
    with torch.no_grad():
        g.density.fill_(-30.0)
        g.density[:, :, 17] = 5.0
    p = ProposalGrid.distill(g, 5, max_optical_depth=None)
    assert p.res == (5, 5, 5)
    assert (p.sigma >= 0).all()
    # the surface at z = 2.125 lies within half a coarse cell of the vertex at z = 2
    assert float(p.sigma[:, :, 2].min()) == pytest.approx(F.softplus(torch.tensor(5.0)).item())
    capped = ProposalGrid.distill(g, 5)
    assert float(capped.sigma.max()) == pytest.approx(0.25)
    mean = ProposalGrid.distill(g, 5, mode="mean")
    assert float(mean.sigma[:, :, 2].max()) < float(p.sigma[:, :, 2].max())
    with pytest.raises(ValueError):
        ProposalGrid(g.bounds, -torch.ones(2, 2, 2, dtype=torch.float64))


def test_grid_io_round_trip(tmp_path):
    g = SceneGrid(B, (4, 5, 6), 3, density_scale=7.0, background=0.1)
    with torch.no_grad():
        g.density.normal_()
        g.reflectance.normal_()
        g.ambient.normal_()
    prop = ProposalGrid.distill(g, 3)
    path = tmp_path / "g.gfgrid"
    save_grid(path, g, prop)
    h, q = load_grid(path)
    assert h.res == (4, 5, 6) and h.app_res == (3, 3, 3)
    assert h.density_scale == 7.0 and h.background == pytest.approx(0.1)
    assert torch.equal(h.density, g.density) and torch.equal(h.reflectance, g.reflectance)
    assert torch.equal(h.ambient, g.ambient) and torch.equal(q.sigma, prop.sigma)
    assert path.read_bytes()[:7] == b"GFGRID1"


def test_grid_io_errors(tmp_path):
    bad = tmp_path / "bad.gfgrid"
    bad.write_bytes(b"NOTAGRID" + b"\0" * 64)
    with pytest.raises(GridFormatError):
        load_grid(bad)
    g = SceneGrid(B, 3, 2)
    path = tmp_path / "t.gfgrid"
    save_grid(path, g)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(GridFormatError):
        load_grid(path)
