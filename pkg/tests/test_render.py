import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from splatattack import raster
from splatattack.camera import View, look_at, make_orbit_views
from splatattack.errors import DegenerateCamera
from splatattack.gaussians import GaussianSet
from splatattack.render import project, quat_to_rotmat, render, render_view_set
from splatattack.scenes import random_gaussians, toy_scene, toy_views

from conftest import rel_err

FOV = math.radians(40.0)


def axis_view(size=33, far=20.0):
    # camera at the origin looking down +z
    return View(np.eye(4), FOV, size, size, 0.1, far, "axis")


def on_axis(depths, sigmas, opacities, colors):
    n = len(depths)
    means = np.zeros((n, 3))
    means[:, 2] = depths
    scales = np.repeat(np.asarray(sigmas, dtype=float)[:, None], 3, axis=1)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianSet(means, np.asarray(opacities, float), scales, quats, np.asarray(colors, float))


def test_quat_rotmat_orthonormal():
    q = torch.randn(20, 4, dtype=torch.float64)
    r = quat_to_rotmat(q)
    eye = torch.eye(3, dtype=torch.float64).expand(20, 3, 3)
    assert torch.allclose(r @ r.transpose(1, 2), eye, atol=1e-12)
    assert torch.allclose(torch.linalg.det(r), torch.ones(20, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(quat_to_rotmat(3.0 * q), r, atol=1e-12)


def test_zero_opacity_gives_background():
    g = random_gaussians(20, 0)
    g.opacities = torch.zeros(20, dtype=torch.float64)
    out = render(g, toy_views(1, 32)[0], background=(0.2, 0.4, 0.6))
    assert torch.equal(out.alpha, torch.zeros(32, 32, dtype=torch.float64))
    assert torch.equal(out.rgb, torch.tensor([0.2, 0.4, 0.6], dtype=torch.float64).expand(32, 32, 3))
    assert torch.all(out.geo_depth == toy_views(1, 32)[0].far)


def test_single_gaussian_matches_analytic_projection():
    a, sigma, z = 0.7, 0.2, 4.0
    view = axis_view(33)
    out = render(on_axis([z], [sigma], [a], [[1.0, 0.0, 0.0]]), view)
    # closed form: on-axis isotropic Gaussian -> isotropic 2D Gaussian of std f*sigma/z at the center
    f = 0.5 * 33 / math.tan(0.5 * FOV)
    s2 = (f * sigma / z) ** 2
    c = np.arange(33) + 0.5 - 16.5
    r2 = c[:, None] ** 2 + c[None, :] ** 2
    expected = np.where(r2 / s2 <= 9.0, a * np.exp(-0.5 * r2 / s2), 0.0)
    alpha = out.alpha.numpy()
    assert alpha[16, 16] == pytest.approx(a, rel=1e-12)
    assert np.linalg.norm(alpha - expected) <= 1e-3 * np.linalg.norm(expected)
    # radial symmetry about the principal point
    assert np.allclose(alpha, alpha.T, atol=1e-12) and np.allclose(alpha, alpha[::-1], atol=1e-12)
    assert out.geo_depth[16, 16].item() == pytest.approx(z, rel=1e-3)


def test_two_gaussian_compositing():
    z1, z2 = 3.0, 5.0
    c1, c2 = [0.9, 0.2, 0.1], [0.1, 0.6, 0.8]
    # sigma proportional to depth -> identical pixel footprints
    g = on_axis([z2, z1], [0.25, 0.15], [0.5, 0.5], [c2, c1])
    out = render(g, axis_view(33), background=(0.0, 0.0, 0.0))
    expected = 0.5 * np.array(c1) + 0.25 * np.array(c2)
    assert np.allclose(out.rgb[16, 16].numpy(), expected, atol=1e-12)
    assert out.alpha[16, 16].item() == pytest.approx(0.75, abs=1e-12)
    d = out.geo_depth[16, 16].item()
    assert z1 < d < z2
    assert d == pytest.approx((0.5 * z1 + 0.25 * z2) / 0.75, rel=1e-5)


def test_behind_camera_and_outside_frustum_contribute_nothing():
    g = on_axis([-2.0, 4.0], [0.2, 0.2], [0.9, 0.9], [[1, 0, 0], [0, 1, 0]])
    g.means[1, 0] = 50.0  # far outside the frustum
    p = project(g, axis_view(33))
    assert p.index.numel() == 0
    out = render(g, axis_view(33))
    assert float(out.alpha.abs().max()) == 0.0


def test_output_ranges(toy, views4):
    for v in views4:
        out = render(toy, v)
        assert torch.isfinite(out.rgb).all() and torch.isfinite(out.geo_depth).all()
        assert float(out.alpha.min()) >= 0.0 and float(out.alpha.max()) <= 1.0
        assert float(out.rgb.min()) >= 0.0 and float(out.rgb.max()) <= 1.0
        assert float(out.geo_depth.min()) >= v.near and float(out.geo_depth.max()) <= v.far


@pytest.mark.skipif("cython" not in raster.available_backends, reason="extension not built")
def test_backends_agree_values_and_gradients(toy):
    view = toy_views(1, 48)[0]
    outs, grads = [], []
    for backend in ("cython", "python"):
        g = toy.clone().requires_grad_()
        out = render(g, view, backend=backend)
        (out.rgb.sum() + 0.3 * out.alpha.sum() + 0.01 * out.geo_depth.sum()).backward()
        outs.append(torch.cat([out.rgb.reshape(-1), out.alpha.reshape(-1), out.geo_depth.reshape(-1)]))
        grads.append(g.grad_flat())
    assert torch.allclose(outs[0], outs[1], atol=1e-12)
    assert rel_err(grads[0], grads[1]) <= 1e-10


def test_backend_env_override():
    assert raster.BACKEND in raster.available_backends
    with pytest.raises(ValueError):
        raster.rasterize(torch.zeros(1, 2), torch.ones(1, 3), torch.ones(1), torch.ones(1, 5),
                         torch.zeros(5), 4, 4, backend="gpu")


def grad_scene():
    rng = np.random.default_rng(11)
    n = 3
    q = rng.normal(size=(n, 4))
    return GaussianSet(rng.uniform(-0.08, 0.08, (n, 3)), rng.uniform(0.3, 0.8, n),
                       rng.uniform(0.06, 0.14, (n, 3)), q, rng.uniform(0.1, 0.9, (n, 3)))


@pytest.mark.parametrize("backend", raster.available_backends)
def test_gradient_all_14_dof_finite_differences(backend):
    g = grad_scene()
    view = toy_views(1, 64)[0].crop(28, 28, 8, 8)
    f = lambda flat: render(GaussianSet.from_flat(flat), view, backend=backend).rgb.sum()
    flat = g.flat().clone().requires_grad_()
    f(flat).backward()
    analytic = flat.grad
    steps = torch.tensor([1e-4] * 3 + [1e-5] + [1e-4] * 3 + [1e-5] * 4 + [1e-4] * 3)
    for col in range(14):
        h = float(steps[col])
        num = torch.zeros(g.n, dtype=torch.float64)
        for i in range(g.n):
            x = flat.detach().clone()
            x[i, col] += h
            fp = float(f(x))
            x[i, col] -= 2 * h
            num[i] = (fp - float(f(x))) / (2 * h)
        assert rel_err(analytic[:, col], num) <= 1e-3, f"DoF column {col}"
    assert torch.all(analytic.abs().sum(dim=0) > 0)


def shifted(view: View, offset) -> View:
    w2c = view.world_to_camera.copy()
    w2c[:3, 3] -= view.rotation @ np.asarray(offset)
    return View(w2c, view.fov_y, view.width, view.height, view.near, view.far, view.view_id)


def test_translation_invariance(toy):
    offset = np.array([1.5, -0.7, 2.25])
    view = toy_views(3, 48)[1]
    g = toy.clone()
    g.means = g.means + torch.from_numpy(offset)
    a, b = render(toy, view), render(g, shifted(view, offset))
    assert rel_err(b.rgb, a.rgb) <= 1e-6
    assert rel_err(b.alpha, a.alpha) <= 1e-6
    assert rel_err(b.geo_depth, a.geo_depth) <= 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 16), st.integers(0, 19), st.floats(0.01, 0.5))
def test_alpha_monotone_in_opacity(seed, idx, bump):
    g = random_gaussians(20, seed, spread=0.3)
    view = toy_views(1, 24)[0]
    base = render(g, view).alpha
    h = g.clone()
    h.opacities[idx] = min(1.0, float(h.opacities[idx]) + bump)
    assert torch.all(render(h, view).alpha >= base - 1e-12)


def test_crop_matches_full_render(toy):
    view = toy_views(1, 64)[0]
    full = render(toy, view)
    part = render(toy, view.crop(20, 12, 16, 24))
    assert part.rgb.shape == (24, 16, 3)
    assert view.crop(20, 12, 16, 24).fy == pytest.approx(view.fy, rel=1e-14)
    assert torch.allclose(part.rgb, full.rgb[12:36, 20:36], atol=1e-10)


def test_view_set_order_and_parallel(toy):
    views = toy_views(4, 32)
    seq = render_view_set(toy, views)
    par = render_view_set(toy, views, workers=4)
    for a, b in zip(seq, par):
        assert torch.equal(a.rgb, b.rgb) and torch.equal(a.geo_depth, b.geo_depth)
    perm = [2, 0, 3, 1]
    permuted = render_view_set(toy, [views[i] for i in perm])
    for k, i in enumerate(perm):
        assert torch.equal(permuted[k].rgb, seq[i].rgb)
    single = render_view_set(toy, views[:1])
    assert len(single) == 1 and torch.equal(single[0].rgb, render(toy, views[0]).rgb)


def test_orbit_views_geometry():
    (v,) = make_orbit_views(1, 3.0)
    assert np.allclose(v.position, [3.0, 0.0, 0.0])
    assert np.allclose(v.rotation[2], [-1.0, 0.0, 0.0])  # optical axis toward the origin
    views = make_orbit_views(4, 2.0, elevations=(0.0, 15.0))
    az = [math.degrees(math.atan2(v.position[1], v.position[0])) % 360 for v in views]
    assert np.allclose(az, [0, 90, 180, 270])
    assert views[1].position[2] > 0 and views[0].position[2] == pytest.approx(0.0, abs=1e-12)
    for v in make_orbit_views(7, 5.0, elevations=(-30.0, 0.0, 60.0)):
        v.validate()
        assert np.max(np.abs(v.rotation.T @ v.rotation - np.eye(3))) <= 1e-5
        assert np.allclose(v.position, v.position / np.linalg.norm(v.position) * 5.0)


def test_degenerate_camera():
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(DegenerateCamera):
        render(toy_scene(), View(bad, width=8, height=8))
    with pytest.raises(DegenerateCamera):
        render(toy_scene(), View(look_at([4, 0, 0]), width=8, height=8, near=5.0, far=1.0))
    with pytest.raises(ValueError):
        make_orbit_views(0, 1.0)


def test_view_dict_round_trip():
    v = toy_views(3, 40)[2].crop(3, 4, 10, 12)
    w = View.from_dict(v.to_dict())
    assert np.array_equal(v.world_to_camera, w.world_to_camera)
    assert (w.width, w.height, w.principal, w.view_id) == (v.width, v.height, v.principal, v.view_id)
