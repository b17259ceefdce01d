import math
import sys
import textwrap

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from splatattack.adapters import (Detection, ReferenceDepthHead, ReferenceDetector, SubprocessDepth,
                                  SubprocessDetector, adapter_id, max_target_confidence,
                                  resolve_depth, resolve_detector)
from splatattack.adapters.detection import template_pattern, upsample_pattern
from splatattack.errors import AdapterFailure

from conftest import central_difference, rel_err


def det(cls, score, box=(0, 0, 10, 10)):
    return Detection(box, cls, torch.tensor(score, dtype=torch.float64))


# max_target_confidence -----------------------------------------------------

def test_max_confidence_examples():
    assert float(max_target_confidence([], {"car"})) == 0.0
    dets = [det("car", 0.7), det("truck", 0.4)]
    assert float(max_target_confidence(dets, {"car", "truck"})) == 0.7
    mixed = [det(c, s) for c, s in [("car", 0.2), ("truck", 0.9), ("person", 0.5), ("car", 0.6), ("sign", 0.3)]]
    assert float(max_target_confidence(mixed, {"bus"})) == 0.0
    # enumeration oracle
    for classes in ({"car"}, {"truck", "person"}, {"sign", "car"}):
        expected = max([d.score.item() for d in mixed if d.class_id in classes], default=0.0)
        assert float(max_target_confidence(mixed, classes)) == expected
    with pytest.raises(ValueError):
        max_target_confidence(mixed, set())


def test_detection_rejects_degenerate_box():
    with pytest.raises(ValueError):
        Detection((5, 5, 5, 9), "car", 0.5)


# reference detector ----------------------------------------------------------

def ncc_conv_oracle(detector, image):
    """Dense conv2d correlation with each equivalent filter (slow path)."""
    x = image.permute(2, 0, 1)[None]
    out = []
    for size, filt in zip(detector.sizes, detector.filters("car")):
        corr = F.conv2d(x, filt)[0, 0]
        ones = torch.ones(1, 3, size, size, dtype=torch.float64)
        s1 = F.conv2d(x, ones)[0, 0]
        s2 = F.conv2d(x * x, ones)[0, 0]
        var = (s2 - s1 * s1 / (3 * size * size)).clamp_min(0)
        out.append(torch.sigmoid(detector.gain * (corr / torch.sqrt(var + detector.eps ** 2) - detector.offset)))
    return out


def test_integral_image_equals_dense_correlation():
    d = ReferenceDetector(seed=3, sizes=(7, 9, 12))
    img = torch.from_numpy(np.random.default_rng(0).uniform(0, 1, (30, 26, 3)))
    score, _ = d.score_maps(img)["car"]
    dense = ncc_conv_oracle(d, img)
    best = torch.stack([F.pad(m, (s // 2, 26 - m.shape[1] - s // 2, s // 2, 30 - m.shape[0] - s // 2),
                              value=0.0) for s, m in zip(d.sizes, dense)]).max(0).values
    assert torch.allclose(score, best, atol=1e-12)


def test_filters_are_zero_mean_unit_norm():
    d = ReferenceDetector(seed=1)
    for f in d.filters("car"):
        assert abs(float(f.sum())) < 1e-12
        assert float((f * f).sum()) == pytest.approx(1.0, rel=1e-12)


def test_gray_image_gives_no_detection():
    d = ReferenceDetector()
    assert d(torch.full((64, 64, 3), 0.5, dtype=torch.float64)) == []


def test_embedded_template_detected():
    d = ReferenceDetector(seed=0)
    img = torch.full((64, 64, 3), 0.5, dtype=torch.float64)
    patch = upsample_pattern(template_pattern(0), 24)
    img[20:44, 18:42] = torch.from_numpy(patch)
    dets = d(img)
    assert len(dets) == 1
    (x1, y1, x2, y2), top = dets[0].box, dets[0]
    assert top.class_id == "car" and float(top.score) >= 0.9
    assert x1 <= 18 and y1 <= 20 and x2 >= 42 and y2 >= 44


def test_detector_determinism_and_seeds(toy, views4):
    from splatattack.render import render
    img = render(toy, views4[0]).rgb
    a, b = ReferenceDetector(0), ReferenceDetector(0)
    ra, rb = a(img), b(img)
    assert [(d.box, d.class_id, float(d.score)) for d in ra] == [(d.box, d.class_id, float(d.score)) for d in rb]
    assert all(np.array_equal(x, y) for x, y in zip(a.patterns.values(), b.patterns.values()))
    other = ReferenceDetector(5)
    assert not np.allclose(a.patterns["car"], other.patterns["car"])
    assert not torch.allclose(a.score_maps(img)["car"][0], other.score_maps(img)["car"][0])


def test_detector_gradient_finite_differences():
    d = ReferenceDetector(seed=2, sizes=(6, 8))
    img = torch.from_numpy(np.random.default_rng(3).uniform(0.1, 0.9, (14, 14, 3))).requires_grad_()
    f = lambda x: d.score_maps(x)["car"][0].nan_to_num(0.0).sum()
    f(img).backward()
    num = central_difference(f, img, h=1e-6)
    assert rel_err(img.grad, num) <= 1e-3


def test_detection_scores_carry_gradients(toy, views4):
    from splatattack.render import render
    g = toy.clone().requires_grad_()
    dets = ReferenceDetector()(render(g, views4[0]).rgb)
    max_target_confidence(dets, {"car"}).backward()
    assert float(g.colors.grad.abs().sum()) > 0


def test_detector_rejects_nonfinite():
    img = torch.zeros(32, 32, 3, dtype=torch.float64)
    img[3, 3, 0] = float("nan")
    with pytest.raises(ValueError):
        ReferenceDetector()(img)


# reference depth head --------------------------------------------------------

def test_depth_constant_inputs():
    h = ReferenceDepthHead(0)
    zeros = h(torch.zeros(20, 24, 3, dtype=torch.float64))
    assert zeros.shape == (20, 24)
    assert torch.allclose(zeros, torch.full_like(zeros, h.d_base * math.exp(-h.k / 2)), rtol=1e-14)
    gray = h(torch.full((20, 24, 3), 0.5, dtype=torch.float64))
    assert torch.allclose(gray, torch.full_like(gray, h.d_base), rtol=1e-14)


def test_depth_monotone_in_brightness():
    h = ReferenceDepthHead(1)
    img = torch.from_numpy(np.random.default_rng(0).uniform(0.1, 0.8, (16, 16, 3)))
    darker, brighter = h(img), h((img + 0.1).clamp(0, 1))
    assert h.k > 0 and torch.all(brighter > darker)


def test_depth_bounds_and_parameters():
    h = ReferenceDepthHead(7)
    assert 3.0 <= h.d_base <= 5.0 and 0.8 <= h.k <= 1.2 and 1.0 <= h.sigma <= 2.0
    img = torch.from_numpy(np.random.default_rng(1).uniform(0, 1, (18, 18, 3)))
    d = h(img)
    lo, hi = h.d_base * math.exp(-h.k / 2), h.d_base * math.exp(h.k / 2)
    assert float(d.min()) >= lo - 1e-12 and float(d.max()) <= hi + 1e-12


def test_depth_determinism_and_seeds():
    img = torch.from_numpy(np.random.default_rng(2).uniform(0, 1, (12, 12, 3)))
    a, b, c = ReferenceDepthHead(0), ReferenceDepthHead(0), ReferenceDepthHead(1)
    assert (a.d_base, a.k, a.sigma) == (b.d_base, b.k, b.sigma)
    assert torch.equal(a(img), b(img))
    assert not torch.allclose(a(img), c(img))


def test_depth_gradient_finite_differences():
    h = ReferenceDepthHead(4)
    img = torch.from_numpy(np.random.default_rng(5).uniform(0, 1, (10, 9, 3))).requires_grad_()
    w = torch.from_numpy(np.random.default_rng(6).normal(size=(10, 9)))
    f = lambda x: (h(x) * w).sum()
    f(img).backward()
    assert rel_err(img.grad, central_difference(f, img)) <= 1e-3


# registry and subprocess adapters -------------------------------------------

def test_resolve_ids():
    assert adapter_id(resolve_detector("ref-det:4")) == "ref-det:4"
    assert adapter_id(resolve_depth("ref-depth:2")) == "ref-depth:2"
    d = ReferenceDetector(1)
    assert resolve_detector(d) is d
    with pytest.raises(AdapterFailure):
        resolve_detector("yolo:9")
    with pytest.raises(AdapterFailure):
        resolve_depth("midas")


SCRIPT = textwrap.dedent('''
    import json, sys
    from pathlib import Path
    import numpy as np
    from splatattack.io import read_pfm, write_pfm
    req = json.loads(sys.stdin.read())
    img = read_pfm(req["image_path"])
    if req["task"] == "detect":
        h, w = img.shape[:2]
        print(json.dumps({"detections": [{"box": [1, 2, w - 1, h - 2], "class": "car",
                                           "score": float(img.mean())}]}))
    else:
        out = Path(req["image_path"]).with_name("depth.pfm")
        write_pfm(out, 2.0 + img.mean(axis=2))
        print(json.dumps({"depth_path": str(out)}))
''')


@pytest.fixture
def script(tmp_path):
    p = tmp_path / "adapter.py"
    p.write_text(SCRIPT)
    return f"{sys.executable} {p}"


def test_subprocess_detector_and_depth(script):
    img = torch.from_numpy(np.random.default_rng(0).uniform(0, 1, (12, 16, 3)))
    dets = resolve_detector("subprocess:" + script)(img)
    assert len(dets) == 1 and dets[0].box == (1.0, 2.0, 15.0, 10.0)
    assert float(dets[0].score) == pytest.approx(float(img.float().mean()), rel=1e-6)
    depth = SubprocessDepth(script)(img)
    assert depth.shape == (12, 16)
    assert torch.allclose(depth, 2.0 + img.float().double().mean(dim=2), atol=1e-6)
    assert not SubprocessDetector(script).differentiable


def test_subprocess_failures(tmp_path, monkeypatch):
    img = torch.zeros(4, 4, 3, dtype=torch.float64)
    bad = tmp_path / "bad.py"
    bad.write_text("import sys; sys.exit(3)")
    with pytest.raises(AdapterFailure):
        SubprocessDetector(f"{sys.executable} {bad}")(img)
    junk = tmp_path / "junk.py"
    junk.write_text("print('hello')")
    with pytest.raises(AdapterFailure):
        SubprocessDepth(f"{sys.executable} {junk}")(img)
    slow = tmp_path / "slow.py"
    slow.write_text("import time; time.sleep(5)")
    monkeypatch.setenv("SPLATATTACK_ADAPTER_TIMEOUT", "0.5")
    with pytest.raises(AdapterFailure):
        SubprocessDetector(f"{sys.executable} {slow}")(img)
    with pytest.raises(AdapterFailure):
        SubprocessDetector("/no/such/binary")(img)
