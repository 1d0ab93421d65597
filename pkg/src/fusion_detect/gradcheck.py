"""Finite-difference verification of every differentiable component.

Each check builds a small random problem in float64, reduces the
component's output to a scalar with fixed random weights, and compares the
analytic gradient with central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import nn
from .backbones import BackboneConfig, FusionHead, fuse, fuse_backward
from .detection import losses, roi
from .detection.anchors import POSITIVE
from .detection.model import DEFAULT_ANCHORS, DetectorModel, ModelConfig, SamplingConfig

TOLERANCE = 1e-4
# central-difference steps; see nn.finite_diff_check
STEPS = (1e-3, 1e-4, 1e-5, 1e-6)


@dataclass(frozen=True)
class GradcheckScale:
    input_dims: tuple[int, int, int]
    width_scale: Fraction
    # the five 2x2 pools need inputs divisible by 32, so the end-to-end
    # check runs at the smallest such size
    detector_dims: tuple[int, int, int]
    max_entries: int


SCALES = {
    "tiny": GradcheckScale((16, 16, 3), Fraction(1, 16), (32, 32, 3), 40),
    "small": GradcheckScale((32, 32, 3), Fraction(1, 8), (64, 64, 3), 60),
}


@dataclass(frozen=True)
class GradcheckResult:
    component: str
    max_error: float
    probes: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def _weighted(out: np.ndarray, r: np.ndarray) -> float:
    return float(np.sum(out * r))


def _conv(rng, scale: GradcheckScale):
    h, w, c = scale.input_dims
    cout = 4
    inputs = {"x": rng.standard_normal((1, h, w, c)),
              "weight": rng.standard_normal((3, 3, c, cout)) * 0.3,
              "bias": rng.standard_normal(cout)}
    r = rng.standard_normal((1, h, w, cout))

    def fragment(a):
        out = nn.conv2d_forward(a["x"], a["weight"], a["bias"])
        gx, gw, gb = nn.conv2d_backward(a["x"], a["weight"], r)
        return _weighted(out, r), {"x": gx, "weight": gw, "bias": gb}
    return fragment, inputs


def _relu(rng, scale):
    h, w, c = scale.input_dims
    x = rng.standard_normal((1, h, w, c))
    # keep every element clear of the kink so differences are exact
    x = np.where(np.abs(x) < 1e-3, 1e-3, x)
    r = rng.standard_normal(x.shape)

    def fragment(a):
        return _weighted(nn.relu(a["x"]), r), {"x": nn.relu_backward(a["x"], r)}
    return fragment, {"x": x}


def _maxpool(rng, scale):
    h, w, c = scale.input_dims
    x = rng.standard_normal((1, h, w, c))
    r = rng.standard_normal((1, h // 2, w // 2, c))

    def fragment(a):
        out, arg = nn.maxpool2(a["x"])
        return _weighted(out, r), {"x": nn.maxpool2_backward(arg, r)}
    return fragment, {"x": x}


def _add(rng, scale):
    h, w, c = scale.input_dims
    shape = (1, h, w, c)
    r = rng.standard_normal(shape)

    def fragment(a):
        ga, gb = nn.add_backward(r)
        return _weighted(nn.add(a["a"], a["b"]), r), {"a": ga, "b": gb}
    return fragment, {"a": rng.standard_normal(shape), "b": rng.standard_normal(shape)}


def _fusion(rng, scale):
    # fusion acts on the backbone output; use the input's spatial size with
    # the scaled final channel count
    h, w, _ = scale.input_dims
    c = max(1, int(512 * scale.width_scale))
    head = FusionHead(c, c)
    shape = (1, h // 4, w // 4, c)
    inputs = {"f1": rng.standard_normal(shape), "f2": rng.standard_normal(shape),
              "fusion.conv.weight": rng.standard_normal((3, 3, c, c)) * np.sqrt(2.0 / (9 * c)),
              "fusion.conv.bias": rng.standard_normal(c) * 0.1}
    r = rng.standard_normal(shape)

    def fragment(a):
        out, cache = fuse(a["f1"], a["f2"], head, a)
        g1, g2, grads = fuse_backward(head, a, cache, r)
        return _weighted(out, r), {"f1": g1, "f2": g2, **grads}
    return fragment, inputs


def _roi_pool(rng, scale):
    h, w, _ = scale.input_dims
    fh, fw = h // 4, w // 4
    c = 3
    feats = rng.standard_normal((2, fh, fw, c))
    cfg = roi.RoiPoolConfig((3, 3), 0.25)
    rois = np.array([[0, 0, w, h], [3, 2, 9, 7], [w / 2, h / 2, w / 2 - 1, h / 2 - 1]], dtype=np.float64)
    batch = np.array([0, 1, 1])
    r = rng.standard_normal((len(rois), 3, 3, c))

    def fragment(a):
        out, args = roi.roi_pool_batch(a["features"], rois, batch, cfg)
        g = roi.roi_pool_batch_backward(args, batch, r, a["features"].shape)
        return _weighted(out, r), {"features": g}
    return fragment, {"features": feats}


def _smooth_targets(rng, n):
    # regression residuals well away from the |x| = 1 kink
    mag = np.where(rng.random((n, 4)) < 0.5, rng.uniform(0.1, 0.8, (n, 4)), rng.uniform(1.3, 3.0, (n, 4)))
    return mag * rng.choice([-1.0, 1.0], size=(n, 4))


def _rpn_loss(rng, scale):
    n = 24
    labels = rng.choice([POSITIVE, 0, -1], size=n)
    labels[:2] = (POSITIVE, 0)
    deltas = rng.standard_normal((n, 4))
    targets = deltas - _smooth_targets(rng, n)

    def fragment(a):
        lb, gl, gd = losses.rpn_loss_from_logits(a["logits"], a["deltas"], labels, targets, 1.0,
                                                 num_locations=6)
        return lb.rpn_cls + lb.rpn_reg, {"logits": gl, "deltas": gd}
    return fragment, {"logits": rng.standard_normal((n, 2)), "deltas": deltas}


def _rcnn_loss(rng, scale):
    n, ncls = 12, 3
    u = rng.integers(0, ncls, size=n)
    u[:2] = (0, 1)
    deltas = rng.standard_normal((n, ncls * 4))
    picked = deltas.reshape(n, ncls, 4)[np.arange(n), u]
    targets = picked - _smooth_targets(rng, n)

    def fragment(a):
        lb, gl, gd = losses.rcnn_loss_from_logits(a["logits"], a["deltas"], u, targets, 1.0)
        return lb.rcnn_cls + lb.rcnn_reg, {"logits": gl, "deltas": gd}
    return fragment, {"logits": rng.standard_normal((n, ncls)), "deltas": deltas}


def _end_to_end(rng, scale):
    cfg = ModelConfig(backbone=BackboneConfig(width_scale=scale.width_scale, input_dims=scale.detector_dims),
                      anchors=DEFAULT_ANCHORS, head_hidden=16, roi=roi.RoiPoolConfig((2, 2), 1 / 32))
    model = DetectorModel(cfg, seed=int(rng.integers(1 << 31)))
    params = {k: v.astype(np.float64) for k, v in model.params.items()}
    # larger output layers than at training start, so every gradient is well
    # above finite-difference noise
    for name in ("rpn.cls", "rpn.reg", "head.cls", "head.reg"):
        w = params[name + ".weight"]
        params[name + ".weight"] = rng.standard_normal(w.shape) * np.sqrt(2.0 / w.shape[0])
        params[name + ".bias"] = rng.standard_normal(params[name + ".bias"].shape) * 0.1
    h, w, _ = scale.detector_dims
    images = rng.uniform(-0.5, 0.5, size=(1, h, w, 3))
    gt = [np.array([[4.0, 6.0, w * 0.5, h * 0.4]])]
    sampling = SamplingConfig(rpn_batch=16, roi_batch=8)
    _, _, targets = model.loss_and_grads(params, images, gt_boxes=gt, gt_classes=[np.ones(1, int)],
                                         rng=rng, cfg=sampling)
    # freeze the sampled targets, then move the regression targets off the
    # current predictions so the smooth-L1 terms have non-trivial slopes
    pos = targets.rpn_labels == POSITIVE
    targets.rpn_targets[pos] += _smooth_targets(rng, int(pos.sum()))
    fg = targets.roi_labels > 0
    targets.roi_targets[fg] += _smooth_targets(rng, int(fg.sum()))

    def fragment(a):
        lb, grads, _ = model.loss_and_grads(a, images, targets=targets, cfg=sampling)
        return lb.total, grads
    fragment.loss_only = lambda a: model.loss(a, images, targets, sampling).total
    return fragment, params


COMPONENTS = {
    "conv": _conv,
    "relu": _relu,
    "maxpool": _maxpool,
    "add": _add,
    "fusion": _fusion,
    "roi_pool": _roi_pool,
    "rpn_loss": _rpn_loss,
    "rcnn_loss": _rcnn_loss,
    "end_to_end": _end_to_end,
}


def run_gradcheck(scale: str = "tiny", seed: int = 0, components=None,
                  epsilon=STEPS) -> list[GradcheckResult]:
    """Check each named component; every one draws from its own seeded stream."""
    sc = SCALES[scale]
    names = list(COMPONENTS) if components is None else list(components)
    results = []
    for name in names:
        i = list(COMPONENTS).index(name)
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        fragment, inputs = COMPONENTS[name](rng, sc)
        probes = sum(min(v.size, sc.max_entries) for v in inputs.values())
        err = nn.finite_diff_check(fragment, inputs, epsilon, max_entries=sc.max_entries,
                                   rng=np.random.default_rng([seed, i, 1]),
                                   loss_only=getattr(fragment, "loss_only", None))
        results.append(GradcheckResult(name, err, probes, time.perf_counter() - t0))
    return results


def format_results(results: list[GradcheckResult]) -> str:
    lines = [f"{'component':<12} {'max_rel_error':>14}  status"]
    for r in results:
        lines.append(f"{r.component:<12} {r.max_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
