"""The fused two-backbone Faster R-CNN detector.

Parameters live in one flat ``name -> array`` dict so that the optimiser,
gradient checker and checkpoint code can treat them uniformly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import nn
from ..backbones import BackboneConfig, FusedExtractor, init_conv_params
from ..errors import ContractError
from .anchors import IGNORE, NEGATIVE, POSITIVE, AnchorSet, assign_targets, generate_anchors, inside_image
from .boxes import Box, clip_boxes, decode_deltas, encode_deltas, nms
from .losses import LossBreakdown, rcnn_loss_from_logits, rpn_loss_from_logits
from .roi import RoiPoolConfig, roi_pool_batch, roi_pool_batch_backward

DEFAULT_ANCHORS = AnchorSet(((12.0, 12.0), (16.0, 24.0), (24.0, 16.0), (24.0, 24.0), (32.0, 32.0)))


@dataclass(frozen=True)
class ProposalConfig:
    pre_nms_top_n: int = 600
    post_nms_top_n: int = 100
    nms_threshold: float = 0.7
    min_size: float = 1.0


@dataclass(frozen=True)
class DetectConfig:
    proposals: ProposalConfig = ProposalConfig()
    nms_threshold: float = 0.3
    score_threshold: float = 0.5


@dataclass(frozen=True)
class SamplingConfig:
    positive_band: tuple[float, float] = (0.6, 1.0)
    negative_band: tuple[float, float] = (0.0, 0.3)
    rpn_batch: int = 128
    rpn_positive_fraction: float = 0.5
    roi_batch: int = 64
    roi_positive_fraction: float = 0.25
    # anchors reaching further than this outside the image get no target
    allowed_border: float = 0.0
    lambda_rpn: float = 1.0
    lambda_rcnn: float = 1.0
    proposals: ProposalConfig = ProposalConfig()
    # extra roi candidates per gt: randomly shifted / rescaled copies of it
    roi_jitter: int = 0
    # bands for labelling head rois; None reuses the anchor bands above
    roi_positive_band: tuple[float, float] | None = None
    roi_negative_band: tuple[float, float] | None = None


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 1
    anchors: AnchorSet = DEFAULT_ANCHORS
    head_hidden: int = 128
    roi: RoiPoolConfig = RoiPoolConfig()
    # regression targets are encoded deltas times these weights
    rpn_delta_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    head_delta_weights: tuple[float, float, float, float] = (10.0, 10.0, 5.0, 5.0)
    # append each roi's normalised corners to its pooled features (a desk-scale
    # aid: on a 2x2 feature map every pooled roi looks almost the same)
    head_box_features: bool = False

    def to_dict(self) -> dict:
        b = self.backbone
        return {
            "block_filters": list(b.block_filters),
            "width_scale": str(b.width_scale),
            "input_dims": list(b.input_dims),
            "num_classes": self.num_classes,
            "anchors": self.anchors.to_dict(),
            "head_hidden": self.head_hidden,
            "roi_output_size": list(self.roi.output_size),
            "roi_spatial_scale": self.roi.spatial_scale,
            "rpn_delta_weights": list(self.rpn_delta_weights),
            "head_delta_weights": list(self.head_delta_weights),
            "head_box_features": self.head_box_features,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            backbone=BackboneConfig(tuple(d["block_filters"]), d["width_scale"], tuple(d["input_dims"])),
            num_classes=int(d["num_classes"]),
            anchors=AnchorSet.from_dict(d["anchors"]),
            head_hidden=int(d["head_hidden"]),
            roi=RoiPoolConfig(tuple(d["roi_output_size"]), float(d["roi_spatial_scale"])),
            rpn_delta_weights=tuple(float(v) for v in d["rpn_delta_weights"]),
            head_delta_weights=tuple(float(v) for v in d["head_delta_weights"]),
            head_box_features=bool(d["head_box_features"]),
        )


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float


@dataclass
class TrainTargets:
    """Everything sampled from the current predictions for one step.

    Holding these fixed makes the loss a deterministic, differentiable
    function of the parameters (used by gradient checking).
    """

    rpn_labels: np.ndarray          # (N, A)
    rpn_targets: np.ndarray         # (N, A, 4)
    rois: np.ndarray                # (R, 4)
    roi_batch: np.ndarray           # (R,)
    roi_labels: np.ndarray          # (R,)
    roi_targets: np.ndarray         # (R, 4)


def propose(objectness: np.ndarray, deltas: np.ndarray, anchors: np.ndarray,
            image_hw: tuple[int, int], cfg: ProposalConfig = ProposalConfig()):
    """Decode, clip, size-filter, rank, suppress.  Returns ``(boxes, scores)``."""
    boxes = clip_boxes(decode_deltas(anchors, deltas), image_hw)
    scores = np.asarray(objectness, dtype=np.float64).reshape(-1)
    keep = np.flatnonzero((boxes[:, 2] >= cfg.min_size) & (boxes[:, 3] >= cfg.min_size))
    order = keep[np.argsort(-scores[keep], kind="stable")][:cfg.pre_nms_top_n]
    boxes, scores = boxes[order], scores[order]
    kept = nms(boxes, scores, cfg.nms_threshold)[:cfg.post_nms_top_n]
    return boxes[kept], scores[kept]


def jitter_boxes(rng: np.random.Generator, gt: np.ndarray, copies: int,
                 image_hw: tuple[int, int]) -> np.ndarray:
    if copies <= 0 or len(gt) == 0:
        return np.zeros((0, 4))
    g = np.repeat(gt, copies, axis=0)
    shift = rng.uniform(-0.5, 0.5, size=(len(g), 2)) * g[:, 2:]
    scale = np.exp(rng.uniform(-0.4, 0.4, size=(len(g), 2)))
    wh = g[:, 2:] * scale
    xy = g[:, :2] + g[:, 2:] / 2 + shift - wh / 2
    boxes = clip_boxes(np.concatenate([xy, wh], axis=1), image_hw)
    return boxes[(boxes[:, 2] >= 1) & (boxes[:, 3] >= 1)]


def _sample(rng: np.random.Generator, idx: np.ndarray, n: int) -> np.ndarray:
    if len(idx) <= n:
        return idx
    return np.sort(rng.choice(idx, size=n, replace=False))


class DetectorModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        self.extractor = FusedExtractor(cfg.backbone)
        self.feature_hw = cfg.backbone.feature_dims[:2]
        self.image_hw = tuple(cfg.backbone.input_dims[:2])
        self.anchors = generate_anchors(cfg.anchors, self.feature_hw, self.image_hw)
        self.params = params if params is not None else self.init_params(seed)
        missing = set(self.param_shapes()) - set(self.params)
        extra = set(self.params) - set(self.param_shapes())
        if missing or extra:
            raise ContractError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")

    # ------------------------------------------------------------------
    @property
    def k(self) -> int:
        return self.cfg.anchors.k

    @property
    def n_box_features(self) -> int:
        return 4 if self.cfg.head_box_features else 0

    def box_features(self, rois: np.ndarray) -> np.ndarray:
        h, w = self.image_hw
        c = np.asarray(rois, dtype=np.float64).reshape(-1, 4).copy()
        c[:, 2:] += c[:, :2]
        return c / np.array([w, h, w, h]) * 2 - 1

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.extractor.out_channels
        k, hid = self.k, self.cfg.head_hidden
        oh, ow = self.cfg.roi.output_size
        ncls = self.cfg.num_classes + 1
        shapes = self.extractor.param_shapes()
        shapes.update({
            "rpn.conv.weight": (3, 3, c, c), "rpn.conv.bias": (c,),
            "rpn.cls.weight": (c, 2 * k), "rpn.cls.bias": (2 * k,),
            "rpn.reg.weight": (c, 4 * k), "rpn.reg.bias": (4 * k,),
            "head.fc1.weight": (oh * ow * c + self.n_box_features, hid), "head.fc1.bias": (hid,),
            "head.fc2.weight": (hid, hid), "head.fc2.bias": (hid,),
            "head.cls.weight": (hid, ncls), "head.cls.bias": (ncls,),
            "head.reg.weight": (hid, 4 * ncls), "head.reg.bias": (4 * ncls,),
        })
        return shapes

    def init_params(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        shapes = self.param_shapes()
        params = init_conv_params(shapes, rng)
        # prediction layers start near zero so early proposals are the anchors
        for name, std in (("rpn.cls", 0.01), ("rpn.reg", 0.01), ("head.cls", 0.01), ("head.reg", 0.001)):
            params[name + ".weight"] = (rng.standard_normal(shapes[name + ".weight"]) * std).astype(np.float32)
        return params

    def astype(self, dtype) -> "DetectorModel":
        return DetectorModel(self.cfg, {k: v.astype(dtype) for k, v in self.params.items()})

    # ------------------------------------------------------------------
    def _rpn_forward(self, params, feats):
        n, fh, fw, c = feats.shape
        cols = nn.im2col(feats, 3, 3)
        pre = nn.conv2d_forward(feats, params["rpn.conv.weight"], params["rpn.conv.bias"], cols=cols)
        act = nn.relu(pre).reshape(-1, c)
        logits = nn.linear(act, params["rpn.cls.weight"], params["rpn.cls.bias"])
        deltas = nn.linear(act, params["rpn.reg.weight"], params["rpn.reg.bias"])
        logits = logits.reshape(n, fh * fw * self.k, 2)
        deltas = deltas.reshape(n, fh * fw * self.k, 4)
        return logits, deltas, (cols, pre, act)

    def _rpn_backward(self, params, feats, cache, g_logits, g_deltas):
        cols, pre, act = cache
        n, fh, fw, c = feats.shape
        g_logits = g_logits.reshape(-1, 2 * self.k)
        g_deltas = g_deltas.reshape(-1, 4 * self.k)
        grads = {}
        ga1, grads["rpn.cls.weight"], grads["rpn.cls.bias"] = nn.linear_backward(
            act, params["rpn.cls.weight"], g_logits)
        ga2, grads["rpn.reg.weight"], grads["rpn.reg.bias"] = nn.linear_backward(
            act, params["rpn.reg.weight"], g_deltas)
        g_act = (ga1 + ga2).reshape(n, fh, fw, c)
        g_pre = nn.relu_backward(pre, g_act)
        g_feat, grads["rpn.conv.weight"], grads["rpn.conv.bias"] = nn.conv2d_backward(
            feats, params["rpn.conv.weight"], g_pre, cols=cols)
        return g_feat, grads

    def _head_forward(self, params, pooled, rois):
        x = pooled.reshape(len(pooled), -1)
        if self.n_box_features:
            x = np.concatenate([x, self.box_features(rois).astype(x.dtype)], axis=1)
        h1p = nn.linear(x, params["head.fc1.weight"], params["head.fc1.bias"])
        h1 = nn.relu(h1p)
        h2p = nn.linear(h1, params["head.fc2.weight"], params["head.fc2.bias"])
        h2 = nn.relu(h2p)
        logits = nn.linear(h2, params["head.cls.weight"], params["head.cls.bias"])
        deltas = nn.linear(h2, params["head.reg.weight"], params["head.reg.bias"])
        return logits, deltas, (x, h1p, h1, h2p, h2)

    def _head_backward(self, params, cache, g_logits, g_deltas, pooled_shape):
        x, h1p, h1, h2p, h2 = cache
        grads = {}
        gh2a, grads["head.cls.weight"], grads["head.cls.bias"] = nn.linear_backward(
            h2, params["head.cls.weight"], g_logits)
        gh2b, grads["head.reg.weight"], grads["head.reg.bias"] = nn.linear_backward(
            h2, params["head.reg.weight"], g_deltas)
        g = nn.relu_backward(h2p, gh2a + gh2b)
        g, grads["head.fc2.weight"], grads["head.fc2.bias"] = nn.linear_backward(
            h1, params["head.fc2.weight"], g)
        g = nn.relu_backward(h1p, g)
        g, grads["head.fc1.weight"], grads["head.fc1.bias"] = nn.linear_backward(
            x, params["head.fc1.weight"], g)
        if self.n_box_features:
            g = g[:, :-self.n_box_features]
        return g.reshape(pooled_shape), grads

    # ------------------------------------------------------------------
    def sample_targets(self, rpn_probs: np.ndarray, rpn_deltas: np.ndarray,
                       gt_boxes: list[np.ndarray], gt_classes: list[np.ndarray],
                       rng: np.random.Generator, cfg: SamplingConfig) -> TrainTargets:
        n, a = rpn_probs.shape
        inside = inside_image(self.anchors, self.image_hw, cfg.allowed_border)
        rpn_labels = np.full((n, a), IGNORE, dtype=np.int64)
        rpn_targets = np.zeros((n, a, 4))
        rois, roi_b, roi_u, roi_t = [], [], [], []
        rpn_w = np.asarray(self.cfg.rpn_delta_weights)
        head_w = np.asarray(self.cfg.head_delta_weights)
        n_pos_max = int(cfg.rpn_batch * cfg.rpn_positive_fraction)
        n_fg_max = int(round(cfg.roi_batch * cfg.roi_positive_fraction))
        for i in range(n):
            gt = np.asarray(gt_boxes[i], dtype=np.float64).reshape(-1, 4)
            cls = np.asarray(gt_classes[i], dtype=np.int64).reshape(-1)
            idx_in = np.flatnonzero(inside)
            lab, match = assign_targets(self.anchors[idx_in], gt, cfg.positive_band,
                                        cfg.negative_band, force_best=True)
            pos = _sample(rng, idx_in[lab == POSITIVE], n_pos_max)
            neg = _sample(rng, idx_in[lab == NEGATIVE], cfg.rpn_batch - len(pos))
            rpn_labels[i, pos] = POSITIVE
            rpn_labels[i, neg] = NEGATIVE
            if len(pos):
                m = dict(zip(idx_in, match))
                rpn_targets[i, pos] = encode_deltas(self.anchors[pos], gt[[m[p] for p in pos]]) * rpn_w

            props, _ = propose(rpn_probs[i], rpn_deltas[i] / rpn_w, self.anchors, self.image_hw,
                               cfg.proposals)
            cand = np.concatenate([props, gt, jitter_boxes(rng, gt, cfg.roi_jitter, self.image_hw)])
            lab, match = assign_targets(cand, gt, cfg.roi_positive_band or cfg.positive_band,
                                        cfg.roi_negative_band or cfg.negative_band)
            fg = _sample(rng, np.flatnonzero(lab == POSITIVE), n_fg_max)
            bg = _sample(rng, np.flatnonzero(lab == NEGATIVE), cfg.roi_batch - len(fg))
            sel = np.concatenate([fg, bg])
            rois.append(cand[sel])
            roi_b.append(np.full(len(sel), i, dtype=np.int64))
            u = np.zeros(len(sel), dtype=np.int64)
            t = np.zeros((len(sel), 4))
            if len(fg):
                u[:len(fg)] = cls[match[fg]]
                t[:len(fg)] = encode_deltas(cand[fg], gt[match[fg]]) * head_w
            roi_u.append(u)
            roi_t.append(t)
        return TrainTargets(rpn_labels, rpn_targets, np.concatenate(rois), np.concatenate(roi_b),
                            np.concatenate(roi_u), np.concatenate(roi_t))

    def loss_and_grads(self, params: dict[str, np.ndarray], images: np.ndarray,
                       targets: TrainTargets | None = None, gt_boxes=None, gt_classes=None,
                       rng: np.random.Generator | None = None,
                       cfg: SamplingConfig = SamplingConfig()):
        """One forward/backward pass.

        When ``targets`` is None they are sampled from this pass's RPN
        output (gradients never flow through the sampling).  Returns
        ``(LossBreakdown, grads, targets)``.
        """
        feats, fcache = self.extractor.forward(params, images)
        n, fh, fw, c = feats.shape
        logits, deltas, rcache = self._rpn_forward(params, feats)
        if targets is None:
            probs = nn.softmax(logits.astype(np.float64))[..., 1]
            targets = self.sample_targets(probs, deltas.astype(np.float64), gt_boxes, gt_classes,
                                          rng if rng is not None else np.random.default_rng(0), cfg)

        lb_rpn, g_rl, g_rd = rpn_loss_from_logits(
            logits.reshape(-1, 2), deltas.reshape(-1, 4), targets.rpn_labels.reshape(-1),
            targets.rpn_targets.reshape(-1, 4), cfg.lambda_rpn, num_locations=n * fh * fw)
        dtype = feats.dtype
        g_feat, grads = self._rpn_backward(params, feats, rcache,
                                           g_rl.astype(dtype), g_rd.astype(dtype))

        pooled, args = roi_pool_batch(feats, targets.rois, targets.roi_batch, self.cfg.roi)
        lb = LossBreakdown(rpn_cls=lb_rpn.rpn_cls, rpn_reg=lb_rpn.rpn_reg,
                           lambda_rpn=cfg.lambda_rpn, lambda_rcnn=cfg.lambda_rcnn)
        if len(pooled):
            h_logits, h_deltas, hcache = self._head_forward(params, pooled, targets.rois)
            lb_rc, g_hl, g_hd = rcnn_loss_from_logits(h_logits, h_deltas, targets.roi_labels,
                                                      targets.roi_targets, cfg.lambda_rcnn)
            lb.rcnn_cls, lb.rcnn_reg = lb_rc.rcnn_cls, lb_rc.rcnn_reg
            g_pooled, hgrads = self._head_backward(params, hcache, g_hl.astype(dtype),
                                                   g_hd.astype(dtype), pooled.shape)
            grads.update(hgrads)
            g_feat = g_feat + roi_pool_batch_backward(args, targets.roi_batch, g_pooled, feats.shape)
        else:
            for name in ("head.fc1", "head.fc2", "head.cls", "head.reg"):
                for suffix in (".weight", ".bias"):
                    grads[name + suffix] = np.zeros_like(params[name + suffix])

        _, egrads = self.extractor.backward(params, fcache, g_feat)
        grads.update(egrads)
        grads = {k: v.astype(params[k].dtype, copy=False) for k, v in grads.items()}
        return lb, grads, targets

    def loss(self, params: dict[str, np.ndarray], images: np.ndarray, targets: TrainTargets,
             cfg: SamplingConfig = SamplingConfig()) -> LossBreakdown:
        """Forward-only loss for fixed targets."""
        feats, _ = self.extractor.forward(params, images)
        n, fh, fw, _ = feats.shape
        logits, deltas, _ = self._rpn_forward(params, feats)
        lb, _, _ = rpn_loss_from_logits(logits.reshape(-1, 2), deltas.reshape(-1, 4),
                                        targets.rpn_labels.reshape(-1),
                                        targets.rpn_targets.reshape(-1, 4), cfg.lambda_rpn,
                                        num_locations=n * fh * fw)
        lb.lambda_rcnn = cfg.lambda_rcnn
        pooled, _ = roi_pool_batch(feats, targets.rois, targets.roi_batch, self.cfg.roi)
        if len(pooled):
            h_logits, h_deltas, _ = self._head_forward(params, pooled, targets.rois)
            lb_rc, _, _ = rcnn_loss_from_logits(h_logits, h_deltas, targets.roi_labels,
                                                targets.roi_targets, cfg.lambda_rcnn)
            lb.rcnn_cls, lb.rcnn_reg = lb_rc.rcnn_cls, lb_rc.rcnn_reg
        return lb

    # ------------------------------------------------------------------
    def detect(self, images: np.ndarray, cfg: DetectConfig = DetectConfig()) -> list[list[Detection]]:
        """Run the full detector on a preprocessed ``(N, H, W, 3)`` batch."""
        params = self.params
        feats, _ = self.extractor.forward(params, images)
        logits, deltas, _ = self._rpn_forward(params, feats)
        probs = nn.softmax(logits.astype(np.float64))[..., 1]
        results = []
        for i in range(len(images)):
            props, _ = propose(probs[i], deltas[i] / np.asarray(self.cfg.rpn_delta_weights),
                               self.anchors, self.image_hw, cfg.proposals)
            dets: list[Detection] = []
            if len(props):
                pooled, _ = roi_pool_batch(feats, props, np.full(len(props), i), self.cfg.roi)
                h_logits, h_deltas, _ = self._head_forward(params, pooled, props)
                cls_p = nn.softmax(h_logits.astype(np.float64))
                h_deltas = h_deltas.astype(np.float64).reshape(len(props), -1, 4)
                head_w = np.asarray(self.cfg.head_delta_weights)
                for c in range(1, cls_p.shape[1]):
                    boxes = clip_boxes(decode_deltas(props, h_deltas[:, c] / head_w), self.image_hw)
                    scores = cls_p[:, c]
                    ok = np.flatnonzero((scores >= cfg.score_threshold)
                                        & (boxes[:, 2] > 0) & (boxes[:, 3] > 0))
                    if len(ok) == 0:
                        continue
                    kept = ok[nms(boxes[ok], scores[ok], cfg.nms_threshold)]
                    dets.extend(Detection(Box.from_array(boxes[j]), c, float(scores[j])) for j in kept)
            dets.sort(key=lambda d: -d.score)
            results.append(dets)
        return results
