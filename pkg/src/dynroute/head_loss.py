"""Anchor-free dense detection head and the combined training objective.

The head runs two small shared-weight towers (classification and box
regression) over every pyramid level, predicting per-location class
logits and four box-edge distances (left, top, right, bottom). Distances
come out of an exp activation scaled by the level stride, so they are
always positive.

Target assignment is interval-based: a box belongs to the pyramid level
whose object-scale interval contains its longest side, and every
location of that level whose center falls inside the box is positive
(smallest box wins on overlap). The extra top level receives no interval
and therefore trains as pure background.

The detection loss is a sigmoid focal classification term over all
locations plus an IoU term (1 - IoU) over positives, both normalized by
the number of positives. The full objective adds the budget and
path-similarity regularizers with their weights; both regularizers are
forced to zero while warmup is active.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, NumericError, UsageError
from .scale_budget import ScaleIntervals
from .supernet import SupernetSpec

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("loss weights must be non-negative")


@dataclass
class DensePrediction:
    """Per-level classification logits (B,K,H,W) and positive distances
    (B,4,H,W) in pixels."""

    cls_logits: list[Tensor]
    distances: list[Tensor]

    @property
    def num_levels(self) -> int:
        return len(self.cls_logits)


@dataclass
class PyramidGeometry:
    image_h: int
    image_w: int
    sizes: list[tuple[int, int]]  # (H, W) per level
    strides: list[float]

    @classmethod
    def from_pyramid(cls, pyramid, image_h: int, image_w: int) -> "PyramidGeometry":
        sizes = [(t.data.shape[2], t.data.shape[3]) for t in pyramid]
        strides = [image_h / h for (h, _w) in sizes]
        return cls(image_h=image_h, image_w=image_w, sizes=sizes, strides=strides)

    def centers(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        h, w = self.sizes[level]
        s = self.strides[level]
        ys = (np.arange(h) + 0.5) * s
        xs = (np.arange(w) + 0.5) * s
        return ys, xs


class DetectionHead:
    """Shared towers over all pyramid levels, then 1x1 predictors."""

    def __init__(
        self,
        head_channels: int,
        num_classes: int,
        tower_depth: int = 2,
        seed: int = 0,
        prior_prob: float = 0.01,
    ):
        if num_classes < 1 or tower_depth < 1:
            raise ConfigurationError("num_classes and tower_depth must be >= 1")
        self.num_classes = num_classes
        self.tower_depth = tower_depth
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        hc = head_channels
        for branch in ("cls", "reg"):
            for i in range(tower_depth):
                self._add(f"head.{branch}_tower.{i}.dw_w", self._ku(rng, (hc, 3, 3), 9))
                self._add(f"head.{branch}_tower.{i}.pw_w", self._ku(rng, (hc, hc), hc))
                self._add(f"head.{branch}_tower.{i}.pw_b", np.zeros(hc))
        # near-zero predictor weights keep initial logits at their biases,
        # the usual stabilizer for focal-loss heads without norm layers
        self._add("head.cls_pred.w", rng.normal(0.0, 0.01, (num_classes, hc)))
        bias = -math.log((1.0 - prior_prob) / prior_prob)
        self._add("head.cls_pred.b", np.full(num_classes, bias))
        self._add("head.reg_pred.w", rng.normal(0.0, 0.01, (4, hc)))
        self._add("head.reg_pred.b", np.zeros(4))

    @staticmethod
    def _ku(rng, shape, fan_in):
        bound = float(np.sqrt(6.0 / max(1, fan_in)))
        return rng.uniform(-bound, bound, size=shape)

    def _add(self, name, data):
        self.params[name] = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)

    def _tower(self, branch: str, x: Tensor) -> Tensor:
        for i in range(self.tower_depth):
            x = ad.relu(
                ad.depthwise_separable_conv3x3(
                    x,
                    self.params[f"head.{branch}_tower.{i}.dw_w"],
                    self.params[f"head.{branch}_tower.{i}.pw_w"],
                    self.params[f"head.{branch}_tower.{i}.pw_b"],
                )
            )
        return x

    def forward(self, pyramid: list[Tensor], geometry: PyramidGeometry) -> DensePrediction:
        cls_logits: list[Tensor] = []
        distances: list[Tensor] = []
        for level, feat in enumerate(pyramid):
            c = self._tower("cls", feat)
            r = self._tower("reg", feat)
            logits = self._pred("cls_pred", c)
            raw = self._pred("reg_pred", r)
            # clamp keeps exp finite; +-8 spans 0.0003..3000 strides
            dist = ad.mul(ad.exp(ad.clamp(raw, -8.0, 8.0)), Tensor(geometry.strides[level]))
            cls_logits.append(logits)
            distances.append(dist)
        return DensePrediction(cls_logits=cls_logits, distances=distances)

    def _pred(self, name: str, x: Tensor) -> Tensor:
        out = ad.conv2d_1x1(x, self.params[f"head.{name}.w"])
        b = self.params[f"head.{name}.b"]
        return ad.add(out, ad.reshape(b, (1, b.data.shape[0], 1, 1)))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, tensor in self.params.items():
            if name not in arrays:
                raise UsageError(f"checkpoint missing parameter {name}")
            tensor.data = arrays[name].astype(np.float64).copy()


@dataclass
class Targets:
    """Per-level assignment results, all plain numpy."""

    cls_onehot: list[np.ndarray]  # (B, H*W, K)
    box_targets: list[np.ndarray]  # (B, H*W, 4) distances, positives only
    pos_mask: list[np.ndarray]  # (B, H*W) bool

    @property
    def num_positives(self) -> int:
        return int(sum(m.sum() for m in self.pos_mask))

    def per_sample_positives(self) -> np.ndarray:
        return np.sum([m.sum(axis=1) for m in self.pos_mask], axis=0)


def assign_targets(
    boxes_per_image: list[list[tuple[float, float, float, float, int]]],
    geometry: PyramidGeometry,
    intervals: ScaleIntervals,
    num_classes: int,
) -> Targets:
    """FCOS-style assignment with interval-based level selection.

    boxes_per_image[b] lists (x, y, w, h, class). A box is assigned to
    level interval_of(max(w, h)); levels beyond the interval count stay
    background. Within the level, positives are the locations whose
    center lies strictly inside the box; overlaps resolve to the box with
    the smallest area.
    """
    B = len(boxes_per_image)
    cls_onehot, box_targets, pos_masks = [], [], []
    for level, (h, w) in enumerate(geometry.sizes):
        n = h * w
        cls_onehot.append(np.zeros((B, n, num_classes)))
        box_targets.append(np.zeros((B, n, 4)))
        pos_masks.append(np.zeros((B, n), dtype=bool))

    for b, boxes in enumerate(boxes_per_image):
        best_area: dict[tuple[int, int], float] = {}
        for (x, y, bw, bh, cls_id) in boxes:
            if not (0 <= cls_id < num_classes):
                raise UsageError(f"class id {cls_id} out of range for {num_classes} classes")
            level = intervals.interval_of(max(bw, bh))
            if level >= len(geometry.sizes):
                continue
            ys, xs = geometry.centers(level)
            h_lvl, w_lvl = geometry.sizes[level]
            inside_y = np.nonzero((ys > y) & (ys < y + bh))[0]
            inside_x = np.nonzero((xs > x) & (xs < x + bw))[0]
            area = bw * bh
            for iy in inside_y:
                for ix in inside_x:
                    loc = int(iy) * w_lvl + int(ix)
                    key = (level, loc)
                    if key in best_area and best_area[key] <= area:
                        continue
                    best_area[key] = area
                    cy, cx = ys[iy], xs[ix]
                    cls_onehot[level][b, loc, :] = 0.0
                    cls_onehot[level][b, loc, cls_id] = 1.0
                    box_targets[level][b, loc] = (cx - x, cy - y, x + bw - cx, y + bh - cy)
                    pos_masks[level][b, loc] = True

    return Targets(cls_onehot=cls_onehot, box_targets=box_targets, pos_mask=pos_masks)


def _focal_term(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Elementwise sigmoid focal loss, alpha=0.25, gamma=2, summed."""
    t = Tensor(onehot)
    one_minus_t = Tensor(1.0 - onehot)
    p = ad.sigmoid(logits)
    log_p = ad.log_sigmoid(logits)
    log_1mp = ad.log_sigmoid(ad.neg(logits))
    pos = ad.mul(ad.mul(t, ad.square(ad.sub(Tensor(1.0), p))), log_p)
    neg_term = ad.mul(ad.mul(one_minus_t, ad.square(p)), log_1mp)
    combined = ad.add(
        ad.mul(pos, Tensor(FOCAL_ALPHA)), ad.mul(neg_term, Tensor(1.0 - FOCAL_ALPHA))
    )
    return ad.neg(ad.tsum(combined))


def _iou_loss_term(pred_dist: Tensor, target_dist: np.ndarray) -> Tensor:
    """Sum of (1 - IoU) for aligned (P, 4) predicted/target distances."""
    P = target_dist.shape[0]
    cols = [ad.take(pred_dist, np.arange(P) * 4 + j) for j in range(4)]
    tl, tt, tr, tb = [Tensor(target_dist[:, j]) for j in range(4)]
    pl, pt, pr, pb = cols
    iw = ad.add(ad.minimum(pl, tl), ad.minimum(pr, tr))
    ih = ad.add(ad.minimum(pt, tt), ad.minimum(pb, tb))
    inter = ad.mul(iw, ih)
    area_p = ad.mul(ad.add(pl, pr), ad.add(pt, pb))
    area_t = ad.mul(ad.add(tl, tr), ad.add(tt, tb))
    union = ad.sub(ad.add(area_p, area_t), inter)
    iou = ad.div(inter, union)
    return ad.tsum(ad.sub(Tensor(np.ones(P)), iou))


def detection_loss(pred: DensePrediction, targets: Targets) -> tuple[Tensor, np.ndarray]:
    """Focal classification + IoU box loss, normalized by positive count.

    Returns the scalar loss Tensor and per-sample loss values (plain
    floats, for ranking-based budget strategies).
    """
    if pred.num_levels != len(targets.cls_onehot):
        raise UsageError(
            f"prediction has {pred.num_levels} levels, targets {len(targets.cls_onehot)}"
        )
    B = pred.cls_logits[0].data.shape[0]
    num_pos = max(1, targets.num_positives)

    total: Tensor | None = None
    per_sample = np.zeros(B)
    for level in range(pred.num_levels):
        logits = pred.cls_logits[level]
        Bc, K, H, W = logits.data.shape
        flat_logits = ad.reshape(ad.transpose(logits, (0, 2, 3, 1)), (Bc, H * W, K))
        onehot = targets.cls_onehot[level]
        focal = _focal_term(flat_logits, onehot)
        total = focal if total is None else ad.add(total, focal)
        per_sample += _focal_per_sample(flat_logits.data, onehot)

        pos = targets.pos_mask[level]
        if pos.any():
            dist = pred.distances[level]
            flat_dist = ad.reshape(ad.transpose(dist, (0, 2, 3, 1)), (Bc * H * W, 4))
            b_idx, loc_idx = np.nonzero(pos)
            flat_rows = b_idx * (H * W) + loc_idx
            gather = np.repeat(flat_rows * 4, 4) + np.tile(np.arange(4), flat_rows.size)
            pred_pos = ad.reshape(ad.take(flat_dist, gather), (flat_rows.size, 4))
            tgt = targets.box_targets[level][pos]
            iou_term = _iou_loss_term(pred_pos, tgt)
            total = ad.add(total, iou_term)
            per_sample_iou = _iou_per_sample(
                pred_pos.data, tgt, b_idx, B
            )
            per_sample += per_sample_iou

    loss = ad.mul(total, Tensor(1.0 / num_pos))
    pos_per_sample = np.maximum(1, targets.per_sample_positives())
    return loss, per_sample / pos_per_sample


def _focal_per_sample(logits: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    x = logits
    p = 0.5 * (np.tanh(0.5 * x) + 1.0)
    log_p = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    log_1mp = np.minimum(-x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    elem = -(
        FOCAL_ALPHA * onehot * (1.0 - p) ** 2 * log_p
        + (1.0 - FOCAL_ALPHA) * (1.0 - onehot) * p**2 * log_1mp
    )
    return elem.sum(axis=(1, 2))


def _iou_per_sample(pred: np.ndarray, tgt: np.ndarray, b_idx: np.ndarray, B: int) -> np.ndarray:
    iw = np.minimum(pred[:, 0], tgt[:, 0]) + np.minimum(pred[:, 2], tgt[:, 2])
    ih = np.minimum(pred[:, 1], tgt[:, 1]) + np.minimum(pred[:, 3], tgt[:, 3])
    inter = iw * ih
    area_p = (pred[:, 0] + pred[:, 2]) * (pred[:, 1] + pred[:, 3])
    area_t = (tgt[:, 0] + tgt[:, 2]) * (tgt[:, 1] + tgt[:, 3])
    iou = inter / (area_p + area_t - inter)
    out = np.zeros(B)
    np.add.at(out, b_idx, 1.0 - iou)
    return out


def total_loss(
    l_det: Tensor,
    l_global: Tensor | None,
    l_local: Tensor | None,
    weights: LossWeights,
    regularizers_active: bool = True,
) -> Tensor:
    """Weighted objective; the regularizers are dropped during warmup."""
    for name, term in (("L_det", l_det), ("L_global", l_global), ("L_local", l_local)):
        if term is not None and not np.isfinite(term.data).all():
            raise NumericError(f"{name} is not finite: {term.data}")
    if not regularizers_active:
        return l_det
    out = l_det
    if l_global is not None and weights.lambda1 > 0:
        out = ad.add(out, ad.mul(l_global, Tensor(weights.lambda1)))
    if l_local is not None and weights.lambda2 > 0:
        out = ad.add(out, ad.mul(l_local, Tensor(weights.lambda2)))
    return out
