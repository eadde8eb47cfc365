"""End-to-end optimization and routing evaluation.

One training step runs the supernet in train mode, computes the
detection loss, the normalized budget loss against the configured
strategy's per-sample targets, and the batch path-similarity loss, then
takes an SGD-with-momentum step on the weighted sum. Both regularizers
are disabled for the warmup epochs and afterwards ramped linearly over
the first ramp_steps steps to avoid collapsing the gates early.

Evaluation binarizes each sample's route, prices it with the cost table,
and reports the spread statistics plus route-cosine separation between
groups of samples sharing a scale encoding.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, load_checkpoint, save_checkpoint
from .costmodel import CostConstants, binary_route_cost, compile_cost_table, network_cost
from .data_synth import Corpus
from .errors import ConfigurationError, NumericError, UsageError
from .head_loss import (
    DetectionHead,
    LossWeights,
    PyramidGeometry,
    assign_targets,
    detection_loss,
    total_loss,
)
from .scale_budget import (
    LossAwareBudget,
    ScaleIntervals,
    encode_scales,
    expected_budget,
    fixed_budget,
    loss_aware_budget,
)
from .similarity import SimilarityConfig, local_similarity_loss
from .supernet import Supernet, SupernetSpec, build_supernet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 12
    base_lr: float = 0.01
    lr_drop_epochs: tuple[int, ...] = (8, 11)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    budget_strategy: str = "scale_dynamic"
    c0_ratio: float = 0.05
    lambda1: float = 1.0
    lambda2: float = 1.0
    seed: int = 0
    regularizer_warmup_epochs: int = 1
    ramp_steps: int = 100
    # dense pretraining epochs before the routed schedule: routers are
    # bypassed with every gate forced to 1 and only the detection loss
    # runs. Off by default: at desk scale a converged dense backbone
    # yields pooled features too uniform for routers to discriminate
    pretrain_epochs: int = 0
    loss_buffer_len: int = 100
    clip_grad_norm: float = 10.0  # 0 disables clipping
    lr_warmup_steps: int = 50  # linear ramp from base_lr/10; 0 disables
    router_lr_scale: float = 1.0  # separate effective lr for router params
    # when False, routers keep the base rate after the weight-schedule
    # drops (two-optimizer style); annealing with the drops settles the
    # marginal gates, so following them is the default
    router_lr_follows_drops: bool = True

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be >= 1")
        if any(e < 1 or e > self.epochs for e in self.lr_drop_epochs):
            raise ConfigurationError(
                f"lr_drop_epochs {self.lr_drop_epochs} must lie in [1, {self.epochs}]"
            )
        if self.lambda2 > 0 and self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 when lambda2 > 0")
        if not (0 < self.c0_ratio <= 1):
            raise ConfigurationError(f"c0_ratio must be in (0, 1], got {self.c0_ratio}")


class Model:
    """Supernet plus detection head plus the shared scale intervals."""

    def __init__(
        self,
        spec: SupernetSpec,
        intervals: ScaleIntervals,
        num_classes: int = 2,
        tower_depth: int = 2,
        seed: int = 0,
    ):
        self.spec = spec
        self.intervals = intervals
        self.num_classes = num_classes
        self.supernet = build_supernet(spec, seed=seed)
        self.head = DetectionHead(
            spec.head_channels, num_classes, tower_depth=tower_depth, seed=seed + 1
        )

    def parameters(self) -> dict[str, Tensor]:
        merged = dict(self.supernet.params)
        merged.update(self.head.params)
        return merged

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = self.supernet.state_arrays()
        arrays.update(self.head.state_arrays())
        return arrays

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.supernet.load_state({k: v for k, v in arrays.items() if not k.startswith("head.")})
        self.head.load_state({k: v for k, v in arrays.items() if k.startswith("head.")})


class SgdMomentum:
    """SGD with momentum; weight decay skips bias vectors. Router
    parameters (the architecture controllers) may use a scaled learning
    rate, as is common for architecture-vs-weight optimization splits."""

    def __init__(
        self,
        params: dict[str, Tensor],
        momentum: float,
        weight_decay: float,
        router_lr_scale: float = 1.0,
    ):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.router_lr_scale = router_lr_scale
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float, router_lr: float | None = None, clip_grad_norm: float = 0.0) -> None:
        if router_lr is None:
            router_lr = lr * self.router_lr_scale
        if clip_grad_norm > 0:
            total = 0.0
            for p in self.params.values():
                if p.grad is not None:
                    total += float((p.grad**2).sum())
            norm = np.sqrt(total)
            if norm > clip_grad_norm:
                scale = clip_grad_norm / norm
                for p in self.params.values():
                    if p.grad is not None:
                        p.grad = p.grad * scale
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay > 0 and not name.endswith("_b") and not name.endswith(".b"):
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p_lr = router_lr if ".router." in name else lr
            p.data = p.data - p_lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class TrainingAborted(NumericError):
    def __init__(self, message: str, last_good: dict[str, np.ndarray], log: list[dict]):
        super().__init__(message)
        self.last_good = last_good
        self.log = log


@dataclass
class TrainResult:
    log: list[dict]
    final_state: dict[str, np.ndarray]
    cost_table: CostConstants


def _lr_for_epoch(config: TrainConfig, epoch: int) -> float:
    drops = sum(1 for d in config.lr_drop_epochs if epoch > d)
    return config.base_lr / (10.0**drops)


def _warmup_factor(config: TrainConfig, global_step: int) -> float:
    """Linear ramp from 0.1 to 1 over the first lr_warmup_steps steps."""
    if config.lr_warmup_steps <= 0 or global_step >= config.lr_warmup_steps:
        return 1.0
    return 0.1 + 0.9 * global_step / config.lr_warmup_steps


def _batch_images(corpus: Corpus, idxs: np.ndarray) -> Tensor:
    imgs = corpus.images[idxs].astype(np.float64) / 255.0
    return Tensor(imgs[:, None, :, :])


def train(model: Model, config: TrainConfig, corpus: Corpus) -> TrainResult:
    """Optimize the model on the corpus; returns the step log and state.

    Raises TrainingAborted (carrying the last epoch's parameters) when a
    loss term goes non-finite.
    """
    config.validate()
    if len(corpus) == 0:
        raise UsageError("training corpus is empty")
    size = corpus.images.shape[1]
    table = compile_cost_table(model.spec, size, size)
    c_tot = table.total
    c0 = config.c0_ratio * c_tot
    m = model.intervals.m
    encodings_all = np.stack(
        [encode_scales(corpus.boxes_hw(i), model.intervals) for i in range(len(corpus))]
    )

    params = model.parameters()
    opt = SgdMomentum(
        params, config.momentum, config.weight_decay,
        router_lr_scale=config.router_lr_scale,
    )
    loss_buffer = LossAwareBudget(c0, config.loss_buffer_len)
    rng = np.random.default_rng(config.seed)
    weights = LossWeights(config.lambda1, config.lambda2)

    log: list[dict] = []
    last_good = model.state_arrays()
    step = 0
    steps_after_warmup = 0
    dense_gates = {n: np.ones(3) for n in model.supernet.nodes}
    try:
        # dense pretraining phase: routers bypassed, detection loss only;
        # logged with epoch 0 so the routed schedule keeps epochs 1..N
        pre_step = 0
        for _ in range(config.pretrain_epochs):
            order = rng.permutation(len(corpus))
            for start in range(0, len(order), config.batch_size):
                idxs = order[start : start + config.batch_size]
                lr = config.base_lr * _warmup_factor(config, pre_step)
                record_losses = _train_step(
                    model, config, corpus, idxs, encodings_all[idxs], table,
                    c_tot, c0, loss_buffer, opt, lr, lr, epoch=0,
                    steps_after_warmup=0, weights=weights,
                    forced_gates=dense_gates,
                )
                pre_step += 1
                step += 1
                record_losses.update({"step": step, "epoch": 0, "lr": lr})
                log.append(record_losses)
            last_good = model.state_arrays()

        for epoch in range(1, config.epochs + 1):
            epoch_lr = _lr_for_epoch(config, epoch)
            order = rng.permutation(len(corpus))
            for start in range(0, len(order), config.batch_size):
                idxs = order[start : start + config.batch_size]
                warm = _warmup_factor(config, step - pre_step) if config.pretrain_epochs == 0 else 1.0
                lr = epoch_lr * warm
                router_base = epoch_lr if config.router_lr_follows_drops else config.base_lr
                router_lr = router_base * warm * config.router_lr_scale
                record_losses = _train_step(
                    model, config, corpus, idxs, encodings_all[idxs], table,
                    c_tot, c0, loss_buffer, opt, lr, router_lr, epoch,
                    steps_after_warmup, weights,
                )
                if epoch > config.regularizer_warmup_epochs:
                    steps_after_warmup += 1
                step += 1
                record_losses.update({"step": step, "epoch": epoch, "lr": lr})
                log.append(record_losses)
            last_good = model.state_arrays()
    except NumericError as exc:
        raise TrainingAborted(str(exc), last_good, log) from exc
    return TrainResult(log=log, final_state=model.state_arrays(), cost_table=table)


def _train_step(
    model, config, corpus, idxs, encodings, table, c_tot, c0,
    loss_buffer, opt, lr, router_lr, epoch, steps_after_warmup, weights,
    forced_gates=None,
) -> dict:
    images = _batch_images(corpus, idxs)
    boxes = [corpus.boxes_xywhc(int(i)) for i in idxs]
    size = corpus.images.shape[1]
    reg_active = epoch > config.regularizer_warmup_epochs and forced_gates is None

    with Tape() as tape:
        pyramid, record = model.supernet.forward(
            images, mode="train", forced_gates=forced_gates
        )
        geometry = PyramidGeometry.from_pyramid(pyramid, size, size)
        pred = model.head.forward(pyramid, geometry)
        targets = assign_targets(boxes, geometry, model.intervals, model.num_classes)
        l_det, det_per_sample = detection_loss(pred, targets)

        cnet = network_cost(record, table)
        mean_ratio = float(np.mean(cnet.data)) / c_tot

        l_global = None
        l_local = None
        eff_weights = weights
        if reg_active:
            ramp = min(1.0, (steps_after_warmup + 1) / max(1, config.ramp_steps))
            eff_weights = LossWeights(weights.lambda1 * ramp, weights.lambda2 * ramp)
            budgets = _budget_targets(
                config.budget_strategy, encodings, det_per_sample, c0, m=model.intervals.m,
                loss_buffer=loss_buffer,
            )
            l_global = _normalized_budget_loss(cnet, budgets, c_tot)
            if weights.lambda2 > 0:
                routes = ad.concat([record.gate_tensors[n] for n in record.node_ids], axis=1)
                l_local = local_similarity_loss(routes, encodings, SimilarityConfig())
        l_tot = total_loss(l_det, l_global, l_local, eff_weights, regularizers_active=reg_active)
        tape.backward(l_tot)

    opt.step(lr, router_lr=router_lr, clip_grad_norm=config.clip_grad_norm)
    opt.zero_grad()
    return {
        "L_det": float(l_det.data),
        "L_global": float(l_global.data) if l_global is not None else 0.0,
        "L_local": float(l_local.data) if l_local is not None else 0.0,
        "L_tot": float(l_tot.data),
        "mean_Cnet_ratio": mean_ratio,
    }


def _normalized_budget_loss(cnet: Tensor, budgets: np.ndarray, c_tot: float) -> Tensor:
    from .scale_budget import global_budget_loss

    cnet_norm = ad.mul(cnet, Tensor(1.0 / c_tot))
    return global_budget_loss(cnet_norm, Tensor(budgets / c_tot))


def _budget_targets(strategy, encodings, det_per_sample, c0, m, loss_buffer) -> np.ndarray:
    if strategy == "fixed":
        return np.array([fixed_budget(c0) for _ in range(len(encodings))])
    if strategy == "loss_aware":
        return np.array(
            [loss_aware_budget(loss_buffer, float(v)) for v in det_per_sample]
        )
    if strategy == "scale_dynamic":
        return np.array([expected_budget(s, c0, m) for s in encodings])
    raise ConfigurationError(f"unknown budget strategy {strategy!r}")


def write_log(log: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="ascii") as f:
        for rec in log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalSummary:
    sample_costs: list[float]
    total_cost: float
    patterns: list[tuple[int, ...]]
    mean_madds: float
    max_madds: float
    min_madds: float
    std_madds: float
    mean_within_cos: float
    mean_cross_cos: float
    det_loss: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("sample_id,pattern,num_intervals,C_net,C_tot,ratio\n")
        for i, (c, p) in enumerate(zip(self.sample_costs, self.patterns)):
            pat = "".join(str(int(b)) for b in p)
            buf.write(
                f"{i},{pat},{sum(p)},{c!r},{self.total_cost!r},{c / self.total_cost!r}\n"
            )
        buf.write(
            "mean_madds,max_madds,min_madds,std_madds,mean_within_cos,mean_cross_cos,det_loss\n"
        )
        buf.write(
            f"{self.mean_madds!r},{self.max_madds!r},{self.min_madds!r},"
            f"{self.std_madds!r},{self.mean_within_cos!r},{self.mean_cross_cos!r},"
            f"{self.det_loss!r}\n"
        )
        return buf.getvalue()

    def human_summary(self) -> str:
        return (
            f"samples: {len(self.sample_costs)}\n"
            f"MAdds mean/max/min/std: {self.mean_madds:.1f} / {self.max_madds:.1f} "
            f"/ {self.min_madds:.1f} / {self.std_madds:.3f}\n"
            f"route cosine within/cross groups: {self.mean_within_cos:.4f} "
            f"/ {self.mean_cross_cos:.4f}\n"
            f"detection loss: {self.det_loss:.4f}\n"
        )


def evaluate_routing(model: Model, corpus: Corpus, batch_size: int = 16) -> EvalSummary:
    """Binarize routes over the corpus and summarize cost and diversity."""
    if len(corpus) == 0:
        raise UsageError("evaluation corpus is empty")
    size = corpus.images.shape[1]
    table = compile_cost_table(model.spec, size, size)
    c_tot = table.total

    costs: list[float] = []
    routes: list[np.ndarray] = []
    patterns: list[tuple[int, ...]] = []
    det_losses: list[float] = []
    for start in range(0, len(corpus), batch_size):
        idxs = np.arange(start, min(start + batch_size, len(corpus)))
        images = _batch_images(corpus, idxs)
        pyramid, record = model.supernet.forward(images, mode="infer")
        costs.extend(binary_route_cost(record.masks, table).tolist())
        routes.append(record.route_vectors())
        geometry = PyramidGeometry.from_pyramid(pyramid, size, size)
        pred = model.head.forward(pyramid, geometry)
        boxes = [corpus.boxes_xywhc(int(i)) for i in idxs]
        targets = assign_targets(boxes, geometry, model.intervals, model.num_classes)
        _, per_sample = detection_loss(pred, targets)
        det_losses.extend(per_sample.tolist())
        for i in idxs:
            patterns.append(tuple(int(v) for v in encode_scales(corpus.boxes_hw(int(i)), model.intervals)))

    route_mat = np.concatenate(routes, axis=0)
    within, cross = group_cosine_stats(route_mat, patterns)
    arr = np.array(costs)
    return EvalSummary(
        sample_costs=[float(c) for c in costs],
        total_cost=float(c_tot),
        patterns=patterns,
        mean_madds=float(arr.mean()),
        max_madds=float(arr.max()),
        min_madds=float(arr.min()),
        std_madds=float(arr.std()),
        mean_within_cos=within,
        mean_cross_cos=cross,
        det_loss=float(np.mean(det_losses)),
    )


def group_cosine_stats(routes: np.ndarray, patterns: list[tuple[int, ...]]) -> tuple[float, float]:
    """Mean pairwise route cosine inside and across scale-pattern groups.

    Groups with fewer than two samples contribute no within-group pairs.
    """
    norms = np.linalg.norm(routes, axis=1)
    safe = np.where(norms == 0, 1.0, norms)
    unit = routes / safe[:, None]
    gram = unit @ unit.T
    n = len(patterns)
    same = np.zeros((n, n), dtype=bool)
    keys = [tuple(p) for p in patterns]
    for i in range(n):
        for j in range(i + 1, n):
            same[i, j] = keys[i] == keys[j]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    within_mask = same & upper
    cross_mask = (~same) & upper
    within = float(gram[within_mask].mean()) if within_mask.any() else 0.0
    cross = float(gram[cross_mask].mean()) if cross_mask.any() else 0.0
    return within, cross


def spearman(x, y) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx**2).sum() * (ry**2).sum())
    return float((rx * ry).sum() / denom) if denom > 0 else 0.0


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0
        i = j + 1
    return ranks


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------


def save_model(path: str | Path, model: Model, run_config: dict) -> None:
    save_checkpoint(path, model.state_arrays(), meta={"config": run_config})


def load_model(path: str | Path) -> tuple[Model, dict]:
    from .cli import model_from_config  # config schema lives with the CLI

    arrays, meta = load_checkpoint(path)
    run_config = meta.get("config")
    if run_config is None:
        raise UsageError(f"{path}: checkpoint carries no config metadata")
    model = model_from_config(run_config)
    model.load_state(arrays)
    return model, run_config
