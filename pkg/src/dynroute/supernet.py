"""Gated multi-scale trellis network with per-node routers.

The network keeps feature maps at up to num_scales resolutions, starting
at 1/8 of the input after a 3-conv stem. Each (layer, scale) node sums
the contributions arriving from the previous layer (resolution-up from
the scale below, keep from the same scale, resolution-down from the
scale above), runs a router that emits a 3-way gate, and a 3x3 separable
conv block whose output is sent along the gated directions:

    up:   1x1 conv to the next-higher resolution's channels, then 2x
          bilinear upsampling
    keep: identity
    down: stride-2 1x1 conv to the next-lower resolution's channels

Layer l exposes scales 0..min(l, num_scales)-1, so the trellis expands
by one scale per layer until all scales are live. At the final layer the
keep direction feeds the output projections; up and down have no
receiver there and are masked invalid, exactly like the scale
boundaries.

Train mode multiplies each directional output by its continuous gate and
always runs the conv block. Infer mode thresholds the gates at the spec
threshold; a node whose valid gates are all below threshold skips its
conv block entirely and contributes zeros downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, UsageError


class NodeId(NamedTuple):
    layer: int  # 1-based
    scale: int  # 0 = highest resolution (1/8)


@dataclass(frozen=True)
class SupernetSpec:
    num_layers: int = 16
    num_scales: int = 4
    channels_per_scale: tuple[int, ...] = (64, 128, 256, 512)
    gate_threshold: float = 1e-4
    head_channels: int = 256
    in_channels: int = 3

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigurationError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_scales < 1:
            raise ConfigurationError(f"num_scales must be >= 1, got {self.num_scales}")
        if len(self.channels_per_scale) != self.num_scales:
            raise ConfigurationError(
                f"channels_per_scale has {len(self.channels_per_scale)} entries "
                f"for {self.num_scales} scales"
            )
        for a, b in zip(self.channels_per_scale, self.channels_per_scale[1:]):
            if b != 2 * a:
                raise ConfigurationError(
                    f"channels must double between adjacent scales, got {a} -> {b}"
                )
        if self.gate_threshold <= 0:
            raise ConfigurationError("gate_threshold must be positive")
        if self.head_channels < 1 or self.in_channels < 1:
            raise ConfigurationError("head_channels and in_channels must be >= 1")

    @property
    def min_divisor(self) -> int:
        """Smallest spatial divisor an input must satisfy (8 * 2^(S-1))."""
        return 8 * (2 ** (self.num_scales - 1))


def reachable_nodes(spec: SupernetSpec) -> list[NodeId]:
    """Nodes in the fixed flattening order: layer-major, then scale."""
    return [
        NodeId(layer, scale)
        for layer in range(1, spec.num_layers + 1)
        for scale in range(min(layer, spec.num_scales))
    ]


def valid_directions(spec: SupernetSpec, node: NodeId) -> np.ndarray:
    """Boolean (up, keep, down) validity mask for one node.

    up/down are invalid at the scale boundaries and at the final layer,
    where no receiving node exists; keep is always valid (at the final
    layer it feeds the output projection).
    """
    last = node.layer == spec.num_layers
    up = node.scale > 0 and not last
    down = node.scale < spec.num_scales - 1 and not last
    return np.array([up, True, down], dtype=bool)


@dataclass
class RouteRecord:
    """Per-sample gates for every reachable node of one forward pass."""

    node_ids: list[NodeId]
    gates: dict[NodeId, np.ndarray]  # (B, 3) continuous, boundary-masked
    masks: dict[NodeId, np.ndarray] | None = None  # (B, 3) bool, infer only
    gate_tensors: dict[NodeId, Tensor] | None = None  # train mode, for losses

    @property
    def batch_size(self) -> int:
        return self.gates[self.node_ids[0]].shape[0]

    def route_vectors(self) -> np.ndarray:
        """(B, 3n) continuous gates flattened in node order, up/keep/down."""
        return np.concatenate([self.gates[n] for n in self.node_ids], axis=1)

    def binary_vectors(self) -> np.ndarray:
        if self.masks is None:
            raise UsageError("binary route vectors are only available in infer mode")
        return np.concatenate(
            [self.masks[n].astype(np.float64) for n in self.node_ids], axis=1
        )

    def export_text(self, sample: int) -> str:
        """One text record per node: layer scale g_up g_keep g_down mask."""
        lines = [f"# sample {sample}"]
        for n in self.node_ids:
            g = self.gates[n][sample]
            if self.masks is not None:
                m = self.masks[n][sample]
            else:
                m = g > 0
            lines.append(
                f"{n.layer} {n.scale} {g[0]:.6f} {g[1]:.6f} {g[2]:.6f} "
                f"{int(m[0])} {int(m[1])} {int(m[2])}"
            )
        return "\n".join(lines) + "\n"


def binarize_gates(gates: np.ndarray, threshold: float) -> np.ndarray:
    """Inference-time gate thresholding: open iff gate >= threshold."""
    return np.asarray(gates) >= threshold


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / max(1, fan_in)))
    return rng.uniform(-bound, bound, size=shape)


class Supernet:
    """Parameter container plus the forward pass over the trellis."""

    def __init__(self, spec: SupernetSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        self.nodes = reachable_nodes(spec)
        self.node_masks = {n: valid_directions(spec, n) for n in self.nodes}
        self.params: dict[str, Tensor] = {}
        self._input_hw: tuple[int, int] = (0, 0)  # set per forward pass
        self._init_params(np.random.default_rng(seed))

    # -- parameters --------------------------------------------------------

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True)

    def _init_params(self, rng: np.random.Generator) -> None:
        spec = self.spec
        c0 = spec.channels_per_scale[0]
        ch_in = spec.in_channels
        for i in range(3):
            cin = ch_in if i == 0 else c0
            self._add(f"stem.{i}.dw_w", _kaiming_uniform(rng, (cin, 3, 3), 9))
            self._add(f"stem.{i}.pw_w", _kaiming_uniform(rng, (c0, cin), cin))
            self._add(f"stem.{i}.pw_b", np.zeros(c0))
        for n in self.nodes:
            c = spec.channels_per_scale[n.scale]
            base = f"node.{n.layer}.{n.scale}"
            self._add(f"{base}.conv.dw_w", _kaiming_uniform(rng, (c, 3, 3), 9))
            self._add(f"{base}.conv.pw_w", _kaiming_uniform(rng, (c, c), c))
            self._add(f"{base}.conv.pw_b", np.zeros(c))
            self._add(f"{base}.router.conv_w", _kaiming_uniform(rng, (c, c), c))
            self._add(f"{base}.router.fc_w", _kaiming_uniform(rng, (c, 3), c))
            # +0.5 pre-activation so training starts with most paths open
            self._add(f"{base}.router.fc_b", np.full(3, 0.5))
            if self.node_masks[n][0]:
                cu = spec.channels_per_scale[n.scale - 1]
                self._add(f"{base}.up_w", _kaiming_uniform(rng, (cu, c), c))
            if self.node_masks[n][2]:
                cd = spec.channels_per_scale[n.scale + 1]
                self._add(f"{base}.down_w", _kaiming_uniform(rng, (cd, c), c))
        hc = spec.head_channels
        for s in range(spec.num_scales):
            cs = spec.channels_per_scale[s]
            self._add(f"proj.{s}.w", _kaiming_uniform(rng, (hc, cs), cs))
        self._add("extra.dw_w", _kaiming_uniform(rng, (hc, 3, 3), 9))
        self._add("extra.pw_w", _kaiming_uniform(rng, (hc, hc), hc))
        self._add("extra.pw_b", np.zeros(hc))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, tensor in self.params.items():
            if name not in arrays:
                raise UsageError(f"checkpoint missing parameter {name}")
            if arrays[name].shape != tensor.data.shape:
                raise UsageError(
                    f"checkpoint parameter {name} has shape {arrays[name].shape}, "
                    f"expected {tensor.data.shape}"
                )
            tensor.data = arrays[name].astype(np.float64).copy()

    # -- building blocks ----------------------------------------------------

    def _sepconv(self, prefix: str, x: Tensor, stride: int = 1) -> Tensor:
        return ad.relu(
            ad.depthwise_separable_conv3x3(
                x,
                self.params[f"{prefix}.dw_w"],
                self.params[f"{prefix}.pw_w"],
                self.params[f"{prefix}.pw_b"],
                stride=stride,
            )
        )

    def stem_forward(self, images: Tensor) -> Tensor:
        x = images
        for i in range(3):
            x = self._sepconv(f"stem.{i}", x, stride=2)
        return x

    def router_forward(self, node: NodeId, x: Tensor) -> Tensor:
        """Continuous (B, 3) gates in [0, 1], invalid directions forced to 0."""
        base = f"node.{node.layer}.{node.scale}.router"
        pooled = ad.avg_pool_to(x, 2, 2)
        mixed = ad.conv2d_1x1(pooled, self.params[f"{base}.conv_w"])
        squeezed = ad.global_avg_pool(mixed)
        logits = ad.fully_connected(
            squeezed, self.params[f"{base}.fc_w"], self.params[f"{base}.fc_b"]
        )
        gates = ad.clamp(ad.tanh(logits), 0.0, 1.0)
        mask = Tensor(self.node_masks[node].astype(np.float64))
        return ad.mul(gates, mask)

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        images,
        mode: str = "train",
        forced_gates: dict[NodeId, object] | None = None,
    ) -> tuple[list[Tensor], RouteRecord]:
        """Run the trellis; returns pyramid features and the route record.

        The pyramid has num_scales + 1 levels: one projection per scale
        plus one extra level from a stride-2 separable conv on the last.
        forced_gates maps NodeId to a (B, 3) or (3,) array or Tensor that
        replaces the router output (still boundary-masked).
        """
        if mode not in ("train", "infer"):
            raise UsageError(f"mode must be 'train' or 'infer', got {mode!r}")
        images = ad.as_tensor(images)
        if images.data.ndim != 4:
            raise UsageError(f"expected B,C,H,W images, got shape {images.data.shape}")
        B, C, H, W = images.data.shape
        div = self.spec.min_divisor
        if H % div != 0 or W % div != 0:
            raise UsageError(
                f"image spatial size {H}x{W} must be divisible by {div} "
                f"for {self.spec.num_scales} scales"
            )
        if C != self.spec.in_channels:
            raise UsageError(
                f"expected {self.spec.in_channels} input channels, got {C}"
            )

        spec = self.spec
        tau = spec.gate_threshold
        self._input_hw = (H, W)
        stem_out = self.stem_forward(images)

        gates_np: dict[NodeId, np.ndarray] = {}
        masks_np: dict[NodeId, np.ndarray] = {}
        gate_tensors: dict[NodeId, Tensor] = {}
        # contributions flowing into the current layer, keyed by scale
        incoming: dict[int, list[Tensor]] = {0: [stem_out]}
        last_outputs: dict[int, Tensor] = {}

        for layer in range(1, spec.num_layers + 1):
            next_incoming: dict[int, list[Tensor]] = {}
            for scale in range(min(layer, spec.num_scales)):
                node = NodeId(layer, scale)
                contribs = incoming.get(scale, [])
                x = self._node_input(node, contribs, B)
                gates = self._node_gates(node, x, forced_gates)
                gates_np[node] = gates.data.copy()
                gate_tensors[node] = gates
                if mode == "infer":
                    open_mask = binarize_gates(gates.data, tau)
                    masks_np[node] = open_mask
                    outputs = self._node_outputs_infer(node, x, open_mask)
                else:
                    outputs = self._node_outputs_train(node, x, gates)
                for direction, feat in outputs.items():
                    if feat is None:
                        continue
                    if direction == "keep" and layer == spec.num_layers:
                        last_outputs[scale] = feat
                    else:
                        target = scale + {"up": -1, "keep": 0, "down": 1}[direction]
                        next_incoming.setdefault(target, []).append(feat)
            incoming = next_incoming

        pyramid = self._project(last_outputs, B, H, W)
        record = RouteRecord(
            node_ids=list(self.nodes),
            gates=gates_np,
            masks=masks_np if mode == "infer" else None,
            gate_tensors=gate_tensors if mode == "train" else None,
        )
        return pyramid, record

    def _node_input(self, node: NodeId, contribs: list[Tensor], batch: int) -> Tensor:
        if contribs:
            x = contribs[0]
            for extra in contribs[1:]:
                x = ad.add(x, extra)
            return x
        return Tensor(np.zeros(self._node_shape(node, batch)))

    def _node_shape(self, node: NodeId, batch: int) -> tuple[int, int, int, int]:
        b, size = batch, self._scale_size(node.scale)
        return (b, self.spec.channels_per_scale[node.scale], size[0], size[1])

    def _scale_size(self, scale: int) -> tuple[int, int]:
        h = self._input_hw[0] // (8 * 2**scale)
        w = self._input_hw[1] // (8 * 2**scale)
        return h, w

    def _node_gates(self, node, x, forced) -> Tensor:
        if forced is not None and node in forced:
            g = forced[node]
            g = g if isinstance(g, Tensor) else Tensor(np.asarray(g, dtype=np.float64))
            if g.data.ndim == 1:
                g = ad.reshape(g, (1, 3))
            B = x.data.shape[0]
            if g.data.shape[0] == 1 and B > 1:
                g = ad.mul(g, Tensor(np.ones((B, 1))))
            mask = Tensor(self.node_masks[node].astype(np.float64))
            return ad.mul(g, mask)
        return self.router_forward(node, x)

    def _node_outputs_train(self, node: NodeId, x: Tensor, gates: Tensor):
        y = self._sepconv(f"node.{node.layer}.{node.scale}.conv", x)
        outputs: dict[str, Tensor | None] = {"up": None, "keep": None, "down": None}
        valid = self.node_masks[node]
        B = x.data.shape[0]
        for j, direction in enumerate(("up", "keep", "down")):
            if direction != "keep" and not valid[j]:
                continue
            g = ad.reshape(
                ad.take(gates, np.arange(B) * 3 + j), (B, 1, 1, 1)
            )
            outputs[direction] = ad.mul(self._transform(node, direction, y), g)
        return outputs

    def _node_outputs_infer(self, node: NodeId, x: Tensor, open_mask: np.ndarray):
        outputs: dict[str, Tensor | None] = {"up": None, "keep": None, "down": None}
        if not open_mask.any():
            return outputs  # conv block dropped entirely
        y = self._sepconv(f"node.{node.layer}.{node.scale}.conv", x)
        B = x.data.shape[0]
        for j, direction in enumerate(("up", "keep", "down")):
            col = open_mask[:, j]
            if not col.any():
                continue
            g = Tensor(col.astype(np.float64).reshape(B, 1, 1, 1))
            outputs[direction] = ad.mul(self._transform(node, direction, y), g)
        return outputs

    def _transform(self, node: NodeId, direction: str, y: Tensor) -> Tensor:
        base = f"node.{node.layer}.{node.scale}"
        if direction == "keep":
            return y
        if direction == "up":
            return ad.bilinear_upsample_2x(ad.conv2d_1x1(y, self.params[f"{base}.up_w"]))
        return ad.conv2d_1x1(y, self.params[f"{base}.down_w"], stride=2)

    def _project(self, last_outputs: dict[int, Tensor], B: int, H: int, W: int) -> list[Tensor]:
        pyramid: list[Tensor] = []
        for s in range(self.spec.num_scales):
            if s in last_outputs:
                feat = last_outputs[s]
            else:
                feat = Tensor(np.zeros(self._node_shape(NodeId(self.spec.num_layers, s), B)))
            pyramid.append(ad.conv2d_1x1(feat, self.params[f"proj.{s}.w"]))
        extra = ad.depthwise_separable_conv3x3(
            pyramid[-1],
            self.params["extra.dw_w"],
            self.params["extra.pw_w"],
            self.params["extra.pw_b"],
            stride=2,
        )
        pyramid.append(extra)
        return pyramid


def build_supernet(spec: SupernetSpec, seed: int = 0) -> Supernet:
    """Construct a supernet with deterministic parameter initialization."""
    return Supernet(spec, seed)
