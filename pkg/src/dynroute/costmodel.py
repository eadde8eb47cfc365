"""Differentiable multiply-accumulate accounting for routed networks.

Per-node cost combines the conv block with the gated resolution changes:

    cost_i = max(G_i) * c_conv + g_up * c_up + g_keep * c_keep + g_down * c_down

and the network cost is the sum over nodes. Constants count multiplies
only: a separable 3x3 conv is H*W*C_in*(9 + C_out), a 1x1 conv is
H_out*W_out*C_in*C_out, identity and bilinear interpolation are free,
biases are excluded. Router, stem, and head costs stay out of the
network cost; the router total is reported separately for honesty.

count_executed_madds is an independent oracle: it re-walks the trellis
with plain numpy for a single sample, executing exactly the ops the drop
rule admits and counting multiplies from the actual array shapes.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import UsageError
from .supernet import NodeId, RouteRecord, Supernet, SupernetSpec, reachable_nodes, valid_directions


def sepconv3x3_madds(out_h: int, out_w: int, c_in: int, c_out: int) -> int:
    return out_h * out_w * c_in * (9 + c_out)


def conv1x1_madds(out_h: int, out_w: int, c_in: int, c_out: int) -> int:
    return out_h * out_w * c_in * c_out


def _conv_out(size: int, stride: int) -> int:
    return (size - 1) // stride + 1


@dataclass(frozen=True)
class NodeCost:
    c_conv: float
    c_up: float
    c_keep: float
    c_down: float

    @property
    def direction_vector(self) -> np.ndarray:
        return np.array([self.c_up, self.c_keep, self.c_down])

    @property
    def all_open(self) -> float:
        return self.c_conv + self.c_up + self.c_keep + self.c_down


@dataclass
class CostConstants:
    spec: SupernetSpec
    input_h: int
    input_w: int
    per_node: dict[NodeId, NodeCost]
    router_madds: float  # informational, never part of the network cost

    @property
    def total(self) -> float:
        """Cost with every gate open (the normalization constant)."""
        return float(sum(nc.all_open for nc in self.per_node.values()))


def compile_cost_table(spec: SupernetSpec, input_h: int, input_w: int) -> CostConstants:
    spec.validate()
    div = spec.min_divisor
    if input_h % div != 0 or input_w % div != 0:
        raise UsageError(
            f"input size {input_h}x{input_w} must be divisible by {div}"
        )
    per_node: dict[NodeId, NodeCost] = {}
    router_total = 0.0
    for node in reachable_nodes(spec):
        s = node.scale
        c = spec.channels_per_scale[s]
        h = input_h // (8 * 2**s)
        w = input_w // (8 * 2**s)
        valid = valid_directions(spec, node)
        c_conv = float(sepconv3x3_madds(h, w, c, c))
        c_up = 0.0
        c_down = 0.0
        if valid[0]:
            c_up = float(conv1x1_madds(h, w, c, spec.channels_per_scale[s - 1]))
        if valid[2]:
            c_down = float(
                conv1x1_madds(_conv_out(h, 2), _conv_out(w, 2), c, spec.channels_per_scale[s + 1])
            )
        per_node[node] = NodeCost(c_conv=c_conv, c_up=c_up, c_keep=0.0, c_down=c_down)
        # router: 1x1 conv on the 2x2 pooled map plus the 3-way dense layer
        router_total += conv1x1_madds(2, 2, c, c) + c * 3
    return CostConstants(
        spec=spec, input_h=input_h, input_w=input_w, per_node=per_node,
        router_madds=float(router_total),
    )


def node_cost(gates, constants: NodeCost) -> Tensor:
    """Differentiable per-node cost. gates is a (B, 3) or (3,) Tensor/array."""
    g = ad.as_tensor(gates)
    axis = g.data.ndim - 1
    conv_term = ad.mul(ad.max_over_vector(g, axis=axis), Tensor(constants.c_conv))
    dir_term = ad.sum_axis(ad.mul(g, Tensor(constants.direction_vector)), axis=axis)
    return ad.add(conv_term, dir_term)


def network_cost(route: RouteRecord | dict[NodeId, Tensor], table: CostConstants) -> Tensor:
    """Sum of node costs over every reachable node; differentiable in gates.

    Accepts a RouteRecord (uses its gate tensors in train mode, else the
    recorded continuous gates) or a plain NodeId -> gate-tensor map.
    """
    if isinstance(route, RouteRecord):
        gate_map = route.gate_tensors if route.gate_tensors is not None else route.gates
        node_ids = route.node_ids
    else:
        gate_map = route
        node_ids = list(route.keys())
    expected = set(table.per_node.keys())
    if set(node_ids) != expected:
        raise UsageError(
            f"route covers {len(node_ids)} nodes but the cost table has "
            f"{len(expected)}; spec mismatch"
        )
    total: Tensor | None = None
    for node in node_ids:
        c = node_cost(gate_map[node], table.per_node[node])
        total = c if total is None else ad.add(total, c)
    return total


def binary_route_cost(masks: dict[NodeId, np.ndarray], table: CostConstants) -> np.ndarray:
    """Per-sample cost of binarized routes, as plain float64 (B,)."""
    gate_map = {n: Tensor(m.astype(np.float64)) for n, m in masks.items()}
    return network_cost(gate_map, table).data.copy()


# ---------------------------------------------------------------------------
# instrumented oracle
# ---------------------------------------------------------------------------


class _Counter:
    def __init__(self):
        self.total = 0

    def sepconv(self, x: np.ndarray, w_dw: np.ndarray, w_pw: np.ndarray, stride: int) -> np.ndarray:
        c_in, h, wdt = x.shape
        oh = (h + 2 - 3) // stride + 1
        ow = (wdt + 2 - 3) // stride + 1
        xp = np.zeros((c_in, h + 2, wdt + 2))
        xp[:, 1 : 1 + h, 1 : 1 + wdt] = x
        t = np.zeros((c_in, oh, ow))
        for u in range(3):
            for v in range(3):
                t += w_dw[:, u, v][:, None, None] * xp[:, u : u + stride * oh : stride, v : v + stride * ow : stride]
        out = np.einsum("oc,chw->ohw", w_pw, t)
        self.total += t.size * 9  # depthwise: 9 multiplies per produced element
        self.total += out.size * c_in  # pointwise: one dot of length C_in each
        return out

    def conv1x1(self, x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
        xs = x[:, ::stride, ::stride]
        out = np.einsum("oc,chw->ohw", w, xs)
        self.total += out.size * x.shape[0]
        return out


def _upsample2x_plain(x: np.ndarray) -> np.ndarray:
    c, h, w = x.shape
    from .autodiff.ops import _upsample_axis_coeffs

    r0, r1, wr0, wr1 = _upsample_axis_coeffs(h)
    c0, c1, wc0, wc1 = _upsample_axis_coeffs(w)
    tmp = x[:, r0, :] * wr0[:, None] + x[:, r1, :] * wr1[:, None]
    return tmp[:, :, c0] * wc0 + tmp[:, :, c1] * wc1


def count_executed_madds(
    net: Supernet,
    image: np.ndarray,
    open_masks: dict[NodeId, np.ndarray],
) -> tuple[int, dict[int, np.ndarray]]:
    """Execute one sample's routed trellis and count multiplies.

    image is (C, H, W); open_masks maps NodeId to a (3,) bool vector.
    Walks the trellis independently of Supernet.forward: direction
    validity is re-derived from receiver existence, the drop rule from
    the open masks. Returns (multiply count, dict of final scale
    features) so callers can also cross-check features if they wish.
    """
    spec = net.spec
    counter = _Counter()
    p = {k: v.data for k, v in net.params.items()}

    x = image.astype(np.float64)
    for i in range(3):  # stem: not counted (outside the routable region)
        x = _sepconv_plain(x, p[f"stem.{i}.dw_w"], p[f"stem.{i}.pw_w"], p[f"stem.{i}.pw_b"], 2)

    incoming: dict[int, np.ndarray] = {0: x}
    final: dict[int, np.ndarray] = {}
    for layer in range(1, spec.num_layers + 1):
        nxt: dict[int, np.ndarray] = {}
        for scale in range(min(layer, spec.num_scales)):
            node = NodeId(layer, scale)
            h = image.shape[1] // (8 * 2**scale)
            w = image.shape[2] // (8 * 2**scale)
            feat = incoming.get(
                scale, np.zeros((spec.channels_per_scale[scale], h, w))
            )
            mask = np.asarray(open_masks[node], dtype=bool)
            if not mask.any():
                continue  # block dropped: contributes nothing downstream
            base = f"node.{layer}.{scale}"
            y = counter.sepconv(feat, p[f"{base}.conv.dw_w"], p[f"{base}.conv.pw_w"], 1)
            y += p[f"{base}.conv.pw_b"][:, None, None]
            y = np.maximum(y, 0.0)
            if mask[0] and scale - 1 >= 0 and layer < spec.num_layers:
                up = _upsample2x_plain(counter.conv1x1(y, p[f"{base}.up_w"]))
                _accumulate(nxt, scale - 1, up)
            if mask[1]:
                if layer == spec.num_layers:
                    final[scale] = y
                else:
                    _accumulate(nxt, scale, y)
            if mask[2] and scale + 1 < spec.num_scales and layer < spec.num_layers:
                down = counter.conv1x1(y, p[f"{base}.down_w"], stride=2)
                _accumulate(nxt, scale + 1, down)
        incoming = nxt
    return counter.total, final


def _accumulate(store: dict[int, np.ndarray], key: int, value: np.ndarray) -> None:
    if key in store:
        store[key] = store[key] + value
    else:
        store[key] = value


def _sepconv_plain(x, w_dw, w_pw, b_pw, stride):
    c_in, h, w = x.shape
    oh = (h + 2 - 3) // stride + 1
    ow = (w + 2 - 3) // stride + 1
    xp = np.zeros((c_in, h + 2, w + 2))
    xp[:, 1 : 1 + h, 1 : 1 + w] = x
    t = np.zeros((c_in, oh, ow))
    for u in range(3):
        for v in range(3):
            t += w_dw[:, u, v][:, None, None] * xp[:, u : u + stride * oh : stride, v : v + stride * ow : stride]
    out = np.einsum("oc,chw->ohw", w_pw, t) + b_pw[:, None, None]
    return np.maximum(out, 0.0)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


@dataclass
class CostReport:
    sample_costs: list[float]
    total_cost: float
    router_madds: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.sample_costs)) if self.sample_costs else 0.0

    @property
    def max(self) -> float:
        return float(np.max(self.sample_costs)) if self.sample_costs else 0.0

    @property
    def min(self) -> float:
        return float(np.min(self.sample_costs)) if self.sample_costs else 0.0

    @property
    def std(self) -> float:
        return float(np.std(self.sample_costs)) if self.sample_costs else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("sample_id,C_net,C_tot,ratio\n")
        for i, c in enumerate(self.sample_costs):
            buf.write(f"{i},{c!r},{self.total_cost!r},{c / self.total_cost!r}\n")
        buf.write("aggregate,mean,max,min,std\n")
        buf.write(f",{self.mean!r},{self.max!r},{self.min!r},{self.std!r}\n")
        return buf.getvalue()
