"""Reverse-mode differentiation over a fixed primitive set.

A ``Graph`` is a define-by-run tape: applying a primitive computes its value
immediately and appends a node, so the tape order is a topological order by
construction. ``backward`` sweeps the tape in reverse. Values are float32;
``grad_check`` re-executes the tape functionally in float64 to compare
analytic gradients against central finite differences.

Primitives that make non-smooth choices (relu, max-pool, max over score
maps) record their decision pattern each forward pass; the gradient checker
skips sample points whose pattern flips under perturbation, since the
subgradient there is a convention rather than a derivative.

Thread safety: a Graph is single-writer (never run forward/backward on one
graph concurrently); distinct graphs are independent.
"""

import numpy as np

from .errors import GraphError

COSINE_EPS = 1e-8


class Node:
    """One tape entry: an input tensor or the output of a primitive."""

    __slots__ = ("graph", "idx", "op", "input_ids", "attrs", "value", "grad",
                 "decision", "name", "is_param")

    def __init__(self, graph, idx, op, input_ids, attrs, value, name, is_param):
        self.graph = graph
        self.idx = idx
        self.op = op
        self.input_ids = input_ids
        self.attrs = attrs
        self.value = value
        self.grad = None
        self.decision = None
        self.name = name
        self.is_param = is_param

    def __repr__(self):
        return f"Node({self.idx}, {self.op or 'input'}, name={self.name!r})"


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self._fresh = True

    def input(self, value, name=None, param=False) -> Node:
        value = np.asarray(value, dtype=np.float32)
        node = Node(self, len(self.nodes), None, (), {}, value, name, param)
        self.nodes.append(node)
        return node

    def apply(self, op: str, inputs: list[Node], attrs: dict, name=None) -> Node:
        if not self._fresh:
            raise GraphError("graph is stale after set_value; run forward() first")
        for inp in inputs:
            if inp.graph is not self:
                raise GraphError(f"input {inp!r} belongs to a different graph")
        idx = len(self.nodes)
        fwd = _OPS[op].forward
        try:
            value, decision = fwd([inp.value for inp in inputs], attrs)
        except GraphError as exc:
            raise GraphError(f"node {idx} ({op}, name={name!r}): {exc}") from None
        node = Node(self, idx, op, tuple(inp.idx for inp in inputs), attrs,
                    value, name, False)
        node.decision = decision
        self.nodes.append(node)
        return node

    def set_value(self, node: Node, value) -> None:
        """Replace an input node's tensor; invalidates downstream values."""
        if node.op is not None:
            raise GraphError("set_value is only valid on input nodes")
        value = np.asarray(value, dtype=np.float32)
        if value.shape != node.value.shape:
            raise GraphError(
                f"set_value shape {value.shape} != existing {node.value.shape}")
        node.value = value
        self._fresh = False

    def forward(self) -> np.ndarray:
        """Re-execute the tape in order and return the final node's value."""
        if not self.nodes:
            raise GraphError("empty graph")
        for node in self.nodes:
            if node.op is None:
                continue
            values = [self.nodes[i].value for i in node.input_ids]
            try:
                node.value, node.decision = _OPS[node.op].forward(values, node.attrs)
            except GraphError as exc:
                raise GraphError(
                    f"node {node.idx} ({node.op}, name={node.name!r}): {exc}"
                ) from None
        self._fresh = True
        return self.nodes[-1].value

    def backward(self) -> None:
        """Populate every node's gradient w.r.t. the final scalar node."""
        if not self.nodes:
            raise GraphError("empty graph")
        if not self._fresh:
            raise GraphError("backward before forward: values are stale")
        final = self.nodes[-1]
        if final.value.ndim != 0:
            raise GraphError(
                f"backward requires a scalar final node, got shape {final.value.shape}")
        for node in self.nodes:
            node.grad = np.zeros_like(node.value)
        final.grad = np.ones_like(final.value)
        for node in reversed(self.nodes):
            if node.op is None or not np.any(node.grad):
                continue
            values = [self.nodes[i].value for i in node.input_ids]
            grads = _OPS[node.op].backward(node.grad, values, node.value,
                                           node.decision, node.attrs)
            for i, g in zip(node.input_ids, grads):
                if g is not None:
                    self.nodes[i].grad += g

    def parameters(self) -> list[Node]:
        return [n for n in self.nodes if n.is_param]

    def _evaluate(self, dtype, overrides):
        """Functional re-execution: returns (final value, decision list).

        Does not touch stored node state. ``overrides`` maps input-node index
        to a replacement array (already in ``dtype``).
        """
        values = [None] * len(self.nodes)
        decisions = []
        for node in self.nodes:
            if node.op is None:
                v = overrides.get(node.idx)
                values[node.idx] = node.value.astype(dtype) if v is None else v
                continue
            v, d = _OPS[node.op].forward(
                [values[i] for i in node.input_ids], node.attrs)
            values[node.idx] = v
            if d is not None:
                decisions.append(d)
        return values[-1], decisions


def grad_check(graph: Graph, params=None, n_samples: int = 32,
               step: float = 1e-3, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples individual parameter entries (deterministically from ``seed``),
    perturbs each by +/-``step`` in a float64 re-execution, and skips entries
    whose decision pattern (relu sign, pool/max argmax) differs between the
    base point and either perturbed point. Returns 0.0 if every sample was
    excluded.
    """
    if step <= 0:
        raise GraphError("step must be positive")
    loss = graph.forward()
    if loss.ndim != 0:
        raise GraphError("grad_check requires a scalar loss node")
    graph.backward()
    if params is None:
        params = graph.parameters()
    candidates = [(node, i) for node in params for i in range(node.value.size)]
    if not candidates:
        raise GraphError("no parameters to check")
    rng = np.random.default_rng(seed)
    if len(candidates) > n_samples:
        picks = rng.choice(len(candidates), size=n_samples, replace=False)
        candidates = [candidates[i] for i in sorted(picks)]

    _, base_dec = graph._evaluate(np.float64, {})
    max_rel = 0.0
    for node, flat in candidates:
        base = node.value.astype(np.float64)
        plus = base.copy()
        plus.flat[flat] += step
        minus = base.copy()
        minus.flat[flat] -= step
        loss_p, dec_p = graph._evaluate(np.float64, {node.idx: plus})
        loss_m, dec_m = graph._evaluate(np.float64, {node.idx: minus})
        if not (_decisions_equal(base_dec, dec_p)
                and _decisions_equal(base_dec, dec_m)):
            continue
        numeric = (float(loss_p) - float(loss_m)) / (2.0 * step)
        analytic = float(node.grad.flat[flat])
        denom = max(abs(analytic), abs(numeric), 1e-8)
        max_rel = max(max_rel, abs(analytic - numeric) / denom)
    return max_rel


def _decisions_equal(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


# --------------------------------------------------------------------------
# Primitive implementations. forward(values, attrs) -> (value, decision);
# backward(grad, values, value, decision, attrs) -> per-input gradients.
# All kernels follow the input dtype so the same code serves the float32
# training path and the float64 finite-difference oracle.
# --------------------------------------------------------------------------

class _Op:
    def __init__(self, forward, backward):
        self.forward = forward
        self.backward = backward


def _require(cond, msg):
    if not cond:
        raise GraphError(msg)


def _conv2d_fwd(values, attrs):
    x, w = values
    pad = attrs["pad"]
    _require(x.ndim == 3 and w.ndim == 4, "conv2d wants (C,H,W) input, (O,C,kh,kw) weight")
    cout, cin, kh, kw = w.shape
    _require(x.shape[0] == cin, f"conv2d channels {x.shape[0]} != weight {cin}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = xp.shape[1] - kh + 1
    wo = xp.shape[2] - kw + 1
    _require(ho >= 1 and wo >= 1, "conv2d output would be empty")
    out = np.zeros((cout, ho, wo), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            out += np.tensordot(w[:, :, dy, dx], xp[:, dy:dy + ho, dx:dx + wo],
                                axes=(1, 0))
    return out, None


def _conv2d_bwd(grad, values, value, decision, attrs):
    x, w = values
    pad = attrs["pad"]
    cout, cin, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    _, ho, wo = grad.shape
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    gflat = grad.reshape(cout, -1)
    for dy in range(kh):
        for dx in range(kw):
            window = xp[:, dy:dy + ho, dx:dx + wo]
            dxp[:, dy:dy + ho, dx:dx + wo] += np.tensordot(
                w[:, :, dy, dx], grad, axes=(0, 0))
            dw[:, :, dy, dx] = gflat @ window.reshape(cin, -1).T
    dx = dxp[:, pad:pad + x.shape[1], pad:pad + x.shape[2]] if pad else dxp
    return dx, dw


def _bias_add_fwd(values, attrs):
    x, b = values
    _require(x.ndim == 3 and b.ndim == 1 and b.shape[0] == x.shape[0],
             f"bias_add shapes {x.shape} vs {b.shape}")
    return x + b[:, None, None], None


def _bias_add_bwd(grad, values, value, decision, attrs):
    return grad, grad.sum(axis=(1, 2))


def _relu_fwd(values, attrs):
    (x,) = values
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), mask


def _relu_bwd(grad, values, value, decision, attrs):
    return (grad * decision,)


def _maxpool2_fwd(values, attrs):
    (x,) = values
    _require(x.ndim == 3, "maxpool2 wants (C,H,W)")
    c, h, w = x.shape
    _require(h % 2 == 0 and w % 2 == 0, f"maxpool2 needs even dims, got {h}x{w}")
    cells = (x.reshape(c, h // 2, 2, w // 2, 2)
              .transpose(0, 1, 3, 2, 4)
              .reshape(c, h // 2, w // 2, 4))
    dec = cells.argmax(axis=-1)
    out = np.take_along_axis(cells, dec[..., None], axis=-1)[..., 0]
    return out, dec


def _maxpool2_bwd(grad, values, value, decision, attrs):
    (x,) = values
    c, h, w = x.shape
    g4 = np.zeros((c, h // 2, w // 2, 4), dtype=grad.dtype)
    np.put_along_axis(g4, decision[..., None], grad[..., None], axis=-1)
    dx = (g4.reshape(c, h // 2, w // 2, 2, 2)
             .transpose(0, 1, 3, 2, 4)
             .reshape(c, h, w))
    return (dx,)


def _window(attrs):
    x0, y0, bw, bh = attrs["box"]
    return slice(y0, y0 + bh), slice(x0, x0 + bw)


def _masked_mean_fwd(values, attrs):
    (x,) = values
    weights = attrs["weights"]
    _require(x.ndim == 3, "masked_window_mean wants (C,H,W)")
    _require(weights.shape == x.shape[1:],
             f"weights {weights.shape} != spatial {x.shape[1:]}")
    ys, xs = _window(attrs)
    wbox = weights[ys, xs]
    wsum = wbox.sum(dtype=x.dtype)
    _require(wsum > 0, "masked_window_mean over an all-zero window")
    vec = (x[:, ys, xs] * wbox).sum(axis=(1, 2)) / wsum
    return vec, None


def _masked_mean_bwd(grad, values, value, decision, attrs):
    (x,) = values
    weights = attrs["weights"]
    ys, xs = _window(attrs)
    wbox = weights[ys, xs].astype(grad.dtype)
    wsum = wbox.sum(dtype=grad.dtype)
    dx = np.zeros_like(x)
    dx[:, ys, xs] = grad[:, None, None] * (wbox / wsum)
    return (dx,)


def _cosine_map_fwd(values, attrs):
    field, vec = values
    _require(field.ndim == 3 and vec.ndim == 1, "cosine_map wants (C,H,W) and (C,)")
    _require(field.shape[0] == vec.shape[0],
             f"cosine_map depth {field.shape[0]} != vector {vec.shape[0]}")
    box = attrs.get("box")
    if box is not None:
        ys, xs = _window(attrs)
        field = field[:, ys, xs]
    dot = (field * vec[:, None, None]).sum(axis=0)
    fnorm = np.sqrt((field * field).sum(axis=0))
    vnorm = np.sqrt((vec * vec).sum())
    return dot / (fnorm * vnorm + COSINE_EPS), None


def _cosine_map_bwd(grad, values, value, decision, attrs):
    field_full, vec = values
    box = attrs.get("box")
    if box is not None:
        ys, xs = _window(attrs)
        field = field_full[:, ys, xs]
    else:
        field = field_full
    dot = (field * vec[:, None, None]).sum(axis=0)
    fnorm = np.sqrt((field * field).sum(axis=0))
    vnorm = np.sqrt((vec * vec).sum())
    denom = fnorm * vnorm + grad.dtype.type(COSINE_EPS)
    inv_d = 1.0 / denom
    # d cos/d field = p/D - dot * |p| * f_hat / D^2 ; unit vectors guarded at 0
    f_hat = field / np.maximum(fnorm, 1e-12)
    v_hat = vec / max(float(vnorm), 1e-12)
    g = grad * inv_d
    dfield = g * vec[:, None, None] - (grad * dot * inv_d * inv_d * vnorm) * f_hat
    dvec = ((g * field).sum(axis=(1, 2))
            - float((grad * dot * inv_d * inv_d * fnorm).sum()) * v_hat)
    if box is not None:
        full = np.zeros_like(field_full)
        full[:, ys, xs] = dfield
        dfield = full
    return dfield, dvec.astype(vec.dtype)


def _masked_max_fwd(values, attrs):
    boxes = attrs["boxes"]
    h, w = attrs["out_shape"]
    _require(len(values) == len(boxes), "masked_max inputs/boxes length mismatch")
    dtype = values[0].dtype if values else np.float32
    out = np.full((h, w), -np.inf, dtype=dtype)
    winner = np.full((h, w), -1, dtype=np.int32)
    for i, (m, (x0, y0, bw, bh)) in enumerate(zip(values, boxes)):
        _require(m.shape == (bh, bw),
                 f"masked_max input {i} shape {m.shape} != box ({bh}, {bw})")
        ys, xs = slice(y0, y0 + bh), slice(x0, x0 + bw)
        better = m > out[ys, xs]
        np.copyto(out[ys, xs], m, where=better)
        np.copyto(winner[ys, xs], i, where=better)
    out[winner < 0] = attrs["absent"]
    return out, winner


def _masked_max_bwd(grad, values, value, decision, attrs):
    grads = []
    for i, (x0, y0, bw, bh) in enumerate(attrs["boxes"]):
        ys, xs = slice(y0, y0 + bh), slice(x0, x0 + bw)
        grads.append(grad[ys, xs] * (decision[ys, xs] == i))
    return grads


def _add_fwd(values, attrs):
    a, b = values
    _require(a.shape == b.shape, f"add shapes {a.shape} != {b.shape}")
    return a + b, None


def _add_bwd(grad, values, value, decision, attrs):
    return grad, grad


def _mul_fwd(values, attrs):
    a, b = values
    _require(a.shape == b.shape, f"mul shapes {a.shape} != {b.shape}")
    return a * b, None


def _mul_bwd(grad, values, value, decision, attrs):
    a, b = values
    return grad * b, grad * a


def _sumall_fwd(values, attrs):
    (x,) = values
    return x.sum(dtype=x.dtype), None


def _sumall_bwd(grad, values, value, decision, attrs):
    (x,) = values
    return (np.full_like(x, grad),)


def _scale_fwd(values, attrs):
    (x,) = values
    return x * x.dtype.type(attrs["factor"]), None


def _scale_bwd(grad, values, value, decision, attrs):
    return (grad * grad.dtype.type(attrs["factor"]),)


def _stack_maps_fwd(values, attrs):
    shape = values[0].shape
    _require(all(v.shape == shape for v in values),
             "stack_maps inputs must share a shape")
    return np.stack(values, axis=0), None


def _stack_maps_bwd(grad, values, value, decision, attrs):
    return [grad[i] for i in range(len(values))]


def _softmax_xent_fwd(values, attrs):
    (scores,) = values
    targets = attrs["targets"]
    _require(scores.ndim == 3, "softmax_xent wants (K,H,W) scores")
    _require(targets.shape == scores.shape,
             f"targets {targets.shape} != scores {scores.shape}")
    zmax = scores.max(axis=0)
    lse = zmax + np.log(np.exp(scores - zmax).sum(axis=0))
    px_loss = lse - (targets * scores).sum(axis=0)
    return px_loss.mean(dtype=scores.dtype), None


def _softmax_xent_bwd(grad, values, value, decision, attrs):
    (scores,) = values
    targets = attrs["targets"]
    zmax = scores.max(axis=0)
    e = np.exp(scores - zmax)
    p = e / e.sum(axis=0)
    n_px = scores.shape[1] * scores.shape[2]
    return ((p - targets) * (grad / grad.dtype.type(n_px)),)


_OPS = {
    "conv2d": _Op(_conv2d_fwd, _conv2d_bwd),
    "bias_add": _Op(_bias_add_fwd, _bias_add_bwd),
    "relu": _Op(_relu_fwd, _relu_bwd),
    "maxpool2": _Op(_maxpool2_fwd, _maxpool2_bwd),
    "masked_window_mean": _Op(_masked_mean_fwd, _masked_mean_bwd),
    "cosine_map": _Op(_cosine_map_fwd, _cosine_map_bwd),
    "masked_max": _Op(_masked_max_fwd, _masked_max_bwd),
    "add": _Op(_add_fwd, _add_bwd),
    "mul": _Op(_mul_fwd, _mul_bwd),
    "sumall": _Op(_sumall_fwd, _sumall_bwd),
    "scale": _Op(_scale_fwd, _scale_bwd),
    "stack_maps": _Op(_stack_maps_fwd, _stack_maps_bwd),
    "softmax_xent": _Op(_softmax_xent_fwd, _softmax_xent_bwd),
}


# --------------------------------------------------------------------------
# Functional wrappers: pass Nodes to record onto their graph, plain arrays
# to compute eagerly. Mixing the two in one call is an error.
# --------------------------------------------------------------------------

def _dispatch(op, inputs, attrs, name=None):
    node_like = [isinstance(x, Node) for x in inputs]
    if any(node_like):
        if not all(node_like):
            raise GraphError(f"{op}: mixed Node and array inputs")
        return inputs[0].graph.apply(op, list(inputs), attrs, name=name)
    value, _ = _OPS[op].forward([np.asarray(x) for x in inputs], attrs)
    return value


def conv2d(x, weight, pad: int = 0, name=None):
    return _dispatch("conv2d", [x, weight], {"pad": int(pad)}, name)


def bias_add(x, bias, name=None):
    return _dispatch("bias_add", [x, bias], {}, name)


def relu(x, name=None):
    return _dispatch("relu", [x], {}, name)


def maxpool2(x, name=None):
    return _dispatch("maxpool2", [x], {}, name)


def masked_window_mean(x, weights, box, name=None):
    attrs = {"weights": np.asarray(weights, dtype=np.float32),
             "box": tuple(int(v) for v in box)}
    return _dispatch("masked_window_mean", [x], attrs, name)


def cosine_map(field, vec, box=None, name=None):
    attrs = {"box": tuple(int(v) for v in box) if box is not None else None}
    return _dispatch("cosine_map", [field, vec], attrs, name)


def masked_max(maps, boxes, out_shape, absent: float, name=None):
    attrs = {"boxes": [tuple(int(v) for v in b) for b in boxes],
             "out_shape": (int(out_shape[0]), int(out_shape[1])),
             "absent": float(absent)}
    if maps:
        return _dispatch("masked_max", list(maps), attrs, name)
    # No covering prototypes at all: a constant map of the absent score.
    return np.full(attrs["out_shape"], absent, dtype=np.float32)


def add(a, b, name=None):
    return _dispatch("add", [a, b], {}, name)


def mul(a, b, name=None):
    return _dispatch("mul", [a, b], {}, name)


def sumall(x, name=None):
    return _dispatch("sumall", [x], {}, name)


def scale(x, factor: float, name=None):
    return _dispatch("scale", [x], {"factor": float(factor)}, name)


def stack_maps(maps, name=None):
    return _dispatch("stack_maps", list(maps), {}, name)


def softmax_xent(scores, targets, name=None):
    return _dispatch("softmax_xent", [scores],
                     {"targets": np.asarray(targets, dtype=np.float32)}, name)
