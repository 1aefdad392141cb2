"""A small reverse-mode autodiff core on numpy.

Only the operations the two model families need are provided: dense and
2-D convolution layers, ReLU / LeakyReLU, elementwise arithmetic with
broadcasting, reductions, Adam and a central-difference gradient checker.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ConfigurationError, DimensionError, FormatError, UsageError


class Tensor:
    """An array plus an optional gradient and the closure that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype})"

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``.grad`` of every reachable tensor that requires it."""
        if self._backward is None:
            raise UsageError("backward() called on a tensor not produced by a recorded computation")
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _result(data, parents, backward):
    parents = tuple(parents)
    if any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=parents, _backward=backward)
    return Tensor(data)


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T if _needs_grad(a) else None, a.data.T @ g if _needs_grad(b) else None))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), back)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# Set by grad_check: piecewise-linear ops append their branch masks here so
# stencils that straddle a kink can be recognised.
_kink_log: list | None = None


def _note_branch(mask):
    if _kink_log is not None:
        _kink_log.append(np.packbits(mask))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    _note_branch(mask)
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    neg = a.data <= 0
    _note_branch(neg)
    out = a.data.copy()
    out[neg] *= slope

    def back(g):
        g = g.copy()
        g[neg] *= slope
        return (g,)

    return _result(out, (a,), back)


def hinge(a: Tensor) -> Tensor:
    """Elementwise max(0, a)."""
    return relu(a)


def dense_forward(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"dense: input {x.shape} vs weight {weight.shape}")
    y = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"dense: bias {bias.shape} vs {weight.shape[1]} outputs")
        y = add(y, bias)
    return y


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    """floor((size + 2*pad - k) / stride) + 1; trailing rows that do not fit a stride are dropped."""
    span = size + 2 * pad - k
    if span < 0 or stride < 1:
        raise ConfigurationError(
            f"conv output size for input {size}, kernel {k}, stride {stride}, pad {pad} is not positive"
        )
    return span // stride + 1


def conv2d_forward(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Bias-free cross-correlation with zero padding via im2col.

    x: [B, C, H, W]; kernel: [C', C, k, k] -> [B, C', H', W'].
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
    B, C, H, W = x.shape
    O, _, k, k2 = kernel.shape
    if k != k2:
        raise DimensionError("conv2d: only square kernels are supported")
    Ho = conv_output_size(H, k, stride, pad)
    Wo = conv_output_size(W, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    # [B, Ho, Wo, C, k, k] -> rows of C*k*k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    kmat = kernel.data.reshape(O, C * k * k)
    out = (cols @ kmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def back(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gk = (gmat.T @ cols).reshape(kernel.shape)
        gx = None
        if _needs_grad(x):
            gcols = (gmat @ kmat).reshape(B, Ho, Wo, C, k, k).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[..., i, j]
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        return gx, gk

    return _result(np.ascontiguousarray(out), (x, kernel), back)


# -- parameters and layouts ---------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" | "conv2d"
    in_size: int  # features (dense) or channels (conv2d)
    out_size: int
    bias: bool = False
    activation: str = "linear"  # "linear" | "relu" | "leaky_relu"
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    slope: float = 0.2

    def weight_shape(self):
        if self.kind == "dense":
            return (self.in_size, self.out_size)
        return (self.out_size, self.in_size, self.kernel, self.kernel)

    def fans(self):
        if self.kind == "dense":
            return self.in_size, self.out_size
        area = self.kernel * self.kernel
        return self.in_size * area, self.out_size * area


LAYOUT_VERSION = 1
INIT_SCHEME = "glorot_uniform"


class NetworkParams:
    """Ordered named weight tensors plus the layer layout they realize."""

    def __init__(self, layers, tensors=None):
        self.layers = list(layers)
        self.tensors: "OrderedDict[str, Tensor]" = OrderedDict(tensors or ())

    @classmethod
    def initialize(cls, layers, seed: int, dtype=np.float32) -> "NetworkParams":
        rng = np.random.default_rng(seed)
        params = cls(layers)
        for i, spec in enumerate(params.layers):
            fan_in, fan_out = spec.fans()
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=spec.weight_shape()).astype(dtype)
            params.tensors[f"layer{i}.weight"] = Tensor(w, requires_grad=True, name=f"layer{i}.weight")
            if spec.bias:
                b = np.zeros(spec.out_size, dtype=dtype)
                params.tensors[f"layer{i}.bias"] = Tensor(b, requires_grad=True, name=f"layer{i}.bias")
        return params

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def names(self):
        return list(self.tensors)

    def bias_names(self):
        return [n for n in self.tensors if n.endswith(".bias")]

    def total_parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def layer_parameter_counts(self) -> list[int]:
        counts = []
        for i, _ in enumerate(self.layers):
            n = self.tensors[f"layer{i}.weight"].size
            if f"layer{i}.bias" in self.tensors:
                n += self.tensors[f"layer{i}.bias"].size
            counts.append(n)
        return counts

    def astype(self, dtype) -> "NetworkParams":
        out = NetworkParams(self.layers)
        for name, t in self.tensors.items():
            out.tensors[name] = Tensor(t.data.astype(dtype), requires_grad=True, name=name)
        return out

    def copy(self) -> "NetworkParams":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def frobenius_sq(self) -> Tensor:
        """Sum of squares of every parameter, as a differentiable scalar."""
        total = None
        for t in self.tensors.values():
            s = tsum(square(t))
            total = s if total is None else add(total, s)
        return total

    def layout_descriptor(self) -> str:
        return json.dumps(
            {"version": LAYOUT_VERSION, "layers": [asdict(layer) for layer in self.layers]},
            sort_keys=True,
        )

    @staticmethod
    def layers_from_descriptor(text: str) -> list[LayerSpec]:
        d = json.loads(text)
        if d.get("version") != LAYOUT_VERSION:
            raise FormatError(f"unsupported layout version {d.get('version')}")
        return [LayerSpec(**layer) for layer in d["layers"]]


def _activate(y: Tensor, spec: LayerSpec) -> Tensor:
    if spec.activation == "relu":
        return relu(y)
    if spec.activation == "leaky_relu":
        return leaky_relu(y, spec.slope)
    if spec.activation == "linear":
        return y
    raise ConfigurationError(f"unknown activation {spec.activation!r}")


def forward(params: NetworkParams, x) -> Tensor:
    """Run the layer stack; conv outputs are flattened before the first dense layer."""
    h = _as_tensor(x, next(iter(params.tensors.values())))
    for i, spec in enumerate(params.layers):
        w = params.tensors[f"layer{i}.weight"]
        b = params.tensors.get(f"layer{i}.bias")
        if spec.kind == "conv2d":
            if b is not None:
                raise ConfigurationError("conv2d layers never carry a bias")
            h = conv2d_forward(h, w, spec.stride, spec.pad)
        elif spec.kind == "dense":
            if h.data.ndim > 2:
                h = reshape(h, (h.shape[0], -1))
            h = dense_forward(h, w, b)
        else:
            raise ConfigurationError(f"unknown layer kind {spec.kind!r}")
        h = _activate(h, spec)
    return h


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: NetworkParams, state: AdamState) -> None:
    """One bias-corrected Adam update in place; gradients are cleared afterwards."""
    missing = [n for n, t in params if t.grad is None]
    if missing:
        raise UsageError(f"adam_step: no gradient for {missing}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in params:
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
        p.grad = None


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict  # name -> max relative error
    tolerance: float
    checked: int = 0
    skipped: int = 0  # entries whose stencil crossed an activation kink

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _branches(loss_fn):
    """Evaluate ``loss_fn`` while recording the branch taken by every piecewise op."""
    global _kink_log
    _kink_log = []
    try:
        value = loss_fn().item()
        return value, _kink_log
    finally:
        _kink_log = None


def _same_branches(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(loss_fn, tensors, tolerance: float = 1e-5, h: float = 1e-5,
               max_entries: int | None = None, rng=None, grad_hook=None,
               denom_floor: float = 1e-12) -> GradCheckReport:
    """Compare analytic gradients against central differences in float64.

    ``loss_fn()`` must rebuild the scalar loss from the current values of
    ``tensors`` (a mapping name -> Tensor or a NetworkParams). At most
    ``max_entries`` randomly chosen elements per tensor are perturbed.
    Entries whose +h / -h evaluations take different ReLU / LeakyReLU
    branches are skipped (the difference quotient is meaningless across a
    kink) and counted in ``skipped``.
    ``grad_hook(name, grad)`` may alter analytic gradients (fault injection).
    """
    items = list(tensors) if isinstance(tensors, NetworkParams) else list(tensors.items())
    for name, t in items:
        if t.dtype != np.float64:
            raise UsageError(f"grad_check needs float64 tensors; {name} is {t.dtype}")
        t.grad = None
    loss = loss_fn()
    loss.backward()
    rng = rng or np.random.default_rng(0)
    errors, checked, skipped = {}, 0, 0
    for name, t in items:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        if grad_hook is not None:
            analytic = grad_hook(name, analytic)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up, up_br = _branches(loss_fn)
            flat[i] = orig - h
            down, down_br = _branches(loss_fn)
            flat[i] = orig
            if not _same_branches(up_br, down_br):
                skipped += 1
                continue
            checked += 1
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            # denominator floor: entries that are ~0 in both are compared absolutely
            err = abs(a - numeric) / max(denom_floor, abs(a) + abs(numeric))
            worst = max(worst, err)
        errors[name] = worst
        t.grad = None
    return GradCheckReport(errors, tolerance, checked, skipped)


# -- checkpoint container -----------------------------------------------------

CKPT_MAGIC = b"AADC"
CKPT_VERSION = 1


def save_checkpoint(path, params: NetworkParams, metadata: dict) -> None:
    """Binary container: magic, version, JSON header (layout + tensor table + metadata), float32 payload."""
    table = []
    payload = io.BytesIO()
    for name, t in params:
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": payload.tell()})
        payload.write(arr.tobytes())
    header = json.dumps(
        {"layout": params.layout_descriptor(), "tensors": table, "metadata": metadata},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload.getvalue())


def load_checkpoint(path) -> tuple[NetworkParams, dict]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 10 or buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(buf[10 : 10 + hlen])
    base = 10 + hlen
    params = NetworkParams(NetworkParams.layers_from_descriptor(header["layout"]))
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=base + entry["offset"]).reshape(shape)
        params.tensors[entry["name"]] = Tensor(arr.astype(np.float32), requires_grad=True, name=entry["name"])
    return params, header["metadata"]


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]
