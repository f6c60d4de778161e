"""Depthwise-separable 3D residual classifier with hand-written backward.

Layout of the model (three blocks, each halving the spatial side)::

    x -> [dsconv(stride 2) -> PReLU -> dsconv -> PReLU] + shortcut -> ... -> flatten -> linear

``dsconv`` is a per-channel KxKxK convolution followed by a 1x1x1 pointwise
convolution, and the shortcut is a stride-2 pointwise convolution.

Parameters live in a plain ``dict`` mapping stable names to arrays.  Forward
passes return a :class:`Trace` that holds every activation needed by
:func:`backward`.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DEFAULT_DTYPE, InvalidShapeError, named_rng

Params = dict[str, np.ndarray]


class InvalidStateError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    side: int = 32
    in_channels: int = 1
    channels: tuple[int, int, int] = (8, 16, 32)
    kernel: int = 3
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != 3:
            raise InvalidShapeError("exactly three residual blocks are supported")
        if self.side < 8 or self.side % 8:
            raise InvalidShapeError(f"input side must be a positive multiple of 8, got {self.side}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidShapeError(f"kernel size must be odd, got {self.kernel}")
        if min(self.channels) < 1 or self.in_channels < 1 or self.n_classes < 2:
            raise InvalidShapeError("channel and class counts must be positive")

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def flatten_dim(self) -> int:
        return self.channels[-1] * (self.side // 8) ** 3

    def block_channels(self):
        cin = self.in_channels
        for cout in self.channels:
            yield cin, cout
            cin = cout

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# parameter layout


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    k = spec.kernel
    shapes: dict[str, tuple[int, ...]] = {}
    for i, (cin, cout) in enumerate(spec.block_channels(), start=1):
        p = f"block{i}"
        shapes[f"{p}.conv1.dw.weight"] = (cin, 1, k, k, k)
        shapes[f"{p}.conv1.dw.bias"] = (cin,)
        shapes[f"{p}.conv1.pw.weight"] = (cout, cin, 1, 1, 1)
        shapes[f"{p}.conv1.pw.bias"] = (cout,)
        shapes[f"{p}.act1.slope"] = (1,)
        shapes[f"{p}.conv2.dw.weight"] = (cout, 1, k, k, k)
        shapes[f"{p}.conv2.dw.bias"] = (cout,)
        shapes[f"{p}.conv2.pw.weight"] = (cout, cout, 1, 1, 1)
        shapes[f"{p}.conv2.pw.bias"] = (cout,)
        shapes[f"{p}.act2.slope"] = (1,)
        shapes[f"{p}.shortcut.weight"] = (cout, cin, 1, 1, 1)
        shapes[f"{p}.shortcut.bias"] = (cout,)
    shapes["head.weight"] = (spec.n_classes, spec.flatten_dim)
    shapes["head.bias"] = (spec.n_classes,)
    return shapes


def dsconv_weight_count(c: int, k: int, o: int) -> int:
    """Weights of one depthwise-separable layer: C*K^3 + C*O."""
    return c * k**3 + c * o


def full_conv_weight_count(c: int, k: int, o: int) -> int:
    return c * o * k**3


def param_count(spec: ModelSpec, weights_only: bool = True) -> int:
    """Closed-form parameter count of the whole model.

    With ``weights_only`` (the default) biases and PReLU slopes are excluded,
    matching the usual convention for convolution weight budgets.
    """
    k = spec.kernel
    total = 0
    for cin, cout in spec.block_channels():
        total += dsconv_weight_count(cin, k, cout)
        total += dsconv_weight_count(cout, k, cout)
        total += cin * cout  # shortcut
        if not weights_only:
            total += cin + cout + cout + cout + cout  # dw/pw biases of both convs, shortcut bias
            total += 2  # PReLU slopes
    total += spec.n_classes * spec.flatten_dim
    if not weights_only:
        total += spec.n_classes
    return total


def init_params(spec: ModelSpec, seed: int, dtype=DEFAULT_DTYPE) -> Params:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, PReLU slopes 0.25.

    Each parameter draws from its own ``init`` stream, so adding a layer never
    shifts the values of the others.
    """
    params: Params = {}
    for index, (name, shape) in enumerate(param_shapes(spec).items()):
        if name.endswith(".slope"):
            params[name] = np.full(shape, 0.25, dtype=dtype)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            gen = named_rng(seed, "init", index).generator()
            params[name] = gen.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def cast_params(params: Params, dtype) -> Params:
    return {name: np.asarray(value, dtype=dtype).copy() for name, value in params.items()}


def check_params(spec: ModelSpec, params: Params) -> None:
    shapes = param_shapes(spec)
    if list(params) != list(shapes):
        missing = set(shapes) ^ set(params)
        raise InvalidShapeError(f"parameter names do not match spec: {sorted(missing) or 'order differs'}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise InvalidShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")


# ---------------------------------------------------------------------------
# kernels


def _out_side(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def depthwise_conv3d(x, w, b, stride=1, padding=0):
    """Per-channel 3D convolution. x [B,C,D,H,W], w [C,1,K,K,K], b [C]."""
    bsz, c, d, h, wd = x.shape
    k = w.shape[-1]
    if w.shape != (c, 1, k, k, k):
        raise InvalidShapeError(f"depthwise weight {w.shape} does not fit {c} channels")
    od, oh, ow = (_out_side(n, k, stride, padding) for n in (d, h, wd))
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3) if padding else x
    out = np.zeros((bsz, c, od, oh, ow), dtype=x.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                window = xp[:, :,
                            kd:kd + stride * (od - 1) + 1:stride,
                            kh:kh + stride * (oh - 1) + 1:stride,
                            kw:kw + stride * (ow - 1) + 1:stride]
                out += w[:, 0, kd, kh, kw].reshape(1, c, 1, 1, 1) * window
    if b is not None:
        out += b.reshape(1, c, 1, 1, 1)
    return out


def depthwise_conv3d_backward(x, w, gout, stride=1, padding=0):
    """Returns (dx, dw, db) for :func:`depthwise_conv3d`."""
    bsz, c, od, oh, ow = gout.shape
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((padding, padding),) * 3) if padding else x
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                sl = (slice(None), slice(None),
                      slice(kd, kd + stride * (od - 1) + 1, stride),
                      slice(kh, kh + stride * (oh - 1) + 1, stride),
                      slice(kw, kw + stride * (ow - 1) + 1, stride))
                dw[:, 0, kd, kh, kw] = np.sum(gout * xp[sl], axis=(0, 2, 3, 4))
                dxp[sl] += w[:, 0, kd, kh, kw].reshape(1, c, 1, 1, 1) * gout
    if padding:
        p = padding
        dx = dxp[:, :, p:-p, p:-p, p:-p]
    else:
        dx = dxp
    db = np.sum(gout, axis=(0, 2, 3, 4))
    return np.ascontiguousarray(dx), dw, db


def pointwise_conv3d(x, w, b):
    """1x1x1 convolution mixing channels. x [B,C,...], w [O,C,1,1,1], b [O]."""
    o, c = w.shape[:2]
    if x.shape[1] != c:
        raise InvalidShapeError(f"pointwise weight expects {c} channels, got {x.shape[1]}")
    out = np.zeros((x.shape[0], o) + x.shape[2:], dtype=x.dtype)
    for ci in range(c):
        out += w[:, ci, 0, 0, 0].reshape(1, o, 1, 1, 1) * x[:, ci:ci + 1]
    if b is not None:
        out += b.reshape(1, o, 1, 1, 1)
    return out


def pointwise_conv3d_backward(x, w, gout):
    o, c = w.shape[:2]
    dw = np.tensordot(gout, x, axes=([0, 2, 3, 4], [0, 2, 3, 4])).reshape(o, c, 1, 1, 1)
    dx = np.moveaxis(np.tensordot(gout, w[:, :, 0, 0, 0], axes=([1], [0])), -1, 1)
    db = np.sum(gout, axis=(0, 2, 3, 4))
    return np.ascontiguousarray(dx), dw.astype(w.dtype), db


def prelu(x, slope):
    return np.where(x >= 0, x, slope * x)


def prelu_backward(x, slope, gout):
    neg = x < 0
    dx = np.where(neg, slope * gout, gout)
    dslope = np.array([np.sum(np.where(neg, x * gout, 0))], dtype=x.dtype)
    return dx, dslope


def linear(f, w, b):
    return f @ w.T + b


def linear_backward(f, w, gout):
    return gout @ w, gout.T @ f, np.sum(gout, axis=0)


# ---------------------------------------------------------------------------
# model


@dataclass
class Trace:
    spec: ModelSpec
    params_id: int
    input_shape: tuple[int, ...]
    blocks: list[dict[str, np.ndarray]] = field(default_factory=list)
    features: np.ndarray | None = None
    head: tuple[np.ndarray, np.ndarray] | None = None


def _check_batch(spec: ModelSpec, batch: np.ndarray) -> None:
    s = spec.side
    expected = (spec.in_channels, s, s, s)
    if batch.ndim != 5 or batch.shape[1:] != expected:
        raise InvalidShapeError(f"expected batch [B,{spec.in_channels},{s},{s},{s}], got {batch.shape}")


def trunk_forward(spec: ModelSpec, params: Params, batch: np.ndarray) -> tuple[np.ndarray, Trace]:
    """Run the three residual blocks and flatten; returns features [B, F]."""
    _check_batch(spec, batch)
    dtype = params["head.weight"].dtype
    x = np.ascontiguousarray(batch, dtype=dtype)
    trace = Trace(spec, id(params), x.shape)
    pad = spec.padding
    for i in range(1, 4):
        p = f"block{i}"
        a1 = depthwise_conv3d(x, params[f"{p}.conv1.dw.weight"], params[f"{p}.conv1.dw.bias"], 2, pad)
        z1 = pointwise_conv3d(a1, params[f"{p}.conv1.pw.weight"], params[f"{p}.conv1.pw.bias"])
        h1 = prelu(z1, params[f"{p}.act1.slope"][0])
        a2 = depthwise_conv3d(h1, params[f"{p}.conv2.dw.weight"], params[f"{p}.conv2.dw.bias"], 1, pad)
        z2 = pointwise_conv3d(a2, params[f"{p}.conv2.pw.weight"], params[f"{p}.conv2.pw.bias"])
        h2 = prelu(z2, params[f"{p}.act2.slope"][0])
        xs = np.ascontiguousarray(x[:, :, ::2, ::2, ::2])
        sc = pointwise_conv3d(xs, params[f"{p}.shortcut.weight"], params[f"{p}.shortcut.bias"])
        trace.blocks.append({"x": x, "a1": a1, "z1": z1, "h1": h1, "a2": a2, "z2": z2, "xs": xs})
        x = h2 + sc
    features = x.reshape(x.shape[0], -1)
    trace.features = features
    return features, trace


def forward(spec: ModelSpec, params: Params, batch: np.ndarray) -> tuple[np.ndarray, Trace]:
    """Logits [B, n_classes] plus the activation trace."""
    features, trace = trunk_forward(spec, params, batch)
    w, b = params["head.weight"], params["head.bias"]
    trace.head = (w, b)
    return linear(features, w, b), trace


def backward(trace: Trace, params: Params, upstream: np.ndarray) -> tuple[Params, np.ndarray]:
    """Gradients of ``sum(logits * upstream)`` w.r.t. every parameter and the input."""
    spec = trace.spec
    if trace.params_id != id(params) or trace.features is None or trace.head is None:
        raise InvalidStateError("trace was not produced by forward() with these parameters")
    if upstream.shape != (trace.input_shape[0], spec.n_classes):
        raise InvalidShapeError(f"upstream gradient shape {upstream.shape} does not match logits")
    upstream = np.asarray(upstream, dtype=trace.features.dtype)
    grads: Params = {}
    w, _ = trace.head
    dfeat, grads["head.weight"], grads["head.bias"] = linear_backward(trace.features, w, upstream)
    pad = spec.padding
    cur = spec.channels[-1]
    s = spec.side // 8
    g = dfeat.reshape(-1, cur, s, s, s)
    for i in range(3, 0, -1):
        p = f"block{i}"
        c = trace.blocks[i - 1]
        # shortcut branch
        dxs, grads[f"{p}.shortcut.weight"], grads[f"{p}.shortcut.bias"] = pointwise_conv3d_backward(
            c["xs"], params[f"{p}.shortcut.weight"], g)
        # main branch
        dz2, dslope2 = prelu_backward(c["z2"], params[f"{p}.act2.slope"][0], g)
        da2, grads[f"{p}.conv2.pw.weight"], grads[f"{p}.conv2.pw.bias"] = pointwise_conv3d_backward(
            c["a2"], params[f"{p}.conv2.pw.weight"], dz2)
        dh1, grads[f"{p}.conv2.dw.weight"], grads[f"{p}.conv2.dw.bias"] = depthwise_conv3d_backward(
            c["h1"], params[f"{p}.conv2.dw.weight"], da2, 1, pad)
        dz1, dslope1 = prelu_backward(c["z1"], params[f"{p}.act1.slope"][0], dh1)
        da1, grads[f"{p}.conv1.pw.weight"], grads[f"{p}.conv1.pw.bias"] = pointwise_conv3d_backward(
            c["a1"], params[f"{p}.conv1.pw.weight"], dz1)
        dx, grads[f"{p}.conv1.dw.weight"], grads[f"{p}.conv1.dw.bias"] = depthwise_conv3d_backward(
            c["x"], params[f"{p}.conv1.dw.weight"], da1, 2, pad)
        grads[f"{p}.act1.slope"] = dslope1
        grads[f"{p}.act2.slope"] = dslope2
        dx[:, :, ::2, ::2, ::2] += dxs
        g = dx
    ordered = {name: grads[name] for name in param_shapes(spec)}
    return ordered, g


# ---------------------------------------------------------------------------
# naive oracles (tests only; slow)


def conv3d_depthwise_reference(x, w, b=None, stride=1, padding=0):
    """Direct seven-loop depthwise convolution on Python floats."""
    bsz, c, d, h, wd = x.shape
    k = w.shape[-1]
    od, oh, ow = (_out_side(n, k, stride, padding) for n in (d, h, wd))
    out = np.zeros((bsz, c, od, oh, ow), dtype=np.float64)
    xv = x.astype(np.float64).tolist()
    wv = w.astype(np.float64).tolist()
    for n in range(bsz):
        for ch in range(c):
            for i in range(od):
                for j in range(oh):
                    for l in range(ow):
                        acc = 0.0
                        for kd in range(k):
                            for kh in range(k):
                                for kw in range(k):
                                    zi = i * stride + kd - padding
                                    zj = j * stride + kh - padding
                                    zl = l * stride + kw - padding
                                    if 0 <= zi < d and 0 <= zj < h and 0 <= zl < wd:
                                        v = xv[n][ch][zi][zj][zl]
                                    else:
                                        v = 0.0
                                    acc += wv[ch][0][kd][kh][kw] * v
                        if b is not None:
                            acc += float(b[ch])
                        out[n, ch, i, j, l] = acc
    return out


def conv3d_pointwise_reference(x, w, b=None):
    bsz, c = x.shape[:2]
    o = w.shape[0]
    spatial = x.shape[2:]
    out = np.zeros((bsz, o) + spatial, dtype=np.float64)
    xv = x.astype(np.float64)
    for n in range(bsz):
        for oc in range(o):
            for idx in np.ndindex(*spatial):
                acc = 0.0
                for ci in range(c):
                    acc += float(w[oc, ci, 0, 0, 0]) * float(xv[(n, ci) + idx])
                if b is not None:
                    acc += float(b[oc])
                out[(n, oc) + idx] = acc
    return out


# ---------------------------------------------------------------------------
# checkpoint I/O

MAGIC = b"BNCK"
FORMAT_VERSION = 1


def save_checkpoint(path, spec: ModelSpec, params: Params) -> None:
    """Binary checkpoint: magic, version, spec header, then named f32 tensors."""
    check_params(spec, params)
    header = spec.to_json().encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(params)))
    for name, value in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelSpec, Params]:
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    spec = ModelSpec.from_json(bytes(take(hlen)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    params: Params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape))
        params[name] = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    check_params(spec, params)
    return spec, params
