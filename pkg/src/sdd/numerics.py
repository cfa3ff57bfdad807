"""Dense float64 math: seeded random streams, a small MLP with reverse-mode
gradients, a finite-difference checker and an Adam optimizer.

All matrix contractions go through ``np.einsum`` on C-contiguous arrays rather
than BLAS.  einsum is single threaded and computes every output row with the
same accumulation order whatever the batch size, so a row evaluated alone is
bit-identical to the same row evaluated inside a batch, and results do not
depend on the BLAS thread count.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, NumericError, ShapeError

__all__ = [
    "RngStream",
    "rng_fork",
    "Mlp",
    "init_mlp",
    "zeros_like",
    "mlp_forward",
    "mlp_backward",
    "mlp_forward_backward",
    "finite_diff_check",
    "AdamState",
    "adam_init",
    "adam_step",
    "adam_update",
    "clip_grads",
    "global_norm",
    "ACTIVATIONS",
]

_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / 9007199254740992.0
_MASK64 = (1 << 64) - 1


# --------------------------------------------------------------------------
# random streams
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream fully determined by ``(seed, path)``.

    A stream is a value: every draw method starts from counter zero, so
    calling ``normal(5)`` twice returns the same five numbers.  Fresh
    randomness comes from :meth:`fork`.
    """

    seed: int
    path: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "path", tuple(int(p) for p in self.path))

    def fork(self, *labels: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(l) for l in labels))

    def _key(self) -> int:
        h = hashlib.blake2b(digest_size=16, person=b"sdd-rng-v1")
        h.update(struct.pack("<QQ", self.seed & _MASK64, len(self.path)))
        for label in self.path:
            h.update(struct.pack("<Q", label & _MASK64))
        return int.from_bytes(h.digest(), "little")

    def raw(self, n: int) -> np.ndarray:
        """First ``n`` 64-bit words of the stream."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        return np.random.Philox(key=self._key()).random_raw(int(n))

    def uniform(self, size=None) -> np.ndarray:
        """Doubles in [0, 1) built from the top 53 bits of each word."""
        n = _count(size)
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return _shape(u, size)

    def normal(self, size=None) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        n = _count(size)
        pairs = (n + 1) // 2
        bits = self.raw(2 * pairs) >> np.uint64(11)
        u = bits.astype(np.float64) * _INV_2_53
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(_TWO_PI * u2)
        z[1::2] = r * np.sin(_TWO_PI * u2)
        return _shape(z[:n], size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in [low, high)."""
        if high <= low:
            raise ConfigError(f"empty integer range [{low}, {high})")
        u = self.uniform(size)
        out = low + np.floor(np.asarray(u) * (high - low)).astype(np.int64)
        return np.minimum(out, high - 1)


def _count(size) -> int:
    if size is None:
        return 1
    if isinstance(size, (int, np.integer)):
        return int(size)
    return int(np.prod(size))


def _shape(flat: np.ndarray, size):
    if size is None:
        return float(flat[0])
    return flat.reshape(size)


def rng_fork(parent: RngStream, label: int) -> RngStream:
    return parent.fork(label)


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s


def _silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def _tanh_grad(z):
    t = np.tanh(z)
    return 1.0 - t * t


ACTIVATIONS = {
    "silu": (_silu, _silu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


@dataclass(frozen=True)
class Mlp:
    """Fully connected net; hidden layers use ``activation``, the output is linear.

    ``layers`` holds ``(weight, bias)`` pairs with weight shaped
    ``(fan_out, fan_in)``.  The same container doubles as the shape of a
    gradient or an optimizer moment buffer.
    """

    layers: tuple
    activation: str = "silu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        frozen = []
        prev = None
        for i, (w, b) in enumerate(self.layers):
            w = np.array(w, dtype=np.float64, order="C")
            b = np.array(b, dtype=np.float64, order="C")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if prev is not None and w.shape[1] != prev:
                raise ShapeError(f"layer {i} expects {w.shape[1]} inputs, previous layer gives {prev}")
            prev = w.shape[0]
            w.flags.writeable = False
            b.flags.writeable = False
            frozen.append((w, b))
        if not frozen:
            raise ShapeError("an Mlp needs at least one layer")
        object.__setattr__(self, "layers", tuple(frozen))

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def sizes(self) -> list:
        return [self.in_dim] + [w.shape[0] for w, _ in self.layers]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def tensors(self):
        """Yield ``(name, array)`` for every parameter tensor."""
        for i, (w, b) in enumerate(self.layers):
            yield f"layers[{i}].w", w
            yield f"layers[{i}].b", b

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.tensors()])

    def with_flat(self, vec: np.ndarray) -> "Mlp":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise ShapeError(f"expected {self.n_params} values, got {vec.size}")
        layers, pos = [], 0
        for w, b in self.layers:
            nw = vec[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            nb = vec[pos:pos + b.size]
            pos += b.size
            layers.append((nw, nb))
        return Mlp(tuple(layers), self.activation)

    def map(self, fn: Callable, *others: "Mlp") -> "Mlp":
        layers = []
        for i, (w, b) in enumerate(self.layers):
            ws = [o.layers[i][0] for o in others]
            bs = [o.layers[i][1] for o in others]
            layers.append((fn(w, *ws), fn(b, *bs)))
        return Mlp(tuple(layers), self.activation)

    def to_dict(self) -> dict:
        return {
            "format": "sdd-mlp-v1",
            "layers": [{"w": w.tolist(), "b": b.tolist()} for w, b in self.layers],
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Mlp":
        if doc.get("format") != "sdd-mlp-v1":
            raise ConfigError(f"not an sdd-mlp-v1 document (format={doc.get('format')!r})")
        layers = tuple((np.array(l["w"], dtype=np.float64), np.array(l["b"], dtype=np.float64))
                       for l in doc["layers"])
        return cls(layers, doc.get("activation", "silu"))

    def __eq__(self, other):
        if not isinstance(other, Mlp) or self.activation != other.activation:
            return False
        if len(self.layers) != len(other.layers):
            return False
        return all(np.array_equal(w, ow) and np.array_equal(b, ob)
                   for (w, b), (ow, ob) in zip(self.layers, other.layers))

    __hash__ = None


def init_mlp(sizes: Sequence[int], rng: RngStream, activation: str = "silu",
             zero_last: bool = False) -> Mlp:
    """Glorot-uniform weights, zero biases.

    ``zero_last`` zeroes the output layer so the net starts as the zero map.
    """
    if len(sizes) < 2:
        raise ConfigError("need at least input and output sizes")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if zero_last and i == len(sizes) - 2:
            w = np.zeros((fan_out, fan_in))
        else:
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = (2.0 * rng.fork(i).uniform((fan_out, fan_in)) - 1.0) * limit
        layers.append((w, np.zeros(fan_out)))
    return Mlp(tuple(layers), activation)


def zeros_like(net: Mlp) -> Mlp:
    return net.map(np.zeros_like)


def _as_batch(net: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.ascontiguousarray(x.reshape(1, -1) if single else x)
    if x2.ndim != 2 or x2.shape[1] != net.in_dim:
        raise ShapeError(f"input of shape {x.shape} does not match net input dimension {net.in_dim}")
    return x2, single


def _forward(net: Mlp, x2: np.ndarray):
    act, _ = ACTIVATIONS[net.activation]
    pre, post = [], [x2]
    a = x2
    last = len(net.layers) - 1
    for i, (w, b) in enumerate(net.layers):
        z = np.einsum("ni,oi->no", a, w) + b
        pre.append(z)
        a = z if i == last else np.ascontiguousarray(act(z))
        post.append(a)
    return pre, post


def mlp_forward(net: Mlp, x) -> np.ndarray:
    """Evaluate the net on one vector ``(d,)`` or a batch ``(n, d)``."""
    x2, single = _as_batch(net, x)
    out = _forward(net, x2)[1][-1]
    return out[0] if single else out


def _backward(net: Mlp, pre, post, g2):
    _, dact = ACTIVATIONS[net.activation]
    grads = [None] * len(net.layers)
    dz = g2
    for i in range(len(net.layers) - 1, -1, -1):
        w, _ = net.layers[i]
        grads[i] = (np.einsum("no,ni->oi", dz, post[i]), np.einsum("no->o", dz))
        da = np.einsum("no,oi->ni", dz, w)
        if i > 0:
            dz = np.ascontiguousarray(da * dact(pre[i - 1]))
    return Mlp(tuple(grads), net.activation), da


def _check_grad_shape(net, x2, g):
    g = np.asarray(g, dtype=np.float64)
    g2 = np.ascontiguousarray(g.reshape(1, -1) if g.ndim == 1 else g)
    if g2.shape != (x2.shape[0], net.out_dim):
        raise ShapeError(f"output_grad of shape {g.shape} does not match output "
                         f"({x2.shape[0]}, {net.out_dim})")
    return g2


def mlp_backward(net: Mlp, x, output_grad) -> tuple[Mlp, np.ndarray]:
    """Reverse-mode gradients of ``sum(output * output_grad)``.

    Returns parameter gradients (summed over batch rows) as an ``Mlp``-shaped
    container, and the gradient with respect to the input.
    """
    x2, single = _as_batch(net, x)
    g2 = _check_grad_shape(net, x2, output_grad)
    pre, post = _forward(net, x2)
    grad_net, dx = _backward(net, pre, post, g2)
    return grad_net, (dx[0] if single else dx)


def mlp_forward_backward(net: Mlp, x, grad_fn: Callable):
    """Forward pass, then backward with ``output_grad = grad_fn(output)``.

    Returns ``(output, param_grads, input_grad)`` sharing one forward pass.
    """
    x2, single = _as_batch(net, x)
    pre, post = _forward(net, x2)
    out = post[-1]
    g2 = _check_grad_shape(net, x2, grad_fn(out[0] if single else out))
    grad_net, dx = _backward(net, pre, post, g2)
    if single:
        return out[0], grad_net, dx[0]
    return out, grad_net, dx


def finite_diff_check(net: Mlp, x, loss: Callable, step: float = 1e-5) -> float:
    """Largest relative gap between :func:`mlp_backward` and central differences.

    ``loss(output)`` must return ``(value, d value / d output)``.  Every
    parameter and every input coordinate is perturbed by ``+-step``.
    """
    if not step > 0:
        raise DomainError(f"finite-difference step must be positive, got {step}")
    x = np.asarray(x, dtype=np.float64)
    _, out_grad = loss(mlp_forward(net, x))
    pgrad, xgrad = mlp_backward(net, x, out_grad)

    def value(n, xx):
        return loss(mlp_forward(n, xx))[0]

    analytic = np.concatenate([pgrad.flat(), np.ravel(xgrad)])
    numeric = np.empty_like(analytic)
    theta = net.flat()
    for k in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += step
        tm[k] -= step
        numeric[k] = (value(net.with_flat(tp), x) - value(net.with_flat(tm), x)) / (2 * step)
    xf = x.ravel()
    for k in range(xf.size):
        xp, xm = xf.copy(), xf.copy()
        xp[k] += step
        xm[k] -= step
        numeric[theta.size + k] = (value(net, xp.reshape(x.shape)) -
                                   value(net, xm.reshape(x.shape))) / (2 * step)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / scale))


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: Mlp
    v: Mlp
    step: int = 0


def adam_init(params: Mlp) -> AdamState:
    z = zeros_like(params)
    return AdamState(z, z, 0)


def global_norm(grads: Mlp) -> float:
    return math.sqrt(math.fsum(float(np.sum(a * a)) for _, a in grads.tensors()))


def clip_grads(grads: Mlp, max_norm: float) -> tuple[Mlp, float]:
    """Rescale so the global norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = grads.map(lambda a: a * scale)
    return grads, norm


def _check_finite(grads: Mlp, label: str = "gradient"):
    for name, a in grads.tensors():
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite {label} entry in {name}")


def adam_update(params, grads, m, v, step, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Adam on plain lists of arrays; ``step`` is the already-incremented count."""
    m = [beta1 * m_ + (1.0 - beta1) * g for m_, g in zip(m, grads)]
    v = [beta2 * v_ + (1.0 - beta2) * g * g for v_, g in zip(v, grads)]
    if lr == 0:
        return list(params), m, v
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    new = [p - lr * (m_ / c1) / (np.sqrt(v_ / c2) + eps) for p, m_, v_ in zip(params, m, v)]
    return new, m, v


def _unflat(template: Mlp, arrays) -> Mlp:
    it = iter(arrays)
    return Mlp(tuple((next(it), next(it)) for _ in template.layers), template.activation)


def adam_step(params: Mlp, grads: Mlp, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              clip_norm: float | None = None) -> tuple[Mlp, AdamState]:
    """One bias-corrected Adam update, optionally after global-norm clipping."""
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if grads.sizes != params.sizes:
        raise ShapeError(f"gradient sizes {grads.sizes} do not match parameters {params.sizes}")
    _check_finite(grads)
    if clip_norm is not None:
        grads, _ = clip_grads(grads, clip_norm)
    step = state.step + 1
    arrays = lambda net: [a for _, a in net.tensors()]
    new, m, v = adam_update(arrays(params), arrays(grads), arrays(state.m), arrays(state.v),
                            step, lr, beta1, beta2, eps)
    new_params = params if lr == 0 else _unflat(params, new)
    return new_params, AdamState(_unflat(params, m), _unflat(params, v), step)
