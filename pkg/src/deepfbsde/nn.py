"""Small dense networks with hand-written reverse mode.

A :class:`FeedForward` holds ``n_stack`` independent networks of identical
architecture evaluated in one pass: inputs are ``(S, B, m0)`` and each stack
member ``s`` sees only its own slice.  One member per time step gives the
per-step control networks; ``n_stack=1`` gives a single (possibly shared)
network.

All trainable numbers live in one flat vector (:class:`ParamCollection`);
networks hold reshaped views into it, so an optimizer updating the flat
vector in place updates every network.

Parameter order inside one network, stack axis first in every tensor::

    [bn0.gamma, bn0.beta]  W1, b1, [bn1.gamma, bn1.beta]  W2, b2, ...

where ``bnP`` exists iff ``P`` is listed in ``batchnorm`` and normalizes the
input of affine map ``P + 1``.
"""

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError


def _elu(z):
    # expm1(z) >= z everywhere, so the max picks the right branch without masking;
    # in-place ops avoid two large temporaries
    e = np.minimum(z, 0.0)
    np.expm1(e, out=e)
    return np.maximum(z, e, out=e)


def _elu_grad(z, a):
    g = np.minimum(a, 0.0)
    g += 1.0
    return g


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# name -> (activation, derivative expressed through (z, a))
ACTIVATIONS = {
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
    "elu": (_elu, _elu_grad),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(z.dtype)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "sigmoid": (_sigmoid, lambda z, a: a * (1.0 - a)),
}


def prescale(x, center, halfwidth):
    halfwidth = np.asarray(halfwidth, dtype=float)
    if np.any(halfwidth <= 0):
        raise ConfigError("prescale half-width must be positive")
    return (np.asarray(x, dtype=float) - center) / halfwidth


@dataclass(frozen=True)
class NetworkSpec:
    sizes: tuple
    activations: tuple
    center: tuple
    halfwidth: tuple
    batchnorm: tuple = ()
    bn_eps: float = 1e-5
    bn_momentum: float = 0.99

    def __post_init__(self):
        problems = []
        L = len(self.sizes) - 1
        if L < 1:
            problems.append("network needs at least one affine layer")
        if len(self.activations) != L:
            problems.append(f"expected {L} activations, got {len(self.activations)}")
        for a in self.activations:
            if a not in ACTIVATIONS:
                problems.append(f"unknown activation {a!r}")
        if len(self.center) != self.sizes[0] or len(self.halfwidth) != self.sizes[0]:
            problems.append("prescale center/half-width must match the input width")
        if any(not w > 0 for w in self.halfwidth):
            problems.append("prescale half-width must be positive")
        if any(not 0 <= p < L for p in self.batchnorm):
            problems.append(f"batch-norm positions must lie in [0, {L - 1}]")
        if self.batchnorm and not self.bn_eps > 0:
            problems.append("batch-norm epsilon must be positive")
        if problems:
            raise ConfigError(problems)

    @classmethod
    def dense(cls, sizes, hidden="elu", output="identity", center=None, halfwidth=None, **kw):
        sizes = tuple(int(s) for s in sizes)
        m0 = sizes[0]
        center = (0.0,) * m0 if center is None else tuple(np.broadcast_to(center, m0).tolist())
        halfwidth = (
            (1.0,) * m0 if halfwidth is None else tuple(np.broadcast_to(halfwidth, m0).tolist())
        )
        acts = (hidden,) * (len(sizes) - 2) + (output,)
        return cls(sizes, acts, center, halfwidth, **kw)

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def to_dict(self):
        return {
            "sizes": list(self.sizes),
            "activations": list(self.activations),
            "center": list(self.center),
            "halfwidth": list(self.halfwidth),
            "batchnorm": list(self.batchnorm),
            "bn_eps": self.bn_eps,
            "bn_momentum": self.bn_momentum,
        }


class ParamCollection:
    """Flat parameter vector with named, reshaped views."""

    def __init__(self, layout):
        self.layout = []
        offset = 0
        for name, shape in layout:
            n = int(np.prod(shape, dtype=int))
            self.layout.append((name, tuple(shape), offset, n))
            offset += n
        self.size = offset
        self.flat = np.zeros(offset)
        self.version = 0

    def views(self, flat=None):
        flat = self.flat if flat is None else flat
        if flat.shape != (self.size,):
            raise UsageError(f"flat vector has shape {flat.shape}, expected ({self.size},)")
        return {name: flat[o:o + n].reshape(shape) for name, shape, o, n in self.layout}

    def flatten(self, tensors):
        out = np.empty(self.size)
        for name, shape, o, n in self.layout:
            t = np.asarray(tensors[name], dtype=float)
            if t.shape != shape:
                raise UsageError(f"{name}: shape {t.shape}, expected {shape}")
            out[o:o + n] = t.ravel()
        return out

    def unflatten(self, flat):
        return {k: v.copy() for k, v in self.views(flat).items()}

    def zeros(self):
        return np.zeros(self.size)

    def bump(self):
        """Mark the values as changed; invalidates outstanding tapes."""
        self.version += 1

    def shape_table(self):
        return [{"name": n, "shape": list(s), "offset": o} for n, s, o, _ in self.layout]


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.99
    populated: bool = False

    @classmethod
    def fresh(cls, width, eps=1e-5, momentum=0.99):
        return cls(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width), eps, momentum)


def batchnorm_train(x, state, update=True):
    """Normalize over the batch axis (``-2``) with batch statistics.

    Returns ``(y, cache)``; with ``update`` the running statistics move by an
    exponential moving average (the first update copies the batch values).
    """
    B = x.shape[-2]
    if B < 2:
        raise UsageError("batch normalization needs a batch of at least 2")
    mu = x.mean(axis=-2, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-2, keepdims=True)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv
    y = state.gamma * xhat + state.beta
    if update:
        if state.populated:
            m = state.momentum
            state.running_mean[...] = m * state.running_mean + (1.0 - m) * mu
            state.running_var[...] = m * state.running_var + (1.0 - m) * var
        else:
            state.running_mean[...] = mu
            state.running_var[...] = var
            state.populated = True
    return y, (xhat, inv)


def batchnorm_train_backward(dy, cache, state):
    xhat, inv = cache
    B = dy.shape[-2]
    dgamma = (dy * xhat).sum(axis=-2, keepdims=True)
    dbeta = dy.sum(axis=-2, keepdims=True)
    dxhat = dy * state.gamma
    dx = inv / B * (
        B * dxhat
        - dxhat.sum(axis=-2, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-2, keepdims=True)
    )
    return dx, dgamma, dbeta


def batchnorm_infer(x, state):
    if not state.populated:
        raise UsageError("batch-norm running statistics are not populated")
    scale = state.gamma / np.sqrt(state.running_var + state.eps)
    return scale * x + (state.beta - scale * state.running_mean)


class Tape:
    __slots__ = ("version", "mode", "records", "x", "owner")

    def __init__(self, owner, version, mode, x):
        self.owner = owner
        self.version = version
        self.mode = mode
        self.x = x
        self.records = []


class FeedForward:
    def __init__(self, spec, n_stack=1, name="net"):
        self.spec = spec
        self.n_stack = int(n_stack)
        self.name = name
        self.params = None
        self.bn = {}

    def param_layout(self):
        S, sizes = self.n_stack, self.spec.sizes
        out = []
        for l in range(1, len(sizes)):
            p = l - 1
            if p in self.spec.batchnorm:
                out.append((f"{self.name}.bn{p}.gamma", (S, 1, sizes[p])))
                out.append((f"{self.name}.bn{p}.beta", (S, 1, sizes[p])))
            out.append((f"{self.name}.W{l}", (S, sizes[l - 1], sizes[l])))
            out.append((f"{self.name}.b{l}", (S, 1, sizes[l])))
        return out

    def bind(self, params):
        self.params = params
        v = params.views()
        self._W = [v[f"{self.name}.W{l}"] for l in range(1, self.spec.n_layers + 1)]
        self._b = [v[f"{self.name}.b{l}"] for l in range(1, self.spec.n_layers + 1)]
        old = self.bn
        self.bn = {}
        for p in self.spec.batchnorm:
            m = self.spec.sizes[p]
            prev = old.get(p)
            self.bn[p] = BatchNormState(
                gamma=v[f"{self.name}.bn{p}.gamma"],
                beta=v[f"{self.name}.bn{p}.beta"],
                running_mean=prev.running_mean if prev else np.zeros((self.n_stack, 1, m)),
                running_var=prev.running_var if prev else np.ones((self.n_stack, 1, m)),
                eps=self.spec.bn_eps,
                momentum=self.spec.bn_momentum,
                populated=prev.populated if prev else False,
            )
        return self

    def init_params(self, rng):
        """Glorot-uniform weights, zero biases, ``gamma = 1``, ``beta = 0``."""
        sizes = self.spec.sizes
        for l, W in enumerate(self._W, start=1):
            limit = np.sqrt(6.0 / (sizes[l - 1] + sizes[l]))
            W[...] = rng.uniform(-limit, limit, size=W.shape)
        for b in self._b:
            b[...] = 0.0
        for st in self.bn.values():
            st.gamma[...] = 1.0
            st.beta[...] = 0.0
            st.running_mean[...] = 0.0
            st.running_var[...] = 1.0
            st.populated = False

    @property
    def bn_populated(self):
        return all(st.populated for st in self.bn.values())

    def _stack_state(self, p, sl):
        st = self.bn[p]
        if sl is None:
            return st
        return BatchNormState(st.gamma[sl], st.beta[sl], st.running_mean[sl],
                              st.running_var[sl], st.eps, st.momentum, st.populated)

    def forward(self, x, mode="train", stacks=None):
        """Evaluate on ``x`` of shape ``(S, B, m0)``.

        ``mode``: ``"train"`` (batch statistics, running averages updated),
        ``"batch"`` (batch statistics, no update) or ``"infer"`` (running
        statistics).  ``stacks`` optionally selects a slice of stack members;
        such calls are evaluation-only (no backward).
        """
        if self.params is None:
            raise UsageError("network parameters are not bound")
        x = np.asarray(x, dtype=float)
        S = self.n_stack if stacks is None else len(range(self.n_stack)[stacks])
        if x.ndim != 3 or x.shape[0] != S or x.shape[2] != self.spec.sizes[0]:
            raise UsageError(
                f"{self.name}: input shape {x.shape}, expected ({S}, B, {self.spec.sizes[0]})"
            )
        if mode not in ("train", "batch", "infer"):
            raise UsageError(f"unknown mode {mode!r}")
        if mode == "infer" and not self.bn_populated:
            raise UsageError(f"{self.name}: batch-norm running statistics are not populated")
        tape = Tape(self, self.params.version, mode, x) if stacks is None else None
        h = prescale(x, np.asarray(self.spec.center), np.asarray(self.spec.halfwidth))
        for l in range(self.spec.n_layers):
            bn_cache = None
            if l in self.bn:
                st = self._stack_state(l, stacks)
                h_in = h
                if mode == "infer":
                    h = batchnorm_infer(h, st)
                    bn_cache = ("infer", h_in)
                else:
                    h, cache = batchnorm_train(h, st, update=(mode == "train"))
                    bn_cache = ("train", cache)
                    if mode == "train" and stacks is None:
                        self.bn[l].populated = True
            W = self._W[l] if stacks is None else self._W[l][stacks]
            b = self._b[l] if stacks is None else self._b[l][stacks]
            z = h @ W
            z += b
            fn, dfn = ACTIVATIONS[self.spec.activations[l]]
            a = fn(z)
            if tape is not None:
                tape.records.append((h, z, a, bn_cache))
            h = a
        return h, tape

    def backward(self, tape, dy, grad=None):
        """Reverse pass.  Accumulates parameter gradients into the flat ``grad``
        (allocated if omitted) and returns ``(grad, dx)``."""
        if tape is None or tape.owner is not self:
            raise UsageError(f"{self.name}: tape does not belong to this network")
        if tape.version != self.params.version:
            raise UsageError(f"{self.name}: stale tape (parameters changed since forward)")
        if grad is None:
            grad = self.params.zeros()
        g = self.params.views(grad)
        d = np.asarray(dy, dtype=float)
        for l in reversed(range(self.spec.n_layers)):
            h, z, a, bn_cache = tape.records[l]
            _, dfn = ACTIVATIONS[self.spec.activations[l]]
            if self.spec.activations[l] == "identity":
                dz = d
            else:
                dz = dfn(z, a)
                dz *= d
            g[f"{self.name}.W{l + 1}"] += np.swapaxes(h, -1, -2) @ dz
            g[f"{self.name}.b{l + 1}"] += dz.sum(axis=-2, keepdims=True)
            d = dz @ np.swapaxes(self._W[l], -1, -2)
            if bn_cache is not None:
                st = self.bn[l]
                kind, saved = bn_cache
                if kind == "infer":
                    h_in = saved
                    inv = 1.0 / np.sqrt(st.running_var + st.eps)
                    xhat = (h_in - st.running_mean) * inv
                    g[f"{self.name}.bn{l}.gamma"] += (d * xhat).sum(axis=-2, keepdims=True)
                    g[f"{self.name}.bn{l}.beta"] += d.sum(axis=-2, keepdims=True)
                    d = d * st.gamma * inv
                else:
                    d, dgamma, dbeta = batchnorm_train_backward(d, saved, st)
                    g[f"{self.name}.bn{l}.gamma"] += dgamma
                    g[f"{self.name}.bn{l}.beta"] += dbeta
        dx = d / np.asarray(self.spec.halfwidth)
        return grad, dx

    def bn_arrays(self):
        """Running statistics, in position order, for checkpoints."""
        out = {}
        for p in sorted(self.bn):
            out[f"{self.name}.bn{p}.running_mean"] = self.bn[p].running_mean
            out[f"{self.name}.bn{p}.running_var"] = self.bn[p].running_var
        return out


# ---------------------------------------------------------------------------
# checkpoints
#
# File layout (all integers little-endian):
#   8 bytes  magic b"DFBSDCK1"
#   8 bytes  uint64 header length H
#   H bytes  UTF-8 JSON header: {"spec_hash", "layers", "counter", "blocks": [[name, length], ...], ...}
#   then each block in header order as float64 little-endian; block "theta" is the flat parameter vector

MAGIC = b"DFBSDCK1"


def spec_hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, header, blocks):
    header = dict(header)
    header["blocks"] = [[name, int(np.asarray(arr).size)] for name, arr in blocks.items()]
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for arr in blocks.values():
            fh.write(np.ascontiguousarray(np.asarray(arr, dtype="<f8")).ravel().tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise UsageError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        blocks = {}
        for name, length in header["blocks"]:
            buf = fh.read(8 * length)
            if len(buf) != 8 * length:
                raise UsageError(f"{path}: truncated block {name}")
            blocks[name] = np.frombuffer(buf, dtype="<f8").astype(float)
    return header, blocks
