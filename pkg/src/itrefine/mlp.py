"""Refinement network: an MLP over the concatenated pair (x, h).

The network is small and fixed in shape, so reverse mode is written out by
hand: ``phi_forward`` records the activations it needs on a ``Tape`` and
``phi_backward`` replays them.  Batched inputs of shape ``(B, n)`` are
supported throughout; parameter gradients are summed over the batch.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GridError

FORMAT_NAME = "itrefine.mlp-params"
FORMAT_VERSION = 1

_ACTIVATIONS = ("tanh", "identity")


@dataclass
class MlpParams:
    """Weights ``(out, in)`` and biases ``(out,)`` for each layer.

    Also used as the gradient container, since gradients have the same
    shapes as the parameters they belong to.
    """

    weights: list
    biases: list
    activations: tuple

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        self.activations = tuple(self.activations)
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ConfigError("weights, biases and activations must have equal length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in _ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigError(f"layer {i}: weight {w.shape} and bias {b.shape} do not match")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ConfigError(f"layer {i}: input width {w.shape[1]} does not chain")
        if self.input_dim % 2:
            raise ConfigError("input width must be 2n for the (x, h) concatenation")
        if self.output_dim != self.input_dim // 2:
            raise ConfigError("output width must equal n")

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def output_dim(self):
        return self.weights[-1].shape[0]

    @property
    def n(self):
        return self.output_dim

    @property
    def arch(self):
        return (self.input_dim,) + tuple(w.shape[0] for w in self.weights)

    def arrays(self):
        """All arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def _from_arrays(self, arrays):
        return MlpParams(arrays[0::2], arrays[1::2], self.activations)

    def zeros_like(self):
        return self._from_arrays([np.zeros_like(a) for a in self.arrays()])

    def copy(self):
        return self._from_arrays([a.copy() for a in self.arrays()])

    def add(self, other, scale=1.0):
        return self._from_arrays([a + scale * b for a, b in zip(self.arrays(), other.arrays())])

    def scale(self, s):
        return self._from_arrays([s * a for a in self.arrays()])

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        arrays, pos = [], 0
        for a in self.arrays():
            arrays.append(vec[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        if pos != vec.size:
            raise ConfigError(f"flat vector has {vec.size} entries, expected {pos}")
        return self._from_arrays(arrays)

    def global_norm(self):
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))

    def is_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def equals(self, other):
        return (
            self.activations == other.activations
            and len(self.weights) == len(other.weights)
            and all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))
        )


def init_params(seed, hidden_dim, n, gain=0.1):
    """Two-hidden-layer tanh MLP ``2n -> hidden -> hidden -> n``.

    Weights are Xavier-uniform scaled by ``gain``; biases start at zero.
    """
    if hidden_dim < 1:
        raise ConfigError("hidden_dim must be >= 1")
    rng = np.random.default_rng(seed)
    dims = [2 * n, hidden_dim, hidden_dim, n]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(bound * rng.uniform(-1.0, 1.0, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, ("tanh", "tanh", "identity"))


def linear_params(x_block, h_block, bias):
    """Single identity-activation layer ``Phi(x, h) = X x + H h + bias``.

    Handy for building networks with a known closed form.
    """
    x_block = np.asarray(x_block, dtype=np.float64)
    h_block = np.asarray(h_block, dtype=np.float64)
    return MlpParams([np.hstack([x_block, h_block])], [np.asarray(bias, dtype=np.float64)], ("identity",))


@dataclass
class Tape:
    """Primal values recorded by one forward evaluation."""

    params: MlpParams
    inputs: np.ndarray
    # post-activation output of each layer; activations[-1] is the network output
    activations: list = field(default_factory=list)
    squeeze: bool = False


def _check_inputs(params, x, h):
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    n = params.n
    if x.shape[-1] != n or h.shape[-1] != n:
        raise GridError(f"inputs of length {x.shape[-1]}/{h.shape[-1]} do not match network size {n}")
    squeeze = x.ndim == 1 and h.ndim == 1
    x2 = np.atleast_2d(x)
    h2 = np.atleast_2d(h)
    x2, h2 = np.broadcast_arrays(x2, h2)
    return x2, h2, squeeze


def phi_forward(params, x, h):
    """Evaluate the network on (x, h); returns ``(out, tape)``."""
    x2, h2, squeeze = _check_inputs(params, x, h)
    a = np.concatenate((x2, h2), axis=-1)
    tape = Tape(params=params, inputs=a, squeeze=squeeze)
    for w, b, act in zip(params.weights, params.biases, params.activations):
        z = a @ w.T + b
        a = np.tanh(z) if act == "tanh" else z
        tape.activations.append(a)
    out = a[0] if squeeze else a
    return out, tape


def phi(params, x, h):
    return phi_forward(params, x, h)[0]


def phi_backward(tape, out_grad, need_params=True):
    """Reverse pass for ``<out, out_grad>``.

    Returns ``(param_grads, x_grad, h_grad)``.  ``param_grads`` is None when
    ``need_params`` is false.  The tape and its parameters are not modified.
    """
    params = tape.params
    g = np.atleast_2d(np.asarray(out_grad, dtype=np.float64))
    g = np.broadcast_to(g, tape.activations[-1].shape)
    wgrads = [None] * len(params.weights)
    bgrads = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        if params.activations[i] == "tanh":
            a = tape.activations[i]
            g = g * (1.0 - a * a)
        prev = tape.inputs if i == 0 else tape.activations[i - 1]
        if need_params:
            wgrads[i] = g.T @ prev
            bgrads[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    n = params.n
    x_grad, h_grad = g[:, :n], g[:, n:]
    if tape.squeeze:
        x_grad, h_grad = x_grad[0], h_grad[0]
    grads = MlpParams(wgrads, bgrads, params.activations) if need_params else None
    return grads, x_grad, h_grad


def phi_vjp(params, x, h, v):
    """Row-vector product ``v^T D_h Phi(x, h)``."""
    _, tape = phi_forward(params, x, h)
    return phi_backward(tape, v, need_params=False)[2]


def jacobian_h(params, x, h):
    """Dense ``D_h Phi(x, h)`` (n x n), one vjp per basis vector, batched."""
    n = params.n
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    eye = np.eye(n)
    xs = np.broadcast_to(x, (n, n))
    hs = np.broadcast_to(h, (n, n))
    return phi_vjp(params, xs, hs, eye)


def to_json(params):
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "arch": list(params.arch),
        "layers": [
            {"activation": act, "shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
            for w, b, act in zip(params.weights, params.biases, params.activations)
        ],
    }
    return json.dumps(doc)


def from_json(text):
    doc = json.loads(text)
    if doc.get("format") != FORMAT_NAME:
        raise ConfigError(f"not a parameter document: format={doc.get('format')!r}")
    if doc.get("version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported parameter format version {doc.get('version')}")
    weights, biases, acts = [], [], []
    for layer in doc["layers"]:
        weights.append(np.array(layer["weight"], dtype=np.float64).reshape(layer["shape"]))
        biases.append(np.array(layer["bias"], dtype=np.float64))
        acts.append(layer["activation"])
    params = MlpParams(weights, biases, acts)
    if list(params.arch) != list(doc["arch"]):
        raise ConfigError("layer shapes disagree with the recorded architecture")
    return params


def save_params(params, path):
    with open(path, "w") as fh:
        fh.write(to_json(params))


def load_params(path):
    with open(path) as fh:
        return from_json(fh.read())
