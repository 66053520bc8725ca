"""Small numpy MLP engine: forward/backward passes, loss primitives, Adam and
the step-then-linear-decay learning-rate schedule.

Batches are row-major: an input of shape ``(n, in)`` gives ``(n, out)``.
Weight matrices are stored ``(out, in)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class Activation:
    kind: str = "linear"
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in ("leaky_relu", "sigmoid", "linear"):
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "leaky_relu" and not self.alpha > 0:
            raise ValueError("leaky_relu needs alpha > 0")

    def __call__(self, z):
        if self.kind == "leaky_relu":
            return np.where(z > 0, z, self.alpha * z)
        if self.kind == "sigmoid":
            return 1.0 / (1.0 + np.exp(-z))
        return z

    def grad(self, z, a):
        if self.kind == "leaky_relu":
            return np.where(z > 0, 1.0, self.alpha)
        if self.kind == "sigmoid":
            return a * (1.0 - a)
        return np.ones_like(z)

    def to_json(self):
        return {"kind": self.kind, "alpha": self.alpha}


def leaky_relu(alpha: float) -> Activation:
    return Activation("leaky_relu", alpha)


SIGMOID = Activation("sigmoid")
LINEAR = Activation("linear")


@dataclass(frozen=True)
class MlpLayout:
    input_width: int
    hidden: tuple
    output_width: int
    output_activation: Activation = LINEAR

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple((int(w), a) for w, a in self.hidden))
        widths = [self.input_width, self.output_width] + [w for w, _ in self.hidden]
        if any(w < 1 for w in widths):
            raise ValueError("layer widths must be >= 1")

    @classmethod
    def uniform(cls, input_width, width, depth, activation, output_width, output_activation):
        return cls(input_width, tuple((width, activation) for _ in range(depth)),
                   output_width, output_activation)

    @property
    def sizes(self) -> list:
        return [self.input_width] + [w for w, _ in self.hidden] + [self.output_width]

    @property
    def activations(self) -> list:
        return [a for _, a in self.hidden] + [self.output_activation]

    def to_json(self) -> dict:
        return {
            "input_width": self.input_width,
            "hidden": [{"width": w, "activation": a.to_json()} for w, a in self.hidden],
            "output_width": self.output_width,
            "output_activation": self.output_activation.to_json(),
        }

    @classmethod
    def from_json(cls, d) -> "MlpLayout":
        return cls(int(d["input_width"]),
                   tuple((h["width"], Activation(**h["activation"])) for h in d["hidden"]),
                   int(d["output_width"]), Activation(**d["output_activation"]))


@dataclass
class MlpParams:
    layout: MlpLayout
    weights: list
    biases: list

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, layout, arrays) -> "MlpParams":
        return cls(layout, list(arrays[0::2]), list(arrays[1::2]))

    def copy(self) -> "MlpParams":
        return MlpParams(self.layout, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])

    def to_json(self) -> dict:
        return {"layout": self.layout.to_json(),
                "layers": [{"w": w.tolist(), "b": b.tolist()}
                           for w, b in zip(self.weights, self.biases)]}

    @classmethod
    def from_json(cls, d) -> "MlpParams":
        layout = MlpLayout.from_json(d["layout"])
        ws = [np.array(layer["w"], dtype=float) for layer in d["layers"]]
        bs = [np.array(layer["b"], dtype=float) for layer in d["layers"]]
        sizes = layout.sizes
        for k, (w, b) in enumerate(zip(ws, bs)):
            if w.shape != (sizes[k + 1], sizes[k]) or b.shape != (sizes[k + 1],):
                raise ShapeError(f"layer {k}: shape does not match layout")
        return cls(layout, ws, bs)


def mlp_init(layout: MlpLayout, seed) -> MlpParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    sizes = layout.sizes
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpParams(layout, ws, bs)


def mlp_forward(params: MlpParams, x):
    """Returns ``(output, cache)``. ``x`` may be a single vector or a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a = np.atleast_2d(x)
    if a.shape[1] != params.layout.input_width:
        raise ShapeError(f"input width {a.shape[1]} != {params.layout.input_width}")
    cache = [a]
    pre = []
    for w, b, act in zip(params.weights, params.biases, params.layout.activations):
        z = a @ w.T + b
        a = act(z)
        pre.append(z)
        cache.append(a)
    out = a[0] if single else a
    return out, {"acts": cache, "pre": pre, "single": single}


def mlp_backward(params: MlpParams, cache, output_gradient):
    """Reverse pass. Returns ``(grads, input_gradient)`` where ``grads`` is a
    flat list aligned with :meth:`MlpParams.arrays`."""
    g = np.atleast_2d(np.asarray(output_gradient, dtype=float))
    acts, pre = cache["acts"], cache["pre"]
    if g.shape != acts[-1].shape:
        raise ShapeError(f"output gradient shape {g.shape} != {acts[-1].shape}")
    n_layers = len(params.weights)
    grads = [None] * (2 * n_layers)
    for k in reversed(range(n_layers)):
        act = params.layout.activations[k]
        dz = g * act.grad(pre[k], acts[k + 1])
        grads[2 * k] = dz.T @ acts[k]
        grads[2 * k + 1] = dz.sum(axis=0)
        g = dz @ params.weights[k]
    dx = g[0] if cache["single"] else g
    return grads, dx


# --- optimiser ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays, **kw) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kw)


def adam_step(params: list, grads: list, state: AdamState, lr: float):
    """Bias-corrected Adam update on flat array lists. Returns new
    ``(params, state)``; the inputs are not modified."""
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and state differ in length")
    for k, g in enumerate(grads):
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient {k} has shape {g.shape}, expected {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in layer {k // 2} "
                               f"({'weight' if k % 2 == 0 else 'bias'})")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m = [b1 * mk + (1 - b1) * g for mk, g in zip(state.m, grads)]
    v = [b2 * vk + (1 - b2) * g * g for vk, g in zip(state.v, grads)]
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new = [p - lr * (mk / c1) / (np.sqrt(vk / c2) + state.eps) for p, mk, vk in zip(params, m, v)]
    return new, AdamState(m, v, t, b1, b2, state.eps)


@dataclass(frozen=True)
class TrainSchedule:
    base_lr: float = 0.0005
    total_epochs: int = 200
    decay_start_epoch: int = 100
    batch_size: int = 16

    def __post_init__(self):
        if self.base_lr < 0 or self.total_epochs < 0 or self.batch_size < 1:
            raise ValueError("invalid schedule")
        if not 0 <= self.decay_start_epoch <= max(self.total_epochs, self.decay_start_epoch):
            raise ValueError("invalid decay start")

    def to_json(self) -> dict:
        return {"base_lr": self.base_lr, "total_epochs": self.total_epochs,
                "decay_start_epoch": self.decay_start_epoch, "batch_size": self.batch_size}


def lr_at(schedule: TrainSchedule, epoch: int) -> float:
    """Constant until ``decay_start_epoch``, then linear to 0 at ``total_epochs``."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    start = min(schedule.decay_start_epoch, schedule.total_epochs)
    if epoch < start:
        return schedule.base_lr
    if epoch >= schedule.total_epochs:
        return 0.0
    frac = (schedule.total_epochs - epoch) / (schedule.total_epochs - start)
    return schedule.base_lr * frac


# --- losses ------------------------------------------------------------------------
# Every loss is a mean over all elements; the *_grad companions return d loss / d a.

def _clamp(p):
    return np.clip(np.asarray(p, dtype=float), BCE_CLAMP, 1 - BCE_CLAMP)


def bce(prediction, label) -> float:
    p = _clamp(prediction)
    y = np.broadcast_to(np.asarray(label, dtype=float), p.shape)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def bce_grad(prediction, label):
    raw = np.asarray(prediction, dtype=float)
    p = _clamp(raw)
    y = np.broadcast_to(np.asarray(label, dtype=float), p.shape)
    g = (p - y) / (p * (1 - p)) / p.size
    # the clamp is flat outside its range
    return np.where((raw > BCE_CLAMP) & (raw < 1 - BCE_CLAMP), g, 0.0)


def _check_pair(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeError(f"loss operands differ in shape: {a.shape} vs {b.shape}")
    return a, b


def l1_loss(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_grad(a, b):
    a, b = _check_pair(a, b)
    return np.sign(a - b) / a.size


def mse_loss(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def mse_grad(a, b):
    a, b = _check_pair(a, b)
    return 2.0 * (a - b) / a.size
