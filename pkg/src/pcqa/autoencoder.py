"""3D convolutional autoencoder on voxel blocks, written directly in numpy.

Analysis: three 5^3 stride-2 convolutions (ReLU). Synthesis: three 5^3
stride-2 transposed convolutions (ReLU, ReLU, sigmoid). Padding is fixed
at (1, 2) per axis so each layer halves / doubles the spatial size.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (EmptyInput, InvalidArgument, InvalidState, ParseError,
                     ReprMismatch, ShapeMismatch, TrainingDiverged)
from .voxel_metrics import CLIP_HI, CLIP_LO

KERNEL = 5
STRIDE = 2
PAD = (1, 2)
DEFAULT_CHANNELS = (16, 32, 16)
MAGIC = b"PCQAE1\n"


# ---------------------------------------------------------------------------
# convolution primitives on single samples shaped (C, X, Y, Z)


def _windows(x):
    """Strided 5^3 patches of the padded input: (C, O, O, O, 5, 5, 5)."""
    xp = np.pad(x, ((0, 0), PAD, PAD, PAD))
    win = sliding_window_view(xp, (KERNEL,) * 3, axis=(1, 2, 3))
    return win[:, ::STRIDE, ::STRIDE, ::STRIDE]


def _scatter(cols, out_size):
    """Adjoint of ``_windows``: accumulate (C, 5, 5, 5, O, O, O) patches."""
    c, o = cols.shape[0], cols.shape[-1]
    full = out_size + sum(PAD)
    xp = np.zeros((c, full, full, full), dtype=cols.dtype)
    span = STRIDE * o
    for i in range(KERNEL):
        for j in range(KERNEL):
            for k in range(KERNEL):
                xp[:, i:i + span:STRIDE, j:j + span:STRIDE, k:k + span:STRIDE] += cols[:, i, j, k]
    lo = PAD[0]
    return xp[:, lo:lo + out_size, lo:lo + out_size, lo:lo + out_size]


def conv3d(x, weight, bias):
    """weight: (C_out, C_in, 5, 5, 5) -> output (C_out, X/2, Y/2, Z/2)."""
    win = _windows(x)
    y = np.tensordot(weight, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    return y + bias[:, None, None, None]


def conv3d_backward(x, weight, grad_out):
    win = _windows(x)
    d_weight = np.tensordot(grad_out, win, axes=([1, 2, 3], [1, 2, 3]))
    d_bias = grad_out.sum(axis=(1, 2, 3))
    d_x = _scatter(np.tensordot(weight, grad_out, axes=([0], [0])), x.shape[1])
    return d_x, d_weight, d_bias


def conv3d_transpose(y, weight, bias):
    """weight: (C_in, C_out, 5, 5, 5) -> output (C_out, 2X, 2Y, 2Z)."""
    cols = np.tensordot(weight, y, axes=([0], [0]))
    return _scatter(cols, STRIDE * y.shape[1]) + bias[:, None, None, None]


def conv3d_transpose_backward(y, weight, grad_out):
    win = _windows(grad_out)
    d_y = np.tensordot(weight, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    d_weight = np.tensordot(y, win, axes=([1, 2, 3], [1, 2, 3]))
    d_bias = grad_out.sum(axis=(1, 2, 3))
    return d_y, d_weight, d_bias


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1 + e)
    return out


# ---------------------------------------------------------------------------
# parameters


@dataclass
class LayerSpec:
    kind: str  # "conv" | "transposed_conv"
    in_channels: int
    out_channels: int
    activation: str  # "relu" | "sigmoid"
    kernel: int = KERNEL
    stride: int = STRIDE

    def weight_shape(self):
        if self.kind == "conv":
            return (self.out_channels, self.in_channels) + (self.kernel,) * 3
        return (self.in_channels, self.out_channels) + (self.kernel,) * 3


@dataclass
class Layer:
    spec: LayerSpec
    weight: np.ndarray
    bias: np.ndarray


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 1
    steps: int = 500
    seed: int = 0
    loss: str = "focal"  # "focal" | "adaptive_mse"
    alpha: float = 0.75
    gamma: float = 2.0
    beta: float = 0.01
    clip_lo: float = CLIP_LO
    clip_hi: float = CLIP_HI
    channels: tuple = DEFAULT_CHANNELS

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.loss not in ("focal", "adaptive_mse"):
            raise InvalidArgument(f"unknown loss {self.loss!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise InvalidArgument("batch_size must be >= 1 and steps >= 0")
        if not 0 < self.beta < 0.5:
            raise InvalidArgument("beta must lie in (0, 0.5)")
        if len(self.channels) != 3:
            raise InvalidArgument("channels needs three entries")


@dataclass
class AutoencoderParams:
    analysis: list
    synthesis: list
    repr: str
    hyperparams: dict = field(default_factory=dict)

    @property
    def layers(self):
        return list(self.analysis) + list(self.synthesis)

    @property
    def latent_channels(self):
        return self.analysis[-1].spec.out_channels

    def arrays(self):
        """(name, array) pairs in checkpoint order."""
        out = []
        for part, layers in (("analysis", self.analysis), ("synthesis", self.synthesis)):
            for i, layer in enumerate(layers):
                out.append((f"{part}.{i}.weight", layer.weight))
                out.append((f"{part}.{i}.bias", layer.bias))
        return out

    def astype(self, dtype):
        def conv(layers):
            return [Layer(l.spec, l.weight.astype(dtype), l.bias.astype(dtype)) for l in layers]
        return AutoencoderParams(conv(self.analysis), conv(self.synthesis), self.repr,
                                 dict(self.hyperparams))

    def copy(self):
        return self.astype(self.analysis[0].weight.dtype)


def layer_specs(channels=DEFAULT_CHANNELS):
    c1, c2, c3 = channels
    analysis = [LayerSpec("conv", 1, c1, "relu"),
                LayerSpec("conv", c1, c2, "relu"),
                LayerSpec("conv", c2, c3, "relu")]
    synthesis = [LayerSpec("transposed_conv", c3, c2, "relu"),
                 LayerSpec("transposed_conv", c2, c1, "relu"),
                 LayerSpec("transposed_conv", c1, 1, "sigmoid")]
    return analysis, synthesis


def init_params(channels=DEFAULT_CHANNELS, repr="tdf", seed=0, dtype=np.float32):
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    analysis, synthesis = layer_specs(channels)

    def make(spec):
        fan_in = spec.in_channels * spec.kernel ** 3
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=spec.weight_shape()).astype(dtype)
        return Layer(spec, w, np.zeros(spec.out_channels, dtype=dtype))

    return AutoencoderParams([make(s) for s in analysis], [make(s) for s in synthesis], repr,
                             {"channels": list(channels), "seed": seed})


# ---------------------------------------------------------------------------
# forward / backward


def _check_input(x, params):
    if x.ndim != 4 or x.shape[0] != params.analysis[0].spec.in_channels:
        raise ShapeMismatch(f"expected input (1, S, S, S), got {x.shape}")
    s = x.shape[1]
    if x.shape[1:] != (s, s, s) or s % 8:
        raise ShapeMismatch(f"spatial size must be cubic and divisible by 8, got {x.shape[1:]}")


def _apply(layer, x):
    if layer.spec.kind == "conv":
        pre = conv3d(x, layer.weight, layer.bias)
    else:
        pre = conv3d_transpose(x, layer.weight, layer.bias)
    return relu(pre) if layer.spec.activation == "relu" else sigmoid(pre)


def analysis_forward(x, params: AutoencoderParams):
    """Latent tensor (F, S/8, S/8, S/8) for an input block (1, S, S, S)."""
    x = np.asarray(x)
    _check_input(x, params)
    for layer in params.analysis:
        x = _apply(layer, x)
    return x


def synthesis_forward(y, params: AutoencoderParams):
    """Reconstruction (1, 8W, 8D, 8H) in (0, 1) from a latent tensor."""
    y = np.asarray(y)
    if y.ndim != 4 or y.shape[0] != params.synthesis[0].spec.in_channels:
        raise ShapeMismatch(f"latent shape {y.shape} does not match parameters")
    for layer in params.synthesis:
        y = _apply(layer, y)
    return y


class Autoencoder:
    """Forward pass that records activations so ``backward`` can run."""

    def __init__(self, params: AutoencoderParams):
        self.params = params
        self._trace = None

    def forward(self, x):
        x = np.asarray(x)
        _check_input(x, self.params)
        trace = []
        for layer in self.params.layers:
            out = _apply(layer, x)
            trace.append((x, out))
            x = out
        self._trace = trace
        return x

    def backward(self, grad_out):
        """Parameter gradients [(d_weight, d_bias), ...] in layer order."""
        if self._trace is None:
            raise InvalidState("backward called without a recorded forward pass")
        layers = self.params.layers
        grads = [None] * len(layers)
        g = np.asarray(grad_out)
        for i in reversed(range(len(layers))):
            layer = layers[i]
            x, out = self._trace[i]
            if g.shape != out.shape:
                raise ShapeMismatch(f"gradient shape {g.shape} != output shape {out.shape}")
            if layer.spec.activation == "relu":
                g = g * (out > 0)
            else:
                g = g * out * (1 - out)
            if layer.spec.kind == "conv":
                g, dw, db = conv3d_backward(x, layer.weight, g)
            else:
                g, dw, db = conv3d_transpose_backward(x, layer.weight, g)
            grads[i] = (dw, db)
        return grads


# ---------------------------------------------------------------------------
# training losses (value and gradient w.r.t. the prediction)


def focal_loss_grad(x_a, x_b, alpha=0.75, gamma=2.0, clip_lo=CLIP_LO, clip_hi=CLIP_HI):
    """Summed focal loss and its gradient w.r.t. the predicted probabilities.

    Gradients through the clipped logs vanish outside [clip_lo, clip_hi].
    """
    a = np.asarray(x_a)
    b = np.asarray(x_b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    nb = 1 - b
    cb = np.clip(b, clip_lo, clip_hi)
    cnb = np.clip(nb, clip_lo, clip_hi)
    log_b, log_nb = np.log(cb), np.log(cnb)
    inside_b = (b > clip_lo) & (b < clip_hi)
    inside_nb = (nb > clip_lo) & (nb < clip_hi)

    mod_pos = nb ** gamma
    mod_neg = b ** gamma
    loss = -np.sum(alpha * a * mod_pos * log_b + (1 - alpha) * (1 - a) * mod_neg * log_nb)

    with np.errstate(divide="ignore", invalid="ignore"):
        dmod_pos = np.where(nb > 0, gamma * nb ** (gamma - 1), 0.0) if gamma else 0.0
        dmod_neg = np.where(b > 0, gamma * b ** (gamma - 1), 0.0) if gamma else 0.0
        dlog_b = np.where(inside_b, 1 / cb, 0.0)
        dlog_nb = np.where(inside_nb, -1 / cnb, 0.0)
    d_pos = -dmod_pos * log_b + mod_pos * dlog_b
    d_neg = dmod_neg * log_nb + mod_neg * dlog_nb
    grad = -(alpha * a * d_pos + (1 - alpha) * (1 - a) * d_neg)
    return float(loss), grad.astype(b.dtype, copy=False)


def adaptive_weight(x_a, beta=0.01):
    """Share of voxels closer than the truncation distance, clamped to [beta, 1-beta]."""
    x_a = np.asarray(x_a)
    near = np.count_nonzero(x_a < 1) / x_a.size
    return min(max(near, beta), 1 - beta)


def adaptive_mse_loss(x_a, x_b, beta=0.01):
    """Class-balanced MSE on TDF grids and its gradient w.r.t. x_b.

    Voxels at the truncation value (x_a == 1) are weighted by w, the others
    by 1 - w, where w is the clamped share of near voxels.
    """
    a = np.asarray(x_a)
    b = np.asarray(x_b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    w = adaptive_weight(a, beta)
    weights = np.where(a == 1, w, 1 - w).astype(b.dtype)
    diff = a - b
    n = a.size
    loss = float(np.sum(weights * diff * diff) / n)
    grad = (-2.0 / n) * weights * diff
    return loss, grad.astype(b.dtype, copy=False)


def loss_and_grad(x_a, x_b, cfg: TrainConfig):
    if cfg.loss == "focal":
        return focal_loss_grad(x_a, x_b, cfg.alpha, cfg.gamma, cfg.clip_lo, cfg.clip_hi)
    return adaptive_mse_loss(x_a, x_b, cfg.beta)


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, arrays, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]

    def step(self, arrays, grads):
        """Update ``arrays`` in place."""
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def _param_arrays(params):
    out = []
    for layer in params.layers:
        out.extend((layer.weight, layer.bias))
    return out


def sample_gradient(params, x, cfg: TrainConfig):
    net = Autoencoder(params)
    recon = net.forward(x)
    loss, g = loss_and_grad(x, recon, cfg)
    grads = net.backward(g)
    flat = []
    for dw, db in grads:
        flat.extend((dw, db))
    return loss, flat


def batch_gradient(params, batch, cfg: TrainConfig, threads=1):
    """Mean loss and gradients over a batch.

    Per-sample results are reduced in batch order, so the outcome does not
    depend on ``threads``.
    """
    if threads > 1 and len(batch) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda x: sample_gradient(params, x, cfg), batch))
    else:
        results = [sample_gradient(params, x, cfg) for x in batch]
    loss = 0.0
    total = [np.zeros_like(a) for a in _param_arrays(params)]
    for sample_loss, grads in results:
        loss += sample_loss
        for acc, g in zip(total, grads):
            acc += g
    n = len(batch)
    return loss / n, [g / n for g in total]


def evaluate_loss(params, blocks, cfg: TrainConfig):
    losses = []
    for x in blocks:
        recon = synthesis_forward(analysis_forward(x, params), params)
        losses.append(loss_and_grad(x, recon, cfg)[0])
    return float(np.mean(losses))


def _as_dataset(blocks, dtype):
    data = [np.asarray(b, dtype=dtype) for b in blocks]
    if not data:
        raise EmptyInput("training needs at least one block")
    data = [d[None] if d.ndim == 3 else d for d in data]
    shape = data[0].shape
    if any(d.shape != shape for d in data):
        raise ShapeMismatch("all training blocks must share one shape")
    return data


def train(blocks, cfg: TrainConfig = TrainConfig(), repr="tdf", history=None, threads=1,
          dtype=np.float32, params=None) -> AutoencoderParams:
    """Fit the autoencoder with Adam.

    ``blocks`` are (S, S, S) or (1, S, S, S) grids. Per-step batch losses
    are appended to ``history`` when given. Deterministic for a fixed seed.
    """
    data = _as_dataset(blocks, dtype)
    if params is None:
        params = init_params(cfg.channels, repr, cfg.seed, dtype)
    else:
        params = params.astype(dtype)
    params.hyperparams = {"train": _config_dict(cfg), "seed": cfg.seed}
    arrays = _param_arrays(params)
    opt = Adam(arrays, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    rng = np.random.default_rng(cfg.seed)
    queue = []
    for step in range(cfg.steps):
        batch = []
        while len(batch) < cfg.batch_size:
            if not queue:
                queue = list(rng.permutation(len(data)))
            batch.append(data[queue.pop(0)])
        loss, grads = batch_gradient(params, batch, cfg, threads)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDiverged(step)
        if history is not None:
            history.append(loss)
        opt.step(arrays, grads)
    return params


def _config_dict(cfg):
    d = asdict(cfg)
    d["channels"] = list(cfg.channels)
    return d


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_params(params: AutoencoderParams, path):
    arrays = params.arrays()
    header = {
        "format": 1,
        "repr": params.repr,
        "layers": {"analysis": [asdict(l.spec) for l in params.analysis],
                   "synthesis": [asdict(l.spec) for l in params.synthesis]},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "hyperparams": params.hyperparams,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_params(path, expected_repr=None) -> AutoencoderParams:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(MAGIC):
        raise ParseError("not a checkpoint: bad magic bytes")
    pos = len(MAGIC)
    if len(data) < pos + 4:
        raise ParseError("truncated checkpoint header")
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + hlen:
        raise ParseError("truncated checkpoint header")
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}") from None
    pos += hlen
    tensors = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape))
        if len(data) < pos + nbytes:
            raise ParseError(f"truncated checkpoint data at {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(data, "<f4", int(np.prod(shape)), pos) \
            .reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(data):
        raise ParseError("trailing bytes after checkpoint data")

    def build(part):
        layers = []
        for i, spec in enumerate(header["layers"][part]):
            spec = LayerSpec(**spec)
            w, b = tensors[f"{part}.{i}.weight"], tensors[f"{part}.{i}.bias"]
            if w.shape != spec.weight_shape() or b.shape != (spec.out_channels,):
                raise ParseError(f"array shape mismatch in {part}.{i}")
            layers.append(Layer(spec, w, b))
        return layers

    params = AutoencoderParams(build("analysis"), build("synthesis"), header["repr"],
                               header.get("hyperparams", {}))
    if expected_repr is not None and params.repr != expected_repr:
        raise ReprMismatch(f"checkpoint was trained on {params.repr!r}, "
                           f"expected {expected_repr!r}")
    return params
