"""Toy-scale AUTOMAP-style regression network with manual backpropagation.

Architecture: FC(tanh) -> FC(tanh) -> reshape to an image -> Conv 5x5
(ReLU) -> Conv 5x5 (ReLU) -> transposed Conv 7x7 (linear).  All arithmetic is float64.

Two backends run the same network: ``exact`` (dense numpy) and ``chip``
(every linear layer lowered to a dot-product schedule and executed on a
simulated chip).  ``DomainMode`` restricts the numerical domain the way
intensity-only or non-negative hardware would.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .errors import NonFiniteLoss, ShapeMismatch
from .lowering import adjoint_padding, decompose_mvm, execute_schedule, lower_conv, lower_deconv, resolve_padding


class LayerKind(Enum):
    FC = 0
    CONV = 1
    DECONV = 2


class Activation(Enum):
    NONE = 0
    TANH = 1
    RELU = 2


class DomainMode(str, Enum):
    CBD = "cbd"
    CID = "cid"
    NCBD = "ncbd"
    INON = "inon"


class Backend(str, Enum):
    EXACT = "exact"
    CHIP = "chip"


@dataclass
class LayerSpec:
    kind: LayerKind
    in_dim: int  # features (FC) or channels (conv)
    out_dim: int
    kernel_size: int = 0
    activation: Activation = Activation.NONE


@dataclass
class Layer:
    spec: LayerSpec
    W: np.ndarray
    b: np.ndarray


@dataclass
class Network:
    layers: list[Layer]
    image_size: int

    def params(self):
        for layer in self.layers:
            yield layer.W
            yield layer.b

    def copy(self) -> Network:
        return Network([Layer(l.spec, l.W.copy(), l.b.copy()) for l in self.layers], self.image_size)

    def checksum(self) -> float:
        return float(sum(np.sum(p * (i + 1)) for i, p in enumerate(self.params())))

    @property
    def input_dim(self) -> int:
        return self.layers[0].spec.in_dim

    def save(self, path):
        from .formats import write_checkpoint

        write_checkpoint(path, [(l.spec.kind.value, l.spec.activation.value, [l.W, l.b]) for l in self.layers])

    @classmethod
    def load(cls, path) -> Network:
        from .formats import read_checkpoint

        layers = []
        for kind, act, (W, b) in read_checkpoint(path):
            kind = LayerKind(kind)
            if kind is LayerKind.FC:
                spec = LayerSpec(kind, W.shape[0], W.shape[1], 0, Activation(act))
            else:
                spec = LayerSpec(kind, W.shape[2], W.shape[3], W.shape[0], Activation(act))
            layers.append(Layer(spec, W, b))
        size = int(round(math.sqrt(layers[1].spec.out_dim)))
        return cls(layers, size)


def mini_automap(input_dim: int, image_size: int = 32, hidden: int = 512, channels: int = 8,
                 conv_kernel: int = 5, deconv_kernel: int = 7, seed: int = 0) -> Network:
    """Gaussian init with std 1/sqrt(fan_in), zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1E7]))
    pix = image_size * image_size
    specs = [
        LayerSpec(LayerKind.FC, input_dim, hidden, 0, Activation.TANH),
        LayerSpec(LayerKind.FC, hidden, pix, 0, Activation.TANH),
        LayerSpec(LayerKind.CONV, 1, channels, conv_kernel, Activation.RELU),
        LayerSpec(LayerKind.CONV, channels, channels, conv_kernel, Activation.RELU),
        LayerSpec(LayerKind.DECONV, channels, 1, deconv_kernel, Activation.NONE),
    ]
    layers = []
    for s in specs:
        if s.kind is LayerKind.FC:
            shape, fan_in = (s.in_dim, s.out_dim), s.in_dim
        else:
            shape, fan_in = (s.kernel_size, s.kernel_size, s.in_dim, s.out_dim), s.kernel_size ** 2 * s.in_dim
        layers.append(Layer(s, rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape), np.zeros(s.out_dim)))
    return Network(layers, image_size)


# -- convolution primitives ---------------------------------------------------


def _pad(x, pads):
    t, b, l, r = pads
    return np.pad(x, ((0, 0), (t, b), (l, r), (0, 0)))


def conv_forward(x, K, pads):
    """Batched correlation of (B, H, W, C_in) with (k, k, C_in, C_out) after zero padding.

    Returns the output and the padded input for the backward pass.
    """
    k, _, cin, cout = K.shape
    xp = _pad(x, pads)
    ho, wo = xp.shape[1] - k + 1, xp.shape[2] - k + 1
    z = np.zeros((xp.shape[0], ho, wo, cout), dtype=np.result_type(xp, K))
    for i in range(k):
        for j in range(k):
            xs = xp[:, i:i + ho, j:j + wo, :]
            if cin == 1:
                z += xs * K[i, j, 0]
            else:
                z += xs @ K[i, j]
    return z, xp


def conv_backward(dz, xp, K, pads, x_shape):
    """Gradients (dx, dK) of :func:`conv_forward`."""
    k = K.shape[0]
    ho, wo = dz.shape[1], dz.shape[2]
    dz2 = dz.reshape(-1, K.shape[3])
    dK = np.empty_like(K)
    for i in range(k):
        for j in range(k):
            xs = xp[:, i:i + ho, j:j + wo, :].reshape(-1, K.shape[2])
            dK[i, j] = xs.T @ dz2
    t, b, l, r = pads
    dx, _ = conv_forward(dz, K[::-1, ::-1].transpose(0, 1, 3, 2), (k - 1 - t, k - 1 - b, k - 1 - l, k - 1 - r))
    return dx, dK


# -- forward / backward -------------------------------------------------------


@dataclass
class ErrorInjection:
    """Additive Gaussian noise on every layer's linear output.

    ``per_layer_std`` is either one value or a dict keyed by layer kind name
    ("fc", "conv", "deconv").  With ``relative=True`` the std is multiplied
    by the dynamic range of that layer's noise-free linear output over the
    batch, matching deviations quoted as a fraction of output range.
    """

    per_layer_std: float | dict = 0.0
    seed: int = 0
    relative: bool = False

    def std_for(self, kind: LayerKind) -> float:
        if isinstance(self.per_layer_std, dict):
            return float(self.per_layer_std.get(kind.name.lower(), 0.0))
        return float(self.per_layer_std)

    @property
    def active(self) -> bool:
        if isinstance(self.per_layer_std, dict):
            return any(v > 0 for v in self.per_layer_std.values())
        return self.per_layer_std > 0


def _mode_abs_output(mode: DomainMode) -> bool:
    return mode in (DomainMode.CID, DomainMode.INON)


def _activation(layer: Layer, mode: DomainMode) -> Activation:
    if mode is DomainMode.NCBD and layer.spec.kind is LayerKind.FC:
        return Activation.RELU
    return layer.spec.activation


def _apply_act(act, z):
    if act is Activation.TANH:
        return np.tanh(z)
    if act is Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def _act_grad(act, z, a, da):
    if act is Activation.TANH:
        return da * (1.0 - a * a)
    if act is Activation.RELU:
        return da * (z > 0)
    return da


@dataclass
class ForwardResult:
    output: np.ndarray  # (B, N, N)
    h: np.ndarray  # (B, N, N, C) second conv feature maps
    cache: list = field(default_factory=list, repr=False)


def _effective_weight(layer: Layer, mode: DomainMode):
    return np.abs(layer.W) if mode is DomainMode.INON else layer.W


def _linear_exact(layer: Layer, W, a):
    kind = layer.spec.kind
    if kind is LayerKind.FC:
        return a @ W + layer.b, None
    k = layer.spec.kernel_size
    if kind is LayerKind.CONV:
        z, cols = conv_forward(a, W, resolve_padding("same", k))
    else:
        z, cols = conv_forward(a, W[::-1, ::-1], adjoint_padding("same", k))
    return z + layer.b, cols


def _linear_chip(layer: Layer, W, a, chip):
    kind = layer.spec.kind
    m = chip.n_active
    out = []
    for example in a:
        if kind is LayerKind.FC:
            sched = decompose_mvm(example, W, m)
        elif kind is LayerKind.CONV:
            sched = lower_conv(example, W, m, padding="same")
        else:
            sched = lower_deconv(example, W, m, padding="same")
        out.append(sched.reshape_output(execute_schedule(sched, chip)))
    return np.array(out) + layer.b


def forward(net: Network, x, backend: Backend | str = Backend.EXACT, mode: DomainMode | str = DomainMode.CBD,
            injection: ErrorInjection | None = None, chip=None, keep_cache: bool = False) -> ForwardResult:
    """Run the network on a batch (or a single example) of flattened inputs."""
    backend, mode = Backend(backend), DomainMode(mode)
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeMismatch(f"expected inputs of width {net.input_dim}, got {x.shape}")
    if backend is Backend.CHIP and chip is None:
        raise ValueError("chip backend needs a chip")
    rng = None
    if injection is not None and injection.active:
        rng = np.random.default_rng(np.random.SeedSequence([int(injection.seed), 0x1A7]))
    a = x
    cache = []
    h = None
    n = net.image_size
    for i, layer in enumerate(net.layers):
        if layer.spec.kind is not LayerKind.FC and a.ndim == 2:
            a = a.reshape(a.shape[0], n, n, 1)
        W = _effective_weight(layer, mode)
        if backend is Backend.EXACT:
            z, cols = _linear_exact(layer, W, a)
        else:
            z, cols = _linear_chip(layer, W, a, chip), None
        if rng is not None:
            std = injection.std_for(layer.spec.kind)
            if std > 0:
                if injection.relative:
                    std = std * float(np.ptp(z))
                z = z + rng.normal(0.0, std, size=z.shape)
        zm = np.abs(z) if _mode_abs_output(mode) else z
        act = _activation(layer, mode)
        out = _apply_act(act, zm)
        if keep_cache:
            cache.append((a, cols, z, zm, out, act))
        if i == 3:
            h = out
        a = out
    output = a[..., 0]
    if single:
        output, h = output[0], h[0]
    return ForwardResult(output, h, cache)


def loss(output, truth, h, lam: float) -> float:
    """Per-example mean of pixel MSE plus lam/(K N^2) * sum |h|."""
    output = np.asarray(output, dtype=float)
    truth = np.asarray(truth, dtype=float)
    h = np.asarray(h, dtype=float)
    if output.shape != truth.shape:
        raise ShapeMismatch(f"output {output.shape} vs truth {truth.shape}")
    if output.ndim == 2:
        output, truth, h = output[None], truth[None], h[None]
    n2 = output.shape[1] * output.shape[2]
    k = h.shape[-1]
    mse = np.sum((output - truth) ** 2, axis=(1, 2)) / n2
    pen = lam / (k * n2) * np.sum(np.abs(h), axis=(1, 2, 3))
    return float(np.mean(mse + pen))


def backward(net: Network, x, truth, lam: float, mode: DomainMode | str = DomainMode.CBD):
    """Loss and exact gradients [(dW, db) per layer] for a batch."""
    mode = DomainMode(mode)
    fr = forward(net, x, mode=mode, keep_cache=True)
    out = fr.output if fr.output.ndim == 3 else fr.output[None]
    truth = np.asarray(truth, dtype=float).reshape(out.shape)
    h = fr.h if fr.h.ndim == 4 else fr.h[None]
    value = loss(out, truth, h, lam)
    bsz = out.shape[0]
    n2 = out.shape[1] * out.shape[2]
    k = h.shape[-1]
    grads = [None] * len(net.layers)
    da = (2.0 / (bsz * n2) * (out - truth))[..., None]
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        a_in, cols, z, zm, a_out, act = fr.cache[i]
        if i == 3:
            da = da + lam / (bsz * k * n2) * np.sign(a_out)
        dz = _act_grad(act, zm, a_out, da)
        if _mode_abs_output(mode):
            dz = dz * np.sign(z)
        W = _effective_weight(layer, mode)
        kind = layer.spec.kind
        if kind is LayerKind.FC:
            dW = a_in.T @ dz
            db = dz.sum(axis=0)
            da = dz @ W.T
        else:
            kk = layer.spec.kernel_size
            db = dz.sum(axis=(0, 1, 2))
            if kind is LayerKind.CONV:
                da, dW = conv_backward(dz, cols, W, resolve_padding("same", kk), a_in.shape)
            else:
                da, dWf = conv_backward(dz, cols, W[::-1, ::-1], adjoint_padding("same", kk), a_in.shape)
                dW = dWf[::-1, ::-1]
        if mode is DomainMode.INON:
            dW = dW * np.sign(layer.W)
        grads[i] = (dW, db)
        if i > 0 and net.layers[i - 1].spec.kind is LayerKind.FC and da.ndim == 4:
            da = da.reshape(da.shape[0], -1)
    return value, grads


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    decay_epoch: int = 170
    decayed_rate: float = 1e-4
    lambda_penalty: float = 1e-4
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate if epoch < self.decay_epoch else self.decayed_rate

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def rows(self):
        return list(zip(self.epochs, self.train_loss, self.val_loss, self.lr))

    def write_csv(self, path):
        from .formats import write_csv

        write_csv(path, ["epoch", "train_loss", "val_loss", "lr"], self.rows())


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def evaluate(net: Network, x, truth, lam: float, mode=DomainMode.CBD, batch: int = 128) -> float:
    total = 0.0
    n = x.shape[0]
    for s in range(0, n, batch):
        fr = forward(net, x[s:s + batch], mode=mode)
        total += loss(fr.output, truth[s:s + batch], fr.h, lam) * min(batch, n - s)
    return total / n


def train(net: Network, train_data, val_data, config: TrainConfig, mode=DomainMode.CBD,
          progress=None) -> TrainLog:
    """Adam training in place; returns the per-epoch log."""
    mode = DomainMode(mode)
    x_tr, y_tr = train_data
    x_va, y_va = val_data
    params = list(net.params())
    opt = Adam(params, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x7A1]))
    log = TrainLog(config=config.to_dict())
    n = x_tr.shape[0]
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            value, grads = backward(net, x_tr[idx], y_tr[idx], config.lambda_penalty, mode)
            if not math.isfinite(value):
                raise NonFiniteLoss(f"loss became {value} at epoch {epoch}, batch starting {s}")
            flat = [g for pair in grads for g in pair]
            if lr > 0:
                opt.step(flat, lr)
            total += value * len(idx)
        val = evaluate(net, x_va, y_va, config.lambda_penalty, mode)
        if not math.isfinite(val):
            raise NonFiniteLoss(f"validation loss became {val} at epoch {epoch}")
        log.epochs.append(epoch)
        log.train_loss.append(total / n)
        log.val_loss.append(val)
        log.lr.append(lr)
        if progress is not None:
            progress(epoch, total / n, val)
    return log


# -- inference helpers ----------------------------------------------------------


def infer(net: Network, x, mode=DomainMode.CBD, backend=Backend.EXACT, chip=None) -> np.ndarray:
    return forward(net, x, backend=backend, mode=mode, chip=chip).output


def infer_with_injection(net: Network, x, sigma, seed: int = 0, mode=DomainMode.CBD,
                         relative: bool = True) -> np.ndarray:
    """Exact inference with Gaussian noise of std ``sigma`` on each linear output."""
    inj = ErrorInjection(per_layer_std=sigma, seed=seed, relative=relative)
    return forward(net, x, mode=mode, injection=inj).output


def image_error_std(recon, truth) -> np.ndarray:
    """Per-image std of the reconstruction error."""
    recon = np.asarray(recon, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if recon.ndim == 2:
        return np.array([np.std(recon - truth)])
    return np.std(recon - truth, axis=(1, 2))
