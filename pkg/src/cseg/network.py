"""Patch-pair convolutional classifier, written directly in numpy.

Architecture (default sizes)::

    6x37x37 -> conv5 24 -> BN -> ReLU -> maxpool2      (33 -> 16)
            -> conv5 48 -> BN -> ReLU -> maxpool2      (12 -> 6)
            -> conv5 48 -> BN -> ReLU                  (2)
            -> flatten 192 -> dense 500 -> BN -> ReLU
            -> dense 1369 -> sigmoid

The six input channels are the RGB video patch followed by the RGB
background patch. The 1369 outputs are the 37x37 patch labels in row-major
order. Activations are kept channels-last internally; :meth:`Network.forward`
takes the usual ``(N, C, H, W)`` layout.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, InputError, StateError

BCE_EPS = 1e-7


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 6
    conv_channels: tuple = (24, 48, 48)
    kernel: int = 5
    pool_after: tuple = (True, True, False)
    hidden: int = 500
    patch: int = 37
    outputs: int = 37 * 37
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    dtype: str = "float32"

    def spatial_chain(self):
        """Feature-map side after every conv and pool stage, starting at the input."""
        sides = [self.patch]
        s = self.patch
        for pool in self.pool_after:
            s = s - self.kernel + 1
            if s < 1:
                raise InputError(f"patch side {self.patch} too small for the conv stack")
            sides.append(s)
            if pool:
                s //= 2
                if s < 1:
                    raise InputError(f"patch side {self.patch} too small for the pooling stack")
                sides.append(s)
        return sides

    @property
    def flat_features(self):
        return self.spatial_chain()[-1] ** 2 * self.conv_channels[-1]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        d["pool_after"] = tuple(d["pool_after"])
        return cls(**d)


# ---------------------------------------------------------------------------
# layers (channels-last activations)
# ---------------------------------------------------------------------------

def _im2col(x, k):
    # Column order is (kh, kw, C) so that per-offset slices stay contiguous.
    n, h, w, c = x.shape
    windows = sliding_window_view(x, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(windows).reshape(n * (h - k + 1) * (w - k + 1), k * k * c)


def conv_forward(x, w, b):
    """Valid cross-correlation. ``x``: (N, H, W, C), ``w``: (F, C, k, k)."""
    n, h, wd, c = x.shape
    f, cw, k, _ = w.shape
    if cw != c:
        raise InputError(f"conv expects {cw} input channels, got {c}")
    ho, wo = h - k + 1, wd - k + 1
    cols = _im2col(x, k)
    wmat = w.transpose(0, 2, 3, 1).reshape(f, -1)
    out = (cols @ wmat.T + b).reshape(n, ho, wo, f)
    return out, (x.shape, cols, w)


def conv_backward(dout, cache, need_dx=True):
    x_shape, cols, w = cache
    n, h, wd, c = x_shape
    f, _, k, _ = w.shape
    ho, wo = dout.shape[1:3]
    d2 = dout.reshape(-1, f)
    dw = (d2.T @ cols).reshape(f, k, k, c).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, np.ascontiguousarray(dw), db
    dcols = (d2 @ w.transpose(0, 2, 3, 1).reshape(f, -1)).reshape(n, ho, wo, k, k, c)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
    return dx, np.ascontiguousarray(dw), db


def maxpool_forward(x, need_index=True):
    """2x2 max pooling, stride 2; a trailing odd row/column is dropped."""
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    xr = x[:, :2 * h2, :2 * w2].reshape(n, h2, 2, w2, 2, c)
    if not need_index:
        return xr.max(axis=(2, 4)), None
    xr = xr.transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool_backward(dout, cache):
    x_shape, idx = cache
    n, h, w, c = x_shape
    h2, w2 = idx.shape[1:3]
    d = np.zeros(idx.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(d, idx[..., None], dout[..., None], axis=-1)
    d = d.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :2 * h2, :2 * w2] = d
    return dx


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, momentum=0.9, eps=1e-5):
    """Batch normalisation over every axis but the last.

    In training mode the running statistics are updated in place.
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = x.size // x.shape[-1]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, gamma)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma = cache
    axes = tuple(range(dout.ndim - 1))
    m = dout.size // dout.shape[-1]
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def dense_forward(x, w, b):
    return x @ w.T + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, cache):
    return dout * cache


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_masked(pred, target, ignore=None) -> float:
    """Mean binary cross-entropy over the positions not flagged in ``ignore``.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]``. Returns 0 when every
    position is ignored.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    valid = np.ones(pred.shape, bool) if ignore is None else ~np.asarray(ignore, bool)
    count = int(valid.sum())
    if count == 0:
        return 0.0
    y = np.clip(pred[valid], BCE_EPS, 1.0 - BCE_EPS)
    x = target[valid]
    return float(-(x * np.log(y) + (1.0 - x) * np.log(1.0 - y)).sum() / count)


def bce_logit_grad(pred, target, ignore=None):
    """d(mean masked BCE)/d(logit) for a sigmoid output layer."""
    valid = np.ones(pred.shape, bool) if ignore is None else ~np.asarray(ignore, bool)
    count = int(valid.sum())
    if count == 0:
        return np.zeros_like(pred)
    return (pred - target.astype(pred.dtype)) * valid / pred.dtype.type(count)


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

def _glorot(rng, shape, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class Network:
    """Parameters, batch-norm buffers and the input mean of one classifier."""

    config: NetworkConfig = field(default_factory=NetworkConfig)
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    input_mean: np.ndarray | None = None

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    @property
    def n_bn(self):
        return len(self.config.conv_channels) + 1

    @classmethod
    def init(cls, seed: int = 0, config: NetworkConfig | None = None) -> "Network":
        """Glorot-uniform weights, zero biases, identity batch norm."""
        cfg = config or NetworkConfig()
        dt = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        k2 = cfg.kernel * cfg.kernel
        params, buffers = {}, {}
        c_in = cfg.in_channels
        for i, c_out in enumerate(cfg.conv_channels, start=1):
            params[f"conv{i}.w"] = _glorot(rng, (c_out, c_in, cfg.kernel, cfg.kernel), c_in * k2, c_out * k2, dt)
            params[f"conv{i}.b"] = np.zeros(c_out, dt)
            c_in = c_out
        dense = [(cfg.flat_features, cfg.hidden), (cfg.hidden, cfg.outputs)]
        for i, (fi, fo) in enumerate(dense, start=1):
            params[f"fc{i}.w"] = _glorot(rng, (fo, fi), fi, fo, dt)
            params[f"fc{i}.b"] = np.zeros(fo, dt)
        widths = list(cfg.conv_channels) + [cfg.hidden]
        for i, width in enumerate(widths, start=1):
            params[f"bn{i}.gamma"] = np.ones(width, dt)
            params[f"bn{i}.beta"] = np.zeros(width, dt)
            buffers[f"bn{i}.running_mean"] = np.zeros(width, dt)
            buffers[f"bn{i}.running_var"] = np.ones(width, dt)
        return cls(cfg, params, buffers, None)

    def copy(self) -> "Network":
        mean = None if self.input_mean is None else self.input_mean.copy()
        return Network(self.config, {k: v.copy() for k, v in self.params.items()},
                       {k: v.copy() for k, v in self.buffers.items()}, mean)

    def _bn(self, i, x, train, caches):
        cfg = self.config
        out, cache = batchnorm_forward(x, self.params[f"bn{i}.gamma"], self.params[f"bn{i}.beta"],
                                       self.buffers[f"bn{i}.running_mean"], self.buffers[f"bn{i}.running_var"],
                                       train, cfg.bn_momentum, cfg.bn_eps)
        caches[f"bn{i}"] = cache
        return out

    def forward(self, x, train: bool = False, return_cache: bool = False):
        """Scores in (0, 1) of shape ``(N, outputs)`` for ``x`` of shape ``(N, C, P, P)``.

        ``train=True`` normalises with batch statistics and updates the
        running averages; otherwise the running averages are used.
        """
        cfg = self.config
        x = np.asarray(x)
        expected = (cfg.in_channels, cfg.patch, cfg.patch)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise InputError(f"network expects input (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        a = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=self.dtype)
        caches = {}
        for i, pool in enumerate(cfg.pool_after, start=1):
            a, caches[f"conv{i}"] = conv_forward(a, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"])
            a = self._bn(i, a, train, caches)
            a, caches[f"relu{i}"] = relu_forward(a)
            if pool:
                a, caches[f"pool{i}"] = maxpool_forward(a, need_index=train or return_cache)
        caches["flat_shape"] = a.shape
        a = a.reshape(a.shape[0], -1)
        nb = self.n_bn
        a, caches["fc1"] = dense_forward(a, self.params["fc1.w"], self.params["fc1.b"])
        a = self._bn(nb, a, train, caches)
        a, caches[f"relu{nb}"] = relu_forward(a)
        z, caches["fc2"] = dense_forward(a, self.params["fc2.w"], self.params["fc2.b"])
        y = sigmoid(z)
        if return_cache:
            return y, caches
        return y

    def backward(self, pred, caches, target, ignore=None) -> dict:
        """Gradients of the mean masked BCE with respect to every parameter."""
        cfg = self.config
        grads = {}
        nb = self.n_bn
        d = bce_logit_grad(pred, np.asarray(target), ignore)
        d, grads["fc2.w"], grads["fc2.b"] = dense_backward(d, caches["fc2"])
        d = relu_backward(d, caches[f"relu{nb}"])
        d, grads[f"bn{nb}.gamma"], grads[f"bn{nb}.beta"] = batchnorm_backward(d, caches[f"bn{nb}"])
        d, grads["fc1.w"], grads["fc1.b"] = dense_backward(d, caches["fc1"])
        d = d.reshape(caches["flat_shape"])
        for i in range(len(cfg.pool_after), 0, -1):
            if cfg.pool_after[i - 1]:
                d = maxpool_backward(d, caches[f"pool{i}"])
            d = relu_backward(d, caches[f"relu{i}"])
            d, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = batchnorm_backward(d, caches[f"bn{i}"])
            d, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv_backward(d, caches[f"conv{i}"], need_dx=i > 1)
        return {k: g.astype(self.dtype, copy=False) for k, g in grads.items()}

    def loss_and_grads(self, x, target, ignore=None):
        pred, caches = self.forward(x, train=True, return_cache=True)
        return bce_masked(pred, target, ignore), self.backward(pred, caches, target, ignore)

    def predict(self, x, batch_size: int = 256):
        """Inference-mode scores, computed in chunks."""
        out = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.config.outputs), self.dtype)
        return np.concatenate(out)

    def require_mean(self):
        if self.input_mean is None:
            raise StateError("network has no training mean; train it or load a trained model")
        return self.input_mean


def init_params(seed: int = 0, config: NetworkConfig | None = None) -> Network:
    return Network.init(seed, config)


class RmsProp:
    """acc <- decay * acc + (1 - decay) * g^2;  p <- p - lr * g / sqrt(acc + eps)."""

    def __init__(self, lr: float = 2.5e-3, decay: float = 0.9, eps: float = 1e-8):
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.acc = {}

    def step(self, params: dict, grads: dict):
        for name, g in grads.items():
            p = params[name]
            acc = self.acc.get(name)
            if acc is None:
                acc = self.acc[name] = np.zeros_like(p)
            acc *= self.decay
            acc += (1.0 - self.decay) * g * g
            p -= (self.lr * g / np.sqrt(acc + self.eps)).astype(p.dtype, copy=False)


def rmsprop_step(params: dict, grads: dict, state: RmsProp) -> dict:
    state.step(params, grads)
    return params


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"CSEG"
MODEL_VERSION = 1


def _tensor_table(net: Network, optimizer: RmsProp | None):
    table = [(f"param/{k}", v) for k, v in net.params.items()]
    table += [(f"buffer/{k}", v) for k, v in net.buffers.items()]
    if net.input_mean is not None:
        table.append(("input_mean", net.input_mean))
    if optimizer is not None:
        table += [(f"rmsprop/{k}", v) for k, v in optimizer.acc.items()]
    return table


def save_model(path, net: Network, optimizer: RmsProp | None = None):
    """Write ``net`` (and optionally the optimizer accumulators).

    Layout: magic ``CSEG``, uint32 version, uint32 header length, JSON header
    (config plus the tensor table of names and shapes), little-endian float32
    tensor data in table order, trailing CRC-32 of everything before it.
    """
    table = _tensor_table(net, optimizer)
    header = {
        "config": asdict(net.config),
        "tensors": [[name, list(arr.shape)] for name, arr in table],
    }
    if optimizer is not None:
        header["rmsprop"] = {"lr": optimizer.lr, "decay": optimizer.decay, "eps": optimizer.eps}
    hdr = json.dumps(header, sort_keys=True).encode()
    body = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(hdr)), hdr]
    body += [np.ascontiguousarray(arr, dtype="<f4").tobytes() for _, arr in table]
    blob = b"".join(body)
    Path(path).write_bytes(blob + struct.pack("<I", zlib.crc32(blob)))


def load_model(path, with_optimizer: bool = False):
    """Read a model file; returns a :class:`Network` (and optimizer if asked)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read model {path}: {exc}") from exc
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated model file")
    if raw[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {MODEL_MAGIC!r}")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: model format version {version}, this reader supports version {MODEL_VERSION}")
    blob, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    try:
        header = json.loads(raw[12:12 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt header") from exc
    need = 12 + hlen + 4 * sum(int(np.prod(s)) for _, s in header["tensors"]) + 4
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, file has {len(raw)} (truncated?)")
    if zlib.crc32(blob) != crc:
        raise FormatError(f"{path}: checksum mismatch")

    cfg = NetworkConfig.from_dict(header["config"])
    dt = np.dtype(cfg.dtype)
    net = Network(cfg, {}, {}, None)
    opt = None
    if "rmsprop" in header:
        opt = RmsProp(**header["rmsprop"])
    off = 12 + hlen
    for name, shape in header["tensors"]:
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape).astype(dt)
        off += 4 * n
        kind, _, key = name.partition("/")
        if kind == "param":
            net.params[key] = arr
        elif kind == "buffer":
            net.buffers[key] = arr
        elif kind == "rmsprop" and opt is not None:
            opt.acc[key] = arr
        elif name == "input_mean":
            net.input_mean = arr
    if with_optimizer:
        return net, opt
    return net
