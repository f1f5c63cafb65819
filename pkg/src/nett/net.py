"""Encoder-decoder convolutional network with hand-written reverse mode.

A :class:`Network` is two sequential layer lists.  The encoder output is the
bottleneck ("code").  With ``skip_connections`` enabled, the activation
entering each encoder ``downsample2x`` is stored and added (last in, first
out) to the output of the first ``leaky_relu`` that follows each decoder
``upsample2x``.

Arrays are batched as ``(batch, channels, height, width)``.
"""

import copy
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import SeededRng

__all__ = [
    "Layer",
    "Network",
    "TrainSet",
    "TrainConfig",
    "TrainingDiverged",
    "unet",
    "train",
    "save_network",
    "load_network",
    "write_loss_csv",
    "output_digest",
]

LAYER_KINDS = ("conv3x3", "downsample2x", "upsample2x", "leaky_relu", "bias_add")


@dataclass
class Layer:
    kind: str
    weights: np.ndarray = None
    bias: np.ndarray = None
    slope: float = 0.1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "leaky_relu" and not 0 < self.slope < 1:
            raise ValueError("leaky ReLU slope must lie in (0, 1)")
        if self.kind == "conv3x3":
            if self.weights is None or self.weights.ndim != 4 or self.weights.shape[2:] != (3, 3):
                raise ValueError("conv3x3 needs weights of shape (out, in, 3, 3)")
            if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
                raise ValueError("conv bias must have one entry per output channel")
        if self.kind == "bias_add" and (self.bias is None or self.bias.ndim != 1):
            raise ValueError("bias_add needs a 1D bias")
        for arr in (self.weights, self.bias):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError("layer parameters must be finite")

    @property
    def params(self):
        return [p for p in (self.weights, self.bias) if p is not None]


def conv_layer(c_out, c_in, rng=None, bias=True):
    """3x3 convolution with Glorot-uniform weights (zeros if ``rng`` is None)."""
    shape = (c_out, c_in, 3, 3)
    if rng is None:
        w = np.zeros(shape)
    else:
        limit = np.sqrt(6.0 / (9 * c_in + 9 * c_out))
        w = rng.uniform(shape, -limit, limit)
    return Layer("conv3x3", w, np.zeros(c_out) if bias else None)


def _im2col(x):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # b, c, h, w, 3, 3
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * 9, h * w)


def _col2im(cols, shape):
    b, c, h, w = shape
    cols = cols.reshape(b, c, 3, 3, h, w)
    xp = np.zeros((b, c, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            xp[:, :, di : di + h, dj : dj + w] += cols[:, :, di, dj]
    return xp[:, :, 1:-1, 1:-1]


def _conv_forward(layer, x):
    b, c, h, w = x.shape
    if c != layer.weights.shape[1]:
        raise ValueError(f"conv expects {layer.weights.shape[1]} channels, got {c}")
    cols = _im2col(x)
    out = np.matmul(layer.weights.reshape(layer.weights.shape[0], -1), cols)
    if layer.bias is not None:
        out += layer.bias[None, :, None]
    return out.reshape(b, -1, h, w), cols


def _conv_backward(layer, cols, x_shape, g, need_input=True):
    b, o, h, w = g.shape
    g2 = g.reshape(b, o, h * w)
    dw = np.einsum("bop,bkp->ok", g2, cols).reshape(layer.weights.shape)
    grads = [dw]
    if layer.bias is not None:
        grads.append(g2.sum(axis=(0, 2)))
    dx = None
    if need_input:
        dcols = np.matmul(layer.weights.reshape(o, -1).T, g2)
        dx = _col2im(dcols, x_shape)
    return grads, dx


def _pool_forward(x):
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("downsample2x needs even spatial size")
    blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = np.argmax(blocks, axis=-1)  # first index on ties
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(arg, g):
    b, c, h2, w2 = g.shape
    blocks = np.zeros((b, c, h2, w2, 4))
    np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
    return blocks.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)


def _upsample(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _upsample_backward(g):
    b, c, h, w = g.shape
    return g.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _lrelu(x, slope):
    return np.where(x > 0, x, slope * x)


def _lrelu_grad(x, slope, g):
    return np.where(x > 0, g, slope * g)


class Network:
    """Sequential encoder and decoder with optional skip connections.

    Parameters
    ----------
    encoder_layers, decoder_layers : list of Layer
    input_shape : tuple of int
        Spatial ``(height, width)`` of the single-channel input image.
    skip_connections : bool
    """

    def __init__(self, encoder_layers, decoder_layers, input_shape, skip_connections=True):
        self.encoder_layers = list(encoder_layers)
        self.decoder_layers = list(decoder_layers)
        self.input_shape = tuple(input_shape)
        self.skip_connections = bool(skip_connections)
        self._frozen = False
        self.bottleneck_shape = self._infer_shapes()

    def _infer_shapes(self):
        x = np.zeros((1, 1) + self.input_shape)
        code, out, _ = self._run(x, tape=False)
        if out.shape != (1, 1) + self.input_shape:
            raise ValueError(f"network maps {self.input_shape} to {out.shape[1:]}, not an image")
        return code.shape[1:]

    @property
    def layers(self):
        return self.encoder_layers + self.decoder_layers

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def parameter_count(self):
        return sum(p.size for p in self.params)

    def frozen(self):
        """Deep copy with read-only parameters."""
        net = copy.deepcopy(self)
        for p in net.params:
            p.setflags(write=False)
        net._frozen = True
        return net

    def copy(self):
        net = copy.deepcopy(self)
        for p in net.params:
            p.setflags(write=True)
        net._frozen = False
        return net

    # forward -----------------------------------------------------------

    def _layer_forward(self, layer, h, rec):
        if layer.kind == "conv3x3":
            out, cols = _conv_forward(layer, h)
            rec.append((h.shape, cols))
            return out
        if layer.kind == "bias_add":
            if h.shape[1] != layer.bias.shape[0]:
                raise ValueError("bias_add channel mismatch")
            rec.append(None)
            return h + layer.bias[None, :, None, None]
        if layer.kind == "leaky_relu":
            rec.append(h)
            return _lrelu(h, layer.slope)
        if layer.kind == "downsample2x":
            out, arg = _pool_forward(h)
            rec.append(arg)
            return out
        rec.append(None)
        return _upsample(h)

    def _run(self, x, tape=True, decode=True):
        enc_rec, dec_rec, skips = [], [], []
        h = x
        for layer in self.encoder_layers:
            if layer.kind == "downsample2x" and self.skip_connections:
                skips.append(h)
            h = self._layer_forward(layer, h, enc_rec)
        code = h
        if not decode:
            return code, None, (enc_rec, None, None) if tape else None
        pending = False
        skip_points = []
        for i, layer in enumerate(self.decoder_layers):
            h = self._layer_forward(layer, h, dec_rec)
            if layer.kind == "upsample2x":
                pending = True
            elif layer.kind == "leaky_relu" and pending and self.skip_connections and skips:
                s = skips.pop()
                if s.shape != h.shape:
                    raise ValueError(f"skip connection shape mismatch {s.shape} vs {h.shape}")
                h = h + s
                skip_points.append(i)
                pending = False
        if self.skip_connections and skips:
            raise ValueError("unmatched skip connection sources")
        return code, h, (enc_rec, dec_rec, skip_points) if tape else None

    def _batch(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            return x[None, None], True
        if x.ndim == 3 and x.shape[1:] == self.input_shape:
            return x[:, None], False
        raise ValueError(f"expected input of shape {self.input_shape}, got {x.shape}")

    def forward(self, x):
        """Evaluate the network; returns ``(output, bottleneck)``.

        ``x`` is a single image ``(H, W)`` or a batch ``(B, H, W)``.
        """
        xb, single = self._batch(x)
        code, out, _ = self._run(xb, tape=False)
        if single:
            return out[0, 0], code[0]
        return out[:, 0], code

    def encode(self, x, return_tape=False):
        xb, single = self._batch(x)
        code, _, tape = self._run(xb, tape=return_tape, decode=False)
        code = code[0] if single else code
        if return_tape:
            return code, (tape, single)
        return code

    # reverse mode --------------------------------------------------------

    def _layer_backward(self, layer, rec, g, grads, need_input=True):
        if layer.kind == "conv3x3":
            shape, cols = rec
            pg, dx = _conv_backward(layer, cols, shape, g, need_input)
            grads.append(pg)
            return dx
        if layer.kind == "bias_add":
            grads.append([g.sum(axis=(0, 2, 3))])
            return g
        if layer.kind == "leaky_relu":
            return _lrelu_grad(rec, layer.slope, g)
        if layer.kind == "downsample2x":
            return _pool_backward(rec, g)
        return _upsample_backward(g)

    def _backward(self, tape, g_out=None, g_code=None):
        enc_rec, dec_rec, skip_points = tape
        dec_grads, skip_grads = [], []
        g = g_out
        if g_out is not None:
            for i in range(len(self.decoder_layers) - 1, -1, -1):
                if i in skip_points:
                    skip_grads.append(g)
                g = self._layer_backward(self.decoder_layers[i], dec_rec[i], g, dec_grads)
            if g_code is not None:
                g = g + g_code
        else:
            g = g_code
        # collected shallowest-first, so pop() yields the deepest skip first,
        # the order in which the encoder backward pass meets them
        enc_grads = []
        for i in range(len(self.encoder_layers) - 1, -1, -1):
            layer = self.encoder_layers[i]
            g = self._layer_backward(layer, enc_rec[i], g, enc_grads)
            if layer.kind == "downsample2x" and self.skip_connections and skip_grads:
                g = g + skip_grads.pop()
        flat = [p for lg in reversed(enc_grads) for p in lg]
        flat += [p for lg in reversed(dec_grads) for p in lg]
        return flat, g

    def backprop(self, x, loss_grad_at_output, code_grad=None):
        """Reverse-mode gradients of ``<output, g>`` (+ ``<code, code_grad>``).

        Returns ``(param_grads, input_grad)``; ``param_grads`` follows the
        order of :attr:`params`.
        """
        xb, single = self._batch(x)
        g = np.asarray(loss_grad_at_output, dtype=np.float64)
        g = g[None, None] if single else g[:, None]
        _, out, tape = self._run(xb)
        if g.shape != out.shape:
            raise ValueError(f"output gradient shape {g.shape} does not match {out.shape}")
        if code_grad is not None:
            code_grad = np.asarray(code_grad, dtype=np.float64)
            code_grad = code_grad[None] if single else code_grad
        grads, gx = self._backward(tape, g, code_grad)
        return grads, (gx[0, 0] if single else gx[:, 0])

    def encoder_input_gradient(self, tape, code_grad):
        """Input gradient of ``<code, code_grad>`` from a tape of :meth:`encode`."""
        (enc_rec, _, _), single = tape
        g = np.asarray(code_grad, dtype=np.float64)
        g = g[None] if single else g
        for i in range(len(self.encoder_layers) - 1, -1, -1):
            g = self._layer_backward(self.encoder_layers[i], enc_rec[i], g, [])
        return g[0, 0] if single else g[:, 0]

    def loss_and_gradients(self, inputs, targets, loss="mse"):
        """Mean per-sample loss over a batch and its parameter gradients."""
        xb = np.asarray(inputs, dtype=np.float64)[:, None]
        t = np.asarray(targets, dtype=np.float64)[:, None]
        _, out, tape = self._run(xb)
        diff = out - t
        b = xb.shape[0]
        npix = diff[0].size
        if loss == "mse":
            value = float(np.sum(diff * diff)) / (b * npix)
            g = 2 * diff / (b * npix)
        elif loss == "mae":
            value = float(np.sum(np.abs(diff))) / (b * npix)
            g = np.sign(diff) / (b * npix)
        else:
            raise ValueError(f"unknown loss {loss!r}")
        grads, _ = self._backward(tape, g)
        return value, grads


def unet(input_shape=(64, 64), channels=(8, 16), bottleneck_channels=16, slope=0.1,
         skip_connections=True, seed=0):
    """Small Unet-shaped encoder-decoder.

    Encoder: per level conv3x3 + leaky ReLU + 2x max pooling, then a
    bottleneck conv3x3 + leaky ReLU.  Decoder: per level nearest upsampling
    + conv3x3 + leaky ReLU (plus skip), then a final linear conv3x3 to one
    channel.
    """
    rng = SeededRng(seed)
    enc, dec = [], []
    c_in = 1
    for c in channels:
        enc += [conv_layer(c, c_in, rng), Layer("leaky_relu", slope=slope), Layer("downsample2x")]
        c_in = c
    enc += [conv_layer(bottleneck_channels, c_in, rng), Layer("leaky_relu", slope=slope)]
    c_in = bottleneck_channels
    for c in reversed(channels):
        dec += [Layer("upsample2x"), conv_layer(c, c_in, rng), Layer("leaky_relu", slope=slope)]
        c_in = c
    dec.append(conv_layer(1, c_in, rng))
    return Network(enc, dec, input_shape, skip_connections)


# training ---------------------------------------------------------------


@dataclass
class TrainSet:
    """Training pairs ``(input, target)`` with a tag per pair."""

    inputs: np.ndarray
    targets: np.ndarray
    tags: list
    seeds: list = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.shape != self.targets.shape or self.inputs.ndim != 3:
            raise ValueError("inputs and targets must be equally shaped (N, H, W) stacks")
        if len(self.tags) != len(self.inputs):
            raise ValueError("one tag per pair required")
        for tag, t in zip(self.tags, self.targets):
            if tag not in ("artifact", "clean"):
                raise ValueError(f"unknown tag {tag!r}")
            if tag == "clean" and np.any(t != 0):
                raise ValueError("clean pairs must have zero targets")

    def __len__(self):
        return len(self.inputs)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    loss: str = "mse"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.loss not in ("mse", "mae"):
            raise ValueError(f"unknown loss {self.loss!r}")


class TrainingDiverged(RuntimeError):
    pass


def train(net, data, cfg):
    """Mini-batch SGD with momentum on the mean per-sample loss.

    ``net`` is updated in place (it must not be frozen) and returned with the
    list of per-epoch mean losses.  The shuffle order of every epoch comes
    from ``SeededRng(cfg.seed)``.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    if getattr(net, "_frozen", False):
        raise ValueError("cannot train a frozen network")
    rng = SeededRng(cfg.seed)
    params = net.params
    velocity = [np.zeros_like(p) for p in params]
    n = len(data)
    curve = []
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                loss, grads = net.loss_and_gradients(data.inputs[idx], data.targets[idx], cfg.loss)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"loss became non-finite in epoch {epoch + 1}")
                total += loss * len(idx)
                for p, v, g in zip(params, velocity, grads):
                    v *= cfg.momentum
                    v -= cfg.learning_rate * g
                    p += v
            mean = total / n
            if not np.isfinite(mean) or any(not np.all(np.isfinite(p)) for p in params):
                raise TrainingDiverged(f"parameters became non-finite in epoch {epoch + 1}")
            curve.append(mean)
    return net, curve


def write_loss_csv(path, curve):
    lines = ["epoch,mean_loss"] + [f"{i + 1},{float(v)!r}" for i, v in enumerate(curve)]
    Path(path).write_text("\n".join(lines) + "\n")


def output_digest(values, digits=10):
    """SHA-256 of values rounded to ``digits`` significant digits."""
    v = np.asarray(values, dtype=np.float64).ravel()
    text = ",".join(np.format_float_scientific(x, precision=digits - 1, unique=False) for x in v)
    return hashlib.sha256(text.encode()).hexdigest()


# parameter file ----------------------------------------------------------

_NET_MAGIC = b"NETW"
_NET_VERSION = 1
_LAYER_STRUCT = struct.Struct("<5Id")  # kind, out_ch, in_ch, has_weights, has_bias, slope


def save_network(path, net):
    """Binary parameter file.

    ``b"NETW"``, u32 version, u32 skip flag, u32 height, u32 width, u32
    n_encoder, u32 n_decoder, one descriptor per layer (u32 kind, u32 out_ch,
    u32 in_ch, u32 has_weights, u32 has_bias, f64 slope), then every
    parameter array as little-endian f64 in declaration order.
    """
    head = _NET_MAGIC + struct.pack(
        "<6I", _NET_VERSION, int(net.skip_connections), *net.input_shape,
        len(net.encoder_layers), len(net.decoder_layers),
    )
    table = b""
    for layer in net.layers:
        w, b = layer.weights, layer.bias
        out_ch = w.shape[0] if w is not None else (b.shape[0] if b is not None else 0)
        in_ch = w.shape[1] if w is not None else 0
        table += _LAYER_STRUCT.pack(
            LAYER_KINDS.index(layer.kind), out_ch, in_ch, w is not None, b is not None, layer.slope
        )
    payload = b"".join(p.astype("<f8").tobytes() for p in net.params)
    Path(path).write_bytes(head + table + payload)


def load_network(path):
    data = Path(path).read_bytes()
    if data[:4] != _NET_MAGIC:
        raise ValueError(f"{path}: not a NETW parameter file")
    version, skip, h, w, n_enc, n_dec = struct.unpack_from("<6I", data, 4)
    if version != _NET_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 28
    descs = []
    for _ in range(n_enc + n_dec):
        descs.append(_LAYER_STRUCT.unpack_from(data, off))
        off += _LAYER_STRUCT.size
    layers = []
    for kind, out_ch, in_ch, has_w, has_b, slope in descs:
        weights = bias = None
        if has_w:
            count = out_ch * in_ch * 9
            weights = np.frombuffer(data, "<f8", count, off).reshape(out_ch, in_ch, 3, 3).copy()
            off += 8 * count
        if has_b:
            bias = np.frombuffer(data, "<f8", out_ch, off).copy()
            off += 8 * out_ch
        layers.append(Layer(LAYER_KINDS[kind], weights, bias, slope))
    if off != len(data):
        raise ValueError(f"{path}: trailing or missing parameter bytes")
    return Network(layers[:n_enc], layers[n_enc:], (h, w), bool(skip))
