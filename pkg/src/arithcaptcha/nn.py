"""LeNet-style glyph classifier written directly on numpy.

Architecture: Conv(8, 5x5) -> MaxPool 2x2 -> Conv(16, 5x5) -> MaxPool 2x2
-> Full(120) -> Full(classes) -> softmax, with a rectifier after each conv
and after the hidden full layer. Inputs are 32x32 with ink at 1.0 and
background at 0.0.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .generator import EXTENDED_CLASSES, PAPER_CLASSES
from .imagecore import GrayImage
from .preprocess import rotate

INPUT_SIZE = 32
PRESETS = {"paper82": PAPER_CLASSES, "extended94": EXTENDED_CLASSES}


def class_preset(name_or_count) -> list[str]:
    if isinstance(name_or_count, str):
        try:
            return list(PRESETS[name_or_count])
        except KeyError:
            raise ValueError(f"unknown class preset {name_or_count!r}") from None
    for labels in PRESETS.values():
        if len(labels) == name_or_count:
            return list(labels)
    raise ValueError(f"no class preset with {name_or_count} classes")


# --- layers --------------------------------------------------------------

@dataclass
class Conv:
    weight: np.ndarray  # (out, in, k, k)
    bias: np.ndarray
    relu: bool = True
    tag = 1

    @property
    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        f, c, k, _ = self.weight.shape
        n, _, h, w = x.shape
        ho, wo = h - k + 1, w - k + 1
        cols = sliding_window_view(x, (k, k), axis=(2, 3))
        cm = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        z = cm @ self.weight.reshape(f, -1).T + self.bias
        z = z.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
        if self.relu:
            mask = z > 0
            z = z * mask
        else:
            mask = None
        return z, (x.shape, cm, mask)

    def backward(self, dout, cache, need_dx=True):
        shape, cm, mask = cache
        f, c, k, _ = self.weight.shape
        n, _, h, w = shape
        ho, wo = h - k + 1, w - k + 1
        if mask is not None:
            dout = dout * mask
        dz = dout.transpose(0, 2, 3, 1).reshape(-1, f)
        dw = (dz.T @ cm).reshape(self.weight.shape)
        db = dz.sum(axis=0)
        dx = None
        if need_dx:
            dcols = (dz @ self.weight.reshape(f, -1)).reshape(n, ho, wo, c, k, k)
            dx = np.zeros(shape, dtype=dout.dtype)
            for i in range(k):
                for j in range(k):
                    dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, [dw, db]


@dataclass
class Pool:
    size: int = 2
    tag = 2

    @property
    def params(self):
        return []

    def forward(self, x):
        n, c, h, w = x.shape
        s = self.size
        win = x.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // s, w // s, s * s)
        idx = np.argmax(win, axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, dout, cache, need_dx=True):
        (n, c, h, w), idx = cache
        s = self.size
        d = np.zeros((n, c, h // s, w // s, s * s), dtype=dout.dtype)
        np.put_along_axis(d, idx[..., None], dout[..., None], axis=-1)
        dx = d.reshape(n, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return dx, []


@dataclass
class Full:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    relu: bool = False
    tag = 3

    @property
    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        shape = x.shape
        x2 = x.reshape(shape[0], -1)
        z = x2 @ self.weight.T + self.bias
        mask = None
        if self.relu:
            mask = z > 0
            z = z * mask
        return z, (shape, x2, mask)

    def backward(self, dout, cache, need_dx=True):
        shape, x2, mask = cache
        if mask is not None:
            dout = dout * mask
        dw = dout.T @ x2
        db = dout.sum(axis=0)
        dx = (dout @ self.weight).reshape(shape) if need_dx else None
        return dx, [dw, db]


LAYER_KINDS = {1: "Conv", 2: "Pool", 3: "Full"}


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax evaluated in float64."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class CnnModel:
    layers: list
    class_count: int

    @property
    def dtype(self):
        for layer in self.layers:
            if layer.params:
                return layer.params[0].dtype
        return np.dtype(np.float32)

    @property
    def classes(self) -> list[str]:
        return class_preset(self.class_count)

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def astype(self, dtype) -> "CnnModel":
        layers = []
        for layer in self.layers:
            if isinstance(layer, Pool):
                layers.append(Pool(layer.size))
            else:
                layers.append(replace(layer, weight=layer.weight.astype(dtype), bias=layer.bias.astype(dtype)))
        return CnnModel(layers, self.class_count)

    def copy(self) -> "CnnModel":
        return self.astype(self.dtype)

    def _prepare(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        if x.shape[1:] != (1, INPUT_SIZE, INPUT_SIZE):
            raise ValueError(f"expected {INPUT_SIZE}x{INPUT_SIZE} inputs, got {x.shape[-2:]}")
        return x

    def logits(self, x, start: int = 0) -> np.ndarray:
        """Run layers ``start..`` on ``x``; ``start > 0`` takes an intermediate activation as-is."""
        x = self._prepare(x) if start == 0 else np.asarray(x, dtype=self.dtype)
        for layer in self.layers[start:]:
            x, _ = layer.forward(x)
        return x

    def forward(self, x) -> np.ndarray:
        """Class probabilities, shape ``(batch, class_count)``."""
        return softmax(self.logits(x))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def loss_and_grad(self, x, labels, input_grad: bool = False):
        """Mean cross-entropy and its gradient for every parameter.

        Returns ``(loss, grads, activation_grads)`` where ``grads`` follows
        :meth:`params` order and ``activation_grads[i]`` is the gradient with
        respect to the input of layer ``i`` (only filled when ``input_grad``).
        """
        loss, grads, act_grads, _ = self._backprop(self._prepare(x), labels, input_grad)
        return loss, grads, act_grads

    def _backprop(self, x, labels, input_grad):
        labels = np.asarray(labels)
        if len(labels) == 0:
            raise ValueError("empty batch")
        caches = []
        a = x
        for layer in self.layers:
            a, cache = layer.forward(a)
            caches.append(cache)
        p = softmax(a)
        n = len(labels)
        loss = float(-np.log(np.maximum(p[np.arange(n), labels], 1e-300)).mean())
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        d = (d / n).astype(self.dtype)
        grads = []
        act_grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            need = input_grad or i > 0
            d, g = self.layers[i].backward(d, caches[i], need_dx=need)
            act_grads[i] = d
            grads[:0] = g
        return loss, grads, act_grads, p

    def activations(self, x) -> list[np.ndarray]:
        """Input to every layer (index ``i`` is what layer ``i`` consumes)."""
        a = self._prepare(x)
        out = []
        for layer in self.layers:
            out.append(a)
            a, _ = layer.forward(a)
        return out


def _uniform(rng, shape, fan_in, dtype):
    lim = np.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape).astype(dtype)


def build_paper_net(classes: Sequence[str] | int = "extended94", seed: int = 0, dtype=np.float32) -> CnnModel:
    if isinstance(classes, str):
        n = len(class_preset(classes))
    elif isinstance(classes, int):
        n = classes
    else:
        n = len(classes)
    if n < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    layers = [
        Conv(_uniform(rng, (8, 1, 5, 5), 25, dtype), np.zeros(8, dtype)),
        Pool(2),
        Conv(_uniform(rng, (16, 8, 5, 5), 200, dtype), np.zeros(16, dtype)),
        Pool(2),
        Full(_uniform(rng, (120, 400), 400, dtype), np.zeros(120, dtype), relu=True),
        Full(_uniform(rng, (n, 120), 120, dtype), np.zeros(n, dtype), relu=False),
    ]
    return CnnModel(layers, n)


# --- gradient verification ----------------------------------------------

def _rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def _pattern(m: CnnModel, start: int, a) -> bytes:
    """Rectifier masks and pooling winners downstream of layer ``start``."""
    parts = []
    for layer in m.layers[start:]:
        a, cache = layer.forward(a)
        if isinstance(layer, Pool):
            parts.append(cache[1].tobytes())
        elif cache[-1] is not None:
            parts.append(cache[-1].tobytes())
    return b"".join(parts)


def gradient_check(model: CnnModel, x, labels, eps: float = 1e-3, per_layer: int = 20, seed: int = 0) -> dict:
    """Compare analytic gradients with central differences in float64.

    For every layer, ``per_layer`` entries of its input activation are
    checked, plus ``per_layer`` entries of each parameter tensor. Entries
    whose +/-eps perturbation flips a rectifier or changes a pooling winner
    sit on a kink where no derivative exists; they are skipped and another
    entry is drawn. Returns ``{"<index>:<Kind>:<what>": (max relative error,
    entries checked, kinks skipped)}``.
    """
    m = model.astype(np.float64)
    x = m._prepare(x)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    _, grads, act_grads = m.loss_and_grad(x, labels, input_grad=True)
    acts = m.activations(x)
    n = len(labels)

    def loss_at(start, a):
        p = softmax(m.logits(a, start=start))
        return float(-np.log(p[np.arange(n), labels]).mean())

    def probe(flat, analytic, start, a):
        base = _pattern(m, start, a)
        worst, used, skipped = 0.0, 0, 0
        for idx in rng.permutation(flat.size):
            if used == per_layer:
                break
            orig = flat[idx]
            flat[idx] = orig + eps
            lp, pp = loss_at(start, a), _pattern(m, start, a)
            flat[idx] = orig - eps
            lm, pm = loss_at(start, a), _pattern(m, start, a)
            flat[idx] = orig
            if pp != base or pm != base:
                skipped += 1
                continue
            worst = max(worst, _rel_err(analytic[idx], (lp - lm) / (2 * eps)))
            used += 1
        return worst, used, skipped

    out = {}
    gi = 0
    for li, layer in enumerate(m.layers):
        kind = LAYER_KINDS[layer.tag]
        a = acts[li].copy()
        out[f"{li}:{kind}:input"] = probe(a.reshape(-1), act_grads[li].reshape(-1), li, a)
        for pname, param in zip(("weight", "bias"), layer.params):
            out[f"{li}:{kind}:{pname}"] = probe(param.reshape(-1), grads[gi].reshape(-1), 0, x)
            gi += 1
    return out


# --- training ------------------------------------------------------------

@dataclass(frozen=True)
class Hyperparams:
    lr: float = 0.01
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be >= 1 and epochs >= 0")


@dataclass(frozen=True)
class LabeledSample:
    image: GrayImage
    label: int
    angle: float = 0.0

    def __post_init__(self):
        if (self.image.width, self.image.height) != (INPUT_SIZE, INPUT_SIZE):
            raise ValueError(f"samples must be {INPUT_SIZE}x{INPUT_SIZE}")


def to_input(images) -> np.ndarray:
    """uint8 rasters (dark ink on white) -> float32 batch with ink = 1."""
    if isinstance(images, np.ndarray):
        arr = images
    else:
        arr = np.stack([im.pixels if isinstance(im, GrayImage) else np.asarray(im) for im in images])
    return (255.0 - arr.astype(np.float32)) / 255.0


@dataclass
class TrainTrace:
    epochs: list = field(default_factory=list)  # (epoch, mean loss, train accuracy)

    def to_csv(self) -> str:
        rows = ["epoch,loss,train_acc"] + [f"{e},{loss:.6f},{acc:.6f}" for e, loss, acc in self.epochs]
        return "\n".join(rows) + "\n"


def train(model: CnnModel, x, labels, hp: Hyperparams, log=None) -> tuple[CnnModel, TrainTrace]:
    """Plain minibatch SGD over a seeded shuffle; mutates and returns ``model``.

    ``x`` is a float batch from :func:`to_input`, a uint8 raster stack
    (converted one minibatch at a time, which keeps large augmented sets
    small in memory), or a list of :class:`LabeledSample`, in which case
    ``labels`` may be ``None``.
    """
    if labels is None:
        labels = np.array([s.label for s in x])
        x = np.stack([s.image.pixels for s in x])
    raw = isinstance(x, np.ndarray) and x.dtype == np.uint8
    if not raw:
        x = model._prepare(x)
    labels = np.asarray(labels, dtype=np.intp)
    if len(labels) != len(x):
        raise ValueError("images and labels differ in length")
    if len(labels) and (labels.min() < 0 or labels.max() >= model.class_count):
        raise ValueError(f"label out of range for {model.class_count} classes")
    rng = np.random.default_rng(hp.seed)
    trace = TrainTrace()
    params = model.params()
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(len(labels))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(order), hp.batch_size):
            idx = order[start:start + hp.batch_size]
            xb = model._prepare(to_input(x[idx])) if raw else x[idx]
            loss, grads, _, probs = model._backprop(xb, labels[idx], False)
            total_loss += loss * len(idx)
            correct += int((np.argmax(probs, axis=1) == labels[idx]).sum())
            if hp.lr:
                for p, g in zip(params, grads):
                    p -= hp.lr * g.astype(p.dtype, copy=False)
        # accuracy is accumulated over the epoch's minibatches, before each update
        acc = correct / max(len(labels), 1)
        trace.epochs.append((epoch, total_loss / max(len(labels), 1), acc))
        if log:
            log(f"epoch {epoch}: loss={trace.epochs[-1][1]:.4f} train_acc={acc:.4f}")
    return model, trace


def accuracy(model: CnnModel, x, labels, chunk: int = 1024) -> float:
    hits = 0
    for s in range(0, len(labels), chunk):
        hits += int((model.predict(x[s:s + chunk]) == labels[s:s + chunk]).sum())
    return hits / len(labels)


def rotation_grid(limit: float = 50, step: float = 5) -> list[float]:
    """Symmetric angle grid ``0, ±step, ±2*step, ...`` within ``±limit``."""
    if step <= 0:
        raise ValueError("rotation step must be positive")
    m = int(np.floor(limit / step + 1e-9))
    return [k * step for k in range(-m, m + 1)]


def augment_rotations(sample: LabeledSample, limit: float = 50, step: float = 5) -> list[LabeledSample]:
    return [
        LabeledSample(sample.image if a == 0 else rotate(sample.image, a, 255), sample.label, sample.angle + a)
        for a in rotation_grid(limit, step)
    ]


# --- serialization -------------------------------------------------------

MAGIC = b"CFNN"
VERSION = 1


class ModelFormatError(ValueError):
    pass


def save_model(model: CnnModel) -> bytes:
    out = [MAGIC, bytes([VERSION]), struct.pack("<II", model.class_count, len(model.layers))]
    for layer in model.layers:
        out.append(struct.pack("<B", layer.tag))
        if isinstance(layer, Conv):
            f, c, k, _ = layer.weight.shape
            out.append(struct.pack("<III", f, c, k))
        elif isinstance(layer, Pool):
            out.append(struct.pack("<I", layer.size))
        else:
            o, i = layer.weight.shape
            out.append(struct.pack("<II", o, i))
        for p in layer.params:
            out.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(out)


def load_model(data: bytes) -> CnnModel:
    if data[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {data[:4]!r}")
    if len(data) < 5 or data[4] != VERSION:
        raise ModelFormatError(f"unsupported version {data[4] if len(data) > 4 else None}")
    pos = 5

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise ModelFormatError(f"unexpected end at {what}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    class_count, layer_count = struct.unpack("<II", take(8, "header"))
    layers = []
    for k in range(layer_count):
        where = f"layer {k}"
        (tag,) = struct.unpack("<B", take(1, where))
        if tag == 1:
            f, c, ks = struct.unpack("<III", take(12, where))
            w = np.frombuffer(take(4 * f * c * ks * ks, where), "<f4").reshape(f, c, ks, ks)
            b = np.frombuffer(take(4 * f, where), "<f4")
            layers.append(Conv(w.astype(np.float32), b.astype(np.float32)))
        elif tag == 2:
            (size,) = struct.unpack("<I", take(4, where))
            layers.append(Pool(size))
        elif tag == 3:
            o, i = struct.unpack("<II", take(8, where))
            w = np.frombuffer(take(4 * o * i, where), "<f4").reshape(o, i)
            b = np.frombuffer(take(4 * o, where), "<f4")
            layers.append(Full(w.astype(np.float32), b.astype(np.float32)))
        else:
            raise ModelFormatError(f"unknown layer kind {tag} at layer {k}")
    if pos != len(data):
        raise ModelFormatError(f"{len(data) - pos} trailing bytes after layer {layer_count - 1}")
    fulls = [layer for layer in layers if isinstance(layer, Full)]
    for layer in fulls[:-1]:
        layer.relu = True
    if fulls and fulls[-1].weight.shape[0] != class_count:
        raise ModelFormatError(f"class_count {class_count} does not match output width {fulls[-1].weight.shape[0]}")
    return CnnModel(layers, class_count)


def model_equal(a: CnnModel, b: CnnModel) -> bool:
    if a.class_count != b.class_count or len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if type(la) is not type(lb):
            return False
        for pa, pb in zip(la.params, lb.params):
            if pa.shape != pb.shape or pa.tobytes() != pb.tobytes():
                return False
    return True
