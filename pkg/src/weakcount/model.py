"""Small 1-D CNN classifier with a hand-written reverse pass.

Layout: ``conv -> ReLU6 -> max-pool`` blocks, flatten, dense, ReLU6, dense,
softmax. Convolutions use neither stride nor padding. Activations are kept
channel-last, ``(batch, length, channels)``, so every convolution is a single
matmul over unfolded windows.

The forward pass accepts an optional *quantizer* (see
:mod:`weakcount.quant`) which rewrites weights and activations on the fly;
the reverse pass applies the matching straight-through masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Iterator, Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import container


@dataclass(frozen=True)
class ConvBlock:
    kernel: int
    channels: int
    pool: int = 2


@dataclass(frozen=True)
class NetworkConfig:
    input_len: int = 232
    conv: tuple[ConvBlock, ...] = (ConvBlock(9, 18, 2), ConvBlock(9, 18, 2), ConvBlock(9, 18, 2))
    hidden: int = 68
    n_categories: int = 2
    clip: float | None = 6.0

    def __post_init__(self):
        object.__setattr__(self, "conv", tuple(c if isinstance(c, ConvBlock) else ConvBlock(*c) for c in self.conv))
        if self.n_categories < 2:
            raise ValueError("need at least two categories")
        if self.hidden < 1:
            raise ValueError("hidden width must be >= 1")
        for c in self.conv:
            if c.kernel < 1 or c.channels < 1 or c.pool < 1:
                raise ValueError(f"invalid conv block {c}")
        self.layer_lengths()  # validates lengths

    def layer_lengths(self) -> list[tuple[int, int]]:
        """``(conv output length, pooled length)`` per block."""
        out = []
        n = self.input_len
        for c in self.conv:
            conv_len = n - c.kernel + 1
            pooled = conv_len // c.pool
            if conv_len < 1 or pooled < 1:
                raise ValueError(f"input length {self.input_len} too short for conv stack {self.conv}")
            out.append((conv_len, pooled))
            n = pooled
        return out

    @property
    def flat_len(self) -> int:
        if not self.conv:
            return self.input_len
        return self.layer_lengths()[-1][1] * self.conv[-1].channels

    def shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = 1
        for i, c in enumerate(self.conv):
            shapes[f"conv{i}.w"] = (c.channels, cin, c.kernel)
            shapes[f"conv{i}.b"] = (c.channels,)
            cin = c.channels
        shapes["fc0.w"] = (self.flat_len, self.hidden)
        shapes["fc0.b"] = (self.hidden,)
        shapes["fc1.w"] = (self.hidden, self.n_categories)
        shapes["fc1.b"] = (self.n_categories,)
        return shapes

    def with_(self, **kw) -> "NetworkConfig":
        d = dict(input_len=self.input_len, conv=self.conv, hidden=self.hidden,
                 n_categories=self.n_categories, clip=self.clip)
        d.update(kw)
        return NetworkConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv"] = [list(asdict(c).values()) for c in self.conv]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["conv"] = tuple(ConvBlock(*c) for c in d.get("conv", ()))
        return cls(**d)


def param_count(cfg: NetworkConfig) -> int:
    return int(sum(np.prod(s) for s in cfg.shapes().values()))


@dataclass
class ModelParameters:
    config: NetworkConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.config.shapes()
        if set(shapes) != set(self.tensors):
            raise ValueError(f"tensor names {sorted(self.tensors)} do not match config {sorted(shapes)}")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.config.shapes())

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "ModelParameters":
        return ModelParameters(self.config, {k: np.zeros_like(v) for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in self])

    def assign_flat(self, vec: np.ndarray) -> "ModelParameters":
        out = {}
        pos = 0
        for k in self:
            v = self.tensors[k]
            out[k] = np.asarray(vec[pos:pos + v.size], dtype=v.dtype).reshape(v.shape).copy()
            pos += v.size
        return ModelParameters(self.config, out)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def init_params(cfg: NetworkConfig, seed: int) -> ModelParameters:
    """Uniform in +-sqrt(6 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in cfg.shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] if name.startswith("conv") else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParameters(cfg, tensors)


class Quantizer(Protocol):
    """Hooks used by quantization-aware forward passes.

    Both methods return the transformed tensor and the straight-through mask
    (``None`` means all-pass).
    """

    def weight(self, name: str, w: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]: ...

    def act(self, name: str, a: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]: ...


@dataclass
class Tape:
    """Intermediate values recorded by :func:`forward` for :func:`backward`."""

    x: np.ndarray
    probs: np.ndarray
    layers: list = field(default_factory=list)


def _activate(z: np.ndarray, clip: float | None) -> tuple[np.ndarray, np.ndarray]:
    if clip is None:
        return np.maximum(z, 0.0), z > 0
    # subgradient zero at both kinks
    return np.clip(z, 0.0, clip), (z > 0) & (z < clip)


def _maxpool(a: np.ndarray, pool: int) -> tuple[np.ndarray, np.ndarray]:
    """Max over non-overlapping windows along axis 1; ties go to the first position."""
    lp = a.shape[1] // pool
    best = a[:, 0:lp * pool:pool]
    arg = np.zeros(best.shape, dtype=np.int8)
    for r in range(1, pool):
        cand = a[:, r:lp * pool:pool]
        upd = cand > best
        best = np.maximum(best, cand)
        if pool == 2:
            arg = upd.view(np.int8)
        else:
            arg[upd] = r
    return best, arg


def _unpool(d: np.ndarray, arg: np.ndarray, pool: int, length: int) -> np.ndarray:
    bsz, lp, ch = d.shape
    out = np.zeros((bsz, length, ch))
    for r in range(pool):
        out[:, r:lp * pool:pool] = d * (arg == r)
    return out


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: ModelParameters, x: np.ndarray, quantizer: Quantizer | None = None,
            record: bool = False) -> np.ndarray | tuple[np.ndarray, Tape]:
    """Class probabilities for one slice ``(L,)`` or a batch ``(B, L)``."""
    cfg = params.config
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != cfg.input_len:
        raise ValueError(f"expected input of length {cfg.input_len}, got shape {x.shape}")
    layers = []
    h = xb[:, :, None]
    in_mask = None
    if quantizer is not None:
        h, in_mask = quantizer.act("input", h)
    for i, blk in enumerate(cfg.conv):
        w, w_mask = params[f"conv{i}.w"], None
        if quantizer is not None:
            w, w_mask = quantizer.weight(f"conv{i}.w", w)
        b = params[f"conv{i}.b"]
        cols = sliding_window_view(h, blk.kernel, axis=1)  # (B, Lout, Cin, K)
        bsz, lout, cin, k = cols.shape
        cols = cols.reshape(bsz, lout, cin * k)
        wmat = w.reshape(blk.channels, cin * k)
        z = (cols.reshape(bsz * lout, cin * k) @ wmat.T).reshape(bsz, lout, blk.channels) + b
        a, act_mask = _activate(z, cfg.clip)
        q_mask = None
        if quantizer is not None:
            a, q_mask = quantizer.act(f"conv{i}", a)
        h, arg = _maxpool(a, blk.pool)
        layers.append(("conv", i, cols, w, w_mask, act_mask, q_mask, arg, lout, cin, h.shape))
    flat = h.reshape(h.shape[0], -1)
    hidden = flat
    for j in range(2):
        w, w_mask = params[f"fc{j}.w"], None
        if quantizer is not None:
            w, w_mask = quantizer.weight(f"fc{j}.w", w)
        z = hidden @ w + params[f"fc{j}.b"]
        if j == 0:
            out, act_mask = _activate(z, cfg.clip)
            name = "fc0"
        else:
            out, act_mask = z, None
            name = "logits"
        q_mask = None
        if quantizer is not None:
            out, q_mask = quantizer.act(name, out)
        layers.append(("fc", j, hidden, w, w_mask, act_mask, q_mask))
        hidden = out
    probs = softmax(hidden)
    if single:
        probs = probs[0]
    if record:
        return probs, Tape(xb, probs if not single else probs[None, :], layers + [("input", in_mask, h.shape)])
    return probs


def backward(params: ModelParameters, tape: Tape | None, grad_logits: np.ndarray | None = None,
             grad_probs: np.ndarray | None = None, need_input: bool = True) -> tuple[ModelParameters, np.ndarray | None]:
    """Reverse pass for a recorded forward; returns parameter and input gradients.

    Pass either the gradient w.r.t. the logits or w.r.t. the output
    probabilities (it is pulled back through the softmax).
    """
    if tape is None:
        raise ValueError("backward needs the tape recorded by forward(..., record=True)")
    cfg = params.config
    if grad_logits is None:
        if grad_probs is None:
            raise ValueError("need grad_logits or grad_probs")
        g = np.asarray(grad_probs, dtype=np.float64).reshape(tape.probs.shape)
        p = tape.probs
        grad_logits = p * (g - np.sum(p * g, axis=-1, keepdims=True))
    d = np.asarray(grad_logits, dtype=np.float64).reshape(tape.probs.shape)
    grads = {}
    layers = tape.layers
    _, in_mask, pooled_shape = layers[-1]
    for kind, j, inp, w, w_mask, act_mask, q_mask in reversed(layers[-3:-1]):
        if q_mask is not None:
            d = d * q_mask
        if act_mask is not None:
            d = d * act_mask
        gw = inp.T @ d
        if w_mask is not None:
            gw = gw * w_mask
        grads[f"fc{j}.w"] = gw
        grads[f"fc{j}.b"] = d.sum(axis=0)
        d = d @ w.T
    d = d.reshape(pooled_shape)
    conv_layers = layers[:-3]
    for kind, i, cols, w, w_mask, act_mask, q_mask, arg, lout, cin, pshape in reversed(conv_layers):
        blk = cfg.conv[i]
        da = _unpool(d, arg, blk.pool, lout)
        if q_mask is not None:
            da = da * q_mask
        dz = da * act_mask
        ch = blk.channels
        gw = (dz.reshape(-1, ch).T @ cols.reshape(-1, cin * blk.kernel)).reshape(ch, cin, blk.kernel)
        if w_mask is not None:
            gw = gw * w_mask
        grads[f"conv{i}.w"] = gw
        grads[f"conv{i}.b"] = dz.sum(axis=(0, 1))
        if i == 0 and not need_input:
            d = None
            break
        k = blk.kernel
        bsz = dz.shape[0]
        if cin < 4:
            d = np.zeros((bsz, lout + k - 1, cin))
            for r in range(k):
                d[:, r:r + lout] += dz @ w[:, :, r]
        else:
            # full correlation of dz with the flipped kernel
            padded = np.zeros((bsz, lout + 2 * (k - 1), ch))
            padded[:, k - 1:k - 1 + lout] = dz
            wf = w[:, :, ::-1].transpose(1, 0, 2).reshape(cin, ch * k)
            d = sliding_window_view(padded, k, axis=1).reshape(bsz, lout + k - 1, ch * k) @ wf.T
    dx = None
    if d is not None:
        if in_mask is not None:
            d = d * in_mask
        dx = d[:, :, 0]
    return ModelParameters(cfg, grads), dx


# ---------------------------------------------------------------------------
# Model file
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"WCMD"
MODEL_VERSION = 1


def dumps_model(params: ModelParameters, quantized=None, extra: dict | None = None) -> bytes:
    meta = {"network": params.config.to_dict(), "extra": extra or {}}
    arrays = {f"param/{k}": v for k, v in params.tensors.items()}
    if quantized is not None:
        qmeta, qarrays = quantized.to_arrays()
        meta["quant"] = qmeta
        arrays.update({f"quant/{k}": v for k, v in qarrays.items()})
    return container.dumps(MODEL_MAGIC, MODEL_VERSION, meta, arrays)


def loads_model(data: bytes):
    """Returns ``(params, quantized model or None, extra metadata)``."""
    meta, arrays = container.loads(MODEL_MAGIC, MODEL_VERSION, data)
    cfg = NetworkConfig.from_dict(meta["network"])
    params = ModelParameters(cfg, {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    quantized = None
    if "quant" in meta:
        from .quant import QuantizedModel

        quantized = QuantizedModel.from_arrays(
            cfg, meta["quant"], {k[len("quant/"):]: v for k, v in arrays.items() if k.startswith("quant/")})
    return params, quantized, meta.get("extra", {})


def save_model(path, params: ModelParameters, quantized=None, extra: dict | None = None):
    from .signal import atomic_write_bytes

    atomic_write_bytes(path, dumps_model(params, quantized, extra))


def load_model(path):
    from pathlib import Path

    return loads_model(Path(path).read_bytes())


def describe(cfg: NetworkConfig) -> str:
    lines = [f"input {cfg.input_len}"]
    for (conv_len, pooled), blk in zip(cfg.layer_lengths(), cfg.conv):
        lines.append(f"conv k={blk.kernel} c={blk.channels} -> {conv_len}, pool {blk.pool} -> {pooled}")
    lines.append(f"dense {cfg.flat_len} -> {cfg.hidden} -> {cfg.n_categories}")
    lines.append(f"parameters {param_count(cfg)}")
    return "\n".join(lines)

