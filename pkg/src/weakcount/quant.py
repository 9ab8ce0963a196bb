"""8-bit affine quantization, fake-quant training hooks and integer inference.

Every tensor uses per-tensor affine int8: ``real = scale * (q - zero_point)``
with ``q`` in [-128, 127]. Convolutions and dense layers run on int8 inputs
and weights with int32 accumulators, then rescale to the next layer's int8
domain with a fixed-point multiplier (int32 mantissa and a right shift).
Only the final softmax is computed in floating point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import ModelParameters, NetworkConfig, forward, softmax

QMIN, QMAX = -128, 127
ACC_LIMIT = 2**31 - 1


@dataclass(frozen=True)
class QParams:
    scale: float
    zero_point: int
    qmin: int = QMIN
    qmax: int = QMAX

    @property
    def lo(self) -> float:
        return self.scale * (self.qmin - self.zero_point)

    @property
    def hi(self) -> float:
        return self.scale * (self.qmax - self.zero_point)

    def quantize(self, x: np.ndarray) -> np.ndarray:
        q = np.round(np.asarray(x, dtype=np.float64) / self.scale) + self.zero_point
        return np.clip(q, self.qmin, self.qmax).astype(np.int32)

    def dequantize(self, q: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(q, dtype=np.float64) - self.zero_point)

    def fake(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Quantize-dequantize with the straight-through mask.

        The mask is 1 wherever the value is not saturated, i.e. it lies within
        half a step of the representable range. Zero-point rounding can pull
        the range up to half a step inside the observed extremes, and those
        extremes must keep their gradient.
        """
        x = np.asarray(x, dtype=np.float64)
        half = 0.5 * self.scale
        return self.dequantize(self.quantize(x)), (x >= self.lo - half) & (x <= self.hi + half)


def choose_qparams(lo: float, hi: float, bits: int = 8) -> QParams:
    """Affine parameters covering ``[lo, hi]`` extended to include zero."""
    qmin, qmax = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    scale = (hi - lo) / (qmax - qmin)
    if scale < np.finfo(np.float64).tiny:
        # empty or subnormal range: nothing but zero is worth representing
        return QParams(1.0, 0, qmin, qmax)
    zp = int(np.clip(round(qmin - lo / scale), qmin, qmax))
    return QParams(scale, zp, qmin, qmax)


def weight_qparams(w: np.ndarray, bits: int = 8) -> QParams:
    w = np.asarray(w)
    lo, hi = float(w.min()), float(w.max())
    if lo == hi:
        # constant tensor: make the single value exactly representable as q = +-1
        qmin, qmax = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
        return QParams(abs(lo) if lo != 0 else 1.0, 0, qmin, qmax)
    return choose_qparams(lo, hi, bits)


def act_names(cfg: NetworkConfig) -> list[str]:
    return ["input"] + [f"conv{i}" for i in range(len(cfg.conv))] + ["fc0", "logits"]


def is_clipped(name: str) -> bool:
    return name.startswith("conv") or name == "fc0"


class RangeObserver:
    """Identity quantizer that records activation ranges."""

    def __init__(self):
        self.ranges: dict[str, list[float]] = {}

    def weight(self, name, w):
        return w, None

    def act(self, name, a):
        lo, hi = float(a.min()), float(a.max())
        r = self.ranges.setdefault(name, [lo, hi])
        r[0], r[1] = min(r[0], lo), max(r[1], hi)
        return a, None


@dataclass
class FakeQuantizer:
    """Quantize-dequantize hooks for :func:`weakcount.model.forward`.

    Weight ranges are taken from the weights given to :meth:`refresh_weights`
    and stay fixed until the next refresh, so weights that drift outside them
    are clipped and receive no gradient.
    """

    act_qparams: dict[str, QParams]
    weight_qparams: dict[str, QParams] = field(default_factory=dict)
    bits: int = 8

    def refresh_weights(self, params: ModelParameters):
        self.weight_qparams = {k: weight_qparams(params[k], self.bits) for k in params if k.endswith(".w")}

    def weight(self, name, w):
        qp = self.weight_qparams.get(name)
        if qp is None:
            qp = weight_qparams(w, self.bits)
        return qp.fake(w)

    def act(self, name, a):
        return self.act_qparams[name].fake(a)


def calibrate(params: ModelParameters, calibration: np.ndarray, bits: int = 8,
              relu_ceiling: float | None = None) -> FakeQuantizer:
    """Observe activation ranges on ``calibration`` slices and build fake-quant hooks.

    Ranges of clipped layers are intersected with ``[0, clip]``;
    ``relu_ceiling`` optionally saturates them lower still (e.g. 4.0).
    """
    calibration = np.asarray(calibration, dtype=np.float64)
    if calibration.size == 0:
        raise ValueError("calibration set is empty")
    calibration = np.atleast_2d(calibration)
    if len(calibration) == 0:
        raise ValueError("calibration set is empty")
    obs = RangeObserver()
    for start in range(0, len(calibration), 256):
        forward(params, calibration[start:start + 256], obs)
    cfg = params.config
    qps = {}
    for name in act_names(cfg):
        lo, hi = obs.ranges[name]
        if is_clipped(name):
            lo = 0.0
            if cfg.clip is not None:
                hi = min(hi, cfg.clip)
            if relu_ceiling is not None:
                hi = min(hi, relu_ceiling)
        qps[name] = choose_qparams(lo, hi, bits)
    fq = FakeQuantizer(qps, bits=bits)
    fq.refresh_weights(params)
    return fq


def fake_quant_forward(params: ModelParameters, x: np.ndarray, quantizer: FakeQuantizer) -> np.ndarray:
    return forward(params, x, quantizer)


# ---------------------------------------------------------------------------
# Integer model
# ---------------------------------------------------------------------------


def quantize_multiplier(m: float) -> tuple[int, int]:
    """``m ~= mantissa * 2**-shift`` with a 31-bit mantissa."""
    if m <= 0:
        raise ValueError("requantization multiplier must be positive")
    frac, exp = math.frexp(m)
    mant = int(round(frac * (1 << 31)))
    if mant == 1 << 31:
        mant //= 2
        exp += 1
    shift = 31 - exp
    if not 0 < shift < 63:
        raise ValueError(f"multiplier {m} out of the supported range")
    return mant, shift


def requantize(acc: np.ndarray, mant: int, shift: int, zero_point: int, qmin: int, qmax: int) -> np.ndarray:
    prod = acc.astype(np.int64) * np.int64(mant)
    out = (prod + (np.int64(1) << np.int64(shift - 1))) >> np.int64(shift)
    return np.clip(out + zero_point, qmin, qmax).astype(np.int32)


@dataclass
class QLayer:
    kind: str  # "conv" or "fc"
    w: np.ndarray  # int8 weights
    w_qp: QParams
    bias: np.ndarray  # int32, scale = s_in * s_w
    in_qp: QParams
    out_qp: QParams
    mant: int
    shift: int
    kernel: int = 0
    pool: int = 1


@dataclass
class QuantizedModel:
    config: NetworkConfig
    input_qp: QParams
    layers: list[QLayer]
    acc_bound: int = 0

    def __post_init__(self):
        self.acc_bound = max(_acc_bound(layer) for layer in self.layers)
        if self.acc_bound > ACC_LIMIT:
            raise OverflowError(f"worst-case accumulator {self.acc_bound} exceeds int32")

    @property
    def logits_qp(self) -> QParams:
        return self.layers[-1].out_qp

    def scratch_bytes(self) -> int:
        """Peak activation memory of a single-candidate pass with fused conv+pool.

        A block whose pooled output row needs no more bytes than the input
        rows it consumes (``cout <= pool * cin``) writes its output over its
        own input; other blocks need separate input and output buffers. Each
        layer also holds one int32 accumulator row.
        """
        cfg = self.config
        peak = 0
        cur = cfg.input_len  # int8 elements of the live input buffer
        cin = 1
        for (_, pooled), blk in zip(cfg.layer_lengths(), cfg.conv):
            out = pooled * blk.channels
            acc = 4 * blk.channels
            if blk.channels <= blk.pool * cin:
                peak = max(peak, max(cur, out) + acc)
            else:
                peak = max(peak, cur + out + acc)
            cur, cin = out, blk.channels
        peak = max(peak, cur + cfg.hidden + 4 * cfg.hidden)
        peak = max(peak, cfg.hidden + cfg.n_categories + 4 * cfg.n_categories)
        return peak

    def weight_bytes(self) -> int:
        return sum(layer.w.size + 4 * layer.bias.size for layer in self.layers)

    def fake_quantizer(self) -> "FakeQuantizer":
        """The quantize-dequantize hooks this model was frozen from."""
        names = act_names(self.config)
        acts = {"input": self.input_qp}
        acts.update({n: layer.out_qp for n, layer in zip(names[1:], self.layers)})
        weight_names = [f"conv{i}.w" for i in range(len(self.config.conv))] + ["fc0.w", "fc1.w"]
        return FakeQuantizer(acts, {n: layer.w_qp for n, layer in zip(weight_names, self.layers)})

    # -- serialization -------------------------------------------------------

    def to_arrays(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {"input": [self.input_qp.scale, self.input_qp.zero_point], "layers": []}
        arrays = {}
        for i, layer in enumerate(self.layers):
            meta["layers"].append({
                "kind": layer.kind, "kernel": layer.kernel, "pool": layer.pool,
                "w_qp": [layer.w_qp.scale, layer.w_qp.zero_point],
                "in_qp": [layer.in_qp.scale, layer.in_qp.zero_point],
                "out_qp": [layer.out_qp.scale, layer.out_qp.zero_point],
                "mant": layer.mant, "shift": layer.shift,
            })
            arrays[f"{i}.w"] = layer.w.astype(np.int8)
            arrays[f"{i}.b"] = layer.bias.astype(np.int32)
        return meta, arrays

    @classmethod
    def from_arrays(cls, cfg: NetworkConfig, meta: dict, arrays: dict[str, np.ndarray]) -> "QuantizedModel":
        layers = []
        for i, m in enumerate(meta["layers"]):
            layers.append(QLayer(
                m["kind"], arrays[f"{i}.w"].astype(np.int8), QParams(*m["w_qp"]), arrays[f"{i}.b"].astype(np.int32),
                QParams(*m["in_qp"]), QParams(*m["out_qp"]), int(m["mant"]), int(m["shift"]),
                int(m["kernel"]), int(m["pool"]),
            ))
        return cls(cfg, QParams(*meta["input"]), layers)


def _acc_bound(layer: QLayer) -> int:
    span_in = layer.in_qp.qmax - layer.in_qp.qmin
    span_w = int(np.max(np.abs(layer.w.astype(np.int64) - layer.w_qp.zero_point))) if layer.w.size else 0
    terms = layer.w[0].size if layer.kind == "conv" else layer.w.shape[0]
    return terms * span_in * span_w + int(np.max(np.abs(layer.bias.astype(np.int64)), initial=0))


def calibrate_and_quantize(params: ModelParameters, calibration: np.ndarray, bits: int = 8,
                           relu_ceiling: float | None = None) -> QuantizedModel:
    """Freeze ``params`` into an integer model using activation ranges from ``calibration``."""
    if bits != 8:
        raise ValueError("the integer path supports 8-bit models only")
    fq = calibrate(params, calibration, bits, relu_ceiling)
    return freeze(params, fq)


def freeze(params: ModelParameters, fq: FakeQuantizer) -> QuantizedModel:
    cfg = params.config
    fq.refresh_weights(params)
    in_qp = fq.act_qparams["input"]
    layers = []
    cur = in_qp
    specs = [("conv", f"conv{i}", blk.kernel, blk.pool) for i, blk in enumerate(cfg.conv)]
    specs += [("fc", "fc0", 0, 1), ("fc", "fc1", 0, 1)]
    for kind, name, kernel, pool in specs:
        w = params[f"{name}.w"]
        b = params[f"{name}.b"]
        wqp = fq.weight_qparams[f"{name}.w"]
        out_name = "logits" if name == "fc1" else name
        out_qp = fq.act_qparams[out_name]
        bias_scale = cur.scale * wqp.scale
        bias = np.clip(np.round(b / bias_scale), -ACC_LIMIT, ACC_LIMIT).astype(np.int32)
        mant, shift = quantize_multiplier(bias_scale / out_qp.scale)
        layers.append(QLayer(kind, wqp.quantize(w).astype(np.int8), wqp, bias, cur, out_qp, mant, shift, kernel, pool))
        cur = out_qp
    return QuantizedModel(cfg, in_qp, layers)


def qforward_logits_q(qm: QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Integer pass; returns int8-domain logits, shape ``(B, N)``."""
    cfg = qm.config
    x = np.asarray(x)
    xb = np.atleast_2d(x)
    if xb.shape[1] != cfg.input_len:
        raise ValueError(f"expected input of length {cfg.input_len}, got shape {x.shape}")
    h = qm.input_qp.quantize(xb)[:, :, None]  # (B, L, 1) int32 holding int8 values
    for layer in qm.layers:
        xz = (h - layer.in_qp.zero_point).astype(np.int32)
        wz = layer.w.astype(np.int32) - np.int32(layer.w_qp.zero_point)
        if layer.kind == "conv":
            cout, cin, k = wz.shape
            cols = sliding_window_view(xz, k, axis=1)
            bsz, lout = cols.shape[:2]
            acc = cols.reshape(bsz * lout, cin * k) @ wz.reshape(cout, cin * k).T
            acc = acc.reshape(bsz, lout, cout) + layer.bias
            y = requantize(acc, layer.mant, layer.shift, layer.out_qp.zero_point, layer.out_qp.qmin,
                           layer.out_qp.qmax)
            lp = lout // layer.pool
            h = y[:, :lp * layer.pool].reshape(bsz, lp, layer.pool, cout).max(axis=2)
        else:
            flat = xz.reshape(xz.shape[0], -1)
            acc = flat @ wz + layer.bias
            h = requantize(acc, layer.mant, layer.shift, layer.out_qp.zero_point, layer.out_qp.qmin,
                           layer.out_qp.qmax)
    assert h.dtype == np.int32
    return h


def qforward(qm: QuantizedModel, x: np.ndarray) -> np.ndarray:
    """Class probabilities from the integer path (softmax in float at the end)."""
    x = np.asarray(x)
    hq = qforward_logits_q(qm, x)
    probs = softmax(qm.logits_qp.dequantize(hq))
    return probs[0] if x.ndim == 1 else probs
