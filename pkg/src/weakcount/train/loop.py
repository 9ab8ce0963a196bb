"""Training phases and the pre-train / train / quantization-aware pipeline."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..evaluate import CountReport, UndefinedErrorRate
from ..model import ModelParameters, NetworkConfig, backward, forward, init_params
from ..preprocess import MetricConfig, extract_candidates, stack
from ..quant import FakeQuantizer, QuantizedModel, calibrate, freeze, qforward
from ..signal import Dataset
from .loss import UnusableRecording, aggregate, build_target, proportion_loss, proportion_loss_grad
from .masking import count_shots, mask_duplicates
from .optim import PlateauSchedule, SGDState, sgd_step
from .vat import vat_loss

log = logging.getLogger(__name__)

SWITCHES = ("pretrain", "zero_loss", "relu6", "post_filter", "learned_post_filter", "vat")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.002
    momentum: float = 0.9
    lr_patience: int = 20
    min_improvement: float = 1e-5
    stop_patience: int = 40
    max_epochs: int = 400
    t_m: float = 0.040
    vat_eps: float = 5.0
    vat_alpha: float = 1.0
    vat_xi: float = 1e-6
    vat_k: int = 1
    vat_on_masked: bool = True
    pretrain: bool = True
    zero_loss: bool = True
    relu6: bool = True
    post_filter: bool = True
    learned_post_filter: bool = True
    vat: bool = True
    qat: bool = True
    qat_lr_scale: float = 0.5
    qat_max_epochs: int | None = None
    relu_ceiling: float | None = None
    group_size: int = 20
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.lr_patience < 1 or self.stop_patience < 1:
            raise ValueError("patience values must be positive")
        if not self.t_m > 0:
            raise ValueError("t_m must be positive")
        if self.vat_eps < 0:
            raise ValueError("vat_eps must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.max_epochs < 1 or self.group_size < 1:
            raise ValueError("max_epochs and group_size must be >= 1")

    def with_switches(self, **switches) -> "TrainConfig":
        unknown = set(switches) - set(SWITCHES)
        if unknown:
            raise ValueError(f"unknown switches {sorted(unknown)}")
        return replace(self, **switches)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Bag:
    """Candidates of one recording with its weak label."""

    x: np.ndarray
    t: np.ndarray
    counts: np.ndarray
    series_id: str
    target: np.ndarray | None

    @property
    def usable(self) -> bool:
        return self.target is not None


def prepare_bags(dataset: Dataset, metric_cfg: MetricConfig, warn: bool = True) -> list[Bag]:
    bags = []
    for rec in dataset:
        cands = extract_candidates(rec.series, metric_cfg)
        x = stack(cands) if cands else np.zeros((0, metric_cfg.input_len))
        t = np.array([c.t for c in cands], dtype=np.float64)
        try:
            target = build_target(rec.label, len(cands)).p
        except UnusableRecording as exc:
            target = None
            if warn and rec.label.total > 0:
                log.warning("recording %s excluded from the loss: %s", rec.series.series_id, exc)
        bags.append(Bag(x, t, np.asarray(rec.label.counts), rec.series.series_id, target))
    return bags


def network_for(net_cfg: NetworkConfig, cfg: TrainConfig) -> NetworkConfig:
    return net_cfg.with_(clip=6.0 if cfg.relu6 else None)


def bag_loss_and_grad(params: ModelParameters, bag: Bag, cfg: TrainConfig, quantizer=None,
                      rng: np.random.Generator | None = None, d0: np.ndarray | None = None,
                      with_grad: bool = True) -> tuple[float, ModelParameters | None]:
    """Proportion loss (plus VAT) of one recording and its parameter gradient.

    ``d0`` fixes the random VAT start direction, which makes the function
    deterministic for gradient checks.
    """
    n = len(bag.x)
    probs, tape = forward(params, bag.x, quantizer, record=True)
    keep = np.ones(n, dtype=bool)
    used = probs
    if cfg.learned_post_filter:
        masked = mask_duplicates(probs, bag.t, cfg.t_m)
        keep = masked.mask
        used = masked.preds
    p_hat = aggregate(used)
    loss = proportion_loss(bag.target, p_hat, cfg.zero_loss)
    grads = None
    if with_grad:
        g_phat = proportion_loss_grad(bag.target, p_hat)
        g_probs = np.where(keep[:, None], g_phat[None, :] / n, 0.0)
        grads, _ = backward(params, tape, grad_probs=g_probs, need_input=False)
    if cfg.vat and cfg.vat_eps > 0:
        rows = np.ones(n, dtype=bool) if cfg.vat_on_masked else keep
        if rows.any():
            if d0 is None:
                d0 = (rng if rng is not None else np.random.default_rng()).standard_normal(bag.x[rows].shape)
            v = vat_loss(params, bag.x[rows], cfg.vat_eps, cfg.vat_xi, cfg.vat_k, cfg.vat_alpha,
                         p=probs[rows], d0=d0, quantizer=quantizer, with_grad=with_grad)
            loss += v.loss
            if with_grad:
                for k in grads:
                    grads.tensors[k] = grads.tensors[k] + v.grads.tensors[k]
    return loss, grads


@dataclass
class Evaluation:
    errors: int
    loss: float
    estimated: list[np.ndarray]

    @property
    def key(self) -> tuple[int, float]:
        return (self.errors, self.loss)


def predict_bags(predict, bags: list[Bag]) -> list[np.ndarray]:
    """Run ``predict`` over all candidates at once and split back per bag."""
    sizes = [len(b.x) for b in bags]
    if sum(sizes) == 0:
        return [np.zeros((0, 2)) for _ in bags]
    allx = np.concatenate([b.x for b in bags if len(b.x)])
    probs = np.concatenate([predict(allx[i:i + 2048]) for i in range(0, len(allx), 2048)])
    out = []
    pos = 0
    for s in sizes:
        out.append(probs[pos:pos + s])
        pos += s
    return out


def evaluate_predictions(preds: list[np.ndarray], bags: list[Bag], cfg: TrainConfig) -> Evaluation:
    errors = 0
    losses = []
    estimated = []
    for probs, bag in zip(preds, bags):
        n_cat = len(bag.counts) + 1
        if len(probs):
            est = count_shots(probs, bag.t, cfg.t_m, cfg.post_filter)
        else:
            est = np.zeros(n_cat - 1, dtype=np.int64)
        estimated.append(est)
        errors += int(np.abs(est - bag.counts).sum())
        if bag.usable:
            used = mask_duplicates(probs, bag.t, cfg.t_m).preds if cfg.learned_post_filter else probs
            losses.append(proportion_loss(bag.target, aggregate(used), cfg.zero_loss))
    loss = float(np.mean(losses)) if losses else 0.0
    return Evaluation(errors, loss, estimated)


def evaluate(params: ModelParameters, bags: list[Bag], cfg: TrainConfig, quantizer=None) -> Evaluation:
    return evaluate_predictions(predict_bags(lambda x: forward(params, x, quantizer), bags), bags, cfg)


def evaluate_quantized(qm: QuantizedModel, bags: list[Bag], cfg: TrainConfig) -> Evaluation:
    return evaluate_predictions(predict_bags(lambda x: qforward(qm, x), bags), bags, cfg)


@dataclass
class PhaseResult:
    params: ModelParameters
    evaluation: Evaluation
    history: list[dict] = field(default_factory=list)
    diverged: bool = False
    epochs: int = 0


def train_phase(params: ModelParameters, learning: list[Bag], validation: list[Bag], cfg: TrainConfig,
                seed: int = 0, quantizer: FakeQuantizer | None = None, lr: float | None = None,
                max_epochs: int | None = None) -> PhaseResult:
    """SGD over recordings with the plateau schedule; returns the best checkpoint.

    Checkpoints are ranked by validation counting errors, then validation
    loss. The starting point itself is a candidate.
    """
    params = params.copy()
    learning = [b for b in learning if b.usable]
    if not learning:
        raise ValueError("no usable learning recordings")
    rng = np.random.default_rng(seed)
    sched = PlateauSchedule(lr if lr is not None else cfg.lr, cfg.lr_patience, cfg.min_improvement,
                            cfg.stop_patience)
    state = SGDState()
    if quantizer is not None:
        quantizer.refresh_weights(params)
    best_eval = evaluate(params, validation, cfg, quantizer)
    best = params.copy()
    history = [dict(epoch=0, train_loss=math.nan, val_loss=best_eval.loss, val_errors=best_eval.errors,
                    lr=sched.lr)]
    diverged = False
    epochs = 0
    for epoch in range(1, (max_epochs or cfg.max_epochs) + 1):
        epochs = epoch
        if quantizer is not None:
            quantizer.refresh_weights(params)
        losses = []
        for i in rng.permutation(len(learning)):
            loss, grads = bag_loss_and_grad(params, learning[i], cfg, quantizer, rng)
            if not np.isfinite(loss):
                diverged = True
                break
            sgd_step(params, grads, state, sched.lr, cfg.momentum)
            losses.append(loss)
        if diverged or not params.is_finite():
            diverged = True
            log.info("phase diverged at epoch %d", epoch)
            break
        ev = evaluate(params, validation, cfg, quantizer)
        history.append(dict(epoch=epoch, train_loss=float(np.mean(losses)), val_loss=ev.loss,
                            val_errors=ev.errors, lr=sched.lr))
        if not np.isfinite(ev.loss):
            diverged = True
            break
        if ev.key < best_eval.key:
            best_eval = ev
            best = params.copy()
        if sched.step(ev.loss):
            break
    return PhaseResult(best, best_eval, history, diverged, epochs)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class MemberResult:
    seed: int
    params: ModelParameters
    quantized: QuantizedModel | None
    float_eval: Evaluation
    final_eval: Evaluation
    histories: dict[str, list[dict]]
    true_counts: np.ndarray
    series_ids: tuple[str, ...] = ()
    n_candidates: np.ndarray | None = None

    def report(self, final: bool = True) -> CountReport:
        ev = self.final_eval if final else self.float_eval
        return CountReport(self.series_ids, np.stack(ev.estimated), self.true_counts, self.n_candidates)

    @property
    def error_rate(self) -> float:
        """Validation E of the final model; NaN when validation holds no shots."""
        try:
            return self.report().error_rate()
        except UndefinedErrorRate:
            return math.nan

    @property
    def float_error_rate(self) -> float:
        try:
            return self.report(final=False).error_rate()
        except UndefinedErrorRate:
            return math.nan


@dataclass
class PipelineResult:
    best: MemberResult
    members: list[MemberResult]


@dataclass
class PipelineData:
    learning: list[Bag]
    validation: list[Bag]
    pre_learning: list[Bag] | None = None
    pre_validation: list[Bag] | None = None


def prepare_pipeline_data(learning: Dataset, validation: Dataset, metric_cfg: MetricConfig,
                          pretrain: tuple[Dataset, Dataset] | None = None) -> PipelineData:
    data = PipelineData(prepare_bags(learning, metric_cfg), prepare_bags(validation, metric_cfg, warn=False))
    if pretrain is not None:
        data.pre_learning = prepare_bags(pretrain[0], metric_cfg)
        data.pre_validation = prepare_bags(pretrain[1], metric_cfg, warn=False)
    return data


def calibration_slices(bags: list[Bag], limit: int = 2000, seed: int = 0) -> np.ndarray:
    allx = np.concatenate([b.x for b in bags if len(b.x)])
    if len(allx) > limit:
        allx = allx[np.sort(np.random.default_rng(seed).choice(len(allx), limit, replace=False))]
    return allx


def train_member(data: PipelineData, net_cfg: NetworkConfig, cfg: TrainConfig, seed: int) -> MemberResult:
    """Pre-train (optional), train and quantization-aware train one initialization."""
    net = network_for(net_cfg, cfg)
    params = init_params(net, seed)
    histories = {}
    if cfg.pretrain and data.pre_learning:
        res = train_phase(params, data.pre_learning, data.pre_validation, cfg, seed=seed * 7 + 1)
        params = res.params
        histories["pretrain"] = res.history
    res = train_phase(params, data.learning, data.validation, cfg, seed=seed * 7 + 2)
    params = res.params
    float_eval = res.evaluation
    histories["train"] = res.history
    quantized = None
    final_eval = float_eval
    if cfg.qat:
        fq = calibrate(params, calibration_slices(data.learning, seed=seed), relu_ceiling=cfg.relu_ceiling)
        res = train_phase(params, data.learning, data.validation, cfg, seed=seed * 7 + 3, quantizer=fq,
                          lr=cfg.lr * cfg.qat_lr_scale, max_epochs=cfg.qat_max_epochs)
        histories["qat"] = res.history
        quantized = freeze(res.params, fq)
        params = res.params
        final_eval = evaluate_quantized(quantized, data.validation, cfg)
    val = data.validation
    return MemberResult(seed, params, quantized, float_eval, final_eval, histories,
                        np.stack([b.counts for b in val]), tuple(b.series_id for b in val),
                        np.array([len(b.x) for b in val]))


def _member_job(args):
    return train_member(*args)


def train_pipeline(data: PipelineData, net_cfg: NetworkConfig, cfg: TrainConfig,
                   seeds: list[int] | None = None) -> PipelineResult:
    """Train a group of initializations and keep the best final model."""
    if seeds is None:
        seeds = [cfg.seed * 1000 + i for i in range(cfg.group_size)]
    jobs = [(data, net_cfg, cfg, s) for s in seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            members = list(pool.map(_member_job, jobs))
    else:
        members = [train_member(*j) for j in jobs]
    best = min(members, key=lambda m: m.final_eval.key)
    return PipelineResult(best, members)
