"""Command-line entry point: synth, train, quantize, eval, ablate, export-stream, replay.

Every command that writes files also writes the resolved run configuration
next to its outputs. Exit codes: 0 ok, 1 bad input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .container import ContainerError
from .model import ConvBlock, NetworkConfig, load_model, save_model
from .preprocess import MetricConfig
from .quant import calibrate_and_quantize
from .rt import StreamFormatError, format_events, load_stream, run_stream, save_stream
from .signal import (Dataset, DatasetFormatError, Plan, PlanError, Record, atomic_write_bytes, benchmark_profiles,
                     build_benchmark, load_dataset, save_dataset, split_dataset, synthesize_series)
from .train import TrainConfig, evaluate as evaluate_bags, evaluate_quantized, prepare_bags, prepare_pipeline_data
from .train import calibration_slices, train_pipeline

log = logging.getLogger("weakcount")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2


class InputError(Exception):
    """Bad user input: missing files, malformed configs or data."""


# -- configuration -----------------------------------------------------------


@dataclass
class SynthConfig:
    n_categories: int = 2
    recordings_per_bin: int = 14
    rounds_per_recording: tuple[int, int] = (10, 19)
    confusers_per_recording: tuple[int, int] = (2, 4)
    nonshot_recordings_per_bin: int = 1
    nonshot_events: tuple[int, int] = (6, 12)
    # explicit recordings: {"profile": i, "duration_s": d, "events": [[t, cat], ...], "seed": s}
    recordings: list[dict] = field(default_factory=list)


@dataclass
class RunConfig:
    seed: int = 0
    validation_fraction: float = 0.10
    synth: SynthConfig = field(default_factory=SynthConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "validation_fraction": self.validation_fraction,
            "synth": asdict(self.synth),
            "metric": self.metric.to_dict(),
            "network": self.network.to_dict(),
            "train": self.train.to_dict(),
        }


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise InputError(f"unknown keys in [{section}]: {sorted(unknown)}")
    defaults = cls()
    for k, v in values.items():
        ref = getattr(defaults, k)
        if isinstance(ref, (int, float)) and not isinstance(ref, bool) and v is not None:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise InputError(f"[{section}] {k} must be a number, got {v!r}")
            if isinstance(ref, int) and isinstance(v, float):
                if not v.is_integer():
                    raise InputError(f"[{section}] {k} must be an integer, got {v!r}")
                values = {**values, k: int(v)}
        if isinstance(ref, bool) and not isinstance(v, bool):
            raise InputError(f"[{section}] {k} must be true or false, got {v!r}")
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) and k != "recordings" else v for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid [{section}] config: {exc}") from exc


def run_config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    d.pop("results", None)  # outputs recorded next to a resolved config
    unknown = set(d) - {"seed", "validation_fraction", "synth", "metric", "network", "train"}
    if unknown:
        raise InputError(f"unknown config sections {sorted(unknown)}")
    net = dict(d.get("network", {}))
    if "conv" in net:
        try:
            net["conv"] = tuple(ConvBlock(*b) if isinstance(b, (list, tuple)) else ConvBlock(**b) for b in net["conv"])
        except TypeError as exc:
            raise InputError(f"invalid conv blocks: {exc}") from exc
    return RunConfig(
        seed=int(d.get("seed", 0)),
        validation_fraction=float(d.get("validation_fraction", 0.10)),
        synth=_build(SynthConfig, d.get("synth", {}), "synth"),
        metric=_build(MetricConfig, d.get("metric", {}), "metric"),
        network=_build(NetworkConfig, net, "network"),
        train=_build(TrainConfig, d.get("train", {}), "train"),
    )


def _set_path(d: dict, key: str, raw: str):
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    try:
        cur[parts[-1]] = json.loads(raw)
    except json.JSONDecodeError:
        cur[parts[-1]] = raw


def load_run_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    d: dict = {}
    if path:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise InputError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise InputError("config file must hold a JSON object")
    for item in overrides or []:
        if "=" not in item:
            raise InputError(f"override {item!r} must look like section.key=value")
        key, raw = item.split("=", 1)
        _set_path(d, key, raw)
    return run_config_from_dict(d)


def write_resolved(out: Path, cfg: RunConfig, extra: dict | None = None):
    body = cfg.to_dict()
    if extra:
        body["results"] = extra
    atomic_write_bytes(out.with_name(out.name + ".config.json"),
                       (json.dumps(body, indent=2, sort_keys=True) + "\n").encode())


# -- helpers -----------------------------------------------------------------


def _load_dataset(path: str) -> Dataset:
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise InputError(f"dataset not found: {path}") from exc
    except DatasetFormatError as exc:
        raise InputError(f"bad dataset {path}: {exc}") from exc


def _load_model(path: str):
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise InputError(f"model not found: {path}") from exc
    except (ContainerError, KeyError, ValueError) as exc:
        raise InputError(f"bad model file {path}: {exc}") from exc


def _model_metric(extra: dict, cfg: RunConfig) -> tuple[MetricConfig, float]:
    metric = MetricConfig(**extra["metric"]) if "metric" in extra else cfg.metric
    return metric, float(extra.get("t_m", cfg.train.t_m))


def synthesize(cfg: RunConfig) -> Dataset:
    s = cfg.synth
    if s.n_categories not in (2, 3):
        raise InputError("synth.n_categories must be 2 or 3")
    if not s.recordings:
        return build_benchmark(s.n_categories, s.recordings_per_bin, s.rounds_per_recording,
                               s.confusers_per_recording, s.nonshot_recordings_per_bin, s.nonshot_events,
                               seed=cfg.seed)
    profiles = benchmark_profiles(s.n_categories, cfg.seed)
    names = ("non-shot", "shot") if s.n_categories == 2 else ("non-shot", "live", "blank")
    records = []
    for i, entry in enumerate(s.recordings):
        try:
            prof = profiles[int(entry.get("profile", 0))]
            plan = Plan(float(entry["duration_s"]), tuple((float(t), int(c)) for t, c in entry.get("events", [])))
            series, label, truth = synthesize_series(prof, plan, int(entry.get("seed", cfg.seed * 1000 + i)),
                                                     entry.get("series_id", f"rec{i:03d}"))
        except (KeyError, IndexError, TypeError) as exc:
            raise InputError(f"recording {i}: malformed entry ({exc})") from exc
        except PlanError as exc:
            raise InputError(f"recording {i}: invalid plan: {exc}") from exc
        records.append(Record(series, label, truth))
    return Dataset(records, names)


def _split(ds: Dataset, cfg: RunConfig) -> tuple[Dataset, Dataset]:
    try:
        return split_dataset(ds, cfg.validation_fraction, cfg.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _history_csv(histories: dict[str, list[dict]]) -> str:
    lines = ["phase,epoch,train_loss,val_loss,val_errors,lr"]
    for phase, rows in histories.items():
        for r in rows:
            lines.append(f"{phase},{r['epoch']},{r['train_loss']!r},{r['val_loss']!r},{r['val_errors']},{r['lr']!r}")
    return "\n".join(lines) + "\n"


# -- commands ----------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    ds = synthesize(cfg)
    out = Path(args.out)
    save_dataset(ds, out)
    write_resolved(out, cfg)
    tot = ds.total_counts()
    print(f"wrote {len(ds)} recordings, counts {dict(zip(ds.category_names[1:], tot.tolist()))} to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    ds = _load_dataset(args.dataset)
    net = cfg.network.with_(n_categories=ds.n_categories)
    learn, val = _split(ds, cfg)
    pre = None
    if args.pretrain_dataset:
        pds = _load_dataset(args.pretrain_dataset)
        if pds.n_categories != ds.n_categories:
            raise InputError("pre-training dataset has a different number of categories")
        pre = _split(pds, cfg)
    data = prepare_pipeline_data(learn, val, cfg.metric, pre)
    result = train_pipeline(data, net, cfg.train)
    best = result.best
    out = Path(args.out)
    extra = {"metric": cfg.metric.to_dict(), "t_m": cfg.train.t_m, "seed": best.seed,
             "post_filter": cfg.train.post_filter}
    save_model(out, best.params, best.quantized, extra)
    atomic_write_bytes(out.with_name(out.name + ".history.csv"), _history_csv(best.histories).encode())
    write_resolved(out, cfg, {"member_error_rates": [m.error_rate for m in result.members]})
    print(f"best seed {best.seed}: validation E float {100 * best.float_error_rate:.3f}% "
          f"final {100 * best.error_rate:.3f}%")
    return EXIT_OK


def cmd_quantize(args, cfg: RunConfig) -> int:
    params, _, extra = _load_model(args.model)
    ds = _load_dataset(args.dataset)
    metric, _ = _model_metric(extra, cfg)
    learn, _ = _split(ds, cfg)
    bags = prepare_bags(learn, metric, warn=False)
    calib = calibration_slices(bags, seed=cfg.seed)
    qm = calibrate_and_quantize(params, calib, relu_ceiling=cfg.train.relu_ceiling)
    out = Path(args.out)
    save_model(out, params, qm, extra)
    write_resolved(out, cfg)
    print(f"quantized model: {qm.weight_bytes()} weight bytes, {qm.scratch_bytes()} scratch bytes")
    return EXIT_OK


def eval_report(params, qm, extra, ds: Dataset, cfg: RunConfig, split: str, use_float: bool):
    metric, t_m = _model_metric(extra, cfg)
    if split == "validation":
        learn, target = _split(ds, cfg)
    else:
        learn, target = ds, ds
    tcfg = TrainConfig(t_m=t_m, post_filter=bool(extra.get("post_filter", True)))
    bags = prepare_bags(target, metric, warn=False)
    if qm is not None and not use_float:
        res = evaluate_quantized(qm, bags, tcfg)
    else:
        res = evaluate_bags(params, bags, tcfg)
    report = ev.CountReport(tuple(b.series_id for b in bags), np.stack(res.estimated),
                            np.stack([b.counts for b in bags]), np.array([len(b.x) for b in bags]))
    learn_bags = prepare_bags(learn, metric, warn=False)
    return report, learn_bags, bags


def cmd_eval(args, cfg: RunConfig) -> int:
    params, qm, extra = _load_model(args.model)
    ds = _load_dataset(args.dataset)
    report, learn_bags, bags = eval_report(params, qm, extra, ds, cfg, args.split, args.float)
    names = ds.category_names[1:]
    path = "float" if (args.float or qm is None) else "quantized"
    print(f"model: {path}, split: {args.split}, recordings: {len(bags)}")
    rows = report.shot_rows
    if len(rows.series_ids):
        e = report.error_rate()
        for name, ec, est, tru in zip(names, report.category_error_rates(), rows.estimated.sum(0), rows.true.sum(0)):
            print(f"  {name:<10} estimated {int(est):>6} true {int(tru):>6} E {100 * ec:7.3f}%")
        print(f"  E total {100 * e:.3f}%")
        n_learn = np.array([len(b.x) for b in learn_bags])
        t_learn = np.stack([b.counts for b in learn_bags])
        cands = rows.n_candidates
        print(f"  baseline always-non-shot {100 * ev.baseline_always_nonshot(rows.true):.1f}%")
        print(f"  baseline always-shot     {100 * ev.baseline_always_shot(rows.true, cands):.1f}%")
        wr = ev.baseline_weighted_random(t_learn, n_learn, rows.true, cands, seed=cfg.seed)
        print(f"  baseline weighted-random {100 * wr.mean():.1f}% +- {100 * wr.std():.1f}%")
    else:
        print("  no recordings with shots; error rate undefined")
    print(f"  non-shot only (false positives): {report.false_positives} "
          f"over {int(report.nonshot_only.sum())} recordings")
    if args.csv:
        lines = ["series_id," + ",".join(f"est_{n},true_{n}" for n in names)]
        for sid, est, tru in zip(report.series_ids, report.estimated, report.true):
            lines.append(sid + "," + ",".join(f"{a},{b}" for a, b in zip(est, tru)))
        atomic_write_bytes(args.csv, ("\n".join(lines) + "\n").encode())
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    ds = _load_dataset(args.dataset)
    net = cfg.network.with_(n_categories=ds.n_categories)
    learn, val = _split(ds, cfg)
    pre = _split(_load_dataset(args.pretrain_dataset), cfg) if args.pretrain_dataset else None
    data = prepare_pipeline_data(learn, val, cfg.metric, pre)
    table = ev.ablation_report(data, net, cfg.train, seeds=list(range(args.seeds)))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "ablation.csv", table.to_csv().encode())
    atomic_write_bytes(out / "ablation_quantiles.csv", table.quantiles_csv().encode())
    write_resolved(out / "ablation", cfg)
    print(table.summary())
    return EXIT_OK


def cmd_export_stream(args, cfg: RunConfig) -> int:
    ds = _load_dataset(args.dataset)
    if not 0 <= args.index < len(ds):
        raise InputError(f"recording index {args.index} out of range (dataset has {len(ds)})")
    rec = ds.records[args.index]
    save_stream(args.out, rec.series.samples, rec.series.sample_rate_hz)
    print(f"wrote {len(rec.series)} samples of {rec.series.series_id} (counts {list(rec.label.counts)})")
    return EXIT_OK


def cmd_replay(args, cfg: RunConfig) -> int:
    params, qm, extra = _load_model(args.model)
    metric, t_m = _model_metric(extra, cfg)
    try:
        samples, rate = load_stream(args.stream)
    except FileNotFoundError as exc:
        raise InputError(f"stream not found: {args.stream}") from exc
    except StreamFormatError as exc:
        raise InputError(f"bad stream file: {exc}") from exc
    model = params if (args.float or qm is None) else qm
    events, rep = run_stream(samples, metric, model, t_m, rate)
    log_text = format_events(events)
    sys.stdout.write(log_text)
    if args.events:
        atomic_write_bytes(args.events, log_text.encode())
    print(f"counts {list(rep.counts)} inferences {rep.inferences} suppressed {rep.suppressed} "
          f"candidates {rep.candidates}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weakcount", description="Weakly supervised impulse-event counting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (JSON literal)")
        sp.set_defaults(func=func)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp = add("train", cmd_train, "train a group of models and keep the best")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--pretrain-dataset")
    sp.add_argument("--out", required=True)
    sp = add("quantize", cmd_quantize, "post-training 8-bit quantization of a float model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp = add("eval", cmd_eval, "error rate, baselines and false positives")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", choices=("validation", "all"), default="validation")
    sp.add_argument("--float", action="store_true", help="use the float model even if quantized")
    sp.add_argument("--csv", help="per-recording counts output")
    sp = add("ablate", cmd_ablate, "train every ablation rung over several seeds")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--pretrain-dataset")
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--out-dir", required=True)
    sp = add("export-stream", cmd_export_stream, "write one recording as a stream replay file")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp = add("replay", cmd_replay, "run the streaming detector over a stream file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--stream", required=True)
    sp.add_argument("--events", help="event log output file")
    sp.add_argument("--float", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_run_config(args.config, args.set)
        return args.func(args, cfg)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - report, never fall back silently
        log.debug("failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
