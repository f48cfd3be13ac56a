"""Command-line entry point.

Every option can come from a ``key=value`` config file (``--config``) or a
flag of the same name with dashes; flags beat the file, the file beats the
defaults.  Each run writes ``manifest.txt`` (resolved config plus artifact
checksums) into its output directory, and a manifest is itself a valid
config file.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from gpq import bench, plotting
from gpq.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from gpq.detector import DetectorModel, ModelConfig, SceneConfig, generate_scenes, read_scenes, write_scenes
from gpq.fileio import atomic_write_text, sha256, write_csv
from gpq.pruning import Criterion, GradualPruner, PruneSchedule, finetune
from gpq.seeding import stream
from gpq.training import OptimizerConfig, fit

log = logging.getLogger("gpq")

TASKS = ("gen-data", "train", "prune", "eval", "bench", "analyze")
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str = "train"
    seed: int = 0
    out: str = "runs/out"
    # data
    data: str = ""
    eval_data: str = ""
    scenes: int = 1000
    train_scenes: int = 4000
    eval_scenes: int = 500
    max_objects: int = 8
    # model
    checkpoint: str = ""
    queries: int = 64
    classes: int = 4
    grid: int = 8
    embed_dim: int = 64
    value_dim: int = 64
    hidden_dim: int = 128
    heads: int = 8
    layers: int = 2
    sigma: float = 0.08
    # schedule
    iterations: int = 1000
    final_queries: int = 0
    interval: int = 0
    per_event_k: int = 1
    criterion: str = "lowest"
    one_shot: bool = False
    # optimizer; lr 0 means 4e-3 for train and half that for prune
    lr: float = 0.0
    weight_decay: float = 1e-2
    batch_size: int = 8
    grad_clip: float = 1.0
    warmup: int = 50
    # evaluation / analysis / bench
    topk: int = 10
    eval_topk: int = 100
    report: str = ""
    compare: str = ""
    flops: bool = False
    latency: bool = False
    nq: list = field(default_factory=list)
    trials: int = 30
    latency_scenes: int = 8

    def model_config(self) -> ModelConfig:
        return ModelConfig(num_queries=self.queries, num_classes=self.classes, grid=self.grid,
                           embed_dim=self.embed_dim, value_dim=self.value_dim, hidden_dim=self.hidden_dim,
                           heads=self.heads, num_layers=self.layers, sigma=self.sigma)

    def scene_config(self) -> SceneConfig:
        return SceneConfig(num_classes=self.classes, max_objects=self.max_objects)

    def resolved_lr(self) -> float:
        if self.lr:
            return self.lr
        return 2e-3 if self.task == "prune" else 4e-3

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(lr=self.resolved_lr(), weight_decay=self.weight_decay, batch_size=self.batch_size,
                               grad_clip=self.grad_clip, warmup=self.warmup)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TYPES = get_type_hints(RunConfig)
_POSITIVE = ("scenes", "train_scenes", "eval_scenes", "max_objects", "queries", "classes", "grid", "embed_dim",
             "value_dim", "hidden_dim", "heads", "layers", "iterations", "per_event_k", "batch_size", "topk",
             "eval_topk", "latency_scenes")


def _convert(key: str, raw):
    kind = _TYPES[key]
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is list:
            if isinstance(raw, list):
                return [int(v) for v in raw]
            return [int(v) for v in raw.split(",") if v.strip()]
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {getattr(kind, '__name__', kind)}") from None


def read_config_file(path) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        if key.startswith("artifact."):
            continue  # manifest checksums
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, value)
    return values


def validate(cfg: RunConfig) -> None:
    if cfg.task not in TASKS:
        raise ConfigError(f"task: must be one of {', '.join(TASKS)}")
    for key in _POSITIVE:
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key}: must be positive, got {getattr(cfg, key)}")
    for key in ("final_queries", "interval", "lr", "weight_decay", "grad_clip", "warmup"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key}: must be non-negative, got {getattr(cfg, key)}")
    if cfg.criterion not in {c.value for c in Criterion}:
        raise ConfigError(f"criterion: must be one of {', '.join(c.value for c in Criterion)}")
    if cfg.trials < 30:
        raise ConfigError(f"trials: need at least 30, got {cfg.trials}")
    if any(n < 1 for n in cfg.nq):
        raise ConfigError("nq: query counts must be positive")
    try:
        cfg.model_config()
        cfg.scene_config()
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None
    if cfg.task in ("prune", "eval", "analyze") and not cfg.checkpoint:
        raise ConfigError(f"checkpoint: required for {cfg.task}")
    if cfg.checkpoint and cfg.task in ("prune", "eval", "analyze") and not Path(cfg.checkpoint).is_file():
        raise ConfigError(f"checkpoint: no such file {cfg.checkpoint}")
    if cfg.task == "prune" and not cfg.final_queries:
        raise ConfigError("final_queries: required for prune")
    if cfg.final_queries and cfg.final_queries < cfg.max_objects:
        # every ground truth needs its own query
        raise ConfigError(f"final_queries: must be at least max_objects={cfg.max_objects}, got {cfg.final_queries}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpq", description="Gradual query pruning on a toy query-based detector.")
    sub = parser.add_subparsers(dest="task", required=True)
    for task in TASKS:
        p = sub.add_parser(task)
        p.add_argument("--config", help="key=value config file (a previous manifest works too)")
        p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
        for name, f in _FIELDS.items():
            if name == "task":
                continue
            flag = "--" + name.replace("_", "-")
            kind = _TYPES[name]
            if kind is bool:
                p.add_argument(flag, dest=name, action="store_const", const=True, default=argparse.SUPPRESS)
            elif kind is list:
                p.add_argument(flag, dest=name, action="append", type=int, default=argparse.SUPPRESS)
            else:
                p.add_argument(flag, dest=name, default=argparse.SUPPRESS)
    return parser


def resolve(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for name in _FIELDS:
        if name != "task" and hasattr(args, name):
            values[name] = _convert(name, getattr(args, name))
    values["task"] = args.task
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def write_manifest(cfg: RunConfig, out: Path, artifacts: list[Path]) -> Path:
    lines = [f"# gpq {cfg.task} run manifest"]
    for name in _FIELDS:
        value = getattr(cfg, name)
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{name}={value}")
    lines.append(f"# resolved learning rate {cfg.resolved_lr()!r}")
    for path in sorted(artifacts):
        lines.append(f"artifact.{path.name}={sha256(path)}")
    return atomic_write_text(out / "manifest.txt", "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# tasks


def _train_scenes(cfg: RunConfig):
    if cfg.data:
        return read_scenes(cfg.data)
    return generate_scenes(stream(cfg.seed, "data"), cfg.train_scenes, cfg.scene_config())


def _eval_scenes(cfg: RunConfig):
    if cfg.eval_data:
        return read_scenes(cfg.eval_data)
    return generate_scenes(stream(cfg.seed, "eval"), cfg.eval_scenes, cfg.scene_config())


def _progress(total: int):
    step = max(1, total // 10)

    def report(t, loss):
        if t % step == 0 or t == total:
            log.info("iteration %d/%d loss %.4f", t, total, loss)

    return report


def _write_log(path: Path, losses) -> Path:
    return write_csv(path, ("iteration", "loss"), [(i + 1, repr(v)) for i, v in enumerate(losses)])


def _schedule(cfg: RunConfig, initial: int) -> PruneSchedule:
    crit = Criterion(cfg.criterion)
    if cfg.interval:
        sched = PruneSchedule(cfg.iterations, initial, cfg.final_queries, cfg.interval, cfg.per_event_k,
                              crit, cfg.one_shot)
    else:
        sched = PruneSchedule.default(cfg.iterations, initial, cfg.final_queries, cfg.per_event_k, crit,
                                      cfg.one_shot)
    try:
        sched.validate()
    except ValueError as exc:
        raise ConfigError(f"schedule: {exc}") from None
    return sched


def task_gen_data(cfg: RunConfig, out: Path) -> list[Path]:
    scenes = generate_scenes(stream(cfg.seed, "data"), cfg.scenes, cfg.scene_config())
    path = out / "scenes.csv"
    write_scenes(path, scenes)
    return [path]


def task_train(cfg: RunConfig, out: Path) -> list[Path]:
    scenes = _train_scenes(cfg)
    model = DetectorModel.init(cfg.model_config(), stream(cfg.seed, "init"))
    artifacts = []
    hooks = []
    if cfg.final_queries:
        # pruning folded into training from scratch
        pruner = GradualPruner(model.bank, _schedule(cfg, model.bank.size))
        hooks.append(pruner)
    train_log = fit(model, scenes, cfg.iterations, cfg.optimizer(), cfg.seed, hooks=hooks,
                    progress=_progress(cfg.iterations))
    if hooks:
        artifacts.append(out / "prune_report.csv")
        hooks[0].report.write(artifacts[-1])
    artifacts.append(save_checkpoint(model, out / "model.gpq", {"iteration": cfg.iterations, "seed": cfg.seed}))
    artifacts.append(_write_log(out / "train_log.csv", train_log.losses))
    return artifacts


def task_prune(cfg: RunConfig, out: Path) -> list[Path]:
    model = load_checkpoint(cfg.checkpoint)
    sched = _schedule(cfg, model.bank.size)
    _, report, train_log = finetune(model, _train_scenes(cfg), sched, cfg.optimizer(), cfg.seed,
                                    progress=_progress(cfg.iterations))
    log.info("pruned %d -> %d queries in %d events", sched.initial_queries, model.bank.size, len(report.events))
    report_path = out / "prune_report.csv"
    report.write(report_path)
    return [
        report_path,
        save_checkpoint(model, out / "model.gpq", {"iteration": cfg.iterations, "seed": cfg.seed}),
        _write_log(out / "train_log.csv", train_log.losses),
        bench.export_reference_points(model.bank, out / "reference_points.csv"),
    ]


def task_eval(cfg: RunConfig, out: Path) -> list[Path]:
    model = load_checkpoint(cfg.checkpoint)
    result = bench.eval_map(model, _eval_scenes(cfg), k=cfg.eval_topk)
    print(f"mAP={result.mean_ap:.4f} queries={model.bank.size}")
    for c, ap in sorted(result.class_ap.items()):
        print(f"class {c}: AP={ap:.4f}")
    return [bench.write_eval(out / "eval.csv", result)]


def task_bench(cfg: RunConfig, out: Path) -> list[Path]:
    if cfg.checkpoint:
        base_cfg = load_checkpoint(cfg.checkpoint).config
    else:
        base_cfg = cfg.model_config()
    nqs = cfg.nq or [base_cfg.num_queries]
    artifacts = []
    do_flops = cfg.flops or not cfg.latency
    if do_flops:
        reports = []
        for n in nqs:
            rep = bench.count_flops(bench.FlopsConfig(n, base_cfg.num_keys, base_cfg.embed_dim, base_cfg.value_dim,
                                                      base_cfg.hidden_dim, base_cfg.heads, base_cfg.num_layers,
                                                      base_cfg.num_classes, 4 * base_cfg.frequencies))
            reports.append(rep)
            artifacts.append(bench.write_flops(out / f"flops_nq{n}.csv", rep))
        first = reports[0].total
        rows = [(r.config.num_queries, r.total, f"{r.gflops:.6f}", f"{100 * (1 - r.total / first):.2f}")
                for r in reports]
        for row in rows:
            print(f"nq={row[0]} flops={row[1]} gflops={row[2]} reduction={row[3]}%")
        artifacts.append(write_csv(out / "flops_summary.csv", ("nq", "flops", "gflops", "reduction_pct"), rows))
        artifacts.append(plotting.plot_flops(reports, out / "flops.png"))
    if cfg.latency:
        scenes = generate_scenes(stream(cfg.seed, "eval"), cfg.latency_scenes, cfg.scene_config())
        stats = []
        for n in nqs:
            model = DetectorModel.init(dataclasses.replace(base_cfg, num_queries=n), stream(cfg.seed, "init"))
            s = bench.measure_latency(model, scenes, cfg.trials)
            stats.append(s)
            print(f"nq={n} median_ms={s.median_ms:.3f} p90_ms={s.p90_ms:.3f}")
        artifacts.append(write_csv(out / "latency.csv", ("nq", "trials", "median_ms", "p90_ms"),
                                   [(n, s.trials, f"{s.median_ms:.4f}", f"{s.p90_ms:.4f}") for n, s in zip(nqs, stats)]))
        artifacts.append(plotting.plot_latency(nqs, stats, out / "latency.png"))
    return artifacts


def task_analyze(cfg: RunConfig, out: Path) -> list[Path]:
    model = load_checkpoint(cfg.checkpoint)
    scenes = _eval_scenes(cfg)
    k = min(cfg.topk, model.bank.size * model.config.num_classes)
    counts = bench.selection_frequency(model, scenes, k)
    counts_sorted = [c for _, c in counts]
    print(f"selection counts over {len(scenes)} scenes, k={k}: min={counts_sorted[0]} max={counts_sorted[-1]} "
          f"never_selected={sum(1 for c in counts_sorted if c == 0)}")
    artifacts = [
        bench.write_frequency(out / "frequency.csv", counts),
        plotting.plot_selection_frequency(counts, out / "frequency.png"),
        bench.export_reference_points(model.bank, out / "reference_points.csv"),
    ]
    pts = model.bank.ref_points.data
    alive = [i in set(model.bank.alive) for i in range(len(pts))]
    panels = [(f"{len(model.bank.alive)} alive / {len(pts)}", pts, alive)]
    if cfg.compare:
        other = load_checkpoint(cfg.compare)
        opts = other.bank.ref_points.data
        panels.append((f"compare: {other.bank.size} alive", opts, [i in set(other.bank.alive) for i in range(len(opts))]))
    artifacts.append(plotting.plot_reference_points(panels, out / "reference_points.png"))
    if cfg.report:
        from gpq.pruning import PruneReport

        events = PruneReport.read_events(cfg.report)
        initial = model.bank.size + sum(len(e.removed) for e in events)
        artifacts.append(plotting.plot_prune_trace(events, initial, None, out / "prune_trace.png"))
    return artifacts


RUNNERS = {
    "gen-data": task_gen_data,
    "train": task_train,
    "prune": task_prune,
    "eval": task_eval,
    "bench": task_bench,
    "analyze": task_analyze,
}


def run(cfg: RunConfig) -> list[Path]:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = RUNNERS[cfg.task](cfg, out)
    artifacts.append(write_manifest(cfg, out, artifacts))
    return artifacts


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve(args)
        run(cfg)
    except ConfigError as exc:
        print(f"gpq: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError, ValueError) as exc:
        print(f"gpq: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
