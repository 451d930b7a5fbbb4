"""Command-line driver: ``tslora <command> [options]``.

Every command writes its artifacts under ``--output-dir`` together with a
``<command>.manifest.json`` describing the resolved configuration, derived
seeds, artifacts, tool version and wall time. The manifest is written even
when the command fails.

Exit codes: 0 success, 1 runtime or data error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import (
    CONTEXT_LENGTH,
    HORIZON,
    VITALS,
    Dataset,
    generate_synthetic,
    load_dataset,
    prepare_dataset,
    read_csv,
    save_dataset,
    write_csv,
)
from .errors import ConfigError, TsloraError
from .evaluation import (
    N_RUNS,
    N_SAMPLES,
    SETTINGS,
    evaluate_model,
    metric_spread,
    param_tradeoff,
    rank_sweep,
    read_long_csv,
    write_long_csv,
    write_rank_csv,
    write_tradeoff_csv,
    write_wide_csv,
)
from .lora import DEFAULT_ALPHA, DEFAULT_RANK, inject_lora, load_adapters, save_adapters, validate_rank
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import DEFAULT_LR, TrainConfig, train_loop

log = logging.getLogger("tslora")

MODEL_LABEL = "toy"


class _Parser(argparse.ArgumentParser):
    """Raise instead of exiting so the manifest can still be written."""

    def error(self, message):
        raise ConfigError(message)


class RunContext:
    def __init__(self, command: str, argv: Sequence[str], output_dir: Path, seed: int):
        self.command = command
        self.argv = list(argv)
        self.output_dir = output_dir
        self.seed = seed
        self.seeds: dict[str, int] = {"root": seed}
        self.artifacts: list[str] = []
        self.inputs: list[str] = []
        self.config: dict = {}
        self.extra: dict = {}

    def derive(self, name: str) -> int:
        """Child seed for one stochastic component, stable across runs and platforms."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])
        value = int(ss.generate_state(1)[0])
        self.seeds[name] = value
        return value

    def path(self, name: str) -> Path:
        p = self.output_dir / name
        if name not in self.artifacts:
            self.artifacts.append(name)
        return p

    def uses(self, path) -> Path:
        self.inputs.append(str(path))
        return Path(path)

    def write_manifest(self, started: float, status: str, error: str | None = None,
                       exit_code: int = 0) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "version": __version__,
            "wall_time_s": round(time.perf_counter() - started, 3),
            "status": status,
            "exit_code": exit_code,
            "error": error,
            **self.extra,
        }
        path = self.output_dir / f"{self.command}.manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path


# ------------------------------------------------------------ value types


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not value > 0 or not np.isfinite(value):
        raise argparse.ArgumentTypeError(f"must be a positive finite number, got {text}")
    return value


def _probability(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1), got {text}")
    return value


def _rank_list(text: str) -> list[int]:
    try:
        ranks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ranks:
        raise argparse.ArgumentTypeError("rank list is empty")
    bad = [r for r in ranks if r < 1]
    if bad:
        raise argparse.ArgumentTypeError(f"ranks must be >= 1, got {bad}")
    return ranks


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


# ----------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=_seed, default=0,
                   help="root seed; every stochastic component derives its own seed from it")
    p.add_argument("--output-dir", type=Path, default=Path("tslora-out"),
                   help="directory for artifacts and the run manifest")
    p.add_argument("--config", type=Path, default=None,
                   help="key=value file; command-line flags override it, it overrides defaults")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _model_flags(p: argparse.ArgumentParser) -> None:
    d = ModelConfig()
    g = p.add_argument_group("model")
    g.add_argument("--d-model", type=_positive_int, default=d.d_model, help="hidden width")
    g.add_argument("--n-heads", type=_positive_int, default=d.n_heads, help="attention heads")
    g.add_argument("--n-layers", type=_positive_int, default=d.n_layers, help="decoder blocks")
    g.add_argument("--d-ff", type=_positive_int, default=d.d_ff, help="feed-forward width")


def _window_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("windowing")
    g.add_argument("--context", type=_positive_int, default=CONTEXT_LENGTH,
                   help="context length C (72 points = 6 hours at 5-minute sampling)")
    g.add_argument("--horizon", type=_positive_int, default=HORIZON,
                   help="forecast horizon h (36 points = 3 hours)")
    g.add_argument("--stride", type=_positive_int, default=None,
                   help="window stride (default: the horizon, so horizons never overlap)")
    g.add_argument("--filter-window", type=_positive_int, default=5,
                   help="odd moving-average width of the low-pass filter")


def _train_flags(p: argparse.ArgumentParser, epochs: int = 30) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=_positive_int, default=epochs, help="maximum epochs")
    g.add_argument("--lr", type=_positive_float, default=None,
                   help="Adam learning rate; unset means the per-mode default "
                        + ", ".join(f"{k} {v:g}" for k, v in DEFAULT_LR.items()))
    g.add_argument("--batch-size", type=_positive_int, default=16, help="windows per optimizer step")
    g.add_argument("--patience", type=_nonneg_int, default=5,
                   help="early-stopping patience in epochs on validation loss; 0 disables it")
    g.add_argument("--clip-norm", type=_positive_float, default=1.0, help="global gradient-norm clip")


def _lora_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("LoRA")
    g.add_argument("--rank", type=_positive_int, default=DEFAULT_RANK, help="adapter rank r")
    g.add_argument("--alpha", type=_positive_float, default=DEFAULT_ALPHA,
                   help="adapter scaling alpha; the update is scaled by alpha / r")
    g.add_argument("--targets", default="qkvo", help="attention matrices to adapt, subset of qkvo")


def _eval_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("evaluation")
    g.add_argument("--n-samples", type=_positive_int, default=N_SAMPLES,
                   help="sampled paths per window, reduced by their per-step median")
    g.add_argument("--n-runs", type=_positive_int, default=N_RUNS,
                   help="independent forecasting runs averaged in the report")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="tslora", description="LoRA fine-tuning of a toy probabilistic forecaster.",
                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic corpus CSV", formatter_class=fmt)
    p.add_argument("--regime", choices=("source", "target"), default="target",
                   help="source = broad pretraining mix, target = vital-sign-like")
    p.add_argument("--vital", choices=VITALS + ("both",), default="both", help="vital(s) to generate")
    p.add_argument("--patients", type=_positive_int, default=50, help="patients per vital")
    p.add_argument("--length", type=_positive_int, default=108, help="points per series")
    p.add_argument("--missing-prob", type=_probability, default=0.02, help="per-point drop probability")
    p.add_argument("--out", default="corpus.csv", help="output file name inside --output-dir")
    _common(p)

    p = sub.add_parser("prepare", help="run the preprocessing chain into a dataset file",
                       formatter_class=fmt)
    p.add_argument("--input", type=Path, nargs="+", required=True, help="corpus CSV file(s)")
    p.add_argument("--out", default="dataset.ds", help="output file name inside --output-dir")
    _window_flags(p)
    _common(p)

    p = sub.add_parser("pretrain", help="train a fresh model on a dataset", formatter_class=fmt)
    p.add_argument("--dataset", type=Path, required=True, help="dataset file from `prepare`")
    p.add_argument("--out", default="pretrained.ckpt", help="checkpoint file name")
    _model_flags(p)
    _train_flags(p)
    _common(p)

    p = sub.add_parser("finetune", help="full or LoRA fine-tuning of a checkpoint", formatter_class=fmt)
    p.add_argument("--mode", choices=("full", "lora"), required=True, help="what to train")
    p.add_argument("--checkpoint", type=Path, required=True, help="base model checkpoint")
    p.add_argument("--dataset", type=Path, required=True, help="target dataset file")
    _lora_flags(p)
    _train_flags(p)
    _common(p)

    p = sub.add_parser("evaluate", help="sampled multi-run evaluation on the test split",
                       formatter_class=fmt)
    p.add_argument("--setting", choices=SETTINGS, required=True, help="label of the evaluated model")
    p.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint")
    p.add_argument("--adapters", type=Path, default=None, help="adapter file (setting lora_ft)")
    p.add_argument("--dataset", type=Path, required=True, help="dataset file")
    _eval_flags(p)
    _common(p)

    p = sub.add_parser("ablate", help="rank sweep: `ablate ranks 1,2,4,8,16`", formatter_class=fmt)
    p.add_argument("axis", choices=("ranks",), help="ablation axis")
    p.add_argument("ranks", type=_rank_list, help="comma-separated ranks")
    p.add_argument("--checkpoint", type=Path, default=None,
                   help="pretrained checkpoint; without it a model is pretrained on synthetic data")
    p.add_argument("--dataset", type=Path, default=None,
                   help="target dataset; without it a synthetic target corpus is generated")
    p.add_argument("--alpha", type=_positive_float, default=DEFAULT_ALPHA, help="adapter scaling alpha")
    p.add_argument("--vital", choices=VITALS, default="MeanBP", help="vital of the synthetic target")
    _synthetic_flags(p)
    _model_flags(p)
    _train_flags(p, epochs=15)
    _eval_flags(p)
    _common(p)

    p = sub.add_parser("compare", help="zero-shot vs full vs LoRA fine-tuning for both vitals",
                       formatter_class=fmt)
    _synthetic_flags(p)
    _model_flags(p)
    _lora_flags(p)
    _train_flags(p, epochs=15)
    _eval_flags(p)
    _common(p)

    p = sub.add_parser("report", help="merge long report CSVs into the wide table", formatter_class=fmt)
    p.add_argument("--inputs", type=Path, nargs="+", required=True, help="long-format report CSVs")
    p.add_argument("--out", default="report_wide.csv", help="output file name")
    _common(p)
    return parser


def _synthetic_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic experiment")
    g.add_argument("--source-patients", type=_positive_int, default=30, help="pretraining patients per vital")
    g.add_argument("--source-length", type=_positive_int, default=216, help="points per source series")
    g.add_argument("--target-patients", type=_positive_int, default=100,
                   help="target patients per vital (one 72+36 window each at length 108)")
    g.add_argument("--finetune-windows", type=_nonneg_int, default=40,
                   help="fine-tune on a seeded subset of this many training windows; 0 keeps all")
    g.add_argument("--target-length", type=_positive_int, default=108, help="points per target series")
    g.add_argument("--pretrain-epochs", type=_positive_int, default=4, help="epochs on the source regime")
    g.add_argument("--context", type=_positive_int, default=CONTEXT_LENGTH, help="context length C")
    g.add_argument("--horizon", type=_positive_int, default=HORIZON, help="forecast horizon h")


# ------------------------------------------------------------ config file


def _read_config_file(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist", flag="config")
    values = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}", flag="config")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _apply_config_file(sub: argparse.ArgumentParser, values: dict[str, str]) -> dict:
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or not action.option_strings:
            raise ConfigError(f"unknown config key {key!r}", flag="config")
        try:
            value = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise ConfigError(f"config key {key}: {exc}", flag=key) from None
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes", "on")
        if action.nargs == "+":
            value = [action.type(v) if action.type else v for v in raw.split()]
        if action.choices is not None and value not in action.choices:
            raise ConfigError(f"config key {key}: {value!r} not in {list(action.choices)}", flag=key)
        defaults[key] = value
    sub.set_defaults(**defaults)
    return defaults


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    """Parse with precedence: flags > config file > built-in defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        from_file = _apply_config_file(sub, _read_config_file(args.config))
        args = parser.parse_args(argv)
        args._from_file = sorted(from_file)
    return args


def _flag_name(flag: str | None) -> str | None:
    if flag is None:
        return None
    return flag if flag in ("ranks",) else "--" + flag.replace("_", "-")


# -------------------------------------------------------------- commands


def _train_config(args, mode: str, seed: int) -> TrainConfig:
    return TrainConfig(mode=mode, learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                       seed=seed, patience=args.patience or None, clip_norm=args.clip_norm)


def _model_config(args) -> ModelConfig:
    return ModelConfig(d_model=args.d_model, n_heads=args.n_heads, n_layers=args.n_layers,
                       d_ff=args.d_ff, context_length=args.context, horizon=args.horizon)


def cmd_synth(args, ctx: RunContext) -> None:
    vitals = VITALS if args.vital == "both" else (args.vital,)
    corpus = []
    for vital in vitals:
        corpus += generate_synthetic(args.patients, args.length, args.regime,
                                     ctx.derive(f"synth/{args.regime}/{vital}"), vital, args.missing_prob)
    write_csv(corpus, ctx.path(args.out))
    print(f"wrote {len(corpus)} series to {ctx.output_dir / args.out}")


def cmd_prepare(args, ctx: RunContext) -> None:
    corpus = [s for p in args.input for s in read_csv(ctx.uses(p))]
    ds = prepare_dataset(corpus, args.context, args.horizon, args.stride or args.horizon,
                         args.filter_window, ctx.derive("split"))
    save_dataset(ds, ctx.path(args.out))
    ctx.extra["split_sizes"] = list(ds.sizes())
    print(f"train/val/test windows: {ds.sizes()}")


def _dataset_window(ds: Dataset) -> tuple[int, int]:
    sample = (ds.train or ds.val or ds.test)[0]
    return sample.context.size, sample.horizon.size


def cmd_pretrain(args, ctx: RunContext) -> None:
    ds = load_dataset(ctx.uses(args.dataset))
    args.context, args.horizon = _dataset_window(ds)
    model = build_model(_model_config(args), ctx.derive("init"))
    hist = train_loop(model, ds, _train_config(args, "pretrain", ctx.derive("train/pretrain")))
    save_checkpoint(model, ctx.path(args.out))
    hist.to_csv(ctx.path("pretrain_history.csv"))
    print(f"pretrained {model.num_params()} parameters for {hist.epochs} epochs, "
          f"best epoch {hist.best_epoch + 1}")


def cmd_finetune(args, ctx: RunContext) -> None:
    base = load_checkpoint(ctx.uses(args.checkpoint))
    ds = load_dataset(ctx.uses(args.dataset))
    if args.mode == "full":
        model = base.copy()
        hist = train_loop(model, ds, _train_config(args, "full_ft", ctx.derive("train/full_ft")))
        save_checkpoint(model, ctx.path("full_ft.ckpt"))
    else:
        model = inject_lora(base, args.targets, r=args.rank, alpha=args.alpha, seed=ctx.derive("lora/init"))
        hist = train_loop(model, ds, _train_config(args, "lora_ft", ctx.derive("train/lora_ft")))
        save_adapters(model, ctx.path("lora_ft.lora"))
    hist.to_csv(ctx.path(f"{args.mode}_ft_history.csv"))
    ctx.extra["trainable_params"] = hist.trainable_params
    print(f"{args.mode} fine-tune: {hist.trainable_params} trainable parameters, {hist.epochs} epochs")


def _evaluate_all(model, ds: Dataset, setting: str, args, seed: int) -> list:
    reports = []
    for vital in sorted({s.vital for s in ds.test}):
        test = [s for s in ds.test if s.vital == vital]
        reports.append(evaluate_model(model, test, ds.scaling, args.n_samples, args.n_runs, seed,
                                      label=MODEL_LABEL, setting=setting))
    return reports


def cmd_evaluate(args, ctx: RunContext) -> None:
    model = load_checkpoint(ctx.uses(args.checkpoint))
    if args.setting == "lora_ft":
        if args.adapters is None:
            raise ConfigError("setting lora_ft needs an adapter file", flag="adapters")
        model = load_adapters(ctx.uses(args.adapters), model)
    elif args.adapters is not None:
        raise ConfigError(f"--adapters only applies to setting lora_ft, not {args.setting}",
                          flag="adapters")
    ds = load_dataset(ctx.uses(args.dataset))
    reports = _evaluate_all(model, ds, args.setting, args, ctx.derive("eval"))
    write_long_csv(reports, ctx.path(f"report_{args.setting}.csv"))
    ctx.extra["sampling"] = {"n_samples": args.n_samples, "n_runs": args.n_runs}
    for rep in reports:
        print(f"{rep.setting} {rep.vital}: mse {rep.mse:.6g} dtw {rep.dtw:.6g} mape {rep.mape:.6g}")


def _synthetic_experiment(args, ctx: RunContext, vitals: Sequence[str]):
    """Pretrain on the source regime; return the model and one target dataset per vital."""
    config = _model_config(args)
    source = []
    for vital in VITALS:
        source += generate_synthetic(args.source_patients, args.source_length, "source",
                                     ctx.derive(f"data/source/{vital}"), vital)
    src_ds = prepare_dataset(source, args.context, args.horizon, args.horizon,
                             seed=ctx.derive("split/source"))
    targets = {vital: _synthetic_target(args, ctx, vital) for vital in vitals}
    model = build_model(config, ctx.derive("init"))
    cfg = _train_config(args, "pretrain", ctx.derive("train/pretrain"))
    cfg.epochs = args.pretrain_epochs
    log.info("pretraining on %d source windows", len(src_ds.train))
    train_loop(model, src_ds, cfg)
    ctx.extra["split_sizes"] = {"source": list(src_ds.sizes()),
                                **{v: list(ds.sizes()) for v, ds in targets.items()}}
    return model, targets


def _synthetic_target(args, ctx: RunContext, vital: str) -> Dataset:
    """Target dataset; the training split is cut down to ``--finetune-windows``."""
    corpus = generate_synthetic(args.target_patients, args.target_length, "target",
                                ctx.derive(f"data/target/{vital}"), vital)
    ds = prepare_dataset(corpus, args.context, args.horizon, args.horizon,
                         seed=ctx.derive(f"split/target/{vital}"))
    n = args.finetune_windows
    if n and n < len(ds.train):
        keep = np.random.default_rng(ctx.derive(f"subset/target/{vital}")).choice(len(ds.train), n, replace=False)
        ds = Dataset([ds.train[i] for i in sorted(keep)], ds.val, ds.test, ds.scaling)
    return ds


def cmd_ablate(args, ctx: RunContext) -> None:
    base = load_checkpoint(ctx.uses(args.checkpoint)) if args.checkpoint is not None else None
    d_model = base.config.d_model if base is not None else args.d_model
    try:
        for r in args.ranks:
            validate_rank(r, d_model)
    except ConfigError as exc:
        raise ConfigError(str(exc), flag="ranks") from None
    ds = None
    if args.dataset is not None:
        ds = load_dataset(ctx.uses(args.dataset))
        args.context, args.horizon = _dataset_window(ds)
    if base is None:
        base, targets = _synthetic_experiment(args, ctx, [] if ds is not None else [args.vital])
        ds = ds if ds is not None else targets[args.vital]
    elif ds is None:
        args.context, args.horizon = base.config.context_length, base.config.horizon
        ds = _synthetic_target(args, ctx, args.vital)
    cfg = _train_config(args, "lora_ft", ctx.derive("train/lora_ft"))
    rows = rank_sweep(base, ds, args.ranks, args.alpha, cfg, args.n_samples, args.n_runs,
                      ctx.derive("ablate"), label=MODEL_LABEL)
    write_rank_csv(rows, ctx.path("rank_sweep.csv"))
    spread = metric_spread(rows, "mse")
    ctx.extra["mse_spread"] = spread
    for row in rows:
        print(f"r={row.rank:<3d} params={row.trainable_params:<6d} mse={row.mse:.6g} "
              f"dtw={row.dtw:.6g} mape={row.mape:.6g}")
    print(f"mse spread (best to worst): {spread:.6g}")


def cmd_compare(args, ctx: RunContext) -> None:
    validate_rank(args.rank, args.d_model)
    base, targets = _synthetic_experiment(args, ctx, VITALS)
    eval_seed = ctx.derive("eval")
    reports = []
    for vital in sorted(targets):
        ds = targets[vital]
        reports += _evaluate_all(base, ds, "zero_shot", args, eval_seed)
        full = base.copy()
        train_loop(full, ds, _train_config(args, "full_ft", ctx.derive(f"train/full_ft/{vital}")))
        reports += _evaluate_all(full, ds, "full_ft", args, eval_seed)
        adapted = inject_lora(base, args.targets, r=args.rank, alpha=args.alpha,
                              seed=ctx.derive(f"lora/init/{vital}"))
        train_loop(adapted, ds, _train_config(args, "lora_ft", ctx.derive(f"train/lora_ft/{vital}")))
        reports += _evaluate_all(adapted, ds, "lora_ft", args, eval_seed)
    write_long_csv(reports, ctx.path("report_long.csv"))
    write_wide_csv(reports, ctx.path("report_wide.csv"))
    write_tradeoff_csv(param_tradeoff(reports), ctx.path("tradeoff.csv"))
    ctx.extra["sampling"] = {"n_samples": args.n_samples, "n_runs": args.n_runs}
    for rep in reports:
        print(f"{rep.vital:<9s} {rep.setting:<9s} mse {rep.mse:.6g} dtw {rep.dtw:.6g} "
              f"mape {rep.mape:.6g} finetuned {rep.trainable_params}")


def cmd_report(args, ctx: RunContext) -> None:
    reports = [rep for p in args.inputs for rep in read_long_csv(ctx.uses(p))]
    if not reports:
        raise ConfigError("no report rows found in the inputs", flag="inputs")
    write_wide_csv(reports, ctx.path(args.out))
    print(f"merged {len(reports)} reports into {ctx.output_dir / args.out}")


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
    "report": cmd_report,
}


# ------------------------------------------------------------------ entry


def _guess_context(argv: Sequence[str]) -> RunContext | None:
    """Best-effort manifest target when argument parsing itself failed."""
    command = next((a for a in argv if a in COMMANDS), None)
    if command is None:
        return None
    out = Path("tslora-out")
    for i, a in enumerate(argv):
        if a == "--output-dir" and i + 1 < len(argv):
            out = Path(argv[i + 1])
        elif a.startswith("--output-dir="):
            out = Path(a.split("=", 1)[1])
    return RunContext(command, argv, out, 0)


def _config_snapshot(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k.startswith("_"):
            continue
        out[k] = str(v) if isinstance(v, Path) else [str(x) for x in v] if isinstance(v, list) and \
            v and isinstance(v[0], Path) else v
    return out


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    started = time.perf_counter()
    ctx = None
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        ctx = RunContext(args.command, argv, args.output_dir, args.seed)
        ctx.config = _config_snapshot(args)
        ctx.output_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, ctx)
    except ConfigError as exc:
        flag = _flag_name(exc.flag)
        msg = f"{flag}: {exc}" if flag else str(exc)
        print(f"tslora: error: {msg}", file=sys.stderr)
        ctx = ctx or _guess_context(argv)
        if ctx is not None:
            ctx.write_manifest(started, "error", msg, 2)
        return 2
    except (TsloraError, OSError) as exc:
        print(f"tslora: error: {exc}", file=sys.stderr)
        if ctx is not None:
            ctx.write_manifest(started, "error", str(exc), 1)
        return 1
    ctx.write_manifest(started, "ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
