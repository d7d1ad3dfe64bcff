"""Command-line driver.

Every run reads one YAML (or JSON) configuration file; command-line flags
override it. Artifacts go to a fresh ``<out>/<command>-<timestamp>``
directory so earlier runs are never overwritten.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training
divergence. Failures print a JSON object to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import autograd as ag
from .baselines import GcnBaselineModel, VaeBaselineModel, gcn_generate, vae_generate
from .errors import ConfigError, InvalidArgumentError, NangError
from .evaluation import (LAMBDA_C_GRID, METHODS, NANG_METHODS, SETTINGS, ClassifierProtocol,
                         ExperimentConfig, ExperimentResult, MethodOutput, evaluate_predictions,
                         generate_with, lambda_c_sweep, load_prediction_scores, observed_ratio_sweep, run_experiment,
                         write_outputs, write_reports)
from .graph import load_dataset, normalize_adjacency, synth_dataset, write_dataset
from .model import NangModel, TrainConfig, generate_attributes

logger = logging.getLogger("nang")

COMMANDS = ("synth", "train", "generate", "evaluate", "sweep", "all")
LEARNED_METHODS = ("nang", "nang-cross", "nang-self", "vae", "gcn")
DEFAULT_METHODS = ["nang", "neighaggre", "vae", "gcn"]


@dataclass
class SynthSpec:
    blocks: int = 3
    nodes_per_block: int = 60
    p_in: float = 0.2
    p_out: float = 0.02
    attr_dim: int = 30
    signal: float = 0.9


@dataclass
class RunConfig:
    dataset: str | None = None
    synthetic: SynthSpec | None = None
    methods: list = field(default_factory=lambda: list(DEFAULT_METHODS))
    # None: every setting the dataset supports
    settings: list | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    method_overrides: dict = field(default_factory=dict)
    protocol: ClassifierProtocol = field(default_factory=ClassifierProtocol)
    ks: list | None = None
    split: list = field(default_factory=lambda: [0.4, 0.1, 0.5])
    lambda_c_grid: list = field(default_factory=lambda: list(LAMBDA_C_GRID))
    observed_ratios: list = field(default_factory=list)
    out: str = "runs"
    seed: int = 0

    def echo(self):
        return asdict(self)

    def experiment(self):
        return ExperimentConfig(self.train, self.method_overrides, self.protocol,
                                tuple(self.ks) if self.ks else None)


# ---------------------------------------------------------------------------
# parsing

_SECTION_TYPES = {"train": TrainConfig, "protocol": ClassifierProtocol, "synthetic": SynthSpec}
# seeds come from the top-level seed only
_DERIVED_KEYS = {"seed"}
_TRAIN_SHORTCUTS = set(TrainConfig.field_names()) - _DERIVED_KEYS


def _check_type(value, default, key):
    if default is None or value is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"expected a string, got {type(value).__name__}", key)
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", key)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key)
        return value
    return value


def _build_section(cls, raw, key, base=None):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("expected a mapping", key)
    base = base if base is not None else cls()
    known = {f.name for f in fields(cls)} - _DERIVED_KEYS
    values = asdict(base)
    for name, value in raw.items():
        if name not in known:
            raise ConfigError(f"unknown key {name!r}", f"{key}.{name}")
        values[name] = _check_type(value, getattr(cls(), name), f"{key}.{name}")
    try:
        return cls(**values)
    except (InvalidArgumentError, ValueError) as exc:
        # point at the offending field when the message names it
        path = next((f"{key}.{n}" for n in sorted(known, key=len, reverse=True) if str(exc).startswith(n)), key)
        raise ConfigError(str(exc), path) from None


def _number_list(value, key, kind=float):
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                              for v in value):
        raise ConfigError("expected a list of numbers", key)
    return [kind(v) for v in value]


def _name_list(value, allowed, key):
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ConfigError("expected a list of names", key)
    for v in value:
        if v not in allowed:
            raise ConfigError(f"unknown name {v!r}; choose from {list(allowed)}", key)
    return list(value)


def config_from_dict(raw: dict, base_dir=None) -> RunConfig:
    """Validate a parsed config mapping and apply defaults."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")
    cfg = RunConfig()
    # training fields may also sit at the top level, e.g. ``lambda_c: 20``
    shortcuts = {k: raw[k] for k in raw if k in _TRAIN_SHORTCUTS}
    if shortcuts:
        section = raw.get("train") or {}
        if not isinstance(section, dict):
            raise ConfigError("expected a mapping", "train")
        for k in shortcuts:
            if k in section:
                raise ConfigError("set both at the top level and under train", k)
        raw = {k: v for k, v in raw.items() if k not in shortcuts}
        raw["train"] = {**section, **shortcuts}
    for key, value in raw.items():
        if key == "dataset":
            if not isinstance(value, str):
                raise ConfigError("expected a path string", key)
            path = Path(value)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            cfg.dataset = str(path)
        elif key in _SECTION_TYPES:
            setattr(cfg, key, _build_section(_SECTION_TYPES[key], value, key))
        elif key == "methods":
            cfg.methods = _name_list(value, METHODS, key)
        elif key == "settings":
            cfg.settings = _name_list(value, SETTINGS, key)
        elif key == "method_overrides":
            if not isinstance(value, dict):
                raise ConfigError("expected a mapping", key)
            for method, override in value.items():
                if method not in METHODS:
                    raise ConfigError(f"unknown method {method!r}", f"{key}.{method}")
                # validates the override keys and values
                _build_section(TrainConfig, override, f"{key}.{method}", base=cfg.train)
            cfg.method_overrides = {m: dict(v or {}) for m, v in value.items()}
        elif key == "ks":
            cfg.ks = _number_list(value, key, int)
        elif key == "split":
            cfg.split = _number_list(value, key)
            if len(cfg.split) != 3:
                raise ConfigError("expected three ratios", key)
        elif key == "lambda_c_grid":
            cfg.lambda_c_grid = _number_list(value, key)
        elif key == "observed_ratios":
            cfg.observed_ratios = _number_list(value, key)
        elif key == "out":
            cfg.out = _check_type(value, "", key)
        elif key == "seed":
            cfg.seed = _check_type(value, 0, key)
        else:
            raise ConfigError(f"unknown key {key!r}", key)
    for v in cfg.lambda_c_grid:
        if v < 1.0:
            raise ConfigError(f"lambda_c must be >= 1, got {v}", "lambda_c_grid")
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config file not found", str(path))
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse: {exc}", str(path)) from None
    return config_from_dict(raw, base_dir=path.parent)


def _split_list(text, convert, flag):
    try:
        return [convert(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse {text!r}", flag) from None


def apply_flags(cfg: RunConfig, args) -> RunConfig:
    """Flags win over the file; seeds are pushed into every derived section."""
    if args.dataset is not None:
        cfg.dataset = args.dataset
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.method is not None:
        cfg.methods = _name_list(_split_list(args.method, str, "--method"), METHODS, "--method")
    if args.setting is not None:
        cfg.settings = _name_list(_split_list(args.setting, str, "--setting"), SETTINGS, "--setting")
    if args.lambda_c is not None:
        values = _split_list(args.lambda_c, float, "--lambda-c")
        if any(v < 1.0 for v in values):
            raise ConfigError("lambda_c must be >= 1", "--lambda-c")
        cfg.lambda_c_grid = values
        if len(values) == 1:
            cfg.train = cfg.train.replace(lambda_c=values[0])
    if args.observed_ratio is not None:
        cfg.observed_ratios = _split_list(args.observed_ratio, float, "--observed-ratio")
    cfg.train = cfg.train.replace(seed=cfg.seed)
    cfg.protocol = ClassifierProtocol(**{**asdict(cfg.protocol), "seed": cfg.seed})
    return cfg


# ---------------------------------------------------------------------------
# execution


def make_run_dir(out, command):
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    base = Path(out) / f"{command}-{stamp}"
    run_dir, n = base, 1
    while run_dir.exists():
        run_dir = Path(f"{base}-{n}")
        n += 1
    run_dir.mkdir(parents=True)
    return run_dir


def load_bundle(cfg: RunConfig):
    if cfg.dataset is not None:
        return load_dataset(cfg.dataset, tuple(cfg.split), ag.make_rng(cfg.seed, 1))
    spec = cfg.synthetic or SynthSpec()
    return synth_dataset(spec.blocks, spec.nodes_per_block, spec.p_in, spec.p_out, spec.attr_dim,
                         spec.signal, rng=ag.make_rng(cfg.seed), ratios=tuple(cfg.split))


def resolve_settings(cfg, bundle):
    if cfg.settings is not None:
        return cfg.settings
    settings = []
    if bundle.labels is not None:
        settings += ["X", "A", "A+X"]
    if bundle.attributes.is_categorical:
        settings.append("profiling")
    return settings


def _echo(cfg, command):
    return {"command": command, "seed": cfg.seed, "config": cfg.echo()}


def _write_echo(run_dir, echo):
    (run_dir / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _header(echo):
    return [f"config {json.dumps(echo, sort_keys=True)}"]


def _load_output(method, source, bundle):
    """Rebuild test-node predictions from a checkpoint in ``source/checkpoints``."""
    path = Path(source) / "checkpoints" / f"{method}.npz"
    categorical = bundle.attributes.is_categorical
    split = bundle.split
    if method in NANG_METHODS:
        model = NangModel.load(path)
        return MethodOutput(generate_attributes(model, normalize_adjacency(bundle.graph), split.test,
                                                categorical), model)
    if method == "vae":
        model = VaeBaselineModel.load(path)
        return MethodOutput(vae_generate(model, bundle.graph, bundle.attributes.values, split.observed,
                                         split.test, categorical), model)
    if method == "gcn":
        model = GcnBaselineModel.load(path)
        return MethodOutput(gcn_generate(model, normalize_adjacency(bundle.graph), split.test, categorical),
                            model)
    raise InvalidArgumentError(f"method {method!r} has no checkpoint")


def cmd_synth(cfg, args, run_dir, echo):
    spec = cfg.synthetic or SynthSpec()
    bundle = synth_dataset(spec.blocks, spec.nodes_per_block, spec.p_in, spec.p_out, spec.attr_dim,
                           spec.signal, rng=ag.make_rng(cfg.seed), ratios=tuple(cfg.split))
    write_dataset(bundle, run_dir / "dataset", header=_header(echo))
    return {"dataset": str(run_dir / "dataset")}


def cmd_train(cfg, args, run_dir, echo):
    bundle = load_bundle(cfg)
    exp = cfg.experiment()
    outputs = {m: generate_with(m, bundle, exp) for m in cfg.methods if m in LEARNED_METHODS}
    write_outputs(ExperimentResult([], outputs), bundle, run_dir, echo, predictions=False)
    return {"checkpoints": sorted(outputs)}


def cmd_generate(cfg, args, run_dir, echo):
    bundle = load_bundle(cfg)
    exp = cfg.experiment()
    outputs = {}
    for m in cfg.methods:
        if args.source is not None and m in LEARNED_METHODS:
            outputs[m] = _load_output(m, args.source, bundle)
        else:
            outputs[m] = generate_with(m, bundle, exp)
    write_outputs(ExperimentResult([], outputs), bundle, run_dir, echo, checkpoints=args.source is None)
    return {"predictions": sorted(outputs)}


def cmd_evaluate(cfg, args, run_dir, echo):
    bundle = load_bundle(cfg)
    settings = resolve_settings(cfg, bundle)
    exp = cfg.experiment()
    if args.source is None:
        result = run_experiment(bundle, cfg.methods, settings, exp)
        write_outputs(result, bundle, run_dir, echo, checkpoints=False, predictions=False)
        reports = result.reports
    else:
        reports = []
        if "A" in settings:
            reports += run_experiment(bundle, [], ["A"], exp).reports
        for m in cfg.methods:
            pred = load_prediction_scores(Path(args.source) / "predictions" / f"{m}.npz")
            reports += evaluate_predictions(bundle, m, pred, [s for s in settings if s != "A"], exp)
    write_reports(reports, run_dir, echo)
    return {"reports": len(reports)}


def cmd_sweep(cfg, args, run_dir, echo):
    bundle = load_bundle(cfg)
    settings = resolve_settings(cfg, bundle)
    exp = cfg.experiment()
    count = 0
    if args.lambda_c is not None or not cfg.observed_ratios:
        for value, result in lambda_c_sweep(bundle, cfg.lambda_c_grid, cfg.methods, settings, exp).items():
            sub = run_dir / f"lambda_c={value!r}"
            write_reports(result.reports, sub, echo)
            write_outputs(result, bundle, sub, echo, checkpoints=False, predictions=False)
            count += 1
    if cfg.observed_ratios:
        for ratio, result in observed_ratio_sweep(bundle, cfg.observed_ratios, cfg.methods, settings,
                                                  exp).items():
            sub = run_dir / f"observed_ratio={ratio!r}"
            write_reports(result.reports, sub, echo)
            write_outputs(result, bundle, sub, echo, checkpoints=False, predictions=False)
            count += 1
    return {"report_sets": count}


def cmd_all(cfg, args, run_dir, echo):
    bundle = load_bundle(cfg)
    result = run_experiment(bundle, cfg.methods, resolve_settings(cfg, bundle), cfg.experiment())
    write_outputs(result, bundle, run_dir, echo)
    write_reports(result.reports, run_dir, echo)
    return {"reports": len(result.reports)}


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep, "all": cmd_all}


def execute(command, cfg: RunConfig, args):
    """Run ``command`` into a fresh run directory; returns (run_dir, summary)."""
    echo = _echo(cfg, command)
    run_dir = make_run_dir(cfg.out, command)
    _write_echo(run_dir, echo)
    summary = HANDLERS[command](cfg, args, run_dir, echo)
    return run_dir, summary


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, 1)


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    sys.exit(code)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run configuration")
    common.add_argument("--dataset", help="dataset directory (overrides the config)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="parent directory for run directories")
    common.add_argument("--method", help="comma-separated method names")
    common.add_argument("--setting", help="comma-separated settings: X, A, A+X, profiling")
    common.add_argument("--lambda-c", dest="lambda_c", help="comma-separated cross-reconstruction weights")
    common.add_argument("--observed-ratio", dest="observed_ratio", help="comma-separated observed-train ratios")
    common.add_argument("--from", dest="source", help="earlier run directory to reuse checkpoints/predictions")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="nang", description="Node attribute generation experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config) if args.config else RunConfig()
        cfg = apply_flags(cfg, args)
        run_dir, summary = execute(args.command, cfg, args)
    except NangError as exc:
        _fail(type(exc).__name__, str(exc), exc.exit_code)
    except OSError as exc:
        _fail(type(exc).__name__, str(exc), 2)
    print(json.dumps({"run_dir": str(run_dir), **summary}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
