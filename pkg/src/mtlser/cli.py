"""Command-line entry point: generate-data, train, evaluate, ablate, grad-check.

Configuration files are INI-style (``key = value`` lines under ``[generator]``,
``[split]``, ``[train]``, ``[objective]`` and ``[swfc]`` sections); command-line
flags override file values. Set ``MTLSER_LOG=DEBUG|INFO|WARNING`` for verbosity.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import data as data_mod
from .data import GeneratorConfig, load_manifest
from .evalkit import AblationGrid, ablation_json, evaluate, render_ablation, run_ablation, write_run
from .gradcheck import run_suite
from .losses import AUX_TASKS, ObjectiveConfig, SwfcConfig
from .model import ModelDims
from .trainer import TrainConfig, TrainResult, infer_dims, init_params, load_checkpoint, train

log = logging.getLogger("mtlser")

SPLIT_DEFAULTS = {"n_heldout_speakers": 10, "dev_fraction": 0.1}


class ValidationError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.replace(",", " ").split() if p]
            return tuple(type(default[0])(p) for p in parts) if default else tuple(parts)
        return raw.strip()
    except ValueError:
        raise ValidationError(f"{section}.{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _section_defaults(cls) -> dict:
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in dataclasses.fields(cls)
            if not dataclasses.is_dataclass(getattr(inst, f.name))}


_SECTIONS = {
    "generator": lambda: _section_defaults(GeneratorConfig),
    "split": lambda: dict(SPLIT_DEFAULTS),
    "train": lambda: _section_defaults(TrainConfig),
    "objective": lambda: _section_defaults(ObjectiveConfig),
    "swfc": lambda: _section_defaults(SwfcConfig),
}


def read_config(path) -> dict[str, dict]:
    """Parse a config file into ``{section: {key: typed value}}``; unknown keys are rejected."""
    out = {s: {} for s in _SECTIONS}
    if path is None:
        return out
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ValidationError(f"config {path}: {exc}") from None
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ValidationError(f"unknown config section [{section}]")
        defaults = _SECTIONS[section]()
        for key, raw in cp.items(section):
            if key not in defaults:
                raise ValidationError(f"{section}.{key}: unknown key")
            out[section][key] = _coerce(section, key, raw, defaults[key])
    return out


def _build(cls, section: str, values: dict):
    try:
        return cls(**values)
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"{section}: {exc}") from None


def build_train_config(conf: dict, args) -> TrainConfig:
    obj = _build(ObjectiveConfig, "objective", conf["objective"])
    swfc_vals = dict(conf["swfc"])
    if getattr(args, "variant", None):
        swfc_vals["variant"] = args.variant
    swfc = _build(SwfcConfig, "swfc", swfc_vals)
    tv = dict(conf["train"])
    if getattr(args, "seed", None) is not None:
        tv["seed"] = args.seed
    if getattr(args, "fusion", None):
        tv["fusion_mode"] = args.fusion
    if getattr(args, "tasks", None) is not None:
        tasks = tuple(t for t in args.tasks.replace(",", " ").split() if t)
        bad = [t for t in tasks if t not in AUX_TASKS]
        if bad:
            raise ValidationError(f"train.tasks: unknown task(s) {bad}; choose from {AUX_TASKS}")
        tv["tasks"] = tasks
        if not tasks:
            tv["use_mtl"], tv["use_coattention"] = False, False
    return _build(lambda **kw: TrainConfig(objective=obj, swfc=swfc, **kw), "train", tv)


def _out_dir(path, force: bool, marker: str) -> Path:
    out = Path(path)
    if (out / marker).exists() and not force:
        raise ValidationError(f"--out {out}: {marker} already exists (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    conf = read_config(args.config)
    gen = dict(conf["generator"])
    if args.seed is not None:
        gen["seed"] = args.seed
    gcfg = _build(GeneratorConfig, "generator", gen)
    split = {**SPLIT_DEFAULTS, **conf["split"]}
    out = _out_dir(args.out, args.force, "train.jsonl")
    corpus = data_mod.generate_corpus(gcfg)
    splits = data_mod.relabel_speakers(data_mod.split_corpus(
        corpus, int(split["n_heldout_speakers"]), float(split["dev_fraction"]), gcfg.seed))
    for name in ("train", "dev", "test"):
        data_mod.write_corpus(getattr(splits, name), out, f"{name}.jsonl", overwrite=True)
    meta = {"seed": gcfg.seed, "generator": dataclasses.asdict(gcfg), "split": split,
            "sizes": {n: len(getattr(splits, n)) for n in ("train", "dev", "test")},
            "heldout_speakers": list(splits.heldout_speakers)}
    (out / "corpus.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {sum(meta['sizes'].values())} utterances to {out} (seed {gcfg.seed})")
    return 0


def _load(manifest) -> list:
    if not Path(manifest).is_file():
        raise ValidationError(f"manifest not found: {manifest}")
    return load_manifest(manifest)


def cmd_train(args) -> int:
    cfg = build_train_config(read_config(args.config), args)
    corpus = _load(args.manifest)
    out = _out_dir(args.out, args.force or args.resume is not None, "model.ckpt")
    dims = infer_dims(corpus, cfg)
    res = train(corpus, cfg, dims, resume_from=args.resume, checkpoint_path=out / "model.ckpt")
    (out / "run.json").write_text(json.dumps({"seed": cfg.seed, "config": cfg.to_dict(),
                                              "dims": dims.to_dict()}, indent=2) + "\n", encoding="utf-8")
    with open(out / "epochs.jsonl", "w", encoding="utf-8") as fh:
        for k, b in enumerate(res.log, start=1):
            fh.write(json.dumps({"epoch": k, "seed": cfg.seed, **b.to_dict()}) + "\n")
    print(f"trained {cfg.epochs} epochs (seed {cfg.seed}); final total loss {res.log[-1].total:.6f}"
          if res.log else "no epochs run")
    return 0


def load_run(run_dir) -> TrainResult:
    run_dir = Path(run_dir)
    meta_path = run_dir / "run.json"
    if not meta_path.is_file():
        raise ValidationError(f"{run_dir}: no run.json (train output directory expected)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    cfg = TrainConfig.from_dict(meta["config"])
    dims = ModelDims(**meta["dims"])
    params = init_params(dims, cfg.seed)
    ck = load_checkpoint(run_dir / "model.ckpt", expected=params)
    for k, arr in ck.params.items():
        params[k].data = arr
    return TrainResult(params, ck.log, ck.state, dims, cfg)


def cmd_evaluate(args) -> int:
    res = load_run(args.run)
    corpus = _load(args.manifest)
    out = _out_dir(args.out, args.force, "metrics.json")
    rep = evaluate(res, corpus)
    write_run(out / "metrics.json", "evaluate", res.config.seed, rep)
    for k, v in rep.flat().items():
        print(f"{k:20s} {v:.4f}")
    return 0


def cmd_ablate(args) -> int:
    conf = read_config(args.config)
    full = build_train_config(conf, args)
    data_dir = Path(args.data)
    splits = data_mod.CorpusSplits(_load(data_dir / "train.jsonl"), [], _load(data_dir / "test.jsonl"))
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [full.seed]
    out = _out_dir(args.out, args.force, f"{args.grid}.txt")
    grid = AblationGrid.build(full, args.grid)
    rows = run_ablation(grid, splits, seeds, out_dir=out / "runs")
    text = render_ablation(rows, args.grid)
    (out / f"{args.grid}.txt").write_text(f"# seeds: {seeds}\n{text}\n", encoding="utf-8")
    (out / f"{args.grid}.json").write_text(json.dumps(ablation_json(rows), indent=2) + "\n", encoding="utf-8")
    print(f"# seeds: {seeds}")
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_suite(n_points=args.points, tolerance=args.tolerance,
                        seed=args.seed if args.seed is not None else 0)
    failed = 0
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.op:20s} max rel err {r.max_rel_error:.2e} (tol {r.tolerance:.0e})")
        failed += not r.passed
    return 2 if failed else 0


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # usage mistakes are validation errors, exit 1 rather than argparse's 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mtlser", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")

    def model_flags(sp):
        sp.add_argument("--variant", choices=("eq2_literal", "focal_supcon"), help="SWFC variant")
        sp.add_argument("--fusion", choices=("learnable", "last"))
        sp.add_argument("--tasks", help="comma-separated auxiliary tasks (asr,gender,speaker); empty for none")

    g = sub.add_parser("generate-data", help="write a synthetic corpus with train/dev/test manifests")
    common(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("manifest")
    common(t)
    model_flags(t)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a trained run on a manifest")
    e.add_argument("run", help="train output directory")
    e.add_argument("manifest")
    common(e)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="run an ablation grid")
    a.add_argument("data", help="directory written by generate-data")
    common(a)
    model_flags(a)
    a.add_argument("--grid", choices=("table2", "table3", "table4"), default="table2")
    a.add_argument("--seeds", help="comma-separated seeds (default: --seed or config seed)")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("grad-check", help="finite-difference check of every differentiable op")
    c.add_argument("--seed", type=int)
    c.add_argument("--points", type=int, default=100)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MTLSER_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, data_mod.ManifestError, data_mod.ConfigError, data_mod.FeatureFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
