"""``cmil`` command line: generate datasets, train runs, report tables.

Config files are flat ``section.key = value`` text (``#`` starts a comment).
Sections mirror the dataclasses: ``synth``, ``model``, ``gdat``, ``bppl``,
``train`` and ``run``.  Values are JSON literals; bare words are strings.
Unknown keys are rejected.  Every key left out keeps its default, and the
defaults are the published hyperparameters (``--desk`` swaps in the small
CPU preset first).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import RunConfig, TrainConfig, desk_config, preset, run_sequence, write_run
from .bppl import BpplConfig
from .gdat import GdatConfig
from .model import ModelConfig
from .synth import SynthConfig, build_sequence, clear_directory, content_hash, load_sequence, save_sequence

log = logging.getLogger("cmil")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# keys that are derived at run time and therefore not settable from a file
_DERIVED = {"model": {"feature_dim", "num_classes", "gdat"}, "bppl": {"positive_classes"}, "train": set(),
            "synth": set(), "gdat": set(), "run": {"synth", "model", "bppl", "train"}}
_SECTIONS = {"synth": SynthConfig, "model": ModelConfig, "gdat": GdatConfig,
             "bppl": BpplConfig, "train": TrainConfig, "run": RunConfig}

ABLATIONS = {
    "gdat": ("model", {"use_gdat": False}),
    "bppl": ("train", {"use_bppl": False}),
    "owlora": ("train", {"use_owlora": False}),
    "projection": ("train", {"projection_on": False}),
    "lin": ("train", {"lambda3": 0.0}),
}
METHODS = ("full", "finetune", "joint", "joint_no_bppl")
REPORT_COLUMNS = ("acc_inst", "forget_inst", "iou", "dice", "acc_bag", "forget_bag", "macc_bag")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def settable_keys() -> dict[str, dict[str, object]]:
    """``{section: {key: default}}`` for every key a config file may set."""
    base = RunConfig()
    current = {"synth": base.synth, "model": base.model, "gdat": base.model.gdat,
               "bppl": base.bppl, "train": base.train, "run": base}
    return {s: {f.name: getattr(current[s], f.name) for f in fields(cls) if f.name not in _DERIVED[s]}
            for s, cls in _SECTIONS.items()}


def _coerce(key: str, raw: str, default):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if default is None:
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{key}: expected an integer or null, got {raw!r}")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    raise ConfigError(f"{key}: expected {type(default).__name__}, got {raw!r}")


def parse_config_text(text: str) -> dict[str, dict[str, object]]:
    known = settable_keys()
    out: dict[str, dict[str, object]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in known or name not in known[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out.setdefault(section, {})[name] = _coerce(key, raw, known[section][name])
    return out


def apply_overrides(base: RunConfig, overrides: dict[str, dict[str, object]]) -> RunConfig:
    try:
        gdat = replace(base.model.gdat, **overrides.get("gdat", {}))
        model = replace(base.model, gdat=gdat, **overrides.get("model", {}))
        synth = replace(base.synth, **overrides.get("synth", {}))
        synth.validate()
        return replace(base, synth=synth, model=model,
                       bppl=replace(base.bppl, **overrides.get("bppl", {})),
                       train=replace(base.train, **overrides.get("train", {})),
                       **overrides.get("run", {}))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | None, desk: bool, seed: int | None) -> RunConfig:
    base = desk_config() if desk else RunConfig()
    overrides: dict[str, dict[str, object]] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        overrides = parse_config_text(text)
    config = apply_overrides(base, overrides)
    if seed is not None:
        config = replace(config, data_seed=seed, train=replace(config.train, seed=seed))
    return config


def dump_config(config: RunConfig) -> str:
    """Render ``config`` in the file format; ``parse_config_text`` reads it back."""
    current = {"synth": config.synth, "model": config.model, "gdat": config.model.gdat,
               "bppl": config.bppl, "train": config.train, "run": config}
    lines = []
    for section, keys in settable_keys().items():
        for key in keys:
            lines.append(f"{section}.{key} = {json.dumps(getattr(current[section], key))}")
    return "\n".join(lines) + "\n"


def with_method(config: RunConfig, method: str, ablate: list[str]) -> RunConfig:
    config = preset(method, config)
    label = method
    for name in ablate:
        section, change = ABLATIONS[name]
        if section == "model":
            config = replace(config, model=replace(config.model, **change))
        else:
            config = replace(config, train=replace(config.train, **change))
        label += f"-no_{name}"
    return replace(config, label=label)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _nonempty(path: Path) -> bool:
    return path.exists() and any(path.iterdir())


def generate_dataset(config: RunConfig, out: Path, force: bool) -> str:
    if _nonempty(out):
        if not force:
            raise ConfigError(f"{out} is not empty (use --force to overwrite)")
        clear_directory(out)
    datasets = build_sequence(config.num_tasks, config.bags_per_task, config.data_seed, config.synth)
    save_sequence(datasets, out, base_seed=config.data_seed, bags_per_task=config.bags_per_task,
                  config=config.synth)
    return content_hash(out)


def cmd_generate(args) -> int:
    config = load_config(args.config, args.desk, args.seed[0] if args.seed else None)
    digest = generate_dataset(config, Path(args.out), args.force)
    print(f"{args.out}\t{digest}")
    return EXIT_OK


def _train_one(job: dict) -> str:
    config: RunConfig = job["config"]
    out = Path(job["out"])
    if job["regen"]:
        data_dir = out / "data"
        generate_dataset(config, data_dir, force=True)
    else:
        data_dir = Path(job["data"])
    datasets = load_sequence(data_dir)
    config = replace(config, synth=_synth_of(data_dir), num_tasks=len(datasets))
    result = run_sequence(config, datasets, checkpoint_dir=out / "checkpoints", resume_from=job["resume"])
    write_run(result, out, extra={
        "data_dir": str(data_dir),
        "data_hash": content_hash(data_dir),
        "config_text": dump_config(config),
        "version": __version__,
    })
    return str(out)


def _synth_of(data_dir: Path) -> SynthConfig:
    manifest = json.loads((data_dir / "manifest.json").read_text())
    return SynthConfig(**manifest["config"])


def cmd_train(args) -> int:
    seeds = args.seed or [None]
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if args.resume and len(seeds) > 1:
        raise ConfigError("--resume takes a single --seed")
    if not args.regen:
        if args.data is None:
            raise ConfigError("--data is required unless --regen is given")
        if not (Path(args.data) / "manifest.json").is_file():
            raise FileNotFoundError(f"no dataset at {args.data} (run 'cmil generate' or pass --regen)")
    jobs = []
    for seed in seeds:
        config = with_method(load_config(args.config, args.desk, seed), args.method, args.ablate or [])
        out = Path(args.out) / f"seed{config.train.seed}"
        if _nonempty(out) and not (args.force or args.resume):
            raise ConfigError(f"{out} is not empty (use --force to overwrite)")
        if args.force and not args.resume:
            clear_directory(out)
        jobs.append({"config": config, "out": str(out), "data": args.data, "regen": args.regen,
                     "resume": args.resume})
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            done = list(pool.map(_train_one, jobs))
    else:
        done = [_train_one(j) for j in jobs]
    for path in done:
        summary = json.loads((Path(path) / "summary.json").read_text())
        print(f"{path}\tacc_inst={summary['acc_inst']:.4f}\tacc_bag={summary['acc_bag']:.4f}")
    return EXIT_OK


def collect_summaries(paths: list[str]) -> list[dict]:
    found = []
    for p in map(Path, paths):
        if (p / "summary.json").is_file():
            found.append(p / "summary.json")
        elif p.is_dir():
            found += sorted(p.rglob("summary.json"))
        else:
            raise FileNotFoundError(f"{p} is not a run directory")
    if not found:
        raise FileNotFoundError("no summary.json under the given paths")
    summaries = [json.loads(f.read_text()) for f in found]
    schema = set(summaries[0])
    for f, s in zip(found, summaries):
        if set(s) != schema:
            raise ConfigError(f"metric schema of {f} differs from {found[0]}")
    return summaries


def aggregate(summaries: list[dict]) -> list[dict]:
    """Mean and population std per label and metric; absent values are skipped."""
    groups: dict[str, list[dict]] = {}
    for s in summaries:
        groups.setdefault(s["label"], []).append(s)
    rows = []
    for label, runs in groups.items():
        row = {"label": label, "runs": len(runs)}
        for col in REPORT_COLUMNS:
            vals = [r[col] for r in runs if r.get(col) is not None]
            row[col] = (float(np.mean(vals)), float(np.std(vals))) if vals else None
        rows.append(row)
    return rows


def format_report(rows: list[dict]) -> tuple[str, str]:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "runs"] + [f"{c}_{k}" for c in REPORT_COLUMNS for k in ("mean", "std")])
    for r in rows:
        cells = []
        for c in REPORT_COLUMNS:
            cells += ["", ""] if r[c] is None else [repr(r[c][0]), repr(r[c][1])]
        w.writerow([r["label"], r["runs"]] + cells)

    header = ["method", "runs"] + list(REPORT_COLUMNS)
    body = [[r["label"], str(r["runs"])] + [
        "-" if r[c] is None else f"{100 * r[c][0]:.2f}±{100 * r[c][1]:.2f}" for c in REPORT_COLUMNS]
        for r in rows]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    text = "\n".join("  ".join(cell.ljust(wd) for cell, wd in zip(line, widths)).rstrip()
                     for line in [header] + body)
    return buf.getvalue(), text + "\n"


def cmd_report(args) -> int:
    rows = aggregate(collect_summaries(args.runs))
    csv_text, table = format_report(rows)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    sys.stdout.write(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmil", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--desk", action="store_true", help="start from the small CPU preset")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    g = sub.add_parser("generate", help="write a synthetic task stream to disk")
    common(g)
    g.add_argument("--seed", type=int, nargs=1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one or more seeds")
    common(t)
    t.add_argument("--seed", type=int, nargs="+")
    t.add_argument("--data", help="dataset directory from 'cmil generate'")
    t.add_argument("--regen", action="store_true", help="rebuild the dataset from the seed inside each run dir")
    t.add_argument("--out", required=True)
    t.add_argument("--method", choices=METHODS, default="full")
    t.add_argument("--ablate", choices=sorted(ABLATIONS), action="append")
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("report", help="mean ± std table over run directories")
    r.add_argument("runs", nargs="+")
    r.add_argument("--csv", help="also write the table as CSV")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"cmil: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"cmil: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
