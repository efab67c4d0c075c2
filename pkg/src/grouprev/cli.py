"""Command-line front end: ``grouprev {gen-data,train,eval,plot-data,plot-shaping}``.

Exit codes: 0 ok, 2 usage or invalid configuration, 3 I/O failure,
4 checkpoint incompatible with the dataset.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from .policy import load_checkpoint, save_checkpoint
from .scenes import DatasetError, EnvConfig, generate_dataset, load_dataset, save_dataset
from .trainer import TrainConfig, evaluate, train

log = logging.getLogger("grouprev")

CONFIG_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_INCOMPATIBLE = 0, 2, 3, 4

# train flags that override a config-file value: (flag, TrainConfig field, type, help)
_OVERRIDES = [
    ("--steps", "steps", int, "number of updates"),
    ("--seed", "seed", int, "training seed"),
    ("--lr", "learning_rate", float, "learning rate"),
    ("--weight-decay", "weight_decay", float, "decoupled weight decay"),
    ("--batch-size", "batch_size", int, "scenes per update"),
    ("--group-size", "group_size", int, "candidates per group (G)"),
    ("--omega", "omega", float, "shaping weight"),
    ("--clip-epsilon", "clip_epsilon", float, "ratio clipping threshold"),
    ("--kl-beta", "kl_beta", float, "KL penalty strength"),
    ("--refresh-interval", "old_policy_refresh_interval", int, "updates between behaviour-policy refreshes"),
    ("--p-corrupt", "p_corrupt", float, "probability of corrupting the initial response"),
    ("--checkpoint-interval", "checkpoint_interval", int, "steps between checkpoints (0: final only)"),
]
_SWITCHES = [
    ("--no-revision", "revision_enabled", "sample plain groups (no revision round)"),
    ("--no-consolidation", "consolidation_enabled", "drop the shaping term from the reward"),
    ("--no-postscale", "postscale_enabled", "do not post-scale advantages"),
]


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _io(fn, what: str):
    try:
        return fn()
    except OSError as exc:
        raise CliError(EXIT_IO, f"{what}: {exc}") from None


def _dump(path: Path, obj) -> None:
    _io(lambda: path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"),
        f"cannot write {path}")


def _scales(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _radius(text: str) -> int | None:
    if text.lower() == "none":
        return None
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'none', got {text!r}") from None


def _load_scenes(path: str):
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_USAGE, f"--data: no such file {path}")
    try:
        return load_dataset(p)
    except DatasetError as exc:
        raise CliError(EXIT_USAGE, f"--data: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from None


# -- gen-data -------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    env = EnvConfig(grid=args.grid, scales=args.scales, max_objects=args.max_objects,
                    max_slots=args.max_slots, review_radius=args.review_radius)
    problems = env.problems()
    if args.num_scenes < 0:
        problems.append(f"--num-scenes must be >= 0 (got {args.num_scenes})")
    if args.threads < 1:
        problems.append(f"--threads must be >= 1 (got {args.threads})")
    if problems:
        raise CliError(EXIT_USAGE, "; ".join(problems))
    scenes = generate_dataset(args.seed, args.num_scenes, args.difficulty, env, threads=args.threads)
    out = Path(args.out)
    _io(lambda: save_dataset(scenes, out), f"cannot write {out}")
    tiers = Counter(s.difficulty for s in scenes)
    print(f"wrote {len(scenes)} scenes to {out} (easy={tiers['easy']}, hard={tiers['hard']})")
    return EXIT_OK


# -- train ----------------------------------------------------------------------

def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """Defaults, then the config file, then command-line overrides."""
    values: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(EXIT_USAGE, f"--config: no such file {args.config}")
        try:
            doc = json.loads(_io(lambda: path.read_text(encoding="utf-8"), f"cannot read {path}"))
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_USAGE, f"--config: not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise CliError(EXIT_USAGE, "--config: top level must be an object")
        errors = []
        # env, config_hash and data are written into resolved configs for the
        # record; they are accepted so a resolved config can be fed back in
        unknown = sorted(set(doc) - {"version", "train", "env", "config_hash", "data"})
        if unknown:
            errors.append(f"unknown top-level keys: {', '.join(unknown)}")
        if doc.get("version") != CONFIG_VERSION:
            errors.append(f"version must be {CONFIG_VERSION} (got {doc.get('version')!r})")
        train_doc = doc.get("train", {})
        if not isinstance(train_doc, dict):
            errors.append("'train' must be an object")
            train_doc = {}
        known = set(TrainConfig().to_dict())
        unknown = sorted(set(train_doc) - known)
        if unknown:
            errors.append(f"unknown train keys: {', '.join(unknown)}")
        if errors:
            raise CliError(EXIT_USAGE, "--config: " + "; ".join(errors))
        values.update(train_doc)
    for _, name, _, _ in _OVERRIDES:
        if hasattr(args, name):
            values[name] = getattr(args, name)
    for _, name, _ in _SWITCHES:
        if hasattr(args, name):
            values[name] = False
    cfg = TrainConfig.from_dict(values)
    problems = cfg.problems()
    if problems:
        raise CliError(EXIT_USAGE, "invalid training config: " + "; ".join(problems))
    return cfg


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_train_config(args)
    if args.threads < 1:
        raise CliError(EXIT_USAGE, f"--threads must be >= 1 (got {args.threads})")
    scenes = _load_scenes(args.data)
    if not scenes:
        raise CliError(EXIT_USAGE, f"--data: {args.data} holds no scenes")
    envs = {s.env for s in scenes}
    if len(envs) > 1:
        raise CliError(EXIT_USAGE, f"--data: {args.data} mixes environment configurations")
    env = scenes[0].env

    out = Path(args.out)
    ckpt_dir = out / "checkpoints"
    _io(lambda: ckpt_dir.mkdir(parents=True, exist_ok=True), f"cannot create {ckpt_dir}")
    _dump(out / "config.json", {
        "version": CONFIG_VERSION,
        "train": cfg.to_dict(),
        "env": env.to_dict(),
        "config_hash": env.config_hash(),
        "data": str(args.data),
    })
    metrics_fh = _io(lambda: open(out / "metrics.jsonl", "w", encoding="utf-8"), "cannot open metrics stream")
    shaping_fh = _io(lambda: open(out / "shaping.jsonl", "w", encoding="utf-8"), "cannot open shaping stream")

    def on_step(m: dict, sh: dict) -> None:
        metrics_fh.write(json.dumps(m) + "\n")
        shaping_fh.write(json.dumps(sh) + "\n")
        if m["step"] % 50 == 0:
            log.info("step %d  reward %.4f  r_acc %.4f  delta_phi %.4f", m["step"], m["mean_reward"],
                     m["mean_r_acc"], m["mean_delta_phi"])

    def on_checkpoint(step: int, params, rng_state) -> None:
        save_checkpoint(ckpt_dir / f"step_{step:06d}.json", params, step, rng_state)

    try:
        with metrics_fh, shaping_fh:
            result = train(cfg, scenes, threads=args.threads, on_step=on_step, on_checkpoint=on_checkpoint)
        save_checkpoint(out / "final.json", result.params, result.step, result.rng_state)
    except OSError as exc:
        raise CliError(EXIT_IO, f"write failed under {out}: {exc}") from None
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {result.step} steps; final mean reward {last.get('mean_reward', float('nan')):.4f}; "
          f"outputs in {out}")
    return EXIT_OK


# -- eval -----------------------------------------------------------------------

def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliError(EXIT_USAGE, f"--checkpoint: no such file {args.checkpoint}")
    scenes = _load_scenes(args.data)
    try:
        params, step, _, stored_hash = load_checkpoint(ckpt)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {ckpt}: {exc}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_INCOMPATIBLE, f"--checkpoint: unreadable checkpoint: {exc}") from None
    for s in scenes:
        if s.env.config_hash() != stored_hash:
            raise CliError(EXIT_INCOMPATIBLE,
                           f"incompatible checkpoint: checkpoint config hash {stored_hash}, "
                           f"dataset config hash {s.env.config_hash()} (scene {s.id})")
    report = evaluate(params, scenes, np.random.default_rng(args.seed), threads=args.threads)
    doc = {"checkpoint_step": step, "config_hash": stored_hash, "seed": args.seed, **report.to_dict()}
    _dump(Path(args.out), doc)
    acc = "n/a" if report.acc_at_0_5 is None else f"{report.acc_at_0_5:.4f}"
    print(f"evaluated {report.n_scenes} scenes: Acc@0.5 {acc}; report in {args.out}")
    return EXIT_OK


# -- plot-data ------------------------------------------------------------------

def _read_jsonl(path: str, flag: str) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_USAGE, f"{flag}: no such file {path}")
    rows = []
    for n, line in enumerate(_io(lambda: p.read_text(encoding="utf-8"), f"cannot read {p}").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_USAGE, f"{flag}: {path}:{n}: {exc}") from None
    return rows


def _fmt(v) -> str:
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


def cmd_plot_data(args: argparse.Namespace) -> int:
    fields = [f.strip() for f in args.fields.split(",") if f.strip()]
    if not fields:
        raise CliError(EXIT_USAGE, "--fields: no field names given")
    labels = args.label or []
    if labels and len(labels) != len(args.metrics):
        raise CliError(EXIT_USAGE, f"--label given {len(labels)} times for {len(args.metrics)} --metrics files")
    if len(set(labels)) != len(labels):
        raise CliError(EXIT_USAGE, "--label values must be distinct")
    runs = [_read_jsonl(p, "--metrics") for p in args.metrics]
    available = set().union(*(r.keys() for rows in runs for r in rows)) if any(runs) else set()
    unknown = [f for f in fields if f not in available]
    if unknown:
        raise CliError(EXIT_USAGE, f"--fields: unknown field(s): {', '.join(unknown)}; "
                                   f"available: {', '.join(sorted(available))}")

    out = Path(args.out)
    if len(runs) == 1:
        header = fields
        table = [[row.get(f) for f in fields] for row in runs[0]]
        series_fields = [f for f in fields if f != "step"]
        steps = [row.get("step", i + 1) for i, row in enumerate(runs[0])]
        series = {f: [row.get(f) for row in runs[0]] for f in series_fields}
    else:
        names = labels or [Path(p).parent.name or Path(p).stem for p in args.metrics]
        if len(set(names)) != len(names):
            names = [f"run{i}" for i in range(len(runs))]
        value_fields = [f for f in fields if f != "step"]
        by_step = [{row["step"]: row for row in rows} for rows in runs]
        steps = sorted(set().union(*by_step))
        header = ["step"] + [f"{f}[{n}]" for f in value_fields for n in names]
        table = [[s] + [by_step[i].get(s, {}).get(f) for f in value_fields for i in range(len(runs))]
                 for s in steps]
        series = {h: [r[j + 1] for r in table] for j, h in enumerate(header[1:])}

    def write() -> None:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows([[_fmt(v) for v in r] for r in table])

    _io(write, f"cannot write {out}")
    msg = f"wrote {len(table)} rows x {len(header)} columns to {out}"
    if not args.no_figure and series:
        from .plotting import plot_curves
        fig_path = out.with_suffix(".png")
        _io(lambda: plot_curves(steps, series, fig_path), f"cannot write {fig_path}")
        msg += f" and figure {fig_path}"
    print(msg)
    return EXIT_OK


# -- plot-shaping ---------------------------------------------------------------

def cmd_plot_shaping(args: argparse.Namespace) -> int:
    if args.last < 1:
        raise CliError(EXIT_USAGE, f"--last must be >= 1 (got {args.last})")
    rows = _read_jsonl(args.shaping, "--shaping")[-args.last:]
    out = Path(args.out)
    means = [m for r in rows for m in r["group_mean"]]
    maxes = [m for r in rows for m in r["group_max"]]

    def write() -> None:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "group_mean", "group_max"])
            for r in rows:
                for a, b in zip(r["group_mean"], r["group_max"]):
                    w.writerow([r["step"], repr(a), repr(b)])

    _io(write, f"cannot write {out}")
    msg = f"wrote {len(means)} groups to {out}"
    if means:
        msg += f"; median group mean {np.median(means):.4f}, median group max {np.median(maxes):.4f}"
    if not args.no_figure:
        from .plotting import plot_shaping
        fig_path = out.with_suffix(".png")
        _io(lambda: plot_shaping(means, maxes, fig_path), f"cannot write {fig_path}")
        msg += f"; figure {fig_path}"
    print(msg)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows defaults, except for required flags and flags with no default."""

    def _get_help_string(self, action):
        if action.required or action.default is None:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="grouprev", description="Group-revision GRPO on synthetic grounding scenes.",
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", help="generate a scene dataset", formatter_class=fmt)
    g.add_argument("--seed", type=int, default=0, help="master seed")
    g.add_argument("--num-scenes", type=int, default=100, help="number of scenes")
    g.add_argument("--difficulty", choices=("easy", "hard", "mixed"), default="hard", help="difficulty tier")
    g.add_argument("--out", required=True, help="output dataset file (JSON lines)")
    g.add_argument("--grid", type=int, default=8, help="anchor grid side")
    g.add_argument("--scales", type=_scales, default="0.15,0.3", help="comma-separated anchor box sides")
    g.add_argument("--max-objects", type=int, default=4, help="most objects per scene")
    g.add_argument("--max-slots", type=int, default=6, help="most boxes per response")
    g.add_argument("--review-radius", type=_radius, default=1,
                   help="revision-round review radius in cells, or 'none'")
    g.add_argument("--threads", type=int, default=1, help="worker threads")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a policy", formatter_class=fmt)
    t.add_argument("--data", required=True, help="training dataset file")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--config", default=None, help="JSON config file {version, train}")
    # overrides stay unset unless given, so the config file can supply them;
    # the defaults shown are the built-in ones used when neither does
    base = TrainConfig().to_dict()
    for flag, name, typ, text in _OVERRIDES:
        t.add_argument(flag, dest=name, type=typ, default=argparse.SUPPRESS,
                       help=f"{text}, overrides the config file (default: {base[name]})")
    for flag, name, text in _SWITCHES:
        t.add_argument(flag, dest=name, action="store_false", default=argparse.SUPPRESS,
                       help=f"{text} (default: off)")
    t.add_argument("--threads", type=int, default=1, help="rollout worker threads")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--data", required=True, help="evaluation dataset file")
    e.add_argument("--out", required=True, help="report file (JSON)")
    e.add_argument("--seed", type=int, default=0, help="sampling seed")
    e.add_argument("--threads", type=int, default=1, help="worker threads")
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot-data", help="export metric columns and a curve figure", formatter_class=fmt)
    p.add_argument("--metrics", action="append", required=True, help="metrics stream; repeat to join runs on step")
    p.add_argument("--label", action="append", default=None, help="run label, one per --metrics")
    p.add_argument("--fields", default="step,mean_reward", help="comma-separated field names")
    p.add_argument("--out", required=True, help="output CSV; the figure goes next to it as .png")
    p.add_argument("--no-figure", action="store_true", help="skip the figure")
    p.set_defaults(func=cmd_plot_data)

    s = sub.add_parser("plot-shaping", help="export per-group shaping signals and a histogram", formatter_class=fmt)
    s.add_argument("--shaping", required=True, help="shaping stream of a training run")
    s.add_argument("--last", type=int, default=100, help="number of final steps to include")
    s.add_argument("--out", required=True, help="output CSV; the figure goes next to it as .png")
    s.add_argument("--no-figure", action="store_true", help="skip the figure")
    s.set_defaults(func=cmd_plot_shaping)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"grouprev {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
