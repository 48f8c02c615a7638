"""Command line entry point: generate, train, ablate, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import yaml

from .data import StreamConfig, generate_synthetic_stream, load_stream, save_stream
from .errors import BrimaError, ConfigError
from .metrics import csv_text, dumps, read_report, write_report
from .model import save_checkpoint
from .mro import load_buffer, save_buffer
from .trainer import VARIANTS, TrainerConfig, run_ablation_grid, run_stream

log = logging.getLogger("brima")

ABLATION_COLUMNS = ("variant", "n_seeds", "final_srcc_mean", "final_srcc_std", "final_mse_mean", "final_mse_std", "final_rl2_mean", "final_rl2_std", "forgetting_mean", "forgetting_std")


def load_config(path) -> tuple[StreamConfig, TrainerConfig]:
    """Read a YAML/JSON config.

    Keys may sit under ``stream:`` and ``trainer:`` sections, or at top level,
    in which case they are routed by field name.
    """
    if path is None:
        return StreamConfig(), TrainerConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    stream_keys = {f.name for f in fields(StreamConfig)}
    trainer_keys = {f.name for f in fields(TrainerConfig)}
    stream_d = dict(raw.pop("stream", None) or {})
    trainer_d = dict(raw.pop("trainer", None) or {})
    for k, v in raw.items():
        if k in stream_keys:
            stream_d[k] = v
        elif k in trainer_keys:
            trainer_d[k] = v
        else:
            raise ConfigError(f"{path}: unknown setting {k!r}")
    bad = set(stream_d) - stream_keys
    if bad:
        raise ConfigError(f"{path}: unknown stream settings {sorted(bad)}")
    try:
        stream_cfg = StreamConfig(**stream_d).validate()
        trainer_cfg = TrainerConfig.from_dict(trainer_d).validate()
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return stream_cfg, trainer_cfg


def _apply_overrides(cfg: TrainerConfig, args) -> TrainerConfig:
    d = asdict(cfg)
    for key in ("variant", "seed", "K", "epochs"):
        value = getattr(args, key, None)
        if value is not None:
            d[key] = value
    return TrainerConfig(**d).validate()


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _name_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def cmd_generate(args) -> None:
    stream_cfg, _ = load_config(args.config)
    if args.seed is not None:
        stream_cfg.seed = args.seed
    stream = generate_synthetic_stream(stream_cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_stream(stream, args.out)
    n = sum(len(t.train) + len(t.eval) for t in stream.tasks)
    print(f"wrote {n} samples in {stream.n_tasks} tasks to {args.out} (mask hash {stream.mask_hash()[:12]})")


def cmd_train(args) -> None:
    _, cfg = load_config(args.config)
    cfg = _apply_overrides(cfg, args)
    stream = load_stream(args.data)
    report, state = run_stream(stream, cfg, return_state=True)
    out = Path(args.out)
    write_report(report, out)
    if state.buffer is not None:
        save_buffer(state.buffer, out / "buffer.jsonl", stream.feature_dims, stream.score_range)
    save_checkpoint(out / "checkpoint.npz", state.store, {"variant": cfg.variant, "seed": cfg.seed, "config": asdict(cfg), "task_stats": state.task_stats})
    s = report.summary()
    print(f"{cfg.variant} seed={cfg.seed}: final SRCC {_fmt(s['final_srcc'])}, MSE {_fmt(s['final_mse'])}, RL2 {_fmt(s['final_rl2'])}, forgetting {_fmt(s['forgetting'])}")


def cmd_ablate(args) -> None:
    _, cfg = load_config(args.config)
    cfg = _apply_overrides(cfg, args)
    for v in args.variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
    stream = load_stream(args.data)
    table = run_ablation_grid(stream, cfg, args.variants, args.seeds, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(dumps(table), encoding="utf-8")
    (out / "ablation.csv").write_text(_ablation_csv(table), encoding="utf-8")
    print(_ablation_text(table))


def _ablation_rows(table: dict) -> list[dict]:
    rows = []
    for r in table["rows"]:
        row = {k: r.get(k) for k in ABLATION_COLUMNS if k not in ("n_seeds",)}
        row["n_seeds"] = len(r["seeds"])
        rows.append(row)
    return rows


def _ablation_csv(table: dict) -> str:
    lines = [",".join(ABLATION_COLUMNS)]
    for row in _ablation_rows(table):
        lines.append(",".join("" if row[k] is None else (format(row[k], ".17g") if isinstance(row[k], float) else str(row[k])) for k in ABLATION_COLUMNS))
    return "\n".join(lines) + "\n"


def _ablation_text(table: dict) -> str:
    out = [f"{'variant':18s} {'SRCC':>16s} {'MSE':>16s} {'RL2':>16s} {'forgetting':>16s}"]
    for r in table["rows"]:
        cells = [f"{_fmt(r[k + '_mean'])}±{_fmt(r[k + '_std'])}" for k in ("final_srcc", "final_mse", "final_rl2", "forgetting")]
        out.append(f"{r['variant']:18s} " + " ".join(f"{c:>16s}" for c in cells))
    return "\n".join(out)


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def _buffer_summary(path: Path) -> dict:
    buf = load_buffer(path)
    per_session: dict[int, int] = {}
    for e in buf:
        per_session[e.insertion_session] = per_session.get(e.insertion_session, 0) + 1
    prios = buf.priorities()
    return {
        "entries": len(buf),
        "capacity": buf.capacity,
        "per_session": {str(k): v for k, v in sorted(per_session.items())},
        "mean_priority": float(prios.mean()) if len(prios) else None,
    }


def cmd_report(args) -> None:
    src = Path(args.in_dir)
    if (src / "report.json").exists():
        report = read_report(src / "report.json")
        if args.format == "csv":
            sys.stdout.write(csv_text(report.csv_rows()))
            return
        payload = report.to_dict()
        if (src / "buffer.jsonl").exists():
            payload["buffer"] = _buffer_summary(src / "buffer.jsonl")
        sys.stdout.write(dumps(payload))
    elif (src / "ablation.json").exists():
        table = json.loads((src / "ablation.json").read_text(encoding="utf-8"))
        if args.format == "csv":
            sys.stdout.write(_ablation_csv(table))
        else:
            sys.stdout.write(dumps({"rows": table["rows"]}))
    else:
        raise ConfigError(f"{src} holds neither report.json nor ablation.json")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="brima", description="Continual multi-modal score regression with bridged imputation and prioritised replay.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic task stream")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one variant over a stream")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--variant", choices=sorted(VARIANTS))
    t.add_argument("--seed", type=int)
    t.add_argument("--K", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="run a variant x seed grid on one stream")
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--variants", type=_name_list, required=True)
    a.add_argument("--seeds", type=_int_list, required=True)
    a.add_argument("--K", type=int)
    a.add_argument("--epochs", type=int)
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="print a saved report")
    r.add_argument("--in", dest="in_dir", required=True)
    r.add_argument("--format", choices=("csv", "json"), default="json")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (BrimaError, OSError, ValueError) as exc:
        print(f"brima: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
