"""Command-line entry point: ``bid2x <command> [flags]``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

from .data import DataError, load_dataset, normalize, build_raw, split_dataset
from .evaluation import (constant_mean_predictions, evaluate, export_distribution, probe_monotonicity,
                         probe_predictability, scaling_sweep, score, select_bid, write_jsonl, zero_shot_eval)
from .synth import default_scenarios, generate_dataset
from .training import CheckpointError, TrainConfig, TrainingError, finetune, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RESOLVED_NAME = "resolved.cfg"
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


DEFAULTS = {
    "data": {
        "path": "data/dataset.jsonl",
        "scenarios": "BCB,TR,BS,BM,BL,D6,D12,D18",
        "n_campaigns_each": "500",
        "base_seed": "0",
        "split": "8,1,1",
        "holdout": "",
    },
    "train": {f.name: str(f.default).lower() if isinstance(f.default, bool) else str(f.default)
              for f in fields(TrainConfig)},
    "probe": {
        "alphas": "0.5,1.0,1.5,2.0",
        "cost_divisor": "10",
        "strict": "false",
        "bins": "30",
        "grid": "4,8,12,16,24,32,48,60",
        "mode": "cumhead",
        "fraction": "0.05",
        "n_select": "8",
        "scaling_d": "16,64",
        "scaling_seeds": "0,1,2",
    },
}


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def load_config(path: str | None) -> configparser.ConfigParser:
    """Defaults overlaid with ``path``; unknown sections or keys are rejected."""
    cfg = configparser.ConfigParser()
    cfg.read_dict(DEFAULTS)
    if path:
        user = configparser.ConfigParser()
        try:
            if not user.read(path):
                raise UsageError(f"cannot read config {path}")
        except configparser.Error as exc:
            raise UsageError(f"malformed config: {exc}") from None
        for section in user.sections():
            if section not in DEFAULTS:
                raise UsageError(f"unknown config section [{section}]")
            for key, value in user[section].items():
                if key not in {k.lower() for k in DEFAULTS[section]}:
                    raise UsageError(f"unknown config key {key!r} in [{section}]")
                cfg[section][key] = value
    return cfg


def train_config(cfg: configparser.ConfigParser) -> TrainConfig:
    sec = cfg["train"]
    values = {}
    for f in fields(TrainConfig):
        if f.type in ("bool", bool):
            values[f.name] = sec.getboolean(f.name)
        elif f.type in ("int", int):
            values[f.name] = sec.getint(f.name)
        else:
            values[f.name] = sec.getfloat(f.name)
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def write_resolved(cfg: configparser.ConfigParser, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESOLVED_NAME
    with path.open("w") as fh:
        cfg.write(fh)
    return path


def _scenarios(cfg):
    wanted = [s.strip() for s in cfg["data"]["scenarios"].split(",") if s.strip()]
    T = cfg["train"].getint("T_max")
    known = {s.name: s for s in default_scenarios(T)}
    unknown = [w for w in wanted if w not in known]
    if unknown:
        raise UsageError(f"unknown scenario(s) {unknown}; known: {sorted(known)}")
    return [known[w] for w in wanted]


def load_splits(cfg) -> tuple[dict, object]:
    """Dataset split into train/val/test (holdout scenario removed first) plus the holdout itself."""
    pairs, header = load_dataset(cfg["data"]["path"])
    holdout = cfg["data"]["holdout"].strip()
    rest = [p for p in pairs if p.campaign.scenario != holdout]
    held = [p for p in pairs if p.campaign.scenario == holdout] if holdout else []
    tr, va, te = split_dataset(rest, _floats(cfg["data"]["split"]), seed=cfg["train"].getint("seed"))
    return {"train": tr, "val": va, "test": te, "holdout": held}, header


# -- commands -----------------------------------------------------------------

def cmd_generate(args, cfg) -> int:
    out = Path(args.out or Path(cfg["data"]["path"]).parent)
    path = out / Path(cfg["data"]["path"]).name
    cfg["data"]["path"] = str(path)
    out.mkdir(parents=True, exist_ok=True)
    generate_dataset(_scenarios(cfg), cfg["data"].getint("n_campaigns_each"), path, cfg["data"].getint("base_seed"))
    write_resolved(cfg, out)
    print(f"wrote {path}")
    return EXIT_OK


def _run_dir(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_train(args, cfg) -> int:
    out = _run_dir(args, "runs/train")
    splits, header = load_splits(cfg)
    tc = train_config(cfg)
    write_resolved(cfg, out)
    res = train(tc, splits["train"], splits["val"], header, metrics_path=out / "metrics.jsonl")
    save_checkpoint(res.best, out / "best.ckpt")
    save_checkpoint(res.last, out / "last.ckpt")
    print(f"best validation loss {res.best_val_loss:.6f}; checkpoints in {out}")
    return EXIT_OK


def _checkpoint_and_config(args):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    ckpt_path = Path(args.checkpoint)
    ckpt = load_checkpoint(ckpt_path)
    cfg_path = args.config or (ckpt_path.parent / RESOLVED_NAME if (ckpt_path.parent / RESOLVED_NAME).exists()
                               else None)
    cfg = load_config(str(cfg_path) if cfg_path else None)
    if args.seed is not None:
        _apply_seed(cfg, args.seed)
    return ckpt, cfg


def _split_pairs(cfg, name: str):
    splits, header = load_splits(cfg)
    if name not in splits:
        raise UsageError(f"unknown split {name!r}; choose from {sorted(splits)}")
    if not splits[name]:
        raise DataError(f"split {name!r} is empty")
    return splits[name], splits, header


def _report(out: Path, stem: str, record: dict, table: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / f"{stem}.jsonl", [record])
    (out / f"{stem}.txt").write_text(table + "\n")
    print(table)


def cmd_finetune(args, cfg_unused) -> int:
    ckpt, cfg = _checkpoint_and_config(args)
    if args.holdout:
        cfg["data"]["holdout"] = args.holdout
    fraction = args.fraction if args.fraction is not None else cfg["probe"].getfloat("fraction")
    name = "holdout" if cfg["data"]["holdout"] else "train"
    pairs, splits, _ = _split_pairs(cfg, name)
    out = _run_dir(args, str(Path(args.checkpoint).parent / "finetune"))
    write_resolved(cfg, out)
    res = finetune(ckpt, pairs, fraction, replace(train_config(cfg), T_max=ckpt.model_config.T),
                   metrics_path=out / "metrics.jsonl")
    save_checkpoint(res.last, out / "finetuned.ckpt")
    print(f"finetuned on {fraction:.0%} of {name} campaigns; checkpoint in {out}")
    return EXIT_OK


def cmd_eval(args, _cfg) -> int:
    ckpt, cfg = _checkpoint_and_config(args)
    split = args.split or "test"
    pairs, splits, _ = _split_pairs(cfg, split)
    batch = normalize(build_raw(pairs, ckpt.model_config.T), ckpt.norm_stats)
    report = evaluate(ckpt.build_model(), batch, split)
    train_batch = normalize(build_raw(splits["train"], ckpt.model_config.T), ckpt.norm_stats)
    baseline = score(constant_mean_predictions(train_batch, batch), batch, split)
    out = _run_dir(args, str(Path(args.checkpoint).parent))
    table = report.table() + "\n\nconstant-mean baseline\n" + baseline.table()
    _report(out, f"eval_{split}", {"model": report.to_json(), "constant_mean": baseline.to_json()}, table)
    return EXIT_OK


def cmd_probe_mono(args, _cfg) -> int:
    ckpt, cfg = _checkpoint_and_config(args)
    split = args.split or "test"
    pairs, _, _ = _split_pairs(cfg, split)
    alphas = _floats(args.alphas) if args.alphas else _floats(cfg["probe"]["alphas"])
    rep = probe_monotonicity(ckpt.build_model(), pairs, ckpt.norm_stats, alphas,
                             cfg["probe"].getfloat("cost_divisor"), strict=cfg["probe"].getboolean("strict"))
    _report(_run_dir(args, str(Path(args.checkpoint).parent)), f"mono_{split}", rep.to_json(), rep.table())
    return EXIT_OK


def cmd_probe_pred(args, _cfg) -> int:
    ckpt, cfg = _checkpoint_and_config(args)
    split = args.split or "test"
    pairs, _, _ = _split_pairs(cfg, split)
    curve = probe_predictability(ckpt.build_model(), pairs, ckpt.norm_stats)
    out = _run_dir(args, str(Path(args.checkpoint).parent))
    for name, values in curve.mae.items():
        (out / f"pred_{split}_{name}.txt").parent.mkdir(parents=True, exist_ok=True)
        (out / f"pred_{split}_{name}.txt").write_text(
            "".join(f"{f:.1f} {v:.6f}\n" for f, v in zip(curve.fractions, values)))
    table = "\n".join(f"{name:<8} spearman {rho:+.3f}" for name, rho in curve.spearman.items())
    _report(out, f"pred_{split}", curve.to_json(), table)
    return EXIT_OK


def cmd_zero_shot(args, _cfg) -> int:
    ckpt, cfg = _checkpoint_and_config(args)
    scenario = args.holdout or cfg["data"]["holdout"]
    if not scenario:
        raise UsageError("zero-shot needs --holdout or [data] holdout")
    cfg["data"]["holdout"] = scenario
    pairs, splits, _ = _split_pairs(cfg, "holdout")
    model = ckpt.build_model()
    report = zero_shot_eval(model, ckpt.scenarios, pairs, ckpt.norm_stats, scenario)
    batch = normalize(build_raw(pairs, ckpt.model_config.T), ckpt.norm_stats)
    train_batch = normalize(build_raw(splits["train"], ckpt.model_config.T), ckpt.norm_stats)
    baseline = score(constant_mean_predictions(train_batch, batch), batch, "holdout", scenario)
    table = report.table() + "\n\nconstant-mean baseline\n" + baseline.table()
    _report(_run_dir(args, str(Path(args.checkpoint).parent)), f"zeroshot_{scenario}",
            {"model": report.to_json(), "constant_mean": baseline.to_json()}, table)
    return EXIT_OK


def cmd_export_hist(args, _cfg) -> int:
    ckpt, cfg = _checkpoint_and_config(args)
    split = args.split or "test"
    pairs, _, _ = _split_pairs(cfg, split)
    batch = normalize(build_raw(pairs, ckpt.model_config.T), ckpt.norm_stats)
    out = _run_dir(args, str(Path(args.checkpoint).parent))
    lines = []
    for target in ("cost", "reward", "count"):
        exp = export_distribution(ckpt.build_model(), batch, target, cfg["probe"].getint("bins"),
                                  seed=cfg["train"].getint("seed"))
        exp.write(out / f"hist_{split}_{target}.txt")
        lines.append(f"{target:<8} zero-bin predicted {exp.pred_zero_mass:.4f} truth {exp.true_zero_mass:.4f}")
    print("\n".join(lines))
    return EXIT_OK


def cmd_bid_select(args, _cfg) -> int:
    from .data import Pair, Trajectory

    ckpt, cfg = _checkpoint_and_config(args)
    split = args.split or "test"
    pairs, _, _ = _split_pairs(cfg, split)
    grid = _floats(args.grid) if args.grid else _floats(cfg["probe"]["grid"])
    mode = args.mode or cfg["probe"]["mode"]
    model = ckpt.build_model()
    rows = []
    for p in pairs[: cfg["probe"].getint("n_select")]:
        # decide the bid halfway through the day, for the budget still unspent
        half = max(1, len(p.today.records) // 2)
        state = Pair(p.history, Trajectory(p.campaign, p.today.day, p.today.records[:half], False))
        remaining = max(p.campaign.budget - sum(r.cost for r in state.today.records), 0.0)
        bid = select_bid(model, ckpt.norm_stats, state, remaining, grid, mode=mode)
        rows.append({"campaign": p.campaign.id, "slot": half, "remaining_budget": remaining, "bid": bid})
    out = _run_dir(args, str(Path(args.checkpoint).parent))
    write_jsonl(out / f"bids_{split}_{mode}.jsonl", rows)
    for r in rows:
        print(f"{r['campaign']:<12} slot {r['slot']:>3} remaining {r['remaining_budget']:>10.2f} bid {r['bid']:g}")
    return EXIT_OK


def cmd_scaling_sweep(args, cfg) -> int:
    out = _run_dir(args, "runs/scaling")
    splits, header = load_splits(cfg)
    write_resolved(cfg, out)
    rows = []
    table = scaling_sweep(train_config(cfg), _ints(cfg["probe"]["scaling_d"]), _ints(cfg["probe"]["scaling_seeds"]),
                          splits["train"], splits["val"], header, on_result=rows.append)
    _report(out, "scaling", {"rows": rows, "mean_by_D": table.mean_by_D()}, table.table())
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    from .gradcheck import model_gradcheck

    report = model_gradcheck(seed=cfg["train"].getint("seed"))
    worst = max(report, key=report.get)
    print(f"max relative error {report[worst]:.3e} ({worst}) over {len(report)} parameter tensors")
    if not report[worst] < GRADCHECK_TOL:
        raise NumericFailure(f"gradient check failed: {report[worst]:.3e} >= {GRADCHECK_TOL}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "finetune": cmd_finetune, "eval": cmd_eval,
    "probe-mono": cmd_probe_mono, "probe-pred": cmd_probe_pred, "zero-shot": cmd_zero_shot,
    "export-hist": cmd_export_hist, "bid-select": cmd_bid_select, "scaling-sweep": cmd_scaling_sweep,
    "gradcheck": cmd_gradcheck,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bid2x", description="Bidding-environment foundation model at desk scale.")
    parser.add_argument("command", choices=sorted(COMMANDS), metavar="command",
                        help="one of: " + ", ".join(COMMANDS))
    parser.add_argument("--config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    parser.add_argument("--checkpoint")
    parser.add_argument("--split", choices=["train", "val", "test", "holdout"])
    parser.add_argument("--fraction", type=float)
    parser.add_argument("--holdout")
    parser.add_argument("--alphas")
    parser.add_argument("--grid")
    parser.add_argument("--mode", choices=["cumhead", "rollout"])
    return parser


def _apply_seed(cfg, seed: int) -> None:
    cfg["train"]["seed"] = str(seed)
    cfg["data"]["base_seed"] = str(seed)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config)
        if args.seed is not None:
            _apply_seed(cfg, args.seed)
        if args.holdout and args.command in ("train", "scaling-sweep"):
            cfg["data"]["holdout"] = args.holdout
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NumericFailure, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
