"""Command-line driver: pretrain, derive, train, slt-check, report.

Every subcommand reads one JSON config document. Unknown keys are rejected,
and every seed must be given explicitly.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import io as pio
from .adapters import AdapterBank, init_adapters_for
from .analysis import AnalysisReport, bundle_json, overlap_report, subnetwork_fraction
from .experiments import MethodGrid, TransferConfig, build_transfer, run_methods
from .importance import METHODS as IMPORTANCE_METHODS
from .importance import layer_scores
from .linalg import ConvergenceError
from .model import TrainingError, make_dataset
from .sparsity import derive_profile, load_profile, save_profile
from .slt import SltConfig, theorem_widths, width_sweep
from .tensor import ContractError
from .training import RunRecord, SweepSummary, TrainConfig, few_shot_sample, multi_task_train, summarize

REQUIRED = object()

SCHEMA: dict[str, dict] = {
    "task": {
        "classes": 4, "input_dim": 32, "signal_dim": 8, "noise": 1.0, "seed": REQUIRED,
        "rotation": 0.6, "relabel": 2,
    },
    "pretrain": {
        "hidden": [64, 64, 64], "activation": "relu", "epochs": 100, "learning_rate": 3e-3,
        "weight_decay": 0.3, "seed": REQUIRED,
    },
    "data": {
        "pool_per_class": 40, "pool_seed": REQUIRED, "test_per_class": 300, "test_seed": REQUIRED,
        "shots": 16,
    },
    "derive": {"methods": ["svd"], "tau": 0.9, "step": None, "energy": 0.9, "seed": REQUIRED},
    "adapter": {"rank": 4, "alpha": 8.0},
    "train": {
        "mode": "partial", "seeds": REQUIRED, "learning_rates": [5e-4, 1e-3, 5e-3], "top_k": 3,
        "epochs": 200, "weight_decay": 0.0, "batch_size": None, "scheduler": "cosine",
        "early_stop_patience": 20, "temperature": 1.0, "rate": None, "multi_rotations": [0.6, 1.2],
    },
    "slt": {
        "widths": [4, 8, 16, 32], "trials": 50, "m": 3, "n": 3, "target_width": 2, "n_points": 16,
        "search": "greedy", "seed": REQUIRED, "epsilon": 0.1, "delta": 0.1, "gamma": 0.0, "C": 1.0,
        "sparsities": [0.5, 0.5], "target_widths": [2, 2],
    },
    "output": {"record_timing": False},
}

NEEDS = {
    "pretrain": ("task", "pretrain"),
    "derive": ("task", "data", "derive"),
    "train": ("task", "data", "adapter", "train"),
    "slt-check": ("slt",),
    "report": (),
}

TRAIN_MODES = ("lora", "partial", "targeted", "stochastic", "inverted", "pyramidal", "balanced", "multi")
PROFILE_MODES = ("partial", "targeted", "stochastic", "inverted")


class ConfigError(ValueError):
    pass


def parse_config(doc: dict, command: str) -> dict:
    """Validate ``doc`` against the schema; fill defaults for the sections the command uses."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}")
    out = {}
    for section, fields in SCHEMA.items():
        if section not in doc:
            if section in NEEDS[command]:
                raise ConfigError(f"missing key {section!r}")
            if section == "output":
                out[section] = dict(fields)
            continue
        body = doc[section]
        if not isinstance(body, dict):
            raise ConfigError(f"{section!r} must be an object")
        extra = sorted(set(body) - set(fields))
        if extra:
            raise ConfigError(f"unknown key '{section}.{extra[0]}'")
        filled = {}
        for key, default in fields.items():
            if key in body:
                filled[key] = body[key]
            elif default is REQUIRED:
                raise ConfigError(f"missing key '{section}.{key}'")
            else:
                filled[key] = default
        out[section] = filled
    if "derive" in out:
        for m in out["derive"]["methods"]:
            if m not in IMPORTANCE_METHODS:
                raise ConfigError(f"derive.methods: unknown importance method {m!r}")
    if "train" in out and out["train"]["mode"] not in TRAIN_MODES:
        raise ConfigError(f"train.mode: unknown mode {out['train']['mode']!r}")
    return out


def load_config(path, command: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return parse_config(doc, command)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _run_dir(args, cfg: dict) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
        path.mkdir(parents=True, exist_ok=True)
        return path
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = Path(args.out) / f"{stamp}-{config_hash(cfg)[:12]}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _transfer_config(cfg: dict) -> TransferConfig:
    t, kw = cfg["task"], {}
    if "pretrain" in cfg:
        p = cfg["pretrain"]
        kw.update(hidden=tuple(p["hidden"]), activation=p["activation"], pretrain_epochs=p["epochs"],
                  pretrain_lr=p["learning_rate"], pretrain_weight_decay=p["weight_decay"], pretrain_seed=p["seed"])
    if "data" in cfg:
        d = cfg["data"]
        kw.update(pool_per_class=d["pool_per_class"], pool_seed=d["pool_seed"],
                  test_per_class=d["test_per_class"], test_seed=d["test_seed"])
    return TransferConfig(classes=t["classes"], input_dim=t["input_dim"], signal_dim=t["signal_dim"],
                          noise=t["noise"], task_seed=t["seed"], rotation=t["rotation"], relabel=t["relabel"], **kw)


def _require(value, flag: str):
    if not value:
        raise ConfigError(f"{flag} is required for this command")
    return value


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(cfg: dict, args) -> Path:
    if args.seed is not None:
        cfg["pretrain"]["seed"] = args.seed
    tc = _transfer_config(cfg)
    out = _run_dir(args, cfg)
    setup = build_transfer(tc)
    pio.save_checkpoint(out / "model.plra", setup.model)
    prov = {**setup.model.provenance, "base_accuracy": setup.base_accuracy, "config_hash": config_hash(cfg)}
    _write(out / "provenance.json", json.dumps(prov, indent=2, sort_keys=True) + "\n")
    _write(out / "config_pretrain.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    print(f"base accuracy {setup.base_accuracy:.4f}")
    print(out / "model.plra")
    return out


def _load_setup(cfg: dict, args):
    model, _ = pio.load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    return build_transfer(_transfer_config(cfg), model=model)


def cmd_derive(cfg: dict, args) -> Path:
    if args.seed is not None:
        cfg["derive"]["seed"] = args.seed
    d = cfg["derive"]
    setup = _load_setup(cfg, args)
    train, _ = few_shot_sample(setup.pool, cfg["data"]["shots"], d["seed"])
    out = _run_dir(args, cfg)
    for method in d["methods"]:
        scores = [layer_scores(setup.model, l, train, method, energy=d["energy"]) for l in range(setup.model.depth)]
        profile = derive_profile(setup.model, train, method, d["tau"], d["step"], energy=d["energy"],
                                 seed=d["seed"], scores=scores)
        save_profile(profile, out / f"profile_{method}.txt")
        print(f"method {method}  tau {profile.tau}  mu {profile.mu:.4f}")
        print("layer      m      n   rows   cols    p_row    p_col     rate")
        for r in profile.layers:
            print(f"{r.layer:5d} {r.m:6d} {r.n:6d} {r.retained_rows:6d} {r.retained_cols:6d} "
                  f"{r.p_row:8.4f} {r.p_col:8.4f} {r.element_rate:8.4f}")
    _write(out / "config_derive.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return out


def _threads() -> int:
    raw = os.environ.get("PALORA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"PALORA_THREADS must be an integer, got {raw!r}") from e
    return max(1, n)


def _grid(cfg: dict, tau: float) -> MethodGrid:
    t, a = cfg["train"], cfg["adapter"]
    base = TrainConfig(epochs=t["epochs"], weight_decay=t["weight_decay"], batch_size=t["batch_size"],
                       scheduler=t["scheduler"], early_stop_patience=t["early_stop_patience"])
    return MethodGrid(shots=cfg["data"]["shots"], seeds=tuple(t["seeds"]), learning_rates=tuple(t["learning_rates"]),
                      top_k=t["top_k"], rank=a["rank"], alpha=a["alpha"], tau=tau, temperature=t["temperature"],
                      rate=t["rate"], train=base)


def _record_name(rec: RunRecord) -> str:
    return f"{rec.method}_{rec.dataset}_seed{rec.seed}_lr{rec.config['learning_rate']!r}.json"


def cmd_train(cfg: dict, args) -> Path:
    t = cfg["train"]
    if args.seed is not None:
        t["seeds"] = [args.seed]
    mode = args.mode or t["mode"]
    if mode not in TRAIN_MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    cfg["train"]["mode"] = mode
    profile = None
    if mode in PROFILE_MODES:
        profile = load_profile(_require(args.profile, f"--profile (mode {mode})"))
    elif args.profile:
        print(f"warning: mode {mode} ignores --profile", file=sys.stderr)
    if mode in ("pyramidal", "balanced") and t["rate"] is None:
        raise ConfigError(f"mode {mode} needs train.rate")
    setup = _load_setup(cfg, args)
    timing = cfg["output"]["record_timing"]
    grid = _grid(cfg, profile.tau if profile is not None and profile.tau is not None else 0.9)
    out = _run_dir(args, cfg)
    if mode == "multi":
        records, masks = _train_multi(cfg, setup, grid)
    else:
        scores = None
        if mode in ("targeted", "stochastic", "inverted"):
            if "derive" not in cfg:
                raise ConfigError("missing key 'derive' (needed to recompute importance scores)")
            d = cfg["derive"]
            shots, _ = few_shot_sample(setup.pool, grid.shots, d["seed"])
            scores = [layer_scores(setup.model, l, shots, profile.method, energy=d["energy"])
                      for l in range(setup.model.depth)]
        res = run_methods(setup, [mode], grid, profile=profile, scores=scores, workers=_threads())
        records, masks = res["records"], res["masks"]
    for rec in records:
        _write(out / "records" / _record_name(rec), rec.to_json(include_time=timing))
    for (name, seed), u in sorted(masks.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        if u is not None:
            (out / "masks").mkdir(exist_ok=True)
            pio.save_masks(out / "masks" / f"{name}_seed{seed}.plra", u, seed)
    summary = SweepSummary(records, grid.top_k, summarize(records, grid.top_k))
    _write(out / "sweep.csv", summary.to_csv(include_time=timing))
    _write(out / "config_train.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    for method, s in summary.groups.items():
        print(f"{method}: top-{s['top_k']} test acc {s['mean_test_acc']:.4f} +- {s['std_test_acc']:.4f}, "
              f"params {s['mean_params']:.0f}")
    return out


def _train_multi(cfg: dict, setup, grid: MethodGrid):
    """One dense adapter set per rotated task, trained round-robin on the same frozen model."""
    model = setup.model
    base = _transfer_config(cfg)
    records, masks = [], {}
    for seed in grid.seeds:
        for lr in grid.learning_rates:
            bank, tasks = AdapterBank(), {}
            for i, angle in enumerate(cfg["train"]["multi_rotations"]):
                name = f"rot{i}"
                spec = replace(base.downstream_task(), rotation=float(angle))
                pool = make_dataset(spec, base.pool_per_class, seed=base.pool_seed)
                test = make_dataset(spec, base.test_per_class, seed=base.test_seed)
                train, val = few_shot_sample(pool, grid.shots, seed)
                bank.add(name, init_adapters_for(model, grid.rank, grid.alpha, seed))
                tasks[name] = (train, val, test)
            tc = replace(grid.train, learning_rate=lr, seed=seed, rank=grid.rank, alpha=grid.alpha)
            for name, rec in multi_task_train(model, bank, tasks, tc).items():
                rec.dataset = name
                records.append(rec)
    return records, masks


def cmd_slt_check(cfg: dict, args) -> Path:
    s = cfg["slt"]
    if args.seed is not None:
        s["seed"] = args.seed
    sweep = width_sweep(s["widths"], s["trials"], m=s["m"], n=s["n"], target_width=s["target_width"],
                        n_points=s["n_points"], search=s["search"], seed=s["seed"])
    out = _run_dir(args, cfg)
    _write(out / "slt.csv", sweep.to_csv())
    sc = SltConfig(s["epsilon"], s["delta"], s["gamma"], s["C"], tuple(s["sparsities"]), tuple(s["target_widths"]))
    # unit-norm targets and features, widths summed for N_T
    L = len(sc.target_widths)
    widths = theorem_widths(sc, [1.0] * L, [1.0] * L, n_lora_L=sc.target_widths[-1], N_T=sum(sc.target_widths))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "target_width", "required_width"])
    for l, (tw, rw) in enumerate(zip(sc.target_widths, widths)):
        w.writerow([l, tw, rw])
    _write(out / "bounds.csv", buf.getvalue())
    _write(out / "config_slt.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    for width, med in sweep.medians().items():
        print(f"width {width:4d}  median best error {med:.6f}")
    return out


REPORT_FIELDS = ["method", "runs", "top_k", "mean_test_acc", "std_test_acc", "mean_params", "mean_residual_norm"]


def cmd_report(cfg: dict | None, args) -> Path:
    run_dir = Path(_require(args.run_dir, "--run-dir"))
    rec_paths = sorted((run_dir / "records").glob("*.json")) if (run_dir / "records").is_dir() else []
    if not rec_paths:
        raise ConfigError(f"no run records under {run_dir}")
    records = [RunRecord.from_json(p.read_text()) for p in rec_paths]
    top_k = 3
    cfg_path = run_dir / "config_train.json"
    if cfg_path.exists():
        top_k = json.loads(cfg_path.read_text()).get("train", {}).get("top_k", top_k)
    summary = summarize(records, top_k)
    reports = []
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for method in sorted(summary):
        recs = [r for r in records if r.method == method]
        norms = np.mean([r.residual_norms for r in recs], axis=0)
        reports.append(AnalysisReport("residual_norms", tuple(norms), {"method": method}))
        row = {"method": method, **summary[method], "mean_residual_norm": float(norms.sum())}
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    masks = {}
    for p in sorted((run_dir / "masks").glob("*.plra")) if (run_dir / "masks").is_dir() else []:
        masks[p.stem] = pio.load_masks(p)[0]
    for name, u in masks.items():
        reports.append(AnalysisReport("fractions", tuple(subnetwork_fraction(masks=u)), {"masks": name}))
    names = list(masks)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            reports.append(overlap_report(masks[a], masks[b], masks=[a, b]))
    _write(run_dir / "summary.csv", buf.getvalue())
    _write(run_dir / "report.json", bundle_json(reports))
    print(buf.getvalue(), end="")
    return run_dir


COMMANDS = {
    "pretrain": cmd_pretrain,
    "derive": cmd_derive,
    "train": cmd_train,
    "slt-check": cmd_slt_check,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="palora", description="Sparse low-rank adapter experiments.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON experiment config")
    ap.add_argument("--out", default="runs", help="base directory for new run directories")
    ap.add_argument("--run-dir", help="write into (or, for report, read from) this directory")
    ap.add_argument("--seed", type=int, help="override the command's seed")
    ap.add_argument("--mode", help="train mode (overrides train.mode)")
    ap.add_argument("--checkpoint", help="model checkpoint for derive/train")
    ap.add_argument("--profile", help="sparsity profile for train")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = None
        if args.command != "report" or args.config:
            cfg = load_config(_require(args.config, "--config"), args.command)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, ContractError, FileNotFoundError, pio.FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FloatingPointError, TrainingError, ConvergenceError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
