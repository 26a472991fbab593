"""Command-line entry point: ``indlab <subcommand> [flags]``.

Settings resolve in order: built-in defaults, ``--preset``, ``--config``
JSON, explicit flags. Every JSON written is validated against the schema
shipped in ``indlab/schemas``. Exit codes: 0 ok, 1 bad input, 2 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

import jsonschema
import numpy as np

from .disentangled import load_weights, save_weights
from .dynamics import IntegrationError, StepControl, Thresholds, integrate_flow, scaling_scan
from .icl_data import gen_gaussian, gen_orthonormal, write_batch
from .pseudo_params import INDUCTION_HEAD, NAMES, PseudoParams, project, resolve_indices
from .reference import StdDiverged, StdModel, StdTrainConfig, interpret, std_train
from .trainer import (
    SCAN_POINT,
    TrainConfig,
    TrainingDiverged,
    sgd_vs_flow,
    structure_residual_scan,
    top_params,
    train,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# preset name -> (subcommands it applies to, settings)
PRESETS: dict[str, tuple[tuple[str, ...], dict[str, Any]]] = {
    "fig3-weights": (
        ("train",),
        dict(n=8, dim=16, lr=1.0, batch=512, steps=800, data="gaussian", mask="exclusive", log_every=100),
    ),
    "fig4-dynamics": (
        ("train",),
        dict(n=16, dim=32, lr=1.0, batch=256, steps=600, data="gaussian", mask="exclusive", log_every=5),
    ),
    "fig5-ablation": (
        ("train",),
        dict(
            n=16, dim=32, lr=1.0, batch=256, steps=600, data="gaussian", mask="exclusive", log_every=5,
            ablate=",".join(INDUCTION_HEAD),
        ),
    ),
    "fig6-scaling": (
        ("scan-n", "sgd-vs-flow"),
        dict(n="8,16,32,64", dim=256, batch=64, lr=100.0, data="orthonormal", threshold="0.1,0.1,0.5"),
    ),
    "fig2-interpret": (
        ("std-train",),
        dict(vocab=32, block=32, dim=128, head_dim=128, steps=300, batch=512, lr=1e-3, weight_decay=0.01),
    ),
}


def preset(name: str, command: str | None = None) -> dict[str, Any]:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    commands, settings = PRESETS[name]
    if command is not None and command not in commands:
        raise ValueError(f"preset {name!r} applies to {', '.join(commands)}, not {command!r}")
    return dict(settings)


# ---------------------------------------------------------------- output


def _schema(name: str) -> dict:
    return json.loads(resources.files("indlab").joinpath("schemas", f"{name}.json").read_text())


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def emit_json(payload: dict, schema: str, path: Path) -> dict:
    payload = _clean(payload)
    jsonschema.validate(payload, _schema(schema))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def write_matrix_csv(m: np.ndarray, path: Path) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in np.atleast_2d(m):
            writer.writerow([_fmt(v) for v in row])
    return path


# ---------------------------------------------------------------- parsing helpers


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    if isinstance(text, int):
        return [text]
    return [int(v) for v in str(text).split(",") if v.strip()]


def _thresholds(text) -> Thresholds:
    if isinstance(text, (int, float)):
        return Thresholds.parse(float(text))
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        vals = [float(v) for v in str(text).split(",")]
    if len(vals) == 1:
        return Thresholds.parse(vals[0])
    if len(vals) != 3:
        raise ValueError("threshold takes one value or three (alpha,beta,gamma)")
    if min(vals) <= 0:
        raise ValueError("thresholds must be positive")
    return Thresholds.parse(vals)


def _ablation(text) -> tuple[str, ...] | None:
    if text in (None, "", "none"):
        return None
    names = text if isinstance(text, (list, tuple)) else str(text).split(",")
    idx = resolve_indices([n.strip() for n in names])
    return tuple(NAMES[i] for i in idx)


# every setting any subcommand understands: name -> (flag type, default)
SETTINGS: dict[str, tuple[Callable | None, Any]] = {
    "n": (str, None),
    "dim": (int, None),
    "batch": (int, None),
    "lr": (float, None),
    "steps": (int, None),
    "seed": (int, 0),
    "mask": (str, "exclusive"),
    "data": (str, "gaussian"),
    "query": (str, "uniform"),
    "basis": (str, "canonical"),
    "scale": (float, None),
    "ablate": (str, None),
    "threshold": (str, "0.5"),
    "log_every": (int, 10),
    "jobs": (int, 1),
    "weights": (str, None),
    "checkpoint": (str, None),
    "batch_sizes": (str, "64,256,1024,4096"),
    "seeds": (int, 8),
    "point": (str, "default"),
    "max_change": (float, 1e-3),
    "vocab": (int, 32),
    "block": (int, 32),
    "head_dim": (int, None),
    "weight_decay": (float, 0.01),
    "init_std": (float, 0.02),
    "score_scale": (float, 1.0),
}

COMMAND_SETTINGS: dict[str, tuple[str, ...]] = {
    "gen-data": ("n", "dim", "batch", "data", "query", "basis", "scale"),
    "train": ("n", "dim", "batch", "lr", "steps", "mask", "data", "query", "basis", "scale", "ablate", "log_every"),
    "project": ("weights",),
    "flow": ("n", "threshold", "max_change"),
    "scan-n": ("n", "threshold", "max_change", "jobs"),
    "sgd-vs-flow": ("n", "dim", "batch", "lr", "threshold", "data"),
    "std-train": ("dim", "head_dim", "vocab", "block", "batch", "lr", "steps", "weight_decay", "init_std", "score_scale"),
    "interpret": ("checkpoint",),
    "residual-scan": ("n", "dim", "batch_sizes", "seeds", "mask", "point", "jobs"),
}

CHOICES = {
    "mask": ("inclusive", "exclusive"),
    "data": ("gaussian", "orthonormal"),
    "query": ("uniform", "last"),
    "basis": ("canonical", "random"),
}

COMMAND_DEFAULTS: dict[str, dict[str, Any]] = {
    "gen-data": dict(n="8", dim=16, batch=512),
    "train": dict(n="8", dim=16, batch=512, lr=1.0, steps=1000),
    "flow": dict(n="8"),
    "scan-n": dict(n="8,16,32,64"),
    "sgd-vs-flow": dict(n="4", dim=8, batch=2, data="orthonormal"),
    "std-train": dict(dim=128, batch=512, lr=1e-3, steps=300),
    "residual-scan": dict(n="8", dim=16),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="indlab", description="Induction-head emergence experiments.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for cmd, keys in COMMAND_SETTINGS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory (default $INDLAB_OUT or .)")
        p.add_argument("--preset", default=None, choices=sorted(PRESETS))
        p.add_argument("--config", default=None, help="JSON file of settings")
        for key in keys:
            kind, _ = SETTINGS[key]
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None, choices=CHOICES.get(key))
    return parser


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults, preset, config file and explicit flags."""
    cmd = args.command
    allowed = set(COMMAND_SETTINGS[cmd]) | {"seed"}
    cfg: dict[str, Any] = {k: SETTINGS[k][1] for k in allowed}
    cfg.update({k: v for k, v in COMMAND_DEFAULTS.get(cmd, {}).items() if k in allowed})
    if args.preset:
        cfg.update({k: v for k, v in preset(args.preset, cmd).items() if k in allowed})
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        if not isinstance(loaded, dict):
            raise ValueError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - allowed)
        if unknown:
            raise ValueError(f"unknown config keys for {cmd}: {', '.join(unknown)}")
        cfg.update(loaded)
    for k in allowed:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    for k, choices in CHOICES.items():
        if k in cfg and cfg[k] not in choices:
            raise ValueError(f"{k} must be one of {', '.join(choices)}")
    return cfg


def _single_n(cfg) -> int:
    ns = _int_list(cfg["n"])
    if len(ns) != 1:
        raise ValueError(f"this command takes one value of --n, got {cfg['n']}")
    return ns[0]


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("INDLAB_OUT") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg, out: Path) -> dict:
    n = _single_n(cfg)
    if cfg["data"] == "gaussian":
        batch = gen_gaussian(n, cfg["dim"], cfg["batch"], cfg["seed"], query=cfg["query"],
                             scale=cfg["dim"] ** -0.25 if cfg["scale"] is None else cfg["scale"])
    else:
        batch = gen_orthonormal(n, cfg["dim"], cfg["batch"], cfg["seed"], basis=cfg["basis"])
    path = write_batch(batch, out / "data.bin", seed=cfg["seed"])
    sidecar = Path(str(path) + ".json")
    return emit_json(json.loads(sidecar.read_text()), "dataset", sidecar)


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(
        n_pairs=_single_n(cfg),
        dim=cfg["dim"],
        batch=cfg["batch"],
        learning_rate=cfg["lr"],
        steps=cfg["steps"],
        seed=cfg["seed"],
        mask_mode=cfg["mask"],
        data_mode=cfg["data"],
        query=cfg["query"],
        basis=cfg["basis"],
        scale=cfg["scale"],
        ablation=_ablation(cfg["ablate"]),
        log_every=cfg["log_every"],
    )


def cmd_train(cfg, out: Path) -> dict:
    config = _train_config(cfg)
    traj = train(config)
    traj.write_csv(out / "trajectory.csv")
    save_weights(traj.final_weights, out / "weights.bin")
    rep = project(traj.final_weights)
    final = traj.final_params()
    summary = {
        "config": config.to_json(),
        "initial_loss": traj.losses[0],
        "final_loss": traj.losses[-1],
        "final_params": final.as_dict(),
        "top3": list(top_params(final)),
        "relative_residual": dict(zip(("w1", "w2", "w3"), rep.relative_residual.tolist())),
    }
    return emit_json(summary, "train_summary", out / "train_summary.json")


def cmd_project(cfg, out: Path) -> dict:
    if not cfg["weights"]:
        raise ValueError("project needs --weights FILE")
    rep = project(load_weights(cfg["weights"]))
    return emit_json(rep.to_json(), "projection", out / "projection.json")


def cmd_flow(cfg, out: Path) -> dict:
    n = _single_n(cfg)
    traj, rec = integrate_flow(n, _thresholds(cfg["threshold"]), StepControl(max_change=cfg["max_change"]))
    with (out / f"flow_N{n}.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "alpha", "beta", "gamma", "loss"])
        for row in traj.rows():
            writer.writerow([_fmt(v) for v in row])
    return emit_json(rec.to_json(), "emergence_record", out / f"emergence_N{n}.json")


def cmd_scan_n(cfg, out: Path) -> dict:
    res = scaling_scan(
        _int_list(cfg["n"]), _thresholds(cfg["threshold"]), StepControl(max_change=cfg["max_change"]), jobs=cfg["jobs"]
    )
    return emit_json(res.to_json(), "scan", out / "scan.json")


def cmd_sgd_vs_flow(cfg, out: Path) -> dict:
    if cfg["data"] != "orthonormal":
        raise ValueError("sgd-vs-flow runs on orthonormal data only")
    rows = [
        sgd_vs_flow(n, cfg["dim"], cfg["batch"], cfg["lr"], _thresholds(cfg["threshold"]), seed=cfg["seed"]).to_json()
        for n in _int_list(cfg["n"])
    ]
    return emit_json({"rows": rows}, "sgd_vs_flow", out / "sgd_vs_flow.json")


def cmd_std_train(cfg, out: Path) -> dict:
    config = StdTrainConfig(
        dim=cfg["dim"],
        head_dim=cfg["head_dim"] or cfg["dim"],
        vocab=cfg["vocab"],
        block=cfg["block"],
        batch=cfg["batch"],
        steps=cfg["steps"],
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        init_std=cfg["init_std"],
        score_scale=cfg["score_scale"],
        seed=cfg["seed"],
    )
    res = std_train(config)
    res.model.save(out / "model.ckpt")
    with (out / "std_loss.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for i, v in enumerate(res.losses):
            writer.writerow([i, _fmt(v)])
    rep = interpret(res.model)
    summary = {
        "config": config.to_json(),
        "final_loss": res.losses[-1] if res.losses else None,
        "eval_loss": res.eval_loss,
        "accuracy": res.accuracy,
        "interpret": {k: v for k, v in rep.summary().items() if k != "blocks"},
    }
    return emit_json(summary, "std_train_summary", out / "std_train_summary.json")


def cmd_interpret(cfg, out: Path) -> dict:
    if not cfg["checkpoint"]:
        raise ValueError("interpret needs --checkpoint FILE")
    rep = interpret(StdModel.load(cfg["checkpoint"]))
    for name, m in rep.blocks.items():
        write_matrix_csv(m, out / f"{name}.csv")
    write_matrix_csv(rep.prev_token, out / "prev_token.csv")
    return emit_json(rep.summary(), "interpret_summary", out / "interpret_summary.json")


def cmd_residual_scan(cfg, out: Path) -> dict:
    point = SCAN_POINT if cfg["point"] == "default" else PseudoParams.from_vector(
        [float(v) for v in str(cfg["point"]).split(",")]
    )
    base = TrainConfig(n_pairs=_single_n(cfg), dim=cfg["dim"], mask_mode=cfg["mask"])
    seeds = [cfg["seed"] * 1000 + i for i in range(cfg["seeds"])]
    rows = structure_residual_scan(point, _int_list(cfg["batch_sizes"]), seeds, base, jobs=cfg["jobs"])
    payload = {"point": point.as_dict(), "N": base.n_pairs, "D": base.dim, "rows": [r.to_json() for r in rows]}
    return emit_json(payload, "residual_scan", out / "residual_scan.json")


COMMANDS: dict[str, Callable[[dict, Path], dict]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "project": cmd_project,
    "flow": cmd_flow,
    "scan-n": cmd_scan_n,
    "sgd-vs-flow": cmd_sgd_vs_flow,
    "std-train": cmd_std_train,
    "interpret": cmd_interpret,
    "residual-scan": cmd_residual_scan,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve(args)
        out = _out_dir(args)
        result = COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        print(f"indlab: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingDiverged, IntegrationError, StdDiverged, FloatingPointError) as exc:
        print(f"indlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"indlab: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
