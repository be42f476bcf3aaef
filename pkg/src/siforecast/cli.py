"""Command-line entry point: ``siforecast {gen-data,train,forecast,eval,spectra}``.

Every subcommand reads one YAML config, applies ``--set key.path=value``
overrides, and writes the resolved config next to its outputs.  Exit codes:
0 success, 2 configuration or validation error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import copy
import logging
import os
import subprocess
import sys
from pathlib import Path

import yaml

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

TASKS = ("gmm_synthetic", "jump_diffusion", "navier_stokes")

DEFAULTS = {
    "task": "gmm_synthetic",
    "seed": None,
    "output_dir": "run",
    "schedule": {"kind": "quadratic_beta", "epsilon": 1.0},
    "data": {
        "n_pairs": 100000,
        "manifest": None,
        "gmm": None,  # optional GmmSpec JSON; default is the 5-mode rotated mixture
        "lag": 0.5,
        "burn_in": 20.0,
        "n_chains": 1000,
        "navier_stokes": {
            "n": 64,
            "viscosity": 1e-3,
            "damping": 0.1,
            "forcing": 1.0,
            "dt": 1e-4,
            "snapshot_interval": 0.5,
            "n_snapshots": 20,
            "n_trajectories": 2,
            "burn_in_time": 5.0,
        },
    },
    "model": {"widths": [128, 128, 128], "activation": "silu"},
    "train": {
        "batch_size": 1000,
        "epochs": 100,
        "lr": 1e-3,
        "weight_decay": 1e-2,
        "val_fraction": 0.1,
        "log_every": 1,
        "stop_epoch": None,
    },
    "sampler": {"n_steps": 200, "diffusion": "match_sigma", "ensemble_size": 1000},
    "forecast": {"checkpoint": None, "x0": None, "x0_file": None, "n_conditions": 1, "lags": 1},
    "eval": {"ensemble": None, "reference": None, "n_boot": 50, "n_grid": 512},
}


class ConfigError(Exception):
    pass


def _merge(base: dict, extra: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, val in (extra or {}).items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and base[key] is not None:
            if not isinstance(val, dict):
                raise ConfigError(f"'{where}' must be a mapping")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def _apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form key.path=value")
    key, raw = item.split("=", 1)
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key '{key}'")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key '{key}'")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path, overrides=()) -> dict:
    user = {}
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a mapping")
    cfg = _merge(DEFAULTS, user)
    for item in overrides:
        _apply_override(cfg, item)
    if cfg["seed"] is None:
        raise ConfigError("'seed' is mandatory")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("'seed' must be a non-negative integer")
    if cfg["task"] not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {cfg['task']!r}")
    return cfg


def version_stamp() -> dict:
    from . import __version__

    stamp = {"package": __version__}
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if res.returncode == 0:
            stamp["git"] = res.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return stamp


def _emit_config(cfg: dict, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "version": version_stamp(), "config": cfg}
    (out / f"resolved_{command}.yaml").write_text(yaml.safe_dump(doc, sort_keys=True))


def _schedule(cfg):
    from .schedules import Schedule, ScheduleKind

    kind = ScheduleKind(cfg["schedule"]["kind"])
    eps = float(cfg["schedule"]["epsilon"])
    if kind is ScheduleKind.LINEAR_BETA:
        return Schedule.linear(eps)
    if kind is ScheduleKind.QUADRATIC_BETA:
        return Schedule.quadratic(eps)
    raise ConfigError("custom schedules are library-only; use linear_beta or quadratic_beta")


def _gmm_spec(cfg):
    from .analytic_gmm import GmmSpec, rotated_mode_spec

    path = cfg["data"]["gmm"]
    return GmmSpec.load(path) if path else rotated_mode_spec()


def _require(path, what):
    if path is None or not Path(path).exists():
        raise ConfigError(f"{what} not found: {path}")
    return Path(path)


# -- subcommands ----------------------------------------------------------------


def cmd_gen_data(cfg: dict) -> Path:
    from .arrayio import write_array
    from .datasets import TransitionDataset
    from .rng import generator

    out = Path(cfg["output_dir"]) / "data"
    data = cfg["data"]
    task = cfg["task"]
    if task == "gmm_synthetic":
        spec = _gmm_spec(cfg)
        gen = generator(cfg["seed"], "data")
        n = int(data["n_pairs"])
        if n < 1:
            raise ConfigError("data.n_pairs must be >= 1")
        x0 = spec.sample(n, gen)
        x1 = spec.sample(n, gen)
        ds = TransitionDataset(x0, x1, lag=1.0, meta={"task": task, "seed": cfg["seed"], "gmm": spec.to_dict()})
        out.mkdir(parents=True, exist_ok=True)
        spec.save(out / "gmm.json")
    elif task == "jump_diffusion":
        from .dynamics import JumpDiffusionConfig, simulate_jump_diffusion

        jc = JumpDiffusionConfig(spec=_gmm_spec(cfg), lag=float(data["lag"]), seed=cfg["seed"])
        ds = simulate_jump_diffusion(jc, int(data["n_pairs"]), float(data["burn_in"]), int(data["n_chains"]))
    else:
        from .dynamics import NavierStokesConfig, simulate_ns

        ns = dict(data["navier_stokes"])
        n_snap = int(ns.pop("n_snapshots"))
        n_traj = int(ns.pop("n_trajectories"))
        burn = float(ns.pop("burn_in_time"))
        nc = NavierStokesConfig(seed=cfg["seed"], **ns)
        ds, snaps = simulate_ns(nc, n_snap, burn, n_traj)
        out.mkdir(parents=True, exist_ok=True)
        write_array(out / "snapshots.bin", snaps)
    from .arrayio import config_hash

    path = ds.save(out, extra={"config_hash": config_hash({"task": task, "seed": cfg["seed"], "data": data})})
    _emit_config(cfg, Path(cfg["output_dir"]), "gen-data")
    print(f"wrote {len(ds)} pairs to {path}")
    return path


def _dataset_manifest(cfg):
    m = cfg["data"]["manifest"] or Path(cfg["output_dir"]) / "data" / "pairs_manifest.json"
    return _require(m, "dataset manifest")


def cmd_train(cfg: dict, resume: bool = False) -> Path:
    from .arrayio import write_csv
    from .datasets import TransitionDataset
    from .drift_model import AdamW, NeuralDrift, TrainConfig, load_checkpoint, save_checkpoint, train
    from .rng import generator

    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    sched = _schedule(cfg)
    ds = TransitionDataset.load(_dataset_manifest(cfg))
    tc = cfg["train"]
    tcfg = TrainConfig(
        batch_size=int(tc["batch_size"]),
        epochs=int(tc["epochs"]),
        lr=float(tc["lr"]),
        weight_decay=float(tc["weight_decay"]),
        val_fraction=float(tc["val_fraction"]),
        seed=cfg["seed"],
        log_every=0,
    )
    train_ds, val_ds = ds.split(tcfg.val_fraction, generator(cfg["seed"], "split"))
    ckpt = out / "checkpoint.bin"
    loss_csv = out / "loss.csv"
    start = 0
    optimizer = None
    if resume:
        model, kind, eps, optimizer, start = load_checkpoint(_require(ckpt, "checkpoint"))
        if kind is not sched.kind or eps != sched.epsilon:
            raise ConfigError("checkpoint schedule differs from the configured schedule")
        if optimizer is not None:
            optimizer.betas, optimizer.eps, optimizer.weight_decay = tcfg.betas, tcfg.adam_eps, tcfg.weight_decay
    else:
        widths = [2 * ds.dim + 1, *[int(w) for w in cfg["model"]["widths"]], ds.dim]
        model = NeuralDrift.initialize(widths, cfg["model"]["activation"], seed=cfg["seed"])
    if optimizer is None:
        optimizer = AdamW(tcfg.betas, tcfg.adam_eps, tcfg.weight_decay)
    stop = tc["stop_epoch"]
    res = train(model, train_ds, tcfg, sched, optimizer, start, val_ds, None if stop is None else int(stop))
    save_checkpoint(ckpt, res.model, sched, res.optimizer, res.epoch)
    rows = _loss_rows(res, int(tc["log_every"]))
    header = ["step", "epoch", "loss", "grad_norm", "lr", "val_loss"]
    if resume and loss_csv.exists():
        with open(loss_csv, "a") as fh:
            for r in rows:
                fh.write(",".join(repr(float(v)) for v in r) + "\n")
    else:
        write_csv(loss_csv, rows, header)
    _emit_config(cfg, out, "train")
    print(f"trained to epoch {res.epoch}; checkpoint {ckpt}")
    return ckpt


def _loss_rows(res, log_every):
    """One row per logging interval of ``log_every`` epochs (mean loss over its steps)."""
    import numpy as np

    if log_every < 1:
        raise ConfigError("train.log_every must be >= 1")
    val = {v["epoch"]: v["val_loss"] for v in res.val_history}
    groups = {}
    for h in res.history:
        groups.setdefault(h["epoch"] // log_every, []).append(h)
    rows = []
    for _, hs in sorted(groups.items()):
        last = hs[-1]
        rows.append(
            [
                last["step"],
                last["epoch"],
                float(np.mean([h["loss"] for h in hs])),
                float(np.mean([h["grad_norm"] for h in hs])),
                last["lr"],
                val.get(last["epoch"], float("nan")),
            ]
        )
    return rows


def _conditions(cfg, dim):
    import numpy as np

    from .arrayio import read_array
    from .datasets import TransitionDataset

    fc = cfg["forecast"]
    if fc["x0"] is not None:
        x0 = np.atleast_2d(np.asarray(fc["x0"], dtype=float))
    elif fc["x0_file"] is not None:
        x0 = read_array(_require(fc["x0_file"], "x0 file"))
        x0 = x0.reshape(x0.shape[0], -1) if x0.ndim > 1 else x0[None, :]
    else:
        ds = TransitionDataset.load(_dataset_manifest(cfg))
        x0 = ds.x0[: int(fc["n_conditions"])]
    if x0.shape[1] != dim:
        raise ConfigError(f"conditioning states have dimension {x0.shape[1]}, model expects {dim}")
    return x0


def cmd_forecast(cfg: dict) -> list:
    from .arrayio import config_hash, file_sha256
    from .drift_model import load_checkpoint
    from .sampler import ForecastEnsemble, SamplerConfig, rollout

    out = Path(cfg["output_dir"]) / "forecast"
    ckpt = _require(cfg["forecast"]["checkpoint"] or Path(cfg["output_dir"]) / "checkpoint.bin", "checkpoint")
    model, kind, eps, _, epoch = load_checkpoint(ckpt)
    sched = _schedule({"schedule": {"kind": kind.value, "epsilon": eps}})
    sc = cfg["sampler"]
    scfg = SamplerConfig(int(sc["n_steps"]), sc["diffusion"], int(sc["ensemble_size"]), cfg["seed"])
    lags = int(cfg["forecast"]["lags"])
    if lags < 1:
        raise ConfigError("forecast.lags must be >= 1")
    x0s = _conditions(cfg, model.dim)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    digest = file_sha256(ckpt)
    run_hash = config_hash({"sampler": scfg.describe(), "schedule": sched.describe()})
    for i, x0 in enumerate(x0s):
        traj = rollout(model, sched, scfg, x0, lags)
        for j in range(lags):
            prov = {"checkpoint_sha256": digest, "config_hash": run_hash, "epoch": epoch, "condition": i, "lag": j + 1}
            ens = ForecastEnsemble(traj[j], x0, prov)
            paths.append(ens.save(out / f"ensemble_c{i:03d}_lag{j + 1:02d}"))
    _emit_config(cfg, Path(cfg["output_dir"]), "forecast")
    print(f"wrote {len(paths)} ensembles to {out}")
    return paths


def _load_samples(path):
    import numpy as np

    from .arrayio import read_array

    arr = read_array(_require(path, "sample file"))
    return arr[:, None] if arr.ndim == 1 else np.asarray(arr)


def _summaries(arr):
    """1-D slices to compare: coordinates for low-dimensional data, total enstrophy/energy for fields."""
    import numpy as np

    from .dynamics import total_energy, total_enstrophy

    flat = arr.reshape(arr.shape[0], -1)
    d = flat.shape[1]
    side = int(round(np.sqrt(d)))
    if d > 3 and side * side == d:
        fields = flat.reshape(-1, side, side)
        return {"total_enstrophy": total_enstrophy(fields), "total_energy": total_energy(fields)}
    return {f"x{k}": flat[:, k] for k in range(d)}


def cmd_eval(cfg: dict) -> Path:
    import json

    from .arrayio import write_csv
    from .evaluation import conditional_moment_errors, kde_kl

    ec = cfg["eval"]
    ens = _load_samples(ec["ensemble"])
    ref = _load_samples(ec["reference"])
    if ens.shape[1:] != ref.shape[1:]:
        raise ConfigError(f"dimension mismatch: ensemble {ens.shape[1:]} vs reference {ref.shape[1:]}")
    out = Path(cfg["output_dir"]) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    err = conditional_moment_errors(ens.reshape(len(ens), -1), ref.reshape(len(ref), -1))
    report = {"moments": err.__dict__, "kl": {}}
    se, sr = _summaries(ens), _summaries(ref)
    for name in se:
        kl = kde_kl(se[name], sr[name], n_boot=int(ec["n_boot"]), seed=cfg["seed"], n_grid=int(ec["n_grid"]))
        report["kl"][name] = {"value": kl.value, "bootstrap_std": kl.std}
        write_csv(out / f"kde_{name}.csv", [[g, p, q] for g, p, q in zip(kl.grid, kl.p_density, kl.q_density)], ["x", "ensemble", "reference"])
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit_config(cfg, Path(cfg["output_dir"]), "eval")
    print(json.dumps(report, sort_keys=True))
    return out / "report.json"


def cmd_spectra(cfg: dict, inputs) -> Path:
    import numpy as np

    from .arrayio import write_csv
    from .dynamics import enstrophy_spectrum

    out = Path(cfg["output_dir"]) / "spectra"
    out.mkdir(parents=True, exist_ok=True)
    curves = []
    names = []
    for p in inputs:
        arr = _load_samples(p)
        if arr.ndim >= 3 and arr.shape[-1] == arr.shape[-2]:
            # snapshot stacks keep their field axes
            fields = arr.reshape(-1, arr.shape[-2], arr.shape[-1])
        else:
            flat = arr.reshape(arr.shape[0], -1)
            side = int(round(np.sqrt(flat.shape[1])))
            if side * side != flat.shape[1]:
                raise ConfigError(f"{p}: samples are not square fields")
            fields = flat.reshape(-1, side, side)
        curves.append(enstrophy_spectrum(fields).mean(axis=0))
        names.append(Path(p).stem)
    width = max(len(c) for c in curves)
    table = np.zeros((width, len(curves) + 1))
    table[:, 0] = np.arange(width)
    for i, c in enumerate(curves):
        table[: len(c), i + 1] = c
    path = out / "enstrophy_spectrum.csv"
    write_csv(path, table, ["k", *names])
    _emit_config(cfg, Path(cfg["output_dir"]), "spectra")
    print(f"wrote {path}")
    return path


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siforecast", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="cap on numerical worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", "-c", help="YAML run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--output-dir", "-o", help="shortcut for --set output_dir=...")
        p.add_argument("--seed", type=int, help="shortcut for --set seed=...")
        return p

    add("gen-data", "simulate or sample a transition dataset")
    p = add("train", "fit a neural drift to a dataset")
    p.add_argument("--resume", action="store_true", help="continue from output_dir/checkpoint.bin")
    p = add("forecast", "sample forecast ensembles from a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--lags", type=int, help="number of autoregressive lags")
    p.add_argument("--x0-file", help="array file of conditioning states")
    p = add("eval", "compare an ensemble file with reference samples")
    p.add_argument("--ensemble")
    p.add_argument("--reference")
    p = add("spectra", "mean enstrophy spectra of field sample files")
    p.add_argument("inputs", nargs="+", help="array files of square fields")
    return parser


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .errors import DomainError, NumericalError

    try:
        _set_threads(args.threads)
        overrides = list(args.set)
        if args.output_dir:
            overrides.append(f"output_dir={args.output_dir}")
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        for flag, key in (("checkpoint", "forecast.checkpoint"), ("lags", "forecast.lags"), ("x0_file", "forecast.x0_file"),
                          ("ensemble", "eval.ensemble"), ("reference", "eval.reference")):
            val = getattr(args, flag, None)
            if val is not None:
                overrides.append(f"{key}={val}")
        cfg = load_config(args.config, overrides)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train":
            cmd_train(cfg, resume=args.resume)
        elif args.command == "forecast":
            cmd_forecast(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        else:
            cmd_spectra(cfg, args.inputs)
    except NumericalError as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DomainError, ValueError, KeyError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
