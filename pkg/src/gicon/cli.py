"""``gicon`` command line: data generation, indexing, training, evaluation, reports."""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, parse_config, schema

OUT_ROOT_ENV = "GICON_OUT_ROOT"

# flag -> (section, key)
DATA_FLAGS = {
    "--nodes": ("data", "n_nodes"),
    "--horizon": ("data", "horizon"),
    "--channels": ("data", "n_channels"),
    "--radius": ("data", "connection_radius"),
    "--extent": ("data", "extent_km"),
    "--diffusion": ("data", "diffusion"),
    "--advection": ("data", "advection"),
    "--forcing": ("data", "forcing"),
    "--relaxation": ("data", "relaxation"),
    "--substeps": ("data", "substeps"),
    "--train-frac": ("data", "train_frac"),
}
MODEL_FLAGS = {
    "--tau": ("model", "tau"),
    "--d-node": ("model", "d_node"),
    "--d-edge": ("model", "d_edge"),
    "--d-msg": ("model", "d_msg"),
    "--layers": ("model", "layers"),
    "--heads": ("model", "heads"),
    "--d-ff": ("model", "d_ff"),
    "--dropout": ("model", "dropout"),
}
TRAIN_FLAGS = {
    "--steps": ("train", "total_steps"),
    "--batch-size": ("train", "batch_size"),
    "--lr": ("train", "base_lr"),
    "--weight-decay": ("train", "weight_decay"),
    "--regime": ("train", "regime"),
    "--dt": ("train", "dt"),
    "--dt-lo": ("train", "dt_lo"),
    "--dt-hi": ("train", "dt_hi"),
    "--k-max": ("train", "k_max"),
    "--K": ("train", "K"),
    "--tau-r": ("train", "tau_r"),
    "--precision": ("train", "precision"),
    "--log-interval": ("train", "log_interval"),
    "--checkpoint-interval": ("train", "checkpoint_interval"),
}
EVAL_FLAGS = {
    "--checkpoint": ("eval", "checkpoint"),
    "--dts": ("eval", "dts"),
    "--counts": ("eval", "counts"),
    "--selection": ("eval", "selection"),
    "--stride": ("eval", "stride"),
    "--eval-batch-size": ("eval", "batch_size"),
}
COMMON_FLAGS = {
    "--seed": ("run", "seed"),
    "--out": ("run", "out_dir"),
}
DATASET_FLAG = {"--dataset": ("data", "dataset")}
INDEX_FLAG = {"--index": ("eval", "index")}

SUBCOMMANDS = {
    "gen-data": (DATA_FLAGS, "generate a synthetic multi-operator dataset"),
    "build-index": ({**DATASET_FLAG, "--tau": ("model", "tau"), "--tau-r": ("train", "tau_r")}, "build the retrieval pool"),
    "train": ({**DATASET_FLAG, **INDEX_FLAG, **MODEL_FLAGS, **TRAIN_FLAGS}, "train a model"),
    "eval": ({**DATASET_FLAG, **INDEX_FLAG, **EVAL_FLAGS}, "evaluate a checkpoint at the configured counts"),
    "sweep": ({**DATASET_FLAG, **INDEX_FLAG, **EVAL_FLAGS}, "RMSE against example count"),
    "extrapolate": ({**DATASET_FLAG, **INDEX_FLAG, **EVAL_FLAGS}, "evaluate dts outside the training range"),
    "transfer": ({**DATASET_FLAG, **INDEX_FLAG, **EVAL_FLAGS}, "evaluate on a different graph"),
    "ablate-noise": ({**DATASET_FLAG, **INDEX_FLAG, **EVAL_FLAGS, "--sigma": ("eval", "noise_sigma")},
                     "retrieved versus gaussian-noise contexts"),
    "report": ({}, "render a report CSV as an SVG chart"),
}
NEEDS_SEED = {"train", "eval", "sweep", "extrapolate", "transfer", "ablate-noise"}


def _flag_help(section: str, key: str) -> str:
    tp, default = schema()[section][key]
    if isinstance(default, list):
        default = ",".join(map(str, default))
    return f"[{section}] {key} (default: {default if default not in ('', None) else 'none'})"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gicon", description=__doc__)
    parser.add_argument("--version", action="version", version=f"gicon {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (flags, help_text) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="sectioned key=value config file (default: none)")
        for flag, (section, key) in {**flags, **COMMON_FLAGS}.items():
            p.add_argument(flag, dest=f"{section}.{key}", default=None, help=_flag_help(section, key))
        if name == "train":
            p.add_argument("--resume", default=None, help="continue from this checkpoint (default: none)")
        if name == "report":
            p.add_argument("--input", required=True, help="report CSV to render (required)")
            p.add_argument("--noise", action="store_true", help="plot the noise-context column (default: off)")
    return parser


def _overrides(ns: argparse.Namespace) -> Dict[Tuple[str, str], str]:
    out = {}
    for dest, value in vars(ns).items():
        if "." in dest and value is not None:
            section, key = dest.split(".", 1)
            out[(section, key)] = value
    return out


def _out_dir(cfg: RunConfig, command: str) -> Path:
    out = cfg.get("run", "out_dir")
    if not out:
        out = str(Path(os.environ.get(OUT_ROOT_ENV, "runs")) / command)
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _versions() -> dict:
    import torch

    return {"gicon": __version__, "python": platform.python_version(), "numpy": np.__version__, "torch": torch.__version__}


def _write_manifest(out: Path, command: str, argv: List[str], cfg: RunConfig, inputs: Dict[str, str], outputs: List[Path]):
    from .data import file_sha256

    (out / "config.ini").write_text(cfg.to_text())
    manifest = {
        "command": command,
        "argv": argv,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": {p: file_sha256(p) for p in inputs.values() if p},
        "outputs": {p.name: file_sha256(p) for p in outputs if p.exists()},
        "versions": _versions(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require(cfg: RunConfig, section: str, key: str, flag: str) -> str:
    value = cfg.get(section, key)
    if not value:
        raise ConfigError(f"{flag} is required ([{section}] {key})")
    return value


def cmd_gen_data(cfg: RunConfig, out: Path):
    from .data import write_dataset
    from .synth import synth_dataset

    ds = synth_dataset(cfg.synth_spec())
    path = out / "dataset.gicon"
    write_dataset(ds, path)
    print(f"wrote {path} (|V|={ds.graph.n_nodes}, |E|={len(ds.graph.edges)}, T={ds.series.horizon})")
    return {}, [path], 0


def _load_pool(cfg: RunConfig):
    from .retrieval import read_pool

    index = cfg.get("eval", "index")
    return read_pool(index) if index else None


def cmd_build_index(cfg: RunConfig, out: Path):
    from .data import file_sha256, read_dataset
    from .retrieval import build_pool, write_pool

    dpath = _require(cfg, "data", "dataset", "--dataset")
    ds = read_dataset(dpath)
    tau = cfg.get("model", "tau")
    pool = build_pool(ds, tau, cfg.get("train", "tau_r") or tau)
    path = out / "pool.gicon"
    write_pool(pool, path, {"dataset_sha256": file_sha256(dpath)})
    print(f"wrote {path} ({len(pool)} entries, dim {pool.dim})")
    return {"dataset": dpath}, [path], 0


def cmd_train(cfg: RunConfig, out: Path, resume: Optional[str] = None):
    from .data import read_dataset
    from .numeric import resolve_dtype
    from .training import TrainingData, load_checkpoint, new_state, save_checkpoint, train

    dpath = _require(cfg, "data", "dataset", "--dataset")
    ds = read_dataset(dpath)
    names, targets = ds.channel_schema()
    if resume:
        state = load_checkpoint(resume)
    else:
        mcfg = cfg.model_config(ds.series.n_channels, targets)
        tcfg = cfg.train_config()
        from .graph import EdgeStats

        state = new_state(mcfg, tcfg, EdgeStats.from_graph(ds.graph), {"channel_names": names, "target_channels": targets})
    tcfg = state.train_cfg
    data = TrainingData(ds, state.model.cfg.tau, tcfg.tau_r, resolve_dtype(tcfg.precision), state.edge_stats, _load_pool(cfg))
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)

    def progress(step, loss):
        if step % max(1, tcfg.log_interval) == 0 or step == tcfg.total_steps:
            print(f"step {step:>7d}  loss {loss:.5f}", flush=True)

    train(state, data, log_path=out / "train_log.csv", checkpoint_dir=ckdir, progress=progress)
    final = out / "final.ckpt"
    save_checkpoint(state, final)
    print(f"wrote {final}")
    inputs = {"dataset": dpath}
    if resume:
        inputs["resume"] = resume
    if cfg.get("eval", "index"):
        inputs["index"] = cfg.get("eval", "index")
    return inputs, [final, out / "train_log.csv"], 0


def cmd_evaluate(cfg: RunConfig, out: Path, command: str):
    from .data import file_sha256, read_dataset
    from .evaluation import cardinality_sweep, emit_report, extrapolate_eval, noise_ablation, transfer_eval
    from .training import load_checkpoint

    ckpt = _require(cfg, "eval", "checkpoint", "--checkpoint")
    dpath = _require(cfg, "data", "dataset", "--dataset")
    state = load_checkpoint(ckpt)
    ds = read_dataset(dpath)
    pool = _load_pool(cfg)
    spec = cfg.eval_spec()
    if command == "extrapolate":
        report = extrapolate_eval(state, ds, spec, pool)
    elif command == "transfer":
        report = transfer_eval(state, ds, spec, pool)
    elif command == "ablate-noise":
        report = noise_ablation(state, ds, spec, spec.noise_sigma or 1.0, pool)
    else:
        report = cardinality_sweep(state, ds, spec, pool)
    report.provenance.update({
        "checkpoint_sha256": file_sha256(ckpt),
        "dataset_sha256": file_sha256(dpath),
        "command": command,
    })
    paths = [out / "report.csv", out / "report.svg", out / "report.json"]
    emit_report(report, *paths)
    for p in paths:
        print(f"wrote {p}")
    inputs = {"checkpoint": ckpt, "dataset": dpath}
    if cfg.get("eval", "index"):
        inputs["index"] = cfg.get("eval", "index")
    if report.has_errors:
        print("error: some cells could not be evaluated (see flags in report.csv)", file=sys.stderr)
    return inputs, paths, 1 if report.has_errors else 0


def cmd_report(cfg: RunConfig, out: Path, src: str, noise: bool):
    from .evaluation import read_report_csv
    from .plotting import save_rmse_chart

    report = read_report_csv(src)
    path = out / (Path(src).stem + ("_noise" if noise else "") + ".svg")
    save_rmse_chart(report, path, noise=noise)
    print(f"wrote {path}")
    return {"input": src}, [path], 0


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    ns = parser.parse_args(argv)
    command = ns.command
    try:
        cfg = parse_config(ns.config, _overrides(ns))
        if command in NEEDS_SEED and cfg.seed is None:
            raise ConfigError(f"{command} needs an explicit --seed (or [run] seed)")
        out = _out_dir(cfg, command)
        if command == "gen-data":
            inputs, outputs, code = cmd_gen_data(cfg, out)
        elif command == "build-index":
            inputs, outputs, code = cmd_build_index(cfg, out)
        elif command == "train":
            inputs, outputs, code = cmd_train(cfg, out, ns.resume)
        elif command == "report":
            inputs, outputs, code = cmd_report(cfg, out, ns.input, ns.noise)
        else:
            inputs, outputs, code = cmd_evaluate(cfg, out, command)
        _write_manifest(out, command, argv, cfg, inputs, outputs)
        return code
    except (ConfigError, OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
