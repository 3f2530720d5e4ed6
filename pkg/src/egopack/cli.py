"""Command-line entry point.

Every command writes ``run.json`` into its output directory with the
resolved configuration, its hash, the seed, ``git describe`` of the
working tree and the metrics the command produced. Failures print one
JSON line on stderr; invalid configuration exits with 2, a missing input
artifact with 3 and a corrupt one with 4.
"""

import argparse
import hashlib
import json
import logging
import os
import platform
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import config_hash, load_config
from .data import TASKS, save_dataset
from .metrics import agreement_ratio, aggregate_score, confusion_matrix, prototype_match_histogram
from .pipeline import (backbone_config, graphs_by_task, interaction_config, load_data,
                       specs_from_config, task_list, train_config)
from .prototypes import build_banks, load_banks, save_banks
from .training import (evaluate, load_checkpoint, metrics_from_predictions, predict,
                       save_checkpoint, train_baseline, train_mtl, train_novel)
from .validation import ConfigError, IntegrityError

logger = logging.getLogger("egopack")

EXIT_CONFIG, EXIT_MISSING, EXIT_INTEGRITY = 2, 3, 4
CKPT_NAME = "model.ckpt"


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir, command, cfg, metrics, artifacts=(), extra=None):
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "git_describe": _git_describe(),
        "versions": {"egopack": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "torch": torch.__version__},
        "metrics": metrics,
        "artifacts": {os.fspath(Path(a).relative_to(out_dir)): sha256_file(a) for a in artifacts},
    }
    manifest.update(extra or {})
    with open(out_dir / "run.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def _read_manifest(run_dir):
    path = Path(run_dir) / "run.json"
    if not path.is_file():
        raise FileNotFoundError(f"{path} does not exist")
    with open(path) as fh:
        return json.load(fh)


def _require(path, what):
    if path is None:
        raise ConfigError(f"--{what} is required")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} {path} does not exist")
    return Path(path)


def _ckpt_file(path):
    path = _require(path, "ckpt")
    if path.is_dir():
        path = path / CKPT_NAME
        if not path.is_file():
            raise FileNotFoundError(f"{path} does not exist")
    return path


def _resolve_config(args, ckpt=None):
    """``--config`` if given, else the config recorded next to ``ckpt``, else defaults."""
    base = None
    if args.config is None and ckpt is not None and (ckpt.parent / "run.json").is_file():
        base = _read_manifest(ckpt.parent)["config"]
    if args.config is not None:
        _require(args.config, "config")
    cfg = load_config(args.config, args.set or (), base=base)
    if getattr(args, "data", None):
        if not Path(args.data).is_dir():
            raise FileNotFoundError(f"data directory {args.data} does not exist")
        cfg["data"]["root"] = os.fspath(args.data)
    if cfg["data"]["root"] is not None and not Path(cfg["data"]["root"]).is_dir():
        raise ConfigError(f"data.root: {cfg['data']['root']} is not a directory")
    return cfg


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _novel_task(cfg, args):
    name = args.novel_task or cfg["tasks"]["novel"]
    if name is None:
        raise ConfigError("tasks.novel: no novel task given (use --novel-task)")
    return task_list([name])[0]


# commands

def cmd_generate_data(args):
    cfg = _resolve_config(args)
    cfg["data"]["root"] = None
    out = _out_dir(args)
    ds = load_data(cfg)
    save_dataset(ds, out)
    counts = {t: len(a) for t, a in ds.annotations.items()}
    write_manifest(out, "generate-data", cfg, {"annotations": counts, "videos": len(ds.sequences)})
    return counts


def cmd_train_mtl(args):
    cfg = _resolve_config(args)
    if args.tasks:
        cfg["tasks"]["mtl"] = list(task_list(args.tasks))
    tasks = task_list(cfg["tasks"]["mtl"])
    out = _out_dir(args)
    ds = load_data(cfg)
    specs = specs_from_config(cfg, ds.n_verbs, ds.n_nouns)
    train = graphs_by_task(ds, specs, "train", tasks)
    val = graphs_by_task(ds, specs, "val", tasks)
    bcfg = backbone_config(cfg, ds.D)
    task_specs = {t: specs[t] for t in tasks}
    with open(out / "train_log.jsonl", "w") as log:
        if args.mlp:
            state = train_baseline("mlp", task_specs, train, train_config(cfg), bcfg,
                                   val_data=val, log_file=log)
        else:
            state = train_mtl(task_specs, train, train_config(cfg), bcfg, val, log_file=log)
    ckpt = out / CKPT_NAME
    save_checkpoint(state, ckpt)
    metrics = state.history[-1]["val"]
    write_manifest(out, "train-mtl", cfg, metrics, [ckpt], {"history": state.history})
    return metrics


def cmd_build_prototypes(args):
    ckpt = _ckpt_file(args.ckpt)
    cfg = _resolve_config(args, ckpt)
    state = load_checkpoint(ckpt)
    out = _out_dir(args)
    ds = load_data(cfg)
    specs = specs_from_config(cfg, ds.n_verbs, ds.n_nouns)
    ar_graphs = graphs_by_task(ds, specs, "train", ("AR",))["AR"]
    banks = build_banks(state.model, ar_graphs)
    save_banks(banks, out)
    paths = sorted(out.glob("*.bank"))
    metrics = {t: {"rows": b.n_rows, "D_k": b.D_k} for t, b in banks.items()}
    write_manifest(out, "build-prototypes", cfg, metrics, paths,
                   {"ckpt_sha256": sha256_file(ckpt)})
    return metrics


def _train_novel_run(cfg, ckpt, banks_dir, novel, backpack, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    mtl = load_checkpoint(ckpt)
    icfg = interaction_config(cfg, novel, backpack)
    if novel in icfg.tasks:
        raise ConfigError(f"interaction.tasks: novel task {novel} cannot be in the backpack")
    banks = load_banks(banks_dir, icfg.tasks) if icfg.enabled else {}
    ds = load_data(cfg)
    specs = specs_from_config(cfg, ds.n_verbs, ds.n_nouns)
    train = graphs_by_task(ds, specs, "train", (novel,))
    val = graphs_by_task(ds, specs, "val", (novel,))
    with open(out / "train_log.jsonl", "w") as log:
        state = train_novel(mtl, banks, specs[novel], train, train_config(cfg), icfg, val,
                            log_file=log)
    path = out / CKPT_NAME
    save_checkpoint(state, path)
    metrics = state.history[-1]["val"]
    write_manifest(out, "train-novel", cfg, metrics, [path],
                   {"history": state.history, "ckpt_sha256": sha256_file(ckpt),
                    "banks": os.fspath(Path(banks_dir).resolve()) if banks_dir else None})
    return metrics


def _novel_setup(args):
    ckpt = _ckpt_file(args.ckpt)
    cfg = _resolve_config(args, ckpt)
    novel = _novel_task(cfg, args)
    cfg["tasks"]["novel"] = novel
    if args.k is not None:
        cfg["interaction"]["k"] = args.k
    if args.depth is not None:
        cfg["interaction"]["depth"] = args.depth
    if args.tasks_in_backpack:
        cfg["interaction"]["tasks"] = list(task_list(args.tasks_in_backpack))
    backpack = interaction_config(cfg, novel).tasks
    if novel in backpack:
        raise ConfigError(f"interaction.tasks: novel task {novel} cannot be in the backpack")
    cfg["interaction"]["tasks"] = list(backpack)
    banks_dir = None
    if cfg["interaction"]["k"] > 0 and backpack:
        banks_dir = _require(args.banks, "banks")
    return cfg, ckpt, banks_dir, novel, backpack


def cmd_train_novel(args):
    cfg, ckpt, banks_dir, novel, backpack = _novel_setup(args)
    return _train_novel_run(cfg, ckpt, banks_dir, novel, backpack, _out_dir(args))


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def cmd_eval(args):
    ckpt = _ckpt_file(args.ckpt)
    cfg = _resolve_config(args, ckpt)
    banks = load_banks(_require(args.banks, "banks")) if args.banks else None
    state = load_checkpoint(ckpt, banks)
    model = state.model
    task = task_list([args.task])[0] if args.task else model.novel_task
    if task is None:
        raise ConfigError("--task is required for a pretraining checkpoint")
    if task not in model.specs and task != model.novel_task:
        raise ConfigError(f"--task: checkpoint has no head for {task}")
    out = _out_dir(args)
    ds = load_data(cfg)
    specs = specs_from_config(cfg, ds.n_verbs, ds.n_nouns)
    graphs = graphs_by_task(ds, specs, args.split, (task,))[task]
    if not graphs:
        raise ConfigError(f"--split: no {task} samples in split {args.split!r}")
    pred = predict(model, task, graphs, cfg["train"]["eval_batch_size"], details=True)
    metrics = metrics_from_predictions(task, pred)
    metrics["score"] = aggregate_score(metrics)
    payload = {"task": task, "split": args.split, "metrics": metrics,
               "n_verbs": ds.n_verbs, "n_nouns": ds.n_nouns, **_json_ready(pred)}
    if model.interaction is not None:
        payload["bank_keys"] = {t: [list(k) for k in b.keys]
                                for t, b in model.interaction.banks.items()}
    with open(out / "predictions.json", "w") as fh:
        json.dump(payload, fh)
    write_manifest(out, "eval", cfg, metrics, [out / "predictions.json"],
                   {"ckpt_sha256": sha256_file(ckpt), "task": task, "split": args.split})
    return metrics


def _figure(path, labels, values, ylabel, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed salt keeps svg element ids stable across runs
    plt.rcParams["svg.hashsalt"] = "egopack"
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(labels) + 2), 3))
    ax.plot(range(len(labels)), values, marker="o") if len(labels) > 1 else ax.bar([0], values)
    ax.set_xticks(range(len(labels)), [str(v) for v in labels], rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_report(args):
    out = _out_dir(args)
    figures = out / "figures"
    figures.mkdir(exist_ok=True)
    runs, written = {}, []
    for run_dir in args.runs:
        run_dir = Path(run_dir)
        manifest = _read_manifest(run_dir)
        runs[os.fspath(run_dir)] = {"command": manifest["command"], "seed": manifest["seed"],
                                    "config_hash": manifest["config_hash"],
                                    "metrics": manifest["metrics"]}
        pred_path = run_dir / "predictions.json"
        if not pred_path.is_file():
            continue
        with open(pred_path) as fh:
            pred = json.load(fh)
        tag = f"{run_dir.name}_{pred['task'].lower()}"
        top_n = manifest["config"]["report"]["top_n"]
        if "verb_pred" in pred:
            cm = confusion_matrix(np.ravel(pred["verb_pred"]), np.ravel(pred["verb_true"]), top_n)
        elif "pred" in pred:
            cm = confusion_matrix(pred["pred"], pred["true"], top_n)
        else:
            cm = None
        if cm is not None:
            cm.to_csv(out / f"confusion_{tag}.csv")
            written.append(f"confusion_{tag}.csv")
        if "votes" in pred:
            votes = {k: np.asarray(v).reshape(len(v), -1)[:, 0] for k, v in pred["votes"].items()}
            agreement_ratio(votes).to_csv(out / f"agreement_{tag}.csv")
            written.append(f"agreement_{tag}.csv")
        for t, neigh in pred.get("neighbours", {}).items():
            hist = prototype_match_histogram(neigh, pred["bank_keys"][t], pred.get("true"),
                                             pred.get("n_verbs"))
            hist.to_csv(out / f"prototypes_{tag}_{t.lower()}.csv")
            written.append(f"prototypes_{tag}_{t.lower()}.csv")
    labels = [Path(r).name for r in runs]
    scores = [_run_score(r["metrics"]) for r in runs.values()]
    _figure(figures / "scores.svg", labels, scores, "score", "aggregate score per run")
    written.append("figures/scores.svg")
    summary = {"runs": runs, "files": written}
    with open(out / "metrics.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    return summary


def _run_score(metrics):
    """Aggregate score of a run's metrics, whatever their nesting."""
    if "score" in metrics:
        return metrics["score"]
    flat = {}
    for v in metrics.values():
        if isinstance(v, dict):
            flat.update(v)
    try:
        return aggregate_score(flat)
    except ValueError:
        return float("nan")


def cmd_sweep(args):
    out = _out_dir(args)
    values = [int(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values: empty list")
    ckpt_dir, banks_dir = args.ckpt, args.banks
    if ckpt_dir is None:
        # pretrain and build banks once, shared by every sweep point
        base = argparse.Namespace(**{**vars(args), "tasks": None, "mlp": False,
                                     "out": os.fspath(out / "mtl")})
        cfg = _resolve_config(base)
        novel = _novel_task(cfg, args)
        base.tasks = ",".join(t for t in task_list(cfg["tasks"]["mtl"]) if t != novel)
        cmd_train_mtl(base)
        ckpt_dir = base.out
        if banks_dir is None:
            banks_dir = os.fspath(out / "banks")
            cmd_build_prototypes(argparse.Namespace(**{**vars(base), "ckpt": ckpt_dir,
                                                       "config": None, "set": None,
                                                       "out": banks_dir}))
    elif banks_dir is None:
        raise ConfigError("--banks is required together with --ckpt")
    point_args = argparse.Namespace(**{**vars(args), "ckpt": ckpt_dir, "banks": banks_dir})
    cfg, ckpt, _, novel, backpack = _novel_setup(point_args)
    jobs = []
    for v in values:
        point = json.loads(json.dumps(cfg))
        point["interaction"][args.param] = v
        jobs.append((point, ckpt, banks_dir, novel, backpack, out / f"{args.param}={v}"))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_train_novel_run, *zip(*jobs)))
    else:
        results = [_train_novel_run(*job) for job in jobs]
    rows = [{"param": args.param, "value": v, "novel_task": novel, **m[novel]}
            for v, m in zip(values, results)]
    import pandas as pd

    table = pd.DataFrame(rows)
    table.to_csv(out / "summary.csv", index=False)
    with open(out / "summary.json", "w") as fh:
        json.dump(rows, fh, indent=1)
    _figure(out / f"sweep_{args.param}.svg", values, table["score"].tolist(), "score",
            f"{novel}: score vs {args.param}")
    write_manifest(out, "sweep", cfg, {"rows": rows}, [out / "summary.csv"],
                   {"param": args.param, "values": values})
    return rows


def cmd_dump_graphs(args):
    cfg = _resolve_config(args)
    task = task_list([args.task])[0]
    out = _out_dir(args)
    ds = load_data(cfg)
    specs = specs_from_config(cfg, ds.n_verbs, ds.n_nouns)
    graphs = graphs_by_task(ds, specs, args.split, (task,))[task][:args.limit]
    with open(out / f"graphs_{task.lower()}.json", "w") as fh:
        json.dump([g.to_json() for g in graphs], fh)
    write_manifest(out, "dump-graphs", cfg, {"graphs": len(graphs)})
    return {"graphs": len(graphs)}


# argument parsing

def _common(p, data=True):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config field, e.g. train.lr=1e-3 (repeatable)")
    if data:
        p.add_argument("--data", help="dataset directory (default: data.root or synthetic)")
    p.add_argument("--out", required=True, help="output directory")


def _novel_args(p):
    p.add_argument("--ckpt", help="pretraining run directory or checkpoint file")
    p.add_argument("--banks", help="prototype bank directory")
    p.add_argument("--novel-task", help="task to learn with the backpack")
    p.add_argument("--tasks-in-backpack", help="comma-separated backpack tasks")
    p.add_argument("--k", type=int, help="neighbours per interaction layer (0 disables)")
    p.add_argument("--depth", type=int, help="interaction layers")


def build_parser():
    parser = argparse.ArgumentParser(prog="egopack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset")
    _common(p, data=False)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train-mtl", help="multi-task pretraining")
    _common(p)
    p.add_argument("--tasks", help="comma-separated task subset, e.g. ar,lta")
    p.add_argument("--mlp", action="store_true", help="disable message passing (MLP baseline)")
    p.set_defaults(func=cmd_train_mtl)

    p = sub.add_parser("build-prototypes", help="compute frozen prototype banks")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_build_prototypes)

    p = sub.add_parser("train-novel", help="learn a novel task with the backpack")
    _common(p)
    _novel_args(p)
    p.set_defaults(func=cmd_train_novel)

    p = sub.add_parser("eval", help="evaluate a checkpoint and write predictions.json")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--banks")
    p.add_argument("--task")
    p.add_argument("--split", default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="collect runs into tables and figures")
    p.add_argument("--runs", nargs="+", required=True, help="run directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="train the novel task over a grid of k or depth")
    _common(p)
    _novel_args(p)
    p.add_argument("--param", choices=("k", "depth"), required=True)
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump-graphs", help="write task graphs as JSON for debugging")
    _common(p)
    p.add_argument("--task", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--limit", type=int, default=10)
    p.set_defaults(func=cmd_dump_graphs)
    return parser


def _fail(code, exc):
    # KeyError wraps its message in quotes
    msg = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
    line = {"error": type(exc).__name__, "message": msg, "exit_code": code}
    if code == EXIT_CONFIG and ":" in msg and " " not in msg.split(":", 1)[0]:
        line["field"] = msg.split(":", 1)[0]
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, exc)
    except IntegrityError as exc:
        return _fail(EXIT_INTEGRITY, exc)
    print(json.dumps(_json_ready(result), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
