"""Glue between a run configuration and the training functions."""

from pathlib import Path

from .backbone import BackboneConfig
from .data import TASKS, SyntheticConfig, generate_synthetic, load_all
from .graphs import build_task_graphs, default_task_specs
from .interaction import InteractionConfig
from .prototypes import build_banks
from .training import TrainConfig, evaluate, train_baseline, train_mtl, train_novel
from .validation import ConfigError


def task_list(value):
    """Parse ``"ar,lta"`` or a list into canonical task names in standard order."""
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    names = {v.strip().upper() for v in value}
    unknown = names - set(TASKS)
    if unknown:
        raise ConfigError(f"unknown task(s) {sorted(unknown)}")
    return tuple(t for t in TASKS if t in names)


def specs_from_config(cfg, n_verbs, n_nouns):
    return default_task_specs(n_verbs, n_nouns, cfg["model"]["head_dim"], **cfg["tasks"]["graph"])


def backbone_config(cfg, D, message_passing=True):
    m = cfg["model"]
    return BackboneConfig(L=m["L"], D=D, D_t=m["D_t"], slope=m["slope"], ln_eps=m["ln_eps"],
                          message_passing=message_passing)


def train_config(cfg):
    t = cfg["train"]
    return TrainConfig(epochs=dict(t["epochs"]), lr=t["lr"], warmup_epochs=t["warmup_epochs"],
                       batch_size=t["batch_size"], seed=cfg["seed"],
                       freeze_backbone=t["freeze_backbone"], eval_batch_size=t["eval_batch_size"])


def interaction_config(cfg, novel_task, backpack=None):
    i = cfg["interaction"]
    tasks = backpack if backpack is not None else i["tasks"]
    if tasks is None:
        tasks = [t for t in cfg["tasks"]["mtl"] if t != novel_task]
    return InteractionConfig(depth=i["depth"], k=i["k"], tasks=task_list(tasks))


def load_data(cfg, root=None):
    """Dataset from ``root`` / ``data.root``, or generated from ``data.synthetic``."""
    root = root or cfg["data"]["root"]
    if root is not None:
        if not Path(root).is_dir():
            raise ConfigError(f"data.root: {root} is not a directory")
        return load_all(root)
    syn = dict(cfg["data"]["synthetic"])
    syn["state_change_verbs"] = tuple(syn["state_change_verbs"])
    return generate_synthetic(SyntheticConfig(seed=cfg["seed"], **syn))


def graphs_by_task(dataset, specs, split, tasks=TASKS):
    return {t: build_task_graphs(dataset, specs[t], split) for t in tasks}


def transfer_experiment(cfg, novel="OSCC", backpack=("AR", "LTA", "PNR"), dataset=None,
                        baselines=("single-task",)):
    """Pretrain on ``backpack``, then learn ``novel`` with EgoPack and baselines.

    Returns validation metrics keyed by method name.
    """
    dataset = dataset if dataset is not None else load_data(cfg)
    specs = specs_from_config(cfg, dataset.n_verbs, dataset.n_nouns)
    train = graphs_by_task(dataset, specs, "train")
    val = graphs_by_task(dataset, specs, "val")
    tcfg = train_config(cfg)
    bcfg = backbone_config(cfg, dataset.D)
    results = {}
    mtl = train_mtl({t: specs[t] for t in backpack}, train, tcfg, bcfg)
    results["mtl"] = {t: evaluate(mtl.model, t, val[t]) for t in backpack}
    banks = build_banks(mtl.model, train["AR"], backpack)
    icfg = interaction_config(cfg, novel, backpack)
    egopack = train_novel(mtl, banks, specs[novel], train, tcfg, icfg)
    results["egopack"] = evaluate(egopack.model, novel, val[novel])
    for kind in baselines:
        if kind == "mtl-ft":
            state = train_baseline(kind, specs, train, tcfg, bcfg, novel_task=novel, mtl_state=mtl)
        else:
            state = train_baseline(kind, {novel: specs[novel]}, train, tcfg, bcfg)
        results[kind] = evaluate(state.model, novel, val[novel])
    return results
