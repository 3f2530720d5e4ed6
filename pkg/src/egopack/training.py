"""Two-stage training: multi-task pretraining, then a novel task with the backpack.

Batches are drawn round-robin: every optimisation step takes one batch
from each task and averages their losses. An epoch lasts as many steps as
the largest task needs; smaller tasks cycle through fresh permutations.
The batch order depends only on ``(seed, epoch, task)``, so a run resumed
from a checkpoint replays exactly the batches of an uninterrupted run.
"""

import copy
import json
import logging
import math
import zlib
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .backbone import BackboneConfig
from .data import TASKS
from .graphs import GRAPH_CLASSIFICATION, NODE_LOCALIZATION, TaskSpec, collate
from .heads import task_loss
from .interaction import InteractionConfig
from .metrics import aggregate_score, edit_distance, pnr_loc_error, top1_accuracy
from .model import EgoPackModel
from .nn import Adam, read_archive, warmup_factor, write_archive
from .validation import ConfigError, IntegrityError

logger = logging.getLogger(__name__)

FULL_SCALE_EPOCHS = {"AR": 30, "LTA": 40, "OSCC": 10, "PNR": 10}
CHECKPOINT_FORMAT = "egopack-checkpoint"


@dataclass
class TrainConfig:
    epochs: dict = field(default_factory=lambda: dict(FULL_SCALE_EPOCHS))
    lr: float = 1e-4
    warmup_epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    # None: freeze only when the novel task is LTA
    freeze_backbone: Optional[bool] = None
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.batch_size < 1 or any(e < 1 for e in self.epochs.values()):
            raise ConfigError("epochs and batch_size must be positive")

    def epochs_for(self, tasks):
        return max(self.epochs[t] for t in tasks)


@dataclass(eq=False)
class ModelState:
    model: EgoPackModel
    optimizer: Optional[Adam]
    seed: int
    stage: str
    tasks: tuple
    train_config: TrainConfig
    epoch: int = 0
    history: list = field(default_factory=list)
    interaction_config: Optional[InteractionConfig] = None
    bank_crc32: dict = field(default_factory=dict)


def bank_checksum(bank):
    return zlib.crc32(np.ascontiguousarray(bank.P).tobytes())


def _task_batches(n_items, batch_size, n_steps, seed, epoch, task):
    rng = np.random.default_rng([seed, epoch, TASKS.index(task)])
    out = []
    while len(out) < n_steps:
        perm = rng.permutation(n_items)
        out.extend(perm[i:i + batch_size] for i in range(0, n_items, batch_size))
    return out[:n_steps]


def _trainable(model):
    return {name: p for name, p in model.named_parameters() if p.requires_grad}


def _fit(state, data, total_epochs, val_data=None, log_file=None):
    """Run epochs ``state.epoch .. total_epochs`` over the tasks in ``state.tasks``."""
    model, opt, cfg = state.model, state.optimizer, state.train_config
    tasks = state.tasks
    dtype = next(model.parameters()).dtype
    for t in tasks:
        if not data.get(t):
            raise ValueError(f"no training samples for task {t}")
    for epoch in range(state.epoch, total_epochs):
        model.train()
        scale = warmup_factor(epoch, cfg.warmup_epochs)
        n_steps = max(math.ceil(len(data[t]) / cfg.batch_size) for t in tasks)
        orders = {t: _task_batches(len(data[t]), cfg.batch_size, n_steps, state.seed, epoch, t)
                  for t in tasks}
        sums, total_sum = defaultdict(float), 0.0
        for step in range(n_steps):
            losses = []
            for t in tasks:
                batch = collate([data[t][i] for i in orders[t][step]], dtype)
                loss = task_loss(model(batch, t), batch, model.spec(t))
                losses.append(loss)
                sums[t] += loss.item()
            total = torch.stack(losses).mean()
            opt.zero_grad()
            total.backward()
            opt.step(scale)
            total_sum += total.item()
        state.epoch = epoch + 1
        record = {"stage": state.stage, "epoch": state.epoch, "lr_scale": scale,
                  "loss": total_sum / n_steps,
                  "task_loss": {t: sums[t] / n_steps for t in tasks}}
        if val_data:
            record["val"] = {t: evaluate(model, t, val_data[t], cfg.eval_batch_size)
                             for t in tasks if val_data.get(t)}
        state.history.append(record)
        logger.info("%s epoch %d loss %.4f", state.stage, state.epoch, record["loss"])
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()
    return state


def train_mtl(specs, data, cfg, backbone_cfg, val_data=None, state=None, log_file=None):
    """Jointly train a shared backbone and one head per task in ``specs``.

    Pass a previous ``state`` to resume; training continues until the
    configured epoch count for the task set.
    """
    tasks = tuple(t for t in TASKS if t in specs)
    if not tasks:
        raise ConfigError("multi-task training needs at least one task")
    if state is None:
        torch.manual_seed(cfg.seed)
        model = EgoPackModel(backbone_cfg, {t: specs[t] for t in tasks}, cfg.seed)
        state = ModelState(model, Adam(_trainable(model), lr=cfg.lr), cfg.seed, "mtl", tasks, cfg)
    return _fit(state, data, cfg.epochs_for(tasks), val_data, log_file)


def _novel_state(mtl_state, novel_spec, cfg, interaction_cfg, banks):
    model = copy.deepcopy(mtl_state.model)
    model.add_novel_task(novel_spec, cfg.seed, interaction_cfg, banks)
    freeze = cfg.freeze_backbone
    if freeze is None:
        freeze = novel_spec.name == "LTA"
    for p in model.backbone.parameters():
        p.requires_grad_(not freeze)
    crcs = {}
    if model.interaction is not None:
        crcs = {t: bank_checksum(banks[t]) for t in interaction_cfg.tasks}
    return ModelState(model, Adam(_trainable(model), lr=cfg.lr), cfg.seed, "novel",
                      (novel_spec.name,), cfg, interaction_config=interaction_cfg,
                      bank_crc32=crcs)


def train_novel(mtl_state, banks, novel_spec, data, cfg, interaction_cfg,
                val_data=None, state=None, log_file=None):
    """Learn ``novel_spec`` from its own labels plus the frozen backpack.

    Trains the backbone (frozen for LTA unless ``cfg.freeze_backbone`` says
    otherwise), the backpack heads' MLPs, the interaction weights, the vote
    classifiers and the new head. ``k == 0`` disables the interaction.
    """
    if novel_spec.name in interaction_cfg.tasks:
        raise ConfigError(f"novel task {novel_spec.name} cannot also be in the backpack")
    missing = [t for t in interaction_cfg.tasks if t not in mtl_state.model.heads]
    if missing:
        raise ConfigError(f"backpack task(s) {missing} have no pretrained head")
    if interaction_cfg.enabled:
        for t in interaction_cfg.tasks:
            if t not in banks:
                raise ConfigError(f"no prototype bank for backpack task {t}")
            if not banks[t].frozen:
                raise ConfigError(f"prototype bank for {t} is not frozen")
    if state is None:
        state = _novel_state(mtl_state, novel_spec, cfg, interaction_cfg, banks)
    return _fit(state, data, cfg.epochs[novel_spec.name], val_data, log_file)


def train_baseline(kind, specs, data, cfg, backbone_cfg, novel_task=None, mtl_state=None,
                   val_data=None, log_file=None):
    """Baselines: ``mlp`` (no message passing), ``single-task``, ``mtl-ft``.

    ``mtl-ft`` adds a fresh head for ``novel_task`` on top of ``mtl_state``
    and finetunes without any prototype access.
    """
    if kind == "mlp":
        mlp_cfg = BackboneConfig(**{**asdict(backbone_cfg), "message_passing": False})
        return train_mtl(specs, data, cfg, mlp_cfg, val_data, log_file=log_file)
    if kind == "single-task":
        if len(specs) != 1:
            raise ConfigError("single-task baseline takes exactly one task")
        return train_mtl(specs, data, cfg, backbone_cfg, val_data, log_file=log_file)
    if kind == "mtl-ft":
        if mtl_state is None or novel_task is None:
            raise ConfigError("mtl-ft needs a pretrained state and a novel task")
        state = _novel_state(mtl_state, specs[novel_task], cfg, None, None)
        return _fit(state, data, cfg.epochs[novel_task], val_data, log_file)
    raise ConfigError(f"unknown baseline kind {kind!r}")


@torch.no_grad()
def predict(model, task, graphs, batch_size=256, details=False):
    """Predictions and ground truth for ``task`` over ``graphs``.

    With ``details`` on the novel task, also returns the argmax of every
    vote source and the prototypes each sample selected.
    """
    was_training = model.training
    model.eval()
    spec = model.spec(task)
    dtype = next(model.parameters()).dtype
    record = details and task == model.novel_task
    if record and model.interaction is not None:
        model.interaction.record = True
    outs = defaultdict(list)
    votes = defaultdict(list)
    neighbours = defaultdict(list)
    for start in range(0, len(graphs), batch_size):
        chunk = graphs[start:start + batch_size]
        batch = collate(chunk, dtype)
        if record:
            sources = model.task_votes(batch)
            logits = sources["fused"]
            for name, lg in sources.items():
                votes[name].append(_argmax(lg, spec, len(chunk)))
            if model.interaction is not None:
                for t, per_layer in model.interaction.last_neighbours.items():
                    stacked = torch.stack(per_layer, dim=1)  # (B, depth, k)
                    neighbours[t].extend(stacked.numpy().tolist())
        else:
            logits = model(batch, task)
        _collect(outs, logits, batch, chunk, spec)
    if model.interaction is not None:
        model.interaction.record = False
    model.train(was_training)
    result = {k: np.concatenate(v) if v and isinstance(v[0], np.ndarray) else v
              for k, v in outs.items()}
    if record:
        result["votes"] = {k: np.concatenate(v) for k, v in votes.items()}
        result["neighbours"] = dict(neighbours)
    return result


def _argmax(logits, spec, n_graphs):
    if spec.kind == NODE_LOCALIZATION:
        return logits[0].reshape(n_graphs, -1).argmax(dim=1).numpy()
    if len(logits) == 1:
        return logits[0].argmax(dim=1).numpy()
    # verb and noun predictions stacked along the last axis
    return torch.stack([lg.argmax(dim=1) for lg in logits], dim=-1).numpy()


def _collect(outs, logits, batch, chunk, spec):
    if spec.kind == GRAPH_CLASSIFICATION:
        outs["pred"].append(logits[0].argmax(dim=1).numpy())
        outs["true"].append(batch.graph_labels.numpy())
        outs["verb"].append(np.array([g.meta.get("verb", -1) for g in chunk]))
    elif spec.kind == NODE_LOCALIZATION:
        node_logits = logits[0].reshape(len(chunk), -1).numpy()
        outs["node_logits"].append(node_logits)
        outs["loc_err"].append(np.array([
            pnr_loc_error(lg, g.meta["node_times"], g.meta["pnr_time"])
            for lg, g in zip(node_logits, chunk)]))
    else:
        labels = batch.node_labels[batch.target_mask].numpy()
        n = len(chunk)
        outs["verb_pred"].append(logits[0].argmax(dim=1).numpy().reshape(n, -1))
        outs["noun_pred"].append(logits[1].argmax(dim=1).numpy().reshape(n, -1))
        outs["verb_true"].append(labels[:, 0].reshape(n, -1))
        outs["noun_true"].append(labels[:, 1].reshape(n, -1))


def metrics_from_predictions(task, pred):
    if task == "AR":
        return {"ar_verb_top1": top1_accuracy(pred["verb_pred"], pred["verb_true"]),
                "ar_noun_top1": top1_accuracy(pred["noun_pred"], pred["noun_true"])}
    if task == "LTA":
        return {
            "lta_verb_ed": float(np.mean([edit_distance(p, t) for p, t in
                                          zip(pred["verb_pred"], pred["verb_true"])])),
            "lta_noun_ed": float(np.mean([edit_distance(p, t) for p, t in
                                          zip(pred["noun_pred"], pred["noun_true"])])),
        }
    if task == "OSCC":
        return {"oscc_acc": top1_accuracy(pred["pred"], pred["true"])}
    if task == "PNR":
        return {"pnr_loc_err": float(np.mean(pred["loc_err"]))}
    raise ConfigError(f"unknown task {task!r}")


def evaluate(model, task, graphs, batch_size=256):
    if not graphs:
        raise ValueError(f"no samples to evaluate {task} on")
    metrics = metrics_from_predictions(task, predict(model, task, graphs, batch_size))
    metrics["score"] = aggregate_score(metrics)
    return metrics


def _archive_name(key, novel_task):
    head, _, rest = key.partition(".")
    if head == "heads":
        task, _, rest = rest.partition(".")
        return f"heads/{task}/{rest}"
    if head == "interaction":
        _, _, rest = rest.partition(".")  # drop the ModuleDict attribute
        task, _, rest = rest.partition(".")
        return f"interaction/{task}/{rest}"
    if head == "novel_head":
        return f"novel/{novel_task}/{rest}"
    return f"{head}/{rest}"


def save_checkpoint(state, path):
    model = state.model
    names = {k: _archive_name(k, model.novel_task) for k in model.state_dict()}
    tensors = {names[k]: v for k, v in model.state_dict().items()}
    adam = None
    if state.optimizer is not None:
        sd = state.optimizer.state_dict()
        adam = {k: sd[k] for k in ("t", "lr", "betas", "eps")}
        adam["params"] = [names[k] for k in sd["m"]]
        for k in sd["m"]:
            tensors[f"adam/m/{names[k]}"] = sd["m"][k]
            tensors[f"adam/v/{names[k]}"] = sd["v"][k]
    write_archive(
        path, tensors,
        format=CHECKPOINT_FORMAT,
        backbone=asdict(model.backbone_cfg),
        specs={t: asdict(s) for t, s in model.specs.items()},
        novel_spec=None if model.novel_spec is None else asdict(model.novel_spec),
        interaction=None if state.interaction_config is None else asdict(state.interaction_config),
        frozen_backbone=not any(p.requires_grad for p in model.backbone.parameters()),
        bank_crc32=state.bank_crc32,
        seed=state.seed, stage=state.stage, tasks=list(state.tasks), epoch=state.epoch,
        history=state.history, train_config=asdict(state.train_config), adam=adam,
    )


def _spec(d):
    return TaskSpec(**{**d, "output_dims": tuple(d["output_dims"])})


def load_checkpoint(path, banks=None):
    """Rebuild a :class:`ModelState`; novel-stage models with interaction need ``banks``."""
    header, tensors = read_archive(path)
    if header.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError(f"{path}: not a model checkpoint")
    backbone_cfg = BackboneConfig(**header["backbone"])
    specs = {t: _spec(d) for t, d in header["specs"].items()}
    seed = header["seed"]
    cfg = TrainConfig(**header["train_config"])
    model = EgoPackModel(backbone_cfg, specs, seed)
    icfg = None
    if header["interaction"] is not None:
        icfg = InteractionConfig(**header["interaction"])
    if header["novel_spec"] is not None:
        if icfg is not None and icfg.enabled:
            if banks is None:
                raise ConfigError(f"{path}: this checkpoint needs its prototype banks")
            for t, crc in header["bank_crc32"].items():
                if t not in banks or bank_checksum(banks[t]) != crc:
                    raise IntegrityError(f"prototype bank for {t} differs from the one trained with")
        model.add_novel_task(_spec(header["novel_spec"]), seed, icfg, banks)
    names = {k: _archive_name(k, model.novel_task) for k in model.state_dict()}
    missing = [n for n in names.values() if n not in tensors]
    if missing:
        raise IntegrityError(f"{path}: missing tensors {missing[:3]}")
    model.load_state_dict({k: torch.from_numpy(tensors[n]) for k, n in names.items()})
    for p in model.backbone.parameters():
        p.requires_grad_(not header["frozen_backbone"])
    optimizer = None
    if header["adam"] is not None:
        optimizer = Adam(_trainable(model))
        by_archive = {v: k for k, v in names.items()}
        adam = header["adam"]
        optimizer.load_state_dict({
            "t": adam["t"], "lr": adam["lr"], "betas": adam["betas"], "eps": adam["eps"],
            "m": {by_archive[n]: tensors[f"adam/m/{n}"] for n in adam["params"]},
            "v": {by_archive[n]: tensors[f"adam/v/{n}"] for n in adam["params"]},
        })
    return ModelState(model, optimizer, seed, header["stage"], tuple(header["tasks"]), cfg,
                      header["epoch"], header["history"], icfg, header["bank_crc32"])
