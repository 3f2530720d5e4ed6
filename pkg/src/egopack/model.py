"""Full network: shared backbone, per-task heads, and the novel-task stage."""

import numpy as np
import torch
from torch import nn

from .backbone import Backbone
from .heads import TaskHead, task_queries
from .interaction import CrossTaskInteraction, fuse_predictions


def derived_generator(seed, *stream):
    """Torch generator seeded from ``seed`` and a stream tag."""
    state = np.random.SeedSequence([int(seed), *stream]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


class EgoPackModel(nn.Module):
    """Backbone plus heads for the pretraining tasks.

    :meth:`add_novel_task` attaches a fresh head for a new task and,
    optionally, the cross-task interaction over frozen prototype banks.
    """

    def __init__(self, backbone_cfg, specs, seed=0):
        super().__init__()
        gen = derived_generator(seed, 0)
        self.backbone_cfg = backbone_cfg
        self.specs = dict(specs)
        self.backbone = Backbone(backbone_cfg, gen)
        self.heads = nn.ModuleDict(
            {t: TaskHead(s, backbone_cfg.D_t, gen, backbone_cfg.slope) for t, s in specs.items()})
        self.novel_spec = None
        self.novel_head = None
        self.interaction = None

    @property
    def novel_task(self):
        return None if self.novel_spec is None else self.novel_spec.name

    def add_novel_task(self, spec, seed, interaction_cfg=None, banks=None):
        gen = derived_generator(seed, 1)
        self.novel_spec = spec
        self.novel_head = TaskHead(spec, self.backbone_cfg.D_t, gen, self.backbone_cfg.slope)
        if interaction_cfg is not None and interaction_cfg.enabled:
            self.interaction = CrossTaskInteraction(interaction_cfg, banks, spec, gen)

    def spec(self, task):
        if task == self.novel_task:
            return self.novel_spec
        return self.specs[task]

    def forward(self, batch, task):
        """Logits for ``task`` on a :class:`~egopack.graphs.GraphBatch`."""
        h = self.backbone(batch.x, batch.edge_index)
        spec = self.spec(task)
        q = task_queries(h, batch, spec)
        if task != self.novel_task:
            return self.heads[task](q)
        logits = self.novel_head(q)
        if self.interaction is None:
            return logits
        feats = {t: self.heads[t].features(q) for t in self.interaction.cfg.tasks}
        return fuse_predictions(self.interaction(feats), logits)

    def task_votes(self, batch):
        """Per-source logits of the novel task: ``{"novel": ..., task: votes, "fused": ...}``."""
        h = self.backbone(batch.x, batch.edge_index)
        q = task_queries(h, batch, self.novel_spec)
        out = {"novel": self.novel_head(q)}
        if self.interaction is not None:
            feats = {t: self.heads[t].features(q) for t in self.interaction.cfg.tasks}
            out.update(self.interaction(feats))
        out["fused"] = fuse_predictions({k: v for k, v in out.items() if k != "novel"},
                                        out["novel"])
        return out
