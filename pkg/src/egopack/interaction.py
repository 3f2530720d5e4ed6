"""Cross-task interaction: task features query frozen banks and cast votes.

For every backpack task the head features of a sample are refined by
``depth`` layers of ``f <- W_r f + W max(kNN(f, P))`` against that task's
prototypes, then mapped to the novel task's output space by a vote
classifier. Votes are summed with the novel head's logits.
"""

from dataclasses import dataclass, field

from torch import nn

from .heads import head_logits
from .nn import Linear, glorot_uniform, linear
from .prototypes import cosine_topk
from .validation import ConfigError


@dataclass
class InteractionConfig:
    depth: int = 3
    k: int = 4
    tasks: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if self.depth < 1:
            raise ConfigError("interaction depth must be >= 1")
        if self.k < 0:
            raise ConfigError("k must be >= 0")

    @property
    def enabled(self):
        return self.k > 0 and bool(self.tasks)


def interaction_layer(f, P, W_r, W, k):
    """One refinement step; returns the updated features and the chosen rows."""
    idx = cosine_topk(f.detach(), P, k)
    agg = P[idx].amax(dim=1)
    return linear(f, W_r) + linear(agg, W), idx


def refine_features(features, banks, cfg, params):
    """Refine each backpack task's features independently against its bank.

    ``params[task]`` is a list of ``(W_r, W)`` pairs, one per layer.
    Returns ``(refined, neighbours)`` where ``neighbours[task]`` lists the
    selected row indices at each layer.
    """
    refined, neighbours = {}, {}
    for task, f in features.items():
        bank = banks[task]
        P = bank.tensor(f.dtype) if hasattr(bank, "tensor") else bank
        picked = []
        for W_r, W in params[task][:cfg.depth]:
            f, idx = interaction_layer(f, P, W_r, W, cfg.k)
            picked.append(idx)
        refined[task], neighbours[task] = f, picked
    return refined, neighbours


def fuse_predictions(votes, novel_logits):
    """Element-wise sum of the novel head's logits and every task's votes.

    ``votes`` maps task -> list of logit tensors matching ``novel_logits``.
    """
    fused = list(novel_logits)
    for task in sorted(votes):
        vote = votes[task]
        if len(vote) != len(fused) or any(v.shape != u.shape for v, u in zip(vote, fused)):
            raise ValueError(f"votes from {task!r} do not match the novel task's outputs")
        fused = [u + v for u, v in zip(fused, vote)]
    return fused


class TaskInteraction(nn.Module):
    def __init__(self, D_k, depth, output_dims, generator):
        super().__init__()
        self.W_r = nn.ParameterList(
            nn.Parameter(glorot_uniform(D_k, D_k, generator).float()) for _ in range(depth))
        self.W = nn.ParameterList(
            nn.Parameter(glorot_uniform(D_k, D_k, generator).float()) for _ in range(depth))
        self.votes = nn.ModuleList(Linear(D_k, d, generator) for d in output_dims)

    def layer_params(self):
        return list(zip(self.W_r, self.W))


class CrossTaskInteraction(nn.Module):
    """Interaction weights and vote classifiers for every backpack task.

    Banks are held by reference and used as constants: no gradient ever
    reaches them.
    """

    def __init__(self, cfg, banks, novel_spec, generator):
        super().__init__()
        missing = set(cfg.tasks) - set(banks)
        if missing:
            raise ConfigError(f"no prototype bank for backpack task(s) {sorted(missing)}")
        self.cfg = cfg
        self.novel_spec = novel_spec
        self.banks = {t: banks[t] for t in cfg.tasks}
        self.tasks = nn.ModuleDict({
            t: TaskInteraction(self.banks[t].D_k, cfg.depth, novel_spec.output_dims, generator)
            for t in cfg.tasks})
        self.record = False
        self.last_neighbours = None

    def forward(self, features):
        params = {t: self.tasks[t].layer_params() for t in features}
        refined, neighbours = refine_features(features, self.banks, self.cfg, params)
        if self.record:
            self.last_neighbours = neighbours
        return {t: head_logits(f, self.tasks[t].votes, self.novel_spec) for t, f in refined.items()}

    def set_banks(self, banks):
        self.banks = {t: banks[t] for t in self.cfg.tasks}
