"""Task-specific projection heads, pooling and losses."""

import torch
from torch import nn

from .graphs import GRAPH_CLASSIFICATION, NODE_LOCALIZATION
from .nn import LEAKY_SLOPE, Linear, binary_cross_entropy, leaky_relu, softmax_cross_entropy


class TaskHead(nn.Module):
    """Two-layer MLP producing task features, then one linear classifier per output."""

    def __init__(self, spec, D_t, generator, slope=LEAKY_SLOPE):
        super().__init__()
        D_k = spec.head_dim or D_t
        self.spec = spec
        self.slope = slope
        self.mlp1 = Linear(D_t, D_k, generator)
        self.mlp2 = Linear(D_k, D_k, generator)
        self.classifiers = nn.ModuleList(Linear(D_k, d, generator) for d in spec.output_dims)

    @property
    def D_k(self):
        return self.mlp2.weight.shape[0]

    def features(self, h):
        return self.mlp2(leaky_relu(self.mlp1(h), self.slope))

    def logits(self, f):
        return head_logits(f, self.classifiers, self.spec)

    def forward(self, h):
        return self.logits(self.features(h))


def head_logits(f, classifiers, spec):
    """One logit tensor per output; PNR's single output is squeezed to one scalar per node."""
    out = [clf(f) for clf in classifiers]
    if spec.kind == NODE_LOCALIZATION:
        out = [o.squeeze(-1) for o in out]
    return out


def graph_max_pool(node_feats, mask=None, batch=None, n_graphs=None):
    """Coordinate-wise max over the selected nodes of each graph.

    Without ``batch`` all nodes belong to one graph and a single vector is
    returned; otherwise the result has one row per graph.
    """
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        node_feats = node_feats[mask]
        batch = None if batch is None else batch[mask]
    if node_feats.shape[0] == 0:
        raise ValueError("graph_max_pool: no nodes selected")
    if batch is None:
        return node_feats.max(dim=0).values
    n_graphs = int(batch.max()) + 1 if n_graphs is None else n_graphs
    if torch.bincount(batch, minlength=n_graphs).min() == 0:
        raise ValueError("graph_max_pool: a graph has no selected nodes")
    index = batch[:, None].expand_as(node_feats)
    out = torch.zeros(n_graphs, node_feats.shape[1], dtype=node_feats.dtype)
    return out.scatter_reduce(0, index, node_feats, reduce="amax", include_self=False)


def task_queries(h, batch, spec):
    """Rows of backbone output that a task head consumes.

    Graph tasks pool each graph first; PNR uses every node; AR/LTA use the
    target nodes.
    """
    if spec.kind == GRAPH_CLASSIFICATION:
        return graph_max_pool(h, batch=batch.batch, n_graphs=batch.n_graphs)
    if spec.kind == NODE_LOCALIZATION:
        return h
    return h[batch.target_mask]


def task_loss(logits, batch, spec):
    """AR/LTA: mean of verb and noun CE on targets; OSCC: CE; PNR: per-node BCE."""
    if spec.kind == GRAPH_CLASSIFICATION:
        return softmax_cross_entropy(logits[0], batch.graph_labels)
    if spec.kind == NODE_LOCALIZATION:
        return binary_cross_entropy(logits[0], batch.node_labels)
    labels = batch.node_labels[batch.target_mask]
    losses = [softmax_cross_entropy(lg, labels[:, i]) for i, lg in enumerate(logits)]
    return torch.stack(losses).mean()
