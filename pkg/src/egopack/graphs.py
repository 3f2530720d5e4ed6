"""Mapping task samples onto temporal graphs.

Every task becomes a graph over temporal segments: AR uses a window of
actions, LTA appends future nodes to the observed clips, OSCC/PNR split a
clip into uniform sub-segments. Edges connect nodes whose temporal distance
is at most ``tau_hops`` positions; every edge is stored in both directions.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .validation import ConfigError, check_edges, check_matrix, check_positive_int

NODE_CLASSIFICATION = "node-classification"
FUTURE_NODE_CLASSIFICATION = "future-node-classification"
GRAPH_CLASSIFICATION = "graph-classification"
NODE_LOCALIZATION = "node-localization"


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    output_dims: tuple
    loss: str
    head_dim: Optional[int] = None
    w: int = 9
    n_obs: int = 2
    Z: int = 20
    n_subsegments: int = 4
    tau_hops: int = 1

    def __post_init__(self):
        kinds = (NODE_CLASSIFICATION, FUTURE_NODE_CLASSIFICATION,
                 GRAPH_CLASSIFICATION, NODE_LOCALIZATION)
        if self.kind not in kinds:
            raise ConfigError(f"{self.name}: unknown task kind {self.kind!r}")
        if not self.output_dims or any(d < 1 for d in self.output_dims):
            raise ConfigError(f"{self.name}: output_dims must be positive")
        if self.loss not in ("cross-entropy", "binary-cross-entropy"):
            raise ConfigError(f"{self.name}: unknown loss {self.loss!r}")


def default_task_specs(n_verbs, n_nouns, head_dim=None, **graph_params):
    """TaskSpecs for AR, LTA, OSCC and PNR with the standard graph mappings."""
    ar = graph_params.get("AR", {})
    lta = graph_params.get("LTA", {})
    oscc = graph_params.get("OSCC", {})
    pnr = graph_params.get("PNR", {})
    return {
        "AR": TaskSpec("AR", NODE_CLASSIFICATION, (n_verbs, n_nouns), "cross-entropy",
                       head_dim, **ar),
        "LTA": TaskSpec("LTA", FUTURE_NODE_CLASSIFICATION, (n_verbs, n_nouns),
                        "cross-entropy", head_dim, **lta),
        "OSCC": TaskSpec("OSCC", GRAPH_CLASSIFICATION, (2,), "cross-entropy", head_dim,
                         **{"n_subsegments": 4, **oscc}),
        "PNR": TaskSpec("PNR", NODE_LOCALIZATION, (1,), "binary-cross-entropy", head_dim,
                        **{"n_subsegments": 16, **pnr}),
    }


@dataclass(frozen=True, eq=False)
class TemporalGraph:
    node_features: np.ndarray
    node_position: np.ndarray
    edges: np.ndarray
    target_mask: np.ndarray
    is_future: Optional[np.ndarray] = None
    graph_label: Optional[int] = None
    # AR/LTA: (M, 2) verb/noun ids, -1 where unknown; PNR: (M,) one-hot keyframe
    node_labels: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = check_matrix(self.node_features, "node_features")
        M = len(x)
        pos = np.asarray(self.node_position, dtype=np.int64)
        mask = np.asarray(self.target_mask, dtype=bool)
        fut = np.zeros(M, bool) if self.is_future is None else np.asarray(self.is_future, bool)
        if pos.shape != (M,) or mask.shape != (M,) or fut.shape != (M,):
            raise ValueError("per-node arrays must have one entry per node")
        edges = check_edges(self.edges, M)
        for name, value in (("node_features", x), ("node_position", pos), ("edges", edges),
                            ("target_mask", mask), ("is_future", fut)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if self.node_labels is not None:
            labels = np.asarray(self.node_labels, dtype=np.int64)
            labels.setflags(write=False)
            object.__setattr__(self, "node_labels", labels)

    @property
    def n_nodes(self):
        return len(self.node_features)

    @property
    def node_role(self):
        return ["future" if f else "observed" for f in self.is_future]

    def to_json(self):
        out = {
            "node_features": self.node_features.tolist(),
            "node_position": self.node_position.tolist(),
            "edges": self.edges.tolist(),
            "node_role": self.node_role,
            "target_mask": self.target_mask.tolist(),
            "graph_label": self.graph_label,
            "node_labels": None if self.node_labels is None else self.node_labels.tolist(),
        }
        out.update({k: v for k, v in self.meta.items() if isinstance(v, (int, float, str))})
        return out


def chain_edges(n_nodes, tau_hops=1):
    """Symmetric edges between nodes at most ``tau_hops`` positions apart."""
    return [(i, j) for i in range(n_nodes) for j in range(n_nodes)
            if i != j and abs(i - j) <= tau_hops]


def positional_encoding(position, D):
    """Sinusoidal encoding: sin at even dims, cos at odd dims, base 10000.

    ``position`` may be a scalar or an array; the result gains a trailing
    axis of size ``D``.
    """
    if D % 2:
        raise ConfigError(f"positional encoding needs an even width, got D={D}")
    pos = np.asarray(position, dtype=np.float64)
    if np.any(pos < 0):
        raise ValueError("positions must be non-negative")
    freq = 10000.0 ** (-np.arange(0, D, 2, dtype=np.float64) / D)
    angles = pos[..., None] * freq
    out = np.empty(pos.shape + (D,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def ar_window(n_actions, target_idx, w):
    """Half-open ``[lo, hi)`` window of ``w`` actions around the target, clamped."""
    lo = target_idx - w // 2
    return max(lo, 0), min(lo + w, n_actions)


def action_features(seq, anns):
    return np.stack([seq.segment_mean(a.start, a.end) for a in anns])


def build_ar_graph(seq, anns, target_idx, w=9, tau_hops=1, features=None):
    """Window of up to ``w`` actions centred on ``anns[target_idx]``.

    Windows shrink at sequence boundaries rather than padding. Node
    features are the mean feature rows of each action; ``features`` may
    carry them precomputed for the whole sequence.
    """
    if not anns:
        raise ValueError("cannot build an AR graph from an empty annotation list")
    if not 0 <= target_idx < len(anns):
        raise IndexError(f"target_idx {target_idx} outside [0, {len(anns)})")
    check_positive_int(w, "w")
    lo, hi = ar_window(len(anns), target_idx, w)
    window = anns[lo:hi]
    feats = features[lo:hi] if features is not None else action_features(seq, window)
    M = hi - lo
    mask = np.zeros(M, bool)
    mask[target_idx - lo] = True
    target = anns[target_idx]
    return TemporalGraph(
        node_features=feats,
        node_position=np.arange(M),
        edges=chain_edges(M, tau_hops),
        target_mask=mask,
        node_labels=[(a.verb_id, a.noun_id) for a in window],
        meta={"video_id": target.video_id, "start": target.start, "end": target.end,
              "verb": target.verb_id, "noun": target.noun_id},
    )


def build_lta_graph(obs_features, Z, tau_hops=1, future_labels=None):
    """Observed clips followed by ``Z`` future nodes seeded with the observed mean.

    Future nodes are chained with their neighbours and also connected to
    every observed node.
    """
    obs = check_matrix(obs_features, "obs_features")
    check_positive_int(Z, "Z")
    n_obs = len(obs)
    M = n_obs + Z
    future = np.repeat(obs.mean(axis=0, keepdims=True), Z, axis=0)
    pairs = set(chain_edges(M, tau_hops))
    for f in range(n_obs, M):
        for o in range(n_obs):
            pairs.update({(f, o), (o, f)})
    is_future = np.arange(M) >= n_obs
    labels = None
    if future_labels is not None:
        future_labels = np.asarray(future_labels, dtype=np.int64).reshape(Z, 2)
        labels = np.vstack([np.full((n_obs, 2), -1), future_labels])
    return TemporalGraph(
        node_features=np.vstack([obs, future]),
        node_position=np.arange(M),
        edges=sorted(pairs),
        target_mask=is_future,
        is_future=is_future,
        node_labels=labels,
    )


def pnr_node_index(pnr_time, start, end, n):
    """Sub-segment holding the keyframe; boundary times go to the earlier segment."""
    seg = (end - start) / n
    return int(min(max(math.ceil((pnr_time - start) / seg) - 1, 0), n - 1))


def build_clip_graph(features, n, start=0.0, end=1.0, oscc_label=None, pnr_time=None,
                     tau_hops=1, meta=None):
    """Split a clip's feature rows into ``n`` contiguous groups, one node each.

    ``oscc_label`` becomes the graph label; ``pnr_time`` becomes a one-hot
    node label on the sub-segment containing it.
    """
    rows = check_matrix(features, "clip features")
    check_positive_int(n, "n")
    if len(rows) < n:
        raise ValueError(f"clip has {len(rows)} feature rows, fewer than {n} sub-segments")
    nodes = np.stack([g.mean(axis=0) for g in np.array_split(rows, n)])
    seg = (end - start) / n
    info = {"start": start, "end": end, "node_times": start + seg * (np.arange(n) + 0.5)}
    labels = None
    if pnr_time is not None:
        labels = np.zeros(n, np.int64)
        labels[pnr_node_index(pnr_time, start, end, n)] = 1
        info["pnr_time"] = pnr_time
    info.update(meta or {})
    return TemporalGraph(
        node_features=nodes,
        node_position=np.arange(n),
        edges=chain_edges(n, tau_hops),
        target_mask=np.ones(n, bool),
        graph_label=None if oscc_label is None else int(oscc_label),
        node_labels=labels,
        meta=info,
    )


def build_task_graphs(dataset, spec, split=None):
    """All graphs for one task of a :class:`~egopack.data.Dataset`."""
    graphs = []
    for seq, anns in dataset.samples(spec.name, split):
        if spec.name == "AR":
            feats = action_features(seq, anns)
            graphs.extend(build_ar_graph(seq, anns, t, spec.w, spec.tau_hops, feats)
                          for t in range(len(anns)))
        elif spec.name == "LTA":
            feats = action_features(seq, anns)
            for i in range(len(anns) - spec.n_obs - spec.Z + 1):
                fut = anns[i + spec.n_obs:i + spec.n_obs + spec.Z]
                graphs.append(build_lta_graph(
                    feats[i:i + spec.n_obs], spec.Z, spec.tau_hops,
                    [(a.verb_id, a.noun_id) for a in fut]))
        else:
            for ann in anns:
                rows = seq.features[seq.rows_between(ann.start, ann.end)]
                meta = {"video_id": ann.video_id}
                if ann.verb_id is not None:
                    meta["verb"] = ann.verb_id
                graphs.append(build_clip_graph(
                    rows, spec.n_subsegments, ann.start, ann.end,
                    oscc_label=ann.oscc_label if spec.name == "OSCC" else None,
                    pnr_time=ann.pnr_time if spec.name == "PNR" else None,
                    tau_hops=spec.tau_hops, meta=meta))
    return graphs


@dataclass
class GraphBatch:
    """Disjoint union of several graphs, ready for the backbone.

    ``edge_index[0]`` holds source (neighbour) nodes and ``edge_index[1]``
    the receiving nodes. ``x`` already includes the positional encoding.
    """

    x: torch.Tensor
    edge_index: torch.Tensor
    batch: torch.Tensor
    target_mask: torch.Tensor
    n_graphs: int
    graph_labels: Optional[torch.Tensor] = None
    node_labels: Optional[torch.Tensor] = None
    graphs: list = field(default_factory=list)

    @property
    def n_nodes(self):
        return self.x.shape[0]


def collate(graphs, dtype=torch.float32, add_positional=True):
    xs, edges, batch, mask = [], [], [], []
    offset = 0
    for g, graph in enumerate(graphs):
        x = graph.node_features
        if add_positional:
            x = x + positional_encoding(graph.node_position, x.shape[1])
        xs.append(x)
        if len(graph.edges):
            edges.append(graph.edges + offset)
        batch.append(np.full(graph.n_nodes, g))
        mask.append(graph.target_mask)
        offset += graph.n_nodes
    pairs = np.concatenate(edges) if edges else np.zeros((0, 2), np.int64)
    # stored pair (i, j): j is a neighbour of i
    edge_index = torch.from_numpy(np.ascontiguousarray(pairs[:, ::-1].T))
    out = GraphBatch(
        x=torch.from_numpy(np.concatenate(xs)).to(dtype),
        edge_index=edge_index,
        batch=torch.from_numpy(np.concatenate(batch)),
        target_mask=torch.from_numpy(np.concatenate(mask)),
        n_graphs=len(graphs),
        graphs=list(graphs),
    )
    if all(g.graph_label is not None for g in graphs):
        out.graph_labels = torch.tensor([g.graph_label for g in graphs])
    if all(g.node_labels is not None for g in graphs):
        out.node_labels = torch.from_numpy(np.concatenate([g.node_labels for g in graphs]))
    return out
