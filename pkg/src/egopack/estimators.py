"""scikit-learn style wrappers around the two training stages.

Inputs are a :class:`~egopack.data.Dataset` (a split of it is selected
with ``split``) or, for the novel task, a list of prebuilt task graphs.
"""

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .backbone import BackboneConfig
from .data import TASKS, Dataset
from .graphs import GRAPH_CLASSIFICATION, default_task_specs, build_task_graphs
from .interaction import InteractionConfig
from .metrics import aggregate_score
from .prototypes import build_banks
from .training import TrainConfig, evaluate, predict, train_mtl, train_novel
from .validation import ConfigError


def _train_cfg(est, tasks):
    return TrainConfig(epochs={t: est.epochs for t in tasks}, lr=est.lr,
                       warmup_epochs=est.warmup_epochs, batch_size=est.batch_size, seed=est.seed)


def _as_dataset(X):
    if not isinstance(X, Dataset):
        raise TypeError(f"expected an egopack Dataset, got {type(X).__name__}")
    return X


class TemporalGraphMTL(BaseEstimator):
    """Shared temporal-graph backbone trained jointly on ``tasks``.

    After :meth:`fit`, ``banks_`` holds one frozen prototype bank per task.
    """

    def __init__(self, tasks=("AR", "LTA", "PNR"), L=3, D_t=64, epochs=5, lr=1e-3,
                 batch_size=16, warmup_epochs=1, message_passing=True, graph_params=None,
                 seed=0):
        self.tasks = tasks
        self.L = L
        self.D_t = D_t
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.warmup_epochs = warmup_epochs
        self.message_passing = message_passing
        self.graph_params = graph_params
        self.seed = seed

    def _graphs(self, X, task, split):
        return build_task_graphs(X, self.specs_[task], split)

    def fit(self, X, y=None, split="train"):
        X = _as_dataset(X)
        tasks = tuple(t for t in TASKS if t in {t.upper() for t in self.tasks})
        if not tasks:
            raise ConfigError("tasks: at least one task is required")
        self.specs_ = default_task_specs(X.n_verbs, X.n_nouns, **(self.graph_params or {}))
        data = {t: self._graphs(X, t, split) for t in tasks}
        bcfg = BackboneConfig(L=self.L, D=X.D, D_t=self.D_t,
                              message_passing=self.message_passing)
        self.state_ = train_mtl({t: self.specs_[t] for t in tasks}, data,
                                _train_cfg(self, tasks), bcfg)
        self.tasks_ = tasks
        ar = data["AR"] if "AR" in data else self._graphs(X, "AR", split)
        self.banks_ = build_banks(self.state_.model, ar)
        return self

    def predict(self, X, task="AR", split="val"):
        """AR: ``(n, 2)`` verb/noun ids; LTA: ``(n, Z, 2)``; OSCC: ``(n,)``; PNR: node index."""
        check_is_fitted(self, "state_")
        task = task.upper()
        out = predict(self.state_.model, task, self._graphs(_as_dataset(X), task, split))
        return _prediction_array(out)

    def score(self, X, y=None, split="val"):
        """Aggregate score over every pretraining task on ``split``."""
        check_is_fitted(self, "state_")
        metrics = {}
        for t in self.tasks_:
            m = evaluate(self.state_.model, t, self._graphs(X, t, split))
            m.pop("score")
            metrics.update(m)
        return aggregate_score(metrics)


def _prediction_array(out):
    if "verb_pred" in out:
        pred = np.stack([out["verb_pred"], out["noun_pred"]], axis=-1)
        return pred[:, 0] if pred.shape[1] == 1 else pred
    if "pred" in out:
        return out["pred"]
    return out["node_logits"].argmax(axis=1)


class EgoPackClassifier(BaseEstimator, ClassifierMixin):
    """Graph-level novel task learned on top of a fitted :class:`TemporalGraphMTL`.

    ``k=0`` turns the backpack off, which is plain finetuning of the
    pretrained model with a new head.
    """

    def __init__(self, pretrained=None, novel_task="OSCC", k=4, depth=3, epochs=10, lr=1e-3,
                 batch_size=16, warmup_epochs=1, seed=0):
        self.pretrained = pretrained
        self.novel_task = novel_task
        self.k = k
        self.depth = depth
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.warmup_epochs = warmup_epochs
        self.seed = seed

    def _graphs(self, X, split):
        if isinstance(X, Dataset):
            return build_task_graphs(X, self.spec_, split)
        return list(X)

    def fit(self, X, y=None, split="train"):
        if self.pretrained is None:
            raise ConfigError("pretrained: a fitted TemporalGraphMTL is required")
        check_is_fitted(self.pretrained, "state_")
        task = self.novel_task.upper()
        self.spec_ = self.pretrained.specs_[task]
        if self.spec_.kind != GRAPH_CLASSIFICATION:
            raise ConfigError(f"novel_task: {task} is not a graph-level classification task")
        backpack = tuple(t for t in self.pretrained.tasks_ if t != task)
        icfg = InteractionConfig(depth=self.depth, k=self.k, tasks=backpack)
        graphs = self._graphs(X, split)
        if y is not None:
            if len(y) != len(graphs):
                raise ValueError(f"{len(y)} labels for {len(graphs)} graphs")
            graphs = [dataclasses.replace(g, graph_label=int(v)) for g, v in zip(graphs, y)]
        self.state_ = train_novel(self.pretrained.state_, self.pretrained.banks_, self.spec_,
                                  {task: graphs}, _train_cfg(self, (task,)), icfg)
        self.classes_ = np.arange(self.spec_.output_dims[0])
        return self

    def predict(self, X, split="val"):
        check_is_fitted(self, "state_")
        return predict(self.state_.model, self.spec_.name, self._graphs(X, split))["pred"]

    def score(self, X, y=None, split="val"):
        """Accuracy; without ``y`` the labels stored in the graphs are used."""
        check_is_fitted(self, "state_")
        graphs = self._graphs(X, split)
        if y is None:
            y = np.array([g.graph_label for g in graphs])
        return super().score(graphs, y)
