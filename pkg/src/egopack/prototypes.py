"""Frozen per-task prototype banks and cosine k-NN retrieval."""

import logging
from collections import defaultdict
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .graphs import collate
from .nn import read_archive, write_archive
from .validation import IntegrityError

logger = logging.getLogger(__name__)

BANK_FORMAT = "egopack-bank"


class PrototypeBank:
    """Rows of averaged head features, one per (verb, noun) pair seen in training.

    Once frozen, the matrix is read-only and attribute assignment raises.
    """

    def __init__(self, task_name, P, keys, counts, frozen=True):
        P = np.array(P, dtype=np.float32)
        if P.ndim != 2 or len(P) != len(keys) or len(keys) != len(counts):
            raise ValueError("bank needs one key and one count per prototype row")
        if not np.all(np.isfinite(P)):
            raise ValueError("bank rows must be finite")
        counts = np.asarray(counts, dtype=np.int64)
        if counts.size and counts.min() < 1:
            raise ValueError("every prototype needs at least one contributing sample")
        self.task_name = task_name
        self.P = P
        self.keys = [tuple(int(v) for v in k) for k in keys]
        self.counts = counts
        self.key_index = {k: i for i, k in enumerate(self.keys)}
        self._cache = {}
        self.frozen = False
        if frozen:
            self.freeze()

    def freeze(self):
        self.P.setflags(write=False)
        self.counts.setflags(write=False)
        self.frozen = True

    def __setattr__(self, name, value):
        if getattr(self, "frozen", False) and name != "_cache":
            raise AttributeError(f"prototype bank {self.task_name!r} is frozen")
        super().__setattr__(name, value)

    @property
    def n_rows(self):
        return self.P.shape[0]

    @property
    def D_k(self):
        return self.P.shape[1]

    def tensor(self, dtype=torch.float32):
        """Torch copy of the rows; never shares memory with :attr:`P`."""
        if dtype not in self._cache:
            self._cache[dtype] = torch.tensor(self.P, dtype=dtype)
        return self._cache[dtype]

    def __repr__(self):
        return f"PrototypeBank({self.task_name!r}, rows={self.n_rows}, D_k={self.D_k})"


def cosine_topk(queries, P, k):
    """Top-``k`` rows of ``P`` by cosine similarity for each query row.

    Ties go to the lower row index. Returns a (B, k) long tensor.
    """
    if k > P.shape[0]:
        raise ValueError(f"k={k} exceeds the {P.shape[0]} prototypes in the bank")
    if k < 1:
        raise ValueError("k must be >= 1")
    norms = queries.norm(dim=1)
    if (norms == 0).any():
        raise ValueError("cannot rank prototypes for a zero-norm query")
    sims = (queries / norms[:, None]) @ F.normalize(P, dim=1).T
    return torch.sort(sims, dim=1, descending=True, stable=True).indices[:, :k]


def knn_cosine(query, bank, k):
    """Indices of the ``k`` prototypes most cosine-similar to ``query``, best first."""
    P = bank.tensor(torch.float64) if isinstance(bank, PrototypeBank) else torch.as_tensor(bank)
    q = torch.as_tensor(np.asarray(query, dtype=np.float64)).to(P.dtype).reshape(1, -1)
    return cosine_topk(q, P, k)[0].numpy()


@torch.no_grad()
def build_banks(model, ar_graphs, tasks=None, batch_size=256):
    """Average every head's features of AR target nodes per (verb, noun) label.

    Each AR graph contributes the backbone output of its target node,
    projected by each task head's MLP without any pooling.
    """
    if not ar_graphs:
        raise ValueError("cannot build prototype banks from an empty training set")
    tasks = list(tasks or model.heads.keys())
    dtype = next(model.parameters()).dtype
    sums = {t: defaultdict(lambda: 0.0) for t in tasks}
    counts = defaultdict(int)
    was_training = model.training
    model.eval()
    for start in range(0, len(ar_graphs), batch_size):
        chunk = ar_graphs[start:start + batch_size]
        batch = collate(chunk, dtype)
        h = model.backbone(batch.x, batch.edge_index)[batch.target_mask]
        keys = [(g.meta["verb"], g.meta["noun"]) for g in chunk]
        for key in keys:
            counts[key] += 1
        for t in tasks:
            f = model.heads[t].features(h).double().numpy()
            for key, row in zip(keys, f):
                sums[t][key] = sums[t][key] + row
    model.train(was_training)
    order = sorted(counts)
    banks = {}
    for t in tasks:
        P = np.stack([sums[t][key] / counts[key] for key in order])
        banks[t] = PrototypeBank(t, P, order, [counts[key] for key in order])
        logger.info("built %s bank: %d prototypes of width %d", t, *P.shape)
    return banks


def save_bank(bank, path):
    write_archive(path, {"P": bank.P}, format=BANK_FORMAT, task=bank.task_name,
                  D_k=bank.D_k, rows=bank.n_rows, keys=[list(k) for k in bank.keys],
                  counts=bank.counts.tolist())


def load_bank(path):
    header, tensors = read_archive(path)
    if header.get("format") != BANK_FORMAT or "P" not in tensors:
        raise IntegrityError(f"{path}: not a prototype bank")
    P = tensors["P"]
    if P.shape != (header["rows"], header["D_k"]):
        raise IntegrityError(f"{path}: payload shape {P.shape} disagrees with header")
    return PrototypeBank(header["task"], P, header["keys"], header["counts"], frozen=True)


def save_banks(banks, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for task, bank in banks.items():
        save_bank(bank, directory / f"{task.lower()}.bank")


def load_banks(directory, tasks=None):
    directory = Path(directory)
    paths = sorted(directory.glob("*.bank"))
    if not paths:
        raise FileNotFoundError(f"no prototype banks found in {directory}")
    banks = {b.task_name: b for b in map(load_bank, paths)}
    if tasks is not None:
        missing = set(tasks) - set(banks)
        if missing:
            raise FileNotFoundError(f"no bank for task(s) {sorted(missing)} in {directory}")
        banks = {t: banks[t] for t in tasks}
    return banks
