"""Task metrics and the aggregate score."""

import numpy as np
import pandas as pd

# components of the aggregate score and whether lower is better
SCORE_COMPONENTS = {
    "ar_verb_top1": False,
    "ar_noun_top1": False,
    "oscc_acc": False,
    "lta_verb_ed": True,
    "lta_noun_ed": True,
    "pnr_loc_err": True,
}
PNR_CLIP = 1.0


def top1_accuracy(preds, labels):
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.shape} predictions for {labels.shape} labels")
    if preds.size == 0:
        raise ValueError("top1_accuracy of an empty set")
    return float(np.mean(preds == labels))


def levenshtein(a, b):
    """Minimum number of insertions, deletions and substitutions turning ``a`` into ``b``."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def edit_distance(pred_seq, gt_seq):
    """Levenshtein distance normalised by the ground-truth length ``Z``."""
    pred_seq, gt_seq = list(pred_seq), list(gt_seq)
    if not gt_seq:
        raise ValueError("edit_distance needs a non-empty ground-truth sequence")
    return levenshtein(pred_seq, gt_seq) / len(gt_seq)


def pnr_loc_error(node_logits, node_times, gt_time):
    """Seconds between the highest-scoring node's centre and the keyframe.

    ``np.argmax`` returns the first maximum, so ties resolve to the earliest node.
    """
    node_logits = np.asarray(node_logits, dtype=np.float64)
    node_times = np.asarray(node_times, dtype=np.float64)
    if node_logits.shape != node_times.shape or node_logits.size == 0:
        raise ValueError("need one centre time per node logit")
    return float(abs(node_times[int(np.argmax(node_logits))] - gt_time))


def aggregate_score(metrics):
    """Mean of the available task metrics on a higher-is-better scale.

    Edit distances and the PNR error enter as ``1 - value``, the latter
    after clipping at 1 second.
    """
    values = []
    for key, lower_better in SCORE_COMPONENTS.items():
        if metrics.get(key) is None:
            continue
        v = float(metrics[key])
        if key == "pnr_loc_err":
            v = min(v, PNR_CLIP)
        values.append(1.0 - v if lower_better else v)
    if not values:
        raise ValueError("no score components present")
    return float(np.mean(values))


def agreement_ratio(task_preds):
    """Pairwise fraction of samples on which two prediction sources agree."""
    names = list(task_preds)
    preds = [np.asarray(task_preds[n]) for n in names]
    if len({p.shape for p in preds}) > 1:
        raise ValueError("all prediction sources must cover the same samples")
    mat = np.array([[np.mean(a == b) if a.size else np.nan for b in preds] for a in preds])
    return pd.DataFrame(mat, index=names, columns=names)


def confusion_matrix(preds, labels, top_n=20):
    """Confusion counts over the ``top_n`` most frequent true classes plus ``rest``.

    Rows are true classes, columns predictions; everything outside the
    selected classes is folded into the ``rest`` row/column. Frequency ties
    keep the lower class id.
    """
    preds, labels = np.asarray(preds), np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    top = classes[np.argsort(-counts, kind="stable")[:top_n]]
    pos = {int(c): i for i, c in enumerate(top)}
    rest = len(top)
    mat = np.zeros((rest + 1, rest + 1), dtype=np.int64)
    for p, t in zip(preds, labels):
        mat[pos.get(int(t), rest), pos.get(int(p), rest)] += 1
    names = [str(int(c)) for c in top] + ["rest"]
    return pd.DataFrame(mat, index=names, columns=names)


def prototype_match_histogram(neighbours, keys, sample_labels=None, n_verbs=None):
    """Count how often each verb's prototypes were selected.

    ``neighbours`` is one entry per sample, each a list over interaction
    layers of selected row indices. ``keys`` maps bank rows to
    ``(verb, noun)``. Columns split the counts by ``sample_labels``.
    """
    verbs = np.array([k[0] for k in keys])
    n_verbs = int(verbs.max()) + 1 if n_verbs is None else n_verbs
    if sample_labels is None:
        sample_labels = ["all"] * len(neighbours)
    columns = sorted(set(sample_labels), key=str)
    counts = pd.DataFrame(0, index=pd.RangeIndex(n_verbs, name="verb"), columns=columns)
    for per_layer, label in zip(neighbours, sample_labels):
        for idx in per_layer:
            for v in verbs[np.asarray(idx).reshape(-1)]:
                counts.loc[v, label] += 1
    return counts
