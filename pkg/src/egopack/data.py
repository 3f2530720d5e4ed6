"""Datasets of pre-extracted video features with per-task annotations.

On disk a dataset root looks like::

    <root>/vocab.json                 {"verbs": [...], "nouns": [...],
                                       "feature_stride": s, "feature_window": w}
    <root>/features/<video_id>.f32    b"N D\\n" + N*D little-endian float32
    <root>/annotations/<task>.jsonl   one annotation object per line

Row ``i`` of a feature file covers ``[i*stride, i*stride + window)`` seconds.
"""

import json
import logging
import os
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .validation import ConfigError, SchemaError, check_matrix

logger = logging.getLogger(__name__)

TASKS = ("AR", "LTA", "OSCC", "PNR")
ACTION_TASKS = ("AR", "LTA")
CLIP_TASKS = ("OSCC", "PNR")

# Ego4D Omnivore features: 32-frame windows, stride 16, at 30 fps.
DEFAULT_STRIDE = 16 / 30
DEFAULT_WINDOW = 32 / 30


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    video_id: str
    features: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        features = check_matrix(self.features, f"features[{self.video_id}]", dtype=np.float32)
        timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1, 2)
        if len(timestamps) != len(features):
            raise SchemaError(
                f"{self.video_id}: {len(features)} feature rows but {len(timestamps)} timestamps"
            )
        if np.any(np.diff(timestamps[:, 0]) < 0):
            raise SchemaError(f"{self.video_id}: timestamps are not sorted by start")
        features.setflags(write=False)
        timestamps.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "timestamps", timestamps)

    @property
    def D(self):
        return self.features.shape[1]

    def __len__(self):
        return len(self.features)

    def rows_between(self, start, end):
        """Indices of rows whose temporal midpoint falls inside ``[start, end)``.

        Falls back to the single row closest to the interval centre so that
        every annotation resolves to at least one feature row.
        """
        mid = self.timestamps.mean(axis=1)
        idx = np.flatnonzero((mid >= start) & (mid < end))
        if idx.size == 0:
            idx = np.array([int(np.argmin(np.abs(mid - 0.5 * (start + end))))])
        return idx

    def segment_mean(self, start, end):
        return self.features[self.rows_between(start, end)].astype(np.float64).mean(axis=0)


@dataclass(frozen=True)
class ActionAnnotation:
    video_id: str
    start: float
    end: float
    verb_id: int
    noun_id: int
    split: str = "train"

    def __post_init__(self):
        if not self.end > self.start:
            raise SchemaError(f"action in {self.video_id}: end {self.end} <= start {self.start}")

    def to_json(self):
        return {"video_id": self.video_id, "start": self.start, "end": self.end,
                "verb": self.verb_id, "noun": self.noun_id, "split": self.split}

    @classmethod
    def from_json(cls, obj):
        return cls(str(obj["video_id"]), float(obj["start"]), float(obj["end"]),
                   int(obj["verb"]), int(obj["noun"]), obj.get("split", "train"))


@dataclass(frozen=True)
class ClipAnnotation:
    video_id: str
    start: float
    end: float
    oscc_label: int
    pnr_time: Optional[float] = None
    split: str = "train"
    # verb of the underlying action when known; used only for reporting
    verb_id: Optional[int] = None

    def __post_init__(self):
        if not self.end > self.start:
            raise SchemaError(f"clip in {self.video_id}: end {self.end} <= start {self.start}")
        if self.oscc_label not in (0, 1):
            raise SchemaError(f"clip in {self.video_id}: oscc label must be 0 or 1")
        if self.pnr_time is None:
            if self.oscc_label != 0:
                raise SchemaError(f"clip in {self.video_id}: positive clip without pnr_time")
        elif not self.start <= self.pnr_time <= self.end:
            raise SchemaError(f"clip in {self.video_id}: pnr_time outside [start, end]")

    def to_json(self):
        obj = {"video_id": self.video_id, "start": self.start, "end": self.end,
               "oscc": self.oscc_label, "split": self.split}
        if self.pnr_time is not None:
            obj["pnr_time"] = self.pnr_time
        if self.verb_id is not None:
            obj["verb"] = self.verb_id
        return obj

    @classmethod
    def from_json(cls, obj):
        pnr = obj.get("pnr_time")
        verb = obj.get("verb")
        return cls(str(obj["video_id"]), float(obj["start"]), float(obj["end"]),
                   int(obj["oscc"]), None if pnr is None else float(pnr),
                   obj.get("split", "train"), None if verb is None else int(verb))


@dataclass
class Dataset:
    """Feature sequences keyed by video id plus annotations keyed by task name."""

    sequences: dict
    annotations: dict
    verbs: list
    nouns: list
    feature_stride: float = DEFAULT_STRIDE
    feature_window: float = DEFAULT_WINDOW

    @property
    def n_verbs(self):
        return len(self.verbs)

    @property
    def n_nouns(self):
        return len(self.nouns)

    @property
    def D(self):
        return next(iter(self.sequences.values())).D

    def samples(self, task, split=None):
        """Group ``task`` annotations by video: ``[(FeatureSequence, [ann, ...]), ...]``."""
        grouped = defaultdict(list)
        for ann in self.annotations.get(task, []):
            if split is None or ann.split == split:
                grouped[ann.video_id].append(ann)
        out = []
        for vid in sorted(grouped):
            if vid not in self.sequences:
                raise SchemaError(f"annotation references missing video {vid!r}")
            out.append((self.sequences[vid], sorted(grouped[vid], key=lambda a: (a.start, a.end))))
        return out


def _timestamps(n, stride, window):
    starts = np.arange(n, dtype=np.float64) * stride
    return np.stack([starts, starts + window], axis=1)


def read_features(path):
    with open(path, "rb") as fh:
        header = fh.readline()
        try:
            n, d = (int(v) for v in header.decode("ascii").split())
        except (UnicodeDecodeError, ValueError):
            raise SchemaError(f"{path}: malformed header {header[:40]!r}") from None
        payload = fh.read()
    if len(payload) != n * d * 4:
        raise SchemaError(f"{path}: expected {n * d * 4} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)


def write_features(path, features):
    features = np.ascontiguousarray(features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(f"{features.shape[0]} {features.shape[1]}\n".encode("ascii"))
        fh.write(features.tobytes())


def _task_name(task):
    name = getattr(task, "name", task)
    if name not in TASKS:
        raise ConfigError(f"unknown task {name!r}; expected one of {TASKS}")
    return name


def _read_vocab(root):
    path = Path(root) / "vocab.json"
    if not path.exists():
        raise FileNotFoundError(f"missing vocabulary file {path}")
    with open(path) as fh:
        return json.load(fh)


def _read_annotations(root, name, vocab):
    path = Path(root) / "annotations" / f"{name.lower()}.jsonl"
    if not path.exists():
        return []
    parse = ActionAnnotation.from_json if name in ACTION_TASKS else ClipAnnotation.from_json
    anns = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                ann = parse(json.loads(line))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from None
            if name in ACTION_TASKS and not (
                0 <= ann.verb_id < len(vocab["verbs"]) and 0 <= ann.noun_id < len(vocab["nouns"])
            ):
                raise SchemaError(f"{path}:{lineno}: verb/noun id outside vocabulary")
            anns.append(ann)
    return anns


def _read_sequences(root, video_ids, vocab):
    stride = vocab.get("feature_stride", DEFAULT_STRIDE)
    window = vocab.get("feature_window", DEFAULT_WINDOW)
    sequences, width = {}, None
    for vid in sorted(video_ids):
        path = Path(root) / "features" / f"{vid}.f32"
        if not path.exists():
            raise SchemaError(f"missing feature file for video {vid!r}")
        feats = read_features(path)
        if width is not None and feats.shape[1] != width:
            raise SchemaError(f"video {vid!r} has width {feats.shape[1]}, expected {width}")
        width = feats.shape[1]
        sequences[vid] = FeatureSequence(vid, feats, _timestamps(len(feats), stride, window))
    return sequences


def load_dataset(root, task):
    """Load one task's annotations and resolve them against the feature files.

    Returns ``[(FeatureSequence, [annotation, ...]), ...]`` ordered by video id.
    """
    name = _task_name(task)
    vocab = _read_vocab(root)
    anns = _read_annotations(root, name, vocab)
    sequences = _read_sequences(root, {a.video_id for a in anns}, vocab)
    ds = Dataset(sequences, {name: anns}, vocab["verbs"], vocab["nouns"])
    return ds.samples(name)


def load_all(root, tasks=TASKS):
    """Load every available task under ``root`` into a single :class:`Dataset`."""
    vocab = _read_vocab(root)
    annotations = {name: _read_annotations(root, name, vocab) for name in map(_task_name, tasks)}
    ids = {a.video_id for anns in annotations.values() for a in anns}
    sequences = _read_sequences(root, ids, vocab)
    return Dataset(sequences, annotations, list(vocab["verbs"]), list(vocab["nouns"]),
                   vocab.get("feature_stride", DEFAULT_STRIDE),
                   vocab.get("feature_window", DEFAULT_WINDOW))


def save_dataset(dataset, root):
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    with open(root / "vocab.json", "w") as fh:
        json.dump({"verbs": dataset.verbs, "nouns": dataset.nouns,
                   "feature_stride": dataset.feature_stride,
                   "feature_window": dataset.feature_window}, fh, indent=1)
    for vid, seq in dataset.sequences.items():
        write_features(root / "features" / f"{vid}.f32", seq.features)
    for name, anns in dataset.annotations.items():
        with open(root / "annotations" / f"{name.lower()}.jsonl", "w") as fh:
            for ann in anns:
                fh.write(json.dumps(ann.to_json(), sort_keys=True) + "\n")
    logger.info("wrote %d videos to %s", len(dataset.sequences), os.fspath(root))


@dataclass
class SyntheticConfig:
    n_videos: int = 200
    actions_per_video: int = 24
    n_verbs: int = 12
    n_nouns: int = 20
    D: int = 64
    noise_sigma: float = 1.5
    row_noise: float = 1.0
    markov_temp: float = 0.5
    state_change_verbs: tuple = (0, 2, 4, 6, 8, 10)
    seed: int = 0
    rows_per_action: int = 16
    row_seconds: float = 0.5
    clips_per_video: int = 4
    pnr_signal: float = 1.5
    val_fraction: float = 0.2

    def validate(self):
        if self.n_verbs < 1 or self.n_nouns < 1:
            raise ConfigError("vocabulary must contain at least one verb and one noun")
        if self.noise_sigma < 0 or self.row_noise < 0:
            raise ConfigError("noise_sigma and row_noise must be >= 0")
        if self.markov_temp <= 0:
            raise ConfigError("markov_temp must be > 0")
        if any(not 0 <= v < self.n_verbs for v in self.state_change_verbs):
            raise ConfigError("state_change_verbs must lie in [0, n_verbs)")
        if self.n_videos < 1 or self.actions_per_video < 1 or self.rows_per_action < 1:
            raise ConfigError("n_videos, actions_per_video and rows_per_action must be >= 1")
        if not 0 <= self.clips_per_video <= self.actions_per_video:
            raise ConfigError("clips_per_video must lie in [0, actions_per_video]")


def generate_synthetic(cfg):
    """Sample a correlated multi-task dataset from a seeded (verb, noun) Markov chain.

    An action's feature is a fixed per-(verb, noun) mean plus Gaussian
    noise of scale ``noise_sigma``; its ``rows_per_action`` feature rows
    repeat it with independent jitter of scale ``row_noise``. Every action
    also has a keyframe drawn uniformly inside it, and the row holding the
    keyframe is shifted along a fixed direction scaled by ``pnr_signal``.
    The pulse is present whether or not the verb changes an object's state,
    so OSCC can only be solved through the verb; for state-change verbs the
    keyframe is the PNR target. OSCC/PNR clips are a random subset of the
    actions.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    V, N, D = cfg.n_verbs, cfg.n_nouns, cfg.D
    n_pairs = V * N
    means = rng.standard_normal((n_pairs, D))
    logits = rng.standard_normal((n_pairs, n_pairs)) / cfg.markov_temp
    trans = np.exp(logits - logits.max(axis=1, keepdims=True))
    trans /= trans.sum(axis=1, keepdims=True)
    change_dir = rng.standard_normal(D)
    changing = np.zeros(V, dtype=bool)
    changing[list(cfg.state_change_verbs)] = True

    width = len(str(cfg.n_videos - 1))
    video_ids = [f"vid{i:0{width}d}" for i in range(cfg.n_videos)]
    n_val = int(round(cfg.val_fraction * cfg.n_videos))
    val_ids = set(rng.permutation(video_ids)[:n_val].tolist())

    R, dt = cfg.rows_per_action, cfg.row_seconds
    sequences = {}
    actions, clips = [], []
    for vid in video_ids:
        split = "val" if vid in val_ids else "train"
        states = np.empty(cfg.actions_per_video, dtype=np.int64)
        states[0] = rng.integers(n_pairs)
        for a in range(1, cfg.actions_per_video):
            states[a] = rng.choice(n_pairs, p=trans[states[a - 1]])
        feats = means[states] + cfg.noise_sigma * rng.standard_normal((len(states), D))
        rows = np.repeat(feats, R, axis=0)
        rows += cfg.row_noise * rng.standard_normal(rows.shape)
        keyframes = {}
        for a, s in enumerate(states):
            verb, noun = divmod(int(s), N)
            start, end = a * R * dt, (a + 1) * R * dt
            actions.append(ActionAnnotation(vid, start, end, verb, noun, split))
            t = float(rng.uniform(start, end))
            row = a * R + min(int((t - start) // dt), R - 1)
            rows[row] += cfg.pnr_signal * change_dir
            if changing[verb]:
                keyframes[a] = t
        for a in sorted(rng.choice(cfg.actions_per_video, cfg.clips_per_video, replace=False)):
            verb = int(states[a]) // N
            start, end = a * R * dt, (a + 1) * R * dt
            clips.append(ClipAnnotation(vid, start, end, int(changing[verb]),
                                        keyframes.get(int(a)), split, verb))
        sequences[vid] = FeatureSequence(
            vid, rows.astype(np.float32), _timestamps(len(rows), dt, dt))

    return Dataset(
        sequences,
        {"AR": actions, "LTA": list(actions), "OSCC": clips,
         "PNR": [c for c in clips if c.oscc_label == 1]},
        [f"verb{i}" for i in range(V)],
        [f"noun{i}" for i in range(N)],
        feature_stride=dt,
        feature_window=dt,
    )
