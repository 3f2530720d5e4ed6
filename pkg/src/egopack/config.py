"""Run configuration: one JSON document with fixed sections."""

import copy
import hashlib
import json
import os

from .validation import ConfigError

DEFAULTS = {
    "seed": 0,
    "data": {
        "root": None,
        "synthetic": {
            "n_videos": 200, "actions_per_video": 24, "n_verbs": 12, "n_nouns": 20, "D": 64,
            "noise_sigma": 1.5, "row_noise": 1.0, "markov_temp": 0.5,
            "state_change_verbs": [0, 2, 4, 6, 8, 10],
            "rows_per_action": 16, "row_seconds": 0.5, "clips_per_video": 4,
            "pnr_signal": 1.5, "val_fraction": 0.2,
        },
    },
    "model": {"L": 3, "D_t": 64, "head_dim": None, "slope": 0.01, "ln_eps": 1e-5},
    "tasks": {
        "mtl": ["AR", "LTA", "OSCC", "PNR"],
        "novel": None,
        "graph": {
            "AR": {"w": 9, "tau_hops": 1},
            "LTA": {"n_obs": 2, "Z": 20, "tau_hops": 1},
            "OSCC": {"n_subsegments": 4, "tau_hops": 1},
            "PNR": {"n_subsegments": 16, "tau_hops": 1},
        },
    },
    "train": {
        "epochs": {"AR": 30, "LTA": 40, "OSCC": 10, "PNR": 10},
        "lr": 1e-4, "warmup_epochs": 5, "batch_size": 16, "freeze_backbone": None,
        "eval_batch_size": 256,
    },
    "interaction": {"depth": 3, "k": 4, "tasks": None},
    "report": {"top_n": 20},
}

# sections whose keys are free-form (task names)
_OPEN = {("tasks", "graph"), ("train", "epochs")}


def _check_leaf(value, ref, path):
    # defaults of None leave the type open
    if ref is None or value is None:
        return
    if isinstance(ref, bool) or isinstance(ref, str):
        ok = isinstance(value, type(ref))
    elif isinstance(ref, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(ref, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(ref, list):
        # task lists may also be written as "ar,lta"
        ok = isinstance(value, list) or (path == ("tasks", "mtl") and isinstance(value, str))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{'.'.join(path)}: expected {type(ref).__name__}, "
                          f"got {json.dumps(value)}")


def _check(node, ref, path):
    if not isinstance(node, dict):
        raise ConfigError(f"{'.'.join(path)}: expected an object")
    for key, value in node.items():
        here = path + (key,)
        if tuple(path) in _OPEN:
            if key not in ("AR", "LTA", "OSCC", "PNR"):
                raise ConfigError(f"{'.'.join(here)}: unknown task")
            sub = ref.get(key, {})
            if isinstance(sub, dict):
                _check(value, sub, here)
            else:
                _check_leaf(value, sub, here)
            continue
        if key not in ref:
            raise ConfigError(f"{'.'.join(here)}: unknown key")
        if isinstance(ref[key], dict):
            _check(value, ref[key], here)
        else:
            _check_leaf(value, ref[key], here)


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text):
    """``a.b=c`` -> (["a", "b"], c), with ``c`` parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def load_config(path=None, overrides=(), env=None, base=None):
    """Defaults <- config file (or ``base``) <- ``--set`` overrides <- ``EGOPACK_SEED``."""
    env = os.environ if env is None else env
    user = copy.deepcopy(base) if base is not None else {}
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    _check(user, DEFAULTS, ())
    for text in overrides:
        keys, value = parse_override(text)
        node = user
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    _check(user, DEFAULTS, ())
    cfg = _merge(DEFAULTS, user)
    if env.get("EGOPACK_SEED"):
        try:
            cfg["seed"] = int(env["EGOPACK_SEED"])
        except ValueError:
            raise ConfigError("EGOPACK_SEED: expected an integer") from None
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed: expected an integer")
    return cfg


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
