"""Input validation helpers shared by the data, graph and model layers."""

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value."""


class SchemaError(ValueError):
    """On-disk data does not match the expected layout."""


class IntegrityError(ValueError):
    """A binary archive failed its length or checksum verification."""


def check_matrix(X, name="X", ndim=2, dtype=np.float64, allow_empty=False):
    """Return ``X`` as a finite ndarray with ``ndim`` dimensions."""
    X = np.asarray(X, dtype=dtype)
    if X.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {X.shape}")
    if not allow_empty and X.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_edges(edges, n_nodes):
    """Validate an edge list against ``n_nodes`` and return it as an (E, 2) int array."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n_nodes):
        raise ValueError(f"edge references a node outside [0, {n_nodes})")
    if np.any(edges[:, 0] == edges[:, 1]):
        raise ValueError("self-loops are not allowed")
    pairs = set(map(tuple, edges.tolist()))
    if any((j, i) not in pairs for i, j in pairs):
        raise ValueError("edge list is not symmetric")
    return edges


def check_positive_int(value, name, minimum=1):
    if int(value) != value or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)

