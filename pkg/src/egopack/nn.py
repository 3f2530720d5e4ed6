"""Differentiable primitives, gradient checking, Adam and the tensor archive format.

The primitives are thin, validating wrappers over torch; gradients come
from autograd and every trainable block is verified against central finite
differences with :func:`grad_check`.
"""

import json
import math
import struct
import zlib
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .validation import IntegrityError

LEAKY_SLOPE = 0.01
LN_EPS = 1e-5


def _finite(name, *tensors):
    for t in tensors:
        if t is not None and not torch.isfinite(t).all():
            raise FloatingPointError(f"{name}: non-finite input")


def linear(x, W, b=None):
    """``y = x W^T + b`` for row-vector inputs ``x`` of shape (..., in)."""
    if x.shape[-1] != W.shape[1] or (b is not None and b.shape != (W.shape[0],)):
        raise ValueError(
            f"linear: x {tuple(x.shape)} incompatible with W {tuple(W.shape)}"
            + ("" if b is None else f" / b {tuple(b.shape)}")
        )
    _finite("linear", x)
    return F.linear(x, W, b)


def layer_norm(x, gain, bias, eps=LN_EPS):
    if gain.shape != (x.shape[-1],) or bias.shape != gain.shape:
        raise ValueError(f"layer_norm: gain/bias must have shape ({x.shape[-1]},)")
    _finite("layer_norm", x)
    return F.layer_norm(x, (x.shape[-1],), gain, bias, eps)


def leaky_relu(x, slope=LEAKY_SLOPE):
    return F.leaky_relu(x, slope)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    logits = logits.reshape(-1, logits.shape[-1])
    labels = torch.as_tensor(labels).reshape(-1)
    if len(labels) != len(logits):
        raise ValueError(f"{len(logits)} logit rows for {len(labels)} labels")
    _finite("softmax_cross_entropy", logits)
    return F.cross_entropy(logits, labels)


def binary_cross_entropy(logits, labels):
    """Mean binary cross-entropy with logits against 0/1 ``labels``."""
    labels = torch.as_tensor(labels, dtype=logits.dtype)
    if labels.shape != logits.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)}")
    _finite("binary_cross_entropy", logits)
    return F.binary_cross_entropy_with_logits(logits, labels)


def glorot_uniform(fan_out, fan_in, generator):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(fan_out, fan_in, generator=generator, dtype=torch.float64) * 2 - 1) * bound


class Linear(nn.Module):
    """Affine map with Glorot-uniform weights and zero bias."""

    def __init__(self, in_dim, out_dim, generator, bias=True):
        super().__init__()
        self.weight = nn.Parameter(glorot_uniform(out_dim, in_dim, generator).float())
        self.bias = nn.Parameter(torch.zeros(out_dim)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim, eps=LN_EPS):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


def grad_check(forward, params, inputs=(), eps=1e-5, grads=None):
    """Largest relative error between analytic and central-difference gradients.

    ``forward(*inputs)`` must return a scalar tensor built from ``params``.
    The error per coordinate is ``|g_a - g_fd| / max(1, |g_a|, |g_fd|)``.
    ``grads`` overrides the analytic gradients (used to test the checker).
    """
    params = list(params)
    with torch.no_grad():
        if float(forward(*inputs)) != float(forward(*inputs)):
            raise RuntimeError("grad_check: forward is not deterministic")
    if not params:
        return 0.0
    if grads is None:
        loss = forward(*inputs)
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.detach().view(-1)
            g = g.detach().reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(forward(*inputs))
                flat[i] = orig - eps
                down = float(forward(*inputs))
                flat[i] = orig
                fd = (up - down) / (2 * eps)
                ga = float(g[i])
                worst = max(worst, abs(ga - fd) / max(1.0, abs(ga), abs(fd)))
    return worst


def warmup_factor(epoch, warmup_epochs=5):
    """Linear warm-up multiplier for a zero-based ``epoch``."""
    if warmup_epochs <= 0:
        return 1.0
    return min(1.0, (epoch + 1) / warmup_epochs)


class Adam:
    """Adam with bias correction over a name -> parameter mapping.

    Parameters whose ``grad`` is ``None`` are skipped entirely, so frozen
    or unused tensors are never touched.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @torch.no_grad()
    def step(self, lr_scale=1.0):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        lr = self.lr * lr_scale
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            m.mul_(b1).add_(p.grad, alpha=1 - b1)
            v.mul_(b2).addcmul_(p.grad, p.grad, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + self.eps))

    def state_dict(self):
        return {"t": self.t, "lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        self.betas = tuple(state["betas"])
        self.eps = float(state["eps"])
        for k in self.params:
            self.m[k].copy_(torch.as_tensor(state["m"][k]))
            self.v[k].copy_(torch.as_tensor(state["v"][k]))


# Archive layout: uint64 LE header length, UTF-8 JSON header, payload.
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def write_archive(path, tensors, **header):
    """Write named arrays as one contiguous little-endian payload behind a JSON header."""
    entries, chunks, offset = [], [], 0
    for name, value in tensors.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        value = np.asarray(value)
        dtype = value.dtype.name
        if dtype not in _DTYPES:
            raise TypeError(f"{name}: unsupported dtype {dtype}")
        raw = np.ascontiguousarray(value, dtype=_DTYPES[dtype]).tobytes()
        entries.append({"name": name, "shape": list(value.shape), "dtype": dtype,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    head = dict(header)
    head.update({"tensors": entries, "payload_bytes": len(payload),
                 "crc32": zlib.crc32(payload)})
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def read_archive(path):
    """Return ``(header, {name: ndarray})``; raises :class:`IntegrityError` on damage."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise IntegrityError(f"{path}: truncated archive")
    (n,) = struct.unpack("<Q", data[:8])
    if 8 + n > len(data):
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(data[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable header ({exc})") from None
    payload = data[8 + n:]
    if len(payload) != header.get("payload_bytes"):
        raise IntegrityError(
            f"{path}: payload has {len(payload)} bytes, header says {header.get('payload_bytes')}"
        )
    if zlib.crc32(payload) != header.get("crc32"):
        raise IntegrityError(f"{path}: checksum mismatch")
    tensors = {}
    for e in header["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return header, tensors
