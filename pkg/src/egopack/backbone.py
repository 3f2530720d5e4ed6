"""Shared temporal GNN backbone."""

from dataclasses import dataclass

import torch
from torch import nn

from .nn import LEAKY_SLOPE, LN_EPS, LayerNorm, Linear, glorot_uniform, layer_norm, leaky_relu, linear
from .validation import ConfigError


@dataclass
class BackboneConfig:
    L: int = 3
    D: int = 64
    D_t: int = 64
    slope: float = LEAKY_SLOPE
    ln_eps: float = LN_EPS
    # False drops all neighbour terms: the "MLP" baseline
    message_passing: bool = True

    def __post_init__(self):
        if self.L < 0 or self.D < 1 or self.D_t < 1:
            raise ConfigError("backbone needs L >= 0 and positive widths")


def sage_layer(f, edge_index, W_r, W, b, W_p, b_p, slope=LEAKY_SLOPE):
    """One GraphSAGE update with projected, mean-aggregated neighbours.

    ``g_i = mean_{j in N(i)} leaky_relu(W_p f_j + b_p)`` and
    ``f_i' = W_r f_i + W g_i + b``; isolated nodes get ``g_i = 0``.
    ``edge_index[0]`` are neighbours, ``edge_index[1]`` receivers.
    """
    n, d_in = f.shape
    if W_p.shape != (d_in, d_in) or W_r.shape[1] != d_in or W.shape != W_r.shape:
        raise ValueError(
            f"sage_layer: features of width {d_in} do not fit W_r {tuple(W_r.shape)}, "
            f"W {tuple(W.shape)}, W_p {tuple(W_p.shape)}"
        )
    src, dst = edge_index
    messages = leaky_relu(linear(f[src], W_p, b_p), slope)
    agg = torch.zeros(n, d_in, dtype=f.dtype).index_add(0, dst, messages)
    deg = torch.bincount(dst, minlength=n).clamp(min=1).to(f.dtype)
    g = agg / deg[:, None]
    return linear(f, W_r) + linear(g, W, b)


class SAGELayer(nn.Module):
    def __init__(self, d_in, d_out, generator, slope=LEAKY_SLOPE):
        super().__init__()
        self.W_r = nn.Parameter(glorot_uniform(d_out, d_in, generator).float())
        self.W = nn.Parameter(glorot_uniform(d_out, d_in, generator).float())
        self.b = nn.Parameter(torch.zeros(d_out))
        self.W_p = nn.Parameter(glorot_uniform(d_in, d_in, generator).float())
        self.b_p = nn.Parameter(torch.zeros(d_in))
        self.slope = slope

    def forward(self, f, edge_index):
        return sage_layer(f, edge_index, self.W_r, self.W, self.b, self.W_p, self.b_p, self.slope)


class Backbone(nn.Module):
    """``L`` x [SAGE -> LayerNorm -> LeakyReLU] with a residual around the stack.

    Inputs of width ``D != D_t`` go through a learned projection first and
    the residual taps the projected features.
    """

    def __init__(self, cfg, generator):
        super().__init__()
        self.cfg = cfg
        self.input_proj = Linear(cfg.D, cfg.D_t, generator) if cfg.D != cfg.D_t else None
        self.layers = nn.ModuleList(
            SAGELayer(cfg.D_t, cfg.D_t, generator, cfg.slope) for _ in range(cfg.L))
        self.norms = nn.ModuleList(LayerNorm(cfg.D_t, cfg.ln_eps) for _ in range(cfg.L))

    def forward(self, x, edge_index):
        if x.shape[-1] != self.cfg.D:
            raise ValueError(f"backbone expects width {self.cfg.D}, got {x.shape[-1]}")
        if not self.cfg.message_passing:
            edge_index = edge_index[:, :0]
        h0 = self.input_proj(x) if self.input_proj is not None else x
        h = h0
        for i, (layer, norm) in enumerate(zip(self.layers, self.norms)):
            z = layer(h, edge_index)
            if not torch.isfinite(z).all():
                raise FloatingPointError(f"backbone layer {i} produced non-finite values")
            h = leaky_relu(layer_norm(z, norm.gain, norm.bias, norm.eps), self.cfg.slope)
        return h0 + h
