"""Geometry-biased stripe-window attention for equirectangular feature maps.

A horizontal block attends within each image row, a vertical block within
each column. Scores are biased by a signed chord-distance embedding of the
window elements on the sphere, mapped into [0, 1] by a cosine distance score
instead of softmax, and finally each window's output is blended with its
input according to a cross-window importance ratio.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .geometry import AngularGrid
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class Axis(str, Enum):
    HORIZONTAL = "h"
    VERTICAL = "v"

    @classmethod
    def parse(cls, value) -> "Axis":
        if isinstance(value, Axis):
            return value
        key = str(value).lower()
        for ax in cls:
            if key in (ax.value, ax.name.lower()):
                return ax
        raise ConfigError(f"unknown axis {value!r} (expected horizontal or vertical)")


# Fault-injection switches consulted by build_erpe; used by selfcheck mutation runs.
FAULTS: set[str] = set()


@dataclass(frozen=True)
class AttentionConfig:
    heads: int
    head_dim: int
    rho: float = 0.1
    rho_b: float = 1.0 / math.sqrt(2.0)
    theta_b: float = 0.0
    phi_b: float = math.pi / 2
    clamp_min: float = 0.5
    eps_norm: float = 1e-8
    # ablation switches; all on is the full mechanism
    use_erpe: bool = True
    use_das: bool = True
    use_eaar: bool = True

    def __post_init__(self):
        if self.heads < 1 or self.head_dim < 1:
            raise ConfigError(f"heads and head_dim must be positive, got {self.heads}, {self.head_dim}")
        if not self.rho > 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if not self.rho_b > 0:
            raise ConfigError(f"rho_b must be positive, got {self.rho_b}")
        if not 0.0 < self.phi_b < math.pi:
            raise ConfigError(f"phi_b must lie in (0, pi), got {self.phi_b}")
        if not 0.0 <= self.clamp_min <= 1.0:
            raise ConfigError(f"clamp_min must lie in [0, 1], got {self.clamp_min}")

    @property
    def channels(self) -> int:
        return self.heads * self.head_dim


# --------------------------------------------------------------------------
# parameters


def _param(rng: np.random.Generator, shape, scale: float, name: str) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, name=name)


def _const(value: float, shape, name: str) -> Tensor:
    return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True, name=name)


@dataclass
class AttnParams:
    ln_gamma: Tensor
    ln_beta: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "AttnParams":
        c = channels
        s = 1.0 / math.sqrt(c)
        return cls(
            ln_gamma=_const(1.0, (c,), "ln_gamma"),
            ln_beta=_const(0.0, (c,), "ln_beta"),
            wq=_param(rng, (c, c), s, "wq"), bq=_const(0.0, (c,), "bq"),
            wk=_param(rng, (c, c), s, "wk"), bk=_const(0.0, (c,), "bk"),
            wv=_param(rng, (c, c), s, "wv"), bv=_const(0.0, (c,), "bv"),
            wo=_param(rng, (c, c), s, "wo"), bo=_const(0.0, (c,), "bo"),
        )

    def named(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(prefix + k, v) for k, v in vars(self).items()]


@dataclass
class BlockParams:
    """One transformer sub-block: attention plus the LN/MLP residual branch."""

    attn: AttnParams
    ln2_gamma: Tensor
    ln2_beta: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, hidden_ratio: int = 4) -> "BlockParams":
        c, h = channels, hidden_ratio * channels
        return cls(
            attn=AttnParams.init(c, rng),
            ln2_gamma=_const(1.0, (c,), "ln2_gamma"),
            ln2_beta=_const(0.0, (c,), "ln2_beta"),
            w1=_param(rng, (c, h), 1.0 / math.sqrt(c), "w1"), b1=_const(0.0, (h,), "b1"),
            w2=_param(rng, (h, c), 1.0 / math.sqrt(h), "w2"), b2=_const(0.0, (c,), "b2"),
        )

    def named(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = self.attn.named(prefix + "attn.")
        out += [(prefix + k, v) for k, v in vars(self).items() if k != "attn"]
        return out


# --------------------------------------------------------------------------
# windows


def _window_major(z: Tensor, axis: Axis) -> Tensor:
    """[H, W, C] -> [n_windows, N, C]."""
    if axis is Axis.HORIZONTAL:
        return z
    return T.transpose(z, (1, 0, 2))


def _from_window_major(x: Tensor, axis: Axis) -> Tensor:
    if axis is Axis.HORIZONTAL:
        return x
    return T.transpose(x, (1, 0, 2))


def partition_windows(z: Tensor, axis) -> list[Tensor]:
    """Split [H, W, C] into stripe windows of shape [1, N, C]."""
    axis = Axis.parse(axis)
    x = _window_major(z, axis)
    return [T.reshape(T.take_slice(x, i, i + 1, axis=0), (1,) + x.shape[1:]) for i in range(x.shape[0])]


def merge_windows(windows: list[Tensor], axis) -> Tensor:
    axis = Axis.parse(axis)
    return _from_window_major(T.concat(windows, axis=0), axis)


# --------------------------------------------------------------------------
# ERPE


@dataclass(frozen=True)
class ErpeBias:
    """Per-window bias matrices.

    ``matrices`` is [H, W, W] for horizontal windows (one matrix per row) and
    [1, H, H] for vertical windows (one matrix shared by every column).
    """

    axis: Axis
    matrices: np.ndarray = field(repr=False)

    def window(self, i: int) -> np.ndarray:
        return self.matrices[0 if self.axis is Axis.VERTICAL else i]


def _signed_chord(angles: np.ndarray, rho: float) -> np.ndarray:
    diff = angles[:, None] - angles[None, :]
    sgn = np.sign(diff)
    if "erpe-sign" in FAULTS:
        sgn = np.abs(sgn)
    return sgn * rho * np.sqrt(np.maximum(2.0 * (1.0 - np.cos(diff)), 0.0))


def build_erpe(grid: AngularGrid, axis, cfg: AttentionConfig) -> ErpeBias:
    axis = Axis.parse(axis)
    if axis is Axis.HORIZONTAL:
        base = _signed_chord(grid.theta, cfg.rho)
        mats = np.sin(grid.phi)[:, None, None] * base[None, :, :]
    else:
        mats = _signed_chord(grid.phi, cfg.rho)[None, :, :]
    return ErpeBias(axis, mats)


# --------------------------------------------------------------------------
# scoring


def biased_score(q: Tensor, k: Tensor, erpe_window) -> Tensor:
    """q @ k^T plus the window bias, broadcast over any leading (head) axes."""
    if q.shape != k.shape:
        raise ValueError(f"query/key shapes differ: {q.shape} vs {k.shape}")
    n = q.shape[-2]
    e = erpe_window.data if isinstance(erpe_window, Tensor) else np.asarray(erpe_window, dtype=np.float64)
    if e.shape[-2:] != (n, n):
        raise ValueError(f"bias window {e.shape} does not match {n} window elements")
    return T.add(T.matmul(q, T.swap_last(k)), e)


def das(score: Tensor, axis, cfg: AttentionConfig) -> Tensor:
    """Distance-based attention score: row-wise L1 normalize, then map to [0, 1]."""
    axis = Axis.parse(axis)
    scale = 2.0 * cfg.rho_b**2
    if axis is Axis.HORIZONTAL:
        scale *= math.sin(cfg.phi_b) ** 2
    normalized = T.l1_normalize(score, axis=-1, eps=cfg.eps_norm)
    return T.versine(normalized, math.pi / 2, scale)


def window_importance(scores, cfg: AttentionConfig) -> Tensor:
    """Importance ratio per window from pre-DAS scores.

    ``scores`` is a tensor whose first axis indexes windows (remaining axes are
    pooled) or a list of per-window score tensors.
    """
    if isinstance(scores, (list, tuple)):
        if not scores:
            raise ValueError("window_importance needs at least one window")
        means = T.concat([T.reshape(T.mean(T.abs(s)), (1,)) for s in scores], axis=0)
    else:
        means = T.mean(T.abs(scores), axis=tuple(range(1, scores.ndim)))
    top = T.max(means)
    if top.item() == 0.0:
        return Tensor(np.ones(means.shape))
    return T.clamp_min(T.div(means, top), cfg.clamp_min)


def eaar_blend(attention: Tensor, z: Tensor, m) -> Tensor:
    """m * attention + (1 - m) * z; ``m`` broadcasts against the window axes."""
    if attention.shape != z.shape:
        raise ValueError(f"blend shapes differ: {attention.shape} vs {z.shape}")
    return T.add(T.mul(m, attention), T.mul(T.sub(1.0, m), z))


# --------------------------------------------------------------------------
# block assembly


def _check_channels(z: Tensor, cfg: AttentionConfig):
    if z.ndim != 3:
        raise ConfigError(f"expected [H, W, C] input, got {z.shape}")
    if z.shape[-1] != cfg.channels:
        raise ConfigError(
            f"channel extent {z.shape[-1]} != heads*head_dim = {cfg.heads}*{cfg.head_dim}")


def _heads(x: Tensor, cfg: AttentionConfig) -> Tensor:
    nw, n, _ = x.shape
    return T.transpose(T.reshape(x, (nw, n, cfg.heads, cfg.head_dim)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    nw, j, n, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (nw, n, j * d))


def _softmax_rows(x: Tensor) -> Tensor:
    shifted = T.sub(x, x.data.max(axis=-1, keepdims=True))
    e = T.exp(shifted)
    return T.div(e, T.sum(e, axis=-1, keepdims=True))


def eg_msa(z: Tensor, axis, grid: AngularGrid, params: AttnParams, cfg: AttentionConfig,
           erpe: ErpeBias | None = None) -> Tensor:
    """Geometry-biased multi-head self-attention over stripe windows.

    Returns the rearranged attention ``L`` with the same [H, W, C] shape as ``z``.
    """
    axis = Axis.parse(axis)
    _check_channels(z, cfg)
    if (grid.height, grid.width) != z.shape[:2]:
        raise ConfigError(f"grid {grid.height}x{grid.width} does not match input {z.shape[:2]}")
    if erpe is None:
        erpe = build_erpe(grid, axis, cfg)

    with T.mac_label("attention"):
        x = _window_major(z, axis)  # [nW, N, C]
        f = T.layer_norm(x, params.ln_gamma, params.ln_beta)
        q = _heads(T.linear(f, params.wq, params.bq), cfg)
        k = _heads(T.linear(f, params.wk, params.bk), cfg)
        v = _heads(T.linear(f, params.wv, params.bv), cfg)
        bias = erpe.matrices[:, None, :, :] if cfg.use_erpe else np.zeros((1, 1) + erpe.matrices.shape[1:])
        score = biased_score(q, k, bias)  # [nW, J, N, N]
        if cfg.use_das:
            weights = das(score, axis, cfg)
        else:
            weights = _softmax_rows(T.mul(score, 1.0 / math.sqrt(cfg.head_dim)))
        attn = T.linear(_merge_heads(T.matmul(weights, v)), params.wo, params.bo)
        if cfg.use_eaar:
            m = window_importance(score, cfg)
            out = eaar_blend(attn, x, T.reshape(m, (-1, 1, 1)))
        else:
            out = attn
    return _from_window_major(out, axis)


def mlp(x: Tensor, p: BlockParams) -> Tensor:
    return T.linear(T.gelu(T.linear(x, p.w1, p.b1)), p.w2, p.b2)


def sub_block(z: Tensor, axis, grid: AngularGrid, p: BlockParams, cfg: AttentionConfig,
              erpe: ErpeBias | None = None, attention_fn=None) -> Tensor:
    """One full residual pass: z + L, then the LN/MLP residual."""
    if attention_fn is None:
        l = eg_msa(z, axis, grid, p.attn, cfg, erpe)
    else:
        l = attention_fn(z, axis, p.attn)
    zh = T.add(l, z)
    return T.add(mlp(T.layer_norm(zh, p.ln2_gamma, p.ln2_beta), p), zh)


BLOCK_AXES = {"H": (Axis.HORIZONTAL,), "V": (Axis.VERTICAL,), "E": (Axis.VERTICAL, Axis.HORIZONTAL)}


def block_forward(z: Tensor, kind: str, grid: AngularGrid, params: list[BlockParams],
                  cfg: AttentionConfig, erpes: dict | None = None, attention_fn=None) -> Tensor:
    """Apply block ``kind`` (H, V or E). E runs a vertical then a horizontal sub-block."""
    if kind not in BLOCK_AXES:
        raise ConfigError(f"unknown block kind {kind!r} (expected one of H, V, E)")
    axes = BLOCK_AXES[kind]
    if len(params) != len(axes):
        raise ConfigError(f"block {kind} needs {len(axes)} parameter sets, got {len(params)}")
    for ax, p in zip(axes, params):
        erpe = erpes.get(ax) if erpes else None
        z = sub_block(z, ax, grid, p, cfg, erpe, attention_fn)
    return z


def init_block(kind: str, channels: int, rng: np.random.Generator) -> list[BlockParams]:
    if kind not in BLOCK_AXES:
        raise ConfigError(f"unknown block kind {kind!r} (expected one of H, V, E)")
    return [BlockParams.init(channels, rng) for _ in BLOCK_AXES[kind]]


def flop_formula(h: int, w: int, c: int, axis) -> int:
    """Projection plus window-product MACs of one stripe attention pass."""
    axis = Axis.parse(axis)
    if min(h, w, c) < 1:
        raise ValueError("extents must be positive")
    window = w if axis is Axis.HORIZONTAL else h
    return 4 * h * w * c * c + 2 * h * w * window * c
