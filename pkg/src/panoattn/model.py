"""Toy encoder / bottleneck / decoder depth network built from E, H, V blocks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import (
    AttentionConfig,
    Axis,
    BlockParams,
    ConfigError,
    block_forward,
    build_erpe,
    flop_formula,
    init_block,
)
from .geometry import build_grid
from .oracle import softmax_baseline_msa
from .tensor import Tensor

IN_CHANNELS = 5  # RGB plus two latitude channels
VARIANTS = ("full", "no-das", "no-eaar", "no-erpe", "softmax")


class ArchParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


@dataclass(frozen=True)
class ArchSpec:
    encoder: str
    bottleneck: str
    decoder: str

    def __str__(self):
        return f"{self.encoder}-{self.bottleneck}-{self.decoder}"

    @property
    def depth(self) -> int:
        return len(self.encoder)


def parse_arch(s: str) -> ArchSpec:
    """Parse ``"EEEE-E-EEEE"`` style strings into encoder/bottleneck/decoder letters."""
    parts = s.split("-")
    if len(parts) != 3:
        raise ArchParseError(f"expected three dash-separated segments in {s!r}, got {len(parts)}", 0)
    pos = 0
    for part in parts:
        if not part:
            raise ArchParseError(f"empty segment in {s!r}", pos)
        for k, letter in enumerate(part):
            if letter in "MP":
                raise ArchParseError(f"letter {letter} out of scope (Panoformer PST)", pos + k)
            if letter not in "EHV":
                raise ArchParseError(f"unknown block letter {letter!r}; expected E, H or V", pos + k)
        pos += len(part) + 1
    enc, bott, dec = parts
    if len(enc) != len(dec):
        raise ArchParseError(
            f"encoder has {len(enc)} stages but decoder has {len(dec)}; skip connections need equal counts",
            len(enc) + len(bott) + 2)
    return ArchSpec(enc, bott, dec)


@dataclass
class ModelConfig:
    height: int = 32
    width: int = 64
    base_channels: int = 16
    heads: int = 4
    arch: str = "EE-E-EE"
    patch_kernel: int = 3
    seed: int = 0
    rho: float = 0.1
    variant: str = "full"

    def __post_init__(self):
        spec = parse_arch(self.arch)
        step = 2 ** spec.depth
        if self.height % step or self.width % step:
            raise ConfigError(
                f"input {self.height}x{self.width} not divisible by 2^{spec.depth} = {step}")
        if self.patch_kernel < 1 or self.patch_kernel % 2 == 0:
            raise ConfigError(f"patch kernel must be a positive odd integer, got {self.patch_kernel}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        for c in self.stage_channels():
            if c % self.heads:
                raise ConfigError(f"stage channels {c} not divisible by {self.heads} heads")

    @property
    def spec(self) -> ArchSpec:
        return parse_arch(self.arch)

    def stage_channels(self) -> list[int]:
        return [self.base_channels * 2**s for s in range(self.spec.depth + 1)]

    def stage_shape(self, s: int) -> tuple[int, int, int]:
        return self.height // 2**s, self.width // 2**s, self.base_channels * 2**s

    def attention_config(self, s: int) -> AttentionConfig:
        c = self.stage_channels()[s]
        return AttentionConfig(
            heads=self.heads, head_dim=c // self.heads, rho=self.rho,
            use_erpe=self.variant != "no-erpe",
            use_das=self.variant != "no-das",
            use_eaar=self.variant != "no-eaar",
        )

    # plain-text key=value persistence
    def dumps(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def loads(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kind = types[key]
            kwargs[key] = int(value) if kind in (int, "int") else float(value) if kind in (float, "float") else value
        return cls(**kwargs)

    def save(self, path) -> None:
        from .checkpoint import atomic_write_bytes

        atomic_write_bytes(path, self.dumps().encode())

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.loads(Path(path).read_text())


# --------------------------------------------------------------------------
# CNN-style glue layers


def _weight(rng, d_in, d_out, name):
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out)), requires_grad=True, name=name)


def _bias(d, name, value=0.0):
    return Tensor(np.full(d, value), requires_grad=True, name=name)


def neighborhood_index(h: int, w: int, k: int) -> np.ndarray:
    """Flat pixel indices of each k x k neighborhood; columns wrap, rows clamp."""
    r = k // 2
    rows = np.clip(np.arange(h)[:, None] + np.arange(-r, r + 1)[None, :], 0, h - 1)  # [h, k]
    cols = (np.arange(w)[:, None] + np.arange(-r, r + 1)[None, :]) % w  # [w, k]
    idx = rows[:, None, :, None] * w + cols[None, :, None, :]  # [h, w, k, k]
    return idx.reshape(h, w, k * k)


def with_latitude(image: Tensor) -> Tensor:
    """Append cos(phi) and sin(phi) of each pixel row as two constant channels.

    Every later layer is shift-equivariant along rows and columns (the position
    bias is relative), so without these the network cannot tell floor rows
    from horizon rows. Longitude is left out to keep the cyclic symmetry.
    """
    h, w, _ = image.shape
    phi = build_grid(h, w).phi
    lat = np.broadcast_to(np.stack([np.cos(phi), np.sin(phi)], axis=-1)[:, None, :], (h, w, 2))
    return T.concat([image, Tensor(np.ascontiguousarray(lat))], axis=-1)


def patch_embed(image: Tensor, weight: Tensor, bias: Tensor, k: int) -> Tensor:
    """Linear lift of each pixel's k x k neighborhood to ``weight.shape[1]`` channels."""
    h, w, c = image.shape
    if weight.shape[0] != k * k * c:
        raise ConfigError(f"patch weight expects {weight.shape[0]} inputs, image gives {k * k * c}")
    flat = T.reshape(image, (h * w, c))
    patches = T.gather(flat, neighborhood_index(h, w, k), axis=0)  # [h, w, k*k, c]
    return T.linear(T.reshape(patches, (h, w, k * k * c)), weight, bias)


def downsample(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """2x2 space-to-depth followed by a linear 4C -> 2C map."""
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"downsample needs even extents, got {h}x{w}")
    s2d = T.reshape(T.transpose(T.reshape(x, (h // 2, 2, w // 2, 2, c)), (0, 2, 1, 3, 4)), (h // 2, w // 2, 4 * c))
    return T.linear(s2d, weight, bias)


def upsample_fuse(x: Tensor, skip: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Nearest x2 upsample, concat with the skip features, linear fuse to skip channels."""
    h, w, c = x.shape
    if skip.shape[:2] != (2 * h, 2 * w):
        raise ConfigError(f"skip extents {skip.shape[:2]} != upsampled {(2 * h, 2 * w)}")
    up = T.gather(T.gather(x, np.arange(2 * h) // 2, axis=0), np.arange(2 * w) // 2, axis=1)
    return T.linear(T.concat([up, skip], axis=-1), weight, bias)


# --------------------------------------------------------------------------
# model


@dataclass
class DepthModel:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: ModelConfig) -> "DepthModel":
        rng = np.random.default_rng(config.seed)
        spec = config.spec
        chans = config.stage_channels()
        k = config.patch_kernel
        p: dict = {
            "patch.w": _weight(rng, k * k * IN_CHANNELS, chans[0], "patch.w"),
            "patch.b": _bias(chans[0], "patch.b"),
            "encoder": [],
            "down": [],
            "up": [],
            "decoder": [],
        }
        for s, letter in enumerate(spec.encoder):
            p["encoder"].append(init_block(letter, chans[s], rng))
            p["down"].append((_weight(rng, 4 * chans[s], chans[s + 1], f"down{s}.w"),
                              _bias(chans[s + 1], f"down{s}.b")))
        p["bottleneck"] = [init_block(letter, chans[-1], rng) for letter in spec.bottleneck]
        for j, letter in enumerate(spec.decoder):
            s = spec.depth - 1 - j
            p["up"].append((_weight(rng, chans[s + 1] + chans[s], chans[s], f"up{s}.w"),
                            _bias(chans[s], f"up{s}.b")))
            p["decoder"].append(init_block(letter, chans[s], rng))
        p["head_ln.gamma"] = _bias(chans[0], "head_ln.gamma", 1.0)
        p["head_ln.beta"] = _bias(chans[0], "head_ln.beta")
        p["head.w"] = _weight(rng, chans[0], 1, "head.w")
        p["head.b"] = _bias(1, "head.b")
        model = cls(config, p)
        model._name_parameters()
        return model

    # -- parameters -------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        p, spec = self.params, self.config.spec
        out = [("patch.w", p["patch.w"]), ("patch.b", p["patch.b"])]

        def block(prefix, subs):
            for n, sub in enumerate(subs):
                out.extend(sub.named(f"{prefix}.{n}."))

        for s in range(spec.depth):
            block(f"enc{s}", p["encoder"][s])
            out.extend([(f"down{s}.w", p["down"][s][0]), (f"down{s}.b", p["down"][s][1])])
        for b, subs in enumerate(p["bottleneck"]):
            block(f"bott{b}", subs)
        for j in range(spec.depth):
            s = spec.depth - 1 - j
            out.extend([(f"up{s}.w", p["up"][j][0]), (f"up{s}.b", p["up"][j][1])])
            block(f"dec{s}", p["decoder"][j])
        out.extend([(k, p[k]) for k in ("head_ln.gamma", "head_ln.beta", "head.w", "head.b")])
        return out

    def _name_parameters(self):
        for name, t in self.named_parameters():
            t.name = name

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, t in named.items():
            if state[name].shape != t.shape:
                raise ConfigError(f"checkpoint tensor {name} has shape {state[name].shape}, expected {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)

    # -- forward ----------------------------------------------------------

    def _stage_context(self, s: int):
        cache = self.__dict__.setdefault("_ctx", {})
        if s not in cache:
            h, w, c = self.config.stage_shape(s)
            grid = build_grid(h, w)
            cfg = self.config.attention_config(s)
            erpes = {ax: build_erpe(grid, ax, cfg) for ax in Axis}
            fn = None
            if self.config.variant == "softmax":
                heads = self.config.heads

                def fn(z, axis, p, heads=heads):
                    return softmax_baseline_msa(z, axis, p, heads)

            cache[s] = (grid, cfg, erpes, fn)
        return cache[s]

    def _block(self, z: Tensor, letter: str, s: int, subs: list[BlockParams]) -> Tensor:
        grid, cfg, erpes, fn = self._stage_context(s)
        return block_forward(z, letter, grid, subs, cfg, erpes, attention_fn=fn)

    def forward(self, image) -> Tensor:
        """Predict positive depth [H, W, 1] for an image [H, W, 3]."""
        cfg, p, spec = self.config, self.params, self.config.spec
        image = image if isinstance(image, Tensor) else Tensor(image)
        if image.shape != (cfg.height, cfg.width, 3):
            raise ConfigError(f"image shape {image.shape} != configured {(cfg.height, cfg.width, 3)}")
        with T.mac_label("embed"):
            x = patch_embed(with_latitude(image), p["patch.w"], p["patch.b"], cfg.patch_kernel)
        skips = []
        for s, letter in enumerate(spec.encoder):
            x = self._block(x, letter, s, p["encoder"][s])
            skips.append(x)
            with T.mac_label("resample"):
                x = downsample(x, *p["down"][s])
        for letter, subs in zip(spec.bottleneck, p["bottleneck"]):
            x = self._block(x, letter, spec.depth, subs)
        for j, letter in enumerate(spec.decoder):
            s = spec.depth - 1 - j
            with T.mac_label("resample"):
                x = upsample_fuse(x, skips[s], *p["up"][j])
            x = self._block(x, letter, s, p["decoder"][j])
        with T.mac_label("head"):
            x = T.layer_norm(x, p["head_ln.gamma"], p["head_ln.beta"])
            return T.softplus(T.linear(x, p["head.w"], p["head.b"]))

    __call__ = forward

    def attention_flops(self) -> int:
        """Sum of the stripe-attention complexity formula over every attention pass."""
        from .attention import BLOCK_AXES

        spec = self.config.spec
        total = 0
        plan = [(letter, s) for s, letter in enumerate(spec.encoder)]
        plan += [(letter, spec.depth) for letter in spec.bottleneck]
        plan += [(letter, spec.depth - 1 - j) for j, letter in enumerate(spec.decoder)]
        for letter, s in plan:
            h, w, c = self.config.stage_shape(s)
            total += sum(flop_formula(h, w, c, ax) for ax in BLOCK_AXES[letter])
        return total


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count from layer shapes."""
    spec = config.spec
    chans = config.stage_channels()
    r = 4
    k = config.patch_kernel

    def sub_block(c):
        attn = 2 * c + 4 * (c * c + c)
        mlp = 2 * c + (c * r * c + r * c) + (r * c * c + c)
        return attn + mlp

    subs = {"H": 1, "V": 1, "E": 2}
    total = k * k * IN_CHANNELS * chans[0] + chans[0]
    for s, letter in enumerate(spec.encoder):
        total += subs[letter] * sub_block(chans[s])
        total += 4 * chans[s] * chans[s + 1] + chans[s + 1]
    total += sum(subs[letter] * sub_block(chans[-1]) for letter in spec.bottleneck)
    for j, letter in enumerate(spec.decoder):
        s = spec.depth - 1 - j
        total += (chans[s + 1] + chans[s]) * chans[s] + chans[s]
        total += subs[letter] * sub_block(chans[s])
    return total + 2 * chans[0] + chans[0] + 1
