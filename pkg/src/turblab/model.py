"""Multi-resolution single-step vorticity forecaster.

The network maps a normalized vorticity frame to the next frame. An
encoder lifts the field and restricts it through strided stages to a
coarse latent grid, a three-path core transforms that latent (a local
convolutional path, a dilated intermediate path, and a global attention
path, fused by gated aggregation), and a decoder prolongs back to full
resolution with skip connections. Ablation variants swap the core for a
plain convolution stack, collapse the multi-resolution pyramid to one
fixed latent grid, or run a single core path alone.

Parameters live in a flat name -> array dict so the training loop and
the checkpoint container can treat them uniformly; the name prefix
records the section (enc / hds / core / pre / post / dec / head).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .container import load_named, save_named
from .tensor import Tensor

LAYER_SCALE_INIT = 1e-6
LEAKY_SLOPE = 0.01
# Pointwise expansion inside the spatial-mixing sub-block of the
# high/mid paths (inverted-bottleneck style).
MIX_EXPANSION = 2

VARIANTS = ("full", "no_hds", "no_mg", "high_only", "low_only")


@dataclass(frozen=True)
class CoreConfig:
    """Hyperparameters of the three-path latent core."""
    n_high_blocks: int = 2
    n_mid_blocks: int = 2
    n_low_blocks: int = 2
    heads: int = 4
    embed_dim: int | None = None     # None: use the coarsest latent width
    mid_dilation: int = 2
    mlp_ratio: int = 4


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "full"
    n_levels: int = 4
    strides: tuple = (1, 2, 1, 2)
    widths: tuple = (16, 32, 48)
    hds: CoreConfig = field(default_factory=CoreConfig)
    groupnorm_groups: int = 8
    seed: int = 0


class ConfigError(ValueError):
    pass


def _gn_groups(cap: int, channels: int) -> int:
    return min(cap, channels)


def validate_config(config: ModelConfig, n: int) -> None:
    c = config
    if c.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {c.variant!r}")
    if c.n_levels != len(c.strides):
        raise ConfigError(f"n_levels {c.n_levels} != len(strides) {len(c.strides)}")
    if any(s not in (1, 2) for s in c.strides):
        raise ConfigError(f"strides must be 1 or 2, got {c.strides}")
    want = 1 + sum(1 for s in c.strides if s == 2)
    if len(c.widths) != want:
        raise ConfigError(f"{want} grid levels need {want} widths, got {len(c.widths)}")
    total = 1
    for s in c.strides:
        total *= s
    if n % total != 0 or n // total < 1:
        raise ConfigError(f"grid size {n} not divisible by stride product {total}")
    if c.groupnorm_groups < 1:
        raise ConfigError("groupnorm_groups must be at least 1")
    for w in c.widths:
        g = _gn_groups(c.groupnorm_groups, w)
        if w % g != 0:
            raise ConfigError(f"width {w} not divisible by its {g} norm groups")
    h = c.hds
    if min(h.n_high_blocks, h.n_mid_blocks, h.n_low_blocks) < 1:
        raise ConfigError("every core path needs at least one block")
    d = h.embed_dim if h.embed_dim is not None else c.widths[-1]
    if d % h.heads != 0:
        raise ConfigError(f"token dim {d} not divisible by {h.heads} heads")
    if h.mid_dilation < 1 or h.mlp_ratio < 1:
        raise ConfigError("mid_dilation and mlp_ratio must be at least 1")


def stage_dims(config: ModelConfig):
    """Per encoder stage: (input width, output width, stride)."""
    dims = []
    level = 0
    w_in = config.widths[0]
    for s in config.strides:
        if s == 2:
            level += 1
        w_out = config.widths[level]
        dims.append((w_in, w_out, s))
        w_in = w_out
    return dims


def active_paths(variant: str):
    if variant == "high_only":
        return ("high",)
    if variant == "low_only":
        return ("low",)
    return ("high", "mid", "low")


@dataclass
class LatentPyramid:
    """Coarsest latent plus the saved pre-restriction skip features."""
    top: Tensor
    skips: list


# --- parameter table ------------------------------------------------------

def _param_specs(config: ModelConfig):
    """Ordered (name, shape, init) table; init in
    {he, zero, one, scale_init, attn}."""
    c = config
    specs = []
    add = specs.append

    def conv(prefix, c_out, c_in, k):
        add((f"{prefix}.w", (c_out, c_in, k, k), "he"))
        add((f"{prefix}.b", (c_out,), "zero"))

    def norm(prefix, width):
        add((f"{prefix}.gamma", (width,), "one"))
        add((f"{prefix}.beta", (width,), "zero"))

    def res_block(prefix, width):
        conv(f"{prefix}.conv1", width, width, 3)
        norm(f"{prefix}.gn1", width)
        conv(f"{prefix}.conv2", width, width, 3)
        norm(f"{prefix}.gn2", width)

    h = c.hds
    c_top = c.widths[-1]
    d = h.embed_dim if h.embed_dim is not None else c_top
    d_k = d // h.heads
    e_mix = MIX_EXPANSION * c_top
    r = h.mlp_ratio

    def conv_path_block(prefix, dw_k):
        # positional branch is the final (only) layer of its sub-block
        add((f"{prefix}.pos.w", (c_top, 1, 3, 3), "zero"))
        add((f"{prefix}.pos.b", (c_top,), "zero"))
        norm(f"{prefix}.mix.gn", c_top)
        conv(f"{prefix}.mix.pw1", e_mix, c_top, 1)
        add((f"{prefix}.mix.dw.w", (e_mix, 1, dw_k, dw_k), "he"))
        add((f"{prefix}.mix.dw.b", (e_mix,), "zero"))
        add((f"{prefix}.mix.pw2.w", (c_top, e_mix, 1, 1), "zero"))
        add((f"{prefix}.mix.pw2.b", (c_top,), "zero"))
        norm(f"{prefix}.mlp.gn", c_top)
        conv(f"{prefix}.mlp.fc1", r * c_top, c_top, 1)
        add((f"{prefix}.mlp.fc2.w", (c_top, r * c_top, 1, 1), "zero"))
        add((f"{prefix}.mlp.fc2.b", (c_top,), "zero"))

    def core_specs():
        paths = active_paths(c.variant)
        if "high" in paths:
            for j in range(h.n_high_blocks):
                conv_path_block(f"hds.high.b{j}", 5)
        if "mid" in paths:
            for j in range(h.n_mid_blocks):
                conv_path_block(f"hds.mid.b{j}", 3)
        if "low" in paths:
            if d != c_top:
                conv("hds.low.proj_in", d, c_top, 1)
                conv("hds.low.proj_out", c_top, d, 1)
            for j in range(h.n_low_blocks):
                norm(f"hds.low.b{j}.norm1", d)
                for nm in ("wq", "wk", "wv"):
                    add((f"hds.low.b{j}.attn.{nm}", (h.heads, d, d_k), "attn"))
                add((f"hds.low.b{j}.attn.wo", (h.heads, d_k, d), "attn"))
                add((f"hds.low.b{j}.lam1", (d,), "scale_init"))
                norm(f"hds.low.b{j}.norm2", d)
                add((f"hds.low.b{j}.mlp.w1", (d, r * d), "he"))
                add((f"hds.low.b{j}.mlp.b1", (r * d,), "zero"))
                add((f"hds.low.b{j}.mlp.w2", (r * d, d), "he"))
                add((f"hds.low.b{j}.mlp.b2", (d,), "zero"))
                add((f"hds.low.b{j}.lam2", (d,), "scale_init"))
        n_active = len(paths)
        add(("hds.mda.fuse.w", (c_top, n_active * c_top, 1, 1), "zero"))
        add(("hds.mda.fuse.b", (c_top,), "zero"))
        add(("hds.mda.gates", (n_active,), "zero"))

    if c.variant == "no_mg":
        w0 = c.widths[0]
        s_total = 1
        for s in c.strides:
            s_total *= s
        conv("pre.stem.conv", w0, 1, 3)
        norm("pre.stem.gn", w0)
        conv("pre.patch.conv", c_top, w0, s_total)
        norm("pre.patch.gn", c_top)
        res_block("pre.res", c_top)
        core_specs()
        res_block("post.res", c_top)
        # transposed weight keeps conv layout [c_top, w0, S, S]
        add(("post.unpatch.conv.w", (c_top, w0, s_total, s_total), "he"))
        add(("post.unpatch.conv.b", (w0,), "zero"))
        norm("post.unpatch.gn", w0)
        conv("post.refine.conv", w0, w0, 3)
        norm("post.refine.gn", w0)
        conv("head", 1, w0, 1)
        return specs

    w0 = c.widths[0]
    conv("enc.lift.conv", w0, 1, 3)
    norm("enc.lift.gn", w0)
    for i, (w_in, w_out, _) in enumerate(stage_dims(c)):
        conv(f"enc.stage{i}.trans.conv", w_out, w_in, 3)
        norm(f"enc.stage{i}.trans.gn", w_out)
        res_block(f"enc.stage{i}.res", w_out)

    if c.variant == "no_hds":
        for j in (1, 2, 3):
            conv(f"core.conv{j}", c_top, c_top, 3)
            norm(f"core.gn{j}", c_top)
    else:
        core_specs()

    for i, (w_in, w_out, stride) in enumerate(stage_dims(c)):
        # transposed weights keep conv layout [w_out, w_in, k, k]; a
        # stride-1 stage uses a plain conv, whose layout is flipped
        if stride == 2:
            add((f"dec.stage{i}.up.conv.w", (w_out, w_in, 3, 3), "he"))
        else:
            add((f"dec.stage{i}.up.conv.w", (w_in, w_out, 3, 3), "he"))
        add((f"dec.stage{i}.up.conv.b", (w_in,), "zero"))
        norm(f"dec.stage{i}.up.gn", w_in)
        conv(f"dec.stage{i}.fuse.conv", w_in, 2 * w_in, 3)
        norm(f"dec.stage{i}.fuse.gn", w_in)
    conv("head", 1, w0, 1)
    return specs


def _he_std(shape) -> float:
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
    else:
        fan_in = shape[0]
    return math.sqrt(2.0 / fan_in)


def init_params(specs, seed: int) -> dict:
    """Draw parameter arrays in table order from one seeded generator."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in specs:
        if kind == "zero":
            params[name] = np.zeros(shape)
        elif kind == "one":
            params[name] = np.ones(shape)
        elif kind == "scale_init":
            params[name] = np.full(shape, LAYER_SCALE_INIT)
        elif kind == "he":
            params[name] = rng.standard_normal(shape) * _he_std(shape)
        elif kind == "attn":
            n_h, a, b = shape
            std = math.sqrt(2.0 / (a + b))
            params[name] = rng.standard_normal(shape) * std
        else:
            raise ValueError(f"unknown init kind {kind!r}")
    return params


# --- forward pieces -------------------------------------------------------

def _act(x):
    return T.leaky_relu(x, LEAKY_SLOPE)


class Forecaster:
    """A built model: config plus the parameter table for grid size n."""

    def __init__(self, config: ModelConfig, n: int):
        validate_config(config, n)
        self.config = config
        self.n = n
        self.specs = _param_specs(config)

    # -- bookkeeping

    def init_params(self) -> dict:
        return init_params(self.specs, self.config.seed)

    def parameter_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape, _ in self.specs)

    def parameter_breakdown(self) -> dict:
        """Parameter count per top-level section prefix."""
        out = {}
        for name, shape, _ in self.specs:
            section = name.split(".", 1)[0]
            out[section] = out.get(section, 0) + int(np.prod(shape))
        return out

    # -- shared layer helpers (p: dict of Tensors)

    def _gn(self, p, prefix, x):
        C = x.data.shape[1] if isinstance(x, Tensor) else x.shape[1]
        g = _gn_groups(self.config.groupnorm_groups, C)
        return T.group_norm(x, g, p[f"{prefix}.gamma"], p[f"{prefix}.beta"])

    def _gn_act(self, p, prefix, x):
        C = x.data.shape[1] if isinstance(x, Tensor) else x.shape[1]
        g = _gn_groups(self.config.groupnorm_groups, C)
        return T.group_norm_act(x, g, p[f"{prefix}.gamma"], p[f"{prefix}.beta"],
                                slope=LEAKY_SLOPE)

    def _conv_gn_act(self, p, prefix, x, stride=1, padding=1):
        y = T.conv2d(x, p[f"{prefix}.conv.w"], p[f"{prefix}.conv.b"],
                     stride=stride, padding=padding)
        return self._gn_act(p, f"{prefix}.gn", y)

    def _res_block(self, p, prefix, x):
        y = T.conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], padding=1)
        y = self._gn_act(p, f"{prefix}.gn1", y)
        y = T.conv2d(y, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], padding=1)
        y = self._gn(p, f"{prefix}.gn2", y)
        return _act(T.add(x, y))

    # -- encoder / decoder

    def encode(self, p, x) -> LatentPyramid:
        h = self._conv_gn_act(p, "enc.lift", x)
        skips = []
        for i, (_, _, stride) in enumerate(stage_dims(self.config)):
            skips.append(h)
            h = self._conv_gn_act(p, f"enc.stage{i}.trans", h, stride=stride)
            h = self._res_block(p, f"enc.stage{i}.res", h)
        return LatentPyramid(top=h, skips=skips)

    def decode(self, p, pyramid: LatentPyramid):
        h = pyramid.top
        for i in reversed(range(len(self.config.strides))):
            _, _, stride = stage_dims(self.config)[i]
            if stride == 2:
                h = T.conv_transpose2d(h, p[f"dec.stage{i}.up.conv.w"],
                                       p[f"dec.stage{i}.up.conv.b"],
                                       stride=2, padding=1)
            else:
                h = T.conv2d(h, p[f"dec.stage{i}.up.conv.w"],
                             p[f"dec.stage{i}.up.conv.b"], padding=1)
            h = self._gn_act(p, f"dec.stage{i}.up.gn", h)
            skip = pyramid.skips[i]
            if skip.data.shape != h.data.shape:
                raise T.ShapeError(
                    f"skip {skip.data.shape} does not match upsampled {h.data.shape}")
            h = T.concat([h, skip], axis=1)
            h = T.conv2d(h, p[f"dec.stage{i}.fuse.conv.w"],
                         p[f"dec.stage{i}.fuse.conv.b"], padding=1)
            h = self._gn_act(p, f"dec.stage{i}.fuse.gn", h)
        return T.conv2d(h, p["head.w"], p["head.b"])

    # -- core paths

    def _conv_path_block(self, p, prefix, z, dilation):
        c_top = z.data.shape[1]
        pos = T.conv2d(z, p[f"{prefix}.pos.w"], p[f"{prefix}.pos.b"],
                       padding=dilation, groups=c_top, dilation=dilation)
        z = T.add(z, pos)
        y = self._gn(p, f"{prefix}.mix.gn", z)
        y = T.conv2d(y, p[f"{prefix}.mix.pw1.w"], p[f"{prefix}.mix.pw1.b"])
        e = y.data.shape[1]
        k = p[f"{prefix}.mix.dw.w"].data.shape[2]
        pad = dilation * (k - 1) // 2
        y = T.conv2d(y, p[f"{prefix}.mix.dw.w"], p[f"{prefix}.mix.dw.b"],
                     padding=pad, groups=e, dilation=dilation)
        y = T.conv2d(y, p[f"{prefix}.mix.pw2.w"], p[f"{prefix}.mix.pw2.b"])
        z = T.add(z, y)
        y = self._gn(p, f"{prefix}.mlp.gn", z)
        y = T.conv2d(y, p[f"{prefix}.mlp.fc1.w"], p[f"{prefix}.mlp.fc1.b"])
        y = T.gelu(y)
        y = T.conv2d(y, p[f"{prefix}.mlp.fc2.w"], p[f"{prefix}.mlp.fc2.b"])
        return T.add(z, y)

    def high_path(self, p, z):
        for j in range(self.config.hds.n_high_blocks):
            z = self._conv_path_block(p, f"hds.high.b{j}", z, dilation=1)
        return z

    def mid_path(self, p, z):
        for j in range(self.config.hds.n_mid_blocks):
            z = self._conv_path_block(p, f"hds.mid.b{j}", z,
                                      dilation=self.config.hds.mid_dilation)
        return z

    def _token_norm(self, p, prefix, t):
        B, N, d = t.data.shape
        flat = T.reshape(t, (B * N, d, 1, 1))
        flat = T.group_norm(flat, 1, p[f"{prefix}.gamma"], p[f"{prefix}.beta"])
        return T.reshape(flat, (B, N, d))

    def low_path(self, p, z):
        cfg = self.config.hds
        B, C, H, W = z.data.shape
        if "hds.low.proj_in.w" in p:
            z = T.conv2d(z, p["hds.low.proj_in.w"], p["hds.low.proj_in.b"])
        d = z.data.shape[1]
        t = T.reshape(T.transpose(z, (0, 2, 3, 1)), (B, H * W, d))
        for j in range(cfg.n_low_blocks):
            pre = f"hds.low.b{j}"
            y = self._token_norm(p, f"{pre}.norm1", t)
            y = T.multi_head_self_attention(
                y, p[f"{pre}.attn.wq"], p[f"{pre}.attn.wk"],
                p[f"{pre}.attn.wv"], p[f"{pre}.attn.wo"], cfg.heads)
            t = T.layer_scale_residual(t, y, p[f"{pre}.lam1"])
            y = self._token_norm(p, f"{pre}.norm2", t)
            y = T.add(T.matmul(y, p[f"{pre}.mlp.w1"]), p[f"{pre}.mlp.b1"])
            y = T.gelu(y)
            y = T.add(T.matmul(y, p[f"{pre}.mlp.w2"]), p[f"{pre}.mlp.b2"])
            t = T.layer_scale_residual(t, y, p[f"{pre}.lam2"])
        z = T.transpose(T.reshape(t, (B, H, W, d)), (0, 3, 1, 2))
        if "hds.low.proj_out.w" in p:
            z = T.conv2d(z, p["hds.low.proj_out.w"], p["hds.low.proj_out.b"])
        return z

    def mda_aggregate(self, p, branches):
        shapes = {b.data.shape for b in branches}
        if len(shapes) != 1:
            raise T.ShapeError(f"aggregate branches differ in shape: {shapes}")
        cat = branches[0] if len(branches) == 1 else T.concat(branches, axis=1)
        fused = T.conv2d(cat, p["hds.mda.fuse.w"], p["hds.mda.fuse.b"])
        gates = T.softmax(p["hds.mda.gates"], axis=-1)
        S = len(branches)
        stacked = T.concat([T.reshape(b, (1,) + b.data.shape) for b in branches],
                           axis=0) if S > 1 else T.reshape(
                               branches[0], (1,) + branches[0].data.shape)
        g = T.reshape(gates, (S, 1, 1, 1, 1))
        gated = T.sum_axis(T.mul(g, stacked), 0)
        return T.add(fused, gated)

    def core(self, p, z):
        if self.config.variant == "no_hds":
            h = z
            for j in (1, 2, 3):
                h = T.conv2d(h, p[f"core.conv{j}.w"], p[f"core.conv{j}.b"],
                             padding=1)
                h = self._gn_act(p, f"core.gn{j}", h)
            return h
        paths = active_paths(self.config.variant)
        branches = []
        if "high" in paths:
            branches.append(self.high_path(p, z))
        if "mid" in paths:
            branches.append(self.mid_path(p, z))
        if "low" in paths:
            branches.append(self.low_path(p, z))
        return self.mda_aggregate(p, branches)

    # -- full forward

    def forward(self, params, x) -> Tensor:
        p = {k: v if isinstance(v, Tensor) else Tensor(v)
             for k, v in params.items()}
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if x.data.ndim != 4 or x.data.shape[1] != 1:
            raise T.ShapeError(f"expected [B,1,n,n] input, got {x.data.shape}")
        if x.data.shape[2] != self.n or x.data.shape[3] != self.n:
            raise T.ShapeError(
                f"model built for n={self.n}, got {x.data.shape[2:]} input")
        if self.config.variant == "no_mg":
            return self._forward_single_grid(p, x)
        pyramid = self.encode(p, x)
        pyramid = LatentPyramid(top=self.core(p, pyramid.top),
                                skips=pyramid.skips)
        return self.decode(p, pyramid)

    def _forward_single_grid(self, p, x):
        s_total = 1
        for s in self.config.strides:
            s_total *= s
        h = self._conv_gn_act(p, "pre.stem", x)
        h = T.conv2d(h, p["pre.patch.conv.w"], p["pre.patch.conv.b"],
                     stride=s_total)
        h = self._gn_act(p, "pre.patch.gn", h)
        h = self._res_block(p, "pre.res", h)
        h = self.core(p, h)
        h = self._res_block(p, "post.res", h)
        # stored in conv layout [c_top, w0, S, S]; the transpose maps back
        h = T.conv_transpose2d(h, p["post.unpatch.conv.w"],
                               p["post.unpatch.conv.b"],
                               stride=s_total, padding=0, output_padding=0)
        h = self._gn_act(p, "post.unpatch.gn", h)
        h = T.conv2d(h, p["post.refine.conv.w"], p["post.refine.conv.b"],
                     padding=1)
        h = self._gn_act(p, "post.refine.gn", h)
        return T.conv2d(h, p["head.w"], p["head.b"])

    def predict(self, params, x: np.ndarray) -> np.ndarray:
        """Forward pass outside any gradient graph; ndarray in, ndarray out."""
        return self.forward(params, np.asarray(x, dtype=np.float64)).data


# --- config and checkpoint persistence ------------------------------------

def config_to_lines(config: ModelConfig) -> list:
    h = config.hds
    return [
        f"model.variant={config.variant}",
        f"model.n_levels={config.n_levels}",
        "model.strides=" + ",".join(map(str, config.strides)),
        "model.widths=" + ",".join(map(str, config.widths)),
        f"model.groupnorm_groups={config.groupnorm_groups}",
        f"model.seed={config.seed}",
        f"model.hds.n_high_blocks={h.n_high_blocks}",
        f"model.hds.n_mid_blocks={h.n_mid_blocks}",
        f"model.hds.n_low_blocks={h.n_low_blocks}",
        f"model.hds.heads={h.heads}",
        "model.hds.embed_dim=" + ("none" if h.embed_dim is None else str(h.embed_dim)),
        f"model.hds.mid_dilation={h.mid_dilation}",
        f"model.hds.mlp_ratio={h.mlp_ratio}",
    ]


MODEL_KEYS = {line.split("=")[0] for line in config_to_lines(ModelConfig())}


def config_from_kv(kv: dict) -> ModelConfig:
    """Build a ModelConfig from dotted key=value strings; unknown
    model.* keys are rejected."""
    unknown = {k for k in kv if k.startswith("model.")} - MODEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    base = ModelConfig()
    ints = lambda s: tuple(int(v) for v in s.split(","))
    get = lambda key, cast, dflt: cast(kv[key]) if key in kv else dflt
    hds = CoreConfig(
        n_high_blocks=get("model.hds.n_high_blocks", int, base.hds.n_high_blocks),
        n_mid_blocks=get("model.hds.n_mid_blocks", int, base.hds.n_mid_blocks),
        n_low_blocks=get("model.hds.n_low_blocks", int, base.hds.n_low_blocks),
        heads=get("model.hds.heads", int, base.hds.heads),
        embed_dim=(None if kv.get("model.hds.embed_dim", "none") == "none"
                   else int(kv["model.hds.embed_dim"])),
        mid_dilation=get("model.hds.mid_dilation", int, base.hds.mid_dilation),
        mlp_ratio=get("model.hds.mlp_ratio", int, base.hds.mlp_ratio),
    )
    strides = get("model.strides", ints, base.strides)
    return ModelConfig(
        variant=get("model.variant", str, base.variant),
        n_levels=get("model.n_levels", int, len(strides)),
        strides=strides,
        widths=get("model.widths", ints, base.widths),
        hds=hds,
        groupnorm_groups=get("model.groupnorm_groups", int, base.groupnorm_groups),
        seed=get("model.seed", int, base.seed),
    )


def save_checkpoint(path: str, model: Forecaster, params: dict,
                    extra: dict | None = None) -> None:
    """Named-tensor container plus a plain-text sidecar (config echo,
    grid size, and any extra scalar entries such as normalization stats)."""
    ordered = [(name, params[name]) for name, _, _ in model.specs]
    save_named(path, ordered)
    lines = config_to_lines(model.config) + [f"n={model.n}"]
    for key in sorted(extra or {}):
        lines.append(f"{key}={extra[key]!r}")
    with open(path + ".meta.txt", "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str):
    """Returns (model, params, extra-dict)."""
    meta_path = path + ".meta.txt"
    if not os.path.exists(meta_path):
        raise FileNotFoundError(f"checkpoint sidecar missing: {meta_path}")
    kv = {}
    with open(meta_path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                key, _, value = line.partition("=")
                kv[key] = value
    config = config_from_kv({k: v for k, v in kv.items()
                             if k.startswith("model.")})
    model = Forecaster(config, int(kv["n"]))
    params = dict(load_named(path))
    want = [name for name, _, _ in model.specs]
    if list(params) != want:
        raise ValueError("checkpoint parameter table does not match its config")
    extra = {k: float(v) for k, v in kv.items()
             if not k.startswith("model.") and k != "n"}
    return model, params, extra
