"""Configurable Vision Transformer with every studied LayerNorm placement.

Parameters live in a flat ``ParamTree``: an insertion-ordered dict from a
slash-separated path to a gradient-tracked Tensor.  The forward functions are
stateless; they read parameters by path.
"""

from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import tensor as T
from .norms import EPS, NORM_TYPES, apply_norm, layer_norm, NormParams, norm_param_names
from .tensor import Tensor

STEM_NORMS = ("none", "pre", "post", "post_posemb", "dpn")
PLACEMENTS = ("pre", "post", "pre_post")
BLOCK_EXTRAS = ("none", "normformer", "subln")
POOLS = ("tok",)

# hidden, heads, mlp_dim, depth
VARIANTS = {
    "Ti": (192, 3, 768, 12),
    "S": (384, 6, 1536, 12),
    "B": (768, 12, 3072, 12),
    "L": (1024, 16, 4096, 24),
}

HEAD_BIAS_SIGMOID = -6.9
POSEMB_STD = 0.02
# std of a unit normal truncated to [-2, 2]; dividing by it restores the target std
_TRUNC_STD = 0.87962566103423978

ParamTree = dict  # str path -> Tensor, insertion ordered

PATCH_PATTERN = "b (ht hp) (wt wp) c -> b (ht wt) (hp wp c)"


class ConfigError(ValueError):
    """Invalid or unknown configuration field."""


def _choice(name: str, value: str, options: tuple[str, ...]) -> None:
    if value not in options:
        raise ConfigError(f"{name}={value!r} is invalid; valid options: {', '.join(options)}")


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple[int, int] = (28, 28)
    channels: int = 1
    patch_size: int = 7
    hidden: int = 64
    depth: int = 4
    heads: int = 4
    mlp_dim: int = 128
    num_classes: int = 10
    stem_norm: str = "none"
    stem_norm_type: str = "layernorm"
    block_sa_ln: str = "pre"
    block_mlp_ln: str = "pre"
    block_extra: str = "none"
    pool: str = "tok"

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        for name in ("channels", "patch_size", "hidden", "depth", "heads", "mlp_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        _choice("stem_norm", self.stem_norm, STEM_NORMS)
        _choice("stem_norm_type", self.stem_norm_type, NORM_TYPES)
        _choice("block_sa_ln", self.block_sa_ln, PLACEMENTS)
        _choice("block_mlp_ln", self.block_mlp_ln, PLACEMENTS)
        _choice("block_extra", self.block_extra, BLOCK_EXTRAS)
        _choice("pool", self.pool, POOLS)

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        if "variant" in d:
            base = cls.from_variant(
                d.pop("variant"),
                image_size=d.get("image_size", (224, 224)),
                channels=d.get("channels", 3),
                num_classes=d.get("num_classes", 1000),
            ).to_dict()
            base.update(d)
            d = base
        known = {f.name for f in dataclasses.fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown model config key {key!r}; valid keys: {', '.join(sorted(known))}")
        return cls(**d)

    @classmethod
    def from_variant(cls, name: str, **overrides) -> "ModelConfig":
        """Build from a 'Ti/16'-style name (width/heads/mlp/depth per size letter)."""
        size, _, patch = name.partition("/")
        if size not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; sizes: {', '.join(VARIANTS)}")
        hidden, heads, mlp_dim, depth = VARIANTS[size]
        fields = dict(hidden=hidden, heads=heads, mlp_dim=mlp_dim, depth=depth)
        if patch:
            fields["patch_size"] = int(patch)
        fields.update(overrides)
        return cls(**fields)


def placement_grid() -> list[tuple[str, str]]:
    """All (self-attention LN, MLP LN) placements; (pre, pre) is the standard ViT."""
    return list(itertools.product(PLACEMENTS, PLACEMENTS))


# ---------------------------------------------------------------------------
# initialization


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2
    return z * (std / _TRUNC_STD)


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(arr, requires_grad=True, dtype=dtype)


def _add_dense(tree, rng, path, fan_in, fan_out, dtype, bias_value=0.0):
    tree[f"{path}/kernel"] = _param(_truncated_normal(rng, (fan_in, fan_out), 1 / math.sqrt(fan_in)), dtype)
    tree[f"{path}/bias"] = _param(np.full(fan_out, bias_value), dtype)


def _add_norm(tree, path, dim, kind, dtype):
    for name in norm_param_names(kind):
        tree[f"{path}/{name}"] = _param(np.ones(dim) if name == "gamma" else np.zeros(dim), dtype)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32, loss: str = "sigmoid_xent") -> ParamTree:
    """Fresh parameters, deterministic in ``seed``.

    Kernels: truncated normal with std 1/sqrt(fan_in).  Biases, class token:
    zero.  Position embeddings: normal(0.02).  Norm scales one, shifts zero.
    The head bias starts at -6.9 under sigmoid cross-entropy.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    D, kind = cfg.hidden, cfg.stem_norm_type
    tree: ParamTree = {}
    if cfg.stem_norm in ("pre", "dpn"):
        _add_norm(tree, "stem/ln0", cfg.patch_dim, kind, dtype)
    _add_dense(tree, rng, "stem/dense", cfg.patch_dim, D, dtype)
    if cfg.stem_norm in ("post", "post_posemb", "dpn"):
        _add_norm(tree, "stem/ln1", D, kind, dtype)
    tree["embed/cls"] = _param(np.zeros(D), dtype)
    tree["embed/posemb"] = _param(rng.standard_normal((cfg.num_patches + 1, D)) * POSEMB_STD, dtype)
    for i in range(cfg.depth):
        p = f"block{i}"
        for path, dim in block_norm_paths(cfg, i):
            _add_norm(tree, path, dim, "layernorm", dtype)
        _add_dense(tree, rng, f"{p}/attn/qkv", D, 3 * D, dtype)
        _add_dense(tree, rng, f"{p}/attn/out", D, D, dtype)
        _add_dense(tree, rng, f"{p}/mlp/fc1", D, cfg.mlp_dim, dtype)
        _add_dense(tree, rng, f"{p}/mlp/fc2", cfg.mlp_dim, D, dtype)
    _add_norm(tree, "head/norm", D, "layernorm", dtype)
    bias = HEAD_BIAS_SIGMOID if loss == "sigmoid_xent" else 0.0
    _add_dense(tree, rng, "head/dense", D, cfg.num_classes, dtype, bias_value=bias)
    return tree


def block_norm_paths(cfg: ModelConfig, i: int) -> list[tuple[str, int]]:
    """(path, normalized length) of every LayerNorm inside block ``i``."""
    p, D = f"block{i}", cfg.hidden
    out = []
    if cfg.block_sa_ln in ("pre", "pre_post"):
        out.append((f"{p}/attn/ln_pre", D))
    if cfg.block_extra != "none":
        out.append((f"{p}/attn/ln_extra", D))
    if cfg.block_sa_ln in ("post", "pre_post"):
        out.append((f"{p}/attn/ln_post", D))
    if cfg.block_mlp_ln in ("pre", "pre_post"):
        out.append((f"{p}/mlp/ln_pre", D))
    if cfg.block_extra != "none":
        out.append((f"{p}/mlp/ln_extra", cfg.mlp_dim))
    if cfg.block_mlp_ln in ("post", "pre_post"):
        out.append((f"{p}/mlp/ln_post", D))
    return out


def param_group(path: str) -> str | None:
    """Layer key used for per-layer gradient norms: stem, block<i> or head."""
    head = path.split("/", 1)[0]
    if head in ("stem", "head") or head.startswith("block"):
        return head
    return None


# ---------------------------------------------------------------------------
# forward


def patchify(images: Tensor, patch: int) -> Tensor:
    """[B, H, W, C] -> [B, HW/P^2, P*P*C]; tokens row-major over the patch grid."""
    if images.ndim != 4:
        raise T.ShapeError(f"expected [B, H, W, C] images, got shape {images.shape}")
    _, h, w, _ = images.shape
    if h % patch or w % patch:
        raise T.ShapeError(f"image {h}x{w} not divisible into {patch}x{patch} patches")
    return T.rearrange(images, PATCH_PATTERN, hp=patch, wp=patch)


def unpatchify(tokens: Tensor, patch: int, grid: tuple[int, int], channels: int) -> Tensor:
    inverse = "b (ht wt) (hp wp c) -> b (ht hp) (wt wp) c"
    return T.rearrange(tokens, inverse, ht=grid[0], wt=grid[1], hp=patch, wp=patch, c=channels)


def dense(x: Tensor, params: ParamTree, path: str) -> Tensor:
    return x @ params[f"{path}/kernel"] + params[f"{path}/bias"]


def _ln(x: Tensor, params: ParamTree, path: str) -> Tensor:
    return layer_norm(x, NormParams(params[f"{path}/gamma"], params[f"{path}/beta"], EPS))


def _stem_norm(x: Tensor, cfg: ModelConfig, params: ParamTree, path: str) -> Tensor:
    names = norm_param_names(cfg.stem_norm_type)
    return apply_norm(cfg.stem_norm_type, x, {n: params[f"{path}/{n}"] for n in names})


def stem_forward(patches: Tensor, cfg: ModelConfig, params: ParamTree) -> tuple[Tensor, bool]:
    """Project raw patches to tokens under the configured stem normalization.

    Returns the tokens and whether the embedding-side norm was deferred until
    after the position embeddings are added (``post_posemb``).
    """
    mode = cfg.stem_norm
    _choice("stem_norm", mode, STEM_NORMS)
    x = patches
    if mode in ("pre", "dpn"):
        x = _stem_norm(x, cfg, params, "stem/ln0")
    x = dense(x, params, "stem/dense")
    if mode in ("post", "dpn"):
        x = _stem_norm(x, cfg, params, "stem/ln1")
    return x, mode == "post_posemb"


def attention_block(x: Tensor, cfg: ModelConfig, params: ParamTree, prefix: str) -> Tensor:
    """Residual multi-head self-attention with the configured LN placement."""
    B, N, D = x.shape
    heads = cfg.heads
    p = f"{prefix}/attn"
    h = _ln(x, params, f"{p}/ln_pre") if cfg.block_sa_ln in ("pre", "pre_post") else x
    qkv = T.rearrange(dense(h, params, f"{p}/qkv"), "b n (k h d) -> k b h n d", k=3, h=heads)
    q, k, v = (T.reshape(T.slice_axis(qkv, 0, i, i + 1), (B, heads, N, D // heads)) for i in range(3))
    logits = T.scale(q @ T.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(D // heads))
    o = T.rearrange(T.softmax(logits, axis=-1) @ v, "b h n d -> b n (h d)")
    if cfg.block_extra == "subln":
        o = _ln(o, params, f"{p}/ln_extra")
    o = dense(o, params, f"{p}/out")
    if cfg.block_extra == "normformer":
        o = _ln(o, params, f"{p}/ln_extra")
    if cfg.block_sa_ln in ("post", "pre_post"):
        o = _ln(o, params, f"{p}/ln_post")
    return x + o


def mlp_block(x: Tensor, cfg: ModelConfig, params: ParamTree, prefix: str) -> Tensor:
    p = f"{prefix}/mlp"
    h = _ln(x, params, f"{p}/ln_pre") if cfg.block_mlp_ln in ("pre", "pre_post") else x
    h = dense(h, params, f"{p}/fc1")
    if cfg.block_extra == "subln":
        h = _ln(h, params, f"{p}/ln_extra")
    h = T.gelu(h)
    if cfg.block_extra == "normformer":
        h = _ln(h, params, f"{p}/ln_extra")
    h = dense(h, params, f"{p}/fc2")
    if cfg.block_mlp_ln in ("post", "pre_post"):
        h = _ln(h, params, f"{p}/ln_post")
    return x + h


def _as_input(images, params: ParamTree) -> Tensor:
    dtype = params["stem/dense/kernel"].dtype
    if isinstance(images, Tensor) and images.dtype == dtype:
        return images
    data = images.data if isinstance(images, Tensor) else images
    return Tensor(data, dtype=dtype)


def embed(images, cfg: ModelConfig, params: ParamTree) -> Tensor:
    """Patchify, stem, class token and position embeddings: [B, N+1, D]."""
    images = _as_input(images, params)
    B = images.shape[0]
    tokens, deferred = stem_forward(patchify(images, cfg.patch_size), cfg, params)
    cls = T.broadcast_to(T.reshape(params["embed/cls"], (1, 1, cfg.hidden)), (B, 1, cfg.hidden))
    x = T.concat([cls, tokens], axis=1) + params["embed/posemb"]
    if deferred:
        x = _stem_norm(x, cfg, params, "stem/ln1")
    return x


def vit_forward(images, cfg: ModelConfig, params: ParamTree) -> Tensor:
    """Images [B, H, W, C] -> logits [B, num_classes]."""
    x = embed(images, cfg, params)
    for i in range(cfg.depth):
        x = attention_block(x, cfg, params, f"block{i}")
        x = mlp_block(x, cfg, params, f"block{i}")
    x = _ln(x, params, "head/norm")
    token = T.reshape(T.slice_axis(x, 1, 0, 1), (x.shape[0], cfg.hidden))
    return dense(token, params, "head/dense")


# ---------------------------------------------------------------------------
# resolution change


def posemb_interpolate(posemb: Tensor, new_grid: tuple[int, int], old_grid: tuple[int, int] | None = None) -> Tensor:
    """Bilinearly resample the patch rows of a [N+1, D] table to a new grid.

    Row 0 (class token) passes through.  Sample positions align the corner
    pixels of the old and new grids.
    """
    data = posemb.data
    n = data.shape[0] - 1
    if old_grid is None:
        side = math.isqrt(n)
        if side * side != n:
            raise ValueError(f"{n} position rows do not form a square grid; pass old_grid")
        old_grid = (side, side)
    gh, gw = old_grid
    if gh * gw != n:
        raise ValueError(f"{n} position rows do not match grid {old_grid}")
    nh, nw = new_grid
    if (nh, nw) == (gh, gw):
        return Tensor(data)
    grid = data[1:].reshape(gh, gw, -1)
    grid = _resample_axis(grid, nh, 0)
    grid = _resample_axis(grid, nw, 1)
    out = np.concatenate([data[:1], grid.reshape(nh * nw, -1)], axis=0)
    return Tensor(out.astype(data.dtype))


def _resample_axis(a: np.ndarray, size: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    if n == size:
        return a
    if n == 1:
        return np.repeat(a, size, axis=axis)
    pos = np.linspace(0.0, n - 1, size) if size > 1 else np.zeros(1)
    lo = np.clip(np.floor(pos).astype(int), 0, n - 2)
    frac = pos - lo
    shape = [1] * a.ndim
    shape[axis] = size
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1 - frac) + np.take(a, lo + 1, axis=axis) * frac


def count_params(params: ParamTree) -> int:
    return sum(t.size for t in params.values())
