"""Vision and text transformer towers with optional token masking.

Both towers are pre-norm transformers. The image tower patchifies, prepends a
class token, adds positional embeddings, and (in training) may drop a random
subset of patch tokens before the blocks; the class token always survives.
The text tower runs causal attention and pools at the end-of-sequence token,
whose id is by convention ``vocab_size - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, InputError
from .resample import bilinear_resize
from .tensor import Tensor

NEG_INF = -1e9  # additive attention mask; survives float32 and max-subtraction


@dataclass(frozen=True)
class ImageEncoderConfig:
    layers: int
    width: int
    heads: int
    image_size: int
    patch_size: int
    channels: int = 3
    drop_path: float = 0.0

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise DimensionError(f"width {self.width} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size != 0:
            raise DimensionError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid


@dataclass(frozen=True)
class TextEncoderConfig:
    layers: int
    width: int
    heads: int
    vocab_size: int
    context_length: int
    drop_path: float = 0.0

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise DimensionError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 1


@dataclass(frozen=True)
class ModelConfig:
    image: ImageEncoderConfig
    text: TextEncoderConfig
    embed_dim: int = 0  # 0 means "use text width"

    def __post_init__(self):
        if self.embed_dim == 0:
            object.__setattr__(self, "embed_dim", self.text.width)


@dataclass(frozen=True)
class MaskSpec:
    """Random token dropping: keep ceil((1-ratio) * n) patches, at least one."""

    ratio: float
    keep_special: bool = True

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ContractError(f"mask ratio must be in [0, 1), got {self.ratio}")

    def kept_count(self, n_tokens: int) -> int:
        return max(1, math.ceil((1.0 - self.ratio) * n_tokens))


@dataclass
class EmbeddingOutput:
    vector: Tensor  # [batch, embed_dim]
    normalized: bool


# -- parameter tables ---------------------------------------------------------


def _block_shapes(width: int) -> dict[str, tuple[int, ...]]:
    hidden = 4 * width
    return {
        "norm1.gain": (width,),
        "norm1.bias": (width,),
        "attn.q.weight": (width, width),
        "attn.q.bias": (width,),
        "attn.k.weight": (width, width),
        "attn.k.bias": (width,),
        "attn.v.weight": (width, width),
        "attn.v.bias": (width,),
        "attn.proj.weight": (width, width),
        "attn.proj.bias": (width,),
        "norm2.gain": (width,),
        "norm2.bias": (width,),
        "mlp.fc.weight": (width, hidden),
        "mlp.fc.bias": (hidden,),
        "mlp.proj.weight": (hidden, width),
        "mlp.proj.bias": (width,),
    }


def image_param_shapes(cfg: ImageEncoderConfig, embed_dim: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (cfg.channels * cfg.patch_size**2, cfg.width),
        "patch_embed.bias": (cfg.width,),
        "cls_token": (cfg.width,),
        "pos_embed": (1 + cfg.n_patches, cfg.width),
    }
    for i in range(cfg.layers):
        for name, shape in _block_shapes(cfg.width).items():
            shapes[f"blocks.{i}.{name}"] = shape
    shapes["final_norm.gain"] = (cfg.width,)
    shapes["final_norm.bias"] = (cfg.width,)
    shapes["proj"] = (cfg.width, embed_dim)
    return shapes


def text_param_shapes(cfg: TextEncoderConfig, embed_dim: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "token_embed.weight": (cfg.vocab_size, cfg.width),
        "pos_embed": (cfg.context_length, cfg.width),
    }
    for i in range(cfg.layers):
        for name, shape in _block_shapes(cfg.width).items():
            shapes[f"blocks.{i}.{name}"] = shape
    shapes["proj"] = (cfg.width, embed_dim)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    """Trainable scalars in both towers plus the logit scale."""
    image = sum(int(np.prod(s)) for s in image_param_shapes(cfg.image, cfg.embed_dim).values())
    text = sum(int(np.prod(s)) for s in text_param_shapes(cfg.text, cfg.embed_dim).values())
    return image + text + 1


def init_tower_params(
    shapes: dict[str, tuple[int, ...]], layers: int, width: int, rng: np.random.Generator
) -> dict[str, Tensor]:
    """Fresh parameters; scheme follows the usual CLIP depth-scaled normals."""
    attn_std = width**-0.5
    proj_std = (width**-0.5) * ((2 * layers) ** -0.5) if layers else width**-0.5
    fc_std = (2 * width) ** -0.5
    params: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        if name.endswith(("norm1.gain", "norm2.gain", "final_norm.gain")):
            data = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias") or name == "cls_token":
            data = np.zeros(shape, dtype=np.float32)
            if name == "cls_token":
                data = (rng.standard_normal(shape) * 0.02).astype(np.float32)
        elif name in ("pos_embed", "token_embed.weight", "patch_embed.weight"):
            data = (rng.standard_normal(shape) * 0.02).astype(np.float32)
        elif ".attn.proj." in name or ".mlp.proj." in name:
            data = (rng.standard_normal(shape) * proj_std).astype(np.float32)
        elif ".mlp.fc." in name:
            data = (rng.standard_normal(shape) * fc_std).astype(np.float32)
        elif name == "proj":
            data = (rng.standard_normal(shape) * attn_std).astype(np.float32)
        else:  # q/k/v weights
            data = (rng.standard_normal(shape) * attn_std).astype(np.float32)
        params[name] = Tensor(data, requires_grad=True)
    return params


def validate_params(shapes: dict[str, tuple[int, ...]], params: dict[str, Tensor], tower: str) -> None:
    for name, shape in shapes.items():
        if name not in params:
            raise DimensionError(f"{tower}.{name}: parameter missing")
        got = params[name].shape
        if tuple(got) != tuple(shape):
            raise DimensionError(f"{tower}.{name}: expected shape {shape}, got {got}")


def assign_depth(name: str, layers: int) -> int:
    """Depth index used for layer-wise LR decay: 0 = embeddings, layers+1 = head."""
    if name.startswith("blocks."):
        return int(name.split(".")[1]) + 1
    if name.startswith(("final_norm.", "proj")):
        return layers + 1
    return 0


# -- ops ------------------------------------------------------------------------


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """[b,c,H,W] -> [b, n, c*p*p] raster-order non-overlapping patches."""
    if images.ndim != 4:
        raise DimensionError(f"patchify expects [b,c,H,W], got {images.shape}")
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise DimensionError(f"image extent {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = T.reshape(images, (b, c, gh, patch_size, gw, patch_size))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, gh * gw, c * patch_size * patch_size))


def sample_mask(n_tokens: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of kept patch tokens (class token handled by the caller)."""
    if n_tokens < 1:
        raise ContractError(f"n_tokens must be >= 1, got {n_tokens}")
    kept = spec.kept_count(n_tokens)
    idx = rng.choice(n_tokens, size=kept, replace=False)
    return np.sort(idx)


def interpolate_pos_embed(pos: Tensor, new_grid: int) -> Tensor:
    """Resample a [1 + g*g, d] positional table to grid ``new_grid``.

    The class-token row (index 0) is copied through unchanged.
    """
    rows, d = pos.shape
    g = math.isqrt(rows - 1)
    if g * g != rows - 1:
        raise DimensionError(f"positional table has {rows - 1} grid rows, not a perfect square")
    if new_grid == g:
        return Tensor(pos.data.copy())
    grid = pos.data[1:].reshape(g, g, d).transpose(2, 0, 1)
    resized = bilinear_resize(grid, new_grid, new_grid)
    flat = resized.transpose(1, 2, 0).reshape(new_grid * new_grid, d)
    return Tensor(np.concatenate([pos.data[:1], flat], axis=0))


def _linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    lead = x.shape[:-1]
    out = T.matmul(T.reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        out = T.add(out, bias)
    return T.reshape(out, lead + (weight.shape[-1],))


def _attention(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int, causal: bool) -> Tensor:
    b, n, width = x.shape
    hd = width // heads

    def split_heads(t):
        return T.transpose(T.reshape(t, (b, n, heads, hd)), (0, 2, 1, 3))

    q = split_heads(_linear(x, params[f"{prefix}.q.weight"], params[f"{prefix}.q.bias"]))
    k = split_heads(_linear(x, params[f"{prefix}.k.weight"], params[f"{prefix}.k.bias"]))
    v = split_heads(_linear(x, params[f"{prefix}.v.weight"], params[f"{prefix}.v.bias"]))

    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
    if causal:
        mask = np.triu(np.full((n, n), NEG_INF, dtype=np.float32), k=1)
        scores = T.add(scores, Tensor(mask.reshape(1, 1, n, n)))
    weights = T.softmax_rows(scores)
    out = T.matmul(weights, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, width))
    return _linear(out, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])


def drop_path(branch: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Per-sample residual-branch dropping; identity at rate 0 or in eval."""
    if rate == 0.0 or not training:
        return branch
    if rng is None:
        raise ContractError("drop_path with rate > 0 needs a generator in training mode")
    b = branch.shape[0]
    keep = (rng.random(b) >= rate).astype(np.float32) / (1.0 - rate)
    shape = (b,) + (1,) * (branch.ndim - 1)
    return T.mul(branch, Tensor(keep.reshape(shape)))


def _block(
    x: Tensor,
    params: dict[str, Tensor],
    i: int,
    heads: int,
    causal: bool,
    dp_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    p = f"blocks.{i}"
    h = T.layer_norm(x, params[f"{p}.norm1.gain"], params[f"{p}.norm1.bias"])
    x = T.add(x, drop_path(_attention(h, params, f"{p}.attn", heads, causal), dp_rate, rng, training))
    h = T.layer_norm(x, params[f"{p}.norm2.gain"], params[f"{p}.norm2.bias"])
    h = _linear(T.gelu(_linear(h, params[f"{p}.mlp.fc.weight"], params[f"{p}.mlp.fc.bias"])),
                params[f"{p}.mlp.proj.weight"], params[f"{p}.mlp.proj.bias"])
    return T.add(x, drop_path(h, dp_rate, rng, training))


def encode_image(
    images,
    cfg: ImageEncoderConfig,
    params: dict[str, Tensor],
    mask: MaskSpec | None = None,
    rng: np.random.Generator | None = None,
    embed_dim: int | None = None,
    trace: dict | None = None,
) -> EmbeddingOutput:
    """Embed a batch of images to unit-norm vectors.

    ``mask`` is a training-only argument; evaluation callers leave it None and
    get a deterministic, mask-free forward pass.
    """
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float32))
    if x.ndim != 4 or x.shape[1] != cfg.channels or x.shape[2:] != (cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"images {x.shape} do not match config "
            f"[b,{cfg.channels},{cfg.image_size},{cfg.image_size}]"
        )
    embed_dim = embed_dim if embed_dim is not None else params["proj"].shape[-1]
    validate_params(image_param_shapes(cfg, embed_dim), params, "image")
    if mask is not None and rng is None:
        raise ContractError("masked encoding needs the caller's seeded generator")

    b = x.shape[0]
    tokens = _linear(patchify(x, cfg.patch_size), params["patch_embed.weight"], params["patch_embed.bias"])
    cls = T.add(T.reshape(params["cls_token"], (1, 1, cfg.width)),
                Tensor(np.zeros((b, 1, cfg.width), dtype=np.float32)))
    x = T.concat([cls, tokens], axis=1)
    x = T.add(x, params["pos_embed"])

    if mask is not None:
        kept = np.stack([sample_mask(cfg.n_patches, mask, rng) for _ in range(b)])
        idx = np.concatenate([np.zeros((b, 1), dtype=np.int64), kept + 1], axis=1)
        x = T.take_tokens(x, idx)
    if trace is not None:
        trace["token_positions"] = x.shape[1]

    for i in range(cfg.layers):
        x = _block(x, params, i, cfg.heads, causal=False,
                   dp_rate=cfg.drop_path, rng=rng, training=mask is not None)

    cls_feat = T.reshape(T.take_tokens(x, np.zeros((b, 1), dtype=np.int64)), (b, cfg.width))
    feat = T.layer_norm(cls_feat, params["final_norm.gain"], params["final_norm.bias"])
    out = T.l2_normalize_rows(T.matmul(feat, params["proj"]))
    return EmbeddingOutput(out, normalized=True)


def encode_text(
    token_ids: np.ndarray,
    cfg: TextEncoderConfig,
    params: dict[str, Tensor],
    embed_dim: int | None = None,
) -> EmbeddingOutput:
    """Embed tokenized captions; pools at the (single) end-of-sequence token."""
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise DimensionError(f"token ids must be [b, L], got {ids.shape}")
    b, length = ids.shape
    if length > cfg.context_length:
        raise DimensionError(f"sequence length {length} exceeds context {cfg.context_length}")
    if ids.max() >= cfg.vocab_size or ids.min() < 0:
        raise InputError(f"token id out of range for vocab {cfg.vocab_size}")
    eos_counts = (ids == cfg.eos_id).sum(axis=1)
    bad = np.nonzero(eos_counts != 1)[0]
    if bad.size:
        raise InputError(f"row {int(bad[0])} has {int(eos_counts[bad[0]])} end-of-sequence tokens, expected 1")
    embed_dim = embed_dim if embed_dim is not None else params["proj"].shape[-1]
    validate_params(text_param_shapes(cfg, embed_dim), params, "text")

    x = T.embedding(params["token_embed.weight"], ids)
    x = T.add(x, T.embedding(params["pos_embed"], np.arange(length)))
    for i in range(cfg.layers):
        x = _block(x, params, i, cfg.heads, causal=True)

    eos_pos = np.argmax(ids == cfg.eos_id, axis=1).reshape(b, 1)
    feat = T.reshape(T.take_tokens(x, eos_pos), (b, cfg.width))
    out = T.l2_normalize_rows(T.matmul(feat, params["proj"]))
    return EmbeddingOutput(out, normalized=True)
