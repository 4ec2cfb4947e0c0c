"""Tubelet-tokenized transformer classifier for T x H x W x C volumes.

A volume's slice axis is treated like time: the volume is cut into
non-overlapping tubelets, each flattened and linearly embedded, learned
positional encodings are added, and a stack of pre-norm encoder blocks
(joint spatio-temporal multi-head self-attention + ReLU FFN) feeds a
softmax classification head.

Two pooling modes are supported. `global_average` (the default) pools
the final token embeddings by their mean and reproduces the reference
parameter count exactly; `cls_token` prepends a learned classification
token (with its own positional row) and classifies from its final
embedding, which costs 2*embed_dim extra parameters.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .errors import CheckpointMismatchError, ConfigError, DimensionError
from .rng import Rng

POOLING_MODES = ("global_average", "cls_token")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the reference setup."""

    slices: int = 32
    height: int = 64
    width: int = 64
    channels: int = 1
    patch_slices: int = 32
    patch_height: int = 16
    patch_width: int = 16
    embed_dim: int = 32
    num_heads: int = 16
    num_layers: int = 16
    ffn_mult: int = 4
    layer_norm_eps: float = 1e-6
    dropout: float = 0.0
    pooling: str = "global_average"
    num_classes: int = 3

    def __post_init__(self):
        for name in ("slices", "height", "width", "channels",
                     "patch_slices", "patch_height", "patch_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.patch_slices > self.slices or self.patch_height > self.height \
                or self.patch_width > self.width:
            raise ConfigError("patch extents cannot exceed input extents")
        if self.embed_dim < 1 or self.num_heads < 1:
            raise ConfigError("embed_dim and num_heads must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        if self.ffn_mult < 1:
            raise ConfigError("ffn_mult must be >= 1")
        if self.layer_norm_eps <= 0:
            raise ConfigError("layer_norm_eps must be positive")
        if self.dropout != 0.0:
            raise ConfigError("dropout is a reserved hook and must stay 0.0")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def token_width(self) -> int:
        return self.patch_slices * self.patch_height * self.patch_width * self.channels

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        return (self.slices, self.height, self.width, self.channels)


class TokenGrid(NamedTuple):
    t: int
    h: int
    w: int
    total: int


def token_grid(config: ModelConfig) -> TokenGrid:
    """Tokens per axis under floor division; trailing voxels are dropped."""
    t = config.slices // config.patch_slices
    h = config.height // config.patch_height
    w = config.width // config.patch_width
    if t == 0 or h == 0 or w == 0:
        raise ConfigError(f"token grid has a zero dimension: ({t}, {h}, {w})")
    return TokenGrid(t, h, w, t * h * w)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) listing of every learnable array.

    This order is the checkpoint file order and the order in which the
    initializer consumes random numbers.
    """
    d = config.embed_dim
    hidden = config.ffn_mult * d
    n_pos = token_grid(config).total + (1 if config.pooling == "cls_token" else 0)
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("embed.weight", (config.token_width, d)),
        ("embed.bias", (d,)),
        ("pos_embed", (n_pos, d)),
    ]
    if config.pooling == "cls_token":
        shapes.append(("cls_token", (d,)))
    for i in range(config.num_layers):
        prefix = f"layers.{i}."
        shapes += [
            (prefix + "ln1.gamma", (d,)),
            (prefix + "ln1.beta", (d,)),
            (prefix + "attn.q_weight", (d, d)),
            (prefix + "attn.q_bias", (d,)),
            (prefix + "attn.k_weight", (d, d)),
            (prefix + "attn.k_bias", (d,)),
            (prefix + "attn.v_weight", (d, d)),
            (prefix + "attn.v_bias", (d,)),
            (prefix + "attn.out_weight", (d, d)),
            (prefix + "attn.out_bias", (d,)),
            (prefix + "ln2.gamma", (d,)),
            (prefix + "ln2.beta", (d,)),
            (prefix + "ffn.w1", (d, hidden)),
            (prefix + "ffn.b1", (hidden,)),
            (prefix + "ffn.w2", (hidden, d)),
            (prefix + "ffn.b2", (d,)),
        ]
    shapes += [
        ("final_norm.gamma", (d,)),
        ("final_norm.beta", (d,)),
        ("head.weight", (d, config.num_classes)),
        ("head.bias", (config.num_classes,)),
    ]
    return shapes


def count_params(config: ModelConfig) -> int:
    """Exact trainable-scalar count, in closed form."""
    d = config.embed_dim
    hidden = config.ffn_mult * d
    n_tokens = token_grid(config).total
    total = config.token_width * d + d            # embedding weight + bias
    total += n_tokens * d                         # positional table
    if config.pooling == "cls_token":
        total += 2 * d                            # cls embedding + its positional row
    per_layer = (
        4 * d                                     # two layer norms
        + 4 * (d * d + d)                         # q, k, v, output projections
        + d * hidden + hidden + hidden * d + d    # ffn
    )
    total += config.num_layers * per_layer
    total += 2 * d                                # final layer norm
    total += d * config.num_classes + config.num_classes
    return total


class EncoderLayerParams:
    """Weights of one encoder block, views into ModelParams arrays."""

    __slots__ = ("ln1_gamma", "ln1_beta", "q_weight", "q_bias", "k_weight", "k_bias",
                 "v_weight", "v_bias", "out_weight", "out_bias", "ln2_gamma", "ln2_beta",
                 "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")

    def __init__(self, arrays: dict[str, T.Tensor], index: int):
        prefix = f"layers.{index}."
        self.ln1_gamma = arrays[prefix + "ln1.gamma"]
        self.ln1_beta = arrays[prefix + "ln1.beta"]
        self.q_weight = arrays[prefix + "attn.q_weight"]
        self.q_bias = arrays[prefix + "attn.q_bias"]
        self.k_weight = arrays[prefix + "attn.k_weight"]
        self.k_bias = arrays[prefix + "attn.k_bias"]
        self.v_weight = arrays[prefix + "attn.v_weight"]
        self.v_bias = arrays[prefix + "attn.v_bias"]
        self.out_weight = arrays[prefix + "attn.out_weight"]
        self.out_bias = arrays[prefix + "attn.out_bias"]
        self.ln2_gamma = arrays[prefix + "ln2.gamma"]
        self.ln2_beta = arrays[prefix + "ln2.beta"]
        self.ffn_w1 = arrays[prefix + "ffn.w1"]
        self.ffn_b1 = arrays[prefix + "ffn.b1"]
        self.ffn_w2 = arrays[prefix + "ffn.w2"]
        self.ffn_b2 = arrays[prefix + "ffn.b2"]


class ModelParams:
    """All learnable weights, addressable by canonical name."""

    def __init__(self, config: ModelConfig, arrays: dict[str, T.Tensor]):
        self.config = config
        self._arrays = arrays
        self.embed_weight = arrays["embed.weight"]
        self.embed_bias = arrays["embed.bias"]
        self.pos_embed = arrays["pos_embed"]
        self.cls_token = arrays.get("cls_token")
        self.layers = [EncoderLayerParams(arrays, i) for i in range(config.num_layers)]
        self.final_gamma = arrays["final_norm.gamma"]
        self.final_beta = arrays["final_norm.beta"]
        self.head_weight = arrays["head.weight"]
        self.head_bias = arrays["head.bias"]

    @classmethod
    def _build(cls, config: ModelConfig, dtype, fill) -> "ModelParams":
        arrays = {}
        for name, shape in parameter_shapes(config):
            data = np.asarray(fill(name, shape), dtype=dtype)
            arrays[name] = T.Tensor(data, requires_grad=True)
        return cls(config, arrays)

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, dtype=np.float32,
                   weight_std: float = 0.02) -> "ModelParams":
        """Truncated-normal weights, zero biases/positions, unit gammas.

        The default std keeps logits bounded at init and, with the
        residual blocks, makes the untrained network close to an identity
        map. Gradient-verification code passes a larger std so gradients
        sit well above float64 roundoff.
        """
        rng = Rng(seed)

        def fill(name, shape):
            if name.endswith(".gamma"):
                return np.ones(shape)
            if name.endswith(("weight", ".w1", ".w2")):
                n = int(np.prod(shape))
                return rng.truncated_normal(n, std=weight_std).reshape(shape)
            return np.zeros(shape)

        return cls._build(config, dtype, fill)

    def replace_array(self, name: str, tensor: T.Tensor) -> "ModelParams":
        """A ModelParams sharing every array except `name`, swapped for
        `tensor`. Lets verification code differentiate with respect to a
        single parameter array."""
        if name not in self._arrays:
            raise CheckpointMismatchError(f"unknown parameter array '{name}'")
        if tensor.shape != self._arrays[name].shape:
            raise DimensionError(
                f"replacement for '{name}' has shape {tensor.shape}, "
                f"expected {self._arrays[name].shape}"
            )
        arrays = dict(self._arrays)
        arrays[name] = tensor
        return ModelParams(self.config, arrays)

    @classmethod
    def zeros(cls, config: ModelConfig, dtype=np.float32) -> "ModelParams":
        return cls._build(config, dtype, lambda name, shape: np.zeros(shape))

    @classmethod
    def from_arrays(cls, config: ModelConfig, mapping: dict[str, np.ndarray],
                    dtype=np.float32) -> "ModelParams":
        """Build from named arrays, verifying names and shapes.

        Raises CheckpointMismatchError naming the first offending array
        in canonical order.
        """
        expected = parameter_shapes(config)
        for name, shape in expected:
            if name not in mapping:
                raise CheckpointMismatchError(f"missing parameter array '{name}'")
            got = tuple(mapping[name].shape)
            if got != shape:
                raise CheckpointMismatchError(
                    f"parameter array '{name}' has shape {got}, expected {shape}"
                )
        known = {name for name, _ in expected}
        for name in mapping:
            if name not in known:
                raise CheckpointMismatchError(f"unexpected parameter array '{name}'")
        arrays = {
            name: T.Tensor(np.asarray(mapping[name], dtype=dtype), requires_grad=True)
            for name, _ in expected
        }
        return cls(config, arrays)

    def named_parameters(self) -> list[tuple[str, T.Tensor]]:
        return [(name, self._arrays[name]) for name, _ in parameter_shapes(self.config)]

    def tensors(self) -> list[T.Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors())

    @property
    def dtype(self):
        return self.embed_weight.dtype


# ---------------------------------------------------------------------------
# tokenization and forward pass
# ---------------------------------------------------------------------------


def _voxels_of(volume) -> np.ndarray:
    arr = volume.voxels if hasattr(volume, "voxels") else np.asarray(volume)
    if arr.ndim != 4:
        raise DimensionError(f"expected a T,H,W,C volume, got rank {arr.ndim}")
    return arr


def _extract_batch(batch: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Tubelet tokens for a [B,T,H,W,C] array -> [B, N, token_width]."""
    b, t, h, w, c = batch.shape
    gt = t // config.patch_slices
    gh = h // config.patch_height
    gw = w // config.patch_width
    if gt == 0 or gh == 0 or gw == 0:
        raise DimensionError(
            f"volume extents {(t, h, w)} smaller than patch "
            f"{(config.patch_slices, config.patch_height, config.patch_width)}"
        )
    kept = (gt * config.patch_slices, gh * config.patch_height, gw * config.patch_width)
    if kept != (t, h, w):
        warnings.warn(
            f"volume extents {(t, h, w)} not divisible by patch extents; "
            f"cropping to {kept}",
            stacklevel=3,
        )
        batch = batch[:, :kept[0], :kept[1], :kept[2], :]
    tokens = batch.reshape(b, gt, config.patch_slices, gh, config.patch_height,
                           gw, config.patch_width, c)
    tokens = tokens.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return tokens.reshape(b, gt * gh * gw, config.token_width)


def extract_tubelets(volume, config: ModelConfig) -> np.ndarray:
    """Flatten a volume into its token matrix [N, token_width].

    Tokens are ordered slice-block-major, then height, then width; within
    a token the voxel order is (t, h, w, c) row-major. Together the
    tokens are a bijective rearrangement of the (cropped) volume.
    """
    arr = _voxels_of(volume)
    return _extract_batch(arr[None], config)[0]


def _as_batch_array(volumes, config: ModelConfig) -> np.ndarray:
    if isinstance(volumes, np.ndarray) and volumes.ndim == 5:
        batch = volumes
    else:
        if isinstance(volumes, np.ndarray) and volumes.ndim == 4:
            volumes = [volumes]
        elif hasattr(volumes, "voxels"):
            volumes = [volumes]
        batch = np.stack([_voxels_of(v) for v in volumes])
    if batch.shape[1:] != config.input_shape:
        raise DimensionError(
            f"volume shape {batch.shape[1:]} does not match configured input "
            f"{config.input_shape}"
        )
    return batch


def embed(tokens, params: ModelParams, config: ModelConfig) -> T.Tensor:
    """Project tokens to the embedding space and add positional rows.

    Accepts [N, token_width] or [B, N, token_width]; under cls_token
    pooling the learned classification row is prepended with its own
    positional row.
    """
    data = tokens.data if isinstance(tokens, T.Tensor) else np.asarray(tokens)
    single = data.ndim == 2
    if single:
        data = data[None]
    if data.ndim != 3:
        raise DimensionError(f"tokens must be rank 2 or 3, got rank {data.ndim}")
    if data.shape[-1] != config.token_width:
        raise DimensionError(
            f"token width {data.shape[-1]} does not match embedding input "
            f"{config.token_width}"
        )
    if data.shape[1] != token_grid(config).total:
        raise DimensionError(
            f"got {data.shape[1]} tokens, positional table holds "
            f"{token_grid(config).total}"
        )
    x = T.Tensor(data.astype(params.dtype, copy=False))
    z = T.matmul(x, params.embed_weight) + params.embed_bias
    if config.pooling == "cls_token":
        batch = data.shape[0]
        d = config.embed_dim
        anchor = T.Tensor(np.zeros((batch, 1, d), dtype=params.dtype))
        cls_rows = anchor + T.reshape(params.cls_token, (1, 1, d))
        z = T.concat([cls_rows, z], axis=1)
    z = z + params.pos_embed
    if single:
        z = T.reshape(z, z.shape[1:])
    return z


def attention(q: T.Tensor, k: T.Tensor, v: T.Tensor,
              attn_sink: Optional[list] = None) -> T.Tensor:
    """Scaled dot-product attention over the last two axes.

    Scores are q . k^T / sqrt(d_key) with d_key the trailing extent of q;
    each softmaxed row is a probability vector over the tokens. When
    attn_sink is a list the attention weights are appended to it.
    """
    d_key = q.shape[-1]
    perm = tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)
    scores = T.scale(T.matmul(q, T.transpose(k, perm)), 1.0 / math.sqrt(d_key))
    alpha = T.softmax(scores, axis=-1)
    if attn_sink is not None:
        attn_sink.append(alpha.data)
    return T.matmul(alpha, v)


def _project(x: T.Tensor, weight: T.Tensor, bias: T.Tensor,
             config: ModelConfig) -> T.Tensor:
    """x [B,N,d] -> per-head stack [B, heads, N, head_dim]."""
    b, n, _ = x.shape
    y = T.matmul(x, weight) + bias
    y = T.reshape(y, (b, n, config.num_heads, config.head_dim))
    return T.transpose(y, (0, 2, 1, 3))


def mhsa(x: T.Tensor, layer: EncoderLayerParams, config: ModelConfig,
         attn_sink: Optional[list] = None) -> T.Tensor:
    """Multi-head self-attention: per-head attention, concat, output projection."""
    single = x.data.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[-1] != config.embed_dim:
        raise ConfigError(
            f"input width {x.shape[-1]} does not match embed_dim {config.embed_dim} "
            f"({config.num_heads} heads of {config.head_dim})"
        )
    b, n, d = x.shape
    q = _project(x, layer.q_weight, layer.q_bias, config)
    k = _project(x, layer.k_weight, layer.k_bias, config)
    v = _project(x, layer.v_weight, layer.v_bias, config)
    heads = attention(q, k, v, attn_sink)
    merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (b, n, d))
    out = T.matmul(merged, layer.out_weight) + layer.out_bias
    if single:
        out = T.reshape(out, out.shape[1:])
    return out


def ffn(x: T.Tensor, layer: EncoderLayerParams) -> T.Tensor:
    """Two dense layers with a ReLU between, applied rowwise."""
    hidden = T.relu(T.matmul(x, layer.ffn_w1) + layer.ffn_b1)
    return T.matmul(hidden, layer.ffn_w2) + layer.ffn_b2


def encoder_block(x: T.Tensor, layer: EncoderLayerParams, config: ModelConfig,
                  attn_sink: Optional[list] = None) -> T.Tensor:
    """Pre-norm residual block: x + attn(norm(x)), then y + ffn(norm(y))."""
    eps = config.layer_norm_eps
    y = x + mhsa(T.layer_norm(x, layer.ln1_gamma, layer.ln1_beta, eps), layer,
                 config, attn_sink)
    return y + ffn(T.layer_norm(y, layer.ln2_gamma, layer.ln2_beta, eps), layer)


def encode(z: T.Tensor, params: ModelParams, config: ModelConfig,
           attn_sink: Optional[list] = None) -> T.Tensor:
    for layer in params.layers:
        z = encoder_block(z, layer, config, attn_sink)
    return z


def classifier_logits(z: T.Tensor, params: ModelParams, config: ModelConfig) -> T.Tensor:
    """Final layer norm, pooling, and the linear head (no softmax)."""
    single = z.data.ndim == 2
    if single:
        z = T.reshape(z, (1,) + z.shape)
    h = T.layer_norm(z, params.final_gamma, params.final_beta, config.layer_norm_eps)
    if config.pooling == "cls_token":
        pooled = T.take_index(h, 0, axis=1)
    else:
        pooled = T.reduce_mean(h, axis=1)
    logits = T.matmul(pooled, params.head_weight) + params.head_bias
    if single:
        logits = T.reshape(logits, (config.num_classes,))
    return logits


def pool_and_classify(z: T.Tensor, params: ModelParams, config: ModelConfig) -> T.Tensor:
    """Class probabilities from final token embeddings; rows sum to 1."""
    return T.softmax(classifier_logits(z, params, config), axis=-1)


def forward_logits(volumes, params: ModelParams, config: ModelConfig,
                   attn_sink: Optional[list] = None) -> T.Tensor:
    """Logits [batch, classes] for a batch of volumes.

    Each volume is processed independently: tokenize, embed, run the
    encoder stack, pool, and project.
    """
    batch = _as_batch_array(volumes, config)
    tokens = _extract_batch(batch, config)
    z = embed(tokens, params, config)
    z = encode(z, params, config, attn_sink)
    return classifier_logits(z, params, config)


def forward(volumes, params: ModelParams, config: ModelConfig,
            attn_sink: Optional[list] = None) -> T.Tensor:
    """Class probabilities [batch, classes]; rows sum to 1."""
    return T.softmax(forward_logits(volumes, params, config, attn_sink), axis=-1)


def predict_classes(probs: np.ndarray) -> np.ndarray:
    """Argmax per row; exact ties resolve to the lowest class index."""
    arr = probs.data if isinstance(probs, T.Tensor) else np.asarray(probs)
    return np.argmax(arr, axis=-1)
