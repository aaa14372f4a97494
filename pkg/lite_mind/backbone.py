"""DFT backbone: patchify + embedding, Filter Blocks, and the frequency projector (FreMLP)"""
import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from lite_mind.constants import (
    ACTIVATION_SLOPE, CLIP_TOKENS, CLIP_WIDTH, DEPTH, FILTER_COUNT, INIT_STD,
    NORM_EPS, NSD_VOXELS, PATCH_SIZE,
)
from lite_mind.errors import ConfigError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

VARIANTS = ('hidden', 'cls')
PROJECTOR_KINDS = ('frequency', 'linear')


@dataclass
class BackboneConfig:
    """Shape and ablation settings of one subject's backbone"""
    voxel_len: int = NSD_VOXELS['subj01']
    patch_size: int = PATCH_SIZE
    embed_dim: int = CLIP_WIDTH
    depth: int = DEPTH
    filter_count: int = FILTER_COUNT
    out_tokens: int = CLIP_TOKENS
    out_dim: int = CLIP_WIDTH
    variant: str = 'hidden'
    activation_slope: float = ACTIVATION_SLOPE
    residual: bool = True
    use_norm: bool = True
    filter_blocks: bool = True
    projector_kind: str = 'frequency'
    mlp_ratio: float = 0.0

    def __post_init__(self):
        for name in ('voxel_len', 'patch_size', 'embed_dim', 'depth',
                     'filter_count', 'out_tokens', 'out_dim'):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"backbone.{name} must be >= 1, got {getattr(self, name)}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"backbone.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == 'cls' and self.out_tokens != 1:
            raise ConfigError(f"cls variant needs out_tokens=1, got {self.out_tokens}")
        if self.embed_dim != self.out_dim:
            raise ConfigError(
                f"embed_dim ({self.embed_dim}) must equal out_dim ({self.out_dim}): "
                "tokens align channelwise to the target width")
        if self.projector_kind not in PROJECTOR_KINDS:
            raise ConfigError(f"backbone.projector_kind must be one of {PROJECTOR_KINDS}")
        if self.mlp_ratio < 0:
            raise ConfigError(f"backbone.mlp_ratio must be >= 0, got {self.mlp_ratio}")

    @property
    def n_tokens(self) -> int:
        return math.ceil(self.voxel_len / self.patch_size)

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def output_shape(self) -> Tuple[int, ...]:
        if self.variant == 'cls':
            return (self.out_dim,)
        return (self.out_tokens, self.out_dim)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "BackboneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown backbone fields: {sorted(unknown)}")
        return cls(**values)


def dct_weights(filter_count: int) -> torch.Tensor:
    """c_m = cos((2m-1)pi/(2M)) for m = 1..M; M = 1 uses c_1 = 1"""
    if filter_count == 1:
        return torch.ones(1, dtype=torch.float64)
    m = torch.arange(1, filter_count + 1, dtype=torch.float64)
    return torch.cos((2 * m - 1) * math.pi / (2 * filter_count))


def _uniform(shape, fan_in: int, generator: torch.Generator) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(torch.empty(shape).uniform_(-bound, bound, generator=generator))


def _normal(shape, generator: torch.Generator) -> nn.Parameter:
    return nn.Parameter(torch.empty(shape).normal_(0.0, INIT_STD, generator=generator))


class PatchEmbedder(nn.Module):
    """Shared p->d patch projection plus learnable positional encoding"""

    def __init__(self, n_tokens: int, patch_size: int, embed_dim: int, generator: torch.Generator):
        super().__init__()
        self.proj = _uniform((patch_size, embed_dim), patch_size, generator)
        self.bias = _uniform((embed_dim,), patch_size, generator)
        self.pos = _normal((n_tokens, embed_dim), generator)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return embed(patches, self)


class FilterBlock(nn.Module):
    """Power-spectrum filtering with a complex filter library, around a residual path"""

    def __init__(self, n_tokens: int, embed_dim: int, filter_count: int, generator: torch.Generator,
                 use_norm: bool = True, residual: bool = True, mlp_hidden: int = 0):
        super().__init__()
        # (M, n, d, 2): last axis is (re, im)
        self.filters = _normal((filter_count, n_tokens, embed_dim, 2), generator)
        self.norm_gain = nn.Parameter(torch.ones(embed_dim))
        self.norm_bias = nn.Parameter(torch.zeros(embed_dim))
        self.register_buffer('dct_weights', dct_weights(filter_count).float())
        self.use_norm = use_norm
        self.residual = residual
        self.mlp_hidden = mlp_hidden
        if mlp_hidden > 0:
            self.mlp_norm_gain = nn.Parameter(torch.ones(embed_dim))
            self.mlp_norm_bias = nn.Parameter(torch.zeros(embed_dim))
            self.fc1_weight = _uniform((embed_dim, mlp_hidden), embed_dim, generator)
            self.fc1_bias = _uniform((mlp_hidden,), embed_dim, generator)
            self.fc2_weight = _uniform((mlp_hidden, embed_dim), mlp_hidden, generator)
            self.fc2_bias = _uniform((embed_dim,), mlp_hidden, generator)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return filter_block_forward(t, self)


class FreqProjector(nn.Module):
    """Complex token-axis linear layer W (n x n'), bias B (n'), applied in the frequency domain"""

    def __init__(self, n_tokens: int, out_tokens: int, generator: torch.Generator,
                 activation_slope: float = ACTIVATION_SLOPE):
        super().__init__()
        self.w_re = _uniform((n_tokens, out_tokens), n_tokens, generator)
        self.w_im = _uniform((n_tokens, out_tokens), n_tokens, generator)
        self.b_re = _uniform((out_tokens,), n_tokens, generator)
        self.b_im = _uniform((out_tokens,), n_tokens, generator)
        self.activation_slope = activation_slope

    def forward(self, t_hat: torch.Tensor) -> Tuple[torch.Tensor, float]:
        return fremlp(t_hat, self, self.activation_slope)


class LinearTokenProjector(nn.Module):
    """Real-domain token-axis linear map n -> n' (FreMLP ablation)"""

    def __init__(self, n_tokens: int, out_tokens: int, generator: torch.Generator,
                 activation_slope: float = ACTIVATION_SLOPE):
        super().__init__()
        self.weight = _uniform((n_tokens, out_tokens), n_tokens, generator)
        self.bias = _uniform((out_tokens,), n_tokens, generator)
        self.activation_slope = activation_slope

    def forward(self, t_hat: torch.Tensor) -> Tuple[torch.Tensor, float]:
        mixed = t_hat.transpose(-1, -2) @ self.weight + self.bias
        return F.leaky_relu(mixed, self.activation_slope).transpose(-1, -2), 0.0


def patchify(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Zero-pad the voxel axis to n*p and split it into n rows of p"""
    if patch_size < 1:
        raise ShapeError(f"patch_size must be >= 1, got {patch_size}")
    if x.dim() == 0 or x.shape[-1] == 0:
        raise ShapeError("cannot patchify an empty voxel vector")
    length = x.shape[-1]
    n_tokens = math.ceil(length / patch_size)
    padded = F.pad(x, (0, n_tokens * patch_size - length))
    return padded.reshape(*x.shape[:-1], n_tokens, patch_size)


def embed(patches: torch.Tensor, embedder: PatchEmbedder) -> torch.Tensor:
    expected = (embedder.pos.shape[0], embedder.proj.shape[0])
    if tuple(patches.shape[-2:]) != expected:
        raise ShapeError(f"patches shape {tuple(patches.shape[-2:])} does not match embedder {expected}")
    return patches @ embedder.proj + embedder.bias + embedder.pos


def filter_spectrum(h: torch.Tensor, block: FilterBlock) -> torch.Tensor:
    """X_hat = sum_m (|X|^2 / n) * k_m * c_m for the (already normalized) tokens h"""
    n_tokens = h.shape[-2]
    X = torch.fft.fft(h, dim=-2)
    power = (X.real ** 2 + X.imag ** 2) / n_tokens
    weighted = (block.dct_weights[:, None, None, None] * block.filters).sum(dim=0)
    return power * torch.view_as_complex(weighted.contiguous())


def filter_block_forward(t: torch.Tensor, block: FilterBlock, index: int = 0) -> torch.Tensor:
    expected = tuple(block.filters.shape[1:3])
    if tuple(t.shape[-2:]) != expected:
        raise ShapeError(f"block {index}: tokens {tuple(t.shape[-2:])} do not match filters {expected}")
    width = (t.shape[-1],)
    h = F.layer_norm(t, width, block.norm_gain, block.norm_bias, NORM_EPS) if block.use_norm else t
    u = torch.fft.ifft(filter_spectrum(h, block), dim=-2).real
    out = t + u if block.residual else u
    if block.mlp_hidden > 0:
        g = F.layer_norm(out, width, block.mlp_norm_gain, block.mlp_norm_bias, NORM_EPS)
        hidden = F.gelu(g @ block.fc1_weight + block.fc1_bias)
        out = out + hidden @ block.fc2_weight + block.fc2_bias
    if not torch.isfinite(out).all():
        raise NumericalError(f"non-finite activations in filter block {index}")
    return out


def fremlp(t_hat: torch.Tensor, projector: FreqProjector,
           activation_slope: float = ACTIVATION_SLOPE) -> Tuple[torch.Tensor, float]:
    """Complex token mixing in the frequency domain; returns (real tokens, max |imag| dropped)"""
    if t_hat.shape[-2] != projector.w_re.shape[0]:
        raise ShapeError(f"projector expects {projector.w_re.shape[0]} tokens, got {t_hat.shape[-2]}")
    X = torch.fft.fft(t_hat, dim=-2)
    x_re = X.real.transpose(-1, -2)
    x_im = X.imag.transpose(-1, -2)
    y_re = x_re @ projector.w_re - x_im @ projector.w_im + projector.b_re
    y_im = x_re @ projector.w_im + x_im @ projector.w_re + projector.b_im
    y = torch.complex(F.leaky_relu(y_re, activation_slope), F.leaky_relu(y_im, activation_slope))
    tokens = torch.fft.ifft(y.transpose(-1, -2), dim=-2)
    residue = float(tokens.imag.detach().abs().max()) if tokens.numel() else 0.0
    return tokens.real, residue


class DftBackbone(nn.Module):
    """Full parameter set: embedder, L filter blocks, projector"""

    def __init__(self, config: BackboneConfig, seed: int = 0):
        super().__init__()
        self.config = config
        generator = torch.Generator().manual_seed(seed)
        n = config.n_tokens
        d = config.embed_dim
        self.embedder = PatchEmbedder(n, config.patch_size, d, generator)
        depth = config.depth if config.filter_blocks else 0
        self.blocks = nn.ModuleList([
            FilterBlock(n, d, config.filter_count, generator, use_norm=config.use_norm,
                        residual=config.residual, mlp_hidden=config.mlp_hidden)
            for _ in range(depth)
        ])
        projector_cls = FreqProjector if config.projector_kind == 'frequency' else LinearTokenProjector
        self.projector = projector_cls(n, config.out_tokens, generator, config.activation_slope)
        logger.info(f"Built DftBackbone with {param_count(self)} parameters "
                    f"(n={n}, d={d}, L={depth}, M={config.filter_count}, n'={config.out_tokens})")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.config.voxel_len:
            raise ShapeError(
                f"expected voxel vectors of length {self.config.voxel_len}, got {x.shape[-1]}")
        t = embed(patchify(x, self.config.patch_size), self.embedder)
        for index, block in enumerate(self.blocks):
            t = filter_block_forward(t, block, index)
        f, residue = self.projector(t)
        logger.debug(f"projector dropped imaginary residue {residue:.3e}")
        if self.config.variant == 'cls':
            f = f.squeeze(-2)
        return f


def forward(x: torch.Tensor, model: DftBackbone) -> torch.Tensor:
    return model(x)


def param_count(model: nn.Module) -> int:
    """Learnable scalars; complex parameters are stored split and so count twice"""
    return sum(p.numel() for p in model.parameters())


def parameter_order(model: nn.Module) -> list:
    return [name for name, _ in model.named_parameters()]


@dataclass
class FlopsBreakdown:
    """Multiply-accumulate estimate per component"""
    embed: float
    per_block: float
    blocks: float
    projector: float

    @property
    def total(self) -> float:
        return self.embed + self.blocks + self.projector

    def to_dict(self) -> Dict[str, float]:
        return {**asdict(self), 'total': self.total}


def flops_estimate(config: BackboneConfig) -> FlopsBreakdown:
    n = config.n_tokens
    d = config.out_dim
    n_out = config.out_tokens
    transform = 2 * n * d * math.log2(n)
    embed_cost = float(n * config.patch_size * config.embed_dim)
    per_block = transform + n * d * config.filter_count + 2 * n * d * config.mlp_hidden
    depth = config.depth if config.filter_blocks else 0
    if config.projector_kind == 'frequency':
        projector_cost = transform + 2 * n * n_out * d + 2 * n_out * d
    else:
        projector_cost = n * n_out * d + n_out * d
    return FlopsBreakdown(embed=embed_cost, per_block=per_block,
                          blocks=per_block * depth, projector=projector_cost)
