"""Isotropic hybrid backbone and the comparison model family at toy and small scale."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NoSSMBlocks, NonFinite, NumericalFailure, ShapeMismatch
from .mixers import (CHANNEL_MIXERS, DTYPE, SEQUENCE_MIXERS, SSM_MIXERS, AttentionMixer, EinFFTMixer,
                     _fill, _param, checks_enabled, realize_eigenvalues)

RNG_NAME = "numpy.PCG64"


class ModelVariant(str, enum.Enum):
    VIM_EINFFT = "vim_einfft"
    HYDRA_EINFFT = "hydra_einfft"
    VIT12 = "vit12"
    VIT24 = "vit24"
    HYDRA_HYBRID = "hydra_hybrid"
    MV_HYBRID = "mv_hybrid"


class Scale(str, enum.Enum):
    TOY = "toy"
    SMALL = "small"


HYBRIDS = (ModelVariant.HYDRA_HYBRID, ModelVariant.MV_HYBRID)


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 16
    channels: int = 64
    layout: tuple = ()
    norm_eps: float = 1e-6
    state_dim: int = 4
    dt_rank: int = 16
    heads: int = 4
    einfft_blocks: int = 4
    variant: str | None = None
    depth: int | None = None

    def __post_init__(self):
        layout = tuple(tuple(pair) for pair in self.layout)
        object.__setattr__(self, "layout", layout)
        if self.depth is None:
            object.__setattr__(self, "depth", len(layout))
        if self.depth != len(layout):
            raise ShapeMismatch(f"depth {self.depth} but layout has {len(layout)} blocks")
        if self.image_size % self.patch_size:
            raise ShapeMismatch("image_size must be divisible by patch_size")
        for seq, chan in layout:
            if seq not in SEQUENCE_MIXERS or chan not in CHANNEL_MIXERS:
                raise ValueError(f"unknown block ({seq}, {chan})")
        if self.variant in {v.value for v in HYBRIDS}:
            half = self.depth // 2
            if any(seq == "attention" or chan == "mlp" for seq, chan in layout[:half]) or \
                    any(pair != ("attention", "mlp") for pair in layout[half:]):
                raise ValueError("hybrid layouts need SSM/EinFFT blocks first, attention/MLP second")

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2


_SEQ_FOR = {
    ModelVariant.VIM_EINFFT: ("vim", "einfft"),
    ModelVariant.HYDRA_EINFFT: ("hydra", "einfft"),
    ModelVariant.HYDRA_HYBRID: ("hydra", "einfft"),
    ModelVariant.MV_HYBRID: ("mv", "einfft"),
}


def make_variant(variant: ModelVariant | str, scale: Scale | str = Scale.TOY) -> BackboneConfig:
    """Comparison-family layouts; toy scale is 64-dim at depth 8 (4 for ViT12)."""
    variant, scale = ModelVariant(variant), Scale(scale)
    if scale is Scale.SMALL:
        channels, full, vit12, image, heads, state, rank = 384, 24, 12, 256, 6, 16, 24
    else:
        channels, full, vit12, image, heads, state, rank = 64, 8, 4, 64, 4, 4, 16
    vit = ("attention", "mlp")
    if variant is ModelVariant.VIT12:
        layout = [vit] * vit12
    elif variant is ModelVariant.VIT24:
        layout = [vit] * full
    elif variant in HYBRIDS:
        layout = [_SEQ_FOR[variant]] * (full // 2) + [vit] * (full // 2)
    else:
        layout = [_SEQ_FOR[variant]] * full
    return BackboneConfig(image_size=image, patch_size=16, channels=channels, layout=tuple(layout),
                          state_dim=state, dt_rank=rank, heads=heads, variant=variant.value)


def _layer_norm_params(channels):
    return _param(channels), _param(channels)


class PatchEmbed(nn.Module):
    """Non-overlapping patches -> linear projection -> learned position grid."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.proj = _param(cfg.channels, 3 * p * p)
        self.proj_bias = _param(cfg.channels)
        self.pos = _param(cfg.tokens, cfg.channels)

    def reset_parameters(self, rng):
        _fill(self.proj, rng.normal(0, 0.02, self.proj.shape))
        _fill(self.proj_bias, np.zeros(self.proj_bias.shape))
        _fill(self.pos, rng.normal(0, 0.02, self.pos.shape))

    def patches(self, image: torch.Tensor) -> torch.Tensor:
        """(b, 3, H, W) -> (b, tokens, 3*p*p), patch features ordered (c, row, col)."""
        if image.ndim != 4 or image.shape[1] != 3 or \
                image.shape[2] != self.cfg.image_size or image.shape[3] != self.cfg.image_size:
            raise ShapeMismatch(f"expected (batch, 3, {self.cfg.image_size}, {self.cfg.image_size}), "
                                f"got {tuple(image.shape)}")
        b = image.shape[0]
        p = self.cfg.patch_size
        g = self.cfg.image_size // p
        x = image.reshape(b, 3, g, p, g, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(b, g * g, 3 * p * p)

    def forward(self, image):
        return F.linear(self.patches(image), self.proj, self.proj_bias) + self.pos


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig, seq: str, chan: str):
        super().__init__()
        self.norm1_w, self.norm1_b = _layer_norm_params(cfg.channels)
        self.norm2_w, self.norm2_b = _layer_norm_params(cfg.channels)
        if seq == "attention":
            self.seq = AttentionMixer(cfg.channels, cfg.heads)
        else:
            self.seq = SEQUENCE_MIXERS[seq](cfg.channels, cfg.state_dim, cfg.dt_rank)
        if chan == "einfft":
            self.chan = EinFFTMixer(cfg.channels, cfg.einfft_blocks)
        else:
            self.chan = CHANNEL_MIXERS[chan](cfg.channels)
        self.eps = cfg.norm_eps

    def reset_parameters(self, rng):
        for w, b in ((self.norm1_w, self.norm1_b), (self.norm2_w, self.norm2_b)):
            _fill(w, np.ones(w.shape))
            _fill(b, np.zeros(b.shape))
        self.seq.reset_parameters(rng)
        self.chan.reset_parameters(rng)

    def forward(self, x):
        c = x.shape[-1]
        x = x + self.seq(F.layer_norm(x, (c,), self.norm1_w, self.norm1_b, self.eps))
        return x + self.chan(F.layer_norm(x, (c,), self.norm2_w, self.norm2_b, self.eps))


class HybridBackbone(nn.Module):
    """Pre-norm residual stack of (sequence mixer, channel mixer) blocks.

    ``forward`` returns the final normalised tokens and their mean over tokens
    as the embedding.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg)
        self.blocks = nn.ModuleList([Block(cfg, seq, chan) for seq, chan in cfg.layout])
        self.norm_w, self.norm_b = _layer_norm_params(cfg.channels)

    def reset_parameters(self, rng: np.random.Generator):
        self.patch_embed.reset_parameters(rng)
        for block in self.blocks:
            block.reset_parameters(rng)
        _fill(self.norm_w, np.ones(self.cfg.channels))
        _fill(self.norm_b, np.zeros(self.cfg.channels))

    def forward(self, image):
        x = self.patch_embed(image)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if checks_enabled() and not torch.isfinite(x).all():
                raise NonFinite(f"non-finite activation after block {i}")
        x = F.layer_norm(x, (self.cfg.channels,), self.norm_w, self.norm_b, self.cfg.norm_eps)
        if checks_enabled() and not torch.isfinite(x).all():
            raise NonFinite("non-finite activation after final norm")
        return x, x.mean(dim=1)

    def ssm_mixers(self) -> list[nn.Module]:
        return [b.seq for b in self.blocks if isinstance(b.seq, SSM_MIXERS)]


def build_model(cfg: BackboneConfig, seed: int | None = 0) -> HybridBackbone:
    """Construct and initialise from ``numpy.random.Generator(PCG64(seed))``.

    ``seed=None`` builds on the meta device without allocating storage, which
    is enough for shape and parameter-count queries.
    """
    if seed is None:
        with torch.device("meta"):
            return HybridBackbone(cfg)
    model = HybridBackbone(cfg)
    model.reset_parameters(np.random.Generator(np.random.PCG64(seed)))
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def embed_images(model: HybridBackbone, images) -> np.ndarray:
    with torch.no_grad():
        _, emb = model(torch.as_tensor(np.asarray(images), dtype=DTYPE))
    return emb.numpy()


# --------------------------------------------------------------------------- eigenvalues

@dataclass
class EigenReport:
    count: int
    minimum: float
    maximum: float
    counts: list
    edges: list
    support: list
    per_block: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"count": self.count, "min": self.minimum, "max": self.maximum,
                "histogram": {"counts": self.counts, "edges": self.edges},
                "support": self.support, "all_negative": self.maximum < 0}


def eigen_report(model: HybridBackbone, bins: int = 10, support_limit: int = 64) -> EigenReport:
    """Histogram of realised SSM eigenvalues ``-exp(A_log)`` across all SSM mixers."""
    per_block = []
    for mixer in model.ssm_mixers():
        params = mixer.A_log if isinstance(mixer.A_log, nn.ParameterList) else [mixer.A_log]
        with torch.no_grad():
            per_block.append(np.concatenate([realize_eigenvalues(p).numpy().ravel() for p in params]))
    if not per_block:
        raise NoSSMBlocks(f"{model.cfg.variant or 'model'} has no SSM blocks")
    eigs = np.concatenate(per_block)
    if not np.all(eigs < 0):
        raise NumericalFailure("found a non-negative SSM eigenvalue")
    counts, edges = np.histogram(eigs, bins=bins)
    # exp/log round trips leave ulp noise, e.g. -exp(log 3) = -3.0000000000000004
    uniq = np.unique(np.round(eigs, 12))
    support = uniq.tolist() if uniq.size <= support_limit else []
    return EigenReport(count=int(eigs.size), minimum=float(eigs.min()), maximum=float(eigs.max()),
                       counts=counts.tolist(), edges=edges.tolist(), support=support,
                       per_block=[(float(e.min()), float(e.max())) for e in per_block])


# --------------------------------------------------------------------------- weights

def export_weights(model: nn.Module) -> dict:
    return {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}


def load_weights(model: nn.Module, tensors: dict) -> None:
    """Copy ``{name: array}`` into ``model``; names and shapes must match exactly."""
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(tensors))
    extra = sorted(set(tensors) - set(params))
    if missing or extra:
        raise ShapeMismatch(f"weights do not match model: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, p in params.items():
        value = np.asarray(tensors[name])
        if tuple(value.shape) != tuple(p.shape):
            raise ShapeMismatch(f"{name}: expected {tuple(p.shape)}, got {tuple(value.shape)}")
        _fill(p, value)
