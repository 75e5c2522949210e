"""ViT-style encoder with an ML-Decoder classification head.

The encoder is patch embedding + dropout + pre-norm transformer layers. The
head cross-attends from fixed (non-trainable) group queries to the encoder
tokens, runs a feed-forward block, and maps each group embedding to its
slice of the class logits (group fully connected pooling).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionMismatch, MissingParameter, ShapeMismatch
from .labels import NUM_CLASSES


@dataclass(frozen=True)
class EncoderConfig:
    image_size: tuple[int, int] = (1024, 768)  # (height, width)
    patch_size: int = 16
    in_chans: int = 3
    embed_dim: int = 1536
    num_layers: int = 40
    num_heads: int = 24
    mlp_ratio: float = 4.0
    dropout_p: float = 0.0
    layer_norm_eps: float = 1e-6

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise DimensionMismatch(f"image {h}x{w} not divisible by patch {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError(f"dropout_p must be in [0, 1], got {self.dropout_p}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass(frozen=True)
class DecoderConfig:
    num_groups: int = NUM_CLASSES
    num_classes: int = NUM_CLASSES
    query_dim: int | None = None  # None: same as the encoder width
    ffn_hidden: int = 2048
    num_heads: int = 8
    query_seed: int = 0
    dropout_p: float = 0.0

    def __post_init__(self):
        if not 1 <= self.num_groups <= self.num_classes:
            raise ValueError(f"num_groups must be in [1, {self.num_classes}]")

    @property
    def group_factor(self) -> int:
        return math.ceil(self.num_classes / self.num_groups)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def resolved_decoder(self) -> DecoderConfig:
        if self.decoder.query_dim is None:
            return replace(self.decoder, query_dim=self.encoder.embed_dim)
        return self.decoder

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = dict(d.get("encoder", {}))
        if "image_size" in enc:
            enc["image_size"] = tuple(enc["image_size"])
        return cls(EncoderConfig(**enc), DecoderConfig(**d.get("decoder", {})))


PRESETS: dict[str, ModelConfig] = {
    # encoder geometry of the 1B-parameter human-vision backbone
    "full": ModelConfig(
        EncoderConfig(image_size=(1024, 768), patch_size=16, embed_dim=1536, num_layers=40, num_heads=24),
        DecoderConfig(num_groups=7, ffn_hidden=2048, num_heads=8),
    ),
    "toy": ModelConfig(
        EncoderConfig(image_size=(64, 48), patch_size=16, embed_dim=16, num_layers=2, num_heads=2),
        DecoderConfig(num_groups=7, ffn_hidden=32, num_heads=2),
    ),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


class Attention(nn.Module):
    """Multi-head scaled dot-product attention with separate q/k/v projections.

    The last attention map is kept on ``last_attn`` when ``keep_attn`` is set.
    """

    def __init__(self, dim: int, num_heads: int, kv_dim: int | None = None, dropout_p: float = 0.0):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        kv_dim = kv_dim or dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(kv_dim, dim)
        self.v_proj = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout_p)
        self.keep_attn = False
        self.last_attn: torch.Tensor | None = None

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, query: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        q = self._heads(self.q_proj(query))
        k = self._heads(self.k_proj(context))
        v = self._heads(self.v_proj(context))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = scores.softmax(dim=-1)
        if self.keep_attn:
            self.last_attn = attn.detach()
        out = self.drop(attn) @ v
        b, _, n, _ = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, -1))


class PatchEmbed(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Conv2d(cfg.in_chans, cfg.embed_dim, cfg.patch_size, stride=cfg.patch_size)
        gh, gw = cfg.grid
        self.pos_embed = nn.Parameter(torch.zeros(1, gh * gw, cfg.embed_dim))
        self.drop = nn.Dropout(cfg.dropout_p)

    def _pos_embed(self, gh: int, gw: int) -> torch.Tensor:
        base_h, base_w = self.cfg.grid
        if (gh, gw) == (base_h, base_w):
            return self.pos_embed
        grid = self.pos_embed.reshape(1, base_h, base_w, -1).permute(0, 3, 1, 2)
        grid = F.interpolate(grid, size=(gh, gw), mode="bilinear", align_corners=False)
        return grid.permute(0, 2, 3, 1).reshape(1, gh * gw, -1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != self.cfg.in_chans:
            raise DimensionMismatch(f"expected (B, {self.cfg.in_chans}, H, W), got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        p = self.cfg.patch_size
        if h % p or w % p:
            raise DimensionMismatch(f"image {h}x{w} not divisible by patch {p}")
        x = self.proj(images).flatten(2).transpose(1, 2)
        return self.drop(x + self._pos_embed(h // p, w // p))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.embed_dim, eps=cfg.layer_norm_eps)
        self.attn = Attention(cfg.embed_dim, cfg.num_heads, dropout_p=cfg.dropout_p)
        self.norm2 = nn.LayerNorm(cfg.embed_dim, eps=cfg.layer_norm_eps)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.embed_dim, cfg.mlp_hidden),
            nn.GELU(),
            nn.Dropout(cfg.dropout_p),
            nn.Linear(cfg.mlp_hidden, cfg.embed_dim),
        )
        self.drop = nn.Dropout(cfg.dropout_p)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h))
        return x + self.drop(self.mlp(self.norm2(x)))


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_layers))
        self.norm = nn.LayerNorm(cfg.embed_dim, eps=cfg.layer_norm_eps)

    def forward_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            tokens = layer(tokens)
        return tokens

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.norm(self.forward_tokens(self.patch_embed(images)))


def init_group_queries(cfg: DecoderConfig) -> torch.Tensor:
    """Standard-normal (num_groups, query_dim) draw, fixed by ``query_seed``."""
    if cfg.query_dim is None:
        raise ValueError("query_dim must be resolved before drawing queries")
    gen = torch.Generator().manual_seed(cfg.query_seed)
    return torch.randn(cfg.num_groups, cfg.query_dim, generator=gen)


class MLDecoder(nn.Module):
    """Cross-attention head; group queries are a buffer, never a parameter."""

    def __init__(self, cfg: DecoderConfig, in_dim: int):
        super().__init__()
        if cfg.query_dim is None:
            cfg = replace(cfg, query_dim=in_dim)
        self.cfg = cfg
        d = cfg.query_dim
        self.embed_tokens = nn.Linear(in_dim, d)
        self.register_buffer("group_queries", init_group_queries(cfg))
        self.norm1 = nn.LayerNorm(d)
        self.cross_attn = Attention(d, cfg.num_heads, dropout_p=cfg.dropout_p)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, cfg.ffn_hidden),
            nn.ReLU(),
            nn.Dropout(cfg.dropout_p),
            nn.Linear(cfg.ffn_hidden, d),
        )
        self.norm3 = nn.LayerNorm(d)
        self.group_fc_weight = nn.Parameter(torch.empty(cfg.num_groups, d, cfg.group_factor))
        self.group_fc_bias = nn.Parameter(torch.zeros(cfg.num_classes))
        nn.init.xavier_normal_(self.group_fc_weight)

    def memory(self, tokens: torch.Tensor) -> torch.Tensor:
        return F.relu(self.embed_tokens(tokens))

    def attend(self, tokens: torch.Tensor) -> torch.Tensor:
        """Group embeddings (B, G, D) after cross-attention and the FFN block."""
        mem = self.memory(tokens)
        q = self.norm1(self.group_queries).unsqueeze(0).expand(tokens.shape[0], -1, -1)
        x = self.norm2(q + self.cross_attn(q, mem))
        return self.norm3(x + self.ffn(x))

    def group_pool(self, groups: torch.Tensor) -> torch.Tensor:
        # (B, G, D) x (G, D, factor) -> (B, G * factor), truncated to K logits
        logits = torch.einsum("bgd,gdf->bgf", groups, self.group_fc_weight).flatten(1)
        return logits[:, : self.cfg.num_classes] + self.group_fc_bias

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.group_pool(self.attend(tokens))


class FERModel(nn.Module):
    def __init__(self, cfg: ModelConfig = PRESETS["toy"]):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder)
        self.decoder = MLDecoder(cfg.resolved_decoder(), cfg.encoder.embed_dim)
        self.apply(_init_weights)
        nn.init.trunc_normal_(self.encoder.patch_embed.pos_embed, std=0.02)
        nn.init.xavier_normal_(self.decoder.group_fc_weight)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(images))

    def encoder_parameters(self):
        return [p for p in self.encoder.parameters() if p.requires_grad]

    def decoder_parameters(self):
        return [p for p in self.decoder.parameters() if p.requires_grad]

    def keep_attention_maps(self, flag: bool = True) -> list[Attention]:
        mods = [m for m in self.modules() if isinstance(m, Attention)]
        for m in mods:
            m.keep_attn = flag
        return mods


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def build_model(cfg: ModelConfig | str = "toy", seed: int | None = 42) -> FERModel:
    if isinstance(cfg, str):
        cfg = preset(cfg)
    if seed is None:
        return FERModel(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FERModel(cfg)


# ---------------------------------------------------------------------------
# parameter accounting


def count_parameters(cfg: ModelConfig) -> dict[str, int]:
    """Parameter counts computed from the configuration alone."""
    e, d = cfg.encoder, cfg.resolved_decoder()
    D, Q = e.embed_dim, d.query_dim
    lin = lambda i, o: i * o + o  # noqa: E731
    ln = lambda n: 2 * n  # noqa: E731
    patch = e.in_chans * e.patch_size**2 * D + D + e.num_tokens * D
    layer = ln(D) + 4 * lin(D, D) + ln(D) + lin(D, e.mlp_hidden) + lin(e.mlp_hidden, D)
    encoder = patch + e.num_layers * layer + ln(D)
    decoder = (
        lin(D, Q)
        + ln(Q)
        + lin(Q, Q) * 4
        + ln(Q)
        + lin(Q, d.ffn_hidden)
        + lin(d.ffn_hidden, Q)
        + ln(Q)
        + d.num_groups * Q * d.group_factor
        + d.num_classes
    )
    return {
        "encoder": encoder,
        "decoder": decoder,
        "trainable": encoder + decoder,
        "fixed_queries": d.num_groups * Q,
    }


def describe(cfg: ModelConfig) -> str:
    e, d = cfg.encoder, cfg.resolved_decoder()
    counts = count_parameters(cfg)
    gh, gw = e.grid
    lines = [
        f"input           3 x {e.image_size[0]} x {e.image_size[1]}",
        f"patch embedding {e.patch_size}x{e.patch_size} -> {gh}x{gw} = {e.num_tokens} tokens, dim {e.embed_dim}",
        f"dropout         p={e.dropout_p}",
        f"encoder layers  {e.num_layers} x (pre-norm MHSA {e.num_heads} heads + GELU MLP {e.mlp_hidden})",
        f"decoder         cross-attention, {d.num_groups} fixed group queries (dim {d.query_dim}, seed {d.query_seed}), {d.num_heads} heads",
        f"decoder ffn     {d.query_dim} -> {d.ffn_hidden} -> {d.query_dim}",
        f"group fc pool   {d.num_groups} groups x {d.group_factor} logits -> {d.num_classes} classes",
        f"parameters      encoder {counts['encoder']:,}  decoder {counts['decoder']:,}  "
        f"trainable {counts['trainable']:,}  fixed queries {counts['fixed_queries']:,}",
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# weight files: flat .npz archives of named arrays


def state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def save_weights(model: nn.Module, path: str | Path) -> None:
    with open(path, "wb") as f:
        np.savez(f, **state_arrays(model))


def read_weights(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def _check_and_copy(model: nn.Module, arrays: dict[str, np.ndarray], names: list[str]) -> None:
    state = model.state_dict()
    missing = [k for k in names if k not in arrays]
    if missing:
        raise MissingParameter(f"weight file lacks {len(missing)} parameter(s): {missing[:10]}", missing)
    bad = {
        k: (tuple(arrays[k].shape), tuple(state[k].shape))
        for k in names
        if tuple(arrays[k].shape) != tuple(state[k].shape)
    }
    if bad:
        report = "\n".join(f"  {k}: file {f} vs model {m}" for k, (f, m) in bad.items())
        raise ShapeMismatch(f"{len(bad)} shape mismatch(es):\n{report}", bad)
    with torch.no_grad():
        for k in names:
            state[k].copy_(torch.from_numpy(arrays[k]).to(state[k].dtype))


def load_weights(model: nn.Module, path: str | Path) -> nn.Module:
    arrays = read_weights(path)
    _check_and_copy(model, arrays, list(model.state_dict()))
    return model


def load_backbone_weights(model: FERModel, path: str | Path, prefix: str = "encoder.") -> FERModel:
    """Replace encoder weights from a file; the decoder is left untouched.

    Every encoder entry must be present with a matching shape. Other keys in
    the file are ignored.
    """
    arrays = read_weights(path)
    names = [k for k in model.state_dict() if k.startswith(prefix)]
    _check_and_copy(model, arrays, names)
    return model
