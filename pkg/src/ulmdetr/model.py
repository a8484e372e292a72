"""A small detection transformer for single-class microbubble detection.

Layout: strided conv backbone -> 1x1 projection -> transformer encoder over
the flattened feature map (fixed sine positional encodings) -> decoder over
learned object queries -> linear class head and 3-layer MLP box head.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .geometry import BBoxN
from .losses import N_CLASSES, Prediction

CHECKPOINT_FORMAT_VERSION = 1
ACTIVATIONS = {"relu": nn.ReLU, "gelu": nn.GELU}
_META_KEY = "__meta__"


class NumericalError(RuntimeError):
    """A tensor went non-finite; the message names where."""


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_queries: int = 20
    backbone_channels: list = field(default_factory=lambda: [32, 64, 64])
    patch_input_size: int = 64
    dropout: float = 0.0
    dim_feedforward: int = 128
    backbone_norm: bool = True
    query_anchors: bool = True
    aux_loss: bool = False
    class_prior: float = 0.15
    activation: str = "gelu"

    def __post_init__(self):
        self.backbone_channels = list(self.backbone_channels)
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the 2-D positional encoding")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.n_queries < 1 or not self.backbone_channels:
            raise ValueError("need at least one query and one backbone block")
        if self.patch_input_size % self.stride:
            raise ValueError(f"patch_input_size must be a multiple of the stride {self.stride}")

    @property
    def stride(self) -> int:
        return 2 ** len(self.backbone_channels)

    @property
    def feature_size(self) -> int:
        return self.patch_input_size // self.stride

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def positional_encoding(height: int, width: int, d_model: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine encoding of shape (height, width, d_model).

    The first half of the channels encodes the row, the second half the
    column; within each half, even channels are sines and odd channels
    cosines of geometrically spaced frequencies.
    """
    if d_model % 2:
        raise ValueError("d_model must be even")
    half = d_model // 2
    idx = torch.arange(half, dtype=torch.float64)
    freq = 1.0 / (10000.0 ** (2 * torch.div(idx, 2, rounding_mode="floor") / half))
    phase = torch.where(idx % 2 == 0, 0.0, math.pi / 2)

    def axis(n):
        pos = torch.arange(n, dtype=torch.float64)[:, None]
        return torch.sin(pos * freq[None, :] + phase[None, :])

    ey = axis(height)[:, None, :].expand(height, width, half)
    ex = axis(width)[None, :, :].expand(height, width, half)
    return torch.cat([ey, ex], dim=-1).to(torch.float32)


def _norm(c: int, enabled: bool) -> nn.Module:
    return nn.GroupNorm(math.gcd(8, c), c) if enabled else nn.Identity()


class Backbone(nn.Module):
    """Stride-2 conv blocks; each block is conv(s=2) -> [GN] -> act -> conv(s=1) -> [GN] -> act."""

    def __init__(self, channels, in_channels: int = 1, norm: bool = True, activation: str = "relu"):
        super().__init__()
        blocks = []
        c_in = in_channels
        for c in channels:
            blocks.append(nn.Sequential(
                nn.Conv2d(c_in, c, 3, stride=2, padding=1), _norm(c, norm), ACTIVATIONS[activation](),
                nn.Conv2d(c, c, 3, stride=1, padding=1), _norm(c, norm), ACTIVATIONS[activation](),
            ))
            c_in = c
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = c_in

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)
        self.last_weights = None

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, query, key, value):
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        weights = torch.softmax(scores, dim=-1)
        self.last_weights = weights.detach()
        out = self.dropout(weights) @ v
        b, _, n, _ = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, n, -1))


class FeedForward(nn.Module):
    def __init__(self, d_model, dim_ff, dropout, activation="relu"):
        super().__init__()
        self.act = ACTIVATIONS[activation]()
        self.lin1 = nn.Linear(d_model, dim_ff)
        self.lin2 = nn.Linear(dim_ff, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.lin2(self.dropout(self.act(self.lin1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, dim_ff, dropout, activation="relu"):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.ffn = FeedForward(d_model, dim_ff, dropout, activation)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, src, pos):
        qk = src + pos
        src = self.norm1(src + self.dropout(self.self_attn(qk, qk, src)))
        return self.norm2(src + self.dropout(self.ffn(src)))


class DecoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, dim_ff, dropout, activation="relu"):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.ffn = FeedForward(d_model, dim_ff, dropout, activation)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, tgt, memory, pos, query_pos):
        qk = tgt + query_pos
        tgt = self.norm1(tgt + self.dropout(self.self_attn(qk, qk, tgt)))
        tgt = self.norm2(tgt + self.dropout(
            self.cross_attn(tgt + query_pos, memory + pos, memory)))
        return self.norm3(tgt + self.dropout(self.ffn(tgt)))


class MLP(nn.Module):
    def __init__(self, d_in, d_hidden, d_out, n_layers, activation="relu"):
        super().__init__()
        self.act = ACTIVATIONS[activation]()
        dims = [d_in] + [d_hidden] * (n_layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return x


def _check_finite(name, x):
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite values after {name}")
    return x


class DetrTiny(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        d = config.d_model
        self.backbone = Backbone(config.backbone_channels, norm=config.backbone_norm,
                                 activation=config.activation)
        self.input_proj = nn.Conv2d(self.backbone.out_channels, d, 1)
        self.encoder = nn.ModuleList(
            EncoderLayer(d, config.n_heads, config.dim_feedforward, config.dropout, config.activation)
            for _ in range(config.n_encoder_layers))
        self.decoder = nn.ModuleList(
            DecoderLayer(d, config.n_heads, config.dim_feedforward, config.dropout, config.activation)
            for _ in range(config.n_decoder_layers))
        self.decoder_norm = nn.LayerNorm(d)
        self.query_embed = nn.Parameter(torch.randn(config.n_queries, d))
        self.class_head = nn.Linear(d, N_CLASSES)
        self.box_head = MLP(d, d, 4, 3, config.activation)
        if config.query_anchors:
            # learned reference centers, stored as logits
            self.anchors = nn.Parameter(torch.logit(torch.rand(config.n_queries, 2) * 0.8 + 0.1))
        else:
            self.anchors = None
        if 0 < config.class_prior < 1:
            with torch.no_grad():
                self.class_head.bias.copy_(torch.tensor(
                    [math.log(config.class_prior / (1 - config.class_prior)), 0.0]))
        fs = config.feature_size
        self.register_buffer("pos", positional_encoding(fs, fs, d).reshape(1, fs * fs, d),
                             persistent=False)

    def attention_modules(self):
        for name, mod in self.named_modules():
            if isinstance(mod, MultiHeadAttention):
                yield name, mod

    def backbone_forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 1, S, S) images -> (B, C, S/stride, S/stride) features."""
        s = self.config.patch_input_size
        if images.shape[-2:] != (s, s):
            raise ValueError(f"expected {s}x{s} input, got {tuple(images.shape[-2:])}")
        return self.backbone(images)

    def forward(self, images: torch.Tensor) -> dict:
        """Returns ``logits`` (B, N, 2) and normalized cxcywh ``boxes`` (B, N, 4)."""
        if images.dim() == 3:
            images = images[:, None]
        feats = _check_finite("backbone", self.backbone_forward(images))
        src = self.input_proj(feats).flatten(2).transpose(1, 2)
        pos = self.pos.to(src.dtype)
        for i, layer in enumerate(self.encoder):
            src = _check_finite(f"encoder layer {i}", layer(src, pos))
        b = src.shape[0]
        query_pos = self.query_embed[None].expand(b, -1, -1)
        tgt = torch.zeros_like(query_pos)
        states = []
        for i, layer in enumerate(self.decoder):
            tgt = _check_finite(f"decoder layer {i}", layer(tgt, src, pos, query_pos))
            states.append(tgt)
        heads = [self._heads(self.decoder_norm(h)) for h in states]
        logits, boxes = heads[-1]
        out = {"logits": logits, "boxes": boxes}
        if self.config.aux_loss:
            out["aux"] = [{"logits": lg, "boxes": bx} for lg, bx in heads[:-1]]
        return out

    def _heads(self, hs):
        logits = _check_finite("class head", self.class_head(hs))
        raw = _check_finite("box head", self.box_head(hs))
        if self.anchors is not None:
            raw = torch.cat([raw[..., :2] + self.anchors, raw[..., 2:]], dim=-1)
        return logits, raw.sigmoid()

    @torch.no_grad()
    def predict(self, pixels) -> list[Prediction]:
        """Predictions for a single ``patch_input_size`` square patch."""
        if hasattr(pixels, "pixels"):
            pixels = pixels.pixels
        x = torch.as_tensor(np.asarray(pixels, dtype=np.float32))[None, None]
        out = self.forward(x)
        return outputs_to_predictions(out["logits"][0], out["boxes"][0])


def outputs_to_predictions(logits: torch.Tensor, boxes: torch.Tensor) -> list[Prediction]:
    probs = torch.softmax(logits.double(), dim=-1).numpy()
    lg = logits.double().numpy()
    bx = boxes.double().clamp(min=1e-6, max=1.0).numpy()
    return [Prediction(probs[i], BBoxN(*map(float, bx[i])), lg[i]) for i in range(len(bx))]


# --- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    state: dict
    config: ModelConfig
    step: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def build_model(self) -> DetrTiny:
        model = DetrTiny(self.config)
        model.load_state_dict({k: torch.as_tensor(v) for k, v in self.state.items()})
        model.eval()
        return model

    @classmethod
    def from_model(cls, model: DetrTiny, step: int = 0, seed: int = 0, **extra) -> "Checkpoint":
        state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(state, model.config, step, seed, dict(extra))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write an ``.npz`` holding every parameter by name plus a JSON ``__meta__`` entry."""
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(ckpt.config),
        "step": int(ckpt.step),
        "seed": int(ckpt.seed),
        "extra": ckpt.extra,
        "tensors": sorted(ckpt.state),
    }
    arrays = {k: np.asarray(v) for k, v in ckpt.state.items()}
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        if _META_KEY not in data.files:
            raise ValueError(f"{path} is not a checkpoint (no {_META_KEY} entry)")
        meta = json.loads(data[_META_KEY].tobytes().decode())
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
        state = {k: data[k].copy() for k in meta["tensors"]}
    return Checkpoint(state, ModelConfig.from_dict(meta["config"]), meta["step"], meta["seed"],
                      meta.get("extra", {}))
