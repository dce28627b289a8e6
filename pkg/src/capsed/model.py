"""The detection network: gated-convolution CNN over log-mel frames, an
optional transformer text encoder fused in through a single cross-attention
(audio queries, text keys/values, output concatenated onto the audio
features), a bidirectional GRU, and a linear head producing frame logits.
Clip logits are the arithmetic mean of the average and the maximum of the
frame logits per class.

When an example carries no text, its fused slice is exactly zero and the
text branch is never executed, so text-free forwards are bit-identical to
forwards whose cross-attention output is forcibly zeroed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import nncore
from .tokenizer import PAD_ID


@dataclass
class ModelConfig:
    n_classes: int = 50
    n_mels: int = 64
    cnn_channels: tuple[int, ...] = (32, 64, 128, 128, 128, 128)
    time_pool: tuple[int, ...] = (1, 2, 1, 2, 1, 1)
    freq_pool: tuple[int, ...] = (2, 2, 2, 2, 2, 2)
    conv_dropout: float = 0.1
    gru_hidden: int = 256
    gru_layers: int = 2
    rnn_dropout: float = 0.1
    vocab_size: int = 6000
    text_dim: int = 256
    text_layers: int = 4
    text_heads: int = 8
    text_ffn_mult: int = 4
    text_dropout: float = 0.1
    max_text_len: int = 96
    attn_dim: int = 256
    attn_heads: int = 8

    def __post_init__(self):
        self.cnn_channels = tuple(self.cnn_channels)
        self.time_pool = tuple(self.time_pool)
        self.freq_pool = tuple(self.freq_pool)
        if not len(self.cnn_channels) == len(self.time_pool) == len(self.freq_pool):
            raise ValueError("cnn_channels, time_pool and freq_pool must have equal length")
        if math.prod(self.freq_pool) != self.n_mels:
            raise ValueError(
                f"frequency pooling {self.freq_pool} must collapse {self.n_mels} mel bands to 1")
        if self.text_dim % self.text_heads or self.attn_dim % self.attn_heads:
            raise ValueError("attention dims must be divisible by their head counts")

    @property
    def time_pool_total(self) -> int:
        return math.prod(self.time_pool)

    def frame_rate(self, feature_rate: float = 50.0) -> float:
        return feature_rate / self.time_pool_total

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class GatedConvBlock(nn.Module):
    """conv -> batch norm -> tanh(a) * sigmoid(b) -> avg pool -> dropout."""

    def __init__(self, c_in: int, c_out: int, time_pool: int, freq_pool: int, dropout: float):
        super().__init__()
        self.conv_filter = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv_gate = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.bn_filter = nn.BatchNorm2d(c_out)
        self.bn_gate = nn.BatchNorm2d(c_out)
        self.pool = (time_pool, freq_pool)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gated = torch.tanh(self.bn_filter(self.conv_filter(x))) * \
            torch.sigmoid(self.bn_gate(self.conv_gate(x)))
        if self.pool != (1, 1):
            gated = F.avg_pool2d(gated, self.pool)
        return self.dropout(gated)


class TextEncoder(nn.Module):
    """Pre-norm transformer over token embeddings with learned positions."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.token_emb = nn.Embedding(cfg.vocab_size, cfg.text_dim, padding_idx=PAD_ID)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_text_len, cfg.text_dim))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.dropout = nn.Dropout(cfg.text_dropout)
        self.layers = nn.ModuleList()
        for _ in range(cfg.text_layers):
            self.layers.append(nn.ModuleDict({
                "norm1": nn.LayerNorm(cfg.text_dim),
                "attn": MultiHeadAttention(cfg.text_dim, cfg.text_dim, cfg.text_dim,
                                           cfg.text_heads),
                "norm2": nn.LayerNorm(cfg.text_dim),
                "ffn": nn.Sequential(
                    nn.Linear(cfg.text_dim, cfg.text_ffn_mult * cfg.text_dim),
                    nn.GELU(),
                    nn.Linear(cfg.text_ffn_mult * cfg.text_dim, cfg.text_dim),
                ),
            }))
        self.final_norm = nn.LayerNorm(cfg.text_dim)

    def forward(self, tokens: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        """tokens: (B, L) ids; pad_mask: (B, L) bool, True at PAD positions."""
        if bool(pad_mask.all(dim=1).any()):
            raise ValueError("text_encode: got an all-PAD sequence; empty text takes "
                             "the no-text path instead")
        length = tokens.shape[1]
        if length > self.pos_emb.shape[0]:
            raise nncore.ShapeError(
                f"text_encode: sequence length {length} exceeds max {self.pos_emb.shape[0]}")
        x = self.token_emb(tokens) + self.pos_emb[:length]
        x = self.dropout(x)
        attn_mask = torch.where(pad_mask[:, None, None, :],
                                torch.tensor(float("-inf"), dtype=x.dtype), 0.0)
        for layer in self.layers:
            x = x + layer["attn"](layer["norm1"](x), layer["norm1"](x), attn_mask)
            x = x + layer["ffn"](layer["norm2"](x))
        return self.final_norm(x)


class MultiHeadAttention(nn.Module):
    """Multi-head scaled dot-product attention; projection only on the output
    (no residual, no norm)."""

    def __init__(self, q_dim: int, kv_dim: int, model_dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = model_dim // n_heads
        self.q_proj = nn.Linear(q_dim, model_dim)
        self.k_proj = nn.Linear(kv_dim, model_dim)
        self.v_proj = nn.Linear(kv_dim, model_dim)
        self.out_proj = nn.Linear(model_dim, model_dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, query: torch.Tensor, keys: torch.Tensor,
                additive_mask: torch.Tensor | None = None) -> torch.Tensor:
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(keys))
        v = self._split(self.v_proj(keys))
        out = nncore.attention(q, k, v, additive_mask)
        b, _, l, _ = out.shape
        out = out.transpose(1, 2).reshape(b, l, self.n_heads * self.head_dim)
        return self.out_proj(out)


def pool_weak(frame_logits: torch.Tensor) -> torch.Tensor:
    """Clip logits: 0.5 * (mean + max) of the frame logits over time."""
    return 0.5 * (frame_logits.mean(dim=1) + frame_logits.amax(dim=1))


class SedCrnn(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        blocks = []
        c_in = 1
        for c_out, tp, fp in zip(cfg.cnn_channels, cfg.time_pool, cfg.freq_pool):
            blocks.append(GatedConvBlock(c_in, c_out, tp, fp, cfg.conv_dropout))
            c_in = c_out
        self.cnn = nn.Sequential(*blocks)
        self.audio_dim = cfg.cnn_channels[-1]
        self.text_encoder = TextEncoder(cfg)
        self.cross_attn = MultiHeadAttention(self.audio_dim, cfg.text_dim,
                                             cfg.attn_dim, cfg.attn_heads)
        self.gru = nn.GRU(self.audio_dim + cfg.attn_dim, cfg.gru_hidden,
                          num_layers=cfg.gru_layers, bidirectional=True, batch_first=True,
                          dropout=cfg.rnn_dropout if cfg.gru_layers > 1 else 0.0)
        self.head = nn.Linear(2 * cfg.gru_hidden, cfg.n_classes)

    def encode_audio(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, T, n_mels) log-mels -> (B, ceil(T / time_pool), audio_dim)."""
        if feats.dim() != 3 or feats.shape[-1] != self.cfg.n_mels:
            raise nncore.ShapeError(
                f"encode_audio: expected (B, T, {self.cfg.n_mels}), got {tuple(feats.shape)}")
        total = self.cfg.time_pool_total
        t = feats.shape[1]
        if t % total:
            feats = F.pad(feats, (0, 0, 0, total - t % total))
        h = self.cnn(feats.unsqueeze(1))            # (B, C, T', 1)
        return h.squeeze(-1).transpose(1, 2)        # (B, T', C)

    def encode_text(self, tokens: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        return self.text_encoder(tokens, pad_mask)

    def fuse_text(self, audio: torch.Tensor, tokens: torch.Tensor | None,
                  pad_mask: torch.Tensor | None,
                  has_text: torch.Tensor | None) -> torch.Tensor:
        """Cross-attention slice to concatenate onto `audio`; zero rows for
        examples without text."""
        b, t, _ = audio.shape
        fused = audio.new_zeros((b, t, self.cfg.attn_dim))
        if tokens is None:
            return fused
        if has_text is None:
            has_text = torch.ones(b, dtype=torch.bool)
        rows = has_text.nonzero(as_tuple=True)[0]
        if rows.numel() == 0:
            return fused
        text = self.encode_text(tokens[rows], pad_mask[rows])
        attn_mask = torch.where(pad_mask[rows][:, None, None, :],
                                torch.tensor(float("-inf"), dtype=audio.dtype), 0.0)
        fused[rows] = self.cross_attn(audio[rows], text, attn_mask)
        return fused

    def forward(self, feats: torch.Tensor, tokens: torch.Tensor | None = None,
                pad_mask: torch.Tensor | None = None,
                has_text: torch.Tensor | None = None,
                force_zero_fusion: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (frame_logits (B, T', n_classes), clip_logits (B, n_classes))."""
        audio = self.encode_audio(feats)
        fused = self.fuse_text(audio, tokens, pad_mask, has_text)
        if force_zero_fusion:
            fused = torch.zeros_like(fused)
        h = torch.cat([audio, fused], dim=-1)
        h, _ = self.gru(h)
        frame_logits = self.head(h)
        return frame_logits, pool_weak(frame_logits)


def pad_token_batch(token_lists: list[list[int] | None]) -> tuple[torch.Tensor | None,
                                                                  torch.Tensor | None,
                                                                  torch.Tensor]:
    """Stack per-example token id lists (None = no text) into (tokens,
    pad_mask, has_text). Returns (None, None, all-False) when nothing has text."""
    has_text = torch.tensor([t is not None and len(t) > 0 for t in token_lists])
    if not bool(has_text.any()):
        return None, None, has_text
    max_len = max(len(t) for t in token_lists if t)
    tokens = torch.full((len(token_lists), max_len), PAD_ID, dtype=torch.long)
    for i, t in enumerate(token_lists):
        if t:
            tokens[i, :len(t)] = torch.tensor(t, dtype=torch.long)
    # all-PAD rows never reach the text encoder; has_text routes them past it
    pad_mask = tokens.eq(PAD_ID)
    return tokens, pad_mask, has_text


def build_model(cfg: ModelConfig, seed: int) -> SedCrnn:
    torch.manual_seed(seed)
    return SedCrnn(cfg)


def save_model(path, model: SedCrnn) -> None:
    nncore.save_state(path, model.state_dict(), model.cfg.to_dict())


def load_model(path) -> SedCrnn:
    state, config = nncore.load_state(path)
    if config is None:
        raise ValueError(f"{path}: checkpoint has no embedded model config")
    model = SedCrnn(ModelConfig.from_dict(config))
    model.load_state_dict(state)
    return model
