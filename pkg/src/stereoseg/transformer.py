"""Set-predicting transformer over flattened image features.

The encoder runs self-attention over the deep feature tokens; the decoder
binds a fixed set of learned object queries to the scene via cross-attention.
Instead of reducing each query to a single vector, the cross-attention can be
expanded into one 2D feature map per query (attention weight times value,
kept per key), which sums back to the standard attention output and can be
upsampled directly into a mask.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

__all__ = [
    "AttentionConfig",
    "DecoderOutput",
    "MultiheadAttention",
    "QueryProcessing",
    "TransformerDecoder",
    "TransformerEncoder",
    "attention",
    "cross_attention_expanded",
    "expand_attention",
    "positional_encoding",
]


class QueryProcessing(str, enum.Enum):
    """How the decoder turns cross-attention into per-query 2D maps."""

    EXPANDED = "c-att-exp"          # per-key attention-weighted value maps
    ATTENTION_ONLY = "c-att"        # raw per-head attention weight maps
    CAT_BACKBONE = "c-att-cat-bb"   # attention maps + deep backbone features
    CAT_ENCODER = "c-att-cat-tfenc"  # attention maps + encoder memory


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 256
    num_heads: int = 8
    num_encoder_layers: int = 6
    num_decoder_layers: int = 6
    num_queries: int = 15
    query_processing: QueryProcessing = QueryProcessing.EXPANDED
    ffn_ratio: int = 4
    dropout: float = 0.1
    scaled_attention: bool = True   # divide logits by sqrt(head dim)
    # when set to the expected deep-feature grid (h, w), query embeddings are
    # initialized from positional encodings at spread-out anchor cells so each
    # query starts binding to its own region of the scene (init only; the
    # embeddings remain free parameters and other input sizes still work)
    query_anchor_grid: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.d_model % self.num_heads != 0:
            raise ValueError("d_model must be divisible by num_heads")
        if self.d_model % 4 != 0:
            raise ValueError("d_model must be divisible by 4 (2D positional encoding)")
        if self.num_queries < 1:
            raise ValueError("num_queries must be >= 1")
        if self.num_decoder_layers < 1:
            raise ValueError("num_decoder_layers must be >= 1")
        if self.num_encoder_layers < 0:
            raise ValueError("num_encoder_layers must be >= 0")
        # accept plain strings in configs
        object.__setattr__(self, "query_processing", QueryProcessing(self.query_processing))

    def query_map_channels(self, backbone_channels: int | None = None) -> int:
        """Channel width of the per-query maps emitted by the decoder."""
        if self.query_processing is QueryProcessing.EXPANDED:
            return self.d_model
        if self.query_processing is QueryProcessing.ATTENTION_ONLY:
            return self.num_heads
        extra = self.d_model if backbone_channels is None else backbone_channels
        return self.num_heads + extra


def positional_encoding(
    h: int,
    w: int,
    d_model: int,
    device: torch.device | None = None,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Fixed 2D sinusoidal encoding of shape (d_model, h, w).

    The first half of the channels encodes the row index, the second half the
    column index, each with alternating sin/cos over geometric frequencies.
    The value at (r, c) depends only on (r, c), not on the map size.
    """
    if d_model % 4 != 0:
        raise ValueError("d_model must be divisible by 4")
    half = d_model // 2
    freq = torch.exp(
        torch.arange(0, half, 2, dtype=dtype, device=device)
        * (-math.log(10000.0) / half)
    )
    rows = torch.arange(h, dtype=dtype, device=device)[:, None] * freq[None, :]
    cols = torch.arange(w, dtype=dtype, device=device)[:, None] * freq[None, :]

    out = torch.zeros(d_model, h, w, dtype=dtype, device=device)
    out[0:half:2] = torch.sin(rows).t()[:, :, None].expand(-1, h, w)
    out[1:half:2] = torch.cos(rows).t()[:, :, None].expand(-1, h, w)
    out[half::2] = torch.sin(cols).t()[:, None, :].expand(-1, h, w)
    out[half + 1 :: 2] = torch.cos(cols).t()[:, None, :].expand(-1, h, w)
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, scaled: bool = True) -> tuple[Tensor, Tensor]:
    """Single-head attention: softmax(q k^T [/ sqrt(d)]) v.

    q is (..., n_q, d), k and v are (..., n_kv, d). Returns the attended
    output (..., n_q, d) and the row-stochastic weight matrix
    (..., n_q, n_kv).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("q and k must share the feature dimension")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("k and v must share the key count")
    logits = q @ k.transpose(-2, -1)
    if scaled:
        logits = logits / math.sqrt(q.shape[-1])
    weights = torch.softmax(logits, dim=-1)
    return weights @ v, weights


def expand_attention(weights: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Per-key attention-weighted values and their sum.

    expanded[..., q, k, :] = weights[..., q, k] * v[..., k, :]; the returned
    attended output is exactly the sum of ``expanded`` over the key axis, so
    both views of the attention share the same weights, values and multiply
    count.
    """
    expanded = weights.unsqueeze(-1) * v.unsqueeze(-3)
    att = expanded.sum(dim=-2)
    return att, expanded


def cross_attention_expanded(
    q: Tensor, k: Tensor, v: Tensor, scaled: bool = True
) -> tuple[Tensor, Tensor]:
    """Attention that keeps one weighted value map per (query, key) pair.

    Returns (att, expanded) where att (..., n_q, d) is the standard attention
    output computed by summing expanded (..., n_q, n_kv, d) over the key
    axis.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("q and k must share the feature dimension")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("k and v must share the key count")
    logits = q @ k.transpose(-2, -1)
    if scaled:
        logits = logits / math.sqrt(q.shape[-1])
    weights = torch.softmax(logits, dim=-1)
    return expand_attention(weights, v)


class MultiheadAttention(nn.Module):
    """Multi-head attention that can also emit the expanded per-key maps."""

    def __init__(self, d_model: int, num_heads: int, scaled: bool = True):
        super().__init__()
        if d_model % num_heads != 0:
            raise ValueError("d_model must be divisible by num_heads")
        self.d_model = d_model
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.scaled = scaled
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        need_expanded: bool = False,
    ) -> tuple[Tensor, Tensor, Tensor | None, Tensor]:
        """Attend (b, n_q, d) queries to (b, n_kv, d) keys/values.

        Returns (out, weights, expanded, att_raw): ``out`` is the projected
        output fed to the residual stream, ``weights`` the per-head attention
        (b, heads, n_q, n_kv), ``expanded`` the head-concatenated per-key maps
        (b, n_q, n_kv, d) when requested, and ``att_raw`` the pre-projection
        attended features (b, n_q, d). When ``need_expanded`` is set,
        ``att_raw`` is computed as the key-axis sum of ``expanded``.
        """
        b, n_q, _ = query.shape
        n_kv = key.shape[1]
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))
        logits = q @ k.transpose(-2, -1)
        if self.scaled:
            logits = logits / math.sqrt(self.head_dim)
        weights = torch.softmax(logits, dim=-1)

        expanded = None
        if need_expanded:
            # (b, heads, n_q, n_kv, head_dim) -> heads concatenated last
            per_key = weights.unsqueeze(-1) * v.unsqueeze(-3)
            expanded = (
                per_key.permute(0, 2, 3, 1, 4).reshape(b, n_q, n_kv, self.d_model)
            )
            att_raw = expanded.sum(dim=-2)
        else:
            att_raw = (weights @ v).transpose(1, 2).reshape(b, n_q, self.d_model)
        return self.out_proj(att_raw), weights, expanded, att_raw


class _FeedForward(nn.Module):
    def __init__(self, d_model: int, ratio: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, ratio * d_model),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
            nn.Linear(ratio * d_model, d_model),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class _EncoderLayer(nn.Module):
    """Pre-norm self-attention block; positions are added to q and k only."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.attn = MultiheadAttention(cfg.d_model, cfg.num_heads, cfg.scaled_attention)
        self.ffn = _FeedForward(cfg.d_model, cfg.ffn_ratio, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: Tensor, pos: Tensor) -> Tensor:
        h = self.norm1(x)
        qk = h + pos
        out, _, _, _ = self.attn(qk, qk, h)
        x = x + self.dropout(out)
        x = x + self.dropout(self.ffn(self.norm2(x)))
        return x


class TransformerEncoder(nn.Module):
    """Self-attention stack over the flattened deep feature map."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(
            _EncoderLayer(cfg) for _ in range(cfg.num_encoder_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.d_model) if cfg.num_encoder_layers else None

    def forward_tokens(self, tokens: Tensor, pos: Tensor) -> Tensor:
        """Run the stack on (b, n, d) tokens with explicit positions."""
        for layer in self.layers:
            tokens = layer(tokens, pos)
        if self.final_norm is not None:
            tokens = self.final_norm(tokens)
        return tokens

    def forward(self, deep: Tensor) -> Tensor:
        """Flatten a (b, d_model, h, w) map to (b, h*w, d_model) memory."""
        if deep.ndim != 4 or deep.shape[1] != self.cfg.d_model:
            raise ValueError(
                f"expected (b, {self.cfg.d_model}, h, w) features, got {tuple(deep.shape)}"
            )
        b, d, h, w = deep.shape
        tokens = deep.flatten(2).transpose(1, 2)
        pos = positional_encoding(h, w, d, device=deep.device, dtype=deep.dtype)
        pos = pos.flatten(1).t().unsqueeze(0)
        return self.forward_tokens(tokens, pos)


@dataclass
class DecoderOutput:
    """Per-layer query maps plus diagnostics.

    ``query_maps[j]`` is (b, num_queries, d', h, w) for decoder layer j;
    ``attention_sums[j]`` holds the pre-projection attended features
    (b, num_queries, d_model) that the layer forwards, and equals the key-axis
    sum of the expanded maps when those are emitted.
    """

    query_maps: list[Tensor]
    attention_sums: list[Tensor]
    final_state: Tensor


class _DecoderLayer(nn.Module):
    """Query self-attention, cross-attention to memory, feed-forward."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.self_attn = MultiheadAttention(cfg.d_model, cfg.num_heads, cfg.scaled_attention)
        self.cross_attn = MultiheadAttention(cfg.d_model, cfg.num_heads, cfg.scaled_attention)
        self.ffn = _FeedForward(cfg.d_model, cfg.ffn_ratio, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(
        self,
        state: Tensor,
        memory: Tensor,
        query_pos: Tensor,
        memory_pos: Tensor,
        need_expanded: bool,
    ) -> tuple[Tensor, Tensor, Tensor | None, Tensor]:
        h = self.norm1(state)
        qk = h + query_pos
        out, _, _, _ = self.self_attn(qk, qk, h)
        state = state + self.dropout(out)

        h = self.norm2(state)
        out, weights, expanded, att_raw = self.cross_attn(
            h + query_pos, memory + memory_pos, memory, need_expanded=need_expanded
        )
        state = state + self.dropout(out)
        state = state + self.dropout(self.ffn(self.norm3(state)))
        return state, weights, expanded, att_raw


class TransformerDecoder(nn.Module):
    """Decodes learned object queries into one 2D map per query and layer."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.query_embed = nn.Embedding(cfg.num_queries, cfg.d_model)
        self.layers = nn.ModuleList(
            _DecoderLayer(cfg) for _ in range(cfg.num_decoder_layers)
        )
        if cfg.query_anchor_grid is not None:
            self._anchor_initialize(cfg.query_anchor_grid)

    def _anchor_initialize(self, grid: tuple[int, int]) -> None:
        h, w = grid
        pe = positional_encoding(h, w, self.cfg.d_model).flatten(1).t()
        cells = torch.linspace(0, h * w - 1, self.cfg.num_queries).round().long()
        with torch.no_grad():
            noise = 0.1 * torch.randn_like(self.query_embed.weight)
            self.query_embed.weight.copy_(pe[cells] + noise)
            # matching q/k projections make the positional prior effective at
            # initialization (a random pair would decorrelate it); they are
            # untied parameters and diverge during training
            for layer in self.layers:
                layer.cross_attn.k_proj.weight.copy_(layer.cross_attn.q_proj.weight)
                layer.cross_attn.k_proj.bias.copy_(layer.cross_attn.q_proj.bias)

    def _layer_maps(
        self,
        weights: Tensor,
        expanded: Tensor | None,
        extra: Tensor | None,
        h: int,
        w: int,
    ) -> Tensor:
        mode = self.cfg.query_processing
        b = weights.shape[0]
        n_q = self.cfg.num_queries
        if mode is QueryProcessing.EXPANDED:
            assert expanded is not None
            return expanded.permute(0, 1, 3, 2).reshape(b, n_q, self.cfg.d_model, h, w)
        att_maps = weights.permute(0, 2, 1, 3).reshape(b, n_q, self.cfg.num_heads, h, w)
        if mode is QueryProcessing.ATTENTION_ONLY:
            return att_maps
        if extra is None:
            raise ValueError(f"query processing {mode.value!r} needs extra features")
        if extra.shape[-2:] != (h, w):
            raise ValueError(
                f"extra features must be {h}x{w}, got {tuple(extra.shape[-2:])}"
            )
        broadcast = extra.unsqueeze(1).expand(b, n_q, *extra.shape[1:])
        return torch.cat([att_maps, broadcast], dim=2)

    def forward(
        self,
        memory: Tensor,
        h: int,
        w: int,
        extra: Tensor | None = None,
    ) -> DecoderOutput:
        """Attend queries to (b, h*w, d_model) memory.

        ``extra`` supplies the feature map concatenated onto the attention
        maps for the concatenating query-processing variants.
        """
        if memory.ndim != 3 or memory.shape[1] != h * w:
            raise ValueError(
                f"memory must be (b, {h * w}, d_model), got {tuple(memory.shape)}"
            )
        b = memory.shape[0]
        need_expanded = self.cfg.query_processing is QueryProcessing.EXPANDED
        pos = positional_encoding(h, w, self.cfg.d_model, memory.device, memory.dtype)
        memory_pos = pos.flatten(1).t().unsqueeze(0)
        query_pos = self.query_embed.weight.unsqueeze(0).expand(b, -1, -1)
        state = torch.zeros_like(query_pos)

        maps: list[Tensor] = []
        att_sums: list[Tensor] = []
        for layer in self.layers:
            state, weights, expanded, att_raw = layer(
                state, memory, query_pos, memory_pos, need_expanded
            )
            maps.append(self._layer_maps(weights, expanded, extra, h, w))
            att_sums.append(att_raw)
        return DecoderOutput(query_maps=maps, attention_sums=att_sums, final_state=state)
