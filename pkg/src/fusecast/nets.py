"""Condition net, denoising net and the zero-initialized adapter stack.

Tokens are kept in (rows, tokens, width) layout throughout; convolutions
transpose internally so they slide along the token axis with the feature
width as channels. Four scales are used:

    scale   context width   context tokens   hidden width
    a       P_d             P               D/4
    b       P_d/2           P               D/2
    c       P_d/4           2P              D
    m       P_d/8           4P              D

where P is P_L for the condition side and P_H for the denoising side.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .pipeline import TrendPromptEmbedding, decompose, patchify

SCALES = ("a", "b", "c", "m")
TOKEN_MULT = {"a": 1, "b": 1, "c": 2, "m": 4}
# denoising-net blocks in execution order, each with the context scale it reads
READER_BLOCKS = (("enc_a", "a"), ("enc_b", "b"), ("enc_c", "c"), ("mid", "m"),
                 ("dec_c", "c"), ("dec_b", "b"), ("dec_a", "a"))


@dataclass
class MultiScaleContext:
    a: torch.Tensor
    b: torch.Tensor
    c: torch.Tensor
    m: torch.Tensor

    def __getitem__(self, scale: str) -> torch.Tensor:
        return getattr(self, scale)

    def token_counts(self) -> tuple[int, ...]:
        return tuple(self[s].shape[1] for s in SCALES)


def _tokens_conv(conv: nn.Conv1d, x: torch.Tensor) -> torch.Tensor:
    return conv(x.transpose(1, 2)).transpose(1, 2)


def _resample_tokens(x: torch.Tensor, count: int) -> torch.Tensor:
    if x.shape[1] == count:
        return x
    return F.interpolate(x.transpose(1, 2), size=count, mode="linear", align_corners=False).transpose(1, 2)


class Attention(nn.Module):
    """Multi-head attention with an optional bias-free extra key/value source.

    ``extra`` tokens enter keys and values through their own projections
    without bias, so an all-zero ``extra`` contributes zero keys and values.
    """

    def __init__(self, dim: int, n_heads: int, dropout: float = 0.0, kv_dim: int | None = None,
                 extra_dim: int | None = None, self_kv: bool = True):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"n_heads={n_heads} does not divide width {dim}")
        self.n_heads = n_heads
        self.dropout = dropout
        self.q = nn.Linear(dim, dim)
        self.self_kv = self_kv
        if self_kv:
            self.k = nn.Linear(kv_dim or dim, dim)
            self.v = nn.Linear(kv_dim or dim, dim)
        if extra_dim is not None:
            self.k_extra = nn.Linear(extra_dim, dim, bias=False)
            self.v_extra = nn.Linear(extra_dim, dim, bias=False)
        self.out = nn.Linear(dim, dim)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        n, p, w = x.shape
        return x.reshape(n, p, self.n_heads, w // self.n_heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, kv: torch.Tensor | None = None,
                extra: torch.Tensor | None = None) -> torch.Tensor:
        keys, values = [], []
        if self.self_kv:
            src = x if kv is None else kv
            keys.append(self.k(src))
            values.append(self.v(src))
        if extra is not None:
            keys.append(self.k_extra(extra))
            values.append(self.v_extra(extra))
        q = self._heads(self.q(x))
        k = self._heads(torch.cat(keys, dim=1))
        v = self._heads(torch.cat(values, dim=1))
        p = self.dropout if self.training else 0.0
        y = F.scaled_dot_product_attention(q, k, v, dropout_p=p)
        n, _, tq, hd = y.shape
        return self.out(y.transpose(1, 2).reshape(n, tq, self.n_heads * hd))


class FeedForward(nn.Module):
    def __init__(self, dim: int, dropout: float, mult: int = 2):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, mult * dim), nn.GELU(), nn.Dropout(dropout),
                                 nn.Linear(mult * dim, dim))

    def forward(self, x):
        return self.net(x)


class ResNet1D(nn.Module):
    """Two token-axis convolutions with timestep injection between them."""

    def __init__(self, dim: int, time_dim: int | None = None, dropout: float = 0.0, kernel: int = 3):
        super().__init__()
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim)
        self.conv1 = nn.Conv1d(dim, dim, kernel, padding=kernel // 2)
        self.time_proj = nn.Linear(time_dim, dim) if time_dim else None
        self.norm2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)
        self.conv2 = nn.Conv1d(dim, dim, kernel, padding=kernel // 2)

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ValueError(f"feature width {x.shape[-1]} != block width {self.dim}")
        h = _tokens_conv(self.conv1, F.silu(self.norm1(x)))
        if t_emb is not None:
            if self.time_proj is None:
                raise ValueError("block was built without a timestep projection")
            if t_emb.shape[-1] != self.time_proj.in_features:
                raise ValueError(f"t_emb width {t_emb.shape[-1]} != {self.time_proj.in_features}")
            h = h + self.time_proj(t_emb).unsqueeze(1)
        h = _tokens_conv(self.conv2, self.drop(F.silu(self.norm2(h))))
        return x + h


class Transformer1DWriter(nn.Module):
    """Pre-norm self-attention and feed-forward, both residual."""

    def __init__(self, dim: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads, dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class Transformer1DReader(nn.Module):
    """Self-attention over [tokens ; context], cross-attention to prompt tokens, feed-forward."""

    def __init__(self, dim: int, context_dim: int, prompt_token_dim: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.context_dim = context_dim
        self.prompt_token_dim = prompt_token_dim
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads, dropout, extra_dim=context_dim)
        self.norm2 = nn.LayerNorm(dim)
        self.cross = Attention(dim, n_heads, dropout, extra_dim=prompt_token_dim, self_kv=False)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, dropout)

    def forward(self, y: torch.Tensor, context: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        """``context`` is (rows, tokens, context_dim); ``prompt`` is (rows, prompt_tokens, prompt_token_dim)."""
        if context.shape[1] != y.shape[1]:
            raise ValueError(
                f"context has {context.shape[1]} tokens but the block sees {y.shape[1]}; "
                "was the context passed through the adapter?"
            )
        if context.shape[-1] != self.context_dim:
            raise ValueError(f"context width {context.shape[-1]} != {self.context_dim}")
        y = y + self.attn(self.norm1(y), extra=context)
        y = y + self.cross(self.norm2(y), extra=prompt)
        return y + self.ffn(self.norm3(y))


class Downsample1D(nn.Module):
    """Linear interpolation that multiplies the token count, then a width projection."""

    def __init__(self, in_dim: int, out_dim: int, factor: int):
        super().__init__()
        self.factor = factor
        self.proj = nn.Linear(in_dim, out_dim)

    def forward(self, x):
        return self.proj(_resample_tokens(x, x.shape[1] * self.factor))


class Upsample1D(nn.Module):
    """Linear interpolation that divides the token count, then a width projection."""

    def __init__(self, in_dim: int, out_dim: int, factor: int):
        super().__init__()
        self.factor = factor
        self.proj = nn.Linear(in_dim, out_dim)

    def forward(self, x):
        return self.proj(_resample_tokens(x, x.shape[1] // self.factor))


class WriterBlock(nn.Module):
    def __init__(self, dim: int, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList()
        for _ in range(cfg.depth_blocks):
            self.layers.append(ResNet1D(dim, None, cfg.dropout))
            self.layers.append(Transformer1DWriter(dim, cfg.n_heads, cfg.dropout))

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class ReaderBlock(nn.Module):
    def __init__(self, dim: int, context_dim: int, cfg: ModelConfig):
        super().__init__()
        self.res = nn.ModuleList()
        self.read = nn.ModuleList()
        ptd = cfg.prompt_dim // cfg.prompt_tokens
        for _ in range(cfg.depth_blocks):
            self.res.append(ResNet1D(dim, cfg.time_dim, cfg.dropout))
            self.read.append(Transformer1DReader(dim, context_dim, ptd, cfg.n_heads, cfg.dropout))

    def forward(self, x, t_emb, context, prompt):
        for res, read in zip(self.res, self.read):
            x = read(res(x, t_emb), context, prompt)
        return x


_SCALE_INDEX = {s: i for i, s in enumerate(SCALES)}


class ConditionNet(nn.Module):
    """U-Net over observation tokens; emits the four encoder/middle scale tensors."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ha, hb, hc, hm = cfg.hidden_widths
        wa, wb, wc, wm = cfg.context_widths
        self.stem = nn.Linear(cfg.patch_len, ha)
        self.enc_a = WriterBlock(ha, cfg)
        self.down_ab = Downsample1D(ha, hb, 1)
        self.enc_b = WriterBlock(hb, cfg)
        self.down_bc = Downsample1D(hb, hc, 2)
        self.enc_c = WriterBlock(hc, cfg)
        self.down_cm = Downsample1D(hc, hm, 2)
        self.mid = WriterBlock(hm, cfg)
        self.emit = nn.ModuleDict({"a": nn.Linear(ha, wa), "b": nn.Linear(hb, wb),
                                   "c": nn.Linear(hc, wc), "m": nn.Linear(hm, wm)})
        self.has_decoder = cfg.condition_decoder
        if self.has_decoder:
            self.up_mc = Upsample1D(hm, hc, 2)
            self.merge_c = nn.Linear(2 * hc, hc)
            self.dec_c = WriterBlock(hc, cfg)
            self.up_cb = Upsample1D(hc, hb, 2)
            self.merge_b = nn.Linear(2 * hb, hb)
            self.dec_b = WriterBlock(hb, cfg)
            self.up_ba = Upsample1D(hb, ha, 1)
            self.merge_a = nn.Linear(2 * ha, ha)
            self.dec_a = WriterBlock(ha, cfg)

    def forward(self, x_emb: torch.Tensor) -> MultiScaleContext:
        sa = self.enc_a(self.stem(x_emb))
        sb = self.enc_b(self.down_ab(sa))
        sc = self.enc_c(self.down_bc(sb))
        sm = self.mid(self.down_cm(sc))
        if self.has_decoder:
            # completes the U-Net; its output is not part of the context
            z = self.dec_c(self.merge_c(torch.cat([self.up_mc(sm), sc], dim=-1)))
            z = self.dec_b(self.merge_b(torch.cat([self.up_cb(z), sb], dim=-1)))
            self.dec_a(self.merge_a(torch.cat([self.up_ba(z), sa], dim=-1)))
        return MultiScaleContext(a=self.emit["a"](sa), b=self.emit["b"](sb),
                                 c=self.emit["c"](sc), m=self.emit["m"](sm))


class DenoisingNet(nn.Module):
    """U-Net over noised target tokens whose readers consume the aligned context."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ha, hb, hc, hm = cfg.hidden_widths
        w = dict(zip(SCALES, cfg.context_widths))
        self.stem = nn.Linear(cfg.patch_len, ha)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(),
                                      nn.Linear(cfg.time_dim, cfg.time_dim))
        self.enc_a = ReaderBlock(ha, w["a"], cfg)
        self.down_ab = Downsample1D(ha, hb, 1)
        self.enc_b = ReaderBlock(hb, w["b"], cfg)
        self.down_bc = Downsample1D(hb, hc, 2)
        self.enc_c = ReaderBlock(hc, w["c"], cfg)
        self.down_cm = Downsample1D(hc, hm, 2)
        self.mid = ReaderBlock(hm, w["m"], cfg)
        self.up_mc = Upsample1D(hm, hc, 2)
        self.merge_c = nn.Linear(2 * hc, hc)
        self.dec_c = ReaderBlock(hc, w["c"], cfg)
        self.up_cb = Upsample1D(hc, hb, 2)
        self.merge_b = nn.Linear(2 * hb, hb)
        self.dec_b = ReaderBlock(hb, w["b"], cfg)
        self.up_ba = Upsample1D(hb, ha, 1)
        self.merge_a = nn.Linear(2 * ha, ha)
        self.dec_a = ReaderBlock(ha, w["a"], cfg)
        self.head_norm = nn.LayerNorm(ha)
        self.head = nn.Linear(ha, cfg.patch_len)

    def forward(self, y_t: torch.Tensor, t_emb: torch.Tensor, prompt: torch.Tensor,
                context: dict[str, torch.Tensor]) -> torch.Tensor:
        te = self.time_mlp(t_emb)
        sa = self.enc_a(self.stem(y_t), te, context["enc_a"], prompt)
        sb = self.enc_b(self.down_ab(sa), te, context["enc_b"], prompt)
        sc = self.enc_c(self.down_bc(sb), te, context["enc_c"], prompt)
        z = self.mid(self.down_cm(sc), te, context["mid"], prompt)
        z = self.dec_c(self.merge_c(torch.cat([self.up_mc(z), sc], dim=-1)), te, context["dec_c"], prompt)
        z = self.dec_b(self.merge_b(torch.cat([self.up_cb(z), sb], dim=-1)), te, context["dec_b"], prompt)
        z = self.dec_a(self.merge_a(torch.cat([self.up_ba(z), sa], dim=-1)), te, context["dec_a"], prompt)
        return self.head(self.head_norm(z))


class TokenAlign(nn.Module):
    """Token-axis 1x1 convolution mapping any input token count to any output count.

    The (out_tokens x in_tokens) channel-mixing matrix is generated from a
    learned ``basis x basis`` spectral kernel between orthonormal cosine bases
    evaluated at the input and output token positions, so the parameter count
    is independent of both counts. The identity kernel reproduces the identity
    map whenever the counts agree and do not exceed ``basis``.
    """

    def __init__(self, basis: int):
        super().__init__()
        self.basis = basis
        self.kernel = nn.Parameter(torch.eye(basis))
        self.bias = nn.Parameter(torch.zeros(basis))

    @staticmethod
    def cosine_basis(count: int, k: int, dtype) -> torch.Tensor:
        pos = (torch.arange(count, dtype=torch.float64) + 0.5) / count
        freq = torch.arange(k, dtype=torch.float64)
        B = torch.cos(math.pi * pos[:, None] * freq[None, :]) * math.sqrt(2.0 / count)
        B[:, 0] = B[:, 0] / math.sqrt(2.0)
        return B.to(dtype)

    def mixing_matrix(self, n_in: int, n_out: int) -> torch.Tensor:
        k = min(self.basis, n_in, n_out)
        dtype = self.kernel.dtype
        phi_out = self.cosine_basis(n_out, k, dtype)
        psi_in = self.cosine_basis(n_in, k, dtype)
        scale = math.sqrt(n_out / n_in)
        return scale * phi_out @ self.kernel[:k, :k] @ psi_in.T

    def forward(self, h: torch.Tensor, n_out: int) -> torch.Tensor:
        n_in = h.shape[1]
        k = min(self.basis, n_in, n_out)
        M = self.mixing_matrix(n_in, n_out)
        bias = self.cosine_basis(n_out, k, h.dtype) @ self.bias[:k]
        # (rows, n_in, w) -> (rows, n_out, w): equivalent to a kernel-1 Conv1d over the transposed tensor
        return torch.einsum("oi,niw->now", M, h) + bias[None, :, None]


class AdapterBlock(nn.Module):
    """Token alignment, one lightweight transformer layer, zero-initialized output projection."""

    def __init__(self, width: int, cfg: ModelConfig):
        super().__init__()
        self.align = TokenAlign(cfg.adapter_basis)
        self.up = nn.Linear(width, cfg.adapter_dim)
        self.layer = Transformer1DWriter(cfg.adapter_dim, cfg.n_heads, cfg.dropout)
        self.zero_out = nn.Linear(cfg.adapter_dim, width)

    def forward(self, h: torch.Tensor, n_out: int) -> torch.Tensor:
        return self.zero_out(self.layer(self.up(self.align(h, n_out))))


class AdapterStack(nn.Module):
    """One adapter per denoising-net block, plus a zero-initialized gate on the prompt."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = dict(zip(SCALES, cfg.context_widths))
        self.blocks = nn.ModuleDict({name: AdapterBlock(w[s], cfg) for name, s in READER_BLOCKS})
        self.prompt_gate = nn.Linear(cfg.prompt_dim, cfg.prompt_dim)

    def forward(self, ctx: MultiScaleContext, P_H: int) -> dict[str, torch.Tensor]:
        return {name: self.blocks[name](ctx[s], TOKEN_MULT[s] * P_H) for name, s in READER_BLOCKS}


def adapter_forward(ctx: MultiScaleContext, P_H: int, params: AdapterStack) -> dict[str, torch.Tensor]:
    return params(ctx, P_H)


def init_weights(module: nn.Module) -> None:
    """Truncated-normal(0.02) weights and zero biases; adapter output projections start at zero."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, TokenAlign):
            with torch.no_grad():
                m.kernel.copy_(torch.eye(m.basis))
                m.bias.zero_()
    for m in module.modules():
        if isinstance(m, AdapterBlock):
            nn.init.zeros_(m.zero_out.weight)
            nn.init.zeros_(m.zero_out.bias)
        elif isinstance(m, AdapterStack):
            nn.init.zeros_(m.prompt_gate.weight)
            nn.init.zeros_(m.prompt_gate.bias)


class ForecastModel(nn.Module):
    """Prompt embedder, condition net, adapter stack and denoising net under one state."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.prompt_embed = TrendPromptEmbedding(cfg.prompt_dim, cfg.trend_points)
        self.condition_net = ConditionNet(cfg)
        self.adapters = AdapterStack(cfg)
        self.denoising_net = DenoisingNet(cfg)
        init_weights(self)

    # -- conditioning -----------------------------------------------------
    def encode(self, x_emb: torch.Tensor) -> MultiScaleContext:
        return self.condition_net(x_emb)

    def align(self, ctx: MultiScaleContext, P_H: int) -> dict[str, torch.Tensor]:
        return self.adapters(ctx, P_H)

    def gate_prompt(self, p_emb: torch.Tensor) -> torch.Tensor:
        return self.adapters.prompt_gate(p_emb)

    def condition(self, observation: torch.Tensor, P_H: int):
        """Aligned context and gated prompt from normalized, channel-folded observations (rows, L).

        The condition net sees the seasonal part (or the raw window when
        ``tokenize_raw_observation`` is set); the trend feeds the prompt.
        """
        parts = decompose(observation, self.cfg.trend_window)
        source = observation if self.cfg.tokenize_raw_observation else parts.seasonal
        x_emb = patchify(source, self.cfg.patch_len).tokens
        ctx = self.encode(x_emb)
        return self.align(ctx, P_H), self.gate_prompt(self.prompt_embed(parts.trend))

    def empty_context(self, rows: int, P_H: int, dtype=None) -> dict[str, torch.Tensor]:
        dtype = dtype or next(self.parameters()).dtype
        w = dict(zip(SCALES, self.cfg.context_widths))
        return {name: torch.zeros(rows, TOKEN_MULT[s] * P_H, w[s], dtype=dtype) for name, s in READER_BLOCKS}

    # -- denoising --------------------------------------------------------
    def denoise(self, y_t: torch.Tensor, t_emb: torch.Tensor, p_emb: torch.Tensor | None = None,
                context: dict[str, torch.Tensor] | None = None) -> torch.Tensor:
        """Predict the clean target tokens. Omitted context and prompt mean zeros.

        ``p_emb`` here is the already-gated prompt vector of width ``prompt_dim``.
        """
        rows, P_H, _ = y_t.shape
        if context is None:
            context = self.empty_context(rows, P_H, y_t.dtype)
        if p_emb is None:
            p_emb = torch.zeros(rows, self.cfg.prompt_dim, dtype=y_t.dtype)
        if p_emb.dim() == 1:
            p_emb = p_emb.expand(rows, -1)
        prompt = p_emb.reshape(rows, self.cfg.prompt_tokens, -1)
        return self.denoising_net(y_t, t_emb, prompt, context)

    def denoise_pair(self, y_t: torch.Tensor, t_emb: torch.Tensor, p_emb: torch.Tensor,
                     context: dict[str, torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        """Conditional and unconditional predictions from one stacked forward pass."""
        rows = y_t.shape[0]
        zeros = self.empty_context(rows, y_t.shape[1], y_t.dtype)
        ctx2 = {k: torch.cat([v, zeros[k]]) for k, v in context.items()}
        p2 = torch.cat([p_emb.expand(rows, -1), torch.zeros_like(p_emb.expand(rows, -1))])
        out = self.denoise(torch.cat([y_t, y_t]), torch.cat([t_emb, t_emb]), p2, ctx2)
        return out[:rows], out[rows:]

    # -- bookkeeping ------------------------------------------------------
    def adapter_parameter_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith("adapters.")]

    def set_trainable(self, adapters_only: bool = False, all_frozen: bool = False) -> None:
        for name, p in self.named_parameters():
            if all_frozen:
                p.requires_grad_(False)
            elif adapters_only:
                p.requires_grad_(name.startswith("adapters."))
            else:
                p.requires_grad_(True)

    def trainable_flags(self) -> dict[str, bool]:
        return {n: p.requires_grad for n, p in self.named_parameters()}

    def parameter_count(self, trainable_only: bool = False) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad or not trainable_only)


def state_digest(model: nn.Module) -> str:
    """SHA-256 over parameter names and raw bytes, used as checkpoint provenance."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().contiguous().cpu().numpy().tobytes())
    return h.hexdigest()


def condition_net_forward(x_emb: torch.Tensor, params: ConditionNet) -> MultiScaleContext:
    return params(x_emb)


def denoising_net_forward(y_t, t_emb, p_emb=None, context=None, params: ForecastModel | None = None):
    return params.denoise(y_t, t_emb, p_emb, context)
