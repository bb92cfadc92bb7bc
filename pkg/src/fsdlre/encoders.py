"""Encoder providers: a seeded toy transformer for tests/CPU runs and a
wrapper around pretrained checkpoints.

Both expose the same surface: ``encode(tokens) -> (H, A)`` where A is the
head-averaged attention of the last layer (row-stochastic), plus
``relation_encode(text)`` giving a sequence-level embedding from a separate
relation encoder. Selection is by config string: ``toy`` or
``pretrained:<model-name>``.
"""
from __future__ import annotations

import math
import zlib
from typing import Optional, Sequence

import torch
from torch import nn

from .encoding import MARKER, Tokenizer, WhitespaceTokenizer
from .errors import ConfigError

CLS_TOKEN = "[CLS]"

_MARKER_ID = 0
_CLS_ID = 1
_N_SPECIAL = 2


def _token_id(token: str, n_buckets: int) -> int:
    if token == MARKER:
        return _MARKER_ID
    if token == CLS_TOKEN:
        return _CLS_ID
    return _N_SPECIAL + zlib.crc32(token.encode("utf-8")) % n_buckets


class _ToyBlock(nn.Module):
    """Pre-norm transformer block with explicit attention so per-head
    probabilities can be extracted."""

    def __init__(self, d: int, n_heads: int, dtype: torch.dtype):
        super().__init__()
        if d % n_heads != 0:
            raise ConfigError(f"hidden size {d} not divisible by {n_heads} heads")
        self.d = d
        self.n_heads = n_heads
        self.ln_attn = nn.LayerNorm(d, dtype=dtype)
        self.qkv = nn.Linear(d, 3 * d, dtype=dtype)
        self.attn_out = nn.Linear(d, d, dtype=dtype)
        self.ln_ffn = nn.LayerNorm(d, dtype=dtype)
        self.ffn = nn.Sequential(
            nn.Linear(d, 2 * d, dtype=dtype), nn.GELU(), nn.Linear(2 * d, d, dtype=dtype)
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        n = x.shape[0]
        head_dim = self.d // self.n_heads
        q, k, v = self.qkv(self.ln_attn(x)).split(self.d, dim=1)
        q = q.view(n, self.n_heads, head_dim).transpose(0, 1)
        k = k.view(n, self.n_heads, head_dim).transpose(0, 1)
        v = v.view(n, self.n_heads, head_dim).transpose(0, 1)
        probs = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(head_dim), dim=-1)
        mixed = (probs @ v).transpose(0, 1).reshape(n, self.d)
        x = x + self.attn_out(mixed)
        x = x + self.ffn(self.ln_ffn(x))
        return x, probs.mean(dim=0)


class ToyTransformer(nn.Module):
    """Small randomly initialized transformer over a hashed vocabulary.

    Deterministic in its seed; trainable; runs in double precision by default
    so numeric tests hold at tight tolerances.
    """

    def __init__(
        self,
        hidden_size: int = 32,
        n_layers: int = 2,
        n_heads: int = 4,
        max_len: int = 128,
        vocab_buckets: int = 509,
        seed: int = 0,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        self.hidden_size = hidden_size
        self.max_len = max_len
        self.vocab_buckets = vocab_buckets
        self.token_emb = nn.Embedding(_N_SPECIAL + vocab_buckets, hidden_size, dtype=dtype)
        self.pos_emb = nn.Embedding(max_len, hidden_size, dtype=dtype)
        self.blocks = nn.ModuleList(
            _ToyBlock(hidden_size, n_heads, dtype) for _ in range(n_layers)
        )
        self.ln_final = nn.LayerNorm(hidden_size, dtype=dtype)
        self._reset_parameters(seed)

    def _reset_parameters(self, seed: int) -> None:
        # every parameter is overwritten so construction never depends on the
        # global RNG state
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, (nn.Linear, nn.Embedding)):
                    bound = 1.0 / math.sqrt(module.weight.shape[-1])
                    module.weight.copy_(
                        torch.empty_like(module.weight).uniform_(-bound, bound, generator=gen)
                    )
                    if getattr(module, "bias", None) is not None:
                        module.bias.copy_(
                            torch.empty_like(module.bias).uniform_(-bound, bound, generator=gen)
                        )
                elif isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.zero_()

    def forward(self, token_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        n = token_ids.shape[0]
        if n > self.max_len:
            raise ConfigError(f"sequence of {n} tokens exceeds max_len={self.max_len}")
        x = self.token_emb(token_ids) + self.pos_emb(torch.arange(n))
        attn = None
        for block in self.blocks:
            x, attn = block(x)
        return self.ln_final(x), attn

    def encode_tokens(self, tokens: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        ids = torch.tensor([_token_id(t, self.vocab_buckets) for t in tokens], dtype=torch.long)
        return self.forward(ids)


class ToyEncoderProvider(nn.Module):
    """Provider pairing a toy document encoder with a separate toy relation
    encoder. Parameters are trainable; the relation encoder can be frozen."""

    def __init__(
        self,
        hidden_size: int = 32,
        n_layers: int = 2,
        n_heads: int = 4,
        max_window: int = 128,
        seed: int = 0,
        dtype: torch.dtype = torch.float64,
        freeze_relation_encoder: bool = False,
    ):
        super().__init__()
        self.hidden_size = hidden_size
        self.max_window = max_window
        self.dtype = dtype
        self.tokenizer: Tokenizer = WhitespaceTokenizer()
        self.doc_encoder = ToyTransformer(
            hidden_size, n_layers, n_heads, max_window, seed=seed, dtype=dtype
        )
        self.rel_encoder = ToyTransformer(
            hidden_size, n_layers, n_heads, max_window, seed=seed + 1, dtype=dtype
        )
        if freeze_relation_encoder:
            for p in self.rel_encoder.parameters():
                p.requires_grad_(False)

    def encode(self, tokens: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        return self.doc_encoder.encode_tokens(tokens)

    def relation_encode(self, text: str) -> torch.Tensor:
        tokens = [CLS_TOKEN] + text.split()
        H, _ = self.rel_encoder.encode_tokens(tokens[: self.max_window])
        return H[0]


class HFTokenizerAdapter:
    """Word-level tokenize() on top of a HuggingFace tokenizer."""

    def __init__(self, hf_tokenizer):
        self._tok = hf_tokenizer

    def tokenize(self, word: str) -> list[str]:
        return self._tok.tokenize(word)


class PretrainedEncoderProvider(nn.Module):
    """Provider backed by a pretrained checkpoint (document and relation
    encoders share the architecture but hold independent weights).

    ``encode`` wraps the token sequence in [CLS]/[SEP], strips both from the
    outputs and renormalizes the remaining attention rows so they sum to 1.
    The marker token "∗" is mapped to the checkpoint's "*" token.
    """

    def __init__(self, model_name: str, dtype: torch.dtype = torch.float32,
                 freeze_relation_encoder: bool = False):
        super().__init__()
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as e:
            raise ConfigError(
                "pretrained encoders need the 'transformers' package "
                "(pip install fsdlre[pretrained])"
            ) from e
        self._hf_tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.doc_encoder = AutoModel.from_pretrained(model_name).to(dtype)
        self.rel_encoder = AutoModel.from_pretrained(model_name).to(dtype)
        if freeze_relation_encoder:
            for p in self.rel_encoder.parameters():
                p.requires_grad_(False)
        self.tokenizer: Tokenizer = HFTokenizerAdapter(self._hf_tokenizer)
        self.hidden_size = self.doc_encoder.config.hidden_size
        self.max_window = self.doc_encoder.config.max_position_embeddings - 2
        self.dtype = dtype

    def _ids(self, tokens: Sequence[str]) -> list[int]:
        mapped = ["*" if t == MARKER else t for t in tokens]
        return self._hf_tokenizer.convert_tokens_to_ids(mapped)

    def encode(self, tokens: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        tok = self._hf_tokenizer
        ids = [tok.cls_token_id] + self._ids(tokens) + [tok.sep_token_id]
        out = self.doc_encoder(
            input_ids=torch.tensor([ids]), output_attentions=True
        )
        H = out.last_hidden_state[0, 1:-1]
        A = out.attentions[-1][0].mean(dim=0)[1:-1, 1:-1]
        A = A / A.sum(dim=1, keepdim=True)
        return H, A

    def relation_encode(self, text: str) -> torch.Tensor:
        enc = self._hf_tokenizer(text, return_tensors="pt", truncation=True)
        out = self.rel_encoder(**enc)
        return out.last_hidden_state[0, 0]


def make_provider(
    spec: str,
    seed: int = 0,
    hidden_size: int = 32,
    n_layers: int = 2,
    n_heads: int = 4,
    max_window: int = 128,
    dtype: Optional[torch.dtype] = None,
    freeze_relation_encoder: bool = False,
):
    """Build a provider from a config string: ``toy`` or ``pretrained:<name>``."""
    if spec == "toy":
        return ToyEncoderProvider(
            hidden_size=hidden_size,
            n_layers=n_layers,
            n_heads=n_heads,
            max_window=max_window,
            seed=seed,
            dtype=dtype or torch.float64,
            freeze_relation_encoder=freeze_relation_encoder,
        )
    if spec.startswith("pretrained:"):
        name = spec.split(":", 1)[1]
        if not name:
            raise ConfigError("pretrained encoder spec needs a model name")
        return PretrainedEncoderProvider(
            name, dtype=dtype or torch.float32,
            freeze_relation_encoder=freeze_relation_encoder,
        )
    raise ConfigError(f"unknown encoder spec {spec!r} (expected 'toy' or 'pretrained:<name>')")
