"""Composite torch modules with a known interchange decomposition."""

import torch
from torch import nn


class TransformerBlockNet(nn.Module):
    """Patch classifier with one pre-norm attention block.

    Input is a pre-patchified ``(batch, tokens, patch_dim)`` tensor.  The
    block follows the usual encoder layout (layernorm, self-attention,
    residual, layernorm, GELU MLP, residual) and classifies from the
    flattened token stack, so every operation lands in the closed
    interchange layer set once the fused attention is decomposed.
    """

    def __init__(self, tokens, patch_dim, dim, heads, mlp_dim, num_classes):
        super().__init__()
        self.tokens = tokens
        self.embed = nn.Linear(patch_dim, dim)
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp1 = nn.Linear(dim, mlp_dim)
        self.act = nn.GELU()
        self.mlp2 = nn.Linear(mlp_dim, dim)
        self.head = nn.Linear(tokens * dim, num_classes)

    def forward(self, x):
        h = self.embed(x)
        n = self.ln1(h)
        a, _ = self.attn(n, n, n, need_weights=False)
        h = h + a
        n = self.ln2(h)
        h = h + self.mlp2(self.act(self.mlp1(n)))
        return self.head(torch.flatten(h, 1))
