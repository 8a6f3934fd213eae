"""Shared network building blocks (StyleGAN-style equalized layers)."""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class PixelNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt(torch.mean(x * x, dim=-1, keepdim=True) + 1e-8)


class EqualLinear(nn.Module):
    """Fully connected layer with equalized learning rate.

    `init_std` shrinks the initial output without touching the gradient
    scale, used for heads that should start near zero.
    """

    def __init__(self, in_features, out_features, bias=True, bias_init=0.0,
                 lr_mul=1.0, activation=None, init_std=1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_features, in_features) * init_std / lr_mul)
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init))) if bias else None
        self.weight_gain = lr_mul / math.sqrt(in_features)
        self.bias_gain = lr_mul
        self.activation = activation

    def forward(self, x):
        b = self.bias * self.bias_gain if self.bias is not None else None
        x = F.linear(x, self.weight * self.weight_gain, b)
        if self.activation == "lrelu":
            x = F.leaky_relu(x, 0.2) * math.sqrt(2.0)
        return x


class FiLM(nn.Module):
    """Feature-wise scale/shift predicted from a conditioning vector."""

    def __init__(self, cond_dim, features):
        super().__init__()
        self.affine = EqualLinear(cond_dim, 2 * features)

    def forward(self, x, cond):
        scale, shift = self.affine(cond).chunk(2, dim=-1)
        while scale.dim() < x.dim():
            scale = scale.unsqueeze(-2)
            shift = shift.unsqueeze(-2)
        return x * (1.0 + scale) + shift


class ModLinear(nn.Module):
    """Linear layer with per-feature input modulation from a latent."""

    def __init__(self, in_features, out_features, w_dim, activation="lrelu"):
        super().__init__()
        self.style = EqualLinear(w_dim, in_features, bias_init=1.0)
        self.linear = EqualLinear(in_features, out_features, activation=activation)

    def forward(self, x, w):
        s = self.style(w)
        while s.dim() < x.dim():
            s = s.unsqueeze(-2)
        return self.linear(x * s)


class SelfAttention(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        assert width % heads == 0
        self.heads = heads
        self.qkv = EqualLinear(width, 3 * width)
        self.proj = EqualLinear(width, width)

    def forward(self, x):
        b, l, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(b, l, 3, h, d // h).permute(2, 0, 3, 1, 4).unbind(0)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, l, d)
        return self.proj(out)


class AdaLNBlock(nn.Module):
    """Transformer block with latent-modulated layer norms (no token mixing
    other than self-attention, so per-component isolation is preserved when
    the block is called on one component's token slice)."""

    def __init__(self, width, heads, w_dim):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False)
        self.film1 = FiLM(w_dim, width)
        self.film2 = FiLM(w_dim, width)
        self.attn = SelfAttention(width, heads)
        self.fc1 = EqualLinear(width, 2 * width, activation="lrelu")
        self.fc2 = EqualLinear(2 * width, width)

    def forward(self, x, w):
        x = x + self.attn(self.film1(self.norm1(x), w))
        x = x + self.fc2(self.fc1(self.film2(self.norm2(x), w)))
        return x
