"""Dilated 1-d gated convolution stacks with residual and skip connections.

One block = input 1x1 projection, a stack of dilated convolutions with gated
(tanh * sigmoid) units, residual shortcuts and skip accumulation, and a small
1x1 output stack applied to the leaky-ReLU of the skip sum. Blocks run either
causal (left zero padding only) or non-causal (centered zero padding, odd
kernels), and optionally take a frame-aligned conditioning sequence injected
into every gated layer through 1x1 projections.

Causal blocks additionally support incremental single-frame evaluation with
per-layer ring buffers, matching the parallel forward frame for frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

LEAKY_SLOPE = 0.2

_ACTIVATIONS = {
    "leaky_relu": lambda t: F.leaky_relu(t, LEAKY_SLOPE),
    "tanh": torch.tanh,
    "none": lambda t: t,
}


@dataclass(frozen=True)
class BlockConfig:
    in_dim: int
    n_layers: int
    kernel_size: int
    dilations: tuple
    residual_channels: int
    skip_channels: int
    output_stack: tuple  # ((channels, activation), ...)
    causal: bool
    conditioning_dim: int = 0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("need at least one layer")
        if len(self.dilations) != self.n_layers:
            raise ValueError("need one dilation per layer")
        if self.kernel_size < 2:
            raise ValueError("kernel_size must be >= 2")
        if any(d < 1 for d in self.dilations):
            raise ValueError("dilations must be >= 1")
        if not self.causal and self.kernel_size % 2 == 0:
            raise ValueError("non-causal blocks require odd kernels for centered padding")

    @property
    def out_dim(self) -> int:
        return self.output_stack[-1][0]


def receptive_field(config: BlockConfig) -> tuple[int, int]:
    """(past_frames, future_frames) seen by one output frame, excluding itself.

    The total receptive field is past + 1 + future = 1 + sum(d * (k - 1)).
    """
    span = sum(d * (config.kernel_size - 1) for d in config.dilations)
    if config.causal:
        return span, 0
    return span // 2, span // 2


class BlockState:
    """Ring buffers of past residual-stream frames for incremental evaluation."""

    def __init__(self, config: BlockConfig, batch_size: int, dtype=torch.float32):
        depth = config.kernel_size - 1
        self.buffers = [
            torch.zeros(batch_size, config.residual_channels, max(1, depth * d), dtype=dtype)
            for d in config.dilations
        ]
        self.step = 0


class GatedConvBlock(torch.nn.Module):
    def __init__(self, config: BlockConfig):
        super().__init__()
        self.config = config
        c = config
        r, s = c.residual_channels, c.skip_channels
        self.input_proj = torch.nn.Conv1d(c.in_dim, r, 1)
        self.gate_convs = torch.nn.ModuleList(
            torch.nn.Conv1d(r, 2 * r, c.kernel_size, dilation=d) for d in c.dilations
        )
        # Residual and skip 1x1 projections fused into one conv per layer; the
        # first r output channels are the residual update, the rest the skip.
        self.mix_convs = torch.nn.ModuleList(
            torch.nn.Conv1d(r, r + s, 1) for _ in range(c.n_layers)
        )
        if c.conditioning_dim > 0:
            # One conv computes every layer's conditioning contribution at once.
            self.cond_proj = torch.nn.Conv1d(c.conditioning_dim, 2 * r * c.n_layers, 1)
        else:
            self.cond_proj = None
        stack = []
        prev = s
        for channels, _act in c.output_stack:
            stack.append(torch.nn.Conv1d(prev, channels, 1))
            prev = channels
        self.out_convs = torch.nn.ModuleList(stack)

    def reset_parameters(self, seed: int):
        """Fan-in-scaled uniform init (variance 1/fan_in), zero biases."""
        gen = torch.Generator().manual_seed(seed)
        for conv in self.modules():
            if isinstance(conv, torch.nn.Conv1d):
                fan_in = conv.in_channels * conv.kernel_size[0]
                bound = math.sqrt(3.0 / fan_in)
                with torch.no_grad():
                    conv.weight.uniform_(-bound, bound, generator=gen)
                    conv.bias.zero_()
        return self

    def _pad(self, x: torch.Tensor, dilation: int) -> torch.Tensor:
        span = dilation * (self.config.kernel_size - 1)
        if self.config.causal:
            return F.pad(x, (span, 0))
        return F.pad(x, (span // 2, span - span // 2))

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        """x: (batch, in_dim, frames); cond: (batch, cond_dim, frames) or None."""
        c = self.config
        if x.shape[1] != c.in_dim:
            raise ValueError(f"input has {x.shape[1]} channels, config expects {c.in_dim}")
        if (cond is None) != (self.cond_proj is None):
            raise ValueError("conditioning presence must match config.conditioning_dim")
        if cond is not None and cond.shape[-1] != x.shape[-1]:
            raise ValueError("conditioning frame count must match input")
        r = c.residual_channels
        h = self.input_proj(x)
        cond_all = self.cond_proj(cond) if cond is not None else None
        skip = None
        for i, (gate, mix, d) in enumerate(zip(self.gate_convs, self.mix_convs, c.dilations)):
            u = gate(self._pad(h, d))
            if cond_all is not None:
                u = u + cond_all[:, 2 * r * i : 2 * r * (i + 1)]
            z = torch.tanh(u[:, :r]) * torch.sigmoid(u[:, r:])
            rs = mix(z)
            skip = rs[:, r:] if skip is None else skip + rs[:, r:]
            h = h + rs[:, :r]
        out = F.leaky_relu(skip, LEAKY_SLOPE)
        for conv, (_channels, act) in zip(self.out_convs, c.output_stack):
            out = _ACTIVATIONS[act or "none"](conv(out))
        return out

    # -- incremental path (causal blocks only) ------------------------------

    def init_state(self, batch_size: int, dtype=torch.float32) -> BlockState:
        if not self.config.causal:
            raise ValueError("incremental evaluation requires a causal block")
        return BlockState(self.config, batch_size, dtype=dtype)

    def step(
        self, x_t: torch.Tensor, cond_t: torch.Tensor | None, state: BlockState
    ) -> torch.Tensor:
        """One frame: x_t (batch, in_dim), cond_t (batch, cond_dim) or None.

        Mutates ``state``; the returned frame equals frame t of ``forward`` on
        the full history (zero-initialized state = zero left padding).
        """
        c = self.config
        if not c.causal:
            raise ValueError("incremental evaluation requires a causal block")
        r = c.residual_channels
        k = c.kernel_size
        h = F.linear(x_t, self.input_proj.weight[:, :, 0], self.input_proj.bias)
        cond_all = (
            F.linear(cond_t, self.cond_proj.weight[:, :, 0], self.cond_proj.bias)
            if cond_t is not None
            else None
        )
        skip = None
        for i, d in enumerate(c.dilations):
            w = self.gate_convs[i].weight  # (2r, r, k); tap k-1 is the current frame
            buf = state.buffers[i]
            u = F.linear(h, w[:, :, k - 1], self.gate_convs[i].bias)
            for j in range(1, k):
                tap = buf[:, :, (state.step - j * d) % buf.shape[-1]]
                u = u + F.linear(tap, w[:, :, k - 1 - j])
            if cond_all is not None:
                u = u + cond_all[:, 2 * r * i : 2 * r * (i + 1)]
            z = torch.tanh(u[:, :r]) * torch.sigmoid(u[:, r:])
            rs = F.linear(z, self.mix_convs[i].weight[:, :, 0], self.mix_convs[i].bias)
            skip = rs[:, r:] if skip is None else skip + rs[:, r:]
            buf[:, :, state.step % buf.shape[-1]] = h
            h = h + rs[:, :r]
        state.step += 1
        out = F.leaky_relu(skip, LEAKY_SLOPE)
        for conv, (_channels, act) in zip(self.out_convs, c.output_stack):
            out = _ACTIVATIONS[act or "none"](F.linear(out, conv.weight[:, :, 0], conv.bias))
        return out
