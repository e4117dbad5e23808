"""The timbre model: two interchangeable encoders and a two-scope decoder.

An acoustic encoder (log-mel in) and a linguistic encoder (one-hot phone
frames in) are trained to produce the same frame-wise embedding sequence. The
decoder splits into a wide-context non-causal network conditioned on F0 and a
speaker vector, followed by a short-context causal network that predicts each
mel frame from previous frames. During training the decoder input embedding
is switched at random between the two encoders, noise is added to the chosen
embedding and to the teacher-forced history, and the loss combines mel
reconstruction with an embedding-agreement penalty.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F

from .blocks import BlockConfig, GatedConvBlock, receptive_field


@dataclass(frozen=True)
class NoiseConfig:
    """Noise bottleneck and stochastic encoder switch settings."""

    sigma_embed: float = 0.3
    sigma_history: float = 0.2
    switch_p: float = 0.5

    def __post_init__(self):
        if self.sigma_embed < 0 or self.sigma_history < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not 0.0 <= self.switch_p <= 1.0:
            raise ValueError("switch_p must be in [0, 1]")


SILENT_NOISE = NoiseConfig(sigma_embed=0.0, sigma_history=0.0, switch_p=0.5)


@dataclass(frozen=True)
class ModelConfig:
    n_bands: int = 100
    inventory_size: int = 12
    n_speakers: int = 1
    embedding_dim: int = 120
    speaker_dim: int = 16
    f0_channels: int = 2
    acoustic_encoder: bool = True

    encoder_layers: int = 9
    encoder_kernel: int = 3
    encoder_dilations: tuple = (1, 2, 4, 1, 2, 4, 1, 2, 4)
    encoder_channels: int = 70

    context_layers: int = 10
    context_kernel: int = 3
    context_dilations: tuple = (1, 2, 4, 1, 2, 4, 1, 2, 4, 1)
    context_channels: int = 70

    frame_layers: int = 8
    frame_kernel: int = 2
    frame_dilations: tuple = (1, 2, 4, 8, 16, 1, 2, 4)
    frame_channels: int = 200

    @property
    def control_dim(self) -> int:
        return self.f0_channels + self.speaker_dim

    def encoder_block(self, in_dim: int) -> BlockConfig:
        return BlockConfig(
            in_dim=in_dim,
            n_layers=self.encoder_layers,
            kernel_size=self.encoder_kernel,
            dilations=tuple(self.encoder_dilations),
            residual_channels=self.encoder_channels,
            skip_channels=self.encoder_channels,
            output_stack=((self.embedding_dim, "leaky_relu"), (self.embedding_dim, "tanh")),
            causal=False,
        )

    def context_block(self) -> BlockConfig:
        return BlockConfig(
            in_dim=self.embedding_dim + self.control_dim,
            n_layers=self.context_layers,
            kernel_size=self.context_kernel,
            dilations=tuple(self.context_dilations),
            residual_channels=self.context_channels,
            skip_channels=self.context_channels,
            output_stack=((self.embedding_dim, "leaky_relu"), (self.embedding_dim, "tanh")),
            causal=False,
            conditioning_dim=self.control_dim,
        )

    def frame_block(self) -> BlockConfig:
        return BlockConfig(
            in_dim=self.n_bands,
            n_layers=self.frame_layers,
            kernel_size=self.frame_kernel,
            dilations=tuple(self.frame_dilations),
            residual_channels=self.frame_channels,
            skip_channels=self.frame_channels,
            output_stack=((self.frame_channels, "leaky_relu"), (self.n_bands, "none")),
            causal=True,
            conditioning_dim=self.embedding_dim + self.control_dim,
        )

    def scaled(self, factor: float) -> "ModelConfig":
        """Copy with all channel widths scaled (architecture depth unchanged)."""

        def s(n, lo=4):
            return max(lo, int(round(n * factor)))

        return ModelConfig(
            n_bands=self.n_bands,
            inventory_size=self.inventory_size,
            n_speakers=self.n_speakers,
            embedding_dim=s(self.embedding_dim),
            speaker_dim=s(self.speaker_dim),
            f0_channels=self.f0_channels,
            acoustic_encoder=self.acoustic_encoder,
            encoder_layers=self.encoder_layers,
            encoder_kernel=self.encoder_kernel,
            encoder_dilations=self.encoder_dilations,
            encoder_channels=s(self.encoder_channels),
            context_layers=self.context_layers,
            context_kernel=self.context_kernel,
            context_dilations=self.context_dilations,
            context_channels=s(self.context_channels),
            frame_layers=self.frame_layers,
            frame_kernel=self.frame_kernel,
            frame_dilations=self.frame_dilations,
            frame_channels=s(self.frame_channels),
        )

    def with_speakers(self, n: int) -> "ModelConfig":
        d = asdict(self)
        d["n_speakers"] = n
        for key in ("encoder_dilations", "context_dilations", "frame_dilations"):
            d[key] = tuple(d[key])
        return ModelConfig(**d)

    def fingerprint(self) -> str:
        d = asdict(self)
        for key in ("encoder_dilations", "context_dilations", "frame_dilations"):
            d[key] = list(d[key])
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def system_receptive_field(config: ModelConfig) -> dict:
    """Per-network and composed receptive fields, in frames."""
    enc_past, enc_future = receptive_field(config.encoder_block(config.n_bands))
    ctx_past, ctx_future = receptive_field(config.context_block())
    frm_past, frm_future = receptive_field(config.frame_block())
    return {
        "encoder": (enc_past, enc_future),
        "context": (ctx_past, ctx_future),
        "frame": (frm_past, frm_future),
        # one extra past frame: the frame decoder reads the previous frame's
        # target through the one-step shift of its autoregressive input
        "system_past": enc_past + ctx_past + frm_past + 1,
        "system_future": enc_future + ctx_future + frm_future,
    }


@dataclass
class LossTerms:
    total: torch.Tensor
    recon: torch.Tensor
    embed: torch.Tensor
    switch_k: torch.Tensor


def masked_mean_sq(diff: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of diff**2 over frames where mask is true, across all channels.

    diff: (batch, channels, frames); mask: (batch, frames) bool.
    """
    m = mask[:, None, :].to(diff.dtype)
    denom = m.sum() * diff.shape[1]
    if denom == 0:
        raise ValueError("loss mask selects no frames")
    return (diff * diff * m).sum() / denom


class TimbreModel(torch.nn.Module):
    """Full system: encoders, speaker table, context and frame decoders."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        if config.acoustic_encoder:
            self.acoustic_encoder = GatedConvBlock(config.encoder_block(config.n_bands))
        else:
            self.acoustic_encoder = None
        self.linguistic_encoder = GatedConvBlock(config.encoder_block(config.inventory_size))
        self.context_decoder = GatedConvBlock(config.context_block())
        self.frame_decoder = GatedConvBlock(config.frame_block())
        self.speaker_table = torch.nn.Embedding(config.n_speakers, config.speaker_dim)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int):
        if self.acoustic_encoder is not None:
            self.acoustic_encoder.reset_parameters(seed + 1)
        self.linguistic_encoder.reset_parameters(seed + 2)
        self.context_decoder.reset_parameters(seed + 3)
        self.frame_decoder.reset_parameters(seed + 4)
        gen = torch.Generator().manual_seed(seed + 5)
        with torch.no_grad():
            self.speaker_table.weight.uniform_(-0.1, 0.1, generator=gen)
        return self

    # -- encoders ------------------------------------------------------------

    def encode_acoustic(self, mel: torch.Tensor) -> torch.Tensor:
        """mel: (batch, n_bands, frames) -> embedding (batch, embed_dim, frames)."""
        if self.acoustic_encoder is None:
            raise RuntimeError("this model was built without an acoustic encoder")
        return self.acoustic_encoder(mel)

    def encode_linguistic(self, phones: torch.Tensor) -> torch.Tensor:
        """phones: (batch, frames) int ids -> embedding (batch, embed_dim, frames)."""
        onehot = F.one_hot(phones.long(), self.config.inventory_size)
        onehot = onehot.transpose(1, 2).to(self.speaker_table.weight.dtype)
        return self.linguistic_encoder(onehot)

    @staticmethod
    def switch_embedding(
        acoustic: torch.Tensor, linguistic: torch.Tensor, k: torch.Tensor
    ) -> torch.Tensor:
        """Per-example switch: k * acoustic + (1 - k) * linguistic, k in {0, 1}."""
        if acoustic.shape != linguistic.shape:
            raise ValueError("embeddings must share shape")
        kb = k.to(acoustic.dtype).view(-1, 1, 1)
        return kb * acoustic + (1.0 - kb) * linguistic

    def build_control(self, f0_channels: torch.Tensor, speaker_idx: torch.Tensor) -> torch.Tensor:
        """Control sequence: F0 channels concatenated with the broadcast speaker vector."""
        spk = self.speaker_table(speaker_idx.long())  # (batch, speaker_dim)
        spk = spk[:, :, None].expand(-1, -1, f0_channels.shape[-1])
        return torch.cat([f0_channels.to(spk.dtype), spk], dim=1)

    # -- decoding --------------------------------------------------------------

    def _control_context(
        self, embedding: torch.Tensor, control: torch.Tensor
    ) -> torch.Tensor:
        """Context decoder pass; returns the frame decoder's conditioning."""
        ctx = self.context_decoder(torch.cat([embedding, control], dim=1), cond=control)
        return torch.cat([ctx, control], dim=1)

    def decode_teacher_forced(
        self,
        embedding: torch.Tensor,
        control: torch.Tensor,
        target: torch.Tensor,
        noise: NoiseConfig = SILENT_NOISE,
        generator: torch.Generator | None = None,
        capture: dict | None = None,
    ) -> torch.Tensor:
        """Predict mel frames from noisy embedding and noisy shifted targets.

        The frame decoder's autoregressive input is the target shifted one
        frame right (zero first frame) plus history noise; embedding noise is
        added after the encoder's tanh, before concatenation with control.
        ``capture``, when given, receives the post-noise intermediates.
        """
        if not (embedding.shape[-1] == control.shape[-1] == target.shape[-1]):
            raise ValueError("embedding, control and target must be frame-aligned")
        if noise.sigma_embed > 0:
            embedding = embedding + noise.sigma_embed * _randn_like(embedding, generator)
        cond = self._control_context(embedding, control)
        first = torch.zeros_like(target[:, :, :1])
        history = torch.cat([first, target[:, :, :-1]], dim=-1)
        if noise.sigma_history > 0:
            history = history + noise.sigma_history * _randn_like(history, generator)
        if capture is not None:
            capture["noisy_embedding"] = embedding.detach()
            capture["noisy_history"] = history.detach()
        return self.frame_decoder(history, cond=cond)

    def loss_terms(
        self,
        mel_target: torch.Tensor,
        mel_encoder_input: torch.Tensor,
        phones: torch.Tensor,
        f0_channels: torch.Tensor,
        speaker_idx: torch.Tensor,
        valid_mask: torch.Tensor,
        noise: NoiseConfig,
        weight_recon: float = 1.0,
        weight_embed: float = 0.2,
        generator: torch.Generator | None = None,
        switch_k: torch.Tensor | None = None,
    ) -> LossTerms:
        """Weighted sum of reconstruction and embedding-agreement losses.

        ``mel_encoder_input`` is what the acoustic encoder sees (possibly
        pitch-transposed); ``mel_target`` is the clean reconstruction target
        and teacher-forcing source. Both reductions are means over valid
        frames and channels, so the weights are independent of segment length.
        """
        batch = mel_target.shape[0]
        ling = self.encode_linguistic(phones)
        control = self.build_control(f0_channels, speaker_idx)
        if self.acoustic_encoder is not None:
            acou = self.encode_acoustic(mel_encoder_input)
            embed_loss = masked_mean_sq(acou - ling, valid_mask)
            if switch_k is None:
                if generator is None:
                    raise ValueError("need a generator to draw the encoder switch")
                switch_k = (
                    torch.rand(batch, generator=generator) < noise.switch_p
                ).to(mel_target.dtype)
            embedding = self.switch_embedding(acou, ling, switch_k)
        else:
            embed_loss = torch.zeros((), dtype=mel_target.dtype)
            switch_k = torch.zeros(batch, dtype=mel_target.dtype)
            embedding = ling
        pred = self.decode_teacher_forced(embedding, control, mel_target, noise, generator)
        recon_loss = masked_mean_sq(mel_target - pred, valid_mask)
        total = weight_recon * recon_loss + weight_embed * embed_loss
        return LossTerms(total=total, recon=recon_loss, embed=embed_loss, switch_k=switch_k)

    # -- inference ---------------------------------------------------------------

    @torch.no_grad()
    def _infer_from_embedding(
        self, embedding: torch.Tensor, control: torch.Tensor
    ) -> torch.Tensor:
        """True autoregressive decoding, feeding back predictions frame by frame."""
        cond = self._control_context(embedding, control)
        batch, _, frames = cond.shape
        state = self.frame_decoder.init_state(batch, dtype=cond.dtype)
        prev = torch.zeros(batch, self.config.n_bands, dtype=cond.dtype)
        outputs = []
        for t in range(frames):
            prev = self.frame_decoder.step(prev, cond[:, :, t], state)
            outputs.append(prev)
        return torch.stack(outputs, dim=2)

    @torch.no_grad()
    def infer_autoregressive(
        self, phones: torch.Tensor, f0_channels: torch.Tensor, speaker_idx: torch.Tensor
    ) -> torch.Tensor:
        """Inference from linguistic features; noise-free and deterministic."""
        embedding = self.encode_linguistic(phones)
        control = self.build_control(f0_channels, speaker_idx)
        return self._infer_from_embedding(embedding, control)

    @torch.no_grad()
    def infer_voice_conversion(
        self, mel_source: torch.Tensor, f0_channels: torch.Tensor, speaker_idx: torch.Tensor
    ) -> torch.Tensor:
        """Inference controlled by acoustic input instead of phone labels."""
        embedding = self.encode_acoustic(mel_source)
        control = self.build_control(f0_channels, speaker_idx)
        return self._infer_from_embedding(embedding, control)

    # -- persistence helpers -------------------------------------------------

    def named_arrays(self) -> dict:
        return {name: p.detach().cpu().numpy().copy() for name, p in self.state_dict().items()}

    def load_arrays(self, arrays: dict):
        state = {name: torch.from_numpy(arr.copy()) for name, arr in arrays.items()}
        self.load_state_dict(state)
        return self


def _randn_like(t: torch.Tensor, generator: torch.Generator | None) -> torch.Tensor:
    return torch.randn(t.shape, dtype=t.dtype, generator=generator)
