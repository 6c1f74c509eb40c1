"""Differentiable conversion model: conditioned source encoder, target encoder,
cross-attention, and a convolutional decoder predicting the target log mel-spectrogram.

Shapes follow the [batch, frames, features] convention. The source path gets a
convolutional front-end and sinusoidal positions; the target path is kept
position-free so its frames act as an unordered bank for cross-attention
retrieval (duplicating a target frame cannot change the output).
"""

from __future__ import annotations

import io
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .alignment import ConditionProjector, project_and_concat
from .audio import MelConfig, MelSpectrogram
from .conditioning import CONTENT_DIM, FRAME, QUALITY_DIM, SCENE_DIM, UTTERANCE
from .errors import ConfigError, NumericError, ShapeError

VARIANTS = ("none-none", "uw-uw", "uw-fw", "fw-uw", "fw-fw")
_MODE_OF = {"uw": UTTERANCE, "fw": FRAME}


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 256
    n_heads: int = 4
    n_enc_blocks: int = 2
    n_dec_blocks: int = 2
    n_mels: int = 80
    variant: str = "none-none"
    projection_init: str = "fan-in"  # or "zeros" (parity experiments)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"variant must be one of {VARIANTS}, got '{self.variant}'", field="variant"
            )
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}",
                field="d_model",
            )
        if self.projection_init not in ("fan-in", "zeros"):
            raise ConfigError(
                f"projection_init must be 'fan-in' or 'zeros', got '{self.projection_init}'",
                field="projection_init",
            )

    @property
    def conditioned(self) -> bool:
        return self.variant != "none-none"

    @property
    def quality_mode(self):
        return None if not self.conditioned else _MODE_OF[self.variant.split("-")[0]]

    @property
    def scene_mode(self):
        return None if not self.conditioned else _MODE_OF[self.variant.split("-")[1]]

    @property
    def source_width(self) -> int:
        return 3 * CONTENT_DIM if self.conditioned else CONTENT_DIM


@dataclass
class LossValue:
    value: float
    n_frames: int

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("loss cannot be negative")


def sinusoidal_positions(n_frames: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    position = torch.arange(n_frames, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(n_frames, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div[: (dim - dim // 2)])
    return pe.to(dtype)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, query, keyvalue, key_mask=None, return_weights=False):
        # query [B, Tq, d], keyvalue [B, Tk, d], key_mask [B, Tk] with True = valid
        b, tq, _ = query.shape
        tk = keyvalue.shape[1]
        q = self.q_proj(query).view(b, tq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(keyvalue).view(b, tk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(keyvalue).view(b, tk, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, tq, -1)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block with a position-wise feed-forward."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm_ffn = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, 2 * d_model), nn.ReLU(), nn.Linear(2 * d_model, d_model)
        )

    def forward(self, x, mask=None):
        h = self.norm_attn(x)
        x = x + self.attn(h, h, key_mask=mask)
        x = x + self.ffn(self.norm_ffn(x))
        return x


class ConvBlock(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.conv = nn.Conv1d(d_model, d_model, kernel_size=3, padding=1)
        self.norm = nn.LayerNorm(d_model)

    def forward(self, x, mask=None):
        if mask is not None:
            x = x * mask[..., None]
        y = self.conv(x.transpose(1, 2)).transpose(1, 2)
        return x + self.norm(torch.relu(y))


class VcModel(nn.Module):
    """Predicts the target speaker's log mel-spectrogram, one row per source frame."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.in_content = nn.Linear(CONTENT_DIM, d)
        if cfg.conditioned:
            self.in_condition = nn.Linear(2 * CONTENT_DIM, d, bias=False)
            self.projector = ConditionProjector(QUALITY_DIM, SCENE_DIM, CONTENT_DIM)
        self.src_front = nn.Conv1d(d, d, kernel_size=3, padding=1)
        self.src_blocks = nn.ModuleList(
            TransformerBlock(d, cfg.n_heads) for _ in range(cfg.n_enc_blocks)
        )
        self.tgt_in = nn.Linear(CONTENT_DIM, d)
        self.tgt_blocks = nn.ModuleList(
            TransformerBlock(d, cfg.n_heads) for _ in range(cfg.n_enc_blocks)
        )
        self.cross_norm_q = nn.LayerNorm(d)
        self.cross_norm_kv = nn.LayerNorm(d)
        self.cross = MultiHeadAttention(d, cfg.n_heads)
        self.dec_blocks = nn.ModuleList(ConvBlock(d) for _ in range(cfg.n_dec_blocks))
        self.head = nn.Linear(d, cfg.n_mels)
        init_parameters(self, seed, zero_projections=(cfg.projection_init == "zeros"))

    # -- forward -----------------------------------------------------------

    def forward(
        self,
        source_features,
        target_content,
        src_mask=None,
        tgt_mask=None,
        return_attention=False,
    ):
        """source_features [.., T_s, width], target_content [.., T_t, 256] -> [.., T_s, n_mels].

        Masks are boolean with True marking valid frames; attention rows over
        valid keys sum to one.
        """
        squeeze = source_features.dim() == 2
        if squeeze:
            source_features = source_features[None]
            target_content = target_content[None]
        if source_features.shape[-1] != self.cfg.source_width:
            raise ShapeError(
                f"source width {source_features.shape[-1]} != "
                f"configured {self.cfg.source_width}"
            )
        if target_content.shape[-1] != CONTENT_DIM:
            raise ShapeError(f"target content width must be {CONTENT_DIM}")

        h = self.in_content(source_features[..., :CONTENT_DIM])
        if self.cfg.conditioned:
            h = h + self.in_condition(source_features[..., CONTENT_DIM:])
        if src_mask is not None:
            h = h * src_mask[..., None]
        h = h + torch.relu(self.src_front(h.transpose(1, 2)).transpose(1, 2))
        h = h + sinusoidal_positions(h.shape[1], h.shape[2], dtype=h.dtype).to(h.device)
        if src_mask is not None:
            h = h * src_mask[..., None]
        for block in self.src_blocks:
            h = block(h, mask=src_mask)
        self._check_finite(h, "source encoder")

        t = self.tgt_in(target_content)
        for block in self.tgt_blocks:
            t = block(t, mask=tgt_mask)
        self._check_finite(t, "target encoder")

        context, attn = self.cross(
            self.cross_norm_q(h), self.cross_norm_kv(t), key_mask=tgt_mask,
            return_weights=True,
        )
        h = h + context
        self._check_finite(h, "cross attention")

        for block in self.dec_blocks:
            h = block(h, mask=src_mask)
        out = self.head(h)
        self._check_finite(out, "decoder head")

        if squeeze:
            out = out[0]
            attn = attn[0]
        if return_attention:
            return out, attn
        return out

    @staticmethod
    def _check_finite(x, stage: str):
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite activations in {stage}")

    def predict_mel(self, source_features, target_content, mel_cfg: MelConfig | None = None):
        """Inference wrapper returning a MelSpectrogram for a single pair."""
        mel_cfg = mel_cfg or MelConfig()
        self.eval()
        with torch.no_grad():
            out = self.forward(source_features, target_content)
        return MelSpectrogram(
            out.detach().cpu().numpy().astype(np.float64),
            mel_cfg.hop_ms,
            mel_cfg.win_ms,
            self.cfg.n_mels,
            mel_cfg.sample_rate_hz,
        )


# ---------------------------------------------------------------------------
# Initialization: per-tensor seeded fan-in uniform so tensors shared between
# variants receive identical values under the same seed.
# ---------------------------------------------------------------------------

def _tensor_seed(seed: int, name: str) -> int:
    # torch's CPU generator keeps only the low 32 seed bits, so both the run
    # seed and the tensor name must land there; the odd multiplier keeps
    # distinct seeds distinct mod 2^32
    return (seed * 0x9E3779B1 + zlib.crc32(name.encode())) & 0xFFFFFFFF


def init_parameters(model: nn.Module, seed: int, zero_projections: bool = False) -> None:
    for name, p in model.named_parameters():
        with torch.no_grad():
            if zero_projections and name.startswith("projector."):
                p.zero_()
            elif name.endswith("bias"):
                p.zero_()
            elif p.dim() == 1:  # layer-norm gains
                p.fill_(1.0)
            else:
                fan_in = p.shape[1] * (p.shape[2] if p.dim() == 3 else 1)
                bound = 1.0 / math.sqrt(fan_in)
                g = torch.Generator().manual_seed(_tensor_seed(seed, name))
                p.copy_(torch.empty_like(p).uniform_(-bound, bound, generator=g))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def l1_loss(predicted: MelSpectrogram, target: MelSpectrogram) -> LossValue:
    """Mean absolute difference over all entries."""
    if predicted.values.shape != target.values.shape:
        raise ShapeError(
            f"shape mismatch: {predicted.values.shape} vs {target.values.shape}"
        )
    value = float(np.mean(np.abs(predicted.values - target.values)))
    return LossValue(value, predicted.n_frames)


def masked_l1(pred: torch.Tensor, target: torch.Tensor, frame_mask: torch.Tensor) -> torch.Tensor:
    """Per-pair mean L1 over valid frames, then mean over the batch."""
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = (pred - target).abs() * frame_mask[..., None]
    per_pair = diff.sum(dim=(1, 2)) / (frame_mask.sum(dim=1) * pred.shape[-1]).clamp(min=1)
    return per_pair.mean()


def batch_source_features(model: VcModel, batch: dict) -> torch.Tensor:
    """Source input matrix; runs the trainable condition projections when enabled."""
    if model.cfg.conditioned:
        return project_and_concat(
            batch["content"], batch["quality"], batch["scene"], model.projector
        )
    return batch["content"]


def pair_losses(model: VcModel, batch: dict) -> torch.Tensor:
    """Per-pair mean L1 over valid frames, shape [batch]."""
    pred = model(
        batch_source_features(model, batch),
        batch["target_content"],
        src_mask=batch["src_mask"],
        tgt_mask=batch["tgt_mask"],
    )
    target = batch["target_mel"]
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    mask = batch["src_mask"]
    diff = (pred - target).abs() * mask[..., None]
    return diff.sum(dim=(1, 2)) / (mask.sum(dim=1) * pred.shape[-1]).clamp(min=1)


def batch_loss(model: VcModel, batch: dict) -> torch.Tensor:
    """Loss of a prepared batch (see training.collate_batch for the tensor layout)."""
    return pair_losses(model, batch).mean()


def gradients(model: VcModel, batch: dict):
    """(loss value, name->gradient) for every trainable tensor of the model."""
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch)
    if not torch.isfinite(loss):
        raise NumericError("non-finite training loss")
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)
    return float(loss.detach()), grads


# ---------------------------------------------------------------------------
# Checkpoint container: magic, version, JSON index, raw little-endian tensors.
# Layout (all integers little-endian):
#   bytes 0..7   magic b"CDVCCKPT"
#   bytes 8..11  format version (u32)
#   bytes 12..19 header length in bytes (u64)
#   header       UTF-8 JSON: config, step, seed, meta, tensor index
#                (name, dtype, shape, offset, nbytes; offsets relative to the
#                 first byte after the header)
#   blob         tensor data, row-major float32/int64
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CDVCCKPT"
CHECKPOINT_VERSION = 1

_DTYPES = {"<f4": np.float32, "<i8": np.int64}


def save_checkpoint(
    path,
    model: VcModel,
    step: int,
    seed: int,
    extra_tensors: dict | None = None,
    meta: dict | None = None,
) -> None:
    tensors = {name: p.detach().cpu().numpy() for name, p in model.state_dict().items()}
    for name, t in (extra_tensors or {}).items():
        tensors[name] = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)

    index = []
    blob = io.BytesIO()
    for name, arr in tensors.items():
        if np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype("<f4")
            dtype = "<f4"
        else:
            arr = arr.astype("<i8")
            dtype = "<i8"
        data = arr.tobytes(order="C")
        index.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "offset": blob.tell(),
                "nbytes": len(data),
            }
        )
        blob.write(data)

    header = {
        "config": asdict(model.cfg),
        "step": int(step),
        "seed": int(seed),
        "meta": meta or {},
        "tensors": index,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(blob.getvalue())


def load_checkpoint(path) -> dict:
    """Raw checkpoint contents: {'config', 'step', 'seed', 'meta', 'tensors': name->ndarray}."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        blob = f.read()

    tensors = {}
    for entry in header["tensors"]:
        raw = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return {
        "config": header["config"],
        "step": header["step"],
        "seed": header["seed"],
        "meta": header["meta"],
        "tensors": tensors,
    }


def model_from_checkpoint(path):
    """Rebuild the model (and return the full checkpoint dict) from a file."""
    ckpt = load_checkpoint(path)
    cfg = ModelConfig(**ckpt["config"])
    model = VcModel(cfg, seed=ckpt["seed"])
    state = {
        name: torch.from_numpy(arr)
        for name, arr in ckpt["tensors"].items()
        if not name.startswith("opt.")
    }
    model.load_state_dict(state)
    model.eval()
    return model, ckpt
