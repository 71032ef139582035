"""Encoder / mask separator / decoder network for single-channel load separation.

Shapes follow the usual (batch..., channels, time) layout. A mixture window
of T samples is cut into K = (T - L) // S + 1 frames by a strided learned
filterbank, a dilated temporal convolution stack estimates one non-negative
mask per appliance over that latent representation, and a shared
overlap-add decoder turns every masked representation back into a power
series.

Hyperparameter names map onto the customary letters as follows:
n_filters=N, filter_len=L, stride=S, bottleneck=B, hidden=H, kernel=P,
blocks=X, repeats=R, n_sources=C.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv1dSpec, channel_norm, conv1d, glu, transposed_conv1d

log = logging.getLogger(__name__)

VARIANTS = ("base", "causal", "causal-glu")
REFERENCE_PARAM_COUNT = 41088


@dataclass(frozen=True)
class ModelConfig:
    n_filters: int = 32
    filter_len: int = 48
    stride: int = 24
    bottleneck: int = 2
    hidden: int = 3
    kernel: int = 3
    blocks: int = 3
    repeats: int = 2
    n_sources: int = 5
    causal: bool = False
    glu: bool = False
    leaky_slope: float = 0.01
    # normalization used by causal variants; "cumulative" carries state from t=0
    causal_norm: str = "channel"

    def __post_init__(self):
        for name in ("n_filters", "filter_len", "stride", "bottleneck", "hidden",
                     "kernel", "blocks", "repeats", "n_sources"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.stride > self.filter_len:
            raise ValueError("encoder stride must not exceed the filter length")
        if not 0 <= self.leaky_slope < 1:
            raise ValueError("leaky_slope must lie in [0, 1)")
        if self.causal_norm not in ("channel", "cumulative"):
            raise ValueError(f"unknown causal_norm {self.causal_norm!r}")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        flags = {"base": (False, False), "causal": (True, False), "causal-glu": (True, True)}[variant]
        return cls(**{"causal": flags[0], "glu": flags[1], **overrides})

    @property
    def variant(self) -> str:
        if not self.causal:
            return "base"
        return "causal-glu" if self.glu else "causal"

    @property
    def norm_mode(self) -> str:
        return self.causal_norm if self.causal else "global"

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def n_frames(self, length: int) -> int:
        if length < self.filter_len:
            raise ValueError(f"signal of {length} samples is shorter than one frame ({self.filter_len})")
        return (length - self.filter_len) // self.stride + 1

    def output_length(self, n_frames: int) -> int:
        return (n_frames - 1) * self.stride + self.filter_len


# ---------------------------------------------------------------------------
# Layer layout and parameters


def _block_names(config: ModelConfig):
    for r in range(config.repeats):
        for x in range(config.blocks):
            yield f"separator.block{r * config.blocks + x}", 2 ** x


def _specs(config: ModelConfig) -> dict[str, Conv1dSpec]:
    """Every convolution in the network keyed by parameter prefix."""
    N, B, H, C = config.n_filters, config.bottleneck, config.hidden, config.n_sources
    pad = "causal" if config.causal else "same"
    specs = {
        "encoder": Conv1dSpec(1, N, config.filter_len, stride=config.stride),
        "separator.bottleneck": Conv1dSpec(N, B, 1),
    }
    for name, dilation in _block_names(config):
        dw = Conv1dSpec(H, H, config.kernel, dilation=dilation, padding=pad, depthwise=True, bias=False)
        specs[f"{name}.conv_in"] = Conv1dSpec(B, H, 1)
        if config.glu:
            specs[f"{name}.conv_in_gate"] = Conv1dSpec(B, H, 1)
        specs[f"{name}.dconv"] = dw
        if config.glu:
            specs[f"{name}.dconv_gate"] = dw
        specs[f"{name}.residual"] = Conv1dSpec(H, B, 1)
        specs[f"{name}.skip"] = Conv1dSpec(H, B, 1)
    specs["separator.mask"] = Conv1dSpec(B, C * N, 1)
    return specs


def _norm_channels(config: ModelConfig) -> dict[str, int]:
    norms = {"separator.norm": config.n_filters}
    for name, _ in _block_names(config):
        norms[f"{name}.norm1"] = config.hidden
        norms[f"{name}.norm2"] = config.hidden
    return norms


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameters, uniform in +-sqrt(1/fan_in); norms start as identity."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for prefix, spec in _specs(config).items():
        cout, cin, k = spec.weight_shape
        bound = np.sqrt(1.0 / (cin * k))
        params[f"{prefix}.weight"] = rng.uniform(-bound, bound, size=spec.weight_shape)
        if spec.bias and not spec.depthwise:
            params[f"{prefix}.bias"] = rng.uniform(-bound, bound, size=cout)
    bound = np.sqrt(1.0 / config.n_filters)
    params["decoder.weight"] = rng.uniform(-bound, bound, size=(config.n_filters, config.filter_len))
    for prefix, ch in _norm_channels(config).items():
        params[f"{prefix}.gain"] = np.ones((ch, 1))
        params[f"{prefix}.bias"] = np.zeros((ch, 1))
    return {name: Tensor(value, requires_grad=True) for name, value in sorted(params.items())}


@dataclass
class ParamCount:
    total: int
    breakdown: dict[str, int]

    def table(self) -> str:
        width = max(len(k) for k in self.breakdown)
        lines = [f"{k:<{width}}  {v:>8d}" for k, v in self.breakdown.items()]
        lines.append(f"{'total':<{width}}  {self.total:>8d}")
        return "\n".join(lines)


def param_count(config: ModelConfig) -> ParamCount:
    """Exact number of learnable scalars, by layer group.

    Biases everywhere except the depthwise convolutions and the decoder.
    """
    N, L, B, H, P, C = (config.n_filters, config.filter_len, config.bottleneck,
                        config.hidden, config.kernel, config.n_sources)
    gate = 2 if config.glu else 1
    per_block = (gate * (B * H + H)      # 1x1 in (+ gate)
                 + 2 * H                 # norm 1
                 + gate * H * P          # depthwise (+ gate)
                 + 2 * H                 # norm 2
                 + 2 * (H * B + B))      # residual + skip
    breakdown = {
        "encoder": N * L + N,
        "decoder": N * L,
        "separator.norm": 2 * N,
        "separator.bottleneck": N * B + B,
        "separator.blocks": config.blocks * config.repeats * per_block,
        "separator.mask": B * C * N + C * N,
    }
    total = sum(breakdown.values())
    log.info("parameter count %d (published figure for the reference setup: %d): %s",
             total, REFERENCE_PARAM_COUNT, ", ".join(f"{k} {v}" for k, v in breakdown.items()))
    return ParamCount(total, breakdown)


@dataclass(frozen=True)
class ReceptiveField:
    frames: int
    samples: int
    stacked_layers: int
    formula_frames_kernel: int
    formula_frames_filter: int

    def describe(self, period: float = 1.0) -> str:
        return "\n".join([
            f"separator receptive field: {self.frames} frames, "
            f"{self.samples} samples ({self.samples * period:g} s)",
            f"2^l (P-1) with l={self.stacked_layers}: {self.formula_frames_kernel} frames",
            f"2^l (L-1) with l={self.stacked_layers}: {self.formula_frames_filter} frames",
        ])


def receptive_field(config: ModelConfig) -> ReceptiveField:
    """Analytic receptive field of the separator stack.

    ``frames`` is the exact span for dilations 1, 2, ..., 2^(X-1) restarting
    in every repeat; ``samples`` converts it through the encoder framing.
    The closed form 2^l (k - 1) with l = X*R stacked layers is reported
    both with k the block kernel and with k the encoder filter length; it
    bounds the exact span from above.
    """
    layers = config.blocks * config.repeats
    frames = 1 + config.repeats * (config.kernel - 1) * (2 ** config.blocks - 1)
    return ReceptiveField(
        frames=frames,
        samples=(frames - 1) * config.stride + config.filter_len,
        stacked_layers=layers,
        formula_frames_kernel=2 ** layers * (config.kernel - 1),
        formula_frames_filter=2 ** layers * (config.filter_len - 1),
    )


# ---------------------------------------------------------------------------
# Forward pass


def _act(x: Tensor, config: ModelConfig) -> Tensor:
    return ad.relu(x) if config.leaky_slope == 0 else ad.leaky_relu(x, config.leaky_slope)


def _conv(x: Tensor, params, specs, name: str) -> Tensor:
    bias = params.get(f"{name}.bias")
    return conv1d(x, specs[name], ad.as_tensor(params[f"{name}.weight"]),
                  None if bias is None else ad.as_tensor(bias))


def _norm(x: Tensor, params, name: str, mode: str) -> Tensor:
    return channel_norm(x, mode, ad.as_tensor(params[f"{name}.gain"]), ad.as_tensor(params[f"{name}.bias"]))


def encode(mixture: Tensor, params, config: ModelConfig) -> Tensor:
    """(..., 1, T) scaled mixture -> (..., N, K) latent frames."""
    if mixture.ndim == 1:
        mixture = mixture.reshape(1, mixture.shape[0])
    config.n_frames(mixture.shape[-1])
    specs = _specs(config)
    return _act(_conv(mixture, params, specs, "encoder"), config)


def separate(latent: Tensor, params, config: ModelConfig) -> Tensor:
    """(..., N, K) latent frames -> (..., C, N, K) non-negative masks."""
    specs = _specs(config)
    mode = config.norm_mode
    x = _norm(latent, params, "separator.norm", mode)
    x = _conv(x, params, specs, "separator.bottleneck")
    skips = None
    for name, _ in _block_names(config):
        h = _conv(x, params, specs, f"{name}.conv_in")
        if config.glu:
            h = glu(h, _conv(x, params, specs, f"{name}.conv_in_gate"))
        else:
            h = _act(h, config)
        h = _norm(h, params, f"{name}.norm1", mode)
        d = _conv(h, params, specs, f"{name}.dconv")
        if config.glu:
            d = glu(d, _conv(h, params, specs, f"{name}.dconv_gate"))
        else:
            d = _act(d, config)
        d = _norm(d, params, f"{name}.norm2", mode)
        x = x + _conv(d, params, specs, f"{name}.residual")
        skip = _conv(d, params, specs, f"{name}.skip")
        skips = skip if skips is None else skips + skip
    masks = ad.relu(_conv(_act(skips, config), params, specs, "separator.mask"))
    lead = latent.shape[:-2]
    return masks.reshape(lead + (config.n_sources, config.n_filters, latent.shape[-1]))


def apply_masks(latent: Tensor, masks: Tensor) -> Tensor:
    """Per-appliance masked representations, (..., C, N, K)."""
    if masks.shape[-2:] != latent.shape[-2:]:
        raise ValueError(f"mask shape {masks.shape} does not match latent {latent.shape}")
    lead = latent.shape[:-2]
    return latent.reshape(lead + (1,) + latent.shape[-2:]) * masks


def decode(sources: Tensor, params, config: ModelConfig) -> Tensor:
    """(..., C, N, K) masked representations -> (..., C, T) power series."""
    out = transposed_conv1d(sources, ad.as_tensor(params["decoder.weight"]), config.stride)
    return out.reshape(out.shape[:-2] + (out.shape[-1],))


def forward(mixture: Tensor, params, config: ModelConfig) -> Tensor:
    latent = encode(mixture, params, config)
    masks = separate(latent, params, config)
    return decode(apply_masks(latent, masks), params, config)


def predict(params, config: ModelConfig, mixture: np.ndarray) -> np.ndarray:
    """Inference on raw arrays; (..., T) or (..., 1, T) in, (..., C, T') out."""
    x = np.asarray(mixture, dtype=np.float64)
    if x.ndim == 1 or x.shape[-2] != 1:
        x = x[..., None, :]
    with ad.no_grad():
        return forward(Tensor(x), params, config).data


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (little-endian):
#   b"CNN1"
#   9 x uint32   n_filters filter_len stride bottleneck hidden kernel blocks repeats n_sources
#   3 x uint8    causal glu causal_norm(0=channel, 1=cumulative)
#   float64      leaky_slope
#   uint32 + utf8 JSON metadata
#   uint32       blob count, then per blob:
#                uint16 + utf8 name, uint8 ndim, ndim x uint32 shape, raw float64 data

MAGIC = b"CNN1"
_INT_FIELDS = ("n_filters", "filter_len", "stride", "bottleneck", "hidden",
               "kernel", "blocks", "repeats", "n_sources")
_HEADER = struct.Struct("<9I3Bd")
OPTIM_PREFIX = "optim."


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, Tensor]
    meta: dict = field(default_factory=dict)
    extra: dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(path, config: ModelConfig, params, meta: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_HEADER.pack(*(getattr(config, f) for f in _INT_FIELDS),
                           int(config.causal), int(config.glu),
                           0 if config.causal_norm == "channel" else 1,
                           float(config.leaky_slope)))
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    blobs = {name: (t.data if isinstance(t, Tensor) else t) for name, t in params.items()}
    for name, arr in (extra or {}).items():
        blobs[OPTIM_PREFIX + name] = arr
    buf.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    try:
        vals = _HEADER.unpack_from(raw, 4)
        pos = 4 + _HEADER.size
        fields = dict(zip(_INT_FIELDS, vals[:9]))
        config = ModelConfig(**fields, causal=bool(vals[9]), glu=bool(vals[10]),
                             causal_norm="channel" if vals[11] == 0 else "cumulative",
                             leaky_slope=vals[12])
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        meta = json.loads(raw[pos:pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        params, extra = {}, {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
            if name.startswith(OPTIM_PREFIX):
                extra[name[len(OPTIM_PREFIX):]] = arr
            else:
                params[name] = Tensor(arr, requires_grad=True)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return Checkpoint(config, params, meta, extra)


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
