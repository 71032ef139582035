"""Whole-signal and chunked inference on arbitrarily long mixtures."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ModelConfig, apply_masks, decode, encode, predict, receptive_field, separate


class StreamingUnsupported(ValueError):
    pass


def padded_frames(config: ModelConfig, length: int) -> int:
    """Frames needed so that the decoded output covers ``length`` samples."""
    if length < config.filter_len:
        raise ValueError(f"input of {length} samples is shorter than one frame ({config.filter_len})")
    return -(-(length - config.filter_len) // config.stride) + 1


def disaggregate(params, config: ModelConfig, mixture, stream: bool = False,
                 chunk_frames: int | None = None) -> np.ndarray:
    """Separate a scaled mixture of any length into (C, T) scaled appliance series.

    The input is zero-padded on the right to a whole number of frames and
    the output trimmed back to T. With ``stream`` a causal model runs over
    chunks of ``chunk_frames`` frames (default: one receptive field), each
    preceded by one receptive field of context; the result is bit-identical
    to the whole-signal pass.
    """
    x = np.asarray(mixture, dtype=np.float64).reshape(-1)
    length = x.shape[0]
    n_frames = padded_frames(config, length)
    full = config.output_length(n_frames)
    x = np.pad(x, (0, full - length))
    if not stream:
        return predict(params, config, x)[:, :length]
    if not config.causal:
        raise StreamingUnsupported("streaming needs a causal checkpoint")
    if config.causal_norm == "cumulative":
        raise StreamingUnsupported("cumulative normalization depends on the whole past; stream disabled")

    rf = receptive_field(config).frames
    chunk = chunk_frames or rf
    if chunk < 1:
        raise ValueError("chunk_frames must be positive")
    S, L = config.stride, config.filter_len
    keep = -(-L // S) - 1          # earlier frames still overlapping the current one
    out = np.empty((config.n_sources, full))
    carry = None
    with ad.no_grad():
        for a in range(0, n_frames, chunk):
            b = min(a + chunk, n_frames)
            lo = max(0, a - (rf - 1))
            seg = Tensor(x[lo * S:(b - 1) * S + L][None, :])
            latent = encode(seg, params, config)
            frames = apply_masks(latent, separate(latent, params, config)).data[..., a - lo:]
            if carry is not None and keep:
                frames = np.concatenate([carry, frames], axis=-1)
            first = b - frames.shape[-1]
            y = decode(Tensor(frames), params, config).data
            stop = b * S if b < n_frames else full
            out[:, a * S:stop] = y[:, (a - first) * S:stop - first * S]
            carry = frames[..., frames.shape[-1] - keep:] if keep else None
    return out[:, :length]
