"""CSI windows as spatio-temporal token tensors.

A window of 20 packets over 9 links and 30 subcarriers becomes 180 tokens,
link-major (token k = link * 20 + packet_offset), each holding 60 features:
the 30 amplitude values followed by the 30 sanitized phase values. The two
halves are z-normalized with scalar statistics fitted once on the training
split so both contribute at comparable scale. Tokens are then projected to
the model width and learnable per-token embeddings are added.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import Module, Param

WINDOW_PACKETS = 20


@dataclass
class FeatureNormalizer:
    """Per-half scalar z-normalization. Defaults are the identity."""

    amp_mean: float = 0.0
    amp_std: float = 1.0
    phase_mean: float = 0.0
    phase_std: float = 1.0

    @classmethod
    def fit(cls, amp, phase):
        """Fit on training-split arrays. Refitting the same data is a no-op."""
        amp = np.asarray(amp, dtype=np.float64)
        phase = np.asarray(phase, dtype=np.float64)
        return cls(
            amp_mean=float(amp.mean()),
            amp_std=float(max(amp.std(), 1e-12)),
            phase_mean=float(phase.mean()),
            phase_std=float(max(phase.std(), 1e-12)),
        )

    def apply(self, amp, phase):
        return (
            (amp - self.amp_mean) / self.amp_std,
            (phase - self.phase_mean) / self.phase_std,
        )

    def to_dict(self):
        return {
            "amp_mean": self.amp_mean,
            "amp_std": self.amp_std,
            "phase_mean": self.phase_mean,
            "phase_std": self.phase_std,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def build_tokens(amp, phase, window_start, window_packets=WINDOW_PACKETS, normalizer=None):
    """Cut one window and lay it out as a (links*packets, 2*subcarriers) tensor."""
    amp = np.asarray(amp, dtype=np.float64)
    phase = np.asarray(phase, dtype=np.float64)
    if amp.shape != phase.shape or amp.ndim != 3:
        raise ValueError("amp and phase must share shape [T, links, subcarriers]")
    T, n_links, n_sub = amp.shape
    if window_start < 0 or window_start + window_packets > T:
        raise ValueError(
            f"window [{window_start}, {window_start + window_packets}) "
            f"out of range for T={T}"
        )
    sl = slice(window_start, window_start + window_packets)
    amp_w, phase_w = amp[sl], phase[sl]
    if normalizer is not None:
        amp_w, phase_w = normalizer.apply(amp_w, phase_w)
    # [packets, links, sub] -> link-major token rows [links*packets, sub]
    amp_rows = amp_w.transpose(1, 0, 2).reshape(n_links * window_packets, n_sub)
    phase_rows = phase_w.transpose(1, 0, 2).reshape(n_links * window_packets, n_sub)
    return np.concatenate([amp_rows, phase_rows], axis=1)


def project_tokens(raw, w, b):
    """tokens <- raw @ W.T + b, with W shaped (d_model, raw_features)."""
    raw = np.asarray(raw, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if raw.shape[-1] != w.shape[1]:
        raise ValueError(f"projection expects {w.shape[1]} features, got {raw.shape[-1]}")
    return raw @ w.T + np.asarray(b, dtype=np.float64)


def add_ste(projected, ste):
    """Elementwise sum with the spatio-temporal embedding table."""
    projected = np.asarray(projected, dtype=np.float64)
    ste = np.asarray(ste, dtype=np.float64)
    if projected.shape[-2:] != ste.shape:
        raise ValueError(f"STE shape {ste.shape} does not match tokens {projected.shape}")
    return projected + ste


class SteTable(Module):
    """Learnable spatio-temporal embeddings added to projected tokens."""

    def __init__(self, n_tokens, d_model, rng, std=0.02):
        self.table = Param(rng.normal(0.0, std, size=(n_tokens, d_model)))
        self._lead = None

    def params(self):
        return {"table": self.table}

    def forward(self, projected):
        out = add_ste(projected, self.table.value)
        self._lead = tuple(range(out.ndim - 2))
        return out

    def backward(self, dy):
        self.table.grad += dy.sum(axis=self._lead) if self._lead else dy
        return dy
