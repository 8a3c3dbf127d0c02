"""Deterministic synthetic CSI streams from motion scripts.

The channel seen at packet t, link l, subcarrier i is

    Y[t,l,i] = H_static[l,i] + sum_entries H_dyn[t,l,i] + N[t,l,i]

with a unit pilot, so Y is a direct channel observation. H_static is a
seeded sum of fixed complex path gains. Each motion entry contributes a
Doppler-modulated path

    H_dyn = reflectivity * gain(body_part)
            * exp(j * (2*pi * (2*v(tau)/wavelength) * tau + phi0[l,i]))

where tau is time since the entry started and v is a raised-cosine
velocity profile peaking at the primitive's peak radial velocity. Noise is
circular complex Gaussian, drawn per sample index so parallel and serial
generation agree bitwise.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

BODY_PART_GAINS = {"upper": 1.0, "lower": 0.7, "torso": 1.3}

_STATIC_TAG = 1
_PHI0_TAG = 2
_NOISE_TAG = 3

_MAGIC = b"CSIS"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIIdQ")


@dataclass(frozen=True)
class ChannelConfig:
    """Geometry and noise of the sensing link array.

    Defaults follow one transmitter and three receivers with three antennas
    each (9 links) measured over 30 subcarriers at 300 packets/s.
    """

    n_links: int = 9
    n_subcarriers: int = 30
    packet_rate: float = 300.0
    carrier_wavelength: float = 0.06
    noise_sigma: float = 0.01
    n_static_paths: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("packet_rate", "carrier_wavelength", "noise_sigma"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite config value: {name}")
        if self.n_links < 1 or self.n_subcarriers < 1:
            raise ValueError("n_links and n_subcarriers must be >= 1")
        if self.packet_rate <= 0:
            raise ValueError("packet_rate must be positive")
        if self.carrier_wavelength <= 0:
            raise ValueError("carrier_wavelength must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_static_paths < 1:
            raise ValueError("n_static_paths must be >= 1")
        if not (0 <= self.seed < 2**64):
            raise ValueError("seed must fit in a u64")


@dataclass(frozen=True)
class MotionPrimitive:
    """One primitive movement and the path parameters it contributes."""

    id: int
    name: str
    body_part: str
    peak_radial_velocity: float
    duration: float
    reflectivity: float = 1.0

    def __post_init__(self):
        if self.body_part not in BODY_PART_GAINS:
            raise ValueError(f"unknown body_part: {self.body_part!r}")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not math.isfinite(self.peak_radial_velocity):
            raise ValueError("peak_radial_velocity must be finite")
        if self.reflectivity <= 0:
            raise ValueError("reflectivity must be positive")


@dataclass(frozen=True)
class ScriptEntry:
    primitive: MotionPrimitive
    start_time: float
    subject_id: int = 0


@dataclass(frozen=True)
class MotionScript:
    """Timed, possibly overlapping primitive executions. No segmentation."""

    entries: tuple[ScriptEntry, ...]
    total_duration: float

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if self.total_duration <= 0:
            raise ValueError("script has no duration")
        for e in self.entries:
            if e.start_time < 0 or e.start_time + e.primitive.duration > self.total_duration:
                raise ValueError(
                    f"entry {e.primitive.name!r} at {e.start_time} does not fit "
                    f"within [0, {self.total_duration}]"
                )

    def subject_ids(self):
        return sorted({e.subject_id for e in self.entries})


@dataclass
class CsiStream:
    """Complex per-link, per-subcarrier time series.

    ``config`` is kept for in-process recomposition (superposition needs the
    static field); streams read back from disk carry ``config=None``.
    """

    samples: np.ndarray  # complex128, [T, n_links, n_subcarriers]
    packet_rate: float
    script_digest: str
    seed: int
    config: ChannelConfig | None = field(default=None, repr=False)

    @property
    def n_packets(self):
        return self.samples.shape[0]

    @property
    def n_links(self):
        return self.samples.shape[1]

    @property
    def n_subcarriers(self):
        return self.samples.shape[2]


# -------------------------- script serialization --------------------------


def script_to_dict(script: MotionScript) -> dict:
    return {
        "total_duration": script.total_duration,
        "entries": [
            {
                "primitive": {
                    "id": e.primitive.id,
                    "name": e.primitive.name,
                    "body_part": e.primitive.body_part,
                    "peak_radial_velocity": e.primitive.peak_radial_velocity,
                    "duration": e.primitive.duration,
                    "reflectivity": e.primitive.reflectivity,
                },
                "start_time": e.start_time,
                "subject_id": e.subject_id,
            }
            for e in script.entries
        ],
    }


def script_from_dict(d: dict) -> MotionScript:
    entries = tuple(
        ScriptEntry(
            primitive=MotionPrimitive(**e["primitive"]),
            start_time=e["start_time"],
            subject_id=e["subject_id"],
        )
        for e in d["entries"]
    )
    return MotionScript(entries=entries, total_duration=d["total_duration"])


def script_digest(script: MotionScript) -> str:
    blob = json.dumps(script_to_dict(script), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# -------------------------- field components --------------------------


def raised_cosine_velocity(tau, peak, duration):
    """Velocity profile: 0 at the endpoints, ``peak`` at mid-motion."""
    return peak * 0.5 * (1.0 - np.cos(2.0 * np.pi * tau / duration))


def static_field(config: ChannelConfig) -> np.ndarray:
    """Seeded sum of n_static_paths fixed complex gains, [L, S]."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(config.seed, _STATIC_TAG)))
    shape = (config.n_static_paths, config.n_links, config.n_subcarriers)
    scale = 1.0 / np.sqrt(2.0 * config.n_static_paths)
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return ((re + 1j * im) * scale).sum(axis=0)


def subject_phase_offsets(config: ChannelConfig, subject_id: int) -> np.ndarray:
    """Initial path phase phi0 per (link, subcarrier), stable per subject."""
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=(config.seed, _PHI0_TAG, subject_id))
    )
    return rng.uniform(-np.pi, np.pi, size=(config.n_links, config.n_subcarriers))


def noise_field(config: ChannelConfig, n_packets: int) -> np.ndarray:
    """Circular complex Gaussian noise, derived per (seed, sample index)."""
    shape = (config.n_links, config.n_subcarriers)
    out = np.zeros((n_packets, *shape), dtype=np.complex128)
    if config.noise_sigma == 0.0:
        return out
    for t in range(n_packets):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=(config.seed, _NOISE_TAG, t))
        )
        z = rng.standard_normal((*shape, 2)) * config.noise_sigma
        out[t] = z[..., 0] + 1j * z[..., 1]
    return out


def dynamic_field(config: ChannelConfig, script: MotionScript) -> np.ndarray:
    """Sum of all entries' Doppler paths, [T, L, S]. Zero where idle."""
    T = math.ceil(script.total_duration * config.packet_rate)
    out = np.zeros((T, config.n_links, config.n_subcarriers), dtype=np.complex128)
    t_sec = np.arange(T) / config.packet_rate
    for entry in script.entries:
        prim = entry.primitive
        tau = t_sec - entry.start_time
        active = (tau >= 0.0) & (tau < prim.duration)
        if not active.any():
            continue
        tau_a = tau[active]
        v = raised_cosine_velocity(tau_a, prim.peak_radial_velocity, prim.duration)
        doppler_phase = 2.0 * np.pi * (2.0 * v / config.carrier_wavelength) * tau_a
        phi0 = subject_phase_offsets(config, entry.subject_id)
        amp = prim.reflectivity * BODY_PART_GAINS[prim.body_part]
        out[active] += amp * np.exp(1j * (doppler_phase[:, None, None] + phi0[None]))
    return out


# -------------------------- operations --------------------------


def simulate_channel(config: ChannelConfig, script: MotionScript) -> CsiStream:
    """Render a script into a CSI stream. Bitwise-deterministic per seed."""
    T = math.ceil(script.total_duration * config.packet_rate)
    if T < 1:
        raise ValueError("script produces an empty stream")
    samples = (
        static_field(config)[None]
        + dynamic_field(config, script)
        + noise_field(config, T)
    )
    return CsiStream(
        samples=samples,
        packet_rate=config.packet_rate,
        script_digest=script_digest(script),
        seed=config.seed,
        config=config,
    )


def superpose_subjects(streams: list[CsiStream]) -> CsiStream:
    """Combine per-subject streams sharing a config and static seed.

    Dynamic components add linearly; the static field and the noise
    realization (both recomputable from config + seed) are counted once.
    """
    if not streams:
        raise ValueError("no streams to superpose")
    first = streams[0]
    if first.config is None:
        raise ValueError("superposition needs streams with an attached config")
    for s in streams[1:]:
        if s.samples.shape != first.samples.shape:
            raise ValueError("stream shape mismatch")
        if s.config != first.config or s.seed != first.seed:
            raise ValueError("streams must share config and seed")
    if len(streams) == 1:
        return CsiStream(
            samples=first.samples.copy(),
            packet_rate=first.packet_rate,
            script_digest=first.script_digest,
            seed=first.seed,
            config=first.config,
        )
    base = static_field(first.config)[None] + noise_field(first.config, first.n_packets)
    total = np.sum([s.samples for s in streams], axis=0)
    combined = total - (len(streams) - 1) * base
    digest = hashlib.sha256(
        "".join(sorted(s.script_digest for s in streams)).encode()
    ).hexdigest()
    return CsiStream(
        samples=combined,
        packet_rate=first.packet_rate,
        script_digest=digest,
        seed=first.seed,
        config=first.config,
    )


def csi_to_amp_phase(stream: CsiStream):
    """Amplitude and sanitized phase of a stream.

    Phase is unwrapped over time per (link, subcarrier), then a linear fit
    across the subcarrier axis (slope and offset) is removed per packet,
    the minimal correction for sampling-clock and carrier-frequency offsets.
    """
    if not np.isfinite(stream.samples).all():
        raise ValueError("stream contains non-finite samples")
    amp = np.abs(stream.samples)
    phase = np.unwrap(np.angle(stream.samples), axis=0)
    k = np.arange(stream.n_subcarriers, dtype=np.float64)
    kc = k - k.mean()
    denom = (kc**2).sum()
    mean = phase.mean(axis=-1, keepdims=True)
    slope = ((phase - mean) * kc).sum(axis=-1, keepdims=True) / denom
    detrended = phase - (mean + slope * kc)
    return amp, detrended


# -------------------------- binary stream format --------------------------


def write_stream(stream: CsiStream, path) -> None:
    """Write the CSIS v1 format (f32 re/im pairs). Temp-then-rename."""
    path = os.fspath(path)
    T, L, S = stream.samples.shape
    header = _HEADER.pack(
        _MAGIC, _VERSION, T, L, S, float(stream.packet_rate), stream.seed
    )
    payload = np.empty((T, L, S, 2), dtype="<f4")
    payload[..., 0] = stream.samples.real
    payload[..., 1] = stream.samples.imag
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())
    os.replace(tmp, path)


def read_stream(path) -> CsiStream:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"truncated stream file: {path}")
        magic, version, T, L, S, packet_rate, seed = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ValueError(f"bad magic in {path}")
        if version != _VERSION:
            raise ValueError(f"unsupported stream version {version}")
        payload = np.frombuffer(f.read(T * L * S * 8), dtype="<f4")
    if payload.size != T * L * S * 2:
        raise ValueError(f"truncated payload in {path}")
    pairs = payload.reshape(T, L, S, 2).astype(np.float64)
    samples = pairs[..., 0] + 1j * pairs[..., 1]
    return CsiStream(
        samples=samples,
        packet_rate=packet_rate,
        script_digest="",
        seed=seed,
        config=None,
    )
