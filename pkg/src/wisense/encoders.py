"""The three modality encoders.

Only the WiFi encoder trains: a small transformer over CSI tokens with mean
pooling. The text encoder defines the shared language space and is frozen, a
seeded random word table plus scaled sinusoidal positions, mean-pooled and
L2-normalized. Video supervision is simulated: the ground-truth caption's
text embedding perturbed by seeded Gaussian noise, standing in for a frozen
video tower whose outputs already live in the language space.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .nn_core import Module, TransformerBlock
from .textnorm import tokenize


class OovError(ValueError):
    """Caption has no in-vocabulary tokens."""


def build_vocab(texts) -> list[str]:
    """Closed word list over a corpus; sorted for stable indexing."""
    words = set()
    for t in texts:
        words.update(tokenize(t))
    return sorted(words)


def save_vocab(vocab, path):
    with open(path, "w", encoding="utf-8") as f:
        for word in vocab:
            f.write(word + "\n")


def load_vocab(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f if line.strip()]


def sinusoidal_positions(n, d):
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / (10000 ** (2 * (i // 2) / d))
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle[:, 0::2])
    pe[:, 1::2] = np.cos(angle[:, 1::2])
    return pe


class TextEncoder:
    """Frozen seeded embedding table + positions, mean-pooled to unit norm.

    Not a Module on purpose: its weights never receive gradients, and a
    plain ndarray table makes accidental training impossible.
    """

    def __init__(self, vocab, d_l=64, seed=0, pos_scale=0.25):
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.d_l = d_l
        self.pos_scale = pos_scale
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 101)))
        self.table = rng.normal(0.0, 1.0, size=(len(self.vocab), d_l))
        self._pe = sinusoidal_positions(64, d_l)

    def token_ids(self, caption):
        return [self.index[w] for w in tokenize(caption) if w in self.index]

    def encode(self, caption) -> np.ndarray:
        """Unit-norm embedding of a caption in the shared space."""
        ids = self.token_ids(caption)
        if not ids:
            raise OovError(f"no in-vocabulary tokens in {caption!r}")
        if len(ids) > self._pe.shape[0]:
            self._pe = sinusoidal_positions(len(ids), self.d_l)
        vecs = self.table[ids] + self.pos_scale * self._pe[: len(ids)]
        pooled = vecs.mean(axis=0)
        return pooled / np.linalg.norm(pooled)

    def encode_batch(self, captions) -> np.ndarray:
        return np.stack([self.encode(c) for c in captions])

    def fingerprint(self) -> str:
        """Digest of the frozen weights, for frozenness checks."""
        return hashlib.sha256(self.table.tobytes()).hexdigest()


class VideoEmbedder:
    """Simulated frozen video tower: noisy oracle around the caption embedding."""

    def __init__(self, text_encoder: TextEncoder, sigma_v=0.05, seed=0):
        self.text_encoder = text_encoder
        self.sigma_v = sigma_v
        self.seed = seed

    def embed(self, sample_id: str, gt_caption: str) -> np.ndarray:
        base = self.text_encoder.encode(gt_caption)
        if self.sigma_v == 0.0:
            return base
        digest = hashlib.sha256(f"video:{self.seed}:{sample_id}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        noisy = base + rng.normal(0.0, self.sigma_v, size=base.shape)
        return noisy / np.linalg.norm(noisy)


class WifiEncoder(Module):
    """Transformer stack over CSI tokens, mean-pooled to one vector.

    With zero layers this degenerates to plain mean pooling, which the
    tests use as the trivial reference.
    """

    def __init__(self, d_model=64, n_layers=2, n_heads=4, d_hidden=None, rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        d_hidden = 2 * d_model if d_hidden is None else d_hidden
        self.d_model = d_model
        self.blocks = [
            TransformerBlock(d_model, n_heads, d_hidden, rng) for _ in range(n_layers)
        ]
        self._n_tokens = None

    def children(self):
        return {f"block{i}": b for i, b in enumerate(self.blocks)}

    def forward(self, tokens):
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.shape[-1] != self.d_model:
            raise ValueError(f"expected d_model {self.d_model}, got {tokens.shape[-1]}")
        h = tokens
        for block in self.blocks:
            h = block.forward(h)
        self._n_tokens = h.shape[-2]
        return h.mean(axis=-2)

    def backward(self, d_pooled):
        n = self._n_tokens
        shape = d_pooled.shape[:-1] + (n, d_pooled.shape[-1])
        dh = np.broadcast_to(d_pooled[..., None, :], shape).copy() / n
        for block in reversed(self.blocks):
            dh = block.backward(dh)
        return dh
