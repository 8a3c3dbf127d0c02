"""Stage 1: contrastive alignment of CSI embeddings with the language space.

The trainable path is raw token tensors -> linear projection -> spatio-
temporal embeddings -> WiFi encoder -> adapter MLP -> unit vectors in the
text space. Training pulls each window toward its caption embedding and away
from the other captions in the batch, symmetrically in both directions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import TextEncoder, WifiEncoder
from .nn_core import Adam, Gelu, Linear, Module, cross_entropy, softmax
from .tokenization import SteTable


def _normalize_rows(z):
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    return z / norms, norms


class Adapter(Module):
    """Two-layer GeLU MLP into the language space; output L2-normalized."""

    def __init__(self, d_model, d_l, rng, d_hidden=None):
        d_hidden = 2 * d_model if d_hidden is None else d_hidden
        self.lin1 = Linear(d_model, d_hidden, rng)
        self.act = Gelu()
        self.lin2 = Linear(d_hidden, d_l, rng)
        self._cache = None

    def children(self):
        return {"lin1": self.lin1, "lin2": self.lin2}

    def forward(self, f_enc):
        z = self.lin2.forward(self.act.forward(self.lin1.forward(f_enc)))
        y, norms = _normalize_rows(z)
        self._cache = (y, norms)
        return y

    def backward(self, dy):
        y, norms = self._cache
        dz = (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / norms
        return self.lin1.backward(self.act.backward(self.lin2.backward(dz)))


class AlignmentModel(Module):
    """Projection + STE + WiFi encoder + adapter, end to end differentiable."""

    def __init__(
        self,
        n_tokens=180,
        raw_features=60,
        d_model=64,
        d_l=64,
        n_layers=2,
        n_heads=4,
        d_hidden=None,
        adapter_hidden=None,
        seed=0,
    ):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 11)))
        self.proj = Linear(raw_features, d_model, rng)
        self.ste = SteTable(n_tokens, d_model, rng)
        self.encoder = WifiEncoder(
            d_model=d_model, n_layers=n_layers, n_heads=n_heads,
            d_hidden=d_hidden, rng=rng,
        )
        self.adapter = Adapter(d_model, d_l, rng, d_hidden=adapter_hidden)
        self.d_model = d_model
        self.d_l = d_l

    def children(self):
        return {
            "proj": self.proj, "ste": self.ste,
            "encoder": self.encoder, "adapter": self.adapter,
        }

    def encode_features(self, raw_tokens):
        """raw [..., n_tokens, 60] -> pooled encoder features f_enc."""
        return self.encoder.forward(self.ste.forward(self.proj.forward(raw_tokens)))

    def encode(self, raw_tokens):
        """raw token tensors -> unit vectors f_align in the language space."""
        return self.adapter.forward(self.encode_features(raw_tokens))

    def backward_from_features(self, d_enc):
        d_tokens = self.encoder.backward(d_enc)
        return self.proj.backward(self.ste.backward(d_tokens))

    def backward(self, d_align):
        return self.backward_from_features(self.adapter.backward(d_align))

    def encoder_param_names(self):
        """Names of everything upstream of the adapter (the freezable set)."""
        return {
            name for name in self.named_params()
            if not name.startswith("adapter/")
        }


# -------------------------- contrastive loss --------------------------


def contrastive_loss(f_align, f_txt, tau=0.07):
    """Symmetric InfoNCE: L = L_c2t + L_t2c over an index-matched batch.

    Returns (loss, d_f_align). The text side is frozen, so its gradient is
    not materialized.
    """
    f_align = np.asarray(f_align, dtype=np.float64)
    f_txt = np.asarray(f_txt, dtype=np.float64)
    b = f_align.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 pairs")
    if f_align.shape != f_txt.shape:
        raise ValueError("modality batch shapes must match")
    s = (f_align @ f_txt.T) / tau
    eye = np.eye(b)

    def nll_diag(mat):
        z = mat - mat.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -np.trace(logp) / b

    loss = nll_diag(s) + nll_diag(s.T)
    ds = (softmax(s) - eye) / b + ((softmax(s.T) - eye) / b).T
    d_f_align = (ds @ f_txt) / tau
    return float(loss), d_f_align


# -------------------------- retrieval and zero-shot --------------------------


def rank_by_cosine(query, candidates):
    """Indices of candidates by descending cosine; ties keep candidate order."""
    q = query / np.linalg.norm(query)
    c = candidates / np.linalg.norm(candidates, axis=1, keepdims=True)
    scores = c @ q
    order = np.argsort(-scores, kind="stable")
    return order, scores


def retrieve(f_align, candidate_captions, text_encoder: TextEncoder):
    """Rank candidate captions against one aligned embedding."""
    if not candidate_captions:
        raise ValueError("need at least one candidate caption")
    embs = text_encoder.encode_batch(candidate_captions)
    order, scores = rank_by_cosine(f_align, embs)
    return [(candidate_captions[i], float(scores[i])) for i in order]


def zero_shot_classify(f_align, class_descriptions, text_encoder: TextEncoder):
    """argmax cosine against encoded class descriptions.

    ``class_descriptions`` is a list of (label, description) covering all
    candidate actions, including ones excluded from training.
    """
    if not class_descriptions:
        raise ValueError("empty class description set")
    labels = [label for label, _ in class_descriptions]
    embs = text_encoder.encode_batch([d for _, d in class_descriptions])
    order, scores = rank_by_cosine(f_align, embs)
    return labels[order[0]], scores


# -------------------------- training --------------------------


@dataclass
class Stage1Config:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    tau: float = 0.07
    freeze_encoder: bool = False
    proxy_steps: int = 600
    proxy_lr: float = 1e-3
    seed: int = 0


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    epochs: int = 0


class _EpochSampler:
    """Walks shuffled permutations of the dataset; reshuffles per epoch."""

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0
        self.epoch = 0

    def next_batch(self):
        rolled = False
        if self.pos + self.batch_size > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
            self.epoch += 1
            rolled = True
        idx = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx, rolled


def pretrain_encoder_proxy(model: AlignmentModel, tokens, class_ids, cfg: Stage1Config):
    """Classify the primitive id from f_enc; warms the encoder before freezing."""
    class_ids = np.asarray(class_ids)
    n_classes = int(class_ids.max()) + 1
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 21)))
    head = Linear(model.d_model, n_classes, rng)
    params = {n: p for n, p in model.named_params().items() if n in model.encoder_param_names()}
    params.update({f"head/{n}": p for n, p in head.params().items()})
    opt = Adam(params, lr=cfg.proxy_lr)
    sampler = _EpochSampler(len(tokens), cfg.batch_size, rng)
    losses = []
    for _ in range(cfg.proxy_steps):
        idx, _ = sampler.next_batch()
        opt.zero_grad()
        f_enc = model.encode_features(tokens[idx])
        logits = head.forward(f_enc)
        loss, dlogits = cross_entropy(logits, class_ids[idx])
        model.backward_from_features(head.backward(dlogits))
        opt.step()
        losses.append(loss)
    return losses


def train_stage1(
    model: AlignmentModel,
    tokens,
    captions,
    text_encoder: TextEncoder,
    cfg: Stage1Config,
    class_ids=None,
    on_epoch=None,
):
    """Minibatch Adam on the symmetric contrastive loss.

    By default the encoder trains jointly with the adapter (a randomly
    initialized frozen encoder cannot support alignment). With
    ``freeze_encoder`` the encoder is first warmed by the proxy classifier,
    then only the adapter receives updates.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if len(tokens) == 0:
        raise ValueError("empty training corpus")
    if len(tokens) != len(captions):
        raise ValueError("tokens and captions must be index-matched")
    f_txt = text_encoder.encode_batch(captions)

    if cfg.freeze_encoder:
        if class_ids is None:
            raise ValueError("freeze_encoder needs class_ids for the proxy pass")
        pretrain_encoder_proxy(model, tokens, class_ids, cfg)
        trainable = {
            n: p for n, p in model.named_params().items()
            if n not in model.encoder_param_names()
        }
    else:
        trainable = model.named_params()

    rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 22)))
    opt = Adam(trainable, lr=cfg.lr)
    sampler = _EpochSampler(len(tokens), cfg.batch_size, rng)
    result = TrainResult()
    for step in range(cfg.steps):
        idx, rolled = sampler.next_batch()
        if rolled and on_epoch is not None:
            on_epoch(sampler.epoch)
        model.zero_grad()
        f_align = model.encode(tokens[idx])
        loss, d_align = contrastive_loss(f_align, f_txt[idx], tau=cfg.tau)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite contrastive loss at step {step}")
        model.backward(d_align)
        opt.step()
        result.losses.append(loss)
    result.epochs = sampler.epoch + 1
    if on_epoch is not None:
        on_epoch(sampler.epoch + 1)
    return result


# -------------------------- evaluation helpers --------------------------


def top1_retrieval_accuracy(f_align, target_idx, candidate_embs):
    """Fraction of rows whose best-cosine candidate is the paired one."""
    c = candidate_embs / np.linalg.norm(candidate_embs, axis=1, keepdims=True)
    q = f_align / np.linalg.norm(f_align, axis=1, keepdims=True)
    pred = (q @ c.T).argmax(axis=1)
    return float((pred == np.asarray(target_idx)).mean())


def embedding_margin(f_align, class_ids):
    """Mean intra-class cosine minus mean inter-class cosine."""
    q = f_align / np.linalg.norm(f_align, axis=1, keepdims=True)
    sims = q @ q.T
    ids = np.asarray(class_ids)
    same = ids[:, None] == ids[None, :]
    off = ~np.eye(len(ids), dtype=bool)
    intra = sims[same & off]
    inter = sims[~same]
    if intra.size == 0 or inter.size == 0:
        raise ValueError("need at least two classes with two samples each")
    return float(intra.mean() - inter.mean())


class AmplitudeCentroidBaseline:
    """Nearest-centroid over raw amplitude features.

    Stands in for the classical segmented-signal baselines: it can only
    predict labels it saw at fit time, so truly unseen actions are out of
    reach by construction.
    """

    def __init__(self):
        self.labels_ = None
        self.centroids_ = None
        self.mean_ = None
        self.std_ = None

    def fit(self, features, labels):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        self.mean_ = features.mean(axis=0)
        self.std_ = np.maximum(features.std(axis=0), 1e-12)
        z = (features - self.mean_) / self.std_
        self.labels_ = np.array(sorted(set(labels.tolist())))
        self.centroids_ = np.stack(
            [z[labels == lab].mean(axis=0) for lab in self.labels_]
        )
        return self

    def predict(self, features):
        z = (np.asarray(features, dtype=np.float64) - self.mean_) / self.std_
        d2 = ((z[:, None, :] - self.centroids_[None, :, :]) ** 2).sum(axis=2)
        return self.labels_[d2.argmin(axis=1)]
