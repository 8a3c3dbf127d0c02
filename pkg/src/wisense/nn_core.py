"""Dense float64 layers with hand-derived backward passes.

No autodiff tape: every layer implements an explicit forward/backward pair
and caches whatever its backward needs, so backward must follow the forward
it belongs to. Arrays are shaped (..., feature) or (..., T, feature) with
arbitrary leading batch dimensions. Central finite differences serve as the
universal gradient oracle (see ``gradient_check``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715
_MASK_FILL = 1e30  # large enough that exp() underflows to exactly 0.0


class Param:
    """A trainable array paired with a same-shape gradient buffer."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


class Module:
    """Base layer: explicit registries for own params and submodules."""

    def params(self) -> dict[str, Param]:
        return {}

    def children(self) -> dict[str, "Module"]:
        return {}

    def named_params(self, prefix: str = "") -> dict[str, Param]:
        """Flat name -> Param map, children joined with '/'."""
        out = {prefix + name: p for name, p in self.params().items()}
        for cname, child in self.children().items():
            out.update(child.named_params(prefix=f"{prefix}{cname}/"))
        return out

    def zero_grad(self):
        for p in self.named_params().values():
            p.zero_grad()


# -------------------------- pointwise ops --------------------------


def gelu(x):
    """Tanh-approximation GeLU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def gelu_grad(x):
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du


def softmax(x):
    """Numerically stable softmax along the last axis."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dy, y):
    """Backward of y = softmax(x) given dy and the cached output y."""
    return (dy - (dy * y).sum(axis=-1, keepdims=True)) * y


# -------------------------- layers --------------------------


class Linear(Module):
    """y = x @ W.T + b with W shaped (d_out, d_in)."""

    def __init__(self, d_in, d_out, rng, w_std=None):
        std = (1.0 / np.sqrt(d_in)) if w_std is None else w_std
        self.w = Param(rng.normal(0.0, std, size=(d_out, d_in)))
        self.b = Param(np.zeros(d_out))
        self._x = None

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[-1] != self.w.shape[1]:
            raise ValueError(
                f"linear expects last dim {self.w.shape[1]}, got {x.shape[-1]}"
            )
        self._x = x
        return x @ self.w.value.T + self.b.value

    def backward(self, dy):
        x = self._x
        d_in = self.w.shape[1]
        d_out = self.w.shape[0]
        xf = x.reshape(-1, d_in)
        dyf = np.asarray(dy, dtype=DTYPE).reshape(-1, d_out)
        self.w.grad += dyf.T @ xf
        self.b.grad += dyf.sum(axis=0)
        return (dyf @ self.w.value).reshape(x.shape)


class Gelu(Module):
    def forward(self, x):
        self._x = np.asarray(x, dtype=DTYPE)
        return gelu(self._x)

    def backward(self, dy):
        return dy * gelu_grad(self._x)


class LayerNorm(Module):
    """Normalize the last axis to zero mean / unit variance, then affine."""

    def __init__(self, d, eps=1e-5):
        self.gamma = Param(np.ones(d))
        self.beta = Param(np.zeros(d))
        self.eps = eps
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        sigma = np.sqrt(var + self.eps)
        xhat = (x - mu) / sigma
        self._cache = (xhat, sigma)
        return xhat * self.gamma.value + self.beta.value

    def backward(self, dy):
        xhat, sigma = self._cache
        lead = tuple(range(dy.ndim - 1))
        self.gamma.grad += (dy * xhat).sum(axis=lead)
        self.beta.grad += dy.sum(axis=lead)
        ghat = dy * self.gamma.value
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        return (ghat - m1 - xhat * m2) / sigma


class Softmax(Module):
    def forward(self, x):
        self._y = softmax(np.asarray(x, dtype=DTYPE))
        return self._y

    def backward(self, dy):
        return softmax_backward(dy, self._y)


class Embedding(Module):
    """Row lookup into a learnable table. Backward scatters with add.at."""

    def __init__(self, n_rows, d, rng, std=0.02):
        self.table = Param(rng.normal(0.0, std, size=(n_rows, d)))
        self._idx = None

    def params(self):
        return {"table": self.table}

    def forward(self, idx):
        idx = np.asarray(idx)
        if idx.size and (idx.min() < 0 or idx.max() >= self.table.shape[0]):
            raise ValueError("embedding index out of range")
        self._idx = idx
        return self.table.value[idx]

    def backward(self, dy):
        np.add.at(self.table.grad, self._idx, dy)
        return None  # integer input has no gradient


class MultiHeadAttention(Module):
    """Self-attention over (..., T, d_model) with optional causal mask."""

    def __init__(self, d_model, n_heads, rng, causal=False):
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.causal = causal
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)
        self._cache = None

    def children(self):
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}

    def _split(self, x, lead_n, T):
        # (..., T, D) -> (B*h, T, d_head)
        h, dh = self.n_heads, self.d_head
        return (
            x.reshape(lead_n, T, h, dh)
            .transpose(0, 2, 1, 3)
            .reshape(lead_n * h, T, dh)
        )

    def _merge(self, x, lead_n, T):
        h, dh = self.n_heads, self.d_head
        return (
            x.reshape(lead_n, h, T, dh)
            .transpose(0, 2, 1, 3)
            .reshape(lead_n, T, h * dh)
        )

    def forward(self, x):
        x = np.asarray(x, dtype=DTYPE)
        *lead, T, D = x.shape
        if D != self.d_model:
            raise ValueError(f"attention expects d_model {self.d_model}, got {D}")
        lead_n = int(np.prod(lead)) if lead else 1
        q = self._split(self.wq.forward(x), lead_n, T)
        k = self._split(self.wk.forward(x), lead_n, T)
        v = self._split(self.wv.forward(x), lead_n, T)
        scale = 1.0 / np.sqrt(self.d_head)
        scores = (q @ k.transpose(0, 2, 1)) * scale
        if self.causal:
            scores = scores - _MASK_FILL * np.triu(np.ones((T, T)), k=1)
        p = softmax(scores)
        ctx = p @ v
        out = self.wo.forward(self._merge(ctx, lead_n, T).reshape(x.shape))
        self._cache = (q, k, v, p, lead_n, T, x.shape)
        return out

    def backward(self, dy):
        q, k, v, p, lead_n, T, x_shape = self._cache
        scale = 1.0 / np.sqrt(self.d_head)
        dctx = self._split(
            self.wo.backward(dy).reshape(lead_n, T, self.d_model), lead_n, T
        )
        dv = p.transpose(0, 2, 1) @ dctx
        dp = dctx @ v.transpose(0, 2, 1)
        ds = softmax_backward(dp, p) * scale
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        dx = self.wq.backward(self._merge(dq, lead_n, T).reshape(x_shape))
        dx = dx + self.wk.backward(self._merge(dk, lead_n, T).reshape(x_shape))
        dx = dx + self.wv.backward(self._merge(dv, lead_n, T).reshape(x_shape))
        return dx


class FeedForward(Module):
    """Position-wise MLP: linear -> GeLU -> linear."""

    def __init__(self, d_model, d_hidden, rng):
        self.lin1 = Linear(d_model, d_hidden, rng)
        self.act = Gelu()
        self.lin2 = Linear(d_hidden, d_model, rng)

    def children(self):
        return {"lin1": self.lin1, "lin2": self.lin2}

    def forward(self, x):
        return self.lin2.forward(self.act.forward(self.lin1.forward(x)))

    def backward(self, dy):
        return self.lin1.backward(self.act.backward(self.lin2.backward(dy)))


class TransformerBlock(Module):
    """Pre-LN block: x + attn(ln1(x)), then x + ffn(ln2(x))."""

    def __init__(self, d_model, n_heads, d_hidden, rng, causal=False):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, rng, causal=causal)
        self.ln2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_hidden, rng)

    def children(self):
        return {"ln1": self.ln1, "attn": self.attn, "ln2": self.ln2, "ffn": self.ffn}

    def forward(self, x):
        x = x + self.attn.forward(self.ln1.forward(x))
        return x + self.ffn.forward(self.ln2.forward(x))

    def backward(self, dy):
        dy = dy + self.ln2.backward(self.ffn.backward(dy))
        return dy + self.ln1.backward(self.attn.backward(dy))


# -------------------------- losses --------------------------


def cross_entropy(logits, targets, ignore_index=-100):
    """Mean negative log-likelihood over non-ignored positions.

    Returns (loss, dlogits) where dlogits is (softmax - one_hot) / n_kept on
    kept rows and zero elsewhere. Raises on out-of-range targets.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    targets = np.asarray(targets)
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects logits of shape (N, V)")
    n, v = logits.shape
    if targets.shape != (n,):
        raise ValueError("targets must be shaped (N,)")
    kept = targets != ignore_index
    bad = kept & ((targets < 0) | (targets >= v))
    if bad.any():
        raise ValueError("target index out of range")
    n_kept = int(kept.sum())
    p = softmax(logits)
    dlogits = np.zeros_like(logits)
    if n_kept == 0:
        return 0.0, dlogits
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    rows = np.nonzero(kept)[0]
    loss = -logp[rows, targets[rows]].mean()
    dlogits[rows] = p[rows]
    dlogits[rows, targets[rows]] -= 1.0
    dlogits[rows] /= n_kept
    return float(loss), dlogits


# -------------------------- optimizer --------------------------


def adam_step(value, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on value/m/v."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad**2
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    value -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over a fixed name -> Param dict. Only listed params are updated."""

    def __init__(self, params: dict[str, Param], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        for k, p in self.params.items():
            adam_step(
                p.value, p.grad, self.m[k], self.v[k], self.t,
                self.lr, self.beta1, self.beta2, self.eps,
            )

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


# -------------------------- gradient checking --------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    per_tensor: dict[str, float] = field(default_factory=dict)
    n_coords: int = 0

    def passed(self, tol=1e-4):
        return self.max_rel_error < tol


def finite_diff_check(loss_fn, arrays, grads, h=1e-5, max_coords=None, rng=None):
    """Compare analytic grads against central differences, coordinate-wise.

    loss_fn recomputes the scalar loss from the current contents of
    ``arrays`` (probed in place and restored). ``grads`` holds the analytic
    gradient for each array. Coordinates with both gradients below 1e-4 are
    compared against that floor instead of their own magnitude.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    worst = ""
    worst_err = 0.0
    per_tensor = {}
    n_coords = 0
    for name, arr in arrays.items():
        flat = arr.reshape(-1)
        gflat = np.asarray(grads[name]).reshape(-1)
        idxs = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idxs = rng.choice(flat.size, size=max_coords, replace=False)
        t_err = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            ana = gflat[i]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-4)
            n_coords += 1
            if rel > t_err:
                t_err = rel
            if rel > worst_err:
                worst_err = rel
                worst = f"{name}[{i}]"
        per_tensor[name] = t_err
    return GradCheckReport(worst_err, worst, per_tensor, n_coords)


def gradient_check(module, x, h=1e-5, seed=0, max_coords=200):
    """Check every parameter (and the input, when float) of a module.

    The module output is scalarized with a fixed random weighting c, so the
    check exercises the full Jacobian action: loss = sum(c * forward(x)).
    """
    rng = np.random.default_rng(seed)
    x = np.array(x)
    y = module.forward(x)
    c = rng.normal(size=y.shape)

    module.zero_grad()
    dx = module.backward(c)

    arrays = {}
    grads = {}
    for name, p in module.named_params().items():
        arrays[name] = p.value
        grads[name] = p.grad
    if np.issubdtype(x.dtype, np.floating) and dx is not None:
        arrays["input"] = x
        grads["input"] = dx

    def loss_fn():
        return float(np.sum(c * module.forward(x)))

    return finite_diff_check(loss_fn, arrays, grads, h=h, max_coords=max_coords, rng=rng)
