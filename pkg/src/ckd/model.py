"""Post-LN transformer encoder with a hand-written backward pass.

Tensors are batch-major and token-major: a layer's representations are
stored as ``(B, n, d)`` so row ``i`` of batch item ``b`` is the vector of
word ``i``. Attention maps are ``(B, h, n_query, n_key)``; each query row is
a probability distribution over the real key positions.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import erf

LN_EPS = 1e-12
_NEG = -1e30
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    hidden_dim: int = 32
    num_heads: int = 2
    ffn_dim: int = 64
    vocab_size: int = 32
    max_seq_len: int = 32
    num_classes: int = 2
    pooling: str = "cls"  # "cls" (sequence label) or "token" (one label per position)
    dropout: float = 0.0
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.pooling not in ("cls", "token"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def embed_dim(self) -> int:
        return self.hidden_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def short(self) -> str:
        return f"{self.num_layers}/{self.hidden_dim}"


@dataclass
class LayerStates:
    """Everything a forward pass exposes to the distillation losses.

    ``reps[0]`` is the embedding output; ``reps[p]`` is the output of the
    p-th executed block. ``attn[p]`` / ``values[p]`` belong to block ``p+1``.
    """

    reps: list
    attn: list
    values: list
    logits: np.ndarray
    mask: np.ndarray
    cache: object = field(default=None, repr=False)

    @property
    def embeddings(self) -> np.ndarray:
        return self.reps[0]

    @property
    def num_layers(self) -> int:
        return len(self.reps) - 1


@dataclass
class StateGrads:
    """Upstream gradients on exposed tensors, keyed like LayerStates."""

    reps: dict = field(default_factory=dict)
    attn: dict = field(default_factory=dict)
    values: dict = field(default_factory=dict)
    logits: np.ndarray | None = None

    def add(self, other: "StateGrads", scale: float = 1.0) -> "StateGrads":
        for name in ("reps", "attn", "values"):
            mine, theirs = getattr(self, name), getattr(other, name)
            for k in sorted(theirs):
                g = scale * theirs[k]
                mine[k] = mine[k] + g if k in mine else g
        if other.logits is not None:
            g = scale * other.logits
            self.logits = g if self.logits is None else self.logits + g
        return self

    def scaled(self, scale: float) -> "StateGrads":
        return StateGrads().add(self, scale)


def layer_param_names(l: int) -> list[str]:
    return [f"layers.{l}.{k}" for k in ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo", "ln1_g", "ln1_b",
                                        "W1", "b1", "W2", "b2", "ln2_g", "ln2_b")]


def init_params(config: ModelConfig, rng: np.random.Generator | int | None = 0) -> dict:
    rng = np.random.default_rng(rng)
    d, f, s = config.hidden_dim, config.ffn_dim, config.init_std
    p = {
        "tok_emb": rng.normal(0.0, s, (config.vocab_size, d)),
        "pos_emb": rng.normal(0.0, s, (config.max_seq_len, d)),
    }
    for l in range(config.num_layers):
        pre = f"layers.{l}."
        for w in ("Wq", "Wk", "Wv", "Wo"):
            p[pre + w] = rng.normal(0.0, s, (d, d))
            p[pre + "b" + w[1]] = np.zeros(d)
        p[pre + "ln1_g"], p[pre + "ln1_b"] = np.ones(d), np.zeros(d)
        p[pre + "W1"], p[pre + "b1"] = rng.normal(0.0, s, (d, f)), np.zeros(f)
        p[pre + "W2"], p[pre + "b2"] = rng.normal(0.0, s, (f, d)), np.zeros(d)
        p[pre + "ln2_g"], p[pre + "ln2_b"] = np.ones(d), np.zeros(d)
    p["cls_W"] = rng.normal(0.0, s, (d, config.num_classes))
    p["cls_b"] = np.zeros(config.num_classes)
    return p


def check_params(config: ModelConfig, params: dict) -> None:
    ref = init_params(config, 0)
    if set(ref) != set(params):
        missing, extra = set(ref) - set(params), set(params) - set(ref)
        raise ValueError(f"parameter names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for k, v in ref.items():
        if params[k].shape != v.shape:
            raise ValueError(f"{k}: expected shape {v.shape}, got {params[k].shape}")


# -- elementwise pieces -------------------------------------------------------

def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def layer_norm_backward(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _as_batch(ids, mask):
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if mask is None:
        mask = np.ones(ids.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    if mask.shape != ids.shape:
        raise ValueError("ids and mask must have the same shape")
    return ids, mask


def embed(ids, params: dict, config: ModelConfig) -> np.ndarray:
    """Token embedding plus learned absolute position embedding, ``(B, n, d)``."""
    ids, _ = _as_batch(ids, None)
    n = ids.shape[1]
    if n > config.max_seq_len:
        raise ValueError(f"sequence length {n} exceeds max_seq_len {config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError("token id out of range")
    return params["tok_emb"][ids] + params["pos_emb"][None, :n]


def attention_head(x, Wq, bq, Wk, bk, Wv, bv, mask=None):
    """Single-head scaled dot-product attention on one sequence.

    ``x`` is ``(n, d)``; the projections map ``d -> d_head``. Returns the
    head output ``(n, d_head)`` and the attention map ``(n, n)`` whose row
    ``i`` is the distribution of query ``i`` over keys.
    """
    n = x.shape[0]
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    q, k, v = x @ Wq + bq, x @ Wk + bk, x @ Wv + bv
    scores = q @ k.T / np.sqrt(q.shape[-1]) + np.where(mask, 0.0, _NEG)[None, :]
    a = softmax(scores, -1)
    return a @ v, a


class _Cache:
    pass


class Encoder:
    """A transformer encoder: config plus a flat dict of named parameters."""

    def __init__(self, config: ModelConfig, params: dict | None = None, seed: int = 0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        check_params(config, self.params)

    def copy(self) -> "Encoder":
        return Encoder(self.config, {k: v.copy() for k, v in self.params.items()})

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def forward(self, ids, mask=None, *, heads: int | None = None, neurons: int | None = None,
                layers: list | None = None, head_gate=None, neuron_gate=None,
                train: bool = False, rng: np.random.Generator | None = None) -> LayerStates:
        """Run the encoder.

        ``heads``/``neurons`` keep only the first heads / FFN neurons of every
        executed block and ``layers`` selects which blocks run (0-based, in
        order). The defaults run the full network. Gates multiply each head
        output / FFN neuron and are 1 unless given; their gradients drive
        importance estimation.
        """
        cfg, P = self.config, self.params
        ids, mask = _as_batch(ids, mask)
        if not mask[:, 0].all():
            raise ValueError("position 0 of every sequence must be a real token")
        hk = cfg.num_heads if heads is None else int(heads)
        m = cfg.ffn_dim if neurons is None else int(neurons)
        layers = list(range(cfg.num_layers)) if layers is None else [int(l) for l in layers]
        if not 1 <= hk <= cfg.num_heads or not 1 <= m <= cfg.ffn_dim:
            raise ValueError("a sub-network must keep at least one head and one neuron")
        if not layers or any(not 0 <= l < cfg.num_layers for l in layers):
            raise ValueError("invalid layer selection")
        if head_gate is None:
            head_gate = np.ones((cfg.num_layers, cfg.num_heads))
        if neuron_gate is None:
            neuron_gate = np.ones((cfg.num_layers, cfg.ffn_dim))
        drop = cfg.dropout if train else 0.0
        if drop > 0.0 and rng is None:
            raise ValueError("dropout in training mode needs an rng")

        B, n = ids.shape
        dh, hd = cfg.head_dim, hk * cfg.head_dim
        key_bias = np.where(mask, 0.0, _NEG)[:, None, None, :]
        x = embed(ids, P, cfg)
        reps, attn, values, blocks = [x], [], [], []
        for l in range(len(layers)):
            li = layers[l]
            pre = f"layers.{li}."
            c = _Cache()
            c.li, c.x = li, x
            q = (x @ P[pre + "Wq"][:, :hd] + P[pre + "bq"][:hd]).reshape(B, n, hk, dh).transpose(0, 2, 1, 3)
            k = (x @ P[pre + "Wk"][:, :hd] + P[pre + "bk"][:hd]).reshape(B, n, hk, dh).transpose(0, 2, 1, 3)
            v = (x @ P[pre + "Wv"][:, :hd] + P[pre + "bv"][:hd]).reshape(B, n, hk, dh).transpose(0, 2, 1, 3)
            a = softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh) + key_bias, -1)
            ctx = a @ v
            hg = head_gate[li, :hk]
            cat = (ctx * hg[None, :, None, None]).transpose(0, 2, 1, 3).reshape(B, n, hd)
            ao = cat @ P[pre + "Wo"][:hd] + P[pre + "bo"]
            c.drop1 = None
            if drop > 0.0:
                c.drop1 = (rng.random(ao.shape) >= drop) / (1.0 - drop)
                ao = ao * c.drop1
            h1, c.ln1 = layer_norm(x + ao, P[pre + "ln1_g"], P[pre + "ln1_b"])
            u = h1 @ P[pre + "W1"][:, :m] + P[pre + "b1"][:m]
            gu = gelu(u)
            ng = neuron_gate[li, :m]
            f = (gu * ng) @ P[pre + "W2"][:m] + P[pre + "b2"]
            c.drop2 = None
            if drop > 0.0:
                c.drop2 = (rng.random(f.shape) >= drop) / (1.0 - drop)
                f = f * c.drop2
            out, c.ln2 = layer_norm(h1 + f, P[pre + "ln2_g"], P[pre + "ln2_b"])
            c.q, c.k, c.v, c.a, c.ctx, c.cat, c.h1, c.u, c.gu, c.hg, c.ng = q, k, v, a, ctx, cat, h1, u, gu, hg, ng
            blocks.append(c)
            reps.append(out)
            attn.append(a)
            values.append(v)
            x = out

        pooled = x[:, 0] if cfg.pooling == "cls" else x
        logits = pooled @ P["cls_W"] + P["cls_b"]
        cache = _Cache()
        cache.ids, cache.blocks, cache.hk, cache.m, cache.layers = ids, blocks, hk, m, layers
        return LayerStates(reps=reps, attn=attn, values=values, logits=logits, mask=mask, cache=cache)

    def backward(self, states: LayerStates, upstream: StateGrads, *, gate_grads: bool = False):
        """Parameter gradients of a scalar loss given its upstream gradients.

        ``upstream`` may carry gradients on the logits, on any ``reps[p]``,
        on any ``attn[p]`` and on any ``values[p]`` simultaneously. With
        ``gate_grads`` the head/neuron gate gradients are returned as well.
        """
        cfg, P, c0 = self.config, self.params, states.cache
        if c0 is None:
            raise ValueError("states carry no forward cache")
        nrep = len(states.reps)
        for name, limit in (("reps", nrep), ("attn", nrep - 1), ("values", nrep - 1)):
            bad = [k for k in getattr(upstream, name) if not 0 <= k < limit]
            if bad:
                raise KeyError(f"gradient requested for {name}{bad}, which the forward pass did not produce")
        grads = self.zero_grads()
        hgrad = np.zeros((cfg.num_layers, cfg.num_heads))
        ngrad = np.zeros((cfg.num_layers, cfg.ffn_dim))
        B, n = c0.ids.shape
        hk, m, dh = c0.hk, c0.m, cfg.head_dim
        hd = hk * dh

        x_top = states.reps[-1]
        dx = np.zeros_like(x_top)
        if upstream.logits is not None:
            dz = upstream.logits
            if cfg.pooling == "cls":
                grads["cls_W"] += x_top[:, 0].T @ dz
                grads["cls_b"] += dz.sum(0)
                dx[:, 0] += dz @ P["cls_W"].T
            else:
                grads["cls_W"] += x_top.reshape(-1, x_top.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
                grads["cls_b"] += dz.reshape(-1, dz.shape[-1]).sum(0)
                dx += dz @ P["cls_W"].T

        for p in range(nrep - 1, 0, -1):
            if p in upstream.reps:
                dx = dx + upstream.reps[p]
            c = c0.blocks[p - 1]
            pre = f"layers.{c.li}."
            # block output = LN2(h1 + f)
            dsum2, dg, db = layer_norm_backward(dx, P[pre + "ln2_g"], c.ln2)
            grads[pre + "ln2_g"] += dg
            grads[pre + "ln2_b"] += db
            df = dsum2 if c.drop2 is None else dsum2 * c.drop2
            gated = c.gu * c.ng
            grads[pre + "W2"][:m] += gated.reshape(-1, m).T @ df.reshape(-1, df.shape[-1])
            grads[pre + "b2"] += df.reshape(-1, df.shape[-1]).sum(0)
            dgated = df @ P[pre + "W2"][:m].T
            ngrad[c.li, :m] += (dgated * c.gu).reshape(-1, m).sum(0)
            du = dgated * c.ng * gelu_grad(c.u)
            grads[pre + "W1"][:, :m] += c.h1.reshape(-1, c.h1.shape[-1]).T @ du.reshape(-1, m)
            grads[pre + "b1"][:m] += du.reshape(-1, m).sum(0)
            dh1 = dsum2 + du @ P[pre + "W1"][:, :m].T
            # h1 = LN1(x + attention output)
            dsum1, dg, db = layer_norm_backward(dh1, P[pre + "ln1_g"], c.ln1)
            grads[pre + "ln1_g"] += dg
            grads[pre + "ln1_b"] += db
            dao = dsum1 if c.drop1 is None else dsum1 * c.drop1
            grads[pre + "Wo"][:hd] += c.cat.reshape(-1, hd).T @ dao.reshape(-1, dao.shape[-1])
            grads[pre + "bo"] += dao.reshape(-1, dao.shape[-1]).sum(0)
            dcat = (dao @ P[pre + "Wo"][:hd].T).reshape(B, n, hk, dh).transpose(0, 2, 1, 3)
            hgrad[c.li, :hk] += (dcat * c.ctx).sum(axis=(0, 2, 3))
            dctx = dcat * c.hg[None, :, None, None]
            da = dctx @ c.v.transpose(0, 1, 3, 2)
            if p - 1 in upstream.attn:
                da = da + upstream.attn[p - 1]
            dv = c.a.transpose(0, 1, 3, 2) @ dctx
            if p - 1 in upstream.values:
                dv = dv + upstream.values[p - 1]
            ds = c.a * (da - (da * c.a).sum(-1, keepdims=True)) / np.sqrt(dh)
            dq = ds @ c.k
            dk = ds.transpose(0, 1, 3, 2) @ c.q
            dxin = dsum1
            x2 = c.x.reshape(-1, c.x.shape[-1])
            for w, dd in (("q", dq), ("k", dk), ("v", dv)):
                dflat = dd.transpose(0, 2, 1, 3).reshape(-1, hd)
                grads[pre + "W" + w][:, :hd] += x2.T @ dflat
                grads[pre + "b" + w][:hd] += dflat.sum(0)
                dxin = dxin + (dflat @ P[pre + "W" + w][:, :hd].T).reshape(B, n, -1)
            dx = dxin

        if 0 in upstream.reps:
            dx = dx + upstream.reps[0]
        np.add.at(grads["tok_emb"], c0.ids.reshape(-1), dx.reshape(-1, dx.shape[-1]))
        grads["pos_emb"][:n] += dx.sum(0)
        if gate_grads:
            return grads, hgrad, ngrad
        return grads

    # -- structural helpers used by the adaptive trainer -------------------

    def permute(self, head_orders, neuron_orders) -> "Encoder":
        """Reorder heads and FFN neurons of every layer; the full network's
        function is unchanged."""
        cfg = self.config
        dh = cfg.head_dim
        P = copy.copy(self.params)
        for l in range(cfg.num_layers):
            pre = f"layers.{l}."
            ho = np.asarray(head_orders[l])
            cols = (ho[:, None] * dh + np.arange(dh)[None, :]).reshape(-1)
            for w in ("q", "k", "v"):
                P[pre + "W" + w] = P[pre + "W" + w][:, cols].copy()
                P[pre + "b" + w] = P[pre + "b" + w][cols].copy()
            P[pre + "Wo"] = P[pre + "Wo"][cols].copy()
            no = np.asarray(neuron_orders[l])
            P[pre + "W1"] = P[pre + "W1"][:, no].copy()
            P[pre + "b1"] = P[pre + "b1"][no].copy()
            P[pre + "W2"] = P[pre + "W2"][no].copy()
        return Encoder(cfg, P)


def predict(model: Encoder, ids, mask=None, **kw) -> np.ndarray:
    return model.forward(ids, mask, **kw).logits.argmax(-1)
