"""Transformer window encoder with hand-written backprop, triplet loss and an AdamW trainer.

Forward path for a window of input vectors ``X`` (L x input_dim)::

    LN_emb(LN_in(X Wp + bp) + P[:L]) -> dropout -> post-LN encoder blocks
    -> mean over positions -> l2 normalise

Each block is multi-head self-attention and a GELU feed-forward, each
wrapped in residual + LayerNorm. All arithmetic is float64; parameters are
kept on the float32 grid at rest so saved models reload bit-identically.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from .dataset import Triplet
from .embed import EmbeddingTable
from .persist import read_blocks, write_blocks

logger = logging.getLogger(__name__)

LN_EPS = 1e-12
MODEL_MAGIC = b"NCENC"
MODEL_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class EncoderConfig:
    input_dim: int = 64
    model_dim: int = 128
    layers: int = 2
    heads: int = 2
    ff_dim: Optional[int] = None
    max_positions: int = 512
    dropout: float = 0.1
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.ff_dim is None:
            self.ff_dim = 4 * self.model_dim
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if min(self.input_dim, self.model_dim, self.layers, self.heads, self.ff_dim, self.max_positions) < 1:
            raise ValueError("encoder dimensions must be positive")
        if self.model_dim < 3:
            # LayerNorm over one or two features is constant or a sign pattern
            raise ValueError("model_dim must be at least 3")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class TrainConfig:
    margin: float = 0.1
    batch_size: int = 32
    learning_rate: float = 1e-6
    weight_decay: float = 0.1
    epochs: int = 1
    max_steps: Optional[int] = None
    micro_batch: Optional[int] = None
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")


def _snap(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# layer primitives (forward returns (out, cache); backward returns input grad)
# ---------------------------------------------------------------------------

def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xh = xc * rstd
    return xh * g + b, (xh, rstd, g)


def _ln_backward(dy, cache, grads, prefix):
    xh, rstd, g = cache
    axes = tuple(range(dy.ndim - 1))
    grads[prefix + ".g"] += (dy * xh).sum(axis=axes)
    grads[prefix + ".b"] += dy.sum(axis=axes)
    dxh = dy * g
    return rstd * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))


def _gelu(x):
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    return x * cdf, cdf


def _gelu_grad(x, cdf):
    return cdf + x * np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _dropout_mask(shape, p, rng):
    if rng is None or p == 0.0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


class EncoderModel:
    """Parameters live in ``params`` keyed by dotted names; see ``param_shapes``."""

    def __init__(self, config: EncoderConfig, params: Optional[Dict[str, np.ndarray]] = None):
        self.config = config
        if params is None:
            params = self._init_params()
        expected = self.param_shapes(config)
        if set(params) != set(expected):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name in expected}

    @staticmethod
    def param_shapes(c: EncoderConfig) -> Dict[str, tuple]:
        d, f = c.model_dim, c.ff_dim
        shapes = {
            "proj.W": (c.input_dim, d), "proj.b": (d,),
            "ln_in.g": (d,), "ln_in.b": (d,),
            "pos": (c.max_positions, d),
            "ln_emb.g": (d,), "ln_emb.b": (d,),
        }
        for i in range(c.layers):
            p = f"layer{i}."
            for m in ("q", "k", "v", "o"):
                shapes[p + m + ".W"] = (d, d)
                shapes[p + m + ".b"] = (d,)
            shapes.update({
                p + "ln1.g": (d,), p + "ln1.b": (d,),
                p + "ff1.W": (d, f), p + "ff1.b": (f,),
                p + "ff2.W": (f, d), p + "ff2.b": (d,),
                p + "ln2.g": (d,), p + "ln2.b": (d,),
            })
        return shapes

    def _init_params(self):
        rng = np.random.default_rng(self.config.seed)
        params = {}
        for name, shape in self.param_shapes(self.config).items():
            if name.endswith(".g"):
                params[name] = np.ones(shape)
            elif name.endswith(".b"):
                params[name] = np.zeros(shape)
            else:
                params[name] = _snap(rng.normal(0.0, self.config.init_std, size=shape))
        return params

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, rng: Optional[np.random.Generator] = None):
        """Encode a batch ``x`` of shape (B, L, input_dim).

        Dropout is active only when ``rng`` is given. Returns unit vectors
        (B, model_dim) and the cache consumed by ``backward``.
        """
        c, P = self.config, self.params
        if x.ndim != 3 or x.shape[2] != c.input_dim:
            raise ValueError(f"expected (B, L, {c.input_dim}) input, got {x.shape}")
        B, L, _ = x.shape
        if L > c.max_positions:
            raise ValueError(f"window length {L} exceeds max_positions {c.max_positions}")
        if L == 0:
            raise ValueError("empty window")
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite encoder input")
        H, d = c.heads, c.model_dim
        dh = d // H
        p = c.dropout if rng is not None else 0.0
        cache = {"x": x}

        h = x @ P["proj.W"] + P["proj.b"]
        z, cache["ln_in"] = _ln_forward(h, P["ln_in.g"], P["ln_in.b"])
        e = z + P["pos"][:L]
        t, cache["ln_emb"] = _ln_forward(e, P["ln_emb.g"], P["ln_emb.b"])
        mask = _dropout_mask(t.shape, p, rng)
        cache["drop_emb"] = mask
        if mask is not None:
            t = t * mask

        layers = []
        for i in range(c.layers):
            pre = f"layer{i}."
            lc = {"in": t}
            q = (t @ P[pre + "q.W"] + P[pre + "q.b"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            k = (t @ P[pre + "k.W"] + P[pre + "k.b"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            v = (t @ P[pre + "v.W"] + P[pre + "v.b"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            a = _softmax(q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh))
            amask = _dropout_mask(a.shape, p, rng)
            ad = a * amask if amask is not None else a
            ctx = (ad @ v).transpose(0, 2, 1, 3).reshape(B, L, d)
            o = ctx @ P[pre + "o.W"] + P[pre + "o.b"]
            omask = _dropout_mask(o.shape, p, rng)
            if omask is not None:
                o = o * omask
            t1, lc["ln1"] = _ln_forward(t + o, P[pre + "ln1.g"], P[pre + "ln1.b"])
            u = t1 @ P[pre + "ff1.W"] + P[pre + "ff1.b"]
            gl, cdf = _gelu(u)
            f = gl @ P[pre + "ff2.W"] + P[pre + "ff2.b"]
            fmask = _dropout_mask(f.shape, p, rng)
            if fmask is not None:
                f = f * fmask
            t, lc["ln2"] = _ln_forward(t1 + f, P[pre + "ln2.g"], P[pre + "ln2.b"])
            lc.update(q=q, k=k, v=v, a=a, amask=amask, ad=ad, ctx=ctx, omask=omask,
                      t1=t1, u=u, gl=gl, cdf=cdf, fmask=fmask)
            layers.append(lc)
        cache["layers"] = layers

        m = t.mean(axis=1)
        norm = np.linalg.norm(m, axis=1, keepdims=True)
        if np.any(norm == 0):
            raise FloatingPointError("zero pooled representation")
        y = m / norm
        cache.update(y=y, norm=norm, L=L)
        return y, cache

    def backward(self, dy: np.ndarray, cache) -> Dict[str, np.ndarray]:
        c, P = self.config, self.params
        grads = {k: np.zeros_like(v) for k, v in P.items()}
        y, norm, L = cache["y"], cache["norm"], cache["L"]
        B = y.shape[0]
        H, d = c.heads, c.model_dim
        dh = d // H

        dm = (dy - y * (y * dy).sum(axis=1, keepdims=True)) / norm
        dt = np.broadcast_to(dm[:, None, :] / L, (B, L, d)).copy()

        for i in reversed(range(c.layers)):
            pre = f"layer{i}."
            lc = cache["layers"][i]
            dr2 = _ln_backward(dt, lc["ln2"], grads, pre + "ln2")
            df = dr2 if lc["fmask"] is None else dr2 * lc["fmask"]
            grads[pre + "ff2.W"] += np.einsum("blf,bld->fd", lc["gl"], df)
            grads[pre + "ff2.b"] += df.sum(axis=(0, 1))
            du = (df @ P[pre + "ff2.W"].T) * _gelu_grad(lc["u"], lc["cdf"])
            grads[pre + "ff1.W"] += np.einsum("bld,blf->df", lc["t1"], du)
            grads[pre + "ff1.b"] += du.sum(axis=(0, 1))
            dt1 = dr2 + du @ P[pre + "ff1.W"].T

            dr1 = _ln_backward(dt1, lc["ln1"], grads, pre + "ln1")
            do = dr1 if lc["omask"] is None else dr1 * lc["omask"]
            grads[pre + "o.W"] += np.einsum("bld,ble->de", lc["ctx"], do)
            grads[pre + "o.b"] += do.sum(axis=(0, 1))
            dctx = (do @ P[pre + "o.W"].T).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
            dad = dctx @ lc["v"].transpose(0, 1, 3, 2)
            dv = lc["ad"].transpose(0, 1, 3, 2) @ dctx
            da = dad if lc["amask"] is None else dad * lc["amask"]
            a = lc["a"]
            ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
            dq = ds @ lc["k"]
            dk = ds.transpose(0, 1, 3, 2) @ lc["q"]
            t_in = lc["in"]
            dt_in = dr1.copy()
            for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
                g2 = dproj.transpose(0, 2, 1, 3).reshape(B, L, d)
                grads[pre + name + ".W"] += np.einsum("bld,ble->de", t_in, g2)
                grads[pre + name + ".b"] += g2.sum(axis=(0, 1))
                dt_in += g2 @ P[pre + name + ".W"].T
            dt = dt_in

        if cache["drop_emb"] is not None:
            dt = dt * cache["drop_emb"]
        de = _ln_backward(dt, cache["ln_emb"], grads, "ln_emb")
        grads["pos"][:L] += de.sum(axis=0)
        dh_ = _ln_backward(de, cache["ln_in"], grads, "ln_in")
        grads["proj.W"] += np.einsum("bli,bld->id", cache["x"], dh_)
        grads["proj.b"] += dh_.sum(axis=(0, 1))
        return grads

    # -- inference ------------------------------------------------------------

    def encode(self, window: np.ndarray) -> np.ndarray:
        """Unit-norm embedding of one window of input vectors (L, input_dim)."""
        y, _ = self.forward(np.asarray(window, dtype=np.float64)[None])
        return y[0]

    def encode_batch(self, windows: np.ndarray, chunk: int = 64) -> np.ndarray:
        windows = np.asarray(windows, dtype=np.float64)
        if len(windows) == 0:
            return np.empty((0, self.config.model_dim))
        return np.concatenate([self.forward(windows[s:s + chunk])[0] for s in range(0, len(windows), chunk)])

    def encode_ids(self, ids: np.ndarray, table: EmbeddingTable, chunk: int = 64) -> np.ndarray:
        """Encode token-id windows of shape (N, L) through an embedding table."""
        ids = np.asarray(ids)
        out = [self.forward(table.window_vectors(ids[s:s + chunk]))[0] for s in range(0, len(ids), chunk)]
        return np.concatenate(out) if out else np.empty((0, self.config.model_dim))

    # -- persistence ---------------------------------------------------------

    def save(self, path: Union[str, Path]) -> None:
        write_blocks(path, MODEL_MAGIC, MODEL_VERSION, {"config": asdict(self.config)}, self.params)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EncoderModel":
        meta, blocks = read_blocks(path, MODEL_MAGIC, MODEL_VERSION)
        return cls(EncoderConfig(**meta["config"]), {k: v.astype(np.float64) for k, v in blocks.items()})


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine of a zero-norm vector")
    return float(u @ v) / (nu * nv)


def triplet_loss(a: np.ndarray, p: np.ndarray, n: np.ndarray, margin: float = 0.1) -> float:
    """``max(0, -cos(a, p) + cos(a, n) + margin)``."""
    return max(0.0, -cosine(a, p) + cosine(a, n) + margin)


def batch_triplet_loss(ya, yp, yn, margin):
    """Mean hinge over unit-norm rows; returns loss, slacks and grads w.r.t. each input."""
    slack = -(ya * yp).sum(axis=1) + (ya * yn).sum(axis=1) + margin
    active = (slack > 0).astype(np.float64)[:, None]
    B = len(ya)
    loss = float(np.maximum(slack, 0.0).mean())
    da = active * (yn - yp) / B
    dp = -active * ya / B
    dn = active * ya / B
    return loss, slack, (da, dp, dn)


def _triplet_forward_backward(model: EncoderModel, xa, xp, xn, margin, rng=None, need_grads=True):
    B = len(xa)
    y, cache = model.forward(np.concatenate([xa, xp, xn]), rng)
    ya, yp, yn = y[:B], y[B:2 * B], y[2 * B:]
    loss, slack, (da, dp, dn) = batch_triplet_loss(ya, yp, yn, margin)
    grads = model.backward(np.concatenate([da, dp, dn]), cache) if need_grads else None
    return loss, slack, grads


def triplet_inputs(triplets: Sequence[Triplet], table: EmbeddingTable):
    xa = table.window_vectors(np.stack([t.anchor.token_ids for t in triplets]))
    xp = table.window_vectors(np.stack([t.positive.token_ids for t in triplets]))
    xn = table.window_vectors(np.stack([t.negative.token_ids for t in triplets]))
    return xa, xp, xn


def evaluate_loss(model: EncoderModel, triplets: Sequence[Triplet], table: EmbeddingTable,
                  margin: float = 0.1, chunk: int = 32) -> float:
    """Mean hinge loss over all triplets with dropout off."""
    total = 0.0
    for s in range(0, len(triplets), chunk):
        xa, xp, xn = triplet_inputs(triplets[s:s + chunk], table)
        loss, _, _ = _triplet_forward_backward(model, xa, xp, xn, margin, need_grads=False)
        total += loss * len(xa)
    return total / len(triplets)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: EncoderModel
    loss_history: List[float] = field(default_factory=list)
    steps: int = 0


def train(model: EncoderModel, triplets: Sequence[Triplet], table: EmbeddingTable,
          cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Minimise the mean batch triplet loss with AdamW (decoupled weight decay).

    Returns a trained copy; ``model`` itself is left untouched. The loss of
    every optimiser step is recorded. Large batches are accumulated in
    ``micro_batch`` chunks without changing the result.
    """
    if not triplets:
        raise ValueError("need at least one triplet")
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    b1, b2 = cfg.betas
    m1 = {k: np.zeros_like(v) for k, v in model.params.items()}
    m2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    history: List[float] = []
    step = 0
    micro = cfg.micro_batch or cfg.batch_size
    done = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(triplets))
        for start in range(0, len(order), cfg.batch_size):
            batch = [triplets[i] for i in order[start:start + cfg.batch_size]]
            grads = {k: np.zeros_like(v) for k, v in model.params.items()}
            loss = 0.0
            for ms in range(0, len(batch), micro):
                part = batch[ms:ms + micro]
                xa, xp, xn = triplet_inputs(part, table)
                part_loss, _, g = _triplet_forward_backward(model, xa, xp, xn, cfg.margin, rng)
                w = len(part) / len(batch)
                loss += part_loss * w
                for k in grads:
                    grads[k] += g[k] * w
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}; "
                    f"max |param| = {max(float(np.abs(v).max()) for v in model.params.values()):.3g}"
                )
            step += 1
            lr = cfg.learning_rate
            for k, p in model.params.items():
                g = grads[k]
                m1[k] = b1 * m1[k] + (1 - b1) * g
                m2[k] = b2 * m2[k] + (1 - b2) * g * g
                mhat = m1[k] / (1 - b1 ** step)
                vhat = m2[k] / (1 - b2 ** step)
                p -= lr * cfg.weight_decay * p
                p -= lr * mhat / (np.sqrt(vhat) + cfg.eps)
            history.append(loss)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        logger.info("encoder epoch %d: last batch loss %.5f", epoch + 1, history[-1])
        if done:
            break
    for k in model.params:
        model.params[k] = _snap(model.params[k])
        if not np.all(np.isfinite(model.params[k])):
            raise TrainingError(f"non-finite parameter {k} after training")
    return TrainResult(model=model, loss_history=history, steps=step)


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: Dict[str, float]
    analytic: Dict[str, np.ndarray] = field(repr=False)
    numeric: Dict[str, np.ndarray] = field(repr=False)
    loss: float = 0.0


def grad_check(model: EncoderModel, xa, xp, xn, margin: float = 0.1, step: float = 1e-4,
               params: Optional[Sequence[str]] = None, floor: float = 1e-8) -> GradCheckResult:
    """Central finite differences against ``backward`` for the batch triplet loss.

    Relative error per parameter tensor is ``|g_a - g_n| / (|g_a| + |g_n|)``
    in the l2 norm, with the denominator floored at ``floor`` so tensors
    whose true gradient is identically zero (the key bias: softmax ignores
    per-row shifts) compare on absolute error. Triplets sitting on the hinge
    (``|slack| < 1e-6``) are rejected.
    """
    xa, xp, xn = (np.asarray(v, dtype=np.float64) for v in (xa, xp, xn))
    loss, slack, analytic = _triplet_forward_backward(model, xa, xp, xn, margin)
    if np.any(np.abs(slack) < 1e-6):
        raise ValueError("triplet sits on the hinge; gradient undefined")
    names = list(params) if params is not None else list(model.params)
    numeric, per_param = {}, {}
    for name in names:
        p = model.params[name]
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            lp, _, _ = _triplet_forward_backward(model, xa, xp, xn, margin, need_grads=False)
            flat[i] = old - step
            lm, _, _ = _triplet_forward_backward(model, xa, xp, xn, margin, need_grads=False)
            flat[i] = old
            num.reshape(-1)[i] = (lp - lm) / (2 * step)
        numeric[name] = num
        an = analytic[name]
        denom = max(np.linalg.norm(an) + np.linalg.norm(num), floor)
        per_param[name] = float(np.linalg.norm(an - num) / denom)
    return GradCheckResult(
        max_rel_error=max(per_param.values()) if per_param else 0.0,
        per_param=per_param,
        analytic={k: analytic[k] for k in names},
        numeric=numeric,
        loss=loss,
    )
