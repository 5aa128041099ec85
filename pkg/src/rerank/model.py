"""Toy-scale BERT-style cross-encoder written directly in numpy.

Post-norm encoder blocks (attention -> add & norm -> GELU FFN -> add & norm),
learned token/segment/position embeddings, and a two-logit relevance head on
the final-layer [CLS] vector. ``forward`` in train mode keeps the activations
``backward`` needs; gradients are derived by hand and checked against finite
differences in the test suite.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erf

from .errors import NumericError, ParseError, StateError
from .tokenizer import Batch

Params = dict[str, np.ndarray]

PROB_CLAMP = 1e-7
LN_EPS = 1e-12
INIT_STD = 0.02

CHECKPOINT_MAGIC = b"RRNKCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 2
    hidden: int = 32
    ffn: int = 64
    vocab_size: int = 1000
    max_positions: int = 512
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        dims = (self.num_layers, self.num_heads, self.hidden, self.ffn,
                self.vocab_size, self.max_positions)
        if min(dims) <= 0:
            raise ValueError(f"all model dimensions must be positive: {self}")
        if self.hidden % self.num_heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by num_heads={self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.num_heads


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.hidden, config.ffn
    shapes = {
        "emb.token": (config.vocab_size, d),
        "emb.segment": (2, d),
        "emb.position": (config.max_positions, d),
        "emb.ln_scale": (d,),
        "emb.ln_shift": (d,),
    }
    for l in range(config.num_layers):
        p = f"layer{l}."
        for name in ("q", "k", "v", "o"):
            shapes[p + f"w{name}"] = (d, d)
            shapes[p + f"b{name}"] = (d,)
        shapes.update({
            p + "ln1_scale": (d,), p + "ln1_shift": (d,),
            p + "w1": (d, f), p + "b1": (f,),
            p + "w2": (f, d), p + "b2": (d,),
            p + "ln2_scale": (d,), p + "ln2_shift": (d,),
        })
    shapes["head.w"] = (d, 2)
    shapes["head.b"] = (2,)
    return shapes


def is_decayed(name: str) -> bool:
    """Weight decay applies to weight matrices and embeddings, not biases or norms."""
    leaf = name.split(".")[-1]
    return not (leaf.startswith("b") or leaf.startswith("ln"))


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(config: ModelConfig) -> Params:
    """Truncated normal weights, zero biases, unit norms; the head starts at zero."""
    rng = np.random.default_rng(config.seed)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.split(".")[-1]
        if name.startswith("head."):
            params[name] = np.zeros(shape)
        elif leaf.endswith("_scale"):
            params[name] = np.ones(shape)
        elif leaf.endswith("_shift") or leaf.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = _truncated_normal(rng, shape, INIT_STD)
    return params


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def layer_norm(x, scale, shift, eps: float = LN_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * scale + shift


def _layer_norm_fwd(x, scale, shift):
    mean = x.mean(axis=-1, keepdims=True)
    centred = x - mean
    inv = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = centred * inv
    return xhat * scale + shift, (xhat, inv)


def _layer_norm_bwd(dy, scale, saved):
    xhat, inv = saved
    n = xhat.shape[-1]
    axes = tuple(range(dy.ndim - 1))
    dscale = (dy * xhat).sum(axis=axes)
    dshift = dy.sum(axis=axes)
    dxhat = dy * scale
    dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dx, dscale, dshift


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


class _Dropout:
    """Inverted dropout driven by a counter-based (Philox) stream."""

    def __init__(self, rate: float, key: tuple[int, int] | None):
        self.rate = rate
        self.rng = None
        if rate > 0.0 and key is not None:
            self.rng = np.random.Generator(np.random.Philox(key=[k % 2**64 for k in key]))

    def mask(self, shape):
        if self.rng is None:
            return None
        keep = self.rng.random(shape) >= self.rate
        return keep / (1.0 - self.rate)


def _apply(x, m):
    return x if m is None else x * m


def _check(x, where: str):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {where}")


# ---------------------------------------------------------------------------
# attention block
# ---------------------------------------------------------------------------

def _split_heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _attention_fwd(x, params, prefix, mask, num_heads, drop: _Dropout):
    dh = x.shape[-1] // num_heads
    q = _split_heads(x @ params[prefix + "wq"] + params[prefix + "bq"], num_heads)
    k = _split_heads(x @ params[prefix + "wk"] + params[prefix + "bk"], num_heads)
    v = _split_heads(x @ params[prefix + "wv"] + params[prefix + "bv"], num_heads)
    logits = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
    keymask = mask[:, None, None, :].astype(bool)
    logits = np.where(keymask, logits, -np.inf)
    probs = softmax(logits)
    m_probs = drop.mask(probs.shape)
    ctx = _merge_heads(_apply(probs, m_probs) @ v)
    out = ctx @ params[prefix + "wo"] + params[prefix + "bo"]
    m_out = drop.mask(out.shape)
    out = _apply(out, m_out)
    saved = (x, q, k, v, probs, m_probs, ctx, m_out)
    return out, saved


def _attention_bwd(dout, params, prefix, saved, grads):
    x, q, k, v, probs, m_probs, ctx, m_out = saved
    nh = q.shape[1]
    dh = q.shape[-1]
    dout = _apply(dout, m_out)
    grads[prefix + "wo"] = ctx.reshape(-1, ctx.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
    grads[prefix + "bo"] = dout.sum(axis=(0, 1))
    dctx = _split_heads(dout @ params[prefix + "wo"].T, nh)
    dropped = _apply(probs, m_probs)
    dv = dropped.transpose(0, 1, 3, 2) @ dctx
    dprobs = _apply(dctx @ v.transpose(0, 1, 3, 2), m_probs)
    dlogits = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True))
    dlogits /= math.sqrt(dh)
    dq = dlogits @ k
    dk = dlogits.transpose(0, 1, 3, 2) @ q
    dx = np.zeros_like(x)
    flat_x = x.reshape(-1, x.shape[-1])
    for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
        dproj = _merge_heads(dproj)
        grads[prefix + f"w{name}"] = flat_x.T @ dproj.reshape(-1, dproj.shape[-1])
        grads[prefix + f"b{name}"] = dproj.sum(axis=(0, 1))
        dx += dproj @ params[prefix + f"w{name}"].T
    return dx


def attention_layer(x, params: Params, mask, num_heads: int, layer: int = 0) -> np.ndarray:
    """One full encoder block in inference mode; output has the input's shape."""
    out, _ = _block_fwd(np.asarray(x, dtype=np.float64), params, f"layer{layer}.",
                        np.asarray(mask), num_heads, _Dropout(0.0, None))
    return out


def _block_fwd(x, params, prefix, mask, num_heads, drop):
    attn, attn_saved = _attention_fwd(x, params, prefix, mask, num_heads, drop)
    h1, ln1 = _layer_norm_fwd(x + attn, params[prefix + "ln1_scale"], params[prefix + "ln1_shift"])
    pre = h1 @ params[prefix + "w1"] + params[prefix + "b1"]
    act = gelu(pre)
    ff = act @ params[prefix + "w2"] + params[prefix + "b2"]
    m_ff = drop.mask(ff.shape)
    ff = _apply(ff, m_ff)
    h2, ln2 = _layer_norm_fwd(h1 + ff, params[prefix + "ln2_scale"], params[prefix + "ln2_shift"])
    return h2, (attn_saved, ln1, h1, pre, act, m_ff, ln2)


def _block_bwd(dh2, params, prefix, saved, grads):
    attn_saved, ln1, h1, pre, act, m_ff, ln2 = saved
    dsum2, grads[prefix + "ln2_scale"], grads[prefix + "ln2_shift"] = _layer_norm_bwd(
        dh2, params[prefix + "ln2_scale"], ln2)
    dff = _apply(dsum2, m_ff)
    d_model = act.shape[-1]
    grads[prefix + "w2"] = act.reshape(-1, d_model).T @ dff.reshape(-1, dff.shape[-1])
    grads[prefix + "b2"] = dff.sum(axis=(0, 1))
    dpre = (dff @ params[prefix + "w2"].T) * _gelu_grad(pre)
    grads[prefix + "w1"] = h1.reshape(-1, h1.shape[-1]).T @ dpre.reshape(-1, dpre.shape[-1])
    grads[prefix + "b1"] = dpre.sum(axis=(0, 1))
    dh1 = dsum2 + dpre @ params[prefix + "w1"].T
    dsum1, grads[prefix + "ln1_scale"], grads[prefix + "ln1_shift"] = _layer_norm_bwd(
        dh1, params[prefix + "ln1_scale"], ln1)
    return dsum1 + _attention_bwd(dsum1, params, prefix, attn_saved, grads)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    batch: Batch
    emb_ln: tuple
    m_emb: np.ndarray | None
    blocks: list
    cls: np.ndarray
    m_cls: np.ndarray | None
    probs2: np.ndarray


def forward(params: Params, batch: Batch, config: ModelConfig, mode: str = "infer",
            dropout_key: tuple[int, int] | None = None):
    """Relevance probabilities for a padded batch.

    Returns ``(probs, cache)``; ``cache`` is None in infer mode. In train mode
    dropout masks come from a Philox stream keyed by ``dropout_key`` (dropout is
    skipped when no key is given).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if len(batch) == 0:
        raise ValueError("empty batch")
    n, t = batch.token_ids.shape
    if t > config.max_positions:
        raise ValueError(f"sequence length {t} exceeds max_positions={config.max_positions}")
    train = mode == "train"
    drop = _Dropout(config.dropout if train else 0.0, dropout_key)

    x = (params["emb.token"][batch.token_ids] + params["emb.segment"][batch.segment_ids]
         + params["emb.position"][:t])
    h, emb_ln = _layer_norm_fwd(x, params["emb.ln_scale"], params["emb.ln_shift"])
    m_emb = drop.mask(h.shape)
    h = _apply(h, m_emb)
    _check(h, "embeddings")
    blocks = []
    for l in range(config.num_layers):
        h, saved = _block_fwd(h, params, f"layer{l}.", batch.mask, config.num_heads, drop)
        _check(h, f"encoder layer {l}")
        blocks.append(saved)
    cls = h[:, 0]
    m_cls = drop.mask(cls.shape)
    logits = _apply(cls, m_cls) @ params["head.w"] + params["head.b"]
    _check(logits, "relevance head")
    probs2 = softmax(logits)
    probs = probs2[:, 1]
    cache = ForwardCache(batch, emb_ln, m_emb, blocks, cls, m_cls, probs2) if train else None
    return probs, cache


def predict(params: Params, batch: Batch, config: ModelConfig) -> np.ndarray:
    return forward(params, batch, config, "infer")[0]


def logit_grad(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(summed clamped cross-entropy)/d(relevant logit): p - y, zero where clamped."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    inside = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
    return np.where(inside, probs - labels, 0.0)


def backward(params: Params, cache: ForwardCache | None, labels, config: ModelConfig) -> Params:
    """Gradient of the summed clamped cross-entropy w.r.t. every parameter."""
    if cache is None:
        raise StateError("backward needs the cache of a train-mode forward pass")
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (len(cache.batch),):
        raise ValueError(f"expected {len(cache.batch)} labels, got shape {labels.shape}")
    g1 = logit_grad(cache.probs2[:, 1], labels)
    dlogits = np.stack([-g1, g1], axis=1)
    grads: Params = {}
    cls_in = _apply(cache.cls, cache.m_cls)
    grads["head.w"] = cls_in.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dcls = _apply(dlogits @ params["head.w"].T, cache.m_cls)

    batch = cache.batch
    n, t = batch.token_ids.shape
    dh = np.zeros((n, t, config.hidden))
    dh[:, 0] = dcls
    for l in reversed(range(config.num_layers)):
        dh = _block_bwd(dh, params, f"layer{l}.", cache.blocks[l], grads)
    dh = _apply(dh, cache.m_emb)
    dx, grads["emb.ln_scale"], grads["emb.ln_shift"] = _layer_norm_bwd(
        dh, params["emb.ln_scale"], cache.emb_ln)

    flat = dx.reshape(-1, config.hidden)
    d_tok = np.zeros_like(params["emb.token"])
    np.add.at(d_tok, batch.token_ids.reshape(-1), flat)
    d_seg = np.zeros_like(params["emb.segment"])
    np.add.at(d_seg, batch.segment_ids.reshape(-1), flat)
    d_pos = np.zeros_like(params["emb.position"])
    d_pos[:t] = dx.sum(axis=0)
    grads["emb.token"], grads["emb.segment"], grads["emb.position"] = d_tok, d_seg, d_pos
    return {name: grads[name] for name in params}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: Params, config: ModelConfig, path) -> None:
    """Write a little-endian binary checkpoint.

    Layout::

        8s   magic "RRNKCKPT"
        <I   format version
        <I   byte length of the UTF-8 JSON config, then the JSON (sorted keys)
        <I   tensor count, then per tensor in param_shapes order:
             <H name length, name bytes, <B ndim, ndim x <I dims,
             prod(dims) x <f8 values (C order)
    """
    cfg = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    shapes = param_shapes(config)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(shapes)))
        for name, shape in shapes.items():
            arr = np.asarray(params[name], dtype="<f8")
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {shape}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> tuple[Params, ModelConfig]:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise ParseError("truncated checkpoint", path)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(8) != CHECKPOINT_MAGIC:
        raise ParseError("not a checkpoint file", path)
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", path)
    (cfg_len,) = struct.unpack("<I", take(4))
    config = ModelConfig(**json.loads(take(cfg_len).decode("utf-8")))
    (count,) = struct.unpack("<I", take(4))
    params: Params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise ParseError("trailing bytes after last tensor", path)
    expected = param_shapes(config)
    if {k: v.shape for k, v in params.items()} != expected:
        raise ParseError("tensor set does not match the stored config", path)
    return params, config
