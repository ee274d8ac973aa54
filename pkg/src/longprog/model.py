"""Forecasting network: linear token projection + learned position/age
encodings, transformer encoder layers with masked self-attention, mean
pooling over valid tokens, and a softmax classifier head.

Everything is float64 numpy with hand-written reverse-mode gradients; a
`forward` call returns a `ForwardTrace` that `backward` replays exactly.
Dropout is inverted (scaled at train time) so evaluation needs no rescaling.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import TokenSequence

LN_EPS = 1e-5
N_CLASSES = 3


@dataclass(frozen=True)
class ModelConfig:
    token_width: int
    hidden_dim: int = 128
    n_heads: int = 2
    n_layers: int = 1
    classifier: tuple[int, ...] = (128, N_CLASSES)  # layer widths, last = 3
    dropout: float = 0.5
    max_positions: int = 4
    ffn_mult: int = 4
    # train-set age statistics; ages enter the age encoder z-scored
    age_mean: float = 0.0
    age_std: float = 1.0

    def __post_init__(self) -> None:
        if self.token_width < 1:
            raise ValueError("token_width must be >= 1")
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1 or self.max_positions < 1 or self.ffn_mult < 1:
            raise ValueError("n_layers, max_positions, ffn_mult must be >= 1")
        if not self.classifier or self.classifier[-1] != N_CLASSES:
            raise ValueError(f"classifier must end with {N_CLASSES} output units")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.age_std <= 0:
            raise ValueError("age_std must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    def to_json_dict(self) -> dict:
        return {
            "token_width": self.token_width,
            "hidden_dim": self.hidden_dim,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "classifier": list(self.classifier),
            "dropout": self.dropout,
            "max_positions": self.max_positions,
            "ffn_mult": self.ffn_mult,
            "age_mean": self.age_mean,
            "age_std": self.age_std,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["classifier"] = tuple(data["classifier"])
        return cls(**data)


def param_layout(cfg: ModelConfig) -> "OrderedDict[str, tuple[tuple[int, ...], str]]":
    """name -> (shape, init kind: glorot | zeros | ones), in declared order."""
    d = cfg.hidden_dim
    layout: "OrderedDict[str, tuple[tuple[int, ...], str]]" = OrderedDict()
    layout["input_proj_w"] = ((cfg.token_width, d), "glorot")
    layout["input_proj_b"] = ((d,), "zeros")
    layout["pos_table"] = ((cfg.max_positions, d), "zeros")
    layout["age_slope"] = ((d,), "glorot")  # fan_in 1: scalar age into d dims
    layout["age_bias"] = ((d,), "zeros")
    dff = cfg.ffn_mult * d
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        for nm in ("wq", "wk", "wv", "wo"):
            layout[p + nm] = ((d, d), "glorot")
        for nm in ("bq", "bk", "bv", "bo"):
            layout[p + nm] = ((d,), "zeros")
        layout[p + "ln1_gain"] = ((d,), "ones")
        layout[p + "ln1_bias"] = ((d,), "zeros")
        layout[p + "ffn_w1"] = ((d, dff), "glorot")
        layout[p + "ffn_b1"] = ((dff,), "zeros")
        layout[p + "ffn_w2"] = ((dff, d), "glorot")
        layout[p + "ffn_b2"] = ((d,), "zeros")
        layout[p + "ln2_gain"] = ((d,), "ones")
        layout[p + "ln2_bias"] = ((d,), "zeros")
    in_dim = d
    for j, width in enumerate(cfg.classifier):
        layout[f"cls{j}_w"] = ((in_dim, width), "glorot")
        layout[f"cls{j}_b"] = ((width,), "zeros")
        in_dim = width
    return layout


class ModelParams:
    """Ordered named arrays. `version` counts in-place updates so stale
    forward traces can be detected."""

    __slots__ = ("config", "arrays", "version")

    def __init__(self, config: ModelConfig, arrays: "OrderedDict[str, np.ndarray]"):
        self.config = config
        self.arrays = arrays
        self.version = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict((k, v.copy()) for k, v in self.arrays.items()))

    def mark_updated(self) -> None:
        self.version += 1

    def l2_sum(self) -> float:
        return float(sum(np.sum(a * a) for a in self.arrays.values()))

    def zeros_like(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, np.zeros_like(v)) for k, v in self.arrays.items())

    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Scaled-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases,
    zero position table, unit norm gains. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, (shape, kind) in param_layout(cfg).items():
        if kind == "zeros":
            arrays[name] = np.zeros(shape, dtype=np.float64)
        elif kind == "ones":
            arrays[name] = np.ones(shape, dtype=np.float64)
        else:
            if len(shape) == 2:
                fan_in, fan_out = shape
            else:  # age_slope: scalar in, d out
                fan_in, fan_out = 1, shape[0]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(np.float64)
    return ModelParams(cfg, arrays)


# ---------------------------------------------------------------------------
# Batched inputs
# ---------------------------------------------------------------------------

@dataclass
class TokenBatch:
    tokens: np.ndarray  # (B, S, W) float64
    ages: np.ndarray  # (B, S) float64, raw years
    positions: np.ndarray  # (B, S) int64
    valid: np.ndarray  # (B, S) bool

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def from_sequences(cls, seqs: Sequence[TokenSequence]) -> "TokenBatch":
        return cls(
            tokens=np.stack([s.tokens for s in seqs]),
            ages=np.stack([s.ages for s in seqs]),
            positions=np.stack([s.positions for s in seqs]),
            valid=np.stack([s.valid for s in seqs]),
        )

    def take(self, idx) -> "TokenBatch":
        return TokenBatch(self.tokens[idx], self.ages[idx], self.positions[idx], self.valid[idx])


@dataclass
class ForwardTrace:
    """Cached activations from one forward pass, enough to replay backward."""

    params: ModelParams
    params_version: int
    batch: TokenBatch
    train_mode: bool
    cache: dict


# ---------------------------------------------------------------------------
# Forward pieces (each returns (output, cache))
# ---------------------------------------------------------------------------

def _dropout_mask(rng: np.random.Generator | None, shape, p: float, train: bool):
    if not train or p == 0.0:
        return None
    if rng is None:
        raise ValueError("train-mode forward needs a dropout rng")
    return (rng.random(shape) >= p) / (1.0 - p)


def _ln_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv_std
    return gain * xhat + bias, (xhat, inv_std)


def _ln_bwd(dy: np.ndarray, gain: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray):
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=axes)
    dbias = dy.sum(axis=axes)
    dxhat = dy * gain
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, s, d = x.shape
    return x.reshape(b, s, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _embed_fwd(params: ModelParams, batch: TokenBatch):
    cfg = params.config
    if batch.positions.max(initial=0) >= cfg.max_positions:
        raise ValueError(
            f"position index {int(batch.positions.max())} out of range (max {cfg.max_positions - 1})"
        )
    age_z = (batch.ages - cfg.age_mean) / cfg.age_std
    h = (
        batch.tokens @ params["input_proj_w"]
        + params["input_proj_b"]
        + params["pos_table"][batch.positions]
        + age_z[..., None] * params["age_slope"]
        + params["age_bias"]
    )
    return h, {"age_z": age_z}


def _embed_bwd(params: ModelParams, batch: TokenBatch, cache: dict, dh: np.ndarray, grads: dict):
    grads["input_proj_w"] += np.einsum("bsw,bsd->wd", batch.tokens, dh)
    grads["input_proj_b"] += dh.sum(axis=(0, 1))
    np.add.at(
        grads["pos_table"],
        batch.positions.reshape(-1),
        dh.reshape(-1, dh.shape[-1]),
    )
    grads["age_slope"] += (cache["age_z"][..., None] * dh).sum(axis=(0, 1))
    grads["age_bias"] += dh.sum(axis=(0, 1))


def _attention_fwd(params: ModelParams, layer: int, h: np.ndarray, valid: np.ndarray):
    cfg = params.config
    p = f"layer{layer}."
    q = h @ params[p + "wq"] + params[p + "bq"]
    k = h @ params[p + "wk"] + params[p + "bk"]
    v = h @ params[p + "wv"] + params[p + "bv"]
    qh, kh, vh = (_split_heads(x, cfg.n_heads) for x in (q, k, v))
    scale = 1.0 / np.sqrt(cfg.head_dim)
    scores = (qh @ kh.swapaxes(-1, -2)) * scale  # (B, H, S, S)
    key_mask = valid[:, None, None, :]  # broadcast over heads and queries
    scores = np.where(key_mask, scores, -np.inf)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    w = e / e.sum(axis=-1, keepdims=True)
    ctx = _merge_heads(w @ vh)
    out = ctx @ params[p + "wo"] + params[p + "bo"]
    return out, {"h": h, "qh": qh, "kh": kh, "vh": vh, "w": w, "ctx": ctx, "scale": scale}


def _attention_bwd(params: ModelParams, layer: int, cache: dict, dout: np.ndarray, grads: dict):
    cfg = params.config
    p = f"layer{layer}."
    h, qh, kh, vh, w, ctx, scale = (
        cache["h"], cache["qh"], cache["kh"], cache["vh"], cache["w"], cache["ctx"], cache["scale"],
    )
    grads[p + "wo"] += np.einsum("bsd,bse->de", ctx, dout)
    grads[p + "bo"] += dout.sum(axis=(0, 1))
    dctx = _split_heads(dout @ params[p + "wo"].T, cfg.n_heads)
    dw = dctx @ vh.swapaxes(-1, -2)
    dvh = w.swapaxes(-1, -2) @ dctx
    # softmax rows: masked keys have w == 0 exactly, so their ds is 0 too
    ds = w * (dw - (dw * w).sum(axis=-1, keepdims=True))
    dqh = (ds @ kh) * scale
    dkh = (ds.swapaxes(-1, -2) @ qh) * scale
    dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
    dh = np.zeros_like(h)
    for nm, dx in (("wq", dq), ("wk", dk), ("wv", dv)):
        grads[p + nm] += np.einsum("bsd,bse->de", h, dx)
        grads[p + "b" + nm[1]] += dx.sum(axis=(0, 1))
        dh += dx @ params[p + nm].T
    return dh


def _layer_fwd(
    params: ModelParams,
    layer: int,
    h_in: np.ndarray,
    valid: np.ndarray,
    train: bool,
    rng: np.random.Generator | None,
):
    cfg = params.config
    p = f"layer{layer}."
    attn, attn_cache = _attention_fwd(params, layer, h_in, valid)
    drop1 = _dropout_mask(rng, attn.shape, cfg.dropout, train)
    r1 = h_in + (attn if drop1 is None else attn * drop1)
    n1, ln1_cache = _ln_fwd(r1, params[p + "ln1_gain"], params[p + "ln1_bias"])
    z1 = n1 @ params[p + "ffn_w1"] + params[p + "ffn_b1"]
    a1 = np.maximum(z1, 0.0)
    f = a1 @ params[p + "ffn_w2"] + params[p + "ffn_b2"]
    drop2 = _dropout_mask(rng, f.shape, cfg.dropout, train)
    r2 = n1 + (f if drop2 is None else f * drop2)
    n2, ln2_cache = _ln_fwd(r2, params[p + "ln2_gain"], params[p + "ln2_bias"])
    cache = {
        "attn": attn_cache, "drop1": drop1, "ln1": ln1_cache,
        "n1": n1, "z1": z1, "a1": a1, "drop2": drop2, "ln2": ln2_cache,
    }
    return n2, cache


def _layer_bwd(params: ModelParams, layer: int, cache: dict, dn2: np.ndarray, grads: dict):
    p = f"layer{layer}."
    xhat2, inv2 = cache["ln2"]
    dr2, dg2, db2 = _ln_bwd(dn2, params[p + "ln2_gain"], xhat2, inv2)
    grads[p + "ln2_gain"] += dg2
    grads[p + "ln2_bias"] += db2
    df = dr2 if cache["drop2"] is None else dr2 * cache["drop2"]
    grads[p + "ffn_w2"] += np.einsum("bsd,bse->de", cache["a1"], df)
    grads[p + "ffn_b2"] += df.sum(axis=(0, 1))
    da1 = df @ params[p + "ffn_w2"].T
    dz1 = da1 * (cache["z1"] > 0)
    grads[p + "ffn_w1"] += np.einsum("bsd,bse->de", cache["n1"], dz1)
    grads[p + "ffn_b1"] += dz1.sum(axis=(0, 1))
    dn1 = dz1 @ params[p + "ffn_w1"].T + dr2  # FFN path + residual
    xhat1, inv1 = cache["ln1"]
    dr1, dg1, db1 = _ln_bwd(dn1, params[p + "ln1_gain"], xhat1, inv1)
    grads[p + "ln1_gain"] += dg1
    grads[p + "ln1_bias"] += db1
    dattn = dr1 if cache["drop1"] is None else dr1 * cache["drop1"]
    dh = _attention_bwd(params, layer, cache["attn"], dattn, grads)
    return dh + dr1  # attention path + residual


def _pool_fwd(h: np.ndarray, valid: np.ndarray):
    counts = valid.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("sequence with zero valid tokens cannot be pooled")
    pooled = (h * valid[..., None]).sum(axis=1) / counts[:, None]
    return pooled, {"counts": counts}


def _pool_bwd(valid: np.ndarray, cache: dict, dpooled: np.ndarray) -> np.ndarray:
    return valid[..., None] * dpooled[:, None, :] / cache["counts"][:, None, None]


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _cls_fwd(params: ModelParams, pooled: np.ndarray, train: bool, rng):
    cfg = params.config
    acts = [pooled]
    drops = []
    x = pooled
    n = len(cfg.classifier)
    for j in range(n):
        x = x @ params[f"cls{j}_w"] + params[f"cls{j}_b"]
        if j < n - 1:  # hidden layer: ReLU then dropout
            pre = x
            x = np.maximum(x, 0.0)
            mask = _dropout_mask(rng, x.shape, cfg.dropout, train)
            if mask is not None:
                x = x * mask
            acts.append(pre)
            drops.append(mask)
            acts.append(x)
    logits = x
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite classifier logits")
    probs = _softmax(logits)
    return probs, {"acts": acts, "drops": drops, "probs": probs}


def _cls_bwd(params: ModelParams, cache: dict, dprobs: np.ndarray, grads: dict) -> np.ndarray:
    cfg = params.config
    probs = cache["probs"]
    dlogits = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    n = len(cfg.classifier)
    dx = dlogits
    for j in reversed(range(n)):
        if j < n - 1:
            # undo dropout and ReLU of hidden layer j
            mask = cache["drops"][j]
            if mask is not None:
                dx = dx * mask
            pre = cache["acts"][1 + 2 * j]
            dx = dx * (pre > 0)
        layer_in = cache["acts"][2 * j] if j > 0 else cache["acts"][0]
        grads[f"cls{j}_w"] += layer_in.T @ dx
        grads[f"cls{j}_b"] += dx.sum(axis=0)
        dx = dx @ params[f"cls{j}_w"].T
    return dx


# ---------------------------------------------------------------------------
# Public forward / backward
# ---------------------------------------------------------------------------

def forward(
    params: ModelParams,
    batch: TokenBatch,
    train_mode: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Batch of token sequences -> (B, 3) class probabilities + trace."""
    cfg = params.config
    if batch.tokens.shape[-1] != cfg.token_width:
        raise ValueError(
            f"token width {batch.tokens.shape[-1]} != configured {cfg.token_width}"
        )
    if not batch.valid.any(axis=1).all():
        raise ValueError("batch contains an all-padding sequence")
    cache: dict = {}
    h, cache["embed"] = _embed_fwd(params, batch)
    cache["layers"] = []
    for l in range(cfg.n_layers):
        h, layer_cache = _layer_fwd(params, l, h, batch.valid, train_mode, dropout_rng)
        cache["layers"].append(layer_cache)
    pooled, cache["pool"] = _pool_fwd(h, batch.valid)
    probs, cache["cls"] = _cls_fwd(params, pooled, train_mode, dropout_rng)
    trace = ForwardTrace(params, params.version, batch, train_mode, cache)
    return probs, trace


def backward(trace: ForwardTrace, dprobs: np.ndarray) -> "OrderedDict[str, np.ndarray]":
    """Exact gradients of a scalar loss given its gradient at the probabilities."""
    params = trace.params
    if params.version != trace.params_version:
        raise RuntimeError("stale trace: parameters were updated after forward; rerun forward")
    grads = params.zeros_like()
    dpooled = _cls_bwd(params, trace.cache["cls"], dprobs, grads)
    dh = _pool_bwd(trace.batch.valid, trace.cache["pool"], dpooled)
    for l in reversed(range(params.config.n_layers)):
        dh = _layer_bwd(params, l, trace.cache["layers"][l], dh, grads)
    _embed_bwd(params, trace.batch, trace.cache["embed"], dh, grads)
    return grads


# thin single-sequence views of the pipeline stages (eval mode)

def embed_sequence(params: ModelParams, seq: TokenSequence) -> np.ndarray:
    h, _ = _embed_fwd(params, TokenBatch.from_sequences([seq]))
    return h[0]


def encoder_layer_forward(
    params: ModelParams, layer: int, hidden: np.ndarray, valid: np.ndarray
) -> np.ndarray:
    if not valid.any():
        raise ValueError("sequence with zero valid tokens")
    out, _ = _layer_fwd(params, layer, hidden[None], valid[None], False, None)
    return out[0]


def sequence_pool(hidden: np.ndarray, valid: np.ndarray) -> np.ndarray:
    pooled, _ = _pool_fwd(hidden[None], valid[None])
    return pooled[0]


def classify(params: ModelParams, pooled: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(pooled)):
        raise ValueError("non-finite pooled vector")
    probs, _ = _cls_fwd(params, pooled[None], False, None)
    return probs[0]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class ModelSnapshot:
    """A trained model plus everything needed to encode its inputs."""

    params: ModelParams
    schema_hash: str
    seed: int
    stats: dict  # imputation statistics as a JSON-ready dict
    extra: dict | None = None


def save_checkpoint(snapshot: ModelSnapshot, prefix) -> None:
    """Write <prefix>.json (manifest) and <prefix>.bin (raw little-endian
    float64 arrays concatenated in declared order)."""
    prefix = Path(prefix)
    params = snapshot.params
    manifest = {
        "format": "longprog-checkpoint-v1",
        "config": params.config.to_json_dict(),
        "schema_hash": snapshot.schema_hash,
        "seed": snapshot.seed,
        "stats": snapshot.stats,
        "extra": snapshot.extra or {},
        "arrays": [
            {"name": k, "shape": list(v.shape)} for k, v in params.items()
        ],
        "dtype": "<f8",
    }
    prefix.parent.mkdir(parents=True, exist_ok=True)
    with open(prefix.with_suffix(".json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        for _, arr in params.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(prefix) -> ModelSnapshot:
    prefix = Path(prefix)
    with open(prefix.with_suffix(".json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "longprog-checkpoint-v1":
        raise ValueError(f"{prefix}: not a recognized checkpoint manifest")
    cfg = ModelConfig.from_json_dict(manifest["config"])
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    raw = Path(prefix.with_suffix(".bin")).read_bytes()
    offset = 0
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)  # writable copy
        offset += n * 8
    expected = {name for name, _ in param_layout(cfg).items()}
    if expected != set(arrays):
        raise ValueError(f"{prefix}: checkpoint arrays do not match the config layout")
    params = ModelParams(cfg, arrays)
    return ModelSnapshot(
        params=params,
        schema_hash=manifest["schema_hash"],
        seed=int(manifest["seed"]),
        stats=manifest["stats"],
        extra=manifest.get("extra") or {},
    )
