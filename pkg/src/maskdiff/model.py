"""Small trainable transformer over the flat token vocabulary.

Pre-norm residual blocks, learned absolute positions, untied output head.
Forward and backward passes are hand-written numpy so training stays
dependency-free and bitwise reproducible; the attention softmax runs on
the compiled kernel when available.

Inference supports two accelerations living in KvCache:
  - prefix reuse: under the blockwise mask, prefix (B1) features cannot
    depend on generated (B2) ids, so per-layer prefix K/V and prefix
    logits are computed once per session and reused exactly;
  - response reuse: B2 K/V and per-layer attention outputs are refreshed
    every `refresh_interval` denoising steps and reused in between, which
    skips the attention stack on non-refresh steps at the cost of bounded
    staleness.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .sequence import AttentionMask

CHECKPOINT_MAGIC = b"MDCK"
CHECKPOINT_VERSION = 1

_LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    max_len: int
    vocab_size: int
    pos_encoding: str = "learned"
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "max_len", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.pos_encoding != "learned":
            raise ValueError(f"unsupported positional encoding {self.pos_encoding!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def desk_config(vocab_size: int, seed: int = 0) -> ModelConfig:
    """Default desk-scale architecture: trains in minutes on one CPU core."""
    return ModelConfig(
        n_layers=4, d_model=128, n_heads=4, d_ff=512, max_len=256,
        vocab_size=vocab_size, seed=seed,
    )


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    n = xhat.shape[-1]
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    dx = (inv / n) * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _gelu(x):
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_backward(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _split_heads(x, n_heads):
    b, l, d = x.shape
    return np.ascontiguousarray(x.reshape(b, l, n_heads, d // n_heads).transpose(0, 2, 1, 3))


def _merge_heads(x):
    b, h, l, hd = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, l, h * hd)


class Model:
    """Parameters plus forward/backward; one instance per training run."""

    def __init__(self, config: ModelConfig, dtype=np.float32, params: dict | None = None):
        if dtype not in (np.float32, np.float64):
            raise ValueError("dtype must be float32 or float64")
        self.config = config
        self.dtype = np.dtype(dtype).type
        self.params = params if params is not None else self._init_params()
        self.param_order = self._declared_order()
        got = list(self.params)
        if got != self.param_order:
            raise ValueError("parameter dict does not match the declared order")

    def _declared_order(self) -> list[str]:
        order = ["tok_emb", "pos_emb"]
        for i in range(self.config.n_layers):
            order += [
                f"l{i}.ln1_g", f"l{i}.ln1_b", f"l{i}.w_qkv", f"l{i}.b_qkv",
                f"l{i}.w_o", f"l{i}.b_o", f"l{i}.ln2_g", f"l{i}.ln2_b",
                f"l{i}.w_ff1", f"l{i}.b_ff1", f"l{i}.w_ff2", f"l{i}.b_ff2",
            ]
        order += ["lnf_g", "lnf_b", "head_w", "head_b"]
        return order

    def _init_params(self) -> dict:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        std = 0.02

        def normal(*shape):
            return rng.normal(0.0, std, size=shape).astype(self.dtype)

        params: dict[str, np.ndarray] = {}
        params["tok_emb"] = normal(cfg.vocab_size, cfg.d_model)
        params["pos_emb"] = normal(cfg.max_len, cfg.d_model)
        for i in range(cfg.n_layers):
            params[f"l{i}.ln1_g"] = np.ones(cfg.d_model, dtype=self.dtype)
            params[f"l{i}.ln1_b"] = np.zeros(cfg.d_model, dtype=self.dtype)
            params[f"l{i}.w_qkv"] = normal(cfg.d_model, 3 * cfg.d_model)
            params[f"l{i}.b_qkv"] = np.zeros(3 * cfg.d_model, dtype=self.dtype)
            params[f"l{i}.w_o"] = normal(cfg.d_model, cfg.d_model)
            params[f"l{i}.b_o"] = np.zeros(cfg.d_model, dtype=self.dtype)
            params[f"l{i}.ln2_g"] = np.ones(cfg.d_model, dtype=self.dtype)
            params[f"l{i}.ln2_b"] = np.zeros(cfg.d_model, dtype=self.dtype)
            params[f"l{i}.w_ff1"] = normal(cfg.d_model, cfg.d_ff)
            params[f"l{i}.b_ff1"] = np.zeros(cfg.d_ff, dtype=self.dtype)
            params[f"l{i}.w_ff2"] = normal(cfg.d_ff, cfg.d_model)
            params[f"l{i}.b_ff2"] = np.zeros(cfg.d_model, dtype=self.dtype)
        params["lnf_g"] = np.ones(cfg.d_model, dtype=self.dtype)
        params["lnf_b"] = np.zeros(cfg.d_model, dtype=self.dtype)
        params["head_w"] = normal(cfg.d_model, cfg.vocab_size)
        params["head_b"] = np.zeros(cfg.vocab_size, dtype=self.dtype)
        return params

    def n_params(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    # ---- plain forward/backward -------------------------------------------------

    def _check_ids(self, ids) -> tuple[np.ndarray, bool]:
        ids = np.asarray(ids, dtype=np.int64)
        squeezed = ids.ndim == 1
        if squeezed:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise ValueError(f"ids must be (L,) or (B, L), got shape {ids.shape}")
        if ids.shape[1] > self.config.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max {self.config.max_len}")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError("token id outside the vocabulary")
        return ids, squeezed

    def _embed(self, ids: np.ndarray, start: int = 0) -> np.ndarray:
        p = self.params
        return p["tok_emb"][ids] + p["pos_emb"][start : start + ids.shape[1]][None, :, :]

    def _attention(self, x, mask_matrix, layer, trace=None):
        p = self.params
        cfg = self.config
        h_ln, ln1_cache = _layer_norm(x, p[f"l{layer}.ln1_g"], p[f"l{layer}.ln1_b"])
        qkv = h_ln @ p[f"l{layer}.w_qkv"] + p[f"l{layer}.b_qkv"]
        q, k, v = np.split(qkv, 3, axis=-1)
        q, k, v = (_split_heads(a, cfg.n_heads) for a in (q, k, v))
        scale = self.dtype(1.0 / math.sqrt(cfg.head_dim))
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        probs = kernels.masked_softmax(scores, mask_matrix)
        ctx = _merge_heads(probs @ v)
        attn_out = ctx @ p[f"l{layer}.w_o"] + p[f"l{layer}.b_o"]
        if trace is not None:
            trace.append(("attn", layer, (x, h_ln, ln1_cache, q, k, v, probs, ctx, scale)))
        return attn_out, (k, v)

    def _ffn(self, x, layer, trace=None):
        p = self.params
        h_ln, ln2_cache = _layer_norm(x, p[f"l{layer}.ln2_g"], p[f"l{layer}.ln2_b"])
        h1 = h_ln @ p[f"l{layer}.w_ff1"] + p[f"l{layer}.b_ff1"]
        act, gelu_cache = _gelu(h1)
        out = act @ p[f"l{layer}.w_ff2"] + p[f"l{layer}.b_ff2"]
        if trace is not None:
            trace.append(("ffn", layer, (x, h_ln, ln2_cache, gelu_cache, act)))
        return out

    def hidden_states(self, ids, mask: AttentionMask, want_trace: bool = False):
        """Run the trunk (everything before the head); trace enables backward."""
        ids, squeezed = self._check_ids(ids)
        if mask.length != ids.shape[1]:
            raise ValueError(f"mask is {mask.length} wide, ids are {ids.shape[1]} long")
        mask_matrix = mask.matrix
        trace: list | None = [] if want_trace else None
        x = self._embed(ids)
        for layer in range(self.config.n_layers):
            attn_out, _ = self._attention(x, mask_matrix, layer, trace)
            x = x + attn_out
            x = x + self._ffn(x, layer, trace)
        h, lnf_cache = _layer_norm(x, self.params["lnf_g"], self.params["lnf_b"])
        if want_trace:
            trace.append(("final", None, (ids, lnf_cache)))
        return (h if not squeezed else h[0]), trace

    def logits_from_hidden(self, h: np.ndarray) -> np.ndarray:
        return h @ self.params["head_w"] + self.params["head_b"]

    def forward(self, ids, mask: AttentionMask, cache: "KvCache | None" = None) -> np.ndarray:
        """Logits [.. x L x vocab]; pure function of (ids, mask, params) without cache."""
        if cache is not None:
            return cache.forward(self, ids, mask)
        h, _ = self.hidden_states(ids, mask)
        return self.logits_from_hidden(h)

    def backward_from_hidden(self, trace: list, dh: np.ndarray) -> dict:
        """Gradients of every parameter given d(loss)/d(final hidden states).

        dh must include the head backward already (see loss_and_grad); this
        walks the trunk in reverse.
        """
        p = self.params
        cfg = self.config
        grads = {name: np.zeros_like(arr) for name, arr in p.items()}
        kind, _, payload = trace[-1]
        assert kind == "final"
        ids, lnf_cache = payload
        dx, dg, db = _layer_norm_backward(dh, lnf_cache)
        grads["lnf_g"] += dg
        grads["lnf_b"] += db
        for item in reversed(trace[:-1]):
            kind, layer, payload = item
            if kind == "ffn":
                x_in, h_ln, ln2_cache, gelu_cache, act = payload
                d_out = dx  # residual: dx flows to both branch and input
                d_act = d_out @ p[f"l{layer}.w_ff2"].T
                grads[f"l{layer}.w_ff2"] += act.reshape(-1, cfg.d_ff).T @ d_out.reshape(-1, cfg.d_model)
                grads[f"l{layer}.b_ff2"] += d_out.sum(axis=(0, 1))
                d_h1 = _gelu_backward(d_act, gelu_cache)
                d_hln = d_h1 @ p[f"l{layer}.w_ff1"].T
                grads[f"l{layer}.w_ff1"] += h_ln.reshape(-1, cfg.d_model).T @ d_h1.reshape(-1, cfg.d_ff)
                grads[f"l{layer}.b_ff1"] += d_h1.sum(axis=(0, 1))
                d_x, dg, db = _layer_norm_backward(d_hln, ln2_cache)
                grads[f"l{layer}.ln2_g"] += dg
                grads[f"l{layer}.ln2_b"] += db
                dx = dx + d_x
            else:
                x_in, h_ln, ln1_cache, q, k, v, probs, ctx, scale = payload
                d_attn = dx
                d_ctx = d_attn @ p[f"l{layer}.w_o"].T
                grads[f"l{layer}.w_o"] += ctx.reshape(-1, cfg.d_model).T @ d_attn.reshape(-1, cfg.d_model)
                grads[f"l{layer}.b_o"] += d_attn.sum(axis=(0, 1))
                d_ctx_h = _split_heads(d_ctx, cfg.n_heads)
                d_probs = d_ctx_h @ v.transpose(0, 1, 3, 2)
                d_v = probs.transpose(0, 1, 3, 2) @ d_ctx_h
                d_scores = kernels.softmax_backward(probs, d_probs)
                d_q = (d_scores @ k) * scale
                d_k = (d_scores.transpose(0, 1, 3, 2) @ q) * scale
                d_qkv = np.concatenate(
                    [_merge_heads(d_q), _merge_heads(d_k), _merge_heads(d_v)], axis=-1
                )
                d_hln = d_qkv @ p[f"l{layer}.w_qkv"].T
                grads[f"l{layer}.w_qkv"] += h_ln.reshape(-1, cfg.d_model).T @ d_qkv.reshape(-1, 3 * cfg.d_model)
                grads[f"l{layer}.b_qkv"] += d_qkv.sum(axis=(0, 1))
                d_x, dg, db = _layer_norm_backward(d_hln, ln1_cache)
                grads[f"l{layer}.ln1_g"] += dg
                grads[f"l{layer}.ln1_b"] += db
                dx = dx + d_x
        # dx is now the gradient at the embedding sum.
        np.add.at(grads["tok_emb"], ids, dx)
        grads["pos_emb"][: dx.shape[1]] += dx.sum(axis=0)
        return grads

    def loss_and_grad(self, ids, mask: AttentionMask, loss_fn) -> tuple[float, dict, dict]:
        """One forward/backward pass.

        loss_fn(model, hidden) -> (loss, dlogits_rows, rows, extras) with rows
        a (batch_indices, position_indices) pair; the loss applies the head
        only on those rows, which skips most of the head GEMM during training
        since untouched rows contribute zero gradient.
        """
        ids, _ = self._check_ids(ids)
        h, trace = self.hidden_states(ids, mask, want_trace=True)
        loss, dlogits_rows, rows, extras = loss_fn(self, h)
        b_idx, p_idx = rows
        dh = np.zeros_like(h)
        head_w = self.params["head_w"]
        h_rows = h[b_idx, p_idx]
        dh[b_idx, p_idx] = dlogits_rows @ head_w.T
        grads = self.backward_from_hidden(trace, dh)
        grads["head_w"] += h_rows.T @ dlogits_rows
        grads["head_b"] += dlogits_rows.sum(axis=0)
        return loss, grads, extras

    # ---- checkpointing ------------------------------------------------------------

    def save(self, path) -> None:
        cfg = self.config
        config_text = (
            f"n_layers={cfg.n_layers}\nd_model={cfg.d_model}\nn_heads={cfg.n_heads}\n"
            f"d_ff={cfg.d_ff}\nmax_len={cfg.max_len}\nvocab_size={cfg.vocab_size}\n"
            f"pos_encoding={cfg.pos_encoding}\nseed={cfg.seed}\n"
        ).encode("ascii")
        blob = bytearray()
        blob += CHECKPOINT_MAGIC
        blob += struct.pack("<II", CHECKPOINT_VERSION, len(config_text))
        blob += config_text
        for name in self.param_order:
            blob += np.ascontiguousarray(self.params[name], dtype="<f4").tobytes()
        digest = hashlib.sha256(bytes(blob)).digest()
        with open(path, "wb") as fh:
            fh.write(bytes(blob) + digest)


def load_model(path, expected_vocab: int | None = None) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    if len(blob) < 12:
        raise ValueError("checkpoint truncated")
    version, config_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    if len(blob) < 12 + config_len + 32:
        raise ValueError("checkpoint truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError("checkpoint checksum mismatch (file corrupt or truncated)")
    fields = dict(
        ln.split("=", 1) for ln in blob[12 : 12 + config_len].decode("ascii").splitlines()
    )
    config = ModelConfig(
        n_layers=int(fields["n_layers"]),
        d_model=int(fields["d_model"]),
        n_heads=int(fields["n_heads"]),
        d_ff=int(fields["d_ff"]),
        max_len=int(fields["max_len"]),
        vocab_size=int(fields["vocab_size"]),
        pos_encoding=fields["pos_encoding"],
        seed=int(fields["seed"]),
    )
    if expected_vocab is not None and config.vocab_size != expected_vocab:
        raise ValueError(
            f"config mismatch: checkpoint vocab_size={config.vocab_size}, "
            f"active layout needs {expected_vocab}"
        )
    probe = Model(config, dtype=np.float32)
    offset = 12 + config_len
    params = {}
    for name in probe.param_order:
        shape = probe.params[name].shape
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=offset)
        params[name] = arr.reshape(shape).astype(np.float32)
        offset += 4 * count
    if offset != len(body):
        raise ValueError("checkpoint has trailing bytes after parameters")
    return Model(config, dtype=np.float32, params=params)


# ---- optimizer ---------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam with fixed defaults; state keyed like the parameter dict."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        if self.lr == 0.0:
            return
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name].astype(np.float64)
            m = self.m.get(name)
            if m is None:
                m = np.zeros(p.shape, dtype=np.float64)
                self.m[name] = m
                self.v[name] = np.zeros(p.shape, dtype=np.float64)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / b1t) * m / (np.sqrt(v / b2t) + self.eps)
            p -= update.astype(p.dtype)


# ---- inference cache ---------------------------------------------------------------


class KvCache:
    """Per-session inference cache; never share across sessions.

    prefix_len positions are computed once (exact under the blockwise mask);
    response features refresh every refresh_interval forward calls and are
    reused in between, so no cached entry is ever older than R steps.
    """

    def __init__(self, prefix_len: int, refresh_interval: int = 4):
        if prefix_len < 0:
            raise ValueError("prefix_len must be >= 0")
        if refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")
        self.prefix_len = prefix_len
        self.refresh_interval = refresh_interval
        self.step = 0
        self.prefix_ready = False
        self.prefix_ids: np.ndarray | None = None
        self.k_prefix: list[np.ndarray] = []
        self.v_prefix: list[np.ndarray] = []
        self.prefix_logits: np.ndarray | None = None
        self.k_resp: list[np.ndarray] = []
        self.v_resp: list[np.ndarray] = []
        self.attn_out_resp: list[np.ndarray] = []
        self.last_refresh_step: int | None = None

    def _prefix_pass(self, model: Model, prefix_ids: np.ndarray) -> None:
        p = model.params
        cfg = model.config
        b = self.prefix_len
        mask = np.ones((b, b), dtype=bool)  # B1 is fully bidirectional within itself
        x = model._embed(prefix_ids)
        for layer in range(cfg.n_layers):
            h_ln, _ = _layer_norm(x, p[f"l{layer}.ln1_g"], p[f"l{layer}.ln1_b"])
            qkv = h_ln @ p[f"l{layer}.w_qkv"] + p[f"l{layer}.b_qkv"]
            q, k, v = (_split_heads(a, cfg.n_heads) for a in np.split(qkv, 3, axis=-1))
            self.k_prefix.append(k)
            self.v_prefix.append(v)
            scale = model.dtype(1.0 / math.sqrt(cfg.head_dim))
            probs = kernels.masked_softmax((q @ k.transpose(0, 1, 3, 2)) * scale, mask)
            x = x + _merge_heads(probs @ v) @ p[f"l{layer}.w_o"] + p[f"l{layer}.b_o"]
            x = x + model._ffn(x, layer)
        h, _ = _layer_norm(x, p["lnf_g"], p["lnf_b"])
        self.prefix_logits = model.logits_from_hidden(h)
        self.prefix_ids = prefix_ids.copy()
        self.prefix_ready = True

    def forward(self, model: Model, ids, mask: AttentionMask) -> np.ndarray:
        ids, squeezed = model._check_ids(ids)
        if mask.length != ids.shape[1]:
            raise ValueError(f"mask is {mask.length} wide, ids are {ids.shape[1]} long")
        if mask.boundary != self.prefix_len:
            raise ValueError(
                f"cache prefix length {self.prefix_len} does not match mask boundary {mask.boundary}"
            )
        b = self.prefix_len
        if not np.array_equal(mask.matrix, _block_matrix_cached(mask.length, b)):
            raise ValueError("cached forward requires the blockwise mask for its boundary")
        if mask.length <= b:
            raise ValueError("cached forward needs at least one response position")
        p = model.params
        cfg = model.config
        if b > 0:
            if not self.prefix_ready:
                self._prefix_pass(model, ids[:, :b])
            elif ids.shape[0] != self.prefix_ids.shape[0] or not np.array_equal(
                ids[:, :b], self.prefix_ids
            ):
                raise ValueError("prefix ids changed mid-session; create a new cache")
        elif not self.prefix_ready:
            self.prefix_ids = ids[:, :0].copy()
            self.prefix_ready = True

        refresh = self.step % self.refresh_interval == 0
        resp = ids[:, b:]
        x = model._embed(resp, start=b)
        new_k: list[np.ndarray] = []
        new_v: list[np.ndarray] = []
        new_attn_out: list[np.ndarray] = []
        scale = model.dtype(1.0 / math.sqrt(cfg.head_dim))
        full_row = np.ones((resp.shape[1], b + resp.shape[1]), dtype=bool)
        for layer in range(cfg.n_layers):
            if refresh:
                h_ln, _ = _layer_norm(x, p[f"l{layer}.ln1_g"], p[f"l{layer}.ln1_b"])
                qkv = h_ln @ p[f"l{layer}.w_qkv"] + p[f"l{layer}.b_qkv"]
                q, k, v = (_split_heads(a, cfg.n_heads) for a in np.split(qkv, 3, axis=-1))
                if b > 0:
                    k_all = np.concatenate([self.k_prefix[layer], k], axis=2)
                    v_all = np.concatenate([self.v_prefix[layer], v], axis=2)
                else:
                    k_all, v_all = k, v
                probs = kernels.masked_softmax((q @ k_all.transpose(0, 1, 3, 2)) * scale, full_row)
                attn_out = _merge_heads(probs @ v_all) @ p[f"l{layer}.w_o"] + p[f"l{layer}.b_o"]
                new_k.append(k)
                new_v.append(v)
                new_attn_out.append(attn_out)
            else:
                attn_out = self.attn_out_resp[layer]
                if attn_out.shape[0] != x.shape[0] or attn_out.shape[1] != x.shape[1]:
                    raise ValueError("batch or length changed mid-session; create a new cache")
            x = x + attn_out
            x = x + model._ffn(x, layer)
        if refresh:
            self.k_resp, self.v_resp = new_k, new_v
            self.attn_out_resp = new_attn_out
            self.last_refresh_step = self.step
        h, _ = _layer_norm(x, p["lnf_g"], p["lnf_b"])
        resp_logits = model.logits_from_hidden(h)
        self.step += 1
        if b > 0:
            logits = np.concatenate([self.prefix_logits, resp_logits], axis=1)
        else:
            logits = resp_logits
        return logits[0] if squeezed else logits


_BLOCK_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _block_matrix_cached(length: int, boundary: int) -> np.ndarray:
    key = (length, boundary)
    if key not in _BLOCK_CACHE:
        block = (np.arange(length) >= boundary).astype(np.int8)
        _BLOCK_CACHE[key] = block[None, :] <= block[:, None]
    return _BLOCK_CACHE[key]
