"""Minimal differentiable encoder-decoder producing CTC and decoder streams.

Architecture (all widths from ``ModelConfig``):

  encoder   E blocks; block b maps frame t to
            ``tanh(W_b @ concat(x[t-w .. t+w]) + b_b)`` with zero
            padding at the edges, hidden width h, no subsampling
  ctc head  affine h -> V+1 followed by log-softmax; tokens occupy
            columns 0..V-1 and the blank the last column
  decoder   teacher-forced single-step dot-product attention with input
            feeding and sinusoidal position features. The query at
            output position p is an affine map of [previous symbol's
            embedding ; previous attention context ; pos(p)]; the keys
            are [encoder state ; pos(frame index)]; the context is the
            attention-weighted sum of the encoder states (positions
            excluded); the logits are an affine map of
            [context ; embedding] over V+2 symbols (tokens, then start,
            then end).

            Both decoder extensions are load-bearing: a query built from
            the previous token's embedding alone cannot tell two
            occurrences of the same token apart, so decoding degenerates
            into loops, and without any positional signal on either side
            attention has no way to bootstrap the roughly linear
            output-to-frame alignment these sequences have.

Everything is float64 and pure: forward/backward are functions of
(params, utterance) only. Gradients are hand-written vector-Jacobian
products through this fixed graph; the test suite validates every loss
combination against central finite differences.

Heads can be shared across tasks or owned by one task. When a store
holds entries named ``task<i>/...`` for the requested task they are
used; otherwise the shared head entries are.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import losses
from .errors import ConfigError, MissingHead, StructureMismatch
from .params import ParamStore, SHARED, PartitionTag, task_entry_name
from .rng import generator


@dataclass(frozen=True)
class ModelConfig:
    d_i: int = 8  # input feature dimension
    h: int = 32  # hidden width
    E: int = 2  # encoder block count
    w: int = 1  # temporal context radius in frames
    V: int = 20  # task vocabulary size
    sos_id: int = -1  # resolved to V,  V+1, V+2 when negative
    eos_id: int = -1
    blank_id: int = -1
    init_scale: float = 0.08

    def __post_init__(self):
        for field in ("d_i", "h", "E", "V"):
            if getattr(self, field) < 1:
                raise ConfigError(f"model.{field} must be >= 1")
        if self.w < 0:
            raise ConfigError("model.w must be >= 0")
        if self.sos_id < 0:
            object.__setattr__(self, "sos_id", self.V)
        if self.eos_id < 0:
            object.__setattr__(self, "eos_id", self.V + 1)
        if self.blank_id < 0:
            object.__setattr__(self, "blank_id", self.V + 2)
        ids = (self.sos_id, self.eos_id, self.blank_id)
        if len(set(ids)) != 3 or any(0 <= i < self.V for i in ids):
            raise ConfigError(f"reserved ids must be distinct and outside [0, V): {ids}")

    # column layout of the two output matrices
    @property
    def ctc_width(self) -> int:
        return self.V + 1  # tokens + blank (last column)

    @property
    def dec_width(self) -> int:
        return self.V + 2  # tokens + sos + eos

    @property
    def sos_col(self) -> int:
        return self.V

    @property
    def eos_col(self) -> int:
        return self.V + 1

    def as_dict(self) -> dict:
        return asdict(self)


def config_hash(cfg: ModelConfig) -> str:
    """Stable short hash of a model configuration (checkpoint manifests)."""
    text = json.dumps(cfg.as_dict(), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Utterance:
    """Feature matrix (L, d_i) and target token sequence (W,) for one task."""

    features: np.ndarray
    target: np.ndarray
    task_id: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.target, dtype=np.int64).ravel()
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise StructureMismatch(f"features must be (L, d_i) with L >= 1, got {feats.shape}")
        if len(y) < 1:
            raise StructureMismatch("target must contain at least one token")
        if feats.shape[0] < len(y):
            raise StructureMismatch(
                f"L={feats.shape[0]} frames cannot carry W={len(y)} tokens"
            )
        feats.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "target", y)


@dataclass
class ForwardOut:
    """Row-normalized log-probability matrices plus cached activations."""

    ctc_logprobs: np.ndarray  # (L, V+1)
    dec_logprobs: np.ndarray  # (W+1, V+2)
    cache: dict | None = None


# sinusoidal index features shared by attention queries and keys
_POS_FREQS = 1.0 / 2.0 ** np.arange(4)
POS_DIM = 2 * len(_POS_FREQS)


def _pos_feats(n: int) -> np.ndarray:
    phase = np.arange(n)[:, None] * _POS_FREQS[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


def encoder_spec(cfg: ModelConfig):
    spec = []
    d_in = cfg.d_i
    for b in range(cfg.E):
        spec.append((f"enc{b}_w", (cfg.h, (2 * cfg.w + 1) * d_in)))
        spec.append((f"enc{b}_b", (cfg.h,)))
        d_in = cfg.h
    return spec


def head_spec(cfg: ModelConfig):
    return [
        ("ctc_w", (cfg.ctc_width, cfg.h)),
        ("ctc_b", (cfg.ctc_width,)),
        ("emb", (cfg.dec_width, cfg.h)),
        ("dec_wq", (cfg.h + POS_DIM, 2 * cfg.h + POS_DIM)),
        ("dec_bq", (cfg.h + POS_DIM,)),
        ("dec_wo", (cfg.dec_width, 2 * cfg.h)),
        ("dec_bo", (cfg.dec_width,)),
    ]


def init_params(cfg: ModelConfig, seed, shared_head: bool = True) -> ParamStore:
    """Deterministic uniform [-init_scale, init_scale] initialization.

    Encoder entries are always shared. With ``shared_head`` the single
    head is shared too (one vocabulary for every task); without it the
    store has no heads and tasks add their own via ``init_task_head``.
    """
    rng = generator("model-init", seed)
    entries = []
    for name, shape in encoder_spec(cfg):
        entries.append((name, rng.uniform(-cfg.init_scale, cfg.init_scale, shape), SHARED))
    if shared_head:
        for name, shape in head_spec(cfg):
            entries.append((name, rng.uniform(-cfg.init_scale, cfg.init_scale, shape), SHARED))
    return ParamStore(entries)


def _head_prefix(params: ParamStore, task_id) -> str:
    if task_id is not None and task_entry_name(task_id, "ctc_w") in params:
        return f"task{task_id}/"
    if "ctc_w" in params:
        return ""
    raise MissingHead(f"no head parameters for task {task_id} and no shared head")


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _softmax(z):
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


def _window(x, w):
    """Stack each frame with its w neighbours on both sides (zero padded)."""
    if w == 0:
        return x
    L, d = x.shape
    xp = np.zeros((L + 2 * w, d))
    xp[w : w + L] = x
    return np.concatenate([xp[i : i + L] for i in range(2 * w + 1)], axis=1)


def _unwindow(dwin, w, d):
    L = dwin.shape[0]
    if w == 0:
        return dwin
    dxp = np.zeros((L + 2 * w, d))
    for i in range(2 * w + 1):
        dxp[i : i + L] += dwin[:, i * d : (i + 1) * d]
    return dxp[w : w + L]


def _check_store(params: ParamStore, cfg: ModelConfig, prefix: str):
    enc0 = params.values("enc0_w")
    if enc0.shape != (cfg.h, (2 * cfg.w + 1) * cfg.d_i):
        raise StructureMismatch(
            f"enc0_w shape {enc0.shape} does not match config "
            f"(h={cfg.h}, w={cfg.w}, d_i={cfg.d_i})"
        )
    cw = params.values(prefix + "ctc_w")
    if cw.shape != (cfg.ctc_width, cfg.h):
        raise StructureMismatch(f"{prefix}ctc_w shape {cw.shape} does not match config")


def _encode(params: ParamStore, cfg: ModelConfig, feats: np.ndarray):
    acts = [feats]
    wins = []
    for b in range(cfg.E):
        win = _window(acts[-1], cfg.w)
        z = win @ params.values(f"enc{b}_w").T + params.values(f"enc{b}_b")
        wins.append(win)
        acts.append(np.tanh(z))
    return acts, wins


def forward(params: ParamStore, cfg: ModelConfig, utt: Utterance, task_id=None,
            need_cache: bool = False) -> ForwardOut:
    """Teacher-forced forward pass producing both output streams.

    Decoder position p consumes the embedding of the previous reference
    symbol (start symbol at p=0) and predicts y_1 .. y_W then eos.
    """
    if task_id is None:
        task_id = utt.task_id
    prefix = _head_prefix(params, task_id)
    _check_store(params, cfg, prefix)
    feats = utt.features
    if feats.shape[1] != cfg.d_i:
        raise StructureMismatch(f"features have d={feats.shape[1]}, config d_i={cfg.d_i}")
    if np.any(utt.target >= cfg.V):
        raise StructureMismatch("target token outside [0, V)")

    acts, wins = _encode(params, cfg, feats)
    enc = acts[-1]

    zc = enc @ params.values(prefix + "ctc_w").T + params.values(prefix + "ctc_b")
    ctc_lp = _log_softmax(zc)

    g = np.concatenate(([cfg.sos_col], utt.target))  # decoder input columns
    emb = params.values(prefix + "emb")[g]
    wq = params.values(prefix + "dec_wq")
    bq = params.values(prefix + "dec_bq")
    P, h = emb.shape
    L = enc.shape[0]
    keys = np.concatenate([enc, _pos_feats(L)], axis=1)
    pos = _pos_feats(P)
    qin = np.empty((P, 2 * h + POS_DIM))
    q = np.empty((P, h + POS_DIM))
    attn = np.empty((P, L))
    ctx = np.empty((P, h))
    c_prev = np.zeros(h)
    for p in range(P):
        qin[p, :h] = emb[p]
        qin[p, h : 2 * h] = c_prev
        qin[p, 2 * h :] = pos[p]
        q[p] = wq @ qin[p] + bq
        s = keys @ q[p]
        s -= s.max()
        a = np.exp(s)
        a /= a.sum()
        attn[p] = a
        ctx[p] = a @ enc
        c_prev = ctx[p]
    zcat = np.concatenate([ctx, emb], axis=1)
    logits = zcat @ params.values(prefix + "dec_wo").T + params.values(prefix + "dec_bo")
    dec_lp = _log_softmax(logits)

    cache = None
    if need_cache:
        cache = {
            "prefix": prefix, "acts": acts, "wins": wins, "enc": enc,
            "ctc_lp": ctc_lp, "g": g, "emb": emb, "qin": qin, "q": q,
            "keys": keys, "attn": attn, "ctx": ctx, "zcat": zcat,
            "dec_lp": dec_lp,
        }
    return ForwardOut(ctc_lp, dec_lp, cache)


def _backward_from_outputs(params: ParamStore, cfg: ModelConfig, cache: dict,
                           d_ctc_lp, d_dec_lp) -> dict:
    """VJP from upstream gradients on the two log-prob matrices to params."""
    grads = {e.name: np.zeros(e.shape) for e in params}
    prefix = cache["prefix"]
    enc = cache["enc"]
    d_enc = np.zeros_like(enc)

    if d_dec_lp is not None:
        attn, q, qin, emb, zcat = (cache["attn"], cache["q"], cache["qin"],
                                   cache["emb"], cache["zcat"])
        # log-softmax: dz = dy - softmax * rowsum(dy)
        dlogits = d_dec_lp - np.exp(cache["dec_lp"]) * d_dec_lp.sum(axis=1, keepdims=True)
        grads[prefix + "dec_wo"] += dlogits.T @ zcat
        grads[prefix + "dec_bo"] += dlogits.sum(axis=0)
        dzcat = dlogits @ params.values(prefix + "dec_wo")
        h = cfg.h
        keys = cache["keys"]
        demb = dzcat[:, h:].copy()
        wq = params.values(prefix + "dec_wq")
        dwq = grads[prefix + "dec_wq"]
        dbq = grads[prefix + "dec_bq"]
        dc_carry = np.zeros(h)  # gradient reaching ctx[p] through step p+1's query
        for p in range(emb.shape[0] - 1, -1, -1):
            dc = dzcat[p, :h] + dc_carry
            a = attn[p]
            da = enc @ dc  # ctx = a @ enc
            d_enc += np.outer(a, dc)
            ds = a * (da - float(da @ a))  # softmax vjp
            dq_p = keys.T @ ds  # s = keys @ q
            d_enc += np.outer(ds, q[p][:h])  # position part of the keys is constant
            dwq += np.outer(dq_p, qin[p])
            dbq += dq_p
            dqin = wq.T @ dq_p
            demb[p] += dqin[:h]
            dc_carry = dqin[h : 2 * h]  # context fed into this query came from step p-1
        np.add.at(grads[prefix + "emb"], cache["g"], demb)

    if d_ctc_lp is not None:
        dzc = d_ctc_lp - np.exp(cache["ctc_lp"]) * d_ctc_lp.sum(axis=1, keepdims=True)
        grads[prefix + "ctc_w"] += dzc.T @ enc
        grads[prefix + "ctc_b"] += dzc.sum(axis=0)
        d_enc += dzc @ params.values(prefix + "ctc_w")

    acts, wins = cache["acts"], cache["wins"]
    for b in range(cfg.E - 1, -1, -1):
        dz = d_enc * (1.0 - acts[b + 1] ** 2)
        grads[f"enc{b}_w"] += dz.T @ wins[b]
        grads[f"enc{b}_b"] += dz.sum(axis=0)
        if b > 0:
            d_enc = _unwindow(dz @ params.values(f"enc{b}_w"), cfg.w, acts[b].shape[1])
    return grads


def loss_and_grad(params: ParamStore, cfg: ModelConfig, utt: Utterance,
                  loss_cfg: losses.LossConfig, teacher: ForwardOut | None = None,
                  lam: float = 0.0, include_hybrid: bool = True,
                  freeze_shared: bool = False, task_id=None):
    """Total loss and its gradient as a plain name->array dict.

    The objective is assembled from the hybrid term (alpha-blended CTC
    and CE on the utterance's own target) and, when ``lam > 0``, the
    distillation term against fixed ``teacher`` outputs. A term with
    zero weight is skipped entirely, so its gradient contribution is
    exactly absent. ``freeze_shared`` zeroes all shared entries'
    gradients (frozen-encoder mode); heads of other tasks are untouched
    by the forward pass and therefore always receive zero gradient.
    """
    out = forward(params, cfg, utt, task_id=task_id, need_cache=True)
    alpha = loss_cfg.alpha
    total = 0.0
    d_ctc = None
    d_dec = None
    if include_hybrid:
        if alpha > 0.0:
            c, gc = losses.ctc_loss(out.ctc_logprobs, utt.target)
            total += alpha * c
            d_ctc = alpha * gc
        if alpha < 1.0:
            ce, gce = losses.ce_loss_and_grad(out.dec_logprobs, utt.target)
            total += (1.0 - alpha) * ce
            d_dec = (1.0 - alpha) * gce
    if lam > 0.0:
        if teacher is None:
            raise ValueError("distillation weight lam > 0 requires teacher outputs")
        total += lam * losses.kd_loss(teacher, out, alpha, loss_cfg.kd_reduction)
        kd_ctc, kd_dec = losses.kd_teacher_grads(teacher, alpha, loss_cfg.kd_reduction)
        if kd_ctc is not None:
            d_ctc = lam * kd_ctc if d_ctc is None else d_ctc + lam * kd_ctc
        if kd_dec is not None:
            d_dec = lam * kd_dec if d_dec is None else d_dec + lam * kd_dec
    grads = _backward_from_outputs(params, cfg, out.cache, d_ctc, d_dec)
    if freeze_shared:
        for e in params:
            if e.tag.is_shared:
                grads[e.name][...] = 0.0
    return float(total), grads


def backward(params: ParamStore, cfg: ModelConfig, utt: Utterance,
             loss_cfg: losses.LossConfig, teacher: ForwardOut | None = None,
             lam: float = 0.0, include_hybrid: bool = True,
             freeze_shared: bool = False, task_id=None) -> ParamStore:
    """Gradient of the selected objective as a ParamStore mirroring ``params``."""
    _, grads = loss_and_grad(params, cfg, utt, loss_cfg, teacher=teacher, lam=lam,
                             include_hybrid=include_hybrid,
                             freeze_shared=freeze_shared, task_id=task_id)
    return ParamStore((e.name, grads[e.name], e.tag) for e in params)


def greedy_decode(params: ParamStore, cfg: ModelConfig, features, task_id,
                  max_len: int) -> np.ndarray:
    """Autoregressive argmax decoding from the start symbol.

    Stops at the end symbol or after ``max_len`` tokens; argmax ties
    resolve to the lowest column index. Emitted columns map to token
    ids, with the reserved columns mapping to ``sos_id`` / ``eos_id``.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    prefix = _head_prefix(params, task_id)
    _check_store(params, cfg, prefix)
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != cfg.d_i:
        raise StructureMismatch(f"features have shape {feats.shape}, config d_i={cfg.d_i}")
    acts, _ = _encode(params, cfg, feats)
    enc = acts[-1]
    emb_table = params.values(prefix + "emb")
    wq = params.values(prefix + "dec_wq")
    bq = params.values(prefix + "dec_bq")
    wo = params.values(prefix + "dec_wo")
    bo = params.values(prefix + "dec_bo")

    keys = np.concatenate([enc, _pos_feats(enc.shape[0])], axis=1)
    pos = _pos_feats(max_len)
    cur = cfg.sos_col
    ctx = np.zeros(cfg.h)
    out = []
    for p in range(max_len):
        e = emb_table[cur]
        q = wq @ np.concatenate([e, ctx, pos[p]]) + bq
        s = keys @ q
        s -= s.max()
        a = np.exp(s)
        a /= a.sum()
        ctx = a @ enc
        logits = wo @ np.concatenate([ctx, e]) + bo
        col = int(np.argmax(logits))
        if col == cfg.eos_col:
            break
        if col < cfg.V:
            out.append(col)
        else:
            out.append(cfg.sos_id)
        cur = col
    return np.asarray(out, dtype=np.int64)
