"""Pre-norm transformer encoder whose attention heads are scaled by gates."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import Sentence, SubtokenMap, Vocab, encode_sentence
from .tensor import Tensor

NEG_INF = -1e9


@dataclass
class EncoderConfig:
    layers: int = 4
    heads: int = 8
    d_model: int = 128
    ffn: int = 256
    dropout: float = 0.1
    word_dropout: float = 0.2
    max_len: int = 64
    vocab_size: int = 0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        for name in ("dropout", "word_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0,1]")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    sentences: list[Sentence]
    ids: np.ndarray            # (B, T) int
    key_mask: np.ndarray       # (B, T) bool, True = real position
    maps: list[SubtokenMap]
    pool: np.ndarray           # (B, W, T) subtoken → word averaging weights
    word_mask: np.ndarray      # (B, W) bool
    lengths: np.ndarray        # words per sentence

    def __len__(self):
        return len(self.sentences)


def make_batch(sentences: Sequence[Sentence], vocab: Vocab, max_len: int) -> Batch:
    encoded = [encode_sentence(s.tokens, vocab) for s in sentences]
    for (ids, _), s in zip(encoded, sentences):
        if len(ids) > max_len:
            raise ValueError(f"sequence of {len(ids)} subtokens exceeds max length {max_len}: "
                             f"{' '.join(s.tokens)!r}")
    B = len(sentences)
    Tn = max(len(ids) for ids, _ in encoded)
    W = max(len(s) for s in sentences)
    ids_arr = np.full((B, Tn), vocab.pad, dtype=np.int64)
    key_mask = np.zeros((B, Tn), dtype=bool)
    pool = np.zeros((B, W, Tn))
    word_mask = np.zeros((B, W), dtype=bool)
    for b, (ids, smap) in enumerate(encoded):
        ids_arr[b, :len(ids)] = ids
        key_mask[b, :len(ids)] = True
        for w, (s0, s1) in enumerate(smap.ranges):
            pool[b, w, s0:s1] = 1.0 / (s1 - s0)
            word_mask[b, w] = True
    return Batch(list(sentences), ids_arr, key_mask, [m for _, m in encoded], pool,
                 word_mask, np.array([len(s) for s in sentences]))


def word_dropout(ids: np.ndarray, rate: float, rng: np.random.Generator | None,
                 vocab: Vocab) -> np.ndarray:
    """Replace each non-sentinel subtoken with [MASK] with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"word dropout rate {rate} outside [0,1]")
    if rng is None or rate == 0.0:
        return ids
    ids = np.array(ids, copy=True)
    sentinel = np.isin(ids, [vocab.bos, vocab.eos, vocab.pad])
    hit = (rng.random(ids.shape) < rate) & ~sentinel
    ids[hit] = vocab.mask
    return ids


def gated_attention(Q, K, V, z) -> Tensor:
    """One head: z * softmax(Q K^T / sqrt(d_k)) V."""
    Q, K, V = T.as_tensor(Q), T.as_tensor(K), T.as_tensor(V)
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ValueError(f"attention shapes disagree: Q{Q.shape} K{K.shape} V{V.shape}")
    scores = T.scale(Q @ T.transpose(K), 1.0 / math.sqrt(Q.shape[-1]))
    return T.mul(T.softmax_rows(scores) @ V, z)


@dataclass
class AttentionSnapshot:
    """Pre-gating attention and value matrices for one sentence, indexed [layer][head]."""
    attn: list[list[np.ndarray]] = field(default_factory=list)
    values: list[list[np.ndarray]] = field(default_factory=list)
    map: SubtokenMap | None = None


def _init(rng, shape, fan_in):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


class Encoder:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, H, dk, f = cfg.d_model, cfg.heads, cfg.d_head, cfg.ffn
        p: dict[str, Tensor] = {}

        def add(name, data):
            p[name] = T.parameter(data, name="encoder." + name)

        add("tok_emb", rng.normal(0.0, 0.5, size=(cfg.vocab_size, d)))
        add("pos_emb", rng.normal(0.0, 0.1, size=(cfg.max_len, d)))
        for i in range(cfg.layers):
            add(f"l{i}.ln1_g", np.ones(d))
            add(f"l{i}.ln1_b", np.zeros(d))
            # no key bias: it shifts every score in a row equally and cancels in softmax
            for m in "qkv":
                add(f"l{i}.w{m}", _init(rng, (H, d, dk), d))
            add(f"l{i}.bq", np.zeros((H, dk)))
            add(f"l{i}.bv", np.zeros((H, dk)))
            add(f"l{i}.wo", _init(rng, (H, dk, d), d))
            add(f"l{i}.bo", np.zeros(d))
            add(f"l{i}.ln2_g", np.ones(d))
            add(f"l{i}.ln2_b", np.zeros(d))
            add(f"l{i}.w1", _init(rng, (d, f), d))
            add(f"l{i}.b1", np.zeros(f))
            add(f"l{i}.w2", _init(rng, (f, d), f))
            add(f"l{i}.b2", np.zeros(d))
        add("lnf_g", np.ones(d))
        add("lnf_b", np.zeros(d))
        self.params = p

    def attention_block(self, i: int, x: Tensor, key_add: np.ndarray, z,
                        rng, capture: list | None) -> Tensor:
        """Differentiable gated multi-head attention sublayer (pre-norm input ``x``)."""
        p = self.params
        cfg = self.cfg
        B, Tn, d = x.shape
        H, dk = cfg.heads, cfg.d_head
        x2 = T.reshape(x, (B * Tn, d))

        def proj(m):
            w = T.reshape(T.transpose(p[f"l{i}.w{m}"], (1, 0, 2)), (d, H * dk))
            y = x2 @ w
            if m != "k":
                y = y + T.reshape(p[f"l{i}.b{m}"], (H * dk,))
            return T.transpose(T.reshape(y, (B, Tn, H, dk)), (0, 2, 1, 3))

        Q, K, V = proj("q"), proj("k"), proj("v")
        scores = T.scale(Q @ T.transpose(K), 1.0 / math.sqrt(dk)) + key_add
        A = T.softmax_rows(scores)
        if capture is not None:
            capture.append((A.data, V.data))
        O = A @ V
        if z is not None:
            zl = T.getitem(z, i) if isinstance(z, Tensor) else z[i]
            O = T.mul(O, T.reshape(zl, (1, H, 1, 1)))
        O2 = T.reshape(T.transpose(O, (0, 2, 1, 3)), (B * Tn, H * dk))
        out = O2 @ T.reshape(p[f"l{i}.wo"], (H * dk, d)) + p[f"l{i}.bo"]
        return T.dropout(T.reshape(out, (B, Tn, d)), cfg.dropout, rng)

    def attention_eval(self, i: int, x: np.ndarray, key_add: np.ndarray, z,
                       heads, capture: list | None) -> np.ndarray:
        """Inference-only attention sublayer, one head at a time.

        Only the heads listed in ``heads`` are computed; their contributions are
        accumulated in head order, so leaving out a zero-gated head yields the
        same floats as computing it and adding its zeros.
        """
        p = self.params
        B, Tn, d = x.shape
        dk = self.cfg.d_head
        x2 = x.reshape(B * Tn, d)
        wq, wk, wv, wo = (p[f"l{i}.w{m}"].data for m in "qkvo")
        bq, bv = p[f"l{i}.bq"].data, p[f"l{i}.bv"].data
        out = None
        attn, vals = [], []
        for h in heads:
            q = (x2 @ wq[h] + bq[h]).reshape(B, Tn, dk)
            k = (x2 @ wk[h]).reshape(B, Tn, dk)
            v = (x2 @ wv[h] + bv[h]).reshape(B, Tn, dk)
            sc = (q @ np.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dk)) + key_add
            e = np.exp(sc - sc.max(axis=-1, keepdims=True))
            a = e / e.sum(axis=-1, keepdims=True)
            if capture is not None:
                attn.append(a)
                vals.append(v)
            o = a @ v
            if z is not None:
                o = o * z[i, h]
            c = o.reshape(B * Tn, dk) @ wo[h]
            out = c if out is None else out + c
        if capture is not None:
            capture.append((np.stack(attn, axis=1), np.stack(vals, axis=1)))
        if out is None:
            out = np.zeros((B * Tn, d))
        return (out + p[f"l{i}.bo"].data).reshape(B, Tn, d)

    def forward(self, ids: np.ndarray, key_mask: np.ndarray, z=None, rng=None,
                capture: bool = False, skip: bool = True):
        """Encode padded subtoken ids.

        ``z`` is None (all heads open, weight 1), a (layers, heads) Tensor of
        sampled gates, or a numpy array of eval gates. With a numpy ``z`` and
        ``skip``, zero-gated heads are not computed at all. ``rng`` enables
        dropout. Returns (hidden states, captured list or None).
        """
        cfg = self.cfg
        B, Tn = ids.shape
        if Tn > cfg.max_len:
            raise ValueError(f"sequence length {Tn} exceeds max length {cfg.max_len}")
        p = self.params
        key_add = np.where(key_mask, 0.0, NEG_INF)[:, None, :]
        x = T.embedding(p["tok_emb"], ids) + T.getitem(p["pos_emb"], slice(0, Tn))
        x = T.dropout(x, cfg.dropout, rng)
        snaps: list | None = [] if capture else None
        recording = T.is_recording()
        for i in range(cfg.layers):
            xn = T.layer_norm(x, p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"])
            if recording:
                x = x + self.attention_block(i, xn, key_add[:, None], z, rng, snaps)
            else:
                zi = None if z is None else np.asarray(z.data if isinstance(z, Tensor) else z)
                heads = range(cfg.heads)
                if skip and not capture and zi is not None:
                    heads = np.flatnonzero(zi[i] > 0)
                x = Tensor(x.data + self.attention_eval(i, xn.data, key_add, zi, heads, snaps))
            xn = T.layer_norm(x, p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"])
            hdn = T.gelu(xn @ p[f"l{i}.w1"] + p[f"l{i}.b1"])
            x = x + T.dropout(hdn @ p[f"l{i}.w2"] + p[f"l{i}.b2"], cfg.dropout, rng)
        x = T.layer_norm(x, p["lnf_g"], p["lnf_b"])
        return x, snaps


def word_embed(hidden: Tensor, smap) -> tuple[Tensor, Tensor]:
    """Average subtoken states per word; returns (word vectors, BOS vectors).

    ``smap`` is a SubtokenMap (unbatched) or a prebuilt pooling array.
    """
    pool = pool_matrix(smap) if isinstance(smap, SubtokenMap) else smap
    words = T.matmul(pool, hidden)
    root = T.getitem(hidden, (Ellipsis, 0, slice(None)))
    return words, root


def pool_matrix(smap: SubtokenMap) -> np.ndarray:
    P = np.zeros((len(smap.ranges), smap.length))
    for w, (s0, s1) in enumerate(smap.ranges):
        if s1 <= s0:
            raise ValueError(f"word {w} has an empty subtoken range")
        P[w, s0:s1] = 1.0 / (s1 - s0)
    return P


def split_snapshots(snaps: list, batch: Batch) -> list[AttentionSnapshot]:
    """Cut captured batch tensors into per-sentence snapshots trimmed to length."""
    out = []
    for b, smap in enumerate(batch.maps):
        n = smap.length
        attn = [[A[b, h, :n, :n].copy() for h in range(A.shape[1])] for A, _ in snaps]
        vals = [[V[b, h, :n, :].copy() for h in range(V.shape[1])] for _, V in snaps]
        out.append(AttentionSnapshot(attn, vals, smap))
    return out


def save_snapshots(path, snapshots: Sequence[AttentionSnapshot], meta: dict | None = None) -> Path:
    """Write ``<path>.json`` manifest plus ``<path>.bin`` little-endian f64 matrices."""
    path = Path(path).with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    records = []
    chunks = []
    offset = 0
    for snap in snapshots:
        rec = {"map": snap.map.to_json(), "attn": [], "values": []}
        for key, mats in (("attn", snap.attn), ("values", snap.values)):
            for layer in mats:
                row = []
                for m in layer:
                    arr = np.ascontiguousarray(m, dtype="<f8")
                    row.append({"offset": offset, "shape": list(arr.shape)})
                    offset += arr.size
                    chunks.append(arr.tobytes())
                rec[key].append(row)
        records.append(rec)
    manifest = dict(meta or {})
    manifest["blob"] = path.with_suffix(".bin").name
    manifest["sentences"] = records
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest) + "\n")
    return path


def load_snapshots(path) -> tuple[list[AttentionSnapshot], dict]:
    path = Path(path).with_suffix(".json")
    manifest = json.loads(path.read_text())
    blob = np.frombuffer((path.parent / manifest["blob"]).read_bytes(), dtype="<f8")

    def get(e):
        n = math.prod(e["shape"])
        return blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).copy()

    snaps = [AttentionSnapshot([[get(e) for e in row] for row in rec["attn"]],
                               [[get(e) for e in row] for row in rec["values"]],
                               SubtokenMap.from_json(rec["map"]))
             for rec in manifest["sentences"]]
    return snaps, manifest
