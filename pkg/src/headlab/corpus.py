"""Sentences with five layers of gold annotation, file readers, subword vocab
and a template-grammar generator that stands in for a treebank.

Indexing is 0-based everywhere; spans are inclusive ``(begin, end, label)``
and a dependency head of ``-1`` marks the root.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TASKS = ("pos", "ner", "dep", "con", "srl")

PAD, BOS, EOS, MASK, UNK = "[PAD]", "[BOS]", "[EOS]", "[MASK]", "[UNK]"
RESERVED = (PAD, BOS, EOS, MASK, UNK)


class CorpusError(ValueError):
    pass


Span = tuple[int, int, str]


@dataclass
class Frame:
    predicate: int
    args: list[Span] = field(default_factory=list)


@dataclass
class Sentence:
    tokens: list[str]
    pos: list[str] | None = None
    ner: list[Span] | None = None
    dep: list[tuple[int, str]] | None = None
    con: list[Span] | None = None
    srl: list[Frame] | None = None

    def __len__(self):
        return len(self.tokens)

    def has(self, task: str) -> bool:
        return getattr(self, task) is not None

    def to_json(self) -> dict:
        out: dict = {"tokens": list(self.tokens)}
        if self.pos is not None:
            out["pos"] = list(self.pos)
        if self.ner is not None:
            out["ner"] = [list(s) for s in self.ner]
        if self.dep is not None:
            out["dep"] = [[h, r] for h, r in self.dep]
        if self.con is not None:
            out["con"] = [list(s) for s in self.con]
        if self.srl is not None:
            out["srl"] = [{"predicate": f.predicate, "args": [list(a) for a in f.args]}
                          for f in self.srl]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Sentence":
        if not isinstance(obj, dict) or "tokens" not in obj:
            raise CorpusError("object lacks 'tokens'")

        def spans(key):
            if key not in obj:
                return None
            return [(int(b), int(e), str(lab)) for b, e, lab in obj[key]]

        srl = None
        if "srl" in obj:
            srl = [Frame(int(f["predicate"]), [(int(b), int(e), str(r)) for b, e, r in f["args"]])
                   for f in obj["srl"]]
        sent = cls(
            tokens=[str(t) for t in obj["tokens"]],
            pos=[str(p) for p in obj["pos"]] if "pos" in obj else None,
            ner=spans("ner"),
            dep=[(int(h), str(r)) for h, r in obj["dep"]] if "dep" in obj else None,
            con=spans("con"),
            srl=srl,
        )
        validate(sent)
        return sent


def validate(s: Sentence) -> None:
    """Raise :class:`CorpusError` if any annotation layer breaks its invariants."""
    n = len(s.tokens)
    if n == 0:
        raise CorpusError("empty sentence")
    if any(not t for t in s.tokens):
        raise CorpusError("empty token")
    if s.pos is not None and len(s.pos) != n:
        raise CorpusError(f"pos has {len(s.pos)} tags for {n} tokens")
    for key in ("ner", "con"):
        spans = getattr(s, key)
        if spans is None:
            continue
        for b, e, _ in spans:
            _check_span(b, e, n, key)
    if s.ner is not None:
        taken = sorted((b, e) for b, e, _ in s.ner)
        for (b0, e0), (b1, e1) in zip(taken, taken[1:]):
            if b1 <= e0:
                raise CorpusError(f"ner spans overlap: ({b0},{e0}) and ({b1},{e1})")
    if s.dep is not None:
        if len(s.dep) != n:
            raise CorpusError(f"dep has {len(s.dep)} arcs for {n} tokens")
        heads = [h for h, _ in s.dep]
        for h in heads:
            if not -1 <= h < n:
                raise CorpusError(f"dep head {h} out of bounds")
        roots = [i for i, h in enumerate(heads) if h == -1]
        if len(roots) != 1:
            raise CorpusError(f"no root / cycle: expected exactly one root, found {len(roots)}")
        for i in range(n):
            seen = set()
            j = i
            while j != -1:
                if j in seen:
                    raise CorpusError("no root / cycle in dependency tree")
                seen.add(j)
                j = heads[j]
    if s.srl is not None:
        for f in s.srl:
            if not 0 <= f.predicate < n:
                raise CorpusError(f"srl predicate {f.predicate} out of bounds")
            for b, e, _ in f.args:
                _check_span(b, e, n, "srl argument")


def _check_span(b: int, e: int, n: int, what: str) -> None:
    if b < 0 or b > e:
        raise CorpusError(f"{what} span ({b},{e}) malformed")
    if e >= n:
        raise CorpusError(f"{what} span end out of bounds: ({b},{e}) in {n} tokens")


# ---------------------------------------------------------------- file formats

def read_jsonl(path: str | Path) -> list[Sentence]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Sentence.from_json(json.loads(line)))
            except (json.JSONDecodeError, CorpusError, KeyError, TypeError, ValueError) as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_jsonl(sentences: Iterable[Sentence], path: str | Path,
                extra: Sequence[dict] | None = None) -> None:
    """Write one JSON object per line; ``extra`` merges system fields per sentence."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, s in enumerate(sentences):
            obj = s.to_json()
            if extra is not None:
                obj.update(extra[i])
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def read_conllu(path: str | Path, use_xpos: bool = False) -> list[Sentence]:
    sentences: list[Sentence] = []
    rows: list[list[str]] = []

    def flush(lineno):
        if not rows:
            return
        tokens = [r[1] for r in rows]
        pos = [r[4] if use_xpos else r[3] for r in rows]
        dep = []
        for r in rows:
            try:
                head = int(r[6])
            except ValueError as exc:
                raise CorpusError(f"{path}:{lineno}: non-integer head {r[6]!r}") from exc
            dep.append((head - 1, r[7]))
        s = Sentence(tokens=tokens, pos=pos, dep=dep)
        try:
            validate(s)
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from exc
        sentences.append(s)
        rows.clear()

    lineno = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                flush(lineno)
                continue
            if line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 10:
                raise CorpusError(f"{path}:{lineno}: expected 10 columns, got {len(cols)}")
            if "-" in cols[0] or "." in cols[0]:
                continue  # multiword range or empty node
            rows.append(cols)
    flush(lineno)
    return sentences


# ---------------------------------------------------------------- subwords

class Vocab:
    def __init__(self, pieces: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {p: i for i, p in enumerate(self.itos)}
        for p in pieces:
            self.add(p)

    def add(self, piece: str) -> int:
        if piece not in self.stoi:
            self.stoi[piece] = len(self.itos)
            self.itos.append(piece)
        return self.stoi[piece]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, piece):
        return piece in self.stoi

    def __getitem__(self, piece: str) -> int:
        return self.stoi[piece]

    pad = property(lambda self: self.stoi[PAD])
    bos = property(lambda self: self.stoi[BOS])
    eos = property(lambda self: self.stoi[EOS])
    mask = property(lambda self: self.stoi[MASK])
    unk = property(lambda self: self.stoi[UNK])

    def to_json(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_json(cls, itos: list[str]) -> "Vocab":
        if list(itos[:len(RESERVED)]) != list(RESERVED):
            raise CorpusError("vocab does not start with the reserved sentinels")
        return cls(itos[len(RESERVED):])


def build_vocab(sentences: Iterable[Sentence], min_count: int = 1,
                max_word_len: int = 7, chunk: int = 4) -> Vocab:
    """Whole words up to ``max_word_len`` characters, chunked pieces for longer
    words, and single-character fallbacks."""
    counts = Counter(t for s in sentences for t in s.tokens)
    pieces: list[str] = []
    chars: set[str] = set()
    for word, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        chars.update(word)
        if c < min_count:
            continue
        if len(word) <= max_word_len:
            pieces.append(word)
        else:
            pieces.append(word[:chunk])
            pieces.extend("##" + word[i:i + chunk] for i in range(chunk, len(word), chunk))
    for ch in sorted(chars):
        pieces.append(ch)
        pieces.append("##" + ch)
    return Vocab(pieces)


def subtokenize(word: str, vocab: Vocab) -> list[int]:
    """Greedy longest-match-first segmentation; any unmatched character makes the
    whole word ``[UNK]``."""
    if not word:
        raise CorpusError("cannot subtokenize an empty word")
    ids = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while end > start:
            piece = word[start:end] if start == 0 else "##" + word[start:end]
            if piece in vocab.stoi:
                found = vocab.stoi[piece]
                break
            end -= 1
        if found is None:
            return [vocab.unk]
        ids.append(found)
        start = end
    return ids


@dataclass
class SubtokenMap:
    """Word → half-open subtoken range over an encoder input sequence.

    ``bos``/``eos`` are sentinel positions (None when absent).
    """
    ranges: list[tuple[int, int]]
    length: int
    bos: int | None = None
    eos: int | None = None

    @property
    def sentinels(self) -> list[int]:
        return [p for p in (self.bos, self.eos) if p is not None]

    def validate(self) -> None:
        covered = []
        prev = -1
        for s0, s1 in self.ranges:
            if s1 <= s0:
                raise CorpusError(f"empty subtoken range ({s0},{s1})")
            if s0 < prev:
                raise CorpusError("subtoken ranges overlap or are out of order")
            prev = s1
            covered.extend(range(s0, s1))
        expected = [i for i in range(self.length) if i not in self.sentinels]
        if covered != expected:
            raise CorpusError("subtoken ranges do not cover the non-sentinel positions")

    def to_json(self) -> dict:
        return {"ranges": [list(r) for r in self.ranges], "length": self.length,
                "bos": self.bos, "eos": self.eos}

    @classmethod
    def from_json(cls, obj: dict) -> "SubtokenMap":
        return cls([tuple(r) for r in obj["ranges"]], int(obj["length"]),
                   obj.get("bos"), obj.get("eos"))


def encode_sentence(tokens: Sequence[str], vocab: Vocab) -> tuple[list[int], SubtokenMap]:
    ids = [vocab.bos]
    ranges = []
    for w in tokens:
        pieces = subtokenize(w, vocab)
        ranges.append((len(ids), len(ids) + len(pieces)))
        ids.extend(pieces)
    ids.append(vocab.eos)
    return ids, SubtokenMap(ranges, len(ids), bos=0, eos=len(ids) - 1)


# ---------------------------------------------------------------- labels

def label_inventory(sentences: Iterable[Sentence], task: str) -> list[str]:
    labels: set[str] = set()
    for s in sentences:
        if task == "pos" and s.pos is not None:
            labels.update(s.pos)
        elif task == "dep" and s.dep is not None:
            labels.update(r for _, r in s.dep)
        elif task in ("ner", "con") and getattr(s, task) is not None:
            labels.update(lab for _, _, lab in getattr(s, task))
        elif task == "srl" and s.srl is not None:
            labels.update(r for f in s.srl for _, _, r in f.args)
    return sorted(labels)


def label_frequencies(sentences: Iterable[Sentence], task: str) -> Counter:
    c: Counter = Counter()
    for s in sentences:
        if task == "pos" and s.pos is not None:
            c.update(s.pos)
        elif task == "dep" and s.dep is not None:
            c.update(r for _, r in s.dep)
        elif task in ("ner", "con") and getattr(s, task) is not None:
            c.update(lab for _, _, lab in getattr(s, task))
        elif task == "srl" and s.srl is not None:
            c.update(r for f in s.srl for _, _, r in f.args)
    return c


# ---------------------------------------------------------------- template grammar

DEFAULT_GRAMMAR: dict = {
    "probabilities": {
        "name_subject": 0.35,
        "name_object": 0.25,
        "name_pobj": 0.5,
        "transitive": 0.6,
        "adjective": 0.35,
        "pp": 0.45,
        "adverb": 0.3,
        "temporal": 0.25,
    },
    "max_adjectives": 2,
    "lexicon": {
        "DT": ["the", "a", "this", "every"],
        "JJ": ["big", "small", "red", "old", "quiet", "happy", "strange", "green"],
        "NN": ["dog", "cat", "teacher", "report", "fish", "watch", "plant", "letter",
               "committee", "river", "window", "engineer"],
        "VBD_T": ["saw", "found", "wrote", "chased", "signed", "liked", "fish", "watch", "plant"],
        "VBD_I": ["slept", "smiled", "arrived", "waited", "fish", "watch"],
        "IN": ["in", "near", "behind", "under"],
        "RB": ["quickly", "quietly", "again", "happily"],
    },
    "names": {
        "PERSON": [["John", "Smith"], ["Maria"], ["Ahmed", "Karimov"], ["Lena"], ["Oliver", "Twistleton"]],
        "ORG": [["Acme", "Corporation"], ["Globex"], ["United", "Nations"], ["Initech"]],
        "GPE": [["Paris"], ["New", "York"], ["Ouagadougou"], ["Lisbon"], ["Buenos", "Aires"]],
    },
    "name_weights": {
        "subject": {"PERSON": 0.7, "ORG": 0.3},
        "object": {"PERSON": 0.5, "ORG": 0.5},
        "pobj": {"GPE": 1.0},
    },
    "temporal": [
        {"tokens": ["yesterday"], "pos": ["NN"]},
        {"tokens": ["last", "week"], "pos": ["JJ", "NN"]},
        {"tokens": ["this", "morning"], "pos": ["DT", "NN"]},
    ],
    "labels": {
        "pos": ["DT", "JJ", "NN", "NNP", "VBD", "IN", "RB", "."],
        "ner": ["PERSON", "ORG", "GPE", "DATE"],
        "dep": ["root", "nsubj", "obj", "det", "amod", "compound", "prep", "pobj",
                "advmod", "tmod", "punct"],
        "con": ["NP", "VP", "ADVP"],
        "srl": ["ARG0", "ARG1", "ARGM-LOC", "ARGM-MNR", "ARGM-TMP"],
    },
}


def validate_grammar(g: dict) -> None:
    try:
        probs = g["probabilities"]
        for key in ("name_subject", "name_object", "name_pobj", "transitive",
                    "adjective", "pp", "adverb", "temporal"):
            p = float(probs[key])
            if not 0.0 <= p <= 1.0:
                raise CorpusError(f"grammar probability {key}={p} outside [0,1]")
        if int(g["max_adjectives"]) < 0:
            raise CorpusError("max_adjectives must be ≥ 0")
        for slot in ("DT", "JJ", "NN", "VBD_T", "VBD_I", "IN", "RB"):
            if not g["lexicon"][slot]:
                raise CorpusError(f"empty lexicon slot {slot}")
        for role, weights in g["name_weights"].items():
            if role not in ("subject", "object", "pobj"):
                raise CorpusError(f"unknown name role {role}")
            total = sum(weights.values())
            if abs(total - 1.0) > 1e-9:
                raise CorpusError(f"name weights for {role} sum to {total}")
            for lab in weights:
                if not g["names"].get(lab):
                    raise CorpusError(f"no names for label {lab}")
        for t in g["temporal"]:
            if len(t["tokens"]) != len(t["pos"]) or not t["tokens"]:
                raise CorpusError("temporal entry tokens/pos mismatch")
        g["labels"]
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"invalid grammar config: missing {exc}") from exc


def load_grammar(path: str | Path | None) -> dict:
    if path is None:
        g = json.loads(json.dumps(DEFAULT_GRAMMAR))
    else:
        g = json.loads(Path(path).read_text())
    validate_grammar(g)
    return g


class _Builder:
    def __init__(self):
        self.tokens: list[str] = []
        self.pos: list[str] = []
        self.heads: list[int] = []
        self.rels: list[str] = []
        self.ner: list[Span] = []
        self.con: list[Span] = []

    def push(self, word, tag, head=None, rel=""):
        self.tokens.append(word)
        self.pos.append(tag)
        self.heads.append(-2 if head is None else head)
        self.rels.append(rel)
        return len(self.tokens) - 1


def synth_generate(grammar: dict, count: int, seed: int) -> list[Sentence]:
    """Sample ``count`` sentences with mutually consistent gold layers."""
    if count < 1:
        raise CorpusError("count must be ≥ 1")
    validate_grammar(grammar)
    rng = np.random.default_rng(seed)
    return [_synth_one(grammar, rng) for _ in range(count)]


def _choice(rng, items):
    return items[int(rng.integers(len(items)))]


def _weighted(rng, weights: dict) -> str:
    labels = sorted(weights)
    p = np.array([weights[k] for k in labels], dtype=float)
    return labels[int(rng.choice(len(labels), p=p / p.sum()))]


def _noun_phrase(g, rng, b: _Builder, role: str) -> tuple[int, int, int]:
    """Append an NP; returns (begin, end, head index). Heads inside are resolved."""
    probs, lex = g["probabilities"], g["lexicon"]
    start = len(b.tokens)
    if rng.random() < probs["name_" + role] and role in g["name_weights"]:
        label = _weighted(rng, g["name_weights"][role])
        name = _choice(rng, g["names"][label])
        idx = [b.push(w, "NNP") for w in name]
        head = idx[-1]
        for i in idx[:-1]:
            b.heads[i], b.rels[i] = head, "compound"
        b.ner.append((start, head, label))
    else:
        det = b.push(_choice(rng, lex["DT"]), "DT")
        adjs = []
        while len(adjs) < g["max_adjectives"] and rng.random() < probs["adjective"]:
            adjs.append(b.push(_choice(rng, lex["JJ"]), "JJ"))
        head = b.push(_choice(rng, lex["NN"]), "NN")
        b.heads[det], b.rels[det] = head, "det"
        for a in adjs:
            b.heads[a], b.rels[a] = head, "amod"
    end = len(b.tokens) - 1
    b.con.append((start, end, "NP"))
    return start, end, head


def _synth_one(g: dict, rng) -> Sentence:
    probs, lex = g["probabilities"], g["lexicon"]
    b = _Builder()
    args: list[Span] = []

    s_b, s_e, s_head = _noun_phrase(g, rng, b, "subject")
    args.append((s_b, s_e, "ARG0"))
    transitive = rng.random() < probs["transitive"]
    verb = b.push(_choice(rng, lex["VBD_T" if transitive else "VBD_I"]), "VBD", -1, "root")
    b.heads[s_head], b.rels[s_head] = verb, "nsubj"
    vp_bare = not transitive
    if transitive:
        o_b, o_e, o_head = _noun_phrase(g, rng, b, "object")
        b.heads[o_head], b.rels[o_head] = verb, "obj"
        args.append((o_b, o_e, "ARG1"))
    if rng.random() < probs["pp"]:
        vp_bare = False
        prep = b.push(_choice(rng, lex["IN"]), "IN", verb, "prep")
        _, p_e, p_head = _noun_phrase(g, rng, b, "pobj")
        b.heads[p_head], b.rels[p_head] = prep, "pobj"
        args.append((prep, p_e, "ARGM-LOC"))
    if rng.random() < probs["adverb"]:
        vp_bare = False
        adv = b.push(_choice(rng, lex["RB"]), "RB", verb, "advmod")
        b.con.append((adv, adv, "ADVP"))
        args.append((adv, adv, "ARGM-MNR"))
    if vp_bare:
        b.con.append((verb, verb, "VP"))
    if rng.random() < probs["temporal"]:
        tmp = _choice(rng, g["temporal"])
        idx = [b.push(w, t) for w, t in zip(tmp["tokens"], tmp["pos"])]
        head = idx[-1]
        b.heads[head], b.rels[head] = verb, "tmod"
        for i in idx[:-1]:
            b.heads[i], b.rels[i] = head, "det" if b.pos[i] == "DT" else "amod"
        b.ner.append((idx[0], head, "DATE"))
        b.con.append((idx[0], head, "NP"))
        args.append((idx[0], head, "ARGM-TMP"))
    b.push(".", ".", verb, "punct")

    sent = Sentence(
        tokens=b.tokens,
        pos=b.pos,
        ner=sorted(b.ner),
        dep=list(zip(b.heads, b.rels)),
        con=sorted(b.con),
        srl=[Frame(verb, sorted(args))],
    )
    validate(sent)
    return sent


def split_dev(sentences: Sequence[Sentence], frac: float = 0.1) -> tuple[list[Sentence], list[Sentence]]:
    n_dev = max(1, int(round(len(sentences) * frac))) if len(sentences) > 1 else 0
    return list(sentences[:len(sentences) - n_dev]), list(sentences[len(sentences) - n_dev:])
