"""Small transformer encoder for extractive span prediction.

Question and passage are joined with a separator token and encoded by a
stack of self-attention blocks, so passage representations are question
conditioned.  Sequences are padded to a common length per batch; padded
columns are masked out of attention, and non-passage positions are masked
to -1e9 before the span softmaxes.  Two head vectors score each passage
position as a span start or end; the span loss is the negative log
probability of the gold start and end indices.

Checkpoints are a raw little-endian float64 blob plus a JSON manifest of
array names and shapes (see ``save_checkpoint``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MASK_VALUE = -1e9  # additive stand-in for -inf: underflows to exactly 0 in exp


class VocabularyError(ValueError):
    """Token id outside the embedding table, or an over-length sequence."""


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    heads: int = 4
    blocks: int = 2
    ffn: int = 128
    max_seq_len: int = 192

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must divide evenly across heads")


@dataclass
class EncodedExample:
    """Per-example encoder output: question rows, passage rows, gold span
    (inclusive token indices into the passage)."""

    r_q: Tensor
    r_p: Tensor
    span: tuple[int, int]


EncodedBatch = list[EncodedExample]


@dataclass
class SequenceBatch:
    """Padded joint sequences plus the layout needed to slice them back."""

    ids: np.ndarray                      # (B, T), padded with the separator id
    q_lens: tuple[int, ...]
    p_lens: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]   # passage-relative gold spans
    attn_mask: np.ndarray                # (B, 1, T) additive column mask
    span_mask: np.ndarray                # (B, T) additive non-passage mask

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    def passage_range(self, b: int) -> tuple[int, int]:
        start = self.q_lens[b] + 1
        return start, start + self.p_lens[b]


def make_batch(questions: list[np.ndarray], passages: list[np.ndarray],
               spans: list[tuple[int, int]], sep_id: int) -> SequenceBatch:
    if not (len(questions) == len(passages) == len(spans)):
        raise ValueError("make_batch: mismatched list lengths")
    q_lens = tuple(len(q) for q in questions)
    p_lens = tuple(len(p) for p in passages)
    for p_len, span in zip(p_lens, spans):
        if not (0 <= span[0] <= span[1] < p_len):
            raise ValueError(f"make_batch: gold span {span} out of range for "
                             f"{p_len} passage tokens")
    b = len(questions)
    t = max(ql + 1 + pl for ql, pl in zip(q_lens, p_lens))
    ids = np.full((b, t), sep_id, dtype=np.intp)
    attn_mask = np.full((b, 1, t), MASK_VALUE)
    span_mask = np.full((b, t), MASK_VALUE)
    for i, (q, p) in enumerate(zip(questions, passages)):
        ids[i, :q_lens[i]] = q
        ids[i, q_lens[i] + 1:q_lens[i] + 1 + p_lens[i]] = p
        attn_mask[i, 0, :q_lens[i] + 1 + p_lens[i]] = 0.0
        span_mask[i, q_lens[i] + 1:q_lens[i] + 1 + p_lens[i]] = 0.0
    return SequenceBatch(ids, q_lens, p_lens, tuple(spans), attn_mask, span_mask)


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Freshly initialized named parameters.

    Key names (documented in the README) follow ``embed.*``,
    ``block{i}.attn.{q,k,v}{h}``, ``block{i}.attn.out``,
    ``block{i}.{ln1,ln2}.{gain,bias}``, ``block{i}.ffn.{w1,b1,w2,b2}``,
    ``head.start`` and ``head.end``.
    """
    d, f = cfg.d_model, cfg.ffn
    dh = d // cfg.heads
    p: dict[str, np.ndarray] = {
        "embed.token": rng.normal(0, 0.1, size=(cfg.vocab_size, d)),
        "embed.pos": rng.normal(0, 0.1, size=(cfg.max_seq_len, d)),
    }
    for i in range(cfg.blocks):
        pre = f"block{i}"
        for h in range(cfg.heads):
            # query and key start tied so same-token attention is positive
            # from step 0, giving the matching heads a usable signal early
            qk = rng.normal(0, 1, size=(d, dh)) / math.sqrt(d)
            p[f"{pre}.attn.q{h}"] = qk
            p[f"{pre}.attn.k{h}"] = qk.copy()
            p[f"{pre}.attn.v{h}"] = rng.normal(0, 1, size=(d, dh)) / math.sqrt(d)
        p[f"{pre}.attn.out"] = rng.normal(0, 1, size=(d, d)) / math.sqrt(d)
        p[f"{pre}.ln1.gain"] = np.ones(d)
        p[f"{pre}.ln1.bias"] = np.zeros(d)
        p[f"{pre}.ffn.w1"] = rng.normal(0, 1, size=(d, f)) / math.sqrt(d)
        p[f"{pre}.ffn.b1"] = np.zeros(f)
        p[f"{pre}.ffn.w2"] = rng.normal(0, 1, size=(f, d)) / math.sqrt(f)
        p[f"{pre}.ffn.b2"] = np.zeros(d)
        p[f"{pre}.ln2.gain"] = np.ones(d)
        p[f"{pre}.ln2.bias"] = np.zeros(d)
    p["head.start"] = rng.normal(0, 0.1, size=d)
    p["head.end"] = rng.normal(0, 0.1, size=d)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def _attention(params: dict[str, Tensor], pre: str, x: Tensor, heads: int,
               attn_mask: Tensor) -> Tensor:
    per_head = []
    dh = params[f"{pre}.attn.q0"].shape[1]
    inv_sqrt = 1.0 / math.sqrt(dh)
    for h in range(heads):
        q = ad.matmul(x, params[f"{pre}.attn.q{h}"])
        k = ad.matmul(x, params[f"{pre}.attn.k{h}"])
        v = ad.matmul(x, params[f"{pre}.attn.v{h}"])
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt) + attn_mask
        per_head.append(ad.matmul(ad.softmax(scores, axis=-1), v))
    return ad.matmul(ad.concat(per_head, axis=-1), params[f"{pre}.attn.out"])


def _block(params: dict[str, Tensor], pre: str, x: Tensor, heads: int,
           attn_mask: Tensor) -> Tensor:
    x = ad.layer_norm(x + _attention(params, pre, x, heads, attn_mask),
                      params[f"{pre}.ln1.gain"], params[f"{pre}.ln1.bias"])
    hidden = ad.silu(ad.matmul(x, params[f"{pre}.ffn.w1"]) + params[f"{pre}.ffn.b1"])
    ff = ad.matmul(hidden, params[f"{pre}.ffn.w2"]) + params[f"{pre}.ffn.b2"]
    return ad.layer_norm(x + ff, params[f"{pre}.ln2.gain"], params[f"{pre}.ln2.bias"])


def encode_batch(params: dict[str, Tensor], cfg: EncoderConfig,
                 seqs: SequenceBatch) -> Tensor:
    """Joint self-attention over the padded batch; returns (B, T, d) hidden
    states.  Padded columns never receive attention, and padded rows are
    masked out of every downstream loss."""
    ids = seqs.ids
    if ids.max(initial=0) >= cfg.vocab_size or ids.min(initial=0) < 0:
        raise VocabularyError(
            f"token id {int(ids.max())} outside vocabulary of {cfg.vocab_size}")
    if seqs.width > cfg.max_seq_len:
        raise VocabularyError(
            f"sequence length {seqs.width} exceeds maximum {cfg.max_seq_len}")

    b, t = ids.shape
    tok = ad.reshape(ad.gather_rows(params["embed.token"], ids.reshape(-1)),
                     (b, t, cfg.d_model))
    pos = ad.gather_rows(params["embed.pos"], np.arange(t))
    x = tok + pos
    mask = Tensor(seqs.attn_mask)
    for i in range(cfg.blocks):
        x = _block(params, f"block{i}", x, cfg.heads, mask)
    return x


def split_examples(hidden: Tensor, seqs: SequenceBatch) -> EncodedBatch:
    """Slice the padded hidden states back into per-example question and
    passage rows (drops the separator and the padding)."""
    b, t, d = hidden.shape
    flat = ad.reshape(hidden, (b * t, d))
    out = []
    for i in range(b):
        lo, hi = seqs.passage_range(i)
        r_q = ad.gather_rows(flat, i * t + np.arange(seqs.q_lens[i]))
        r_p = ad.gather_rows(flat, i * t + np.arange(lo, hi))
        out.append(EncodedExample(r_q, r_p, seqs.spans[i]))
    return out


def encode(params: dict[str, Tensor], cfg: EncoderConfig, question_ids,
           passage_ids, sep_id: int,
           span: tuple[int, int] | None = None) -> tuple[Tensor, Tensor]:
    """Single-example convenience wrapper; returns (r_q, r_p)."""
    q = np.asarray(question_ids, dtype=np.intp)
    p = np.asarray(passage_ids, dtype=np.intp)
    seqs = make_batch([q], [p], [span or (0, 0)], sep_id)
    ex = split_examples(encode_batch(params, cfg, seqs), seqs)[0]
    return ex.r_q, ex.r_p


def span_logits(params: dict[str, Tensor], r_p: Tensor) -> tuple[Tensor, Tensor]:
    """Per-position start and end scores over one example's passage rows."""
    if r_p.shape[0] == 0:
        raise ValueError("span_logits: empty passage")
    return ad.matmul(r_p, params["head.start"]), ad.matmul(r_p, params["head.end"])


def span_logits_batch(params: dict[str, Tensor], hidden: Tensor,
                      seqs: SequenceBatch) -> tuple[Tensor, Tensor]:
    """(B, T) start and end scores with non-passage positions at -1e9."""
    mask = Tensor(seqs.span_mask)
    return (ad.matmul(hidden, params["head.start"]) + mask,
            ad.matmul(hidden, params["head.end"]) + mask)


def span_loss(start_logits: Tensor, end_logits: Tensor,
              span: tuple[int, int]) -> Tensor:
    """Negative log probability of the gold start and end positions."""
    start, end = span
    n = start_logits.shape[0]
    if not (0 <= start <= end < n):
        raise ValueError(f"span_loss: gold span {span} out of range for {n} positions")
    ls = ad.log_softmax(start_logits, axis=0)
    le = ad.log_softmax(end_logits, axis=0)
    picked = ad.gather_rows(ls, [start]) + ad.gather_rows(le, [end])
    return ad.scale(ad.mean(picked), -1.0)


def span_loss_batch(start_logits: Tensor, end_logits: Tensor,
                    seqs: SequenceBatch) -> Tensor:
    """Mean over the batch of the per-example span loss."""
    b, t = start_logits.shape
    gold_start = np.array([seqs.q_lens[i] + 1 + seqs.spans[i][0] for i in range(b)])
    gold_end = np.array([seqs.q_lens[i] + 1 + seqs.spans[i][1] for i in range(b)])
    ls = ad.reshape(ad.log_softmax(start_logits, axis=-1), (b * t,))
    le = ad.reshape(ad.log_softmax(end_logits, axis=-1), (b * t,))
    picked = (ad.gather_rows(ls, np.arange(b) * t + gold_start)
              + ad.gather_rows(le, np.arange(b) * t + gold_end))
    return ad.scale(ad.mean(picked), -1.0)


def predict_span(start_logits: np.ndarray, end_logits: np.ndarray,
                 max_len: int) -> tuple[int, int]:
    """Best (start, end) pair with start <= end < start + max_len.

    Ties break toward the smallest start, then the smallest end.
    """
    if max_len < 1:
        raise ValueError("predict_span: max_len must be >= 1")
    n = len(start_logits)
    best = (-math.inf, 0, 0)
    for i in range(n):
        j_hi = min(n, i + max_len)
        j = i + int(np.argmax(end_logits[i:j_hi]))
        score = start_logits[i] + end_logits[j]
        if score > best[0]:
            best = (score, i, j)
    return best[1], best[2]


# ---------------------------------------------------------------------------
# checkpoints: raw float64 blob + JSON shape manifest
# ---------------------------------------------------------------------------

def save_checkpoint(path_prefix: str | Path, params: dict[str, Tensor]) -> None:
    """Write ``<prefix>.bin`` (concatenated row-major little-endian float64
    arrays, in manifest order) and ``<prefix>.json`` (names and shapes)."""
    prefix = Path(path_prefix)
    manifest = []
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name].data, dtype="<f8")
            fh.write(arr.tobytes())
            manifest.append({"name": name, "shape": list(arr.shape)})
    meta = {"dtype": "float64", "byte_order": "little", "order": "row-major",
            "arrays": manifest}
    prefix.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n")


def load_checkpoint(path_prefix: str | Path) -> dict[str, Tensor]:
    prefix = Path(path_prefix)
    meta = json.loads(prefix.with_suffix(".json").read_text())
    blob = prefix.with_suffix(".bin").read_bytes()
    params: dict[str, Tensor] = {}
    offset = 0
    for entry in meta["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        params[entry["name"]] = Tensor(arr.reshape(shape).copy(), requires_grad=True)
    if offset != len(blob):
        raise ValueError(f"checkpoint blob has {len(blob)} bytes, manifest expects {offset}")
    return params
