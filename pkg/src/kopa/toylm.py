"""A small decoder-only transformer that verifies virtual-token mechanics.

The model is deliberately tiny (the prefix/attention mechanism is
scale-free): learned token + position embeddings, pre-norm blocks with
causal self-attention and a GELU MLP, a final layer norm, and an untied
output head. Forward and backward passes are written out by hand in
float64 so gradients can be verified against finite differences.

Sequences may mix vocabulary tokens with "virtual" slots that carry
embedding vectors directly. Virtual slots receive positional encodings
like any token but never serve as prediction targets.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .adapter import POSITIONS, PrefixAdapter, VirtualTokenPrefix, adapt
from .errors import ConfigError, DataError, FormatError, TrainingDivergenceError

log = logging.getLogger(__name__)

LM_MAGIC = b"TLM1"
_LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

LOSS_ANSWER = "answer"
LOSS_FULL = "full"


class Tokenizer:
    """Whitespace tokenizer with per-character fallback for unseen words."""

    UNK = "<unk>"

    def __init__(self, vocab):
        self.vocab = list(vocab)
        if not self.vocab or self.vocab[0] != self.UNK:
            raise ValueError("vocab must start with the <unk> token")
        self.index = {tok: i for i, tok in enumerate(self.vocab)}

    @classmethod
    def build(cls, texts) -> "Tokenizer":
        vocab = [cls.UNK]
        seen = {cls.UNK}
        for text in texts:
            for word in text.split():
                if word not in seen:
                    seen.add(word)
                    vocab.append(word)
                for ch in word:
                    if ch not in seen:
                        seen.add(ch)
                        vocab.append(ch)
        return cls(vocab)

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if word in self.index:
                ids.append(self.index[word])
            else:
                ids.extend(self.index.get(ch, 0) for ch in word)
        return ids

    def decode(self, ids) -> str:
        return " ".join(self.vocab[i] for i in ids)


@dataclass
class ToyLM:
    tokenizer: Tokenizer
    d_model: int
    n_layers: int
    n_heads: int
    context_len: int
    params: dict[str, np.ndarray]

    @property
    def vocab_size(self) -> int:
        return len(self.tokenizer)


def init_toylm(tokenizer: Tokenizer, rng: np.random.Generator, d_model: int = 64,
               n_layers: int = 2, n_heads: int = 2, context_len: int = 256) -> ToyLM:
    if d_model % n_heads:
        raise ConfigError(f"d_model {d_model} must be divisible by n_heads {n_heads}")
    v = len(tokenizer)
    p: dict[str, np.ndarray] = {}
    p["tok_emb"] = rng.normal(0, 0.02, size=(v, d_model))
    p["pos_emb"] = rng.normal(0, 0.01, size=(context_len, d_model))
    for i in range(n_layers):
        p[f"l{i}.ln1.g"] = np.ones(d_model)
        p[f"l{i}.ln1.b"] = np.zeros(d_model)
        for w in ("wq", "wk", "wv", "wo"):
            p[f"l{i}.{w}"] = rng.normal(0, 0.02, size=(d_model, d_model))
        p[f"l{i}.ln2.g"] = np.ones(d_model)
        p[f"l{i}.ln2.b"] = np.zeros(d_model)
        p[f"l{i}.w1"] = rng.normal(0, 0.02, size=(d_model, 4 * d_model))
        p[f"l{i}.b1"] = np.zeros(4 * d_model)
        p[f"l{i}.w2"] = rng.normal(0, 0.02, size=(4 * d_model, d_model))
        p[f"l{i}.b2"] = np.zeros(d_model)
    p["lnf.g"] = np.ones(d_model)
    p["lnf.b"] = np.zeros(d_model)
    p["head"] = rng.normal(0, 0.02, size=(d_model, v))
    return ToyLM(tokenizer, d_model, n_layers, n_heads, context_len, p)


@dataclass(frozen=True)
class AssembledSequence:
    """Token ids with -1 marking virtual slots, whose vectors ride alongside."""

    token_ids: np.ndarray            # (L,) int64
    virtual: np.ndarray | None       # (n_virtual, d_model) in slot order
    spans: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def is_virtual(self) -> np.ndarray:
        return self.token_ids < 0

    def span_positions(self, name: str) -> range:
        start, end = self.spans.get(name, (0, 0))
        return range(start, end)


def text_sequence(ids) -> AssembledSequence:
    """A plain token sequence with no virtual slots (testing convenience)."""
    ids = np.asarray(ids, dtype=np.int64)
    return AssembledSequence(ids, None, {"text": (0, len(ids))})


def assemble_sequence(prefix: VirtualTokenPrefix | None, instruction_ids, triple_ids,
                      answer_ids, position: str, context_len: int) -> AssembledSequence:
    """Splice virtual tokens into the text at the requested position.

    prefix: [K, I, X, A]; infix: [I, K, X, A]; suffix: [I, X, K, A] (after
    the text, before the answer). The answer may be empty at inference
    time; instruction and triple tokens may not be empty.
    """
    if position not in POSITIONS:
        raise ValueError(f"position must be one of {POSITIONS}, got {position!r}")
    instruction_ids = list(instruction_ids)
    triple_ids = list(triple_ids)
    answer_ids = list(answer_ids)
    if not instruction_ids or not triple_ids:
        raise ValueError("instruction and triple token lists must be non-empty")

    n_virtual = 0 if prefix is None else prefix.tokens.shape[0]
    segments: list[tuple[str, list[int] | None]] = []
    if prefix is None:
        segments = [("instruction", instruction_ids), ("triple", triple_ids), ("answer", answer_ids)]
    elif position == "prefix":
        segments = [("virtual", None), ("instruction", instruction_ids),
                    ("triple", triple_ids), ("answer", answer_ids)]
    elif position == "infix":
        segments = [("instruction", instruction_ids), ("virtual", None),
                    ("triple", triple_ids), ("answer", answer_ids)]
    else:
        segments = [("instruction", instruction_ids), ("triple", triple_ids),
                    ("virtual", None), ("answer", answer_ids)]

    ids: list[int] = []
    spans: dict[str, tuple[int, int]] = {}
    for name, seg in segments:
        start = len(ids)
        if seg is None:
            ids.extend([-1] * n_virtual)
        else:
            ids.extend(int(x) for x in seg)
        spans[name] = (start, len(ids))
    if len(ids) > context_len:
        raise DataError(f"sequence length {len(ids)} exceeds context length {context_len}")
    virtual = None if prefix is None else np.asarray(prefix.tokens, dtype=np.float64)
    return AssembledSequence(np.asarray(ids, dtype=np.int64), virtual, spans)


def build_targets(seq: AssembledSequence, loss_mode: str = LOSS_ANSWER) -> np.ndarray:
    """Next-token targets, -1 where no loss applies.

    Virtual slots are never targets (they have no vocabulary id). In
    answer-only mode, only positions whose next token lies in the answer
    span are kept; full mode keeps every text target (Eq.-style mean NLL
    over the textual tokens).
    """
    if loss_mode not in (LOSS_ANSWER, LOSS_FULL):
        raise ValueError(f"loss_mode must be '{LOSS_ANSWER}' or '{LOSS_FULL}'")
    n = len(seq)
    targets = np.full(n, -1, dtype=np.int64)
    answer = seq.span_positions("answer")
    for i in range(n - 1):
        nxt = i + 1
        if seq.token_ids[nxt] < 0:
            continue
        if loss_mode == LOSS_ANSWER and nxt not in answer:
            continue
        targets[i] = seq.token_ids[nxt]
    return targets


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_prime(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _ln_forward(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _ln_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return dx, dg, db


def _embed(lm: ToyLM, seq: AssembledSequence) -> np.ndarray:
    n = len(seq)
    if n > lm.context_len:
        raise DataError(f"sequence length {n} exceeds context length {lm.context_len}")
    x = np.empty((n, lm.d_model))
    text = ~seq.is_virtual
    x[text] = lm.params["tok_emb"][seq.token_ids[text]]
    if seq.virtual is not None:
        x[seq.is_virtual] = seq.virtual
    return x + lm.params["pos_emb"][:n]


def forward_embedded(lm: ToyLM, x0: np.ndarray):
    """Causal transformer forward on pre-embedded inputs; returns logits and
    the cache needed for the hand-written backward pass."""
    p = lm.params
    n, dh = x0.shape[0], lm.d_model // lm.n_heads
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    x = x0
    layers = []
    for i in range(lm.n_layers):
        a, ln1c = _ln_forward(x, p[f"l{i}.ln1.g"], p[f"l{i}.ln1.b"])
        q = a @ p[f"l{i}.wq"]
        k = a @ p[f"l{i}.wk"]
        v = a @ p[f"l{i}.wv"]
        qh = q.reshape(n, lm.n_heads, dh).transpose(1, 0, 2)
        kh = k.reshape(n, lm.n_heads, dh).transpose(1, 0, 2)
        vh = v.reshape(n, lm.n_heads, dh).transpose(1, 0, 2)
        s = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh)
        s = np.where(upper[None, :, :], -np.inf, s)
        s_shift = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s_shift)
        att = e / e.sum(axis=-1, keepdims=True)
        o = att @ vh
        om = o.transpose(1, 0, 2).reshape(n, lm.d_model)
        y = om @ p[f"l{i}.wo"]
        x1 = x + y
        b_, ln2c = _ln_forward(x1, p[f"l{i}.ln2.g"], p[f"l{i}.ln2.b"])
        h1 = b_ @ p[f"l{i}.w1"] + p[f"l{i}.b1"]
        gact = _gelu(h1)
        m = gact @ p[f"l{i}.w2"] + p[f"l{i}.b2"]
        x2 = x1 + m
        layers.append((x, a, ln1c, qh, kh, vh, att, om, x1, b_, ln2c, h1, gact))
        x = x2
    f, lnfc = _ln_forward(x, p["lnf.g"], p["lnf.b"])
    logits = f @ p["head"]
    return logits, (x0, layers, x, f, lnfc)


def lm_forward(lm: ToyLM, seq: AssembledSequence) -> np.ndarray:
    """Logits per position; virtual slots contribute embeddings only."""
    logits, _ = forward_embedded(lm, _embed(lm, seq))
    return logits


def backward_embedded(lm: ToyLM, cache, dlogits, seq: AssembledSequence | None = None):
    """Gradients of every parameter plus the input embeddings.

    When ``seq`` is given, the input-embedding gradient is also scattered
    into ``tok_emb`` (text rows) and ``pos_emb``; virtual rows only show up
    in the returned input gradient.
    """
    p = lm.params
    x0, layers, x_last, f, lnfc = cache
    n, dh = x0.shape[0], lm.d_model // lm.n_heads
    grads = {name: np.zeros_like(arr) for name, arr in p.items()}

    grads["head"] += f.T @ dlogits
    df = dlogits @ p["head"].T
    dx, dg, db = _ln_backward(df, lnfc)
    grads["lnf.g"] += dg
    grads["lnf.b"] += db

    for i in reversed(range(lm.n_layers)):
        x, a, ln1c, qh, kh, vh, att, om, x1, b_, ln2c, h1, gact = layers[i]
        # MLP branch
        dm = dx
        grads[f"l{i}.w2"] += gact.T @ dm
        grads[f"l{i}.b2"] += dm.sum(axis=0)
        dgact = dm @ p[f"l{i}.w2"].T
        dh1 = dgact * _gelu_prime(h1)
        grads[f"l{i}.w1"] += b_.T @ dh1
        grads[f"l{i}.b1"] += dh1.sum(axis=0)
        db_ = dh1 @ p[f"l{i}.w1"].T
        dx1, dg, db = _ln_backward(db_, ln2c)
        grads[f"l{i}.ln2.g"] += dg
        grads[f"l{i}.ln2.b"] += db
        dx1 = dx1 + dx  # residual
        # attention branch
        dy = dx1
        grads[f"l{i}.wo"] += om.T @ dy
        dom = dy @ p[f"l{i}.wo"].T
        do = dom.reshape(n, lm.n_heads, dh).transpose(1, 0, 2)
        datt = do @ vh.transpose(0, 2, 1)
        dvh = att.transpose(0, 2, 1) @ do
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dqh = ds @ kh / np.sqrt(dh)
        dkh = ds.transpose(0, 2, 1) @ qh / np.sqrt(dh)
        dq = dqh.transpose(1, 0, 2).reshape(n, lm.d_model)
        dk = dkh.transpose(1, 0, 2).reshape(n, lm.d_model)
        dv = dvh.transpose(1, 0, 2).reshape(n, lm.d_model)
        grads[f"l{i}.wq"] += a.T @ dq
        grads[f"l{i}.wk"] += a.T @ dk
        grads[f"l{i}.wv"] += a.T @ dv
        da = dq @ p[f"l{i}.wq"].T + dk @ p[f"l{i}.wk"].T + dv @ p[f"l{i}.wv"].T
        dxa, dg, db = _ln_backward(da, ln1c)
        grads[f"l{i}.ln1.g"] += dg
        grads[f"l{i}.ln1.b"] += db
        dx = dx1 + dxa  # residual
    if seq is not None:
        text = ~seq.is_virtual
        np.add.at(grads["tok_emb"], seq.token_ids[text], dx[text])
        grads["pos_emb"][:n] += dx
    return grads, dx


def lm_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean negative log-likelihood over positions whose target is >= 0."""
    loss, _ = loss_and_dlogits(logits, targets)
    return loss


def loss_and_dlogits(logits: np.ndarray, targets: np.ndarray):
    targets = np.asarray(targets, dtype=np.int64)
    sel = targets >= 0
    n = int(sel.sum())
    if n == 0:
        raise ValueError("loss mask selects no positions")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1)) + logits.max(axis=1)
    picked = logits[np.arange(len(targets)), np.where(sel, targets, 0)]
    loss = float(((logsumexp - picked) * sel).sum() / n)
    soft = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    dlogits = np.zeros_like(logits)
    dlogits[sel] = soft[sel]
    dlogits[sel, targets[sel]] -= 1.0
    dlogits /= n
    return loss, dlogits


def sequence_loss(lm: ToyLM, seq: AssembledSequence, loss_mode: str = LOSS_ANSWER) -> float:
    logits = lm_forward(lm, seq)
    return lm_loss(logits, build_targets(seq, loss_mode))


@dataclass
class AdapterTrainConfig:
    epochs: int = 300
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    position: str = "prefix"
    loss_mode: str = LOSS_ANSWER

    def __post_init__(self):
        if self.position not in POSITIONS:
            raise ConfigError(f"position must be one of {POSITIONS}")
        if self.loss_mode not in (LOSS_ANSWER, LOSS_FULL):
            raise ConfigError(f"loss_mode must be '{LOSS_ANSWER}' or '{LOSS_FULL}'")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0, batch_size >= 1, lr > 0")


class _Adam:
    def __init__(self, arrays, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]

    def step(self, arrays, grads):
        self.t += 1
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            a -= self.lr * (m / (1 - self.b1 ** self.t)) / (
                np.sqrt(v / (1 - self.b2 ** self.t)) + self.eps
            )


def _instance_inputs(lm: ToyLM, embeddings, instance):
    """Resolve one prompt record into token ids and structural input vectors."""
    if instance.prefix_triple is None:
        raise DataError("adapter training needs instances with a prefix_triple")
    h, r, t = instance.prefix_triple
    if not (0 <= h < embeddings.num_entities and 0 <= t < embeddings.num_entities
            and 0 <= r < embeddings.num_relations):
        raise DataError(f"prefix triple {instance.prefix_triple} is outside the embedding tables")
    tok = lm.tokenizer
    text = instance.instruction
    if instance.demonstration:
        text = text + "\n" + instance.demonstration
    instr_ids = tok.encode(text)
    triple_ids = tok.encode(instance.triple_text)
    answer_ids = tok.encode(instance.answer) if instance.answer is not None else []
    vecs = np.stack(embeddings.adapter_inputs(instance.prefix_triple))
    return instr_ids, triple_ids, answer_ids, vecs


def train_adapter(embeddings, corpus, lm: ToyLM, adapter: PrefixAdapter,
                  config: AdapterTrainConfig):
    """Jointly optimize the adapter and toy-LM weights on next-token loss.

    The structural embedding tables are inputs only: they are asserted
    bit-identical after training. Returns (adapter, lm, report) where the
    report carries the loss history and training-set answer accuracy.
    """
    corpus = list(corpus)
    if not corpus:
        raise DataError("adapter training corpus is empty")
    for inst in corpus:
        if inst.answer is None:
            raise DataError("every adapter training instance needs an answer")
    ent_before = embeddings.entity_table.tobytes()
    rel_before = embeddings.relation_table.tobytes()

    prepared = [_instance_inputs(lm, embeddings, inst) for inst in corpus]
    rng = np.random.default_rng(config.seed)
    names = list(lm.params)
    arrays = [lm.params[n] for n in names] + [adapter.W, adapter.b]
    opt = _Adam(arrays, config.lr)
    history: list[float] = []

    n = len(prepared)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            acc = [np.zeros_like(a) for a in arrays]
            batch_loss = 0.0
            for j in batch:
                instr_ids, triple_ids, answer_ids, vecs = prepared[j]
                prefix = adapt(adapter, vecs[0], vecs[1], vecs[2], position=config.position)
                seq = assemble_sequence(prefix, instr_ids, triple_ids, answer_ids,
                                        config.position, lm.context_len)
                x0 = _embed(lm, seq)
                logits, cache = forward_embedded(lm, x0)
                loss, dlogits = loss_and_dlogits(logits, build_targets(seq, config.loss_mode))
                batch_loss += loss
                grads, dx0 = backward_embedded(lm, cache, dlogits, seq)
                dvirt = dx0[seq.is_virtual]
                for gi, name in enumerate(names):
                    acc[gi] += grads[name]
                # token = v @ W + b
                acc[len(names)] += vecs.T @ dvirt
                acc[len(names) + 1] += dvirt.sum(axis=0)
            if not np.isfinite(batch_loss):
                raise TrainingDivergenceError(f"non-finite adapter loss at epoch {epoch}")
            scale = 1.0 / len(batch)
            opt.step(arrays, [g * scale for g in acc])
            total += batch_loss
        history.append(total / n)
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.info("adapter epoch %d: mean loss %.6f", epoch, history[-1])

    if embeddings.entity_table.tobytes() != ent_before or embeddings.relation_table.tobytes() != rel_before:
        raise RuntimeError("structural embedding tables changed during adapter training")
    accuracy = answer_accuracy(lm, adapter, embeddings, corpus, config.position)
    report = {
        "loss_history": history,
        "embeddings_frozen": True,
        "answer_accuracy": accuracy,
    }
    return adapter, lm, report


def predict_answer(lm: ToyLM, adapter: PrefixAdapter, embeddings, instance,
                   position: str = "prefix") -> str:
    """Compare the next-token logits of "true" vs "false" after the prompt."""
    instr_ids, triple_ids, _, vecs = _instance_inputs(lm, embeddings, instance)
    prefix = adapt(adapter, vecs[0], vecs[1], vecs[2], position=position)
    seq = assemble_sequence(prefix, instr_ids, triple_ids, [], position, lm.context_len)
    logits = lm_forward(lm, seq)
    tok = lm.tokenizer
    true_id = tok.index.get("true", 0)
    false_id = tok.index.get("false", 0)
    return "true" if logits[-1, true_id] >= logits[-1, false_id] else "false"


def answer_accuracy(lm: ToyLM, adapter: PrefixAdapter, embeddings, instances,
                    position: str = "prefix") -> float:
    correct = 0
    for inst in instances:
        if inst.answer is None:
            raise DataError("accuracy needs instances with gold answers")
        correct += predict_answer(lm, adapter, embeddings, inst, position) == inst.answer
    return correct / len(instances)


def attention_reach_check(lm: ToyLM, position: str) -> dict:
    """Perturbation test of what the virtual tokens can influence.

    Builds a deterministic probe sequence, perturbs the virtual vectors,
    and measures the max logit change per position. Text before the
    virtual block must be exactly insensitive (causal mask); text after it
    must be sensitive.
    """
    rng = np.random.default_rng(0)
    v = lm.vocab_size
    instr = [int(x) for x in rng.integers(1, v, size=5)]
    triple = [int(x) for x in rng.integers(1, v, size=4)]
    prefix = VirtualTokenPrefix(rng.normal(size=(3, lm.d_model)), position)
    seq = assemble_sequence(prefix, instr, triple, [], position, lm.context_len)
    base = lm_forward(lm, seq)
    perturbed = AssembledSequence(
        seq.token_ids, seq.virtual + rng.normal(size=seq.virtual.shape), seq.spans
    )
    other = lm_forward(lm, perturbed)
    diff = np.abs(other - base).max(axis=1)
    start, end = seq.spans["virtual"]
    text_pos = [i for i in range(len(seq)) if not (start <= i < end)]
    before = [i for i in text_pos if i < start]
    after = [i for i in text_pos if i >= end]
    before_zero = all(diff[i] == 0.0 for i in before)
    after_sensitive = all(diff[i] > 0.0 for i in after)
    return {
        "position": position,
        "virtual_span": (start, end),
        "sensitivity": diff.tolist(),
        "before_positions": before,
        "after_positions": after,
        "before_all_exactly_zero": before_zero,
        "after_all_sensitive": after_sensitive,
        "ok": before_zero and after_sensitive,
    }


def causality_check(lm: ToyLM, length: int = 10) -> bool:
    """Perturb each input position and require bit-identical logits at every
    earlier position."""
    rng = np.random.default_rng(0)
    ids = rng.integers(0, lm.vocab_size, size=length)
    seq = text_sequence(ids)
    x0 = _embed(lm, seq)
    base, _ = forward_embedded(lm, x0)
    for j in range(length):
        x = x0.copy()
        x[j] += rng.normal(size=lm.d_model)
        pert, _ = forward_embedded(lm, x)
        if not np.array_equal(base[:j], pert[:j]):
            return False
        if not np.abs(pert[j:] - base[j:]).max() > 0:
            return False
    return True


def lm_grad_check(lm: ToyLM, adapter: PrefixAdapter, prefix_vecs, instr_ids, triple_ids,
                  answer_ids, position: str = "prefix", loss_mode: str = LOSS_ANSWER,
                  eps: float = 1e-5) -> float:
    """Max relative error between the hand-written gradients (LM parameters
    and adapter) and central finite differences on one sequence."""
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError(f"eps must be in [1e-6, 1e-3], got {eps}")
    vecs = np.asarray(prefix_vecs, dtype=np.float64)

    def run():
        prefix = adapt(adapter, vecs[0], vecs[1], vecs[2], position=position)
        seq = assemble_sequence(prefix, instr_ids, triple_ids, answer_ids,
                                position, lm.context_len)
        x0 = _embed(lm, seq)
        logits, cache = forward_embedded(lm, x0)
        loss, dlogits = loss_and_dlogits(logits, build_targets(seq, loss_mode))
        return loss, cache, dlogits, seq

    loss, cache, dlogits, seq = run()
    grads, dx0 = backward_embedded(lm, cache, dlogits, seq)
    a_w = vecs.T @ dx0[seq.is_virtual]
    a_b = dx0[seq.is_virtual].sum(axis=0)

    def loss_only():
        val, _, _, _ = run()
        return val

    worst = 0.0

    def compare(arr, analytic):
        nonlocal worst
        flat = arr.reshape(-1)
        aflat = analytic.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = loss_only()
            flat[idx] = orig - eps
            lo = loss_only()
            flat[idx] = orig
            fd = (hi - lo) / (2 * eps)
            a = aflat[idx]
            denom = max(abs(a), abs(fd))
            err = abs(a - fd) if denom < 1e-6 else abs(a - fd) / denom
            worst = max(worst, err)

    for name in lm.params:
        compare(lm.params[name], grads[name])
    compare(adapter.W, a_w)
    compare(adapter.b, a_b)
    return worst


def save_toylm(lm: ToyLM, path) -> None:
    """Sectioned binary: magic 'TLM1', u32 length-prefixed JSON metadata
    (dims + vocab), then per-tensor sections of u32 name length, name,
    u32 rank, u32 dims, f32 payload."""
    meta = json.dumps({
        "d_model": lm.d_model,
        "n_layers": lm.n_layers,
        "n_heads": lm.n_heads,
        "context_len": lm.context_len,
        "vocab": lm.tokenizer.vocab,
    }, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(LM_MAGIC)
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(lm.params)))
        for name, arr in lm.params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes())


def load_toylm(path) -> ToyLM:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != LM_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {LM_MAGIC!r}")
    ofs = 4

    def take(n):
        nonlocal ofs
        if ofs + n > len(blob):
            raise FormatError(f"{path}: truncated at byte {ofs}")
        out = blob[ofs:ofs + n]
        ofs += n
        return out

    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    (n_tensors,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        params[name] = arr.astype(np.float64)
    if ofs != len(blob):
        raise FormatError(f"{path}: {len(blob) - ofs} trailing bytes")
    return ToyLM(
        Tokenizer(meta["vocab"]), meta["d_model"], meta["n_layers"],
        meta["n_heads"], meta["context_len"], params,
    )
