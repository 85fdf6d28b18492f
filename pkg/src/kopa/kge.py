"""Structural embedding pre-training.

Implements the self-adversarial margin objective over filtered negative
samples: per positive, ``softplus(F(pos) - margin)`` plus a
softmax-weighted sum of ``softplus(margin - F(neg_i))`` where weights
concentrate on the most plausible (hardest) negatives. Weights are treated
as constants (no gradient flows through them).

Tables are stored float32 (matching the on-disk format); all arithmetic
runs in float64.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import scoring
from .errors import ConfigError, FormatError, TrainingDivergenceError
from .kg import KnowledgeGraph, corrupt_batch

log = logging.getLogger(__name__)

MAGIC = b"KGE1"
_FAMILY_CODES = {f: i for i, f in enumerate(scoring.FAMILIES)}
_CODE_FAMILIES = {i: f for f, i in _FAMILY_CODES.items()}

DEFAULT_MARGIN_GRID = (0.0, 4.0, 6.0, 8.0, 12.0)


@dataclass
class EmbeddingModel:
    """Embedding tables plus the score family and margin they were trained with."""

    family: str
    entity_table: np.ndarray    # (|E|, d_e) float32
    relation_table: np.ndarray  # (|R|, d_r) float32
    margin: float

    def __post_init__(self):
        d_r = scoring.check_dims(self.family, self.entity_table.shape[1])
        if self.relation_table.shape[1] != d_r:
            raise ConfigError(
                f"{self.family} expects relation dimension {d_r}, got {self.relation_table.shape[1]}"
            )
        if not (np.isfinite(self.entity_table).all() and np.isfinite(self.relation_table).all()):
            raise ConfigError("embedding tables contain non-finite values")

    @property
    def num_entities(self) -> int:
        return self.entity_table.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relation_table.shape[0]

    @property
    def entity_dim(self) -> int:
        return self.entity_table.shape[1]

    @property
    def relation_dim(self) -> int:
        return self.relation_table.shape[1]

    def score(self, triple) -> float:
        """Dissimilarity of one index triple; lower = more plausible."""
        return float(self.score_many(np.asarray([triple]))[0])

    def score_many(self, triples) -> np.ndarray:
        t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        ent = self.entity_table.astype(np.float64)
        rel = self.relation_table.astype(np.float64)
        return scoring.score_batch(self.family, ent[t[:, 0]], rel[t[:, 1]], ent[t[:, 2]])

    def adapter_inputs(self, triple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(h, r, t) vectors, each of width d_e, for the prefix adapter.

        Complex-family rows are already stored flat as [real | imaginary];
        RotatE relation phases are expanded to [cos | sin] so all three
        vectors share one width.
        """
        h, r, t = triple
        ent = self.entity_table
        hv = ent[h].astype(np.float64)
        tv = ent[t].astype(np.float64)
        rrow = self.relation_table[r].astype(np.float64)
        if self.family == scoring.ROTATE:
            rv = np.concatenate([np.cos(rrow), np.sin(rrow)])
        else:
            rv = rrow
        return hv, rv, tv


@dataclass
class TrainConfig:
    num_negatives: int = 32
    lr: float = 0.05
    epochs: int = 500
    batch_size: int = 512
    adv_temperature: float = 1.0
    seed: int = 0
    margin_grid: tuple[float, ...] = DEFAULT_MARGIN_GRID
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.num_negatives < 1:
            raise ConfigError(f"num_negatives must be >= 1, got {self.num_negatives}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.adv_temperature < 0:
            raise ConfigError(f"adv_temperature must be >= 0, got {self.adv_temperature}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not self.margin_grid:
            raise ConfigError("margin_grid must be non-empty")


def init_embeddings(kg: KnowledgeGraph, family: str, dim: int,
                    rng: np.random.Generator, margin: float = 8.0) -> EmbeddingModel:
    """Uniform init in [-margin/dim, +margin/dim]; RotatE phases uniform in [-pi, pi).

    A zero margin (it is on the conventional tuning grid) would collapse the
    init range to a point, so the half-range falls back to 2/dim then.
    """
    d_r = scoring.check_dims(family, dim)
    half = (margin if margin > 0 else 2.0) / dim
    ent = rng.uniform(-half, half, size=(kg.num_entities, dim))
    if family == scoring.ROTATE:
        rel = rng.uniform(-np.pi, np.pi, size=(kg.num_relations, d_r))
    else:
        rel = rng.uniform(-half, half, size=(kg.num_relations, d_r))
    return EmbeddingModel(family, ent.astype(np.float32), rel.astype(np.float32), float(margin))


def adversarial_weights(neg_scores, alpha: float) -> np.ndarray:
    """Softmax of ``-alpha * F`` over the negatives: harder (lower-F)
    negatives get more weight; weights sum to 1. ``alpha = 0`` is uniform."""
    f = neg_scores if isinstance(neg_scores, np.ndarray) else np.asarray(neg_scores, dtype=np.float64)
    if f.size == 0:
        raise ValueError("neg_scores must be non-empty")
    z = -alpha * f
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _gather(family: str, ent: np.ndarray, rel: np.ndarray, triples: np.ndarray):
    return ent[triples[:, 0]], rel[triples[:, 1]], ent[triples[:, 2]]


def _scatter_add(out: np.ndarray, rows: np.ndarray, grads: np.ndarray) -> None:
    """out[rows] += grads with duplicate rows accumulated.

    Sort + reduceat; much faster than np.add.at for the wide, heavily
    duplicated row lists a training batch produces.
    """
    order = np.argsort(rows, kind="stable")
    sorted_rows = rows[order]
    boundaries = np.flatnonzero(np.diff(sorted_rows)) + 1
    starts = np.concatenate([[0], boundaries])
    sums = np.add.reduceat(grads[order], starts, axis=0)
    out[sorted_rows[starts]] += sums


def _loss_core(family, ent, rel, margin, pos, neg, alpha, with_grads: bool,
               fixed_weights: np.ndarray | None = None):
    """Mean loss over the batch; optionally dense f64 gradients for both tables.

    ``fixed_weights`` pins the self-adversarial weights to given constants;
    the finite-difference oracle uses this to respect their detachment.
    """
    n, k = neg.shape[0], neg.shape[1]
    hp, rp, tp = _gather(family, ent, rel, pos)
    flat = neg.reshape(-1, 3)
    hn, rn, tn = _gather(family, ent, rel, flat)
    if with_grads:
        f_pos, gh_p, gr_p, gt_p = scoring.score_and_grad(family, hp, rp, tp)
        f_neg, gh_n, gr_n, gt_n = scoring.score_and_grad(family, hn, rn, tn)
    else:
        f_pos = scoring.score_batch(family, hp, rp, tp)
        f_neg = scoring.score_batch(family, hn, rn, tn)
    f_neg = f_neg.reshape(n, k)

    w = adversarial_weights(f_neg, alpha) if fixed_weights is None else fixed_weights
    loss = float(
        np.mean(_softplus(f_pos - margin) + (w * _softplus(margin - f_neg)).sum(axis=1))
    )
    if not with_grads:
        return loss, None, None

    d_pos = expit(f_pos - margin) / n                      # dL/dF_pos
    d_neg = (-w * expit(margin - f_neg) / n).reshape(-1)   # dL/dF_neg, weights detached
    ge = np.zeros_like(ent)
    gr = np.zeros_like(rel)
    ent_rows = np.concatenate([pos[:, 0], pos[:, 2], flat[:, 0], flat[:, 2]])
    ent_grads = np.concatenate([
        gh_p * d_pos[:, None], gt_p * d_pos[:, None],
        gh_n * d_neg[:, None], gt_n * d_neg[:, None],
    ])
    _scatter_add(ge, ent_rows, ent_grads)
    rel_rows = np.concatenate([pos[:, 1], flat[:, 1]])
    rel_grads = np.concatenate([gr_p * d_pos[:, None], gr_n * d_neg[:, None]])
    _scatter_add(gr, rel_rows, rel_grads)
    return loss, ge, gr


def _as_batch(positives, negatives):
    pos = np.asarray(positives, dtype=np.int64).reshape(-1, 3)
    neg = np.asarray(negatives, dtype=np.int64)
    if neg.ndim != 3 or neg.shape[0] != pos.shape[0] or neg.shape[2] != 3:
        raise ValueError("negatives must be one equal-length list of triples per positive")
    return pos, neg


def loss_batch(model: EmbeddingModel, positives, negatives, alpha: float) -> float:
    """Mean self-adversarial margin loss of a batch of positives, each with
    the same number of filtered negatives."""
    pos, neg = _as_batch(positives, negatives)
    ent = model.entity_table.astype(np.float64)
    rel = model.relation_table.astype(np.float64)
    loss, _, _ = _loss_core(model.family, ent, rel, model.margin, pos, neg, alpha, with_grads=False)
    return loss


def loss_grads(model: EmbeddingModel, positives, negatives, alpha: float):
    """Loss plus dense float64 gradients w.r.t. the entity and relation tables."""
    pos, neg = _as_batch(positives, negatives)
    ent = model.entity_table.astype(np.float64)
    rel = model.relation_table.astype(np.float64)
    return _loss_core(model.family, ent, rel, model.margin, pos, neg, alpha, with_grads=True)


def grad_check(model: EmbeddingModel, batch, eps: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central finite
    differences over every embedding coordinate the batch touches.

    ``batch`` is ``(positives, negatives, alpha)``. Coordinates where both
    gradients are below 1e-6 are compared absolutely.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError(f"eps must be in [1e-6, 1e-3], got {eps}")
    positives, negatives, alpha = batch
    pos, neg = _as_batch(positives, negatives)
    ent = model.entity_table.astype(np.float64)
    rel = model.relation_table.astype(np.float64)
    _, ge, gr = _loss_core(model.family, ent, rel, model.margin, pos, neg, alpha, with_grads=True)

    # the weights are detached from gradient flow, so the finite-difference
    # reference must evaluate the loss with the base-point weights held fixed
    base_neg = model.score_many(neg.reshape(-1, 3)).reshape(neg.shape[0], neg.shape[1])
    w0 = adversarial_weights(base_neg, alpha)

    def loss_at(e, r):
        val, _, _ = _loss_core(model.family, e, r, model.margin, pos, neg, alpha,
                               with_grads=False, fixed_weights=w0)
        return val

    ent_rows = np.unique(np.concatenate([pos[:, [0, 2]].ravel(), neg[..., [0, 2]].ravel()]))
    rel_rows = np.unique(np.concatenate([pos[:, 1], neg[..., 1].ravel()]))

    worst = 0.0
    for table, grad, rows in ((ent, ge, ent_rows), (rel, gr, rel_rows)):
        for row in rows:
            for col in range(table.shape[1]):
                orig = table[row, col]
                table[row, col] = orig + eps
                hi = loss_at(ent, rel)
                table[row, col] = orig - eps
                lo = loss_at(ent, rel)
                table[row, col] = orig
                fd = (hi - lo) / (2 * eps)
                a = grad[row, col]
                denom = max(abs(a), abs(fd))
                err = abs(a - fd) if denom < 1e-6 else abs(a - fd) / denom
                worst = max(worst, err)
    return worst


class _Adam:
    """Dense Adam over a fixed list of arrays; deterministic."""

    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, params, grads):
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(kg: KnowledgeGraph, config: TrainConfig, family: str, dim: int,
          margin: float) -> tuple[EmbeddingModel, list[float]]:
    """Minibatch optimization of the self-adversarial margin loss over the
    training triples, with fresh filtered negatives every epoch.

    Deterministic under ``config.seed`` (single-worker execution). Returns
    the trained model and the per-epoch mean loss history.
    """
    rng = np.random.default_rng(config.seed)
    model = init_embeddings(kg, family, dim, rng, margin)
    # training arithmetic runs in float32 (the table dtype); the float64
    # path stays available through loss_batch/grad_check for verification
    ent = model.entity_table.copy()
    rel = model.relation_table.copy()
    triples = np.asarray(kg.triples, dtype=np.int64).reshape(-1, 3)
    n = len(triples)
    history: list[float] = []
    if n == 0 or config.epochs == 0:
        return model, history

    opt = _Adam([ent.shape, rel.shape], config.lr) if config.optimizer == "adam" else None
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = triples[order[start:start + config.batch_size]]
            neg = corrupt_batch(kg, batch, config.num_negatives, rng)
            # divergence shows up as a non-finite loss, checked right below
            with np.errstate(over="ignore", invalid="ignore"):
                loss, ge, gr = _loss_core(
                    family, ent, rel, margin, batch, neg, config.adv_temperature, with_grads=True
                )
            if not np.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite loss at epoch {epoch}")
            total += loss * len(batch)
            if opt is not None:
                opt.step([ent, rel], [ge, gr])
            else:
                ent -= config.lr * ge
                rel -= config.lr * gr
        history.append(total / n)
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            log.info("epoch %d: mean loss %.6f", epoch, history[-1])
    return EmbeddingModel(family, ent, rel, float(margin)), history


def save_embeddings(model: EmbeddingModel, path) -> None:
    """Write magic 'KGE1', five little-endian u32 header fields
    (family code, |E|, |R|, d_e, d_r), both tables as little-endian f32
    rows, then the margin as one f32."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack(
            "<5I", _FAMILY_CODES[model.family],
            model.num_entities, model.num_relations,
            model.entity_dim, model.relation_dim,
        ))
        f.write(model.entity_table.astype("<f4").tobytes())
        f.write(model.relation_table.astype("<f4").tobytes())
        f.write(struct.pack("<f", model.margin))


def load_embeddings(path, kg: KnowledgeGraph | None = None) -> EmbeddingModel:
    """Inverse of :func:`save_embeddings`. If ``kg`` is given, header counts
    are cross-checked against its vocabulary sizes."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    header_end = 4 + struct.calcsize("<5I")
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated header")
    code, n_ent, n_rel, d_e, d_r = struct.unpack("<5I", blob[4:header_end])
    if code not in _CODE_FAMILIES:
        raise FormatError(f"{path}: unknown family code {code}")
    family = _CODE_FAMILIES[code]
    expected = header_end + 4 * (n_ent * d_e + n_rel * d_r) + 4
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    if kg is not None and (n_ent != kg.num_entities or n_rel != kg.num_relations):
        raise FormatError(
            f"{path}: header counts ({n_ent} entities, {n_rel} relations) do not match "
            f"the graph ({kg.num_entities}, {kg.num_relations})"
        )
    ofs = header_end
    ent = np.frombuffer(blob, dtype="<f4", count=n_ent * d_e, offset=ofs).reshape(n_ent, d_e).copy()
    ofs += 4 * n_ent * d_e
    rel = np.frombuffer(blob, dtype="<f4", count=n_rel * d_r, offset=ofs).reshape(n_rel, d_r).copy()
    ofs += 4 * n_rel * d_r
    (margin,) = struct.unpack("<f", blob[ofs:ofs + 4])
    try:
        return EmbeddingModel(family, ent, rel, float(margin))
    except ConfigError as exc:
        raise FormatError(f"{path}: {exc}") from exc
