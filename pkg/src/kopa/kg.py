"""Knowledge graph data model: loading, negative sampling, hard-negative
mining, and inductive splitting.

Triples are stored as dense integer index tuples ``(head, relation, tail)``.
Triple files are UTF-8 TSV: ``head<TAB>relation<TAB>tail`` for training data
and ``head<TAB>relation<TAB>tail<TAB>label`` (label ``1`` or ``0``) for
validation/test data. Description files are ``id<TAB>description``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import (
    CorruptionExhaustedError,
    DegenerateSplitError,
    ParseError,
)

log = logging.getLogger(__name__)

Triple = tuple[int, int, int]

HEAD = "head"
TAIL = "tail"

# cap on rejection sampling before falling back to exhaustive candidate
# enumeration in corrupt_triple
_REJECTION_TRIES = 32


@dataclass(frozen=True)
class LabeledTriple:
    triple: Triple
    label: bool


@dataclass(frozen=True)
class KnowledgeGraph:
    """Immutable triple store with integer-indexed vocabularies.

    Safe for shared read access from multiple workers; all sampling
    operations take an explicit seeded RNG.
    """

    entities: tuple[str, ...]
    relations: tuple[str, ...]
    triples: tuple[Triple, ...]
    entity_desc: tuple[str, ...]
    relation_desc: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "entity_index", {e: i for i, e in enumerate(self.entities)})
        object.__setattr__(self, "relation_index", {r: i for i, r in enumerate(self.relations)})
        object.__setattr__(self, "triple_set", frozenset(self.triples))
        # sorted integer codes for vectorized membership tests
        object.__setattr__(self, "_codes", np.sort(self.encode(np.asarray(self.triples, dtype=np.int64).reshape(-1, 3))))
        incident: list[list[int]] = [[] for _ in self.entities]
        for i, (h, _, t) in enumerate(self.triples):
            incident[h].append(i)
            if t != h:
                incident[t].append(i)
        object.__setattr__(self, "incident", tuple(tuple(ix) for ix in incident))

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def encode(self, triples: np.ndarray) -> np.ndarray:
        """Pack an (n, 3) index array into scalar codes for set membership."""
        t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        return (t[:, 0] * self.num_relations + t[:, 1]) * self.num_entities + t[:, 2]

    def contains(self, triples: np.ndarray) -> np.ndarray:
        """Vectorized membership of (n, 3) index triples in the training set."""
        codes = self.encode(triples)
        pos = np.searchsorted(self._codes, codes)
        pos = np.minimum(pos, len(self._codes) - 1) if len(self._codes) else pos
        if not len(self._codes):
            return np.zeros(len(codes), dtype=bool)
        return self._codes[pos] == codes

    def describe_entity(self, e: int) -> str:
        return self.entity_desc[e]

    def describe_relation(self, r: int) -> str:
        return self.relation_desc[r]

    def triple_ids(self, t: Triple) -> tuple[str, str, str]:
        return (self.entities[t[0]], self.relations[t[1]], self.entities[t[2]])


@dataclass(frozen=True)
class InductiveSplit:
    """A train/test partition hiding a fraction of entities from training."""

    inductive_entities: frozenset[int]
    retained_train: tuple[Triple, ...]
    seen_test: tuple[LabeledTriple, ...]
    unseen_test: tuple[LabeledTriple, ...]
    rate: float


def build_graph(
    entities,
    relations,
    triples,
    entity_desc=None,
    relation_desc=None,
) -> KnowledgeGraph:
    """Construct a graph directly from id lists and index triples.

    Convenience for tests and notebook use; file-based loading goes through
    :func:`load_graph`.
    """
    entities = tuple(entities)
    relations = tuple(relations)
    if entity_desc is None:
        entity_desc = tuple("" for _ in entities)
    if relation_desc is None:
        relation_desc = tuple("" for _ in relations)
    seen = set()
    dedup = []
    for t in triples:
        t = (int(t[0]), int(t[1]), int(t[2]))
        if t not in seen:
            seen.add(t)
            dedup.append(t)
    return KnowledgeGraph(entities, relations, tuple(dedup), tuple(entity_desc), tuple(relation_desc))


def _read_descriptions(path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" in line:
                ident, desc = line.split("\t", 1)
            else:
                ident, desc = line, ""
            if not ident:
                raise ParseError(f"{path}:{lineno}: empty id")
            out.append((ident, desc))
    return out


def _read_triple_lines(path, with_label: bool):
    expected = 4 if with_label else 3
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != expected:
                raise ParseError(
                    f"{path}:{lineno}: expected {expected} tab-separated columns, got {len(parts)}"
                )
            if with_label:
                if parts[3] not in ("0", "1"):
                    raise ParseError(f"{path}:{lineno}: label must be '0' or '1', got {parts[3]!r}")
                yield lineno, parts[0], parts[1], parts[2], parts[3] == "1"
            else:
                yield lineno, parts[0], parts[1], parts[2], None


def load_graph(
    train_path,
    valid_path,
    test_path,
    entity_desc_path,
    relation_desc_path,
) -> tuple[KnowledgeGraph, list[LabeledTriple], list[LabeledTriple]]:
    """Load a dataset directory into a graph plus labeled valid/test sets.

    Vocabularies are built in first-appearance order: description files
    first, then any ids met only in triple files (those get an empty
    description). Duplicate training triples are dropped with a warning.
    """
    ent_rows = _read_descriptions(entity_desc_path)
    rel_rows = _read_descriptions(relation_desc_path)

    entities: list[str] = []
    entity_desc: list[str] = []
    ent_index: dict[str, int] = {}
    for ident, desc in ent_rows:
        if ident not in ent_index:
            ent_index[ident] = len(entities)
            entities.append(ident)
            entity_desc.append(desc)

    relations: list[str] = []
    relation_desc: list[str] = []
    rel_index: dict[str, int] = {}
    for ident, desc in rel_rows:
        if ident not in rel_index:
            rel_index[ident] = len(relations)
            relations.append(ident)
            relation_desc.append(desc)

    def ent(ident: str) -> int:
        if ident not in ent_index:
            ent_index[ident] = len(entities)
            entities.append(ident)
            entity_desc.append("")
        return ent_index[ident]

    def rel(ident: str) -> int:
        if ident not in rel_index:
            rel_index[ident] = len(relations)
            relations.append(ident)
            relation_desc.append("")
        return rel_index[ident]

    train: list[Triple] = []
    seen: set[Triple] = set()
    dup_count = 0
    first_dup = None
    for lineno, h, r, t, _ in _read_triple_lines(train_path, with_label=False):
        triple = (ent(h), rel(r), ent(t))
        if triple in seen:
            dup_count += 1
            if first_dup is None:
                first_dup = lineno
            continue
        seen.add(triple)
        train.append(triple)
    if dup_count:
        log.warning(
            "%s: dropped %d duplicate training triple(s), first at line %d",
            train_path, dup_count, first_dup,
        )

    def read_labeled(path) -> list[LabeledTriple]:
        out = []
        for _, h, r, t, label in _read_triple_lines(path, with_label=True):
            out.append(LabeledTriple((ent(h), rel(r), ent(t)), label))
        return out

    valid = read_labeled(valid_path)
    test = read_labeled(test_path)

    kg = KnowledgeGraph(
        tuple(entities), tuple(relations), tuple(train), tuple(entity_desc), tuple(relation_desc)
    )
    log.info(
        "loaded graph: %d entities, %d relations, %d train triples, %d valid, %d test",
        kg.num_entities, kg.num_relations, len(kg.triples), len(valid), len(test),
    )
    return kg, valid, test


def neighborhood(kg: KnowledgeGraph, e: int, limit: int, rng: np.random.Generator) -> list[Triple]:
    """Up to ``limit`` distinct training triples incident to entity ``e``.

    Sampled uniformly without replacement; all incident triples are returned
    in storage order when there are no more than ``limit`` of them.
    """
    if limit < 0:
        raise ValueError(f"limit must be >= 0, got {limit}")
    idx = kg.incident[e]
    if limit == 0:
        return []
    if len(idx) <= limit:
        return [kg.triples[i] for i in idx]
    chosen = rng.choice(len(idx), size=limit, replace=False)
    return [kg.triples[idx[i]] for i in chosen]


def _corrupt(kg: KnowledgeGraph, t: Triple, side: str, rng: np.random.Generator,
             forbidden: frozenset[Triple] | None = None) -> Triple:
    if side not in (HEAD, TAIL):
        raise ValueError(f"side must be {HEAD!r} or {TAIL!r}, got {side!r}")
    h, r, tail = t

    def make(e: int) -> Triple:
        return (e, r, tail) if side == HEAD else (h, r, e)

    def ok(cand: Triple) -> bool:
        if cand in kg.triple_set:
            return False
        return forbidden is None or cand not in forbidden

    for _ in range(_REJECTION_TRIES):
        cand = make(int(rng.integers(kg.num_entities)))
        if ok(cand):
            return cand
    valid = [e for e in range(kg.num_entities) if ok(make(e))]
    if not valid:
        raise CorruptionExhaustedError(
            f"no valid {side} corruption exists for triple {kg.triple_ids(t)}"
        )
    return make(valid[int(rng.integers(len(valid)))])


def corrupt_triple(kg: KnowledgeGraph, t: Triple, side: str, rng: np.random.Generator) -> Triple:
    """Replace one side of ``t`` with a uniformly sampled entity such that
    the result is not a known training triple (filtered corruption)."""
    return _corrupt(kg, t, side, rng)


def sample_negatives(kg: KnowledgeGraph, t: Triple, num: int, rng: np.random.Generator) -> list[Triple]:
    """``num`` independent filtered corruptions of ``t``; each draw corrupts
    head or tail with probability 1/2. Duplicates among the draws are allowed."""
    if num < 1:
        raise ValueError(f"num must be >= 1, got {num}")
    out = []
    for _ in range(num):
        side = HEAD if rng.random() < 0.5 else TAIL
        out.append(_corrupt(kg, t, side, rng))
    return out


def corrupt_batch(kg: KnowledgeGraph, triples: np.ndarray, num: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Vectorized filtered corruption: (n, 3) positives -> (n, num, 3) negatives.

    Semantics match :func:`sample_negatives` (side chosen with probability
    1/2 per draw, entity resampled until the result is unknown); used by the
    trainer where per-triple Python loops would dominate runtime.
    """
    t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    n = len(t)
    neg = np.repeat(t[:, None, :], num, axis=1)
    corrupt_head = rng.random((n, num)) < 0.5
    col = np.where(corrupt_head, 0, 2)
    rows = np.arange(n)[:, None].repeat(num, axis=1)
    neg[rows, np.arange(num)[None, :].repeat(n, axis=0), col] = rng.integers(
        kg.num_entities, size=(n, num)
    )
    flat = neg.reshape(-1, 3)
    flat_col = col.reshape(-1)
    bad = kg.contains(flat)
    tries = 0
    while bad.any():
        tries += 1
        if tries > 200:
            # pathological graph; surface the proper per-triple error
            i = int(np.nonzero(bad)[0][0])
            side = HEAD if flat_col[i] == 0 else TAIL
            _corrupt(kg, tuple(int(x) for x in t[i // num]), side, rng)
            raise CorruptionExhaustedError("corruption did not converge")
        idx = np.nonzero(bad)[0]
        flat[idx, flat_col[idx]] = rng.integers(kg.num_entities, size=len(idx))
        bad[idx] = kg.contains(flat[idx])
    return flat.reshape(n, num, 3)


def mine_hard_negatives(
    kg: KnowledgeGraph,
    scorer,
    positives,
    candidates_per_positive: int,
    rng: np.random.Generator,
    forbidden=None,
) -> list[LabeledTriple]:
    """Build a 1:1 labeled set by pairing each positive with its hardest
    filtered corruption.

    ``scorer`` maps a triple to a dissimilarity (lower = more plausible);
    for each positive, ``candidates_per_positive`` corruptions are drawn
    (head or tail with probability 1/2) and the lowest-dissimilarity one is
    kept, labeled false. Ties fall to the first-sampled candidate.
    ``forbidden`` adds triples (e.g. valid/test positives) that corruption
    must avoid on top of the training set.
    """
    if candidates_per_positive < 1:
        raise ValueError(f"candidates_per_positive must be >= 1, got {candidates_per_positive}")
    extra = frozenset(tuple(t) for t in forbidden) if forbidden is not None else None
    out: list[LabeledTriple] = []
    for pos in positives:
        pos = (int(pos[0]), int(pos[1]), int(pos[2]))
        cands = []
        for _ in range(candidates_per_positive):
            side = HEAD if rng.random() < 0.5 else TAIL
            cands.append(_corrupt(kg, pos, side, rng, forbidden=extra))
        scores = [float(scorer(c)) for c in cands]
        best = int(np.argmin(scores))
        out.append(LabeledTriple(pos, True))
        out.append(LabeledTriple(cands[best], False))
    return out


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def make_inductive_split(
    kg: KnowledgeGraph,
    labeled,
    rate: float,
    rng: np.random.Generator,
) -> InductiveSplit:
    """Hide ``round(rate * |E|)`` uniformly chosen entities from training.

    Every training triple touching a hidden entity is removed; the labeled
    triples are partitioned into seen/unseen by the same touch rule.
    Rounding is half-up.
    """
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"inductive rate must be in [0, 1), got {rate}")
    n_hide = _round_half_up(rate * kg.num_entities)
    hidden = frozenset(
        int(e) for e in rng.choice(kg.num_entities, size=n_hide, replace=False)
    ) if n_hide else frozenset()
    retained = tuple(t for t in kg.triples if t[0] not in hidden and t[2] not in hidden)
    if kg.triples and not retained:
        raise DegenerateSplitError(
            f"inductive rate {rate} removed every training triple"
        )
    seen = tuple(lt for lt in labeled if lt.triple[0] not in hidden and lt.triple[2] not in hidden)
    unseen = tuple(lt for lt in labeled if lt.triple[0] in hidden or lt.triple[2] in hidden)
    return InductiveSplit(hidden, retained, seen, unseen, rate)


def write_triples(path, kg: KnowledgeGraph, triples) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t in triples:
            h, r, tl = kg.triple_ids(tuple(t))
            f.write(f"{h}\t{r}\t{tl}\n")


def write_labeled(path, kg: KnowledgeGraph, labeled) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for lt in labeled:
            h, r, tl = kg.triple_ids(lt.triple)
            f.write(f"{h}\t{r}\t{tl}\t{1 if lt.label else 0}\n")


def write_entity_set(path, kg: KnowledgeGraph, entity_indices) -> None:
    """Split manifest: sorted, newline-separated entity ids."""
    ids = sorted(kg.entities[e] for e in entity_indices)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ident in ids:
            f.write(ident + "\n")
