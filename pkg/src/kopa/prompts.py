"""Prompt corpora for triple classification with language models.

Five prompt modes share one instance record:

- ``zsr``  instruction + verbalized triple, no demonstrations, no answer
- ``icl``  k labeled demonstration triples drawn from the query's
           neighborhood (balanced true/false), then the query
- ``it``   instruction-tuning pair: verbalized triple + "true"/"false"
- ``sit``  like ``it`` plus up to m verbalized neighborhood facts
- ``kopa`` like ``it`` but the record also names the triple whose
           structural embeddings become virtual prefix tokens

Corpora serialize to JSONL with keys ``mode, instruction, demonstration,
input, output, triple, prefix_triple``; absent optional fields are omitted.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .kg import HEAD, TAIL, KnowledgeGraph, Triple, corrupt_triple, neighborhood

log = logging.getLogger(__name__)

INSTRUCTION = (
    "Given a triple from a knowledge graph, determine whether it is a "
    "correct fact. Answer with true or false."
)

MODES = ("zsr", "icl", "it", "sit", "kopa")
TRUE = "true"
FALSE = "false"
UNKNOWN = "unknown"

_ANSWER_RE = re.compile(r"\b(true|false)\b", re.IGNORECASE)
_JSONL_KEYS = ("mode", "instruction", "demonstration", "input", "output", "triple", "prefix_triple")


@dataclass(frozen=True)
class PromptInstance:
    mode: str
    instruction: str
    demonstration: str | None
    triple_text: str
    answer: str | None
    triple: Triple
    prefix_triple: Triple | None = None


@dataclass(frozen=True)
class DemoSet:
    items: tuple[tuple[Triple, bool], ...]
    k: int


def normalize_text(text: str) -> str:
    """Collapse all whitespace runs (tabs, newlines, ...) to single spaces."""
    return " ".join(text.split())


def verbalize_triple(kg: KnowledgeGraph, t: Triple) -> str:
    """``D(h) D(r) D(t)`` joined by single spaces; an empty description
    falls back to the raw id."""
    h, r, tail = t
    parts = (
        normalize_text(kg.entity_desc[h]) or kg.entities[h],
        normalize_text(kg.relation_desc[r]) or kg.relations[r],
        normalize_text(kg.entity_desc[tail]) or kg.entities[tail],
    )
    return " ".join(parts)


def render_prompt(instance: PromptInstance, include_answer: bool = False) -> str:
    """Single serialized prompt string: instruction, optional demonstration
    block, the query triple, and (for training text) the answer."""
    parts = [instance.instruction]
    if instance.demonstration:
        parts.append(instance.demonstration)
    parts.append(instance.triple_text)
    if include_answer and instance.answer is not None:
        parts.append(instance.answer)
    return "\n".join(parts)


def prompt_token_count(instance: PromptInstance) -> int:
    """Whitespace token count of the serialized prompt (no answer)."""
    return len(render_prompt(instance).split())


def build_zsr(kg: KnowledgeGraph, t: Triple) -> PromptInstance:
    return PromptInstance(
        mode="zsr",
        instruction=INSTRUCTION,
        demonstration=None,
        triple_text=verbalize_triple(kg, t),
        answer=None,
        triple=tuple(t),
    )


def _demo_pool(kg: KnowledgeGraph, t: Triple) -> list[Triple]:
    h, _, tail = t
    seen_idx: set[int] = set()
    pool = []
    for i in list(kg.incident[h]) + list(kg.incident[tail]):
        if i in seen_idx:
            continue
        seen_idx.add(i)
        if kg.triples[i] != tuple(t):
            pool.append(kg.triples[i])
    return pool


def sample_demos(kg: KnowledgeGraph, t: Triple, k: int, rng: np.random.Generator) -> DemoSet:
    """Balanced demonstrations for ``t``: ceil(k/2) positives from the
    neighborhoods of its head and tail, floor(k/2) filtered corruptions of
    those positives, interleaved starting with a positive.

    Corruptions replace a side that keeps a query entity in place, so every
    demo shares its head or tail with the query. Odd ``k`` gives the extra
    shot to the positives. Queries with no neighbors fall back to uniform
    sampling over all training triples (logged).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n_pos = (k + 1) // 2
    n_neg = k // 2
    pool = _demo_pool(kg, t)
    if not pool:
        log.warning("entity pair of %s has no neighbors; falling back to uniform train sampling",
                    kg.triple_ids(t))
        pool = [tr for tr in kg.triples if tr != tuple(t)]
        if not pool:
            raise DataError("cannot sample demonstrations from an empty graph")
    if len(pool) >= n_pos:
        idx = rng.choice(len(pool), size=n_pos, replace=False)
    else:
        extra = rng.choice(len(pool), size=n_pos - len(pool), replace=True)
        idx = np.concatenate([np.arange(len(pool)), extra])
    positives = [pool[int(i)] for i in idx]

    query_ents = {t[0], t[2]}
    negatives: list[Triple] = []
    for i in range(n_neg):
        p = positives[i % len(positives)]
        sides = []
        if p[2] in query_ents:
            sides.append(HEAD)   # tail keeps the shared entity
        if p[0] in query_ents:
            sides.append(TAIL)
        if not sides:            # fallback pool only; sharing not possible
            sides = [HEAD, TAIL]
        side = sides[int(rng.integers(len(sides)))]
        negatives.append(corrupt_triple(kg, p, side, rng))

    items: list[tuple[Triple, bool]] = []
    for i in range(n_neg):
        items.append((positives[i], True))
        items.append((negatives[i], False))
    if n_pos > n_neg:
        items.append((positives[n_pos - 1], True))
    return DemoSet(tuple(items), k)


def build_icl(kg: KnowledgeGraph, t: Triple, k: int, rng: np.random.Generator) -> PromptInstance:
    demos = sample_demos(kg, t, k, rng)
    lines = [f"{verbalize_triple(kg, d)} {TRUE if label else FALSE}" for d, label in demos.items]
    return PromptInstance(
        mode="icl",
        instruction=INSTRUCTION,
        demonstration="\n".join(lines),
        triple_text=verbalize_triple(kg, t),
        answer=None,
        triple=tuple(t),
    )


def build_it(kg: KnowledgeGraph, t: Triple, answer: str | None) -> PromptInstance:
    return PromptInstance(
        mode="it",
        instruction=INSTRUCTION,
        demonstration=None,
        triple_text=verbalize_triple(kg, t),
        answer=answer,
        triple=tuple(t),
    )


def build_sit(kg: KnowledgeGraph, t: Triple, m: int, rng: np.random.Generator,
              answer: str | None = None) -> PromptInstance:
    """Instruction-tuning instance enriched with up to ``m`` verbalized
    neighborhood facts: ceil(m/2) around the head, floor(m/2) around the
    tail, the query itself excluded. Fewer neighbors yield fewer lines;
    ``m = 0`` degenerates to the vanilla instance."""
    if m < 0:
        raise ValueError(f"m must be >= 0, got {m}")
    h, _, tail = t
    head_quota = (m + 1) // 2
    tail_quota = m // 2
    picks: list[Triple] = []
    seen = {tuple(t)}
    for e, quota in ((h, head_quota), (tail, tail_quota)):
        if quota == 0:
            continue
        cand = [tr for tr in neighborhood(kg, e, len(kg.incident[e]), rng) if tr not in seen]
        if len(cand) > quota:
            idx = rng.choice(len(cand), size=quota, replace=False)
            cand = [cand[int(i)] for i in idx]
        picks.extend(cand)
        seen.update(cand)
    lines = [verbalize_triple(kg, p) for p in picks]
    return PromptInstance(
        mode="sit",
        instruction=INSTRUCTION,
        demonstration="\n".join(lines) if lines else None,
        triple_text=verbalize_triple(kg, t),
        answer=answer,
        triple=tuple(t),
    )


def build_kopa(kg: KnowledgeGraph, t: Triple, answer: str | None = None) -> PromptInstance:
    """Vanilla instruction prompt whose record carries the triple to encode
    as three virtual prefix tokens; the text itself holds no neighborhood
    block, so the prompt overhead is a constant 3 tokens."""
    return PromptInstance(
        mode="kopa",
        instruction=INSTRUCTION,
        demonstration=None,
        triple_text=verbalize_triple(kg, t),
        answer=answer,
        triple=tuple(t),
        prefix_triple=tuple(t),
    )


def _labeled_builder(kg, mode, t, answer, child, neighbors):
    if mode == "it":
        return build_it(kg, t, answer)
    if mode == "sit":
        return build_sit(kg, t, neighbors, child, answer=answer)
    if mode == "kopa":
        return build_kopa(kg, t, answer=answer)
    raise ValueError(f"mode {mode!r} is not a labeled training mode")


def build_training_corpus(kg: KnowledgeGraph, mode: str, rng: np.random.Generator,
                          neighbors: int = 4) -> list[PromptInstance]:
    """One "true" instance per training triple plus one filtered corruption
    labeled "false" (exactly 1:1), shuffled. Per-triple work uses derived
    child seeds, so the corpus is independent of iteration order."""
    if mode not in ("it", "sit", "kopa"):
        raise ValueError(f"training corpora support modes it/sit/kopa, got {mode!r}")
    seeds = rng.integers(0, 2**62, size=len(kg.triples))
    instances: list[PromptInstance] = []
    for i, t in enumerate(kg.triples):
        child = np.random.default_rng(int(seeds[i]))
        instances.append(_labeled_builder(kg, mode, t, TRUE, child, neighbors))
        side = HEAD if child.random() < 0.5 else TAIL
        neg = corrupt_triple(kg, t, side, child)
        instances.append(_labeled_builder(kg, mode, neg, FALSE, child, neighbors))
    order = rng.permutation(len(instances))
    return [instances[int(i)] for i in order]


def build_it_corpus(kg: KnowledgeGraph, rng: np.random.Generator) -> list[PromptInstance]:
    return build_training_corpus(kg, "it", rng)


def build_eval_instances(kg: KnowledgeGraph, labeled, mode: str, rng: np.random.Generator,
                         k: int = 4, neighbors: int = 4) -> list[PromptInstance]:
    """Instances for a labeled evaluation split, in input order.

    ``zsr``/``icl`` instances carry no answer (gold stays in the labeled
    file); the tuning-shaped modes carry the gold label as their answer so
    downstream evaluation can score directly.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    seeds = rng.integers(0, 2**62, size=len(labeled))
    out = []
    for i, lt in enumerate(labeled):
        child = np.random.default_rng(int(seeds[i]))
        if mode == "zsr":
            out.append(build_zsr(kg, lt.triple))
        elif mode == "icl":
            out.append(build_icl(kg, lt.triple, k, child))
        else:
            out.append(_labeled_builder(kg, mode, lt.triple, TRUE if lt.label else FALSE,
                                        child, neighbors))
    return out


def parse_answer(completion: str) -> str:
    """First standalone "true"/"false" token, case-insensitive; otherwise
    ``unknown``."""
    m = _ANSWER_RE.search(completion)
    return m.group(1).lower() if m else UNKNOWN


def export_jsonl(instances, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for inst in instances:
            record = {
                "mode": inst.mode,
                "instruction": inst.instruction,
                "input": inst.triple_text,
                "triple": list(inst.triple),
            }
            if inst.demonstration is not None:
                record["demonstration"] = inst.demonstration
            if inst.answer is not None:
                record["output"] = inst.answer
            if inst.prefix_triple is not None:
                record["prefix_triple"] = list(inst.prefix_triple)
            ordered = {k: record[k] for k in _JSONL_KEYS if k in record}
            f.write(json.dumps(ordered, ensure_ascii=False) + "\n")


def import_jsonl(path) -> list[PromptInstance]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            unknown = set(record) - set(_JSONL_KEYS)
            if unknown:
                raise DataError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
            for key in ("mode", "instruction", "input", "triple"):
                if key not in record:
                    raise DataError(f"{path}:{lineno}: missing required key {key!r}")
            if record["mode"] not in MODES:
                raise DataError(f"{path}:{lineno}: unknown mode {record['mode']!r}")

            def as_triple(value, key):
                if not (isinstance(value, list) and len(value) == 3):
                    raise DataError(f"{path}:{lineno}: {key} must be a list of 3 indices")
                return tuple(int(x) for x in value)

            out.append(PromptInstance(
                mode=record["mode"],
                instruction=record["instruction"],
                demonstration=record.get("demonstration"),
                triple_text=record["input"],
                answer=record.get("output"),
                triple=as_triple(record["triple"], "triple"),
                prefix_triple=(as_triple(record["prefix_triple"], "prefix_triple")
                               if "prefix_triple" in record else None),
            ))
    return out
