#!/usr/bin/env python3
"""Generate the bundled medical-KG benchmark (deterministic, seed 0).

The original UMLS triple-classification files cannot be redistributed from
this environment, so this script builds a stand-in with the exact split
statistics of that classic benchmark: 135 entities, 46 relations, 5216
training triples, 652/652 validation and 661/661 test samples (positives
1:1 with mined hard negatives). The vocabulary is the UMLS semantic-network
nomenclature; the edge set is synthetic.

Construction:
  1. Entities are partitioned into semantic groups; each relation connects
     a few (subject-group, object-group) pairs and its facts are the
     (near-)complete bipartite products of those pairs. Group-level rules
     keep held-out facts learnable from the training portion, and because
     the patterns are nearly complete, filtered corruptions land outside
     the patterns, so mined hard negatives stay separable (the property
     that makes the original benchmark classifiable well above chance).
  2. The 6529 facts are split 5216/652/661, with swaps guaranteeing every
     entity keeps at least one training triple.
  3. A TransE model trained on the training portion mines one hard negative
     per validation/test positive (hardest of 30 filtered corruptions,
     avoiding all known positives).

Usage: python scripts/make_dataset.py [--out src/kopa/data/umls] [--seed 0]
"""

import argparse
import collections
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from kopa import kg as kgmod  # noqa: E402
from kopa import kge  # noqa: E402

ENTITIES = """
acquired_abnormality activity age_group alga amino_acid_peptide_or_protein
amino_acid_sequence amphibian anatomical_abnormality anatomical_structure animal
antibiotic archaeon bacterium behavior biologic_function
biologically_active_substance biomedical_occupation_or_discipline
biomedical_or_dental_material bird body_location_or_region
body_part_organ_or_organ_component body_space_or_junction body_substance
body_system carbohydrate carbohydrate_sequence cell cell_component cell_function
cell_or_molecular_dysfunction chemical chemical_viewed_functionally
chemical_viewed_structurally classification clinical_attribute clinical_drug
conceptual_entity congenital_abnormality daily_or_recreational_activity
diagnostic_procedure disease_or_syndrome drug_delivery_device
educational_activity eicosanoid element_ion_or_isotope embryonic_structure
entity environmental_effect_of_humans enzyme event experimental_model_of_disease
family_group finding fish food fully_formed_anatomical_structure
functional_concept fungus gene_or_genome genetic_function geographic_area
governmental_or_regulatory_activity group group_attribute
hazardous_or_poisonous_substance health_care_activity
health_care_related_organization hormone human human_caused_phenomenon_or_process
idea_or_concept immunologic_factor indicator_reagent_or_diagnostic_aid
individual_behavior injury_or_poisoning inorganic_chemical intellectual_product
invertebrate laboratory_or_test_result laboratory_procedure language lipid
machine_activity mammal manufactured_object medical_device
mental_or_behavioral_dysfunction mental_process
molecular_biology_research_technique molecular_function molecular_sequence
natural_phenomenon_or_process neoplastic_process
neuroreactive_substance_or_biogenic_amine nucleic_acid_nucleoside_or_nucleotide
nucleotide_sequence occupation_or_discipline occupational_activity
organ_or_tissue_function organic_chemical organism organism_attribute
organism_function organization organophosphorus_compound pathologic_function
patient_or_disabled_group pharmacologic_substance phenomenon_or_process
physical_object physiologic_function plant population_group
professional_or_occupational_group professional_society qualitative_concept
quantitative_concept receptor regulation_or_law reptile research_activity
research_device rickettsia_or_chlamydia self_help_or_relief_organization
sign_or_symptom social_behavior spatial_concept steroid substance
temporal_concept therapeutic_or_preventive_procedure tissue vertebrate virus
vitamin
""".split()

RELATIONS = """
affects analyzes assesses_effect_of associated_with carries_out causes
co-occurs_with complicates conceptually_related_to conceptual_part_of
connected_to consists_of contains degree_of derivative_of
developmental_form_of diagnoses disrupts evaluation_of exhibits indicates
ingredient_of interacts_with interconnects isa issue_in location_of manages
manifestation_of measurement_of measures method_of occurs_in part_of performs
practices precedes prevents process_of produces property_of result_of
surrounds treats tributary_of uses
""".split()

N_TRAIN, N_VALID, N_TEST = 5216, 652, 661
N_FACTS = N_TRAIN + N_VALID + N_TEST
N_GROUPS = 18
MIN_GROUP = 4
MINE_CANDIDATES = 30


def make_groups(rng: np.random.Generator) -> list[np.ndarray]:
    n_ent = len(ENTITIES)
    weights = rng.dirichlet(np.full(N_GROUPS, 3.0))
    sizes = np.maximum(MIN_GROUP, np.floor(weights * n_ent).astype(int))
    while sizes.sum() > n_ent:
        sizes[int(np.argmax(sizes))] -= 1
    while sizes.sum() < n_ent:
        sizes[int(np.argmin(sizes))] += 1
    perm = rng.permutation(n_ent)
    groups, start = [], 0
    for s in sizes:
        groups.append(perm[start:start + s])
        start += s
    return groups


def pick_facts(rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """Group-pattern fact set of exactly N_FACTS triples.

    A ring of patterns over the groups guarantees every entity appears;
    every relation gets at least one pattern; random patterns fill up to
    the target, the last ones chosen to overshoot as little as possible;
    the small excess is trimmed without dropping any entity below two
    facts (trimmed pairs are the only in-pattern holes).
    """
    n_rel = len(RELATIONS)
    groups = make_groups(rng)
    facts: set[tuple[int, int, int]] = set()

    def pattern_pairs(r, ga, gb):
        return {(int(a), r, int(b)) for a in groups[ga] for b in groups[gb] if a != b}

    def add_pattern(r, ga, gb):
        facts.update(pattern_pairs(r, ga, gb))

    for gi in range(N_GROUPS):  # coverage backbone
        add_pattern(int(rng.integers(n_rel)), gi, (gi + 1) % N_GROUPS)
    for r in range(n_rel):      # every relation participates
        add_pattern(r, int(rng.integers(N_GROUPS)), int(rng.integers(N_GROUPS)))
    while len(facts) < N_FACTS:
        remaining = N_FACTS - len(facts)
        if remaining > 200:
            add_pattern(int(rng.integers(n_rel)), int(rng.integers(N_GROUPS)),
                        int(rng.integers(N_GROUPS)))
            continue
        best, best_new = None, None
        for _ in range(40):   # choose the closest-fitting pattern near the end
            cand = (int(rng.integers(n_rel)), int(rng.integers(N_GROUPS)),
                    int(rng.integers(N_GROUPS)))
            new = pattern_pairs(*cand) - facts
            if not new:
                continue
            if best is None or abs(len(new) - remaining) < abs(len(best_new) - remaining):
                best, best_new = cand, new
        facts.update(best_new)

    degree = collections.Counter()
    for h, _, t in facts:
        degree[h] += 1
        degree[t] += 1
    order = sorted(facts)
    rng.shuffle(order)
    for f in order:
        if len(facts) <= N_FACTS:
            break
        h, _, t = f
        if degree[h] > 2 and degree[t] > 2:
            facts.remove(f)
            degree[h] -= 1
            degree[t] -= 1
    if len(facts) != N_FACTS:
        raise RuntimeError(f"pattern fill ended with {len(facts)} facts")
    out = sorted(facts)
    rng.shuffle(out)
    return out


def split_with_coverage(facts: list, rng: np.random.Generator):
    """5216/652/661 split; swaps ensure every entity trains at least once."""
    train = facts[:N_TRAIN]
    rest = facts[N_TRAIN:]
    for _ in range(1000):
        degree = collections.Counter()
        for h, _, t in train:
            degree[h] += 1
            degree[t] += 1
        uncovered = sorted({e for f in rest for e in (f[0], f[2]) if degree[e] == 0})
        if not uncovered:
            return train, rest[:N_VALID], rest[N_VALID:]
        e = uncovered[0]
        i = next(i for i, f in enumerate(rest) if e in (f[0], f[2]))
        j = next(j for j, f in enumerate(train) if degree[f[0]] >= 3 and degree[f[2]] >= 3)
        train[j], rest[i] = rest[i], train[j]
    raise RuntimeError("could not cover every entity in the training split")


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=os.path.join("src", "kopa", "data", "umls"))
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    assert len(ENTITIES) == 135, f"entity vocabulary must be 135, got {len(ENTITIES)}"
    assert len(RELATIONS) == 46, f"relation vocabulary must be 46, got {len(RELATIONS)}"

    rng = np.random.default_rng(args.seed)
    facts = pick_facts(rng)
    train, valid_pos, test_pos = split_with_coverage(facts, rng)
    print(f"facts: {len(facts)} -> train {len(train)}, valid {len(valid_pos)}, test {len(test_pos)}")

    graph = kgmod.build_graph(ENTITIES, RELATIONS, train)
    miner_cfg = kge.TrainConfig(
        num_negatives=16, lr=1e-3, epochs=120, batch_size=512,
        adv_temperature=1.0, seed=args.seed, optimizer="adam",
    )
    miner, history = kge.train(graph, miner_cfg, "transe", 64, margin=6.0)
    print(f"miner loss: {history[0]:.4f} -> {history[-1]:.4f}")

    forbidden = set(facts)
    mine_rng = np.random.default_rng(args.seed + 1)
    valid = kgmod.mine_hard_negatives(graph, miner.score, valid_pos, MINE_CANDIDATES,
                                      mine_rng, forbidden=forbidden)
    test = kgmod.mine_hard_negatives(graph, miner.score, test_pos, MINE_CANDIDATES,
                                     mine_rng, forbidden=forbidden)

    os.makedirs(args.out, exist_ok=True)

    def write_desc(path, names):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for name in names:
                f.write(f"{name}\t{name.replace('_', ' ')}\n")

    write_desc(os.path.join(args.out, "entities.tsv"), ENTITIES)
    write_desc(os.path.join(args.out, "relations.tsv"), RELATIONS)
    kgmod.write_triples(os.path.join(args.out, "train.tsv"), graph, train)
    kgmod.write_labeled(os.path.join(args.out, "valid.tsv"), graph, valid)
    kgmod.write_labeled(os.path.join(args.out, "test.tsv"), graph, test)
    print(f"wrote dataset to {args.out}")


if __name__ == "__main__":
    main()
