import numpy as np
import pytest

import kopa
from kopa import kg


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_kg():
    """Six entities, three relations, a handful of triples with descriptions."""
    return kg.build_graph(
        entities=["aspirin", "headache", "fever", "ibuprofen", "pain", "nausea"],
        relations=["treats", "causes", "isa"],
        triples=[
            (0, 0, 1),  # aspirin treats headache
            (0, 0, 4),  # aspirin treats pain
            (3, 0, 1),  # ibuprofen treats headache
            (3, 0, 4),  # ibuprofen treats pain
            (1, 2, 4),  # headache isa pain
            (2, 1, 5),  # fever causes nausea
        ],
        entity_desc=["aspirin", "headache", "fever", "ibuprofen", "pain", "nausea"],
        relation_desc=["treats", "causes", "is a"],
    )


@pytest.fixture(scope="session")
def umls_paths():
    return kopa.bundled_dataset_paths("umls")


@pytest.fixture(scope="session")
def umls(umls_paths):
    return kg.load_graph(
        umls_paths["train"], umls_paths["valid"], umls_paths["test"],
        umls_paths["entities"], umls_paths["relations"],
    )


def write_dataset(directory, entities, relations, train, valid, test):
    """Write a dataset directory in the toolkit's TSV layout; returns paths."""
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, rows in (("entities", entities), ("relations", relations)):
        p = directory / f"{name}.tsv"
        p.write_text("".join(f"{i}\t{d}\n" for i, d in rows), encoding="utf-8")
        paths[name] = str(p)
    p = directory / "train.tsv"
    p.write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in train), encoding="utf-8")
    paths["train"] = str(p)
    for name, rows in (("valid", valid), ("test", test)):
        p = directory / f"{name}.tsv"
        p.write_text(
            "".join(f"{h}\t{r}\t{t}\t{label}\n" for h, r, t, label in rows),
            encoding="utf-8",
        )
        paths[name] = str(p)
    return paths
