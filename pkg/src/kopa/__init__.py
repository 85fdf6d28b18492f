"""Knowledge graph completion toolkit.

Pipeline pieces: structural embedding pre-training over four score
families, threshold-based triple classification, prompt-corpus generation
for LLM evaluation and tuning, and a knowledge prefix adapter verified
against a small causal language model.
"""

from importlib import resources

__version__ = "0.1.0"


def bundled_dataset_dir(name: str = "umls"):
    """Path to a dataset bundled with the package (``train.tsv``,
    ``valid.tsv``, ``test.tsv``, ``entities.tsv``, ``relations.tsv``)."""
    root = resources.files(__name__) / "data" / name
    if not root.is_dir():
        raise FileNotFoundError(f"no bundled dataset named {name!r}")
    return root


def bundled_dataset_paths(name: str = "umls") -> dict:
    root = bundled_dataset_dir(name)
    return {
        "train": str(root / "train.tsv"),
        "valid": str(root / "valid.tsv"),
        "test": str(root / "test.tsv"),
        "entities": str(root / "entities.tsv"),
        "relations": str(root / "relations.tsv"),
    }
