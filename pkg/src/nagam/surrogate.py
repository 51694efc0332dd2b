"""Synthetic stand-in for the LIDC-IDRI readings.

Nodules get a latent severity and continuous "true" concept values; each
simulated reader then rounds a noisy view of them onto the 1-5 scales.
Malignancy follows a known additive rule, and the embedding of a nodule is
a fixed random nonlinear projection of its true concepts, so both the
concept heads and the additive model have something learnable.

The bundled ``data/surrogate_annotations.csv`` is ``generate()`` at the
default seed.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from .ingest import EmbeddingRow, NoduleRecord, build_dataset, parse_annotations
from .schema import ConceptSchema, default_schema

DEFAULT_SEED = 2651
N_NODULES = 2651
EMBEDDING_DIM = 32
# share of nodules read by 1, 2, 3 and 4 readers
READER_SHARE = (0.29, 0.18, 0.18, 0.35)


def malignancy_rule(u: dict, calcified: np.ndarray) -> np.ndarray:
    """Noise-free malignancy on [0, 1] from normalized true concepts."""
    score = (
        0.22
        + 0.32 * u["spiculation"] ** 0.8
        + 0.12 * u["lobulation"]
        + 0.18 * (1.0 - u["margin"]) ** 2
        - 0.14 * u["texture"] ** 2
        + 0.10 * u["subtlety"]
        + np.where(calcified, -0.12, 0.06)
    )
    return np.clip(score, 0.0, 1.0)


def generate(n_nodules: int = N_NODULES, seed: int = DEFAULT_SEED, embedding_dim: int = EMBEDDING_DIM, schema=None):
    """Return ``(records, embedding_rows)`` for ``n_nodules`` synthetic nodules."""
    schema = schema or default_schema()
    rng = np.random.default_rng(seed)
    n = n_nodules
    z = rng.normal(size=n)
    pos = np.maximum(z, 0.0)
    true = {
        "subtlety": 3.9 + 0.4 * z + rng.normal(0, 0.8, n),
        "sphericity": 3.7 - 0.2 * z + rng.normal(0, 0.7, n),
        "margin": 4.1 - 0.7 * z + rng.normal(0, 0.8, n),
        "lobulation": 1.5 + 0.9 * pos + rng.normal(0, 0.7, n),
        "spiculation": 1.3 + 1.1 * pos + rng.normal(0, 0.7, n),
        "texture": 4.6 - 0.8 * np.abs(rng.normal(0, 1.2, n)) ** 1.5,
    }
    true = {k: np.clip(v, 1.0, 5.0) for k, v in true.items()}
    u = {k: (v - 1.0) / 4.0 for k, v in true.items()}

    internal = rng.choice([1, 2, 3, 4], size=n, p=[0.985, 0.003, 0.002, 0.010])
    p_calcified = 1.0 / (1.0 + np.exp(1.9 + 1.2 * z))
    calcified = rng.random(n) < p_calcified
    calc_kind = rng.choice([1, 2, 3, 4, 5], size=n, p=[0.01, 0.02, 0.70, 0.07, 0.20])
    calcification = np.where(calcified, calc_kind, 6)
    malignancy = malignancy_rule(u, calcified) + rng.normal(0, 0.05, n)
    true["malignancy"] = 1.0 + 4.0 * np.clip(malignancy, 0.0, 1.0)

    readers = rng.choice([1, 2, 3, 4], size=n, p=READER_SHARE)
    records = []
    for i in range(n):
        nodule_id = f"SYN-{i:04d}"
        for r in range(readers[i]):
            noisy = {k: int(np.clip(np.rint(v[i] + rng.normal(0, 0.55)), 1, 5)) for k, v in true.items()}
            cat = {"internal_structure": int(internal[i]), "calcification": int(calcification[i])}
            # occasional reader disagreement on categories
            if rng.random() < 0.05:
                cat["calcification"] = int(rng.choice([3, 5, 6]))
            records.append(
                NoduleRecord(
                    nodule_id=nodule_id,
                    rater_id=f"r{r + 1}",
                    ordinal_ratings={c: noisy[c] for c in schema.ordinal_names},
                    categorical_ratings={c: cat[c] for c in schema.categorical_names},
                    malignancy=noisy["malignancy"],
                )
            )

    features = np.column_stack(
        [
            *(u[c] for c in schema.ordinal_names),
            (internal != 1).astype(float),
            calcified.astype(float),
            z,
        ]
    )
    proj = rng.normal(0, 1.0, size=(features.shape[1], embedding_dim))
    offset = rng.normal(0, 0.3, size=embedding_dim)
    emb = np.tanh(features @ proj * 0.8 + offset) + rng.normal(0, 0.05, size=(n, embedding_dim))
    emb = np.round(emb, 6)
    embeddings = [EmbeddingRow(f"SYN-{i:04d}", emb[i]) for i in range(n)]
    return records, embeddings


def bundled_annotations():
    """Traversable pointing at the packaged surrogate annotations CSV."""
    return resources.files("nagam").joinpath("data/surrogate_annotations.csv")


def load_dataset(with_embeddings: bool = False, schema: ConceptSchema | None = None):
    schema = schema or default_schema()
    with resources.as_file(bundled_annotations()) as path:
        records = parse_annotations(path, schema)
    embeddings = generate(schema=schema)[1] if with_embeddings else None
    return build_dataset(records, schema, embeddings)
