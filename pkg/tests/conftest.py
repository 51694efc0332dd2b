import numpy as np
import pytest

from nagam.ingest import NoduleRecord, build_dataset
from nagam.schema import default_schema
from nagam.surrogate import generate


@pytest.fixture(scope="session")
def schema():
    return default_schema()


def make_record(nodule_id, rater_id="r1", malignancy=3, calcification=6, internal_structure=1, **ordinals):
    ratings = {n: 3 for n in default_schema().ordinal_names}
    ratings.update(ordinals)
    return NoduleRecord(
        nodule_id,
        rater_id,
        ratings,
        {"internal_structure": internal_structure, "calcification": calcification},
        malignancy,
    )


@pytest.fixture(scope="session")
def small_dataset(schema):
    """120 synthetic nodules with 16-wide embeddings."""
    records, emb = generate(120, seed=3, embedding_dim=16, schema=schema)
    return build_dataset(records, schema, emb)


def random_onehots(rng, schema, n):
    cols = []
    for c in schema.categoricals:
        cols.append(np.eye(c.n_classes)[rng.integers(0, c.n_classes, n)])
    return cols


def random_features(rng, schema, n):
    """Random concept matrix: uniform ordinals and valid one-hots."""
    return np.hstack([rng.random((n, len(schema.ordinals))), *random_onehots(rng, schema, n)])


@pytest.fixture(scope="session")
def lidc_annotations(tmp_path_factory):
    """Path of an LIDC-IDRI annotations CSV, or None when no source is available.

    ``NAGAM_LIDC_ANNOTATIONS`` points at an existing export; otherwise the
    ratings are exported from an installed pylidc database.
    """
    import os

    from nagam import lidc

    given_path = os.environ.get("NAGAM_LIDC_ANNOTATIONS")
    if given_path:
        return given_path
    if lidc.find_pylidc_db() is None:
        return None
    out = tmp_path_factory.mktemp("lidc") / "lidc_annotations.csv"
    lidc.export_annotations(out)
    return out


@pytest.fixture(scope="session")
def lidc_dataset(lidc_annotations, schema):
    if lidc_annotations is None:
        return None
    from nagam.ingest import parse_annotations

    return build_dataset(parse_annotations(lidc_annotations, schema), schema)


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
