from pathlib import Path

import pytest

from trialtensor import (
    SparseTensor,
    build_tensor,
    label_outcomes,
    load_xref,
    map_ontology,
    parse_gene_burden,
    parse_gwas_l2g,
    parse_outcomes,
    parse_rare_disease,
)
from trialtensor.ingest import IngestReport

DATA_DIR = Path(__file__).parent / "data"

# The bundled curation fixture assembles into a 3 genes x 2 diseases x 4
# layers tensor with 12 observed cells (density 0.5).
FIXTURE_ENTRIES = [
    (0, 0, 0, 1.0),
    (0, 1, 0, 0.0),
    (1, 0, 0, 1.0),
    (2, 1, 0, 0.0),
    (0, 0, 1, 1.0),
    (1, 0, 1, 1.0),
    (2, 1, 1, 1.0),
    (0, 0, 2, 1.0),
    (1, 0, 2, 0.0),
    (2, 0, 2, 0.0),
    (0, 0, 3, 0.83),
    (1, 1, 3, 0.71),
]


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


def ingest_fixture(report: IngestReport | None = None):
    """Run the full curation pipeline over the bundled fixture files."""
    report = report if report is not None else IngestReport()
    xref = load_xref(DATA_DIR / "xref.tsv")
    evidence = parse_rare_disease(DATA_DIR / "rare_disease.tsv", report=report)
    evidence += parse_gene_burden(DATA_DIR / "gene_burden.tsv", report=report)
    evidence += parse_gwas_l2g(DATA_DIR / "gwas_l2g.tsv", report=report)
    evidence = map_ontology(evidence, xref, report=report)
    pairs = label_outcomes(parse_outcomes(DATA_DIR / "outcomes.tsv", report=report), report=report)
    pairs = map_ontology(pairs, xref, report=report)
    return evidence, pairs


@pytest.fixture(scope="session")
def fixture_tensor():
    evidence, pairs = ingest_fixture()
    return build_tensor(evidence, pairs)


@pytest.fixture()
def tiny_tensor() -> SparseTensor:
    return SparseTensor.from_entries((3, 2, 4), FIXTURE_ENTRIES)
