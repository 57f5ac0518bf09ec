"""Tensor completion of clinical-outcome labels from genetics evidence.

A sparse (targets x indications x evidence layers) tensor holds clinical
outcome labels alongside rare-disease, gene-burden and GWAS evidence; a
Gibbs-sampled Bayesian factorization imputes success scores for unlabeled
target-indication pairs, and the evaluation layer reports AUROC/F1 over
repeated stratified splits plus phase-stratified rank tests.
"""

from .errors import DataError, NumericalError, TrialTensorError
from .ingest import (
    EvidenceRecord,
    IngestReport,
    Layer,
    OutcomePair,
    StopReason,
    build_tensor,
    label_outcomes,
    load_xref,
    map_ontology,
    parse_gene_burden,
    parse_gwas_l2g,
    parse_outcomes,
    parse_rare_disease,
)
from .metrics import (
    EvalConfig,
    EvalReport,
    PhaseAnalysis,
    auroc,
    bonferroni,
    class_imbalance,
    f1,
    mann_whitney_u,
    phase_analysis,
    repeated_eval,
)
from .rng import StreamTree
from .sampler import (
    Hyperprior,
    ModelState,
    ModeParams,
    PredictionAccumulator,
    RunResult,
    SamplerSchedule,
    gibbs_step,
    init_model,
    load_checkpoint,
    predict_cell,
    predict_cells,
    row_posterior,
    run,
    sample_mode_hyperparams,
    sample_mode_latents,
    sample_mvn,
    sample_wishart,
    save_checkpoint,
)
from .simulate import SynthConfig, generate, synthetic_modes
from .tensor import (
    CellSplit,
    Mode,
    ModeIndex,
    SparseTensor,
    build_index,
    load_tensor,
    save_tensor,
    select_layers,
    split_cells,
)

__version__ = "0.1.0"
