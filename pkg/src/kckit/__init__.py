"""Knowledge-component discovery and evaluation for question banks.

The workflow: score pairwise question affinities with a language model,
cluster them into candidate knowledge components, then judge the resulting
model against student response data with an additive factor model and
standard partition-agreement metrics.
"""

from .afm import (
    AFMFit,
    CVReport,
    FitConfig,
    OpportunityTable,
    TTestResult,
    aic_bic,
    all_learning_curves,
    compare_rmse,
    fit_afm,
    item_cv,
    learning_curve,
    opportunity_counts,
    predict,
    save_curves,
    save_cv_report,
)
from .backends import BigramLM, CachedBackend, DecodeConfig, RemoteBackend, ScoringBackend
from .bank import (
    Choice,
    Question,
    QuestionBank,
    Transaction,
    TransactionLog,
    load_bank,
    load_kc_model,
    load_transactions,
    render_question,
    save_bank,
    save_kc_model,
    save_transactions,
)
from .cluster import (
    APParams,
    ClusterAssignment,
    cluster,
    load_assignment,
    median_preference,
    net_similarity_of,
    save_assignment,
)
from .concepts import (
    ConceptLabel,
    concept_prompt,
    extract_all,
    extract_concept,
    load_concepts,
    save_concepts,
)
from .congruity import (
    AffinityMatrix,
    conditional_prompt,
    congruity,
    congruity_matrix,
    delta,
    load_matrix,
    marginal_prompt,
    save_matrix,
)
from .embeddings import (
    EmbeddingSet,
    concept_embeddings,
    embedding_affinity,
    load_embeddings,
    neg_cos,
    question_embeddings,
    save_embeddings,
)
from .errors import (
    BackendError,
    CapabilityError,
    ConfigError,
    EmptyGenerationError,
    KckitError,
)
from .kcmodel import (
    KCModel,
    QMatrix,
    adjusted_mutual_info,
    adjusted_rand,
    alignment_report,
    from_clusters,
    fowlkes_mallows,
    homogeneity,
    completeness,
    single_kc_model,
    to_qmatrix,
    unique_step_model,
    v_measure,
)
from .refine import (
    ProblematicKC,
    RefinementReport,
    evaluate_refinement,
    problematic_kcs,
    refine_kc,
)
from .synth import (
    SynthTruth,
    load_toy_bank_file,
    oracle_bank,
    synth_log,
    toy_bank,
    toy_transactions,
    write_toy_data,
)

__version__ = "0.1.0"

__all__ = [
    "AFMFit",
    "APParams",
    "AffinityMatrix",
    "BackendError",
    "BigramLM",
    "CVReport",
    "CachedBackend",
    "CapabilityError",
    "Choice",
    "ClusterAssignment",
    "ConceptLabel",
    "ConfigError",
    "DecodeConfig",
    "EmbeddingSet",
    "EmptyGenerationError",
    "FitConfig",
    "KCModel",
    "KckitError",
    "OpportunityTable",
    "ProblematicKC",
    "QMatrix",
    "Question",
    "QuestionBank",
    "RefinementReport",
    "RemoteBackend",
    "ScoringBackend",
    "SynthTruth",
    "TTestResult",
    "Transaction",
    "TransactionLog",
    "adjusted_mutual_info",
    "adjusted_rand",
    "aic_bic",
    "alignment_report",
    "all_learning_curves",
    "cluster",
    "compare_rmse",
    "completeness",
    "concept_embeddings",
    "concept_prompt",
    "conditional_prompt",
    "congruity",
    "congruity_matrix",
    "delta",
    "embedding_affinity",
    "evaluate_refinement",
    "extract_all",
    "extract_concept",
    "fit_afm",
    "fowlkes_mallows",
    "from_clusters",
    "homogeneity",
    "item_cv",
    "learning_curve",
    "load_assignment",
    "load_bank",
    "load_concepts",
    "load_embeddings",
    "load_kc_model",
    "load_matrix",
    "load_toy_bank_file",
    "load_transactions",
    "marginal_prompt",
    "median_preference",
    "neg_cos",
    "net_similarity_of",
    "opportunity_counts",
    "oracle_bank",
    "predict",
    "problematic_kcs",
    "question_embeddings",
    "refine_kc",
    "render_question",
    "save_assignment",
    "save_bank",
    "save_concepts",
    "save_curves",
    "save_cv_report",
    "save_embeddings",
    "save_kc_model",
    "save_matrix",
    "save_transactions",
    "single_kc_model",
    "synth_log",
    "to_qmatrix",
    "toy_bank",
    "toy_transactions",
    "unique_step_model",
    "v_measure",
    "write_toy_data",
]
