"""Difficulty factor analysis: find suspect KCs, split them, re-score.

A KC that students neither master nor fail outright, yet show no
improvement on with practice, is a candidate for being two skills fused
under one label. Such KCs are re-clustered in isolation (only their own
questions move) and the refined model is compared to the original on
information criteria and cross-validated prediction error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from scipy.special import expit

from .afm import (
    AFMFit,
    CVReport,
    FitConfig,
    TTestResult,
    aic_bic,
    compare_rmse,
    fit_afm,
    item_cv,
)
from .backends import DecodeConfig, ScoringBackend
from .bank import QuestionBank, TransactionLog
from .cluster import APParams, cluster
from .concepts import ConceptLabel, extract_all
from .congruity import congruity_matrix
from .embeddings import embedding_affinity, question_embeddings
from .errors import ConfigError
from .kcmodel import KCModel, from_clusters, to_qmatrix

REFINE_METHODS = ("concept", "question-emb", "kcluster")


@dataclass(frozen=True)
class ProblematicKC:
    label: str
    gamma: float
    beta: float
    success_rate: float
    question_count: int


def problematic_kcs(
    fit: AFMFit,
    gamma_tol: float = 0.001,
    band: tuple[float, float] = (0.2, 0.8),
) -> list[ProblematicKC]:
    """KCs with a flat learning curve at unexceptional difficulty.

    Flat means a fitted learning rate below ``gamma_tol``; unexceptional
    means the intercept success probability sits inside ``band`` (bounds
    inclusive). Results come largest question count first so attention
    goes where a fix moves the most items; ties break by label.
    """
    lo, hi = band
    if not 0.0 <= lo <= hi <= 1.0:
        raise ConfigError(f"invalid difficulty band {band!r}")
    out = []
    for kc, gamma in fit.gamma.items():
        beta = fit.beta[kc]
        rate = float(expit(beta))
        if gamma < gamma_tol and lo <= rate <= hi:
            out.append(
                ProblematicKC(
                    label=kc,
                    gamma=gamma,
                    beta=beta,
                    success_rate=rate,
                    question_count=fit.kc_question_counts.get(kc, 0),
                )
            )
    return sorted(out, key=lambda p: (-p.question_count, p.label))


def refine_kc(
    model: KCModel,
    kc: str,
    bank: QuestionBank,
    backend: ScoringBackend,
    method: str = "kcluster",
    params: APParams | None = None,
    concepts: dict[str, str] | None = None,
    decode: DecodeConfig | None = None,
    jobs: int = 1,
) -> KCModel:
    """Split one KC's questions into sub-KCs; all other labels stay put.

    ``concepts`` maps question id -> concept label; missing entries are
    generated on the fly (they name the sub-clusters, and for the
    "concept" method they define them). A sub-label that collides with a
    label in use elsewhere in the model is namespaced as "{kc}:{label}"
    so the refinement cannot silently merge into an unrelated KC.
    """
    if method not in REFINE_METHODS:
        raise ConfigError(f"unknown refinement method {method!r}")
    subset_ids = [qid for qid in bank.ids if model.mapping.get(qid) == kc]
    if not subset_ids:
        raise ConfigError(f"KC {kc!r} has no questions in model {model.name!r}")
    subset = bank.subset(subset_ids)
    params = params or APParams()
    if concepts is not None and all(qid in concepts for qid in subset_ids):
        objs = {qid: ConceptLabel(qid, concepts[qid], 1.0) for qid in subset_ids}
    else:
        objs = dict(extract_all(subset, backend, config=decode, jobs=jobs))
        for qid in subset_ids:
            if concepts and qid in concepts:
                objs[qid] = ConceptLabel(qid, concepts[qid], 1.0)

    if method == "concept":
        sub_mapping = {qid: objs[qid].label for qid in subset_ids}
    elif len(subset_ids) == 1:
        sub_mapping = {subset_ids[0]: objs[subset_ids[0]].label}
    else:
        if method == "question-emb":
            emb = question_embeddings(subset, backend)
            matrix = embedding_affinity(emb)
        else:
            matrix = congruity_matrix(subset, backend, jobs=jobs)
        assignment = cluster(matrix, params)
        refined = from_clusters(assignment, objs, name=f"{model.name}/refined")
        sub_mapping = dict(refined.mapping)

    taken = {lbl for qid, lbl in model.mapping.items() if qid not in set(subset_ids)}
    renames: dict[str, str] = {}
    for lbl in sorted(set(sub_mapping.values())):
        renames[lbl] = f"{kc}:{lbl}" if lbl in taken else lbl
    new_mapping = dict(model.mapping)
    for qid in subset_ids:
        new_mapping[qid] = renames[sub_mapping[qid]]
    return KCModel(name=f"{model.name}+split({kc},{method})", mapping=new_mapping)


@dataclass(frozen=True)
class RefinementReport:
    """Before/after comparison of a KC split."""

    before_name: str
    after_name: str
    before_kcs: int
    after_kcs: int
    before_ll: float
    after_ll: float
    before_aic: float
    after_aic: float
    before_bic: float
    after_bic: float
    cv_before: CVReport
    cv_after: CVReport
    ttest: TTestResult

    @property
    def delta_aic(self) -> float:
        return self.after_aic - self.before_aic

    @property
    def delta_bic(self) -> float:
        return self.after_bic - self.before_bic

    @property
    def improved(self) -> bool:
        """True when the split both lowers BIC and lowers CV error."""
        return self.delta_bic < 0.0 and self.cv_after.mean < self.cv_before.mean

    def to_markdown(self) -> str:
        rows = [
            ("model", self.before_name, self.after_name),
            ("KCs", str(self.before_kcs), str(self.after_kcs)),
            ("log-likelihood", f"{self.before_ll:.3f}", f"{self.after_ll:.3f}"),
            ("AIC", f"{self.before_aic:.3f}", f"{self.after_aic:.3f}"),
            ("BIC", f"{self.before_bic:.3f}", f"{self.after_bic:.3f}"),
            ("CV RMSE (mean)", f"{self.cv_before.mean:.5f}", f"{self.cv_after.mean:.5f}"),
            ("CV RMSE (std)", f"{self.cv_before.std:.5f}", f"{self.cv_after.std:.5f}"),
        ]
        lines = [
            "| quantity | before | after |",
            "| --- | --- | --- |",
        ]
        lines += [f"| {a} | {b} | {c} |" for a, b, c in rows]
        lines.append("")
        lines.append(
            f"t = {self.ttest.t_stat:.4f} on {self.ttest.df} df, "
            f"two-sided p = {self.ttest.p_value:.4g}"
            + (" (degenerate: zero variance)" if self.ttest.degenerate else "")
        )
        verdict = "improves" if self.improved else "does not improve"
        lines.append(f"Refinement {verdict} the model (BIC delta {self.delta_bic:+.3f}).")
        return "\n".join(lines) + "\n"


def evaluate_refinement(
    log_: TransactionLog,
    bank: QuestionBank,
    before: KCModel,
    after: KCModel,
    seeds: Sequence[int] | None = None,
    folds: int = 3,
    config: FitConfig | None = None,
) -> RefinementReport:
    """Full fits for information criteria, seeded CV for the error test."""
    q_before = to_qmatrix(before, bank)
    q_after = to_qmatrix(after, bank)
    fit_before = fit_afm(log_, q_before, config)
    fit_after = fit_afm(log_, q_after, config)
    aic_b, bic_b = aic_bic(fit_before)
    aic_a, bic_a = aic_bic(fit_after)
    cv_before = item_cv(log_, q_before, folds=folds, seeds=seeds, config=config,
                        model_name=before.name)
    cv_after = item_cv(log_, q_after, folds=folds, seeds=seeds, config=config,
                       model_name=after.name)
    return RefinementReport(
        before_name=before.name,
        after_name=after.name,
        before_kcs=before.kc_count,
        after_kcs=after.kc_count,
        before_ll=fit_before.log_likelihood,
        after_ll=fit_after.log_likelihood,
        before_aic=aic_b,
        after_aic=aic_a,
        before_bic=bic_b,
        after_bic=bic_a,
        cv_before=cv_before,
        cv_after=cv_after,
        ttest=compare_rmse(cv_before, cv_after),
    )
