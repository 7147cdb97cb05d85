"""Additive factor model: fitting, information criteria, cross-validation.

For student i answering question j, the log-odds of a correct response are

    theta_i + sum_k q_jk * (beta_k + gamma_k * T_ik)

where q_jk is the Q-matrix entry and T_ik counts the student's earlier
attempts on questions sharing KC k (first attempt sees T = 0). Learning
rates gamma are constrained non-negative. The likelihood is maximized by
deterministic full-batch projected gradient ascent with an adaptive
(Barzilai-Borwein seeded, halving) step; a small ridge on theta and beta
anchors the otherwise translation-invariant parameterization. The reported
log-likelihood is the plain Bernoulli one, without the ridge term.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import t as student_t

from .bank import TransactionLog
from .errors import ConfigError
from .kcmodel import KCModel, QMatrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OpportunityTable:
    """Per-transaction KC incidence and prior-practice counts.

    Row r of the log touches KCs ``kc_idx[ptr[r]:ptr[r+1]]`` with prior
    attempt counts ``counts[ptr[r]:ptr[r+1]]``. kc_idx indexes kc_labels.
    """

    kc_labels: tuple[str, ...]
    ptr: np.ndarray
    kc_idx: np.ndarray
    counts: np.ndarray


def opportunity_counts(log_: TransactionLog, q: QMatrix) -> OpportunityTable:
    """Walk each student's sequence and count earlier same-KC attempts."""
    qpos = {qid: i for i, qid in enumerate(q.question_ids)}
    kcs_of_row = [np.flatnonzero(q.matrix[r]).tolist() for r in range(len(q.question_ids))]
    ptr = [0]
    kc_idx: list[int] = []
    counts: list[float] = []
    seen: dict[tuple[str, int], int] = {}
    for txn in log_.transactions:
        if txn.question_id not in qpos:
            raise ConfigError(
                f"Q-matrix does not cover question {txn.question_id!r}"
            )
        ks = kcs_of_row[qpos[txn.question_id]]
        for k in ks:
            kc_idx.append(k)
            counts.append(float(seen.get((txn.student_id, k), 0)))
        for k in ks:
            seen[(txn.student_id, k)] = seen.get((txn.student_id, k), 0) + 1
        ptr.append(len(kc_idx))
    return OpportunityTable(
        kc_labels=q.kc_labels,
        ptr=np.asarray(ptr, dtype=np.int64),
        kc_idx=np.asarray(kc_idx, dtype=np.int64),
        counts=np.asarray(counts, dtype=np.float64),
    )


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 500
    rel_tol: float = 1e-8
    grad_tol: float = 1e-6
    ridge: float = 1e-4


@dataclass(frozen=True)
class AFMFit:
    """Fitted parameters plus everything needed for model comparison."""

    theta: dict[str, float]
    beta: dict[str, float]
    gamma: dict[str, float]
    log_likelihood: float
    n_obs: int
    n_params: int
    converged: bool
    n_iters: int
    trace: tuple[float, ...]
    kc_question_counts: dict[str, int]

    @property
    def beta_mean(self) -> float:
        return float(np.mean(list(self.beta.values())))

    @property
    def gamma_mean(self) -> float:
        return float(np.mean(list(self.gamma.values())))


def aic_bic(fit: AFMFit) -> tuple[float, float]:
    """(AIC, BIC) = (2p - 2LL, p ln(n) - 2LL)."""
    aic = 2.0 * fit.n_params - 2.0 * fit.log_likelihood
    bic = fit.n_params * math.log(fit.n_obs) - 2.0 * fit.log_likelihood
    return aic, bic


@dataclass
class Design:
    """Dense index arrays binding a log to a Q-matrix for vectorized math."""

    students: tuple[str, ...]
    kc_labels: tuple[str, ...]
    student_idx: np.ndarray  # n_obs
    y: np.ndarray  # n_obs float
    ptr: np.ndarray
    kc_idx: np.ndarray
    t_vals: np.ndarray
    obs_of_nnz: np.ndarray
    question_ids: tuple[str, ...]  # per obs


def build_design(log_: TransactionLog, q: QMatrix) -> Design:
    table = opportunity_counts(log_, q)
    students = tuple(sorted({t.student_id for t in log_.transactions}))
    sindex = {s: i for i, s in enumerate(students)}
    student_idx = np.asarray([sindex[t.student_id] for t in log_.transactions], dtype=np.int64)
    y = np.asarray([t.outcome for t in log_.transactions], dtype=np.float64)
    obs_of_nnz = np.repeat(np.arange(len(y), dtype=np.int64), np.diff(table.ptr))
    return Design(
        students=students,
        kc_labels=table.kc_labels,
        student_idx=student_idx,
        y=y,
        ptr=table.ptr,
        kc_idx=table.kc_idx,
        t_vals=table.counts,
        obs_of_nnz=obs_of_nnz,
        question_ids=tuple(t.question_id for t in log_.transactions),
    )


class AFMProblem:
    """Objective/gradient for one (possibly masked) set of observations.

    Parameters are packed as [theta | beta | gamma] over the full student
    and KC index spaces; students or KCs without observations keep zero
    gradient and stay at zero, and are excluded from reported parameters.
    """

    def __init__(self, design: Design, obs_mask: np.ndarray | None = None,
                 ridge: float = 1e-4):
        d = design
        self.design = d
        self.ridge = ridge
        if obs_mask is None:
            obs_mask = np.ones(len(d.y), dtype=bool)
        self.obs_mask = obs_mask
        self.sidx = d.student_idx[obs_mask]
        self.y = d.y[obs_mask]
        nnz_mask = obs_mask[d.obs_of_nnz]
        self.kc_nnz = d.kc_idx[nnz_mask]
        self.t_nnz = d.t_vals[nnz_mask]
        # Re-map nnz rows onto the masked observation indexing.
        new_pos = np.cumsum(obs_mask) - 1
        self.obs_nnz = new_pos[d.obs_of_nnz[nnz_mask]]
        self.n_obs = int(obs_mask.sum())
        self.S = len(d.students)
        self.K = len(d.kc_labels)
        self.active_students = np.bincount(self.sidx, minlength=self.S) > 0
        self.active_kcs = np.bincount(self.kc_nnz, minlength=self.K) > 0

    # -- packing ---------------------------------------------------------

    def unpack(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return x[: self.S], x[self.S : self.S + self.K], x[self.S + self.K :]

    def project(self, x: np.ndarray) -> np.ndarray:
        out = x.copy()
        out[self.S + self.K :] = np.maximum(out[self.S + self.K :], 0.0)
        return out

    def logits(self, x: np.ndarray) -> np.ndarray:
        theta, beta, gamma = self.unpack(x)
        contrib = beta[self.kc_nnz] + gamma[self.kc_nnz] * self.t_nnz
        return theta[self.sidx] + np.bincount(
            self.obs_nnz, weights=contrib, minlength=self.n_obs
        )

    def loglik(self, x: np.ndarray) -> float:
        z = self.logits(x)
        return float(np.sum(self.y * z - np.logaddexp(0.0, z)))

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        theta, beta, gamma = self.unpack(x)
        z = self.logits(x)
        ll = float(np.sum(self.y * z - np.logaddexp(0.0, z)))
        f = ll - self.ridge * (float(theta @ theta) + float(beta @ beta))
        r = self.y - expit(z)
        g_theta = np.bincount(self.sidx, weights=r, minlength=self.S) - 2.0 * self.ridge * theta
        r_nnz = r[self.obs_nnz]
        g_beta = (
            np.bincount(self.kc_nnz, weights=r_nnz, minlength=self.K)
            - 2.0 * self.ridge * beta
        )
        g_gamma = np.bincount(self.kc_nnz, weights=r_nnz * self.t_nnz, minlength=self.K)
        return f, np.concatenate([g_theta, g_beta, g_gamma])

    def projected_grad_norm(self, x: np.ndarray, g: np.ndarray) -> float:
        pg = g.copy()
        gamma = x[self.S + self.K :]
        gg = pg[self.S + self.K :]
        gg[(gamma <= 0.0) & (gg < 0.0)] = 0.0
        return float(np.max(np.abs(pg))) if pg.size else 0.0


def _ascend(problem: AFMProblem, config: FitConfig) -> tuple[np.ndarray, bool, int, list[float]]:
    x = problem.project(np.zeros(problem.S + 2 * problem.K))
    f, g = problem.value_and_grad(x)
    trace = [f]
    alpha = 1.0 / max(1.0, float(np.max(np.abs(g))) if g.size else 1.0)
    converged = False
    iters = 0
    for iters in range(1, config.max_iters + 1):
        step = alpha
        f_new, g_new, x_new = f, g, x
        while True:
            x_try = problem.project(x + step * g)
            f_try, g_try = problem.value_and_grad(x_try)
            if f_try >= f:
                f_new, g_new, x_new = f_try, g_try, x_try
                break
            if step <= 1e-16:
                break
            step *= 0.5
        if f_new < f or (f_new == f and np.array_equal(x_new, x)):
            # No ascent left at machine precision.
            converged = True
            break
        s = x_new - x
        yv = g - g_new
        sy = float(s @ yv)
        if sy > 1e-300:
            alpha = min(max(float(s @ s) / sy, 1e-10), 1e10)
        else:
            alpha = step * 2.0
        rel_change = abs(f_new - f) / max(1.0, abs(f_new))
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if rel_change < config.rel_tol:
            converged = True
            break
        if problem.projected_grad_norm(x, g) < config.grad_tol:
            converged = True
            break
    return x, converged, iters, trace


def fit_afm(
    log_: TransactionLog,
    q: QMatrix,
    config: FitConfig | None = None,
    design: Design | None = None,
    obs_mask: np.ndarray | None = None,
) -> AFMFit:
    """Maximum-likelihood AFM fit.

    ``design``/``obs_mask`` allow refitting subsets of a prebuilt design
    (used by cross-validation); plain callers pass a log and Q-matrix.
    Students or KCs without observations are dropped from the reported
    parameters with a warning and do not count toward ``n_params``.
    """
    config = config or FitConfig()
    if design is None:
        if log_.n_attempts == 0:
            raise ConfigError("cannot fit on an empty transaction log")
        design = build_design(log_, q)
    problem = AFMProblem(design, obs_mask=obs_mask, ridge=config.ridge)
    if problem.n_obs == 0:
        raise ConfigError("cannot fit on zero observations")
    dropped_students = int((~problem.active_students).sum())
    dropped_kcs = int((~problem.active_kcs).sum())
    if dropped_students or dropped_kcs:
        log.warning(
            "fit_afm: dropping %d student(s) and %d KC(s) without observations",
            dropped_students,
            dropped_kcs,
        )
    x, converged, iters, trace = _ascend(problem, config)
    theta, beta, gamma = problem.unpack(x)
    students = design.students
    kcs = design.kc_labels
    q_counts_all = _question_counts_from(q)
    fit = AFMFit(
        theta={s: float(theta[i]) for i, s in enumerate(students) if problem.active_students[i]},
        beta={k: float(beta[i]) for i, k in enumerate(kcs) if problem.active_kcs[i]},
        gamma={k: float(gamma[i]) for i, k in enumerate(kcs) if problem.active_kcs[i]},
        log_likelihood=problem.loglik(x),
        n_obs=problem.n_obs,
        n_params=int(problem.active_students.sum()) + 2 * int(problem.active_kcs.sum()),
        converged=converged,
        n_iters=iters,
        trace=tuple(trace),
        kc_question_counts={
            k: q_counts_all[k] for i, k in enumerate(kcs) if problem.active_kcs[i]
        },
    )
    return fit


def _question_counts_from(q: QMatrix) -> dict[str, int]:
    sums = q.matrix.sum(axis=0)
    return {k: int(sums[i]) for i, k in enumerate(q.kc_labels)}


def predict(
    fit: AFMFit,
    student_id: str,
    question_id: str,
    opportunities: dict[str, float],
    q: QMatrix,
) -> float:
    """Success probability for one (student, question) attempt.

    ``opportunities`` maps KC label -> prior same-KC attempts by this
    student. Unseen KCs fall back to the mean fitted beta/gamma; an unseen
    student falls back to the mean theta. Both mirror what cross-validation
    does for questions whose KC never appears in a training fold.
    """
    z = fit.theta.get(student_id)
    if z is None:
        z = float(np.mean(list(fit.theta.values())))
    for kc in q.kcs_of(question_id):
        beta = fit.beta.get(kc, fit.beta_mean)
        gamma = fit.gamma.get(kc, fit.gamma_mean)
        z += beta + gamma * float(opportunities.get(kc, 0.0))
    return float(expit(z))


# ---------------------------------------------------------------------------
# Cross-validation and comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CVReport:
    model_name: str
    seeds: tuple[int, ...]
    rmses: tuple[float, ...]
    folds: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.rmses))

    @property
    def std(self) -> float:
        return float(np.std(self.rmses, ddof=1)) if len(self.rmses) > 1 else 0.0


def _predict_masked(problem: AFMProblem, x: np.ndarray, eval_problem: AFMProblem) -> np.ndarray:
    """Probabilities for eval observations under train-fit parameters,
    with mean fallbacks for KCs the training fold never saw."""
    theta, beta, gamma = problem.unpack(x)
    active_s = problem.active_students
    active_k = problem.active_kcs
    theta_mean = float(theta[active_s].mean()) if active_s.any() else 0.0
    beta_mean = float(beta[active_k].mean()) if active_k.any() else 0.0
    gamma_mean = float(gamma[active_k].mean()) if active_k.any() else 0.0
    theta_eff = np.where(active_s, theta, theta_mean)
    beta_eff = np.where(active_k, beta, beta_mean)
    gamma_eff = np.where(active_k, gamma, gamma_mean)
    contrib = beta_eff[eval_problem.kc_nnz] + gamma_eff[eval_problem.kc_nnz] * eval_problem.t_nnz
    z = theta_eff[eval_problem.sidx] + np.bincount(
        eval_problem.obs_nnz, weights=contrib, minlength=eval_problem.n_obs
    )
    return expit(z)


def item_cv(
    log_: TransactionLog,
    q: QMatrix,
    folds: int = 3,
    seeds: Sequence[int] | None = None,
    config: FitConfig | None = None,
    model_name: str = "model",
) -> CVReport:
    """Item-stratified cross-validation.

    Per seed, questions are partitioned uniformly at random into folds; the
    model is fit on the complement's transactions and scored on the fold's.
    Squared errors are pooled across the folds of a seed before taking the
    root, giving one RMSE per seed. Opportunity counts derive from the full
    log: holding out a question hides its outcomes from the fit, not the
    student's practice history.
    """
    if folds < 2:
        raise ConfigError("item_cv needs at least 2 folds")
    if seeds is None:
        seeds = list(range(50))
    if not seeds:
        raise ConfigError("item_cv needs at least one seed")
    config = config or FitConfig()
    design = build_design(log_, q)
    qid_arr = np.asarray(design.question_ids)
    all_qids = list(q.question_ids)
    rmses: list[float] = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for attempt in range(2):
            order = list(rng.permutation(all_qids))
            fold_sets = [set(chunk) for chunk in np.array_split(np.asarray(order), folds)]
            fold_masks = [np.isin(qid_arr, sorted(fs)) for fs in fold_sets]
            if all(m.any() and not m.all() for m in fold_masks):
                break
            if attempt == 1:
                raise ConfigError(
                    f"seed {seed}: a fold has no transactions even after reshuffling"
                )
        sq_errors: list[np.ndarray] = []
        for mask in fold_masks:
            train_problem = AFMProblem(design, obs_mask=~mask, ridge=config.ridge)
            x, _, _, _ = _ascend(train_problem, config)
            eval_problem = AFMProblem(design, obs_mask=mask, ridge=config.ridge)
            p = _predict_masked(train_problem, x, eval_problem)
            sq_errors.append((p - eval_problem.y) ** 2)
        pooled = np.concatenate(sq_errors)
        rmses.append(float(np.sqrt(pooled.mean())))
    return CVReport(
        model_name=model_name,
        seeds=tuple(int(s) for s in seeds),
        rmses=tuple(rmses),
        folds=folds,
    )


def save_cv_report(report: CVReport, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "rmse"])
        for seed, rmse in zip(report.seeds, report.rmses):
            writer.writerow([seed, repr(rmse)])
        writer.writerow(["mean", repr(report.mean)])
        writer.writerow(["std", repr(report.std)])


@dataclass(frozen=True)
class TTestResult:
    t_stat: float
    df: int
    p_value: float
    mean_a: float
    mean_b: float
    degenerate: bool = False


def compare_rmse(a: CVReport | Sequence[float], b: CVReport | Sequence[float]) -> TTestResult:
    """Unpaired two-sample Student's t with pooled variance, two-sided p.

    A zero pooled variance cannot support inference; that case returns
    t = 0, p = 1 and sets the degenerate flag.
    """
    xs = np.asarray(a.rmses if isinstance(a, CVReport) else a, dtype=np.float64)
    ys = np.asarray(b.rmses if isinstance(b, CVReport) else b, dtype=np.float64)
    if len(xs) < 2 or len(ys) < 2:
        raise ConfigError("compare_rmse needs at least two values per sample")
    df = len(xs) + len(ys) - 2
    var_a = float(xs.var(ddof=1))
    var_b = float(ys.var(ddof=1))
    pooled = ((len(xs) - 1) * var_a + (len(ys) - 1) * var_b) / df
    if pooled <= 0.0:
        return TTestResult(
            t_stat=0.0, df=df, p_value=1.0,
            mean_a=float(xs.mean()), mean_b=float(ys.mean()), degenerate=True,
        )
    se = math.sqrt(pooled * (1.0 / len(xs) + 1.0 / len(ys)))
    t_stat = (float(xs.mean()) - float(ys.mean())) / se
    p = 2.0 * float(student_t.sf(abs(t_stat), df))
    return TTestResult(
        t_stat=t_stat, df=df, p_value=p,
        mean_a=float(xs.mean()), mean_b=float(ys.mean()),
    )


# ---------------------------------------------------------------------------
# Learning curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    kc: str
    opportunity: int
    error_rate: float
    n: int


def learning_curve(
    log_: TransactionLog,
    model: KCModel,
    kc: str,
    max_opportunity: int | None = None,
) -> list[CurvePoint]:
    """Observed error rate at each practice opportunity for one KC.

    Opportunities with no observations are omitted rather than reported as
    zero-count points.
    """
    if kc not in set(model.mapping.values()):
        raise ConfigError(f"KC {kc!r} is not in model {model.name!r}")
    buckets: dict[int, list[int]] = {}
    seen: dict[str, int] = {}
    for txn in log_.transactions:
        label = model.mapping.get(txn.question_id)
        if label is None:
            raise ConfigError(f"model {model.name!r} does not cover {txn.question_id!r}")
        if label != kc:
            continue
        t = seen.get(txn.student_id, 0)
        if max_opportunity is None or t <= max_opportunity:
            buckets.setdefault(t, []).append(txn.outcome)
        seen[txn.student_id] = t + 1
    return [
        CurvePoint(
            kc=kc,
            opportunity=t,
            error_rate=1.0 - float(np.mean(buckets[t])),
            n=len(buckets[t]),
        )
        for t in sorted(buckets)
    ]


def all_learning_curves(
    log_: TransactionLog, model: KCModel, max_opportunity: int | None = None
) -> list[CurvePoint]:
    points: list[CurvePoint] = []
    for kc in sorted(set(model.mapping.values())):
        points.extend(learning_curve(log_, model, kc, max_opportunity))
    return points


def save_curves(points: Sequence[CurvePoint], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kc", "opportunity", "error_rate", "n"])
        for p in points:
            writer.writerow([p.kc, p.opportunity, repr(p.error_rate), p.n])
