"""Command-line interface: one pipeline stage per subcommand.

Batch-oriented and non-interactive. Every command exits 0 on success, 2 on
configuration problems (bad files, bad flags), 3 on backend failures
(unreachable server, missing capability), and 4 when --strict is set and
an iterative stage stopped without converging. All randomness descends
from a single --seed through a counter-based splitter, so identical
invocations produce identical artifacts with the builtin backend.
"""

from __future__ import annotations

import functools
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import click

from .afm import (
    FitConfig,
    aic_bic,
    all_learning_curves,
    fit_afm,
    item_cv,
    learning_curve,
    save_curves,
    save_cv_report,
)
from .backends import BigramLM, CachedBackend, DecodeConfig, RemoteBackend, ScoringBackend
from .bank import (
    QuestionBank,
    TransactionLog,
    load_bank,
    load_kc_model,
    load_transactions,
    save_kc_model,
)
from .cluster import APParams, ClusterAssignment, cluster, save_assignment
from .concepts import extract_all, load_concepts, save_concepts
from .congruity import AffinityMatrix, congruity_matrix, load_matrix, save_matrix
from .embeddings import (
    concept_embeddings,
    embedding_affinity,
    export_embeddings_csv,
    question_embeddings,
    save_embeddings,
)
from .errors import BackendError, ConfigError, EmptyGenerationError, KckitError
from .kcmodel import KCModel, alignment_report, from_clusters, to_qmatrix
from .refine import REFINE_METHODS, evaluate_refinement, problematic_kcs, refine_kc
from .seeding import seed_sequence

METHODS = ("concept", "concept-emb", "question-emb", "kcluster")

EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_NONCONVERGED = 4

TOKEN_ENV = "KCLUSTER_REMOTE_TOKEN"


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def cli_errors(fn):
    """Translate library exceptions into the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, str(exc))
        except BackendError as exc:
            _fail(EXIT_BACKEND, str(exc))
        except EmptyGenerationError as exc:
            _fail(EXIT_BACKEND, str(exc))
        except KckitError as exc:
            _fail(EXIT_CONFIG, str(exc))

    return wrapper


def build_backend(
    spec: str, cache: str | None, bank: QuestionBank | None
) -> ScoringBackend:
    if spec == "builtin":
        if bank is None:
            raise ConfigError("the builtin backend needs a question bank to train on")
        inner: ScoringBackend = BigramLM.from_bank(bank)
    elif spec.startswith("remote:"):
        url = spec[len("remote:"):]
        if not url:
            raise ConfigError("remote backend needs a URL, e.g. remote:http://host:8000")
        inner = RemoteBackend(url, token=os.environ.get(TOKEN_ENV))
    else:
        raise ConfigError(f"unknown backend {spec!r} (expected builtin or remote:<url>)")
    if cache:
        inner = CachedBackend(inner, cache)
    return inner


def _parse_preference(text: str) -> float | str:
    if text == "median":
        return "median"
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"--preference must be 'median' or a number, got {text!r}") from None


def backend_options(fn):
    fn = click.option(
        "--jobs", type=int, default=1, show_default=True,
        help="Worker threads for per-pair backend calls.",
    )(fn)
    fn = click.option(
        "--cache", "cache_path", type=click.Path(dir_okay=False), default=None,
        help="Append-only JSONL score cache (safe to reuse across runs).",
    )(fn)
    fn = click.option(
        "--backend", "backend_spec", default="builtin", show_default=True,
        help="builtin | remote:<url> (token read from $" + TOKEN_ENV + ").",
    )(fn)
    return fn


def decode_options(fn):
    fn = click.option("--length-penalty", type=float, default=1.0, show_default=True)(fn)
    fn = click.option("--max-tokens", type=int, default=24, show_default=True)(fn)
    fn = click.option("--beam-size", type=int, default=5, show_default=True)(fn)
    return fn


def ap_options(fn):
    fn = click.option(
        "--preference", default="median", show_default=True,
        help="Self-similarity: 'median' or a number.",
    )(fn)
    fn = click.option("--max-iters", type=int, default=200, show_default=True)(fn)
    fn = click.option("--damping", type=float, default=0.9, show_default=True)(fn)
    return fn


def _warn_convergence(converged: bool, what: str, strict: bool) -> None:
    if converged:
        return
    click.echo(f"warning: {what} stopped before converging", err=True)
    if strict:
        sys.exit(EXIT_NONCONVERGED)


@click.group()
def main() -> None:
    """Discover and evaluate knowledge-component models for question banks."""


# ---------------------------------------------------------------------------
# Data inspection
# ---------------------------------------------------------------------------


@main.command("ingest-check")
@click.argument("bank_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--transactions", "transactions_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--kc-model", "kc_model_path", type=click.Path(exists=True, dir_okay=False))
@cli_errors
def ingest_check(bank_path, transactions_path, kc_model_path):
    """Validate input files and print a short inventory."""
    bank = load_bank(bank_path)
    qtypes = sorted({q.qtype for q in bank})
    click.echo(f"bank: {len(bank)} questions, types: {', '.join(qtypes)}")
    expert = bank.expert_model()
    if expert is not None:
        click.echo(f"expert tags: {expert.kc_count} KCs")
    else:
        click.echo("expert tags: absent")
    if transactions_path:
        log = load_transactions(transactions_path, bank)
        s = log.summary()
        click.echo(
            f"transactions: {s['attempts']} attempts by {s['students']} students "
            f"over {s['questions']} questions"
        )
    if kc_model_path:
        model = load_kc_model(kc_model_path, bank)
        click.echo(f"kc model: {model.kc_count} KCs over {len(model.mapping)} questions")
    click.echo("ok")


# ---------------------------------------------------------------------------
# Affinity, concepts, embeddings, clustering
# ---------------------------------------------------------------------------


@main.command("congruity")
@click.argument("bank_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@backend_options
@cli_errors
def congruity_cmd(bank_path, out_path, backend_spec, cache_path, jobs):
    """Score the all-pairs congruity matrix and write it as CSV."""
    bank = load_bank(bank_path)
    backend = build_backend(backend_spec, cache_path, bank)
    matrix = congruity_matrix(bank, backend, jobs=jobs)
    save_matrix(matrix, out_path)
    click.echo(f"wrote {out_path}: {len(matrix.ids)}x{len(matrix.ids)} congruity matrix")


@main.command("concepts")
@click.argument("bank_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--fresh", is_flag=True, help="Ignore labels already present in --out.")
@decode_options
@backend_options
@cli_errors
def concepts_cmd(bank_path, out_path, fresh, backend_spec, cache_path, jobs,
                 beam_size, max_tokens, length_penalty):
    """Generate one concept label per question.

    The output CSV doubles as a resume file: labels already present are
    kept unless --fresh is given.
    """
    bank = load_bank(bank_path)
    backend = build_backend(backend_spec, cache_path, bank)
    cfg = DecodeConfig(beam_size=beam_size, max_tokens=max_tokens,
                       length_penalty=length_penalty)
    resume = None if fresh else out_path
    concepts = extract_all(bank, backend, config=cfg, jobs=jobs, resume_path=resume)
    save_concepts(concepts, out_path)
    click.echo(f"wrote {out_path}: {len(concepts)} concept labels")


@main.command("embed")
@click.argument("bank_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False),
              help="Output prefix; writes <out>.json and <out>.bin.")
@click.option("--what", type=click.Choice(["questions", "concepts"]),
              default="questions", show_default=True)
@click.option("--concepts", "concepts_path", type=click.Path(exists=True, dir_okay=False),
              help="Concept CSV (required with --what concepts).")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False),
              help="Also export a plain CSV of the vectors.")
@backend_options
@cli_errors
def embed_cmd(bank_path, out_path, what, concepts_path, csv_path,
              backend_spec, cache_path, jobs):
    """Embed questions or their concept labels."""
    del jobs  # embedding is one batched call
    bank = load_bank(bank_path)
    backend = build_backend(backend_spec, cache_path, bank)
    if what == "questions":
        emb = question_embeddings(bank, backend)
    else:
        if not concepts_path:
            raise ConfigError("--what concepts requires --concepts CSV")
        emb = concept_embeddings(load_concepts(concepts_path), backend)
    save_embeddings(emb, out_path)
    if csv_path:
        export_embeddings_csv(emb, csv_path)
    click.echo(f"wrote {out_path}.json/.bin: {len(emb.ids)} x {emb.dim} ({emb.source})")


@main.command("cluster")
@click.argument("matrix_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--stable-window", type=int, default=15, show_default=True)
@click.option("--strict", is_flag=True, help="Exit 4 if message passing does not converge.")
@ap_options
@cli_errors
def cluster_cmd(matrix_path, out_path, stable_window, strict, damping, max_iters, preference):
    """Run affinity propagation on a saved affinity matrix."""
    matrix = load_matrix(matrix_path)
    params = APParams(
        damping=damping,
        max_iters=max_iters,
        stable_window=stable_window,
        preference=_parse_preference(preference),
    )
    assignment = cluster(matrix, params)
    save_assignment(assignment, out_path)
    click.echo(
        f"wrote {out_path}: {assignment.n_clusters} clusters, "
        f"net similarity {assignment.net_similarity:.6f}, "
        f"{assignment.iterations_run} iterations"
    )
    _warn_convergence(assignment.converged, "affinity propagation", strict)


def run_discovery(
    bank: QuestionBank,
    backend: ScoringBackend,
    method: str,
    params: APParams,
    decode: DecodeConfig | None = None,
    jobs: int = 1,
    merge_duplicates: bool = False,
    concepts_resume: str | Path | None = None,
    name: str | None = None,
) -> tuple[KCModel, ClusterAssignment | None, AffinityMatrix | None, dict]:
    """Shared KC-discovery flow behind kc-build, dfa, and pipeline.

    Concept labels are always produced: the concept method is defined by
    them and every clustering method names its clusters by the exemplar's
    concept.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r} (expected one of {METHODS})")
    concepts = extract_all(bank, backend, config=decode, jobs=jobs,
                           resume_path=concepts_resume)
    if method == "concept":
        mapping = {qid: concepts[qid].label for qid in bank.ids}
        return KCModel(name=name or method, mapping=mapping), None, None, concepts
    if method == "concept-emb":
        matrix = embedding_affinity(concept_embeddings(concepts, backend))
    elif method == "question-emb":
        matrix = embedding_affinity(question_embeddings(bank, backend))
    else:
        matrix = congruity_matrix(bank, backend, jobs=jobs)
    assignment = cluster(matrix, params)
    model = from_clusters(assignment, concepts, merge_duplicates=merge_duplicates,
                          name=name or method)
    return model, assignment, matrix, concepts


@main.command("kc-build")
@click.argument("bank_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--method", type=click.Choice(METHODS), default="kcluster", show_default=True)
@click.option("--concepts", "concepts_path", type=click.Path(dir_okay=False),
              help="Concept CSV used as a resume file and kept up to date.")
@click.option("--matrix-out", type=click.Path(dir_okay=False),
              help="Also save the affinity matrix (clustering methods only).")
@click.option("--assignment-out", type=click.Path(dir_okay=False),
              help="Also save the raw cluster assignment.")
@click.option("--merge-duplicate-labels", is_flag=True,
              help="Merge clusters whose exemplars share a concept label.")
@click.option("--name", "model_name", default=None, help="Name for the KC model.")
@click.option("--stable-window", type=int, default=15, show_default=True)
@click.option("--strict", is_flag=True)
@ap_options
@decode_options
@backend_options
@cli_errors
def kc_build(bank_path, out_path, method, concepts_path, matrix_out, assignment_out,
             merge_duplicate_labels, model_name, stable_window, strict,
             damping, max_iters, preference, beam_size, max_tokens, length_penalty,
             backend_spec, cache_path, jobs):
    """Discover a KC model from question text and write it as CSV."""
    bank = load_bank(bank_path)
    backend = build_backend(backend_spec, cache_path, bank)
    params = APParams(damping=damping, max_iters=max_iters,
                      stable_window=stable_window,
                      preference=_parse_preference(preference))
    decode = DecodeConfig(beam_size=beam_size, max_tokens=max_tokens,
                          length_penalty=length_penalty)
    model, assignment, matrix, concepts = run_discovery(
        bank, backend, method, params, decode=decode, jobs=jobs,
        merge_duplicates=merge_duplicate_labels, concepts_resume=concepts_path,
        name=model_name,
    )
    if concepts_path:
        save_concepts(concepts, concepts_path)
    if matrix is not None and matrix_out:
        save_matrix(matrix, matrix_out)
    if assignment is not None and assignment_out:
        save_assignment(assignment, assignment_out)
    save_kc_model(model, out_path, bank)
    click.echo(f"wrote {out_path}: {model.kc_count} KCs over {len(model.mapping)} questions")
    if assignment is not None:
        _warn_convergence(assignment.converged, "affinity propagation", strict)


# ---------------------------------------------------------------------------
# Response modeling
# ---------------------------------------------------------------------------


def _load_modeling_inputs(bank_path, kc_model_path, transactions_path,
                          first_attempt_only):
    bank = load_bank(bank_path)
    model = load_kc_model(kc_model_path, bank)
    log = load_transactions(transactions_path, bank)
    if first_attempt_only:
        log = log.first_attempts()
    return bank, model, log


@main.command("afm-fit")
@click.argument("bank_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("kc_model_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("transactions_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False),
              help="Write fitted parameters and criteria as JSON.")
@click.option("--max-iters", type=int, default=500, show_default=True)
@click.option("--first-attempt-only", is_flag=True)
@click.option("--strict", is_flag=True)
@cli_errors
def afm_fit(bank_path, kc_model_path, transactions_path, out_path,
            max_iters, first_attempt_only, strict):
    """Fit the additive factor model and report fit criteria."""
    bank, model, log = _load_modeling_inputs(
        bank_path, kc_model_path, transactions_path, first_attempt_only
    )
    q = to_qmatrix(model, bank)
    fit = fit_afm(log, q, FitConfig(max_iters=max_iters))
    aic, bic = aic_bic(fit)
    click.echo(
        f"LL={fit.log_likelihood:.4f} AIC={aic:.4f} BIC={bic:.4f} "
        f"n_obs={fit.n_obs} n_params={fit.n_params} iters={fit.n_iters}"
    )
    if out_path:
        payload = {
            "model": model.name,
            "log_likelihood": fit.log_likelihood,
            "aic": aic,
            "bic": bic,
            "n_obs": fit.n_obs,
            "n_params": fit.n_params,
            "converged": fit.converged,
            "iterations": fit.n_iters,
            "theta": fit.theta,
            "beta": fit.beta,
            "gamma": fit.gamma,
        }
        Path(out_path).write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        click.echo(f"wrote {out_path}")
    _warn_convergence(fit.converged, "AFM fitting", strict)


@main.command("afm-cv")
@click.argument("bank_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("kc_model_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("transactions_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False))
@click.option("--folds", type=int, default=3, show_default=True)
@click.option("--cv-seeds", type=int, default=50, show_default=True,
              help="Number of independent fold shuffles.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--max-iters", type=int, default=500, show_default=True)
@click.option("--first-attempt-only", is_flag=True)
@cli_errors
def afm_cv(bank_path, kc_model_path, transactions_path, out_path, folds,
           cv_seeds, seed, max_iters, first_attempt_only):
    """Item-stratified cross-validation of the AFM."""
    bank, model, log = _load_modeling_inputs(
        bank_path, kc_model_path, transactions_path, first_attempt_only
    )
    q = to_qmatrix(model, bank)
    seeds = seed_sequence(seed, "afm-cv", cv_seeds)
    report = item_cv(log, q, folds=folds, seeds=seeds,
                     config=FitConfig(max_iters=max_iters), model_name=model.name)
    click.echo(
        f"cv rmse: mean={report.mean:.6f} std={report.std:.6f} "
        f"({len(report.rmses)} seeds x {folds} folds)"
    )
    if out_path:
        save_cv_report(report, out_path)
        click.echo(f"wrote {out_path}")


@main.command("align")
@click.argument("bank_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("model_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("reference_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False))
@cli_errors
def align_cmd(bank_path, model_path, reference_path, out_path):
    """Score one KC model against a reference model."""
    bank = load_bank(bank_path)
    model = load_kc_model(model_path, bank, name=Path(model_path).stem)
    reference = load_kc_model(reference_path, bank, name=Path(reference_path).stem)
    report = alignment_report(model, reference)
    for key, value in report["metrics"].items():
        click.echo(f"{key}: {value:.6f}")
    if out_path:
        Path(out_path).write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        click.echo(f"wrote {out_path}")


@main.command("curves")
@click.argument("bank_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("kc_model_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("transactions_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--kc", "kc_label", default=None, help="Restrict to one KC.")
@click.option("--max-opportunity", type=int, default=None)
@click.option("--first-attempt-only", is_flag=True)
@cli_errors
def curves_cmd(bank_path, kc_model_path, transactions_path, out_path, kc_label,
               max_opportunity, first_attempt_only):
    """Export observed learning curves per KC."""
    bank, model, log = _load_modeling_inputs(
        bank_path, kc_model_path, transactions_path, first_attempt_only
    )
    if kc_label is not None:
        points = learning_curve(log, model, kc_label, max_opportunity)
    else:
        points = all_learning_curves(log, model, max_opportunity)
    save_curves(points, out_path)
    click.echo(f"wrote {out_path}: {len(points)} curve points")


@main.command("dfa")
@click.argument("bank_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("kc_model_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("transactions_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False),
              help="Markdown report path.")
@click.option("--method", type=click.Choice(REFINE_METHODS), default="kcluster",
              show_default=True)
@click.option("--kc", "target_kc", default=None,
              help="Refine this KC instead of the top flagged one.")
@click.option("--refined-out", type=click.Path(dir_okay=False),
              help="Also write the refined KC model CSV.")
@click.option("--concepts", "concepts_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--gamma-tol", type=float, default=0.001, show_default=True)
@click.option("--band", nargs=2, type=float, default=(0.2, 0.8), show_default=True)
@click.option("--folds", type=int, default=3, show_default=True)
@click.option("--cv-seeds", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--first-attempt-only", is_flag=True)
@click.option("--stable-window", type=int, default=15, show_default=True)
@click.option("--strict", is_flag=True)
@ap_options
@decode_options
@backend_options
@cli_errors
def dfa_cmd(bank_path, kc_model_path, transactions_path, out_path, method, target_kc,
            refined_out, concepts_path, gamma_tol, band, folds, cv_seeds, seed,
            first_attempt_only, stable_window, strict, damping, max_iters, preference,
            beam_size, max_tokens, length_penalty, backend_spec, cache_path, jobs):
    """Flag KCs that resist learning, split one, and judge the split."""
    bank, model, log = _load_modeling_inputs(
        bank_path, kc_model_path, transactions_path, first_attempt_only
    )
    backend = build_backend(backend_spec, cache_path, bank)
    q = to_qmatrix(model, bank)
    fit = fit_afm(log, q)
    flagged = problematic_kcs(fit, gamma_tol=gamma_tol, band=tuple(band))
    lines = [f"# Difficulty factor analysis: {model.name}", ""]
    if flagged:
        lines.append("Flagged KCs (flat learning curve at unexceptional difficulty):")
        lines.append("")
        for p in flagged:
            lines.append(
                f"- `{p.label}`: gamma={p.gamma:.5f}, success rate={p.success_rate:.3f}, "
                f"{p.question_count} questions"
            )
    else:
        lines.append("No KCs flagged.")
    lines.append("")
    if target_kc is None and flagged:
        target_kc = flagged[0].label
    if target_kc is None:
        Path(out_path).write_text("\n".join(lines), encoding="utf-8")
        click.echo("no problematic KCs; report written without a refinement")
        click.echo(f"wrote {out_path}")
        _warn_convergence(fit.converged, "AFM fitting", strict)
        return
    params = APParams(damping=damping, max_iters=max_iters,
                      stable_window=stable_window,
                      preference=_parse_preference(preference))
    decode = DecodeConfig(beam_size=beam_size, max_tokens=max_tokens,
                          length_penalty=length_penalty)
    given = None
    if concepts_path:
        given = {qid: c.label for qid, c in load_concepts(concepts_path).items()}
    refined = refine_kc(model, target_kc, bank, backend, method=method,
                        params=params, concepts=given, decode=decode, jobs=jobs)
    report = evaluate_refinement(
        log, bank, model, refined,
        seeds=seed_sequence(seed, "dfa-cv", cv_seeds), folds=folds,
    )
    lines.append(f"## Refinement of `{target_kc}` via {method}")
    lines.append("")
    lines.append(report.to_markdown())
    Path(out_path).write_text("\n".join(lines), encoding="utf-8")
    if refined_out:
        save_kc_model(refined, refined_out, bank)
        click.echo(f"wrote {refined_out}")
    click.echo(f"wrote {out_path}")
    verdict = "improves" if report.improved else "does not improve"
    click.echo(
        f"split of {target_kc!r} {verdict} the model: "
        f"BIC {report.before_bic:.2f} -> {report.after_bic:.2f}, "
        f"CV RMSE {report.cv_before.mean:.5f} -> {report.cv_after.mean:.5f} "
        f"(p={report.ttest.p_value:.4g})"
    )
    _warn_convergence(fit.converged, "AFM fitting", strict)


# ---------------------------------------------------------------------------
# End-to-end pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineConfig:
    """Everything one pipeline run needs; see the pipeline subcommand."""

    bank_path: str
    out_dir: str
    transactions_path: str | None = None
    backend_spec: str = "builtin"
    cache_path: str | None = None
    method: str = "kcluster"
    damping: float = 0.9
    ap_max_iters: int = 200
    stable_window: int = 15
    preference: float | str = "median"
    merge_duplicate_labels: bool = False
    first_attempt_only: bool = False
    folds: int = 3
    cv_seeds: int = 10
    fit_max_iters: int = 500
    seed: int = 0
    jobs: int = 1
    strict: bool = False


def run_pipeline(cfg: PipelineConfig) -> int:
    """Run every applicable stage; returns the process exit code.

    Artifacts land in cfg.out_dir: concepts.csv, matrix.csv (+ .meta.json)
    and assignment.json for clustering methods, kc_model.csv, and with
    transactions also fit.json, cv.csv, align.json (when the bank carries
    expert tags), curves.csv, and summary.json. Re-runs reuse the concepts
    CSV and any --cache file, so an interrupted run resumes cheaply.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"method": cfg.method, "seed": cfg.seed, "stages": []}
    warnings: list[str] = []

    def stage(name: str, fn):
        try:
            result = fn()
        except KckitError as exc:
            raise type(exc)(
                f"stage {name}: {exc} (completed artifacts in {out} are reused on re-run)"
            ) from exc
        summary["stages"].append(name)
        return result

    bank = stage("ingest", lambda: load_bank(cfg.bank_path))
    log: TransactionLog | None = None
    if cfg.transactions_path:
        log = stage("ingest", lambda: load_transactions(cfg.transactions_path, bank))
        if cfg.first_attempt_only:
            log = log.first_attempts()
    backend = stage("backend", lambda: build_backend(cfg.backend_spec, cfg.cache_path, bank))
    params = APParams(damping=cfg.damping, max_iters=cfg.ap_max_iters,
                      stable_window=cfg.stable_window, preference=cfg.preference)
    model, assignment, matrix, concepts = stage(
        "discover",
        lambda: run_discovery(
            bank, backend, cfg.method, params, jobs=cfg.jobs,
            merge_duplicates=cfg.merge_duplicate_labels,
            concepts_resume=out / "concepts.csv",
        ),
    )
    stage("write-concepts", lambda: save_concepts(concepts, out / "concepts.csv"))
    if matrix is not None:
        stage("write-matrix", lambda: save_matrix(matrix, out / "matrix.csv"))
    if assignment is not None:
        stage("write-assignment", lambda: save_assignment(assignment, out / "assignment.json"))
        if not assignment.converged:
            warnings.append("affinity propagation stopped before converging")
    stage("write-kc-model", lambda: save_kc_model(model, out / "kc_model.csv", bank))
    summary["kc_count"] = model.kc_count
    summary["n_questions"] = len(bank)

    if log is not None:
        q = to_qmatrix(model, bank)
        fit_cfg = FitConfig(max_iters=cfg.fit_max_iters)
        fit = stage("afm-fit", lambda: fit_afm(log, q, fit_cfg))
        aic, bic = aic_bic(fit)
        if not fit.converged:
            warnings.append("AFM fitting stopped before converging")
        stage(
            "write-fit",
            lambda: (out / "fit.json").write_text(
                json.dumps(
                    {
                        "model": model.name,
                        "log_likelihood": fit.log_likelihood,
                        "aic": aic,
                        "bic": bic,
                        "n_obs": fit.n_obs,
                        "n_params": fit.n_params,
                        "converged": fit.converged,
                        "theta": fit.theta,
                        "beta": fit.beta,
                        "gamma": fit.gamma,
                    },
                    indent=2,
                    sort_keys=True,
                )
                + "\n",
                encoding="utf-8",
            ),
        )
        summary["log_likelihood"] = fit.log_likelihood
        summary["aic"] = aic
        summary["bic"] = bic
        cv = stage(
            "afm-cv",
            lambda: item_cv(
                log, q, folds=cfg.folds,
                seeds=seed_sequence(cfg.seed, "pipeline-cv", cfg.cv_seeds),
                config=fit_cfg, model_name=model.name,
            ),
        )
        stage("write-cv", lambda: save_cv_report(cv, out / "cv.csv"))
        summary["cv_rmse_mean"] = cv.mean
        summary["cv_rmse_std"] = cv.std
        expert = bank.expert_model()
        if expert is not None:
            report = stage("align", lambda: alignment_report(model, expert))
            stage(
                "write-align",
                lambda: (out / "align.json").write_text(
                    json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
                ),
            )
            summary["alignment"] = report["metrics"]
        points = stage("curves", lambda: all_learning_curves(log, model))
        stage("write-curves", lambda: save_curves(points, out / "curves.csv"))

    summary["warnings"] = warnings
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for w in warnings:
        click.echo(f"warning: {w}", err=True)
    if warnings and cfg.strict:
        return EXIT_NONCONVERGED
    return 0


@main.command("pipeline")
@click.option("--bank", "bank_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--transactions", "transactions_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--method", type=click.Choice(METHODS), default="kcluster", show_default=True)
@click.option("--folds", type=int, default=3, show_default=True)
@click.option("--cv-seeds", type=int, default=10, show_default=True)
@click.option("--merge-duplicate-labels", is_flag=True)
@click.option("--first-attempt-only", is_flag=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--stable-window", type=int, default=15, show_default=True)
@click.option("--strict", is_flag=True)
@ap_options
@backend_options
@cli_errors
def pipeline_cmd(bank_path, transactions_path, out_dir, method, folds, cv_seeds,
                 merge_duplicate_labels, first_attempt_only, seed, stable_window,
                 strict, damping, max_iters, preference, backend_spec, cache_path, jobs):
    """Run discovery plus (with transactions) the full evaluation suite."""
    cfg = PipelineConfig(
        bank_path=bank_path,
        out_dir=out_dir,
        transactions_path=transactions_path,
        backend_spec=backend_spec,
        cache_path=cache_path,
        method=method,
        damping=damping,
        ap_max_iters=max_iters,
        stable_window=stable_window,
        preference=_parse_preference(preference),
        merge_duplicate_labels=merge_duplicate_labels,
        first_attempt_only=first_attempt_only,
        folds=folds,
        cv_seeds=cv_seeds,
        seed=seed,
        jobs=jobs,
        strict=strict,
    )
    code = run_pipeline(cfg)
    click.echo(f"pipeline artifacts in {out_dir}")
    if code:
        sys.exit(code)


if __name__ == "__main__":  # pragma: no cover
    main()
