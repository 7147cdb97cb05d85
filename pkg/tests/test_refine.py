import numpy as np
import pytest
from scipy.special import expit

from kckit import (
    AFMFit,
    BigramLM,
    ConfigError,
    FitConfig,
    KCModel,
    RefinementReport,
    CVReport,
    TTestResult,
    evaluate_refinement,
    problematic_kcs,
    refine_kc,
    synth_log,
    toy_bank,
)
from kckit.refine import REFINE_METHODS, ProblematicKC


def fake_fit(gamma, beta, counts):
    return AFMFit(
        theta={"s1": 0.0},
        beta=beta,
        gamma=gamma,
        log_likelihood=-10.0,
        n_obs=20,
        n_params=1 + 2 * len(beta),
        converged=True,
        n_iters=5,
        trace=(-10.0,),
        kc_question_counts=counts,
    )


class TestProblematicKCs:
    def test_flags_flat_midrange_only(self):
        fit = fake_fit(
            gamma={"flat-mid": 0.0, "steep": 0.4, "flat-easy": 0.0},
            beta={"flat-mid": 0.1, "steep": 0.0, "flat-easy": 3.5},
            counts={"flat-mid": 4, "steep": 4, "flat-easy": 4},
        )
        out = problematic_kcs(fit)
        assert [p.label for p in out] == ["flat-mid"]
        p = out[0]
        assert p.gamma == 0.0
        assert p.success_rate == pytest.approx(float(expit(0.1)))
        assert p.question_count == 4

    def test_band_endpoints_inclusive(self):
        beta_lo = float(np.log(0.2 / 0.8))  # expit(beta) == 0.2 exactly
        fit = fake_fit(
            gamma={"edge": 0.0},
            beta={"edge": beta_lo},
            counts={"edge": 1},
        )
        assert problematic_kcs(fit, band=(0.2, 0.8))
        assert not problematic_kcs(fit, band=(0.2000001, 0.8))

    def test_gamma_tol_is_strict_upper_bound(self):
        fit = fake_fit(
            gamma={"a": 0.001, "b": 0.0009},
            beta={"a": 0.0, "b": 0.0},
            counts={"a": 1, "b": 1},
        )
        assert [p.label for p in problematic_kcs(fit, gamma_tol=0.001)] == ["b"]

    def test_sorted_by_count_then_label(self):
        fit = fake_fit(
            gamma={"zz": 0.0, "aa": 0.0, "mm": 0.0},
            beta={"zz": 0.0, "aa": 0.0, "mm": 0.0},
            counts={"zz": 9, "aa": 2, "mm": 2},
        )
        assert [p.label for p in problematic_kcs(fit)] == ["zz", "aa", "mm"]

    def test_invalid_band_rejected(self):
        fit = fake_fit(gamma={}, beta={}, counts={})
        with pytest.raises(ConfigError):
            problematic_kcs(fit, band=(0.8, 0.2))
        with pytest.raises(ConfigError):
            problematic_kcs(fit, band=(-0.1, 0.5))


class TestRefineKC:
    def setup_method(self):
        self.bank = toy_bank()
        self.lm = BigramLM.from_bank(self.bank)
        self.expert = self.bank.expert_model()

    def test_unknown_method_rejected(self):
        with pytest.raises(ConfigError, match="method"):
            refine_kc(self.expert, "fractions", self.bank, self.lm, method="magic")
        assert REFINE_METHODS == ("concept", "question-emb", "kcluster")

    def test_empty_kc_rejected(self):
        with pytest.raises(ConfigError, match="no questions"):
            refine_kc(self.expert, "chemistry", self.bank, self.lm)

    def test_concept_method_uses_given_labels_verbatim(self):
        frac_ids = [q for q, k in self.expert.mapping.items() if k == "fractions"]
        concepts = {
            qid: ("easy" if qid <= "frac-04" else "hard") for qid in frac_ids
        }
        out = refine_kc(
            self.expert, "fractions", self.bank, self.lm,
            method="concept", concepts=concepts,
        )
        assert out.name == "expert+split(fractions,concept)"
        for qid in frac_ids:
            assert out.mapping[qid] == concepts[qid]
        # Everything outside the split KC is untouched.
        for qid, kc in self.expert.mapping.items():
            if kc != "fractions":
                assert out.mapping[qid] == kc

    def test_collision_with_existing_label_namespaced(self):
        frac_ids = [q for q, k in self.expert.mapping.items() if k == "fractions"]
        concepts = {qid: "gravity" for qid in frac_ids}  # label in use elsewhere
        out = refine_kc(
            self.expert, "fractions", self.bank, self.lm,
            method="concept", concepts=concepts,
        )
        for qid in frac_ids:
            assert out.mapping[qid] == "fractions:gravity"
        gravity_ids = [q for q, k in self.expert.mapping.items() if k == "gravity"]
        for qid in gravity_ids:
            assert out.mapping[qid] == "gravity"

    def test_single_question_kc_short_circuits(self):
        mapping = dict(self.expert.mapping)
        mapping["frac-01"] = "lonely"
        model = KCModel(name="m", mapping=mapping)
        out = refine_kc(
            model, "lonely", self.bank, self.lm,
            method="kcluster", concepts={"frac-01": "fractions basics"},
        )
        assert out.mapping["frac-01"] == "fractions basics"

    def test_kcluster_method_splits_only_target(self):
        out = refine_kc(self.expert, "fractions", self.bank, self.lm,
                        method="kcluster")
        frac_ids = {q for q, k in self.expert.mapping.items() if k == "fractions"}
        untouched = {q: k for q, k in out.mapping.items() if q not in frac_ids}
        want = {q: k for q, k in self.expert.mapping.items() if q not in frac_ids}
        assert untouched == want
        assert set(out.mapping) == set(self.expert.mapping)

    def test_question_emb_method_runs(self):
        out = refine_kc(self.expert, "triangles", self.bank, self.lm,
                        method="question-emb")
        assert out.name == "expert+split(triangles,question-emb)"
        assert set(out.mapping) == set(self.expert.mapping)


class TestRefinementReport:
    def make_report(self, bic_after, rmse_after):
        cv_b = CVReport(model_name="b", seeds=(0, 1), rmses=(0.40, 0.42), folds=3)
        cv_a = CVReport(model_name="a", seeds=(0, 1), rmses=rmse_after, folds=3)
        return RefinementReport(
            before_name="b", after_name="a",
            before_kcs=1, after_kcs=2,
            before_ll=-50.0, after_ll=-45.0,
            before_aic=110.0, after_aic=105.0,
            before_bic=120.0, after_bic=bic_after,
            cv_before=cv_b, cv_after=cv_a,
            ttest=TTestResult(t_stat=2.0, df=2, p_value=0.2,
                              mean_a=0.41, mean_b=float(np.mean(rmse_after))),
        )

    def test_deltas_and_improved(self):
        rep = self.make_report(bic_after=115.0, rmse_after=(0.30, 0.32))
        assert rep.delta_aic == pytest.approx(-5.0)
        assert rep.delta_bic == pytest.approx(-5.0)
        assert rep.improved

    def test_not_improved_when_bic_worse(self):
        rep = self.make_report(bic_after=125.0, rmse_after=(0.30, 0.32))
        assert not rep.improved

    def test_not_improved_when_rmse_worse(self):
        rep = self.make_report(bic_after=115.0, rmse_after=(0.50, 0.52))
        assert not rep.improved

    def test_markdown_mentions_key_numbers(self):
        rep = self.make_report(bic_after=115.0, rmse_after=(0.30, 0.32))
        text = rep.to_markdown()
        assert "| quantity | before | after |" in text
        assert "120.000" in text and "115.000" in text
        assert "t = 2.0000 on 2 df" in text
        assert "Refinement improves" in text

    def test_markdown_flags_degenerate_ttest(self):
        rep = self.make_report(bic_after=115.0, rmse_after=(0.30, 0.32))
        degen = RefinementReport(
            **{**rep.__dict__, "ttest": TTestResult(0.0, 2, 1.0, 0.4, 0.4, True)}
        )
        assert "degenerate" in degen.to_markdown()


class TestEvaluateRefinement:
    def test_smoke_on_synthetic_data(self):
        bank = toy_bank()
        expert = bank.expert_model()
        log_, _ = synth_log(bank, expert, n_students=15, rounds=1, seed=9)
        merged = KCModel(name="merged", mapping={q: "all" for q in bank.ids})
        cfg = FitConfig(max_iters=60, rel_tol=1e-6)
        rep = evaluate_refinement(
            log_, bank, merged, expert, seeds=[0, 1], folds=3, config=cfg,
        )
        assert rep.before_kcs == 1
        assert rep.after_kcs == 5
        assert rep.after_ll >= rep.before_ll  # nested models
        assert rep.cv_before.seeds == rep.cv_after.seeds == (0, 1)
        assert rep.ttest.df == 2
        assert isinstance(rep.to_markdown(), str)
