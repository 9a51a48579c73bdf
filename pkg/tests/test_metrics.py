import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrfusion.errors import ConfigError, NumericError, ShapeError
from cxrfusion.labels import PATHOLOGIES, LabelState, MetadataRecord
from cxrfusion.dataset import Sample
from cxrfusion.metrics import (EvalReport, auroc, compare_reports, evaluate,
                               render_comparison, render_table,
                               report_from_scores, subgroup_report)
from cxrfusion.model import PRESETS, MetaBranchConfig, build_model

from .oracles import auroc_brute

# scores drawn from a lattice so ties occur and monotone maps stay exact
lattice_scores = st.lists(
    st.integers(-8000, 8000).map(lambda k: k / 1000.0), min_size=2, max_size=50)


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert auroc([0.4, 0.4, 0.4, 0.4], [1, 0, 1, 0]) == 0.5

    def test_worked_example(self):
        # pairs: (0.35>0.1)+(0.35>0.4)+(0.8>0.1)+(0.8>0.4) = 3 of 4
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_undefined_single_class(self):
        assert auroc([0.1, 0.2], [1, 1]) is None
        assert auroc([0.1, 0.2], [0, 0]) is None

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            auroc([0.1, 0.2], [1])

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            auroc([0.1, float("nan")], [1, 0])

    def test_bad_labels_rejected(self):
        with pytest.raises(NumericError):
            auroc([0.1, 0.2], [1, 2])

    def test_matches_brute_force_with_ties(self):
        g = np.random.default_rng(0)
        for _ in range(300):
            n = int(g.integers(2, 51))
            scores = g.integers(0, 10, n) / 4.0
            labels = g.integers(0, 2, n)
            expected = auroc_brute(scores.tolist(), labels.tolist())
            got = auroc(scores, labels)
            assert got == expected  # exact, including None

    @settings(max_examples=200)
    @given(lattice_scores, st.data())
    def test_monotone_transform_invariance(self, scores, data):
        labels = data.draw(st.lists(st.sampled_from([0, 1]),
                                    min_size=len(scores), max_size=len(scores)))
        base = auroc(scores, labels)
        affine = auroc([2.0 * s + 3.0 for s in scores], labels)
        exped = auroc(np.exp(scores), labels)
        assert affine == base
        assert exped == base

    @settings(max_examples=200)
    @given(lattice_scores, st.data())
    def test_complement_sums_to_one(self, scores, data):
        labels = data.draw(st.lists(st.sampled_from([0, 1]),
                                    min_size=len(scores), max_size=len(scores)))
        a = auroc(scores, labels)
        if a is None:
            return
        b = auroc([-s for s in scores], labels)
        assert a + b == 1.0


def _report_inputs(seed=0, n=40):
    g = np.random.default_rng(seed)
    scores = g.random((n, 14))
    targets = g.integers(0, 2, (n, 14)).astype(float)
    masks = g.integers(0, 2, (n, 14)).astype(float)
    return scores, targets, masks


class TestReportFromScores:
    def test_macro_is_mean_of_defined(self):
        scores, targets, masks = _report_inputs()
        rep = report_from_scores(scores, targets, masks)
        defined = [v for v in rep.per_pathology.values() if v is not None]
        assert rep.macro_auroc == pytest.approx(np.mean(defined), abs=1e-15)

    def test_matches_brute_force_per_pathology(self):
        scores, targets, masks = _report_inputs(3)
        rep = report_from_scores(scores, targets, masks)
        for k, name in enumerate(PATHOLOGIES):
            keep = masks[:, k] == 1
            expected = auroc_brute(scores[keep, k].tolist(),
                                   targets[keep, k].tolist())
            assert rep.per_pathology[name] == expected

    def test_fully_masked_pathology_undefined_and_excluded(self):
        scores, targets, masks = _report_inputs(4)
        masks[:, 2] = 0.0
        rep = report_from_scores(scores, targets, masks)
        name = PATHOLOGIES[2]
        assert rep.per_pathology[name] is None
        defined = [v for p, v in rep.per_pathology.items()
                   if v is not None]
        assert rep.macro_auroc == pytest.approx(np.mean(defined), abs=1e-15)
        assert rep.n_pos[name] == 0 and rep.n_neg[name] == 0

    def test_masked_scores_do_not_affect_report(self):
        scores, targets, masks = _report_inputs(5)
        rep1 = report_from_scores(scores, targets, masks)
        perturbed = scores.copy()
        perturbed[masks == 0] = np.random.default_rng(6).random((masks == 0).sum())
        rep2 = report_from_scores(perturbed, targets, masks)
        assert rep1.per_pathology == rep2.per_pathology

    def test_zero_samples_rejected(self):
        with pytest.raises(ConfigError):
            report_from_scores(np.zeros((0, 14)), np.zeros((0, 14)),
                               np.zeros((0, 14)))

    def test_json_round_trip(self):
        scores, targets, masks = _report_inputs(7)
        rep = report_from_scores(scores, targets, masks)
        again = EvalReport.from_json(rep.to_json())
        assert again.per_pathology == rep.per_pathology
        assert again.macro_auroc == rep.macro_auroc
        assert again.n_pos == rep.n_pos


def _samples_with_states(n, seed=0, sexes=None):
    g = np.random.default_rng(seed)
    out = []
    for i in range(n):
        states = [LabelState.POSITIVE if g.random() < 0.4 else LabelState.NEGATIVE
                  for _ in range(14)]
        sex = sexes[i] if sexes else ("male" if g.random() < 0.5 else "female")
        out.append(Sample(
            sample_id=f"s{i}", patient_id=f"p{i}",
            image=g.random((1, 8, 8)),
            metadata=MetadataRecord(age=float(g.uniform(20, 90)), sex=sex,
                                    bmi=float(g.uniform(18, 40))),
            states=states))
    return out


@pytest.fixture(scope="module")
def tiny_model():
    from cxrfusion.model import BackbonePreset, ConvStage
    preset = BackbonePreset("tiny", (ConvStage(4, 3, 2, 1),), input_size=8)
    return build_model(preset, MetaBranchConfig(input_dim=3, hidden_dim=4,
                                                output_dim=2), seed=0)


class TestEvaluate:
    def test_constant_logits_give_half(self, tiny_model):
        model = tiny_model.copy()
        model.params["head.w"].data[:] = 0.0
        model.params["head.b"].data[:] = 0.3
        rep = evaluate(model, _samples_with_states(30, seed=1))
        for v in rep.per_pathology.values():
            assert v is None or v == 0.5

    def test_zero_samples_rejected(self, tiny_model):
        with pytest.raises(ConfigError):
            evaluate(tiny_model, [])

    def test_mask_aware_ignores_not_mentioned(self, tiny_model):
        samples = _samples_with_states(25, seed=2)
        for s in samples[:10]:
            s.states[3] = LabelState.NOT_MENTIONED
        rep = evaluate(tiny_model, samples)
        kept = [s for s in samples[10:]]
        from cxrfusion.model import predict_scores
        scores = predict_scores(tiny_model, kept)
        labels = [1 if s.states[3] is LabelState.POSITIVE else 0 for s in kept]
        assert rep.per_pathology[PATHOLOGIES[3]] == auroc_brute(
            scores[:, 3].tolist(), labels)


class TestSubgroupReport:
    def test_single_group_equals_overall_gap_zero(self, tiny_model):
        samples = _samples_with_states(40, seed=3, sexes=["male"] * 40)
        sec = subgroup_report(tiny_model, samples, "sex")
        overall = evaluate(tiny_model, samples)
        assert len(sec.groups) == 1
        assert sec.groups[0].per_pathology == overall.per_pathology
        assert sec.max_gap == 0.0

    def test_identical_groups_gap_zero(self):
        # image-only model: scores ignore sex, so mirrored groups tie exactly
        from cxrfusion.model import BackbonePreset, ConvStage
        preset = BackbonePreset("tiny", (ConvStage(4, 3, 2, 1),), input_size=8)
        model = build_model(preset, None, seed=1)
        base = _samples_with_states(30, seed=4, sexes=["male"] * 30)
        mirrored = []
        for i, s in enumerate(base):
            mirrored.append(Sample(
                sample_id=f"f{i}", patient_id=f"fp{i}", image=s.image.copy(),
                metadata=MetadataRecord(age=s.metadata.age, sex="female",
                                        bmi=s.metadata.bmi),
                states=list(s.states)))
        sec = subgroup_report(model, base + mirrored, "sex")
        assert sec.max_gap == 0.0

    def test_small_groups_marked_insufficient(self, tiny_model):
        samples = _samples_with_states(30, seed=5,
                                       sexes=["male"] * 25 + ["female"] * 5)
        sec = subgroup_report(tiny_model, samples, "sex")
        by_name = {g.group: g for g in sec.groups}
        assert by_name["female"].insufficient
        assert not by_name["male"].insufficient
        assert sec.max_gap == 0.0  # only one sufficient group

    def test_age_binning(self, tiny_model):
        samples = _samples_with_states(90, seed=6)
        sec = subgroup_report(tiny_model, samples, "age", min_group_size=5)
        names = {g.group for g in sec.groups}
        assert names <= {"[0,40)", "[40,65)", "[65,inf)"}

    def test_unknown_key_rejected(self, tiny_model):
        with pytest.raises(ConfigError):
            subgroup_report(tiny_model, _samples_with_states(25), "zodiac")


class TestRendering:
    def test_table_layout(self):
        scores, targets, masks = _report_inputs(8)
        rep = report_from_scores(scores, targets, masks)
        text = render_table({"baseline": rep, "fusion": rep})
        header = text.splitlines()[0]
        assert header.split()[:4] == ["model", "avg_auroc_14", "avg_auroc_5",
                                      "atelectasis"]
        assert "pleural_effusion" in header
        assert "baseline" in text and "fusion" in text

    def test_comparison_delta(self):
        scores, targets, masks = _report_inputs(9)
        base = report_from_scores(scores, targets, masks)
        fused = report_from_scores(np.clip(scores + 0.01, 0, 1), targets, masks)
        cmp = compare_reports(base, fused)
        assert cmp["macro_delta"] == pytest.approx(
            fused.macro_auroc - base.macro_auroc, abs=1e-15)
        text = render_comparison(base, fused)
        assert "delta (fusion - baseline):" in text
        assert "macro:" in text
