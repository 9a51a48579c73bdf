import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cxrfusion.errors import ConfigError, EncodingError, ShapeError
from cxrfusion.labels import (ALL_META_FEATURES, N_PATHOLOGIES, PATHOLOGIES,
                              LabelState, MetadataRecord, MetaFeatureConfig,
                              UncertainPolicy, apply_policy, build_targets,
                              encode_metadata, fit_imputation)

S = LabelState
P = UncertainPolicy


class TestPathologies:
    def test_canonical_order(self):
        assert len(PATHOLOGIES) == 14
        assert PATHOLOGIES[0] == "atelectasis"
        assert PATHOLOGIES[3] == "edema"
        assert PATHOLOGIES[8] == "pleural_effusion"
        assert PATHOLOGIES[-1] == "no_finding"


class TestApplyPolicy:
    def test_default_policy_table(self):
        assert apply_policy(S.POSITIVE) == (1, 1)
        assert apply_policy(S.UNCERTAIN) == (0, 1)
        assert apply_policy(S.NEGATIVE) == (0, 1)
        assert apply_policy(S.NOT_MENTIONED) == (0, 0)

    def test_uncertain_as_positive(self):
        assert apply_policy(S.UNCERTAIN, P.AS_POSITIVE) == (1, 1)

    def test_uncertain_masked(self):
        assert apply_policy(S.UNCERTAIN, P.MASKED) == (0, 0)

    @given(st.sampled_from(list(S)), st.sampled_from(list(P)))
    def test_total_and_not_mentioned_always_masked(self, state, policy):
        target, mask = apply_policy(state, policy)
        assert target in (0, 1) and mask in (0, 1)
        assert (mask == 0) == (state is S.NOT_MENTIONED
                               or (state is S.UNCERTAIN and policy is P.MASKED))


class TestBuildTargets:
    def test_all_not_mentioned(self):
        target, mask = build_targets([S.NOT_MENTIONED] * 14)
        assert not target.any() and not mask.any()

    def test_two_positives(self):
        states = [S.NEGATIVE] * 14
        states[PATHOLOGIES.index("edema")] = S.POSITIVE
        states[PATHOLOGIES.index("pleural_effusion")] = S.POSITIVE
        target, mask = build_targets(states)
        assert target.sum() == 2
        assert mask.all()
        assert target[PATHOLOGIES.index("edema")] == 1

    def test_wrong_length(self):
        with pytest.raises(ShapeError):
            build_targets([S.POSITIVE] * 13)

    @given(st.lists(st.sampled_from(list(S)), min_size=14, max_size=14),
           st.sampled_from(list(P)))
    def test_pointwise_matches_apply_policy(self, states, policy):
        target, mask = build_targets(states, policy)
        for i, s in enumerate(states):
            assert (target[i], mask[i]) == apply_policy(s, policy)


class TestEncodeMetadata:
    def test_default_three_features(self):
        vec = encode_metadata(MetadataRecord(age=60, sex="male", bmi=25),
                              MetaFeatureConfig())
        assert np.array_equal(vec, [0.60, 1.0, 0.50])

    def test_sex_only_female(self):
        cfg = MetaFeatureConfig(features=("sex",))
        assert np.array_equal(
            encode_metadata(MetadataRecord(sex="female"), cfg), [0.0])

    def test_default_width_matches_mlp_input(self):
        assert MetaFeatureConfig().width() == 3

    def test_scaled_range(self):
        cfg = MetaFeatureConfig()
        for age, bmi in ((0, 10), (120, 60), (45, 33)):
            vec = encode_metadata(MetadataRecord(age=age, sex="male", bmi=bmi), cfg)
            assert (0 <= vec).all() and (vec <= 1.2).all()

    def test_race_one_hot_with_other_slot(self):
        cfg = MetaFeatureConfig(features=("sex", "race"),
                                categories={"race": ("asian", "black", "white")})
        assert cfg.width() == 1 + 4
        vec = encode_metadata(MetadataRecord(sex="male", race="black"), cfg)
        assert np.array_equal(vec, [1.0, 0.0, 1.0, 0.0, 0.0])
        vec = encode_metadata(MetadataRecord(sex="male", race="martian"), cfg)
        assert np.array_equal(vec, [1.0, 0.0, 0.0, 0.0, 1.0])

    def test_unknown_sex_value_rejected(self):
        with pytest.raises(EncodingError):
            encode_metadata(MetadataRecord(age=50, sex="unknown", bmi=25),
                            MetaFeatureConfig())

    def test_out_of_range_rejected(self):
        with pytest.raises(EncodingError):
            encode_metadata(MetadataRecord(age=150, sex="male", bmi=25),
                            MetaFeatureConfig())

    def test_missing_numeric_uses_impute(self):
        cfg = MetaFeatureConfig(impute={"bmi": 28.0})
        vec = encode_metadata(MetadataRecord(age=50, sex="female", bmi=None), cfg)
        assert np.array_equal(vec, [0.50, 0.0, 0.56])

    def test_missing_indicator_slots(self):
        cfg = MetaFeatureConfig(missing_indicator=True)
        assert cfg.width() == 5
        vec = encode_metadata(MetadataRecord(age=None, sex="female", bmi=20), cfg)
        assert np.array_equal(vec, [0.0, 1.0, 0.0, 0.40, 0.0])

    def test_missing_without_impute_or_indicator_rejected(self):
        with pytest.raises(EncodingError):
            encode_metadata(MetadataRecord(age=None, sex="male", bmi=25),
                            MetaFeatureConfig())

    def test_unknown_feature_rejected(self):
        with pytest.raises(ConfigError):
            MetaFeatureConfig(features=("age", "height"))

    def test_categorical_requires_category_list(self):
        with pytest.raises(ConfigError):
            MetaFeatureConfig(features=("race",))

    @given(st.floats(0, 120), st.sampled_from(["female", "male"]),
           st.floats(5.1, 99.9))
    def test_deterministic_and_width_stable(self, age, sex, bmi):
        cfg = MetaFeatureConfig()
        r = MetadataRecord(age=age, sex=sex, bmi=bmi)
        v1 = encode_metadata(r, cfg)
        v2 = encode_metadata(r, cfg)
        assert np.array_equal(v1, v2)
        assert v1.shape == (cfg.width(),)


class TestFitImputation:
    def test_medians(self):
        records = [MetadataRecord(age=a, sex="male", bmi=b)
                   for a, b in ((20, 22), (40, 26), (60, None))]
        imp = fit_imputation(records)
        assert imp["age"] == 40
        assert imp["bmi"] == 24

    def test_round_trip_config(self):
        cfg = MetaFeatureConfig(features=("age", "sex", "bmi", "race"),
                                categories={"race": ("a", "b")},
                                impute={"age": 55.0}, missing_indicator=True)
        again = MetaFeatureConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_all_features_known(self):
        assert set(ALL_META_FEATURES) == {"age", "sex", "bmi", "race", "insurance"}
        assert N_PATHOLOGIES == 14
