import numpy as np
import pytest

from cxrfusion.errors import ConfigError, ModeError, ShapeError
from cxrfusion.labels import MetaFeatureConfig
from cxrfusion.model import (PRESETS, BackbonePreset, ConvStage, FusionModel,
                             MetaBranchConfig, build_model, checkpoint_dict,
                             forward, forward_image_branch, forward_meta_branch,
                             load_checkpoint, save_checkpoint, sigmoid)
from cxrfusion.tensor import Tape, Tensor, global_avg_pool, masked_bce

from .gradcheck import assert_grad_close
from .oracles import swish_scalar

TINY = BackbonePreset("tiny", (ConvStage(2, 3, 2, 1),), input_size=8)


def zero_backbone(model: FusionModel) -> FusionModel:
    for name, p in model.params.items():
        if name.startswith("backbone."):
            p.data[:] = 0.0
    return model


class TestPresets:
    def test_three_presets_exist(self):
        assert set(PRESETS) == {"plain-scaled", "residual", "plain-deep"}

    def test_feature_dims(self):
        for preset in PRESETS.values():
            preset.validate()
            assert preset.feature_dim == 32

    def test_residual_has_identity_skips(self):
        assert any(s.kind == "res" for s in PRESETS["residual"].stages)

    def test_plain_deep_is_all_3x3(self):
        assert all(s.kernel == 3 for s in PRESETS["plain-deep"].stages)
        assert len(PRESETS["plain-deep"].stages) == 4

    def test_invalid_res_stage_rejected(self):
        bad = BackbonePreset("bad", (ConvStage(4, 3, 2, 1),
                                     ConvStage(8, 3, 1, 1, kind="res")))
        with pytest.raises(ConfigError):
            bad.validate()

    def test_round_trip(self):
        for preset in PRESETS.values():
            assert BackbonePreset.from_dict(preset.to_dict()) == preset


class TestBuildModel:
    def test_deterministic_from_seed(self):
        a = build_model(PRESETS["plain-deep"], MetaBranchConfig(), seed=7)
        b = build_model(PRESETS["plain-deep"], MetaBranchConfig(), seed=7)
        assert all(np.array_equal(a.params[n].data, b.params[n].data)
                   for n in a.params)
        c = build_model(PRESETS["plain-deep"], MetaBranchConfig(), seed=8)
        assert any(not np.array_equal(a.params[n].data, c.params[n].data)
                   for n in a.params)

    def test_meta_branch_parameter_count(self):
        # 12x3 and 8x12 layers with biases: 12*3+12 + 8*12+8
        m = build_model(PRESETS["plain-scaled"], MetaBranchConfig(), seed=0)
        meta = sum(p.size for n, p in m.params.items() if n.startswith("meta."))
        assert meta == 152

    def test_image_only_classifier_count(self):
        m = build_model(PRESETS["plain-scaled"], None, seed=0)
        head = sum(p.size for n, p in m.params.items() if n.startswith("head."))
        assert head == 14 * PRESETS["plain-scaled"].feature_dim + 14
        assert m.mode == "image-only"

    def test_fusion_classifier_count(self):
        m = build_model(PRESETS["plain-scaled"], MetaBranchConfig(), seed=0)
        assert m.params["head.w"].shape == (14, 32 + 8)
        assert m.mode == "fusion"

    def test_meta_width_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            build_model(TINY, MetaBranchConfig(input_dim=5), seed=0,
                        meta_features=MetaFeatureConfig())

    def test_meta_features_without_branch_rejected(self):
        with pytest.raises(ConfigError):
            build_model(TINY, None, seed=0, meta_features=MetaFeatureConfig())


class TestForwardImageBranch:
    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_feature_length_matches_preset(self, name):
        m = build_model(PRESETS[name], None, seed=1)
        img = Tensor(np.random.default_rng(0).random((1, 32, 32)))
        assert forward_image_branch(m, img).shape == (PRESETS[name].feature_dim,)

    @pytest.mark.parametrize("name", ["plain-scaled", "plain-deep"])
    def test_zero_weights_zero_features(self, name):
        m = zero_backbone(build_model(PRESETS[name], None, seed=1))
        img = Tensor(np.random.default_rng(0).random((1, 32, 32)))
        assert np.array_equal(forward_image_branch(m, img).data, np.zeros(32))

    def test_residual_zero_weights_pass_pooled_input_through(self):
        m = zero_backbone(build_model(PRESETS["residual"], None, seed=1))
        img = Tensor(np.random.default_rng(2).random((1, 32, 32)))
        feats = forward_image_branch(m, img)
        pooled = global_avg_pool(img).data[0]
        assert np.allclose(feats.data, pooled, atol=1e-12)

    def test_wrong_image_shape_rejected(self):
        m = build_model(PRESETS["plain-scaled"], None, seed=1)
        with pytest.raises(ShapeError):
            forward_image_branch(m, Tensor(np.zeros((1, 16, 16))))


class TestForwardMetaBranch:
    def test_zero_weights_zero_output(self):
        m = build_model(TINY, MetaBranchConfig(), seed=3)
        for n in ("meta.fc1.w", "meta.fc1.b", "meta.fc2.w", "meta.fc2.b"):
            m.params[n].data[:] = 0.0
        out = forward_meta_branch(m, Tensor([0.3, 0.9, 0.1]))
        assert np.array_equal(out.data, np.zeros(8))

    def test_zero_input_zero_biases(self):
        m = build_model(TINY, MetaBranchConfig(), seed=3)
        out = forward_meta_branch(m, Tensor([0.0, 0.0, 0.0]))
        assert np.array_equal(out.data, np.zeros(8))

    def test_scalar_chain_matches_double_swish(self):
        m = build_model(TINY, MetaBranchConfig(input_dim=1, hidden_dim=1,
                                               output_dim=1), seed=0,
                        meta_features=MetaFeatureConfig(features=("age",)))
        m.params["meta.fc1.w"].data[:] = 1.0
        m.params["meta.fc1.b"].data[:] = 0.0
        m.params["meta.fc2.w"].data[:] = 1.0
        m.params["meta.fc2.b"].data[:] = 0.0
        out = forward_meta_branch(m, Tensor([1.0]))
        # frozen from the scalar oracle: swish(swish(1)) = swish(0.7310585786)
        assert out.data[0] == pytest.approx(0.4934919753, abs=1e-9)
        assert out.data[0] == pytest.approx(swish_scalar(swish_scalar(1.0)),
                                            abs=1e-12)

    def test_image_only_mode_rejected(self):
        m = build_model(TINY, None, seed=3)
        with pytest.raises(ModeError):
            forward_meta_branch(m, Tensor([0.0, 0.0, 0.0]))


class TestForward:
    def test_zero_head_gives_bias(self):
        m = build_model(TINY, MetaBranchConfig(), seed=4)
        m.params["head.w"].data[:] = 0.0
        m.params["head.b"].data[:] = np.arange(14.0)
        img = Tensor(np.random.default_rng(1).random((1, 8, 8)))
        out = forward(m, img, Tensor([0.1, 0.9, 0.4]))
        assert np.array_equal(out.data, np.arange(14.0))

    def test_logits_always_14(self):
        for name in PRESETS:
            m = build_model(PRESETS[name], MetaBranchConfig(), seed=5)
            img = Tensor(np.zeros((1, 32, 32)))
            assert forward(m, img, Tensor([0.0, 0.0, 0.0])).shape == (14,)

    def test_fusion_equals_manual_concat_affine(self):
        from cxrfusion.tensor import affine, concat
        m = build_model(PRESETS["residual"], MetaBranchConfig(), seed=6)
        img = Tensor(np.random.default_rng(3).random((1, 32, 32)))
        v = Tensor([0.5, 1.0, 0.44])
        direct = forward(m, img, v).data
        manual = affine(concat(forward_image_branch(m, img),
                               forward_meta_branch(m, v)),
                        m.params["head.w"], m.params["head.b"]).data
        assert np.array_equal(direct, manual)

    def test_mode_mismatch_rejected(self):
        fusion = build_model(TINY, MetaBranchConfig(), seed=0)
        baseline = build_model(TINY, None, seed=0)
        img = Tensor(np.zeros((1, 8, 8)))
        with pytest.raises(ModeError):
            forward(fusion, img)
        with pytest.raises(ModeError):
            forward(baseline, img, Tensor([0.0, 0.0, 0.0]))

    def test_zeroed_meta_output_weights_ignore_metadata(self):
        m = build_model(TINY, MetaBranchConfig(), seed=7)
        m.params["meta.fc2.w"].data[:] = 0.0
        m.params["meta.fc2.b"].data[:] = 0.0
        img = Tensor(np.random.default_rng(4).random((1, 8, 8)))
        a = forward(m, img, Tensor([0.1, 0.0, 0.9])).data
        b = forward(m, img, Tensor([0.9, 1.0, 0.1])).data
        assert np.array_equal(a, b)

    def test_determinism_same_seed_same_logits(self):
        img_arr = np.random.default_rng(5).random((1, 8, 8))
        v_arr = np.array([0.2, 1.0, 0.6])
        outs = []
        for _ in range(2):
            m = build_model(TINY, MetaBranchConfig(), seed=11)
            outs.append(forward(m, Tensor(img_arr), Tensor(v_arr)).data)
        assert np.array_equal(outs[0], outs[1])


class TestEndToEndGradients:
    def test_every_parameter_matches_finite_differences(self):
        # micro fusion model, well under the 5k-parameter bound
        preset = BackbonePreset("micro", (ConvStage(2, 3, 2, 1),), input_size=6)
        meta = MetaBranchConfig(input_dim=2, hidden_dim=3, output_dim=2)
        feats = MetaFeatureConfig(features=("age", "sex"))
        model = build_model(preset, meta, seed=1, meta_features=feats)
        assert model.param_count() <= 5000

        g = np.random.default_rng(0)
        img = g.random((1, 6, 6))
        v = np.array([0.3, 1.0])
        targets = g.integers(0, 2, 14).astype(float)
        masks = g.integers(0, 2, 14).astype(float)
        masks[0] = 1.0

        tape = Tape()
        loss = masked_bce(forward(model, Tensor(img), Tensor(v), tape=tape),
                          targets, masks, tape=tape)
        tape.backward(loss)

        eps = 1e-5
        for name, p in model.params.items():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            numeric = np.zeros_like(p.data)
            flat = p.data.ravel()
            num_flat = numeric.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = masked_bce(forward(model, Tensor(img), Tensor(v)),
                                targets, masks).item()
                flat[i] = orig - eps
                lo = masked_bce(forward(model, Tensor(img), Tensor(v)),
                                targets, masks).item()
                flat[i] = orig
                num_flat[i] = (hi - lo) / (2 * eps)
            assert_grad_close(analytic, numeric, name)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = build_model(PRESETS["residual"], MetaBranchConfig(), seed=9)
        path = tmp_path / "ck.json"
        save_checkpoint(m, str(path))
        back = load_checkpoint(str(path))
        assert back.preset == m.preset
        assert back.meta_branch == m.meta_branch
        assert back.meta_features == m.meta_features
        for n in m.params:
            assert np.array_equal(back.params[n].data, m.params[n].data)

    def test_save_is_byte_deterministic(self, tmp_path):
        m = build_model(TINY, None, seed=2)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_checkpoint(m, str(p1))
        save_checkpoint(m, str(p2))
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_foreign_json(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text('{"hello": 1}')
        with pytest.raises(ConfigError):
            load_checkpoint(str(path))

    def test_versioned(self, tmp_path):
        d = checkpoint_dict(build_model(TINY, None, seed=2))
        assert d["format"] == "cxrfusion-checkpoint"
        assert d["version"] == 1


def test_sigmoid_matches_scalar():
    xs = np.array([-30.0, -1.0, 0.0, 2.0, 30.0])
    from .oracles import sigmoid_scalar
    expected = np.array([sigmoid_scalar(x) for x in xs])
    assert np.allclose(sigmoid(xs), expected, rtol=1e-15)
