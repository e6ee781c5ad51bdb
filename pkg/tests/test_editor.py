import copy

import numpy as np
import pytest

from conftest import make_tiny_model
from splat4d import editor as ed
from splat4d import trainer as tr
from splat4d.errors import ValidationError


def clone_model(model):
    return tr.SceneModel(
        cloud=model.cloud.clone(),
        field=copy.deepcopy(model.field),
        bounds=model.bounds,
    )


class TestBuiltinOperators:
    def test_grayscale_pure_red(self):
        op = ed.EditOperator("grayscale")
        img = np.zeros((2, 2, 3))
        img[..., 0] = 1.0
        out = ed.apply_image(op, img)
        np.testing.assert_allclose(out, 0.2126)

    def test_grayscale_weights(self):
        op = ed.EditOperator("grayscale")
        img = np.zeros((1, 1, 3))
        img[0, 0] = [0.0, 1.0, 0.0]
        assert ed.apply_image(op, img)[0, 0, 0] == pytest.approx(0.7152)

    def test_posterize_two_levels(self):
        op = ed.EditOperator("posterize", params={"levels": 2})
        img = np.array([[[0.4, 0.6, 0.5]]])
        out = ed.apply_image(op, img)
        np.testing.assert_allclose(out[0, 0], [0.0, 1.0, 1.0])

    def test_posterize_rejects_single_level(self):
        with pytest.raises(ValidationError, match="levels"):
            ed.apply_image(ed.EditOperator("posterize", params={"levels": 1}), np.zeros((1, 1, 3)))

    def test_hue_rotate_zero_is_identity(self):
        op = ed.EditOperator("hue_rotate", params={"degrees": 0.0})
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (4, 4, 3))
        np.testing.assert_allclose(ed.apply_image(op, img), img, atol=1e-12)

    def test_hue_rotate_changes_colors(self):
        op = ed.EditOperator("hue_rotate", params={"degrees": 120.0})
        img = np.zeros((1, 1, 3))
        img[0, 0] = [1.0, 0.0, 0.0]
        out = ed.apply_image(op, img)
        assert not np.allclose(out[0, 0], [1.0, 0.0, 0.0])

    def test_sepia_known_value_and_clamp(self):
        op = ed.EditOperator("sepia")
        img = np.ones((1, 1, 3))
        out = ed.apply_image(op, img)
        # White maps through the sepia matrix; red/green rows sum above 1 -> clamped.
        np.testing.assert_allclose(out[0, 0], [1.0, 1.0, 0.272 + 0.534 + 0.131])

    def test_vignette_darker_at_corners(self):
        op = ed.EditOperator("vignette", params={"strength": 0.8})
        img = np.full((9, 9, 3), 0.8)
        out = ed.apply_image(op, img)
        assert out[4, 4, 0] == pytest.approx(0.8)
        assert out[0, 0, 0] < 0.8 * 0.3

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValidationError, match="unknown kind"):
            ed.EditOperator("solarize")

    def test_external_requires_url(self):
        with pytest.raises(ValidationError, match="url"):
            ed.EditOperator("external")


class TestCollectFirstTimestep:
    def test_all_cameras(self, tiny_scene):
        views = ed.collect_first_timestep(tiny_scene)
        assert len(views) == len(tiny_scene.cameras)
        assert [c.cam_id for c, _ in views] == sorted(tiny_scene.camera_ids)

    def test_subset(self, tiny_scene):
        views = ed.collect_first_timestep(tiny_scene, subset=[1])
        assert len(views) == 1 and views[0][0].cam_id == 1

    def test_unknown_id_named(self, tiny_scene):
        with pytest.raises(ValidationError, match="99"):
            ed.collect_first_timestep(tiny_scene, subset=[0, 99])


class TestApplyOperator:
    def test_deterministic(self, tiny_scene):
        views = ed.collect_first_timestep(tiny_scene)
        op = ed.EditOperator("grayscale", seed=7)
        a = ed.apply_operator(op, views, "make it grayscale")
        b = ed.apply_operator(op, views, "make it grayscale")
        for (_, va), (_, vb) in zip(a.views, b.views):
            assert va.tobytes() == vb.tobytes()

    def test_empty_views_rejected(self):
        with pytest.raises(ValidationError, match="non-empty"):
            ed.apply_operator(ed.EditOperator("grayscale"), [], "x")

    def test_duplicate_cameras_rejected(self, tiny_scene):
        views = ed.collect_first_timestep(tiny_scene, subset=[0])
        with pytest.raises(ValidationError, match="distinct"):
            ed.EditedViewSet(views=views + views, instruction="x")


class TestFitCanonical:
    def test_negative_iters_rejected(self, tiny_trained, tiny_scene):
        edited = ed.apply_operator(
            ed.EditOperator("grayscale"), ed.collect_first_timestep(tiny_scene), "gray"
        )
        with pytest.raises(ValidationError, match="iters"):
            ed.fit_canonical(clone_model(tiny_trained), edited, iters=-1)

    def test_zero_iters_unchanged(self, tiny_trained, tiny_scene):
        model = clone_model(tiny_trained)
        edited = ed.apply_operator(
            ed.EditOperator("grayscale"), ed.collect_first_timestep(tiny_scene), "gray"
        )
        before = model.field.state_bytes() + model.cloud.positions.data.tobytes()
        ed.fit_canonical(model, edited, iters=0)
        assert model.field.state_bytes() + model.cloud.positions.data.tobytes() == before

    def test_field_frozen_and_loss_drops(self, tiny_trained, tiny_scene):
        model = clone_model(tiny_trained)
        edited = ed.apply_operator(
            ed.EditOperator("grayscale"), ed.collect_first_timestep(tiny_scene), "gray"
        )
        field_before = model.field.state_bytes()
        start = ed.stage1_l1(model, edited)
        _m, rows = ed.fit_canonical(model, edited, iters=120, seed=0)
        assert model.field.state_bytes() == field_before
        end = ed.stage1_l1(model, edited)
        assert end < start
        assert rows[-1]["l1"] <= rows[0]["l1"]
