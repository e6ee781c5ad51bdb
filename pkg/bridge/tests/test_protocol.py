import base64

import numpy as np
import pytest
from fastapi.testclient import TestClient

from splatbridge import ops
from splatbridge.codecs import decode_f32, decode_png, encode_f32, encode_png
from splatbridge.service import BridgeConfig, create_app


@pytest.fixture()
def client():
    app = create_app(BridgeConfig(mode="mock", operator="grayscale", max_batch=4))
    return TestClient(app, raise_server_exceptions=False)


def random_image(seed=0, size=12):
    # On the 8-bit grid: dataset frames are PNGs, so protocol clients only
    # ever see quantized originals.
    img = np.random.default_rng(seed).uniform(0, 1, (size, size, 3))
    return np.round(img * 255.0) / 255.0


def edit_payload(images, instruction="gray"):
    return {
        "images": [encode_png(img) for img in images],
        "instruction": instruction,
        "s_I": 1.2,
        "s_T": 8.5,
        "seed": 0,
    }


def guidance_payload(rendered, originals, t=0.5):
    return {
        "rendered": [encode_f32(img) for img in rendered],
        "originals": [encode_png(img) for img in originals],
        "instruction": "gray",
        "s_I": 1.2,
        "s_T": 8.5,
        "t": t,
        "seed": 0,
    }


class TestHealth:
    def test_health_reports_mode(self, client):
        body = client.get("/v1/health").json()
        assert body == {"mode": "mock", "ok": True}


class TestEdit:
    def test_grayscale_edit_round_trip(self, client):
        img = np.zeros((8, 8, 3))
        img[..., 0] = 1.0  # pure red
        resp = client.post("/v1/edit", json=edit_payload([img]))
        assert resp.status_code == 200
        out = decode_png(resp.json()["images"][0], "images[0]")
        # Rec.709 red luma ~0.2126, quantized to 8 bits on the way back.
        np.testing.assert_allclose(out, round(0.2126 * 255) / 255, atol=1e-12)

    def test_order_and_count_preserved(self, client):
        imgs = [random_image(i) for i in range(3)]
        resp = client.post("/v1/edit", json=edit_payload(imgs))
        body = resp.json()
        assert len(body["images"]) == 3
        for i, img in enumerate(imgs):
            want = ops.apply_operator("grayscale", {}, img)
            got = decode_png(body["images"][i], "x")
            assert np.max(np.abs(got - want)) <= 1.0 / 255.0 + 1e-12

    def test_deterministic_responses(self, client):
        payload = edit_payload([random_image(5)])
        a = client.post("/v1/edit", json=payload).json()
        b = client.post("/v1/edit", json=payload).json()
        assert a == b

    def test_empty_batch_rejected(self, client):
        resp = client.post("/v1/edit", json=edit_payload([]))
        assert resp.status_code == 400
        assert "images" in resp.json()["error"]

    def test_oversize_batch_rejected(self, client):
        resp = client.post("/v1/edit", json=edit_payload([random_image(i) for i in range(5)]))
        assert resp.status_code == 400

    def test_bad_base64_names_field(self, client):
        payload = edit_payload([random_image(0)])
        payload["images"][0] = "@@@not-base64@@@"
        resp = client.post("/v1/edit", json=payload)
        assert resp.status_code == 400
        assert "images[0]" in resp.json()["error"]

    def test_missing_field_reports_path(self, client):
        payload = edit_payload([random_image(0)])
        del payload["instruction"]
        resp = client.post("/v1/edit", json=payload)
        assert resp.status_code == 400
        assert "instruction" in resp.json()["error"]


class TestGuidance:
    def test_shape_contract(self, client):
        originals = [random_image(1), random_image(2)]
        rendered = [random_image(3), random_image(4)]
        resp = client.post("/v1/guidance", json=guidance_payload(rendered, originals))
        assert resp.status_code == 200
        grads = resp.json()["grad_images"]
        assert len(grads) == 2
        for g in grads:
            arr = decode_f32(g, (12, 12, 3), "grad_images")
            assert arr.shape == (12, 12, 3)
            assert np.all(np.isfinite(arr))

    def test_zero_residual_when_rendered_equals_target(self, client):
        original = random_image(6)
        target = ops.apply_operator("grayscale", {}, original)
        # Client-side f32 encoding of the exact target must produce zeros.
        resp = client.post("/v1/guidance", json=guidance_payload([target], [original]))
        arr = decode_f32(resp.json()["grad_images"][0], (12, 12, 3), "g")
        np.testing.assert_array_equal(arr, 0.0)

    def test_residual_matches_closed_form(self, client):
        original = random_image(7)
        rendered = random_image(8)
        t = 0.37
        resp = client.post("/v1/guidance", json=guidance_payload([rendered], [original], t=t))
        got = decode_f32(resp.json()["grad_images"][0], (12, 12, 3), "g")
        target = ops.apply_operator("grayscale", {}, original)
        want = ops.oracle_residual(rendered.astype(np.float32).astype(np.float64), target, t)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_count_mismatch_rejected(self, client):
        resp = client.post(
            "/v1/guidance",
            json=guidance_payload([random_image(1)], [random_image(2), random_image(3)]),
        )
        assert resp.status_code == 400
        assert "rendered" in resp.json()["error"]

    def test_wrong_payload_size_names_field(self, client):
        original = random_image(9)
        payload = guidance_payload([random_image(10)], [original])
        payload["rendered"][0] = base64.b64encode(b"\x00" * 12).decode()
        resp = client.post("/v1/guidance", json=payload)
        assert resp.status_code == 400
        assert "rendered[0]" in resp.json()["error"]

    @pytest.mark.parametrize("t", [0.0, 1.0, -0.2, 1.5])
    def test_degenerate_t_rejected(self, client, t):
        resp = client.post(
            "/v1/guidance", json=guidance_payload([random_image(1)], [random_image(1)], t=t)
        )
        assert resp.status_code == 400
        assert "t" in resp.json()["error"]


class TestConfig:
    def test_unknown_operator_rejected(self):
        with pytest.raises(ValueError, match="operator"):
            BridgeConfig(mode="mock", operator="solarize")

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            BridgeConfig(mode="hybrid")

    def test_real_mode_without_deps_is_clean_error(self):
        # The sandbox has torch but no diffusers/weights; either way real mode
        # must fail with the dedicated error type, not an opaque crash.
        from splatbridge.real import RealModeUnavailable

        with pytest.raises(RealModeUnavailable):
            create_app(BridgeConfig(mode="real", model_id="definitely/not-a-model"))
