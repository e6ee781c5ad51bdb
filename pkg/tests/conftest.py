import numpy as np
import pytest

from splat4d import scene_io as sio
from splat4d import trainer as tr


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    rows = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if getattr(rep, "when", "call") != "call":
                continue
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance" in nodeid and "test_criterion_" in nodeid:
                name = nodeid.split("::")[-1].replace("test_criterion_", "")
                rows.append((name, "PASS" if status == "passed" else "FAIL"))
    if rows:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name, status in rows:
            terminalreporter.write_line(f"{status}  {name}")


def make_tiny_spec():
    """A 2-camera, 24x24, 3-timestep scene with small blob clusters."""
    spec = sio.default_synth_spec()
    spec.num_cameras = 2
    spec.image_size = 24
    spec.num_timesteps = 3
    for blob in spec.blobs:
        blob.count = 2
    return spec


@pytest.fixture(scope="session")
def tiny_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_scene") / "scene"
    return sio.synth_generate(make_tiny_spec(), root)


def make_tiny_model(dataset, seed=0, num_points=24):
    return tr.init_model(
        dataset,
        num_points=num_points,
        init_jitter=0.03,
        field_channels=4,
        field_base_res=8,
        field_time_res=4,
        field_hidden=16,
        seed=seed,
    )


@pytest.fixture(scope="session")
def tiny_trained(tiny_scene):
    """A briefly trained model on the tiny scene, shared across tests."""
    model = make_tiny_model(tiny_scene, seed=0)
    cfg = tr.TrainConfig(iterations=120, coarse_iterations=30, batch=2,
                         lambda_tv=1e-4, seed=0, eval_interval=0)
    tr.train(tiny_scene, cfg, model)
    return model


def model_state_bytes(model):
    return b"".join(
        np.ascontiguousarray(t.data).tobytes() for t in model.parameters().values()
    )
