import numpy as np
import pytest
import torch

from scenemotion.diffusion import DenoiserConfig, build_model, make_schedule, save_checkpoint
from scenemotion.synthetic import make_scene, scene_point_cloud, write_scene_files

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def demo_scene_files(tmp_path_factory):
    """One synthetic scene on disk (PLY cloud + detections JSON)."""
    rng = np.random.default_rng(11)
    scene = make_scene(rng)
    cloud = scene_point_cloud(scene.objects, rng)
    directory = tmp_path_factory.mktemp("scene")
    cloud_path, det_path = write_scene_files(scene, cloud, directory)
    return {"scene": scene, "cloud": cloud, "cloud_path": cloud_path, "det_path": det_path}


@pytest.fixture(scope="session")
def desk_checkpoints(tmp_path_factory):
    """Untrained but seeded desk-scale trajectory/motion checkpoints."""
    directory = tmp_path_factory.mktemp("ckpt")
    schedule = make_schedule(50)
    traj_cfg = DenoiserConfig(mode="trajectory", frame_dim=5, token_dim=32, layers=1,
                              heads=2, ff_dim=64, text_dim=32)
    motion_cfg = DenoiserConfig(mode="motion", frame_dim=6 + 6 * 22, token_dim=32, layers=1,
                                heads=2, ff_dim=64, text_dim=32)
    traj_path = directory / "traj.tsm"
    motion_path = directory / "motion.tsm"
    save_checkpoint(build_model(traj_cfg, schedule, seed=0), traj_path)
    save_checkpoint(build_model(motion_cfg, schedule, seed=1), motion_path)
    return {"traj": traj_path, "motion": motion_path}
