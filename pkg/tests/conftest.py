import dataclasses

import numpy as np
import pytest
import torch

from egorig import deform
from egorig.camera import FisheyeCamera, RigidTransform
from egorig.harness import SceneSpec, generate_scene, make_chain_skeleton, make_quad_character, make_tube_character

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def chain_skeleton():
    return make_chain_skeleton()


@pytest.fixture(scope="session")
def tube_character(chain_skeleton):
    tpl, _ = make_tube_character(chain_skeleton)
    return tpl


@pytest.fixture(scope="session")
def quad_character():
    return make_quad_character(0.8)


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(SceneSpec(n_frames=4, image_size=(48, 48), focal=22.0, camera_distance=0.9), seed=7)


@pytest.fixture(scope="session")
def wide_camera():
    # egocentric-style wide fisheye, object fills the frame
    return FisheyeCamera(focal=14.0, cx=23.5, cy=23.5, width=48, height=48, dist=(0.01, 0, 0, 0), fov_limit=2.0)


@pytest.fixture(scope="session")
def rigid_tube_character(chain_skeleton):
    """Tube whose single exposed part covers the whole mesh."""
    tpl, _ = make_tube_character(chain_skeleton)
    return dataclasses.replace(
        tpl, part_labels=np.ones(tpl.n_vertices, dtype=int), part_names=("body", "all")
    )


def rand_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    from egorig.rotations import quat_to_matrix

    return quat_to_matrix(q)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
