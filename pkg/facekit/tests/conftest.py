import os
import sys

import numpy as np
import pytest

# Add the facekit directory to the Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from config import RunConfig
from mesh_core import Mesh, icosphere
from morphable_model import CameraPose, ShapeParams, evaluate_shape, synthesize_model, view_rotation
from registration import RGBDFrame

from tests.test_data.meshes import render_face_frame, unit_triangle


@pytest.fixture
def rng():
    """Seeded generator so every test is reproducible"""
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_model():
    """Full-size synthetic morphable model (37 x 45 template grid)"""
    return synthesize_model(0)


@pytest.fixture(scope="session")
def small_model():
    """Coarse synthetic model for tests that solve per-vertex systems"""
    return synthesize_model(0, rows=15, cols=19)


@pytest.fixture(scope="session")
def template_mesh(synthetic_model):
    return synthetic_model.template()


@pytest.fixture(scope="session")
def sphere():
    """Unit icosphere, subdivision 2"""
    return icosphere(2)


@pytest.fixture
def triangle() -> Mesh:
    return unit_triangle()


@pytest.fixture
def tmp_output_dir(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    return out


@pytest.fixture
def run_config(tmp_output_dir):
    """Defaults with outputs redirected to a temporary directory"""
    run_config = RunConfig()
    run_config.paths.OUTPUT_DIR = str(tmp_output_dir)
    run_config.WORKERS = 1
    return run_config


@pytest.fixture(scope="session")
def posed_face(small_model):
    """A model shape placed frontally in a 128 x 128 image, with its pose"""
    rng = np.random.default_rng(7)
    params = ShapeParams(rng.normal(size=small_model.id_dims), np.zeros(small_model.exp_dims))
    shape = evaluate_shape(small_model, params)
    pose = CameraPose(0.5, view_rotation(0.0, 0.0), [63.5, 63.5, 100.0])
    return shape, pose


@pytest.fixture(scope="session")
def face_frame(small_model, posed_face) -> RGBDFrame:
    """Orthographic RGB-D frame of posed_face under frontal light"""
    shape, pose = posed_face
    return render_face_frame(small_model, shape, pose, 128, 128)
