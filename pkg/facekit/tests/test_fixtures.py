import json

import numpy as np
import pytest
from fixtures import DONOR_COUNT, generate_fixtures, load_donors, load_sample, sha256_file
from morphable_model import read_model

SAMPLE_FILES = ("image.png", "depth.png", "depth.json", "fit.json", "landmarks.json", "gt_shape.obj", "truth.json")


@pytest.fixture(scope="module")
def fixture_set(tmp_path_factory):
    return generate_fixtures(0, tmp_path_factory.mktemp("fixtures_seed0"), samples=2)


@pytest.mark.integration
class TestGenerateFixtures:
    """Deterministic synthetic data set"""

    def test_layout(self, fixture_set):
        assert fixture_set.model_path.exists()
        assert fixture_set.template_path.exists()
        assert [p.name for p in fixture_set.samples] == ["sample_000", "sample_001"]
        for sample_dir in fixture_set.samples:
            for name in SAMPLE_FILES:
                assert (sample_dir / name).exists(), name
        assert len(fixture_set.donors) == DONOR_COUNT

    def test_golden_list_hashes_every_file(self, fixture_set):
        golden = json.loads(fixture_set.golden_path.read_text(encoding="utf-8"))
        assert "model.mm3d" in golden
        assert "samples/sample_000/image.png" in golden
        assert "donors/donor_0.obj" in golden
        for rel, digest in golden.items():
            assert sha256_file(fixture_set.root / rel) == digest, rel

    def test_same_seed_is_byte_identical(self, fixture_set, tmp_path):
        again = generate_fixtures(0, tmp_path, samples=2)
        assert again.golden_path.read_bytes() == fixture_set.golden_path.read_bytes()

    def test_seeds_differ(self, fixture_set, tmp_path):
        other = generate_fixtures(1, tmp_path, samples=1)
        ours = json.loads(fixture_set.golden_path.read_text(encoding="utf-8"))
        theirs = json.loads(other.golden_path.read_text(encoding="utf-8"))
        assert ours["samples/sample_000/gt_shape.obj"] != theirs["samples/sample_000/gt_shape.obj"]
        assert ours["model.mm3d"] != theirs["model.mm3d"]


@pytest.mark.integration
class TestLoadSample:
    def test_round_trip(self, fixture_set):
        model = read_model(fixture_set.model_path)
        sample = load_sample(fixture_set.samples[0])
        assert sample.sample_id == "sample_000"
        assert sample.frame.color.shape == (256, 256, 3)
        assert sample.frame.valid.any() and not sample.frame.valid.all()
        assert len(sample.fit.alpha_id) == model.id_dims
        assert sample.gt_shape.vertex_count == model.vertex_count
        assert len(sample.landmarks.edge_vertices) == len(model.annotations.edge_landmark_vertices)
        assert len(sample.landmarks.contour) > 0

    def test_face_is_nearer_than_wall(self, fixture_set):
        frame = load_sample(fixture_set.samples[0]).frame
        center = frame.depth[128, 128]
        assert center > np.max(frame.depth[frame.valid][frame.depth[frame.valid] < 100.0])

    def test_missing_ground_truth_is_optional(self, fixture_set, tmp_path):
        for name in SAMPLE_FILES:
            if name != "gt_shape.obj":
                (tmp_path / name).write_bytes((fixture_set.samples[0] / name).read_bytes())
        assert load_sample(tmp_path).gt_shape is None

    def test_donors(self, fixture_set):
        donors = load_donors(fixture_set.donors)
        assert sorted(donors) == [f"donor_{k}" for k in range(DONOR_COUNT)]
        shapes = [d.vertices for d in donors.values()]
        assert not np.allclose(shapes[0], shapes[1])
