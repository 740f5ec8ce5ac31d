import math

import numpy as np
import pytest

from bevcollab import scene as sim
from bevcollab.errors import ParameterError, UnknownAgentError
from bevcollab.geometry import GridSpec, OrientedBox, Pose2D, oriented_iou

GRID = GridSpec(64, 64, 32.0, 32.0)


class TestGenerateScene:
    def test_zero_boxes(self):
        cfg = sim.SceneConfig(box_count=(0, 0))
        scn = sim.generate_scene(cfg, seed=1)
        assert scn.boxes == []
        assert len(scn.agents) >= 2

    def test_same_seed_identical(self):
        cfg = sim.SceneConfig()
        a = sim.generate_scene(cfg, seed=42)
        b = sim.generate_scene(cfg, seed=42)
        assert sim.scene_to_dict(a) == sim.scene_to_dict(b)

    def test_different_seeds_differ(self):
        cfg = sim.SceneConfig()
        a = sim.generate_scene(cfg, seed=1)
        b = sim.generate_scene(cfg, seed=2)
        assert sim.scene_to_dict(a) != sim.scene_to_dict(b)

    @pytest.mark.parametrize("chunk", range(5))
    def test_boxes_pairwise_disjoint_many_seeds(self, chunk):
        cfg = sim.SceneConfig(box_count=(10, 10))
        for seed in range(chunk * 100, chunk * 100 + 100):
            scn = sim.generate_scene(cfg, seed)
            for i, a in enumerate(scn.boxes):
                for b in scn.boxes[i + 1:]:
                    assert oriented_iou(a, b) == 0.0

    def test_agents_within_bounds(self):
        cfg = sim.SceneConfig()
        for seed in range(20):
            scn = sim.generate_scene(cfg, seed)
            for a in scn.agents:
                assert abs(a.pose.x) <= cfg.world_size / 2
                assert abs(a.pose.y) <= cfg.world_size / 2

    def test_unknown_agent_lookup(self):
        scn = sim.generate_scene(sim.SceneConfig(), seed=0)
        with pytest.raises(UnknownAgentError):
            scn.agent(999)


class TestRenderObservation:
    def test_zero_boxes_noise_floor_only(self):
        cfg = sim.SceneConfig(box_count=(0, 0))
        scn = sim.generate_scene(cfg, seed=3)
        obs = sim.render_observation(scn, 0, sim.MODALITY_DENSE_SCAN, GRID)
        assert obs.data.shape == (sim.OBS_CHANNELS, 64, 64)
        assert np.abs(obs.data).max() < 0.12  # a few sigma of the noise floor

    def test_centered_box_lights_up_center(self):
        agent = sim.AgentState(0, Pose2D(0, 0, 0), "scan-deep", 25.0)
        scn = sim.Scene(boxes=[OrientedBox(0, 0, 4.5, 2.0, 0.0)], agents=[agent], seed=5)
        obs = sim.render_observation(scn, 0, sim.MODALITY_DENSE_SCAN, GRID)
        center = obs.data[0, 28:36, 28:36]
        assert center.max() > 0.3  # far above the noise floor

    def test_deterministic(self):
        scn = sim.generate_scene(sim.SceneConfig(), seed=8)
        a = sim.render_observation(scn, 0, sim.MODALITY_BLUR_CAM, GRID)
        b = sim.render_observation(scn, 0, sim.MODALITY_BLUR_CAM, GRID)
        assert np.array_equal(a.data, b.data)

    def test_unknown_modality(self):
        scn = sim.generate_scene(sim.SceneConfig(), seed=0)
        with pytest.raises(ParameterError):
            sim.render_observation(scn, 0, "sonar", GRID)

    def test_out_of_radius_box_contributes_nothing(self):
        agent = sim.AgentState(0, Pose2D(0, 0, 0), "scan-deep", sensing_radius=10.0)
        near = OrientedBox(3.0, 1.0, 4.0, 2.0, 0.3)
        far = OrientedBox(14.0, 0.0, 4.0, 2.0, 0.0)  # outside radius, inside raster
        with_far = sim.Scene(boxes=[near, far], agents=[agent], seed=9)
        without = sim.Scene(boxes=[near], agents=[agent], seed=9)
        for modality in (sim.MODALITY_DENSE_SCAN, sim.MODALITY_BLUR_CAM):
            a = sim.render_observation(with_far, 0, modality, GRID)
            b = sim.render_observation(without, 0, modality, GRID)
            assert np.array_equal(a.data, b.data)

    def test_modalities_differ(self):
        scn = sim.generate_scene(sim.SceneConfig(box_count=(8, 8)), seed=11)
        dense = sim.render_observation(scn, 0, sim.MODALITY_DENSE_SCAN, GRID)
        cam = sim.render_observation(scn, 0, sim.MODALITY_BLUR_CAM, GRID)
        sparse = sim.render_observation(scn, 0, sim.MODALITY_SPARSE_SCAN, GRID)
        assert np.linalg.norm(dense.data - cam.data) > 1.0
        assert np.linalg.norm(dense.data - sparse.data) > 1.0

    def test_lowres_modality_shape(self):
        scn = sim.generate_scene(sim.SceneConfig(), seed=12)
        obs = sim.render_observation(scn, 0, sim.MODALITY_BLUR_CAM_LOWRES, GRID)
        assert obs.data.shape == (sim.OBS_CHANNELS, 64, 64)
        # upsampled from half resolution: 2x2 blocks are constant
        blocks = obs.data.reshape(sim.OBS_CHANNELS, 32, 2, 32, 2)
        assert np.array_equal(blocks[..., 0, :, 0], blocks[..., 1, :, 1])


class TestPerturbPose:
    def test_zero_sigma_unchanged(self):
        p = Pose2D(1.0, 2.0, 0.5)
        out = sim.perturb_pose(p, sim.NoiseConfig(0.0, 0.0, seed=1), draw_seed=3)
        assert (out.x, out.y, out.yaw) == (1.0, 2.0, 0.5)

    def test_sample_std_matches_sigma(self):
        noise = sim.NoiseConfig(sigma_p=0.2, sigma_r=0.05, seed=7)
        xs = np.array([sim.perturb_pose(Pose2D(0, 0, 0), noise, i).x for i in range(100_000)])
        assert abs(xs.std() - 0.2) / 0.2 < 0.02
        assert abs(xs.mean()) < 0.005

    def test_yaw_wraps_into_range(self):
        noise = sim.NoiseConfig(sigma_p=0.0, sigma_r=1.0, seed=2)
        for i in range(200):
            out = sim.perturb_pose(Pose2D(0, 0, math.pi - 1e-3), noise, i)
            assert -math.pi < out.yaw <= math.pi

    def test_negative_sigma_rejected(self):
        with pytest.raises(ParameterError):
            sim.NoiseConfig(sigma_p=-0.1)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        cfg = sim.SceneConfig()
        scenes = [sim.generate_scene(cfg, s) for s in range(5)]
        path = tmp_path / "scenes.json"
        sim.save_scenes(path, scenes, metadata={"split": "test"})
        loaded = sim.load_scenes(path)
        assert [sim.scene_to_dict(s) for s in loaded] == [sim.scene_to_dict(s) for s in scenes]

    def test_version_check(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"version": 99, "scenes": []}')
        with pytest.raises(ParameterError, match="version"):
            sim.load_scenes(path)

    def test_identical_bytes_for_identical_scenes(self, tmp_path):
        cfg = sim.SceneConfig()
        scenes = [sim.generate_scene(cfg, s) for s in range(3)]
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        sim.save_scenes(p1, scenes, metadata={"split": "x"})
        sim.save_scenes(p2, scenes, metadata={"split": "x"})
        assert p1.read_bytes() == p2.read_bytes()
