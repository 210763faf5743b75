import json

import numpy as np
import pytest
from pydantic import ValidationError
from streetnav.config import PipelineConfig
from streetnav.converters import read_json
from streetnav.exceptions import (
    FileFormatError,
    ManifestValidationError,
    UsageError,
)
from streetnav.pipeline import (
    BatchReport,
    ManifestEntry,
    _in_parallel,
    annotate_entry,
    condition_entry,
    load_episodes,
    load_manifest,
    policy_factory,
    store_episodes,
)
from streetnav.scenes import synthetic_episodes

FILES = {"depth_file": "s/depth.pfm", "camera_file": "s/camera.json"}


def write_manifest(tmp_path, entries):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"entries": entries}))
    return path


def touch_scene(tmp_path):
    (tmp_path / "s").mkdir()
    (tmp_path / "s" / "depth.pfm").write_bytes(b"")
    (tmp_path / "s" / "camera.json").write_text("{}")


class TestManifestEntry:
    def test_needs_a_target(self):
        with pytest.raises(ValidationError):
            ManifestEntry(id="a", **FILES)

    def test_either_target_is_enough(self):
        ManifestEntry(id="a", target_world=(0.0, 1.4, 6.0), **FILES)
        box = {"cx": 0.5, "cy": 0.5, "w": 0.1, "h": 0.1}
        ManifestEntry(id="b", target_bbox=box, **FILES)

    def test_unknown_field(self):
        with pytest.raises(ValidationError):
            ManifestEntry(id="a", target_world=(0, 0, 1), colour="red", **FILES)

    def test_resolved(self, tmp_path):
        entry = ManifestEntry(id="a", target_world=(0, 0, 1), **FILES)
        resolved = entry.resolved(tmp_path)
        assert resolved.depth_file == tmp_path / "s" / "depth.pfm"
        assert resolved.image_file is None
        assert resolved.missing_files() == [
            str(tmp_path / "s" / "depth.pfm"),
            str(tmp_path / "s" / "camera.json"),
        ]


class TestLoadManifest:
    def test_valid_and_invalid_entries(self, tmp_path):
        touch_scene(tmp_path)
        path = write_manifest(
            tmp_path,
            [
                {"id": "good", "target_world": [0, 1, 2], **FILES},
                {"id": "no_target", **FILES},
                {"id": "gone", "target_world": [0, 1, 2], **FILES, "flow_dir": "f"},
                "not an object",
            ],
        )
        manifest = load_manifest(path)
        assert [e.id for e in manifest.entries] == ["good"]
        assert [e["id"] for e in manifest.errors] == ["no_target", "gone", None]
        assert {e["stage"] for e in manifest.errors} == {"manifest"}
        assert manifest.root == tmp_path

    def test_duplicate_ids(self, tmp_path):
        entry = {"id": "twice", "target_world": [0, 1, 2], **FILES}
        path = write_manifest(tmp_path, [entry, entry, {**entry, "id": "once"}])
        with pytest.raises(ManifestValidationError) as exc_info:
            load_manifest(path)
        assert [e["id"] for e in exc_info.value.errors()] == ["twice"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(UsageError):
            load_manifest(tmp_path / "absent.json")

    @pytest.mark.parametrize(
        "content",
        [
            pytest.param("[]", id="list"),
            pytest.param('{"entries": {}}', id="entries not a list"),
            pytest.param("{", id="malformed"),
        ],
    )
    def test_not_a_manifest(self, tmp_path, content):
        path = tmp_path / "manifest.json"
        path.write_text(content)
        with pytest.raises(UsageError):
            load_manifest(path)

    def test_empty(self, tmp_path):
        manifest = load_manifest(write_manifest(tmp_path, []))
        assert manifest.entries == [] and manifest.errors == []


class TestBatchHelpers:
    def test_in_parallel_keeps_the_order(self):
        assert _in_parallel(lambda x: x * x, list(range(10)), jobs=4) == [
            x * x for x in range(10)
        ]

    def test_in_parallel_jobs(self):
        with pytest.raises(UsageError):
            _in_parallel(str, [1], jobs=0)

    def test_failed(self):
        error = {"id": "a", "stage": "load", "reason": "x"}
        assert BatchReport(errors=[error]).failed
        assert not BatchReport(errors=[error], written=["b"]).failed
        assert not BatchReport().failed

    def test_unknown_policy(self):
        with pytest.raises(UsageError):
            policy_factory("clever", 0.0, 0, 5)


class TestStoredEpisodes:
    def test_round_trip(self, tmp_path):
        episodes = synthetic_episodes(3, seed=2)
        index = store_episodes(tmp_path, episodes)
        assert index == tmp_path / "episodes.json"
        loaded = load_episodes(index)
        for ep, back in zip(episodes, loaded):
            assert back.episode_id == ep.episode_id
            assert back.instruction == ep.instruction
            assert np.allclose(back.target_entrance, ep.target_entrance)
            assert np.array_equal(back.grid.cells, ep.grid.cells)
            assert np.allclose(back.gt_trajectory.poses, ep.gt_trajectory.poses)

    def test_missing_grid(self, tmp_path):
        index = store_episodes(tmp_path, synthetic_episodes(1, seed=2))
        (tmp_path / "ep0000" / "grid.pgm").unlink()
        with pytest.raises(FileFormatError):
            load_episodes(index)

    def test_not_an_index(self, tmp_path):
        path = tmp_path / "episodes.json"
        path.write_text('{"entries": []}')
        with pytest.raises(UsageError):
            load_episodes(path)


class TestEntryStages:
    @pytest.fixture(scope="class")
    def annotated(self, bundled_manifest, tmp_path_factory):
        out = tmp_path_factory.mktemp("annotated")
        entries = {e.id: e for e in load_manifest(bundled_manifest).entries}
        config = PipelineConfig()
        records = annotate_entry(entries["entrance"], config, out)
        assert records == [{"status": "written", "id": "entrance"}]
        return entries, out

    def test_blocked_scene_is_skipped(self, annotated, tmp_path):
        entries, _ = annotated
        records = annotate_entry(entries["blocked"], PipelineConfig(), tmp_path)
        assert records == [
            {"status": "skipped", "id": "blocked", "reason": "unreachable"}
        ]
        assert not (tmp_path / "blocked").exists()

    def test_single_pose_track(self, annotated):
        entries, out = annotated
        (out / "entrance" / "trajectory.jsonl").write_text(
            '{"frame": "agent_raw"}\n{"x": 0.0, "y": 0.0, "z": 0.0, "yaw": 0.0}\n'
        )
        records = condition_entry(entries["entrance"], PipelineConfig(), out)
        assert records == [{"status": "written", "id": "entrance"}]
        listing = read_json(out / "entrance" / "condition" / "manifest.json")
        assert [frame["index"] for frame in listing["frames"]] == [0]
        assert listing["frames"][0]["plucker_file"] == "plucker_0000.plk"

    def test_missing_trajectory(self, annotated, tmp_path):
        entries, _ = annotated
        (record,) = condition_entry(entries["entrance"], PipelineConfig(), tmp_path)
        assert record["status"] == "error"
        assert record["stage"] == "load"
