import struct

import numpy as np
from PIL import Image

from guidance_svc.cli import main
from guidance_svc.denoiser import load_state
from guidance_svc.train import _read_frame_ids, _sweep_depth, build_batch
from guidance_svc.denoiser import init_state


def _write_dataset(root, n_frames=3, width=12, height=8):
    (root / "images").mkdir(parents=True)
    (root / "lidar").mkdir()
    rng = np.random.default_rng(0)
    pose_lines = []
    for fid in range(n_frames):
        img = (rng.random((height, width, 3)) * 255).astype(np.uint8)
        Image.fromarray(img).save(root / "images" / f"{fid:06d}.png")
        row = [f"{fid}"] + ["1 0 0 0", "0 1 0 0", "0 0 1 0"]
        pose_lines.append(" ".join(row))
        pts = []
        for _ in range(40):
            z = rng.uniform(2.0, 10.0)
            x = rng.uniform(-0.4, 0.4) * z
            y = rng.uniform(-0.3, 0.3) * z
            pts.append(struct.pack("<ffff", x, y, z, 1.0))
        (root / "lidar" / f"{fid:06d}.bin").write_bytes(b"".join(pts))
    (root / "poses.txt").write_text("\n".join(pose_lines) + "\n")
    (root / "intrinsics.txt").write_text(f"10.0 10.0 {(width-1)/2} {(height-1)/2} {width} {height}\n")
    return root


class TestDatasetReading:
    def test_frame_ids(self, tmp_path):
        _write_dataset(tmp_path, n_frames=4)
        assert _read_frame_ids(tmp_path) == [0, 1, 2, 3]

    def test_sweep_depth_projects_points(self, tmp_path):
        _write_dataset(tmp_path)
        intr = (10.0, 10.0, 5.5, 3.5, 12, 8)
        depth = _sweep_depth(tmp_path, 0, intr)
        assert depth.shape == (8, 12)
        assert np.any(depth > 0)
        assert depth.min() >= 0.0

    def test_build_batch_shapes(self, tmp_path):
        _write_dataset(tmp_path)
        state = init_state(seed=1, n_features=4, l_t=5, l_i=4, d=8)
        rng = np.random.default_rng(2)
        batch = build_batch(tmp_path, [0, 1, 2], state, rng, 3, with_depth=True)
        assert len(batch) == 3
        for sample in batch:
            assert sample["image"].shape == (8, 12, 3)
            assert sample["depth_target"].shape == (8, 12)
            assert sample["cond"].length == 5 + 2 * 4
            assert 1 <= sample["t"] <= 10


class TestTrainCommand:
    def test_two_stage_smoke_run_writes_loadable_weights(self, tmp_path, capsys):
        data = _write_dataset(tmp_path / "data")
        out = tmp_path / "weights.npz"
        rc = main(
            [
                "train",
                "--data-root", str(data),
                "--out", str(out),
                "--stage1-steps", "3",
                "--stage2-steps", "2",
                "--batch", "1",
                "--seed", "5",
                "--features", "4",
            ]
        )
        assert rc == 0
        printed = capsys.readouterr().out
        assert "stage1" in printed and "stage2" in printed
        state = load_state(out)
        assert state.control is not None
        assert np.all(np.isfinite(state.enc.conv_w))
        assert np.all(np.isfinite(state.control.conv_w))

    def test_missing_dataset_reports_error(self, tmp_path, capsys):
        rc = main(
            ["train", "--data-root", str(tmp_path / "nope"), "--out", str(tmp_path / "w.npz")]
        )
        assert rc == 1
        assert "error:" in capsys.readouterr().err
