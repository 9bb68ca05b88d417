import pytest

TINY_TRAIN_CONFIG = """\
# tiny smoke-test run
total_iters = 8
warmup_iters = 2
pseudo_cadence = 2
pseudo_count = 1
init_voxel_size = 1.0
eval_every = 4
checkpoint_every = 4
densify = false
delta_max_deg = 10
seed = 3
"""


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A complete miniature pipeline: dataset, config, trained checkpoint.

    Built through the command-line entry point so every consumer also
    exercises the public interface end to end.
    """
    from streetsplat.cli import main

    root = tmp_path_factory.mktemp("pipeline")
    data = root / "scene"
    assert (
        main(
            [
                "make-synth",
                "--out", str(data),
                "--width", "24",
                "--height", "18",
                "--n-train", "4",
                "--n-test", "2",
                "--seed", "3",
            ]
        )
        == 0
    )
    config = root / "train.cfg"
    config.write_text(TINY_TRAIN_CONFIG)
    run = root / "run"
    assert (
        main(
            [
                "train",
                "--data-root", str(data),
                "--config", str(config),
                "--provider", "oracle",
                "--out-dir", str(run),
                "--log-every", "0",
            ]
        )
        == 0
    )
    return {"data": data, "run": run, "checkpoint": run / "final.sgdc", "config": config}
