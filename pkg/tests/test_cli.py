import json

import pytest
import torch

from silot.cli import main
from silot.datagen import read_dataset
from silot.training import load_checkpoint

TINY = {"width_scale": 0.25, "A": 8, "hidden_dim": 16, "K": 4, "train": {"batch_size": 2}}


def run(capsys, *argv):
    assert main(list(argv)) == 0
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def fail(capsys, *argv):
    with pytest.raises(SystemExit) as info:
        main(list(argv))
    assert info.value.code != 0
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    main(["generate-data", "--dataset", "shapes", "--n-videos", "4", "--n-objects", "1:2",
          "--size", "48x48", "--seed", "3", "--out", str(root / "data")])
    (root / "tiny.json").write_text(json.dumps(TINY))
    main(["train", "--data", str(root / "data"), "--config", str(root / "tiny.json"),
          "--steps", "2", "--log-every", "1", "--out", str(root / "run")])
    return root


def test_generate_data_is_deterministic(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        info = run(capsys, "generate-data", "--dataset", "mnist", "--n-videos", "3", "--n-objects", "1:6",
                   "--size", "48x48", "--seed", "7", "--out", str(tmp_path / name))
        assert info["n_videos"] == 3
        outs.append(read_dataset(info["out"]))
    assert outs[0].manifest == outs[1].manifest
    assert (outs[0].frames == outs[1].frames).all()


def test_bad_arguments_give_json_errors(tmp_path, capsys):
    err = fail(capsys, "generate-data", "--dataset", "shapes", "--n-videos", "1", "--size", "48by48",
               "--out", str(tmp_path))
    assert err["error"] == "usage" and "48by48" in err["message"]
    err = fail(capsys, "generate-data", "--dataset", "shapes", "--n-videos", "1", "--n-objects", "3:2",
               "--out", str(tmp_path))
    assert err["error"] == "usage"
    assert fail(capsys, "train", "--bogus")["error"] == "usage"
    err = fail(capsys, "conncomp", "--data", str(tmp_path / "missing"), "--out", str(tmp_path))
    assert err["error"] == "FileNotFoundError"


def test_unknown_config_key(workspace, tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"not_a_field": 1}))
    err = fail(capsys, "train", "--data", str(workspace / "data"), "--config", str(tmp_path / "bad.json"),
               "--steps", "1", "--out", str(tmp_path / "run"))
    assert err["error"] == "ConfigurationError"


def test_train_honours_step_cap_and_resumes(workspace, tmp_path, capsys):
    args = ["train", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.json"),
            "--log-every", "1", "--seed", "1"]
    run(capsys, *args, "--steps", "2", "--out", str(tmp_path / "a"))
    resumed = run(capsys, *args, "--steps", "3", "--out", str(tmp_path / "a"), "--resume")
    straight = run(capsys, *args, "--steps", "3", "--out", str(tmp_path / "b"))
    assert resumed["steps"] == straight["steps"] == 3
    a, _ = load_checkpoint(tmp_path / "a" / "checkpoint.pt")
    b, _ = load_checkpoint(tmp_path / "b" / "checkpoint.pt")
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_eval_writes_report_and_figure(workspace, tmp_path, capsys):
    paths = run(capsys, "eval", "--checkpoint", str(workspace / "run" / "checkpoint.pt"),
                "--data", str(workspace / "data"), "--with-conncomp", "--out", str(tmp_path))
    payload = json.loads(open(paths["json"]).read())
    assert [r["model"] for r in payload["reports"]][1] == "conncomp"
    assert (tmp_path / "metrics.png").stat().st_size > 0
    assert (tmp_path / "report.csv").exists()


def test_eval_prior_rollout_scores_late_frames(workspace, tmp_path, capsys):
    paths = run(capsys, "eval", "--checkpoint", str(workspace / "run" / "checkpoint.pt"),
                "--data", str(workspace / "data"), "--mode", "prior-rollout", "--out", str(tmp_path))
    report = json.loads(open(paths["json"]).read())
    report = report["reports"][0] if "reports" in report else report
    assert report["frames_scored"] == [3, 4, 5, 6, 7]


def test_eval_unknown_bucket(workspace, tmp_path, capsys):
    err = fail(capsys, "eval", "--checkpoint", str(workspace / "run" / "checkpoint.pt"),
               "--data", str(workspace / "data"), "--buckets", "9", "--out", str(tmp_path))
    assert err["error"] == "CliError"


def test_conncomp_command(workspace, tmp_path, capsys):
    paths = run(capsys, "conncomp", "--data", str(workspace / "data"), "--buckets", "1,2",
                "--out", str(tmp_path))
    assert {p.split("/")[-1] for p in paths.values()} == {"conncomp.json", "conncomp.csv", "conncomp.png"}
    report = json.loads((tmp_path / "conncomp.json").read_text())
    assert report["model"] == "conncomp"


@pytest.mark.parametrize("mode", ["posterior", "prior-rollout"])
def test_viz_writes_panel_and_trace(workspace, tmp_path, capsys, mode):
    info = run(capsys, "viz", "--checkpoint", str(workspace / "run" / "checkpoint.pt"),
               "--data", str(workspace / "data"), "--video", "1", "--mode", mode, "--out", str(tmp_path))
    assert info["figure"].endswith("video00001.png")
    trace = json.loads((tmp_path / "video00001.json").read_text())
    assert len(trace) == 8


def test_viz_video_out_of_range(workspace, tmp_path, capsys):
    err = fail(capsys, "viz", "--checkpoint", str(workspace / "run" / "checkpoint.pt"),
               "--data", str(workspace / "data"), "--video", "99", "--out", str(tmp_path))
    assert err["error"] == "CliError" and "out of range" in err["message"]
