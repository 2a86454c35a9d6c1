import json

import numpy as np
import pytest

from cli_pipeline import STEPS, run_pipeline, tree
from ihdnet.cli import main, read_zoo
from ihdnet.ensemble import read_predictions
from ihdnet.model import load_checkpoint


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    return root, run_pipeline(root)


def test_every_step_succeeds(pipeline):
    _, results = pipeline
    assert [c for c, _, _ in results] == [c for c, _ in STEPS]
    failed = [(c, out) for c, code, out in results if code != 0]
    assert failed == []


def test_outputs_present(pipeline):
    root, _ = pipeline
    for name in ("data/manifest.csv", "data/answers.csv", "pre/crops.csv", "m1.ckpt", "m1.ckpt.history.csv",
                 "p1.csv", "score.txt", "ens.csv", "snap.csv", "gc.txt", "round0/model.ckpt",
                 "round0/selection.csv", "round0/pseudo_manifest.csv", "round0/report.txt", "round0/zoo.csv",
                 "round0/ensemble_unlabeled.csv"):
        assert (root / name).is_file(), name
    assert len(list((root / "pre").glob("*.npy"))) == 8


def test_run_manifest(pipeline):
    root, _ = pipeline
    man = json.loads((root / "m1.ckpt.run.json").read_text())
    assert man["command"] == "train" and man["seed"] == 1
    assert man["timestamp"] == "2023-11-14T22:13:20Z"
    assert man["inputs"] == {"data": "data"}


def test_evaluate_matches_printed_score(pipeline):
    root, results = pipeline
    printed = dict((c, out) for c, _, out in results)["evaluate"].strip()
    assert abs(float((root / "score.txt").read_text()) - float(printed)) < 5e-7


def test_ensemble_weights(pipeline):
    root, _ = pipeline
    p1, p2, ens = (read_predictions(root / f) for f in ("p1.csv", "p2.csv", "ens.csv"))
    assert np.allclose(ens.probs, 2 / 3 * p1.probs + 1 / 3 * p2.probs, atol=2e-6)
    snap = read_predictions(root / "snap.csv")
    assert np.all((snap.probs == ens.probs) | (snap.probs == 1e-7) | (snap.probs == 1 - 1e-7))


def test_round_zoo_file_is_loadable(pipeline):
    root, _ = pipeline
    rows = read_zoo(root / "round0" / "zoo.csv")
    assert [r[1] for r in rows] == [1, 2]
    for path, _, _ in rows:
        load_checkpoint(path)


def test_inspect_output(pipeline):
    _, results = pipeline
    out = dict((c, o) for c, _, o in results)["inspect"]
    assert "resolution: 32" in out and "parameters: " in out


def test_predictions_round_trip_through_evaluate(pipeline, capsys):
    root, _ = pipeline
    assert main(["evaluate", "--preds", str(root / "p1.csv"), "--truth", str(root / "data/manifest.csv"),
                 "--split", "validation"]) == 0
    assert capsys.readouterr().out.strip() == (root / "score.txt").read_text().strip()[:8]


def test_unknown_subcommand(capsys):
    assert main(["fly"]) == 2
    assert "unknown subcommand" in capsys.readouterr().err
    assert main([]) == 2


def test_missing_flag_is_usage_error(capsys):
    assert main(["train"]) == 2
    assert "--data" in capsys.readouterr().err


def test_missing_file_is_io_error(tmp_path, capsys):
    assert main(["evaluate", "--preds", str(tmp_path / "none.csv"), "--truth", str(tmp_path / "t.csv")]) == 1
    assert "error" in capsys.readouterr().err


def test_bad_config_is_error(tmp_path):
    (tmp_path / "bad.cfg").write_text("model.nothing: 1\n")
    assert main(["gradcheck", "--config", str(tmp_path / "bad.cfg")]) == 1
    assert main(["gradcheck", "--set", "train.peak_lr=fast"]) == 1


def test_zoo_file_rules(tmp_path):
    (tmp_path / "z.csv").write_text("# comment\na.ckpt,1,0\n/abs/b.ckpt,2,0\nc.ckpt,40\n")
    rows = read_zoo(tmp_path / "z.csv")
    assert rows == [(str(tmp_path / "a.ckpt"), 1, 0), ("/abs/b.ckpt", 2, 0), (str(tmp_path / "c.ckpt"), 40, None)]
    (tmp_path / "e.csv").write_text("path,rank\n")
    with pytest.raises(ValueError):
        read_zoo(tmp_path / "e.csv")


def test_gradcheck_failure_exits_nonzero(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gradcheck", "--coords", "5", "--slices", "1", "--tol", "1e-30"])
    assert exc.value.code == 1


@pytest.mark.slow
def test_pipeline_is_byte_reproducible(pipeline, tmp_path):
    root, first = pipeline
    second = run_pipeline(tmp_path / "again")
    assert first == second
    a, b = tree(root), tree(tmp_path / "again")
    assert sorted(a) == sorted(b)
    assert [k for k in a if a[k] != b[k]] == []
