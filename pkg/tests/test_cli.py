import csv

import pytest

from adaptive_manifold import cli, diff
from adaptive_manifold.embed_io import load_embeddings
from adaptive_manifold.harness import read_report


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "emb.ameb"
    assert cli.main(["synth", "--classes", "8", "--dim", "16", "--per-class", "40",
                     "--out", str(path)]) == 0
    return path


FAST = ["--r", "2", "--k", "5", "--queries", "20", "--threads", "1"]


def test_synth_defaults_and_reproducible(tmp_path):
    a, b = tmp_path / "a.ameb", tmp_path / "b.ameb"
    assert cli.main(["synth", "--out", str(a)]) == 0
    assert cli.main(["synth", "--out", str(b)]) == 0
    assert len(load_embeddings(a)) == 12000
    assert a.read_bytes() == b.read_bytes()


def test_synth_requires_out(capsys):
    assert cli.main(["synth"]) == 1
    assert "--out" in capsys.readouterr().err


def test_bad_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval", "--no-such-flag"])
    assert exc.value.code == 1


def test_eval_writes_rows_and_summary(data, tmp_path):
    out = tmp_path / "r.csv"
    assert cli.main(["eval", "--data", str(data), "--tasks", "100", "--out", str(out), *FAST]) == 0
    rows = list(csv.DictReader(open(out, newline="")))
    assert len(rows) == 101
    assert rows[-1]["task_index"] == "-1"
    assert all(sum(map(int, r["num_queries_per_class"].split(";"))) == 20 for r in rows[:-1])


def test_one_shot_defaults_reach_the_solver(data, tmp_path):
    out = tmp_path / "r.csv"
    assert cli.main(["eval", "--data", str(data), "--tasks", "1", "--r", "0", "--queries", "20",
                     "--threads", "1", "--out", str(out)]) == 0
    snap = read_report(out).config_snapshot
    assert snap["solver.k_neighbors"] == "20"
    assert snap["solver.beta"] == "0.8"
    assert snap["solver.loss.alpha"] == "2.0"
    assert snap["solver.lr"] == "0.0001"
    assert snap["solver.tau"] == "15.0"
    assert snap["task.dirichlet_gamma"] == "2.0"


def test_five_shot_defaults(data, tmp_path):
    out = tmp_path / "r.csv"
    assert cli.main(["eval", "--data", str(data), "--tasks", "1", "--r", "0", "--shots", "5",
                     "--queries", "20", "--threads", "1", "--out", str(out)]) == 0
    snap = read_report(out).config_snapshot
    assert (snap["solver.k_neighbors"], snap["solver.beta"], snap["solver.loss.alpha"]) == (
        "10", "0.9", "5.0")


@pytest.mark.parametrize("bad", [["--loss", "alpha:1.0"], ["--loss", "alpha:x"],
                                 ["--imbalance", "dirichlet:0"], ["--preprocessing", "zca"]])
def test_invalid_settings_rejected(data, tmp_path, bad):
    assert cli.main(["eval", "--data", str(data), "--out", str(tmp_path / "r.csv"), *bad]) == 1


def test_missing_data_file_is_data_error(tmp_path):
    assert cli.main(["eval", "--data", str(tmp_path / "nope.ameb"), *FAST]) == 2


def test_ablate_writes_seven_variants(data, tmp_path):
    out = tmp_path / "abl.csv"
    assert cli.main(["ablate", "--data", str(data), "--tasks", "2", "--seed", "5",
                     "--out", str(out), *FAST]) == 0
    rows = list(csv.DictReader(open(out, newline="")))
    assert len(rows) == 7
    assert {r["task_seed"] for r in rows} == {"5"}
    assert rows[0]["variant"] == "complete" and rows[-1]["preprocessing"] == "plc"


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--episodes", "3"]) == 0
    out = capsys.readouterr().out
    assert out.strip().endswith("PASS")
    for group in diff.GROUPS:
        assert group in out


def test_gradcheck_detects_sign_flip(monkeypatch, capsys):
    original = diff.backward

    def flipped(tape):
        g = original(tape)
        g.d_b_raw = -g.d_b_raw
        return g

    monkeypatch.setattr(diff, "backward", flipped)
    assert cli.main(["gradcheck", "--episodes", "2"]) == 3
    assert capsys.readouterr().out.strip().endswith("FAIL")


def test_gradcheck_coarse_step_at_loose_tolerance():
    assert cli.main(["gradcheck", "--episodes", "2", "--h", "1e-3", "--tol", "1e-2"]) == 0


def test_config_overlay_precedence(data, tmp_path):
    cfg = tmp_path / "run.cfg"
    out = tmp_path / "r.csv"
    cfg.write_text(f"# overlay\ndata = {data}\ntasks = 3\n--seed = 4\nout = {out}\n")
    assert cli.main(["eval", "--config", str(cfg), *FAST]) == 0
    rep = read_report(out)
    assert len(rep.per_task_accuracy) == 3 and rep.config_snapshot["task.seed"] == "4"
    assert cli.main(["eval", "--config", str(cfg), "--tasks", "2", *FAST]) == 0
    assert len(read_report(out).per_task_accuracy) == 2


def test_config_unknown_key_is_named(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("tasks = 3\nbogus = 1\n")
    assert cli.main(["eval", "--config", str(cfg)]) == 1
    assert "bogus" in capsys.readouterr().err


def test_help_lists_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert "default: 1000" in text and "default: 15.0" in text and "default: 0.0001" in text
