import csv
import io
import json

import pytest

from confu.bench import (
    BenchReport,
    ExperimentSpec,
    cmd_bench,
    cmd_report,
    parse_spec,
    read_report,
    render_spec,
)
from confu.cli import main
from confu.config import CorpusConfig, RunConfig, load_run_config, render_run_config
from confu.errors import ConfigError, FormatError

TINY_RUN = """\
[target]
vocab_size = 259
d_model = 16
n_heads = 2
n_layers = 2
max_seq_len = 64

[draft]
d_model = 16
n_heads = 2
vocab_size = 259

[future]
soft_prompts = 4
n_expert = 4
k_expert = 2

[train.target]
steps = 3
batch = 2

[train.draft]
steps = 2
batch = 2
anchors = 2

[train.confu]
steps = 2
batch = 2
anchors = 2

[corpus]
seq_len = 24
n_sequences = 16
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Tiny target, baseline draft and confu checkpoints built through the CLI."""
    d = tmp_path_factory.mktemp("run")
    cfg = d / "run.ini"
    cfg.write_text(TINY_RUN)
    paths = {k: str(d / f"{k}.ckpt") for k in ("target", "draft", "confu")}
    assert main(["train-target", "--config", str(cfg), "--out", paths["target"], "--log", str(d / "t.jsonl")]) == 0
    assert main(["train-draft", "--config", str(cfg), "--init", paths["target"], "--out", paths["draft"]]) == 0
    assert main(["train-confu", "--config", str(cfg), "--init", paths["draft"], "--out", paths["confu"]]) == 0
    return d, cfg, paths


def tiny_spec(paths, **kw):
    base = dict(
        modes=("baseline", "confu"), temperatures=(0.0, 1.0), budgets=(4, 8), prompts=2, prompt_len=8,
        max_tokens=10, corpus=CorpusConfig(seq_len=24, n_sequences=16),
        checkpoints=(("baseline", paths["draft"]), ("confu", paths["confu"])),
    )
    base.update(kw)
    return ExperimentSpec(**base)


def test_grid_has_one_row_per_cell(trained):
    rep = cmd_bench(tiny_spec(trained[2]))
    assert len(rep.rows) == 8
    assert {(r["mode"], r["temperature"], r["nodes"]) for r in rep.rows} == {
        (m, t, n) for m in ("baseline", "confu") for t in (0.0, 1.0) for n in (4, 8)
    }
    for r in rep.rows:
        assert r["tau"] >= 1
        if r["mode"] == "confu":
            assert r["contemplate_rows"] == r["draft_rows"] > 0
        else:
            assert r["contemplate_rows"] == 0
        assert r["draft_rows"] <= r["nodes"] * r["rounds"]


def test_csv_is_deterministic_and_rfc4180(trained):
    spec = tiny_spec(trained[2], budgets=(4,))
    a, b = cmd_bench(spec).to_csv(), cmd_bench(spec).to_csv()
    assert a == b
    rows = list(csv.DictReader(io.StringIO(a)))
    assert len(rows) == 4 and "wall_ms" not in rows[0]


def test_missing_checkpoint_is_config_error(trained):
    with pytest.raises(ConfigError):
        cmd_bench(tiny_spec(trained[2], modes=("confu-no-moe",)))
    with pytest.raises(ConfigError):
        cmd_bench(tiny_spec(trained[2], checkpoints=(("baseline", "/nonexistent"), ("confu", "/x"))))


def test_wrong_stage_checkpoint_is_config_error(trained):
    paths = trained[2]
    with pytest.raises(ConfigError):
        cmd_bench(tiny_spec(paths, modes=("confu",), checkpoints=(("confu", paths["draft"]),)))


def test_experiment_spec_round_trip():
    spec = ExperimentSpec(modes=("baseline", "confu", "confu-no-moe"), temperatures=(0.0, 0.7, 1.0),
                          budgets=(30, 60), seeds=(1, 2), max_depth=5,
                          checkpoints=(("confu", "b.ckpt"), ("baseline", "a.ckpt")))
    assert parse_spec(render_spec(spec)) == spec


def test_run_config_round_trip(tmp_path):
    p = tmp_path / "r.ini"
    p.write_text(TINY_RUN)
    cfg = load_run_config(p)
    p.write_text(render_run_config(cfg))
    assert load_run_config(p) == cfg
    assert load_run_config(None) == RunConfig()


def test_experiment_spec_validation():
    with pytest.raises(ConfigError):
        ExperimentSpec(modes=())
    with pytest.raises(ConfigError):
        ExperimentSpec(budgets=(0,))
    with pytest.raises(ConfigError):
        ExperimentSpec(modes=("other",))
    with pytest.raises(ConfigError):
        parse_spec("[nothing]\n")


def fake_report(tmp_path, name, rows):
    rep = BenchReport(rows=[dict(mode=m, temperature=0.0, nodes=30, tau=t, sr_proxy=t / 2) for m, t in rows])
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(rep.to_json()))
    return path


def test_report_single_is_passthrough(tmp_path):
    path = fake_report(tmp_path, "a", [("baseline", 2.0)])
    table = cmd_report([path])
    assert table.columns == ["temperature", "nodes", "tau[baseline]", "sr_proxy[baseline]"]
    assert table.rows == [[0.0, 30, 2.0, 1.0]]


def test_report_adds_ratio_and_delta_columns(tmp_path):
    a = fake_report(tmp_path, "a", [("baseline", 2.0)])
    b = fake_report(tmp_path, "b", [("confu", 2.5), ("confu-no-moe", 2.25), ("confu-no-moe-no-repl", 2.0)])
    table = cmd_report([a, b])
    row = dict(zip(table.columns, table.rows[0]))
    assert row["tau_ratio[confu/baseline]"] == 1.25
    assert row["dtau[moe]"] == 0.25 and row["dtau[replication]"] == 0.25
    assert table.to_text().count("\n") == 2
    assert next(csv.reader(io.StringIO(table.to_csv()))) == table.columns


def test_report_format_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("not json")
    with pytest.raises(FormatError):
        read_report(bad)
    bad.write_text(json.dumps({"schema": "other", "rows": []}))
    with pytest.raises(FormatError):
        read_report(bad)
    bad.write_text(json.dumps({"schema": "confu-bench/1", "rows": [{"mode": "confu"}]}))
    with pytest.raises(FormatError):
        cmd_report([bad])
    a = fake_report(tmp_path, "a", [("confu", 2.0)])
    with pytest.raises(FormatError):
        cmd_report([a, a])
    with pytest.raises(ConfigError):
        cmd_report([])


# -- command line ------------------------------------------------------------------


def test_cli_decode_and_bench(trained, tmp_path, capsys):
    d, cfg, paths = trained
    assert main(["decode", "--checkpoint", paths["confu"], "--prompt", "ab", "--max-tokens", "6", "--nodes", "4"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out["ids"]) == out["tokens"] == 6 and out["contemplate_rows"] == out["draft_rows"]

    exp = tmp_path / "exp.ini"
    exp.write_text(render_spec(tiny_spec(paths, budgets=(4,), temperatures=(0.0,))))
    assert main(["bench", "--config", str(exp), "--out", str(tmp_path / "b1")]) == 0
    printed = capsys.readouterr().out
    assert printed.encode() == (tmp_path / "b1.csv").read_bytes()
    assert main(["bench", "--config", str(exp), "--out", str(tmp_path / "b2")]) == 0
    assert (tmp_path / "b1.csv").read_bytes() == (tmp_path / "b2.csv").read_bytes()
    assert main(["report", str(tmp_path / "b1.json"), "--out", str(tmp_path / "t.csv")]) == 0
    assert "tau_ratio[confu/baseline]" in (tmp_path / "t.csv").read_text()


def test_cli_training_is_reproducible(trained, tmp_path):
    d, cfg, paths = trained
    again = tmp_path / "t.ckpt"
    assert main(["train-target", "--config", str(cfg), "--out", str(again)]) == 0
    with open(paths["target"], "rb") as a, open(again, "rb") as b:
        assert a.read() == b.read()
    log = [json.loads(line) for line in (d / "t.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [1, 2, 3] and {r["stage"] for r in log} == {"target-pretrain"}


def test_cli_seed_changes_checkpoint(trained, tmp_path):
    d, cfg, paths = trained
    other = tmp_path / "s.ckpt"
    assert main(["train-target", "--config", str(cfg), "--seed", "5", "--out", str(other)]) == 0
    with open(paths["target"], "rb") as a:
        assert a.read() != other.read_bytes()


def test_cli_verify_lossless_lanes(capsys):
    assert main(["verify-lossless", "--exhaustive", "--max-tokens", "2", "--mode", "baseline"]) == 0
    assert capsys.readouterr().out.startswith("PASS ")
    assert main(["verify-lossless", "--exhaustive", "--max-tokens", "2", "--rule", "greedy-match"]) == 1
    assert capsys.readouterr().out.startswith("FAIL ")


def test_cli_errors_exit_with_status_2(tmp_path, capsys):
    assert main(["verify-lossless", "--exhaustive", "--max-tokens", "9"]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["bench", "--config", str(tmp_path / "missing.ini")]) == 2
