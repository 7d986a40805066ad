import json
import subprocess
import sys

import pytest
import yaml

from dcmi.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from dcmi.experiment import PRESETS, ConfigError, load_config, log_grid, parse_config

BASE = {
    "data": {"synthetic": {"counts": [60, 20], "seed": 3}},
    "variants": ["dcmi", "d_al"],
    "seeds": 2,
    "train": {"epochs": 2, "lr": 3e-3, "batch_size": 16, "dim": 8},
}


def write(tmp_path, doc, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(doc if isinstance(doc, str) else yaml.safe_dump(doc))
    return path


def with_(**kw):
    doc = json.loads(json.dumps(BASE))
    for key, value in kw.items():
        doc[key] = value
    return doc


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# ----------------------------------------------------------------------------
# validation


def test_validate_ok(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "validate", write(tmp_path, BASE))
    assert code == EXIT_OK
    assert out.startswith("ok: ") and "variants=dcmi,d_al" in out


def test_negative_lambda_names_field(tmp_path, capsys):
    doc = with_(train={**BASE["train"], "lam1": -1})
    code, _, err = run_cli(capsys, "validate", write(tmp_path, doc))
    assert code == EXIT_CONFIG
    assert "train.lam1" in err


def test_unknown_variant_names_index(tmp_path, capsys):
    code, _, err = run_cli(capsys, "validate", write(tmp_path, with_(variants=["dcmi", "nope"])))
    assert code == EXIT_CONFIG
    assert "variants[1]" in err and "nope" in err


@pytest.mark.parametrize(
    "doc, field",
    [
        (with_(data={}), "data"),
        (with_(data={"synthetic": {"counts": [5]}, "jsonl": "x.jsonl"}), "data"),
        (with_(data={"jsonl": "missing.jsonl"}), "data.jsonl"),
        (with_(data={"synthetic": {"counts": [0]}}), "data.synthetic"),
        (with_(data={"synthetic": {"counts": [5]}, "split": [0.5, 0.5]}), "data.split"),
        (with_(data={"synthetic": {"counts": [5]}, "downsample": {"train": 0.5}}), "data.downsample.train"),
        (with_(seeds=0), "seeds"),
        (with_(bogus=1), "bogus"),
        (with_(train={"epochs": "many"}), "train.epochs"),
        (with_(train={"learning_rate": 1}), "train.learning_rate"),
        (with_(train={"variant": "dcmi"}), "train.variant"),
        (with_(train={"dim": 0}), "train.dim"),
        (with_(preset="xyz"), "preset"),
        (with_(export_representations="yes"), "export_representations"),
        (with_(sweep={"lam1": [0, 1]}), "sweep.lam2"),
        (with_(sweep={"lam1": [0, -1], "lam2": [0]}), "sweep.lam1[1]"),
    ],
)
def test_invalid_configs_name_field(tmp_path, doc, field):
    with pytest.raises(ConfigError) as info:
        load_config(write(tmp_path, doc))
    assert info.value.field == field


def test_invalid_yaml_reports_line(tmp_path, capsys):
    code, _, err = run_cli(capsys, "validate", write(tmp_path, "data:\n  synthetic: [1\n"))
    assert code == EXIT_CONFIG
    assert "line" in err


def test_missing_file_is_config_error(tmp_path, capsys):
    code, _, err = run_cli(capsys, "validate", tmp_path / "absent.yaml")
    assert code == EXIT_CONFIG and "cannot read" in err


def test_numeric_strings_accepted_for_float_fields(tmp_path):
    cfg = load_config(write(tmp_path, "data: {synthetic: {counts: [5]}}\ntrain: {lr: 3e-5}\n"))
    assert cfg.train.lr == pytest.approx(3e-5)


def test_jsonl_path_is_relative_to_config(tmp_path):
    (tmp_path / "d.jsonl").write_text('{"text": "a b", "label": 0, "domain": "x"}\n')
    cfg = load_config(write(tmp_path, with_(data={"jsonl": "d.jsonl"})))
    assert cfg.jsonl == (tmp_path / "d.jsonl").resolve()


def test_over_budget_sweep_refused_with_estimate(tmp_path, capsys):
    doc = with_(sweep={"lam1": {"log": 20}, "lam2": {"log": 20}, "seeds": 2, "max_runs": 100})
    path = write(tmp_path, doc)
    for argv in (["validate"], ["run", "--out", tmp_path / "o"], ["sweep", "--out", tmp_path / "o"]):
        code, _, err = run_cli(capsys, argv[0], path, *argv[1:])
        assert code == EXIT_CONFIG
        assert "20 x 20 = 400 cells x 2 seed(s) = 800 runs" in err
        assert "sweep.max_runs" in err


def test_sweep_command_needs_sweep_section(tmp_path, capsys):
    code, _, err = run_cli(capsys, "sweep", write(tmp_path, BASE), "--out", tmp_path / "o")
    assert code == EXIT_CONFIG and "sweep" in err


def test_run_needs_output(tmp_path, capsys):
    code, _, err = run_cli(capsys, "run", write(tmp_path, BASE))
    assert code == EXIT_CONFIG and "output" in err


def test_workers_must_be_positive(tmp_path, capsys):
    code, _, _ = run_cli(capsys, "run", write(tmp_path, BASE), "--out", tmp_path / "o", "--workers", "0")
    assert code == EXIT_CONFIG


# ----------------------------------------------------------------------------
# presets and grids


def test_preset_values():
    assert PRESETS == {"asc": (50.0, 6.0), "dsc": (30.0, 15.0), "rfd": (4.0, 3.0)}


def test_preset_precedence(tmp_path):
    path = write(tmp_path, with_(preset="dsc"))
    assert (load_config(path).train.lam1, load_config(path).train.lam2) == (30.0, 15.0)
    cli = load_config(path, preset="rfd").train
    assert (cli.lam1, cli.lam2) == (4.0, 3.0)
    explicit = parse_config(with_(preset="dsc", train={"lam2": 0.5}), tmp_path).train
    assert (explicit.lam1, explicit.lam2) == (30.0, 0.5)


def test_log_grid():
    grid = log_grid(200)
    assert len(grid) == 200 and grid[0] == 0.0
    assert grid[1] == pytest.approx(0.01) and grid[-1] == pytest.approx(5000.0)
    ratios = [b / a for a, b in zip(grid[1:], grid[2:])]
    assert max(ratios) == pytest.approx(min(ratios))


def test_log_grid_in_config(tmp_path):
    cfg = parse_config(with_(sweep={"lam1": {"log": 5, "high": 100, "low": 1}, "lam2": [0]}), tmp_path)
    assert cfg.sweep.lam1 == pytest.approx([0, 1, 10 ** (2 / 3), 10 ** (4 / 3), 100])


# ----------------------------------------------------------------------------
# running


@pytest.fixture(scope="module")
def run_dirs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    path = base / "exp.yaml"
    path.write_text(yaml.safe_dump(with_(export_representations=True)))
    first, second = base / "a", base / "b"
    codes = [main(["run", str(path), "--out", str(first)]), main(["run", str(path), "--out", str(second), "--workers", "2"])]
    return codes, first, second


def test_run_writes_reports_and_tables(run_dirs):
    codes, first, _ = run_dirs
    assert codes == [EXIT_OK, EXIT_OK]
    names = {p.name for p in first.iterdir()}
    for variant in ("dcmi", "d_al"):
        for seed in (0, 1):
            assert {f"report_{variant}_{seed}.json", f"losses_{variant}_{seed}.csv", f"repr_{variant}_{seed}.csv"} <= names
    assert {"aggregate.md", "vocab.txt"} <= names
    table = (first / "aggregate.md").read_text()
    assert "| Domain | dcmi | d_al |" in table and "**Macro**" in table and "**Micro**" in table


def test_losses_csv_matches_report(run_dirs):
    _, first, _ = run_dirs
    report = json.loads((first / "report_dcmi_0.json").read_text())
    lines = (first / "losses_dcmi_0.csv").read_text().splitlines()
    assert lines[0] == "epoch,sup,dom,con,val_macro_auc"
    assert len(lines) == 1 + len(report["epoch_losses"])
    assert float(lines[1].split(",")[1]) == pytest.approx(report["epoch_losses"][0]["sup"], rel=1e-8)


def test_rerun_is_byte_identical_across_worker_counts(run_dirs):
    _, first, second = run_dirs
    for path in first.iterdir():
        assert (second / path.name).read_bytes() == path.read_bytes(), path.name


def test_sweep_grid(tmp_path, capsys):
    path = write(tmp_path, with_(sweep={"lam1": [0, 1], "lam2": [0, 1]}))
    code, out, _ = run_cli(capsys, "sweep", path, "--out", tmp_path / "sw")
    assert code == EXIT_OK and out.startswith("best cell: ")
    payload = json.loads((tmp_path / "sw" / "sweep.json").read_text())
    assert [(c["lam1"], c["lam2"]) for c in payload["cells"]] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    table = (tmp_path / "sw" / "aggregate.md").read_text()
    rows = [line for line in table.splitlines() if line.startswith("| ") and not line.startswith("| lam1")]
    assert len(rows) == 4 and sum(r.startswith("| **") for r in rows) == 1
    best = payload["best"]
    assert f"Best: lam1={best['lam1']:g}, lam2={best['lam2']:g}" in table


def test_unwritable_output_is_config_error(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code, _, err = run_cli(capsys, "run", write(tmp_path, BASE), "--out", blocker / "sub")
    assert code == EXIT_CONFIG and "output" in err


def test_diverged_run_exits_runtime(tmp_path, capsys):
    doc = with_(variants=["d_al"], seeds=1, train={**BASE["train"], "lr": 1e300})
    code, _, err = run_cli(capsys, "run", write(tmp_path, doc), "--out", tmp_path / "o")
    assert code == EXIT_RUNTIME
    assert "aborted" in err
    assert (tmp_path / "o" / "aggregate.md").exists()


def test_module_entry_point(tmp_path):
    path = write(tmp_path, BASE)
    proc = subprocess.run([sys.executable, "-m", "dcmi", "validate", str(path)], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("ok: ")


def test_shipped_configs_validate_and_match_benchmarks():
    from pathlib import Path

    from test_acceptance import DIVERGENT, SIMILAR, TRAIN

    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.yaml")):
        load_config(path)
    for name, spec in (("divergent", DIVERGENT), ("similar", SIMILAR)):
        cfg = load_config(root / f"{name}.yaml")
        assert {k: getattr(cfg.synthetic, k) for k in spec} == spec
        assert {k: getattr(cfg.train, k) for k in TRAIN} == TRAIN
        assert (cfg.downsample_train, cfg.downsample_val, cfg.seeds) == (10, 10, 5)
