import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from camoe import cli, harness
from camoe.datagen import VIDEO_SLOTS
from camoe.harness import ConfigError, default_masks, masked_eval, parse_config
from camoe.losses import LossConfig, train
from camoe.metrics import evaluate
from camoe.model import TaskGrouping, build, example_scores

from conftest import SMALL_MODEL

TINY = """
[experiment]
seeds = 0 1
outputs = {out}
baseline = flat

[data]
n = 2500

[model]
embed_dim = 6
n_experts = 2
expert_dim = 5
rank = 2
deep_layers = 4
branches = 2
tower_layers = 3

[training]
epochs = 2
batch_size = 128

[arm:flat]
grouping = single
experts = mlp
loss = bce

[arm:camoe]
grouping = modality
loss = alm
mask_eval = yes

[table:main]
rows = camoe
metrics = auc_pr ece

[table:masks]
kind = masks
arm = camoe

[simulation]
steps = 300
arms = camoe
"""


def tiny(tmp_path, name="run") -> str:
    return TINY.format(out=tmp_path / name)


# -- config -------------------------------------------------------------------------------


def test_parse_tiny_config(tmp_path):
    cfg = parse_config(tiny(tmp_path))
    assert cfg.seeds == (0, 1)
    assert [a.name for a in cfg.arms] == ["flat", "camoe"]
    flat, camoe = cfg.arms
    assert (flat.grouping, flat.expert_kind, flat.loss.kind) == ("single", "mlp", "bce")
    assert (camoe.grouping, camoe.expert_kind, camoe.loss.kind) == ("modality", "dcn", "alm")
    assert camoe.model.deep_layers == (4,) and camoe.loss.epochs == 2
    assert cfg.simulation.steps == 300
    assert [t.name for t in cfg.tables] == ["main", "masks"]


def test_paper_tables_config_parses():
    cfg = harness.load_config(Path(__file__).parent.parent / "paper_tables.cfg")
    assert cfg.baseline == "wide_deep"
    assert len(cfg.seeds) == 5 and cfg.data.n == 100_000


def test_per_arm_overrides(tmp_path):
    text = tiny(tmp_path).replace("mask_eval = yes", "mask_eval = yes\nlr = 0.01\nrank = 3")
    camoe = parse_config(text).arm("camoe")
    assert camoe.loss.lr == 0.01 and camoe.model.rank == 3


def test_slot_overrides_in_data_section(tmp_path):
    text = tiny(tmp_path).replace("n = 2500", "n = 2500\nbase_ctr.StreamVideo = 0.05")
    from camoe.datagen import AdSlot
    assert parse_config(text).data.base_ctr[AdSlot.StreamVideo] == 0.05


@pytest.mark.parametrize("edit, message", [
    (("grouping = single", "grouping = cubist"), "grouping"),
    (("loss = bce", "loss = hinge"), "loss"),
    (("epochs = 2", "epochs = two"), "epochs"),
    (("[simulation]", "[mystery]"), "mystery"),
    (("baseline = flat", "baseline = nobody"), "baseline"),
    (("arm = camoe", "arm = flat"), "mask_eval"),
    (("rows = camoe", "rows = ghost"), "ghost"),
    (("n = 2500", "n = 2500\ncolour = red"), "colour"),
    (("[arm:flat]", "[arm:data]"), "collide"),
])
def test_config_errors_name_the_problem(tmp_path, edit, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(tiny(tmp_path).replace(*edit))


def test_missing_config_names_path(tmp_path):
    with pytest.raises(ConfigError, match="nope.cfg"):
        harness.load_config(tmp_path / "nope.cfg")


# -- masked evaluation ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def model_and_data(small_data):
    m = build(TaskGrouping.of_kind("modality"), SMALL_MODEL, small_data.feature_dim, seed=1)
    train(m, small_data, LossConfig(epochs=2, seed=1))
    return m, small_data


def test_default_masks():
    assert default_masks(2) == [("none", (1, 1)), ("left", (0, 1)), ("right", (1, 0))]
    assert [n for n, _ in default_masks(3)] == ["none", "expert0", "expert1", "expert2"]


def test_masked_eval_rows(model_and_data):
    m, d = model_and_data
    rows = masked_eval(m, d, default_masks(2))
    assert [r.name for r in rows] == ["none", "left", "right"]
    assert set(rows[0].deltas) == {s.name for s in VIDEO_SLOTS if s.name in rows[0].report.slots}
    assert all(v in (0.0, None) for v in rows[0].deltas.values())
    # each cell is what a standalone evaluation of the masked scores gives
    standalone = evaluate(example_scores(m, d, mask=[0, 1]), d)
    assert rows[1].report.to_dict() == standalone.to_dict()


def test_masked_eval_rejects_wrong_length(model_and_data):
    m, d = model_and_data
    with pytest.raises(ValueError, match="bad"):
        masked_eval(m, d, [("bad", (1, 1, 1))])


# -- full runs ------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ablate")
    cfg = parse_config(tiny(tmp))
    return cfg, harness.run(cfg)


def test_run_writes_artifacts(tiny_run):
    cfg, result = tiny_run
    assert result.ok
    root = Path(cfg.outputs)
    for arm in ("flat", "camoe"):
        for seed in (0, 1):
            out = root / arm / f"seed{seed}"
            for name in ("config.json", "checkpoint.json", "train_log.jsonl", "calibration.json",
                         "report.json"):
                assert (out / name).exists(), out / name
    assert (root / "camoe" / "seed0" / "masks.json").exists()
    assert (root / "camoe" / "seed0" / "reliability_video.csv").exists()
    for name in ("main.csv", "main.json", "masks.csv", "pareto.json", "simulation.json",
                 "timing.json", "failures.json", "simulation/seed0/report.json"):
        assert (root / name).exists(), name


def test_baseline_row_is_zero(tiny_run):
    _, result = tiny_run
    for table in result.tables["main"]:
        assert table.rows[0] == "flat"
        for col in table.columns:
            assert table.mean("flat", col) in (0.0, None)


def test_mask_table_first_row_is_zero(tiny_run):
    _, result = tiny_run
    (table,) = result.tables["masks"]
    assert table.rows == ["none", "left", "right"]
    assert all(table.mean("none", c) in (0.0, None) for c in table.columns)


def test_pareto_report_marks_front(tiny_run):
    cfg, result = tiny_run
    pareto = json.loads((Path(cfg.outputs) / "pareto.json").read_text())
    assert pareto == json.loads(json.dumps(result.pareto))
    on = {p["label"] for p in pareto["points"] if p["on_front"]}
    assert on == set(pareto["front"])


def test_rerun_is_byte_identical(tiny_run, tmp_path):
    cfg, _ = tiny_run
    again = harness.run(cfg.with_overrides(outputs=str(tmp_path / "again")))
    assert again.ok
    first, second = Path(cfg.outputs), tmp_path / "again"
    names = sorted(p.relative_to(first) for p in first.rglob("*") if p.is_file())
    assert names == sorted(p.relative_to(second) for p in second.rglob("*") if p.is_file())
    for rel in names:
        if rel.name == "timing.json":
            continue
        assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel


# -- CLI ------------------------------------------------------------------------------------------


def test_help_lists_every_flag(capsys):
    assert cli.main(["--help"]) == 0
    top = capsys.readouterr().out
    for cmd in ("generate", "train", "calibrate", "evaluate", "simulate", "ablate", "pareto"):
        assert cmd in top
    assert cli.main(["train", "--help"]) == 0
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--out", "--arm"):
        assert flag in text


def test_exit_codes(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(tiny(tmp_path, "cli"))
    assert cli.main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert "missing.cfg" in capsys.readouterr().err
    # no checkpoint yet
    assert cli.main(["calibrate", "--config", str(cfg_path), "--seed", "0"]) == 1
    assert "checkpoint" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(cfg_path), "--seed", "0", "--arm", "camoe"]) == 0
    assert cli.main(["calibrate", "--config", str(cfg_path), "--seed", "0", "--arm", "camoe"]) == 0
    assert cli.main(["evaluate", "--config", str(cfg_path), "--seed", "0", "--arm", "camoe"]) == 0
    assert (tmp_path / "cli" / "camoe" / "seed0" / "report.json").exists()
    assert cli.main(["simulate", "--config", str(cfg_path), "--seed", "0"]) == 0
    assert cli.main(["train", "--config", str(cfg_path), "--arm", "ghost"]) == 2
    assert cli.main(["train"]) == 2


def test_generate_writes_splits(tmp_path):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(tiny(tmp_path, "gen"))
    assert cli.main(["generate", "--config", str(cfg_path), "--seed", "1"]) == 0
    out = tmp_path / "gen" / "data" / "seed1"
    assert sorted(p.name for p in out.iterdir()) == ["test.csv", "train.csv", "validation.csv"]


def test_pareto_subcommand(tiny_run, tmp_path, capsys):
    cfg, result = tiny_run
    out = tmp_path / "p.json"
    assert cli.main(["pareto", "--reports", cfg.outputs, "--out", str(out)]) == 0
    assert json.loads(out.read_text())["front"] == result.pareto["front"]
    assert cli.main(["pareto", "--reports", str(tmp_path / "none")]) == 2


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "camoe", "--help"], capture_output=True, text=True)
    assert done.returncode == 0 and "ablate" in done.stdout


def test_masked_eval_is_reproducible(model_and_data):
    m, d = model_and_data
    a = [r.to_dict() for r in masked_eval(m, d, default_masks(2))]
    b = [r.to_dict() for r in masked_eval(m, d, default_masks(2))]
    assert a == b
    assert np.isfinite([v for r in a for v in r["auc_pr_change"].values() if v is not None]).all()
