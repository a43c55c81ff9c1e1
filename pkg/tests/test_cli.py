import json

import numpy as np
import pytest
from helpers import label_image_sample, oracle_checkpoint

from scalenets.checkpoint import save_checkpoint
from scalenets.cli import main, sample_seeds
from scalenets.data import generate_phantom, read_volume, volume_bytes, write_volume
from scalenets.evaluation import DiceReport, wilcoxon_signed_rank


def test_generate(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["generate", "--count", "2", "--size", "16", "--modalities", "2", "--seed", "3", "--out", str(out)]) == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == ["manifest.json", "sample_0000.snvl", "sample_0001.snvl"]
    manifest = json.loads((out / "manifest.json").read_text())
    for entry in manifest["samples"]:
        again = generate_phantom((16, 16, 16), 2, np.random.default_rng(entry["seed"]))
        assert volume_bytes(again) == (out / entry["file"]).read_bytes()
    out2 = tmp_path / "e"
    main(["generate", "--count", "2", "--size", "16", "--modalities", "2", "--seed", "3", "--out", str(out2)])
    assert (out / "sample_0001.snvl").read_bytes() == (out2 / "sample_0001.snvl").read_bytes()


def test_generate_needs_seed(tmp_path):
    assert main(["generate", "--count", "1", "--out", str(tmp_path / "x")]) == 2


def test_generate_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["generate", "--count", "1", "--size", "16", "--seed", "1", "--out", str(blocker / "sub")]) == 3


def test_sample_seeds_are_stable():
    assert sample_seeds(5, 3) == sample_seeds(5, 3)
    assert sample_seeds(5, 3)[:2] == sample_seeds(5, 2)


def _analyze(capsys, *args):
    assert main(["analyze", *args]) == 0
    return dict(line.split("\t", 1) for line in capsys.readouterr().out.splitlines() if "\t" in line)


def test_analyze(capsys):
    sn = _analyze(capsys, "--variant", "SN31Ave1")
    assert sn["receptive_field"] == "87 87 87"
    classic = _analyze(capsys, "--variant", "Classic", "--f-width", "16", "--modalities", "4")
    assert int(sn["total"]) < int(classic["total"])
    r = _analyze(capsys, "--variant", "SN31Ave1", "--modalities", "8", "--f-width", "8")
    assert r["ratio"] == "0.250000"
    assert (r["scalable_weights"], r["classic_weights"]) == ("27648", "110592")


def test_analyze_unknown_variant(capsys):
    assert main(["analyze", "--variant", "Nope"]) == 2


@pytest.fixture
def dataset(tmp_path):
    rng = np.random.default_rng(2)
    d = tmp_path / "data"
    d.mkdir()
    for i in range(2):
        write_volume(generate_phantom((16, 16, 16), 2, rng), d / f"sample_{i:04d}.snvl")
    return d


def _config(tmp_path, dataset, **extra):
    cfg = {
        "variant": "SN31Ave1", "n_modalities": 2, "f_width": 2, "train_data": str(dataset),
        "val_data": str(dataset), "seed": 1, "max_steps": 4, "eval_every": 2, "out": str(tmp_path / "run"),
    }
    cfg.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_train_writes_outputs_and_is_deterministic(tmp_path, dataset):
    cfg = _config(tmp_path, dataset)
    assert main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "run"
    assert sorted(p.name for p in run.iterdir()) == ["checkpoint.snck", "config.json", "train.log"]
    log = (run / "train.log").read_text().splitlines()
    assert log[0] == "step\tloss\tval_dice" and len(log) == 5
    resolved = json.loads((run / "config.json").read_text())
    assert resolved["learning_rate"] == 0.01 and resolved["seed"] == 1
    first = (run / "checkpoint.snck").read_bytes()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run2")]) == 0
    assert (tmp_path / "run2" / "checkpoint.snck").read_bytes() == first


def test_train_seed_flag_overrides(tmp_path, dataset):
    cfg = _config(tmp_path, dataset, max_steps=1)
    assert main(["train", "--config", str(cfg), "--seed", "7"]) == 0
    assert json.loads((tmp_path / "run" / "config.json").read_text())["seed"] == 7


def test_train_missing_data_exit_2_without_output(tmp_path, dataset):
    cfg = _config(tmp_path, dataset, train_data=str(tmp_path / "missing"))
    assert main(["train", "--config", str(cfg)]) == 2
    assert not (tmp_path / "run").exists()


def test_train_bad_config(tmp_path, dataset):
    assert main(["train", "--config", str(_config(tmp_path, dataset, bogus=1))]) == 2
    assert main(["train", "--config", str(_config(tmp_path, dataset, beta1=2.0))]) == 2
    assert main(["train", "--config", str(_config(tmp_path, dataset, variant="XYZ"))]) == 2
    (tmp_path / "broken.json").write_text("{")
    assert main(["train", "--config", str(tmp_path / "broken.json")]) == 2
    assert not (tmp_path / "run").exists()


def test_train_modality_mismatch_is_runtime_error(tmp_path, dataset):
    assert main(["train", "--config", str(_config(tmp_path, dataset, n_modalities=3))]) == 3


def test_train_divergence_exit_4(tmp_path, dataset, monkeypatch):
    import scalenets.cli as cli
    from scalenets.training import TrainingDiverged

    def boom(*a, **k):
        raise TrainingDiverged(1, float("nan"))

    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", "--config", str(_config(tmp_path, dataset))]) == 4


@pytest.fixture
def oracle_run(tmp_path):
    rng = np.random.default_rng(5)
    d = tmp_path / "test"
    d.mkdir()
    for i in range(5):
        write_volume(label_image_sample(generate_phantom((16, 16, 16), 1, rng).labels), d / f"s{i}.snvl")
    ck = tmp_path / "oracle.snck"
    save_checkpoint(oracle_checkpoint(), ck)
    return ck, d


def test_eval_oracle_all_100(tmp_path, oracle_run, capsys):
    ck, d = oracle_run
    assert main(["eval", str(ck), str(d), "--out", str(tmp_path / "ev")]) == 0
    report = DiceReport.from_text((tmp_path / "ev" / "report.tsv").read_text())
    assert len(report.subjects) == 5
    assert all(v == 100.0 for r in report.regions for v in report.scores[r])


def test_eval_compare_with_itself_fails(tmp_path, oracle_run, capsys):
    ck, d = oracle_run
    main(["eval", str(ck), str(d), "--out", str(tmp_path / "ev")])
    capsys.readouterr()
    code = main(["eval", str(ck), str(d), "--compare", str(tmp_path / "ev" / "report.tsv")])
    assert code == 3
    assert "no nonzero pairs" in capsys.readouterr().err


def test_eval_compare_matches_module(tmp_path, oracle_run, capsys):
    ck, d = oracle_run
    main(["eval", str(ck), str(d), "--out", str(tmp_path / "ev")])
    mine = DiceReport.from_text((tmp_path / "ev" / "report.tsv").read_text())
    other = DiceReport(mine.regions, list(mine.subjects), {r: [100.0 - 3.0 * i for i in range(5)] for r in mine.regions})
    (tmp_path / "other.tsv").write_text(other.to_text())
    capsys.readouterr()
    assert main(["eval", str(ck), str(d), "--compare", str(tmp_path / "other.tsv"), "--one-sided"]) == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("whole\tW=")]
    expected = wilcoxon_signed_rank(mine.scores["whole"], other.scores["whole"], "greater")
    assert lines == [f"whole\tW={expected.statistic:g}\tp={expected.pvalue:.6g}\tn={expected.n}"]


def test_eval_modality_mismatch(tmp_path, oracle_run, dataset):
    ck, _ = oracle_run
    assert main(["eval", str(ck), str(dataset)]) == 3


def test_eval_missing_checkpoint(tmp_path, dataset):
    assert main(["eval", str(tmp_path / "nope.snck"), str(dataset)]) == 2


def test_inputs_not_mutated(tmp_path, oracle_run):
    ck, d = oracle_run
    before = {p: p.read_bytes() for p in list(d.iterdir()) + [ck]}
    main(["eval", str(ck), str(d)])
    assert {p: p.read_bytes() for p in before} == before


def test_read_volume_from_generate(tmp_path):
    main(["generate", "--count", "1", "--size", "16", "--modalities", "3", "--seed", "0", "--out", str(tmp_path)])
    assert read_volume(tmp_path / "sample_0000.snvl").n_modalities == 3
