import numpy as np
import pytest

from streamanchor import data as datamod
from streamanchor.cli import dataset_checksum, main

TINY = """
task = {task}
seed = 1
gen.n_sequences = 40
gen.t_min = 60
gen.t_max = 70
gen.event_min = 10
gen.event_max = 20
gen.margin = 10
train.epochs = 1
train.batch_size = 8
"""


def write_config(tmp_path, task="KWS", extra=""):
    path = tmp_path / f"{task}.cfg"
    path.write_text(TINY.format(task=task) + extra)
    return path


def test_generate_default_split_counts(tmp_path, capsys):
    cfg = tmp_path / "kws.cfg"
    cfg.write_text("task = KWS\ngen.n_sequences = 100\n")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    assert "train=70\tvalidation=15\ttest=15" in capsys.readouterr().out
    assert datamod.read(tmp_path / "d").counts() == {"train": 70, "validation": 15, "test": 15}


def test_generate_is_repeatable(tmp_path):
    cfg = write_config(tmp_path)
    main(["generate", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["generate", "--config", str(cfg), "--out", str(tmp_path / "b")])
    assert dataset_checksum(tmp_path / "a") == dataset_checksum(tmp_path / "b")


def test_invalid_config_exit_code_names_field(tmp_path, capsys):
    cfg = write_config(tmp_path, extra="gen.noise = -3\n")
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 2
    assert "gen.noise" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["generate", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == 2


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("STREAMANCHOR_OUT", str(tmp_path / "env"))
    assert main(["generate", "--config", str(write_config(tmp_path))]) == 0
    assert (tmp_path / "env" / datamod.MANIFEST_NAME).exists()


def test_missing_output_dir_is_config_error(tmp_path, monkeypatch):
    monkeypatch.delenv("STREAMANCHOR_OUT", raising=False)
    assert main(["generate", "--config", str(write_config(tmp_path))]) == 2


def test_plot_weights_ramps(tmp_path, capsys):
    assert main(["plot-weights", "--T", "10", "--anchor", "10"]) == 0
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()[1:]]
    sal = np.array([float(r[1]) for r in rows])
    assert np.all(np.diff(sal) > 0) and sal[-1] == 1.0
    assert all(r[2] == "1.0" for r in rows)
    out = tmp_path / "w.tsv"
    assert main(["plot-weights", "--T", "10", "--anchor", "1", "--out", str(out)]) == 0
    sal = np.array([float(r.split("\t")[1]) for r in out.read_text().splitlines()[1:]])
    assert np.all(np.diff(sal) < 0) and sal[0] == 1.0
    assert main(["plot-weights", "--T", "10", "--anchor", "11"]) == 2


def test_train_then_eval(tmp_path, capsys):
    cfg = write_config(tmp_path, "SOD")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("model.asck", "history.tsv", "report.tsv", "config.txt"):
        assert (out / name).exists()
    capsys.readouterr()
    args = ["eval", "--checkpoint", str(out / "model.asck"), "--dataset", str(out / "data"),
            "--config", str(cfg)]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first
    vals = dict(line.split("\t") for line in first.splitlines())
    p25, p50, p75 = (float(vals[k]) for k in ("latency_p25", "latency_p50", "latency_p75"))
    assert np.isnan(p50) or p25 <= p50 <= p75


def test_eval_all_negative_test_split(tmp_path, capsys):
    cfg = write_config(tmp_path, "KWS")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    ds = datamod.read(out / "data")
    keep = [(s, t) for s, t in zip(ds.sequences, ds.splits) if t != "test" or not s.is_positive]
    datamod.write(datamod.Dataset([s for s, _ in keep], [t for _, t in keep]), tmp_path / "neg")
    capsys.readouterr()
    code = main(["eval", "--checkpoint", str(out / "model.asck"), "--dataset",
                 str(tmp_path / "neg")])
    assert code == 3
    err = capsys.readouterr().err
    assert "both classes" in err and "model.asck" in err


def test_eval_dimension_mismatch(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(write_config(tmp_path, "KWS")), "--out", str(out)]) == 0
    main(["generate", "--config", str(write_config(tmp_path, "SOD")), "--out", str(tmp_path / "sod")])
    assert main(["eval", "--checkpoint", str(out / "model.asck"), "--dataset",
                 str(tmp_path / "sod")]) == 3


def test_eval_corrupt_dataset_is_data_error(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", str(write_config(tmp_path, "KWS")), "--out", str(out)]) == 0
    blob = out / "data" / datamod.BLOB_NAME
    blob.write_bytes(blob.read_bytes()[:100])
    assert main(["eval", "--checkpoint", str(out / "model.asck"), "--dataset",
                 str(out / "data")]) == 4


@pytest.mark.parametrize("task, columns", [
    ("KWS", ["AUC ROC (%)", "Mean Latency (secs)"]),
    ("MTD", ["% FNR @ 2% FPR", "Mean Latency (ms)", "Brier (%)"]),
    ("SOD", ["Mean (secs)", "p25 (secs)", "p50 (secs)", "p75 (secs)"]),
])
def test_compare_tables(tmp_path, task, columns):
    cfg = write_config(tmp_path, task)
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(cfg), "--out", str(out)]) == 0
    text = (out / "results.txt").read_text()
    tsv = (out / "results.tsv").read_text().splitlines()
    header = tsv[0].split("\t")
    for col in columns:
        assert col in text and col in header
    medians = [r for r in tsv if "\tmedian\t" in r]
    assert [r.split("\t")[0] for r in medians] == ["FCEL", "FFL", "SAL", "SA+FL", "SAFL"]
    # every loss row trained on the same dataset with the same model seed
    prov = [r for r in tsv if r.startswith("# ")]
    assert len(prov) == 1 and "model_seed=1" in prov[0] and "dataset_sha256=" in prov[0]


def test_compare_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path, "MTD", extra="losses = FCEL, SAL\n")
    for name in ("a", "b"):
        assert main(["compare", "--config", str(cfg), "--out", str(tmp_path / name),
                     "--seeds", "2"]) == 0
    for f in ("results.txt", "results.tsv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert "median over 2 seed(s)" in (tmp_path / "a" / "results.txt").read_text()


def test_compare_marks_failed_rows(tmp_path, capsys):
    # a validation split without negatives makes threshold tuning impossible
    cfg = write_config(tmp_path, "SOD", extra="losses = FCEL\ngen.positive_fraction = 1.0\n")
    assert main(["compare", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 3
    text = (tmp_path / "c" / "results.txt").read_text()
    assert "FAILED" in text and "negative" in text
    assert "\tfailed\t" in (tmp_path / "c" / "results.tsv").read_text()
