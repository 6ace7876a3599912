import csv

import numpy as np
import pytest

from adv4adv import data, nn
from adv4adv.cli import main
from adv4adv.config import ConfigError, parse_config, stream_seed
from adv4adv.evaluation import accuracy


def _write(tmp_path, text):
    p = tmp_path / "run.ini"
    p.write_text(text)
    return p


def test_minimal_config_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, "[data]\ndataset = fmnist\n"))
    assert cfg.train.batch_size == 256 and cfg.train.lr == 0.001 and cfg.attack.epsilon == 0.1
    assert cfg.train.source_attack.epsilon == 0.1 and cfg.arch == "fmnist-small"
    assert parse_config(overrides={"data": {"dataset": "cifar10"}}).attack.epsilon == 4 / 255


def test_flag_overrides_file(tmp_path):
    path = _write(tmp_path, "[data]\ndataset = fmnist\n[train]\nbeta = 1.0\n")
    assert parse_config(path, {"train": {"beta": 0.5}}).train.beta == 0.5
    assert parse_config(path).train.beta == 1.0


@pytest.mark.parametrize("text,needle", [
    ("[data]\ndataset = fmnist\n[attack]\nepsilon = -1\n", "epsilon"),
    ("[data]\ndataset = fmnist\n[train]\nbetta = 1\n", "betta"),
    ("[data]\ndataset = fmnist\n[train]\nepochs = many\n", "epochs"),
    ("[train]\nbeta = 1\n", "dataset"),
    ("[data]\ndataset = fmnist\n[optim]\nlr = 1\n", "optim"),
    ("[data]\ndataset = fmnist\ntrain_images = /no/such/file\n", "train_images"),
])
def test_config_errors_name_the_problem(tmp_path, text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(_write(tmp_path, text))


def test_stream_seed_rule():
    # blake2b-64 of "master:stream", little-endian
    assert stream_seed(0, "train") == 9941443406444495601
    assert stream_seed(0, "train") != stream_seed(1, "train") != stream_seed(0, "craft")


def test_out_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv("A4A_OUT", str(tmp_path / "envout"))
    assert parse_config(overrides={"data": {"dataset": "fmnist"}}).out == tmp_path / "envout"


def test_selftest_exit_zero(capsys):
    assert main(["selftest", "--seeds", "3"]) == 0
    assert "checks passed" in capsys.readouterr().out


def test_usage_errors_exit_two(fmnist_dir, capsys):
    assert main(["train", "--dataset", "mnist"]) == 2
    assert main(["bogus"]) == 2
    assert main(["train", "--dataset", "fmnist", "--data-dir", str(fmnist_dir), "--epsilon", "-1"]) == 2


def test_runtime_errors_exit_one(fmnist_dir, tmp_path, capsys):
    (tmp_path / "junk").write_bytes(b"junk")
    code = main(["craft", "--dataset", "fmnist", "--data-dir", str(fmnist_dir), "--model", str(tmp_path / "junk"),
                 "--out", str(tmp_path / "o")])
    assert code == 1
    assert "nn.CheckpointError" in capsys.readouterr().err


def _common(fmnist_dir, out):
    return ["--dataset", "fmnist", "--data-dir", str(fmnist_dir), "--arch", "tiny", "--out", str(out)]


def test_pipeline_round_trip(fmnist_dir, tmp_path):
    train_args = ["--epochs", "1", "--pretrain-epochs", "1"]
    assert main(["train", *_common(fmnist_dir, tmp_path / "a4a"), "--variant", "A4A", "--subset", "200",
                 *train_args]) == 0
    assert main(["train", *_common(fmnist_dir, tmp_path / "sur"), "--variant", "SURROGATE", *train_args]) == 0
    model = tmp_path / "a4a" / "model.a4ackpt"
    assert main(["craft", *_common(fmnist_dir, tmp_path / "craft"), "--model", str(model),
                 "--attack", "PGD", "--steps", "3"]) == 0
    crafted = tmp_path / "craft" / "PGD-3.a4adata"
    adv, echo = data.read_dataset(crafted)
    assert echo["kind"] == "PGD" and echo["steps"] == 3 and adv.domain == "PGD"
    data.write_dataset(tmp_path / "again.a4adata", adv, echo)
    assert (tmp_path / "again.a4adata").read_bytes() == crafted.read_bytes()

    assert main(["eval", *_common(fmnist_dir, tmp_path / "ev"), "--model", f"a4a={model}",
                 "--surrogate", str(tmp_path / "sur" / "model.a4ackpt"), "--adv-path", str(crafted),
                 "--attacks", "FGSM,PGD-3", "--svg"]) == 0
    with open(tmp_path / "ev" / "report.csv") as fh:
        rows = {(r["metric"], r["setting"], r["attack"]): r["value"] for r in csv.DictReader(fh)}
    params = nn.load_checkpoint(model)[0]
    assert float(rows[("accuracy", "file", "PGD-3")]) == accuracy(params, adv)
    assert ("accuracy", "black", "FGSM") in rows and (tmp_path / "ev" / "report.svg").exists()

    assert main(["embed", *_common(fmnist_dir, tmp_path / "em"), "--model", str(model), "--space", "phi"]) == 0
    header = (tmp_path / "em" / "embeddings_phi.csv").read_text().splitlines()[0].split(",")
    assert len(header) == 2 + 16


def test_manifest_lists_resolved_tunables(fmnist_dir, tmp_path):
    out = tmp_path / "nt"
    assert main(["train", *_common(fmnist_dir, out), "--variant", "NT", "--epochs", "1", "--pretrain-epochs", "0",
                 "--seed", "7", "--classwise", "off", "--beta", "0.25"]) == 0
    manifest = dict(line.split(" = ", 1) for line in (out / "manifest.txt").read_text().splitlines())
    for key, value in [("run.seed", "7"), ("train.variant", "NT"), ("train.classwise", "False"),
                       ("train.beta", "0.25"), ("train.lr", "0.001"), ("train.batch_size", "256"),
                       ("attack.epsilon", "0.1"), ("train.source_attack.kind", "FGSM"),
                       ("seed.train", str(stream_seed(7, "train"))), ("data.n_holdout", "40")]:
        assert manifest[key] == value
    assert {"model.a4ackpt", "log.csv", "manifest.txt"} <= {p.name for p in out.iterdir()}


def test_train_is_reproducible_via_cli(fmnist_dir, tmp_path):
    for d in ("r1", "r2"):
        assert main(["train", *_common(fmnist_dir, tmp_path / d), "--variant", "SAT", "--epochs", "1",
                     "--pretrain-epochs", "1"]) == 0
    assert (tmp_path / "r1" / "model.a4ackpt").read_bytes() == (tmp_path / "r2" / "model.a4ackpt").read_bytes()


def test_desk_protocol_runs_on_synthetic_data(fmnist_dir, tmp_path):
    """Plumbing check of the acceptance pipeline on a stand-in dataset; says nothing about the criteria."""
    import desk

    r = desk.run(fmnist_dir, tmp_path, arch="tiny", n_train=200, n_test=60,
                 schedule=["--pretrain-epochs", "1", "--epochs", "1"])
    for d in ("NT", "SAT", "A4A", "A4A-single"):
        for key in ("clean|clean", "white|FGSM", "white|PGD-20", "black|FGSM"):
            assert 0 <= r["accuracy"][f"{d}|{key}"] <= 1
    assert set(r["seconds"]) == {*desk.MODELS, "eval"}
