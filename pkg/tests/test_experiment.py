import json

import pytest

from taxoneg.cli import main
from taxoneg.experiment import ExperimentConfig, StageError, is_test_query, run_experiment
from taxoneg.synthetic import SyntheticSpec, generate
from taxoneg.training import TrainConfig


@pytest.fixture(scope="module")
def paths(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    spec = SyntheticSpec(branching=3, depth=2, items_per_leaf=5, n_customers=30, n_queries=60, seed=1)
    return generate(spec).write(out / "data")


def small_cfg(paths, out, **kw):
    return ExperimentConfig(
        catalog=str(paths["catalog"]), engagement=str(paths["engagement"]),
        customers=str(paths["customers"]), truth=str(paths["truth"]), out_dir=str(out),
        train=TrainConfig(learning_rate=1.0, epochs=2, vocab_buckets=512, d_tok=8, d=8, d_cust=8), **kw)


def test_comparison_table(paths, tmp_path):
    rep = run_experiment(small_cfg(paths, tmp_path, samplers=("random", "tb_hns"), personalization=False))
    lines = (tmp_path / "comparison.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["sampler", "recall@8", "recall@12", "recall@24", "recall@100"]
    assert [l.split("\t")[0] for l in lines[1:]] == ["random", "tb_hns"]
    assert all(0.0 <= float(v) <= 1.0 for l in lines[1:] for v in l.split("\t")[1:])
    assert set(rep["samplers"]) == {"random", "tb_hns"}
    assert "personalization" not in rep


def test_rerun_is_byte_identical(paths, tmp_path):
    cfg = dict(samplers=("tb_hns",))
    run_experiment(small_cfg(paths, tmp_path / "a", **cfg))
    run_experiment(small_cfg(paths, tmp_path / "b", **cfg))
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes(), n
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert len(rep["personalization"]["per_case_recall"]["personalized"]) == rep["personalization"]["n_cases"]


def test_stage_error_names_stage(paths, tmp_path):
    cfg = small_cfg(paths, tmp_path, samplers=("random",))
    cfg.catalog = str(tmp_path / "missing.jsonl")
    with pytest.raises(StageError) as info:
        run_experiment(cfg)
    assert info.value.stage == "ingest"


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(samplers=("nope",))
    with pytest.raises(ValueError):
        ExperimentConfig(test_fraction=1.0)
    cfg = ExperimentConfig.from_dict({"samplers": "random, tb_hns", "ks": "1,5", "train.epochs": "3"}, seed=9)
    assert cfg.samplers == ("random", "tb_hns") and cfg.ks == (1, 5)
    assert cfg.train.epochs == 3 and cfg.train.learning_rate == 1.0 and cfg.seed == 9


def test_split_is_stable():
    qs = [f"q{j}" for j in range(2000)]
    picked = [q for q in qs if is_test_query(q, 0, 0.2)]
    assert picked == [q for q in qs if is_test_query(q, 0, 0.2)]
    assert 300 < len(picked) < 500


def test_experiment_cli(paths, tmp_path, capsys):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        f"catalog={paths['catalog']}\nengagement={paths['engagement']}\ntruth={paths['truth']}\n"
        "out_dir=out\nsamplers=random\nepochs=1\nvocab_buckets=256\nd_tok=4\nd=4\n")
    assert main(["experiment", "--config", str(cfg), "--seed", "2"]) == 0
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert rep["seed"] == 2 and list(rep["samplers"]) == ["random"]
