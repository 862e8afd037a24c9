import pytest

from oodlab.config import ExperimentConfig, dump_config, load_config


def test_round_trip(tmp_path):
    cfg = (ExperimentConfig().with_run(method="e5b", seed=7)
           .override("train.lr", "0.002").override("alm.beta_max", "none").override("model.hidden", "32, 16"))
    path = tmp_path / "c.ini"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert back == cfg
    assert back.digest() == cfg.digest()


def test_override_coercion():
    cfg = ExperimentConfig()
    assert cfg.override("train.epochs", "7").train.epochs == 7
    assert cfg.override("alm.tau", "0.25").alm.tau == 0.25
    assert cfg.override("alm.tau", "None").alm.tau is None
    assert cfg.override("model.hidden", "(8,4)").model.hidden == (8, 4)
    assert cfg.override("objectives.lambda_oe", 0.3).objectives.lambda_oe == 0.3


def test_with_run_threads_seed_into_data():
    cfg = ExperimentConfig().with_run(method="e2", seed=11)
    assert cfg.seed == 11 and cfg.data.seed == 11 and cfg.method == "e2"
    assert cfg.digest() != ExperimentConfig().with_run(seed=12).digest()


def test_partial_file_keeps_defaults(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[experiment]\nseed = 3\n[train]\nepochs = 4\n")
    cfg = load_config(path)
    assert cfg.train.epochs == 4 and cfg.data.seed == 3
    assert cfg.train.batch_size == ExperimentConfig().train.batch_size


@pytest.mark.parametrize("text", [
    "[nosuch]\nx = 1\n",
    "[train]\nnope = 1\n",
    "[data]\nseed = 4\n",
    "[experiment]\nmethod = e9\n",
    "[train]\nepochs = many\n",
])
def test_bad_files_rejected(tmp_path, text):
    path = tmp_path / "c.ini"
    path.write_text(text)
    with pytest.raises(ValueError):
        load_config(path)


def test_unknown_override_key():
    with pytest.raises(KeyError):
        ExperimentConfig().override("train.nope", "1")
    with pytest.raises(AttributeError):
        ExperimentConfig().override("nosuch.x", "1")
