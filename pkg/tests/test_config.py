import pytest

from neuralgde.config import (
    EXPERIMENTS,
    ConfigError,
    default_config,
    load_config,
    schema,
    write_config,
)


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.mark.parametrize("experiment", EXPERIMENTS)
def test_defaults_round_trip_through_ini(tmp_path, experiment):
    cfg = default_config(experiment)
    write_config(cfg, tmp_path / "c.ini")
    back = load_config(tmp_path / "c.ini")
    assert back.values == cfg.values
    assert back.digest() == cfg.digest()


def test_file_values_override_defaults(tmp_path):
    p = write(tmp_path, "[experiment]\nname = hybrid_forecast\nseeds = 3, 4\n\n[data]\nkeep_probs = 0.3 0.5\n")
    cfg = load_config(p)
    assert cfg.experiment == "hybrid_forecast"
    assert cfg.seeds == [3, 4]
    assert cfg["data"]["keep_probs"] == [0.3, 0.5]
    assert cfg["training"]["schedule"] == "cosine"


def test_unknown_key_names_line(tmp_path):
    p = write(tmp_path, "[experiment]\nname = particles\n\n[training]\nepochs = 5\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match=r"c\.ini:6: unknown key 'learning_rate'"):
        load_config(p)


def test_unknown_section_names_line(tmp_path):
    p = write(tmp_path, "[experiment]\nname = particles\n[solver]\nh = 0.1\n")
    with pytest.raises(ConfigError, match=r"c\.ini:3: unknown section \[solver\]"):
        load_config(p)


def test_bad_value_names_key(tmp_path):
    p = write(tmp_path, "[training]\nepochs = many\n")
    with pytest.raises(ConfigError, match=r"c\.ini:2: bad value for training\.epochs"):
        load_config(p)


def test_key_valid_only_for_other_experiment(tmp_path):
    p = write(tmp_path, "[experiment]\nname = particles\n[data]\nkeep_probs = 0.5\n")
    with pytest.raises(ConfigError, match="keep_probs"):
        load_config(p)


def test_semantic_validation(tmp_path):
    cases = ["[experiment]\nseeds =\n", "[training]\nschedule = warmup\n",
             "[model]\nmodels = gcde transformer\n",
             "[experiment]\nname = hybrid_forecast\n[data]\nkeep_probs = 1.5\n",
             "[experiment]\nname = lorenz\n"]
    for i, text in enumerate(cases):
        with pytest.raises(ConfigError):
            load_config(write(tmp_path, text, f"c{i}.ini"))


def test_overrides_apply_after_file(tmp_path):
    p = write(tmp_path, "[training]\nepochs = 5\n")
    cfg = load_config(p, {"training.epochs": "7", "model.hidden": "8"})
    assert cfg["training"]["epochs"] == 7 and cfg["model"]["hidden"] == 8
    with pytest.raises(ConfigError):
        load_config(p, {"epochs": "7"})


def test_environment_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("NEURALGDE_OUTPUT_DIR", str(tmp_path / "out"))
    monkeypatch.setenv("NEURALGDE_SEED", "11")
    cfg = load_config(write(tmp_path, "[experiment]\nseeds = 1 2\n"))
    assert cfg.seeds == [11]
    assert cfg.output_dir == tmp_path / "out"


def test_digest_tracks_values():
    a, b = default_config("particles"), default_config("particles")
    assert a.digest() == b.digest()
    b.set("training.lr", "0.02")
    assert a.digest() != b.digest()


def test_schema_rejects_unknown_experiment():
    with pytest.raises(ConfigError):
        schema("cora")
