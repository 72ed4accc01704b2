import pytest

from landau.errors import ConfigError
from landau.models import BenchmarkTag
from landau.services.config_files import (
    dump_config,
    flatten,
    list_presets,
    load_config,
    read_flat,
    validate_flat,
    write_config,
)


def _write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_every_preset_loads():
    names = list_presets()
    assert "bkw2d-full" in names and "reference-bkw2d" in names
    for name in names:
        config = load_config(preset=name)
        assert config.seed == config.train.seed == config.stepping.seed


def test_flatten_parses_back_to_an_equal_model():
    for name in ("bkw2d-smoke", "gm3d-full", "sbp-bkw2d"):
        config = load_config(preset=name)
        flat = flatten(config)
        assert flat["benchmark.tag"] == config.benchmark.tag.value
        assert validate_flat(flat) == config


def test_written_config_reloads(tmp_path):
    config = load_config(preset="bkw3d-smoke")
    path = str(tmp_path / "config.cfg")
    write_config(path, config)
    assert load_config(path) == config
    assert dump_config(config).count("\n") == len(flatten(config))


def test_smoke_preset_values():
    config = load_config(preset="bkw2d-smoke")
    assert config.solver == "pinnpm"
    assert config.train.n_particles == 200
    assert config.train.flow.trunk == (32, 2)
    assert config.grid_spec.shape == (40, 40)
    assert config.effective_snapshot_times == [1.0, 2.5, 5.0]
    assert config.train.benchmark is BenchmarkTag.BKW2D


def test_bad_tag_names_key_and_line(tmp_path):
    path = _write(tmp_path, "solver=reference\nbenchmark.tag=BKW9D\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert any(d.startswith("line 2: benchmark.tag:") for d in info.value.diagnostics)
    assert info.value.exit_code == 1


def test_unknown_key_is_rejected(tmp_path):
    path = _write(tmp_path, "# comment\n\ntrain.bogus=1\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert any("line 3: train.bogus" in d for d in info.value.diagnostics)


def test_snapshot_outside_the_window(tmp_path):
    path = _write(tmp_path, "solver=reference\nbenchmark.tag=BKW2D\nsnapshot_times=1.0,9.0\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert "outside" in str(info.value)


def test_key_without_value(tmp_path):
    path = _write(tmp_path, "solver=reference\nbroken\n")
    with pytest.raises(ConfigError) as info:
        read_flat(path)
    assert info.value.diagnostics == ["line 2: broken: expected key=value"]


def test_missing_file_and_unknown_preset(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "nope.cfg"))
    with pytest.raises(ConfigError) as info:
        load_config(preset="no-such-preset")
    assert "bkw2d-smoke" in str(info.value)


def test_layers_apply_in_order(tmp_path):
    path = _write(tmp_path, "train.epochs=7\nseed=3\n")
    config = load_config(path, preset="bkw2d-smoke", overrides={"seed": "9"})
    assert config.train.epochs == 7
    assert config.train.n_particles == 200
    assert config.seed == 9
    assert config.train.seed == 9 and config.stepping.seed == 9


def test_section_and_scalar_conflict(tmp_path):
    path = _write(tmp_path, "train=1\ntrain.epochs=2\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_dotenv_syntax_is_accepted(tmp_path):
    path = _write(tmp_path, 'export solver=blob\nbenchmark.tag="Truncated2D"\nstepping.n_particles=100 # small\n')
    config = load_config(path)
    assert config.solver == "blob"
    assert config.benchmark.tag is BenchmarkTag.TRUNCATED_2D
    assert config.stepping.n_particles == 100


def test_paper_names_alias_the_full_presets():
    assert load_config(preset="bkw2d-paper") == load_config(preset="bkw2d-full")
    assert load_config(preset="gm3d-paper") == load_config(preset="gm3d-full")
    with pytest.raises(ConfigError):
        load_config(preset="bkw2d-draft")
