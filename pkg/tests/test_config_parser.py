import pytest

from core.errors import ConfigError
from utils.config import EXIT_CONFIG, RESIDUAL_TOLERANCE
from utils.config_parser import load_config, parse_config, parse_lines, parse_value

BASIC = """
# cubic NLW, one tangential mode
model.m = 1.0
model.f = 1.0            # a single value is a one-element list
model.tangential = [1]
solver.Q = 4
solver.coupled = false
frequency.amplitudes = 0.01
frequency.lambda = 1e-3
measure.box = 1.0, 2.0, 3.0, 4.0
output.dir = "runs/#1"
seed = 11
"""


def test_parse_value_kinds():
    assert parse_value("3") == 3
    assert parse_value("2.5e-1") == 0.25
    assert parse_value("TRUE") is True
    assert parse_value("[]") == []
    assert parse_value("[1, 2.5]") == [1, 2.5]
    assert parse_value("'a, b'") == "a, b"
    assert parse_value("plain") == "plain"


def test_parse_basic_file():
    config = parse_config(BASIC)
    assert config.model.f == [1.0]
    assert config.model.tangential == [1]
    assert config.solver.Q == 4
    assert config.solver.coupled is False
    assert config.frequency.amplitudes == [0.01]
    assert config.frequency.lam == 1e-3
    assert config.measure.intervals() == [(1.0, 2.0), (3.0, 4.0)]
    assert config.output.dir == "runs/#1"
    assert config.seed == 11
    assert config.verify.residual_tol == RESIDUAL_TOLERANCE


def test_echo_lists_every_setting_with_aliases():
    echo = parse_config(BASIC).echo()
    assert echo["frequency.lambda"] == 1e-3
    assert echo["solver.Q"] == 4
    assert echo["seed"] == 11
    assert "verify.sweep" in echo


def test_line_map():
    _, lines = parse_lines("model.m = 2\n\nsolver.Q = 3\n")
    assert lines == {"model.m": 1, "solver.Q": 3}


@pytest.mark.parametrize("text, line, key", [
    ("frequency.omega = 1.1\nmodel.m 2\n", 2, None),
    ("frequency.omega = 1.1\nmodel.m = 1\nmodel.m = 2\n", 3, "model.m"),
    ("frequency.omega = 1.1\nsolver.warp = 3\n", 2, "solver.warp"),
    ("frequency.omega = 1.1\nengine.x = 3\n", 2, "engine.x"),
    ("frequency.omega = 1.1\nmodel.a.b = 3\n", 2, "model.a.b"),
    ("frequency.omega = 1.1\nmodel.m = -1\n", 2, "model.m"),
    ("frequency.omega = 1.1\nsolver.order = 5\n", 2, "solver.order"),
])
def test_errors_name_line_and_key(text, line, key):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == line
    assert info.value.key == key
    assert info.value.exit_code == EXIT_CONFIG
    assert f"line {line}" in str(info.value)


def test_frequency_source_is_exclusive():
    with pytest.raises(ConfigError) as info:
        parse_config("frequency.omega = 1.1\nfrequency.amplitudes = 0.1\n")
    assert info.value.key == "frequency"
    assert info.value.line == 1
    with pytest.raises(ConfigError):
        parse_config("model.m = 1\n")


def test_odd_box_is_rejected():
    with pytest.raises(ConfigError) as info:
        parse_config("frequency.omega = 1.1\nmeasure.box = 1, 2, 3\n")
    assert info.value.key == "measure.box"


def test_load_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(BASIC, encoding="utf-8")
    config, text = load_config(path)
    assert text == BASIC
    assert config.seed == 11
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
