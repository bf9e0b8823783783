import pytest

from multirestore.config import config_digest, dump_config, load_config, parse_value, task_specs
from multirestore.errors import ConfigurationError


@pytest.mark.parametrize(
    "text,expected",
    [("3", 3), ("0.5", 0.5), ("true", True), ("None", None), ("[1, 2]", [1, 2]), ("fog:3", "fog:3"), ("'x'", "x")],
)
def test_parse_value(text, expected):
    assert parse_value(text) == expected


def test_include_and_override(tmp_path):
    (tmp_path / "base.cfg").write_text("seed = 1\nsteps = 10  # trailing comment\n")
    (tmp_path / "run.cfg").write_text("include base.cfg\nsteps = 20\n\n# note\nname = demo\n")
    cfg = load_config(tmp_path / "run.cfg")
    assert cfg == {"seed": 1, "steps": 20, "name": "demo"}


def test_dump_roundtrip(tmp_path):
    cfg = {"seed": 4, "kinds": ["fog:1", "contrast:2"], "flag": False, "lr": 0.001}
    (tmp_path / "c.cfg").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.cfg") == cfg
    assert config_digest(cfg) == config_digest(dict(reversed(list(cfg.items()))))


def test_errors(tmp_path):
    (tmp_path / "a.cfg").write_text("include b.cfg\n")
    (tmp_path / "b.cfg").write_text("include a.cfg\n")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "a.cfg")
    (tmp_path / "bad.cfg").write_text("no equals sign\n")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "bad.cfg")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.cfg")


def test_task_specs():
    cfg = {
        "task.seg.kind": "segmentation",
        "task.cls.kind": "classification",
        "task.cls.beta": 2.0,
        "task.cls.note": "x",
        "seed": 0,
    }
    specs = task_specs(cfg)
    assert [s.task_id for s in specs] == ["cls", "seg"]
    assert specs[0].beta == 2.0 and specs[0].extra == {"note": "x"}
    with pytest.raises(ConfigurationError):
        task_specs({"task.x.beta": 1.0})
    with pytest.raises(ConfigurationError):
        task_specs({"task.x": "pir"})
