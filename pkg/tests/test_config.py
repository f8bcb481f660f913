import pytest

from scenemotion.config import load_config, parse_override
from scenemotion.errors import ValidationError


def test_defaults_match_documented_values():
    config = load_config()
    assert config.scene.near_threshold == 1.0
    assert config.scene.far_threshold == 2.0
    assert config.sensors.env_extent == 4.0
    assert config.diffusion.lr == 1e-4
    assert config.diffusion.t_steps == 100
    assert config.grounding.model == "gpt-3.5-turbo"
    assert config.grounding.temperature == 0.0


def test_load_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("""
[scene]
cloud = "scene.ply"
near_threshold = 0.8

[diffusion]
steps = 50
""")
    config = load_config(path, overrides=["diffusion.steps=75", "grounding.few_shot=false"])
    assert config.scene.cloud == "scene.ply"
    assert config.scene.near_threshold == 0.8
    assert config.diffusion.steps == 75
    assert config.grounding.few_shot is False


def test_override_value_types():
    assert parse_override("diffusion.lr=0.001") == ("diffusion", "lr", 0.001)
    assert parse_override("grounding.few_shot=true") == ("grounding", "few_shot", True)
    assert parse_override("scene.cloud=foo.ply") == ("scene", "cloud", "foo.ply")
    assert parse_override('scene.cloud="a b.ply"') == ("scene", "cloud", "a b.ply")


def test_unknown_section_and_key_rejected(tmp_path):
    with pytest.raises(ValidationError):
        load_config(None, overrides=["physics.gravity=9.8"])
    with pytest.raises(ValidationError):
        load_config(None, overrides=["scene.wavelength=5"])
    path = tmp_path / "bad.toml"
    path.write_text("[warp]\nspeed = 9\n")
    with pytest.raises(ValidationError):
        load_config(path)
