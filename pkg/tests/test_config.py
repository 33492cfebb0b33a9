import pytest

from pgmfuse import config
from pgmfuse.config import Config, ConfigError


def test_parse_comments_and_blanks():
    text = "# run\nroot = /data  # trailing\n\ngrid_h=32\n"
    assert config.parse_text(text) == {"root": "/data", "grid_h": "32"}


def test_parse_rejects_bare_line():
    with pytest.raises(ConfigError, match="line 2"):
        config.parse_text("grid_h = 1\nnonsense\n")


def test_load_types_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("grid_w = 256\nlr = 0.005\ntrain_seqs = 0, 1 ,9\nstop_at =\n")
    cfg = config.load(p, {"lr": "0.02", "seed": None})
    assert cfg.grid_w == 256 and cfg.lr == 0.02 and cfg.seed == 0
    assert cfg.train_seqs == ("00", "01", "09") and cfg.stop_at is None


def test_unknown_key(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        config.load(None, {"grdi_h": "3"})


def test_bad_value():
    with pytest.raises(ConfigError, match="cannot parse"):
        config.load(None, {"grid_h": "tall"})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        config.load(tmp_path / "none.cfg")


def test_validate_paths(tmp_path):
    with pytest.raises(FileNotFoundError, match="root"):
        Config(root=str(tmp_path / "absent")).validate()
    with pytest.raises(FileNotFoundError, match="kitti_map"):
        Config(kitti_map=str(tmp_path / "map.tsv")).validate()
    assert Config(root=str(tmp_path)).validate().root == str(tmp_path)


def test_text_round_trip(tmp_path):
    cfg = Config(root=str(tmp_path), grid_h=16, stop_at=0.9, val_seqs=("07", "08"))
    p = tmp_path / "c.cfg"
    p.write_text(cfg.as_text())
    assert config.load(p) == cfg


def test_train_config_defaults():
    cfg = Config()
    assert cfg.train_config("mid").batch == 32
    assert cfg.train_config("lidar").batch == 64
    assert Config(batch=4).train_config("mid").batch == 4


def test_splits():
    cfg = Config()
    assert cfg.sequences("val") == ("07",) and cfg.sequences("test") == ("08",)
    with pytest.raises(ConfigError):
        cfg.sequences("holdout")
