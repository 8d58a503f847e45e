import dataclasses

import pytest

from msvar import config
from msvar.maskmap import BINARY, CARDIAC
from msvar.synth import SynthConfig


def test_round_trip(tmp_path):
    cfg = config.RunConfig().with_seed(11)
    cfg = cfg.replace(synth=SynthConfig(size=48, confusable=True))
    config.dump(cfg, tmp_path / "c.ini")
    assert config.load(tmp_path / "c.ini") == cfg


def test_sections_override_base(tmp_path):
    (tmp_path / "c.ini").write_text(
        "[run]\nseed = 4\n[synth]\nsize = 40\nintensity_ranges = 0.8:0.9, 0.5:0.6, 0.2:0.3, 0:0.1\n"
        "[weights]\ngamma = 0\n[variational]\nrestarts = 2\nmapping = 1; -1\n"
        "[train]\naugment_labeled = false\n")
    cfg = config.load(tmp_path / "c.ini")
    assert cfg.seed == 4
    assert cfg.synth.size == 40
    assert cfg.synth.intensity_ranges[3] == (0.0, 0.1)
    assert cfg.train.weights.gamma == 0.0
    assert cfg.variational.restarts == 2
    assert cfg.variational.mapping == BINARY
    assert cfg.train.augment_labeled is False


def test_with_seed_propagates():
    cfg = config.RunConfig().with_seed(9)
    assert cfg.variational.seed == 9 and cfg.train.seed == 9


@pytest.mark.parametrize("text", [
    "[nowhere]\nx = 1\n",
    "[synth]\nsize = big\n",
    "[synth]\ncolour = red\n",
    "[train]\naugment_labeled = maybe\n",
    "[variational]\nmapping = 1; 7,x\n",
    "[synth]\nbias_amplitude = 2\n",
])
def test_bad_files_raise_config_error(tmp_path, text):
    (tmp_path / "c.ini").write_text(text)
    with pytest.raises(config.ConfigError):
        config.load(tmp_path / "c.ini")


def test_missing_file(tmp_path):
    with pytest.raises(config.ConfigError):
        config.load(tmp_path / "absent.ini")


def test_dump_lists_every_section():
    text = config.dump(config.RunConfig())
    for section in ("run", "synth", "dataset", "weights", "variational", "direct_weights",
                    "train"):
        assert f"[{section}]" in text
    assert f"mapping = {CARDIAC.format()}" in text
    assert dataclasses.asdict(config.RunConfig().dataset) == {"labeled": 10, "unlabeled": 15,
                                                              "test": 10}
