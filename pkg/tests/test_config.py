import pytest

from dial.config import BLOBS_DATASET, BLOBS_TRAIN, load_config, parse_config
from dial.errors import ConfigError
from dial.trainer import DIGITS_SCHEDULE, OFFICE_SCHEDULE, Stage, TrainConfig, Variant


def test_empty_text_is_the_preset():
    assert parse_config("") == (BLOBS_DATASET, BLOBS_TRAIN)
    assert load_config(None) == (BLOBS_DATASET, BLOBS_TRAIN)


def test_without_preset_uses_library_defaults():
    _, cfg = parse_config("", preset=False)
    assert cfg == TrainConfig()


def test_partial_tables_merge_over_the_preset():
    ds, cfg = parse_config("""
[dataset]
n_per_class = 40
[dataset.shift]
rotation = 0.1
[train]
variant = "GanOnly"
lr = 0.01
""")
    assert ds.n_per_class == 40 and ds.dim == BLOBS_DATASET.dim
    assert ds.shift.rotation == 0.1 and ds.shift.translation == BLOBS_DATASET.shift.translation
    assert cfg.variant is Variant.GAN_ONLY and cfg.lr == 0.01
    assert cfg.disc_hidden == BLOBS_TRAIN.disc_hidden


def test_schedule_by_name_or_rows():
    assert parse_config('[train]\nschedule = "office"')[1].schedule == OFFICE_SCHEDULE
    assert parse_config('[train]\nschedule = "digits"')[1].schedule == DIGITS_SCHEDULE
    cfg = parse_config("[train]\nschedule = [[0, 1, 0, 0], [5, 2, 0.5, 0.5]]")[1]
    assert cfg.schedule == (Stage(0, 1, 0, 0), Stage(5, 2, 0.5, 0.5))


@pytest.mark.parametrize("text", [
    "[train]\nlearning_rate = 1",
    "[dataset]\ncolour = 1",
    "[model]\nx = 1",
    "[train]\nschedule = \"cifar\"",
    "[train]\nschedule = [[0, 1, 0]]",
    "[train]\nlr = -1",
    "[train]\nthreshold = 2.0",
    "[dataset]\nshift = 3",
    "[dataset.shift]\nshear = 1",
    "not toml = = =",
])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.toml")
