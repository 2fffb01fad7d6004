import json

import pytest

from ifrvis.config import DEFAULTS, ConfigError, load_config, parse_config
from ifrvis.data import GeneratorSpec
from ifrvis.losses import LossConfig
from ifrvis.model import ModelConfig
from ifrvis.trainer import TrainConfig


def test_empty_document_gives_defaults():
    cfg = parse_config({})
    assert cfg.model == ModelConfig()
    assert cfg.loss == LossConfig()
    assert cfg.train == TrainConfig()
    assert cfg.section("ablate") == DEFAULTS["ablate"]
    assert cfg.output_stride == 4


def test_typed_sections():
    cfg = parse_config(
        {
            "model": {"queries": 6, "encoder_channels": [4, 8], "recurrent": False},
            "loss": {"lambda_e": 0.3},
            "data": {"generator": {"height": 32, "width": 32, "size_range": [3, 5]}},
            "eval": {"resolution": "input"},
        }
    )
    assert cfg.model.queries == 6 and cfg.model.encoder_channels == (4, 8) and not cfg.model.recurrent
    assert cfg.loss.lambda_e == 0.3
    assert cfg.generator == GeneratorSpec(height=32, width=32, size_range=(3.0, 5.0))
    assert cfg.output_stride == 1


@pytest.mark.parametrize(
    "doc",
    [
        {"modle": {}},
        {"model": {"queries": 0}},
        {"model": {"dim": "big"}},
        {"model": {"unknown": 1}},
        {"loss": {"alpha": 2}},
        {"train": {"encoder_lr_mult": 0}},
        {"infer": {"clip_len": 3, "overlap": 3}},
        {"infer": {"mode": "fast"}},
        {"data": {"generator": {"shapes": ["hexagon"]}}},
        {"data": {"generator": {"height": 30}}},
        {"eval": {"resolution": "half"}},
        {"model": {"dim": 10, "heads": 4}},
        [],
    ],
)
def test_rejected(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_error_names_location():
    with pytest.raises(ConfigError, match="model/queries"):
        parse_config({"model": {"queries": -1}})


def test_overrides_revalidate():
    cfg = parse_config({"loss": {"lambda_e": 0.1}})
    assert cfg.with_overrides(loss={"lambda_e": 0.5}).loss.lambda_e == 0.5
    assert cfg.loss.lambda_e == 0.1
    with pytest.raises(ConfigError):
        cfg.with_overrides(loss={"lambda_e": -1})


def test_load(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train": {"steps": 7}}))
    assert load_config(p).train.steps == 7
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_seed_overrides_every_section():
    cfg = parse_config({}).with_overrides(model={"seed": 3}, train={"seed": 3}, data={"seed": 3})
    assert cfg.model.seed == cfg.train.seed == cfg.section("data")["seed"] == 3
