import pytest

from ssm3dcd import config
from ssm3dcd.network import ConfigError

TOY = "/root/pkg/configs/toy.yaml"


def test_defaults_echo_published_hyperparameters():
    cfg = config.from_dict({})
    assert cfg.optimizer == {"learning_rate": 1e-4, "beta1": 0.9, "beta2": 0.999}
    assert (cfg.loss.lambda1, cfg.loss.lambda2) == (0.5, 0.5)
    assert cfg.training["epochs"] == 100


def test_yaml_round_trip():
    cfg = config.load(TOY)
    again = config.loads(config.dumps(cfg))
    assert again.to_dict() == cfg.to_dict()
    assert cfg.model.encoder_depths == (2, 2, 2, 2)


def test_seed_flows_into_model():
    cfg = config.from_dict({"seed": 7})
    assert cfg.model.seed == 7
    assert cfg.with_seed(9).model.seed == 9 and cfg.model.seed == 7


@pytest.mark.parametrize("raw, field", [
    ({"optimiser": {}}, "optimiser"),
    ({"optimizer": {"lr": 1.0}}, "optimizer.lr"),
    ({"optimizer": {"learning_rate": 0}}, "optimizer.learning_rate"),
    ({"optimizer": {"beta2": 1.0}}, "optimizer.beta2"),
    ({"training": {"batch_size": 0}}, "training.batch_size"),
    ({"training": {"epochs": "many"}}, "training.epochs"),
    ({"training": {"epochs": True}}, "training.epochs"),
    ({"training": {"precision": "half"}}, "training.precision"),
    ({"training": {"threshold": 1.0}}, "training.threshold"),
    ({"data": {"source": "web"}}, "data.source"),
    ({"data": {"source": "directory"}}, "data.root"),
    ({"data": {"size": 128}}, "data.size"),
    ({"model": {"encoder_depths": [2, 2]}}, "model.encoder_depths"),
    ({"model": {"plane_flags": ["XY"]}}, "model.plane_flags"),
    ({"model": {"colour": 1}}, "model.colour"),
    ({"loss": {"lambda1": -1.0}}, "loss"),
    ({"ablation": {"axes": ["depth"]}}, "ablation.axes"),
    ({"ablation": {"axes": []}}, "ablation.axes"),
    ({"ablation": {"loss_weights": [[1.0]]}}, "ablation.loss_weights[0]"),
])
def test_invalid_fields_are_named(raw, field):
    with pytest.raises(ConfigError) as exc:
        config.from_dict(raw)
    assert exc.value.field == field


def test_unreadable_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        config.load(str(tmp_path / "missing.yaml"))
    bad = tmp_path / "bad.yaml"
    bad.write_text("training: [unclosed")
    with pytest.raises(ConfigError):
        config.load(str(bad))


def test_schema_lists_every_section():
    schema = config.schema_dict()
    assert set(schema) == config.TOP_LEVEL
    assert schema["training"]["max_steps"] == "int/null"
