import pytest

from slac.config import ConfigError, TrainConfig, apply_overrides, dump_yaml, from_dict, load_config, to_dict


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size_model, cfg.batch_size_rl, cfg.gamma, cfg.ema_rate, cfg.tau) == (32, 256, 0.99, 0.005, 8)
    assert cfg.pretrain_iters == 5000 and cfg.eval_episodes == 10 and cfg.grad_steps_per_env_step == 1.0
    assert cfg.latent1_dim == 8 and cfg.latent2_dim == 32 and cfg.hidden == 64
    assert cfg.default_target_entropy == -1.0


def test_yaml_roundtrip(tmp_path):
    cfg = from_dict({"seed": 3, "env": {"name": "lqr", "action_repeat": 4}})
    path = tmp_path / "c.yaml"
    dump_yaml(cfg, path)
    assert load_config(path) == cfg


def test_overrides_nested_and_typed():
    data = apply_overrides({"env": {"name": "lqr"}}, ["seed=7", "env.action_repeat=3", "lr_rl=1e-3",
                                                      "reward_head=false"])
    cfg = from_dict(data)
    assert cfg.seed == 7 and cfg.env.action_repeat == 3 and cfg.env.name == "lqr"
    assert cfg.lr_rl == 1e-3 and cfg.reward_head is False


def test_unknown_keys_named():
    with pytest.raises(ConfigError, match="unknown config key: learning_rate"):
        from_dict({"learning_rate": 1.0})
    with pytest.raises(ConfigError, match="unknown config key: env.gravity"):
        from_dict({"env": {"gravity": 9.8}})
    with pytest.raises(ConfigError, match="key=value"):
        apply_overrides({}, ["seed"])


def test_missing_file_named(tmp_path):
    with pytest.raises(ConfigError, match="nope.yaml"):
        load_config(tmp_path / "nope.yaml")


@pytest.mark.parametrize("bad", [{"tau": 0}, {"lr_rl": 0.0}, {"gamma": 1.5}, {"ema_rate": 0.0},
                                 {"algorithm": "ppo"}, {"variant": "rnn"}, {"batch_size_rl": -1},
                                 {"algorithm": "sac"}])
def test_validation(bad):
    with pytest.raises(ConfigError):
        from_dict(bad).validate()


def test_paper_preset_resolves_sizes():
    cfg = TrainConfig(paper_preset=True).resolved()
    assert (cfg.latent1_dim, cfg.latent2_dim, cfg.hidden, cfg.rl_hidden) == (32, 256, 256, 256)
    assert cfg.pretrain_iters == 50_000
    assert TrainConfig().resolved() == TrainConfig()


def test_to_dict_is_plain():
    d = to_dict(TrainConfig())
    assert d["env"]["name"] == "pendulum" and isinstance(d["env"], dict)


def test_type_errors_named():
    with pytest.raises(ConfigError, match="seed must be an integer"):
        from_dict({"seed": 1.5})
    with pytest.raises(ConfigError, match="lr_rl must be a number"):
        from_dict({"lr_rl": "fast"})
    with pytest.raises(ConfigError, match="env.fully_observed must be true or false"):
        from_dict({"env": {"fully_observed": "yes please"}})
    assert from_dict({"target_entropy": None}).target_entropy is None
    assert from_dict({"total_env_steps": 1e5}).total_env_steps == 100_000
