import json

import numpy as np
import pytest
import yaml

from slac import checkpoint
from slac.cli import EXIT_FAIL, EXIT_INPUT, EXIT_OK, main

TINY = ["total_env_steps=60", "pretrain_random_steps=30", "pretrain_iters=20", "batch_size_model=4",
        "batch_size_rl=8", "hidden=16", "rl_hidden=16", "feature_dim=8", "latent1_dim=2", "latent2_dim=4", "tau=3",
        "eval_every=0", "eval_episodes=1", "log_every=5", "env.name=lqr", "env.fully_observed=false",
        "env.max_episode_steps=15", "env.action_repeat=1"]


def overrides(extra=()):
    out = []
    for item in [*TINY, *extra]:
        out += ["--override", item]
    return out


def train(tmp_path, name, extra=()):
    out = tmp_path / name
    code = main(["train", *overrides(extra), "--out", str(out)])
    return code, out


def test_train_writes_snapshot_metrics_checkpoint(tmp_path, capsys):
    code, out = train(tmp_path, "run", ["seed=7"])
    assert code == EXIT_OK
    snap = yaml.safe_load((out / "config.yaml").read_text())
    assert snap["seed"] == 7 and snap["env"]["name"] == "lqr"
    assert (out / "metrics.jsonl").is_file() and (out / "checkpoint.ckpt").is_file()
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["env_steps"] == 60


def test_two_runs_identical_metrics(tmp_path):
    _, a = train(tmp_path, "a")
    _, b = train(tmp_path, "b")
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SLAC_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["train", *overrides()]) == EXIT_OK
    assert (tmp_path / "root" / "slac-lqr-seed0" / "config.yaml").is_file()


def test_missing_config_file(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == EXIT_INPUT
    assert "missing.yaml" in capsys.readouterr().err


def test_unknown_key_named(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 1\nbogus_key: 3\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    assert "bogus_key" in capsys.readouterr().err


def test_resume_continues(tmp_path, capsys):
    _, full = train(tmp_path, "full")
    code = main(["train", *overrides(), "--out", str(tmp_path / "part"), "--max-iterations", "10"])
    assert code == EXIT_OK
    assert main(["train", "--resume", str(tmp_path / "part" / "checkpoint.ckpt")]) == EXIT_OK
    assert (tmp_path / "part" / "metrics.jsonl").read_text() == (full / "metrics.jsonl").read_text()


def test_verify_pass_fail_and_unknown(capsys):
    assert main(["verify", "kl_identity", "--arg", "inits=3", "--arg", "n_samples=2000"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "[PASS]" in out and "suite kl_identity: PASS" in out
    assert main(["verify", "elbo_bound", "--arg", "corrupt=true", "--arg", "train_steps=50",
                 "--arg", "n_eval=200"]) == EXIT_FAIL
    assert "[FAIL]" in capsys.readouterr().out
    assert main(["verify", "nonsense"]) == EXIT_INPUT
    assert "gradcheck" in capsys.readouterr().err
    assert main(["verify", "replay", "--arg", "bogus=1"]) == EXIT_INPUT


def test_verify_gradcheck_subset(capsys):
    assert main(["verify", "gradcheck", "--arg", "seeds=2"]) == EXIT_OK


def test_rollout_and_eval(tmp_path, capsys):
    _, out = train(tmp_path, "run")
    ckpt = out / "checkpoint.ckpt"
    capsys.readouterr()
    dump = tmp_path / "roll.jsonl"
    assert main(["rollout", str(ckpt), "--out", str(dump), "--windows", "4"]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)["reconstruction_mse"]
    # the posterior sees the observations; the unconditional prior does not
    assert report["posterior"] < report["prior"]
    recs = [json.loads(x) for x in dump.read_text().splitlines()]
    assert {r["mode"] for r in recs} == {"posterior", "conditional_prior", "prior"}
    assert len(recs) == 3 * 4 * 4
    assert main(["eval", str(ckpt), "--episodes", "2"]) == EXIT_OK
    stats = json.loads(capsys.readouterr().out)
    assert len(stats["returns"]) == 2


def test_prior_rollout_invariant_to_observations(tmp_path, capsys):
    _, out = train(tmp_path, "run")
    ckpt = out / "checkpoint.ckpt"
    arrays = checkpoint.load(ckpt)
    a = tmp_path / "a.jsonl"
    b = tmp_path / "b.jsonl"
    main(["rollout", str(ckpt), "--mode", "prior", "--out", str(a), "--windows", "3"])
    # rewrite every stored observation and repeat: prior predictions must not move
    for k in list(arrays):
        if k.endswith("/observations"):
            arrays[k] = arrays[k][::-1] + 5.0
    checkpoint.save(ckpt, arrays)
    main(["rollout", str(ckpt), "--mode", "prior", "--out", str(b), "--windows", "3"])
    pa = [json.loads(x)["predicted_mean"] for x in a.read_text().splitlines()]
    pb = [json.loads(x)["predicted_mean"] for x in b.read_text().splitlines()]
    assert np.array_equal(pa, pb)


def test_bad_checkpoint_rejected(tmp_path, capsys):
    _, out = train(tmp_path, "run")
    ckpt = out / "checkpoint.ckpt"
    raw = bytearray(ckpt.read_bytes())
    raw[:8] = b"BADMAGIC"
    ckpt.write_bytes(bytes(raw))
    assert main(["rollout", str(ckpt), "--out", str(tmp_path / "r.jsonl")]) == EXIT_INPUT
    assert "magic" in capsys.readouterr().err
    raw[:8] = b"SLACCKPT"
    raw[8:12] = (99).to_bytes(4, "little")
    ckpt.write_bytes(bytes(raw))
    assert main(["eval", str(ckpt)]) == EXIT_INPUT
    assert "version" in capsys.readouterr().err
    assert main(["eval", str(tmp_path / "none.ckpt")]) == EXIT_INPUT


def test_sac_checkpoint_has_no_rollout(tmp_path, capsys):
    code, out = train(tmp_path, "sac", ["algorithm=sac", "critic_input=state", "actor_input=state",
                                        "env.fully_observed=true"])
    assert code == EXIT_OK
    assert main(["rollout", str(out / "checkpoint.ckpt"), "--out", str(tmp_path / "r.jsonl")]) == EXIT_INPUT
