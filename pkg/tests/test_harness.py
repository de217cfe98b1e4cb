import json
from dataclasses import replace

import numpy as np
import pytest

from crl import checkpoint, harness, losses
from crl.errors import ConfigError, ContractError
from crl.network import ModelConfig, OptimState, backward, forward, init_params, sgd_step


def tiny(tmp_path, **loss):
    return harness.config_from_dict({
        "output_dir": str(tmp_path / "runs"),
        "data": {"cardinalities": [2, 3], "ratios": [1, 8], "feature_dim": 6, "n_train": 240, "n_test": 80},
        "model": {"trunk_layer_sizes": [12], "branch_dim": 6},
        "train": {"batch_size": 32, "epochs": 2, "seeds": [0]},
        "loss": {"name": "crl-r", **loss},
    })


def test_defaults_match_desk_scale():
    cfg = harness.ExperimentConfig().validate()
    assert (cfg.data.n_train, cfg.data.n_test, cfg.train.epochs, cfg.train.batch_size) == (20000, 4000, 30, 128)
    assert (cfg.optim.lr, cfg.optim.momentum, cfg.optim.weight_decay) == (0.001, 0.9, 0.0005)
    assert (cfg.loss.name, cfg.loss.mining, cfg.loss.k, cfg.loss.m_apc) == ("crl-r", "instance", 5, 1.0)
    assert cfg.method == "crl-i-r"


@pytest.mark.parametrize("section, values", [
    ("train", {"epochs": 0}), ("train", {"batch_size": 1}), ("loss", {"name": "focal"}),
    ("loss", {"mining": "pixel"}), ("baseline", {"mode": "smote"}), ("baseline", {"ref_attr": 9}),
    ("loss", {"typo": 1}),
])
def test_invalid_configs_rejected(section, values):
    with pytest.raises(ConfigError):
        harness.config_from_dict({section: values})


def test_config_toml_round_trip(tmp_path):
    cfg = tiny(tmp_path)
    path = tmp_path / "exp.toml"
    path.write_text(harness.dump_config(cfg))
    back = harness.load_config(path)
    assert back == cfg and back.hash() == cfg.hash()
    with pytest.raises(FileNotFoundError, match="nope.toml"):
        harness.load_config(tmp_path / "nope.toml")


def test_hash_ignores_seeds_and_output():
    cfg = harness.ExperimentConfig()
    other = replace(cfg, output_dir="elsewhere", train=replace(cfg.train, seeds=[4, 5]))
    assert cfg.hash() == other.hash()
    assert cfg.hash() != replace(cfg, loss=replace(cfg.loss, k=4)).hash()


def test_ce_and_none_share_config_hash():
    cfg = harness.ExperimentConfig()
    a = replace(cfg, loss=replace(cfg.loss, name="ce"))
    b = replace(cfg, loss=replace(cfg.loss, name="none"))
    assert a.hash() == b.hash() and a.method == b.method == "ce"


def test_runs_are_deterministic(tmp_path):
    cfg = tiny(tmp_path)
    (a,) = harness.run_experiment(cfg)
    (b,) = harness.run_experiment(replace(cfg, output_dir=str(tmp_path / "again")))
    assert a.to_json(include_wall_clock=False) == b.to_json(include_wall_clock=False)
    assert a.params_sha256 == b.params_sha256
    assert [e["epoch"] for e in a.epochs] == [0, 1]
    assert all(e["l_bln"] >= e["l_ce"] for e in a.epochs)
    saved = json.loads((harness.run_dir_for(cfg, 0) / "record.json").read_text())
    assert saved["params_sha256"] == a.params_sha256


def test_ce_run_matches_plain_loop(tmp_path):
    cfg = tiny(tmp_path, name="ce")
    (rec,) = harness.run_experiment(cfg)
    train, _ = harness.build_data(cfg.data)

    params = init_params(ModelConfig(feature_dim=6, schema=train.schema, trunk_layer_sizes=(12,), branch_dim=6,
                                     init_seed=0))
    state = OptimState.zeros_like(params, lr=0.001, momentum=0.9, weight_decay=0.0005)
    for epoch in range(2):
        order = np.random.default_rng([0, epoch, 0xBA7C]).permutation(train.n)
        for s in range(0, train.n, 32):
            idx = order[s:s + 32]
            cache = forward(params, train.features[idx])
            ce = losses.cross_entropy(cache, train.labels[idx])
            sgd_step(params, backward(params, cache, ce.grad_logits), state)
    assert checkpoint.params_hash(params) == rec.params_sha256


def test_resume_continues_bit_exactly(tmp_path):
    cfg = tiny(tmp_path)
    (full,) = harness.run_experiment(cfg)
    half = replace(cfg, output_dir=str(tmp_path / "half"), train=replace(cfg.train, epochs=1))
    harness.run_experiment(half)
    ckpt = harness.run_dir_for(half, 0) / "checkpoint.crlc"
    (resumed,) = harness.run_experiment(replace(cfg, output_dir=str(tmp_path / "resumed")), resume=str(ckpt))
    assert resumed.params_sha256 == full.params_sha256
    assert resumed.epochs == full.epochs


def test_resume_rejects_other_model(tmp_path):
    cfg = tiny(tmp_path)
    harness.run_experiment(cfg)
    ckpt = harness.run_dir_for(cfg, 0) / "checkpoint.crlc"
    wider = replace(cfg, output_dir=str(tmp_path / "w"), model=replace(cfg.model, branch_dim=7))
    with pytest.raises(ContractError):
        harness.run_experiment(wider, resume=str(ckpt))


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny(tmp_path)
    harness.run_experiment(cfg)
    params, state, meta = checkpoint.load_checkpoint(harness.run_dir_for(cfg, 0) / "checkpoint.crlc")
    assert meta["epochs_done"] == 2 and state is not None
    assert params.config.branch_dim == 6


@pytest.mark.parametrize("mode", ["oversample", "downsample", "cost-sensitive"])
def test_baseline_runs_complete(tmp_path, mode):
    cfg = tiny(tmp_path, name="ce")
    cfg = replace(cfg, baseline=replace(cfg.baseline, mode=mode), train=replace(cfg.train, epochs=1)).validate()
    (rec,) = harness.run_experiment(cfg)
    assert rec.method == mode
    assert 0 <= rec.report.mean_sensitivity <= 100


def test_mining_dump(tmp_path):
    cfg = tiny(tmp_path)
    cfg = replace(cfg, train=replace(cfg.train, epochs=1, dump_mining=str(tmp_path / "dump")))
    harness.run_experiment(cfg)
    files = sorted((tmp_path / "dump").glob("*.json"))
    assert len(files) == 8  # 240 / 32 -> 8 batches
    payload = json.loads(files[0].read_text())
    assert {"profile", "hard_sets", "n_anchors"} <= set(payload)


def test_compare_shape_and_median(tmp_path):
    ce = tiny(tmp_path, name="ce")
    ce = replace(ce, train=replace(ce.train, epochs=1, seeds=[0, 1, 2]))
    crl = replace(ce, loss=replace(ce.loss, name="crl-r"))
    recs = harness.run_experiment(ce) + harness.run_experiment(crl)
    comp = harness.compare(recs)
    assert len(comp.tsv().strip().splitlines()) == 1 + 2 * 1  # header + n_attr x n_methods
    for j in range(2):
        med = lambda m: np.median([r.report.attributes[j].mean_sensitivity for r in recs if r.method == m])
        assert comp.gain("crl-i-r", j) == pytest.approx(med("crl-i-r") - med("ce"))
    self_comp = harness.compare(recs[:3])
    assert all(r.gain == 0 for r in self_comp.rows)


def test_compare_rejects_mixed_test_sets(tmp_path):
    a = tiny(tmp_path, name="ce")
    a = replace(a, train=replace(a.train, epochs=1))
    b = replace(a, output_dir=str(tmp_path / "b"), loss=replace(a.loss, name="crl-r"),
                data=replace(a.data, seed=5))
    with pytest.raises(ContractError):
        harness.compare(harness.run_experiment(a) + harness.run_experiment(b))
