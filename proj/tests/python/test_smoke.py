import json
import os
import struct
import subprocess

import numpy as np
import pytest

import modnet


def write_idx(path, images, labels):
    with open(path / "train-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        f.write(images.astype(np.uint8).tobytes())
    with open(path / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


@pytest.fixture
def data_dir(tmp_path):
    root = tmp_path / "data"
    (root / "mnist").mkdir(parents=True)
    labels = np.arange(300) % 10
    images = np.zeros((300, 28, 28), dtype=np.uint8)
    for i, y in enumerate(labels):
        images[i, 2 + 2 * y : 6 + 2 * y, 4:24] = 255
    write_idx(root / "mnist", images, labels)
    return root


def tiny(method):
    cfg = modnet.config_defaults("desk", method)
    cfg["num_seeds"] = 1
    cfg["dataset"]["limit"] = 300
    cfg["mrm"].update(n1=2, n2=2, batch_size=16, eval_every=2)
    cfg["mrm"]["widths"] = [4, 8, 8]
    return cfg


def test_linear_verifier():
    r = modnet.verify_proposition(0.4, 10, 200, 0.1, trials=5, seed=3, mc_samples=2000)
    assert len(r["trials"]) == 5
    assert r["sparse_zero_error"]
    assert 0.0 < r["p_seen"] < 1.0
    assert all(t["sparse_err_seen"] == 0.0 for t in r["trials"])


def test_linear_verifier_rejects_bad_ties():
    with pytest.raises(modnet.ConfigError):
        modnet.verify_proposition(0.4, 10, 200, 0.1, trials=1, ties="coin")


def test_config_roundtrip_and_hash():
    cfg = modnet.config_defaults("paper", "MRM")
    assert cfg["mrm"]["n1"] == 2000
    assert modnet.normalize_config(cfg) == cfg
    reordered = dict(reversed(list(cfg.items())))
    assert modnet.config_hash(reordered) == modnet.config_hash(cfg)
    cfg["num_seeds"] = 9
    assert modnet.config_hash(cfg) == modnet.config_hash(reordered)


def test_invalid_config():
    with pytest.raises(modnet.ConfigError):
        modnet.normalize_config({"method": "nope"})
    with pytest.raises(modnet.ConfigError):
        modnet.normalize_config({"method": "ERM", "num_seeds": 0})


def test_run_and_load_artifacts(tmp_path, data_dir):
    out = tmp_path / "runs"
    report = modnet.run_experiment(tiny("MRM"), out=out, data_dir=data_dir)
    (seed,) = report["seeds"]
    assert 0.0 <= seed["test_accuracy"] <= 1.0
    assert 0.0 < seed["keep_ratio"] <= 1.0

    run = seed["run_dir"]
    kind, mask = modnet.load_mask(os.path.join(run, "mask"))
    assert kind == "binary"
    kept = sum(int(m.sum()) for m in mask.values())
    total = sum(m.size for m in mask.values())
    assert kept / total == pytest.approx(seed["keep_ratio"])

    ck_seed, params = modnet.load_checkpoint(os.path.join(run, "checkpoint"))
    assert ck_seed == 0
    assert all(np.isfinite(v).all() for v in params.values())

    stamp = os.stat(os.path.join(run, "result.json")).st_mtime_ns
    again = modnet.run_experiment(tiny("MRM"), out=out, data_dir=data_dir)
    assert again["seeds"][0]["test_accuracy"] == seed["test_accuracy"]
    assert os.stat(os.path.join(run, "result.json")).st_mtime_ns == stamp

    reports = modnet.collect_reports(out)
    assert [r["config"]["method"] for r in reports] == ["MRM"]
    rows = modnet.parse_table_csv(modnet.render_table(str(out), "csv"))
    assert rows[0]["method"] == "MRM"
    assert rows[0]["test_mean"] == pytest.approx(seed["test_accuracy"], abs=1e-4)


def test_cli_generate_data(tmp_path, data_dir):
    cli = os.environ.get("MODNET_CLI")
    if not cli:
        pytest.skip("MODNET_CLI not set")
    env = dict(os.environ, MODNET_DATA_DIR=str(data_dir))
    config = tmp_path / "config.json"
    config.write_text(json.dumps(tiny("ERM")))
    proc = subprocess.run([cli, "generate-data", "--config", str(config), "--seed", "1"], check=True, env=env,
                          capture_output=True, text=True)
    dataset_dir = proc.stdout.strip().splitlines()[-1]
    envs = modnet.load_datasets(dataset_dir)
    assert [e["provenance"] for e in envs][:2] == ["seen", "seen"]
    first = envs[0]
    assert first["images"].shape[1:] == (3, 32, 32)
    assert first["images"].min() >= 0.0 and first["images"].max() <= 1.0
    assert len(first["class_labels"]) == first["images"].shape[0]
