import json

import numpy as np
import pytest

from powerprof import artifacts
from powerprof.errors import DataError
from powerprof.neural import Network


def saved(tmp_path, payload=None):
    payload = payload or {"w": np.random.default_rng(0).normal(size=5), "n": 3, "tag": "x"}
    return artifacts.save_artifact(tmp_path / "a.json", "thing", payload)


def test_save_load_save_identical(tmp_path):
    p = saved(tmp_path)
    first = p.read_bytes()
    payload = artifacts.load_artifact(p, "thing")
    artifacts.save_artifact(p, "thing", payload)
    assert p.read_bytes() == first


def test_floats_exact(tmp_path):
    w = np.random.default_rng(1).normal(size=50) * 1e-7
    p = saved(tmp_path, {"w": w})
    assert np.array(artifacts.load_artifact(p)["w"]).tobytes() == w.tobytes()


def test_network_round_trip_via_artifact(tmp_path):
    rng = np.random.default_rng(2)
    net = Network.mlp([4, 5, 2], rng, batchnorm=True)
    x = rng.normal(size=(6, 4))
    p = saved(tmp_path, net.to_dict())
    back = Network.from_dict(artifacts.load_artifact(p))
    assert back.forward(x).tobytes() == net.forward(x).tobytes()


def test_truncated_file(tmp_path):
    p = saved(tmp_path)
    p.write_bytes(p.read_bytes()[:-40])
    with pytest.raises(DataError, match="corrupt artifact"):
        artifacts.load_artifact(p)


def test_tampered_payload_reports_digest(tmp_path):
    p = saved(tmp_path)
    env = json.loads(p.read_text())
    env["payload"]["n"] = 4
    p.write_text(json.dumps(env))
    with pytest.raises(DataError, match="corrupt artifact: digest mismatch"):
        artifacts.load_artifact(p)


def test_unsupported_version(tmp_path):
    p = saved(tmp_path)
    env = json.loads(p.read_text())
    env["version"] = 99
    p.write_text(json.dumps(env))
    with pytest.raises(DataError, match="unsupported version 99"):
        artifacts.load_artifact(p)


def test_wrong_kind(tmp_path):
    p = saved(tmp_path)
    with pytest.raises(DataError, match="expected artifact kind"):
        artifacts.load_artifact(p, "other")


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="not found"):
        artifacts.load_artifact(tmp_path / "none.json")
