import struct

import numpy as np
import pytest

from metacsr import checkpoint as ckpt
from metacsr import graph as gr
from metacsr.meta import AdamState, MetaConfig
from metacsr.params import ModelConfig, init_model


def test_header_and_payload_bytes(tmp_path):
    path = tmp_path / "t.ckpt"
    ckpt.write_tensors(path, {"w": np.array([1.0, -2.5])})
    raw = path.read_bytes()
    assert raw.startswith(b"METACSR-CKPT v1\n")
    rest = raw[len(b"METACSR-CKPT v1\n"):]
    header, payload = rest.split(b"\n", 1)
    assert header == b"w 1 2"
    assert payload == struct.pack("<2f", 1.0, -2.5)


def test_scalar_tensor_roundtrip(tmp_path):
    path = tmp_path / "s.ckpt"
    ckpt.write_tensors(path, {"step": np.asarray(7.0)})
    back = ckpt.read_tensors(path)
    assert back["step"].shape == ()
    assert float(back["step"]) == 7.0


def test_tensors_roundtrip_with_f32_precision(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a/b": rng.normal(size=(3, 4)), "c": rng.normal(size=5)}
    path = tmp_path / "r.ckpt"
    ckpt.write_tensors(path, tensors)
    back = ckpt.read_tensors(path)
    for name, value in tensors.items():
        np.testing.assert_array_equal(back[name],
                                      value.astype(np.float32).astype(float))


def test_write_is_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"b": rng.normal(size=3), "a": rng.normal(size=(2, 2))}
    p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
    ckpt.write_tensors(p1, tensors)
    ckpt.write_tensors(p2, dict(reversed(tensors.items())))
    assert p1.read_bytes() == p2.read_bytes()


def test_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOT-A-CKPT\nxxxx")
    with pytest.raises(ValueError, match="not a METACSR-CKPT"):
        ckpt.read_tensors(path)


def test_rejects_truncated_payload(tmp_path):
    path = tmp_path / "trunc.ckpt"
    ckpt.write_tensors(path, {"w": np.ones(4)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(ValueError, match="truncated"):
        ckpt.read_tensors(path)


def test_model_save_load_partitions(tmp_path):
    g = gr.build_interaction_graph([(0, 0), (1, 1)], 2, 3)
    config = ModelConfig(dim=5, diffusion_depth=2)
    params = init_model(g.n_entities, config, np.random.default_rng(3))
    adam = AdamState()
    adam.apply(params.theta2, {k: np.ones_like(v)
                               for k, v in params.theta2.items()},
               MetaConfig())
    path = tmp_path / "model.ckpt"
    ckpt.save_model(path, params, adam_state=adam)
    loaded, state = ckpt.load_model(path)
    assert set(loaded.theta1) == set(params.theta1)
    assert set(loaded.theta2) == set(params.theta2)
    assert loaded.config.dim == 5
    assert loaded.config.diffusion_depth == 2
    for name, value in params.theta1.items():
        np.testing.assert_array_equal(
            loaded.theta1[name], value.astype(np.float32).astype(float))
    assert state is not None
    assert float(state["step"]) == adam.step
    assert any(name.startswith("m/") for name in state)


def test_adam_state_optional(tmp_path):
    g = gr.build_interaction_graph([(0, 0)], 1, 1)
    params = init_model(g.n_entities, ModelConfig(dim=3),
                        np.random.default_rng(0))
    path = tmp_path / "bare.ckpt"
    ckpt.save_model(path, params)
    _, state = ckpt.load_model(path)
    assert state is None
