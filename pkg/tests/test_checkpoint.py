import struct
import zlib

import numpy as np
import pytest
import torch

from flatgrasp import checkpoint as ck
from flatgrasp.backbone import BackboneConfig
from flatgrasp.env import EnvConfig, rollout
from flatgrasp.policy import GraspAgent, snapshot
from flatgrasp.ppo import PPOConfig, make_optimizer, ppo_update


def _agent(mode="adaptive", ac_mode="shared", seed=1):
    return GraspAgent(BackboneConfig(mode=mode, seed=seed), ac_mode)


def _trained(mode="adaptive"):
    agent = _agent(mode)
    cfg = PPOConfig(batch_size=16, minibatch_size=8)
    opt = make_optimizer(agent, cfg)
    batch, _ = rollout(EnvConfig(backbone_mode=mode), snapshot(agent), 16, seed=3)
    ppo_update(agent, opt, batch, cfg, seed=0)
    return agent, opt, cfg


def test_layout_and_round_trip(tmp_path):
    agent = _agent()
    path = ck.save(tmp_path / "a.fgsp", agent, {"seed": 1}, {"episode": 64})
    data = path.read_bytes()
    assert data[:4] == b"FGSP"
    version, blob_len = struct.unpack("<II", data[4:12])
    assert version == ck.FORMAT_VERSION
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])
    # arrays follow the blob as float32 in declaration order
    n_floats = sum(t.numel() for t in agent.state_dict().values())
    assert len(data) == 12 + blob_len + 4 * n_floats + 4
    first = next(iter(agent.state_dict().values()))
    head = np.frombuffer(data, "<f4", count=first.numel(), offset=12 + blob_len)
    assert np.array_equal(head, first.numpy().ravel())

    back = ck.load(path)
    assert back.config == {"seed": 1} and back.meta == {"episode": 64}
    rebuilt = ck.build_agent(back)
    for (na, a), (nb, b) in zip(agent.state_dict().items(), rebuilt.state_dict().items()):
        assert na == nb and torch.equal(a, b)


def test_no_temporary_file_left(tmp_path):
    ck.save(tmp_path / "a.fgsp", _agent(), {})
    assert [p.name for p in tmp_path.iterdir()] == ["a.fgsp"]


def test_encoding_is_deterministic():
    assert ck.encode(_agent(), {"x": 1}, {"episode": 3}) == ck.encode(_agent(), {"x": 1}, {"episode": 3})


@pytest.mark.parametrize(
    "corrupt",
    [
        lambda d: b"XXXX" + d[4:],
        lambda d: d[:40] + bytes([d[40] ^ 1]) + d[41:],
        lambda d: d[:-1],
        lambda d: d[:10],
        lambda d: b"",
    ],
    ids=["magic", "bitflip", "short-crc", "tiny", "empty"],
)
def test_corruption_detected(corrupt):
    data = ck.encode(_agent(), {})
    with pytest.raises(ck.CheckpointError):
        ck.decode_bytes(corrupt(data))


def _reseal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def test_unknown_version_rejected():
    data = ck.encode(_agent(), {})
    body = data[:4] + struct.pack("<I", 99) + data[8:-4]
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.decode_bytes(_reseal(body))


def test_truncated_arrays_rejected_even_with_valid_crc():
    data = ck.encode(_agent(), {})
    with pytest.raises(ck.CheckpointError, match="truncated"):
        ck.decode_bytes(_reseal(data[:-4][:-400]))
    with pytest.raises(ck.CheckpointError, match="trailing"):
        ck.decode_bytes(_reseal(data[:-4] + b"\0\0\0\0"))


def test_architecture_mismatch_rejected():
    saved = ck.decode_bytes(ck.encode(_agent(ac_mode="independent"), {}))
    with pytest.raises(ck.CheckpointError, match="architecture"):
        ck.load_into(_agent(ac_mode="shared"), saved)
    saved = ck.decode_bytes(ck.encode(GraspAgent(BackboneConfig(channels=4)), {}))
    with pytest.raises(ck.CheckpointError):
        ck.load_into(_agent(), saved)


def test_misshapen_array_rejected():
    saved = ck.decode_bytes(ck.encode(_agent(), {}))
    name = next(iter(saved.arrays))
    saved.arrays[name] = saved.arrays[name][:1]
    with pytest.raises(ck.CheckpointError, match=name):
        ck.load_into(_agent(), saved)


def test_optimizer_state_round_trip():
    agent, opt, cfg = _trained()
    saved = ck.decode_bytes(ck.encode(agent, {}, {"episode": 16}, opt))
    assert saved.meta["optimizer_step"] > 0
    fresh = _agent(seed=9)
    fresh_opt = make_optimizer(fresh, cfg)
    ck.load_into(fresh, saved, fresh_opt)
    for p, q in zip(
        [p for p in agent.parameters() if p.requires_grad], [q for q in fresh.parameters() if q.requires_grad]
    ):
        sa, sb = opt.state[p], fresh_opt.state[q]
        assert float(sa["step"]) == float(sb["step"])
        assert torch.equal(sa["exp_avg"], sb["exp_avg"])
        assert torch.equal(sa["exp_avg_sq"], sb["exp_avg_sq"])


def test_resumed_update_matches_uninterrupted():
    agent, opt, cfg = _trained()
    saved = ck.decode_bytes(ck.encode(agent, {}, {}, opt))
    clone = ck.build_agent(saved)
    clone_opt = make_optimizer(clone, cfg)
    ck.load_into(clone, saved, clone_opt)
    batch, _ = rollout(EnvConfig(backbone_mode="adaptive"), snapshot(agent), 16, seed=4)
    ppo_update(agent, opt, batch, cfg, seed=1)
    ppo_update(clone, clone_opt, batch, cfg, seed=1)
    for a, b in zip(agent.state_dict().values(), clone.state_dict().values()):
        assert torch.equal(a, b)


def test_fixed_backbone_optimizer_skips_frozen_weights():
    agent, opt, _ = _trained("fixed")
    saved = ck.decode_bytes(ck.encode(agent, {}, {}, opt))
    assert not any(k.startswith("optim.") and ".backbone." in k for k in saved.arrays)
    assert any(k.startswith("optim.exp_avg.") for k in saved.arrays)
