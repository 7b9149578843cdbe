import pytest
import torch
import torch.nn as nn

from latent_ofer.checkpoint import (
    MAGIC,
    load_checkpoint,
    pack_optimizer,
    prefixed,
    save_checkpoint,
    unpack_optimizer,
    unprefixed,
)
from latent_ofer.errors import DataError, ModelError


def test_round_trip(tmp_path):
    tensors = {"a": torch.arange(6.0).reshape(2, 3), "b": torch.tensor([1.5])}
    path = str(tmp_path / "nested" / "x.ckpt")
    save_checkpoint(path, tensors, kind="svdd", meta={"radius": 0.5, "history": [1.0, 0.5]})

    with open(path, "rb") as f:
        assert f.read(4) == MAGIC
    loaded, meta = load_checkpoint(path, kind="svdd")
    assert meta == {"radius": 0.5, "history": [1.0, 0.5]}
    assert list(loaded) == ["a", "b"]
    for name, tensor in tensors.items():
        torch.testing.assert_close(loaded[name], tensor)


def test_float64_stored_as_float32(tmp_path):
    path = str(tmp_path / "x.ckpt")
    save_checkpoint(path, {"w": torch.tensor([0.1], dtype=torch.float64)}, kind="fer")
    loaded, meta = load_checkpoint(path)
    assert loaded["w"].dtype == torch.float32
    assert meta == {}


def test_missing_and_wrong_kind(tmp_path):
    with pytest.raises(ModelError) as excinfo:
        load_checkpoint(str(tmp_path / "absent.ckpt"), kind="reconstructor")
    assert excinfo.value.stage == "reconstructor"

    path = str(tmp_path / "x.ckpt")
    save_checkpoint(path, {}, kind="fer")
    with pytest.raises(ModelError):
        load_checkpoint(path, kind="svdd")


def test_corrupt_file(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"PK\x03\x04 not ours")
    with pytest.raises(DataError) as excinfo:
        load_checkpoint(str(path))
    assert excinfo.value.code == "bad-checkpoint"

    path.write_bytes(MAGIC + (99).to_bytes(4, "little") + (0).to_bytes(4, "little"))
    with pytest.raises(DataError):
        load_checkpoint(str(path))


def test_prefix_helpers():
    state = {"w": torch.ones(1), "b": torch.zeros(1)}
    packed = {**prefixed(state, "model"), **prefixed({"w": torch.ones(2)}, "disc")}
    assert set(packed) == {"model.w", "model.b", "disc.w"}
    assert set(unprefixed(packed, "model")) == {"w", "b"}
    assert unprefixed(packed, "mod") == {}


def test_optimizer_state_survives(tmp_path):
    torch.manual_seed(0)
    net = nn.Linear(3, 2)
    opt = torch.optim.Adam(net.parameters(), lr=1e-2, betas=(0.5, 0.999))
    for _ in range(3):
        opt.zero_grad()
        net(torch.randn(4, 3)).pow(2).sum().backward()
        opt.step()

    opt_tensors, groups = pack_optimizer(opt, "opt")
    path = str(tmp_path / "opt.ckpt")
    save_checkpoint(path, {**prefixed(net.state_dict(), "model"), **opt_tensors}, kind="test", meta={"groups": groups})

    loaded, meta = load_checkpoint(path)
    other = nn.Linear(3, 2)
    other.load_state_dict(unprefixed(loaded, "model"))
    other_opt = torch.optim.Adam(other.parameters(), lr=1.0)
    unpack_optimizer(other_opt, loaded, meta["groups"], "opt")
    assert other_opt.param_groups[0]["lr"] == pytest.approx(1e-2)

    x = torch.randn(4, 3)
    for model, optimizer in ((net, opt), (other, other_opt)):
        optimizer.zero_grad()
        model(x).pow(2).sum().backward()
        optimizer.step()
    for a, b in zip(net.parameters(), other.parameters()):
        torch.testing.assert_close(a, b)
