import pytest
import torch

from nuigo.nedrb_network import NuIGo, load_model, save_model
from nuigo.shared.checkpoint import FORMAT_VERSION, MAGIC, read_checkpoint, write_checkpoint
from nuigo.shared.errors import CheckpointError
from nuigo.shared.schemas import ModelConfig


def test_round_trip_preserves_outputs_exactly(small_config, tmp_path):
    model = NuIGo(small_config)
    path = save_model(tmp_path / "model.pt", model, step=42, extra={"note": "x"})
    loaded, payload = load_model(path)
    assert payload["magic"] == MAGIC
    assert payload["format_version"] == FORMAT_VERSION
    assert payload["step"] == 42
    assert payload["extra"]["note"] == "x"
    assert payload["architecture"]["channels"] == 8
    x = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        assert all(torch.equal(a, b) for a, b in zip(model(x), loaded(x)))


def test_header_records_shapes(small_config, tmp_path):
    model = NuIGo(small_config)
    payload = read_checkpoint(save_model(tmp_path / "model.pt", model))
    assert payload["shapes"]["blocks.0.conv7.weight"] == [3, 16, 1, 1]


def test_architecture_mismatch_names_first_tensor(small_config, tmp_path):
    path = save_model(tmp_path / "model.pt", NuIGo(small_config))
    wider = small_config.copy(update={"channels": 16})
    with pytest.raises(CheckpointError, match="blocks.0.conv1.weight"):
        load_model(path, expected=wider)


def test_untied_expectation_reports_missing_blocks(small_config, tmp_path):
    path = save_model(tmp_path / "model.pt", NuIGo(small_config))
    with pytest.raises(CheckpointError, match="missing tensor 'blocks.1"):
        load_model(path, expected=small_config.copy(update={"weight_sharing": False}))


def test_bad_magic_and_version_are_rejected(tmp_path):
    torch.save({"magic": "OTHER"}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "other.pt")
    torch.save({"magic": MAGIC, "format_version": FORMAT_VERSION + 1}, tmp_path / "future.pt")
    with pytest.raises(CheckpointError, match="format version"):
        read_checkpoint(tmp_path / "future.pt")


def test_missing_or_garbled_file(tmp_path):
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "absent.pt")
    (tmp_path / "garbled.pt").write_bytes(b"\x00\x01junk")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "garbled.pt")


def test_failed_write_keeps_previous_checkpoint(monkeypatch, small_config, tmp_path):
    path = save_model(tmp_path / "model.pt", NuIGo(small_config), step=1)
    before = path.read_bytes()

    def disk_full(*args, **kwargs):
        raise RuntimeError("No space left on device")

    monkeypatch.setattr("nuigo.shared.checkpoint.torch.save", disk_full)
    with pytest.raises(CheckpointError, match="No space left"):
        write_checkpoint(
            path,
            architecture=ModelConfig().dict(),
            parameters={"w": torch.zeros(1)},
            step=2,
        )
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["model.pt"]
