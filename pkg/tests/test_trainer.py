import json

import numpy as np
import pytest
import torch

from nuigo import trainer
from nuigo.degradation_synthesis import synthesize_dataset
from nuigo.nedrb_network import load_model
from nuigo.shared.errors import InputValidationError, NonFiniteError
from nuigo.shared.schemas import ManifestEntry, ModelConfig, SampleManifest, SynthesisConfig, TrainConfig
from nuigo.trainer import (
    LOG_NAME,
    META_NAME,
    TrainLog,
    epoch_batches,
    init_params,
    read_train_log,
    split_dataset,
    train,
)


def losses_only(rows):
    return [{key: value for key, value in row.items() if key != "seconds"} for row in rows]


def same_parameters(a, b) -> bool:
    first, second = a.state_dict(), b.state_dict()
    return first.keys() == second.keys() and all(torch.equal(first[k], second[k]) for k in first)


@pytest.fixture
def toy_manifest(make_clean_dir, tmp_path):
    return synthesize_dataset(make_clean_dir(count=3, size=16), tmp_path / "data", SynthesisConfig(image_size=16))


@pytest.fixture
def toy_train_config():
    return TrainConfig(image_size=16, batch_size=4, max_steps=6, checkpoint_every=3, device="cpu")


def make_manifest(clean_count: int, thresholds: int = 5) -> SampleManifest:
    entries = [
        ManifestEntry(
            clean_id=f"clean/c{i}.png", degraded_id=f"degraded/c{i}_t{t}.png", threshold=0.1, gamma=0.3, seed=0
        )
        for i in range(clean_count)
        for t in range(thresholds)
    ]
    return SampleManifest(entries=entries, root=".")


def test_init_params_is_seed_deterministic(small_config):
    cfg = TrainConfig(seed=3)
    assert same_parameters(init_params(small_config, cfg), init_params(small_config, cfg))
    assert not same_parameters(init_params(small_config, cfg), init_params(small_config, TrainConfig(seed=4)))


def test_init_params_draws_centred_gaussians(small_config):
    cfg = TrainConfig(init_std=0.02)
    model = init_params(small_config, cfg)
    for name, param in model.named_parameters():
        values = param.detach().double().flatten()
        if name.endswith("bias") or "w_z" in name:
            assert torch.count_nonzero(values) == 0, name
        else:
            stderr = cfg.init_std / np.sqrt(values.numel())
            assert abs(values.mean().item()) < 5 * stderr, name
            assert values.std().item() == pytest.approx(cfg.init_std, rel=0.5)


def test_initial_model_with_zeroed_head_is_identity(small_config):
    model = init_params(small_config)
    with torch.no_grad():
        model.blocks[0].conv7.weight.zero_()
        x = torch.rand(1, 3, 16, 16)
        assert all(torch.equal(out, x) for out in model(x))


def test_split_of_2500_clean_images_gives_10000_and_2500_pairs():
    train_set, test_set = split_dataset(make_manifest(2500), TrainConfig())
    assert len(train_set) == 10000
    assert len(test_set) == 2500


def test_split_keeps_each_clean_image_on_one_side():
    manifest = make_manifest(40)
    train_set, test_set = split_dataset(manifest, TrainConfig(seed=5))
    train_ids, test_ids = set(train_set.clean_ids()), set(test_set.clean_ids())
    assert not train_ids & test_ids
    assert train_ids | test_ids == set(manifest.clean_ids())
    assert len(train_set) + len(test_set) == len(manifest)


def test_split_is_reproducible_per_seed():
    manifest = make_manifest(40)
    first = split_dataset(manifest, TrainConfig(seed=1))[1].clean_ids()
    assert first == split_dataset(manifest, TrainConfig(seed=1))[1].clean_ids()
    assert first != split_dataset(manifest, TrainConfig(seed=2))[1].clean_ids()


def test_split_needs_two_clean_images():
    with pytest.raises(InputValidationError):
        split_dataset(make_manifest(1), TrainConfig())
    with pytest.raises(InputValidationError):
        split_dataset(SampleManifest(entries=[]), TrainConfig())


def test_epoch_batches_cover_every_index_once():
    batches = epoch_batches(10, 4, seed=0, epoch=2)
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(i for b in batches for i in b) == list(range(10))
    assert batches == epoch_batches(10, 4, seed=0, epoch=2)
    assert batches != epoch_batches(10, 4, seed=0, epoch=3)


def test_train_writes_log_checkpoints_and_meta(toy_manifest, toy_train_config, small_config, identity_extractor, tmp_path):
    run = tmp_path / "run"
    result = train(toy_manifest, small_config, toy_train_config, identity_extractor, run)
    assert result.step == 6
    rows = read_train_log(run / LOG_NAME)
    assert [row["step"] for row in rows] == [1, 2, 3, 4, 5, 6]
    assert list(rows[0]) == ["step", "loss_total", "loss_per1", "loss_per2", "loss_per3", "loss_l1", "seconds"]
    assert all(np.isfinite(list(row.values())).all() for row in rows)
    for name in ("step_0000003.pt", "step_0000006.pt", "final.pt"):
        assert (run / "checkpoints" / name).is_file()
    meta = json.loads((run / META_NAME).read_text(encoding="utf-8"))
    assert meta["optimizer"] == {"name": "adam", "learning_rate": 1e-4, "betas": [0.9, 0.999], "eps": 1e-8}


def test_toy_training_reduces_the_loss(make_clean_dir, tmp_path, small_config, identity_extractor):
    manifest = synthesize_dataset(make_clean_dir(count=2, size=16), tmp_path / "data", SynthesisConfig(image_size=16))
    config = TrainConfig(image_size=16, max_steps=200, learning_rate=1e-3, patience=1000, checkpoint_every=1000, device="cpu")
    result = train(manifest, small_config, config, identity_extractor, tmp_path / "run")
    rows = result.log.rows
    assert len(rows) == 200
    assert rows[-1]["loss_total"] < rows[0]["loss_total"]


def test_zero_learning_rate_freezes_parameters(toy_manifest, small_config, identity_extractor, tmp_path):
    config = TrainConfig(image_size=16, batch_size=4, max_steps=5, learning_rate=0.0, device="cpu")
    result = train(toy_manifest, small_config, config, identity_extractor, tmp_path / "run")
    assert same_parameters(result.model, init_params(small_config, config))


def test_resume_replays_the_uninterrupted_run(toy_manifest, small_config, identity_extractor, tmp_path):
    config = TrainConfig(image_size=16, batch_size=4, max_steps=20, checkpoint_every=10, device="cpu")
    full = tmp_path / "full"
    train(toy_manifest, small_config, config, identity_extractor, full)
    reference = losses_only(read_train_log(full / LOG_NAME))

    resumed = tmp_path / "resumed"
    result = train(
        toy_manifest,
        small_config,
        config,
        identity_extractor,
        resumed,
        resume=full / "checkpoints" / "step_0000010.pt",
    )
    assert result.step == 20
    assert losses_only(read_train_log(resumed / LOG_NAME)) == reference[10:]


def test_resume_in_place_truncates_later_rows(toy_manifest, small_config, identity_extractor, tmp_path):
    config = TrainConfig(image_size=16, batch_size=4, max_steps=12, checkpoint_every=6, device="cpu")
    run = tmp_path / "run"
    train(toy_manifest, small_config, config, identity_extractor, run)
    reference = losses_only(read_train_log(run / LOG_NAME))
    train(toy_manifest, small_config, config, identity_extractor, run, resume=run / "checkpoints" / "step_0000006.pt")
    assert losses_only(read_train_log(run / LOG_NAME)) == reference


def test_final_checkpoint_reproduces_outputs(toy_manifest, toy_train_config, small_config, identity_extractor, tmp_path):
    result = train(toy_manifest, small_config, toy_train_config, identity_extractor, tmp_path / "run")
    loaded, payload = load_model(result.checkpoint)
    assert payload["step"] == 6
    x = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        assert all(torch.equal(a, b) for a, b in zip(result.model.cpu()(x), loaded(x)))


def test_non_finite_loss_aborts_with_step_and_batch(monkeypatch, toy_manifest, toy_train_config, small_config, identity_extractor, tmp_path):
    real_total_loss = trainer.total_loss

    def poisoned(outputs, ref, extractor, weights=None):
        report = real_total_loss(outputs, ref, extractor, weights)
        report.total = report.total * float("nan")
        return report

    monkeypatch.setattr("nuigo.trainer.total_loss", poisoned)
    with pytest.raises(NonFiniteError) as info:
        train(toy_manifest, small_config, toy_train_config, identity_extractor, tmp_path / "run")
    assert info.value.step == 1
    assert len(info.value.batch_ids) == 4
    assert all(batch_id.startswith("degraded/") for batch_id in info.value.batch_ids)
    assert "step 1" in str(info.value)


def test_validation_plateau_stops_early(toy_manifest, small_config, identity_extractor, tmp_path):
    config = TrainConfig(image_size=16, batch_size=4, epochs=50, learning_rate=0.0, patience=2, device="cpu")
    result = train(toy_manifest, small_config, config, identity_extractor, tmp_path / "run")
    # 10 training pairs in batches of 4: three steps per epoch; the first epoch sets the best score.
    assert result.stopped_early
    assert result.step == 9
    assert (tmp_path / "run" / "checkpoints" / "best.pt").is_file()


def test_train_log_rejects_out_of_order_and_non_finite_rows(tmp_path):
    log = TrainLog.start(tmp_path / LOG_NAME, stages=1)
    row = {"step": 1, "loss_total": 1.0, "loss_per1": 0.5, "loss_l1": 0.005, "seconds": 0.1}
    log.append(row)
    with pytest.raises(InputValidationError):
        log.append(row)
    with pytest.raises(NonFiniteError):
        log.append({**row, "step": 2, "loss_total": float("inf")})
    assert len(read_train_log(tmp_path / LOG_NAME)) == 1


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1e-4)
    with pytest.raises(ValueError):
        TrainConfig(train_fraction=0.7, test_fraction=0.2)
    with pytest.raises(ValueError):
        TrainConfig(image_size=250)
    assert ModelConfig().stages == 3
