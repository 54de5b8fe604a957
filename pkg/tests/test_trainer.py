import json
import math

import numpy as np
import pytest
import torch
import yaml

from demark.config import RunConfig, load_config, parse_override
from demark.errors import ConfigError, DemarkError, LoadError, NonFiniteLossError
from demark.losses import LossWeights, recompute_total
from demark.model import NetConfig
from demark.trainer import (DiskDataset, augment, batch_indices, collate, fit, fluctuation, init_state,
                            load_model, read_loss_log, save_checkpoint, set_deterministic, stage_curves,
                            train_step)

NET = {"preset": "small", "width": 4, "input_hw": [64, 64]}


def run_config(dataset, out, **train):
    cfg = RunConfig()
    cfg.net = dict(NET)
    cfg.train.dataset_dir = str(dataset)
    cfg.train.out_dir = str(out)
    cfg.train.batch_size = 2
    cfg.train.checkpoint_every = 2
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg


def params(model):
    return [p.detach().clone() for p in model.parameters()]


@pytest.fixture
def batch(small_dataset):
    ds = DiskDataset(small_dataset)
    return [ds[0], ds[1]]


def test_zero_learning_rate_leaves_parameters(batch):
    cfg = RunConfig().train
    cfg.learning_rate = 0.0
    state = init_state(NetConfig.small((64, 64), width=4), cfg)
    before = params(state.model)
    state, report = train_step(state, batch, LossWeights())
    assert state.step == 1
    total = float(report.total.detach())
    assert math.isfinite(total) and total > 0
    assert all(torch.equal(a, b) for a, b in zip(before, params(state.model)))


def test_train_step_is_deterministic(batch):
    set_deterministic(True)
    cfg = RunConfig().train
    results = []
    for _ in range(2):
        state = init_state(NetConfig.small((64, 64), width=4), cfg)
        for _ in range(2):
            state, report = train_step(state, batch, LossWeights())
        results.append((params(state.model), float(report.total.detach())))
    assert results[0][1] == results[1][1]
    assert all(torch.equal(a, b) for a, b in zip(results[0][0], results[1][0]))


def test_non_finite_loss_names_term(batch):
    state = init_state(NetConfig.small((64, 64), width=4), RunConfig().train)
    b = collate(batch)
    b.original[0, 0, 0, 0] = float("nan")
    before = params(state.model)
    with pytest.raises(NonFiniteLossError, match=r"image\d\.(ssim|l1)"):
        train_step(state, b, LossWeights())
    assert state.step == 0
    assert all(torch.equal(a, b) for a, b in zip(before, params(state.model)))


def test_batch_indices_cover_each_epoch():
    seen = [i for step in range(3) for i in batch_indices(step, 6, 2, seed=4)]
    assert sorted(seen) == list(range(6))
    # batches straddling an epoch boundary still have the right size
    assert len(batch_indices(1, 5, 4, seed=4)) == 4
    assert batch_indices(7, 5, 4, seed=4) == batch_indices(7, 5, 4, seed=4)
    assert batch_indices(0, 6, 6, seed=1) != batch_indices(0, 6, 6, seed=2)


def test_augment_flips_whole_samples(batch):
    b = collate(batch * 4)
    out = augment(b, seed=0, step=3)
    flipped = [not torch.equal(o, c) for o, c in zip(out.corrupted, b.corrupted)]
    assert any(flipped) and not all(flipped)
    for k, f in enumerate(flipped):
        for src, dst in zip(b, out):
            expect = src[k].flip(-1) if f else src[k]
            assert torch.equal(dst[k], expect)
    assert all(torch.equal(x, y) for x, y in zip(out, augment(b, seed=0, step=3)))


def test_max_steps_zero_writes_initial_checkpoint_only(small_dataset, tmp_path):
    path = fit(run_config(small_dataset, tmp_path, max_steps=0))
    assert path.name == "step_0000000.pt"
    assert [p.name for p in (tmp_path / "checkpoints").iterdir()] == ["step_0000000.pt"]
    assert (tmp_path / "loss_log.jsonl").read_text() == ""
    assert not (tmp_path / "best.pt").exists()


def test_fit_writes_checkpoints_and_complete_log(small_dataset, tmp_path):
    cfg = run_config(small_dataset, tmp_path, max_steps=5, val_dir=str(small_dataset))
    path = fit(cfg)
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == ["step_0000000.pt", "step_0000002.pt", "step_0000004.pt", "step_0000005.pt"]
    assert path.name == "step_0000005.pt"
    assert (tmp_path / "best.pt").is_file()
    records = read_loss_log(tmp_path)
    assert [r["step"] for r in records] == list(range(5))
    for r in records:
        assert r["total"] == pytest.approx(recompute_total(r, cfg.loss), rel=1e-6)
        assert r["mask_total"] + r["image_total"] == pytest.approx(r["total"], rel=1e-6)
    saved = yaml.safe_load((tmp_path / "config.yaml").read_text())
    assert saved["train"]["max_steps"] == 5 and saved["net"] == NET
    assert stage_curves(records, cfg.loss).shape == (5, 6)


def test_resume_matches_uninterrupted_run(small_dataset, tmp_path):
    full = run_config(small_dataset, tmp_path / "full", max_steps=6, augment=True)
    fit(full)
    # interrupted one step past its last checkpoint
    part = run_config(small_dataset, tmp_path / "part", max_steps=5, augment=True)
    fit(part)
    part.train.max_steps = 6
    fit(part, resume=tmp_path / "part" / "checkpoints" / "step_0000004.pt")
    a = torch.load(tmp_path / "full" / "checkpoints" / "step_0000006.pt", weights_only=False)
    b = torch.load(tmp_path / "part" / "checkpoints" / "step_0000006.pt", weights_only=False)
    assert all(torch.equal(a["model"][k], b["model"][k]) for k in a["model"])
    log_a = (tmp_path / "full" / "loss_log.jsonl").read_text()
    log_b = (tmp_path / "part" / "loss_log.jsonl").read_text()
    assert log_a == log_b


def test_resume_trims_log_past_checkpoint(small_dataset, tmp_path):
    cfg = run_config(small_dataset, tmp_path, max_steps=3)
    fit(cfg)
    # the step-2 checkpoint predates the last logged step
    fit(cfg, resume=tmp_path / "checkpoints" / "step_0000002.pt")
    assert [r["step"] for r in read_loss_log(tmp_path)] == [0, 1, 2]


def test_worker_count_does_not_change_training(small_dataset, tmp_path):
    fit(run_config(small_dataset, tmp_path / "a", max_steps=3, workers=0))
    fit(run_config(small_dataset, tmp_path / "b", max_steps=3, workers=3))
    assert (tmp_path / "a" / "loss_log.jsonl").read_text() == (tmp_path / "b" / "loss_log.jsonl").read_text()


def test_checkpoint_roundtrip_forward_is_exact(tmp_path):
    state = init_state(NetConfig.small((64, 64), width=4), RunConfig().train)
    state.model.eval()
    probe = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        ref = state.model(probe)
    save_checkpoint(tmp_path / "c.pt", state)
    with torch.no_grad():
        out = load_model(tmp_path / "c.pt")(probe)
    assert torch.equal(ref.mask_fused, out.mask_fused)
    assert torch.equal(ref.image_final, out.image_final)
    assert all(torch.equal(a, b) for a, b in zip(ref.mask_side, out.mask_side))


def test_load_model_errors(tmp_path):
    with pytest.raises(LoadError, match="not found"):
        load_model(tmp_path / "missing.pt")
    (tmp_path / "junk.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(LoadError):
        load_model(tmp_path / "junk.pt")
    torch.save({"format": "other"}, tmp_path / "other.pt")
    with pytest.raises(LoadError, match="not a demark checkpoint"):
        load_model(tmp_path / "other.pt")
    state = init_state(NetConfig.small((64, 64), width=4), RunConfig().train)
    save_checkpoint(tmp_path / "c.pt", state)
    with pytest.raises(LoadError, match="different network"):
        load_model(tmp_path / "c.pt", net_config=NetConfig.small((64, 64), width=8))


def test_write_failure_names_last_good_checkpoint(small_dataset, tmp_path, monkeypatch):
    import demark.trainer as tr

    real = tr.save_checkpoint
    calls = []

    def flaky(path, state, extra=None):
        calls.append(path)
        if len(calls) > 1:
            raise OSError(28, "No space left on device")
        return real(path, state, extra)

    monkeypatch.setattr(tr, "save_checkpoint", flaky)
    with pytest.raises(DemarkError, match="step_0000000.pt"):
        fit(run_config(small_dataset, tmp_path, max_steps=4))


def test_fluctuation_removes_trend():
    t = np.arange(200, dtype=float)
    rng = np.random.default_rng(0)
    trend = 5 * np.exp(-t / 50)
    noisy = trend + 0.1 * rng.standard_normal(200)
    f = fluctuation(np.stack([trend, noisy], 1))
    assert f[0] < 1e-3 and f[1] == pytest.approx(0.01, rel=0.3)
    with pytest.raises(ValueError):
        fluctuation(np.zeros(10))


def test_config_layering(tmp_path, monkeypatch):
    monkeypatch.delenv("DEMARK_DEVICE", raising=False)
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"train": {"max_steps": 7, "batch_size": 4}, "net": NET}))
    cfg = load_config(p, ["train.max_steps=9", "loss.iou=0"])
    assert cfg.train.max_steps == 9 and cfg.train.batch_size == 4
    assert cfg.loss.iou == 0.0 and cfg.train.learning_rate == 1e-3
    monkeypatch.setenv("DEMARK_DEVICE", "meta")
    assert load_config(p).train.device == "meta"
    # the written config reloads to the same run
    out = tmp_path / "again.yaml"
    out.write_text(cfg.to_yaml())
    assert load_config(out).to_dict() == {**cfg.to_dict(), "train": {**cfg.to_dict()["train"], "device": "meta"}}


@pytest.mark.parametrize("bad", ["train.nope=1", "nosection.x=1", "max_steps=3", "train.max_steps"])
def test_unknown_override_rejected(bad):
    with pytest.raises(ConfigError):
        parse_override(bad)


def test_bad_config_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(json.dumps({"train": {"bogus": 1}}))
    with pytest.raises(ConfigError, match="bogus"):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
    with pytest.raises(ConfigError):
        load_config(None, ["train.batch_size=0"])
