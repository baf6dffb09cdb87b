import json
from dataclasses import replace

import numpy as np
import pytest

from ufe import autodiff as ad
from ufe import losses as L
from ufe import model as M
from ufe.augment import AugmentConfig, strong_augment
from ufe.data import DatasetConfig, generate_dataset, sample_training_batch
from ufe.train import (FlowCache, TrainConfig, Trainer, TrainingAborted, adam_update, init_state,
                       load_checkpoint, save_checkpoint, train)

TINY_MODEL = M.ModelConfig(image_widths=(8, 8, 12, 16), flow_widths=(4, 4, 8), audio_width=16, decoder_width=8)
NO_AUG = AugmentConfig(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), hflip_prob=0.0)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(DatasetConfig(size=32, train_clips=8, val_clips=2, test_clips=2), seed=3)


@pytest.fixture(scope="module")
def flows(dataset):
    return FlowCache(dataset)


def config(**kw):
    base = dict(max_iterations=12, burn_in_iterations=6, batch_labeled=2, batch_unlabeled=2, eval_every=4,
                checkpoint_every=4, labeled_fraction=0.5, seed=5, model=TINY_MODEL)
    base.update(kw)
    if "burn_in_iterations" not in kw:
        base["burn_in_iterations"] = min(base["burn_in_iterations"], base["max_iterations"])
    return TrainConfig(**base)


def param_bytes(params):
    return b"".join(params[k].data.tobytes() for k in sorted(params))


def strip_wall(records):
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in records]


# ------------------------------------------------------------------ burn-in
def test_overfit_fixed_batch(dataset, flows):
    cfg = config(augment=NO_AUG, model=M.ModelConfig(), max_iterations=1000, burn_in_iterations=1000)
    trainer = Trainer(cfg, dataset, flows)
    state = init_state(cfg, dataset)
    lab, _ = sample_training_batch(dataset, (2, 0), np.random.default_rng(0), state.labeled_clips)
    losses = [trainer.burn_in_step(state, lab).l_sup for _ in range(200)]
    assert losses[-1] * 10 <= losses[0], f"{losses[0]:.4f} -> {losses[-1]:.4f}"


def test_lambda_not_read_during_burn_in(dataset, flows):
    cfg = config()
    trainer = Trainer(cfg, dataset, flows)
    state = init_state(cfg, dataset)
    for _ in range(cfg.burn_in_iterations):
        trainer.step(state)
    assert trainer.lambda_reads == 0
    for _ in range(cfg.max_iterations - cfg.burn_in_iterations):
        trainer.step(state)
    assert trainer.lambda_reads == cfg.max_iterations - cfg.burn_in_iterations
    trainer._iteration = 0
    with pytest.raises(AssertionError):
        trainer._lam()


def test_phase_guards(dataset, flows):
    cfg = config()
    trainer = Trainer(cfg, dataset, flows)
    state = init_state(cfg, dataset)
    lab, unl = sample_training_batch(dataset, (2, 2), state.rng, state.labeled_clips)
    with pytest.raises(RuntimeError):
        trainer.joint_step(state, lab, unl)
    state.iteration = cfg.burn_in_iterations
    with pytest.raises(RuntimeError):
        trainer.burn_in_step(state, lab)


def test_same_seed_same_params_after_ten_steps(dataset, flows):
    def run():
        cfg = config(burn_in_iterations=10)
        trainer, state = Trainer(cfg, dataset, flows), init_state(cfg, dataset)
        for _ in range(10):
            trainer.step(state)
        return param_bytes(state.params)

    assert run() == run()


def test_labeled_clip_selection(dataset):
    state = init_state(config(labeled_fraction=0.25), dataset)
    assert len(state.labeled_clips) == 2
    assert state.labeled_clips == init_state(config(labeled_fraction=0.25), dataset).labeled_clips


# -------------------------------------------------------------------- joint
def test_lambda_zero_equals_supervised_only(dataset, flows):
    cfg = config(loss=L.LossConfig(lam=0.0), burn_in_iterations=0)
    joint_tr, joint = Trainer(cfg, dataset, flows), init_state(cfg, dataset)
    sup_tr, sup = Trainer(cfg, dataset, flows), init_state(cfg, dataset)
    for _ in range(5):
        joint_tr.step(joint)
        # supervised-only update that consumes exactly the same random draws
        rng = sup.rng
        lab, unl = sample_training_batch(dataset, (cfg.batch_labeled, cfg.batch_unlabeled), rng, sup.labeled_clips)
        imgs, fl, audio, masks = sup_tr._weak_views(lab, rng, True)
        L.supervised_loss(M.forward(ad.Tensor(imgs), ad.Tensor(fl), ad.Tensor(audio), sup.params),
                          masks, cfg.loss).backward()
        u_imgs, u_fl, _, _ = sup_tr._weak_views(unl, rng, False)
        for i in range(len(unl)):
            j = (i + 1) % len(unl)
            dummy = np.zeros(u_imgs.shape[-2:], np.float32)
            strong_augment((u_imgs[i], u_fl[i]), dummy, (u_imgs[j], u_fl[j]), dummy, rng, cfg.augment)
        adam_update(sup, cfg)
        sup.iteration += 1
        assert param_bytes(joint.params) == param_bytes(sup.params)


def test_teacher_carries_no_gradient(dataset, flows):
    cfg = config(burn_in_iterations=0)
    trainer = Trainer(cfg, dataset, flows)
    state = init_state(cfg, dataset)
    for _ in range(3):
        trainer.step(state)
    lab, unl = sample_training_batch(dataset, (2, 3), np.random.default_rng(1), state.labeled_clips)
    rng_state = state.rng.bit_generator.state

    trainer.joint_gradients(state, lab, unl)
    shared = {k: p.grad.copy() for k, p in state.params.items()}
    for p in state.params.values():
        p.grad = None

    state.rng.bit_generator.state = rng_state
    detached = {k: ad.Tensor(p.data.copy()) for k, p in state.params.items()}
    trainer.joint_gradients(state, lab, unl, teacher_params=detached)
    for k, p in state.params.items():
        np.testing.assert_array_equal(p.grad, shared[k], err_msg=k)


def test_joint_step_moves_parameters(dataset, flows):
    cfg = config(burn_in_iterations=0)
    trainer, state = Trainer(cfg, dataset, flows), init_state(cfg, dataset)
    before = {k: p.data.copy() for k, p in state.params.items()}
    lab, unl = sample_training_batch(dataset, (2, 2), state.rng, state.labeled_clips)
    res = trainer.joint_step(state, lab, unl)
    assert res.l_unsup > 0 and np.isfinite(res.l_total)
    delta = sum(float(np.abs(p.data - before[k]).sum()) for k, p in state.params.items())
    assert delta > 0


def test_mode_switches(dataset, flows):
    assert config(mode="nf-only").unlabeled_batch == 0 and config(mode="nf-only").use_flow
    assert config(mode="df-only").unlabeled_batch == 2 and not config(mode="df-only").use_flow
    assert config(mode="baseline").unlabeled_batch == 0 and not config(mode="baseline").use_flow
    trainer = Trainer(config(mode="df-only"), dataset, flows)
    assert not trainer.flows.get("train", 0, 2).any()


def test_invalid_mode_rejected():
    with pytest.raises(ValueError):
        config(mode="half")


# -------------------------------------------------------------------- train
def test_pure_supervised_run_logs_no_unsup(dataset, flows):
    _, records, report = train(config(burn_in_iterations=12), dataset, flows=flows)
    assert [r["iteration"] for r in records] == [4, 8, 12]
    assert all(r["l_unsup"] == 0 for r in records)
    assert report is not None and 0 <= report.miou <= 1


def test_log_and_artifacts(dataset, flows, tmp_path):
    cfg = config(max_iterations=10, eval_every=4, checkpoint_every=5)
    train(cfg, dataset, out_dir=tmp_path, flows=flows)
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in lines] == [4, 8, 10]
    assert set(lines[0]) == {"iteration", "l_sup", "l_unsup", "l_total", "miou", "fscore", "wall_ms"}
    assert all(np.isfinite(r["l_total"]) for r in lines)
    for name in ("ckpt_000005.bin", "ckpt_000010.bin", "last.bin", "model.bin", "report_test.json", "config.json"):
        assert (tmp_path / name).exists(), name


def test_run_is_deterministic(dataset, flows):
    a = train(config(), dataset, flows=flows)
    b = train(config(), dataset, flows=FlowCache(dataset))
    assert param_bytes(a[0].params) == param_bytes(b[0].params)
    assert strip_wall(a[1]) == strip_wall(b[1])


def test_resume_matches_uninterrupted(dataset, flows, tmp_path):
    cfg = config()
    full, full_log, _ = train(cfg, dataset, out_dir=tmp_path / "full", flows=flows)
    train(cfg, dataset, out_dir=tmp_path / "part", flows=flows, stop_at=8)
    resumed, res_log, _ = train(cfg, dataset, out_dir=tmp_path / "part", flows=flows,
                                resume_from=tmp_path / "part" / "ckpt_000008.bin")
    assert param_bytes(full.params) == param_bytes(resumed.params)
    for name in ("ckpt_000012.bin", "model.bin"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()
    logged = [json.loads(x) for x in (tmp_path / "part" / "log.jsonl").read_text().splitlines()]
    assert strip_wall(logged) == strip_wall(full_log)


def test_checkpoint_roundtrip(dataset, flows, tmp_path):
    cfg = config(max_iterations=4)
    state, _, _ = train(cfg, dataset, flows=flows)
    save_checkpoint(state, cfg, tmp_path / "a.bin")
    loaded = load_checkpoint(tmp_path / "a.bin", cfg)
    save_checkpoint(loaded, cfg, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert loaded.iteration == 4 and loaded.labeled_clips == state.labeled_clips
    img = dataset.split("val")[0].frames[:2]
    fl, au = np.zeros((2, 2, 32, 32), np.float32), dataset.split("val")[0].audio[:2]
    assert M.predict(state.params, img, fl, au).tobytes() == M.predict(loaded.params, img, fl, au).tobytes()


def test_corrupt_checkpoint_refused(dataset, flows, tmp_path):
    cfg = config(max_iterations=2)
    state, _, _ = train(cfg, dataset, flows=flows)
    path = tmp_path / "c.bin"
    save_checkpoint(state, cfg, path)
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0x10
    path.write_bytes(bytes(raw))
    with pytest.raises(M.CheckpointError):
        load_checkpoint(path, cfg)
    with pytest.raises(M.CheckpointError):
        save_checkpoint(state, cfg, path)
        load_checkpoint(path, replace(cfg, model=replace(TINY_MODEL, decoder_width=4)))


def test_non_finite_loss_aborts(dataset, flows, monkeypatch):
    monkeypatch.setattr(L, "supervised_loss", lambda p, y, cfg: ad.Tensor(np.array(np.nan, np.float32)))
    with pytest.raises(TrainingAborted, match="non-finite"):
        train(config(), dataset, flows=flows)
