"""Burn-in then joint supervised + weak-to-strong training (shared-weight teacher)."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ConfigDict

from . import autodiff as ad
from . import losses as L
from . import model as M
from .augment import AugmentConfig, strong_augment, weak_augment
from .autodiff import Tensor
from .data import ConfigError, Dataset, distant_pool, sample_training_batch
from .flow import FarnebackParams, farneback_flow, normalize_for_model
from .metrics import EvalReport, evaluate

log = logging.getLogger(__name__)

MODES = ("full", "nf-only", "df-only", "baseline")


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    __pydantic_config__ = ConfigDict(extra="forbid")

    max_iterations: int = 6000
    burn_in_iterations: int = 500
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 1000
    labeled_fraction: float = 0.1
    mode: str = "full"
    eval_split: str = "val"
    loss: L.LossConfig = field(default_factory=L.LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    flow: FarnebackParams = field(default_factory=FarnebackParams)
    model: M.ModelConfig = field(default_factory=M.ModelConfig)

    def __post_init__(self):
        if not 0 <= self.burn_in_iterations <= self.max_iterations:
            raise ConfigError("need 0 <= burn_in_iterations <= max_iterations")
        if self.batch_labeled < 1 or self.batch_unlabeled < 0:
            raise ConfigError("batch_labeled must be >= 1 and batch_unlabeled >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.labeled_fraction <= 1:
            raise ConfigError("labeled_fraction must be in (0, 1]")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("eval_every and checkpoint_every must be >= 1")

    @property
    def use_flow(self) -> bool:
        return self.mode in ("full", "nf-only")

    @property
    def unlabeled_batch(self) -> int:
        return self.batch_unlabeled if self.mode in ("full", "df-only") else 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


# ------------------------------------------------------------------- flows
class FlowCache:
    """Model-ready (normalized) flow per (split, clip index, frame), computed once."""

    def __init__(self, dataset: Dataset, params: FarnebackParams = FarnebackParams(), enabled: bool = True):
        self.dataset = dataset
        self.params = params
        self.enabled = enabled
        self._store: dict = {}
        s = dataset.config.size
        self._zero = np.zeros((2, s, s), np.float32)

    def get(self, split: str, ci: int, t: int) -> np.ndarray:
        if not self.enabled:
            return self._zero
        key = (split, ci, t)
        if key not in self._store:
            clip = self.dataset.split(split)[ci]
            fl = farneback_flow(clip.frames[t], clip.neighbor_frames[t], self.params)
            self._store[key] = normalize_for_model(fl.to_array())
        return self._store[key]

    def split_view(self, split: str) -> dict:
        clips = self.dataset.split(split)
        return {(ci, t): self.get(split, ci, t) for ci, c in enumerate(clips) for t in range(c.num_frames)}

    def warm(self, split: str, frames: Optional[list] = None) -> None:
        clips = self.dataset.split(split)
        for ci, c in enumerate(clips):
            for t in (frames if frames is not None else range(c.num_frames)):
                self.get(split, ci, t)

    def shared(self, enabled: bool) -> "FlowCache":
        """Same storage, different on/off switch (for ablation modes)."""
        other = FlowCache.__new__(FlowCache)
        other.__dict__.update(self.__dict__)
        other.enabled = enabled
        return other


# ------------------------------------------------------------------- state
@dataclass
class TrainState:
    params: M.Params
    m: dict
    v: dict
    iteration: int
    rng: np.random.Generator
    labeled_clips: list
    acc: dict = field(default_factory=lambda: {"l_sup": 0.0, "l_unsup": 0.0, "l_total": 0.0, "n": 0})


def init_state(cfg: TrainConfig, dataset: Dataset) -> TrainState:
    ss = np.random.SeedSequence(cfg.seed)
    s_sel, s_init, s_train = ss.spawn(3)
    n_train = len(dataset.split("train"))
    n_lab = max(1, math.ceil(cfg.labeled_fraction * n_train))
    labeled = sorted(int(i) for i in np.random.default_rng(s_sel).permutation(n_train)[:n_lab])
    params = M.init_params(cfg.model, seed=int(s_init.generate_state(1)[0]))
    zeros = {k: np.zeros_like(t.data) for k, t in params.items()}
    return TrainState(params=params, m=zeros, v={k: z.copy() for k, z in zeros.items()},
                      iteration=0, rng=np.random.default_rng(s_train), labeled_clips=labeled)


def adam_update(state: TrainState, cfg: TrainConfig) -> None:
    t = state.iteration + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for name, p in state.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        p.data = (p.data - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(np.float32)
        p.grad = None


def save_checkpoint(state: TrainState, cfg: TrainConfig, path) -> None:
    tensors = {}
    for k, p in state.params.items():
        tensors[f"param/{k}"] = p.data
    for k in state.params:
        tensors[f"adam_m/{k}"] = state.m[k]
        tensors[f"adam_v/{k}"] = state.v[k]
    meta = {"iteration": state.iteration, "rng": state.rng.bit_generator.state,
            "labeled_clips": state.labeled_clips, "acc": state.acc, "train_config": cfg.to_dict()}
    M.write_checkpoint(path, tensors, cfg.model, meta)


def load_checkpoint(path, cfg: Optional[TrainConfig] = None) -> TrainState:
    expected = cfg.model.hash() if cfg is not None else None
    tensors, _, meta = M.read_checkpoint(path, expected)
    if "rng" not in meta:
        raise M.CheckpointError(f"{path}: model-only checkpoint, no training state to resume")
    params = {k[6:]: Tensor(v, requires_grad=True, name=k[6:]) for k, v in tensors.items() if k.startswith("param/")}
    m = {k[7:]: v for k, v in tensors.items() if k.startswith("adam_m/")}
    v = {k[7:]: a for k, a in tensors.items() if k.startswith("adam_v/")}
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(params=params, m=m, v=v, iteration=meta["iteration"], rng=rng,
                      labeled_clips=meta["labeled_clips"], acc=dict(meta["acc"]))


# ------------------------------------------------------------------ steps
@dataclass
class StepResult:
    l_sup: float
    l_unsup: float
    l_total: float


class Trainer:
    def __init__(self, cfg: TrainConfig, dataset: Dataset, flows: Optional[FlowCache] = None):
        self.cfg = cfg
        self.dataset = dataset
        self.flows = (flows.shared(cfg.use_flow) if flows is not None
                      else FlowCache(dataset, cfg.flow, enabled=cfg.use_flow))
        self.lambda_reads = 0
        self._iteration = 0
        if self.cfg.unlabeled_batch > 0 and not distant_pool(dataset.split("train")):
            raise ConfigError("batch_unlabeled > 0 but the training split has no distant frames")

    # lambda only exists in the joint phase of the schedule
    def _lam(self) -> float:
        assert self._iteration >= self.cfg.burn_in_iterations, "lambda read during burn-in"
        self.lambda_reads += 1
        return self.cfg.loss.lam

    def _weak_views(self, batch, rng, with_masks: bool):
        imgs, flows, masks = [], [], []
        for j, (ci, t) in enumerate(batch.ids):
            mask = batch.masks[j] if with_masks else None
            (im, fl, mk), _ = weak_augment(batch.images[j], self.flows.get("train", ci, t), mask,
                                           rng, self.cfg.augment)
            imgs.append(im)
            flows.append(fl)
            masks.append(mk)
        return (np.stack(imgs), np.stack(flows), batch.audio,
                np.stack(masks).astype(np.float32) if with_masks else None)

    def _forward(self, params, images, flows, audio):
        return M.forward(Tensor(images), Tensor(flows), Tensor(audio), params)

    def _check_finite(self, value: float, ids) -> None:
        if not np.isfinite(value):
            raise TrainingAborted(f"non-finite loss at iteration {self._iteration}; batch ids {ids}")

    def burn_in_step(self, state: TrainState, labeled) -> StepResult:
        self._iteration = state.iteration
        if state.iteration >= self.cfg.burn_in_iterations:
            raise RuntimeError("burn_in_step called after the burn-in phase")
        imgs, flows, audio, masks = self._weak_views(labeled, state.rng, True)
        p = self._forward(state.params, imgs, flows, audio)
        l_sup = L.supervised_loss(p, masks, self.cfg.loss)
        self._check_finite(l_sup.item(), labeled.ids)
        l_sup.backward()
        adam_update(state, self.cfg)
        state.iteration += 1
        v = l_sup.item()
        return StepResult(v, 0.0, v)

    def joint_gradients(self, state: TrainState, labeled, unlabeled,
                        teacher_params: Optional[M.Params] = None):
        """Build the joint loss and backpropagate it into ``state.params`` grads.

        The teacher is the student's own weights evaluated without recording
        (``teacher_params`` overrides them, used to verify the stop-gradient).
        """
        self._iteration = state.iteration
        rng = state.rng
        imgs, flows, audio, masks = self._weak_views(labeled, rng, True)
        p_l = self._forward(state.params, imgs, flows, audio)
        l_sup = L.supervised_loss(p_l, masks, self.cfg.loss)
        lam = self._lam()
        if len(unlabeled) == 0:
            l_unsup = Tensor(np.zeros((), np.float32))
        else:
            u_imgs, u_flows, u_audio, _ = self._weak_views(unlabeled, rng, False)
            with ad.no_grad():
                p_w = self._forward(teacher_params or state.params, u_imgs, u_flows, u_audio).data
            s_imgs, s_flows, mixed = [], [], []
            b = len(unlabeled)
            for i in range(b):
                j = (i + 1) % b
                (im, fl), pw, _ = strong_augment((u_imgs[i], u_flows[i]), p_w[i], (u_imgs[j], u_flows[j]),
                                                 p_w[j], rng, self.cfg.augment, partner=j)
                s_imgs.append(im)
                s_flows.append(fl)
                mixed.append(pw)
            p_s = self._forward(state.params, np.stack(s_imgs), np.stack(s_flows), u_audio)
            l_unsup = L.unsup_loss(np.stack(mixed), p_s, self.cfg.loss)
        l_total = L.total_loss(l_sup, l_unsup, lam)
        self._check_finite(l_total.item(), list(labeled.ids) + list(unlabeled.ids))
        l_total.backward()
        return StepResult(l_sup.item(), l_unsup.item(), l_total.item())

    def joint_step(self, state: TrainState, labeled, unlabeled) -> StepResult:
        if state.iteration < self.cfg.burn_in_iterations:
            raise RuntimeError("joint_step called during burn-in")
        res = self.joint_gradients(state, labeled, unlabeled)
        adam_update(state, self.cfg)
        state.iteration += 1
        return res

    def step(self, state: TrainState) -> StepResult:
        """One iteration of the schedule: always labeled data, unlabeled only after burn-in."""
        joint = state.iteration >= self.cfg.burn_in_iterations
        b_u = self.cfg.unlabeled_batch if joint else 0
        lab, unl = sample_training_batch(self.dataset, (self.cfg.batch_labeled, b_u), state.rng,
                                         state.labeled_clips)
        if joint:
            return self.joint_step(state, lab, unl)
        return self.burn_in_step(state, lab)

    # -------------------------------------------------------------- eval
    def predictor(self, params: M.Params, split: str):
        def fn(images, flows, audio, ids):
            fl = np.stack([self.flows.get(split, ci, t) for ci, t in ids])
            return M.predict(params, images, fl, audio)
        return fn

    def evaluate(self, params: M.Params, split: str) -> EvalReport:
        return evaluate(self.predictor(params, split), self.dataset.split(split))


def _write_jsonl(path: Path, record: dict) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def train(cfg: TrainConfig, dataset: Dataset, out_dir=None, flows: Optional[FlowCache] = None,
          resume_from=None, stop_at: Optional[int] = None, final_split: Optional[str] = "test"):
    """Run the full schedule; returns (params, log records, final report or None).

    ``stop_at`` halts early (after checkpointing) to exercise resume.
    """
    trainer = Trainer(cfg, dataset, flows)
    state = load_checkpoint(resume_from, cfg) if resume_from is not None else init_state(cfg, dataset)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        if resume_from is None and (out / "log.jsonl").exists():
            (out / "log.jsonl").unlink()
    records = []
    end = cfg.max_iterations if stop_at is None else min(stop_at, cfg.max_iterations)
    t0 = time.perf_counter()
    while state.iteration < end:
        res = trainer.step(state)
        acc = state.acc
        acc["l_sup"] += res.l_sup
        acc["l_unsup"] += res.l_unsup
        acc["l_total"] += res.l_total
        acc["n"] += 1
        it = state.iteration
        if it % cfg.eval_every == 0 or it == cfg.max_iterations:
            rep = trainer.evaluate(state.params, cfg.eval_split)
            n = max(acc["n"], 1)
            rec = {"iteration": it, "l_sup": acc["l_sup"] / n, "l_unsup": acc["l_unsup"] / n,
                   "l_total": acc["l_total"] / n, "miou": rep.miou, "fscore": rep.fscore,
                   "wall_ms": round((time.perf_counter() - t0) * 1000.0, 1)}
            state.acc = {"l_sup": 0.0, "l_unsup": 0.0, "l_total": 0.0, "n": 0}
            records.append(rec)
            log.info("iter %d l_sup %.4f l_unsup %.4f miou %.4f", it, rec["l_sup"], rec["l_unsup"], rep.miou)
            if out is not None:
                _write_jsonl(out / "log.jsonl", rec)
        if out is not None and (it % cfg.checkpoint_every == 0 or it == end):
            save_checkpoint(state, cfg, out / f"ckpt_{it:06d}.bin")
            save_checkpoint(state, cfg, out / "last.bin")
    report = None
    if state.iteration == cfg.max_iterations and final_split is not None:
        report = trainer.evaluate(state.params, final_split)
        if out is not None:
            report.write_json(out / f"report_{final_split}.json")
            M.save_params(out / "model.bin", state.params, cfg.model, {"train_config": cfg.to_dict()})
    return state, records, report
