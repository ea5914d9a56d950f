"""Training loop: Adam with global-norm clipping, three strategy presets,
per-epoch validation, checkpointing with bit-exact resume.

Strategies:
  baseline_snr     -- soft-thresholded SNR loss, constant learning rate.
  wlm_finetune     -- SNR loss for the first phase, then the joint
                      (SNR + feature-distance) loss at a lower rate from
                      the configured switch epoch onward.
  joint_scheduled  -- joint loss throughout with a warmup-then-decay
                      schedule: lr_init * min(step/w, sqrt(w/step)).

Determinism contract: given the same seed, dataset, and dtype, training
histories, model files, and checkpoints are bit-identical, and resuming
from a checkpoint continues exactly as an uninterrupted run would.
"""

from __future__ import annotations

import base64
import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from percept.audio import AudioBuffer
from percept.denoiser import DenoiserModel
from percept.encoder import FeatureEncoder
from percept.losses import SnrLossParams, joint_loss, snr_loss
from percept.metrics import MetricError, stoi

STRATEGIES = ("baseline_snr", "wlm_finetune", "joint_scheduled")


class TrainerError(Exception):
    pass


class TrainingDiverged(TrainerError):
    """Loss or gradient went non-finite; carries the failing step context."""

    def __init__(self, epoch, step, components):
        self.epoch = epoch
        self.step = step
        self.components = components
        parts = ", ".join(f"{k}={v:.6g}" for k, v in components.items())
        super().__init__(f"non-finite loss at epoch {epoch}, step {step} ({parts})")


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "baseline_snr"
    epochs: int = 200
    lr_init: float = 1e-3
    lr_finetune: float = 1e-4
    finetune_switch_epoch: int = 100
    clip_l2_max: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 1000
    batch_size: int = 4
    seed: int = 0
    segment_s: Optional[float] = 2.0
    snr_max_db: float = 30.0
    loss_weights: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise TrainerError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_steps < 1:
            raise TrainerError("epochs, batch_size and warmup_steps must be >= 1")
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise TrainerError(f"unknown train config keys {sorted(unknown)}")
        kw = dict(d)
        if "loss_weights" in kw:
            kw["loss_weights"] = tuple(kw["loss_weights"])
        return cls(**kw)


@dataclass
class TrainSample:
    """Mixture plus the target for the ear being trained."""

    sample_id: str
    mixture: AudioBuffer
    target: AudioBuffer

    def __post_init__(self):
        if self.target.n_channels != 1:
            raise TrainerError(f"{self.sample_id}: target must be mono")
        if self.mixture.n_frames != self.target.n_frames:
            raise TrainerError(f"{self.sample_id}: mixture/target length mismatch")
        if self.mixture.sample_rate_hz != self.target.sample_rate_hz:
            raise TrainerError(f"{self.sample_id}: mixture/target rate mismatch")


# --- optimizer pieces ------------------------------------------------------


def adam_init(params) -> dict:
    return {"step": 0,
            "m": {k: np.zeros_like(p.value) for k, p in params.items()},
            "v": {k: np.zeros_like(p.value) for k, p in params.items()}}


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> dict:
    """Standard bias-corrected Adam; updates params and state in place."""
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.value.shape:
            raise TrainerError(f"gradient {name}: shape {g.shape} != param {p.value.shape}")
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value -= (lr / c1) * m / (np.sqrt(v / c2) + eps)
    return state


def clip_global_norm(grads, max_norm=5.0):
    """Scale the whole gradient set so its global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads


def lr_schedule(strategy, epoch, step, cfg: TrainConfig) -> float:
    if strategy == "baseline_snr":
        return cfg.lr_init
    if strategy == "wlm_finetune":
        return cfg.lr_init if epoch < cfg.finetune_switch_epoch else cfg.lr_finetune
    if strategy == "joint_scheduled":
        if step < 1:
            raise TrainerError("schedule is defined for step >= 1")
        w = cfg.warmup_steps
        return cfg.lr_init * min(step / w, math.sqrt(w / step))
    raise TrainerError(f"unknown strategy {strategy!r}")


# --- checkpointing ---------------------------------------------------------


def _pack_arrays(arrs: dict) -> dict:
    out = {}
    for k, a in arrs.items():
        out[k] = {"dtype": str(a.dtype), "shape": list(a.shape),
                  "data": base64.b64encode(np.ascontiguousarray(a).tobytes()).decode("ascii")}
    return out


def _unpack_arrays(d: dict) -> dict:
    out = {}
    for k, spec in d.items():
        a = np.frombuffer(base64.b64decode(spec["data"]), dtype=np.dtype(spec["dtype"]))
        out[k] = a.reshape(spec["shape"]).copy()
    return out


def save_checkpoint(prefix, model, opt_state, epoch, global_step, rng, history,
                    best_val_stoi, best_epoch) -> None:
    """Write <prefix>.sewf (model) and <prefix>.json (everything else)."""
    model.save(str(prefix) + ".sewf")
    side = {"epoch": epoch,
            "global_step": global_step,
            "rng_state": rng.bit_generator.state,
            "adam_step": opt_state["step"],
            "adam_m": _pack_arrays(opt_state["m"]),
            "adam_v": _pack_arrays(opt_state["v"]),
            "history": history,
            "best_val_stoi": best_val_stoi,
            "best_epoch": best_epoch}
    with open(str(prefix) + ".json", "w") as fh:
        json.dump(side, fh)


def load_checkpoint(prefix):
    model = DenoiserModel.load(str(prefix) + ".sewf")
    with open(str(prefix) + ".json") as fh:
        side = json.load(fh)
    opt_state = {"step": side["adam_step"],
                 "m": _unpack_arrays(side["adam_m"]),
                 "v": _unpack_arrays(side["adam_v"])}
    rng = np.random.default_rng(0)
    rng.bit_generator.state = side["rng_state"]
    return (model, opt_state, side["epoch"], side["global_step"], rng,
            side["history"], side["best_val_stoi"], side["best_epoch"])


def history_to_csv(history) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "step", "lr", "train_loss", "val_loss", "val_stoi"])
    for row in history:
        writer.writerow([row["epoch"], row["step"], row["lr"],
                         row["train_loss"], row["val_loss"], row["val_stoi"]])
    return buf.getvalue()


# --- the loop --------------------------------------------------------------


@dataclass
class TrainResult:
    model: DenoiserModel          # final-epoch parameters
    best: Optional[DenoiserModel]  # best-validation-STOI snapshot (None without val)
    history: list = field(default_factory=list)


def _crop(sample: TrainSample, seg_len, rng):
    mix = sample.mixture.samples
    tgt = sample.target.samples[0]
    n = mix.shape[1]
    if seg_len is None or n == seg_len:
        return mix, tgt
    if n < seg_len:
        pad = seg_len - n
        return (np.pad(mix, ((0, 0), (0, pad))), np.pad(tgt, (0, pad)))
    start = int(rng.integers(0, n - seg_len + 1))
    t = tgt[start : start + seg_len]
    if not np.any(t):  # all-silent target crop would break the SNR loss
        start = 0
        t = tgt[:seg_len]
    return mix[:, start : start + seg_len], t


def _loss_for(strategy, epoch, cfg: TrainConfig, encoder, rate):
    """Return f(target, estimate) -> LossResult for this strategy/epoch."""
    params = SnrLossParams(snr_max_db=cfg.snr_max_db)
    use_joint = (strategy == "joint_scheduled"
                 or (strategy == "wlm_finetune" and epoch >= cfg.finetune_switch_epoch))
    if not use_joint:
        return lambda s, e: snr_loss(s, e, params)
    if encoder is None:
        raise TrainerError(f"strategy {strategy!r} needs a feature encoder")
    return lambda s, e: joint_loss(s, e, encoder, params, cfg.loss_weights,
                                   sample_rate_hz=rate)


def _validate(model, val_samples, cfg):
    if not val_samples:
        return float("nan"), float("nan")
    params = SnrLossParams(snr_max_db=cfg.snr_max_db)
    losses, stois = [], []
    for s in val_samples:
        est = model.forward(s.mixture.samples)[0]
        model._shape_cache = None
        if not np.all(np.isfinite(est)):
            # diverged weights; loss-side divergence detection will report it
            losses.append(float("nan"))
            continue
        losses.append(snr_loss(s.target.samples[0], est, params, want_grad=False).value)
        try:
            stois.append(stoi(s.target.samples[0], est, s.mixture.sample_rate_hz))
        except MetricError:
            pass
    val_stoi = float(np.mean(stois)) if stois else float("nan")
    return float(np.mean(losses)), val_stoi


def train(model: DenoiserModel, train_samples, val_samples, cfg: TrainConfig,
          encoder: Optional[FeatureEncoder] = None, out_dir=None,
          resume_from=None, log=None) -> TrainResult:
    """Run the configured strategy over the sample list.

    Per-epoch history rows carry (epoch, step, lr, train_loss, val_loss,
    val_stoi).  With out_dir set, writes checkpoint.{sewf,json}, best.sewf
    and history.csv there.  resume_from names a checkpoint prefix.
    """
    if not train_samples:
        raise TrainerError("empty training set")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    if resume_from is not None:
        model, opt_state, start_epoch, global_step, rng, history, best_stoi, best_epoch = \
            load_checkpoint(resume_from)
        best = None
        if out_dir is not None and best_epoch >= 0:
            best_path = os.path.join(out_dir, "best.sewf")
            if os.path.exists(best_path):
                best = DenoiserModel.load(best_path)
    else:
        opt_state = adam_init(model.parameters())
        start_epoch = 0
        global_step = 0
        rng = np.random.default_rng(cfg.seed)
        history = []
        best_stoi = -float("inf")
        best_epoch = -1
        best = None
    params = model.parameters()

    rate = train_samples[0].mixture.sample_rate_hz
    for s in list(train_samples) + list(val_samples or []):
        if s.mixture.sample_rate_hz != rate:
            raise TrainerError("all samples must share one sample rate")
        if s.mixture.n_channels != model.config.n_mics:
            raise TrainerError(f"{s.sample_id}: {s.mixture.n_channels} channels, "
                               f"model wants {model.config.n_mics}")
    if rate != model.config.sample_rate_hz:
        raise TrainerError(f"samples at {rate} Hz, model at {model.config.sample_rate_hz} Hz")
    seg_len = None if cfg.segment_s is None else int(round(cfg.segment_s * rate))

    n = len(train_samples)
    for epoch in range(start_epoch, cfg.epochs):
        loss_fn = _loss_for(cfg.strategy, epoch, cfg, encoder, rate)
        order = rng.permutation(n)
        epoch_losses = []
        lr = cfg.lr_init
        for b0 in range(0, n, cfg.batch_size):
            batch = [train_samples[i] for i in order[b0 : b0 + cfg.batch_size]]
            model.zero_grad()
            batch_vals = []
            for sample in batch:
                mix, tgt = _crop(sample, seg_len, rng)
                est = model.forward(mix)
                res = loss_fn(tgt, est[0])
                if not math.isfinite(res.value):
                    raise TrainingDiverged(epoch, global_step + 1, res.components)
                model.backward(res.grad_shat[None] / len(batch))
                batch_vals.append(res.value)
            grads = {k: p.grad for k, p in params.items()}
            clip_global_norm(grads, cfg.clip_l2_max)
            global_step += 1
            lr = lr_schedule(cfg.strategy, epoch, global_step, cfg)
            adam_step(params, grads, opt_state, lr,
                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            epoch_losses.append(float(np.mean(batch_vals)))
        val_loss, val_stoi = _validate(model, val_samples, cfg)
        row = {"epoch": epoch, "step": global_step, "lr": lr,
               "train_loss": float(np.mean(epoch_losses)),
               "val_loss": val_loss, "val_stoi": val_stoi}
        history.append(row)
        if log is not None:
            log(f"epoch {epoch}: lr {lr:.3g} train {row['train_loss']:.4f} "
                f"val {val_loss:.4f} stoi {val_stoi:.4f}")
        if math.isfinite(val_stoi) and val_stoi > best_stoi:
            best_stoi = val_stoi
            best_epoch = epoch
            best = model.astype(model.dtype)
            if out_dir is not None:
                best.save(os.path.join(out_dir, "best.sewf"))
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "checkpoint"), model, opt_state,
                            epoch + 1, global_step, rng, history, best_stoi, best_epoch)
            with open(os.path.join(out_dir, "history.csv"), "w") as fh:
                fh.write(history_to_csv(history))
    return TrainResult(model=model, best=best, history=history)
