"""Training loop: Adam + warmup/inverse-sqrt schedule, SpecAugment-style
masking, frame-budget batching, tail trimming, binary checkpoints, and
the staged pretrain -> fine-tune pipeline.

All randomness is keyed by (seed, purpose, step, example) counters, so a
resumed run replays the identical trajectory and two runs with equal
inputs produce bit-identical checkpoints in single-threaded mode.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as tz
from .data import (
    EOS,
    SOS,
    ManifestRecord,
    Vocabulary,
    build_vocab,
    read_features,
    read_manifest,
    resolve_features,
)
from .losses import JointLossSpec, ctc_loss, joint_loss, label_smoothed_ce
from .model import (
    ModelConfig,
    ModelParams,
    VOCAB_DEPENDENT,
    ctc_head,
    decode_teacher_forced,
    encode,
    init_params,
)

TASKS = ("asr", "summarization", "concepts")

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.98
ADAM_EPS = 1e-9


@dataclass(frozen=True)
class SpecAugmentConfig:
    n_freq_masks: int = 2
    freq_width: int = 8
    n_time_masks: int = 2
    time_width: int = 40


@dataclass(frozen=True)
class TrainConfig:
    task: str
    max_steps: int
    peak_lr: float = 0.002
    warmup_steps: int = 25000
    batch_frame_budget: int = 20000
    max_input_frames: int = 10000  # 100 s at 10 ms per frame
    joint: JointLossSpec = JointLossSpec()
    specaugment: SpecAugmentConfig = SpecAugmentConfig()
    grad_clip: float = 5.0
    label_smoothing_uses_joint: bool = True
    log_every: int = 20
    eval_every: int = 0  # 0: validate only at the end
    eval_beam: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @property
    def ctc_weight(self) -> float:
        """CTC joins only the ASR stage; abstractive targets break its
        monotonic-alignment assumption."""
        return self.joint.ctc_weight if self.task == "asr" else 0.0

    def to_json(self) -> dict:
        d = self.__dict__.copy()
        d["joint"] = self.joint.__dict__.copy()
        d["specaugment"] = self.specaugment.__dict__.copy()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["joint"] = JointLossSpec(**d["joint"])
        d["specaugment"] = SpecAugmentConfig(**d["specaugment"])
        return cls(**d)


def lr_at(step: int, peak_lr: float, warmup: int) -> float:
    """Linear warmup to peak at step == warmup, inverse-sqrt decay after."""
    if step < 1:
        raise ValueError("step counts from 1")
    return peak_lr * min(step / warmup, math.sqrt(warmup / step))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> bool:
    """One bias-corrected Adam update; returns False (skipping the step,
    moments untouched) when any gradient is non-finite."""
    for g in grads.values():
        if not np.isfinite(g).all():
            return False
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)
    return True


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# augmentation and batching
# ---------------------------------------------------------------------------


def spec_augment(
    features: np.ndarray, cfg: SpecAugmentConfig, rng: np.random.Generator
) -> np.ndarray:
    """Mask random time spans and frequency bands with the utterance mean."""
    t, f = features.shape
    if cfg.freq_width > f or cfg.time_width > t:
        raise ValueError(
            f"mask widths {cfg.freq_width}/{cfg.time_width} exceed shape {features.shape}"
        )
    if cfg.n_freq_masks == 0 and cfg.n_time_masks == 0:
        return features
    out = features.copy()
    fill = features.mean()
    for _ in range(cfg.n_freq_masks):
        start = int(rng.integers(0, f - cfg.freq_width + 1))
        out[:, start : start + cfg.freq_width] = fill
    for _ in range(cfg.n_time_masks):
        start = int(rng.integers(0, t - cfg.time_width + 1))
        out[start : start + cfg.time_width, :] = fill
    return out


def batch_by_frames(lengths: list[int], budget: int) -> list[list[int]]:
    """Greedy length-sorted bucketing into batches of padded size <= budget.

    Returns index lists; every index appears exactly once. The padded size
    of a batch is len(batch) * max(lengths in batch).
    """
    for i, n in enumerate(lengths):
        if n > budget:
            raise ValueError(f"record {i} has {n} frames, over the {budget} budget")
    order = sorted(range(len(lengths)), key=lambda i: (-lengths[i], i))
    batches: list[list[int]] = []
    current: list[int] = []
    current_max = 0
    for i in order:
        new_max = max(current_max, lengths[i])
        if current and new_max * (len(current) + 1) > budget:
            batches.append(current)
            current, current_max = [], 0
            new_max = lengths[i]
        current.append(i)
        current_max = new_max
    if current:
        batches.append(current)
    return batches


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    version: int
    config: ModelConfig
    step: int
    params: dict[str, np.ndarray]
    moments: dict[str, np.ndarray]
    rng_state: bytes
    meta: dict


def _write_table(f, table: dict[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        blob = name.encode("utf-8")
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def _read_table(buf: memoryview, off: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = bytes(buf[off : off + nlen]).decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        table[name] = arr.copy()
    return table, off


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = json.dumps(
        {"model": ckpt.config.to_json(), "step": ckpt.step, "meta": ckpt.meta},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", ckpt.version))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        _write_table(f, ckpt.params)
        _write_table(f, ckpt.moments)
        f.write(struct.pack("<I", len(ckpt.rng_state)))
        f.write(ckpt.rng_state)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (jlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12 : 12 + jlen].decode("utf-8"))
    buf = memoryview(blob)
    params, off = _read_table(buf, 12 + jlen)
    moments, off = _read_table(buf, off)
    (rlen,) = struct.unpack_from("<I", buf, off)
    rng_state = bytes(buf[off + 4 : off + 4 + rlen])
    return Checkpoint(
        version=version,
        config=ModelConfig.from_json(header["model"]),
        step=header["step"],
        params=params,
        moments=moments,
        rng_state=rng_state,
        meta=header["meta"],
    )


# ---------------------------------------------------------------------------
# staged training
# ---------------------------------------------------------------------------


def _derived_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass
class _Example:
    record: ManifestRecord
    features: np.ndarray  # trimmed
    target_ids: list[int]


def _load_examples(
    manifest_path, records, vocab: Vocabulary, task: str, max_frames: int
) -> list[_Example]:
    out = []
    for rec in records:
        feats = read_features(resolve_features(manifest_path, rec))[:max_frames]
        ids = vocab.encode(rec.target_text(task))
        out.append(_Example(rec, feats, ids))
    return out


def _example_loss(config, params, ex, ctc_weight, smoothing, aug_feats, rng):
    feats = tz.Tensor(aug_feats)
    enc = encode(config, params, feats, rng=rng)
    dec_in = [SOS] + ex.target_ids
    logits = decode_teacher_forced(config, params, enc, dec_in, rng=rng)
    att = label_smoothed_ce(logits, ex.target_ids + [EOS], smoothing)
    if ctc_weight > 0.0:
        ctc = ctc_loss(ctc_head(config, params, enc), ex.target_ids)
        ctc = ctc * (1.0 / max(1, len(ex.target_ids)))
        return joint_loss(ctc, att, ctc_weight)
    return att


class StageRunner:
    """One pretraining or fine-tuning stage over a manifest."""

    def __init__(
        self,
        config: TrainConfig,
        manifest_path,
        model_config: Optional[ModelConfig] = None,
        init: Optional[Checkpoint] = None,
        val_manifest_path=None,
    ):
        self.cfg = config
        records = read_manifest(manifest_path)
        if not records:
            raise ValueError(f"empty manifest {manifest_path}")
        for rec in records:
            if not rec.target_text(config.task).strip():
                raise ValueError(
                    f"record {rec.id} has no {config.task} target text"
                )
        self.vocab = build_vocab(records, config.task)

        resumed = (
            init is not None
            and init.meta.get("task") == config.task
            and init.meta.get("vocab") == self.vocab.to_json()
        )
        if init is not None:
            base = init.config
            wanted = replace(base, vocab_size=len(self.vocab))
            if model_config is not None and model_config != wanted:
                raise ValueError(
                    "model config incompatible with the init checkpoint "
                    "(only vocabulary-dependent tensors may differ)"
                )
            self.model_config = wanted
            self.params = init_params(self.model_config, seed=config.seed)
            transferred = 0
            for name, arr in init.params.items():
                if name in VOCAB_DEPENDENT and not resumed:
                    continue  # head swap: vocabulary changed across tasks
                if self.params[name].data.shape != arr.shape:
                    raise ValueError(
                        f"checkpoint tensor {name} has shape {arr.shape}, "
                        f"expected {self.params[name].data.shape}"
                    )
                self.params[name].data[...] = arr
                transferred += 1
            self.transferred = transferred
        else:
            if model_config is None:
                raise ValueError("a model config is required when training from scratch")
            if model_config.vocab_size != len(self.vocab):
                model_config = replace(model_config, vocab_size=len(self.vocab))
            self.model_config = model_config
            self.params = init_params(model_config, seed=config.seed)
            self.transferred = 0

        self.adam = AdamState.zeros_like(self.params)
        self.start_step = 0
        if resumed:
            for name in self.params:
                self.adam.m[name][...] = init.moments[f"m.{name}"]
                self.adam.v[name][...] = init.moments[f"v.{name}"]
            self.adam.t = init.meta["adam_t"]
            self.start_step = init.step

        self.examples = _load_examples(
            manifest_path, records, self.vocab, config.task, config.max_input_frames
        )
        lengths = [ex.features.shape[0] for ex in self.examples]
        self.batches = batch_by_frames(lengths, config.batch_frame_budget)
        self.val = None
        if val_manifest_path is not None:
            self.val = (val_manifest_path, read_manifest(val_manifest_path))
        self.log: list[dict] = []
        self._name_of = {id(p): name for name, p in self.params.items()}

    # -- internals ---------------------------------------------------------

    def _batch_order(self, epoch: int) -> np.ndarray:
        return _derived_rng(self.cfg.seed, 2, epoch).permutation(len(self.batches))

    def _step_grads(self, step: int, batch: list[int]) -> tuple[float, dict]:
        cfg = self.cfg
        accum: dict[str, np.ndarray] = {}
        total_loss = 0.0
        for ex_idx in batch:
            ex = self.examples[ex_idx]
            aug = spec_augment(
                ex.features, cfg.specaugment, _derived_rng(cfg.seed, 3, step, ex_idx)
            )
            drop_rng = _derived_rng(cfg.seed, 4, step, ex_idx)
            with tz.GradTape() as tape:
                loss = _example_loss(
                    self.model_config,
                    self.params,
                    ex,
                    cfg.ctc_weight,
                    cfg.joint.label_smoothing,
                    aug,
                    drop_rng,
                )
            grads = tz.backward(loss, tape)
            total_loss += loss.item()
            for p, g in grads.items():
                name = self._name_of[id(p)]
                if name in accum:
                    accum[name] += g
                else:
                    accum[name] = g.copy()
        scale = 1.0 / len(batch)
        for name in self.params:
            if name in accum:
                accum[name] *= scale
            else:
                accum[name] = np.zeros_like(self.params[name].data)
        return total_loss * scale, accum

    def _validate(self) -> float:
        from .evaluate import evaluate_params, primary_metric

        val_path, val_records = self.val
        reports, _ = evaluate_params(
            self.model_config,
            self.params,
            self.vocab,
            val_path,
            val_records,
            self.cfg.task,
            beam=self.cfg.eval_beam,
            max_input_frames=self.cfg.max_input_frames,
        )
        return primary_metric(self.cfg.task, reports)

    # -- public ------------------------------------------------------------

    def run(self) -> Checkpoint:
        cfg = self.cfg
        n_batches = len(self.batches)
        order = None
        epoch = -1
        for step in range(self.start_step + 1, cfg.max_steps + 1):
            step_epoch = (step - 1) // n_batches
            if step_epoch != epoch:
                epoch = step_epoch
                order = self._batch_order(epoch)
            batch = self.batches[order[(step - 1) % n_batches]]
            loss, grads = self._step_grads(step, batch)
            clip_global_norm(grads, cfg.grad_clip)
            lr = lr_at(step, cfg.peak_lr, cfg.warmup_steps)
            applied = adam_step(self.params, grads, self.adam, lr)
            if not applied:
                self.log.append(
                    {"step": step, "loss": loss, "lr": lr, "val_metric": "",
                     "note": "skipped non-finite gradient"}
                )
                continue
            at_end = step == cfg.max_steps
            do_eval = self.val is not None and (
                at_end or (cfg.eval_every > 0 and step % cfg.eval_every == 0)
            )
            if do_eval:
                self.log.append(
                    {"step": step, "loss": loss, "lr": lr, "val_metric": self._validate()}
                )
            elif at_end or step % cfg.log_every == 0:
                self.log.append({"step": step, "loss": loss, "lr": lr, "val_metric": ""})
        return self.checkpoint(cfg.max_steps)

    def checkpoint(self, step: int) -> Checkpoint:
        moments = {}
        for name in self.params:
            moments[f"m.{name}"] = self.adam.m[name]
            moments[f"v.{name}"] = self.adam.v[name]
        rng_state = json.dumps({"seed": self.cfg.seed, "step": step}).encode("utf-8")
        return Checkpoint(
            version=CKPT_VERSION,
            config=self.model_config,
            step=step,
            params={name: p.data for name, p in self.params.items()},
            moments=moments,
            rng_state=rng_state,
            meta={
                "task": self.cfg.task,
                "vocab": self.vocab.to_json(),
                "adam_t": self.adam.t,
                "train": self.cfg.to_json(),
            },
        )


def run_stage(
    task: str,
    init: Optional[Checkpoint],
    config: TrainConfig,
    manifest_path,
    model_config: Optional[ModelConfig] = None,
    val_manifest_path=None,
) -> tuple[Checkpoint, list[dict]]:
    """Train one stage; returns the final checkpoint and the metric log."""
    if task != config.task:
        config = replace(config, task=task)
    runner = StageRunner(
        config,
        manifest_path,
        model_config=model_config,
        init=init,
        val_manifest_path=val_manifest_path,
    )
    ckpt = runner.run()
    return ckpt, runner.log
