"""L1 training with Adam and step-decayed learning rate; binary checkpoints."""

from __future__ import annotations

import dataclasses
import io
import json
import math
import os
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .data import DatasetManifest, PatchPair, normalize
from .model import ConfigError, PanFormerConfig, PanFormerModel
from .tensor import ContractError, DimensionError, Parameter, Tensor

CKPT_MAGIC = b"PFCK"
CKPT_VERSION = 1
_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch: int = 4
    max_iters: int = 200_000
    decay: float = 0.99
    decay_every: int = 10_000
    seed: int = 42
    checkpoint_every: int = 10_000
    log_every: int = 100
    loss_reduction: str = "mean"

    def __post_init__(self):
        if not 0 < self.decay <= 1:
            raise ConfigError(f"decay must lie in (0, 1], got {self.decay}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.decay_every < 1 or self.max_iters < 0:
            raise ConfigError("decay_every must be >= 1 and max_iters >= 0")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be >= 1")
        if self.loss_reduction != "mean":
            raise ConfigError(f"only loss_reduction='mean' is supported, got {self.loss_reduction!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        return cls(**data)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def l1_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute error over every element of the batch."""
    if pred.shape != gt.shape:
        raise DimensionError(f"l1_loss shapes differ: {pred.shape} vs {gt.shape}")
    return T.tabs(pred - gt).mean()


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return cfg.lr0 * cfg.decay ** (iteration // cfg.decay_every)


def adam_step(params: Iterable[Parameter], state: AdamState, lr: float, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place on the parameters."""
    params = list(params)
    if not params or any(p.grad is None for p in params):
        raise ContractError("adam_step needs parameters with populated gradients")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps_adam)).astype(p.data.dtype, copy=False)
        p.data = p.data - update


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose (init, sampling, cropping)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode()), *extra])


# --------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class UnknownParameterError(CheckpointError, KeyError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    step: int
    params: dict[str, np.ndarray]
    adam: AdamState
    seed: int

    @classmethod
    def capture(cls, model: PanFormerModel, train_cfg: TrainConfig, state: AdamState) -> "Checkpoint":
        adam = AdamState({k: v.copy() for k, v in state.m.items()},
                         {k: v.copy() for k, v in state.v.items()}, state.step)
        return cls(model.cfg.to_dict(), train_cfg.to_dict(), state.step, model.state_dict(), adam,
                   train_cfg.seed)

    def build_model(self) -> PanFormerModel:
        model = PanFormerModel(PanFormerConfig.from_dict(self.model_config), 0)
        restore_params(model, self.params)
        return model


def restore_params(model: PanFormerModel, params: dict[str, np.ndarray]) -> None:
    known = dict(model.named_parameters())
    unknown = sorted(set(params) - set(known))
    if unknown:
        raise UnknownParameterError(f"checkpoint holds parameters the model lacks: {unknown}")
    missing = sorted(set(known) - set(params))
    if missing:
        raise UnknownParameterError(f"checkpoint lacks model parameters: {missing}")
    for name, value in params.items():
        p = known[name]
        if p.shape != value.shape:
            raise DimensionError(f"parameter {name}: checkpoint shape {value.shape} vs model {p.shape}")
        p.data = value.copy()
        p.zero_grad()


def _write_arrays(buf: io.BytesIO, arrays: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        code = arr.dtype.itemsize
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(_DTYPE_CODES[code], copy=False).tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(f"{self.path}: truncated at byte {self.pos} (need {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def arrays(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<H")
            name = self.take(n).decode()
            code, ndim = self.unpack("<BB")
            if code not in _DTYPE_CODES:
                raise CheckpointError(f"{self.path}: bad dtype code {code} for {name}")
            shape = self.unpack(f"<{ndim}I")
            dt = _DTYPE_CODES[code]
            size = int(np.prod(shape)) * dt.itemsize
            out[name] = np.frombuffer(self.take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a crash mid-write leaves any previous file intact."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
    blob = json.dumps({"model": ckpt.model_config, "train": ckpt.train_config, "seed": ckpt.seed},
                      sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)) + blob)
    buf.write(struct.pack("<Q", ckpt.step))
    _write_arrays(buf, ckpt.params)
    buf.write(struct.pack("<Q", ckpt.adam.step))
    moments = {f"m:{k}": v for k, v in ckpt.adam.m.items()}
    moments.update({f"v:{k}": v for k, v in ckpt.adam.v.items()})
    _write_arrays(buf, moments)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if len(raw) < 4 or raw[:4] != CKPT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {raw[:4]!r}")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {CKPT_VERSION}")
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode())
    (step,) = r.unpack("<Q")
    params = r.arrays()
    (adam_step_count,) = r.unpack("<Q")
    moments = r.arrays()
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    m = {k[2:]: v for k, v in moments.items() if k.startswith("m:")}
    v = {k[2:]: v for k, v in moments.items() if k.startswith("v:")}
    return Checkpoint(meta["model"], meta["train"], step, params, AdamState(m, v, adam_step_count), meta["seed"])


# --------------------------------------------------------------------------
# training loop


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]


class BatchSource:
    """In-memory normalized patches; batch content is a function of (seed, iteration)."""

    def __init__(self, pairs: list[PatchPair]):
        if not pairs:
            raise ConfigError("training needs at least one patch pair")
        self.pan = np.stack([normalize(p.pan).data for p in pairs])
        self.lrms = np.stack([normalize(p.lrms).data for p in pairs])
        self.gt = np.stack([normalize(p.gt).data for p in pairs])

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "BatchSource":
        if not len(manifest):
            raise ConfigError("manifest has no entries")
        if manifest.split != "train":
            raise ConfigError(f"training manifest must have split 'train', got {manifest.split!r}")
        return cls([manifest.load_pair(i) for i in range(len(manifest))])

    def __len__(self) -> int:
        return len(self.pan)

    def batch(self, seed: int, iteration: int, size: int) -> tuple[Tensor, Tensor, Tensor]:
        idx = substream(seed, "sampling", iteration).integers(0, len(self), size)
        return Tensor(self.pan[idx]), Tensor(self.lrms[idx]), Tensor(self.gt[idx])


def train(model: PanFormerModel, data: DatasetManifest | BatchSource | list[PatchPair], cfg: TrainConfig,
          out_dir=None, resume: Checkpoint | None = None,
          on_log: Callable[[dict], None] | None = None) -> TrainResult:
    """Run iterations ``resume.step`` (or 0) through ``cfg.max_iters - 1``.

    Every iteration is logged in the returned list; ``on_log`` and the
    ``loss_log.jsonl`` file only see every ``cfg.log_every``-th entry.  With
    ``out_dir`` set, a checkpoint is written every ``cfg.checkpoint_every``
    iterations and at the end; a non-finite loss aborts before the update,
    leaving the last good checkpoint on disk.
    """
    if isinstance(data, DatasetManifest):
        source = BatchSource.from_manifest(data)
    elif isinstance(data, BatchSource):
        source = data
    else:
        source = BatchSource(list(data))

    state = AdamState()
    if resume is not None:
        restore_params(model, resume.params)
        state = AdamState({k: v.copy() for k, v in resume.adam.m.items()},
                          {k: v.copy() for k, v in resume.adam.v.items()}, resume.adam.step)
    start = resume.step if resume is not None else 0

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "loss_log.jsonl", "a" if resume is not None else "w")

    params = model.parameters()
    log: list[dict] = []
    try:
        for it in range(start, cfg.max_iters):
            t0 = time.perf_counter()
            lr = lr_at(it, cfg)
            pan, ms, gt = source.batch(cfg.seed, it, cfg.batch)
            loss = l1_loss(model(pan, ms), gt)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at iteration {it}")
            for p in params:
                p.zero_grad()
            T.backward(loss)
            adam_step(params, state, lr, cfg)
            record = {"iter": it, "lr": lr, "loss": value,
                      "wall_ms": round(1000 * (time.perf_counter() - t0), 3)}
            log.append(record)
            if (it + 1) % cfg.log_every == 0 or it == start:
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
                if on_log is not None:
                    on_log(record)
            if out is not None and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / "checkpoint.pfck", Checkpoint.capture(model, cfg, state))
    finally:
        if log_file is not None:
            log_file.close()

    ckpt = Checkpoint.capture(model, cfg, state)
    ckpt.step = max(start, cfg.max_iters)
    if out is not None:
        save_checkpoint(out / "checkpoint.pfck", ckpt)
    return TrainResult(ckpt, log)


def running_mean(values: list[float], window: int) -> list[float]:
    out, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out
