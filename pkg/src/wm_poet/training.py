"""Mini-batch training loop, validation tracking, and checkpointing.

Poems are batched by structural signature (genre plus line lengths) so a
batch never mixes shapes and no masking is needed anywhere downstream.
Each optimizer step backpropagates the summed cross entropy of one batch
normalized by its character count, clips the global gradient norm, and
applies Adam.

Checkpoints come in two formats sharing one manifest schema: a directory
(manifest.json plus one raw blob per parameter) and a single-file archive
(magic, manifest, concatenated blobs). Blobs hold the parameter value and
both Adam moments, and the manifest records the optimizer step count and
the training RNG state, so a resumed run is bit-for-bit the run that never
stopped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nm
from .corpus import PoemExample
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .memory import TEST_MODE, TRAIN_MODE
from .model import ModelConfig, WorkingMemoryModel, poem_char_count
from .corpus import Vocabulary

CHECKPOINT_MAGIC = b"WMPOET01"
_BLOB_DTYPE = "<f4"


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings."""

    batch_size: int = 64
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 1e-5
    dropout: float = 0.25
    gamma: float = 50.0
    epochs: int = 30
    seed: int = 0
    grad_clip: float = 5.0
    validate_every: int = 0  # 0: once per epoch
    patience: int = 5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.lr <= 0 or self.grad_clip <= 0 or self.gamma <= 0:
            raise ConfigError("lr, grad_clip, and gamma must all be positive")
        if self.epochs < 1 or self.patience < 1:
            raise ConfigError("epochs and patience must be >= 1")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size, "lr": self.lr, "beta1": self.beta1,
            "beta2": self.beta2, "eps": self.eps, "l2": self.l2,
            "dropout": self.dropout, "gamma": self.gamma, "epochs": self.epochs,
            "seed": self.seed, "grad_clip": self.grad_clip,
            "validate_every": self.validate_every, "patience": self.patience,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "TrainConfig":
        return cls(**payload)


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    n_steps: int
    n_chars: int
    grad_norm_max: float
    grad_norm_mean: float
    post_clip_norm_max: float


def _shape_signature(example: PoemExample) -> tuple:
    return (example.genre, tuple(len(line) for line in example.lines))


def make_batches(
    dataset: Sequence[PoemExample], batch_size: int, rng: np.random.Generator
) -> list[list[PoemExample]]:
    """Shuffled batches that never mix structural shapes.

    Examples are grouped by (genre, line lengths), shuffled within each
    group, chunked, and the chunk order is shuffled again. Calling twice
    advances the generator, so consecutive epochs see different orders.
    """
    if not dataset:
        raise DataError("cannot batch an empty dataset")
    groups: dict[tuple, list[PoemExample]] = {}
    for ex in dataset:
        groups.setdefault(_shape_signature(ex), []).append(ex)
    batches: list[list[PoemExample]] = []
    for sig in groups:
        members = groups[sig]
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        for start in range(0, len(shuffled), batch_size):
            batches.append(shuffled[start:start + batch_size])
    batch_order = rng.permutation(len(batches))
    return [batches[i] for i in batch_order]


def train_epoch(
    model: WorkingMemoryModel,
    dataset: Sequence[PoemExample],
    cfg: TrainConfig,
    rng: np.random.Generator,
    epoch: int = 0,
) -> EpochReport:
    """One pass over the dataset: per batch, backprop, clip, Adam."""
    params = model.parameters()
    batches = make_batches(dataset, cfg.batch_size, rng)
    total_weighted_loss = 0.0
    total_chars = 0
    norms: list[float] = []
    post_norms: list[float] = []
    for batch_index, batch in enumerate(batches):
        batch_chars = sum(poem_char_count(ex) for ex in batch)
        batch_loss = 0.0
        for ex in batch:
            loss = model.poem_forward_loss(ex, rng, mode=TRAIN_MODE)
            chars = poem_char_count(ex)
            # poem loss is mean CE per char; rescale so the batch gradient
            # is the summed CE over the batch divided by its char count
            nm.backward(nm.scale(loss, chars / batch_chars))
            batch_loss += float(loss.data) * chars / batch_chars
        if not math.isfinite(batch_loss):
            raise NumericError(
                f"non-finite loss {batch_loss} in epoch {epoch}, batch {batch_index} "
                f"({len(batch)} poems, shape {_shape_signature(batch[0])})"
            )
        pre_norm = nm.clip_grad_norm(params, cfg.grad_clip)
        post_norms.append(nm.global_grad_norm(params))
        norms.append(pre_norm)
        nm.adam_step(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                     eps=cfg.eps, l2=cfg.l2)
        total_weighted_loss += batch_loss * batch_chars
        total_chars += batch_chars
    return EpochReport(
        epoch=epoch,
        mean_loss=total_weighted_loss / total_chars,
        n_steps=len(batches),
        n_chars=total_chars,
        grad_norm_max=max(norms),
        grad_norm_mean=sum(norms) / len(norms),
        post_clip_norm_max=max(post_norms),
    )


def dataset_mean_loss(
    model: WorkingMemoryModel,
    dataset: Sequence[PoemExample],
    rng: np.random.Generator,
    mode: str = TEST_MODE,
) -> float:
    """Char-weighted mean teacher-forced cross entropy over a dataset."""
    if not dataset:
        raise DataError("cannot evaluate an empty dataset")
    total = 0.0
    chars = 0
    for ex in dataset:
        n = poem_char_count(ex)
        total += float(model.poem_forward_loss(ex, rng, mode=mode).data) * n
        chars += n
    return total / chars


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _param_blob(p: nm.Parameter) -> bytes:
    parts = [np.ascontiguousarray(a, dtype=_BLOB_DTYPE).tobytes() for a in (p.data, p.adam_m, p.adam_v)]
    return b"".join(parts)


def _manifest_for(model: WorkingMemoryModel, step: int, rng, train_state, assets) -> dict:
    params = model.parameters()
    asset_payload = {"vocab": model.vocab.to_dict()}
    if assets:
        asset_payload.update(assets)
    return {
        "format": "wm-poet-checkpoint",
        "version": 1,
        "config": model.config.to_dict(),
        "step": int(step),
        "optimizer_steps": int(params[0].step_count) if params else 0,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "train_state": train_state or {},
        "assets": asset_payload,
        "params": [
            {"name": p.name, "shape": list(p.data.shape), "dtype": _BLOB_DTYPE,
             "nbytes": 3 * p.data.size * 4}
            for p in params
        ],
    }


def save_checkpoint(
    model: WorkingMemoryModel,
    path,
    *,
    step: int = 0,
    rng: np.random.Generator | None = None,
    train_state: dict | None = None,
    assets: dict | None = None,
    archive: bool | None = None,
) -> Path:
    """Write a checkpoint; returns the path written.

    A path ending in ``.ckpt`` (or ``archive=True``) produces the
    single-file format; anything else becomes a directory with
    ``manifest.json`` and one blob per parameter. Blobs carry the value and
    both Adam moments so optimization resumes exactly.
    """
    path = Path(path)
    if archive is None:
        archive = path.suffix == ".ckpt"
    manifest = _manifest_for(model, step, rng, train_state, assets)
    params = model.parameters()
    if archive:
        offset = 0
        for entry in manifest["params"]:
            entry["offset"] = offset
            offset += entry["nbytes"]
        manifest_bytes = json.dumps(manifest, ensure_ascii=False).encode("utf-8")
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(len(manifest_bytes).to_bytes(8, "little"))
            f.write(manifest_bytes)
            for p in params:
                f.write(_param_blob(p))
    else:
        path.mkdir(parents=True, exist_ok=True)
        (path / "manifest.json").write_text(
            json.dumps(manifest, ensure_ascii=False, indent=1), encoding="utf-8"
        )
        blob_dir = path / "params"
        blob_dir.mkdir(exist_ok=True)
        for p in params:
            (blob_dir / f"{p.name}.bin").write_bytes(_param_blob(p))
    return path


@dataclass
class CheckpointBundle:
    """A loaded checkpoint: the rebuilt model plus training bookkeeping."""

    model: WorkingMemoryModel
    step: int
    optimizer_steps: int
    rng_state: dict | None
    train_state: dict
    assets: dict

    def make_rng(self) -> np.random.Generator:
        """Training RNG positioned exactly where the saved run left it."""
        rng = np.random.default_rng(0)
        if self.rng_state is not None:
            rng.bit_generator.state = self.rng_state
        return rng


def _read_manifest_and_blobs(path: Path) -> tuple[dict, dict[str, bytes]]:
    if path.is_dir():
        manifest_path = path / "manifest.json"
        if not manifest_path.exists():
            raise CheckpointError(f"{path} is not a checkpoint directory (missing manifest.json)")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        blobs = {}
        for entry in manifest["params"]:
            blob_path = path / "params" / f"{entry['name']}.bin"
            if not blob_path.exists():
                raise CheckpointError(f"missing blob for parameter {entry['name']!r}")
            blobs[entry["name"]] = blob_path.read_bytes()
        return manifest, blobs
    raw = path.read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint archive (bad magic)")
    header_end = len(CHECKPOINT_MAGIC) + 8
    manifest_len = int.from_bytes(raw[len(CHECKPOINT_MAGIC):header_end], "little")
    manifest = json.loads(raw[header_end:header_end + manifest_len].decode("utf-8"))
    blob_section = raw[header_end + manifest_len:]
    blobs = {}
    for entry in manifest["params"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        chunk = blob_section[start:start + nbytes]
        if len(chunk) < nbytes:
            raise CheckpointError(
                f"blob for {entry['name']!r} truncated: expected {nbytes} bytes, found {len(chunk)}"
            )
        blobs[entry["name"]] = chunk
    return manifest, blobs


def load_checkpoint(path) -> CheckpointBundle:
    """Rebuild a model (and its optimizer state) from a checkpoint."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    manifest, blobs = _read_manifest_and_blobs(path)
    if manifest.get("format") != "wm-poet-checkpoint":
        raise CheckpointError(f"{path} is not a model checkpoint")
    assets = manifest.get("assets", {})
    if "vocab" not in assets:
        raise CheckpointError("checkpoint has no embedded vocabulary")
    config = ModelConfig.from_dict(manifest["config"])
    vocab = Vocabulary.from_dict(assets["vocab"])
    model = WorkingMemoryModel(config, vocab, np.random.default_rng(0))

    manifest_names = [entry["name"] for entry in manifest["params"]]
    live_names = [p.name for p in model.parameters()]
    if set(manifest_names) != set(live_names):
        missing = set(live_names) - set(manifest_names)
        extra = set(manifest_names) - set(live_names)
        raise CheckpointError(
            f"parameter names do not match this configuration: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}"
        )
    optimizer_steps = int(manifest.get("optimizer_steps", 0))
    for entry in manifest["params"]:
        p = model.registry[entry["name"]]
        shape = tuple(entry["shape"])
        if p.data.shape != shape:
            raise CheckpointError(
                f"shape mismatch for {p.name!r}: checkpoint {shape}, model {p.data.shape}"
            )
        blob = blobs[entry["name"]]
        expected = 3 * p.data.size * 4
        if len(blob) != expected:
            raise CheckpointError(
                f"blob for {p.name!r} truncated: expected {expected} bytes, found {len(blob)}"
            )
        flat = np.frombuffer(blob, dtype=_BLOB_DTYPE)
        n = p.data.size
        target_dtype = p.data.dtype
        p.data[...] = flat[:n].reshape(shape).astype(target_dtype)
        p.adam_m[...] = flat[n:2 * n].reshape(shape).astype(target_dtype)
        p.adam_v[...] = flat[2 * n:].reshape(shape).astype(target_dtype)
        p.step_count = optimizer_steps
    return CheckpointBundle(
        model=model,
        step=int(manifest.get("step", 0)),
        optimizer_steps=optimizer_steps,
        rng_state=manifest.get("rng_state"),
        train_state=manifest.get("train_state", {}),
        assets=assets,
    )


# ---------------------------------------------------------------------------
# full training runs
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_valid_pp: float = math.inf
    best_epoch: int = -1
    stopped_early: bool = False


def _validation_rng(seed: int, epoch: int) -> np.random.Generator:
    # independent of the training stream so validating never perturbs it
    return np.random.default_rng([seed, epoch, 7919])


def train_model(
    model: WorkingMemoryModel,
    train_set: Sequence[PoemExample],
    valid_set: Sequence[PoemExample],
    cfg: TrainConfig,
    out_dir=None,
    assets: dict | None = None,
    resume: CheckpointBundle | None = None,
    log=None,
) -> TrainResult:
    """Train with per-epoch validation and patience-based early stopping.

    When ``out_dir`` is given, ``best`` and ``last`` checkpoint directories
    are maintained; ``last`` holds the RNG state needed to resume. Passing
    the loaded bundle as ``resume`` continues its run exactly.
    """
    result = TrainResult()
    start_epoch = 0
    since_best = 0
    step = 0
    if resume is not None:
        rng = resume.make_rng()
        state = resume.train_state
        start_epoch = int(state.get("next_epoch", 0))
        result.best_valid_pp = float(state.get("best_valid_pp", math.inf))
        result.best_epoch = int(state.get("best_epoch", -1))
        since_best = int(state.get("since_best", 0))
        result.history = list(state.get("history", []))
        step = resume.step
    else:
        rng = np.random.default_rng(cfg.seed)

    for epoch in range(start_epoch, cfg.epochs):
        report = train_epoch(model, train_set, cfg, rng, epoch)
        step += report.n_steps
        val_loss = dataset_mean_loss(
            model, valid_set if valid_set else train_set, _validation_rng(cfg.seed, epoch)
        )
        val_pp = math.exp(val_loss)
        entry = {
            "epoch": epoch,
            "train_loss": report.mean_loss,
            "valid_loss": val_loss,
            "valid_pp": val_pp,
            "grad_norm_max": report.grad_norm_max,
            "post_clip_norm_max": report.post_clip_norm_max,
            "steps": report.n_steps,
        }
        result.history.append(entry)
        if log:
            log(
                f"epoch {epoch}: train {report.mean_loss:.4f}/char, "
                f"valid pp {val_pp:.3f}, grad max {report.grad_norm_max:.2f}"
            )
        improved = val_pp < result.best_valid_pp
        if improved:
            result.best_valid_pp = val_pp
            result.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        train_state = {
            "next_epoch": epoch + 1,
            "best_valid_pp": result.best_valid_pp,
            "best_epoch": result.best_epoch,
            "since_best": since_best,
            "history": result.history,
            "train_config": cfg.to_dict(),
        }
        if out_dir is not None:
            if improved:
                save_checkpoint(model, Path(out_dir) / "best", step=step, rng=rng,
                                train_state=train_state, assets=assets)
            save_checkpoint(model, Path(out_dir) / "last", step=step, rng=rng,
                            train_state=train_state, assets=assets)
        if since_best >= cfg.patience:
            result.stopped_early = True
            break
    return result
