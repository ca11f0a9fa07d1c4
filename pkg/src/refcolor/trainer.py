"""Two-stage adversarial training, fine-tuning and checkpoint assembly."""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .checkpoint import (
    Checkpoint,
    load_module,
    load_optimizer,
    module_blobs,
    optimizer_blobs,
    save_checkpoint,
)
from .colornet import ColorNetConfig, Discriminator, Generator
from .dataprep.frames import Frame, Sequence as FrameSequence, sample_window
from .engine import Adam, Module, Tensor, no_grad, ops, precision
from .losses import (
    FeaturePyramid,
    LossWeights,
    discriminator_loss,
    generator_gan_loss,
    l1_loss,
    latent_loss,
    pyramid_losses,
    total_loss,
)
from .temporalnet import PatchDiscriminator, TemporalGenerator, TemporalNetConfig

LOG_COLUMNS = ("step", "loss_total", "loss_L1", "loss_perc", "loss_style", "loss_latent",
               "loss_GAN_D", "loss_GAN_G")
PRESETS = ("tiny", "small", "full")


class NonFiniteLoss(RuntimeError):
    def __init__(self, stage: str, step: int, parts: Dict[str, float]):
        self.stage = stage
        self.step = step
        self.parts = parts
        detail = ", ".join(f"{k}={v}" for k, v in parts.items())
        super().__init__(f"{stage} stage: non-finite loss at step {step} ({detail})")


@dataclass
class TrainConfig:
    lr_g: float = 1e-4
    lr_d: float = 1e-5
    beta1: float = 0.5
    beta2: float = 0.999
    batch: int = 4
    epochs_color: int = 40
    epochs_temporal: int = 10
    epochs_finetune: int = 30
    seed: int = 0
    image_size: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    train_data: str = ""
    finetune_data: str = ""
    # explicit step counts take precedence over epochs when set
    steps_color: Optional[int] = None
    steps_temporal: Optional[int] = None
    steps_finetune: Optional[int] = None
    model: str = "small"
    color_net: dict = field(default_factory=dict)  # field overrides on the preset
    temporal_net: dict = field(default_factory=dict)
    precision: str = "float32"
    grad_clip: Optional[float] = None
    finetune_temporal: bool = True
    window: int = 8
    pyramid_seed: int = 19
    gram_normalize: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        for name in ("lr_g", "lr_d"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if self.window < 3:
            raise ValueError("window must hold two references and a target")
        if self.model not in PRESETS:
            raise ValueError(f"model preset must be one of {PRESETS}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        for name in ("epochs_color", "epochs_temporal", "epochs_finetune"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["color_net"] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.color_net.items()}
        d["temporal_net"] = {k: list(v) if isinstance(v, tuple) else v for k, v in self.temporal_net.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_yaml(cls, path: Path) -> "TrainConfig":
        doc = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config must be a mapping")
        return cls.from_dict(doc)

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def colornet_config(self) -> ColorNetConfig:
        base = {"tiny": ColorNetConfig.tiny(), "small": ColorNetConfig.small(), "full": ColorNetConfig()}[self.model]
        over = {k: tuple(v) if isinstance(v, list) else v for k, v in self.color_net.items()}
        return replace(base, **over)

    def temporalnet_config(self) -> TemporalNetConfig:
        base = {"tiny": TemporalNetConfig.tiny(), "small": TemporalNetConfig.small(),
                "full": TemporalNetConfig()}[self.model]
        over = {k: tuple(v) if isinstance(v, list) else v for k, v in self.temporal_net.items()}
        return replace(base, **over)


@dataclass
class Models:
    G: Generator
    D: Discriminator
    TG: TemporalGenerator
    TD: PatchDiscriminator


def model_seeds(seed: int) -> List[int]:
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2**31 - 1, 5)]


def build_models(cfg: TrainConfig) -> Models:
    """Freshly initialised networks at the configuration's precision."""
    s = model_seeds(cfg.seed)
    with precision(cfg.dtype):
        ccfg, tcfg = cfg.colornet_config(), cfg.temporalnet_config()
        return Models(Generator(ccfg, s[0]), Discriminator(ccfg, s[1]),
                      TemporalGenerator(tcfg, s[2]), PatchDiscriminator(tcfg, s[3]))


def models_from_checkpoint(ckpt: Checkpoint, cfg: Optional[TrainConfig] = None) -> Models:
    cfg = cfg or TrainConfig.from_dict(ckpt.config)
    models = build_models(cfg)
    load_module(models.G, ckpt.blobs, "color.G.")
    load_module(models.D, ckpt.blobs, "color.D.")
    if ckpt.has_prefix("temporal.G."):
        load_module(models.TG, ckpt.blobs, "temporal.G.")
        load_module(models.TD, ckpt.blobs, "temporal.D.")
    return models


# -- data helpers ---------------------------------------------------------------------

def images(frames: Sequence[Frame], attr: str, dtype) -> Tensor:
    """Stack one field of several frames into an N×C×H×W tensor."""
    arr = np.stack([getattr(f, attr) for f in frames]).transpose(0, 3, 1, 2)
    return Tensor(arr, dtype=dtype)


def volume(frames: Sequence[np.ndarray], dtype) -> np.ndarray:
    """T arrays of H×W×C → C×T×H×W."""
    return np.stack(frames).transpose(3, 0, 1, 2).astype(dtype)


def check_dataset(sequences: Sequence[FrameSequence], cfg: TrainConfig) -> None:
    if len(sequences) == 0:
        raise ValueError("training needs at least one sequence")
    for seq in sequences:
        if len(seq) < cfg.window:
            raise ValueError(f"sequence {seq.source_id!r} has {len(seq)} frames; at least {cfg.window} needed")
        for fr in seq.frames:
            if fr.size != (cfg.image_size, cfg.image_size):
                raise ValueError(f"sequence {seq.source_id!r} has {fr.size} frames, expected "
                                 f"{cfg.image_size}x{cfg.image_size}")
    if cfg.image_size % 16:
        raise ValueError("image_size must be divisible by 16")


def steps_for(epochs: int, n_sequences: int, batch: int, override: Optional[int]) -> int:
    """One epoch draws about one window per sequence."""
    if override is not None:
        return int(override)
    return epochs * math.ceil(n_sequences / batch)


class TrainLog:
    """Append-only CSV of per-step losses; rows are also kept in memory."""

    def __init__(self, path: Optional[Path] = None):
        self.path = Path(path) if path is not None else None
        self.rows: List[dict] = []
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row["step"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)


def read_log(path: Path) -> List[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def _row(step: int, total, parts: dict, d_loss) -> dict:
    return {
        "step": step,
        "loss_total": float(total.data),
        "loss_L1": float(parts["l1"].data),
        "loss_perc": float(parts["perc"].data),
        "loss_style": float(parts["style"].data),
        "loss_latent": float(parts["latent"].data) if "latent" in parts else 0.0,
        "loss_GAN_D": float(d_loss.data),
        "loss_GAN_G": float(parts["gan"].data),
    }


def _check_finite(stage: str, row: dict) -> None:
    vals = {k: v for k, v in row.items() if k != "step"}
    if not all(np.isfinite(v) for v in vals.values()):
        raise NonFiniteLoss(stage, row["step"], vals)


def _detached(t: Tensor) -> Tensor:
    return Tensor(t.data, dtype=t.data.dtype)


# -- stage runners ----------------------------------------------------------------------

class _Stage:
    name = ""
    prefix = ""

    def __init__(self, cfg: TrainConfig, sequences, models: Models):
        self.cfg = cfg
        self.seqs = list(sequences)
        self.models = models
        self.pyramid = FeaturePyramid(cfg.pyramid_seed)
        self.rng = np.random.default_rng(model_seeds(cfg.seed)[4])
        self.step = 0

    def generator(self) -> Module:
        raise NotImplementedError

    def discriminator(self) -> Module:
        raise NotImplementedError

    def make_optimizers(self) -> None:
        c = self.cfg
        self.opt_g = Adam(self.generator().parameters(), c.lr_g, c.beta1, c.beta2, clip=c.grad_clip)
        self.opt_d = Adam(self.discriminator().parameters(), c.lr_d, c.beta1, c.beta2, clip=c.grad_clip)

    def state_blobs(self) -> dict:
        out = optimizer_blobs(self.opt_g, f"opt.{self.prefix}.G.")
        out.update(optimizer_blobs(self.opt_d, f"opt.{self.prefix}.D."))
        return out

    def restore(self, ckpt: Checkpoint) -> None:
        load_optimizer(self.opt_g, ckpt.blobs, f"opt.{self.prefix}.G.")
        load_optimizer(self.opt_d, ckpt.blobs, f"opt.{self.prefix}.D.")
        state = ckpt.meta.get(f"{self.prefix}_rng")
        if state is None:
            raise ValueError(f"checkpoint has no sampler state for the {self.name} stage")
        self.rng.bit_generator.state = state
        self.step = int(ckpt.meta.get(f"{self.prefix}_step", 0))

    def train_step(self) -> dict:
        raise NotImplementedError

    def run(self, total_steps: int, log: TrainLog, stop_at: Optional[int] = None,
            on_step: Optional[Callable[[dict], None]] = None) -> None:
        end = total_steps if stop_at is None else min(total_steps, stop_at)
        self.generator().train()
        self.discriminator().train()
        while self.step < end:
            row = self.train_step()
            self.step += 1
            row["step"] = self.step
            _check_finite(self.name, row)
            log.append(row)
            if on_step is not None:
                on_step(row)

    def _adversarial_update(self, d_inputs_real: tuple, d_inputs_fake: tuple, g_parts_fn) -> dict:
        """One discriminator step on detached fakes, then one generator step."""
        D = self.discriminator()
        self.opt_d.zero_grad()
        d_loss = discriminator_loss(D(*d_inputs_real), D(*d_inputs_fake))
        d_loss.backward()
        self.opt_d.step()
        self.opt_g.zero_grad()
        parts = g_parts_fn(D)
        total = total_loss(parts, self.cfg.weights)
        total.backward()
        self.opt_g.step()
        self.opt_d.zero_grad()
        return _row(self.step + 1, total, parts, d_loss)


class ColorStage(_Stage):
    name = "color"
    prefix = "color"

    def __init__(self, cfg, sequences, models):
        super().__init__(cfg, sequences, models)
        self.make_optimizers()

    def generator(self):
        return self.models.G

    def discriminator(self):
        return self.models.D

    def sample_batch(self) -> tuple:
        targets, refs0, refs1 = [], [], []
        for _ in range(self.cfg.batch):
            seq = self.seqs[int(self.rng.integers(len(self.seqs)))]
            refs, window_targets, _ = sample_window(seq, self.rng, self.cfg.window)
            targets.append(window_targets[int(self.rng.integers(len(window_targets)))])
            refs0.append(refs.refs[0])
            refs1.append(refs.refs[-1])
        return targets, refs0, refs1

    def train_step(self) -> dict:
        dt = self.cfg.dtype
        targets, r0, r1 = self.sample_batch()
        x, d, y = images(targets, "line", dt), images(targets, "dist", dt), images(targets, "color", dt)
        refs = [(images(r, "line", dt), images(r, "dist", dt), images(r, "color", dt)) for r in (r0, r1)]
        out = self.models.G(x, d, refs)

        def parts(D):
            perc, style = pyramid_losses(out.y_trans, y, self.pyramid, self.cfg.gram_normalize)
            return {
                "l1": l1_loss(out.y_trans, y),
                "perc": perc,
                "style": style,
                "latent": latent_loss(out.y_sim, out.y_mid, y),
                "gan": generator_gan_loss(D(x, out.y_trans)),
            }

        return self._adversarial_update((x, y), (x, _detached(out.y_trans)), parts)


def temporal_parts(pred: Tensor, target: Tensor, pyramid: FeaturePyramid, normalize: bool = True) -> dict:
    """L1 / perceptual / style terms for N×3×T×H×W volumes, each averaged over the T frames."""
    T = pred.shape[2]
    sums = {"l1": None, "perc": None, "style": None}
    for t in range(T):
        p, y = pred[:, :, t], target[:, :, t]
        perc, style = pyramid_losses(p, y, pyramid, normalize)
        for key, val in (("l1", l1_loss(p, y)), ("perc", perc), ("style", style)):
            sums[key] = val if sums[key] is None else ops.add(sums[key], val)
    return {k: ops.div(v, float(T)) for k, v in sums.items()}


def colorize_window(G: Generator, window: Sequence[Frame], dtype) -> List[np.ndarray]:
    """Run the frozen colour network on the interior frames of a window bounded by its ends."""
    ref0, ref1, targets = window[0], window[-1], list(window[1:-1])
    n = len(targets)
    x, d = images(targets, "line", dtype), images(targets, "dist", dtype)
    refs = [(images([r] * n, "line", dtype), images([r] * n, "dist", dtype), images([r] * n, "color", dtype))
            for r in (ref0, ref1)]
    with no_grad():
        out = G(x, d, refs).y_trans.data
    return [o.transpose(1, 2, 0) for o in out]


class TemporalStage(_Stage):
    name = "temporal"
    prefix = "temporal"

    def __init__(self, cfg, sequences, models):
        super().__init__(cfg, sequences, models)
        self.make_optimizers()
        self.cache: Dict[tuple, np.ndarray] = {}

    def generator(self):
        return self.models.TG

    def discriminator(self):
        return self.models.TD

    def _inputs(self, si: int, start: int) -> np.ndarray:
        key = (si, start)
        if key not in self.cache:
            window = self.seqs[si].frames[start:start + self.cfg.window]
            G = self.models.G
            G.eval()
            colored = colorize_window(G, window, self.cfg.dtype)
            self.cache[key] = volume([window[0].color] + colored + [window[-1].color], self.cfg.dtype)
        return self.cache[key]

    def sample_batch(self) -> tuple:
        lines, colors_in, truth = [], [], []
        for _ in range(self.cfg.batch):
            si = int(self.rng.integers(len(self.seqs)))
            _, _, start = sample_window(self.seqs[si], self.rng, self.cfg.window)
            window = self.seqs[si].frames[start:start + self.cfg.window]
            lines.append(volume([f.line for f in window], self.cfg.dtype))
            truth.append(volume([f.color for f in window], self.cfg.dtype))
            colors_in.append(self._inputs(si, start))
        dt = self.cfg.dtype
        return Tensor(np.stack(lines), dtype=dt), Tensor(np.stack(colors_in), dtype=dt), Tensor(np.stack(truth), dtype=dt)

    def train_step(self) -> dict:
        lines, colors_in, truth = self.sample_batch()
        out = self.models.TG(lines, colors_in)

        def parts(D):
            p = temporal_parts(out, truth, self.pyramid, self.cfg.gram_normalize)
            p["gan"] = generator_gan_loss(D(lines, out))
            return p

        return self._adversarial_update((lines, truth), (lines, _detached(out)), parts)


# -- checkpoint assembly ----------------------------------------------------------------

def make_checkpoint(cfg: TrainConfig, models: Models, meta: dict, stages: Sequence[_Stage] = (),
                    previous: Optional[Checkpoint] = None) -> Checkpoint:
    blobs = {}
    blobs.update(module_blobs(models.G, "color.G."))
    blobs.update(module_blobs(models.D, "color.D."))
    if meta.get("temporal_done") or any(s.prefix == "temporal" for s in stages):
        blobs.update(module_blobs(models.TG, "temporal.G."))
        blobs.update(module_blobs(models.TD, "temporal.D."))
    if previous is not None:
        for k, v in previous.blobs.items():
            if k.startswith("opt.") and k not in blobs:
                blobs[k] = v
    full_meta = dict(previous.meta) if previous is not None else {}
    full_meta.update(meta)
    for s in stages:
        blobs.update(s.state_blobs())
        full_meta[f"{s.prefix}_step"] = s.step
        full_meta[f"{s.prefix}_rng"] = s.rng.bit_generator.state
    full_meta["version"] = __version__
    full_meta["dtype"] = cfg.precision
    return Checkpoint(cfg.to_dict(), full_meta, OrderedDict(blobs))


def _finish(run_dir: Optional[Path], name: str, ckpt: Checkpoint, log: TrainLog) -> None:
    if run_dir is None:
        return
    run_dir = Path(run_dir)
    save_checkpoint(run_dir / f"{name}.ckpt", ckpt)
    (run_dir / "config.yaml").write_text(yaml.safe_dump(ckpt.config, sort_keys=True))
    if log.path is not None and log.path.exists():
        from .plotting import plot_training_log
        plot_training_log(log.path, log.path.with_suffix(".png"))


def _log_for(run_dir: Optional[Path], name: str, fresh: bool) -> TrainLog:
    if run_dir is None:
        return TrainLog(None)
    path = Path(run_dir) / f"{name}_log.csv"
    if fresh and path.exists():
        path.unlink()
    return TrainLog(path)


def train_color_stage(cfg: TrainConfig, sequences, run_dir: Optional[Path] = None,
                      resume: Optional[Checkpoint] = None, stop_at: Optional[int] = None,
                      models: Optional[Models] = None, steps: Optional[int] = None,
                      log_name: str = "color", meta_extra: Optional[dict] = None,
                      on_step=None) -> Checkpoint:
    """Adversarially train the colour transform network; returns a checkpoint.

    ``resume`` continues an interrupted run of the same configuration;
    ``stop_at`` halts early after that many steps (for staged runs).
    """
    check_dataset(sequences, cfg)
    with precision(cfg.dtype):
        if resume is not None:
            models = models_from_checkpoint(resume, cfg)
        elif models is None:
            models = build_models(cfg)
        stage = ColorStage(cfg, sequences, models)
        if resume is not None:
            stage.restore(resume)
        total = steps if steps is not None else steps_for(cfg.epochs_color, len(sequences), cfg.batch, cfg.steps_color)
        log = _log_for(run_dir, log_name, fresh=resume is None)
        stage.run(total, log, stop_at, on_step)
        meta = {"color_done": stage.step >= total, "color_total": total}
        meta.update(meta_extra or {})
        ckpt = make_checkpoint(cfg, models, meta, [stage], previous=resume)
    ckpt.history = log.rows
    _finish(run_dir, log_name, ckpt, log)
    return ckpt


def train_temporal_stage(cfg: TrainConfig, ckpt: Checkpoint, sequences, run_dir: Optional[Path] = None,
                         resume: Optional[Checkpoint] = None, stop_at: Optional[int] = None,
                         steps: Optional[int] = None, log_name: str = "temporal",
                         meta_extra: Optional[dict] = None, on_step=None) -> Checkpoint:
    """Train the temporal network on frozen colour-network outputs."""
    if not ckpt.has_prefix("color.G.") or not ckpt.meta.get("color_done", False):
        raise ValueError("temporal stage needs a checkpoint from a completed colour stage")
    check_dataset(sequences, cfg)
    with precision(cfg.dtype):
        source = resume if resume is not None else ckpt
        models = build_models(cfg)
        load_module(models.G, source.blobs, "color.G.")
        load_module(models.D, source.blobs, "color.D.")
        if resume is not None:
            load_module(models.TG, resume.blobs, "temporal.G.")
            load_module(models.TD, resume.blobs, "temporal.D.")
        stage = TemporalStage(cfg, sequences, models)
        if resume is not None:
            stage.restore(resume)
        total = steps if steps is not None else steps_for(cfg.epochs_temporal, len(sequences), cfg.batch,
                                                          cfg.steps_temporal)
        log = _log_for(run_dir, log_name, fresh=resume is None)
        stage.run(total, log, stop_at, on_step)
        meta = {"temporal_done": stage.step >= total, "temporal_total": total}
        meta.update(meta_extra or {})
        out = make_checkpoint(cfg, models, meta, [stage], previous=source)
    out.history = log.rows
    _finish(run_dir, log_name, out, log)
    return out


def train_both(cfg: TrainConfig, sequences, run_dir: Optional[Path] = None) -> Checkpoint:
    color = train_color_stage(cfg, sequences, run_dir)
    return train_temporal_stage(cfg, color, sequences, run_dir)


def fine_tune(ckpt: Checkpoint, sequences, cfg: Optional[TrainConfig] = None,
              run_dir: Optional[Path] = None) -> Checkpoint:
    """Continue both stages on new sequences for ``epochs_finetune`` epochs each.

    Optimiser moments restart from zero; the constants are unchanged.  The
    temporal network is only tuned when ``cfg.finetune_temporal`` is set and
    the checkpoint already holds one.
    """
    if len(sequences) == 0:
        raise ValueError("fine-tuning needs at least one sequence")
    cfg = cfg or TrainConfig.from_dict(ckpt.config)
    steps = steps_for(cfg.epochs_finetune, len(sequences), cfg.batch, cfg.steps_finetune)
    with precision(cfg.dtype):
        models = models_from_checkpoint(ckpt, cfg)
    out = train_color_stage(cfg, sequences, run_dir, models=models, steps=steps, log_name="finetune_color",
                            meta_extra={"finetuned": True, "temporal_done": ckpt.meta.get("temporal_done", False)})
    out.meta["color_done"] = True
    if cfg.finetune_temporal and ckpt.has_prefix("temporal.G."):
        with precision(cfg.dtype):
            tuned = models_from_checkpoint(out, cfg)
            load_module(tuned.TG, ckpt.blobs, "temporal.G.")
            load_module(tuned.TD, ckpt.blobs, "temporal.D.")
        out = _tune_temporal(cfg, tuned, sequences, steps, run_dir, out)
    return out


def _tune_temporal(cfg, models: Models, sequences, steps: int, run_dir, previous: Checkpoint) -> Checkpoint:
    check_dataset(sequences, cfg)
    with precision(cfg.dtype):
        stage = TemporalStage(cfg, sequences, models)
        log = _log_for(run_dir, "finetune_temporal", fresh=True)
        stage.run(steps, log)
        out = make_checkpoint(cfg, models, {"temporal_done": True, "finetuned": True}, [stage], previous=previous)
    out.history = log.rows
    _finish(run_dir, "finetune_temporal", out, log)
    return out
