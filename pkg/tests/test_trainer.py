from dataclasses import replace

import numpy as np
import pytest

from refcolor.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    from_bytes,
    load_checkpoint,
    load_module,
    save_checkpoint,
    to_bytes,
)
from refcolor.colornet import ColorNetConfig, Generator
from refcolor.dataprep import synth_dataset
from refcolor.trainer import (
    LOG_COLUMNS,
    NonFiniteLoss,
    TrainConfig,
    build_models,
    fine_tune,
    models_from_checkpoint,
    read_log,
    steps_for,
    train_color_stage,
    train_temporal_stage,
)

CFG = TrainConfig(model="tiny", image_size=32, precision="float64", batch=2,
                  steps_color=4, steps_temporal=3, steps_finetune=2, window=8)


@pytest.fixture(scope="module")
def seqs():
    return synth_dataset(11, 2, 9, 32)


@pytest.fixture(scope="module")
def color_ckpt(seqs):
    return train_color_stage(CFG, seqs)


def blobs_equal(a, b, prefix=""):
    ka = [k for k in a.blobs if k.startswith(prefix)]
    kb = [k for k in b.blobs if k.startswith(prefix)]
    return ka == kb and all(a.blobs[k].tobytes() == b.blobs[k].tobytes() for k in ka)


# ---- configuration --------------------------------------------------------

def test_default_schedule_and_optimizer_constants():
    c = TrainConfig()
    assert (c.lr_g, c.lr_d, c.beta1, c.beta2, c.batch) == (1e-4, 1e-5, 0.5, 0.999, 4)
    assert (c.epochs_color, c.epochs_temporal, c.epochs_finetune) == (40, 10, 30)
    assert c.gram_normalize and c.grad_clip is None


@pytest.mark.parametrize("bad", [dict(lr_g=0), dict(lr_d=-1), dict(batch=0), dict(model="huge"),
                                 dict(precision="float16"), dict(window=2)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_dict_and_yaml_round_trip(tmp_path):
    import yaml
    c = replace(CFG, color_net={"embed_dim": 8})
    assert TrainConfig.from_dict(c.to_dict()) == c
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(c.to_dict()))
    assert TrainConfig.from_yaml(tmp_path / "c.yaml") == c
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"learning_rate": 1})


def test_steps_per_epoch():
    assert steps_for(40, 10, 4, None) == 120
    assert steps_for(40, 10, 4, 7) == 7


def test_optimizers_use_configured_constants(seqs):
    from refcolor.trainer import ColorStage
    cfg = replace(CFG, lr_g=3e-4, lr_d=2e-5)
    stage = ColorStage(cfg, seqs, build_models(cfg))
    stage.make_optimizers()
    assert (stage.opt_g.lr, stage.opt_d.lr) == (3e-4, 2e-5)
    assert (stage.opt_g.beta1, stage.opt_g.beta2) == (0.5, 0.999)
    assert stage.opt_d.beta1 == 0.5


# ---- colour stage ---------------------------------------------------------

def test_color_stage_logs_every_step(color_ckpt, tmp_path, seqs):
    rows = color_ckpt.history
    assert [r["step"] for r in rows] == [1, 2, 3, 4]
    assert all(np.isfinite(r[c]) for r in rows for c in LOG_COLUMNS)
    assert color_ckpt.meta["color_done"]
    run = train_color_stage(replace(CFG, steps_color=2), seqs, run_dir=tmp_path)
    header = (tmp_path / "color_log.csv").read_text().splitlines()[0]
    assert header == ",".join(LOG_COLUMNS)
    assert read_log(tmp_path / "color_log.csv") == run.history
    assert (tmp_path / "color.ckpt").exists() and (tmp_path / "color_log.png").exists()


def test_color_stage_is_bitwise_deterministic(color_ckpt, seqs):
    again = train_color_stage(CFG, seqs)
    assert again.history == color_ckpt.history
    assert to_bytes(again) == to_bytes(color_ckpt)


def test_resume_matches_uninterrupted_run(color_ckpt, seqs, tmp_path):
    part = train_color_stage(CFG, seqs, stop_at=2)
    assert not part.meta["color_done"]
    save_checkpoint(tmp_path / "part.ckpt", part)
    resumed = train_color_stage(CFG, seqs, resume=load_checkpoint(tmp_path / "part.ckpt"))
    assert resumed.history == color_ckpt.history[2:]
    assert blobs_equal(resumed, color_ckpt)


def test_empty_or_short_dataset_rejected(seqs):
    with pytest.raises(ValueError):
        train_color_stage(CFG, [])
    short = synth_dataset(0, 1, 8, 32)
    with pytest.raises(ValueError):
        train_color_stage(replace(CFG, window=9), short)
    with pytest.raises(ValueError):
        train_color_stage(replace(CFG, image_size=64), seqs)


def test_non_finite_loss_is_reported(seqs):
    broken = synth_dataset(3, 1, 8, 32)
    for f in broken[0].frames:
        f.color = np.full_like(f.color, np.nan)
    with pytest.raises(NonFiniteLoss) as err:
        train_color_stage(CFG, broken)
    assert err.value.step == 1 and err.value.stage == "color"


# ---- temporal stage -------------------------------------------------------

def test_temporal_stage_freezes_color_network(color_ckpt, seqs):
    out = train_temporal_stage(CFG, color_ckpt, seqs)
    assert blobs_equal(out, color_ckpt, "color.")
    assert out.meta["temporal_done"] and out.has_prefix("temporal.G.")
    assert [r["step"] for r in out.history] == [1, 2, 3]
    assert to_bytes(train_temporal_stage(CFG, color_ckpt, seqs)) == to_bytes(out)


def test_temporal_stage_needs_finished_color_stage(color_ckpt, seqs):
    partial = train_color_stage(CFG, seqs, stop_at=1)
    with pytest.raises(ValueError):
        train_temporal_stage(CFG, partial, seqs)
    with pytest.raises(ValueError):
        train_temporal_stage(CFG, Checkpoint(meta={"color_done": True}), seqs)


def test_temporal_resume(color_ckpt, seqs):
    full = train_temporal_stage(CFG, color_ckpt, seqs)
    part = train_temporal_stage(CFG, color_ckpt, seqs, stop_at=1)
    rest = train_temporal_stage(CFG, color_ckpt, seqs, resume=from_bytes(to_bytes(part)))
    assert rest.history == full.history[1:]
    assert blobs_equal(rest, full, "temporal.")


# ---- fine-tuning ----------------------------------------------------------

def test_fine_tune_updates_both_networks(color_ckpt, seqs):
    both = train_temporal_stage(CFG, color_ckpt, seqs)
    new = synth_dataset(5, 2, 8, 32, style=1)
    tuned = fine_tune(both, new, CFG)
    assert tuned.meta["finetuned"] and tuned.meta["color_done"] and tuned.meta["temporal_done"]
    assert not blobs_equal(tuned, both, "color.G.")
    assert not blobs_equal(tuned, both, "temporal.G.")
    assert to_bytes(fine_tune(both, new, CFG)) == to_bytes(tuned)
    frozen = fine_tune(both, new, replace(CFG, finetune_temporal=False))
    assert blobs_equal(frozen, both, "temporal.G.")


def test_fine_tune_needs_sequences(color_ckpt):
    with pytest.raises(ValueError):
        fine_tune(color_ckpt, [], CFG)


# ---- checkpoints ----------------------------------------------------------

def test_checkpoint_round_trip(color_ckpt, tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", color_ckpt)
    back = load_checkpoint(path)
    assert blobs_equal(back, color_ckpt)
    assert back.config == color_ckpt.config and back.meta == color_ckpt.meta
    save_checkpoint(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    models = models_from_checkpoint(back)
    for name, p in models.G.named_parameters():
        assert p.data.tobytes() == color_ckpt.blobs[f"color.G.{name}"].tobytes()


@pytest.mark.parametrize("cut", [3, 10, 200, -1])
def test_truncated_checkpoint_rejected(color_ckpt, tmp_path, cut):
    raw = to_bytes(color_ckpt)
    (tmp_path / "t.ckpt").write_bytes(raw[:cut])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")


def test_bad_magic_version_and_trailing_bytes(color_ckpt):
    raw = to_bytes(color_ckpt)
    assert raw[:4] == MAGIC
    with pytest.raises(CheckpointError):
        from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        from_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError):
        from_bytes(raw + b"\0")


def test_tiny_checkpoint_rejected_by_full_model(color_ckpt):
    full = Generator(ColorNetConfig())
    with pytest.raises(CheckpointError, match="shape mismatch"):
        load_module(full, color_ckpt.blobs, "color.G.")


def test_missing_file_is_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")
