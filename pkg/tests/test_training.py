import json

import numpy as np
import pytest

from procver.model import ModelConfig, load_checkpoint
from procver.training import TrainConfig, Trainer, TrainingDivergence, batch_loss, build_batch, class_index, train


def mcfg(ds, **kw):
    return ModelConfig(**{"D_in": ds.dim, "D": 8, "K": 4, "layers": 1, "heads": 2, "D_prime": 8, "C": len(ds.train.procedures), **kw})


def tcfg(**kw):
    return TrainConfig(**{"batch_size": 8, "epochs": 3, "K": 4, "base_lr": 3e-3, "val_pairs": (5, 5), **kw})


def test_config_parsing():
    c = TrainConfig.from_dict({"lambda": 0.0, "epochs": 2})
    assert c.lam == 0.0 and c.epochs == 2
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})
    with pytest.raises(ValueError):
        TrainConfig(batch_size=7)


def test_batch_pairs_share_procedures(small_ds, rng):
    clips, labels = build_batch(small_ds, tcfg(), rng)
    assert clips.shape == (8, 4, small_ds.dim)
    assert np.array_equal(labels[0::2], labels[1::2])
    assert set(labels) <= set(class_index(small_ds.train).values())


def test_lambda_zero_total_is_classification_only(small_ds, rng):
    from procver.model import CatModel

    m = CatModel(mcfg(small_ds))
    clips, labels = build_batch(small_ds, tcfg(), rng)
    total, parts = batch_loss(m, clips, labels, 0.0)
    assert total.item() == pytest.approx(parts.cls)
    assert parts.seq > 0
    total1, parts1 = batch_loss(m, clips, labels, 1.0)
    assert total1.item() == pytest.approx(parts1.cls + parts1.seq)


def test_mismatched_model_rejected(small_ds):
    with pytest.raises(ValueError):
        Trainer(small_ds, mcfg(small_ds, C=99), tcfg())
    with pytest.raises(ValueError):
        Trainer(small_ds, mcfg(small_ds, K=5), tcfg())


def test_training_reduces_classification_loss(small_ds):
    res = train(small_ds, mcfg(small_ds), tcfg(epochs=30))
    first = np.mean([r["cls"] for r in res.log.steps[:3]])
    last = np.mean([r["cls"] for r in res.log.steps[-3:]])
    assert last < first
    rec = res.log.steps[0]
    assert rec["cls_sum"] == pytest.approx(rec["cls"] * 8)
    assert rec["lr"] == pytest.approx(3e-3)
    assert res.log.steps[-1]["lr"] < 3e-3


def test_run_writes_artifacts(tmp_path, small_ds):
    tr = Trainer(small_ds, mcfg(small_ds), tcfg(epochs=2, checkpoint_every=1))
    tr.run(tmp_path)
    assert {p.name for p in tmp_path.iterdir()} >= {"last.ckpt", "train_log.jsonl", "epoch0001.ckpt", "epoch0002.ckpt"}
    lines = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert sum(r["kind"] == "step" for r in lines) == tr.total_steps
    assert load_checkpoint(tmp_path / "last.ckpt").extra["step"] == tr.total_steps


def test_resume_reproduces_loss_trajectory(tmp_path, small_ds):
    full = Trainer(small_ds, mcfg(small_ds), tcfg(epochs=4))
    full.run()
    part = Trainer(small_ds, mcfg(small_ds), tcfg(epochs=4))
    part.run(stop_at_step=5)
    part.save(tmp_path / "mid.ckpt")
    resumed = Trainer.resume(small_ds, tmp_path / "mid.ckpt")
    resumed.run()
    assert [r["total"] for r in resumed.log.steps] == [r["total"] for r in full.log.steps]
    for k, v in full.model.state_dict().items():
        assert resumed.model.params[k].data.tobytes() == v.tobytes()


def test_non_finite_features_abort_with_divergence(small_ds):
    import copy

    bad = copy.copy(small_ds)
    bad._cache = {k: np.full_like(v, np.nan) for k, v in small_ds._cache.items()}
    tr = Trainer(bad, mcfg(bad), tcfg())
    with pytest.raises(TrainingDivergence, match="step 0"):
        tr.train_step()


def test_best_model_tracks_validation(small_cfg):
    from procver.data import GeneratorConfig, generate_dataset

    ds = generate_dataset(GeneratorConfig(**{**small_cfg.to_dict(), "procedures_per_task": 6, "split_counts": [3, 2, 1]}))
    res = train(ds, mcfg(ds), tcfg(epochs=2))
    assert res.best_auc is not None and 0 <= res.best_auc <= 1
    assert len(res.log.epochs) == 2 and all(e["val_auc"] is not None for e in res.log.epochs)
