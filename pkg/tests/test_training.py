import json

import numpy as np
import pytest
import torch

from partalign import model as model_module
from partalign.bmria import MaskPlan
from partalign.config import RunConfig
from partalign.datagen import generate_dataset
from partalign.losses import NonFiniteLossError
from partalign.model import RetrievalModel
from partalign.training import (RecordSet, identity_batches, load_checkpoint, load_split, lr_factor,
                                mask_seed, retrieval_run, train)
from partalign.metrics import rank_k


def _quick(**overrides):
    values = dict(epochs=2, warmup_epochs=1, seed=0, model=dict(embed_dim=16, num_heads=2))
    values.update(overrides)
    return RunConfig.smoke(**values)


def test_default_lr_schedule():
    run = RunConfig()
    lrs = [run.base_lr * lr_factor(e, run) for e in range(61)]
    assert lrs[0] == pytest.approx(1e-6)
    assert lrs[5] == pytest.approx(1e-5)
    assert lrs[60] == pytest.approx(0.0, abs=1e-15)
    assert all(a >= b for a, b in zip(lrs[5:], lrs[6:]))
    assert all(a <= b for a, b in zip(lrs[:5], lrs[1:6]))
    assert run.module_lr * lr_factor(5, run) == pytest.approx(5e-5)


@pytest.mark.parametrize("seed", range(5))
def test_identity_sampler(seed):
    g = np.random.default_rng(seed)
    identities = list(g.integers(0, 12, 60))
    batches = identity_batches(identities, 4, 2, np.random.default_rng(seed))
    assert batches
    for b in batches:
        ids = [identities[i] for i in b]
        assert len(b) == 8 and len(set(ids)) == 4
        assert all(ids.count(i) == 2 for i in set(ids))


def test_mask_seeds_are_distinct_and_stable():
    seeds = {mask_seed(0, e, i) for e in range(5) for i in range(20)}
    assert len(seeds) == 100 and mask_seed(3, 1, 2) == mask_seed(3, 1, 2)


def test_training_is_bitwise_deterministic(small_dataset):
    root, records = small_dataset
    a = train(_quick(), records, root).trace
    b = train(_quick(), records, root).trace
    assert a == b and len(a) > 2


def test_log_and_resume(small_dataset, tmp_path):
    root, records = small_dataset
    run = _quick(epochs=3)
    full = train(run, records, root, out_dir=tmp_path / "full")
    logged = [json.loads(l) for l in (tmp_path / "full/train_log.jsonl").read_text().splitlines()]
    assert logged == full.trace
    assert {"id", "sdm", "itc", "biirr", "total", "lr", "module_lr", "mask_seeds"} <= set(logged[0])

    part = tmp_path / "part"
    train(run, records, root, out_dir=part, stop_after_epoch=0)
    resumed = train(run, records, root, out_dir=part, resume=part / "checkpoint.pt")
    assert len(resumed.trace) == len(full.trace)
    for x, y in zip(resumed.trace, full.trace):
        assert x["step"] == y["step"] and x["mask_seeds"] == y["mask_seeds"]
        assert x["total"] == pytest.approx(y["total"], rel=1e-6)


def test_resume_refuses_other_config(small_dataset, tmp_path):
    root, records = small_dataset
    train(_quick(epochs=1), records, root, out_dir=tmp_path)
    with pytest.raises(ValueError, match="different run config"):
        train(_quick(epochs=1, seed=9), records, root, resume=tmp_path / "checkpoint.pt")


def test_checkpoint_round_trip_preserves_eval(small_dataset, tmp_path):
    root, records = small_dataset
    result = train(_quick(epochs=1), records, root, out_dir=tmp_path)
    data = load_split(records, root, result.model.config, "test")
    before = result.model.similarity(data.token_ids, data.images)
    loaded, state = load_checkpoint(result.checkpoint)
    assert torch.equal(loaded.similarity(data.token_ids, data.images), before)
    assert state["config_hash"] == _quick(epochs=1).config_hash()


def test_logged_mask_seeds_replay(small_dataset):
    root, records = small_dataset
    run = _quick(epochs=1)
    result = train(run, records, root)
    data = load_split(records, root, run.model, "train")
    seed = result.trace[0]["mask_seeds"][0]
    plan_a = data.plans([0], [seed])[0]
    assert MaskPlan.from_dict(plan_a.to_dict()) == data.plans([0], [seed])[0]


def test_disabled_modules_log_zero(small_dataset):
    root, records = small_dataset
    trace = train(_quick(epochs=1, model=dict(embed_dim=16, num_heads=2, use_plfa=False,
                                              use_bmria=False)), records, root).trace
    assert all(t["itc"] == 0.0 and t["biirr"] == 0.0 for t in trace)
    assert all(t["sdm"] > 0.0 for t in trace)


def test_nan_component_aborts_training(small_dataset, monkeypatch):
    root, records = small_dataset
    monkeypatch.setattr(model_module, "sdm_loss", lambda *a, **k: torch.tensor(float("nan")))
    with pytest.raises(NonFiniteLossError) as err:
        train(_quick(epochs=1), records, root)
    assert err.value.component == "sdm"


def test_augmented_training_set(small_dataset):
    root, records = small_dataset
    run = _quick()
    plain = load_split(records, root, run.model, "train")
    aug = load_split(records, root, run.model, "train", augment=True)
    assert len(aug) == 4 * len(plain)
    assert torch.equal(aug.part_masks[::4], plain.part_masks)
    assert torch.equal(aug.labels[1::4], plain.labels)
    assert not torch.equal(aug.images[1::4], plain.images)


def test_untrained_model_is_at_chance(tmp_path):
    records = generate_dataset(tmp_path, num_ids=34, images_per_id=5, seed=1)
    cfg = RunConfig.smoke().model
    data = RecordSet([r for r in records if r.split == "test"], tmp_path, cfg)
    g = len(data)
    assert g == 50
    per_id = np.bincount(data.identities.numpy())
    chance = float(np.mean([per_id[i] for i in data.identities.numpy()])) / g
    scores = []
    for seed in range(5):
        torch.manual_seed(seed)
        scores.append(rank_k(retrieval_run(RetrievalModel(cfg, 10), data), 1))
    mean = float(np.mean(scores))
    assert chance / 3 <= mean <= 3 * chance, (mean, chance)
