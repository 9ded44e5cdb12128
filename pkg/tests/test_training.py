from dataclasses import replace

import numpy as np
import pytest

from gdkvm.model import ToyModel
from gdkvm.training import (TrainConfig, ablation_means, build_model, evaluate, load_checkpoint, load_config,
                            learning_rate, parse_config_text, rows_to_csv, save_checkpoint, summarize, train, train_group,
                            training_batch)

TINY = TrainConfig(steps=3, batch=2, resolution=16, axis_major=3, axis_minor=2, drift=1, ck=4, cv=4, width=3,
                   dec_width=4, frames=3, eval_videos=2, distractors=0)


class TestConfig:
    def test_parse(self):
        cfg = parse_config_text("steps = 12  # short\n\nstrategy=noalpha\nkpff = off\nlr = 1e-4\n")
        assert cfg.steps == 12 and cfg.strategy == "noalpha" and cfg.kpff is False and cfg.lr == 1e-4

    def test_round_trip(self):
        cfg = replace(TrainConfig(), lr=0.0123, kpff=False, strategy="sanity")
        assert parse_config_text("\n".join(cfg.to_lines())) == cfg

    @pytest.mark.parametrize("text", ["bogus = 1", "steps 3", "kpff = maybe", "strategy = lstm"])
    def test_errors(self, text):
        with pytest.raises(ValueError):
            parse_config_text(text)

    def test_load_with_overrides(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("steps = 7\nseed = 3\n")
        cfg = load_config(str(path), seed=9, strategy=None)
        assert cfg.steps == 7 and cfg.seed == 9 and cfg.strategy == "gdr"


class TestSchedule:
    def test_constant(self):
        cfg = replace(TINY, lr=0.3, schedule="constant")
        assert [learning_rate(cfg, s) for s in range(3)] == [0.3] * 3

    def test_cosine_endpoints_and_midpoint(self):
        cfg = replace(TINY, lr=0.2, steps=100, schedule="cosine")
        assert learning_rate(cfg, 0) == 0.2
        assert learning_rate(cfg, 50) == pytest.approx(0.1, abs=1e-15)
        lrs = [learning_rate(cfg, s) for s in range(100)]
        assert all(a > b for a, b in zip(lrs, lrs[1:])) and lrs[-1] > 0

    def test_unknown_schedule(self):
        with pytest.raises(ValueError):
            parse_config_text("schedule = linear\n")
        with pytest.raises(ValueError):
            learning_rate(replace(TINY, schedule="step"), 0)


class TestCheckpoint:
    def test_zero_steps_is_initial(self, tmp_path):
        cfg = replace(TINY, steps=0)
        result = train(cfg)
        init = build_model(cfg).params
        assert result.losses == [] and all(np.array_equal(result.params[k], init[k]) for k in init)

    def test_round_trip(self, tmp_path):
        result = train(TINY)
        path = str(tmp_path / "m.ckpt")
        manifest = save_checkpoint(path, result.params, TINY)
        params, cfg = load_checkpoint(path)
        assert cfg == TINY and set(params) == set(result.params)
        for k in params:
            np.testing.assert_array_equal(params[k], result.params[k])
        assert open(manifest).read().startswith("# gdkvm checkpoint manifest")

    def test_missing_tensor(self, tmp_path):
        result = train(replace(TINY, steps=0))
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(path, result.params, TINY)
        with open(path, "r+b") as fh:
            fh.truncate(20)
        with pytest.raises(ValueError):
            load_checkpoint(path)


def test_same_seed_same_run():
    a, b = train(TINY), train(TINY)
    assert a.losses == b.losses and a.alphas == b.alphas
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = train(replace(TINY, seed=1))
    assert c.losses != a.losses


def test_batches_are_seeded():
    v1, m1 = training_batch(TINY, 4)
    v2, m2 = training_batch(TINY, 4)
    assert np.array_equal(v1, v2) and np.array_equal(m1, m2)
    assert not np.array_equal(v1, training_batch(TINY, 5)[0])


def test_evaluate_rows():
    from gdkvm.training import eval_set

    model = ToyModel(TINY.model_config(), build_model(TINY).params, TINY.update_strategy)
    rows = evaluate(model, *eval_set(TINY))
    assert len(rows) == TINY.eval_videos * (TINY.frames - 1)
    assert {r["frame"] for r in rows} == {1, 2}
    summ = summarize(rows)
    assert set(summ) == {"dice", "iou", "hd", "asd"}


def test_ablation_helpers():
    rows = [{"variant": "gdr", "seed": 0, "dice": 0.8, "iou": 0.6, "hd": 3.0, "asd": 1.0},
            {"variant": "gdr", "seed": 1, "dice": 0.6, "iou": 0.4, "hd": 5.0, "asd": 2.0}]
    assert ablation_means(rows)["gdr"]["dice"] == pytest.approx(0.7)
    text = rows_to_csv(rows, ["variant", "seed", "dice"])
    assert text.splitlines() == ["variant,seed,dice", "gdr,0,0.800000", "gdr,1,0.600000"]


@pytest.mark.slow
def test_loss_decreases_on_default_spec():
    result = train(replace(TrainConfig(), steps=200))
    assert np.mean(result.losses[-10:]) < result.losses[0]


def test_group_equals_independent_runs():
    cfgs = [replace(TINY, strategy=s) for s in ("gdr", "baseline")] + [replace(TINY, kpff=False)]
    grouped = train_group(cfgs)
    for cfg, res in zip(cfgs, grouped):
        alone = train(cfg)
        assert res.losses == alone.losses
        assert all(np.array_equal(res.params[k], alone.params[k]) for k in alone.params)
    with pytest.raises(ValueError):
        train_group([TINY, replace(TINY, seed=1)])
