import json

import numpy as np
import pytest

from conftest import small_model_config
from oracles import raster_jaccard, rect_polygon
from stngrasp.data import make_background_patches
from stngrasp.errors import ConfigError, ContractError, NumericError
from stngrasp.fixtures import make_sample
from stngrasp.geometry import GraspRect
from stngrasp.pipeline import GraspDetector
from stngrasp.tensor import Tensor, backward
from stngrasp import functional as F
from stngrasp.trainer import (
    EvalReport,
    PhaseConfig,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    finetune_back_to_front,
    format_table,
    frozen_except,
    make_stage_targets,
    pretrain_component,
    top_right_order,
    train,
)


def params_of(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


def same_params(a, b):
    return a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


@pytest.fixture(scope="module")
def scenes():
    return [make_sample(40 + i, n_positive=2) for i in range(2)]


def tiny_train_config(**kw):
    d = dict(seed=1, model=small_model_config(),
             pretrain={n: PhaseConfig(epochs=3, lr=1e-3, batch_size=2)
                       for n in ("stage1", "stage2", "stage3", "classifier")},
             finetune=PhaseConfig(epochs=1, lr=1e-4, batch_size=2), background_patches=2)
    d.update(kw)
    return TrainConfig(**d)


# ------------------------------------------------------------------- targets

def test_targets_order_and_mask(small_config):
    pos = [GraspRect(100, 300, 0, 40, 20), GraspRect(380, 20, 10, 40, 20), GraspRect(250, 100, -20, 50, 20)]
    s = make_sample(1)
    s = type(s)(s.image, pos, [])
    t = make_stage_targets(s, small_config)
    assert t.slot_rects == [pos[1], pos[2], pos[0]]
    np.testing.assert_array_equal(t.mask, [1, 1, 1, 0])
    np.testing.assert_array_equal(t.locations[3], [0, 0])
    np.testing.assert_allclose(t.locations[1], [0.25, -0.5])
    np.testing.assert_allclose(t.thetas[:3], np.radians([10, -20, 0]))
    np.testing.assert_allclose(t.sizes[2], [40 / 60, 20 / 30])
    assert [lbl for _, lbl in t.classifier_examples] == [1, 1, 1]
    b = small_config.location_bound
    np.testing.assert_allclose(t.locations[0], [b, -b])  # clipped


def test_top_right_order_ties_are_stable():
    a, b = GraspRect(399, 10, 0, 1, 1), GraspRect(389, 0, 0, 1, 1)
    assert top_right_order([a, b], 400) == [b, a]


def test_no_positive_sample_is_excluded(small_config, caplog):
    s = make_sample(2)
    empty = type(s)(s.image, [], s.negatives)
    assert make_stage_targets(empty, small_config) is None
    assert "no positive" in caplog.text
    bg = make_background_patches(1, seed=0)[0]
    t = make_stage_targets(bg, small_config, np.random.default_rng(0))
    assert t.mask.sum() == 0 and [lbl for _, lbl in t.classifier_examples] == [0, 0]


# ------------------------------------------------------------------- learning

def test_classifier_fits_two_examples(small_config):
    s = make_sample(3, n_positive=1)
    s = type(s)(s.image, s.positives, s.negatives[:1])
    m = GraspDetector(small_config)
    hist = pretrain_component(m, "classifier", [s], PhaseConfig(epochs=200, lr=3e-3, batch_size=2)).history
    assert len(hist) == 200
    assert min(hist) < 0.1


def test_stage1_fits_one_sample(small_config):
    m = GraspDetector(small_config)
    hist = pretrain_component(m, "stage1", [make_sample(4, n_positive=1)],
                              PhaseConfig(epochs=500, lr=1e-3, batch_size=1)).history
    assert hist[-1] < 1e-3


def test_losses_halve_on_a_small_recipe(scenes):
    m = GraspDetector(small_model_config(), seed=0)
    cfg = tiny_train_config(pretrain={n: PhaseConfig(epochs=60, lr=3e-3, batch_size=2)
                                      for n in ("stage1", "stage2", "stage3", "classifier")})
    res = train(m, scenes, cfg, phases=[])
    for name in ("stage1", "stage2", "stage3", "classifier"):
        h = res[name].history
        assert np.mean(h[-3:]) < 0.5 * np.mean(h[:3]), name


def test_zero_epochs_and_zero_lr_change_nothing(small_config, scenes):
    m = GraspDetector(small_config, seed=3)
    before = params_of(m)
    for comp in ("stage1", "stage2", "stage3", "classifier", "baseline"):
        assert pretrain_component(m, comp, scenes, PhaseConfig(epochs=0)).history == []
    pretrain_component(m, "stage2", scenes, PhaseConfig(epochs=2, lr=0.0, batch_size=2))
    finetune_back_to_front(m, scenes, PhaseConfig(epochs=1, lr=0.0, batch_size=2))
    finetune_back_to_front(m, scenes, PhaseConfig(epochs=1, lr=1e-3), phases=[])
    assert same_params(before, params_of(m))


def test_bad_inputs(small_config, scenes):
    m = GraspDetector(small_config)
    with pytest.raises(ContractError):
        pretrain_component(m, "stage1", [], PhaseConfig())
    with pytest.raises(ContractError):
        pretrain_component(m, "stage1", make_background_patches(2, 0), PhaseConfig())
    with pytest.raises(ConfigError):
        pretrain_component(m, "stage4", scenes, PhaseConfig())
    with pytest.raises(ConfigError):
        finetune_back_to_front(m, scenes, PhaseConfig(), phases=["stage1", "head"])
    with pytest.raises(ConfigError):
        tiny_train_config(finetune_phases=["decoder"])
    with pytest.raises(ConfigError):
        tiny_train_config(version=2)


def test_nan_input_aborts(small_config):
    s = make_sample(5)
    ch = s.image.channels.copy()
    ch[0, 0, 0] = np.nan
    bad = type(s)(type(s.image)(ch, s.image.crop_offset, s.image.source_id), s.positives, s.negatives)
    with pytest.raises(NumericError):
        pretrain_component(GraspDetector(small_config), "stage1", [bad], PhaseConfig(epochs=1))


def test_huge_learning_rate_diverges(small_config, scenes):
    m = GraspDetector(small_config)
    with pytest.raises(TrainingDiverged):
        pretrain_component(m, "stage2", scenes, PhaseConfig(epochs=2, lr=1e200, batch_size=1))


def test_pretraining_is_reproducible(small_config, scenes):
    runs = []
    for _ in range(2):
        m = GraspDetector(small_config, seed=7)
        pretrain_component(m, "stage3", scenes, PhaseConfig(epochs=3, lr=1e-3, batch_size=1), seed=4)
        runs.append(params_of(m))
    assert same_params(*runs)


def test_log_records(small_config, scenes):
    rows = []
    pretrain_component(GraspDetector(small_config), "stage2", scenes,
                       PhaseConfig(epochs=2, lr=1e-3, batch_size=2), log_fn=rows.append)
    assert [r["step"] for r in rows] == [0, 1, 2, 3]
    assert set(rows[0]) == {"phase", "step", "loss", "lr", "wall_ms"}
    assert rows[0]["phase"] == "pretrain:stage2"


# ------------------------------------------------------------------- freezing and masking

def test_frozen_blocks_do_not_move_during_finetune(small_config, scenes):
    m = GraspDetector(small_config, seed=2)
    rng = np.random.default_rng(0)
    for name in ("stage1", "stage2", "stage3", "classifier"):
        w = m.component(name).head.weight
        w.data = rng.normal(0, 0.3, w.shape)
    names = dict(m.named_parameters())
    snaps = []

    def hook(event, phase):
        snaps.append((event, phase, params_of(m)))

    finetune_back_to_front(m, scenes, PhaseConfig(epochs=1, lr=1e-2, batch_size=2), phase_hook=hook)
    assert [(e, p) for e, p, _ in snaps][::2] == [("start", p) for p in ("classifier", "stage3", "stage2", "stage1")]
    for (_, phase, before), (_, _, after) in zip(snaps[::2], snaps[1::2]):
        moved = {k for k in names if before[k].tobytes() != after[k].tobytes()}
        assert moved and all(k.startswith(phase + ".") for k in moved), phase


def test_frozen_except_restores_flags(small_config):
    m = GraspDetector(small_config)
    with frozen_except(m, "stage2"):
        assert all(p.requires_grad == n.startswith("stage2.") for n, p in m.named_parameters())
    assert all(p.requires_grad for p in m.parameters())


def test_masked_slots_receive_zero_gradient(small_config):
    m = GraspDetector(small_config)
    rng = np.random.default_rng(1)
    for p in m.stage1.parameters():
        p.data = p.data + rng.normal(0, 0.05, p.shape)
    s = make_sample(6, n_positive=1)
    t = make_stage_targets(s, small_config)
    pred = m.map_locations(m.stage1(Tensor(s.image.channels[None])))
    target = t.locations.ravel()[None].copy()
    target[0, 2:] = 1e6  # garbage in masked slots must not matter
    loss = F.masked_mse(pred, target, np.repeat(t.mask, 2)[None])
    head = m.stage1.head
    backward(loss, [head.bias, head.weight])
    assert np.all(head.bias.grad[2:] == 0)
    assert np.all(head.weight.grad[2:] == 0)
    assert np.abs(head.bias.grad[:2]).sum() > 0


# ------------------------------------------------------------------- evaluation

def oracle_success(pred, gts):
    def ang(a, b):
        d = abs(a - b) % 180
        return min(d, 180 - d)
    return any(ang(pred.theta, g.theta) < 30 and raster_jaccard(rect_polygon(pred.x, pred.y, pred.theta, pred.w, pred.h), rect_polygon(g.x, g.y, g.theta, g.w, g.h)) > 0.25
               for g in gts)


def test_evaluate_with_forced_answers(small_config):
    samples = [make_sample(50 + i, n_positive=2) for i in range(4)]
    m = GraspDetector(small_config)
    rep = evaluate(m, samples, detect_fn=lambda _m, img: next(s.positives[1] for s in samples
                                                              if s.image.channels is img))
    assert rep.accuracy == 100.0
    assert [o["nearest_gt"] for o in rep.outcomes] == [1, 1, 1, 1]

    def stub(_m, img):
        s = next(s for s in samples if s.image.channels is img)
        g = s.positives[0]
        if s is samples[2]:
            return GraspRect(g.x, g.y, g.theta + 35, g.w, g.h)
        return GraspRect(g.x + 3, g.y - 2, g.theta + 10, g.w * 1.1, g.h)

    rep = evaluate(m, samples, detect_fn=stub)
    assert rep.accuracy == 75.0
    expected = [oracle_success(stub(None, s.image.channels), s.positives) for s in samples]
    assert [o["success"] for o in rep.outcomes] == expected
    assert "75.00" in rep.table()
    assert rep.mean_ms >= 0 and rep.median_ms >= 0


def test_evaluate_needs_ground_truth(small_config):
    with pytest.raises(ContractError):
        evaluate(GraspDetector(small_config), make_background_patches(2, 0))


def test_results_table_layout():
    rows = [EvalReport("Direct Regression", 61.234, 10.0, 9.0, []),
            EvalReport("Multiple Stage STN", 87.5, 41.26, 40.0, [])]
    text = format_table(rows)
    lines = text.splitlines()
    assert "Method" in lines[1] and "Accuracy (%)" in lines[1] and "Time / Image" in lines[1]
    assert "| Multiple Stage STN | 87.50" in text and "41.3 msec" in text
    assert len({len(line) for line in lines}) == 1


# ------------------------------------------------------------------- configuration

def test_train_config_round_trip(tmp_path):
    cfg = tiny_train_config()
    cfg.save(tmp_path / "c.json")
    back = TrainConfig.from_file(tmp_path / "c.json")
    assert back == cfg and back.hash() == cfg.hash()
    d = json.loads((tmp_path / "c.json").read_text())
    d["seed"] = 2
    assert TrainConfig.from_dict(d).hash() != cfg.hash()


def test_shipped_configs_load():
    from conftest import REPO
    for path in sorted((REPO / "configs").glob("*.json")):
        TrainConfig.from_file(path)


def test_full_train_is_reproducible(scenes):
    runs = []
    for _ in range(2):
        m = GraspDetector(small_model_config(), seed=0)
        train(m, scenes, tiny_train_config())
        runs.append(params_of(m))
    assert same_params(*runs)
