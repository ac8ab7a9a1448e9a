import numpy as np
import pytest

from landmark_stn.errors import DegenerateInputError, DivergenceError, FormatError
from landmark_stn.model import ModelConfig, build_model
from landmark_stn.synth import GeneratorConfig, generate_split
from landmark_stn.train import (
    RunReport,
    TrainConfig,
    batch_order,
    evaluate,
    load_checkpoint,
    loss_summary,
    save_checkpoint,
    sgd_step,
    time_inference,
    train,
    write_report,
)

CFG = ModelConfig(channels=(3, 4, 4), image_extent=32, head_hidden=8, dilations=(1, 2))
GEN = GeneratorConfig(extent=32)


@pytest.fixture(scope="module")
def data():
    return generate_split(range(12), GEN)


@pytest.fixture(scope="module")
def val():
    return generate_split(range(500, 506), GEN)


def test_zero_learning_rate_leaves_parameters_unchanged(data):
    params = build_model(CFG, 0)
    state = train(params, CFG, data, TrainConfig(lr=0.0, epochs=2, batch_size=5))
    assert all(np.array_equal(state.params[k], params[k]) for k in params)
    assert len(state.history) == 2


def test_train_does_not_mutate_inputs(data):
    params = build_model(CFG, 0)
    before = {k: v.copy() for k, v in params.items()}
    state = train(params, CFG, data, TrainConfig(lr=0.01, epochs=1, batch_size=5))
    assert all(np.array_equal(before[k], params[k]) for k in params)
    assert any(not np.array_equal(state.params[k], params[k]) for k in params)


def test_batch_order_depends_on_seed_and_epoch():
    assert np.array_equal(batch_order(10, 1, 2), batch_order(10, 1, 2))
    assert not np.array_equal(batch_order(10, 1, 2), batch_order(10, 1, 3))
    assert sorted(batch_order(10, 0, 0)) == list(range(10))


def test_sgd_momentum_update():
    p, v = {"w": np.array([1.0])}, {"w": np.array([0.5])}
    sgd_step(p, v, {"w": np.array([2.0])}, lr=0.1, momentum=0.9)
    assert v["w"][0] == 0.9 * 0.5 + 2.0
    assert p["w"][0] == 1.0 - 0.1 * (0.9 * 0.5 + 2.0)


def test_cosine_schedule():
    t = TrainConfig(lr=0.2, schedule="cosine")
    assert t.lr_at(0, 10) == 0.2
    assert t.lr_at(5, 10) == pytest.approx(0.1)
    assert TrainConfig(lr=0.2).lr_at(9, 10) == 0.2
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(schedule="step")


def test_divergence_names_epoch_and_batch(data):
    bad = data.subset(range(len(data)))
    order = batch_order(len(bad), 0, 0)
    victim = order[7]  # lands in the second batch of five
    bad.images[victim, 0, 3, 3] = np.nan
    with pytest.raises(DivergenceError) as exc:
        train(build_model(CFG, 0), CFG, bad, TrainConfig(epochs=1, batch_size=5))
    assert (exc.value.epoch, exc.value.batch) == (1, 1)
    assert "epoch 1, batch 1" in str(exc.value)


def test_empty_split_rejected(data):
    with pytest.raises(DegenerateInputError):
        train(build_model(CFG, 0), CFG, data.subset([]), TrainConfig(epochs=1))
    with pytest.raises(DegenerateInputError):
        evaluate(build_model(CFG, 0), CFG, data.subset([]))


def test_resume_replays_bit_identically(data, val, tmp_path):
    params = build_model(CFG, 1)
    tcfg = TrainConfig(lr=0.02, epochs=3, batch_size=5, schedule="cosine",
                       checkpoint_interval=1, checkpoint_dir=str(tmp_path))
    full = train(params, CFG, data, tcfg, val=val)
    state, cfg2, tcfg2 = load_checkpoint(tmp_path / "epoch0001.ckpt")
    assert cfg2 == CFG and tcfg2 == tcfg and state.epoch == 1
    resumed = train(params, cfg2, data, tcfg2, val=val, resume=state)
    for k in params:
        assert resumed.params[k].tobytes() == full.params[k].tobytes()
        assert resumed.velocity[k].tobytes() == full.velocity[k].tobytes()
    assert RunReport(resumed.history).fingerprint() == RunReport(full.history).fingerprint()


def test_checkpoint_round_trip_and_corruption(tmp_path):
    params = build_model(CFG, 2)
    from landmark_stn.train import TrainState

    state = TrainState(params, {k: np.ones_like(v) for k, v in params.items()}, 4)
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, state, CFG, TrainConfig(epochs=9))
    back, cfg, tcfg = load_checkpoint(path)
    assert back.epoch == 4 and tcfg.epochs == 9 and cfg == CFG
    assert all(back.params[k].tobytes() == params[k].tobytes() for k in params)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 7])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b"garbage" + raw)
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_ground_truth_scores_100_at_any_threshold(data):
    params = build_model(CFG, 0)
    for thr in (1e-9, 0.5, 4.375, 100.0):
        rep = evaluate(params, CFG, data, threshold_px=thr, predictions=data.landmarks)
        assert rep.pdl == 100.0
        assert rep.per_step[CFG.steps] == 100.0


def test_tiny_threshold_scores_zero(data):
    rep = evaluate(build_model(CFG, 0), CFG, data, threshold_px=1e-12)
    assert rep.pdl == 0.0
    with pytest.raises(ValueError):
        evaluate(build_model(CFG, 0), CFG, data, threshold_px=0.0)


def test_breakdowns_are_consistent(data):
    rep = evaluate(build_model(CFG, 3), CFG, data, threshold_px=6.0)
    assert rep.threshold_px == 6.0
    counts = data.visible.sum(axis=0)
    weighted = sum(p * c for p, c in zip(rep.per_landmark.values(), counts) if c) / counts.sum()
    assert abs(weighted - rep.pdl) < 1e-9
    assert set(rep.per_step) == {1, 2, 3}
    assert rep.losses.shape == (len(data), 2)
    # default threshold scales 35 px at 512 down to the image width
    assert evaluate(build_model(CFG, 3), CFG, data).threshold_px == 35 * 32 / 512


def test_reports_are_pure_functions_of_config_and_seed(data, val, tmp_path):
    def run():
        params = build_model(CFG, 5)
        st = train(params, CFG, data, TrainConfig(lr=0.02, epochs=2, batch_size=4), val=val)
        rep = RunReport(st.history, evaluate(st.params, CFG, val))
        rep.timing_ms = time_inference(st.params, CFG, val.images[:2], passes=2)
        return rep

    a, b = run(), run()
    assert a.fingerprint() == b.fingerprint()
    write_report(a, tmp_path / "a", val.seeds)
    write_report(b, tmp_path / "b", val.seeds)
    for name in ("epochs.csv", "summary.csv", "samples.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    timing = (tmp_path / "a" / "timing.csv").read_text().splitlines()
    assert timing[0] == "step,median_ms,increment_ms" and len(timing) == 4


def test_loss_summary_reports_scale_residual(val):
    s = loss_summary(build_model(CFG, 0), CFG, val)
    assert s["total"] == pytest.approx(s["regression"] + s["scale"])
    assert s["scale_residual"] > 0
