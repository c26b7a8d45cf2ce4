import numpy as np
import pytest

from hyperdiff import numerics as nx
from hyperdiff.denoiser import DenoiserConfig, DenoiserModel
from hyperdiff.diffusion import SamplerConfig, cosine_schedule
from hyperdiff.evaluation import PoseRecord, root_relative, synth_dataset
from hyperdiff.training import (
    TrainConfig, TrainingError, mse_loss, predict, resolve_pose_scale, root_relative_2d, train,
)

SMALL = DenoiserConfig(d_m=8, blocks=1, t_max=50)


@pytest.fixture
def records(skeleton):
    return synth_dataset(6, skeleton, seed=11)


def test_mse_loss_matches_numpy(rng):
    a, b = rng.standard_normal((2, 3, 17, 3))
    assert mse_loss(nx.Tensor(a), b).item() == pytest.approx(np.mean((a - b) ** 2), rel=1e-14)


def test_pose_scale_auto_and_fixed(records):
    ys = np.stack([r.y for r in records])
    assert resolve_pose_scale(records, TrainConfig()) == pytest.approx(root_relative(ys).std())
    assert resolve_pose_scale(records, TrainConfig(pose_scale=250.0)) == 250.0


def test_oracle_head_gives_zero_loss(records, skeleton):
    """Replacing the network output by the clean target drives every batch loss to 0."""
    cfg = TrainConfig(epochs=3, batch_size=4, seed=2)
    cfg.pose_scale = resolve_pose_scale(records, cfg)
    model = DenoiserModel(SMALL, skeleton, seed=0)
    lookup = {}
    for r in records:
        key = (root_relative_2d(r.x) / cfg.pose_scale).tobytes()
        lookup[key] = root_relative(r.y) / cfg.pose_scale
    real_forward = model.forward

    def oracle(y_t, x, t, mode="train"):
        out = real_forward(y_t, x, t, mode)
        target = np.stack([lookup[row.tobytes()] for row in np.asarray(x)])
        # keep the graph attached so backward still runs
        return nx.add(nx.mul(out, 0.0), target)

    model.forward = oracle
    history = train(model, records, cosine_schedule(SMALL.t_max), cfg)
    assert history == [0.0, 0.0, 0.0]


def test_training_is_deterministic(records, skeleton):
    def run():
        cfg = TrainConfig(epochs=4, batch_size=4, seed=9, lr=1e-2)
        cfg.pose_scale = resolve_pose_scale(records, cfg)
        model = DenoiserModel(SMALL, skeleton, seed=3)
        hist = train(model, records, cosine_schedule(SMALL.t_max), cfg)
        return hist, model.state_dict()

    (h1, s1), (h2, s2) = run(), run()
    assert h1 == h2
    assert all(np.array_equal(s1[k], s2[k]) for k in s1)


def test_training_reduces_loss(records, skeleton):
    cfg = TrainConfig(epochs=60, batch_size=6, seed=0, lr=1e-2, lr_schedule="cosine", draws_per_record=2)
    cfg.pose_scale = resolve_pose_scale(records, cfg)
    model = DenoiserModel(DenoiserConfig(d_m=16, blocks=1, t_max=50), skeleton, seed=0)
    hist = train(model, records, cosine_schedule(50), cfg)
    assert np.mean(hist[-5:]) < 0.5 * np.mean(hist[:5])


def test_on_epoch_callback(records, skeleton):
    seen = []
    cfg = TrainConfig(epochs=2, batch_size=3, pose_scale=300.0)
    hist = train(DenoiserModel(SMALL, skeleton), records, cosine_schedule(SMALL.t_max), cfg,
                 on_epoch=lambda e, loss: seen.append((e, loss)))
    assert seen == list(enumerate(hist))


def test_missing_ground_truth_rejected(records, skeleton):
    bad = records + [PoseRecord("nogt", records[0].x)]
    with pytest.raises(TrainingError, match="nogt"):
        train(DenoiserModel(SMALL, skeleton), bad, cosine_schedule(SMALL.t_max), TrainConfig(pose_scale=1.0))


def test_unresolved_scale_rejected(records, skeleton):
    with pytest.raises(ValueError):
        train(DenoiserModel(SMALL, skeleton), records, cosine_schedule(SMALL.t_max), TrainConfig())


def test_non_finite_loss_aborts(records, skeleton):
    model = DenoiserModel(SMALL, skeleton)
    model.head_W.data[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(model, records, cosine_schedule(SMALL.t_max), TrainConfig(pose_scale=300.0))


def test_predict_shapes_and_determinism(records, skeleton):
    model = DenoiserModel(SMALL, skeleton, seed=1)
    sched = cosine_schedule(SMALL.t_max)
    a = predict(model, records, SamplerConfig(hypotheses=3, iterations=2, seed=4), sched, 300.0)
    b = predict(model, records, SamplerConfig(hypotheses=3, iterations=2, seed=4), sched, 300.0)
    assert a.shape == (len(records), 3, 17, 3)
    np.testing.assert_array_equal(a, b)
    one = predict(model, records, SamplerConfig(), sched, 300.0)
    assert one.size == len(records) * 17 * 3
