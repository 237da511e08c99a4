import numpy as np
import pytest
from scipy import sparse

from meshgcn.model import DecoderConfig, read_checkpoint
from meshgcn.sampling import build_hierarchy
from meshgcn.shapes import icosphere
from meshgcn.train import (
    HISTORY_FIELDS,
    AdamState,
    NumericalError,
    TrainConfig,
    adam_step,
    generate_synthetic,
    l1_loss,
    laplacian_residual,
    read_history,
    smooth_loss,
    total_loss,
    train,
)

from conftest import assert_gradient_matches


def path_laplacian():
    return sparse.csr_matrix(np.array([[1, -1, 0], [-1, 2, -1], [0, -1, 1]], dtype=float))


# -- losses ----------------------------------------------------------------


def test_l1_examples():
    rng = np.random.default_rng(0)
    gt = rng.normal(size=(5, 3))
    assert l1_loss(gt, gt.copy())[0] == 0.0
    assert l1_loss(gt + 1, gt)[0] == pytest.approx(1.0, abs=1e-15)
    pred = rng.normal(size=(5, 3))
    value, grad = l1_loss(pred, gt)
    assert value == sum(abs(a - b) for a, b in zip(pred.ravel(), gt.ravel())) / 15
    np.testing.assert_array_equal(grad, np.sign(pred - gt) / 15)
    assert not l1_loss(gt, gt)[1].any()
    with pytest.raises(ValueError):
        l1_loss(gt, gt[:4])


def test_smooth_loss_constant_and_translation():
    h = build_hierarchy(icosphere(1), [20])
    L = h.levels[0].smooth_laplacian
    for red in ("row_mean", "frobenius"):
        assert smooth_loss(np.tile([1.0, 2.0, 3.0], (42, 1)), L, red)[0] == 0.0
        Y = np.random.default_rng(1).normal(size=(42, 3))
        a = smooth_loss(Y, L, red)[0]
        b = smooth_loss(Y + [5.0, -1.0, 2.0], L, red)[0]
        assert a == pytest.approx(b, rel=1e-12)


def test_smooth_loss_path_hand_values():
    Y = np.array([[0.0, 0, 0], [1, 0, 0], [0, 0, 0]])
    # L @ Y has x-column (-1, 2, -1)
    assert smooth_loss(Y, path_laplacian(), "frobenius")[0] == pytest.approx(np.sqrt(6), abs=1e-15)
    assert smooth_loss(Y, path_laplacian(), "row_mean")[0] == pytest.approx(4 / 3, abs=1e-15)


def test_smooth_loss_zero_gradient_at_zero():
    for red in ("row_mean", "frobenius"):
        value, grad = smooth_loss(np.zeros((3, 3)), path_laplacian(), red)
        assert value == 0.0 and not grad.any()


def test_smooth_loss_rejects_mismatch():
    with pytest.raises(ValueError):
        smooth_loss(np.zeros((4, 3)), path_laplacian())
    with pytest.raises(ValueError):
        smooth_loss(np.zeros((3, 3)), path_laplacian(), "sum")


def test_total_loss_cases():
    rng = np.random.default_rng(0)
    L = path_laplacian()
    pred, gt = rng.normal(size=(2, 3, 3))
    assert total_loss(pred, gt, L, 0.0)[0] == l1_loss(pred, gt)[0]
    tot, _, l1, sm = total_loss(gt, gt, L, 0.1)
    assert l1 == 0 and tot == pytest.approx(0.1 * smooth_loss(gt, L)[0]) and tot > 0
    with pytest.raises(ValueError):
        total_loss(pred, gt, L, -1.0)


@pytest.mark.parametrize("reduction", ["row_mean", "frobenius"])
@pytest.mark.parametrize("seed", range(20))
def test_total_loss_gradient(seed, reduction):
    rng = np.random.default_rng(seed)
    h_lap = build_hierarchy(icosphere(1), [20]).levels[1].smooth_laplacian
    pred = rng.normal(size=(2, 20, 3))
    gt = pred + rng.uniform(0.01, 1, size=pred.shape) * rng.choice([-1, 1], size=pred.shape)
    f = lambda: total_loss(pred, gt, h_lap, 0.7, reduction)[0]
    assert_gradient_matches(f, pred, total_loss(pred, gt, h_lap, 0.7, reduction)[1])


def test_laplacian_residual_definition():
    Y = np.array([[0.0, 0, 0], [1, 0, 0], [0, 0, 0]])
    assert laplacian_residual(Y, path_laplacian()) == pytest.approx(np.sqrt(6) / 3)


# -- Adam ------------------------------------------------------------------


def test_adam_single_step_closed_form():
    p = {"w": np.zeros(1)}
    s = AdamState(lr=0.001)
    adam_step(p, {"w": np.ones(1)}, s)
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    assert p["w"][0] == pytest.approx(-0.001 * m_hat / (np.sqrt(v_hat) + 1e-8), rel=1e-12)
    assert s.step == 1


def test_adam_zero_gradient_is_fixed_point():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(3, 2))
    p = {"w": w.copy()}
    s = AdamState()
    adam_step(p, {"w": np.zeros((3, 2))}, s)
    np.testing.assert_array_equal(p["w"], w)


def test_adam_moments_decay():
    p = {"w": np.zeros(2)}
    s = AdamState(lr=1e-3)
    adam_step(p, {"w": np.ones(2)}, s)
    m0 = s.m["w"].copy()
    adam_step(p, {"w": np.zeros(2)}, s)
    np.testing.assert_allclose(s.m["w"], 0.9 * m0)


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(NumericalError, match="blocks.0.conv1.theta"):
        adam_step({"blocks.0.conv1.theta": np.zeros(2)},
                  {"blocks.0.conv1.theta": np.array([0.0, np.nan])}, AdamState())


def test_schedule_halves_every_20_epochs():
    s = AdamState(lr=0.001, decay_every=20)
    assert s.learning_rate(0) == 0.001
    assert s.learning_rate(19) == 0.001
    assert s.learning_rate(20) == 0.0005
    assert s.learning_rate(40) == 0.00025


# -- synthetic data --------------------------------------------------------


def test_synthetic_dataset_properties():
    base = icosphere(2)
    a = generate_synthetic(base, 5, 10, seed=3)
    b = generate_synthetic(base, 5, 10, seed=3)
    assert a.shapes.tobytes() == b.shapes.tobytes()
    np.testing.assert_array_equal(a.shape_of(np.zeros(5)), base.vertices)
    rng = np.random.default_rng(0)
    z1, z2 = rng.uniform(-1, 1, size=(2, 5))
    lhs = a.shape_of(z1 + z2) - base.vertices
    rhs = (a.shape_of(z1) - base.vertices) + (a.shape_of(z2) - base.vertices)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    np.testing.assert_allclose(a.shapes, a.shape_of(a.latents), atol=1e-12)
    assert not np.array_equal(generate_synthetic(base, 5, 10, seed=4).shapes, a.shapes)
    held = a.sample(4, seed=9)
    assert len(held) == 4 and held.basis is a.basis


# -- training loop ---------------------------------------------------------

SMALL = DecoderConfig(latent_dim=3, block_channels=(4, 4), head_channels=(4, 3))


@pytest.fixture(scope="module")
def small_setup():
    h = build_hierarchy(icosphere(1), [20])
    return h, generate_synthetic(h.levels[0].mesh, 3, 30, seed=0)


def test_training_is_deterministic_and_writes_outputs(tmp_path, small_setup):
    h, data = small_setup
    cfg = TrainConfig(epochs=4, batch_size=8, lr=1e-2, decay_every=2)
    r1 = train(h, data, SMALL, cfg, out_dir=tmp_path)
    r2 = train(h, data, SMALL, cfg)
    assert [list(row.values()) for row in r1.history] == [list(row.values()) for row in r2.history]
    header = (tmp_path / "history.csv").read_text().splitlines()[0]
    assert header == ",".join(HISTORY_FIELDS)
    rows = read_history(tmp_path / "history.csv")
    assert [r["epoch"] for r in rows] == [1, 2, 3, 4]
    assert [r["lr"] for r in rows] == [1e-2, 1e-2, 5e-3, 5e-3]
    assert rows[-1]["l1"] == r1.history[-1]["l1"]
    params = read_checkpoint(tmp_path / "model.ckpt", h)
    for a, b in zip(params.named_arrays().values(), r1.params.named_arrays().values()):
        assert a.tobytes() == b.tobytes()


def test_training_reduces_loss(small_setup):
    h, data = small_setup
    r = train(h, data, SMALL, TrainConfig(epochs=15, batch_size=10, lr=1e-2))
    assert r.l1_curve[-1] < r.l1_curve[0]


def test_training_aborts_on_non_finite_loss(small_setup):
    h, data = small_setup
    bad = generate_synthetic(h.levels[0].mesh, 3, 30, seed=0)
    bad.shapes[3, 0, 0] = np.inf
    with pytest.raises(NumericalError, match="epoch 1"):
        train(h, bad, SMALL, TrainConfig(epochs=1, batch_size=10))


def test_training_rejects_mismatched_dataset(small_setup):
    h, _ = small_setup
    data = generate_synthetic(icosphere(2), 3, 5)
    with pytest.raises(ValueError):
        train(h, data, SMALL, TrainConfig(epochs=1))
