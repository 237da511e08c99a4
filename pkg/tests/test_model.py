import dataclasses
import io
import struct

import numpy as np
import pytest

from meshgcn import presets
from meshgcn.model import (
    AffineEncoder,
    CheckpointError,
    DecoderConfig,
    count_parameters,
    decoder_backward,
    decoder_forward,
    init_decoder,
    load_checkpoint,
    save_checkpoint,
)
from meshgcn.sampling import build_hierarchy
from meshgcn.shapes import icosphere
from meshgcn.train import AdamState, adam_step, total_loss

from conftest import assert_gradient_matches, decoder_signature

TINY = DecoderConfig(latent_dim=4, cheb_order=3, block_channels=(4, 3, 3), head_channels=(3, 3))


def decoder_gradient_check(hierarchy, config, seed, entries_per_section=2, batch=2):
    """FD check of every parameter section and the latent; returns (worst, kinks)."""
    rng = np.random.default_rng(seed)
    params = init_decoder(dataclasses.replace(config, seed=seed), hierarchy)
    # perturb the norm affines away from (1, 0) so their gradients are exercised
    for name, a in params.named_arrays().items():
        if ".in" in name or "norm" in name or "bias" in name:
            a += 0.3 * rng.normal(size=a.shape)
    z = rng.normal(size=(batch, config.latent_dim))
    up = rng.normal(size=(batch, hierarchy.levels[0].n_vertices, 3))

    def f():
        y, cache = decoder_forward(z, hierarchy, params, return_cache=True)
        return float((y * up).sum()), decoder_signature(cache)

    grads, dz = decoder_backward(z, hierarchy, params, up)
    g = grads.named_arrays()
    sections = [(a, g[name], entries_per_section) for name, a in params.named_arrays().items()]
    sections.append((z, dz, 4))
    worst, kinks = 0.0, 0
    checked = sum(min(k, a.size) for a, _, k in sections)
    for a, ga, k in sections:
        w, n = assert_gradient_matches(f, a, ga, max_entries=k, rng=rng, max_kinks=k)
        worst, kinks = max(worst, w), kinks + n
    # stencils that cross a kink carry no derivative information; a seed whose
    # base point sits almost on one loses some, but most must stay smooth
    assert kinks <= checked // 2, f"{kinks} of {checked} stencils crossed a kink"
    return worst, kinks


def test_init_is_deterministic(tiny_hierarchy):
    a = init_decoder(TINY, tiny_hierarchy).named_arrays()
    b = init_decoder(TINY, tiny_hierarchy).named_arrays()
    assert list(a) == list(b)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    c = init_decoder(dataclasses.replace(TINY, seed=1), tiny_hierarchy).named_arrays()
    assert not np.array_equal(a["dense.weight"], c["dense.weight"])


def test_init_scale(tiny_hierarchy):
    p = init_decoder(TINY, tiny_hierarchy)
    for blk in p.blocks:
        K, fi, fo = blk.conv1.theta.shape
        assert np.abs(blk.conv1.theta).max() <= np.sqrt(6 / (K * fi + fo))
        assert not blk.conv1.bias.any()
        np.testing.assert_array_equal(blk.in1.gamma, 1)


def test_parameter_count_by_hand(toy_hierarchy):
    cfg = presets.toy_decoder_config()
    # dense 8x(42*32) + bias; block 32->32; block 32->16 with projection;
    # block 16->16; head 16->16 (+IN) and 16->3
    dense = 8 * 42 * 32 + 42 * 32
    b0 = 2 * (3 * 32 * 32 + 32) + 2 * 64
    b1 = (3 * 32 * 16 + 16) + 32 + (3 * 16 * 16 + 16) + 32 + (32 * 16 + 16)
    b2 = 2 * (3 * 16 * 16 + 16) + 2 * 32
    head = (3 * 16 * 16 + 16) + 32 + (3 * 16 * 3 + 3)
    expected = dense + b0 + b1 + b2 + head
    assert expected == 23955
    assert count_parameters(cfg, 42) == expected
    assert init_decoder(cfg, toy_hierarchy).n_parameters == expected


def test_parameter_count_full_config():
    cfg = presets.full_decoder_config()
    assert count_parameters(cfg, 52) > (256 + 1) * 52 * 128
    no_bias = dataclasses.replace(cfg, use_bias=False)
    # every conv loses exactly f_out bias entries: two per block, the three
    # channel-changing projections (64, 32, 16) and the two head convs
    n_bias = sum(2 * f for f in cfg.block_channels) + (64 + 32 + 16) + (16 + 3)
    assert count_parameters(cfg, 52) - count_parameters(no_bias, 52) == n_bias


def test_forward_shapes(tiny_hierarchy):
    p = init_decoder(TINY, tiny_hierarchy)
    assert decoder_forward(np.zeros(4), tiny_hierarchy, p).shape == (42, 3)
    assert decoder_forward(np.zeros((5, 4)), tiny_hierarchy, p).shape == (5, 42, 3)
    with pytest.raises(ValueError):
        decoder_forward(np.zeros(3), tiny_hierarchy, p)


def test_config_must_match_hierarchy_depth(tiny_hierarchy):
    with pytest.raises(ValueError):
        init_decoder(dataclasses.replace(TINY, block_channels=(4, 4)), tiny_hierarchy)


def test_config_validation():
    with pytest.raises(ValueError):
        DecoderConfig(head_channels=(16, 4))
    with pytest.raises(ValueError):
        DecoderConfig(cheb_order=0)
    with pytest.raises(ValueError):
        DecoderConfig(norm="layer")
    assert DecoderConfig.from_json(TINY.to_json()) == TINY


def test_head_bias_translates_output(tiny_hierarchy):
    p = init_decoder(TINY, tiny_hierarchy)
    z = np.random.default_rng(0).normal(size=(2, 4))
    y0 = decoder_forward(z, tiny_hierarchy, p)
    t = np.array([0.5, -2.0, 3.0])
    p.head2.bias += t
    np.testing.assert_allclose(decoder_forward(z, tiny_hierarchy, p), y0 + t, atol=1e-12)


def test_batched_forward_matches_single(tiny_hierarchy):
    p = init_decoder(TINY, tiny_hierarchy)
    z = np.random.default_rng(1).normal(size=(3, 4))
    y = decoder_forward(z, tiny_hierarchy, p)
    for i in range(3):
        np.testing.assert_allclose(y[i], decoder_forward(z[i], tiny_hierarchy, p), atol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_decoder_gradients_tiny(tiny_hierarchy, seed):
    decoder_gradient_check(tiny_hierarchy, TINY, seed, entries_per_section=6)


def test_batch_norm_variant_gradients(tiny_hierarchy):
    for seed in range(3):
        decoder_gradient_check(tiny_hierarchy, dataclasses.replace(TINY, norm="batch"), seed)


def test_one_adam_step_decreases_loss(tiny_hierarchy):
    lap = tiny_hierarchy.levels[0].smooth_laplacian
    decreased = 0
    n_seeds = 40
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        p = init_decoder(dataclasses.replace(TINY, seed=seed), tiny_hierarchy)
        z = rng.normal(size=(8, 4))
        gt = tiny_hierarchy.levels[0].mesh.vertices + 0.1 * rng.normal(size=(8, 42, 3))
        pred, cache = decoder_forward(z, tiny_hierarchy, p, return_cache=True)
        before, grad, _, _ = total_loss(pred, gt, lap, 0.1)
        g, _ = decoder_backward(z, tiny_hierarchy, p, grad, cache=cache)
        adam_step(p.named_arrays(), g.named_arrays(), AdamState(lr=1e-4))
        after = total_loss(decoder_forward(z, tiny_hierarchy, p), gt, lap, 0.1)[0]
        decreased += after < before
    assert decreased >= 0.95 * n_seeds


# -- checkpoints -----------------------------------------------------------


def checkpoint_bytes(params, hierarchy):
    buf = io.BytesIO()
    save_checkpoint(params, hierarchy, buf)
    return buf.getvalue()


def test_checkpoint_round_trip_bit_exact(tiny_hierarchy):
    p = init_decoder(TINY, tiny_hierarchy)
    for a in p.named_arrays().values():
        a += np.random.default_rng(a.size).normal(size=a.shape)
    data = checkpoint_bytes(p, tiny_hierarchy)
    q = load_checkpoint(io.BytesIO(data), tiny_hierarchy)
    assert q.config == p.config
    for (na, a), (nb, b) in zip(p.named_arrays().items(), q.named_arrays().items()):
        assert na == nb and a.tobytes() == b.tobytes()
    assert checkpoint_bytes(q, tiny_hierarchy) == data


def test_checkpoint_rejects_other_hierarchy(tiny_hierarchy):
    other = build_hierarchy(icosphere(1), [21, 8])
    data = checkpoint_bytes(init_decoder(TINY, tiny_hierarchy), tiny_hierarchy)
    with pytest.raises(CheckpointError, match="different mesh hierarchy"):
        load_checkpoint(io.BytesIO(data), other)


def test_checkpoint_rejects_truncation(tiny_hierarchy):
    data = checkpoint_bytes(init_decoder(TINY, tiny_hierarchy), tiny_hierarchy)
    for cut in list(range(0, 64, 7)) + [len(data) // 2, len(data) - 1]:
        with pytest.raises(CheckpointError):
            load_checkpoint(io.BytesIO(data[:cut]), tiny_hierarchy)
    with pytest.raises(CheckpointError):
        load_checkpoint(io.BytesIO(data + b"\0"), tiny_hierarchy)


def test_checkpoint_rejects_version_and_magic(tiny_hierarchy):
    data = checkpoint_bytes(init_decoder(TINY, tiny_hierarchy), tiny_hierarchy)
    bumped = data[:8] + struct.pack("<I", 99) + data[12:]
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(io.BytesIO(bumped), tiny_hierarchy)
    with pytest.raises(CheckpointError):
        load_checkpoint(io.BytesIO(b"NOTACKPT" + data[8:]), tiny_hierarchy)


def test_affine_encoder_gradients():
    enc = AffineEncoder.create(5, 3, seed=0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 5))
    up = rng.normal(size=(4, 3))
    f = lambda: float((enc.forward(x) * up).sum())
    dW, db, dx = enc.backward(x, up)
    assert_gradient_matches(f, enc.weight, dW)
    assert_gradient_matches(f, enc.bias, db)
    assert_gradient_matches(f, x, dx)
