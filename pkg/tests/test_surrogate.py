import math

import numpy as np
import pytest
import torch

from ces import basis, surrogate as sg
from ces.basis import BoundaryLayout


@pytest.fixture(scope="module")
def params():
    return sg.init_params(np.random.default_rng(0), N=10, side=2.0, width=16)


@pytest.fixture(scope="module")
def state(params):
    rng = np.random.default_rng(1)
    return 0.05 * rng.standard_normal(72), np.array([0.1, -0.2])


def _self_labeled_batch(params, rng, n=24):
    U = 0.05 * rng.standard_normal((n, 72))
    XI = rng.uniform(-0.2, 0.2, (n, 2))
    E = np.array([sg.surrogate_energy(params, U[b], XI[b]) for b in range(n)])
    G = np.array([sg.surrogate_grad(params, U[b], XI[b]) for b in range(n)])
    H = sg.batched_hessian(params, U, XI)
    return sg.TrainingArrays(U, XI, E, G, H)


@pytest.fixture(scope="module")
def self_batch(params):
    return _self_labeled_batch(params, np.random.default_rng(21))


def test_energy_nonnegative_and_rigid_null(params, state):
    u, xi = state
    assert sg.surrogate_energy(params, u, xi) >= 0.0
    rigid = np.tile([0.4, -0.7], 36)
    assert sg.surrogate_energy(params, rigid, xi) == pytest.approx(0.0, abs=1e-20)
    assert sg.surrogate_energy(params, u + rigid, xi) == pytest.approx(
        sg.surrogate_energy(params, u, xi), rel=1e-10
    )


def test_tiny_network_hand_computation():
    """Width-1 network with hand-set weights against an explicit evaluation."""
    flags = sg.FeatureFlags(remove_rigid=False)
    p = sg.init_params(np.random.default_rng(0), N=10, side=2.0, width=1, flags=flags)
    for key in ("W1", "W2", "W3", "W4"):
        p.weights[key].fill_(0.0)
    p.weights["W1"][0, 0] = 2.0   # f sees 2*u[0] + biases only
    p.weights["W2"][0, 0] = 1.0
    p.weights["W3"][0, 0] = 1.0
    p.weights["W4"][0, 0] = 1.0
    p.weights["b1"].fill_(0.1)
    u = np.zeros(72)
    u[0] = 0.25

    def swish(x):
        return x / (1.0 + math.exp(-x))

    f = swish(swish(swish(2.0 * 0.25 + 0.1)))
    expected = float(np.dot(u, u)) * math.exp(f)
    assert sg.surrogate_energy(p, u, np.zeros(2)) == pytest.approx(expected, rel=1e-12)


def test_grad_matches_fd(params, state, rng):
    u, xi = state
    g = sg.surrogate_grad(params, u, xi)
    h = 1e-6
    for k in rng.choice(72, 10, replace=False):
        up, um = u.copy(), u.copy()
        up[k] += h
        um[k] -= h
        fd = (sg.surrogate_energy(params, up, xi) - sg.surrogate_energy(params, um, xi)) / (2 * h)
        assert fd == pytest.approx(g[k], rel=1e-6, abs=1e-12)


def test_grad_zero_at_rest(params):
    assert np.abs(sg.surrogate_grad(params, np.zeros(72), np.zeros(2))).max() == 0.0


def test_grad_orthogonal_to_rigid_modes(params, state):
    u, xi = state
    g = sg.surrogate_grad(params, u, xi)
    layout = BoundaryLayout(10, 2.0)
    displaced = layout.points + u.reshape(36, 2)
    center = displaced.mean(axis=0)
    rot = np.column_stack([-(displaced[:, 1] - center[1]), displaced[:, 0] - center[0]]).ravel()
    tx = np.tile([1.0, 0.0], 36)
    ty = np.tile([0.0, 1.0], 36)
    scale = np.abs(g).max()
    for mode in (tx, ty, rot):
        assert abs(g @ mode) < 1e-8 * scale * np.linalg.norm(mode)


def test_frozen_net_gives_scaled_quadratic(params, state):
    """With f frozen to log(c) the model is exactly c * ||R(u)||^2."""
    u, xi = state
    c = 3.7
    p = params.clone()
    for key in ("W1", "W2", "W3", "W4"):
        p.weights[key].zero_()
    for key in ("b1", "b2", "b3"):
        p.weights[key].zero_()
    p.weights["b4"].fill_(math.log(c))
    layout = BoundaryLayout(10, 2.0)
    aligned, _, _ = basis.procrustes_align(u, layout)
    assert sg.surrogate_energy(p, u, xi) == pytest.approx(c * aligned @ aligned, rel=1e-12)
    h = 1e-7
    g = sg.surrogate_grad(p, u, xi)
    fd = np.empty(72)
    for k in range(72):
        up, um = u.copy(), u.copy()
        up[k] += h
        um[k] -= h
        ap, _, _ = basis.procrustes_align(up, layout)
        am, _, _ = basis.procrustes_align(um, layout)
        fd[k] = c * (ap @ ap - am @ am) / (2 * h)
    assert np.abs(g - fd).max() < 1e-6 * np.abs(g).max()


def test_hvp_matches_fd_of_grad(params, state, rng):
    u, xi = state
    v = rng.standard_normal(72)
    hv = sg.surrogate_hvp(params, u, xi, v)
    h = 1e-6
    fd = (sg.surrogate_grad(params, u + h * v, xi) - sg.surrogate_grad(params, u - h * v, xi)) / (2 * h)
    assert np.abs(hv - fd).max() / np.abs(hv).max() < 1e-5


def test_hvp_symmetry_and_zero(params, state, rng):
    u, xi = state
    v, w = rng.standard_normal((2, 72))
    hv = sg.surrogate_hvp(params, u, xi, v)
    hw = sg.surrogate_hvp(params, u, xi, w)
    assert w @ hv == pytest.approx(v @ hw, rel=1e-8)
    assert np.abs(sg.surrogate_hvp(params, u, xi, np.zeros(72))).max() == 0.0


def test_direct_energy_mode():
    flags = sg.FeatureFlags(scale_by_norm=False)
    p = sg.init_params(np.random.default_rng(2), N=10, side=2.0, width=8, flags=flags)
    u = 0.1 * np.random.default_rng(3).standard_normal(72)
    xi = np.array([0.05, 0.0])
    # value equals exp(f) - 1 for the same features
    a, _, _ = basis.procrustes_align(u, BoundaryLayout(10, 2.0))
    z = torch.from_numpy(np.concatenate([a, xi]))[None]
    f = float(sg._net(p.weights, z)[0])
    assert sg.surrogate_energy(p, u, xi) == pytest.approx(math.exp(f) - 1.0, rel=1e-12)


def test_loss_self_targets_zero(params, self_batch):
    rep = sg.loss(params, self_batch, np.random.default_rng(0))
    assert abs(rep.l0) < 1e-10
    assert abs(rep.l1) < 1e-10
    assert abs(rep.l2) < 1e-10
    assert rep.total == rep.l0 + rep.l1 + rep.l2


def test_loss_antiparallel_gradients(params, self_batch):
    batch = self_batch
    flipped = sg.TrainingArrays(batch.u, batch.xi, batch.energy, -batch.grad, batch.hessian)
    rep = sg.loss(params, flipped, np.random.default_rng(0))
    assert rep.l1 == pytest.approx(2.0, abs=1e-12)


def test_loss_cosine_scale_invariance(params, self_batch):
    batch = self_batch
    scaled = sg.TrainingArrays(
        batch.u, batch.xi, batch.energy, 1e3 * batch.grad, 1e3 * batch.hessian
    )
    r1 = sg.loss(params, batch, np.random.default_rng(4))
    r2 = sg.loss(params, scaled, np.random.default_rng(4))
    assert r2.l1 == pytest.approx(r1.l1, abs=1e-10)
    assert r2.l2 == pytest.approx(r1.l2, abs=1e-10)


def test_loss_deterministic(params, self_batch):
    batch = self_batch.subset(np.arange(8))
    r1 = sg.loss(params, batch, np.random.default_rng(9))
    r2 = sg.loss(params, batch, np.random.default_rng(9))
    assert r1 == r2


def test_loss_rejects_nonfinite(params, self_batch):
    batch = self_batch.subset(np.arange(4))
    batch.energy = batch.energy.copy()
    batch.energy[2] = np.nan
    with pytest.raises(ValueError, match="record 2"):
        sg.loss(params, batch, np.random.default_rng(0))


def test_loss_disabled_terms_zero(rng):
    flags = sg.FeatureFlags(sobolev_g=False, sobolev_hvp=False)
    p = sg.init_params(np.random.default_rng(5), N=10, side=2.0, width=8, flags=flags)
    batch = _self_labeled_batch(p, rng, n=6)
    rep = sg.loss(p, batch, np.random.default_rng(0))
    assert rep.l1 == 0.0 and rep.l2 == 0.0


def test_loss_near_rest_records_excluded(params):
    """A record at rest has ||R(u)||^2 = 0; it must not poison the value loss."""
    u = np.zeros((1, 72))
    batch = sg.TrainingArrays(
        u, np.zeros((1, 2)), np.zeros(1), np.zeros((1, 72)), np.zeros((1, 72, 72))
    )
    rep = sg.loss(params, batch, np.random.default_rng(0))
    assert np.isfinite(rep.total)
    assert rep.l0 == 0.0


def test_train_descends_and_is_deterministic(params, rng):
    target = sg.init_params(np.random.default_rng(99), N=10, side=2.0, width=16)
    batch = _self_labeled_batch(target, rng, n=32)
    cfg = sg.TrainConfig(lr=3e-3, batch=16, epochs=12, seed=7)
    p1, h1 = sg.train(params, batch, cfg)
    p2, h2 = sg.train(params, batch, cfg)
    assert sg.checkpoint_equal(p1, p2)
    assert h1 == h2
    assert h1[-1].losses.total < h1[0].losses.total
    # epochs=0 leaves parameters untouched
    p0, h0 = sg.train(params, batch, sg.TrainConfig(epochs=0))
    assert sg.checkpoint_equal(p0, params)
    assert h0 == []


def test_train_empty_dataset_rejected(params):
    empty = sg.TrainingArrays(
        np.zeros((0, 72)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 72)), np.zeros((0, 72, 72))
    )
    with pytest.raises(ValueError):
        sg.train(params, empty, sg.TrainConfig())


def test_checkpoint_roundtrip(tmp_path, params):
    path = tmp_path / "ck.bin"
    sg.save_checkpoint(params, path, meta={"seed": 0, "dataset": "abc"})
    loaded = sg.load_checkpoint(path)
    assert sg.checkpoint_equal(loaded, params)
    assert (tmp_path / "ck.bin.meta").exists()
    # saving the loaded params is byte-identical
    path2 = tmp_path / "ck2.bin"
    sg.save_checkpoint(loaded, path2)
    sg.save_checkpoint(params, tmp_path / "ck3.bin")
    assert (tmp_path / "ck2.bin").read_bytes() == (tmp_path / "ck3.bin").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        sg.load_checkpoint(path)
