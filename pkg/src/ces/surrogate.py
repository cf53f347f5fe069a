"""Learned collapsed-energy model for one component.

The model predicts E(u, xi) = ||a||^2 * exp(f(a, xi)) where a is the boundary
vector with rigid motion removed (closed-form Procrustes) and f is a fully
connected network with Swish activations.  The norm factor bakes in the
linear-elastic small-displacement behavior; the network only has to learn a
log-stiffness.  Training supervises the value (log-stiffness squared error)
and, Sobolev style, the gradient and Hessian-vector products of the energy
through cosine distances.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .basis import BoundaryLayout

torch.set_default_dtype(torch.float64)

_MAGIC = b"CESQ0001\n"
NORM_FLOOR = 1e-12

_WEIGHT_KEYS = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4")


@dataclass(frozen=True)
class FeatureFlags:
    """Ablation switches for the model and losses."""

    scale_by_norm: bool = True
    remove_rigid: bool = True
    sobolev_g: bool = True
    sobolev_hvp: bool = True

    def as_dict(self):
        return {
            "scale_by_norm": self.scale_by_norm,
            "remove_rigid": self.remove_rigid,
            "sobolev_g": self.sobolev_g,
            "sobolev_hvp": self.sobolev_hvp,
        }


@dataclass
class SurrogateParams:
    """Network weights plus the boundary-layout context they were built for."""

    weights: dict
    flags: FeatureFlags
    N: int
    side: float
    width: int

    def __post_init__(self):
        layout = BoundaryLayout(self.N, self.side)
        rest = torch.from_numpy(layout.points.copy())
        object.__setattr__(self, "_rest_centered", rest - rest.mean(dim=0))
        self.n_dofs = layout.n_dofs

    def clone(self) -> "SurrogateParams":
        return SurrogateParams(
            weights={k: v.detach().clone() for k, v in self.weights.items()},
            flags=self.flags,
            N=self.N,
            side=self.side,
            width=self.width,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate(
            [self.weights[k].detach().numpy().ravel() for k in _WEIGHT_KEYS]
        )


def init_params(
    rng: np.random.Generator,
    N: int = 10,
    side: float = 2.0,
    width: int = 128,
    flags: FeatureFlags = FeatureFlags(),
) -> SurrogateParams:
    """He (fan-in) initialized weights, zero biases."""
    in_dim = 2 * 4 * (N - 1) + 2
    dims = [in_dim, width, width, width, 1]
    weights = {}
    for i in range(4):
        fan_in = dims[i]
        w = rng.standard_normal((fan_in, dims[i + 1])) * math.sqrt(2.0 / fan_in)
        weights[f"W{i+1}"] = torch.from_numpy(w)
        weights[f"b{i+1}"] = torch.zeros(dims[i + 1])
    return SurrogateParams(weights=weights, flags=flags, N=N, side=side, width=width)


def _swish(x):
    return x * torch.sigmoid(x)


def _net(weights, z):
    h = _swish(z @ weights["W1"] + weights["b1"])
    h = _swish(h @ weights["W2"] + weights["b2"])
    h = _swish(h @ weights["W3"] + weights["b3"])
    return (h @ weights["W4"] + weights["b4"]).squeeze(-1)


def _remove_rigid(params: SurrogateParams, U):
    """Batched closed-form Procrustes alignment; U is (B, n, 2)."""
    pc = params._rest_centered
    q = pc + U - U.mean(dim=1, keepdim=True)
    a_coef = (pc * q).sum(dim=(1, 2))
    b_coef = (pc[:, 1] * q[..., 0] - pc[:, 0] * q[..., 1]).sum(dim=1)
    theta = torch.atan2(b_coef, a_coef)
    c = torch.cos(theta)[:, None]
    s = torch.sin(theta)[:, None]
    ax = c * q[..., 0] - s * q[..., 1] - pc[:, 0]
    ay = s * q[..., 0] + c * q[..., 1] - pc[:, 1]
    return torch.stack([ax, ay], dim=-1)


def _batched_energy(params: SurrogateParams, U, XI):
    """U (B, 2n), XI (B, 2) -> energies (B,).  Differentiable in U."""
    B = U.shape[0]
    pts = U.reshape(B, -1, 2)
    a = _remove_rigid(params, pts) if params.flags.remove_rigid else pts
    a_vec = a.reshape(B, -1)
    f = _net(params.weights, torch.cat([a_vec, XI], dim=1))
    if params.flags.scale_by_norm:
        return (a_vec**2).sum(dim=1) * torch.exp(f)
    return torch.exp(f) - 1.0


def _log_stiffness(params: SurrogateParams, U, XI):
    """Network output f and the squared aligned norm, for the value loss."""
    B = U.shape[0]
    pts = U.reshape(B, -1, 2)
    a = _remove_rigid(params, pts) if params.flags.remove_rigid else pts
    a_vec = a.reshape(B, -1)
    f = _net(params.weights, torch.cat([a_vec, XI], dim=1))
    return f, (a_vec**2).sum(dim=1)


def _to_torch(x):
    return torch.as_tensor(np.asarray(x, dtype=float))


def surrogate_energy(params: SurrogateParams, u, xi) -> float:
    with torch.no_grad():
        e = _batched_energy(params, _to_torch(u)[None], _to_torch(xi)[None])
    return float(e[0])


def surrogate_grad(params: SurrogateParams, u, xi) -> np.ndarray:
    """Exact reverse-mode gradient of the surrogate energy, including the
    dependence of the Procrustes rotation on u."""
    ut = _to_torch(u)[None].requires_grad_(True)
    e = _batched_energy(params, ut, _to_torch(xi)[None])
    (g,) = torch.autograd.grad(e.sum(), ut)
    return g[0].numpy()


def surrogate_hvp(params: SurrogateParams, u, xi, v) -> np.ndarray:
    """Hessian-vector product by forward-over-reverse differentiation: the
    directional derivative of the gradient along v."""
    xi_t = _to_torch(xi)

    def grad_fn(uu):
        return torch.func.grad(
            lambda w: _batched_energy(params, w[None], xi_t[None])[0]
        )(uu)

    _, hv = torch.func.jvp(grad_fn, (_to_torch(u),), (_to_torch(v),))
    return hv.numpy()


def batched_energy_grad(params: SurrogateParams, U, XI):
    """Energies and per-row gradients for a batch; used by the composer."""
    ut = _to_torch(U).requires_grad_(True)
    e = _batched_energy(params, ut, _to_torch(XI))
    (g,) = torch.autograd.grad(e.sum(), ut)
    return e.detach().numpy(), g.numpy()


def batched_hessian(params: SurrogateParams, U, XI) -> np.ndarray:
    """Full (B, 2n, 2n) energy Hessians; one backward pass per dof."""
    ut = _to_torch(U).requires_grad_(True)
    e = _batched_energy(params, ut, _to_torch(XI))
    (g,) = torch.autograd.grad(e.sum(), ut, create_graph=True)
    n = g.shape[1]
    rows = []
    for k in range(n):
        (row,) = torch.autograd.grad(g[:, k].sum(), ut, retain_graph=k < n - 1)
        rows.append(row)
    return torch.stack(rows, dim=1).numpy()


@dataclass(frozen=True)
class LossReport:
    l0: float
    l1: float
    l2: float

    @property
    def total(self) -> float:
        return self.l0 + self.l1 + self.l2


@dataclass
class TrainingArrays:
    """Dense views of a sample set: boundary vectors, shapes and labels."""

    u: np.ndarray
    xi: np.ndarray
    energy: np.ndarray
    grad: np.ndarray
    hessian: np.ndarray

    def __len__(self):
        return len(self.energy)

    def subset(self, idx) -> "TrainingArrays":
        return TrainingArrays(
            self.u[idx], self.xi[idx], self.energy[idx], self.grad[idx], self.hessian[idx]
        )

    def check_finite(self):
        for name in ("u", "xi", "energy", "grad", "hessian"):
            arr = getattr(self, name)
            bad = ~np.isfinite(arr.reshape(len(self), -1)).all(axis=1)
            if bad.any():
                raise ValueError(
                    f"non-finite {name} target in record {int(np.flatnonzero(bad)[0])}"
                )


def _cosine_distance(x, y, eps=0.0):
    nx = torch.linalg.vector_norm(x, dim=1)
    ny = torch.linalg.vector_norm(y, dim=1)
    mask = (nx > 0) & (ny > 0)
    if not bool(mask.any()):
        return torch.zeros((), dtype=x.dtype), 0
    cos = (x[mask] * y[mask]).sum(dim=1) / (nx[mask] * ny[mask])
    return (1.0 - cos).mean(), int(mask.sum())


def _loss_terms(params: SurrogateParams, batch: TrainingArrays, v: np.ndarray):
    """Differentiable loss terms (torch scalars)."""
    flags = params.flags
    U = _to_torch(batch.u)
    XI = _to_torch(batch.xi)
    E_true = _to_torch(batch.energy)
    zero = torch.zeros((), dtype=U.dtype)

    need_grad = flags.sobolev_g or flags.sobolev_hvp
    if need_grad:
        U = U.requires_grad_(True)

    if flags.scale_by_norm:
        f, norm2 = _log_stiffness(params, U.detach() if need_grad else U, XI)
        mask = (norm2.detach() >= NORM_FLOOR) & (E_true > 0)
        if bool(mask.any()):
            target = torch.log(E_true[mask] / norm2[mask])
            l0 = ((f[mask] - target) ** 2).mean()
        else:
            l0 = zero
    else:
        e_pred = _batched_energy(params, U.detach() if need_grad else U, XI)
        l0 = ((e_pred - E_true) ** 2).mean()

    l1 = zero
    l2 = zero
    if need_grad:
        e_pred = _batched_energy(params, U, XI)
        (g_pred,) = torch.autograd.grad(e_pred.sum(), U, create_graph=True)
        if flags.sobolev_g:
            l1, _ = _cosine_distance(g_pred, _to_torch(batch.grad))
        if flags.sobolev_hvp:
            vt = _to_torch(v)
            (hv_pred,) = torch.autograd.grad(
                (g_pred * vt).sum(), U, create_graph=True
            )
            hv_true = torch.einsum("bij,bj->bi", _to_torch(batch.hessian), vt)
            l2, _ = _cosine_distance(hv_pred, hv_true)
    return l0, l1, l2


def loss(params: SurrogateParams, batch: TrainingArrays, rng: np.random.Generator) -> LossReport:
    """Loss report on a batch; the Hessian projection vectors are drawn fresh
    from ``rng`` per record."""
    batch.check_finite()
    v = rng.standard_normal(batch.u.shape)
    with torch.enable_grad():
        l0, l1, l2 = _loss_terms(params, batch, v)
    return LossReport(float(l0.detach()), float(l1.detach()), float(l2.detach()))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch: int = 512
    epochs: int = 10
    seed: int = 0
    max_steps: int | None = None


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    losses: LossReport
    e_pct_err: float
    g_sim: float
    hvp_sim: float


def validation_metrics(params: SurrogateParams, data: TrainingArrays, rng) -> tuple[float, float, float]:
    """(E %err, G-sim, Hvp-sim) on a sample set."""
    U = _to_torch(data.u).requires_grad_(True)
    XI = _to_torch(data.xi)
    e_pred = _batched_energy(params, U, XI)
    (g_pred,) = torch.autograd.grad(e_pred.sum(), U, create_graph=True)
    v = _to_torch(rng.standard_normal(data.u.shape))
    (hv_pred,) = torch.autograd.grad((g_pred * v).sum(), U)
    e_pred = e_pred.detach()
    g_pred = g_pred.detach()

    e_true = _to_torch(data.energy)
    keep = e_true.abs() > 1e-14
    e_pct = float(
        (100.0 * (e_pred[keep] - e_true[keep]).abs() / e_true[keep].abs()).mean()
    ) if bool(keep.any()) else float("nan")
    d1, _ = _cosine_distance(g_pred, _to_torch(data.grad))
    hv_true = torch.einsum("bij,bj->bi", _to_torch(data.hessian), v)
    d2, _ = _cosine_distance(hv_pred, hv_true)
    return e_pct, 1.0 - float(d1), 1.0 - float(d2)


def train(
    params: SurrogateParams,
    data: TrainingArrays,
    config: TrainConfig,
    val: TrainingArrays | None = None,
):
    """Adam on the summed losses.  Returns (trained params, epoch history).

    Deterministic given ``config.seed``: shuffling and Hessian projection
    vectors come from one numpy generator.  Divergence (non-finite loss)
    aborts and returns the last finite iterate.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    data.check_finite()
    params = params.clone()
    if config.epochs == 0 or config.max_steps == 0:
        return params, []
    rng = np.random.default_rng(config.seed)
    for w in params.weights.values():
        w.requires_grad_(True)
    keys = list(_WEIGHT_KEYS)
    adam_m = {k: torch.zeros_like(params.weights[k]) for k in keys}
    adam_v = {k: torch.zeros_like(params.weights[k]) for k in keys}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    history: list[EpochStats] = []
    last_good = params.clone()

    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        epoch_losses = []
        for lo in range(0, len(order), config.batch):
            idx = order[lo : lo + config.batch]
            batch = data.subset(idx)
            v = rng.standard_normal(batch.u.shape)
            l0, l1, l2 = _loss_terms(params, batch, v)
            total = l0 + l1 + l2
            if not torch.isfinite(total):
                for w in params.weights.values():
                    w.requires_grad_(False)
                return last_good, history
            grads = torch.autograd.grad(total, [params.weights[k] for k in keys])
            step += 1
            with torch.no_grad():
                for k, g in zip(keys, grads):
                    adam_m[k].mul_(beta1).add_(g, alpha=1 - beta1)
                    adam_v[k].mul_(beta2).addcmul_(g, g, value=1 - beta2)
                    mhat = adam_m[k] / (1 - beta1**step)
                    vhat = adam_v[k] / (1 - beta2**step)
                    params.weights[k].addcdiv_(mhat, vhat.sqrt().add_(eps), value=-config.lr)
            epoch_losses.append(
                LossReport(float(l0.detach()), float(l1.detach()), float(l2.detach()))
            )
            if config.max_steps is not None and step >= config.max_steps:
                break
        mean = LossReport(
            float(np.mean([r.l0 for r in epoch_losses])),
            float(np.mean([r.l1 for r in epoch_losses])),
            float(np.mean([r.l2 for r in epoch_losses])),
        )
        with torch.no_grad():
            last_good = params.clone()
        e_pct, g_sim, hvp_sim = validation_metrics(
            last_good, val if val is not None else data, rng
        )
        history.append(EpochStats(epoch, mean, e_pct, g_sim, hvp_sim))
        if config.max_steps is not None and step >= config.max_steps:
            break

    for w in params.weights.values():
        w.requires_grad_(False)
    return params, history


def save_checkpoint(params: SurrogateParams, path, meta: dict | None = None) -> None:
    """Binary checkpoint: magic, one-line JSON header, flat little-endian
    float64 weights; a text sidecar records flags/seed/dataset hash."""
    header = {
        "N": params.N,
        "side": params.side,
        "width": params.width,
        "flags": params.flags.as_dict(),
        "keys": list(_WEIGHT_KEYS),
        "shapes": {k: list(params.weights[k].shape) for k in _WEIGHT_KEYS},
    }
    flat = params.flat().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(flat.tobytes())
    if meta is not None:
        lines = [f"{k} = {v}" for k, v in sorted(meta.items())]
        with open(str(path) + ".meta", "w") as fh:
            fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> SurrogateParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a surrogate checkpoint")
        header = json.loads(fh.readline().decode())
        raw = np.frombuffer(fh.read(), dtype="<f8")
    weights = {}
    off = 0
    for k in header["keys"]:
        shape = tuple(header["shapes"][k])
        size = int(np.prod(shape))
        weights[k] = torch.from_numpy(raw[off : off + size].reshape(shape).copy())
        off += size
    if off != raw.size:
        raise ValueError(f"{path}: weight payload size mismatch")
    return SurrogateParams(
        weights=weights,
        flags=FeatureFlags(**header["flags"]),
        N=header["N"],
        side=header["side"],
        width=header["width"],
    )


def checkpoint_equal(a: SurrogateParams, b: SurrogateParams) -> bool:
    return a.flags == b.flags and np.array_equal(a.flat(), b.flat())
