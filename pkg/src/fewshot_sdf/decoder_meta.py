"""MLP decoder in encoder feature space, supervised pretraining and Meta-SGD.

A shape is turned into a :class:`ShapeTask`: features of its input cloud (the
support set, every target is 0) and features of its near-surface samples (the
query set, analytic SDF targets). The encoder is frozen during meta-learning,
so tasks carry plain feature arrays.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, ParamSet, Tensor
from .encoder import EncoderConfig, encode, sample_features
from .geometry import ShapeRecord, voxelize

log = logging.getLogger(__name__)

DESK_HIDDEN = (64, 64, 64, 64)


@dataclass(frozen=True)
class DecoderConfig:
    in_dim: int = 113
    hidden: tuple[int, ...] = DESK_HIDDEN


def init_decoder(cfg: DecoderConfig, rng: np.random.Generator) -> ParamSet:
    """Weights and biases uniform in +-1/sqrt(fan_in)."""
    sizes = (cfg.in_dim, *cfg.hidden, 1)
    items = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(a)
        items.append((f"l{i}.w", rng.uniform(-bound, bound, size=(a, b))))
        items.append((f"l{i}.b", rng.uniform(-bound, bound, size=(b,))))
    return ParamSet(items, requires_grad=True)


def decode(theta: ParamSet, features) -> Tensor:
    """SDF estimates in (-1, 1), one per feature row."""
    h = features if isinstance(features, Tensor) else Tensor(np.atleast_2d(features))
    n_layers = len(theta) // 2
    if h.ndim != 2 or h.shape[1] != theta["l0.w"].shape[0]:
        raise ValueError(f"decoder expects {theta['l0.w'].shape[0]} features per row, got shape {h.shape}")
    for i in range(n_layers):
        h = ad.add(ad.matmul(h, theta[f"l{i}.w"]), theta[f"l{i}.b"])
        h = ad.relu(h) if i < n_layers - 1 else ad.tanh(h)
    return ad.reshape(h, (h.shape[0],))


@dataclass
class ShapeTask:
    support: np.ndarray  # (N_p, D) features of the input cloud
    query: np.ndarray  # (M, D) features of the near-surface samples
    query_sdf: np.ndarray  # (M,) targets


def support_loss(theta: ParamSet, support_features) -> Tensor:
    """Sum of |f(x)| over the support points (their targets are all 0)."""
    if len(support_features) == 0:
        raise ValueError("empty support set")
    return ad.tsum(ad.absolute(decode(theta, support_features)))


def query_loss(phi: ParamSet, query_features, targets, clamp: float | None = 0.99) -> Tensor:
    """Sum of |f(x) - s| over the query set, with targets clamped to +-clamp."""
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if targets.size == 0:
        raise ValueError("empty query set")
    if clamp is not None:
        targets = np.clip(targets, -clamp, clamp)
    return ad.tsum(ad.absolute(ad.sub(decode(phi, query_features), targets)))


def adapt(theta: ParamSet, alpha: ParamSet, support_features, k: int,
          second_order: bool = True, trace: list | None = None) -> ParamSet:
    """``k`` steps of ``phi <- phi - alpha * grad L_S(phi)`` starting from ``theta``.

    With ``second_order`` the inner gradients are recorded, so the result stays
    differentiable through the steps with respect to theta and alpha. Without
    it the inner gradients are constants (first-order approximation).
    ``trace`` receives the support loss before each step.
    """
    if k < 0:
        raise ValueError("number of adaptation steps must be >= 0")
    # constants become fresh leaves so the inner gradient exists
    phi = ParamSet([(n, p if p.requires_grad else Tensor(p.data, requires_grad=True)) for n, p in theta.items()])
    for step in range(k):
        loss = support_loss(phi, support_features)
        if trace is not None:
            trace.append(loss.item())
        try:
            g = ad.grad(loss, phi, create_graph=second_order)
        except NumericalError as exc:
            raise NumericalError(f"adaptation step {step}: {exc}", exc.node_id) from exc
        phi = ParamSet([(name, ad.sub(p, ad.mul(alpha[name], g[name]))) for name, p in phi.items()])
        bad = [name for name, p in phi.items() if not np.all(np.isfinite(p.data))]
        if bad:
            raise NumericalError(f"adaptation step {step}: non-finite parameters {bad}")
    return phi


# -- meta-learning --------------------------------------------------------------------


@dataclass(frozen=True)
class MetaConfig:
    k: int = 5
    alpha_init: float = 1e-6
    beta: float = 1e-6
    batch: int = 4
    epochs: int = 100
    second_order: bool = True
    outer: str = "sgd"  # "sgd" is the plain update theta -= beta * grad; "adam" also available
    clamp: float = 0.99
    alpha_lr: float | None = None  # outer step for alpha; None uses beta

    @property
    def alpha_step(self) -> float:
        return self.beta if self.alpha_lr is None else self.alpha_lr

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("K must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.alpha_lr is not None and self.alpha_lr < 0:
            raise ValueError("alpha_lr must be >= 0")
        if self.outer not in ("sgd", "adam"):
            raise ValueError(f"unknown outer optimizer {self.outer!r}")


def init_alpha(theta: ParamSet, value: float) -> ParamSet:
    return ParamSet([(k, np.full(v.shape, float(value))) for k, v in theta.items()], requires_grad=True)


def meta_gradients(theta: ParamSet, alpha: ParamSet, tasks: Sequence[ShapeTask], cfg: MetaConfig):
    """Outer gradients of the summed adapted query losses.

    Returns ``(grad_theta, grad_alpha, total_loss)`` as arrays. Shapes are
    processed one at a time and their gradients summed in batch order.
    """
    if not tasks:
        raise ValueError("empty batch")
    th = theta.detached(requires_grad=True)
    al = alpha.detached(requires_grad=True)
    g_th = {k: np.zeros(v.shape) for k, v in th.items()}
    g_al = {k: np.zeros(v.shape) for k, v in al.items()}
    total = 0.0
    for i, task in enumerate(tasks):
        try:
            phi = adapt(th, al, task.support, cfg.k, cfg.second_order)
            loss = query_loss(phi, task.query, task.query_sdf, cfg.clamp)
            grads = ad.grad(loss, th.tensors() + al.tensors())
        except NumericalError as exc:
            raise NumericalError(f"shape {i} of the batch: {exc}", exc.node_id) from exc
        n = len(th)
        for name, g in zip(th.names(), grads[:n]):
            g_th[name] += g.data
        for name, g in zip(al.names(), grads[n:]):
            g_al[name] += g.data
        total += loss.item()
    return g_th, g_al, total


class Adam:
    """Adam update rule over named arrays; state is plain arrays for checkpointing."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        out = {}
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for name in self.m:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        key = f"{prefix}.t"
        if key not in arrays:
            return
        self.t = int(arrays[key][0])
        for k, v in arrays.items():
            if k.startswith(f"{prefix}.m."):
                self.m[k[len(prefix) + 3:]] = v.copy()
            elif k.startswith(f"{prefix}.v."):
                self.v[k[len(prefix) + 3:]] = v.copy()


@dataclass
class MetaState:
    theta: ParamSet
    alpha: ParamSet


class OuterAdam:
    """Separate Adam rules for theta (step beta) and alpha (step alpha_lr)."""

    def __init__(self, cfg: MetaConfig):
        self.theta = Adam(cfg.beta)
        self.alpha = Adam(cfg.alpha_step)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return self.theta.state_arrays("adam_theta") | self.alpha.state_arrays("adam_alpha")

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.theta.load_state_arrays(arrays, "adam_theta")
        self.alpha.load_state_arrays(arrays, "adam_alpha")


def make_outer_optimizer(cfg: MetaConfig) -> OuterAdam | None:
    return OuterAdam(cfg) if cfg.outer == "adam" else None


def meta_step(state: MetaState, tasks: Sequence[ShapeTask], cfg: MetaConfig,
              adam: OuterAdam | None = None) -> tuple[MetaState, float]:
    """One outer update of (theta, alpha) on a batch of shapes."""
    g_th, g_al, total = meta_gradients(state.theta, state.alpha, tasks, cfg)
    th, al = state.theta.arrays(), state.alpha.arrays()
    if cfg.outer == "adam":
        if adam is None:
            raise ValueError("the adam outer optimizer needs an OuterAdam instance")
        new_th = adam.theta.step(th, g_th)
        new_al = adam.alpha.step(al, g_al)
    else:
        new_th = {k: v - cfg.beta * g_th[k] for k, v in th.items()}
        new_al = {k: v - cfg.alpha_step * g_al[k] for k, v in al.items()}
    return MetaState(ParamSet(new_th, requires_grad=True), ParamSet(new_al, requires_grad=True)), total


# -- building tasks from shapes ----------------------------------------------------------


def pyramid_arrays(encoder_params: ParamSet, cloud: np.ndarray, enc_cfg: EncoderConfig) -> list[Tensor]:
    """Frozen (non-differentiable) feature pyramid of an input cloud."""
    with ad.no_grad():
        return encode(encoder_params, voxelize(cloud, enc_cfg.resolution), enc_cfg)


def features_at(pyramid: list[Tensor], points: np.ndarray, chunk: int = 32768) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = []
    with ad.no_grad():
        for s in range(0, len(points), chunk):
            out.append(sample_features(pyramid, points[s : s + chunk]).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, sum(g.shape[0] for g in pyramid)))


def make_task(encoder_params: ParamSet, record: ShapeRecord, enc_cfg: EncoderConfig) -> ShapeTask:
    pyr = pyramid_arrays(encoder_params, record.cloud, enc_cfg)
    return ShapeTask(features_at(pyr, record.cloud), features_at(pyr, record.samples.points), record.samples.sdf.copy())


def meta_epoch(state: MetaState, tasks: Sequence[ShapeTask], cfg: MetaConfig, epoch: int, seed: int,
               adam: OuterAdam | None = None) -> tuple[MetaState, list[float]]:
    """One pass over the training tasks in batches, shuffled by ``(seed, epoch)``.

    Returns the new state and the per-point query loss of each batch.
    """
    order = np.random.default_rng([seed, 7919, epoch]).permutation(len(tasks))
    losses = []
    for s in range(0, len(order), cfg.batch):
        batch = [tasks[i] for i in order[s : s + cfg.batch]]
        state, loss = meta_step(state, batch, cfg, adam)
        losses.append(loss / sum(len(t.query_sdf) for t in batch))
    return state, losses


def mean_query_loss(state: MetaState, tasks: Sequence[ShapeTask], cfg: MetaConfig, k: int | None = None) -> float:
    """Average per-point adapted query loss over tasks (no outer gradient)."""
    k = cfg.k if k is None else k
    vals = []
    for task in tasks:
        phi = adapt(state.theta, state.alpha, task.support, k, second_order=False)
        with ad.no_grad():
            vals.append(query_loss(phi, task.query, task.query_sdf, cfg.clamp).item() / len(task.query_sdf))
    return float(np.mean(vals))


# -- supervised base training ------------------------------------------------------------


@dataclass(frozen=True)
class BaseConfig:
    epochs: int = 50
    lr: float = 1e-5
    batch: int = 8
    points_per_shape: int = 0  # 0 uses every query sample
    clamp: float = 0.99


def base_loss(encoder_params: ParamSet, theta: ParamSet, grids: Sequence[np.ndarray],
              samples: Sequence[tuple[np.ndarray, np.ndarray]], enc_cfg: EncoderConfig, clamp: float) -> Tensor:
    """Mean L1 error over every sample of every shape in the batch."""
    total, count = None, 0
    for grid, (pts, sdf) in zip(grids, samples):
        pyr = encode(encoder_params, grid, enc_cfg)
        pred = decode(theta, sample_features(pyr, pts))
        err = ad.tsum(ad.absolute(ad.sub(pred, np.clip(sdf, -clamp, clamp))))
        total = err if total is None else ad.add(total, err)
        count += len(sdf)
    return ad.scale(total, 1.0 / count)


@dataclass
class BaseState:
    encoder: ParamSet
    theta: ParamSet


def base_epoch(state: BaseState, records: Sequence[ShapeRecord], grids: Sequence[np.ndarray],
               enc_cfg: EncoderConfig, cfg: BaseConfig, epoch: int, seed: int,
               adam: Adam) -> tuple[BaseState, list[float]]:
    """One epoch of joint encoder+decoder L1 regression with Adam."""
    rng = np.random.default_rng([seed, 104729, epoch])
    order = rng.permutation(len(records))
    losses = []
    enc, th = state.encoder, state.theta
    for s in range(0, len(order), cfg.batch):
        idx = order[s : s + cfg.batch]
        batch = []
        for i in idx:
            smp = records[i].samples
            if cfg.points_per_shape and cfg.points_per_shape < len(smp):
                pick = rng.choice(len(smp), cfg.points_per_shape, replace=False)
                batch.append((smp.points[pick], smp.sdf[pick]))
            else:
                batch.append((smp.points, smp.sdf))
        enc_l = enc.detached(requires_grad=True)
        th_l = th.detached(requires_grad=True)
        loss = base_loss(enc_l, th_l, [grids[i] for i in idx], batch, enc_cfg, cfg.clamp)
        grads = ad.grad(loss, enc_l.tensors() + th_l.tensors())
        names = [f"enc.{n}" for n in enc_l.names()] + [f"dec.{n}" for n in th_l.names()]
        params = dict(zip(names, [t.data for t in enc_l.tensors() + th_l.tensors()]))
        new = adam.step(params, dict(zip(names, [g.data for g in grads])))
        enc = ParamSet([(n, new[f"enc.{n}"]) for n in enc.names()], requires_grad=True)
        th = ParamSet([(n, new[f"dec.{n}"]) for n in th.names()], requires_grad=True)
        losses.append(loss.item())
    return BaseState(enc, th), losses


def pretrain_base(encoder_params: ParamSet, theta: ParamSet, records: Sequence[ShapeRecord],
                  enc_cfg: EncoderConfig, cfg: BaseConfig, seed: int = 0) -> tuple[BaseState, list[float]]:
    if not records:
        raise ValueError("empty training set")
    grids = [voxelize(r.cloud, enc_cfg.resolution) for r in records]
    adam = Adam(cfg.lr)
    state = BaseState(encoder_params, theta)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        state, losses = base_epoch(state, records, grids, enc_cfg, cfg, epoch, seed, adam)
        history.extend(losses)
    return state, history


# -- inference ---------------------------------------------------------------------------


class SDFEvaluator:
    """``x -> Phi_phi(Psi_X(x))`` for one input cloud. Immutable after construction."""

    def __init__(self, pyramid: list[Tensor], phi: ParamSet, support_trace: list[float] | None = None,
                 step_params: list[ParamSet] | None = None):
        self._pyramid = [Tensor(g.data.copy()) for g in pyramid]
        self.phi = phi.detached()
        self.support_trace = list(support_trace or [])
        self.step_params = step_params or [self.phi]

    def __call__(self, points: np.ndarray, chunk: int = 16384, params: ParamSet | None = None) -> np.ndarray:
        params = self.phi if params is None else params
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(points))
        with ad.no_grad():
            for s in range(0, len(points), chunk):
                feats = sample_features(self._pyramid, points[s : s + chunk])
                out[s : s + chunk] = decode(params, feats).data
        return out

    def at_step(self, step: int) -> "SDFEvaluator":
        return SDFEvaluator(self._pyramid, self.step_params[step])

    def features(self, points: np.ndarray) -> np.ndarray:
        return features_at(self._pyramid, points)


def infer(theta: ParamSet, alpha: ParamSet | None, encoder_params: ParamSet, cloud: np.ndarray,
          enc_cfg: EncoderConfig, k: int) -> SDFEvaluator:
    """Voxelize, encode, adapt ``k`` steps on the cloud (targets 0), return the evaluator."""
    pyr = pyramid_arrays(encoder_params, cloud, enc_cfg)
    theta = theta.detached()
    if alpha is None or k == 0:
        return SDFEvaluator(pyr, theta)
    support = features_at(pyr, cloud)
    steps = [theta]
    trace: list[float] = []
    phi = theta
    for _ in range(k):
        phi = adapt(phi, alpha, support, 1, second_order=False, trace=trace).detached()
        steps.append(phi)
    with ad.no_grad():
        trace.append(support_loss(phi, support).item())
    return SDFEvaluator(pyr, phi, trace, steps)
