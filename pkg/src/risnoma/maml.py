"""Meta-learned joint phase-shift / power-allocation optimizer.

Inner loop: J gradient steps on the RIS phases theta, each differentiating
the loss through both the rate expressions and the network input H(theta).
Outer step: one gradient step on the network weights and on the log step
size g (gamma_theta = exp(g)), differentiating the post-adaptation loss
through all J inner steps.

Scenarios are processed as a batch along a leading axis; each scenario's
loss depends only on its own slice, so the gradient of the summed loss with
respect to the stacked phases is the per-scenario gradient.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tape as tp
from .channel import (ChannelSet, Scenario, TopologyConfig, combined_rows, generate_topology,
                      make_rng, sample_channels, stack_channels)
from .errors import InvalidConfig, SingularMatrix
from .noma import (Clustering, RateReport, cluster_by_channel, cluster_by_qos, direct_gains,
                   noma_sinr, oma_sinr, oma_sum_rate, rates_mbps, sum_rate, _take_users)
from .policy import NetworkWeights, encode_inputs, forward, init_weights, layer_dims_for, map_to_power

log = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi
LOG_COLUMNS = ("episode", "mean_loss", "mean_sum_rate_mbps", "gamma_theta", "skipped_episodes")


@dataclass(frozen=True)
class LossWeights:
    w1: float = -1.0  # per Mbit/s of sum rate
    w2: float = 10.0  # per Mbit/s of QoS shortfall

    def __post_init__(self):
        if not (self.w1 < 0 < self.w2):
            raise InvalidConfig("need w1 < 0 < w2")


@dataclass(frozen=True)
class TrainingConfig:
    inner_steps: int = 5
    inner_lr: float = 0.01
    outer_lr: float = 1e-3
    episodes: int = 2000
    batch_size: int = 16
    second_order: bool = True
    seed: int = 0
    phase_mode: str = "wrap"  # or "clip"
    optimizer: str = "sgd"  # or "adam"
    hidden: tuple = (128, 128)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    clustering: str = "qos"  # or "channel"
    access: str = "noma"  # or "oma"
    grad_clip: float | None = None  # max global gradient norm; None disables

    def __post_init__(self):
        if self.inner_steps < 1:
            raise InvalidConfig("inner_steps must be >= 1")
        if not (self.inner_lr > 0 and self.outer_lr > 0):
            raise InvalidConfig("learning rates must be positive")
        if self.batch_size < 1 or self.episodes < 0:
            raise InvalidConfig("batch_size >= 1 and episodes >= 0 required")
        if self.phase_mode not in ("wrap", "clip"):
            raise InvalidConfig(f"phase_mode must be wrap or clip, got {self.phase_mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidConfig(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.clustering not in ("qos", "channel"):
            raise InvalidConfig(f"unknown clustering {self.clustering!r}")
        if self.access not in ("noma", "oma"):
            raise InvalidConfig(f"unknown access {self.access!r}")

    def replace(self, **changes) -> TrainingConfig:
        return dataclasses.replace(self, **changes)


@dataclass
class LearnedStepSize:
    g: float

    @classmethod
    def from_gamma(cls, gamma: float) -> LearnedStepSize:
        return cls(float(np.log(gamma)))

    @property
    def gamma(self) -> float:
        return float(np.exp(self.g))


@dataclass
class Batch:
    """Stacked scenarios sharing one topology shape."""
    channels: ChannelSet  # leading axis B
    qos: np.ndarray  # (B, K) bit/s, user order
    path_loss: np.ndarray  # (B, K)
    noise: np.ndarray  # (B,) watts over the full band
    order: np.ndarray  # (B, K) users in power-vector order
    bandwidth: float
    p_max: float
    access: str = "noma"

    @property
    def size(self) -> int:
        return self.qos.shape[0]

    @property
    def num_elements(self) -> int:
        return self.channels.h_br.shape[-2]


def user_order(scenario: Scenario, channels: ChannelSet, clustering="qos", access="noma"):
    if access == "oma":
        return np.arange(scenario.num_users)
    if clustering == "qos":
        return cluster_by_qos(scenario.qos).order
    if clustering == "channel":
        return cluster_by_channel(direct_gains(channels)).order
    raise InvalidConfig(f"unknown clustering {clustering!r}")


def make_batch(scenarios, channel_sets, clustering="qos", access="noma", orders=None) -> Batch:
    scenarios, channel_sets = list(scenarios), list(channel_sets)
    if not scenarios:
        raise ValueError("empty batch")
    cfg = scenarios[0].config
    if orders is None:
        orders = [user_order(s, c, clustering, access) for s, c in zip(scenarios, channel_sets)]
    return Batch(
        channels=stack_channels(channel_sets),
        qos=np.stack([s.qos for s in scenarios]),
        path_loss=np.stack([c.path_loss for c in channel_sets]),
        noise=np.array([s.noise_power for s in scenarios]),
        order=np.stack([np.asarray(o) for o in orders]),
        bandwidth=cfg.bandwidth,
        p_max=cfg.p_max,
        access=access,
    )


def draw_batch(topology: TopologyConfig, seeds, clustering="qos", access="noma") -> Batch:
    """Fresh scenarios, one per seed tuple."""
    scenarios, chans = [], []
    for s in seeds:
        scn = generate_topology(topology, (*s, 1))
        scenarios.append(scn)
        chans.append(sample_channels(scn, (*s, 2)))
    return make_batch(scenarios, chans, clustering, access)


# ---------------------------------------------------------------------------
# loss

@dataclass
class Evaluation:
    loss: object  # (B,) per-scenario loss
    rates: object  # (B, K) Mbit/s in power-vector order
    power: object  # (B, K) watts in power-vector order


def evaluate(theta, params, batch: Batch, weights: LossWeights = LossWeights()) -> Evaluation:
    """Loss w1 * sum R + w2 * sum max(R_QoS - R, 0), rates in Mbit/s.

    theta: (B, N) array or Var.  params: network arrays or Vars.
    """
    rows = combined_rows(batch.channels, theta)
    ordered = _take_users(rows, batch.order)
    qos = np.take_along_axis(batch.qos, batch.order, axis=-1)
    pl = np.take_along_axis(batch.path_loss, batch.order, axis=-1)
    x = encode_inputs(ordered.conj(), qos, pl)
    P = map_to_power(forward(params, x), batch.p_max)
    if batch.access == "noma":
        gamma, _ = noma_sinr(rows, batch.order, P, batch.noise)
        R = rates_mbps(gamma, batch.bandwidth)
    else:
        K = batch.order.shape[-1]
        gamma = oma_sinr(ordered, P, batch.noise)
        R = rates_mbps(gamma, batch.bandwidth / K)
    shortfall = tp.relu(qos / 1e6 - R)
    loss = weights.w1 * tp.vsum(R, axis=-1) + weights.w2 * tp.vsum(shortfall, axis=-1)
    return Evaluation(loss, R, P)


def loss(theta, params, batch: Batch, weights: LossWeights = LossWeights()):
    return evaluate(theta, params, batch, weights).loss


# ---------------------------------------------------------------------------
# inner loop

def wrap_phase(theta):
    """theta mod 2*pi into [0, 2*pi), unit derivative."""
    v = tp.value_of(theta)
    k = np.floor(v / TWO_PI)
    out = v - TWO_PI * k
    k = np.where(out >= TWO_PI, k + 1, k)
    k = np.where(out < 0, k - 1, k)
    y = theta - tp.constant_like(theta, TWO_PI * k)
    yv = tp.value_of(y)
    bad = (yv < 0) | (yv >= TWO_PI)
    if bad.any():
        # subtracting a component's own value lands on exactly 0.0
        y = y - tp.constant_like(y, np.where(bad, yv, 0.0))
    return y


def clip_phase(theta):
    """Clip into [0, 2*pi]; zero derivative where clipping is active."""
    v = tp.value_of(theta)
    inside = ((v >= 0) & (v <= TWO_PI)).astype(float)
    return theta * inside + tp.constant_like(theta, np.clip(v, 0.0, TWO_PI) * (1.0 - inside))


@dataclass
class EpisodeResult:
    losses: np.ndarray  # (J+1, B)
    sum_rates: np.ndarray  # (J+1, B) Mbit/s
    theta: np.ndarray  # (B, N) final phases
    power: np.ndarray  # (B, K) final powers, power-vector order
    violations: int = 0  # phase/power feasibility failures seen


def _count_violations(theta_v, power_v, p_max, phase_mode):
    hi_ok = theta_v < TWO_PI if phase_mode == "wrap" else theta_v <= TWO_PI
    bad = int(np.sum(~((theta_v >= 0) & hi_ok)))
    bad += int(np.sum(power_v < 0))
    bad += int(np.sum(power_v.sum(axis=-1) > p_max))
    return bad


def inner_loop(theta0, params, log_step, batch: Batch, J: int, tape: tp.Tape,
               weights: LossWeights = LossWeights(), second_order=True, phase_mode="wrap"):
    """Run J phase updates; returns (theta_J, final Evaluation, EpisodeResult).

    With `second_order` the adjoint of every step is recorded, so theta_J
    stays differentiable in the network weights and in `log_step`.
    Otherwise the step directions enter as constants.
    """
    if J < 1:
        raise InvalidConfig("J must be >= 1")
    project = wrap_phase if phase_mode == "wrap" else clip_phase
    theta = tape.constant(theta0)
    gamma = tp.exp(log_step) if isinstance(log_step, tp.Var) else float(np.exp(log_step))
    losses, rates = [], []
    violations = 0
    for _ in range(J):
        ev = evaluate(theta, params, batch, weights)
        losses.append(ev.loss.value.copy())
        rates.append(ev.rates.value.sum(axis=-1))
        violations += _count_violations(theta.value, ev.power.value, batch.p_max, phase_mode)
        total = ev.loss.sum()
        if second_order:
            (grad,) = tp.backward_as_graph(total, [theta])
        else:
            grad = tape.constant(tp.backward(total, [theta])[0])
        theta = project(theta - gamma * grad)
    final = evaluate(theta, params, batch, weights)
    losses.append(final.loss.value.copy())
    rates.append(final.rates.value.sum(axis=-1))
    violations += _count_violations(theta.value, final.power.value, batch.p_max, phase_mode)
    result = EpisodeResult(np.array(losses), np.array(rates), theta.value.copy(),
                           final.power.value.copy(), violations)
    return theta, final, result


# ---------------------------------------------------------------------------
# outer update

class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, arrays, grads):
        return [a - self.lr * g for a, g in zip(arrays, grads)]


class Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = self.v = None

    def step(self, arrays, grads):
        if self.m is None:
            self.m = [np.zeros_like(a) for a in arrays]
            self.v = [np.zeros_like(a) for a in arrays]
        self.t += 1
        out = []
        for i, (a, g) in enumerate(zip(arrays, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1 ** self.t)
            vh = self.v[i] / (1 - self.b2 ** self.t)
            out.append(a - self.lr * mh / (np.sqrt(vh) + self.eps))
        return out


def make_optimizer(config: TrainingConfig):
    return Adam(config.outer_lr) if config.optimizer == "adam" else SGD(config.outer_lr)


def meta_gradient(weights: NetworkWeights, step: LearnedStepSize, batch: Batch, theta0,
                  config: TrainingConfig):
    """Mean post-adaptation loss and its gradient w.r.t. (weights..., g)."""
    tape = tp.Tape()
    params = weights.on_tape(tape)
    g = tape.constant(step.g)
    _, final, result = inner_loop(theta0, params, g, batch, config.inner_steps, tape,
                                  config.loss_weights, config.second_order, config.phase_mode)
    mean_loss = final.loss.sum() * (1.0 / batch.size)
    grads = tp.backward(mean_loss, params + [g])
    return float(mean_loss.value), grads, result


def _clip(grads, max_norm):
    if max_norm is None:
        return grads
    norm = float(np.sqrt(sum(float(np.sum(x * x)) for x in grads)))
    if norm <= max_norm:
        return grads
    return [x * (max_norm / norm) for x in grads]


def outer_step(weights: NetworkWeights, step: LearnedStepSize, batch: Batch,
               config: TrainingConfig, theta0=None, optimizer=None, rng=None):
    """One meta-update; returns (new weights, new step size, info dict)."""
    if batch.size < 1:
        raise ValueError("empty batch")
    if theta0 is None:
        rng = rng or make_rng(config.seed, 3)
        theta0 = rng.uniform(0.0, TWO_PI, size=(batch.size, batch.num_elements))
    optimizer = optimizer or make_optimizer(config)
    value, grads, result = meta_gradient(weights, step, batch, theta0, config)
    grads = _clip(grads, config.grad_clip)
    arrays = weights.arrays() + [np.array(step.g)]
    new = optimizer.step(arrays, grads)
    new_weights = NetworkWeights.from_arrays(weights.layer_dims, new[:-1])
    info = {"loss": value, "grads": grads, "result": result}
    return new_weights, LearnedStepSize(float(new[-1])), info


# ---------------------------------------------------------------------------
# training and inference

@dataclass
class LogRow:
    episode: int
    mean_loss: float
    mean_sum_rate_mbps: float
    gamma_theta: float
    skipped_episodes: int
    violations: int = 0

    def csv_fields(self):
        return (str(self.episode), repr(self.mean_loss), repr(self.mean_sum_rate_mbps),
                repr(self.gamma_theta), str(self.skipped_episodes))


def write_log(rows, path) -> None:
    lines = [",".join(LOG_COLUMNS)] + [",".join(r.csv_fields()) for r in rows]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def train(config: TrainingConfig, topology: TopologyConfig, batches=None,
          init: NetworkWeights | None = None, progress=None):
    """Meta-train the power network; returns (weights, step size, log rows).

    `batches`, if given, is a fixed Batch reused every episode instead of
    drawing fresh scenarios.
    """
    topology.validate(config.access)
    dims = layer_dims_for(topology.num_users, topology.num_antennas, config.hidden)
    weights = init if init is not None else init_weights(dims, (config.seed, 0))
    step = LearnedStepSize.from_gamma(config.inner_lr)
    optimizer = make_optimizer(config)
    rows, skipped = [], 0
    for ep in range(config.episodes):
        if batches is None:
            seeds = [(config.seed, ep, b) for b in range(config.batch_size)]
            batch = draw_batch(topology, seeds, config.clustering, config.access)
        else:
            batch = batches
        rng = make_rng(config.seed, ep, 3)
        theta0 = rng.uniform(0.0, TWO_PI, size=(batch.size, batch.num_elements))
        try:
            weights, step, info = outer_step(weights, step, batch, config, theta0, optimizer)
        except SingularMatrix:
            skipped += 1
            log.debug("episode %d skipped: singular ZF", ep)
            continue
        res = info["result"]
        row = LogRow(ep, info["loss"], float(res.sum_rates[-1].mean()), step.gamma, skipped,
                     res.violations)
        rows.append(row)
        if progress is not None:
            progress(row)
    return weights, step, rows


def infer_batch(weights: NetworkWeights, step: LearnedStepSize, batch: Batch, J: int,
                theta0, config: TrainingConfig | None = None):
    """Phase-only adaptation with fixed weights; returns EpisodeResult."""
    config = config or TrainingConfig()
    tape = tp.Tape()
    params = weights.arrays()
    _, _, result = inner_loop(theta0, params, step.g, batch, J, tape, config.loss_weights,
                              second_order=False, phase_mode=config.phase_mode)
    return result


def infer(weights: NetworkWeights, step: LearnedStepSize, scenario: Scenario,
          channels: ChannelSet, J: int = 5, theta0=None, clustering="qos", access="noma",
          config: TrainingConfig | None = None):
    """Solve one instance: returns (theta*, P* in user order, RateReport)."""
    order = user_order(scenario, channels, clustering, access)
    batch = make_batch([scenario], [channels], orders=[order], access=access)
    if theta0 is None:
        theta0 = make_rng(0, 3).uniform(0.0, TWO_PI, size=batch.num_elements)
    result = infer_batch(weights, step, batch, J, np.asarray(theta0, float)[None, :], config)
    theta = result.theta[0]
    P = np.empty(scenario.num_users)
    P[order] = result.power[0]
    return theta, P, report_for(scenario, channels, theta, P, order, access)


def report_for(scenario, channels, theta, P_user, order, access="noma") -> RateReport:
    """RateReport for powers given in user order."""
    if access == "oma":
        return oma_sum_rate(channels, theta, P_user, scenario)
    order = np.asarray(order)
    cl = Clustering(tuple((int(order[i]), int(order[i + 1])) for i in range(0, len(order), 2)))
    return sum_rate(channels, theta, cl, P_user[order], scenario)


__all__ = [
    "LossWeights", "TrainingConfig", "LearnedStepSize", "Batch", "Evaluation", "EpisodeResult",
    "LogRow", "make_batch", "draw_batch", "user_order", "evaluate", "loss", "wrap_phase",
    "clip_phase", "inner_loop", "meta_gradient", "outer_step", "train", "infer", "infer_batch",
    "report_for", "write_log", "SGD", "Adam", "TWO_PI",
]
