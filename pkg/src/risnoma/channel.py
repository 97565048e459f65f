"""Network geometry, fading realizations and the RIS combined channel.

Geometry is 2-D: the BS sits at a corner of a square area, the RIS and the
mobile users are dropped uniformly inside it.  Large-scale losses:

* BS-MU:  d_k ** -alpha            (Rayleigh small-scale fading)
* RIS-MU: d_Rk ** -alpha           (Rayleigh)
* BS-RIS: d_BR ** -ris_link_exponent  (Rician, ULA line-of-sight part)

Channel vectors are stored as the column vectors h (the link is h^H).
All randomness comes from a Philox generator keyed by the caller's seed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tape as tp
from .errors import InvalidConfig, InvalidDistance

RNG_ALGORITHM = "philox"


def make_rng(*seed) -> np.random.Generator:
    """Counter-based generator for the stream identified by `seed` ints."""
    flat = []
    for s in seed:
        if isinstance(s, (tuple, list)):
            flat.extend(int(v) for v in s)
        else:
            flat.append(int(s))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(flat)))


def dbm_to_watt(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def watt_to_dbm(watt):
    return 10.0 * np.log10(watt) + 30.0


def path_loss(d, alpha):
    """d ** -alpha for d in meters."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise InvalidDistance(f"distance must be positive, got {d}")
    out = d ** -float(alpha)
    return float(out) if out.ndim == 0 else out


def noise_power(noise_psd_dbm_hz, bandwidth):
    """Thermal noise power in watts over `bandwidth` Hz."""
    return float(10.0 ** ((noise_psd_dbm_hz - 30.0) / 10.0) * bandwidth)


@dataclass(frozen=True)
class TopologyConfig:
    area_width: float = 10.0
    bs_position: tuple = (0.0, 0.0)
    ris_position: tuple | None = None  # None: dropped uniformly per scenario
    num_antennas: int = 16
    num_elements: int = 16
    num_users: int = 4
    path_loss_exponent: float = 3.0
    ris_link_exponent: float = 2.2
    rician_factor: float = 10.0
    bandwidth: float = 4e6
    noise_psd: float = -169.0
    p_max: float = 0.1
    qos_low: float = 0.5e6
    qos_high: float = 2.5e6
    min_distance: float = 1.0
    rng_algorithm: str = RNG_ALGORITHM

    def validate(self, access: str = "noma") -> None:
        K, M = self.num_users, self.num_antennas
        if K < 2 or K % 2:
            raise InvalidConfig(f"num_users must be even and >= 2, got {K}")
        if M < K // 2:
            raise InvalidConfig(f"need num_antennas >= K/2 for zero forcing ({M} < {K // 2})")
        if access == "oma" and M < K:
            raise InvalidConfig(f"OMA baseline needs num_antennas >= K ({M} < {K})")
        if self.num_elements < 1:
            raise InvalidConfig("num_elements must be >= 1")
        for name in ("path_loss_exponent", "ris_link_exponent", "bandwidth", "p_max", "area_width"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive")
        if self.rician_factor < 0:
            raise InvalidConfig("rician_factor must be >= 0")
        if not 0 < self.qos_low <= self.qos_high:
            raise InvalidConfig("need 0 < qos_low <= qos_high")
        if 2 * self.min_distance >= self.area_width:
            raise InvalidConfig("min_distance too large for the area")
        if self.rng_algorithm != RNG_ALGORITHM:
            raise InvalidConfig(f"unsupported rng {self.rng_algorithm!r}")

    def replace(self, **changes) -> TopologyConfig:
        return dataclasses.replace(self, **changes)


@dataclass
class Scenario:
    config: TopologyConfig
    mu_positions: np.ndarray  # (K, 2) meters
    ris_position: np.ndarray  # (2,) meters
    qos: np.ndarray  # (K,) bit/s
    noise_power: float  # watts over the full band

    @property
    def num_users(self) -> int:
        return len(self.qos)

    @property
    def bs_distances(self) -> np.ndarray:
        return np.linalg.norm(self.mu_positions - np.asarray(self.config.bs_position), axis=1)

    @property
    def ris_distances(self) -> np.ndarray:
        return np.linalg.norm(self.mu_positions - self.ris_position, axis=1)

    @property
    def bs_ris_distance(self) -> float:
        return float(np.linalg.norm(self.ris_position - np.asarray(self.config.bs_position)))

    @property
    def path_loss(self) -> np.ndarray:
        return path_loss(self.bs_distances, self.config.path_loss_exponent)


@dataclass
class ChannelSet:
    h_br: np.ndarray  # (..., N, M)
    h_direct: np.ndarray  # (..., K, M) columns h_B,k
    h_ris: np.ndarray  # (..., K, N) columns h_R,k
    path_loss: np.ndarray  # (..., K)

    @property
    def dims(self):
        """(N, M, K)."""
        return self.h_br.shape[-2], self.h_br.shape[-1], self.h_direct.shape[-2]


def stack_channels(channel_sets) -> ChannelSet:
    """Stack per-scenario channel sets along a new leading batch axis."""
    return ChannelSet(*(np.stack([getattr(c, f.name) for c in channel_sets])
                        for f in dataclasses.fields(ChannelSet)))


def _uniform_point(rng, width, anchors, min_distance):
    while True:
        p = rng.uniform(0.0, width, size=2)
        if all(np.hypot(*(p - a)) >= min_distance for a in anchors):
            return p


def generate_topology(config: TopologyConfig, rng_seed) -> Scenario:
    """Drop the RIS (unless fixed) and K users; draw QoS requirements."""
    config.validate()
    rng = make_rng(rng_seed)
    bs = np.asarray(config.bs_position, dtype=float)
    if config.ris_position is None:
        ris = _uniform_point(rng, config.area_width, [bs], config.min_distance)
    else:
        ris = np.asarray(config.ris_position, dtype=float)
    mus = np.array([_uniform_point(rng, config.area_width, [bs, ris], config.min_distance)
                    for _ in range(config.num_users)])
    qos = rng.uniform(config.qos_low, config.qos_high, size=config.num_users)
    sigma2 = noise_power(config.noise_psd, config.bandwidth)
    return Scenario(config, mus, ris, qos, sigma2)


def _cscg(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def ula_steering(n: int, angle: float) -> np.ndarray:
    """Half-wavelength ULA response, unit-modulus entries."""
    return np.exp(1j * np.pi * np.arange(n) * np.cos(angle))


def sample_channels(scenario: Scenario, rng_seed) -> ChannelSet:
    cfg = scenario.config
    N, M, K = cfg.num_elements, cfg.num_antennas, scenario.num_users
    rng = make_rng(rng_seed)
    kappa = cfg.rician_factor
    aoa, aod = rng.uniform(0.0, np.pi, size=2)
    los = np.outer(ula_steering(N, aoa), ula_steering(M, aod).conj())
    if np.isinf(kappa):
        small = los
    else:
        small = np.sqrt(kappa / (1 + kappa)) * los + np.sqrt(1 / (1 + kappa)) * _cscg(rng, (N, M))
    h_br = np.sqrt(path_loss(scenario.bs_ris_distance, cfg.ris_link_exponent)) * small

    pl = scenario.path_loss
    h_direct = np.sqrt(pl)[:, None] * _cscg(rng, (K, M))
    pl_ris = path_loss(scenario.ris_distances, cfg.path_loss_exponent)
    h_ris = np.sqrt(pl_ris)[:, None] * _cscg(rng, (K, N))
    return ChannelSet(h_br, h_direct, h_ris, pl)


def combined_rows(channels: ChannelSet, theta) -> tp.ComplexVar:
    """Rows h_k^H = h_B,k^H + h_R,k^H diag(e^{j theta}) H_BR, shape (..., K, M).

    `theta` is an ndarray or a tape Var of shape (..., N).
    """
    c, s = tp.cos(theta), tp.sin(theta)
    if isinstance(c, tp.Var):
        c = c.reshape(c.shape[:-1] + (1, c.shape[-1]))
        s = s.reshape(s.shape[:-1] + (1, s.shape[-1]))
    else:
        c, s = c[..., None, :], s[..., None, :]
    # conj(h_R) * e^{j theta}
    rr, ri = channels.h_ris.real, -channels.h_ris.imag
    q = tp.ComplexVar(rr * c - ri * s, rr * s + ri * c)
    return (q @ channels.h_br) + channels.h_direct.conj()


def combined_channel(channels: ChannelSet, theta):
    """Combined channel vectors h_k, shape (..., K, M).

    Returns a complex ndarray for numeric `theta` and a ComplexVar when
    `theta` lives on a tape.
    """
    h = combined_rows(channels, theta).conj()
    return h if h.on_tape else h.value


# ---------------------------------------------------------------------------
# text fixtures: one record per line, complex values as "re,im"

def _fmt(x) -> str:
    return repr(float(x))


def _fmt_c(z) -> str:
    return f"{float(z.real)!r},{float(z.imag)!r}"


def _parse_c(tok: str) -> complex:
    re, im = tok.split(",")
    return complex(float(re), float(im))


def _config_from_items(items) -> TopologyConfig:
    kw = {}
    types = {f.name: f for f in dataclasses.fields(TopologyConfig)}
    for item in items:
        key, raw = item.split("=", 1)
        if key in ("bs_position", "ris_position"):
            kw[key] = None if raw == "None" else tuple(float(v) for v in raw.split(","))
        elif key == "rng_algorithm":
            kw[key] = raw
        elif key in ("num_antennas", "num_elements", "num_users"):
            kw[key] = int(raw)
        elif key in types:
            kw[key] = float(raw)
        else:
            raise ValueError(f"unknown config field {key!r}")
    return TopologyConfig(**kw)


def _config_items(cfg: TopologyConfig) -> str:
    parts = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(_fmt(x) for x in v)
        elif isinstance(v, float):
            v = _fmt(v)
        parts.append(f"{f.name}={v}")
    return " ".join(parts)


def dump_scenario(scenario: Scenario, path) -> None:
    lines = ["scenario v1",
             "config " + _config_items(scenario.config),
             "ris " + " ".join(_fmt(v) for v in scenario.ris_position),
             "noise_power " + _fmt(scenario.noise_power)]
    for k, (pos, q) in enumerate(zip(scenario.mu_positions, scenario.qos)):
        lines.append(f"mu {k} {_fmt(pos[0])} {_fmt(pos[1])} {_fmt(q)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_scenario(path) -> Scenario:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "scenario v1":
        raise ValueError("not a scenario v1 file")
    cfg = ris = sigma2 = None
    mus = {}
    for line in lines[1:]:
        tag, *rest = line.split()
        if tag == "config":
            cfg = _config_from_items(rest)
        elif tag == "ris":
            ris = np.array([float(v) for v in rest])
        elif tag == "noise_power":
            sigma2 = float(rest[0])
        elif tag == "mu":
            mus[int(rest[0])] = [float(v) for v in rest[1:]]
        else:
            raise ValueError(f"unknown record {tag!r}")
    rows = np.array([mus[k] for k in range(len(mus))])
    return Scenario(cfg, rows[:, :2].copy(), ris, rows[:, 2].copy(), sigma2)


def dump_channels(channels: ChannelSet, path) -> None:
    N, M, K = channels.dims
    lines = [f"channelset v1 {N} {M} {K}"]
    for n, row in enumerate(channels.h_br):
        lines.append(f"h_br {n} " + " ".join(_fmt_c(z) for z in row))
    for k, row in enumerate(channels.h_direct):
        lines.append(f"h_direct {k} " + " ".join(_fmt_c(z) for z in row))
    for k, row in enumerate(channels.h_ris):
        lines.append(f"h_ris {k} " + " ".join(_fmt_c(z) for z in row))
    for k, v in enumerate(channels.path_loss):
        lines.append(f"path_loss {k} {_fmt(v)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_channels(path) -> ChannelSet:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split()
    if head[:2] != ["channelset", "v1"]:
        raise ValueError("not a channelset v1 file")
    N, M, K = (int(v) for v in head[2:5])
    h_br = np.zeros((N, M), complex)
    h_direct = np.zeros((K, M), complex)
    h_ris = np.zeros((K, N), complex)
    pl = np.zeros(K)
    for line in lines[1:]:
        tag, idx, *rest = line.split()
        i = int(idx)
        if tag == "path_loss":
            pl[i] = float(rest[0])
        else:
            target = {"h_br": h_br, "h_direct": h_direct, "h_ris": h_ris}[tag]
            target[i] = [_parse_c(t) for t in rest]
    return ChannelSet(h_br, h_direct, h_ris, pl)


__all__ = [
    "TopologyConfig", "Scenario", "ChannelSet", "make_rng", "dbm_to_watt", "watt_to_dbm",
    "path_loss", "noise_power", "generate_topology", "sample_channels", "stack_channels",
    "ula_steering", "combined_rows", "combined_channel", "dump_scenario", "load_scenario",
    "dump_channels", "load_channels",
]
