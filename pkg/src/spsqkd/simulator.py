"""Monte-Carlo generator of BB84 single-photon-source detection streams.

The photon number per pulse is truncated at two. Photons survive channel
loss, receiver transmission and detector efficiency independently; arrival
time is the pulse epoch plus a Gaussian excitation jitter (shared by the
photons of one pulse), an exponential radiative decay and a Gaussian
detector jitter. A fraction ``1 - rho`` of the detected photons is
unpolarized background with the same temporal profile. Dark counts are a
uniform Poisson process per detector.

Only pulses that yield at least one detection are materialised, so the cost
scales with the number of tags rather than with the number of pulses.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, UndefinedValueError, ValidationError
from .timetag import PS_PER_S, ChannelId, PulseClock, TagStream

CONFIG_SCHEMA = 1
# pulses per independently seeded range
CHUNK_PULSES = 1 << 24


@dataclass(frozen=True)
class SourceParams:
    p1: float = 0.013
    p2: float = 0.0
    lifetime: float = 4000.0  # ps
    rise_jitter: float = 200.0  # ps, sigma
    rho: float = 1.0
    dark_rate: float = 0.0  # Hz per detector
    detector_efficiency: float = 1.0
    detector_jitter: float = 500.0  # ps, sigma
    e_optical: float = 0.0
    channel_loss: float = 0.0  # dB
    eta_bob: float = 1.0
    clock: PulseClock = field(default_factory=lambda: PulseClock(5e6))
    # excitation instant relative to the clock's phase origin
    pulse_delay: int = 2000  # ps

    def __post_init__(self):
        probs = dict(p1=self.p1, p2=self.p2, rho=self.rho, e_optical=self.e_optical,
                     detector_efficiency=self.detector_efficiency, eta_bob=self.eta_bob)
        for name, v in probs.items():
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")
        if self.p1 + self.p2 > 1.0:
            raise ValidationError("p1 + p2 exceeds 1")
        if not self.lifetime > 0:
            raise ValidationError("lifetime must be positive")
        for name in ("rise_jitter", "detector_jitter", "dark_rate", "channel_loss"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")

    @property
    def mu(self) -> float:
        """Mean photon number per pulse launched into the channel."""
        return self.p1 + 2.0 * self.p2

    @property
    def transmission(self) -> float:
        """Survival probability of one photon from channel input to a click."""
        return 10.0 ** (-self.channel_loss / 10.0) * self.eta_bob * self.detector_efficiency

    @classmethod
    def from_mu_g2(cls, mu: float, g2: float, **kw) -> "SourceParams":
        """Choose p1, p2 so that mean photon number and g2 match."""
        p2 = g2 * mu * mu / 2.0
        return cls(p1=mu - 2.0 * p2, p2=p2, **kw)

    def replace(self, **kw) -> "SourceParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class GroundTruth:
    mu_channel: float
    g2_source: float
    qber_expected: float
    click_rate_expected: float
    # what a cross-channel integrated g2 should read, dark accidentals included
    g2_expected: float
    detected_per_pulse: float


def channel_distribution(params: SourceParams, input_state) -> np.ndarray:
    """Probability that one detected photon lands in each of H, V, D, A."""
    s = ChannelId.parse(input_state)
    sig = np.zeros(4)
    right, wrong = int(s), int(s.partner)
    other = [c for c in range(4) if c // 2 != s.basis]
    sig[right] = 0.5 * (1.0 - params.e_optical)
    sig[wrong] = 0.5 * params.e_optical
    sig[other] = 0.25
    return params.rho * sig + (1.0 - params.rho) * 0.25


def true_statistics(params: SourceParams, input_state="H") -> GroundTruth:
    """Closed-form expectations for :func:`simulate_run` output."""
    mu = params.mu
    if mu <= 0:
        raise UndefinedValueError("g2 undefined: source emits no photons (p1 + 2 p2 = 0)")
    eta = params.transmission
    dark = params.dark_rate / params.clock.repetition_rate  # per detector per period
    lam = mu * eta * channel_distribution(params, input_state) + dark
    s = ChannelId.parse(input_state)
    qber = lam[int(s.partner)] / (lam[int(s)] + lam[int(s.partner)])
    p = channel_distribution(params, input_state)
    cross = 1.0 - float(np.sum(p * p))
    side = float(lam.sum() ** 2 - np.sum(lam * lam))
    center_excess = 2.0 * params.p2 * eta * eta * cross - (mu * eta) ** 2 * cross
    return GroundTruth(
        mu_channel=mu,
        g2_source=2.0 * params.p2 / mu**2,
        qber_expected=float(qber),
        click_rate_expected=params.clock.repetition_rate * mu * eta + 4.0 * params.dark_rate,
        g2_expected=1.0 + center_excess / side if side > 0 else math.nan,
        detected_per_pulse=mu * eta,
    )


def _signal_tags(params: SourceParams, state: ChannelId, start: int, n: int, rng: np.random.Generator):
    eta = params.transmission
    q1 = params.p1 * eta + 2.0 * params.p2 * eta * (1.0 - eta)
    q2 = params.p2 * eta * eta
    p_active = q1 + q2
    if p_active <= 0.0:
        return np.empty(0, np.int64), np.empty(0, np.uint8)
    k = int(rng.binomial(n, p_active))
    pulses = np.sort(rng.choice(n, size=k, replace=False)) if k else np.empty(0, np.int64)
    two = rng.random(k) < q2 / p_active
    n_ph = 1 + two.astype(np.int64)
    excitation = params.pulse_delay + rng.normal(0.0, params.rise_jitter, k) if params.rise_jitter else np.full(k, float(params.pulse_delay))
    pulse_of = np.repeat(np.arange(k), n_ph)
    m = pulse_of.size
    t = (start + pulses[pulse_of]).astype(np.float64) * params.clock.period + params.clock.phase_offset
    t += excitation[pulse_of] + rng.exponential(params.lifetime, m)
    if params.detector_jitter:
        t += rng.normal(0.0, params.detector_jitter, m)

    # polarization routing
    u = rng.random(m)
    background = rng.random(m) >= params.rho
    ch = np.empty(m, np.uint8)
    ch[background] = rng.integers(0, 4, int(background.sum()), dtype=np.uint8)
    sig = ~background
    same_basis = u < 0.5
    flip = rng.random(m) < params.e_optical
    conj = rng.random(m) < 0.5
    right, wrong = int(state), int(state.partner)
    other0 = 2 * (1 - state.basis)
    sel = sig & same_basis
    ch[sel] = np.where(flip[sel], wrong, right)
    sel = sig & ~same_basis
    ch[sel] = other0 + conj[sel]
    return np.rint(t).astype(np.int64), ch


def simulate_run(params: SourceParams, input_state="H", n_pulses: int = 1_000_000, seed: int = 0) -> TagStream:
    """Simulate ``n_pulses`` clock periods with a fixed input polarization.

    Deterministic for a fixed seed: every range of ``CHUNK_PULSES`` pulses
    draws from its own child of ``SeedSequence(seed)``, so ranges could be
    generated independently and merged.
    """
    if n_pulses <= 0:
        raise ValidationError("n_pulses must be positive")
    state = ChannelId.parse(input_state)
    period = params.clock.period
    duration = int(n_pulses) * period
    n_chunks = -(-int(n_pulses) // CHUNK_PULSES)
    seeds = np.random.SeedSequence(seed).spawn(n_chunks + 1)
    ts_parts, ch_parts = [], []
    for i in range(n_chunks):
        start = i * CHUNK_PULSES
        n = min(CHUNK_PULSES, n_pulses - start)
        t, c = _signal_tags(params, state, start, n, np.random.default_rng(seeds[i]))
        ts_parts.append(t)
        ch_parts.append(c)
    rng = np.random.default_rng(seeds[-1])
    if params.dark_rate > 0:
        lam = params.dark_rate * duration / PS_PER_S
        counts = rng.poisson(lam, 4)
        ts_parts.append(rng.integers(0, duration, int(counts.sum()), dtype=np.int64))
        ch_parts.append(np.repeat(np.arange(4, dtype=np.uint8), counts))
    ts = np.concatenate(ts_parts) if ts_parts else np.empty(0, np.int64)
    ch = np.concatenate(ch_parts) if ch_parts else np.empty(0, np.uint8)
    del ts_parts, ch_parts
    keep = (ts >= 0) & (ts <= duration)
    if not keep.all():
        ts, ch = ts[keep], ch[keep]
    order = np.argsort(ts, kind="stable")
    ts = ts[order]
    ch = ch[order]
    del order
    ts.setflags(write=False)
    ch.setflags(write=False)
    return TagStream(ts, ch, duration, params.clock, state)


def simulate_bb84(params: SourceParams, n_pulses: int, seed: int = 0) -> dict[ChannelId, TagStream]:
    """One run per input state, as in sequential static state preparation."""
    seeds = np.random.SeedSequence(seed).generate_state(4)
    return {s: simulate_run(params, s, n_pulses, int(seeds[i])) for i, s in enumerate(ChannelId)}


# --------------------------------------------------------------------------
# presets


def reference_scenario(**kw) -> SourceParams:
    """Back-to-back operating point of the WSe2 source at 5 MHz."""
    base = dict(
        lifetime=4000.0,
        rho=0.97,
        dark_rate=20.0,
        e_optical=0.0084,
        eta_bob=0.56,
        clock=PulseClock(5e6),
    )
    base.update(kw)
    mu = base.pop("mu", 0.013)
    g2 = base.pop("g2", 0.133)
    return SourceParams.from_mu_g2(mu, g2, **base)


def poissonian(mu: float = 0.1, **kw) -> SourceParams:
    """Two-photon-truncated source whose first two factorial moments are
    Poissonian (p2 = mu^2 / 2), hence g2 = 1."""
    return SourceParams.from_mu_g2(mu, 1.0, **kw)


def saturation_mu(power: float, p_sat: float, mu_sat: float) -> float:
    """Demo preset: mu(P) = mu_sat (1 - exp(-P / P_sat))."""
    return mu_sat * (1.0 - math.exp(-power / p_sat))


# --------------------------------------------------------------------------
# config files


def source_to_config(params: SourceParams) -> dict:
    d = asdict(params)
    d["clock"] = {"repetition_rate": params.clock.repetition_rate, "phase_offset": params.clock.phase_offset}
    return {"schema": CONFIG_SCHEMA, "source": d}


def source_from_config(cfg: dict) -> SourceParams:
    """Build :class:`SourceParams` from ``{"schema": 1, "source": {...}}``.

    ``source`` accepts every SourceParams field, with ``clock`` given as
    ``{"repetition_rate": Hz, "phase_offset": ps}``; alternatively ``mu`` and
    ``g2`` replace ``p1``/``p2``.
    """
    if cfg.get("schema") != CONFIG_SCHEMA:
        raise ConfigurationError(f"unsupported config schema {cfg.get('schema')!r}, expected {CONFIG_SCHEMA}")
    src = dict(cfg.get("source", {}))
    known = {f.name for f in fields(SourceParams)} | {"mu", "g2"}
    unknown = set(src) - known
    if unknown:
        raise ConfigurationError(f"unknown source keys: {sorted(unknown)}")
    if "clock" in src:
        src["clock"] = PulseClock(**src["clock"])
    if "mu" in src or "g2" in src:
        if "p1" in src or "p2" in src:
            raise ConfigurationError("give either mu/g2 or p1/p2, not both")
        return SourceParams.from_mu_g2(src.pop("mu", 0.013), src.pop("g2", 0.0), **src)
    return SourceParams(**src)


def load_source_config(path: str | Path) -> SourceParams:
    return source_from_config(json.loads(Path(path).read_text()))
