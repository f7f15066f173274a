"""Device channel simulator.

The received signal is the sum of

* a structure-borne path through the device body, whose speed follows
  ``c = sqrt(K / rho)`` with the bulk modulus stiffened by hand contact, and
  whose spectrum is shaped by per-contact absorption;
* a direct airborne path at 343 m/s, shadowed by the hand;
* environmental echoes of the airborne path;

followed by the hardware high-frequency rolloff and additive ambient noise.
Every block is causal and linear; randomness flows only from the ``seed``.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sps

from holdsense.errors import ParameterError
from holdsense.signal import SignalSpec, Waveform, make_sequence

SPEED_OF_SOUND_AIR = 343.0
# Distance at which an airborne hop has unit amplitude gain (1/d law).
AIR_REFERENCE_DISTANCE = 0.05
# A 0 dB jammer at JAM_REFERENCE_DISTANCE arrives at JAM_REFERENCE_AMPLITUDE:
# a loudspeaker about 10 dB louder than the device's own speaker would be
# under the same 1/d air law.
JAM_REFERENCE_DISTANCE = 0.2
JAM_REFERENCE_AMPLITUDE = 0.8
TAIL_SECONDS = 0.010
SIM_RATE = 48000


# --------------------------------------------------------------------------
# Medium physics


def bulk_modulus(delta_p, delta_v, v0):
    """Bulk modulus from a pressure change and the resulting volume change.

    ``K = -dP / (dV / V0)``; a compression (``delta_v < 0``) under positive
    pressure gives a positive modulus.
    """
    if v0 <= 0:
        raise ParameterError("reference volume must be positive")
    if delta_v == 0:
        raise ParameterError("volume change must be non-zero")
    return -delta_p / (delta_v / v0)


@dataclass(frozen=True)
class MediumState:
    K0: float = 4.95e8
    rho: float = 1500.0
    V0: float = 1.0e-5
    delta_P: tuple = ()
    delta_V: tuple = ()

    def __post_init__(self):
        if not (self.K0 > 0 and self.rho > 0):
            raise ParameterError("K0 and rho must be positive")
        if len(self.delta_P) != len(self.delta_V):
            raise ParameterError("delta_P and delta_V must pair up per contact")

    @property
    def base_speed(self):
        return float(np.sqrt(self.K0 / self.rho))

    def contact_moduli(self):
        """Per-contact moduli measured from the stored compression pairs."""
        return [bulk_modulus(p, v, self.V0) for p, v in zip(self.delta_P, self.delta_V)]

    def effective_modulus(self, total_pressure, beta):
        k = self.K0 * (1.0 + beta * total_pressure)
        if k <= 0:
            raise ParameterError("effective bulk modulus must stay positive")
        return k

    def speed(self, total_pressure=0.0, beta=0.0):
        return float(np.sqrt(self.effective_modulus(total_pressure, beta) / self.rho))


# --------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class DevicePreset:
    """Speaker/microphone geometry and hardware response of one device.

    ``path_length`` is the speaker to microphone separation; for two-microphone
    devices it is the farther microphone, which is the one used.
    """

    name: str
    path_length: float
    medium: MediumState = field(default_factory=MediumState)
    hw_rolloff_start: float = 20000.0
    hw_rolloff_rate: float = 4.0
    mic_count: int = 2
    alpha: float = 2.0
    beta: float = 0.15
    notch_depth: float = 4.0
    structure_gain: float = 0.45
    airborne_gain: float = 0.2
    shadow_coeff: float = 1.5
    lead_samples: int = 10

    def __post_init__(self):
        if self.path_length <= 0:
            raise ParameterError("path_length must be positive")
        if self.mic_count not in (1, 2):
            raise ParameterError("mic_count must be 1 or 2")
        if self.structure_speed <= 0:
            raise ParameterError("structure speed must be positive")
        if self.path_length / self.structure_speed >= self.path_length / SPEED_OF_SOUND_AIR:
            raise ParameterError("structure path must arrive before the airborne path")

    @property
    def structure_speed(self):
        return self.medium.base_speed

    def structure_delay(self, total_pressure=0.0):
        """Structure-path travel time in seconds for a given total contact pressure."""
        return self.path_length / self.medium.speed(total_pressure, self.beta)

    @property
    def airborne_delay(self):
        return self.path_length / SPEED_OF_SOUND_AIR


@dataclass(frozen=True)
class Contact:
    position: float
    pressure: float
    width: float

    def __post_init__(self):
        vals = (self.position, self.pressure, self.width)
        if not all(np.isfinite(v) for v in vals):
            raise ParameterError("contact parameters must be finite")
        if not 0 <= self.position <= 1:
            raise ParameterError("contact position must lie in [0, 1]")
        if not 0 <= self.pressure <= 1:
            raise ParameterError("contact pressure must lie in [0, 1]")
        if not 0 < self.width <= 0.3:
            raise ParameterError("contact width must lie in (0, 0.3]")


@dataclass(frozen=True)
class HandProfile:
    user_id: str
    contacts: tuple
    grip_gain: float = 1.0
    jitter_sigma: float = 0.05
    tremor_sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "contacts", tuple(
            c if isinstance(c, Contact) else Contact(*c) for c in self.contacts))
        if not 1 <= len(self.contacts) <= 10:
            raise ParameterError("a hand needs between 1 and 10 contacts")
        if not (np.isfinite(self.grip_gain) and self.grip_gain > 0):
            raise ParameterError("grip_gain must be positive and finite")
        if not (np.isfinite(self.jitter_sigma) and self.jitter_sigma >= 0):
            raise ParameterError("jitter_sigma must be finite and non-negative")
        if not (np.isfinite(self.tremor_sigma) and self.tremor_sigma >= 0):
            raise ParameterError("tremor_sigma must be finite and non-negative")

    @property
    def total_pressure(self):
        return float(sum(c.pressure for c in self.contacts))

    def parameter_vector(self):
        """Flat (position, pressure, width) vector used for spacing checks."""
        return np.array([[c.position, c.pressure, c.width] for c in self.contacts]).ravel()


@dataclass(frozen=True)
class Environment:
    name: str
    snr_db: float
    reflection_gains: tuple = ()
    reflection_delay_range: tuple = (0.001, 0.008)

    def __post_init__(self):
        if not np.isfinite(self.snr_db):
            raise ParameterError("snr_db must be finite")
        if any(not 0 < g < 1 for g in self.reflection_gains):
            raise ParameterError("reflection gains must lie in (0, 1)")
        lo, hi = self.reflection_delay_range
        if not 0 < lo <= hi:
            raise ParameterError("reflection delay range must be positive and ordered")

    @property
    def reflection_count(self):
        return len(self.reflection_gains)


@dataclass
class Recording:
    samples: np.ndarray
    sample_rate: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ParameterError("recording samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise ParameterError("recording contains non-finite samples")
        if self.sample_rate <= 0:
            raise ParameterError("sample_rate must be positive")

    def __len__(self):
        return self.samples.size

    def with_samples(self, samples, **provenance):
        return Recording(samples, self.sample_rate, {**self.provenance, **provenance})


# --------------------------------------------------------------------------
# Presets

# Base body speed is chosen so a typical grip (total pressure 2) yields the
# ~0.20 ms structure lead over the airborne path at 0.15 m.
_K0 = 4.95e8
_RHO = 1500.0

DEVICE_PRESETS = {
    "note5": DevicePreset("note5", 0.15, MediumState(_K0, _RHO), 20000.0, 4.0, 2),
    "nexus5": DevicePreset("nexus5", 0.12, MediumState(_K0, _RHO), 20500.0, 5.0, 2,
                           lead_samples=8),
    "taba": DevicePreset("taba", 0.22, MediumState(_K0 * 0.9, _RHO), 19500.0, 3.0, 1,
                         lead_samples=14),
}

ENVIRONMENTS = {
    "office": Environment("office", 30.0, (0.2, 0.1)),
    "public": Environment("public", 10.0, (0.3, 0.2, 0.15, 0.1)),
}


def get_device(name):
    try:
        return DEVICE_PRESETS[name]
    except KeyError:
        raise ParameterError(f"unknown device preset {name!r}") from None


def get_environment(name):
    try:
        return ENVIRONMENTS[name]
    except KeyError:
        raise ParameterError(f"unknown environment {name!r}") from None


# --------------------------------------------------------------------------
# Channel building blocks


def _rngs(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def fractional_delay(x, delay):
    """Causal delay by ``delay`` samples (integer shift plus Thiran allpass).

    The output is zero before index ``floor(delay - 0.5)``.
    """
    if delay < 0.5:
        raise ParameterError("delay must be at least half a sample")
    shift = int(np.floor(delay - 0.5))
    frac = delay - shift
    eta = (1.0 - frac) / (1.0 + frac)
    y = np.zeros_like(x)
    if shift < x.size:
        y[shift:] = sps.lfilter([eta, 1.0], [1.0, eta], x[: x.size - shift])
    return y


def _peaking_cut(f0, q, gain_db, fs):
    """Second-order peaking section (cookbook form) as an ``sos`` row."""
    a = 10 ** (gain_db / 40)
    w0 = 2 * np.pi * f0 / fs
    alpha = np.sin(w0) / (2 * q)
    b = [1 + alpha * a, -2 * np.cos(w0), 1 - alpha * a]
    den = [1 + alpha / a, -2 * np.cos(w0), 1 - alpha / a]
    return np.concatenate([np.divide(b, den[0]), np.divide(den, den[0])])


def _high_shelf(f0, gain_db, fs):
    a = 10 ** (gain_db / 40)
    w0 = 2 * np.pi * f0 / fs
    alpha = np.sin(w0) / 2 * np.sqrt(2)
    cw = np.cos(w0)
    sa = 2 * np.sqrt(a) * alpha
    b = [a * ((a + 1) + (a - 1) * cw + sa), -2 * a * ((a - 1) + (a + 1) * cw),
         a * ((a + 1) + (a - 1) * cw - sa)]
    den = [(a + 1) - (a - 1) * cw + sa, 2 * ((a - 1) - (a + 1) * cw),
           (a + 1) - (a - 1) * cw - sa]
    return np.concatenate([np.divide(b, den[0]), np.divide(den, den[0])])


def contact_notch_frequency(contact, beta, band=(18000.0, 22000.0)):
    """Centre of a contact's absorption band.

    Position along the body picks a base frequency across the sensing band;
    local stiffening by pressure raises it by ``sqrt(1 + beta * pressure)``
    just as it raises the local wave speed.
    """
    lo, hi = band
    base = lo + (hi - lo) * (0.05 + 0.9 * contact.position)
    return base * np.sqrt(1.0 + beta * contact.pressure)


def hand_sections(hand, device, fs):
    """``sos`` cascade for the frequency-dependent part of hand absorption."""
    rows = []
    for c in hand.contacts:
        depth_db = -20 * np.log10(np.e) * device.alpha * c.pressure * c.width * device.notch_depth
        if depth_db == 0.0:
            continue
        f0 = min(contact_notch_frequency(c, device.beta), 0.95 * fs / 2)
        bandwidth = 1000.0 + 8000.0 * c.width
        rows.append(_peaking_cut(f0, f0 / bandwidth, depth_db, fs))
    return np.array(rows) if rows else None


def rolloff_section(device, fs):
    nyq = fs / 2
    if device.hw_rolloff_start >= nyq:
        return None
    span_khz = (nyq - device.hw_rolloff_start) / 1000.0
    gain_db = -device.hw_rolloff_rate * span_khz
    centre = device.hw_rolloff_start + (nyq - device.hw_rolloff_start) / 2
    return _high_shelf(centre, gain_db, fs)[None, :]


def jitter_hand(hand, rng):
    """Per-trial perturbation of contact positions and pressures."""
    if hand.jitter_sigma == 0:
        return hand
    contacts = []
    for c in hand.contacts:
        dp, dq = rng.normal(0.0, hand.jitter_sigma, 2)
        contacts.append(Contact(float(np.clip(c.position + dp, 0, 1)),
                                float(np.clip(c.pressure + dq, 0, 1)), c.width))
    return replace(hand, contacts=tuple(contacts))


def tremor_gain(hand, device, n, fs, rng):
    """Slow grip-pressure fluctuation as a multiplicative gain on the structure path.

    Physiological tremor sits around 4-12 Hz, so consecutive chirps 50 ms apart
    see different grip states.
    """
    if hand.tremor_sigma == 0:
        return None
    t = np.arange(n) / fs
    load = np.zeros(n)
    for c in hand.contacts:
        freqs = rng.uniform(4.0, 12.0, 3)
        phases = rng.uniform(0, 2 * np.pi, 3)
        wave = np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None]).sum(axis=0)
        load += c.width * hand.tremor_sigma * wave * np.sqrt(2.0 / 3.0)
    return np.exp(-device.alpha * load)


def active_power(y, tx):
    """Mean power of ``y`` normalised by the transmit duty (non-zero tx samples)."""
    active = max(int(np.count_nonzero(tx)), 1)
    return float(np.sum(y * y) / active)


# --------------------------------------------------------------------------
# Operations


def simulate_hold(tx, hand, device, env, seed, *, structure=True, airborne=True,
                  reflections=True, noise=True, jitter=True, sample_rate=SIM_RATE):
    """Render what the device microphone records while ``hand`` holds it.

    Path switches and ``noise``/``jitter`` flags exist for analysis; with noise
    and jitter disabled the channel is linear time-invariant in ``tx``.
    """
    fs = tx.sample_rate
    if fs != sample_rate:
        raise ParameterError(f"transmit is at {fs} Hz but the simulator runs at {sample_rate} Hz")
    r_jit, r_trem, r_refl, r_noise = _rngs(seed, 4)
    trial = jitter_hand(hand, r_jit) if jitter else hand
    n = len(tx) + int(round(TAIL_SECONDS * fs))
    x = np.zeros(n)
    x[: len(tx)] = tx.samples

    y = np.zeros(n)
    s_delay = device.structure_delay(trial.total_pressure) * fs
    a_delay = device.airborne_delay * fs
    if structure:
        coverage = sum(c.pressure * c.width for c in trial.contacts)
        gain = device.structure_gain * trial.grip_gain * np.exp(-device.alpha * coverage)
        s = gain * fractional_delay(x, s_delay)
        sos = hand_sections(trial, device, fs)
        if sos is not None:
            s = sps.sosfilt(sos, s)
        if jitter:
            mod = tremor_gain(trial, device, n, fs, r_trem)
            if mod is not None:
                s = s * mod
        y += s
    shadow = device.airborne_gain * np.exp(-device.shadow_coeff * sum(c.width for c in trial.contacts))
    air = fractional_delay(x, a_delay) if (airborne or reflections) else None
    if airborne:
        y += shadow * air
    if reflections:
        lo, hi = env.reflection_delay_range
        extra = r_refl.uniform(lo, hi, env.reflection_count) * fs
        for g, d in zip(env.reflection_gains, extra):
            y += shadow * g * fractional_delay(x, a_delay + d)
    ro = rolloff_section(device, fs)
    if ro is not None:
        y = sps.sosfilt(ro, y)
    noise_std = 0.0
    if noise:
        noise_std = np.sqrt(active_power(y, tx.samples)) * 10 ** (-env.snr_db / 20)
        y = y + r_noise.normal(0.0, noise_std, n)
    prov = {
        "seed": int(seed),
        "device": device.name,
        "user_id": hand.user_id,
        "environment": env.name,
        "structure_delay_samples": float(s_delay),
        "airborne_delay_samples": float(a_delay),
        "noise_std": float(noise_std),
    }
    return Recording(y, fs, prov)


def structure_lead_samples(hand, device, fs=48000):
    """Computed structure-over-airborne lead for a hand, in samples."""
    return (device.airborne_delay - device.structure_delay(hand.total_pressure)) * fs


def make_hand_cohort(count, seed, *, contacts=5, jitter_sigma=0.05, tremor_sigma=0.25,
                     min_spacing_factor=4.0):
    """Draw ``count`` synthetic hands with guaranteed pairwise separation.

    Each hand has a total grip pressure between 1.2 and 2.8 shared across its
    contacts. Candidates closer than ``min_spacing_factor * jitter_sigma`` (in
    contact-parameter space) to an accepted hand are redrawn.
    """
    if count < 1:
        raise ParameterError("cohort size must be at least 1")
    rng = np.random.default_rng(seed)
    hands = []
    vectors = []
    min_dist = min_spacing_factor * jitter_sigma
    attempts = 0
    while len(hands) < count:
        attempts += 1
        if attempts > 1000 * count:
            raise ParameterError("could not place a cohort with the requested spacing")
        total = rng.uniform(1.2, 2.8)
        share = rng.dirichlet(np.full(contacts, 4.0))
        pressures = np.clip(total * share, 0.0, 1.0)
        positions = rng.uniform(0.05, 0.95, contacts)
        widths = rng.uniform(0.05, 0.25, contacts)
        cand = HandProfile(
            user_id=f"user{len(hands):02d}",
            contacts=tuple(Contact(float(p), float(q), float(w))
                           for p, q, w in zip(positions, pressures, widths)),
            grip_gain=float(rng.uniform(0.8, 1.2)),
            jitter_sigma=jitter_sigma,
            tremor_sigma=tremor_sigma,
        )
        vec = cand.parameter_vector()
        if all(np.linalg.norm(vec - v) > min_dist for v in vectors):
            hands.append(cand)
            vectors.append(vec)
    return hands


def perturbed_hand(hand, rng, scale, user_id):
    """A hand within ``scale`` of ``hand`` in every contact parameter."""
    contacts = []
    for c in hand.contacts:
        dp, dq, dw = rng.uniform(-scale, scale, 3)
        contacts.append(Contact(float(np.clip(c.position + dp, 0, 1)),
                                float(np.clip(c.pressure + dq, 0, 1)),
                                float(np.clip(c.width + dw, 0.01, 0.3))))
    return replace(hand, user_id=user_id, contacts=tuple(contacts))


def looped_sweep(jam_spec, n, offset):
    base = make_sequence(jam_spec).samples
    reps = int(np.ceil((n + offset) / base.size)) + 1
    return np.tile(base, reps)[offset: offset + n]


def inject_jammer(rec, jam_spec, relative_power_db, distance_m, seed):
    """Add an unsynchronised looped sweep from an attacker at ``distance_m``.

    The received amplitude is ``JAM_REFERENCE_AMPLITUDE`` scaled by
    ``relative_power_db`` and by ``JAM_REFERENCE_DISTANCE / distance_m``.
    ``relative_power_db = -inf`` disables it.
    """
    jam_spec.validate()
    if not distance_m > 0:
        raise ParameterError("jammer distance must be positive")
    if jam_spec.sample_rate != rec.sample_rate:
        raise ParameterError("jammer and recording sample rates differ")
    if relative_power_db == -np.inf:
        return rec.with_samples(rec.samples.copy())
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(0, jam_spec.period))
    sweep = looped_sweep(jam_spec, len(rec), offset)
    amp = (10 ** (relative_power_db / 20) * JAM_REFERENCE_AMPLITUDE
           * JAM_REFERENCE_DISTANCE / distance_m)
    return rec.with_samples(rec.samples + amp * sweep,
                            jammer={"power_db": relative_power_db, "distance_m": distance_m,
                                    "seed": int(seed)})


def airborne_hop(samples, fs, distance_m, env, noise_std, rng):
    """One loudspeaker-to-microphone trip through air with room echoes."""
    n = samples.size + int(round(TAIL_SECONDS * fs))
    x = np.zeros(n)
    x[: samples.size] = samples
    g = AIR_REFERENCE_DISTANCE / distance_m
    d = distance_m / SPEED_OF_SOUND_AIR * fs
    y = g * fractional_delay(x, max(d, 0.5))
    lo, hi = env.reflection_delay_range
    for eg, ed in zip(env.reflection_gains, rng.uniform(lo, hi, env.reflection_count) * fs):
        y += g * eg * fractional_delay(x, d + ed)
    if noise_std > 0:
        y = y + rng.normal(0.0, noise_std, n)
    return y


def simulate_replay(victim_rec, eavesdrop_distance_m, replay_distance_m, seed, env=None):
    """What the victim device hears when an eavesdropped recording is replayed.

    The victim's recording travels victim-device to eavesdropper, then attacker
    loudspeaker to victim device; each hop adds echoes and the room's ambient
    noise (taken from the victim recording's provenance when available).
    """
    if not (eavesdrop_distance_m > 0 and replay_distance_m > 0):
        raise ParameterError("eavesdrop and replay distances must be positive")
    env = env or ENVIRONMENTS["office"]
    fs = victim_rec.sample_rate
    noise_std = float(victim_rec.provenance.get("noise_std", 0.0))
    r1, r2 = _rngs(seed, 2)
    heard = airborne_hop(victim_rec.samples, fs, eavesdrop_distance_m, env, noise_std, r1)
    replayed = airborne_hop(heard, fs, replay_distance_m, env, noise_std, r2)
    return victim_rec.with_samples(
        replayed, replay={"eavesdrop_m": eavesdrop_distance_m, "replay_m": replay_distance_m,
                          "seed": int(seed)})
