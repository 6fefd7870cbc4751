"""Spiking stage: rate encoding, LIF dynamics, readout, surrogate training.

Real-valued quantile outputs become spike rates through a thresholded
linear code; two hidden layers of leaky integrate-and-fire neurons
integrate them over a fixed window; a linear readout of the spike counts
passes through a sigmoid to give an anomaly score in (0,1).

The spike nonlinearity is not differentiable, so training substitutes the
fast-sigmoid pseudo-derivative 1/(1+β|v−v_th|)². A `soft` forward mode is
also provided whose output 0.5 + u/(1+β|u|) has that pseudo-derivative as
its exact derivative; finite-difference certification runs against the
soft mode, training uses the hard forward with the same backward rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, NumericError, ShapeError
from .training import snn_dropout

DEFAULT_BETA = 10.0
DEFAULT_WINDOW = 50


@dataclass(frozen=True)
class LifParams:
    """Leaky integrate-and-fire constants; τ_m = R_m · C_m.

    Explicit Euler integration is stable only for dt ≤ τ_m/2, enforced
    here along with v_reset < v_th.
    """

    tau_m: float = 10.0
    r_m: float = 1.0
    v_rest: float = 0.0
    v_th: float = 1.0
    v_reset: float = 0.0
    dt: float = 1.0

    def __post_init__(self):
        if self.tau_m <= 0 or self.dt <= 0:
            raise ConfigError("tau_m and dt must be positive")
        if self.dt > self.tau_m / 2:
            raise ConfigError(f"dt={self.dt} violates stability bound "
                              f"tau_m/2={self.tau_m / 2}")
        if self.v_reset >= self.v_th:
            raise ConfigError("v_reset must lie below v_th")
        if self.r_m <= 0:
            raise ConfigError("r_m must be positive")

    @property
    def c_m(self) -> float:
        return self.tau_m / self.r_m

    @property
    def leak(self) -> float:
        return self.dt / self.tau_m


def encode_rate(q_hat, tau: float, r_max: float = 1.0):
    """max(0, q̂ − τ) clipped to r_max: threshold-linear rate code."""
    if r_max <= 0:
        raise ConfigError("r_max must be positive")
    q_hat = np.asarray(q_hat, dtype=np.float64)
    return np.clip(np.maximum(0.0, q_hat - tau), 0.0, r_max)


def expected_spikes(rate, t_window: int = DEFAULT_WINDOW,
                    dt: float = 1.0):
    """Expected spike count over the integration window: rate · T_w · dt."""
    return np.asarray(rate, dtype=np.float64) * t_window * dt


def lif_step(v, input_current, p: LifParams):
    """One explicit-Euler step; spike and reset at threshold.

    v' = v + (dt/τ_m)(−(v − V_rest) + R_m·I); if v' ≥ v_th the neuron
    spikes and the stored potential becomes exactly v_reset.
    Returns (v_next, spiked) elementwise over arrays.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite membrane potential")
    i = np.asarray(input_current, dtype=np.float64)
    v_euler = v + p.leak * (-(v - p.v_rest) + p.r_m * i)
    spiked = v_euler >= p.v_th
    v_next = np.where(spiked, p.v_reset, v_euler)
    return v_next, spiked


def lif_closed_form(t, i_const: float, p: LifParams, v0: float | None = None):
    """Exact sub-threshold trajectory for constant input current.

    v(t) = V_rest + R_m·I + (v₀ − V_rest − R_m·I)·exp(−t/τ_m).
    """
    v0 = p.v_rest if v0 is None else float(v0)
    t = np.asarray(t, dtype=np.float64)
    v_inf = p.v_rest + p.r_m * i_const
    return v_inf + (v0 - v_inf) * np.exp(-t / p.tau_m)


def surrogate_grad(v_minus_th, beta: float = DEFAULT_BETA):
    """Fast-sigmoid pseudo-derivative 1/(1+β|u|)², peaked at u=0."""
    if beta <= 0:
        raise ConfigError("surrogate slope beta must be positive")
    u = np.asarray(v_minus_th, dtype=np.float64)
    return 1.0 / (1.0 + beta * np.abs(u)) ** 2


def spike_fn(v: Tensor, p: LifParams, beta: float = DEFAULT_BETA,
             soft: bool = False) -> Tensor:
    """Spike nonlinearity with surrogate backward.

    hard: s = 1[v ≥ v_th] (what the dynamics use); soft: the smooth
    antiderivative 0.5 + u/(1+β|u|) whose true derivative equals the
    surrogate, making gradient certification honest.
    """
    u = v.data - p.v_th
    grad = surrogate_grad(u, beta)
    if soft:
        values = 0.5 + u / (1.0 + beta * np.abs(u))
    else:
        values = (u >= 0.0).astype(np.float64)
    return ad.custom_unary(v, values, grad)


def layer_forward(spikes_in: np.ndarray, weights: np.ndarray,
                  p: LifParams) -> np.ndarray:
    """Run one LIF layer over a window (inference path, plain arrays).

    spikes_in: [T_w, n_in] (or [B, T_w, n_in]); each neuron integrates
    Σ_i w_ji·S_i(t) through lif_step. Returns the output spike train of
    the same time length.
    """
    spikes_in = np.asarray(spikes_in, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if spikes_in.shape[-1] != weights.shape[0]:
        raise ShapeError(f"input width {spikes_in.shape[-1]} does not match "
                         f"weight rows {weights.shape[0]}")
    t_window = spikes_in.shape[-2]
    out_shape = spikes_in.shape[:-2] + (t_window, weights.shape[1])
    out = np.zeros(out_shape)
    v = np.zeros(spikes_in.shape[:-2] + (weights.shape[1],)) + p.v_rest
    for t in range(t_window):
        current = spikes_in[..., t, :] @ weights
        v, spiked = lif_step(v, current, p)
        out[..., t, :] = spiked
    return out


def readout(spike_counts, w_readout, bias: float = 0.0, psi: str = "sigmoid"):
    """ψ(Σ_j w_j·count_j + b): anomaly score from window spike counts."""
    counts = np.asarray(spike_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ConfigError("spike counts must be nonnegative")
    w = np.asarray(w_readout, dtype=np.float64)
    z = counts @ w + bias
    if psi == "identity":
        return z
    if psi == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    raise ConfigError(f"unknown readout mapping {psi!r}")


def joint_loss(l_eqrnn: Tensor, l_snn: Tensor, lam: float) -> Tensor:
    """L = L_eqrnn + λ·L_snn.

    λ=0 short-circuits to L_eqrnn itself so the spiking term contributes
    exactly nothing to the value or to any gradient.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be nonnegative, got {lam}")
    if lam == 0.0:
        return l_eqrnn
    return l_eqrnn + l_snn * lam


def snn_param_count(layers) -> int:
    """Σ_l (N_{l−1}·N_l + N_l) over consecutive layer sizes."""
    layers = [int(n) for n in layers]
    if len(layers) < 2:
        raise ConfigError("need at least two layer sizes")
    if any(n < 1 for n in layers):
        raise ConfigError("layer sizes must be positive")
    return sum(a * b + b for a, b in zip(layers[:-1], layers[1:]))


@dataclass
class SpikeDiagnostics:
    counts: dict = field(default_factory=dict)    # layer index -> [B, N]
    trains: dict = field(default_factory=dict)    # layer index -> [B, T, N]


class SpikingNet:
    """Two hidden LIF layers plus a sigmoid readout of spike counts.

    Input is a vector of spike rates per sample; in the deterministic
    default mode the rates are injected as a constant current at every
    step of the window ("current injection"), which keeps training
    reproducible. A stochastic mode instead draws Bernoulli(rate·dt)
    spikes per step.
    """

    def __init__(self, n_inputs: int, hidden: int = 64, *,
                 params: LifParams | None = None, beta: float = DEFAULT_BETA,
                 t_window: int = DEFAULT_WINDOW, encode_tau: float = 0.0,
                 r_max: float = 1.0, stochastic: bool = False,
                 init_gain: float = 4.0, seed: int = 0):
        if n_inputs < 1 or hidden < 1:
            raise ConfigError("layer sizes must be positive")
        if t_window < 1:
            raise ConfigError("integration window must be >= 1 step")
        self.n_inputs = int(n_inputs)
        self.hidden = int(hidden)
        self.params = params if params is not None else LifParams()
        self.beta = float(beta)
        self.t_window = int(t_window)
        self.encode_tau = float(encode_tau)
        self.r_max = float(r_max)
        self.stochastic = bool(stochastic)
        rng = ad.make_rng(seed)
        # gain over Glorot: unit-scale weights leave rate-coded inputs
        # sub-threshold, and a silent net gets no count gradient at all
        self.w1 = Tensor(init_gain * ad.glorot_uniform(rng, n_inputs, hidden).data,
                         requires_grad=True)
        self.w2 = Tensor(init_gain * ad.glorot_uniform(rng, hidden, hidden).data,
                         requires_grad=True)
        # constant bias currents lift the resting drive toward threshold;
        # still sub-threshold alone (0.5 < v_th) so silence stays possible
        self.b1 = Tensor(np.full((hidden,), 0.5), requires_grad=True)
        self.b2 = Tensor(np.full((hidden,), 0.5), requires_grad=True)
        # zero-init readout: an untrained net scores exactly sigmoid(0)=0.5
        self.w_out = ad.zeros((hidden, 1))
        self.b_out = ad.zeros((1,))

    @property
    def layer_sizes(self) -> tuple:
        return (self.n_inputs, self.hidden, self.hidden, 1)

    def parameter_count(self) -> int:
        return snn_param_count(self.layer_sizes)

    def named_parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w_out": self.w_out, "b_out": self.b_out}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def encode(self, values: np.ndarray) -> np.ndarray:
        return encode_rate(values, self.encode_tau, self.r_max)

    def _input_spikes(self, rates: np.ndarray, rng) -> np.ndarray:
        """[B, T, n_in] spike train from [B, n_in] rates."""
        B = rates.shape[0]
        if not self.stochastic:
            return np.broadcast_to(rates[:, None, :],
                                   (B, self.t_window, self.n_inputs)).copy()
        if rng is None:
            raise ConfigError("stochastic spike generation needs an rng")
        prob = np.clip(rates * self.params.dt, 0.0, 1.0)
        draw = rng.random((B, self.t_window, self.n_inputs))
        return (draw < prob[:, None, :]).astype(np.float64)

    def forward(self, rates: np.ndarray, *, soft: bool = False,
                training: bool = False, dropout_rate: float = 0.0,
                rng=None, record: bool = False):
        """Simulate the window; returns (logits Tensor [B], diagnostics).

        Gradients flow through the surrogate spike rule and the reset
        blend v⁺ = s·v_reset + (1−s)·v_euler (exact reset in hard mode).
        """
        rates = np.asarray(rates, dtype=np.float64)
        if rates.ndim != 2 or rates.shape[1] != self.n_inputs:
            raise ShapeError(f"expected [batch, {self.n_inputs}] rates, "
                             f"got {rates.shape}")
        p = self.params
        B = rates.shape[0]
        spikes_in = self._input_spikes(rates, rng)
        if training and dropout_rate > 0.0:
            # one mask per batch, held fixed across the window
            mask = snn_dropout(np.ones((B, self.n_inputs)), dropout_rate,
                               rng, training=True)
            spikes_in = spikes_in * mask[:, None, :]

        diag = SpikeDiagnostics()
        v1 = Tensor(np.full((B, self.hidden), p.v_rest))
        v2 = Tensor(np.full((B, self.hidden), p.v_rest))
        counts2 = Tensor(np.zeros((B, self.hidden)))
        counts1_np = np.zeros((B, self.hidden))
        trains: dict[int, list] = {0: [], 1: [], 2: []}
        for t in range(self.t_window):
            s_in = Tensor(spikes_in[:, t, :])
            i1 = s_in @ self.w1 + self.b1
            v1e = v1 + (-(v1 - p.v_rest) + i1 * p.r_m) * p.leak
            s1 = spike_fn(v1e, p, self.beta, soft=soft)
            v1 = s1 * p.v_reset + (1.0 - s1) * v1e
            i2 = s1 @ self.w2 + self.b2
            v2e = v2 + (-(v2 - p.v_rest) + i2 * p.r_m) * p.leak
            s2 = spike_fn(v2e, p, self.beta, soft=soft)
            v2 = s2 * p.v_reset + (1.0 - s2) * v2e
            counts2 = counts2 + s2
            counts1_np += s1.data
            if record:
                trains[0].append(spikes_in[:, t, :])
                trains[1].append(s1.data.copy())
                trains[2].append(s2.data.copy())
        logits = (counts2 @ self.w_out + self.b_out).reshape((B,))
        diag.counts = {1: counts1_np, 2: counts2.data.copy()}
        if record:
            diag.trains = {k: np.stack(rows, axis=1)
                           for k, rows in trains.items()}
        return logits, diag

    def scores(self, rates: np.ndarray, rng=None) -> np.ndarray:
        """Anomaly scores A ∈ (0,1), inference mode."""
        with ad.no_grad():
            logits, _ = self.forward(rates, rng=rng)
        return 1.0 / (1.0 + np.exp(-logits.data))


def raster_csv(trains: dict, sample: int = 0) -> str:
    """Serialize one sample's spike trains as `t,layer,neuron,spike`."""
    lines = ["t,layer,neuron,spike"]
    for layer in sorted(trains):
        arr = np.asarray(trains[layer])
        if arr.ndim == 3:
            arr = arr[sample]
        T, N = arr.shape
        for t in range(T):
            for n in range(N):
                lines.append(f"{t},{layer},{n},{int(arr[t, n] != 0.0)}")
    return "\n".join(lines) + "\n"
