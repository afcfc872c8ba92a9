"""Rollout evaluation: pointwise metrics, spectral diagnostics, and the
empirical high-band error-budget probe.

Fields move through two spaces. Steppers consume and produce normalized
frames via `step_normalized`; `rollout` denormalizes before handing
frames to the metrics, so every number reported here lives in raw
vorticity units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import load_checkpoint
from .spectral import (SpectrumCurve, VorticityField, enstrophy_spectrum,
                       high_band_norm, normalized_spectral_error,
                       project_high)

DIVERGENCE_REL_L2 = 10.0
SSIM_WINDOW = 7


# --- pointwise metrics ------------------------------------------------------

def _as_frame(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-d field, got shape {a.shape}")
    return a


def l2_error(pred, gt) -> float:
    """Unnormalized grid L2 distance sqrt(sum((pred - gt)^2))."""
    pred = _as_frame(pred, "pred")
    gt = _as_frame(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    d = pred - gt
    return float(np.sqrt(np.sum(d * d)))


def relative_l2(pred, gt) -> float:
    """l2_error scaled by the reference norm; rejects a zero reference."""
    gt = _as_frame(gt, "gt")
    denom = float(np.sqrt(np.sum(gt * gt)))
    if denom == 0.0:
        raise ValueError("relative error against an identically zero field")
    return l2_error(pred, gt) / denom


def _window_sums(x: np.ndarray, w: int) -> np.ndarray:
    c = np.cumsum(np.cumsum(x, axis=0), axis=1)
    c = np.pad(c, ((1, 0), (1, 0)))
    return c[w:, w:] - c[:-w, w:] - c[w:, :-w] + c[:-w, :-w]


def ssim(pred, gt, window: int = SSIM_WINDOW) -> float:
    """Mean structural similarity under a uniform square window.

    Local means, variances, and covariance are taken over every position
    where the window fits entirely inside the frame. The stabilizers
    follow the dynamic range R of the reference frame: c1 = (0.01 R)^2,
    c2 = (0.03 R)^2. Identical frames score exactly 1. When both frames
    are constant the window statistics are degenerate (zero variance,
    R = 0), so the defining limit is evaluated directly.
    """
    pred = _as_frame(pred, "pred")
    gt = _as_frame(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if window < 1 or window > min(pred.shape):
        raise ValueError(f"window {window} does not fit frame {pred.shape}")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(gt))):
        raise ValueError("ssim requires finite inputs")
    r = float(gt.max() - gt.min())
    c1 = (0.01 * r) ** 2
    c2 = (0.03 * r) ** 2
    if pred.max() == pred.min() and gt.max() == gt.min():
        a = float(pred.flat[0])
        b = float(gt.flat[0])
        den = a * a + b * b + c1
        return 1.0 if den == 0.0 else float((2.0 * a * b + c1) / den)
    m = float(window * window)
    mu1 = _window_sums(pred, window) / m
    mu2 = _window_sums(gt, window) / m
    # one-pass variances can round to tiny negatives; clamp at zero
    var1 = np.maximum(_window_sums(pred * pred, window) / m - mu1 * mu1, 0.0)
    var2 = np.maximum(_window_sums(gt * gt, window) / m - mu2 * mu2, 0.0)
    cov = _window_sums(pred * gt, window) / m - mu1 * mu2
    num1 = 2.0 * mu1 * mu2 + c1
    den1 = mu1 * mu1 + mu2 * mu2 + c1
    num2 = 2.0 * cov + c2
    den2 = var1 + var2 + c2
    lum = np.where(den1 == 0.0, 1.0, num1 / np.where(den1 == 0.0, 1.0, den1))
    struct = np.where(den2 == 0.0, 1.0, num2 / np.where(den2 == 0.0, 1.0, den2))
    # both factors are <= 1 in exact arithmetic (AM-GM, Cauchy-Schwarz);
    # rounding must not push the score past that
    return float(np.mean(np.minimum(lum * struct, 1.0)))


# --- steppers ---------------------------------------------------------------

class NetworkStepper:
    """A trained forecaster bound to its normalization statistics.

    `step_normalized` advances one frame in normalized space; calling the
    stepper maps a raw field to the raw field one step ahead.
    """

    def __init__(self, model, params, mean: float, std: float):
        if std <= 0.0:
            raise ValueError(f"normalization std must be positive, got {std}")
        self.model = model
        self.params = params
        self.mean = float(mean)
        self.std = float(std)

    @classmethod
    def from_checkpoint(cls, path: str) -> "NetworkStepper":
        model, params, extra = load_checkpoint(path)
        if "norm.mean" not in extra or "norm.std" not in extra:
            raise ValueError(f"checkpoint {path} lacks normalization stats")
        return cls(model, params, extra["norm.mean"], extra["norm.std"])

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def step_normalized(self, z: np.ndarray) -> np.ndarray:
        out = self.model.predict(self.params, np.asarray(z)[None, None])
        return out[0, 0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.denormalize(self.step_normalized(self.normalize(x)))


class PersistenceStepper:
    """Baseline that predicts no change at all."""

    def __init__(self, mean: float = 0.0, std: float = 1.0):
        if std <= 0.0:
            raise ValueError(f"normalization std must be positive, got {std}")
        self.mean = float(mean)
        self.std = float(std)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def step_normalized(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.denormalize(self.step_normalized(self.normalize(x)))


# --- rollout ----------------------------------------------------------------

def rollout(model, omega0, M: int):
    """Iterate the one-step map M times from a normalized initial frame.

    Returns (frames, diverged_at): frames holds the denormalized
    predictions, one per completed step. If the state goes non-finite the
    loop stops and diverged_at records that 1-based step (the bad frame
    is dropped); otherwise diverged_at is None and frames has M entries.
    """
    if M < 0:
        raise ValueError(f"rollout length must be >= 0, got {M}")
    z = _as_frame(omega0, "omega0")
    frames = np.empty((M,) + z.shape, dtype=np.float64)
    for k in range(1, M + 1):
        z = np.asarray(model.step_normalized(z), dtype=np.float64)
        if not np.all(np.isfinite(z)):
            return frames[:k - 1].copy(), k
        frames[k - 1] = model.denormalize(z)
    return frames, None


@dataclass
class StepSpectra:
    """Enstrophy spectra of one rollout step, with per-shell error."""

    step: int
    pred: SpectrumCurve
    gt: SpectrumCurve
    nse: np.ndarray
    nse_valid: np.ndarray


def mean_abs_nse_above(entry: StepSpectra, k_min: float) -> float:
    """Mean |per-shell spectral error| over valid shells with k > k_min."""
    mask = entry.nse_valid & (entry.gt.k_bins > k_min)
    if not mask.any():
        raise ValueError(f"no valid shells above k={k_min}")
    return float(np.mean(np.abs(entry.nse[mask])))


ROLLOUT_HEADER = "step,l2,rel_l2,ssim,eps_high"


@dataclass
class RolloutReport:
    """Per-step rollout metrics against a reference trajectory."""

    k_c: float
    steps: np.ndarray
    l2: np.ndarray
    rel_l2: np.ndarray
    ssim: np.ndarray
    eps_high: np.ndarray
    spectra: list
    diverged_at: int | None = None

    def to_csv_lines(self) -> list:
        lines = [ROLLOUT_HEADER]
        for i, k in enumerate(self.steps):
            lines.append(f"{int(k)},{self.l2[i]:.9g},{self.rel_l2[i]:.9g},"
                         f"{self.ssim[i]:.9g},{self.eps_high[i]:.9g}")
        return lines

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.to_csv_lines()) + "\n")

    def spectra_for(self, step: int) -> StepSpectra:
        for entry in self.spectra:
            if entry.step == step:
                return entry
        raise KeyError(f"no spectra recorded for step {step}")


def evaluate_trajectory(model, gt_frames, M: int, k_c: float | None = None):
    """Roll the model M steps from gt_frames[0] and score every step.

    gt_frames holds at least M + 1 raw fields; frame 0 seeds the rollout.
    Each completed step gets the four pointwise columns plus enstrophy
    spectra of prediction and reference with their per-shell error. The
    report is marked diverged at the first step whose relative error
    exceeds 10 (scoring continues) or whose state went non-finite
    (scoring stops there).
    """
    gt_frames = np.asarray(gt_frames, dtype=np.float64)
    if gt_frames.ndim != 3:
        raise ValueError(f"expected [K,n,n] frames, got {gt_frames.shape}")
    if len(gt_frames) < M + 1:
        raise ValueError(f"need {M + 1} reference frames, have {len(gt_frames)}")
    n = gt_frames.shape[1]
    if k_c is None:
        k_c = n // 4
    preds, diverged_at = rollout(model, model.normalize(gt_frames[0]), M)
    K = len(preds)
    l2 = np.empty(K)
    rel = np.empty(K)
    ss = np.empty(K)
    eps = np.empty(K)
    spectra = []
    for i in range(K):
        pred, gt = preds[i], gt_frames[i + 1]
        l2[i] = l2_error(pred, gt)
        rel[i] = relative_l2(pred, gt)
        ss[i] = ssim(pred, gt)
        eps[i] = high_band_norm(pred - gt, k_c)
        curve_p = enstrophy_spectrum(VorticityField(pred, n))
        curve_g = enstrophy_spectrum(VorticityField(gt, n))
        nse, valid = normalized_spectral_error(curve_p, curve_g)
        spectra.append(StepSpectra(i + 1, curve_p, curve_g, nse, valid))
        if diverged_at is None and rel[i] > DIVERGENCE_REL_L2:
            diverged_at = i + 1
    return RolloutReport(k_c=float(k_c), steps=np.arange(1, K + 1),
                         l2=l2, rel_l2=rel, ssim=ss, eps_high=eps,
                         spectra=spectra, diverged_at=diverged_at)


# --- error-budget probe -----------------------------------------------------

def _project_values(values: np.ndarray, k_c: float) -> np.ndarray:
    n = values.shape[0]
    return project_high(VorticityField(values, n), k_c).values


@dataclass
class GrowthEstimate:
    """Dominant high-band Jacobian gain from power iteration."""

    value: float
    converged: bool
    iterations: int


def estimate_growth_factor(step_map, state, k_c: float, iters: int = 100,
                           rtol: float = 1e-9, seed: int = 0, v0=None):
    """Largest high-band amplification of the one-step map at `state`.

    Power iteration on v -> P_high J(state) P_high v, with the Jacobian
    applied through forward differences of `step_map` (a raw field to
    raw field callable). The per-iteration gain is the norm ratio; the
    loop stops once successive gains agree to `rtol`, else the last gain
    is returned with converged=False.
    """
    state = _as_frame(state, "state")
    n = state.shape[0]
    if iters < 1:
        raise ValueError(f"need at least one iteration, got {iters}")
    f0 = np.asarray(step_map(state), dtype=np.float64)
    if v0 is None:
        v0 = np.random.default_rng(seed).standard_normal((n, n))
    v = _project_values(np.asarray(v0, dtype=np.float64), k_c)
    vn = float(np.sqrt(np.sum(v * v)))
    if vn == 0.0:
        raise ValueError("initial direction has no high-band content")
    v /= vn
    # v stays unit norm, so the step scale only tracks the base state
    h = 1e-5 * max(float(np.sqrt(np.sum(state * state))), 1.0)
    gain = None
    for i in range(1, iters + 1):
        w = (np.asarray(step_map(state + h * v), dtype=np.float64) - f0) / h
        w = _project_values(w, k_c)
        g = float(np.sqrt(np.sum(w * w)))
        if g == 0.0:
            return GrowthEstimate(0.0, True, i)
        if gain is not None and abs(g - gain) <= rtol * g:
            return GrowthEstimate(g, True, i)
        gain = g
        v = w / g
    return GrowthEstimate(gain, False, iters)


@dataclass
class DeltaEstimate:
    """One-step high-band defect statistics over a reference trajectory."""

    max: float
    q50: float
    q90: float
    values: np.ndarray


def measure_delta_hf(model, frames, k_c: float) -> DeltaEstimate:
    """delta_k = ||P_high(F(w_k) - w_{k+1})|| over consecutive raw frames.

    `model` is a raw field to raw field one-step map; a perfect model
    scores identically zero.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or len(frames) < 2:
        raise ValueError(f"need a [K>=2,n,n] trajectory, got {frames.shape}")
    values = np.empty(len(frames) - 1)
    for k in range(len(frames) - 1):
        values[k] = high_band_norm(model(frames[k]) - frames[k + 1], k_c)
    return DeltaEstimate(max=float(values.max()),
                         q50=float(np.quantile(values, 0.5)),
                         q90=float(np.quantile(values, 0.9)),
                         values=values)


def theorem_bound(growth: float, delta: float, eps0: float, steps: int) -> float:
    """Closed-form high-band error budget after `steps` iterations.

    growth**steps * eps0 + delta * (growth**steps - 1) / (growth - 1),
    with the growth -> 1 limit eps0 + steps * delta taken when growth
    sits within 1e-12 of 1.
    """
    if growth <= 0.0:
        raise ValueError(f"growth factor must be positive, got {growth}")
    if delta < 0.0 or eps0 < 0.0:
        raise ValueError("defect and initial error must be nonnegative")
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if abs(growth - 1.0) <= 1e-12:
        return eps0 + steps * delta
    gm = growth ** steps
    return gm * eps0 + delta * (gm - 1.0) / (growth - 1.0)


@dataclass
class BoundCheck:
    """Measured high-band error against its predicted budget, per step."""

    k_c: float
    steps: np.ndarray
    measured: np.ndarray
    bound: np.ndarray
    satisfied: np.ndarray
    growth: GrowthEstimate
    delta: DeltaEstimate
    eps0: float

    def all_satisfied(self) -> bool:
        return bool(self.satisfied.all())


def verify_bound(system, model, omega0, k_c: float, M: int,
                 growth_iters: int = 100, seed: int = 0) -> BoundCheck:
    """Empirical check of the high-band error budget over M steps.

    `system` is the reference one-step map and `model` the surrogate,
    both raw field to raw field. Rolling the two side by side from
    omega0 gives eps_k = ||P_high(pred_k - ref_k)||; the budget uses the
    growth factor estimated at omega0, the maximum one-step defect along
    the reference trajectory, and eps0 = 0 (shared initial state). Each
    step allows rounding slack of 1e-12 * max(1, bound).
    """
    omega0 = _as_frame(omega0, "omega0")
    if M < 1:
        raise ValueError(f"need at least one step, got M={M}")
    ref = np.empty((M + 1,) + omega0.shape)
    ref[0] = omega0
    for k in range(M):
        ref[k + 1] = system(ref[k])
    delta = measure_delta_hf(model, ref, k_c)
    growth = estimate_growth_factor(system, omega0, k_c,
                                    iters=growth_iters, seed=seed)
    measured = np.empty(M)
    pred = omega0
    for k in range(M):
        pred = np.asarray(model(pred), dtype=np.float64)
        measured[k] = high_band_norm(pred - ref[k + 1], k_c)
    bound = np.array([theorem_bound(growth.value, delta.max, 0.0, k)
                      for k in range(1, M + 1)])
    slack = 1e-12 * np.maximum(1.0, bound)
    return BoundCheck(k_c=float(k_c), steps=np.arange(1, M + 1),
                      measured=measured, bound=bound,
                      satisfied=measured <= bound + slack,
                      growth=growth, delta=delta, eps0=0.0)


@dataclass
class TheoremProbe:
    """Plain-text summary of one error-budget verification."""

    k_c: float
    G_hat: float
    delta_hf: float
    eps0: float
    M: int
    bound: float
    satisfied_steps: int

    @classmethod
    def from_check(cls, check: BoundCheck) -> "TheoremProbe":
        return cls(k_c=check.k_c, G_hat=check.growth.value,
                   delta_hf=check.delta.max, eps0=check.eps0,
                   M=len(check.steps), bound=float(check.bound[-1]),
                   satisfied_steps=int(check.satisfied.sum()))

    def lines(self) -> list:
        return [f"k_c={self.k_c:.9g}",
                f"G_hat={self.G_hat:.9g}",
                f"delta_hf={self.delta_hf:.9g}",
                f"eps0={self.eps0:.9g}",
                f"M={self.M}",
                f"bound={self.bound:.9g}",
                f"satisfied={self.satisfied_steps}/{self.M}"]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.lines()) + "\n")
