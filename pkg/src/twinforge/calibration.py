"""Material calibration from channel measurements.

Three regimes for fitting the twin's reflection coefficients to measured
channel responses:

* ``calibrate_oblivious`` - projected gradient descent on the complex
  residual, assuming the twin's path phases are exact;
* ``calibrate_uniform_phase`` - matches binned power-delay profiles at
  resolution 1/bandwidth, which is what the complex residual averages to
  when path phases are uniformly random;
* ``calibrate_phase_aware_em`` - alternates exact per-path phase
  estimation (coordinate ascent) with material updates, absorbing phase
  errors caused by geometry mismatch.

Descent steps are fixed-size with a deterministic halving guard: a step
that would increase the objective is retried at half size, so recorded
objective traces are non-increasing by construction.
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .scene import (ChannelResponse, path_gains, received_power, subcarrier_frequencies,
                    synthesize_cfr, trace_paths)

_MAX_HALVINGS = 60


@dataclass
class MeasurementSet:
    """Channel responses taken at a set of rx points on a common grid."""

    points: np.ndarray                # (N, 2)
    responses: list                   # list[ChannelResponse], shared frequencies

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.points.shape[0] != len(self.responses):
            raise ValueError("one response per rx point required")
        if not self.responses:
            raise ValueError("measurement set must contain at least one entry")
        f0 = self.responses[0].frequencies
        for r in self.responses[1:]:
            if r.frequencies.shape != f0.shape or not np.array_equal(r.frequencies, f0):
                raise ValueError("all responses must share the same subcarrier grid")

    @property
    def frequencies(self):
        return self.responses[0].frequencies

    @property
    def bandwidth(self):
        return self.responses[0].bandwidth

    def __len__(self):
        return len(self.responses)


@dataclass
class CalibOptions:
    step: float = 0.2
    max_iters: int = 200
    tol: float = 1e-12
    em_iters: int = 25
    e_sweeps: int = 3
    m_steps: int = 8
    max_order: int = 2
    max_move: float = 0.25
    phase_cap: float = np.pi

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("step must be positive")


@dataclass
class CalibrationReport:
    fitted: np.ndarray
    objective_trace: np.ndarray
    phase_estimates: list | None      # per measurement, per path; None for baselines
    iterations_used: int
    notes: tuple = ()


@dataclass
class PhaseEstimate:
    phases: np.ndarray                # per-path radians in (-pi, pi]
    zero_gain: np.ndarray             # paths flagged as uninformative (gain 0)


# ---------------------------------------------------------------------------
# Batched twin model over all measurement points
# ---------------------------------------------------------------------------

class _BatchModel:
    """Padded per-point path arrays plus the measured responses."""

    def __init__(self, scene, measurements, max_order):
        paths_per_point = []
        for n in range(len(measurements)):
            pt = measurements.points[n]
            paths = trace_paths(scene, pt, max_order)
            if not paths:
                raise ValueError(
                    f"scene yields no paths for measurement point ({pt[0]}, {pt[1]})")
            paths_per_point.append(paths)
        n_points = len(paths_per_point)
        n_mat = scene.n_materials
        p_max = max(len(p) for p in paths_per_point)
        self.delays = np.zeros((n_points, p_max))
        self.base = np.zeros((n_points, p_max))
        self.counts = np.zeros((n_points, p_max, n_mat), dtype=np.int64)
        for n, paths in enumerate(paths_per_point):
            for j, p in enumerate(paths):
                self.delays[n, j] = p.delay
                self.base[n, j] = p.base_gain
                self.counts[n, j] = p.reflection_counts
        self.n_paths = [len(p) for p in paths_per_point]
        self.freqs = measurements.frequencies
        self.h_meas = np.stack([r.values for r in measurements.responses])
        self.n_materials = n_mat
        self.paths_per_point = paths_per_point

    def gains(self, rho):
        return self.base * np.prod(rho[None, None, :] ** self.counts, axis=2)

    def dgains(self, rho):
        out = np.zeros(self.counts.shape)
        for m in range(self.n_materials):
            cm = self.counts.copy()
            hit = cm[:, :, m] > 0
            cm[:, :, m][hit] -= 1
            out[:, :, m] = self.base * self.counts[:, :, m] * \
                np.prod(rho[None, None, :] ** cm, axis=2)
        return out

    def cfr_objective(self, rho, phases):
        pred = kernels.cfr_predict(self.delays, self.gains(rho), phases, self.freqs)
        resid = self.h_meas - pred
        return float(np.sum(resid.real**2 + resid.imag**2))

    def cfr_objective_grad(self, rho, phases):
        return kernels.cfr_objective_grad(
            self.delays, self.gains(rho), self.dgains(rho), phases, self.freqs, self.h_meas)


def _validate_materials(init, n_materials):
    rho = np.asarray(init, dtype=np.float64).reshape(-1).copy()
    if rho.shape[0] < n_materials:
        raise ValueError("initial material vector shorter than scene material count")
    if np.any(rho < 0.0) or np.any(rho > 1.0):
        raise ValueError("reflection coefficients must lie in [0, 1]")
    return rho


def _projected_descent(rho, obj_grad, obj_only, step, max_iters, tol, trace=None,
                       max_move=0.25):
    """Fixed-step projected descent with a deterministic halving guard.

    The per-iteration move is clipped elementwise to max_move (keeps the
    iterate in the basin the gradient points into), and a step whose
    objective would increase is retried at half size, so accepted
    objectives are non-increasing. Returns (rho, iterations_used).
    """
    iters = 0
    for _ in range(max_iters):
        cur, grad = obj_grad(rho)
        iters += 1
        s = step
        accepted = None
        for _ in range(_MAX_HALVINGS):
            move = np.clip(s * grad, -max_move, max_move)
            trial = np.clip(rho - move, 0.0, 1.0)
            tobj = obj_only(trial)
            if tobj <= cur:
                accepted = (trial, tobj)
                break
            s *= 0.5
        if accepted is None:
            break
        rho, new = accepted
        if trace is not None:
            trace.append(new)
        if cur - new < tol:
            break
    return rho, iters


# ---------------------------------------------------------------------------
# Calibrators
# ---------------------------------------------------------------------------

def calibrate_oblivious(scene, measurements, init, opts=None):
    """Least-squares material fit of the complex responses, zero path phases."""
    opts = opts if opts is not None else CalibOptions()
    model = _BatchModel(scene, measurements, opts.max_order)
    rho = _validate_materials(init, model.n_materials)
    phases = np.zeros_like(model.delays)
    trace = [model.cfr_objective(rho, phases)]
    fitted, iters = _projected_descent(
        rho,
        lambda r: model.cfr_objective_grad(r, phases),
        lambda r: model.cfr_objective(r, phases),
        opts.step, opts.max_iters, opts.tol, trace, opts.max_move)
    return CalibrationReport(fitted, np.asarray(trace), None, iters)


def _binned_pdp(responses, freqs, bandwidth):
    """Per-bin inverse-transform power at delay resolution 1/bandwidth."""
    k = freqs.shape[0]
    taus = np.arange(k) / bandwidth
    basis = np.exp(2j * np.pi * np.outer(freqs, taus))  # (K, B)
    h = np.stack([r.values for r in responses])
    impulse = h @ basis / k
    return np.abs(impulse) ** 2


def _pdp_transform(delays, freqs, bandwidth):
    """(N, B, P) coefficients of the binned impulse response in the path gains.

    Applying the same inverse transform to measurement and prediction makes
    the leakage pattern cancel, so per-path constant phase errors only
    matter where paths share delay bins.
    """
    k = freqs.shape[0]
    taus = np.arange(k) / bandwidth
    basis = np.exp(2j * np.pi * np.outer(taus, freqs))          # (B, K)
    path_cfr = np.exp(-2j * np.pi * delays[:, :, None] * freqs[None, None, :])
    return np.einsum("bk,npk->nbp", basis, path_cfr) / k


def calibrate_uniform_phase(scene, measurements, init, opts=None):
    """Material fit by matching binned power-delay profiles.

    Phases only enter through within-bin interference, so per-path phase
    errors wash out once the bandwidth resolves the path delays; this is
    the behaviour a uniform-phase assumption buys.
    """
    opts = opts if opts is not None else CalibOptions()
    model = _BatchModel(scene, measurements, opts.max_order)
    rho = _validate_materials(init, model.n_materials)
    k = model.freqs.shape[0]
    bandwidth = measurements.bandwidth
    pdp_meas = _binned_pdp(measurements.responses, model.freqs, bandwidth)
    transform = _pdp_transform(model.delays, model.freqs, bandwidth)
    for n in range(model.delays.shape[0]):
        transform[n, :, model.n_paths[n]:] = 0.0    # padded slots

    notes = []
    bins = np.round(model.delays * bandwidth).astype(np.int64) % k
    for n in range(model.delays.shape[0]):
        used = bins[n, :model.n_paths[n]]
        for b in np.unique(used):
            hits = int(np.sum(used == b))
            if hits > 1:
                pt = measurements.points[n]
                notes.append(
                    f"point ({pt[0]}, {pt[1]}): delay bin {int(b)} holds {hits} paths; "
                    "only their combined power is identifiable")

    def obj_only(r):
        g = model.gains(r)
        c = np.einsum("nbp,np->nb", transform, g)
        return float(np.sum((pdp_meas - (c.real**2 + c.imag**2)) ** 2))

    def obj_grad(r):
        return kernels.pdp_objective_grad(transform, model.gains(r), model.dgains(r),
                                          pdp_meas)

    trace = [obj_only(rho)]
    fitted, iters = _projected_descent(rho, obj_grad, obj_only,
                                       opts.step, opts.max_iters, opts.tol, trace,
                                       opts.max_move)
    return CalibrationReport(fitted, np.asarray(trace), None, iters, tuple(notes))


def estimate_phase_errors(predicted_paths, materials, measurement, sweeps,
                          phase_cap=np.pi):
    """Per-path phase offsets minimizing the residual to one measurement.

    Cyclic coordinate ascent; each update is the exact (optionally
    trust-region-restricted) minimizer for its path, so the residual norm
    never increases. Zero-gain paths carry no phase information and are
    pinned to 0 and flagged.
    """
    if not predicted_paths:
        raise ValueError("at least one predicted path required")
    if sweeps < 1:
        raise ValueError("sweeps must be positive")
    gains = path_gains(predicted_paths, materials)
    delays = np.array([p.delay for p in predicted_paths])
    freqs = measurement.frequencies
    path_cfr = gains[:, None] * np.exp(-2j * np.pi * delays[:, None] * freqs[None, :])
    phases = kernels.phase_sweep(measurement.values, path_cfr,
                                 np.zeros(len(predicted_paths)), sweeps, phase_cap)
    phases = np.where(gains == 0.0, 0.0, np.pi - np.mod(np.pi - phases, 2.0 * np.pi))
    return PhaseEstimate(phases, gains == 0.0)


def calibrate_phase_aware_em(scene, measurements, init, opts=None):
    """EM calibration: E-step infers per-path phase errors per measurement,
    M-step updates materials with phases held fixed.

    The objective trace is recorded after every half-step and is
    non-increasing: the E-step is an exact coordinate minimizer and the
    M-step uses guarded descent.
    """
    opts = opts if opts is not None else CalibOptions()
    model = _BatchModel(scene, measurements, opts.max_order)
    rho = _validate_materials(init, model.n_materials)
    n_points = model.delays.shape[0]
    phases = np.zeros_like(model.delays)
    trace = [model.cfr_objective(rho, phases)]
    for it in range(opts.em_iters):
        gains = model.gains(rho)
        for n in range(n_points):
            path_cfr = gains[n][:, None] * \
                np.exp(-2j * np.pi * model.delays[n][:, None] * model.freqs[None, :])
            phases[n] = kernels.phase_sweep(model.h_meas[n], path_cfr, phases[n],
                                            opts.e_sweeps, opts.phase_cap)
        trace.append(model.cfr_objective(rho, phases))
        rho, _ = _projected_descent(
            rho,
            lambda r: model.cfr_objective_grad(r, phases),
            lambda r: model.cfr_objective(r, phases),
            opts.step, opts.m_steps, 0.0, None, opts.max_move)
        trace.append(model.cfr_objective(rho, phases))
        if trace[-3] - trace[-1] < opts.tol:
            break
    phase_estimates = [phases[n, :model.n_paths[n]].copy() for n in range(n_points)]
    iterations_used = (len(trace) - 1) // 2
    return CalibrationReport(rho, np.asarray(trace), phase_estimates, iterations_used)


def relative_power_error(scene, materials, heldout, max_order=2):
    """Mean over rx points of |P_meas - P_pred| / P_meas."""
    if len(heldout) == 0:
        raise ValueError("held-out set must be nonempty")
    errors = []
    freqs = heldout.frequencies
    for n in range(len(heldout)):
        p_meas = received_power(heldout.responses[n])
        if p_meas == 0.0:
            pt = heldout.points[n]
            raise ValueError(f"zero measured power at ({pt[0]}, {pt[1]}): "
                             "relative error undefined")
        paths = trace_paths(scene, heldout.points[n], max_order)
        if paths:
            gains = path_gains(paths, materials)
            delays = np.array([p.delay for p in paths])
            pred = kernels.cfr_predict(delays[None, :], gains[None, :],
                                       np.zeros((1, len(paths))), freqs)[0]
            p_pred = float(np.mean(np.abs(pred) ** 2))
        else:
            p_pred = 0.0
        errors.append(abs(p_meas - p_pred) / p_meas)
    return float(np.mean(errors))


# ---------------------------------------------------------------------------
# Measurement generation and serialization
# ---------------------------------------------------------------------------

def generate_measurements(scene, points, materials, n_subcarriers, bandwidth,
                          phase_offsets=None, max_order=2):
    """Synthesize a MeasurementSet from a (ground-truth) scene.

    phase_offsets, when given, is a per-point sequence of per-path offsets.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    responses = []
    for i, pt in enumerate(points):
        paths = trace_paths(scene, pt, max_order)
        offs = None if phase_offsets is None else phase_offsets[i]
        responses.append(synthesize_cfr(paths, materials, n_subcarriers, bandwidth,
                                        scene.carrier_frequency, offs))
    return MeasurementSet(points, responses)


def write_measurements(measurements, path):
    """CSV with columns rx_x, rx_y, subcarrier_hz, re, im."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rx_x", "rx_y", "subcarrier_hz", "re", "im"])
        for n in range(len(measurements)):
            x, y = measurements.points[n]
            r = measurements.responses[n]
            for f, v in zip(r.frequencies, r.values):
                writer.writerow([repr(x), repr(y), repr(f), repr(v.real), repr(v.imag)])


def read_measurements(path):
    """Inverse of write_measurements; consecutive rows with equal rx form one entry."""
    points, responses = [], []
    cur_pt, cur_f, cur_v = None, [], []

    def flush():
        if cur_pt is None:
            return
        freqs = np.asarray(cur_f)
        bw = float(freqs[1] - freqs[0]) * freqs.size if freqs.size > 1 else 0.0
        points.append(cur_pt)
        responses.append(ChannelResponse(freqs, np.asarray(cur_v), bw))

    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["rx_x", "rx_y", "subcarrier_hz"]:
            raise ValueError("unrecognized measurement CSV header")
        for row in reader:
            pt = (float(row[0]), float(row[1]))
            if pt != cur_pt:
                flush()
                cur_pt, cur_f, cur_v = pt, [], []
            cur_f.append(float(row[2]))
            cur_v.append(complex(float(row[3]), float(row[4])))
    flush()
    return MeasurementSet(np.asarray(points), responses)
