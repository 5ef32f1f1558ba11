"""Hot numeric kernels, in two builds: numba ``@njit`` and pure numpy.

Calibration spends nearly all of its time evaluating batched channel
responses, their material gradients, and per-path phase sweeps; policy
training spends it in the slot-by-slot MAC simulation. Those live here.

Two kinds of kernels:

* dual-build (``*_np`` / ``*_nb``): the numpy build is vectorized, the
  numba build is explicit loops. Same arithmetic, summation order may
  differ in the last ulps.
* single-source (``*_py`` plus a jitted alias): scalar-loop kernels whose
  interpreted fallback is tolerable; both builds are the same source, so
  results are bit-identical across backends.

Module-level names (``cfr_predict`` etc.) are bound to the build chosen
by :mod:`twinforge.accel`.

All path arrays are padded to a common path count per batch; padded slots
carry ``gains == 0`` and ``dgains == 0`` so they contribute nothing.
"""

import numpy as np

from .accel import NUMBA_ENABLED, maybe_jit

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# Channel frequency response: prediction, objective, material gradient
# ---------------------------------------------------------------------------

def cfr_predict_np(delays, gains, phases, freqs):
    """Batched CFR over measurement points.

    delays, gains, phases: (N, P); freqs: (K,). Returns (N, K) complex.
    """
    rot = np.exp(1j * (phases[:, :, None] - TWO_PI * delays[:, :, None] * freqs[None, None, :]))
    return (gains[:, :, None] * rot).sum(axis=1)


def cfr_objective_grad_np(delays, gains, dgains, phases, freqs, h_meas):
    """Squared-residual objective and its gradient in the material vector.

    dgains: (N, P, M) per-path gain derivatives; h_meas: (N, K) complex.
    Returns (objective, grad(M,)).
    """
    rot = np.exp(1j * (phases[:, :, None] - TWO_PI * delays[:, :, None] * freqs[None, None, :]))
    pred = (gains[:, :, None] * rot).sum(axis=1)
    resid = h_meas - pred
    obj = float(np.sum(resid.real**2 + resid.imag**2))
    # dL/dr_m = -2 Re sum_{n,k} conj(resid) * sum_p dg[n,p,m] rot[n,p,k]
    t = np.einsum("npk,nk->np", rot, resid.conj())
    grad = -2.0 * np.einsum("np,npm->m", t, dgains).real
    return obj, grad


def _cfr_predict_nb(delays, gains, phases, freqs):
    n, p = gains.shape
    k = freqs.shape[0]
    out = np.zeros((n, k), np.complex128)
    for i in range(n):
        for j in range(p):
            g = gains[i, j]
            if g == 0.0:
                continue
            for q in range(k):
                ang = phases[i, j] - TWO_PI * delays[i, j] * freqs[q]
                out[i, q] += g * complex(np.cos(ang), np.sin(ang))
    return out


def _cfr_objective_grad_nb(delays, gains, dgains, phases, freqs, h_meas):
    n, p, m = dgains.shape
    k = freqs.shape[0]
    grad = np.zeros(m, np.float64)
    obj = 0.0
    rot = np.empty((p, k), np.complex128)
    for i in range(n):
        for j in range(p):
            for q in range(k):
                ang = phases[i, j] - TWO_PI * delays[i, j] * freqs[q]
                rot[j, q] = complex(np.cos(ang), np.sin(ang))
        for q in range(k):
            pred = 0.0 + 0.0j
            for j in range(p):
                pred += gains[i, j] * rot[j, q]
            resid = h_meas[i, q] - pred
            obj += resid.real * resid.real + resid.imag * resid.imag
            for j in range(p):
                t = rot[j, q] * np.conj(resid)
                for w in range(m):
                    grad[w] += -2.0 * dgains[i, j, w] * t.real
    return obj, grad


# ---------------------------------------------------------------------------
# Power-delay-profile matching (uniform-phase calibration)
# ---------------------------------------------------------------------------

def pdp_objective_grad_np(transform, gains, dgains, pdp_meas):
    """Power-delay-profile matching objective and gradient.

    transform: (N, B, P) complex coefficients mapping per-path gains to
    the binned impulse response (same inverse transform applied to the
    measurement), so the predicted bin power is |sum_p A[n,b,p] g_p|^2.
    pdp_meas: (N, B) measured per-bin powers.
    """
    c = np.einsum("nbp,np->nb", transform, gains)
    resid = pdp_meas - (c.real**2 + c.imag**2)
    obj = float(np.sum(resid**2))
    t = np.einsum("nb,nbp->np", resid * c.conj(), transform)
    grad = -4.0 * np.einsum("np,npm->m", t.real, dgains)
    return obj, grad


def _pdp_objective_grad_nb(transform, gains, dgains, pdp_meas):
    n, p, m = dgains.shape
    nb = pdp_meas.shape[1]
    obj = 0.0
    grad = np.zeros(m, np.float64)
    t = np.empty(p, np.float64)
    for i in range(n):
        for j in range(p):
            t[j] = 0.0
        for b in range(nb):
            c = 0.0 + 0.0j
            for j in range(p):
                c += transform[i, b, j] * gains[i, j]
            r = pdp_meas[i, b] - (c.real * c.real + c.imag * c.imag)
            obj += r * r
            rc = r * np.conj(c)
            for j in range(p):
                t[j] += (rc * transform[i, b, j]).real
        for j in range(p):
            for w in range(m):
                grad[w] += -4.0 * t[j] * dgains[i, j, w]
    return obj, grad


# ---------------------------------------------------------------------------
# Per-path phase coordinate ascent (E-step)
# ---------------------------------------------------------------------------

def phase_sweep_np(h_meas, path_cfr, phases, sweeps, cap):
    """Cyclic exact minimization of ||h_meas - sum_p e^{j phi_p} H_p||^2.

    h_meas: (K,), path_cfr: (P, K) zero-phase per-path contributions.
    Each update is the exact minimizer over phi_p restricted to
    [-cap, cap] (the residual is cosine-shaped in phi_p, so clipping the
    unconstrained argmin is exact); cap = pi disables the restriction.
    Returns updated phases (P,).
    """
    out = phases.copy()
    p = path_cfr.shape[0]
    norms = np.sum(path_cfr.real**2 + path_cfr.imag**2, axis=1)
    total = (np.exp(1j * out)[:, None] * path_cfr).sum(axis=0)
    for _ in range(sweeps):
        for i in range(p):
            cur = np.exp(1j * out[i]) * path_cfr[i]
            if norms[i] == 0.0:
                out[i] = 0.0
                continue
            partial = h_meas - (total - cur)
            inner = np.sum(partial * np.conj(path_cfr[i]))
            new = np.arctan2(inner.imag, inner.real)
            if new > cap:
                new = cap
            elif new < -cap:
                new = -cap
            total = total - cur + np.exp(1j * new) * path_cfr[i]
            out[i] = new
    return out


def _phase_sweep_nb(h_meas, path_cfr, phases, sweeps, cap):
    p, k = path_cfr.shape
    out = phases.copy()
    norms = np.zeros(p, np.float64)
    total = np.zeros(k, np.complex128)
    for i in range(p):
        rot = complex(np.cos(out[i]), np.sin(out[i]))
        for q in range(k):
            c = path_cfr[i, q]
            norms[i] += c.real * c.real + c.imag * c.imag
            total[q] += rot * c
    for _ in range(sweeps):
        for i in range(p):
            if norms[i] == 0.0:
                out[i] = 0.0
                continue
            rot = complex(np.cos(out[i]), np.sin(out[i]))
            re = 0.0
            im = 0.0
            for q in range(k):
                partial = h_meas[q] - (total[q] - rot * path_cfr[i, q])
                inner = partial * np.conj(path_cfr[i, q])
                re += inner.real
                im += inner.imag
            new = np.arctan2(im, re)
            if new > cap:
                new = cap
            elif new < -cap:
                new = -cap
            nrot = complex(np.cos(new), np.sin(new))
            for q in range(k):
                total[q] += (nrot - rot) * path_cfr[i, q]
            out[i] = new
    return out


# ---------------------------------------------------------------------------
# Slotted multiple-access simulation (single source, bit-identical builds)
# ---------------------------------------------------------------------------

def q_learning_train_py(q, kappas, arrival_prob, buffer_cap, arrival_u,
                        explore_u, action_u, success_u, lr, gamma, epsilon):
    """Shared tabular Q-learning over pre-drawn uniforms.

    q: (buffer_cap+1, 2) table, actions [0]=transmit [1]=wait, mutated in
    place. kappas: per-episode interference level. The uniform arrays are
    (episodes, slots, devices); consuming pre-drawn draws keeps the result
    independent of backend and of how the caller seeded model sampling.
    """
    episodes, slots, n_dev = arrival_u.shape
    obs = np.zeros(n_dev, np.int64)
    act = np.zeros(n_dev, np.int64)
    buf = np.zeros(n_dev, np.int64)
    for e in range(episodes):
        kappa = kappas[e]
        for d in range(n_dev):
            buf[d] = 0
        for t in range(slots):
            for d in range(n_dev):
                if arrival_u[e, t, d] < arrival_prob and buf[d] < buffer_cap:
                    buf[d] += 1
            m = 0
            for d in range(n_dev):
                b = buf[d]
                obs[d] = b
                if b == 0:
                    act[d] = 1
                elif explore_u[e, t, d] < epsilon:
                    act[d] = 0 if action_u[e, t, d] < 0.5 else 1
                else:
                    act[d] = 0 if q[b, 0] >= q[b, 1] else 1
                if act[d] == 0 and b > 0:
                    m += 1
            if m <= 1:
                p_ok = 1.0
            else:
                p_ok = (1.0 - kappa) ** (m - 1)
            r = 0
            for d in range(n_dev):
                if act[d] == 0 and obs[d] > 0 and success_u[e, t, d] < p_ok:
                    buf[d] -= 1
                    r += 1
            for d in range(n_dev):
                b0 = obs[d]
                if b0 > 0:
                    b1 = buf[d]
                    best = q[b1, 0] if q[b1, 0] >= q[b1, 1] else q[b1, 1]
                    a = act[d]
                    q[b0, a] += lr * (r + gamma * best - q[b0, a])
    return q


def policy_rollout_py(p_transmit, kappa, arrival_prob, buffer_cap,
                      arrival_u, action_u, success_u):
    """Evaluate a fixed stochastic policy; returns per-episode deliveries."""
    episodes, slots, n_dev = arrival_u.shape
    delivered = np.zeros(episodes, np.int64)
    buf = np.zeros(n_dev, np.int64)
    act = np.zeros(n_dev, np.int64)
    for e in range(episodes):
        for d in range(n_dev):
            buf[d] = 0
        total = 0
        for t in range(slots):
            for d in range(n_dev):
                if arrival_u[e, t, d] < arrival_prob and buf[d] < buffer_cap:
                    buf[d] += 1
            m = 0
            for d in range(n_dev):
                if buf[d] > 0 and action_u[e, t, d] < p_transmit[buf[d]]:
                    act[d] = 0
                    m += 1
                else:
                    act[d] = 1
            if m <= 1:
                p_ok = 1.0
            else:
                p_ok = (1.0 - kappa) ** (m - 1)
            for d in range(n_dev):
                if act[d] == 0 and success_u[e, t, d] < p_ok:
                    buf[d] -= 1
                    total += 1
        delivered[e] = total
    return delivered


# ---------------------------------------------------------------------------
# Backend binding
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:
    from numba import njit

    cfr_predict_nb = njit(cache=True)(_cfr_predict_nb)
    cfr_objective_grad_nb = njit(cache=True)(_cfr_objective_grad_nb)
    pdp_objective_grad_nb = njit(cache=True)(_pdp_objective_grad_nb)
    phase_sweep_nb = njit(cache=True)(_phase_sweep_nb)

    cfr_predict = cfr_predict_nb
    cfr_objective_grad = cfr_objective_grad_nb
    pdp_objective_grad = pdp_objective_grad_nb
    phase_sweep = phase_sweep_nb
else:
    cfr_predict = cfr_predict_np
    cfr_objective_grad = cfr_objective_grad_np
    pdp_objective_grad = pdp_objective_grad_np
    phase_sweep = phase_sweep_np

q_learning_train = maybe_jit(q_learning_train_py)
policy_rollout = maybe_jit(policy_rollout_py)
