"""I/Q state discrimination.

Traces of I/Q records are fitted with one Gaussian per state on the I and Q
projections simultaneously (shared amplitudes), screened for leakage into
``f``/``h``, rotated so the g->e axis lies along I, and thresholded at the
point minimising the summed g/e misidentification.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import ndimage, optimize, special
from scipy.cluster import vq

from .errors import DegeneracyError, DomainError, FitError

TRACE_LENGTH = 1_000_000
MIN_RECORDS = 100_000
STATE_ORDER = ("g", "e", "f", "h")
MAX_LEAK = 0.01
N_THRESHOLDS = 1000


@dataclass
class Trace:
    records: np.ndarray            # (n, 2) I/Q
    trace_index: int = 0
    sampling_period: float = float("nan")


@dataclass
class BinaryTrace:
    bits: np.ndarray               # uint8, 0 = ground
    trace_index: int = 0
    sampling_period: float = float("nan")
    quality: bool = True
    model: Optional["ClusterModel"] = field(default=None, repr=False)

    @property
    def p_g(self):
        n = len(self.bits)
        return float(np.count_nonzero(self.bits == 0)) / n if n else float("nan")

    def __len__(self):
        return len(self.bits)


@dataclass(frozen=True)
class ClusterModel:
    states: tuple
    centers: np.ndarray            # (n, 2)
    sigmas: np.ndarray             # (n, 2)
    amplitudes: np.ndarray         # (n,) counts
    population_errors: np.ndarray  # (n,)
    theta: float = float("nan")
    threshold: float = float("nan")
    misid_g: float = float("nan")  # fraction of g read as e
    misid_e: float = float("nan")  # fraction of e read as g
    chi2: float = float("nan")
    dof: int = 0

    @property
    def populations(self):
        a = np.asarray(self.amplitudes, dtype=float)
        return a / a.sum()

    def population(self, state):
        if state not in self.states:
            return 0.0
        return float(self.populations[self.states.index(state)])

    def center(self, state):
        return np.asarray(self.centers[self.states.index(state)], dtype=float)

    @property
    def correct_identification(self):
        return 1.0 - 0.5 * (self.misid_g + self.misid_e)

    def summary(self, trace_index=None):
        rows = []
        pops = self.populations
        for i, s in enumerate(self.states):
            rows.append({
                "state": s,
                "center": [float(v) for v in self.centers[i]],
                "sigma": [float(v) for v in self.sigmas[i]],
                "amplitude": float(self.amplitudes[i]),
                "population": float(pops[i]),
            })
        out = {"trace": trace_index, "states": rows, "theta": self.theta,
               "threshold": self.threshold, "misid_g_to_e": self.misid_g,
               "misid_e_to_g": self.misid_e}
        return json.dumps(out)


def segment_records(records, sampling_period=float("nan"), trace_length=TRACE_LENGTH):
    """Cut a record stream into full-length traces; a short tail is dropped."""
    records = np.asarray(records)
    n_full = len(records) // trace_length
    return [Trace(records[k * trace_length:(k + 1) * trace_length], k, sampling_period)
            for k in range(n_full)]


# ---------------------------------------------------------------- fitting

def _find_modes(xy, grid=128, smooth=1.0):
    """Density peaks of a lightly smoothed 2D histogram, highest first."""
    lo = np.percentile(xy, 0.05, axis=0)
    hi = np.percentile(xy, 99.95, axis=0)
    span = np.maximum(hi - lo, 1e-12)
    lo, hi = lo - 0.05 * span, hi + 0.05 * span
    H, ex, ey = np.histogram2d(xy[:, 0], xy[:, 1], bins=grid, range=[[lo[0], hi[0]], [lo[1], hi[1]]])
    Hs = ndimage.gaussian_filter(H, smooth)
    peaks = (Hs == ndimage.maximum_filter(Hs, size=5)) & (Hs > max(2e-3 * Hs.max(), 5.0))
    ii, jj = np.nonzero(peaks)
    order = np.argsort(Hs[ii, jj])[::-1]
    cx = 0.5 * (ex[:-1] + ex[1:])
    cy = 0.5 * (ey[:-1] + ey[1:])
    return np.column_stack([cx[ii[order]], cy[jj[order]]])


def _uses_reference(reference_centers, n_states):
    if not reference_centers:
        return False
    return sum(s in reference_centers for s in STATE_ORDER) >= n_states


def _initial_centers(xy, n_states, reference_centers, n_restarts=3):
    """Candidate starting centres, best guess first.

    Reference positions when given; else the density peaks. A minority
    cluster a few sigma from a dominant one often shows only as a shoulder,
    so when peaks come up short they are topped up by k-means centres and a
    few plain k-means starts are added.
    """
    if _uses_reference(reference_centers, n_states):
        names = [s for s in STATE_ORDER if s in reference_centers][:n_states]
        return [np.array([reference_centers[s][:2] for s in names], dtype=float)]
    modes = _find_modes(xy)[:n_states]
    if len(modes) == n_states:
        return [modes]
    rng = np.random.default_rng(0)
    sub = xy[rng.choice(len(xy), min(len(xy), 50_000), replace=False)]
    starts = []
    for seed in range(n_restarts):
        km, _ = vq.kmeans2(sub, n_states, seed=seed, minit="++")
        if len(modes):
            # keep the peaks, add the k-means centres farthest from them
            d = np.min(((km[:, None, :] - modes[None, :, :]) ** 2).sum(axis=2), axis=1)
            starts.append(np.vstack([modes, km[np.argsort(d)[::-1][:n_states - len(modes)]]]))
        starts.append(km)
    return starts


def _check_resolved(centers, sigmas, pops, min_sep=1.0, min_pop=1e-3):
    """Raise when two populated clusters sit within ``min_sep`` pooled sigma."""
    live = np.flatnonzero(pops >= min_pop)
    if len(live) < 2:
        raise DegeneracyError(f"only {len(live)} populated cluster(s) after the fit")
    for a_ in range(len(live)):
        for b_ in range(a_ + 1, len(live)):
            i, j = live[a_], live[b_]
            pooled = np.sqrt(0.5 * (sigmas[i] ** 2 + sigmas[j] ** 2))
            sep = float(np.sqrt(np.sum(((centers[i] - centers[j]) / pooled) ** 2)))
            if sep < min_sep:
                raise DegeneracyError(
                    f"clusters {i} and {j} are {sep:.2f} sigma apart, not resolvable")


def _binned_gauss(edges, mu, sigma):
    z = (edges[None, :] - mu[:, None]) / (sigma[:, None] * math.sqrt(2.0))
    cdf = 0.5 * special.erfc(-z)
    return np.diff(cdf, axis=1)   # (n_states, n_bins)


def _deviance_residuals(obs, model):
    model = np.maximum(model, 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(obs > 0, obs * np.log(obs / model), 0.0)
    d = 2.0 * (model - obs + term)
    return np.sign(obs - model) * np.sqrt(np.maximum(d, 0.0))


def fit_clusters(trace, n_states=2, bins="fd", max_iter=200, reference_centers=None):
    """Fit ``n_states`` Gaussian clusters to one trace of I/Q records.

    The I and Q projection histograms are fitted simultaneously by Poisson
    maximum likelihood (deviance residuals) with amplitudes shared between
    projections and independent widths per axis. Initial centres are the
    reference positions when given, else the highest peaks of a smoothed 2D
    histogram (topped up by k-means when a cluster shows only as a shoulder).
    Raises :class:`DegeneracyError` when the fitted ``g``/``e`` clusters are
    not resolved.

    States are labelled by ``reference_centers`` (``{"g": (I, Q), ...}``,
    nearest match) when given; otherwise the most populated cluster is ``e``,
    the next ``g``, then ``f`` and ``h``.
    """
    records = getattr(trace, "records", trace)
    xy = np.asarray(records, dtype=np.float64)
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise DomainError("records must have shape (n, 2)")
    if len(xy) < MIN_RECORDS:
        raise DomainError(f"need at least {MIN_RECORDS} records, got {len(xy)}")
    if not 2 <= n_states <= 4:
        raise DomainError("n_states must be between 2 and 4")

    x, y = xy[:, 0], xy[:, 1]
    ex = np.histogram_bin_edges(x, bins=bins)
    ey = np.histogram_bin_edges(y, bins=bins)
    hx, _ = np.histogram(x, ex)
    hy, _ = np.histogram(y, ey)
    obs = np.concatenate([hx, hy]).astype(float)
    k = n_states

    def unpack(p):
        return (np.exp(p[:k]), p[k:2 * k], np.exp(p[2 * k:3 * k]), p[3 * k:4 * k], np.exp(p[4 * k:]))

    def resid(p):
        a, mi, si, mq, sq = unpack(p)
        model = np.concatenate([a @ _binned_gauss(ex, mi, si), a @ _binned_gauss(ey, mq, sq)])
        return _deviance_residuals(obs, model)

    lb = np.full(5 * k, -np.inf)
    ub = np.full(5 * k, np.inf)
    # an empty state settles at a tenth of a count instead of chasing zero
    lb[:k] = math.log(0.1)
    # a binned fit cannot resolve a cluster narrower than one bin
    for sl, e_, sd in ((slice(2 * k, 3 * k), ex, np.std(x)), (slice(4 * k, 5 * k), ey, np.std(y))):
        lb[sl], ub[sl] = math.log(e_[1] - e_[0]), math.log(2.0 * sd)
    if _uses_reference(reference_centers, n_states):
        # a reference pins each centre to its neighbourhood, so an empty
        # state cannot wander onto a populated one
        ref = _initial_centers(xy, n_states, reference_centers)[0]
        dmin = np.sqrt(min(((ref[i] - ref[j]) ** 2).sum()
                           for i in range(k) for j in range(i + 1, k)))
        rad = 0.5 * dmin
        lb[k:2 * k], ub[k:2 * k] = ref[:, 0] - rad, ref[:, 0] + rad
        lb[3 * k:4 * k], ub[3 * k:4 * k] = ref[:, 1] - rad, ref[:, 1] + rad

    res, err, resolved = None, None, False
    for modes in _initial_centers(xy, n_states, reference_centers):
        # initial widths and amplitudes from nearest-centre assignment
        d2 = ((xy[:, None, :] - modes[None, :, :]) ** 2).sum(axis=2)
        lab = np.argmin(d2, axis=1)
        amp0 = np.array([max(np.count_nonzero(lab == i), 1) for i in range(k)], float)
        sig0 = np.array([np.std(xy[lab == i], axis=0) if np.count_nonzero(lab == i) > 2
                         else [np.std(x), np.std(y)] for i in range(k)])
        sig0 = np.maximum(sig0, 1e-3 * np.array([np.std(x), np.std(y)]))
        # parameters: log amplitudes, mu_I, log sig_I, mu_Q, log sig_Q
        p0 = np.concatenate([np.log(amp0), modes[:, 0], np.log(sig0[:, 0]),
                             modes[:, 1], np.log(sig0[:, 1])])
        p0 = np.clip(p0, lb, ub)
        r = None
        for method in ("trf", "dogbox"):
            try:
                r = optimize.least_squares(resid, p0, method=method, max_nfev=max_iter * len(p0),
                                           x_scale=1.0, bounds=(lb, ub))
            except (ValueError, FloatingPointError) as exc:
                err, r = FitError(f"cluster fit failed: {exc}"), None
                continue
            if r.success and np.all(np.isfinite(r.x)):
                break
            err, r = FitError(f"cluster fit did not converge: {r.message}", residuals=r.fun), None
        if r is None:
            continue
        a_, mi_, si_, mq_, sq_ = unpack(r.x)
        try:
            _check_resolved(np.column_stack([mi_, mq_]), np.column_stack([si_, sq_]),
                            a_ / a_.sum())
            ok = True
        except DegeneracyError:
            ok = False
        # a resolved fit beats any unresolved one, then lower cost wins
        if res is None or (ok, -r.cost) > (resolved, -res.cost):
            res, resolved = r, ok
    if res is None:
        raise err

    a, mi, si, mq, sq = unpack(res.x)
    # population errors from the Fisher information on the log amplitudes
    J = res.jac
    try:
        cov = np.linalg.pinv(J.T @ J)
    except np.linalg.LinAlgError:
        cov = np.full((len(res.x), len(res.x)), np.nan)
    cov_la = cov[:k, :k]
    pops = a / a.sum()
    # dP_i / d log a_j = P_i (delta_ij - P_j)
    G = np.diag(pops) - np.outer(pops, pops)
    pop_err = np.sqrt(np.maximum(np.diag(G @ cov_la @ G.T), 0.0))

    centers = np.column_stack([mi, mq])
    sigmas = np.column_stack([si, sq])
    _check_resolved(centers, sigmas, pops)
    labels = _label_states(centers, a, reference_centers)
    order = [labels.index(s_) for s_ in STATE_ORDER if s_ in labels]
    chi2 = float(np.sum(res.fun ** 2))
    dof = int(np.count_nonzero(obs > 0) - len(res.x))
    return ClusterModel(
        states=tuple(labels[i] for i in order),
        centers=centers[order], sigmas=sigmas[order], amplitudes=a[order],
        population_errors=pop_err[order], chi2=chi2, dof=dof)


def _label_states(centers, amplitudes, reference):
    k = len(centers)
    if reference:
        names = [s for s in STATE_ORDER if s in reference][:k]
        ref = np.array([reference[s][:2] for s in names], dtype=float)
        labels = [None] * k
        # greedy nearest matching, closest pairs first
        d = ((centers[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
        used_c, used_r = set(), set()
        for flat in np.argsort(d, axis=None):
            c, r = divmod(int(flat), len(names))
            if c in used_c or r in used_r:
                continue
            labels[c] = names[r]
            used_c.add(c)
            used_r.add(r)
        spare = [s for s in STATE_ORDER if s not in labels]
        return [lab if lab is not None else spare.pop(0) for lab in labels]
    rank = list(np.argsort(amplitudes)[::-1])
    labels = [None] * k
    for name, idx in zip(("e", "g", "f", "h"), rank):
        labels[idx] = name
    return labels


# ---------------------------------------------------------------- screening

def quality_filter(model: ClusterModel, max_leak=MAX_LEAK):
    """True when the ``f`` + ``h`` population is at most ``max_leak``."""
    return model.population("f") + model.population("h") <= max_leak


# ---------------------------------------------------------------- threshold

def rotation_angle(model: ClusterModel):
    g, e = model.center("g"), model.center("e")
    d = e - g
    if np.hypot(*d) == 0.0:
        raise DegeneracyError("g and e centres coincide")
    return -math.atan2(d[1], d[0])


def rotate(records, theta):
    """Rotate I/Q records by ``theta`` about the origin."""
    xy = np.asarray(records, dtype=np.float64)
    c, s = math.cos(theta), math.sin(theta)
    return np.column_stack([c * xy[:, 0] - s * xy[:, 1], s * xy[:, 0] + c * xy[:, 1]])


def optimal_threshold(mu_g, sigma_g, mu_e, sigma_e, n_candidates=N_THRESHOLDS):
    """Scan thresholds strictly between the centres (``mu_g < mu_e``).

    Returns ``(t, misid_g, misid_e, step)`` for the candidate minimising
    ``misid_g + misid_e``, with misid fractions from Gaussian tails.
    """
    if not mu_g < mu_e:
        raise DegeneracyError("g centre must lie below e centre on the rotated axis")
    cand = np.linspace(mu_g, mu_e, n_candidates + 2)[1:-1]
    mg = 0.5 * special.erfc((cand - mu_g) / (sigma_g * math.sqrt(2.0)))
    me = 0.5 * special.erfc((mu_e - cand) / (sigma_e * math.sqrt(2.0)))
    i = int(np.argmin(mg + me))
    return float(cand[i]), float(mg[i]), float(me[i]), float(cand[1] - cand[0])


def _fit_rotated_axis(u, model, theta):
    """1D fit of all clusters on the rotated I axis; returns (mu, sigma) per state."""
    c, s = math.cos(theta), math.sin(theta)
    mu0 = model.centers[:, 0] * c - model.centers[:, 1] * s
    # width of an axis-aligned Gaussian projected onto the rotated axis
    sg0 = np.sqrt((model.sigmas[:, 0] * c) ** 2 + (model.sigmas[:, 1] * s) ** 2)
    a0 = np.asarray(model.amplitudes, float) * len(u) / np.sum(model.amplitudes)
    edges = np.histogram_bin_edges(u, bins="fd")
    obs, _ = np.histogram(u, edges)
    obs = obs.astype(float)
    k = len(mu0)
    p0 = np.concatenate([np.log(a0), mu0, np.log(sg0)])

    def resid(p):
        # clip trial steps so exp cannot overflow
        a, mu, sg = np.exp(np.minimum(p[:k], 700)), p[k:2 * k], np.exp(np.clip(p[2 * k:], -50, 50))
        return _deviance_residuals(obs, a @ _binned_gauss(edges, mu, sg))

    res = optimize.least_squares(resid, p0, method="trf", x_scale="jac", max_nfev=200 * len(p0))
    if not res.success:
        raise FitError(f"rotated-axis fit did not converge: {res.message}", residuals=res.fun)
    return res.x[k:2 * k], np.exp(res.x[2 * k:])


def calibrate_threshold(trace, model: ClusterModel, n_candidates=N_THRESHOLDS):
    """Return ``model`` with rotation angle, threshold and misid fractions set."""
    records = getattr(trace, "records", trace)
    theta = rotation_angle(model)
    u = rotate(records, theta)[:, 0]
    mu, sg = _fit_rotated_axis(u, model, theta)
    ig, ie = model.states.index("g"), model.states.index("e")
    if np.isclose(mu[ig], mu[ie]):
        raise DegeneracyError("g and e coincide on the rotated axis")
    t, mg, me, _ = optimal_threshold(mu[ig], sg[ig], mu[ie], sg[ie], n_candidates)
    return replace(model, theta=theta, threshold=t, misid_g=mg, misid_e=me)


def binarize(trace, model: ClusterModel, quality=True):
    """Apply a calibrated model: 0 where rotated I < threshold."""
    if not np.isfinite(model.threshold):
        raise DomainError("model has no calibrated threshold")
    records = getattr(trace, "records", trace)
    xy = np.asarray(records, dtype=np.float64)
    c, s = math.cos(model.theta), math.sin(model.theta)
    u = c * xy[:, 0] - s * xy[:, 1]
    bits = (u >= model.threshold).astype(np.uint8)
    return BinaryTrace(bits, getattr(trace, "trace_index", 0),
                       getattr(trace, "sampling_period", float("nan")), quality, model)


def rotate_and_threshold(trace, model: ClusterModel, n_candidates=N_THRESHOLDS):
    """Calibrate rotation/threshold on ``trace`` and binarize it."""
    return binarize(trace, calibrate_threshold(trace, model, n_candidates))


def discriminate_trace(trace, n_states=3, max_leak=MAX_LEAK, reference_centers=None):
    """Fit, screen and binarize one trace; rejected traces keep ``quality=False``."""
    model = fit_clusters(trace, n_states, reference_centers=reference_centers)
    ok = quality_filter(model, max_leak) if n_states >= 3 else True
    binary = rotate_and_threshold(trace, model)
    binary.quality = ok
    return binary
