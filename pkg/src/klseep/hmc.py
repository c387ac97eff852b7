"""Hamiltonian Monte Carlo: leapfrog, No-U-Turn trees, and adaptation.

The target is a callable theta -> (phi, dphi/dtheta).  An infinite phi marks
an infeasible state: the trajectory branch that reached it is discarded as
divergent and the chain stays where it was, which preserves detailed balance
without any boundary reflection logic.

Trajectory length comes from the original slice-sampling No-U-Turn scheme
(binary tree doubling with the U-turn criterion); step size from Nesterov
dual averaging; the diagonal mass matrix from regularized empirical variances
over expanding warmup windows, frozen after warmup.
"""

import csv
import json

import numpy as np


class HMCConfig:
    """Run settings for one chain.

    samples is the total iteration count including warmup; inv_mass is the
    initial inverse mass diagonal (posterior-covariance scale; the prior
    covariance diagonal in the seepage studies) and defaults to ones.
    fixed_length switches NUTS off in favor of a constant number of leapfrog
    steps with a plain Metropolis accept, for controlled benchmarking.
    """

    def __init__(self, samples, warmup, step_size=1e-6, target_accept=0.8,
                 seed=0, max_depth=10, max_energy_error=1000.0, inv_mass=None,
                 window_base=25, fixed_length=None):
        if samples <= 0 or not 0 <= warmup < samples:
            raise ValueError("need 0 <= warmup < samples")
        if step_size <= 0:
            raise ValueError("step size must be positive")
        if not 0.0 < target_accept < 1.0:
            raise ValueError("target acceptance must be in (0, 1)")
        if max_depth < 0:
            raise ValueError("max tree depth must be nonnegative")
        self.samples = int(samples)
        self.warmup = int(warmup)
        self.step_size = float(step_size)
        self.target_accept = float(target_accept)
        self.seed = seed
        self.max_depth = int(max_depth)
        self.max_energy_error = float(max_energy_error)
        self.inv_mass = None if inv_mass is None else np.asarray(
            inv_mass, dtype=float
        )
        self.window_base = int(window_base)
        self.fixed_length = None if fixed_length is None else int(fixed_length)


def kinetic(p, inv_mass):
    """K(p) = 1/2 p' M^-1 p for a diagonal mass matrix."""
    return 0.5 * float(p @ (inv_mass * p))


def leapfrog(f, theta, p, grad, eps, inv_mass):
    """One velocity-Verlet step; returns (theta', p', phi', grad').

    Half-steps the momentum against the cached gradient, full-steps the
    position along M^-1 p, then half-steps the momentum on the new gradient.
    An infeasible endpoint comes back with phi' = +inf and a zero gradient.
    """
    p_half = p - (0.5 * eps) * grad
    theta_new = theta + eps * (inv_mass * p_half)
    val_new, grad_new = f(theta_new)
    p_new = p_half - (0.5 * eps) * grad_new
    return theta_new, p_new, val_new, grad_new


def metropolis_accept(rng, h_current, h_proposed):
    """Accept with probability min(1, exp(h_current - h_proposed))."""
    if not np.isfinite(h_proposed):
        return False
    log_alpha = h_current - h_proposed
    return log_alpha >= 0.0 or np.log(1.0 - rng.random()) < log_alpha


class DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance.

    Shrinks iterates toward mu = log(10 eps0); update() returns the step size
    to use next, adapted() the averaged final value.
    """

    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.reset(eps0)

    def reset(self, eps0):
        self.mu = np.log(10.0 * eps0)
        self.log_eps = np.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.m = 0

    def update(self, accept_stat):
        self.m += 1
        frac = 1.0 / (self.m + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (
            self.target - accept_stat
        )
        self.log_eps = self.mu - np.sqrt(self.m) / self.gamma * self.h_bar
        eta = self.m ** (-self.kappa)
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar
        return np.exp(self.log_eps)

    def adapted(self):
        return np.exp(self.log_eps_bar)


def warmup_windows(warmup, base=25):
    """Stan-style warmup split: fast init, expanding slow windows, fast term.

    15% / 75% / 10% of the budget; slow windows double from `base`, the last
    absorbing any remainder too small to double again.  Returns a dict with
    "init", "windows" (list of slow-window lengths), and "term".
    """
    if warmup <= 0:
        return {"init": 0, "windows": [], "term": 0}
    init = int(round(0.15 * warmup))
    term = int(round(0.10 * warmup))
    slow = warmup - init - term
    if slow <= 0:
        return {"init": warmup - term, "windows": [], "term": term}
    windows = []
    w = base
    remaining = slow
    # emit a window only while a doubled successor would still fit after it;
    # otherwise the current window runs to the end of the slow phase
    while remaining >= 3 * w:
        windows.append(w)
        remaining -= w
        w *= 2
    windows.append(remaining)
    return {"init": init, "windows": windows, "term": term}


class _Welford:
    """Streaming mean/variance accumulator for the mass-matrix windows."""

    def __init__(self, dim):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x):
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def variance(self):
        if self.n < 2:
            return np.ones_like(self.m2)
        return self.m2 / (self.n - 1)

    def regularized(self):
        """Shrunk variance estimate used as the new inverse mass diagonal."""
        n = self.n
        return (n / (n + 5.0)) * self.variance() + 1e-3 * (5.0 / (n + 5.0))


class NutsResult:
    def __init__(self, theta, val, grad, accept_stat, depth, n_leapfrog,
                 divergent, energy):
        self.theta = theta
        self.val = val
        self.grad = grad
        self.accept_stat = accept_stat
        self.depth = depth
        self.n_leapfrog = n_leapfrog
        self.divergent = divergent
        self.energy = energy


def _uturn(d_theta, p_minus, p_plus, inv_mass):
    """False when either end is moving back toward the other."""
    return (
        d_theta @ (inv_mass * p_minus) >= 0.0
        and d_theta @ (inv_mass * p_plus) >= 0.0
    )


def nuts_step(rng, f, theta, val, grad, eps, inv_mass, max_depth=10,
              max_energy_error=1000.0):
    """One No-U-Turn transition from (theta, val, grad).

    Original slice formulation: draw u under the current Hamiltonian, double
    the trajectory forward or backward until a U-turn, the depth cap, or a
    divergence (energy error beyond max_energy_error, including infeasible
    states with phi = +inf), sampling uniformly among retained states.
    """
    M = theta.size
    p0 = rng.standard_normal(M) / np.sqrt(inv_mass)
    h0 = val + kinetic(p0, inv_mass)
    log_u = np.log(1.0 - rng.random()) + (-h0)

    state = {
        "minus": (theta, p0, grad),
        "plus": (theta, p0, grad),
        "sample": (theta, val, grad),
        "n": 1,
        "n_leapfrog": 0,
        "sum_alpha": 0.0,
        "n_alpha": 0,
        "divergent": False,
    }

    def build(th, p, gr, v, j):
        """Recursive doubling; returns (minus, plus, sample, n, keep_going)."""
        if j == 0:
            th1, p1, val1, gr1 = leapfrog(f, th, p, gr, v * eps, inv_mass)
            state["n_leapfrog"] += 1
            h1 = val1 + kinetic(p1, inv_mass) if np.isfinite(val1) else np.inf
            n1 = 1 if log_u <= -h1 else 0
            keep = log_u < max_energy_error - h1
            if not keep:
                state["divergent"] = True
            alpha = np.exp(min(0.0, h0 - h1)) if np.isfinite(h1) else 0.0
            state["sum_alpha"] += alpha
            state["n_alpha"] += 1
            edge = (th1, p1, gr1)
            return edge, edge, (th1, val1, gr1), n1, keep
        minus, plus, samp, n1, keep = build(th, p, gr, v, j - 1)
        if not keep:
            return minus, plus, samp, n1, False
        if v == -1:
            minus, _, samp2, n2, keep = build(*minus, v, j - 1)
        else:
            _, plus, samp2, n2, keep = build(*plus, v, j - 1)
        if n1 + n2 > 0 and rng.random() < n2 / (n1 + n2):
            samp = samp2
        keep = keep and _uturn(plus[0] - minus[0], minus[1], plus[1], inv_mass)
        return minus, plus, samp, n1 + n2, keep

    depth = 0
    keep_going = True
    # a zero depth cap still performs one doubling: the degenerate tree is a
    # single leapfrog step with slice acceptance (= Metropolis)
    while keep_going:
        v = -1 if rng.random() < 0.5 else 1
        if v == -1:
            minus, _, samp, n_new, keep = build(*state["minus"], v, depth)
            state["minus"] = minus
        else:
            _, plus, samp, n_new, keep = build(*state["plus"], v, depth)
            state["plus"] = plus
        if keep and n_new > 0 and rng.random() < min(1.0, n_new / state["n"]):
            state["sample"] = samp
        state["n"] += n_new
        depth += 1
        keep_going = (
            keep
            and depth < max(1, max_depth)
            and _uturn(
                state["plus"][0] - state["minus"][0],
                state["minus"][1],
                state["plus"][1],
                inv_mass,
            )
        )

    th, vl, gr = state["sample"]
    accept = state["sum_alpha"] / max(state["n_alpha"], 1)
    return NutsResult(th, vl, gr, accept, depth, state["n_leapfrog"],
                      state["divergent"], h0)


def fixed_step(rng, f, theta, val, grad, eps, inv_mass, n_steps):
    """Classic HMC transition: n_steps leapfrogs then a Metropolis accept."""
    M = theta.size
    p0 = rng.standard_normal(M) / np.sqrt(inv_mass)
    h0 = val + kinetic(p0, inv_mass)
    th, p, vl, gr = theta, p0, val, grad
    divergent = False
    for _ in range(n_steps):
        th, p, vl, gr = leapfrog(f, th, p, gr, eps, inv_mass)
        if not np.isfinite(vl):
            divergent = True
            break
    h1 = vl + kinetic(p, inv_mass) if not divergent else np.inf
    alpha = np.exp(min(0.0, h0 - h1)) if np.isfinite(h1) else 0.0
    if metropolis_accept(rng, h0, h1):
        out = (th, vl, gr)
    else:
        out = (theta, val, grad)
    return NutsResult(out[0], out[1], out[2], alpha, 0, n_steps, divergent, h0)


class ChainResult:
    """Dense per-iteration record of one chain plus the adapted settings."""

    def __init__(self, theta, phi, accept_stat, depth, n_leapfrog, divergent,
                 phase, step_size, inv_mass, adaptation):
        self.theta = theta
        self.phi = phi
        self.accept_stat = accept_stat
        self.depth = depth
        self.n_leapfrog = n_leapfrog
        self.divergent = divergent
        self.phase = phase
        self.step_size = step_size
        self.inv_mass = inv_mass
        self.adaptation = adaptation

    @property
    def samples(self):
        """Post-warmup draws, (n_kept, M)."""
        return self.theta[self.phase == 1]


def run_chain(f, theta0, config, rng=None):
    """Sample one chain; f maps theta to (phi, grad).

    Warmup adapts the step size throughout and the diagonal inverse mass over
    expanding middle windows (initialized from config.inv_mass); both freeze
    at the end of warmup.  Iterations with phase 0 are warmup, 1 sampling.
    """
    theta = np.array(theta0, dtype=float)
    M = theta.size
    if rng is None:
        rng = np.random.default_rng(config.seed)
    val, grad = f(theta)
    if not np.isfinite(val):
        raise ValueError("chain must start at a feasible point (phi finite)")

    inv_mass = (
        np.ones(M) if config.inv_mass is None
        else np.broadcast_to(config.inv_mass, (M,)).astype(float)
    )
    inv_mass_init = inv_mass.copy()
    da = DualAveraging(config.step_size, config.target_accept)
    eps = config.step_size
    sched = warmup_windows(config.warmup, config.window_base)
    # iteration indices at which a slow window closes and the mass updates
    closes = []
    edge = sched["init"]
    for w in sched["windows"]:
        edge += w
        closes.append(edge)
    slow_lo = sched["init"]
    slow_hi = config.warmup - sched["term"]
    acc = _Welford(M)

    n = config.samples
    out_theta = np.empty((n, M))
    out_phi = np.empty(n)
    out_acc = np.empty(n)
    out_depth = np.empty(n, dtype=int)
    out_leap = np.empty(n, dtype=int)
    out_div = np.zeros(n, dtype=bool)
    out_phase = np.zeros(n, dtype=int)

    for it in range(n):
        warm = it < config.warmup
        if config.fixed_length is not None:
            res = fixed_step(rng, f, theta, val, grad, eps, inv_mass,
                             config.fixed_length)
        else:
            res = nuts_step(rng, f, theta, val, grad, eps, inv_mass,
                            config.max_depth, config.max_energy_error)
        theta, val, grad = res.theta, res.val, res.grad
        out_theta[it] = theta
        out_phi[it] = val
        out_acc[it] = res.accept_stat
        out_depth[it] = res.depth
        out_leap[it] = res.n_leapfrog
        out_div[it] = res.divergent
        out_phase[it] = 0 if warm else 1
        if warm:
            eps = da.update(res.accept_stat)
            if slow_lo <= it < slow_hi:
                acc.add(theta)
            if (it + 1) in closes and acc.n > 1:
                inv_mass = acc.regularized()
                acc = _Welford(M)
                da.reset(da.adapted())
                eps = np.exp(da.log_eps)
            if it + 1 == config.warmup:
                eps = da.adapted()

    adaptation = {
        "step_size": float(eps),
        "inv_mass": inv_mass.tolist(),
        "inv_mass_init": inv_mass_init.tolist(),
        "schedule": sched,
        "seed": config.seed if np.isscalar(config.seed) else str(config.seed),
        "warmup": config.warmup,
        "samples": config.samples,
        "target_accept": config.target_accept,
    }
    return ChainResult(out_theta, out_phi, out_acc, out_depth, out_leap,
                       out_div, out_phase, float(eps), inv_mass, adaptation)


def run_chains(f, starts, config):
    """Serial chains with independent spawned RNG streams.

    Each chain gets its own child of SeedSequence(config.seed), so results
    do not depend on execution order and are reproducible run to run.
    """
    starts = [np.asarray(s, dtype=float) for s in starts]
    seeds = np.random.SeedSequence(config.seed).spawn(len(starts))
    out = []
    for s, child in zip(starts, seeds):
        out.append(run_chain(f, s, config, rng=np.random.default_rng(child)))
    return out


def save_chain_csv(result, path):
    """One row per iteration: theta components, phi, sampler statistics."""
    M = result.theta.shape[1]
    cols = [f"theta_{i}" for i in range(M)] + [
        "phi", "accept_stat", "depth", "n_leapfrog", "divergent", "phase",
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for i in range(result.theta.shape[0]):
            row = [f"{v:.17g}" for v in result.theta[i]]
            row += [
                f"{result.phi[i]:.17g}",
                f"{result.accept_stat[i]:.17g}",
                str(result.depth[i]),
                str(result.n_leapfrog[i]),
                str(int(result.divergent[i])),
                str(result.phase[i]),
            ]
            writer.writerow(row)


def load_chain_csv(path):
    """Read back a saved chain as a dict of arrays keyed by column name."""
    with open(path) as fh:
        reader = csv.reader(fh)
        cols = next(reader)
        rows = np.array([[float(v) for v in row] for row in reader])
    return {c: rows[:, j] for j, c in enumerate(cols)}


def save_adaptation_json(result, path):
    blob = dict(result.adaptation)
    blob["divergences"] = int(result.divergent[result.phase == 1].sum())
    blob["mean_accept"] = float(result.accept_stat[result.phase == 1].mean())
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=1)
