"""Diffusion-process math: variance schedule, closed-form forward
sampling, the stochastic reverse step, subsequence re-indexing for
truncated inference, and the synthetic generation loop.

All tables are float64 and 1-indexed in time: entry i of an array
corresponds to step t = i+1, t runs over [1, T]. The sampling helpers
accept either ndarrays or Tensors and return the same kind; none of them
record gradients (the training loss differentiates the network output,
never the sampling path).
"""

import numpy as np

from .tensor import Tensor


class NoiseSchedule:
    """Precomputed beta / alpha-bar / sigma tables plus the original time
    index of each entry (identity for a full schedule, the selected
    subsequence indices after subsequence_schedule)."""

    def __init__(self, beta, alpha_bar, sigma, timesteps):
        self.beta = np.asarray(beta, dtype=np.float64)
        self.alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        self.sigma = np.asarray(sigma, dtype=np.float64)
        self.timesteps = np.asarray(timesteps, dtype=np.int64)
        n = len(self.beta)
        if not (len(self.alpha_bar) == len(self.sigma) == len(self.timesteps) == n):
            raise ValueError("NoiseSchedule: table lengths disagree")
        self.T = n

    def _t_index(self, t, name):
        if not 1 <= t <= self.T:
            raise ValueError("%s: t=%d outside [1, %d]" % (name, t, self.T))
        return t - 1


def _sigma_table(beta, alpha_bar):
    prev = np.concatenate(([1.0], alpha_bar[:-1]))
    denom = 1.0 - alpha_bar
    var = np.where(denom > 0.0, (1.0 - prev) / np.where(denom > 0, denom, 1.0)
                   * beta, 0.0)
    return np.sqrt(var)


def make_schedule(T_train, beta_start=1e-6, beta_end=1e-2):
    """Linear beta schedule from beta_start (t=1) to beta_end (t=T_train)."""
    if T_train < 1:
        raise ValueError("make_schedule: T_train must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("make_schedule: need 0 < beta_start <= beta_end < 1, "
                         "got %g, %g" % (beta_start, beta_end))
    beta = np.linspace(beta_start, beta_end, T_train, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(beta, alpha_bar, _sigma_table(beta, alpha_bar),
                         np.arange(1, T_train + 1))


def _unwrap(x):
    return (x.data, True) if isinstance(x, Tensor) else (np.asarray(x), False)


def _rewrap(data, was_tensor):
    return Tensor(data) if was_tensor else data


def forward_sample(x0, t, eps, sched):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    i = sched._t_index(t, "forward_sample")
    x0d, wrapped = _unwrap(x0)
    epsd, _ = _unwrap(eps)
    if x0d.shape != epsd.shape:
        raise ValueError("forward_sample: x0 %s and eps %s differ"
                         % (x0d.shape, epsd.shape))
    ab = sched.alpha_bar[i]
    out = float(np.sqrt(ab)) * x0d + float(np.sqrt(1.0 - ab)) * epsd
    return _rewrap(out, wrapped)


def posterior_mean(x_t, eps_hat, t, sched):
    """(x_t - beta_t/sqrt(1-alpha_bar_t) * eps_hat) / sqrt(1-beta_t)."""
    if t < 1:
        raise ValueError("posterior_mean: t must be >= 1, got %d" % t)
    i = sched._t_index(t, "posterior_mean")
    xd, wrapped = _unwrap(x_t)
    ed, _ = _unwrap(eps_hat)
    if xd.shape != ed.shape:
        raise ValueError("posterior_mean: x_t %s and eps_hat %s differ"
                         % (xd.shape, ed.shape))
    beta = sched.beta[i]
    rem = 1.0 - sched.alpha_bar[i]
    # degenerate beta=0 entries have no noise to remove
    c2 = beta / np.sqrt(rem) if rem > 0.0 else 0.0
    out = (xd - float(c2) * ed) * float(1.0 / np.sqrt(1.0 - beta))
    return _rewrap(out, wrapped)


def reverse_step(x_t, eps_hat, t, z, sched):
    """One stochastic reverse transition: posterior_mean + sigma_t * z."""
    i = sched._t_index(t, "reverse_step")
    xd, wrapped = _unwrap(x_t)
    zd, _ = _unwrap(z)
    if zd.shape != xd.shape:
        raise ValueError("reverse_step: z %s and x_t %s differ"
                         % (zd.shape, xd.shape))
    mean, _ = _unwrap(posterior_mean(x_t, eps_hat, t, sched))
    out = mean + float(sched.sigma[i]) * zd
    return _rewrap(out, wrapped)


def subsequence_schedule(sched, steps, T):
    """Re-index the schedule onto `steps` evenly spaced times in [1, T]
    (endpoint always included), rebuilding effective betas so the
    marginal alpha-bar at each selected time is preserved exactly."""
    if not 1 <= steps <= T <= sched.T:
        raise ValueError("subsequence_schedule: need 1 <= steps <= T <= %d, "
                         "got steps=%d T=%d" % (sched.T, steps, T))
    picks = np.round(T * np.arange(1, steps + 1) / steps).astype(np.int64)
    ab = sched.alpha_bar[picks - 1]
    prev = np.concatenate(([1.0], ab[:-1]))
    beta = 1.0 - ab / prev
    return NoiseSchedule(beta, ab, _sigma_table(beta, ab),
                         sched.timesteps[picks - 1])


def generate(m, f, score, sched, T=200, steps=80, seed=0, trajectory=None):
    """Synthesize a deformed image by truncated diffusion.

    Perturb the moving image with the closed-form forward step to x_T,
    then run `steps` reverse transitions conditioned on (m, f) down to
    x_0, clamped to [-1, 1]. `score(m, f, x_t, t)` evaluates the noise
    predictor at original time index t. Deterministic for a fixed seed.
    Passing a list as `trajectory` collects x_T and every intermediate
    state (the final entry is pre-clamp x_0).
    """
    md, _ = _unwrap(m)
    fd, _ = _unwrap(f)
    if md.shape != fd.shape:
        raise ValueError("generate: m %s and f %s differ" % (md.shape, fd.shape))
    sub = subsequence_schedule(sched, steps, T)
    rng = np.random.default_rng(seed)
    ab_T = sub.alpha_bar[-1]
    eps = rng.standard_normal(md.shape).astype(md.dtype)
    x = float(np.sqrt(ab_T)) * md + float(np.sqrt(1.0 - ab_T)) * eps
    if trajectory is not None:
        trajectory.append(x.copy())
    for i in range(sub.T, 0, -1):
        eps_hat = score(md, fd, x, int(sub.timesteps[i - 1]))
        eps_hat, _ = _unwrap(eps_hat)
        if eps_hat.shape != x.shape:
            raise ValueError("generate: score output %s does not match x %s"
                             % (eps_hat.shape, x.shape))
        if i > 1:
            z = rng.standard_normal(x.shape).astype(md.dtype)
        else:
            z = np.zeros_like(x)
        x = reverse_step(x, eps_hat, i, z, sub)
        if trajectory is not None:
            trajectory.append(x.copy())
    return np.clip(x, -1.0, 1.0)
