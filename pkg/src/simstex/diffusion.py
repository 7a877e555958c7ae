"""Variance-preserving noise schedule and DDIM stepping.

The retention schedule is the scaled-linear convention: per-step betas are
linear in sqrt-space from 0.00085 to 0.012 over 1000 steps, with
alpha_bar[t] the running product of (1 - beta).  Sampling runs on a short
subsequence of steps, uniformly spaced inside a truncated time range; the
lower truncation bound is the final target of the last step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import GuidanceError, ScheduleError

DEFAULT_T = 1000
DEFAULT_SUBSTEPS = 50
DEFAULT_T_MIN = 300
DEFAULT_T_MAX = 1000
BETA_START = 0.00085
BETA_END = 0.012


@dataclass(frozen=True)
class GuidanceConfig:
    w_joint: float = 5.0
    w_text: float = 0.0

    def __post_init__(self):
        if self.w_joint < 0 or self.w_text < 0:
            raise GuidanceError("guidance weights must be non-negative")


class NoiseSchedule:
    """alpha_bar over discrete times plus the truncated sampling subsequence.

    `times` holds S+1 integers descending from t_max to t_min; the sampler
    queries the model at times[:-1] and the last step lands on times[-1].
    Pair index i runs from S (noisiest) down to 1.
    """

    def __init__(self, alpha_bar: np.ndarray, times: np.ndarray, params: dict):
        self.alpha_bar_all = alpha_bar  # index 0 = clean data, length T+1
        self.times = times
        self.params = params

    @property
    def num_steps(self) -> int:
        return len(self.times) - 1

    @property
    def substeps(self) -> np.ndarray:
        return self.times[:-1]

    @property
    def t_final(self) -> int:
        return int(self.times[-1])

    def pair(self, i: int):
        """(t_i, t_{i-1}) for pair index i in [1, S]."""
        s = self.num_steps
        if not 1 <= i <= s:
            raise ScheduleError(f"pair index {i} outside [1, {s}]")
        k = s - i
        return int(self.times[k]), int(self.times[k + 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bar_all[int(t)])

    def start_index_for(self, t: float) -> int:
        """Largest pair index whose query time is <= t (used to resume
        sampling from a partially noised state)."""
        s = self.num_steps
        for i in range(s, 0, -1):
            if self.pair(i)[0] <= t:
                return i
        raise ScheduleError(f"no substep at or below t={t}")

    def to_json(self) -> str:
        return json.dumps(self.params)

    @staticmethod
    def from_json(text: str) -> "NoiseSchedule":
        return make_schedule(**json.loads(text))


def make_schedule(T: int = DEFAULT_T, S: int = DEFAULT_SUBSTEPS,
                  t_min: int = DEFAULT_T_MIN, t_max: int = DEFAULT_T_MAX,
                  beta_start: float = BETA_START,
                  beta_end: float = BETA_END) -> NoiseSchedule:
    if not (T >= S >= 1):
        raise ScheduleError("need T >= S >= 1")
    if not (0 <= t_min < t_max <= T):
        raise ScheduleError("need 0 <= t_min < t_max <= T")
    sqrt_beta = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T)
    betas = sqrt_beta ** 2
    alpha_bar = np.empty(T + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - betas)
    # uniform spacing, floored; descending from t_max so the noisy end is exact
    raw = t_min + (t_max - t_min) * np.arange(S, -1, -1, dtype=np.float64) / S
    times = np.floor(raw).astype(np.int64)
    if np.any(np.diff(times) >= 0):
        raise ScheduleError("substeps collide; widen the range or lower S")
    params = {"T": T, "S": S, "t_min": t_min, "t_max": t_max,
              "beta_start": beta_start, "beta_end": beta_end}
    return NoiseSchedule(alpha_bar, times, params)


def ddim_sigma(sched: NoiseSchedule, i: int, eta: float) -> float:
    """Posterior noise scale for pair i; eta=1 recovers the ancestral scale."""
    t_hi, t_lo = sched.pair(i)
    a_hi = sched.alpha_bar(t_hi)
    a_lo = sched.alpha_bar(t_lo)
    return float(eta * math.sqrt((1.0 - a_lo) / (1.0 - a_hi))
                 * math.sqrt(1.0 - a_hi / a_lo))


def ddim_step(x_i: np.ndarray, eps_pred: np.ndarray, sched: NoiseSchedule,
              i: int, eta: float, tau: float,
              rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One reverse step: move x from times[i] down to times[i-1].

    tau in [0, 1] scales only the stochastic term, shrinking the posterior
    variance without shifting its mean.
    """
    x_i = np.asarray(x_i)
    eps_pred = np.asarray(eps_pred)
    if x_i.shape != eps_pred.shape:
        raise ScheduleError("x and eps shapes differ")
    t_hi, t_lo = sched.pair(i)
    a_hi = sched.alpha_bar(t_hi)
    a_lo = sched.alpha_bar(t_lo)
    sigma = ddim_sigma(sched, i, eta)
    resid = 1.0 - a_lo - sigma * sigma
    if resid < -1e-12:
        raise ScheduleError("sigma exceeds the target noise level; lower eta")
    resid = max(resid, 0.0)
    # sqrt(a_lo) * x0_hat + sqrt(resid) * eps, folded into two coefficients
    c_x = math.sqrt(a_lo / a_hi)
    c_e = math.sqrt(resid) - c_x * math.sqrt(1.0 - a_hi)
    out = c_x * x_i + c_e * eps_pred
    if tau != 0.0 and sigma != 0.0:
        if rng is None:
            raise ScheduleError("stochastic step needs an rng")
        noise = rng.standard_normal(x_i.shape, dtype=np.float32)
        out = out + (tau * sigma) * noise
    return out.astype(np.float32, copy=False)


def predict_x0(x_i: np.ndarray, eps_pred: np.ndarray, sched: NoiseSchedule,
               i: int) -> np.ndarray:
    """Clean-sample estimate implied by an epsilon prediction at pair i."""
    x_i = np.asarray(x_i)
    eps_pred = np.asarray(eps_pred)
    if x_i.shape != eps_pred.shape:
        raise ScheduleError("x and eps shapes differ")
    t_hi, _ = sched.pair(i)
    a_hi = sched.alpha_bar(t_hi)
    out = (x_i - math.sqrt(1.0 - a_hi) * eps_pred) / math.sqrt(a_hi)
    return out.astype(np.float32, copy=False)


def cfg_combine(eps_uncond: np.ndarray, eps_joint: np.ndarray,
                eps_text: Optional[np.ndarray],
                cfg: GuidanceConfig) -> np.ndarray:
    """Classifier-free guidance over depth+text, plus an optional text-only term.

    The affine combination (1 - w_joint - w_text)*uncond + w_joint*joint
    + w_text*text has weights summing to one, so identical inputs pass
    through unchanged.
    """
    if cfg.w_text > 0.0 and eps_text is None:
        raise GuidanceError("w_text > 0 requires a text-only prediction")
    if cfg.w_text > 0.0:
        out = ((1.0 - cfg.w_joint - cfg.w_text) * eps_uncond
               + cfg.w_joint * eps_joint + cfg.w_text * eps_text)
    else:
        out = (1.0 - cfg.w_joint) * eps_uncond + cfg.w_joint * eps_joint
    return np.asarray(out, dtype=np.float32)


def stochastic_encode(x0: np.ndarray, sched: NoiseSchedule, t: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Forward-noise clean content to time t in closed form."""
    a = sched.alpha_bar(t)
    noise = rng.standard_normal(np.shape(x0), dtype=np.float32)
    out = math.sqrt(a) * np.asarray(x0) + math.sqrt(1.0 - a) * noise
    return out.astype(np.float32, copy=False)
