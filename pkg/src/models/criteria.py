"""
Stopping criteria C1-C7 for CG and their quality ratios.

C1-C4 compare eta_alg = ||x_{k+d} - x_k||_A against tau times an error
estimator and can only be decided d iterations late; C5/C6 compare the
weighted residual with eta_RF^w (globally / in every subdomain); C7 is the
classical relative residual test. The same code path drives online
evaluation (as the solver observer) and offline replay of a frozen trace.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.models.estimators import EstimatorSample
from src.models.krylov import IterationTrace, SolverStep

logger = logging.getLogger(__name__)


class Decision(Enum):
    FIRE = 'fire'
    HOLD = 'hold'


CRITERIA = {
    'C1': 'eta_alg <= tau * eta_R',
    'C2': 'eta_alg <= tau * eta_MR',
    'C3': 'eta_alg <= tau * eta_BDM',
    'C4': 'eta_alg <= tau * eta_BDM_lb',
    'C5': '||r_k||_w <= tau * eta_RF^w',
    'C6': '||r_k^p||_w <= tau * eta_RF^{w,p} for every subdomain p',
    'C7': '||r_k|| <= tol * ||r_0||',
}

_ESTIMATOR_OF = {'C1': 'eta_R', 'C2': 'eta_MR', 'C3': 'eta_BDM', 'C4': 'eta_BDM_lb'}

DEFAULT_TAU = 1.0 / 20.0
DEFAULT_DELAY = 10


@dataclass(frozen=True)
class CriterionConfig:
    """
    One stopping criterion.

    Args:
        kind: 'C1'..'C7'
        tau: threshold fraction, 0 < tau < 1 (unused by C7)
        tol: relative residual tolerance (C7 only)
        delay: look-ahead d of eta_alg (C1-C4 only)
    """
    kind: str
    tau: float = DEFAULT_TAU
    tol: Optional[float] = None
    delay: int = DEFAULT_DELAY

    def __post_init__(self):
        if self.kind not in CRITERIA:
            raise ValueError(f"unknown criterion {self.kind!r}; expected one of {list(CRITERIA)}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.kind == 'C7' and (self.tol is None or not 0.0 < self.tol < 1.0):
            raise ValueError(f"C7 needs a tolerance in (0, 1), got {self.tol}")
        if self.delay < 1:
            raise ValueError(f"delay must be positive, got {self.delay}")

    @classmethod
    def parse(cls, token: str, tau: float = DEFAULT_TAU, delay: int = DEFAULT_DELAY) -> 'CriterionConfig':
        """'c1'..'c6' or 'c7:1e-8'."""
        name, _, arg = token.strip().partition(':')
        kind = name.upper()
        if kind == 'C7':
            if not arg:
                raise ValueError("C7 needs a tolerance, e.g. 'c7:1e-8'")
            return cls(kind, tau=tau, tol=float(arg), delay=delay)
        if arg:
            raise ValueError(f"criterion {kind} takes no argument (got {token!r})")
        return cls(kind, tau=tau, delay=delay)

    @property
    def label(self) -> str:
        return f"C7:{self.tol:g}" if self.kind == 'C7' else self.kind

    @property
    def uses_eta_alg(self) -> bool:
        return self.kind in _ESTIMATOR_OF

    @property
    def description(self) -> str:
        return CRITERIA[self.kind]


def parse_criteria(tokens: Iterable[str], tau: float = DEFAULT_TAU,
                   delay: int = DEFAULT_DELAY) -> List[CriterionConfig]:
    if isinstance(tokens, str):
        tokens = tokens.split(',')
    return [CriterionConfig.parse(tok, tau, delay) for tok in tokens if tok.strip()]


def evaluate(config: CriterionConfig, sample: EstimatorSample, eta_alg: Optional[float] = None,
             res0: Optional[float] = None) -> Decision:
    """
    Decide one criterion on one sample; missing data holds.

    Args:
        eta_alg: ||x_{k+d} - x_k||_A for C1-C4
        res0: ||r_0|| for C7
    """
    kind, tau = config.kind, config.tau
    if config.uses_eta_alg:
        estimate = getattr(sample, _ESTIMATOR_OF[kind])
        if eta_alg is None or estimate is None:
            return Decision.HOLD
        return Decision.FIRE if eta_alg <= tau * estimate else Decision.HOLD
    if kind == 'C5':
        if sample.eta_RF_w is None:
            return Decision.HOLD
        return Decision.FIRE if sample.res_w <= tau * sample.eta_RF_w else Decision.HOLD
    if kind == 'C6':
        if not sample.subdomains:
            return Decision.HOLD
        ok = all(res_p <= tau * eta_p for res_p, eta_p in sample.subdomains.values())
        return Decision.FIRE if ok else Decision.HOLD
    if res0 is None:
        return Decision.HOLD
    return Decision.FIRE if sample.res_l2 <= config.tol * res0 else Decision.HOLD


@dataclass
class CriterionVerdict:
    config: CriterionConfig
    k_star: Optional[int] = None
    quality_ratio: Optional[float] = None

    @property
    def fired(self) -> bool:
        return self.k_star is not None

    @property
    def extra_delay_iters(self) -> int:
        return self.config.delay if self.config.uses_eta_alg else 0

    @property
    def decided_at(self) -> Optional[int]:
        """Iteration at which the verdict became known."""
        if self.k_star is None:
            return None
        return self.k_star + self.extra_delay_iters


def quality_ratio(e_dis: float, e_alg: float) -> float:
    """||u - u_h^k||_E / ||u - u_h||_E with the total error from Pythagoras."""
    if e_dis <= 0.0:
        return 1.0 if e_alg <= 0.0 else float('inf')
    return float(np.sqrt(e_dis ** 2 + e_alg ** 2) / e_dis)


Sampler = Callable[[int, np.ndarray, np.ndarray], EstimatorSample]


class CriteriaEngine:
    """
    Stateful criterion evaluation, usable as the PCG observer.

    Args:
        configs: criteria evaluated together on one trace
        sampler: ``sampler(k, x_k, r_k)`` producing full estimator samples
        weights: callable giving ||r||_w for light samples between full ones
        sample_every: full estimator cadence
        stop_when_all_fired: ask the solver to stop once every verdict is known
        delay: d used for the eta_alg column of the samples
    """

    def __init__(self, configs: Sequence[CriterionConfig], sampler: Optional[Sampler] = None,
                 weights: Optional[Callable[[np.ndarray], float]] = None, sample_every: int = 1,
                 stop_when_all_fired: bool = False, delay: int = DEFAULT_DELAY):
        if sample_every < 1:
            raise ValueError("sample_every must be positive")
        self.configs = list(configs)
        self.sampler = sampler
        self.weights = weights
        self.sample_every = sample_every
        self.stop_when_all_fired = stop_when_all_fired
        self.delay = delay
        self.samples: Dict[int, EstimatorSample] = {}
        self.verdicts = [CriterionVerdict(c) for c in self.configs]
        self.res0: Optional[float] = None

    # observer protocol
    def __call__(self, step: SolverStep) -> bool:
        k, x, r = step.k, step.x, step.r
        if self.sampler is not None and k % self.sample_every == 0:
            sample = self.sampler(k, x, r)
        else:
            res_w = self.weights(r) if self.weights is not None else float(np.linalg.norm(r))
            sample = EstimatorSample(k=k, res_l2=float(np.linalg.norm(r)), res_w=res_w)
        self.push(sample, step.trace)
        return self.stop_when_all_fired and self.all_decided

    def push(self, sample: EstimatorSample, trace: IterationTrace):
        """Record the sample at iteration k and settle whatever became decidable."""
        k = sample.k
        self.samples[k] = sample
        if self.res0 is None:
            self.res0 = sample.res_l2
        j = k - self.delay
        if j in self.samples:
            self.samples[j].eta_alg = trace.algebraic_increment(j, self.delay)

        for verdict in self.verdicts:
            if verdict.fired:
                continue
            config = verdict.config
            if config.uses_eta_alg:
                j = k - config.delay
                if j not in self.samples:
                    continue
                decision = evaluate(config, self.samples[j],
                                    eta_alg=trace.algebraic_increment(j, config.delay))
                at = j
            else:
                decision = evaluate(config, sample, res0=self.res0)
                at = k
            if decision is Decision.FIRE:
                verdict.k_star = at
                logger.info("%s fired at k*=%d (%s)", config.label, at, config.description)

    @property
    def all_decided(self) -> bool:
        return all(v.fired for v in self.verdicts)

    def finalize(self, err_A: Sequence[float], e_dis: float) -> List[CriterionVerdict]:
        """Attach quality ratios from the algebraic-error column and ||u - u_h||_E."""
        for verdict in self.verdicts:
            if verdict.fired and verdict.k_star < len(err_A):
                verdict.quality_ratio = quality_ratio(e_dis, err_A[verdict.k_star])
            else:
                verdict.quality_ratio = None
        return self.verdicts

    def sample_frame(self) -> pd.DataFrame:
        rows = [self.samples[k].as_row() for k in sorted(self.samples)]
        return pd.DataFrame(rows)


def replay(configs: Sequence[CriterionConfig], samples: Iterable[EstimatorSample],
           trace: IterationTrace, delay: int = DEFAULT_DELAY) -> List[CriterionVerdict]:
    """Evaluate criteria offline on recorded samples, in iteration order."""
    engine = CriteriaEngine(configs, delay=delay)
    for sample in sorted(samples, key=lambda s: s.k):
        engine.push(replace(sample), trace)
    return engine.verdicts


def tau_sweep(configs: Sequence[CriterionConfig], samples: Sequence[EstimatorSample],
              trace: IterationTrace, err_A: Sequence[float], e_dis: float,
              inv_tau_grid: Sequence[float]) -> pd.DataFrame:
    """
    Quality ratio of each tau-dependent criterion over a grid of 1/tau.

    C7 does not depend on tau and is left out.
    """
    rows = []
    swept = [c for c in configs if c.kind != 'C7']
    for inv_tau in inv_tau_grid:
        tau = 1.0 / float(inv_tau)
        verdicts = replay([replace(c, tau=tau) for c in swept], samples, trace)
        for verdict in verdicts:
            ratio = None
            if verdict.fired and verdict.k_star < len(err_A):
                ratio = quality_ratio(e_dis, err_A[verdict.k_star])
            rows.append({'inv_tau': float(inv_tau), 'tau': tau,
                         'criterion': verdict.config.label,
                         'k_star': verdict.k_star, 'fired': verdict.fired,
                         'quality_ratio': ratio})
    return pd.DataFrame(rows)


def parse_grid(spec: str) -> np.ndarray:
    """'start:stop:count' -> linearly spaced 1/tau values."""
    try:
        start, stop, count = spec.split(':')
        return np.linspace(float(start), float(stop), int(count))
    except ValueError as exc:
        raise ValueError(f"grid must look like 'start:stop:count', got {spec!r}") from exc


def summary_frame(verdicts: Sequence[CriterionVerdict], degree: int) -> pd.DataFrame:
    """One row per criterion; unfired criteria have empty iterations and ratio."""
    rows = []
    for v in verdicts:
        rows.append({
            'criterion': v.config.label,
            'N': degree,
            'iterations': v.k_star,
            'quality_ratio': v.quality_ratio,
            'fired': v.fired,
            'extra_delay_iters': v.extra_delay_iters,
        })
    return pd.DataFrame(rows, columns=['criterion', 'N', 'iterations', 'quality_ratio',
                                       'fired', 'extra_delay_iters'])


def score(ratio: Optional[float]) -> int:
    """0/1/2 score: > 2 fails, (1.5, 2] is acceptable, <= 1.5 is good; unfired scores 0."""
    if ratio is None or not np.isfinite(ratio):
        return 0
    if ratio > 2.0:
        return 0
    if ratio > 1.5:
        return 1
    return 2
