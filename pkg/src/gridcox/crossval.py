"""Cross-validation folds, predictive count moments, proper scores, tests.

Models are compared by alternating-interval 50/50 cross-validation: the time
axis is cut into consecutive intervals, odd intervals train fold 1 (and test
fold 2) and vice versa.  Per test interval the posterior predictive count
mean/variance is estimated by Monte Carlo over latent draws, scored by the
squared-error and Dawid-Sebastiani rules, and model pairs are compared with
a randomized sign-flip exchangeability test.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .model import (
    TEMPORAL_KINDS,
    ModelSpec,
    PosteriorFit,
    SearchConfig,
    optimize_hyper,
    sample_posterior,
)
from .trajectory import (
    IntegrationWeights,
    SegmentedPath,
    SessionData,
    SpikeTrain,
    integration_weights,
    segment_path,
    thin_temporal_knots,
)


@dataclass(frozen=True)
class FoldSpec:
    """Consecutive intervals of length tau (last may be shorter), two folds.

    Fold 0 trains on the 1st, 3rd, ... intervals; fold 1 on the complement.
    """

    tau: float
    edges: np.ndarray

    @property
    def interval_count(self) -> int:
        return self.edges.size - 1

    def intervals(self):
        return list(zip(self.edges[:-1], self.edges[1:]))

    def train_indices(self, fold: int) -> np.ndarray:
        return np.arange(fold % 2, self.interval_count, 2)

    def test_indices(self, fold: int) -> np.ndarray:
        return np.arange((fold + 1) % 2, self.interval_count, 2)


def make_folds(duration: float, tau: float) -> FoldSpec:
    """Partition [0, T] into intervals of length tau with alternating folds."""
    if tau <= 0:
        raise ValidationError("interval length tau must be positive")
    if tau > duration:
        raise ValidationError("interval length exceeds the session duration")
    m = int(np.ceil(duration / tau - 1e-12))
    if m < 2:
        raise ValidationError("need at least two intervals so both folds are nonempty")
    edges = np.minimum(tau * np.arange(m + 1), duration)
    edges[-1] = duration
    return FoldSpec(tau, edges)


def expected_counts_per_draw(iw: IntegrationWeights, draws: np.ndarray) -> np.ndarray:
    """Latent-conditional expected counts, one value per posterior draw.

    Uses the same trapezoidal quadrature as the likelihood: for draw x the
    expected count is e^beta b' exp(w), or the bilinear form for temporal
    kinds.
    """
    beta = draws[0]
    p = iw.p_main
    ew = np.exp(draws[1:1 + p])
    if iw.kind in TEMPORAL_KINDS:
        et = np.exp(draws[1 + p:1 + p + iw.p_time])
        quad = (et * (iw.B @ ew)).sum(axis=0)
    else:
        quad = iw.b @ ew
    return np.exp(beta) * quad


def predictive_counts(counts_per_draw: np.ndarray):
    """Posterior predictive mean and variance of a Poisson count.

    The variance adds the mean conditional variance (equal to the mean, the
    count being conditionally Poisson) to the variance of the conditional
    means over draws.
    """
    k = counts_per_draw.size
    if k < 2:
        raise ValidationError("need at least two posterior draws")
    mu = float(counts_per_draw.mean())
    var = mu + float(((counts_per_draw - mu) ** 2).mean())
    return mu, var


def score_se(mu: float, observed: float) -> float:
    """Squared-error score (negatively oriented)."""
    return float((observed - mu) ** 2)


def score_ds(mu: float, var: float, observed: float) -> float:
    """Dawid-Sebastiani score ((n - mu)/sigma)^2 + log sigma^2."""
    if var <= 0:
        raise ValidationError("Dawid-Sebastiani score undefined for zero variance")
    return float((observed - mu) ** 2 / var + np.log(var))


def permutation_test(differences, j: int, seed, chunk: int = 100_000) -> float:
    """One-sided randomized sign-flip test of pairwise exchangeability.

    Flips the sign of each paired score difference independently with
    probability 1/2, J times, and returns the fraction of randomized mean
    differences at or below the observed mean.  Small p favours the
    alternative model; 2*min(p, 1-p) gives a two-sided value.
    """
    diffs = np.asarray(differences, dtype=np.float64)
    if diffs.size == 0 or j < 1:
        raise ValidationError("need at least one difference and one replicate")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    t_obs = diffs.mean()
    hits = 0
    done = 0
    while done < j:
        m = min(chunk, j - done)
        signs = rng.integers(0, 2, size=(m, diffs.size)).astype(np.float64) * 2.0 - 1.0
        t = signs @ diffs / diffs.size
        hits += int(np.count_nonzero(t <= t_obs))
        done += m
    return hits / j


def two_sided(p: float) -> float:
    return 2.0 * min(p, 1.0 - p)


@dataclass
class SegmentScores:
    """Per-test-interval predictive moments and observed counts for one model."""

    model: str
    fold: int
    tau: float
    mu: np.ndarray
    var: np.ndarray
    observed: np.ndarray

    def se(self) -> np.ndarray:
        return (self.observed - self.mu) ** 2

    def ds(self) -> np.ndarray:
        if np.any(self.var <= 0):
            raise ValidationError("Dawid-Sebastiani score undefined for zero variance")
        return (self.observed - self.mu) ** 2 / self.var + np.log(self.var)


@dataclass
class CrossValConfig:
    """Cross-validation settings."""

    taus: tuple = (2.0, 5.0, 10.0, 20.0, 30.0, 40.0)
    k_draws: int = 2000
    j_permutations: int = 1_000_000
    seed: int = 0
    search: SearchConfig = field(default_factory=SearchConfig)
    newton_tol: float = 1e-6
    newton_max_iter: int = 100
    temporal_spacing: float = 5.0


class CrossValidator:
    """Shared segmentation and per-fold fitting for a set of model kinds."""

    def __init__(self, data: SessionData, spikes: SpikeTrain, specs: dict[str, ModelSpec],
                 config: CrossValConfig):
        self.data = data
        self.spikes = spikes
        self.specs = specs
        self.config = config
        kinds = set(specs)
        if not kinds <= set(("m0", "m0t", "mxt", "mxtt")):
            raise ValidationError(f"unknown model kinds {kinds}")
        first = next(iter(specs.values()))
        self.tri = first.tri
        self.circ = first.circ or next(
            (s.circ for s in specs.values() if s.circ is not None), None
        )
        self.temporal = next(
            (s.temporal for s in specs.values() if s.temporal is not None), None
        )
        self._segcache: dict[tuple, SegmentedPath] = {}

    def segments_for(self, fold_edges) -> SegmentedPath:
        key = tuple(np.round(fold_edges, 9))
        if key not in self._segcache:
            self._segcache[key] = segment_path(
                self.data, self.tri, self.circ, self.temporal, extra_time_knots=fold_edges
            )
        return self._segcache[key]

    def _weights(self, segs, kind, mask, spike_sel):
        spikes = SpikeTrain(self.spikes.times[spike_sel]) if spike_sel is not None else None
        spec = self.specs[kind]
        return integration_weights(
            segs, kind, spec.tri, spec.circ, spec.temporal,
            spikes=spikes, session=self.data, mask=mask,
        )

    def run(self, taus=None, threads: int = 1) -> list[SegmentScores]:
        """Scores for every (tau, fold, model); deterministic given the seed."""
        taus = list(self.config.taus if taus is None else taus)
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(self.run_tau, taus))
        else:
            parts = [self.run_tau(tau) for tau in taus]
        return [s for part in parts for s in part]

    def run_tau(self, tau: float) -> list[SegmentScores]:
        folds = make_folds(self.data.duration, tau)
        segs = self.segments_for(folds.edges)
        spike_interval = np.clip(
            np.searchsorted(folds.edges, self.spikes.times, side="right") - 1,
            0, folds.interval_count - 1,
        )
        out = []
        for fold in (0, 1):
            train_iv = folds.train_indices(fold)
            test_iv = folds.test_indices(fold)
            intervals = folds.intervals()
            train_mask = np.zeros(segs.count, dtype=bool)
            for i in train_iv:
                train_mask |= segs.in_window(*intervals[i])
            train_spikes = np.isin(spike_interval, train_iv)
            for kind, spec in self.specs.items():
                iw_train = self._weights(segs, kind, train_mask, train_spikes)
                fit = optimize_hyper(
                    spec, iw_train, self.config.search,
                    tol=self.config.newton_tol, max_iter=self.config.newton_max_iter,
                )
                kind_id = ("m0", "m0t", "mxt", "mxtt").index(kind)
                draws = sample_posterior(
                    fit, self.config.k_draws,
                    np.random.default_rng(
                        (self.config.seed, fold, kind_id, int(round(tau * 1000)))
                    ),
                )
                mus, vars_, obs = [], [], []
                for i in test_iv:
                    a, b = intervals[i]
                    iw_test = self._weights(segs, kind, segs.in_window(a, b), None)
                    cpd = expected_counts_per_draw(iw_test, draws)
                    mu, var = predictive_counts(cpd)
                    mus.append(mu)
                    vars_.append(var)
                    obs.append(int(np.count_nonzero(spike_interval[~train_spikes] == i)))
                out.append(SegmentScores(
                    kind, fold, tau, np.asarray(mus), np.asarray(vars_),
                    np.asarray(obs, dtype=float),
                ))
        return out


@dataclass
class ComparisonRow:
    """One row of the score-difference tables."""

    tau: float
    fold: str
    model: str
    baseline: str
    score: str
    mean_diff: float
    prop_negative: float
    sd: float
    p_value: float
    n_segments: int


def compare_scores(scores: list[SegmentScores], baseline: str, j: int, seed) -> list[ComparisonRow]:
    """Score-difference summaries of every model against the baseline.

    Reports the mean difference, the proportion of strictly negative
    differences (ties count as not negative), a conservative standard
    deviation (sample sd of the per-segment differences), and the one-sided
    exchangeability p-value.  Differences are antisymmetric in the pair order.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    by_key = {(s.model, s.fold, s.tau): s for s in scores}
    taus = sorted({s.tau for s in scores})
    models = sorted({s.model for s in scores if s.model != baseline})
    rows = []
    for tau in taus:
        for model in models:
            per_fold_diffs = {}
            for score_name in ("se", "ds"):
                fold_rows = []
                for fold in (0, 1):
                    sb = by_key.get((baseline, fold, tau))
                    sm = by_key.get((model, fold, tau))
                    if sb is None or sm is None:
                        continue
                    if sb.observed.size != sm.observed.size:
                        raise ValidationError("mismatched segment counts across models")
                    d = getattr(sm, score_name)() - getattr(sb, score_name)()
                    per_fold_diffs[(score_name, fold)] = d
                    fold_rows.append(d)
                    rows.append(_summary_row(tau, str(fold + 1), model, baseline,
                                             score_name, d, j, rng))
                if fold_rows:
                    combined = np.concatenate(fold_rows)
                    rows.append(_summary_row(tau, "combined", model, baseline,
                                             score_name, combined, j, rng))
    return rows


def _summary_row(tau, fold_label, model, baseline, score_name, diffs, j, rng):
    p = permutation_test(diffs, j, rng)
    sd = float(np.std(diffs, ddof=1)) if diffs.size > 1 else 0.0
    return ComparisonRow(
        tau, fold_label, model, baseline, score_name.upper(),
        float(diffs.mean()), float(np.mean(diffs < 0)), sd, p, diffs.size,
    )


def write_score_tables(rows: list[ComparisonRow], path) -> None:
    """Score-difference table as CSV (ties count as not-negative)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([
            "tau", "fold", "model", "baseline", "score",
            "mean_diff", "prop_negative", "sd", "p_value", "n_segments",
        ])
        for r in rows:
            w.writerow([
                r.tau, r.fold, r.model, r.baseline, r.score,
                repr(r.mean_diff), repr(r.prop_negative), repr(r.sd),
                repr(r.p_value), r.n_segments,
            ])
