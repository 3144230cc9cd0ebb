"""Domain-adaptation losses and schedules.

Four ingredients align a source-pretrained occupancy model with an unlabeled
target family:

* feature similarity: per-level maximum mean discrepancy (Gaussian kernel,
  biased estimator) between source and target pixel-aligned features;
* source supervision: MSE against the source labels, per level;
* target self-training: MSE against pseudo-labels built from the K nearest
  source features (depth component rescaled for the distance only) blended
  with the model's own prediction on a momentum schedule;
* diversity: a mutual-information reward (entropy of the mean prediction
  minus mean per-point entropy), entered negatively so one minimizer serves
  all terms.

The total is w1*sim + w2*source + w3*target + w4*(-mi) with w1=5, w2=2 fixed
and w3 = w4 = clamp((epoch - 30)/60, 0, 1), the same ramp as the pseudo-label
momentum. Pseudo-labels are constants: no gradient flows into them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial.distance import pdist

from . import autodiff as ad


@dataclass
class DomainBatch:
    """Per-level features for one optimization step.

    Source points carry inside/outside labels; target points structurally
    have none (there is no field to put them in), which is what makes the
    adaptation unsupervised.
    """

    source_features: list        # per level: DiffValue (n_s, d)
    source_labels: np.ndarray    # (n_s,) in {0, 1}
    target_features: list        # per level: DiffValue (n_t, d)

    def __post_init__(self):
        if len(self.source_features) != len(self.target_features):
            raise ValueError(
                f"level count mismatch: {len(self.source_features)} source vs "
                f"{len(self.target_features)} target")
        if not self.source_features:
            raise ValueError("batch has no feature levels")
        self.source_labels = np.asarray(self.source_labels, dtype=np.float64).reshape(-1)
        n_s = self.source_features[0].shape[0]
        if len(self.source_labels) != n_s:
            raise ValueError(f"{len(self.source_labels)} labels for {n_s} source points")

    @property
    def n_layers(self) -> int:
        return len(self.source_features)

    @property
    def n_source(self) -> int:
        return self.source_features[0].shape[0]

    @property
    def n_target(self) -> int:
        return self.target_features[0].shape[0]


@dataclass
class PseudoLabelState:
    """Per-level pseudo-labels for a fixed set of target points."""

    labels: list[np.ndarray]     # per level: (n_t,) in [0, 1]
    epoch: int
    momentum: float

    def select(self, indices: np.ndarray) -> "PseudoLabelState":
        """State restricted to a subset of the target points."""
        return PseudoLabelState([l[indices] for l in self.labels], self.epoch, self.momentum)


@dataclass
class AblationFlags:
    """Switches that remove one ingredient each; all off reproduces the full method."""

    no_mmd: bool = False
    no_source: bool = False
    no_target: bool = False
    no_mi: bool = False
    no_multilevel: bool = False   # restrict features to the last encoder level
    no_rescale: bool = False      # neighbour search without depth reweighting

    def active(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name)]


@dataclass
class LossWeights:
    """Fixed weights for similarity/source, scheduled weights for target/MI."""

    w1: float = 5.0
    w2: float = 2.0
    start_epoch: int = 30
    epoch_total: int = 60
    last_report: dict = field(default=None, repr=False)

    def scheduled(self, epoch: int) -> tuple[float, float]:
        w = momentum_schedule(epoch, self.start_epoch, self.epoch_total)
        return w, w


def momentum_schedule(epoch: int, start_epoch: int = 30, epoch_total: int = 60) -> float:
    """clamp((epoch - start_epoch) / epoch_total, 0, 1)."""
    return float(np.clip((epoch - start_epoch) / epoch_total, 0.0, 1.0))


# ---------------------------------------------------------------------------
# feature similarity (MMD)
# ---------------------------------------------------------------------------

def median_bandwidth(merged: np.ndarray) -> float:
    """Median pairwise distance over distinct pairs; 1.0 for degenerate sets."""
    m = np.asarray(merged, dtype=np.float64)
    if len(m) < 2:
        return 1.0
    med = float(np.median(pdist(m)))
    return med if med > 0 else 1.0


def _gauss_gram_mean(a: ad.DiffValue, b: ad.DiffValue, inv_two_sigma_sq: float) -> ad.DiffValue:
    """Mean over all pairs of exp(-||a_i - b_j||^2 / (2 sigma^2))."""
    n_a, n_b = a.shape[0], b.shape[0]
    a2 = ad.reshape(ad.vsum(ad.mul(a, a), axis=1), (n_a, 1))
    b2 = ad.reshape(ad.vsum(ad.mul(b, b), axis=1), (1, n_b))
    cross = ad.mul(ad.matmul(a, ad.transpose(b)), ad.constant(2.0))
    d2 = ad.add(ad.sub(a2, cross), b2)
    return ad.vmean(ad.exp(ad.mul(d2, ad.constant(-inv_two_sigma_sq))))


def mmd_layer(source: ad.DiffValue, target: ad.DiffValue, sigma: float) -> ad.DiffValue:
    """Biased squared MMD with a Gaussian kernel of bandwidth sigma.

    mean k(s,s') + mean k(t,t') - 2 mean k(s,t); identical inputs give an
    exact 0 because all three means run through the same code path.
    """
    if source.shape[0] == 0 or target.shape[0] == 0:
        raise ValueError("mmd_layer: empty feature set")
    if sigma <= 0:
        raise ValueError(f"mmd_layer: bandwidth must be positive, got {sigma}")
    inv = 1.0 / (2.0 * sigma * sigma)
    k_ss = _gauss_gram_mean(source, source, inv)
    k_tt = _gauss_gram_mean(target, target, inv)
    k_st = _gauss_gram_mean(source, target, inv)
    return ad.sub(ad.add(k_ss, k_tt), ad.mul(k_st, ad.constant(2.0)))


def loss_sim(batch: DomainBatch, sigma="median") -> ad.DiffValue:
    """Average per-level MMD between source and target features.

    sigma: "median" recomputes the median-pairwise-distance bandwidth per
    level from the merged batch (held constant w.r.t. gradients), or pass a
    fixed positive number.
    """
    total = None
    for s, t in zip(batch.source_features, batch.target_features):
        if sigma == "median":
            level_sigma = median_bandwidth(np.concatenate([s.data, t.data]))
        else:
            level_sigma = float(sigma)
        term = mmd_layer(s, t, level_sigma)
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, ad.constant(1.0 / batch.n_layers))


# ---------------------------------------------------------------------------
# supervision terms
# ---------------------------------------------------------------------------

def _mse_per_level(features: list, targets: list[np.ndarray], decoder) -> ad.DiffValue:
    total = None
    for f, y in zip(features, targets):
        pred = ad.reshape(decoder(f), (f.shape[0],))
        diff = ad.sub(pred, ad.constant(np.asarray(y, dtype=np.float64)))
        term = ad.vmean(ad.mul(diff, diff))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, ad.constant(1.0 / len(features)))


def loss_source(batch: DomainBatch, decoder) -> ad.DiffValue:
    """Mean over levels and source points of (decode(f) - label)^2."""
    if batch.source_labels is None or len(batch.source_labels) == 0:
        raise ValueError("loss_source: source labels missing")
    return _mse_per_level(batch.source_features,
                          [batch.source_labels] * batch.n_layers, decoder)


def loss_target(batch: DomainBatch, decoder, state: PseudoLabelState) -> ad.DiffValue:
    """Mean over levels and target points of (decode(f) - pseudo-label)^2."""
    if state is None or len(state.labels) != batch.n_layers:
        raise ValueError("loss_target: pseudo-label state does not cover the batch levels")
    for l, lab in enumerate(state.labels):
        if len(lab) != batch.n_target:
            raise ValueError(
                f"loss_target: level {l} has {len(lab)} pseudo-labels for "
                f"{batch.n_target} target points")
    return _mse_per_level(batch.target_features, state.labels, decoder)


def _entropy(v: ad.DiffValue) -> ad.DiffValue:
    """Elementwise binary entropy -x log x - (1-x) log(1-x), guarded logs."""
    one_minus = ad.sub(ad.constant(1.0), v)
    return ad.sub(ad.constant(0.0),
                  ad.add(ad.mul(v, ad.log(v)), ad.mul(one_minus, ad.log(one_minus))))


def loss_mi(batch: DomainBatch, decoder) -> ad.DiffValue:
    """Diversity reward: entropy of mean target prediction minus mean entropy.

    Non-negative by concavity of the binary entropy; the total loss enters
    it with a minus sign so minimizing the total maximizes diversity.
    """
    total = None
    for f in batch.target_features:
        pred = ad.reshape(decoder(f), (f.shape[0],))
        marginal = _entropy(ad.vmean(pred))
        conditional = ad.vmean(_entropy(pred))
        term = ad.sub(marginal, conditional)
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, ad.constant(1.0 / batch.n_layers))


# ---------------------------------------------------------------------------
# pseudo-labels
# ---------------------------------------------------------------------------

def reweight(features: np.ndarray, depth_scale: float) -> np.ndarray:
    """Copy of the features with the depth (last) component scaled.

    Used only inside neighbour-distance computations; decoder inputs are
    never reweighted.
    """
    f = np.array(features, dtype=np.float64, copy=True)
    f[..., -1] *= depth_scale
    return f


def knn_indices(target_features: np.ndarray, source_features: np.ndarray,
                k: int, depth_scale: float = 1.0) -> np.ndarray:
    """(n_t, k) indices of the k nearest source features per target point.

    Euclidean distance over depth-reweighted copies; ties broken by source
    index (stable sort), so the result is independent of evaluation order.
    """
    n_s = len(source_features)
    if not 1 <= k <= n_s:
        raise ValueError(f"knn_indices: k={k} outside [1, {n_s}]")
    t = reweight(target_features, depth_scale)
    s = reweight(source_features, depth_scale)
    d2 = (np.sum(t * t, axis=1)[:, None] - 2.0 * (t @ s.T) + np.sum(s * s, axis=1)[None, :])
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def aggregate_neighbours(target_features: np.ndarray, source_features: np.ndarray,
                         source_labels: np.ndarray, k: int,
                         depth_scale: float = 1.0) -> np.ndarray:
    """Mean label of the k nearest source features, per target point."""
    labels = np.asarray(source_labels, dtype=np.float64).reshape(-1)
    if len(labels) != len(source_features):
        raise ValueError("aggregate_neighbours: labels and features disagree in length")
    idx = knn_indices(target_features, source_features, k, depth_scale)
    return labels[idx].mean(axis=1)


def update_pseudo_labels(state: PseudoLabelState | None, predictions: list[np.ndarray],
                         aggregates: list[np.ndarray], epoch: int,
                         start_epoch: int = 30, epoch_total: int = 60) -> PseudoLabelState:
    """New pseudo-labels m*prediction + (1-m)*aggregate, m on the ramp schedule.

    Predictions and aggregates are per-level arrays over the same target
    points. The result stores plain numbers; no gradient path exists into
    pseudo-labels. The previous state only fixes the expected level count.
    """
    if len(predictions) != len(aggregates):
        raise ValueError("update_pseudo_labels: level count mismatch")
    if state is not None and len(state.labels) != len(predictions):
        raise ValueError("update_pseudo_labels: level count changed")
    m = momentum_schedule(epoch, start_epoch, epoch_total)
    labels = []
    for o, agg in zip(predictions, aggregates):
        o = np.asarray(o, dtype=np.float64).reshape(-1)
        agg = np.asarray(agg, dtype=np.float64).reshape(-1)
        if o.shape != agg.shape:
            raise ValueError("update_pseudo_labels: prediction/aggregate shape mismatch")
        labels.append(m * o + (1.0 - m) * agg)
    return PseudoLabelState(labels, epoch, m)


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------

def total_loss(batch: DomainBatch, decoder, state: PseudoLabelState | None,
               epoch: int, weights: LossWeights,
               flags: AblationFlags | None = None, sigma="median"):
    """Weighted sum of the four terms plus a per-term report for logging.

    Ablated terms are skipped and reported as 0. The report maps each term
    name to its raw (unweighted) value and records the weights in effect.
    """
    flags = flags or AblationFlags()
    w3, w4 = weights.scheduled(epoch)
    zero = ad.constant(0.0)

    sim = zero if flags.no_mmd else loss_sim(batch, sigma)
    src = zero if flags.no_source else loss_source(batch, decoder)
    tgt = zero if flags.no_target else loss_target(batch, decoder, state)
    mi = zero if flags.no_mi else loss_mi(batch, decoder)

    total = ad.add(
        ad.add(ad.mul(sim, ad.constant(weights.w1)), ad.mul(src, ad.constant(weights.w2))),
        ad.add(ad.mul(tgt, ad.constant(w3)), ad.mul(ad.sub(ad.constant(0.0), mi),
                                                    ad.constant(w4))))
    report = {
        "sim": sim.item(), "source": src.item(), "target": tgt.item(), "mi": mi.item(),
        "w1": weights.w1, "w2": weights.w2, "w3": w3, "w4": w4,
        "total": total.item(),
    }
    weights.last_report = report
    return total, report
