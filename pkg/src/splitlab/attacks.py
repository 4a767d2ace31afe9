"""Label-inference attacks run by an honest-but-curious feature party.

Every attack reads the host's :class:`~splitlab.splitproto.GradientTap` (or
its own bottom model) and never touches training. Attacks produce per-sample
scores; leak metrics against the true labels are attached afterwards with
:meth:`AttackReport.score_against`, since the attacker never sees labels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .metrics import accuracy, leak_auc, roc_auc
from .models import (
    Network,
    OptimizerState,
    backward,
    cross_entropy_soft,
    forward,
    load_checkpoint,
    sgd_step,
    top_network,
)
from .numerics import (
    ConvergenceError,
    DegenerateClusteringError,
    RngStream,
    calinski_harabasz,
    kmeans,
    softmax,
    top_singular_vector,
)

DEFAULT_REFERENCE_SIZE = 512


@dataclass
class AttackReport:
    attack: str
    sample_ids: np.ndarray
    scores: np.ndarray
    predicted: np.ndarray = None
    window: object = None
    metric: str = None
    leak: float = None
    raw_auc: float = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != self.sample_ids.shape:
            raise ValueError("one score per attacked sample")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("attack scores must be finite")

    def score_against(self, ids, labels, k=2):
        """Attach the leak metric using ground truth keyed by sample id.

        Binary tasks get leak AUC on the scores (and the raw, oriented AUC);
        multi-class tasks get prediction accuracy.
        """
        ids = np.asarray(ids)
        labels = np.asarray(labels)
        order = np.argsort(ids)
        pos = np.searchsorted(ids[order], self.sample_ids)
        if np.any(pos >= ids.size) or np.any(ids[order][np.minimum(pos, ids.size - 1)] != self.sample_ids):
            raise ValueError("ground truth is missing some attacked samples")
        truth = labels[order][pos]
        if k == 2:
            self.metric = "leak_auc"
            self.raw_auc = roc_auc(self.scores, truth)
            self.leak = leak_auc(self.scores, truth)
        else:
            if self.predicted is None:
                raise ValueError("multi-class leak needs predicted labels")
            self.metric = "accuracy"
            self.leak = accuracy(self.predicted, truth)
        return self

    def summary(self):
        return {
            "attack": self.attack,
            "window": self.window if not isinstance(self.window, tuple) else list(self.window),
            "metric": self.metric,
            "leak": self.leak,
            "raw_auc": self.raw_auc,
            "n": int(self.sample_ids.size),
            **self.extra,
        }

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "score", "predicted_label"])
            pred = self.predicted if self.predicted is not None else [""] * self.scores.size
            for i, s, p in zip(self.sample_ids, self.scores, pred):
                writer.writerow([int(i), repr(float(s)), p if p == "" else int(p)])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def _window_view(tap, source, window):
    if len(tap.gradients) == 0 and len(tap.embeddings) == 0:
        raise ValueError("tap is empty")
    return tap.view(source, window)


def norm_attack(tap, window="last") -> AttackReport:
    """Score each sample by the l2 norm of its cut-layer gradient."""
    ids, G = _window_view(tap, "gradients", window)
    return AttackReport("norm", ids, np.sqrt(np.einsum("ij,ij->i", G, G)), window=window)


def direction_attack(tap, majority_class_hint=0, window="last", reference_size=DEFAULT_REFERENCE_SIZE,
                     rng: RngStream = None) -> AttackReport:
    """Majority vote over cosine signs.

    A sample's score is the fraction of reference gradients (itself
    excluded) with positive cosine similarity to its own; samples scoring
    above one half are labelled with the majority class. Zero gradients are
    dropped. Higher scores mean "looks like the majority class".
    """
    if majority_class_hint not in (0, 1):
        raise ValueError("direction attack supports binary tasks only")
    ids, G = _window_view(tap, "gradients", window)
    norms = np.sqrt(np.einsum("ij,ij->i", G, G))
    keep = norms > 0.0
    if not np.any(keep):
        raise ValueError("all tapped gradients are zero")
    ids, U = ids[keep], G[keep] / norms[keep, None]
    n = ids.size
    rng = rng or RngStream(0).child("direction")
    if reference_size is None or reference_size >= n:
        ref = np.arange(n)
    else:
        ref = np.sort(rng.choice(n, size=reference_size, replace=False))
    positive = (U @ U[ref].T) > 0.0
    is_ref = np.zeros(n, dtype=bool)
    is_ref[ref] = True
    # a sample in the reference set does not vote for itself
    counts = positive.sum(axis=1) - is_ref
    denom = ref.size - is_ref
    scores = np.where(denom > 0, counts / np.maximum(denom, 1), 0.0)
    minority = 1 - majority_class_hint
    predicted = np.where(scores > 0.5, majority_class_hint, minority)
    return AttackReport("direction", ids, scores, predicted, window=window,
                        extra={"reference_size": int(ref.size), "dropped_zero": int((~keep).sum())})


def spectral_attack(tap, source="embeddings", majority_class_hint=0, window="last") -> AttackReport:
    """Project mean-centred rows onto their top singular direction.

    The sign of the projection splits samples in two groups; the larger
    group is labelled with the majority class. Scores are oriented so the
    majority group sits on the positive side.
    """
    ids, M = _window_view(tap, source, window)
    if ids.size < 2:
        raise ValueError("spectral attack needs at least two samples")
    centred = M - M.mean(axis=0)
    if not np.any(centred):
        raise ValueError("all rows are identical; no singular direction to project on")
    try:
        v, _ = top_singular_vector(centred)
    except ConvergenceError as exc:
        # nearly tied top singular values; the last iterate is still a
        # high-variance direction, which is all the attack needs
        v = exc.last
    scores = centred @ v
    if np.sum(scores > 0) < np.sum(scores <= 0):
        scores = -scores
    predicted = np.where(scores > 0, majority_class_hint, 1 - majority_class_hint)
    return AttackReport("spectral", ids, scores, predicted, window=window, extra={"source": source})


def model_completion_attack(bottom, aux, unlabeled, k=None, head_hidden=32, epochs=100,
                            learning_rate=0.1, batch_size=32, rng: RngStream = None) -> AttackReport:
    """Fine-tune the host's bottom model plus a fresh head on a few labelled samples.

    ``bottom`` is a :class:`Network` or a checkpoint path; it is copied, and
    all layers are trained. ``aux`` is a small labelled
    :class:`~splitlab.data.Dataset`; only the features of ``unlabeled`` are
    used. Scores are the predicted probability of class 1 (binary) or the
    confidence of the predicted class.
    """
    if not isinstance(bottom, Network):
        bottom = load_checkpoint(bottom)
    k = k or aux.k
    if aux.n_features != bottom.input_width or unlabeled.n_features != bottom.input_width:
        raise ValueError(
            f"feature width does not match the bottom model input ({bottom.input_width})"
        )
    missing = set(range(k)) - set(np.unique(aux.labels).tolist())
    if missing:
        raise ValueError(f"auxiliary set lacks classes {sorted(missing)}")
    rng = rng or RngStream(0).child("model-completion")
    net = Network(bottom.copy().layers + top_network(bottom.output_width, k, head_hidden, rng.child("head")).layers)
    opt = OptimizerState(learning_rate)
    targets = np.eye(k)[aux.labels]
    order_rng = rng.child("order")
    for _ in range(epochs):
        order = order_rng.permutation(len(aux))
        for i in range(0, len(aux), batch_size):
            rows = order[i:i + batch_size]
            trace = forward(net, aux.features[rows])
            _, dlogits = cross_entropy_soft(trace.output, targets[rows])
            grads, _ = backward(net, trace, dlogits)
            sgd_step(net, grads, opt)
    p = softmax(forward(net, unlabeled.features).output, axis=1)
    predicted = np.argmax(p, axis=1)
    scores = p[:, 1] if k == 2 else p[np.arange(p.shape[0]), predicted]
    return AttackReport("model_completion", unlabeled.ids, scores, predicted,
                        extra={"aux_size": len(aux)})


def infer_k_attack(tap, k, K_max, rng: RngStream, window="last", restarts=10, max_points=None):
    """Guess the expanded label dimension by clustering tapped gradients.

    For every candidate count ``c`` in ``[2, K_max]`` the gradients are
    clustered with k-means and scored with Calinski-Harabasz; the best
    scoring count is the guess. Returns ``(guess, {c: score})``; degenerate
    candidates are absent from the score map.
    """
    if K_max < 2:
        raise ValueError("K_max must be >= 2")
    if k < 1:
        raise ValueError("k must be >= 1")
    _, G = _window_view(tap, "gradients", window)
    if max_points is not None and G.shape[0] > max_points:
        G = G[np.sort(rng.child("subsample").choice(G.shape[0], size=max_points, replace=False))]
    scores = {}
    for c in range(2, K_max + 1):
        if c >= G.shape[0]:
            break
        assignment, _ = kmeans(G, c, rng.child(("kmeans", c)), restarts=restarts)
        try:
            scores[c] = calinski_harabasz(G, assignment)
        except DegenerateClusteringError:
            continue
    if not scores:
        raise DegenerateClusteringError("every candidate cluster count was degenerate")
    guess = max(scores, key=lambda c: (scores[c], -c))
    return guess, scores
