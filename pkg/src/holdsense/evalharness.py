"""Metrics, cross-validation, ROC, the n-chirp study and attack scenarios."""

import csv
from dataclasses import dataclass, field

import numpy as np

from holdsense import dsp, simchan
from holdsense.classify import UNKNOWN, verify
from holdsense.errors import ParameterError, SegmentationError
from holdsense.pipeline import Pipeline, enroll, simulate_dataset, simulate_trial, subseed
from holdsense.selection import DEFAULT_THRESHOLD
from holdsense.signal import SignalSpec


# --------------------------------------------------------------------------
# Confusion matrix and metrics


@dataclass
class ConfusionMatrix:
    """Rows are true classes; columns are the same classes plus Unknown."""

    classes: tuple
    counts: np.ndarray

    def __post_init__(self):
        self.classes = tuple(str(c) for c in self.classes)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.classes)
        if self.counts.shape != (k, k + 1):
            raise ParameterError(f"counts must be {k}x{k + 1}")
        if np.any(self.counts < 0):
            raise ParameterError("counts must be non-negative")

    @classmethod
    def from_predictions(cls, y_true, y_pred, classes=None):
        y_true = [str(v) for v in y_true]
        y_pred = [str(v) for v in y_pred]
        if len(y_true) != len(y_pred):
            raise ParameterError("one prediction per true label is required")
        classes = tuple(sorted(set(y_true))) if classes is None else tuple(map(str, classes))
        col = {c: i for i, c in enumerate(classes)}
        counts = np.zeros((len(classes), len(classes) + 1), dtype=np.int64)
        for t, p in zip(y_true, y_pred):
            if t not in col:
                raise ParameterError(f"true label {t!r} is not a listed class")
            # rejections (including the negative class) land in the Unknown column
            counts[col[t], col.get(p, len(classes))] += 1
        return cls(classes, counts)

    @property
    def columns(self):
        return self.classes + (UNKNOWN,)

    @property
    def total(self):
        return int(self.counts.sum())

    def index(self, label):
        try:
            return self.classes.index(str(label))
        except ValueError:
            raise ParameterError(f"class {label!r} not in confusion matrix") from None


def precision_recall(cm, label):
    """Precision and recall for one class; precision is ``None`` when the class
    was never predicted. Unknown outcomes count only against recall."""
    i = cm.index(label)
    tp = cm.counts[i, i]
    predicted = cm.counts[:, i].sum()
    actual = cm.counts[i].sum()
    p = None if predicted == 0 else float(tp / predicted)
    r = None if actual == 0 else float(tp / actual)
    return p, r


def accuracy(cm):
    k = len(cm.classes)
    return float(np.trace(cm.counts[:, :k]) / cm.total) if cm.total else 0.0


def roc_curve(genuine, impostor):
    """(FPR, TPR) points of the accept-if-score-at-least-t rule, swept over
    every observed score, from (0, 0) to (1, 1)."""
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ParameterError("ROC needs both genuine and impostor scores")
    thresholds = np.unique(np.concatenate([genuine, impostor]))[::-1]
    g = np.sort(genuine)
    im = np.sort(impostor)
    tpr = (g.size - np.searchsorted(g, thresholds, side="left")) / g.size
    fpr = (im.size - np.searchsorted(im, thresholds, side="left")) / im.size
    pts = np.vstack([[0.0, 0.0], np.column_stack([fpr, tpr]), [1.0, 1.0]])
    return pts, np.concatenate([[np.inf], thresholds, [-np.inf]])


def best_fpr_at(roc, min_tpr):
    """Lowest false-positive rate among points reaching ``min_tpr``."""
    ok = roc[:, 1] >= min_tpr
    return float(roc[ok, 0].min())


# --------------------------------------------------------------------------
# Reports


@dataclass
class EvalReport:
    mode: str
    confusion: ConfusionMatrix
    config: dict = field(default_factory=dict)
    roc: np.ndarray = None
    y_true: tuple = ()
    y_pred: tuple = ()

    @property
    def accuracy(self):
        return accuracy(self.confusion)

    @property
    def per_class(self):
        return {c: precision_recall(self.confusion, c) for c in self.confusion.classes}

    def rows(self):
        cfg = {k: self.config.get(k) for k in ("preset", "environment", "n_chirps", "kind", "seed")}
        out = []
        for c, (p, r) in self.per_class.items():
            out.append(dict(cfg, mode=self.mode, label=c,
                            precision="NA" if p is None else f"{p:.6f}",
                            recall="NA" if r is None else f"{r:.6f}",
                            support=int(self.confusion.counts[self.confusion.index(c)].sum()),
                            accuracy=f"{self.accuracy:.6f}"))
        return out

    def summary(self):
        lines = [f"mode: {self.mode}"]
        lines += [f"{k}: {v}" for k, v in sorted(self.config.items())]
        lines.append(f"samples: {self.confusion.total}")
        lines.append(f"overall accuracy: {self.accuracy:.4f}")
        lines.append("label precision recall")
        for c, (p, r) in self.per_class.items():
            ps = "NA" if p is None else f"{p:.4f}"
            rs = "NA" if r is None else f"{r:.4f}"
            lines.append(f"{c} {ps} {rs}")
        return "\n".join(lines) + "\n"


def write_csv(path, rows):
    rows = list(rows)
    if not rows:
        raise ParameterError("nothing to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_roc(path, roc):
    """Two-column FPR/TPR file readable by gnuplot."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# fpr tpr\n")
        for f, t in roc:
            fh.write(f"{f:.6f} {t:.6f}\n")


# --------------------------------------------------------------------------
# Cross-validation


def stratified_folds(y, k, seed):
    """Test-index arrays for ``k`` folds, each class spread round-robin after a
    seeded shuffle."""
    y = np.asarray(y)
    if k < 2:
        raise ParameterError("k must be at least 2")
    labels, counts = np.unique(y, return_counts=True)
    if counts.min() < k:
        raise ParameterError(f"every class needs at least {k} rows for {k}-fold CV")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(y.size, dtype=np.int64)
    start = 0
    for lab in labels:
        idx = rng.permutation(np.nonzero(y == lab)[0])
        fold_of[idx] = (start + np.arange(idx.size)) % k
        start += idx.size
    return [np.nonzero(fold_of == f)[0] for f in range(k)]


def run_fold(train, test, kind, selection_threshold, confidence_threshold):
    """Enroll on the training rows only and decide every test row."""
    model = enroll(train, kind, selection_threshold, confidence_threshold)
    return [verify(model, x).outcome for x in test.X]


def _cv_report(mode, data, splits, kind, selection_threshold, confidence_threshold, config):
    y_true, y_pred = [], []
    for train_idx, test_idx in splits:
        test = data.subset(test_idx)
        y_pred += run_fold(data.subset(train_idx), test, kind, selection_threshold,
                           confidence_threshold)
        y_true += [str(v) for v in test.y]
    classes = tuple(str(c) for c in data.classes)
    cm = ConfusionMatrix.from_predictions(y_true, y_pred, classes)
    return EvalReport(mode, cm, dict(config, kind=kind), y_true=tuple(y_true),
                      y_pred=tuple(y_pred))


def kfold(data, k=10, seed=0, kind="lda", selection_threshold=DEFAULT_THRESHOLD,
          confidence_threshold=0.6, config=None):
    """Stratified k-fold CV; selection and standardization are refit per fold."""
    data.require(min_classes=2, min_rows=2)
    folds = stratified_folds(data.y, k, seed)
    all_idx = np.arange(data.y.size)
    splits = [(np.setdiff1d(all_idx, f), f) for f in folds]
    cfg = dict(config or {}, fold_seed=seed, folds=k)
    cfg.setdefault("seed", seed)
    return _cv_report(f"kfold-{k}", data, splits, kind, selection_threshold,
                      confidence_threshold, cfg)


def holdout(data, seed=0, kind="lda", selection_threshold=DEFAULT_THRESHOLD,
            confidence_threshold=0.6, config=None):
    """Stratified 50/50 split: train on one half, test on the other."""
    folds = stratified_folds(data.y, 2, seed)
    cfg = dict(config or {}, fold_seed=seed)
    cfg.setdefault("seed", seed)
    return _cv_report("holdout-50", data, [(folds[0], folds[1])], kind, selection_threshold,
                      confidence_threshold, cfg)


# --------------------------------------------------------------------------
# n-chirp study


def nchirp_study(cohort, device, env, n_values, seed, kind="lda", sequences=40, k=10,
                 pipeline=None):
    """Cross-validated accuracy for each chirp count (segments averaged per hold)."""
    if not n_values:
        raise ParameterError("n_values must not be empty")
    base = pipeline or Pipeline()
    out = {}
    for n in n_values:
        p = base.with_chirps(int(n))
        data = simulate_dataset(cohort, device, env, p, sequences, subseed(seed, "nchirp", n))
        rep = kfold(data, k, subseed(seed, "folds", n), kind)
        out[int(n)] = rep.accuracy
    return out


# --------------------------------------------------------------------------
# Attacks


@dataclass(frozen=True)
class AttackSpec:
    """``kind`` is impersonation, replay or jamming; unused fields are ignored."""

    kind: str
    mode: str = "uninformed"
    attackers: int = 20
    attempts: int = 10
    genuine_per_user: int = 10
    eavesdrop_m: float = 0.2
    replay_m: float = 0.2
    trials: int = 90
    power_db: float = 0.0
    distance_m: float = 0.2
    threshold_db: float = dsp.DEFAULT_JAM_THRESHOLD_DB

    def __post_init__(self):
        if self.kind not in ("impersonation", "replay", "jamming"):
            raise ParameterError(f"unknown attack kind {self.kind!r}")
        if self.kind == "impersonation" and self.mode not in ("informed", "uninformed"):
            raise ParameterError(f"unknown impersonation mode {self.mode!r}")


@dataclass
class AttackReport:
    spec: AttackSpec
    attempts: int
    accepted: int
    roc: np.ndarray = None
    detection_rate: float = None
    false_alarm_rate: float = None
    extra: dict = field(default_factory=dict)

    @property
    def acceptance_rate(self):
        return self.accepted / self.attempts if self.attempts else 0.0

    def rows(self):
        row = {"attack": self.spec.kind, "mode": self.spec.mode, "attempts": self.attempts,
               "accepted": self.accepted, "acceptance_rate": f"{self.acceptance_rate:.6f}",
               "detection_rate": "NA" if self.detection_rate is None
               else f"{self.detection_rate:.6f}",
               "false_alarm_rate": "NA" if self.false_alarm_rate is None
               else f"{self.false_alarm_rate:.6f}"}
        row.update({k: v for k, v in sorted(self.extra.items())})
        return [row]


def safe_features(pipeline, rec):
    """Averaged feature row, or ``None`` when the chirps cannot be located."""
    try:
        return pipeline.segment_features(rec).mean(axis=0)
    except SegmentationError:
        return None


def _victim_scores(model, x, label):
    return float(model.probabilities(x)[0][list(model.classes).index(label)])


def _impersonation(model, cohort, spec, device, env, pipeline, seed):
    users = [h for h in cohort if h.user_id in set(map(str, model.classes))]
    genuine, impostor = [], []
    for u, hand in enumerate(users):
        for t in range(spec.genuine_per_user):
            rec = simulate_trial(pipeline, hand, device, env, subseed(seed, "genuine"), u, t)
            x = safe_features(pipeline, rec)
            genuine.append(0.0 if x is None else _victim_scores(model, x, hand.user_id))
    accepted = attempts = 0
    if spec.mode == "uninformed":
        attackers = simchan.make_hand_cohort(spec.attackers, subseed(seed, "attackers"))
        for a, hand in enumerate(attackers):
            for t in range(spec.attempts):
                rec = simulate_trial(pipeline, hand, device, env, subseed(seed, "attack"), a, t)
                x = safe_features(pipeline, rec)
                probs = None if x is None else model.probabilities(x)[0]
                for victim in users:
                    s = 0.0 if probs is None else float(
                        probs[list(model.classes).index(victim.user_id)])
                    impostor.append(s)
                if x is not None:
                    attempts += 1
                    accepted += verify(model, x).identified
                else:
                    attempts += 1
    else:
        for v, victim in enumerate(users):
            rng = np.random.default_rng(subseed(seed, "informed", v))
            for a in range(spec.attackers):
                hand = simchan.perturbed_hand(victim, rng, victim.jitter_sigma, f"attacker{a:02d}")
                for t in range(spec.attempts):
                    rec = simulate_trial(pipeline, hand, device, env,
                                         subseed(seed, "attack", v), a, t)
                    x = safe_features(pipeline, rec)
                    attempts += 1
                    if x is None:
                        impostor.append(0.0)
                        continue
                    impostor.append(_victim_scores(model, x, victim.user_id))
                    accepted += verify(model, x).outcome == victim.user_id
    roc, _ = roc_curve(genuine, impostor)
    extra = {"fpr_at_tpr90": f"{best_fpr_at(roc, 0.9):.6f}"}
    return AttackReport(spec, attempts, int(accepted), roc=roc, extra=extra)


def _replay(model, cohort, spec, device, env, pipeline, seed):
    users = [h for h in cohort if h.user_id in set(map(str, model.classes))]
    accepted = seg_fail = 0
    for t in range(spec.trials):
        u = t % len(users)
        victim = users[u]
        rec = simulate_trial(pipeline, victim, device, env, subseed(seed, "victim"), u, t)
        rep = simchan.simulate_replay(rec, spec.eavesdrop_m, spec.replay_m,
                                      subseed(seed, "replay", t), env)
        x = safe_features(pipeline, rep)
        if x is None:
            seg_fail += 1
            continue
        accepted += verify(model, x).outcome == victim.user_id
    return AttackReport(spec, spec.trials, int(accepted), extra={"unsegmentable": seg_fail})


def calibrate_jamming(pipeline, device, seed, hands, environments=("office", "public"),
                      count=20):
    """Clean-gap baseline from ``count`` seeded clean holds spread over the given
    environments and hands."""
    recs = []
    for i in range(count):
        env = simchan.get_environment(environments[i % len(environments)])
        hand = hands[i % len(hands)]
        recs.append(simulate_trial(pipeline, hand, device, env, subseed(seed, "jam-cal"), 0, i))
    return dsp.calibrate_jam_baseline(recs, pipeline.template, pipeline.spec.gap_len)


def _jamming(model, cohort, spec, device, env, pipeline, seed, baseline_db=None):
    users = [h for h in cohort if h.user_id in set(map(str, model.classes))]
    if baseline_db is None:
        baseline_db = calibrate_jamming(pipeline, device, seed, users)
    jam_spec = SignalSpec(gap_len=0, chirp_len=pipeline.spec.chirp_len)
    detected = false_alarms = accepted = 0
    for t in range(spec.trials):
        u = t % len(users)
        rec = simulate_trial(pipeline, users[u], device, env, subseed(seed, "jam-victim"), u, t)
        clean = dsp.detect_jamming(rec, pipeline.template, spec.threshold_db, baseline_db,
                                   pipeline.spec.gap_len)
        false_alarms += clean.detected
        jammed = simchan.inject_jammer(rec, jam_spec, spec.power_db, spec.distance_m,
                                       subseed(seed, "jammer", t))
        rep = dsp.detect_jamming(jammed, pipeline.template, spec.threshold_db, baseline_db,
                                 pipeline.spec.gap_len)
        detected += rep.detected
        if not rep.detected:
            x = safe_features(pipeline, jammed)
            if x is not None:
                accepted += verify(model, x).outcome == users[u].user_id
    n = spec.trials
    return AttackReport(spec, n, int(accepted), detection_rate=detected / n,
                        false_alarm_rate=false_alarms / n,
                        extra={"baseline_db": f"{baseline_db:.4f}"})


def run_attack_suite(model, cohort, spec, seed, device=None, env=None, pipeline=None,
                     baseline_db=None):
    """Run one attack scenario against an enrolled cohort model."""
    if not isinstance(spec, AttackSpec):
        raise ParameterError("spec must be an AttackSpec")
    device = device or simchan.get_device("note5")
    env = env or simchan.get_environment("office")
    pipeline = pipeline or Pipeline()
    if spec.kind == "impersonation":
        return _impersonation(model, cohort, spec, device, env, pipeline, seed)
    if spec.kind == "replay":
        return _replay(model, cohort, spec, device, env, pipeline, seed)
    return _jamming(model, cohort, spec, device, env, pipeline, seed, baseline_db)
