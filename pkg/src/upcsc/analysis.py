"""Statistics over logged unlabeled-pool confidences.

This is the one module allowed to read quarantined ground truth (the
unlabeled split's real labels), and it uses that access only to score
diagnostics after the fact, never to influence training.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError, UndefinedStatisticError
from .losses import check_threshold

FLOAT_FORMAT = "%.17g"


@dataclass
class ConfidenceLog:
    """Row-per-sample record: (epoch, domain, confidence row, true label)."""
    epochs: np.ndarray
    domains: np.ndarray
    conf: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        self.conf = np.asarray(self.conf, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=np.int64)
        if self.conf.ndim != 2:
            raise ShapeError("confidence block must be 2-D")
        n = len(self.conf)
        if not (len(self.epochs) == len(self.domains) == len(self.truth) == n):
            raise ShapeError("log columns disagree in length")
        if n and (self.truth.min() < 0 or self.truth.max() >= self.conf.shape[1]):
            raise ValueError("true label out of range")

    def __len__(self) -> int:
        return len(self.conf)

    @property
    def num_classes(self) -> int:
        return self.conf.shape[1]

    def filter(self, epoch: int | None = None, domain: int | None = None) -> "ConfidenceLog":
        mask = np.ones(len(self), dtype=bool)
        if epoch is not None:
            mask &= self.epochs == epoch
        if domain is not None:
            mask &= self.domains == domain
        return ConfidenceLog(self.epochs[mask], self.domains[mask],
                             self.conf[mask], self.truth[mask])

    @classmethod
    def concatenate(cls, logs) -> "ConfidenceLog":
        logs = [l for l in logs if len(l)]
        if not logs:
            raise DataError("nothing to concatenate")
        return cls(np.concatenate([l.epochs for l in logs]),
                   np.concatenate([l.domains for l in logs]),
                   np.concatenate([l.conf for l in logs]),
                   np.concatenate([l.truth for l in logs]))


def _require_rows(log: ConfidenceLog):
    if len(log) == 0:
        raise DataError("statistic over an empty log")


def _unconfident_mask(log: ConfidenceLog, tau: float) -> np.ndarray:
    check_threshold(tau, log.num_classes)
    return log.conf.max(axis=1) < tau


def uus_rate(log: ConfidenceLog, tau: float) -> float:
    """Fraction of samples below the confidence threshold."""
    _require_rows(log)
    return float(_unconfident_mask(log, tau).mean())


def inclusion_rate(log: ConfidenceLog, tau: float) -> float:
    """Among unconfident samples, how often the true class sits in the
    candidate set (confidence strictly above uniform)."""
    _require_rows(log)
    mask = _unconfident_mask(log, tau)
    if not mask.any():
        raise UndefinedStatisticError("no unconfident samples; inclusion rate undefined")
    conf = log.conf[mask]
    truth = log.truth[mask]
    hit = conf[np.arange(len(truth)), truth] > 1.0 / log.num_classes
    return float(hit.mean())


def candidate_set_sizes(log: ConfidenceLog, tau: float) -> np.ndarray:
    """|candidate set| for each unconfident sample, in log order."""
    _require_rows(log)
    mask = _unconfident_mask(log, tau)
    return (log.conf[mask] > 1.0 / log.num_classes).sum(axis=1).astype(np.int64)


def confusing_class_histogram(log: ConfidenceLog, tau: float) -> dict[int, int]:
    """Counts of candidate-set sizes >= 1 over unconfident samples.

    Size-0 rows (exactly uniform confidence) are reported separately by
    degenerate_uniform_count, so values here always sum to the number of
    unconfident samples minus the degenerate ones.
    """
    sizes = candidate_set_sizes(log, tau)
    hist: dict[int, int] = {}
    for s in sizes:
        if s >= 1:
            hist[int(s)] = hist.get(int(s), 0) + 1
    return hist


def degenerate_uniform_count(log: ConfidenceLog, tau: float) -> int:
    return int((candidate_set_sizes(log, tau) == 0).sum())


def mean_candidate_fraction(log: ConfidenceLog, tau: float) -> float:
    """E[|candidate set|] / C over unconfident samples: the chance level that
    inclusion_rate should be compared against."""
    sizes = candidate_set_sizes(log, tau)
    if sizes.size == 0:
        raise UndefinedStatisticError("no unconfident samples")
    return float(sizes.mean()) / log.num_classes


def top1_accuracy(conf, truth) -> float:
    """Accuracy of argmax predictions (ties go to the lowest class index)."""
    conf = np.asarray(conf, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    if conf.ndim != 2 or len(conf) != len(truth):
        raise ShapeError("predictions and labels disagree in shape")
    if len(truth) == 0:
        raise DataError("accuracy over an empty set")
    return float((conf.argmax(axis=1) == truth).mean())


def log_source_confidences(benchmark, source_ids, confidence_fn, epoch: int) -> ConfidenceLog:
    """Score every source domain's raw unlabeled pool and attach quarantined truth.

    confidence_fn maps an input matrix to confidence rows; inputs are the
    stored samples, not augmented views.
    """
    parts = []
    for d in source_ids:
        conf = confidence_fn(benchmark.unlabeled(d))
        truth = benchmark.quarantined_truth(d)
        if len(conf) != len(truth):
            raise ShapeError("confidence rows and truth sidecar disagree in length")
        parts.append(ConfidenceLog(np.full(len(truth), epoch), np.full(len(truth), d),
                                   conf, truth))
    return ConfidenceLog.concatenate(parts)


# ------------------------------------------------------------------- CSV I/O

def write_confidences_csv(log: ConfidenceLog, path) -> None:
    """epoch,domain,sample_index,c_0..c_{C-1}; sample_index counts within each
    (epoch, domain) group and matches the unlabeled split's row order."""
    c = log.num_classes
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "domain", "sample_index"] + [f"c_{i}" for i in range(c)])
        counters: dict[tuple[int, int], int] = {}
        for i in range(len(log)):
            key = (int(log.epochs[i]), int(log.domains[i]))
            idx = counters.get(key, 0)
            counters[key] = idx + 1
            writer.writerow([key[0], key[1], idx] + [FLOAT_FORMAT % v for v in log.conf[i]])


def load_confidence_log(confidences_path, truth_dir) -> ConfidenceLog:
    """Join a confidences CSV with the per-domain *_truth.csv sidecars."""
    truths: dict[int, np.ndarray] = {}

    def truth_for(domain: int) -> np.ndarray:
        if domain not in truths:
            path = os.path.join(truth_dir, f"domain{domain}_unlabeled_truth.csv")
            with open(path, newline="") as fh:
                reader = csv.reader(fh)
                if next(reader) != ["label"]:
                    raise DataError(f"unexpected header in {path}")
                truths[domain] = np.asarray([int(row[0]) for row in reader])
        return truths[domain]

    epochs, domains, confs, labels = [], [], [], []
    with open(confidences_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["epoch", "domain", "sample_index"]:
            raise DataError("unexpected confidences header")
        c = len(header) - 3
        if c < 2 or header[3:] != [f"c_{i}" for i in range(c)]:
            raise DataError("unexpected confidence columns")
        for row in reader:
            epoch, domain, idx = int(row[0]), int(row[1]), int(row[2])
            truth = truth_for(domain)
            if not 0 <= idx < len(truth):
                raise DataError(f"sample_index {idx} outside truth sidecar for domain {domain}")
            epochs.append(epoch)
            domains.append(domain)
            confs.append([float(v) for v in row[3:]])
            labels.append(truth[idx])
    if not epochs:
        raise DataError("confidences file has no data rows")
    return ConfidenceLog(np.asarray(epochs), np.asarray(domains),
                         np.asarray(confs), np.asarray(labels))


def write_stats_csv(log: ConfidenceLog, tau: float, path) -> None:
    """statistic,epoch,domain,value rows.

    Per-domain rows first, then domain -1 aggregates: micro pools all samples
    of the epoch, macro averages the per-domain values. Inclusion rows are
    omitted where the statistic is undefined (no unconfident samples).
    """
    rows = []
    for epoch in sorted(set(log.epochs.tolist())):
        elog = log.filter(epoch=epoch)
        per_domain = {}
        for domain in sorted(set(elog.domains.tolist())):
            dlog = elog.filter(domain=domain)
            stats = {"uus_rate": uus_rate(dlog, tau)}
            try:
                stats["inclusion_rate"] = inclusion_rate(dlog, tau)
            except UndefinedStatisticError:
                pass
            per_domain[domain] = stats
            for name, value in stats.items():
                rows.append((name, epoch, domain, value))
        rows.append(("uus_rate_micro", epoch, -1, uus_rate(elog, tau)))
        rows.append(("uus_rate_macro", epoch, -1,
                     float(np.mean([s["uus_rate"] for s in per_domain.values()]))))
        try:
            rows.append(("inclusion_rate_micro", epoch, -1, inclusion_rate(elog, tau)))
        except UndefinedStatisticError:
            pass
        defined = [s["inclusion_rate"] for s in per_domain.values() if "inclusion_rate" in s]
        if defined:
            rows.append(("inclusion_rate_macro", epoch, -1, float(np.mean(defined))))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["statistic", "epoch", "domain", "value"])
        for name, epoch, domain, value in rows:
            writer.writerow([name, epoch, domain, FLOAT_FORMAT % value])


def write_histogram_csv(log: ConfidenceLog, tau: float, epoch: int, path) -> None:
    """set_size,count rows for one epoch, ascending by size."""
    hist = confusing_class_histogram(log.filter(epoch=epoch), tau)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["set_size", "count"])
        for size in sorted(hist):
            writer.writerow([size, hist[size]])
