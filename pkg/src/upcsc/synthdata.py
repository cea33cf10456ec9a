"""Synthetic multi-domain benchmark: shared latent class structure observed
through per-domain linear distortions, with labeled/unlabeled/test splits and
noise-based weak/strong augmentations.

Ground-truth labels of the unlabeled split are quarantined: they live in a
separate field (and a separate *_truth.csv on disk) that only the analysis
module reads. Training code sees unlabeled inputs only.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .numerics import substream

TEST_FRACTION = 0.2
FLOAT_FORMAT = "%.17g"

# substream tags under the master seed
_TAG_PROTOTYPES = 0
_TAG_DOMAIN_SPEC = 1
_TAG_SAMPLES = 2
_TAG_SPLITS = 3


@dataclass(frozen=True)
class BenchmarkConfig:
    num_domains: int = 4
    num_classes: int = 7
    latent_dim: int = 32
    samples_per_class_per_domain: int = 500
    labels_per_class: int = 10
    class_separation: float = 7.5
    master_seed: int = 0
    # domain-shift strength
    rotation_max_angle: float = 1.1   # radians, per rotation plane
    scale_log_range: float = 0.45     # per-axis scale in exp(+-range)
    shift_sigma: float = 1.0
    noise_sigma: float = 1.875
    # augmentation defaults
    sigma_weak: float = 0.05
    sigma_strong: float = 0.5
    strong_dropout: float = 0.2

    def __post_init__(self):
        if self.num_domains < 2:
            raise ConfigError("need at least two domains")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if self.labels_per_class < 1:
            raise ConfigError("labels_per_class must be positive")
        spc = self.samples_per_class_per_domain
        if self.labels_per_class > spc:
            raise ConfigError("labels_per_class cannot exceed samples per class")
        if spc - self.test_per_class() <= 2 * self.labels_per_class:
            raise ConfigError("splits leave no unlabeled majority; "
                              "raise samples_per_class_per_domain or lower labels_per_class")
        for name in ("class_separation", "noise_sigma", "sigma_weak", "sigma_strong"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0.0 <= self.strong_dropout <= 1.0:
            raise ConfigError("strong_dropout must be in [0, 1]")

    def test_per_class(self) -> int:
        return max(1, round(TEST_FRACTION * self.samples_per_class_per_domain))


@dataclass
class DomainSpec:
    """Linear observation model of one domain: x = R (s * latent) + shift."""
    domain_id: int
    rotation: np.ndarray   # (k, k) orthogonal
    scale: np.ndarray      # (k,) positive per-axis factors
    shift: np.ndarray      # (k,)

    def apply(self, latent: np.ndarray) -> np.ndarray:
        return (latent * self.scale) @ self.rotation.T + self.shift

    def invert(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.shift) @ self.rotation) / self.scale

    @classmethod
    def identity(cls, domain_id: int, latent_dim: int) -> "DomainSpec":
        return cls(domain_id, np.eye(latent_dim), np.ones(latent_dim), np.zeros(latent_dim))


def random_rotation(latent_dim: int, rng: np.random.Generator, max_angle: float) -> np.ndarray:
    """Orthogonal matrix rotating k//2 random planes by angles in [0, max_angle].

    Built as U B U^T with U a random orthonormal basis and B block-diagonal
    2x2 rotations, so max_angle = 0 yields the exact identity and small angles
    yield near-identity maps.
    """
    if max_angle == 0.0:
        return np.eye(latent_dim)
    g = rng.standard_normal((latent_dim, latent_dim))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))  # fix signs so the basis is draw-stable
    b = np.eye(latent_dim)
    for p in range(latent_dim // 2):
        theta = rng.uniform(0.0, max_angle)
        c, s = math.cos(theta), math.sin(theta)
        i, j = 2 * p, 2 * p + 1
        b[i, i] = c
        b[j, j] = c
        b[i, j] = -s
        b[j, i] = s
    return q @ b @ q.T


@dataclass
class DomainSplits:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    unlabeled_truth: np.ndarray  # quarantined; analysis-only
    test_x: np.ndarray
    test_y: np.ndarray


class DomainBenchmark:
    """Generated domains plus read counters used to audit data access.

    Every accessor bumps a (domain, split) counter, so tests can prove a
    training run never touched the held-out target's labels or unlabeled pool.
    """

    def __init__(self, config: BenchmarkConfig, prototypes, specs, domains):
        self.config = config
        self.prototypes = prototypes   # (C, k) latent class centers, or None after import
        self.specs = specs             # list[DomainSpec] or None after import
        self._domains = domains        # list[DomainSplits]
        self.read_counts: dict[tuple[int, str], int] = {}

    @property
    def domain_ids(self) -> list[int]:
        return list(range(len(self._domains)))

    def _get(self, domain: int, split: str) -> DomainSplits:
        if not 0 <= domain < len(self._domains):
            raise KeyError(f"no domain {domain}")
        self.read_counts[(domain, split)] = self.read_counts.get((domain, split), 0) + 1
        return self._domains[domain]

    def labeled(self, domain: int) -> tuple[np.ndarray, np.ndarray]:
        d = self._get(domain, "labeled")
        return d.labeled_x, d.labeled_y

    def unlabeled(self, domain: int) -> np.ndarray:
        return self._get(domain, "unlabeled").unlabeled_x

    def quarantined_truth(self, domain: int) -> np.ndarray:
        """Unlabeled-split ground truth. Only analysis code may call this."""
        return self._get(domain, "truth").unlabeled_truth

    def test(self, domain: int) -> tuple[np.ndarray, np.ndarray]:
        d = self._get(domain, "test")
        return d.test_x, d.test_y

    def without_domain(self, target: int) -> "TrainingView":
        if not 0 <= target < len(self._domains):
            raise KeyError(f"no domain {target}")
        return TrainingView(self, target)


class TrainingView:
    """Source-domain window onto a benchmark; the target is unreachable."""

    def __init__(self, benchmark: DomainBenchmark, excluded: int):
        self._benchmark = benchmark
        self.excluded = excluded
        self.source_ids = [d for d in benchmark.domain_ids if d != excluded]
        self.config = benchmark.config

    def _check(self, domain: int):
        if domain == self.excluded:
            raise KeyError(f"domain {domain} is held out from this view")

    def labeled(self, domain: int):
        self._check(domain)
        return self._benchmark.labeled(domain)

    def unlabeled(self, domain: int):
        self._check(domain)
        return self._benchmark.unlabeled(domain)


def generate_benchmark(config: BenchmarkConfig) -> DomainBenchmark:
    """Deterministic benchmark: fixed entirely by the config (master_seed included)."""
    c, k = config.num_classes, config.latent_dim
    proto_rng = substream(config.master_seed, _TAG_PROTOTYPES)
    directions = proto_rng.standard_normal((c, k))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    prototypes = directions * config.class_separation

    specs = []
    domains = []
    spc = config.samples_per_class_per_domain
    tpc = config.test_per_class()
    lpc = config.labels_per_class
    for d in range(config.num_domains):
        spec_rng = substream(config.master_seed, _TAG_DOMAIN_SPEC, d)
        rotation = random_rotation(k, spec_rng, config.rotation_max_angle)
        scale = np.exp(spec_rng.uniform(-config.scale_log_range, config.scale_log_range, size=k))
        shift = spec_rng.normal(0.0, config.shift_sigma, size=k) if config.shift_sigma > 0 else np.zeros(k)
        spec = DomainSpec(d, rotation, scale, shift)
        specs.append(spec)

        sample_rng = substream(config.master_seed, _TAG_SAMPLES, d)
        split_rng = substream(config.master_seed, _TAG_SPLITS, d)
        lab_x, lab_y, unl_x, unl_y, tst_x, tst_y = [], [], [], [], [], []
        for y in range(c):
            latent = prototypes[y] + sample_rng.normal(0.0, config.noise_sigma, size=(spc, k))
            x = spec.apply(latent)
            order = split_rng.permutation(spc)
            lab = order[:lpc]
            tst = order[lpc:lpc + tpc]
            unl = order[lpc + tpc:]
            lab_x.append(x[lab]); lab_y.append(np.full(len(lab), y))
            tst_x.append(x[tst]); tst_y.append(np.full(len(tst), y))
            unl_x.append(x[unl]); unl_y.append(np.full(len(unl), y))

        def stack(xs, ys, rng):
            x = np.concatenate(xs)
            y = np.concatenate(ys)
            order = rng.permutation(len(y))
            return x[order], y[order]

        lx, ly = stack(lab_x, lab_y, split_rng)
        ux, uy = stack(unl_x, unl_y, split_rng)
        tx, ty = stack(tst_x, tst_y, split_rng)
        domains.append(DomainSplits(lx, ly, ux, uy, tx, ty))

    return DomainBenchmark(config, prototypes, specs, domains)


def weak_augment(x: np.ndarray, rng: np.random.Generator, sigma: float = 0.05) -> np.ndarray:
    """Additive isotropic Gaussian noise."""
    x = np.asarray(x, dtype=np.float64)
    return x + sigma * rng.standard_normal(x.shape)


def strong_augment(x: np.ndarray, rng: np.random.Generator, sigma: float = 0.5,
                   dropout: float = 0.2) -> np.ndarray:
    """Heavier Gaussian noise followed by independent coordinate dropout."""
    x = np.asarray(x, dtype=np.float64)
    noisy = x + sigma * rng.standard_normal(x.shape)
    keep = rng.random(x.shape) >= dropout
    return noisy * keep


@dataclass
class TrainBatch:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray


def sample_batch(view, labeled_per_domain: int, unlabeled_per_domain: int,
                 rng: np.random.Generator) -> TrainBatch:
    """Draw a balanced batch across the view's source domains.

    Sampling is without replacement inside one batch whenever the split is
    large enough, with replacement otherwise.
    """
    if labeled_per_domain < 1 or unlabeled_per_domain < 1:
        raise ConfigError("per-domain batch sizes must be positive")

    def pick(n_avail: int, n_want: int) -> np.ndarray:
        if n_avail == 0:
            raise DataError("cannot sample from an empty split")
        return rng.choice(n_avail, size=n_want, replace=n_avail < n_want)

    lx, ly, ux = [], [], []
    for d in view.source_ids:
        x, y = view.labeled(d)
        idx = pick(len(y), labeled_per_domain)
        lx.append(x[idx]); ly.append(y[idx])
        xu = view.unlabeled(d)
        ux.append(xu[pick(len(xu), unlabeled_per_domain)])
    return TrainBatch(np.concatenate(lx), np.concatenate(ly), np.concatenate(ux))


# ---------------------------------------------------------------- CSV export

def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _feature_header(k: int) -> list[str]:
    return [f"x_{i}" for i in range(k)]


def _xy_rows(x: np.ndarray, y) -> list[list[str]]:
    rows = []
    for i in range(len(x)):
        row = [FLOAT_FORMAT % v for v in x[i]]
        row.append(str(int(y[i])))
        rows.append(row)
    return rows


def export_benchmark(benchmark: DomainBenchmark, out_dir) -> None:
    """One CSV per (domain, split); unlabeled labels are written as -1 and
    the real labels go to a *_truth.csv sidecar.
    """
    os.makedirs(out_dir, exist_ok=True)
    k = benchmark.config.latent_dim
    header = _feature_header(k) + ["label"]
    for d in benchmark.domain_ids:
        lx, ly = benchmark.labeled(d)
        _write_rows(os.path.join(out_dir, f"domain{d}_labeled.csv"), header, _xy_rows(lx, ly))
        ux = benchmark.unlabeled(d)
        _write_rows(os.path.join(out_dir, f"domain{d}_unlabeled.csv"), header,
                    _xy_rows(ux, np.full(len(ux), -1)))
        truth = benchmark.quarantined_truth(d)
        _write_rows(os.path.join(out_dir, f"domain{d}_unlabeled_truth.csv"), ["label"],
                    [[str(int(t))] for t in truth])
        tx, ty = benchmark.test(d)
        _write_rows(os.path.join(out_dir, f"domain{d}_test.csv"), header, _xy_rows(tx, ty))


def _read_xy(path, k: int) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _feature_header(k) + ["label"]:
            raise DataError(f"unexpected header in {path}")
        xs, ys = [], []
        for row in reader:
            xs.append([float(v) for v in row[:k]])
            ys.append(int(row[k]))
    if not xs:
        raise DataError(f"{path} has no data rows")
    return np.asarray(xs), np.asarray(ys)


def import_benchmark(in_dir, config: BenchmarkConfig) -> DomainBenchmark:
    """Rebuild a benchmark from CSVs written by export_benchmark.

    Generator internals (prototypes, domain specs) are not stored on disk, so
    the returned benchmark carries data and splits only.
    """
    domains = []
    for d in range(config.num_domains):
        lx, ly = _read_xy(os.path.join(in_dir, f"domain{d}_labeled.csv"), config.latent_dim)
        ux, neg = _read_xy(os.path.join(in_dir, f"domain{d}_unlabeled.csv"), config.latent_dim)
        if np.any(neg != -1):
            raise DataError("unlabeled split must carry label -1")
        truth_path = os.path.join(in_dir, f"domain{d}_unlabeled_truth.csv")
        with open(truth_path, newline="") as fh:
            reader = csv.reader(fh)
            if next(reader) != ["label"]:
                raise DataError(f"unexpected header in {truth_path}")
            truth = np.asarray([int(row[0]) for row in reader])
        if len(truth) != len(ux):
            raise DataError("truth sidecar length mismatch")
        tx, ty = _read_xy(os.path.join(in_dir, f"domain{d}_test.csv"), config.latent_dim)
        domains.append(DomainSplits(lx, ly, ux, truth, tx, ty))
    return DomainBenchmark(config, None, None, domains)
