"""Synthetic user-history data with known ground truth, and CSV ingestion.

Each user has a latent preference over item categories. Histories are drawn
from a category-persistent Markov chain over that preference; candidate labels
come from a latent affinity plus logistic noise, so the Bayes-optimal scorer
(the affinity itself) is known and its AUC can be recorded with the data.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, EmptyFile, SchemaMismatch
from .metrics import auc, expected_auc

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SequenceBatch:
    """One user's history (oldest first) and the candidates scored for them."""

    user_id: str
    uih_items: np.ndarray
    uih_cats: np.ndarray
    cand_items: np.ndarray
    cand_cats: np.ndarray
    labels: np.ndarray
    affinity: np.ndarray | None = None  # latent ground truth, synthetic data only

    def __post_init__(self):
        for name in ("uih_items", "uih_cats", "cand_items", "cand_cats"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.float64))
        if self.uih_items.shape != self.uih_cats.shape:
            raise ValueError("history item and category lengths differ")
        if self.cand_items.shape != self.cand_cats.shape or self.cand_items.shape != self.labels.shape:
            raise ValueError("candidate fields have different lengths")
        if self.cand_items.size < 1:
            raise ValueError("a batch needs at least one candidate")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be binary")

    @property
    def history_length(self) -> int:
        return int(self.uih_items.size)

    @property
    def n_candidates(self) -> int:
        return int(self.cand_items.size)

    def select_candidates(self, index) -> "SequenceBatch":
        index = np.asarray(index, dtype=np.int64)
        aff = None if self.affinity is None else self.affinity[index]
        return SequenceBatch(self.user_id, self.uih_items, self.uih_cats, self.cand_items[index],
                             self.cand_cats[index], self.labels[index], aff)

    def to_bytes(self) -> bytes:
        parts = [self.user_id.encode(), self.uih_items.tobytes(), self.uih_cats.tobytes(),
                 self.cand_items.tobytes(), self.cand_cats.tobytes(), self.labels.tobytes()]
        if self.affinity is not None:
            parts.append(np.asarray(self.affinity, dtype=np.float64).tobytes())
        return b"|".join(parts)


@dataclass
class SyntheticConfig:
    n_users: int = 10_000
    n_items: int = 50_000
    n_categories: int = 16
    min_len: int = 64
    max_len: int = 512
    n_candidates: int = 8
    noise: float = 1.0
    latent_dim: int = 16
    persistence: float = 0.7
    concentration: float = 0.3
    affinity_scale: float = 6.0
    item_jitter: float = 0.3
    seed: int = 0

    def validate(self):
        problems = []
        if self.n_users < 1:
            problems.append("n_users must be >= 1")
        if self.n_categories < 1:
            problems.append("n_categories must be >= 1")
        if self.n_items < self.n_categories:
            problems.append("n_items must be >= n_categories")
        if not 0 <= self.min_len <= self.max_len:
            problems.append("need 0 <= min_len <= max_len")
        if self.n_candidates < 1:
            problems.append("n_candidates must be >= 1")
        if self.noise < 0:
            problems.append("noise must be >= 0")
        if not 0 <= self.persistence < 1:
            problems.append("persistence must be in [0, 1)")
        if self.concentration <= 0:
            problems.append("concentration must be > 0")
        if self.latent_dim < 1:
            problems.append("latent_dim must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self):
        return asdict(self)


class SyntheticWorld:
    """Item catalogue and latent structure shared by every user."""

    def __init__(self, config: SyntheticConfig):
        self.config = config.validate()
        c = config
        rng = np.random.default_rng([c.seed, 0])
        centers = rng.normal(size=(c.n_categories, c.latent_dim))
        self.centers = centers / np.linalg.norm(centers, axis=1, keepdims=True)
        # every category gets at least one item
        cats = np.concatenate([np.arange(c.n_categories),
                               rng.integers(0, c.n_categories, size=c.n_items - c.n_categories)])
        self.item_cat = rng.permutation(cats)
        vec = self.centers[self.item_cat] + c.item_jitter * rng.normal(size=(c.n_items, c.latent_dim)) / np.sqrt(c.latent_dim)
        self.item_vec = vec / np.linalg.norm(vec, axis=1, keepdims=True)
        order = np.argsort(self.item_cat, kind="stable")
        self._items_sorted = order
        self._cat_counts = np.bincount(self.item_cat, minlength=c.n_categories)
        self._cat_starts = np.concatenate([[0], np.cumsum(self._cat_counts)[:-1]])
        self.threshold = self._calibrate_threshold(np.random.default_rng([c.seed, 2]))

    def _calibrate_threshold(self, rng, samples=4000):
        c = self.config
        scores = []
        for _ in range(samples // c.n_candidates + 1):
            pi = rng.dirichlet(np.full(c.n_categories, c.concentration))
            items = self._candidate_items(rng, pi, c.n_candidates)
            scores.append(self.item_vec[items] @ (pi @ self.centers))
        return float(np.median(np.concatenate(scores)))

    def _draw_items(self, rng, cats):
        offsets = np.floor(rng.random(cats.size) * self._cat_counts[cats]).astype(np.int64)
        return self._items_sorted[self._cat_starts[cats] + offsets]

    def _candidate_items(self, rng, pi, m):
        c = self.config
        from_pref = rng.choice(c.n_categories, size=m, p=pi)
        uniform = rng.integers(0, c.n_categories, size=m)
        cats = np.where(rng.random(m) < 0.5, from_pref, uniform)
        return self._draw_items(rng, cats)

    def user(self, index: int) -> SequenceBatch:
        c = self.config
        rng = np.random.default_rng([c.seed, 1, index])
        pi = rng.dirichlet(np.full(c.n_categories, c.concentration))
        user_vec = pi @ self.centers

        length = int(rng.integers(c.min_len, c.max_len + 1))
        fresh = rng.choice(c.n_categories, size=length, p=pi)
        stay = rng.random(length) < c.persistence
        if length:
            stay[0] = False
            pos = np.where(stay, 0, np.arange(length))
            uih_cats = fresh[np.maximum.accumulate(pos)]
        else:
            uih_cats = fresh
        uih_items = self._draw_items(rng, uih_cats)

        cand_items = self._candidate_items(rng, pi, c.n_candidates)
        affinity = c.affinity_scale * (self.item_vec[cand_items] @ user_vec - self.threshold)
        eps = rng.logistic(size=c.n_candidates)
        labels = (affinity + c.noise * eps > 0).astype(np.float64)
        return SequenceBatch(f"u{index}", uih_items, uih_cats, cand_items,
                             self.item_cat[cand_items], labels, affinity)

    def bayes_probability(self, affinity):
        """P(label = 1 | latent affinity)."""
        affinity = np.asarray(affinity, dtype=np.float64)
        if self.config.noise == 0:
            return np.where(affinity > 0, 1.0, np.where(affinity < 0, 0.0, 0.5))
        from scipy.special import expit
        return expit(affinity / self.config.noise)


@dataclass
class SyntheticDataset:
    world: SyntheticWorld
    batches: list = field(default_factory=list)

    @property
    def labels(self):
        return np.concatenate([b.labels for b in self.batches])

    @property
    def affinity(self):
        return np.concatenate([b.affinity for b in self.batches])

    def bayes_auc(self) -> float:
        """Empirical AUC of the latent-affinity scorer on the drawn labels."""
        return auc(self.affinity, self.labels)

    def expected_bayes_auc(self) -> float:
        """AUC of the Bayes scorer in expectation over label draws."""
        return expected_auc(self.affinity, self.world.bayes_probability(self.affinity))

    def split(self, train_fraction=0.8):
        cut = int(round(len(self.batches) * train_fraction))
        return self.batches[:cut], self.batches[cut:]


def generate(config: SyntheticConfig, world: SyntheticWorld | None = None) -> Iterator[SequenceBatch]:
    """Stream one :class:`SequenceBatch` per user; identical for identical configs."""
    world = world or SyntheticWorld(config)
    for u in range(config.n_users):
        yield world.user(u)


def generate_dataset(config: SyntheticConfig) -> SyntheticDataset:
    world = SyntheticWorld(config)
    return SyntheticDataset(world, list(generate(config, world)))


# -- CSV ------------------------------------------------------------------------

@dataclass(frozen=True)
class CsvSchema:
    """Column names for one-row-per-candidate files with joined history lists."""

    label: str = "label"
    user_id: str = "user_id"
    item_id: str = "item_id"
    cate_id: str = "cate_id"
    item_history: str = "item_history"
    cate_history: str = "cate_history"
    delimiter: str = "^"

    @property
    def columns(self):
        return [self.label, self.user_id, self.item_id, self.cate_id, self.item_history, self.cate_history]


@dataclass
class IngestReport:
    rows: int = 0
    skipped: int = 0
    problems: list = field(default_factory=list)


def _parse_ids(text, delimiter):
    text = text.strip()
    if not text:
        return np.zeros(0, dtype=np.int64)
    return np.array([int(tok) for tok in text.split(delimiter)], dtype=np.int64)


def ingest_csv(path, schema: CsvSchema | None = None):
    """Read candidate rows and regroup them into per-user batches.

    Consecutive rows sharing user id and history form one batch. Malformed
    rows are skipped and recorded in the returned :class:`IngestReport`.
    Returns ``(batches, report)``.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    report = IngestReport()
    batches = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EmptyFile(f"{path} is empty")
        missing = [c for c in schema.columns if c not in reader.fieldnames]
        if missing:
            raise SchemaMismatch(f"{path}: missing columns {missing}")

        current = None  # (key, history items, history cats, cand items, cand cats, labels)
        for lineno, row in enumerate(reader, start=2):
            report.rows += 1
            try:
                label = float(row[schema.label])
                if label not in (0.0, 1.0):
                    raise ValueError(f"label {row[schema.label]!r} is not binary")
                item = int(row[schema.item_id])
                cat = int(row[schema.cate_id])
                hist_items = _parse_ids(row[schema.item_history], schema.delimiter)
                hist_cats = _parse_ids(row[schema.cate_history], schema.delimiter)
                if hist_items.size != hist_cats.size:
                    raise ValueError("item and category histories differ in length")
            except (ValueError, TypeError, AttributeError) as exc:
                report.skipped += 1
                report.problems.append((lineno, str(exc)))
                continue
            key = (row[schema.user_id], row[schema.item_history], row[schema.cate_history])
            if current is None or current[0] != key:
                if current is not None:
                    batches.append(_close(current))
                current = (key, hist_items, hist_cats, [], [], [])
            current[3].append(item)
            current[4].append(cat)
            current[5].append(label)
        if current is not None:
            batches.append(_close(current))
    if report.skipped:
        log.warning("skipped %d malformed rows in %s", report.skipped, path)
    return batches, report


def _close(state):
    key, hist_items, hist_cats, items, cats, labels = state
    return SequenceBatch(key[0], hist_items, hist_cats, items, cats, labels)


def write_csv(batches, path, schema: CsvSchema | None = None):
    schema = schema or CsvSchema()
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(schema.columns)
        for b in batches:
            hist_items = schema.delimiter.join(str(i) for i in b.uih_items)
            hist_cats = schema.delimiter.join(str(i) for i in b.uih_cats)
            for item, cat, label in zip(b.cand_items, b.cand_cats, b.labels):
                writer.writerow([int(label), b.user_id, int(item), int(cat), hist_items, hist_cats])
