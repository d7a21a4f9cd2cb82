"""Sequences of time-series segments: synthetic generation, missing values, I/O.

A :class:`Sequence` holds T segments. Segment inputs are times relative to
the segment start, in seconds (so they lie in ``[0, 1)`` for one-second
segments). Masked-out outputs are stored as NaN so that any accidental read
poisons downstream likelihoods instead of passing silently.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np

CSV_COLUMNS = ("segment", "timestamp", "value", "observed", "label")


class CsvFormatError(ValueError):
    """Malformed dataset file; carries the offending line and column."""

    def __init__(self, message: str, line: int | None = None, column: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{': '.join([', '.join(where), message]) if where else message}")
        self.line = line
        self.column = column


@dataclass(frozen=True)
class Sequence:
    """Ordered segments with per-point observation masks.

    Attributes:
        x: per segment, strictly increasing input times.
        y: per segment, outputs (NaN where masked).
        mask: per segment, True where the point is observed.
        labels: optional (T,) true states, 1-based.
        sample_rate: sampling frequency in Hz.
    """

    x: tuple[np.ndarray, ...]
    y: tuple[np.ndarray, ...]
    mask: tuple[np.ndarray, ...]
    labels: np.ndarray | None = None
    sample_rate: float = 1.0

    def __post_init__(self):
        x = tuple(np.asarray(v, dtype=float) for v in self.x)
        y = tuple(np.asarray(v, dtype=float) for v in self.y)
        mask = tuple(np.asarray(v, dtype=bool) for v in self.mask)
        if not (len(x) == len(y) == len(mask)):
            raise ValueError("x, y and mask must have one entry per segment")
        for t, (xi, yi, mi) in enumerate(zip(x, y, mask)):
            if not (xi.shape == yi.shape == mi.shape) or xi.ndim != 1:
                raise ValueError(f"segment {t}: x, y and mask lengths differ")
            if xi.size > 1 and np.any(np.diff(xi) <= 0):
                raise ValueError(f"segment {t}: inputs must be strictly increasing")
        labels = None if self.labels is None else np.asarray(self.labels, dtype=int)
        if labels is not None and labels.shape != (len(x),):
            raise ValueError("need one label per segment")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    def __len__(self) -> int:
        return len(self.x)

    @classmethod
    def from_arrays(cls, x, ys, labels=None, sample_rate: float = 1.0) -> "Sequence":
        """Fully observed sequence where every segment shares inputs ``x``."""
        x = np.asarray(x, dtype=float)
        ys = [np.asarray(v, dtype=float) for v in ys]
        return cls(
            tuple(x for _ in ys), tuple(ys), tuple(np.ones(x.size, bool) for _ in ys),
            labels, sample_rate,
        )

    @property
    def fully_observed(self) -> bool:
        return all(m.all() for m in self.mask)

    def observed_segments(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """``(x, y)`` of observed points per segment (the no-fill path)."""
        return [drop_missing(self, t) for t in range(len(self))]

    def subset(self, start: int, stop: int) -> "Sequence":
        labels = None if self.labels is None else self.labels[start:stop]
        return Sequence(self.x[start:stop], self.y[start:stop], self.mask[start:stop],
                        labels, self.sample_rate)


# --- synthetic sinusoid protocol ---------------------------------------------------

N_SYNTH_STATES = 8


def synthetic_transition_matrix() -> np.ndarray:
    """8-state chain with two groups joined by deterministic bridges.

    States 1-3 stay w.p. 0.7 and advance w.p. 0.3, states 5-7 stay w.p. 0.3
    and advance w.p. 0.7; state 4 always moves to 5 and state 8 to 1.
    Indices in the returned array are 0-based.
    """
    A = np.zeros((N_SYNTH_STATES, N_SYNTH_STATES))
    for s, stay, move in [(0, 0.7, 0.3), (1, 0.7, 0.3), (2, 0.7, 0.3),
                          (4, 0.3, 0.7), (5, 0.3, 0.7), (6, 0.3, 0.7)]:
        A[s, s] = stay
        A[s, s + 1] = move
    A[3, 4] = 1.0
    A[7, 0] = 1.0
    return A


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the sum-of-sinusoids generator.

    Attributes:
        frequencies: (S, Q) angular factors ``omega`` in ``sin(omega * pi * t)``.
        weights: (S, Q) normalized amplitude weights, each row summing to 1.
        sample_rate: points per one-second segment.
        n_segments: T, the length of each of the train and test halves.
        noise_std: standard deviation of the additive Gaussian noise.
        transition: (S, S) state transition matrix.
    """

    frequencies: np.ndarray
    weights: np.ndarray
    sample_rate: int
    n_segments: int
    noise_std: float = 0.1
    transition: np.ndarray | None = None

    def __post_init__(self):
        freq = np.atleast_2d(np.asarray(self.frequencies, dtype=float))
        w = np.atleast_2d(np.asarray(self.weights, dtype=float))
        if freq.shape != w.shape:
            raise ValueError("frequency and weight tables must have the same shape")
        if np.any(freq < 0) or np.any(freq > 20):
            raise ValueError("frequencies must lie in [0, 20]")
        if not np.allclose(w.sum(axis=1), 1.0):
            raise ValueError("weight rows must sum to 1")
        if self.sample_rate < 2 or self.n_segments < 1 or self.noise_std < 0:
            raise ValueError("invalid sample rate, segment count or noise level")
        A = synthetic_transition_matrix() if self.transition is None else np.asarray(self.transition, float)
        if A.shape != (freq.shape[0], freq.shape[0]) or not np.allclose(A.sum(axis=1), 1.0):
            raise ValueError("transition matrix must be row-stochastic with one row per state")
        object.__setattr__(self, "frequencies", freq)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "transition", A)

    @property
    def n_states(self) -> int:
        return self.frequencies.shape[0]

    @property
    def n_components(self) -> int:
        return self.frequencies.shape[1]

    @classmethod
    def random(cls, n_components: int, sample_rate: int, n_segments: int,
               rng: np.random.Generator, noise_std: float = 0.1,
               n_states: int = N_SYNTH_STATES, transition=None) -> "SyntheticSpec":
        """Draw frequencies from U[0, 20] and weights from U[0, 1], normalized by their sum."""
        freq = rng.uniform(0.0, 20.0, size=(n_states, n_components))
        raw = rng.uniform(0.0, 1.0, size=(n_states, n_components))
        return cls(freq, raw / raw.sum(axis=1, keepdims=True), sample_rate, n_segments,
                   noise_std, transition)


def stationary_distribution(A: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eig(np.asarray(A, dtype=float).T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    return v / v.sum()


def sample_chain(A: np.ndarray, length: int, rng: np.random.Generator,
                 initial: int | None = None) -> np.ndarray:
    """0-based state path of a Markov chain; uniform start unless ``initial`` is given."""
    A = np.asarray(A, dtype=float)
    cdf = np.cumsum(A, axis=1)
    states = np.empty(length, dtype=int)
    s = int(rng.integers(A.shape[0])) if initial is None else int(initial)
    u = rng.uniform(size=length)
    for t in range(length):
        states[t] = s
        s = min(int(np.searchsorted(cdf[s], u[t], side="right")), A.shape[0] - 1)
    return states


def gen_dataset(spec: SyntheticSpec, rng: np.random.Generator,
                duration_factor: int = 2) -> tuple[Sequence, Sequence]:
    """Generate ``duration_factor * T`` one-second segments and split train/test.

    The signal is one continuous series in absolute time; each segment keeps
    relative inputs ``j / Hz``. The first T segments form the training set.
    """
    hz = int(spec.sample_rate)
    total = duration_factor * spec.n_segments
    states = sample_chain(spec.transition, total, rng)
    rel = np.arange(hz) / hz
    ys = []
    for t, s in enumerate(states):
        t_abs = t + rel
        clean = np.sin(spec.frequencies[s][None, :] * np.pi * t_abs[:, None]) @ spec.weights[s]
        ys.append(clean + spec.noise_std * rng.standard_normal(hz))
    seq = Sequence.from_arrays(rel, ys, labels=states + 1, sample_rate=hz)
    return seq.subset(0, spec.n_segments), seq.subset(spec.n_segments, total)


# --- missing values ------------------------------------------------------------------

@dataclass(frozen=True)
class MissingSpec:
    """Corruption pattern: ``"rm"`` (random points) or ``"im"`` (one interval)."""

    mode: str
    percent: float
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("rm", "im"):
            raise ValueError(f"missing mode must be 'rm' or 'im', got {self.mode!r}")
        if not 0.0 < self.percent < 100.0:
            raise ValueError(f"missing percent must lie in (0, 100), got {self.percent}")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "MissingSpec":
        """Parse tags such as ``rm25`` or ``im50``."""
        text = text.strip().lower()
        try:
            return cls(text[:2], float(text[2:]), seed)
        except ValueError as err:
            raise ValueError(f"cannot parse missing option {text!r}: {err}") from None


def inject_missing(seq: Sequence, spec: MissingSpec, rng: np.random.Generator | None = None) -> Sequence:
    """Mask ``round(percent / 100 * n_t)`` points of every segment.

    Raises:
        ValueError: if a segment would lose all of its points.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    ys, masks = [], []
    for t, (y, m) in enumerate(zip(seq.y, seq.mask)):
        n = y.size
        count = int(round(spec.percent / 100.0 * n))
        if count >= n:
            raise ValueError(f"segment {t}: masking {count} of {n} points leaves nothing observed")
        new = np.ones(n, dtype=bool)
        if spec.mode == "rm":
            new[rng.choice(n, size=count, replace=False)] = False
        else:
            start = int(rng.integers(0, n - count + 1))
            new[start:start + count] = False
        mask = m & new
        if not mask.any():
            raise ValueError(f"segment {t}: no observed points remain")
        y = y.copy()
        y[~mask] = np.nan
        ys.append(y)
        masks.append(mask)
    return replace(seq, y=tuple(ys), mask=tuple(masks))


def fill_out(seq: Sequence) -> Sequence:
    """Replace each masked value by the nearest observed value in time.

    Ties go to the earlier observation. The returned mask is all-observed.
    """
    ys = []
    for t, (x, y, m) in enumerate(zip(seq.x, seq.y, seq.mask)):
        if m.all():
            ys.append(y.copy())
            continue
        if not m.any():
            raise ValueError(f"segment {t} has no observed points to fill from")
        xo, yo = x[m], y[m]
        xm = x[~m]
        right = np.clip(np.searchsorted(xo, xm), 0, xo.size - 1)
        left = np.clip(right - 1, 0, xo.size - 1)
        use_left = np.abs(xm - xo[left]) <= np.abs(xo[right] - xm)
        filled = y.copy()
        filled[~m] = np.where(use_left, yo[left], yo[right])
        ys.append(filled)
    return replace(seq, y=tuple(ys), mask=tuple(np.ones(v.size, bool) for v in seq.y))


def drop_missing(seq: Sequence, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Observed ``(x, y)`` pairs of segment ``t`` in their original order."""
    m = seq.mask[t]
    if not m.any():
        raise ValueError(f"segment {t} has no observed points")
    if m.all():
        return seq.x[t], seq.y[t]
    return seq.x[t][m], seq.y[t][m]


# --- CSV ----------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_csv(seq: Sequence, path) -> None:
    """Write one row per point with the columns of ``CSV_COLUMNS``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for t in range(len(seq)):
            label = "" if seq.labels is None else str(int(seq.labels[t]))
            for xv, yv, mv in zip(seq.x[t], seq.y[t], seq.mask[t]):
                writer.writerow([t, _fmt(xv), _fmt(yv), int(mv), label])


def load_csv(path, sample_rate: float | None = None) -> Sequence:
    """Read a dataset written by :func:`save_csv`.

    The sample rate is inferred from the first segment's time step unless given.

    Raises:
        CsvFormatError: on a missing column or malformed row.
    """
    rows: dict[int, list] = {}
    labels: dict[int, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError("empty file", line=1) from None
        header = [h.strip() for h in header]
        for col in CSV_COLUMNS:
            if col not in header:
                raise CsvFormatError("missing required column", line=1, column=col)
        pos = {c: header.index(c) for c in CSV_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < len(header):
                raise CsvFormatError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                seg = int(row[pos["segment"]])
            except ValueError:
                raise CsvFormatError("segment id is not an integer", lineno, "segment") from None
            try:
                ts = float(row[pos["timestamp"]])
            except ValueError:
                raise CsvFormatError("timestamp is not a number", lineno, "timestamp") from None
            raw = row[pos["value"]].strip()
            try:
                val = float(raw) if raw else math.nan
            except ValueError:
                raise CsvFormatError("value is not a number", lineno, "value") from None
            obs = row[pos["observed"]].strip()
            if obs not in ("0", "1"):
                raise CsvFormatError("observed flag must be 0 or 1", lineno, "observed")
            observed = obs == "1" and not math.isnan(val)
            lab = row[pos["label"]].strip()
            if seg in labels and labels[seg] != lab:
                raise CsvFormatError("label changes within a segment", lineno, "label")
            labels[seg] = lab
            rows.setdefault(seg, []).append((ts, val if observed else math.nan, observed))
    if not rows:
        raise CsvFormatError("no data rows")
    order = sorted(rows)
    if order != list(range(len(order))):
        raise CsvFormatError("segment ids must be 0..T-1")
    xs, ys, ms = [], [], []
    for seg in order:
        arr = rows[seg]
        xs.append(np.array([r[0] for r in arr]))
        ys.append(np.array([r[1] for r in arr]))
        ms.append(np.array([r[2] for r in arr], dtype=bool))
    lab_vals = [labels[s] for s in order]
    if all(v == "" for v in lab_vals):
        lab_arr = None
    elif any(v == "" for v in lab_vals):
        raise CsvFormatError("labels must be given for all segments or none", column="label")
    else:
        lab_arr = np.array([int(v) for v in lab_vals])
    if sample_rate is None:
        steps = np.diff(xs[0])
        sample_rate = 1.0 / float(np.median(steps)) if steps.size else 1.0
    return Sequence(tuple(xs), tuple(ys), tuple(ms), lab_arr, sample_rate)


# --- UCR archive -------------------------------------------------------------------

def load_ucr(path) -> dict[int, list[np.ndarray]]:
    """Read a UCR-format file (``label, v1..vn`` per row) into class bags."""
    bags: dict[int, list[np.ndarray]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t") if "\t" in line else line.replace(",", " ").split()
        try:
            values = [float(p) for p in parts]
        except ValueError:
            raise CsvFormatError("non-numeric field", line=lineno) from None
        if len(values) < 2:
            raise CsvFormatError("row needs a label and at least one value", line=lineno)
        bags.setdefault(int(values[0]), []).append(np.array(values[1:]))
    return bags


def ucr_protocol_sample(
    table: Mapping[int, list[np.ndarray]],
    n_classes: int,
    stay_prob: float,
    rng: np.random.Generator,
    n_train: int = 100,
    n_test: int = 50,
    downsample: int = 2,
) -> tuple[Sequence, Sequence]:
    """Chain of class draws with a stay/move Markov structure over chosen classes.

    A move jumps uniformly to one of the other classes. Each step emits a
    series drawn from the current class's bag, keeping every ``downsample``-th
    point. Labels are 1..n_classes in the order of the chosen classes.
    """
    available = sorted(k for k, v in table.items() if len(v) > 0)
    if len(available) < n_classes:
        raise ValueError(f"need {n_classes} classes with data, found {len(available)}")
    if not 0.0 <= stay_prob <= 1.0:
        raise ValueError("stay probability must lie in [0, 1]")
    chosen = [available[i] for i in rng.choice(len(available), size=n_classes, replace=False)]
    A = np.full((n_classes, n_classes), (1.0 - stay_prob) / max(n_classes - 1, 1))
    np.fill_diagonal(A, stay_prob if n_classes > 1 else 1.0)
    total = n_train + n_test
    states = sample_chain(A, total, rng)
    ys = []
    for s in states:
        bag = table[chosen[s]]
        ys.append(np.asarray(bag[int(rng.integers(len(bag)))], dtype=float)[::downsample])
    lengths = {y.size for y in ys}
    if len(lengths) != 1:
        raise ValueError("class series must share a common length")
    n = lengths.pop()
    seq = Sequence.from_arrays(np.arange(n) / n, ys, labels=states + 1, sample_rate=n)
    return seq.subset(0, n_train), seq.subset(n_train, total)
