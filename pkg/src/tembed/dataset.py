"""Irregular multivariate series and their fixed-grid feature views.

The pipeline goes: load (or generate) :class:`IrregularSeries`, fit
normalization stats on training episodes only, normalize, bin each series
onto a fixed time grid (:func:`bin_series`), then widen the binned features
with either missingness indicators (:func:`attach_mask`) or sinusoidal time
embeddings of the grid times (:func:`attach_te`). Observation dropout and
fold splitting operate on the series level and are deterministic under
explicit seeds.

File formats. Observations: CSV with header ``episode_id,time_hours,channel,value``.
Labels: CSV with header ``episode_id,label``. Schema: JSON mapping channel
names to kinds (``real`` or ``categorical`` with a cardinality). Floats are
written with ``repr`` so a write/read cycle reproduces the exact bits.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ._util import atomic_write_text, float_repr, make_rng
from .encoding import EncoderConfig, te_batch

HOURS_PER_DAY = 24.0

DATA_HEADER = ["episode_id", "time_hours", "channel", "value"]
LABEL_HEADER = ["episode_id", "label"]


@dataclass(frozen=True)
class ChannelSpec:
    """One channel: a name plus a kind, ``real`` or ``categorical``.

    Categorical channels carry a cardinality and expand to that many
    one-hot columns when binned; real channels occupy a single column.
    """

    name: str
    kind: str
    cardinality: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("real", "categorical"):
            raise ValueError(f"channel kind must be 'real' or 'categorical', got {self.kind!r}")
        if self.kind == "categorical":
            if not isinstance(self.cardinality, int) or self.cardinality < 2:
                raise ValueError(
                    f"categorical channel {self.name!r} needs an integer cardinality >= 2"
                )
        elif self.cardinality is not None:
            raise ValueError(f"real channel {self.name!r} must not declare a cardinality")

    @property
    def n_columns(self) -> int:
        return 1 if self.kind == "real" else int(self.cardinality)


@dataclass(frozen=True)
class Schema:
    """Ordered channel declarations shared by every episode of a dataset."""

    channels: tuple[ChannelSpec, ...]

    def __post_init__(self) -> None:
        if not self.channels:
            raise ValueError("schema needs at least one channel")
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise ValueError("channel names must be unique")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    def index_of(self, name: str) -> int:
        for i, c in enumerate(self.channels):
            if c.name == name:
                return i
        raise KeyError(f"unknown channel {name!r}")

    def to_dict(self) -> dict:
        out = []
        for c in self.channels:
            entry: dict = {"name": c.name, "kind": c.kind}
            if c.kind == "categorical":
                entry["cardinality"] = c.cardinality
            out.append(entry)
        return {"channels": out}

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        if set(d) != {"channels"}:
            raise ValueError(f"schema document must have exactly one key 'channels', got {sorted(d)}")
        specs = []
        for entry in d["channels"]:
            allowed = {"name", "kind", "cardinality"}
            unknown = set(entry) - allowed
            if unknown:
                raise ValueError(f"unknown schema keys {sorted(unknown)} in channel entry {entry!r}")
            specs.append(
                ChannelSpec(
                    name=entry["name"],
                    kind=entry["kind"],
                    cardinality=entry.get("cardinality"),
                )
            )
        return cls(channels=tuple(specs))


def save_schema(path: str, schema: Schema) -> None:
    atomic_write_text(path, json.dumps(schema.to_dict(), indent=2, sort_keys=True) + "\n")


def load_schema(path: str) -> Schema:
    with open(path) as fh:
        return Schema.from_dict(json.load(fh))


@dataclass
class IrregularSeries:
    """Timestamped observations of one episode, time-sorted.

    ``times`` are hours >= 0; ``channel_idx`` indexes into the schema;
    ``values`` hold the measurement (for categorical channels, the integer
    category). ``label`` is the supervision target, in the task's native
    unit (hours for regression tasks). ``normalized`` records whether
    training statistics have been applied, so a second application can be
    refused.
    """

    episode_id: str
    times: np.ndarray
    channel_idx: np.ndarray
    values: np.ndarray
    label: float | None = None
    normalized: bool = False

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=np.float64)
        self.channel_idx = np.asarray(self.channel_idx, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        n = self.times.shape[0]
        if self.channel_idx.shape[0] != n or self.values.shape[0] != n:
            raise ValueError(
                f"episode {self.episode_id!r}: times, channels, values must have equal length"
            )
        if n and not np.isfinite(self.times).all():
            raise ValueError(f"episode {self.episode_id!r}: non-finite observation time")
        if n and self.times.min(initial=0.0) < 0:
            raise ValueError(f"episode {self.episode_id!r}: negative observation time")
        if n and not np.isfinite(self.values).all():
            raise ValueError(f"episode {self.episode_id!r}: non-finite observation value")
        order = np.argsort(self.times, kind="stable")
        if not np.array_equal(order, np.arange(n)):
            self.times = self.times[order]
            self.channel_idx = self.channel_idx[order]
            self.values = self.values[order]

    @property
    def n_obs(self) -> int:
        return int(self.times.shape[0])


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and standard deviation fitted on training episodes.

    Population convention. Categorical channels and degenerate cases
    (empty or constant channels) get mean 0 / std 1 so that applying the
    stats never divides by zero and never touches category codes.
    """

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
        )


@dataclass
class BinnedEpisode:
    """Fixed-grid view of one episode.

    ``X`` holds observed/imputed values (one column per real channel,
    one-hot columns per categorical channel, plus whatever a feature
    attachment appended). ``M`` marks bins with at least one observation
    per channel; ``D`` is hours since the channel was last observed, with
    D[0] = 0 and D[j] = 0 wherever M[j] = 1, else D[j-1] + bin_width.
    ``feature_mode`` records which attachment built X: ``base``, ``mask``
    (M and D/window appended), or ``te`` (grid-time embeddings appended).
    """

    episode_id: str
    grid_times: np.ndarray
    X: np.ndarray
    M: np.ndarray
    D: np.ndarray
    label: float | None
    window: float
    bin_width: float
    feature_names: tuple[str, ...]
    feature_mode: str = "base"
    all_missing: bool = False

    @property
    def steps(self) -> int:
        return int(self.X.shape[0])


def _parse_float(text: str, what: str, line_no: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ValueError(f"line {line_no}: {what} {text!r} is not a number") from None
    if not math.isfinite(v):
        raise ValueError(f"line {line_no}: {what} {text!r} is not finite")
    return v


def _check_categorical(value: float, spec: ChannelSpec, where: str) -> None:
    if spec.kind != "categorical":
        return
    if value != int(value) or not (0 <= value < spec.cardinality):
        raise ValueError(
            f"{where}: categorical channel {spec.name!r} takes integer values in "
            f"[0, {spec.cardinality}), got {value!r}"
        )


def load_labels(path: str) -> dict[str, float]:
    """Read an ``episode_id,label`` CSV into a dict."""
    labels: dict[str, float] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LABEL_HEADER:
            raise ValueError(f"{path}: expected header {','.join(LABEL_HEADER)}, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"line {line_no}: expected 2 fields, got {len(row)}")
            eid, raw = row
            if eid in labels:
                raise ValueError(f"line {line_no}: duplicate label for episode {eid!r}")
            labels[eid] = _parse_float(raw, "label", line_no)
    return labels


def load_csv(data_path: str, schema: Schema, label_path: str | None = None) -> list[IrregularSeries]:
    """Read observation rows into one time-sorted series per episode.

    Episodes come back sorted by id. When ``label_path`` is given, every
    episode must have a label and every label an episode; mismatches are
    reported rather than silently dropped.
    """
    per_episode: dict[str, list[tuple[float, int, float]]] = {}
    with open(data_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if header != DATA_HEADER:
            raise ValueError(f"{data_path}: expected header {','.join(DATA_HEADER)}, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"line {line_no}: expected 4 fields, got {len(row)}")
            eid, t_raw, channel, v_raw = row
            t = _parse_float(t_raw, "time", line_no)
            if t < 0:
                raise ValueError(f"line {line_no}: negative time {t_raw!r}")
            try:
                ch = schema.index_of(channel)
            except KeyError:
                raise ValueError(f"line {line_no}: unknown channel {channel!r}") from None
            v = _parse_float(v_raw, "value", line_no)
            _check_categorical(v, schema.channels[ch], f"line {line_no}")
            per_episode.setdefault(eid, []).append((t, ch, v))

    labels = load_labels(label_path) if label_path is not None else None
    if labels is not None:
        missing = sorted(set(per_episode) - set(labels))
        if missing:
            raise ValueError(f"episodes without labels: {missing[:5]} (total {len(missing)})")
        orphans = sorted(set(labels) - set(per_episode))
        if orphans:
            raise ValueError(f"labels without episodes: {orphans[:5]} (total {len(orphans)})")

    out = []
    for eid in sorted(per_episode):
        rows = per_episode[eid]
        out.append(
            IrregularSeries(
                episode_id=eid,
                times=np.array([r[0] for r in rows]),
                channel_idx=np.array([r[1] for r in rows]),
                values=np.array([r[2] for r in rows]),
                label=None if labels is None else labels[eid],
            )
        )
    return out


def write_csv(episodes: Sequence[IrregularSeries], schema: Schema, data_path: str,
              label_path: str | None = None) -> None:
    """Write observation (and optionally label) CSVs that round-trip exactly."""
    lines = [",".join(DATA_HEADER)]
    for ep in episodes:
        for t, ch, v in zip(ep.times, ep.channel_idx, ep.values):
            lines.append(
                f"{ep.episode_id},{float_repr(t)},{schema.channels[int(ch)].name},{float_repr(v)}"
            )
    atomic_write_text(data_path, "\n".join(lines) + "\n")
    if label_path is not None:
        label_lines = [",".join(LABEL_HEADER)]
        for ep in episodes:
            if ep.label is None:
                raise ValueError(f"episode {ep.episode_id!r} has no label to write")
            label_lines.append(f"{ep.episode_id},{float_repr(ep.label)}")
        atomic_write_text(label_path, "\n".join(label_lines) + "\n")


def fit_norm(train: Sequence[IrregularSeries], schema: Schema) -> NormStats:
    """Pool all training observations per real channel and fit mean/std.

    Only training episodes may be passed here; applying the result to
    validation or test data is how those sets stay leak-free.
    """
    n = schema.n_channels
    mean = np.zeros(n)
    std = np.ones(n)
    for ch, spec in enumerate(schema.channels):
        if spec.kind != "real":
            continue
        pooled = np.concatenate(
            [ep.values[ep.channel_idx == ch] for ep in train] or [np.empty(0)]
        )
        if pooled.size == 0:
            warnings.warn(
                f"channel {spec.name!r} has no training observations; using mean 0, std 1",
                stacklevel=2,
            )
            continue
        mean[ch] = float(pooled.mean())
        s = float(pooled.std())
        std[ch] = s if s > 0 else 1.0
    return NormStats(mean=mean, std=std)


def apply_norm(series: IrregularSeries, stats: NormStats, schema: Schema) -> IrregularSeries:
    """Return a copy with real-channel values standardized by ``stats``.

    Refuses already-normalized input: standardizing twice would shift the
    data again, so the flag makes the mistake loud instead of silent.
    """
    if series.normalized:
        raise ValueError(f"episode {series.episode_id!r} is already normalized")
    values = series.values.copy()
    for ch, spec in enumerate(schema.channels):
        if spec.kind != "real":
            continue
        sel = series.channel_idx == ch
        values[sel] = (values[sel] - stats.mean[ch]) / stats.std[ch]
    return IrregularSeries(
        episode_id=series.episode_id,
        times=series.times.copy(),
        channel_idx=series.channel_idx.copy(),
        values=values,
        label=series.label,
        normalized=True,
    )


def _steps_for(window: float, bin_width: float) -> int:
    steps = math.ceil(window / bin_width)
    # guard against float noise pushing an exact ratio past the next integer
    if steps > 1 and (steps - 1) * bin_width >= window:
        steps -= 1
    return steps


def bin_series(
    series: IrregularSeries,
    schema: Schema,
    window: float,
    bin_width: float,
    lead_values: np.ndarray | None = None,
) -> BinnedEpisode:
    """Place observations on a fixed grid of ceil(window/bin_width) bins.

    Within a bin and channel the last observation wins. Unobserved bins
    are forward-filled; bins before a channel's first observation take
    ``lead_values`` for real channels (default 0, the training mean of
    normalized data) and an all-zero one-hot for categorical channels.
    Observations at or beyond ``window`` are ignored.
    """
    if not (window > 0 and bin_width > 0):
        raise ValueError(f"window and bin_width must be positive, got {window}, {bin_width}")
    n_ch = schema.n_channels
    if lead_values is None:
        lead_values = np.zeros(n_ch)
    steps = _steps_for(window, bin_width)

    raw = np.zeros((steps, n_ch))
    M = np.zeros((steps, n_ch))
    in_window = series.times < window
    times = series.times[in_window]
    chans = series.channel_idx[in_window]
    vals = series.values[in_window]
    bins = np.minimum((times / bin_width).astype(np.int64), steps - 1)
    for j, ch, v in zip(bins, chans, vals):
        _check_categorical(v, schema.channels[int(ch)], f"episode {series.episode_id!r}")
        raw[j, ch] = v
        M[j, ch] = 1.0

    step_idx = np.arange(steps)
    seen = np.where(M == 1.0, step_idx[:, None], -1)
    last_obs = np.maximum.accumulate(seen, axis=0)
    D = (step_idx[:, None] - np.maximum(last_obs, 0)) * bin_width

    columns = []
    names = []
    for ch, spec in enumerate(schema.channels):
        filled_idx = last_obs[:, ch]
        if spec.kind == "real":
            col = np.where(filled_idx >= 0, raw[np.maximum(filled_idx, 0), ch], lead_values[ch])
            columns.append(col[:, None])
            names.append(spec.name)
        else:
            onehot = np.zeros((steps, spec.cardinality))
            observed_rows = filled_idx >= 0
            cats = raw[np.maximum(filled_idx, 0), ch].astype(np.int64)
            onehot[step_idx[observed_rows], cats[observed_rows]] = 1.0
            columns.append(onehot)
            names.extend(f"{spec.name}={level}" for level in range(spec.cardinality))
    X = np.hstack(columns)
    if not np.isfinite(X).all():
        raise ValueError(f"episode {series.episode_id!r}: non-finite feature after imputation")

    return BinnedEpisode(
        episode_id=series.episode_id,
        grid_times=step_idx * float(bin_width),
        X=X,
        M=M,
        D=D,
        label=series.label,
        window=float(window),
        bin_width=float(bin_width),
        feature_names=tuple(names),
        all_missing=times.shape[0] == 0,
    )


def attach_mask(ep: BinnedEpisode) -> BinnedEpisode:
    """Append missingness indicators and window-scaled observation gaps to X.

    Adds 2 columns per channel: M as-is and D divided by the window so the
    gap feature stays in [0, 1].
    """
    if ep.feature_mode != "base":
        raise ValueError(f"features already attached (mode {ep.feature_mode!r})")
    n_ch = ep.M.shape[1]
    X = np.hstack([ep.X, ep.M, ep.D / ep.window])
    names = ep.feature_names + tuple(
        f"ch{ch}:observed" for ch in range(n_ch)
    ) + tuple(f"ch{ch}:gapfrac" for ch in range(n_ch))
    return replace(ep, X=X, feature_names=names, feature_mode="mask")


def attach_te(ep: BinnedEpisode, cfg: EncoderConfig) -> BinnedEpisode:
    """Append the time embedding of each bin's grid time to X.

    This is the concatenated integration: the embedding columns carry the
    clock, so the mask and gap features are left out of the feature set.
    """
    if ep.feature_mode != "base":
        raise ValueError(f"features already attached (mode {ep.feature_mode!r})")
    if cfg.base_kind != "temporal":
        raise ValueError("attach_te needs a temporal encoder config")
    if cfg.max_time < ep.window:
        raise ValueError(
            f"encoder max_time {cfg.max_time:g} is smaller than the window {ep.window:g}; "
            "grid times would alias"
        )
    te_cols = te_batch(ep.grid_times, cfg)
    X = np.hstack([ep.X, te_cols])
    names = ep.feature_names + tuple(f"te_{i}" for i in range(cfg.dim))
    return replace(ep, X=X, feature_names=names, feature_mode="te")


def drop_observations(series: IrregularSeries, keep_fraction: float, rng_seed) -> IrregularSeries:
    """Keep each observation independently with probability ``keep_fraction``.

    Deterministic under a fixed seed (an int or a sequence of ints); the
    label is untouched and an episode may come back empty.
    """
    if not (0 < keep_fraction <= 1):
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if keep_fraction == 1.0:
        return replace(series)
    entropy = [rng_seed] if isinstance(rng_seed, (int, np.integer)) else list(rng_seed)
    rng = make_rng(entropy)
    keep = rng.random(series.n_obs) < keep_fraction
    return IrregularSeries(
        episode_id=series.episode_id,
        times=series.times[keep],
        channel_idx=series.channel_idx[keep],
        values=series.values[keep],
        label=series.label,
        normalized=series.normalized,
    )


def _canonical_permutation(episodes: Sequence[IrregularSeries], rng_seed) -> list[int]:
    """Seeded shuffle of episodes in episode-id order, so the result does not
    depend on the order episodes were passed in."""
    ids = [ep.episode_id for ep in episodes]
    if len(set(ids)) != len(ids):
        raise ValueError("episode ids must be unique")
    by_id = sorted(range(len(ids)), key=lambda i: ids[i])
    entropy = [rng_seed] if isinstance(rng_seed, (int, np.integer)) else list(rng_seed)
    rng = make_rng(entropy)
    return [by_id[j] for j in rng.permutation(len(by_id))]


def split_folds(
    episodes: Sequence[IrregularSeries],
    k: int,
    rng_seed,
    stratify: bool = True,
) -> np.ndarray:
    """Assign each episode to one of k folds, returned aligned to the input.

    Episodes are dealt round-robin from a seeded shuffle of the id-sorted
    list, class by class when stratifying, so fold contents depend only on
    (ids, labels, seed) and fold sizes differ by at most one overall and
    per class.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(episodes) < k:
        raise ValueError(f"cannot split {len(episodes)} episodes into {k} folds")
    perm = _canonical_permutation(episodes, rng_seed)

    if stratify:
        for i in perm:
            if episodes[i].label is None:
                raise ValueError("stratified split needs a label on every episode")
        groups: dict[float, list[int]] = {}
        for i in perm:
            groups.setdefault(float(episodes[i].label), []).append(i)
        ordered = [i for key in sorted(groups) for i in groups[key]]
    else:
        ordered = perm

    fold = np.empty(len(episodes), dtype=np.int64)
    for position, i in enumerate(ordered):
        fold[i] = position % k
    return fold


def train_test_split(
    episodes: Sequence[IrregularSeries],
    test_fraction: float,
    rng_seed,
    stratify: bool = True,
) -> tuple[list[IrregularSeries], list[IrregularSeries]]:
    """Carve a held-out test set off the pool, order-invariantly and seeded."""
    if not (0 < test_fraction < 1):
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    perm = _canonical_permutation(episodes, rng_seed)
    if stratify:
        for i in perm:
            if episodes[i].label is None:
                raise ValueError("stratified split needs a label on every episode")
        groups: dict[float, list[int]] = {}
        for i in perm:
            groups.setdefault(float(episodes[i].label), []).append(i)
        test_idx: set[int] = set()
        for key in sorted(groups):
            members = groups[key]
            n_test = int(round(len(members) * test_fraction))
            test_idx.update(members[:n_test])
    else:
        n_test = int(round(len(perm) * test_fraction))
        test_idx = set(perm[:n_test])
    if not test_idx:
        test_idx = {perm[0]}
    if len(test_idx) == len(episodes):
        test_idx.discard(perm[-1])
    pool = [ep for i, ep in enumerate(episodes) if i not in test_idx]
    test = [ep for i, ep in enumerate(episodes) if i in test_idx]
    return pool, test


def label_convert(value, direction: str):
    """Convert labels between hours and days (divide or multiply by 24)."""
    arr = np.asarray(value, dtype=np.float64)
    if (arr < 0).any():
        raise ValueError("labels must be >= 0")
    if direction == "to_days":
        out = arr / HOURS_PER_DAY
    elif direction == "to_hours":
        out = arr * HOURS_PER_DAY
    else:
        raise ValueError(f"direction must be 'to_days' or 'to_hours', got {direction!r}")
    return float(out) if np.isscalar(value) or arr.ndim == 0 else out
