"""Synthetic streaming-event datasets, stratified splits and the on-disk format.

On disk a dataset is a directory with two files:

``manifest.txt``
    a header line followed by one tab-separated record per sequence:
    ``id  split  task  T  D  frame_period_ms  offset``
``sequences.bin``
    per sequence: ``b"ASEQ"``, u32 T, u32 D, T*D little-endian f32 features
    (row-major), T u8 labels.

Features are f32 on disk and f64 in memory; the generator rounds to f32 so a
write/read round trip is bit-exact.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .anchors import TaskKind, positive_runs

MANIFEST_NAME = "manifest.txt"
BLOB_NAME = "sequences.bin"
MANIFEST_HEADER = "# streamanchor-dataset v1"
SEQ_MAGIC = b"ASEQ"
SPLITS = ("train", "validation", "test")
DEFAULT_RATIOS = (0.70, 0.15, 0.15)


class DataFormatError(ValueError):
    """Malformed dataset files; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int | None = None, path: Path | str | None = None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass
class LabeledSequence:
    features: np.ndarray
    labels: np.ndarray
    frame_period_ms: float = 10.0
    task: TaskKind = TaskKind.KWS
    id: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.task = TaskKind.parse(self.task)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be T x D and labels length T")
        if self.features.shape[0] != self.labels.shape[0] or self.labels.shape[0] < 1:
            raise ValueError(
                f"{self.id}: {self.features.shape[0]} feature frames vs {self.labels.shape[0]} labels"
            )
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"{self.id}: non-finite features")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError(f"{self.id}: labels must be binary")

    @property
    def T(self) -> int:
        return self.labels.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]

    @property
    def is_positive(self) -> bool:
        return bool(self.labels.any())


@dataclass
class Dataset:
    sequences: list[LabeledSequence] = field(default_factory=list)
    # parallel to ``sequences``; None until split
    splits: list[str] | None = None

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, name: str) -> list[LabeledSequence]:
        if self.splits is None:
            raise ValueError("dataset has no split tags")
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [s for s, tag in zip(self.sequences, self.splits) if tag == name]

    def counts(self) -> dict[str, int]:
        if self.splits is None:
            return {"all": len(self.sequences)}
        return {name: self.splits.count(name) for name in SPLITS}


@dataclass(frozen=True)
class GenConfig:
    task: TaskKind = TaskKind.KWS
    n_sequences: int = 2860
    positive_fraction: float = 0.5
    t_min: int = 150
    t_max: int = 250
    dim: int = 16
    event_min: int = 30
    event_max: int = 60
    noise: float = 1.0
    # amplitude of the event pattern relative to unit-variance noise
    gain: float = 0.6
    # minimum mean per-feature energy excess inside events over outside
    energy_margin: float = 0.05
    # frames kept free of the event at each sequence edge
    margin: int = 20
    # mean number of non-target events (words / noise events) per sequence
    distractors: float = 1.0
    # amplitude of a keyword-wide constant direction, relative to the units (KWS)
    keyword_cue: float = 0.3
    # fraction of non-target words that share the keyword's leading units (KWS)
    confusable: float = 0.5
    # how many keyword units a confusable word shares
    shared_units: int = 2
    # which end of the keyword confusable words share: "prefix" or "suffix"
    confuser_side: str = "prefix"
    # probability that a negative holds speech-like babble without a sharp onset (SOD)
    babble: float = 0.0
    # babble amplitude as a fraction of ``gain``
    babble_level: float = 0.7
    frame_period_ms: float = 10.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "task", TaskKind.parse(self.task))
        self.validate()

    def validate(self) -> None:
        checks = [
            ("n_sequences", self.n_sequences >= 0),
            ("positive_fraction", 0.0 <= self.positive_fraction <= 1.0),
            ("t_min", self.t_min >= 1),
            ("t_max", self.t_max >= self.t_min),
            ("dim", self.dim >= 1 and (self.task is not TaskKind.MTD or self.dim == 2)),
            ("event_min", self.event_min >= 1),
            ("event_max", self.event_max >= self.event_min),
            ("noise", self.noise >= 0.0),
            ("gain", self.gain > 0.0),
            ("energy_margin", self.energy_margin >= 0.0),
            ("margin", self.margin >= 0),
            ("distractors", self.distractors >= 0.0),
            ("keyword_cue", self.keyword_cue >= 0.0),
            ("confusable", 0.0 <= self.confusable <= 1.0),
            ("shared_units", 1 <= self.shared_units <= 3),
            ("confuser_side", self.confuser_side in ("prefix", "suffix")),
            ("babble", 0.0 <= self.babble <= 1.0),
            ("babble_level", self.babble_level > 0.0),
            ("frame_period_ms", self.frame_period_ms > 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"invalid GenConfig.{name}: {getattr(self, name)!r}")
        if self.positive_fraction > 0 and self.event_max + 2 * self.margin > self.t_min:
            raise ValueError(
                "invalid GenConfig.t_min: shortest sequence "
                f"({self.t_min}) cannot hold the longest event ({self.event_max}) "
                f"plus margins (2 x {self.margin})"
            )


# Defaults per task; KWS-like 16-dim cepstra, SOD-like 40-dim filterbanks,
# MTD fusion inputs are two upstream score streams.
TASK_DEFAULTS: dict[TaskKind, dict] = {
    TaskKind.KWS: dict(n_sequences=2860, t_min=100, t_max=140, dim=16,
                       event_min=50, event_max=80, noise=1.0, gain=0.4, margin=10,
                       distractors=2.0, confusable=0.0),
    TaskKind.MTD: dict(n_sequences=1000, t_min=100, t_max=160, dim=2,
                       event_min=20, event_max=50, noise=0.8, gain=1.0, margin=20),
    TaskKind.SOD: dict(n_sequences=1500, t_min=100, t_max=150, dim=40,
                       event_min=40, event_max=70, noise=1.0, gain=0.5, margin=15),
}


def default_gen_config(task: TaskKind | str, **overrides) -> GenConfig:
    task = TaskKind.parse(task)
    params = dict(TASK_DEFAULTS[task])
    params.update(overrides)
    return GenConfig(task=task, **params)


# -- generation ---------------------------------------------------------------

def _smooth_envelope(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    ramp = max(1, min(ramp, n // 2))
    edge = 0.5 - 0.5 * np.cos(np.pi * (np.arange(ramp) + 1) / (ramp + 1))
    env[:ramp] = edge
    env[n - ramp:] = np.minimum(env[n - ramp:], edge[::-1])
    return env


class _Patterns:
    """Dataset-level acoustic inventory shared by all sequences of one seed.

    Words are sequences of units; each unit is a direction in feature space
    with a second direction modulating it over the unit's duration. The
    keyword is a fixed unit sequence.
    """

    n_units = 8
    keyword = (0, 1, 2, 3)

    def __init__(self, cfg: GenConfig):
        rng = np.random.default_rng([cfg.seed, 0x5EED])
        D = cfg.dim

        def unit_rms(v: np.ndarray) -> np.ndarray:
            return v / np.sqrt(np.mean(v * v, axis=-1, keepdims=True))

        self.units = unit_rms(rng.standard_normal((self.n_units, D)))
        self.modulation = unit_rms(rng.standard_normal((self.n_units, D)))
        self.speech_dir = unit_rms(rng.standard_normal(D))
        self.keyword_dir = unit_rms(rng.standard_normal(D))


def _render_word(pat: _Patterns, units, n: int, rng: np.random.Generator) -> np.ndarray:
    """n x D pattern for a unit sequence: a speech mean shift plus unit structure."""
    cuts = np.linspace(0, n, len(units) + 1)
    cuts[1:-1] += rng.uniform(-0.15, 0.15, len(units) - 1) * (n / len(units))
    cuts = np.round(cuts).astype(int)
    out = np.tile(0.4 * pat.speech_dir, (n, 1))
    for u, a, b in zip(units, cuts[:-1], cuts[1:]):
        m = b - a
        if m <= 0:
            continue
        progress = (np.arange(m) + 0.5) / m
        env = _smooth_envelope(m, ramp=max(1, m // 4))
        wobble = 0.5 * np.sin(np.pi * progress)[:, None] * pat.modulation[u][None, :]
        seg = pat.units[u][None, :] + wobble
        out[a:b] += env[:, None] * seg
    return out


def _random_word(pat: _Patterns, rng: np.random.Generator, confusable: float,
                 shared: int = 2, side: str = "prefix") -> tuple[int, ...]:
    """A non-keyword unit sequence; confusable words share the keyword's first
    (``side="prefix"``) or last (``side="suffix"``) ``shared`` units."""
    kw = pat.keyword
    if rng.random() < confusable:
        others = [u for u in range(pat.n_units) if u not in kw]
        rest = tuple(int(u) for u in rng.choice(others, size=len(kw) - shared))
        return kw[:shared] + rest if side == "prefix" else rest + kw[len(kw) - shared:]
    while True:
        word = tuple(int(u) for u in rng.integers(0, pat.n_units, size=int(rng.integers(3, 5))))
        if word[:len(kw)] != kw:
            return word


def _place_words(rng: np.random.Generator, feats: np.ndarray, free: list[tuple[int, int]],
                 words: list[tuple[int, ...]], pat: _Patterns, cfg: GenConfig) -> None:
    """Render words into free ``[lo, hi)`` gaps, skipping any that do not fit."""
    for word in words:
        n = int(rng.integers(cfg.event_min, cfg.event_max + 1))
        fits = [(lo, hi) for lo, hi in free if hi - lo >= n]
        if not fits:
            continue
        lo, hi = fits[int(rng.integers(0, len(fits)))]
        start = int(rng.integers(lo, hi - n + 1))
        feats[start:start + n] += cfg.gain * _render_word(pat, word, n, rng)
        free.remove((lo, hi))
        free.extend(g for g in ((lo, start - 2), (start + n + 2, hi)) if g[1] > g[0])


def _background(rng: np.random.Generator, T: int, cfg: GenConfig) -> np.ndarray:
    """Noise: AR(1)-correlated Gaussian frames with a few zero-mean bursts."""
    D = cfg.dim
    white = rng.standard_normal((T, D))
    x = np.empty((T, D))
    rho = 0.5
    x[0] = white[0]
    scale = np.sqrt(1 - rho * rho)
    for t in range(1, T):
        x[t] = rho * x[t - 1] + scale * white[t]
    n_bursts = rng.integers(0, 3)
    for _ in range(n_bursts):
        length = int(rng.integers(5, 25))
        start = int(rng.integers(0, max(1, T - length)))
        x[start:start + length] *= rng.uniform(1.2, 1.8)
    return cfg.noise * x


def _mtd_streams(rng: np.random.Generator, T: int, span: tuple[int, int] | None,
                 cfg: GenConfig) -> np.ndarray:
    """Surrogate audio/gesture score streams in (0, 1).

    The gesture channel ramps up ahead of speech start; the audio channel
    follows speech with a short lag. Negatives may contain one-channel
    activity (talking without raising, raising without talking).
    """
    t = np.arange(T)
    logits = np.full((T, 2), -2.5) + cfg.noise * rng.standard_normal((T, 2))
    # slow drift in upstream model confidence
    logits += np.cumsum(0.15 * rng.standard_normal((T, 2)), axis=0) * 0.3

    def bump(center_start: float, end: float, rise: float) -> np.ndarray:
        up = 1.0 / (1.0 + np.exp(-(t - center_start) / rise))
        down = 1.0 / (1.0 + np.exp((t - end) / rise))
        return up * down

    if span is not None:
        s, e = span
        lead = rng.uniform(5, 20)
        lag = rng.uniform(1, 6)
        logits[:, 1] += 4.0 * cfg.gain * bump(s - lead, e + 10, 3.0)
        logits[:, 0] += 4.0 * cfg.gain * bump(s + lag, e, 2.0)
    else:
        kind = rng.integers(0, 3)
        if kind > 0:
            n = int(rng.integers(cfg.event_min, cfg.event_max + 1))
            s = int(rng.integers(0, max(1, T - n)))
            ch = int(kind - 1)
            logits[:, ch] += 4.0 * cfg.gain * bump(s, s + n, 2.5)
    return 1.0 / (1.0 + np.exp(-logits))


def _place_event(rng: np.random.Generator, T: int, cfg: GenConfig) -> tuple[int, int]:
    n = int(rng.integers(cfg.event_min, cfg.event_max + 1))
    lo = cfg.margin
    hi = T - cfg.margin - n
    start = int(rng.integers(lo, hi + 1))
    return start, start + n - 1


def generate_sequence(cfg: GenConfig, index: int, positive: bool,
                      patterns: _Patterns | None = None) -> LabeledSequence:
    """One sequence, determined by ``(cfg.seed, index)`` alone.

    KWS: positives hold the keyword (labelled) followed by query words;
    negatives hold ordinary words, some sharing the keyword's first half.
    SOD: positives hold one speech segment (labelled) with an onset ramp;
    negatives hold non-speech noise events only.
    MTD: see ``_mtd_streams``.
    """
    pat = patterns or _Patterns(cfg)
    rng = np.random.default_rng([cfg.seed, index])
    T = int(rng.integers(cfg.t_min, cfg.t_max + 1))
    labels = np.zeros(T, dtype=np.int8)
    span = _place_event(rng, T, cfg) if positive else None
    if span is not None:
        labels[span[0]:span[1] + 1] = 1

    if cfg.task is TaskKind.MTD:
        feats = _mtd_streams(rng, T, span, cfg)
    elif cfg.task is TaskKind.KWS:
        feats = _background(rng, T, cfg)
        n_words = int(rng.poisson(cfg.distractors))
        if span is None:
            free = [(0, T)]
            n_words = max(n_words, 1)
        else:
            s, e = span
            n = e - s + 1
            kw = _render_word(pat, pat.keyword, n, rng) + cfg.keyword_cue * pat.keyword_dir
            feats[s:e + 1] += cfg.gain * kw
            # the query follows the keyword
            free = [(e + 1 + int(rng.integers(2, 8)), T)]
        words = [_random_word(pat, rng, cfg.confusable, cfg.shared_units, cfg.confuser_side)
                 for _ in range(n_words)]
        _place_words(rng, feats, free, words, pat, cfg)
    else:
        feats = _background(rng, T, cfg)
        if span is not None:
            s, e = span
            n = e - s + 1
            n_units = max(3, n // 12)
            units = tuple(int(u) for u in rng.integers(0, pat.n_units, size=n_units))
            env = _smooth_envelope(n, ramp=max(2, n // 10))
            feats[s:e + 1] += cfg.gain * env[:, None] * _render_word(pat, units, n, rng)
        elif rng.random() < cfg.babble:
            # babble fades in slowly, often from before the first frame
            n = int(rng.integers(cfg.event_min, cfg.event_max + 1))
            a = int(rng.integers(-n // 2, T - n + 1))
            units = tuple(int(u) for u in rng.integers(0, pat.n_units, size=max(3, n // 12)))
            seg = _render_word(pat, units, n, rng)
            env = np.minimum(1.0, (np.arange(n) + 1) / (n / 2))
            lo = max(0, -a)
            feats[a + lo:a + n] += cfg.gain * cfg.babble_level * (env[:, None] * seg)[lo:]
        for _ in range(int(rng.poisson(cfg.distractors))):
            # broadband non-speech event: energy without unit structure
            m = int(rng.integers(min(5, cfg.event_min), cfg.event_min + 1))
            a = int(rng.integers(0, T - m + 1))
            if span is not None and a <= span[1] + 2 and a + m >= span[0] - 2:
                continue
            direction = rng.standard_normal(cfg.dim)
            direction /= np.sqrt(np.mean(direction ** 2))
            feats[a:a + m] += cfg.gain * _smooth_envelope(m, max(1, m // 4))[:, None] * direction
    feats = feats.astype(np.float32).astype(np.float64)
    return LabeledSequence(
        features=feats,
        labels=labels,
        frame_period_ms=cfg.frame_period_ms,
        task=cfg.task,
        id=f"{cfg.task.value.lower()}-{cfg.seed}-{index:06d}",
    )


def generate(cfg: GenConfig) -> Dataset:
    """Deterministic synthetic dataset; each sequence depends only on (seed, index)."""
    cfg.validate()
    n_pos = int(round(cfg.positive_fraction * cfg.n_sequences))
    order = np.random.default_rng([cfg.seed, 0xC1A55]).permutation(cfg.n_sequences)
    is_pos = np.zeros(cfg.n_sequences, dtype=bool)
    is_pos[order[:n_pos]] = True
    pat = _Patterns(cfg)
    seqs = [generate_sequence(cfg, i, bool(is_pos[i]), pat) for i in range(cfg.n_sequences)]
    return Dataset(seqs)


# -- splitting ----------------------------------------------------------------

def split(dataset: Dataset, ratios=DEFAULT_RATIOS, seed: int = 0) -> Dataset:
    """Stratified deterministic train/validation/test assignment.

    Split sizes are within one sequence of ``ratios``; positives are
    allocated to each split in proportion (largest remainder), negatives fill
    the rest. Each class is shuffled with ``seed`` before being cut.
    """
    ratios = np.array([float(r) for r in ratios])
    if ratios.size != 3 or np.any(ratios < 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    n = len(dataset)
    if n < int(np.count_nonzero(ratios)):
        raise ValueError(f"cannot split {n} sequences into {len(ratios)} parts")
    totals = _largest_remainder(ratios, n)
    positive = np.array([s.is_positive for s in dataset.sequences], dtype=bool)
    pos_counts = _largest_remainder(ratios, int(positive.sum()))
    pos_counts = np.minimum(pos_counts, totals)
    # re-home positives that did not fit
    short = int(positive.sum()) - int(pos_counts.sum())
    for j in np.argsort(-(totals - pos_counts), kind="stable"):
        take = min(short, int(totals[j] - pos_counts[j]))
        pos_counts[j] += take
        short -= take
    neg_counts = totals - pos_counts

    rng = np.random.default_rng([seed, 0x5B117])
    tags: list[str] = [""] * n
    for cls, counts in ((True, pos_counts), (False, neg_counts)):
        idx = rng.permutation(np.flatnonzero(positive == cls))
        bounds = np.cumsum(counts)[:-1]
        for name, part in zip(SPLITS, np.split(idx, bounds)):
            for i in part:
                tags[int(i)] = name
    return Dataset(list(dataset.sequences), tags)


def _largest_remainder(ratios: np.ndarray, n: int) -> np.ndarray:
    raw = ratios * n
    counts = np.floor(raw).astype(int)
    rest = n - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


# -- serialisation ------------------------------------------------------------

def write(dataset: Dataset, path: Path | str) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    splits = dataset.splits or ["none"] * len(dataset)
    lines = [f"{MANIFEST_HEADER}\tcount={len(dataset)}"]
    offset = 0
    with open(path / BLOB_NAME, "wb") as blob:
        for seq, tag in zip(dataset.sequences, splits):
            if "\t" in seq.id or "\n" in seq.id:
                raise ValueError(f"sequence id {seq.id!r} contains a tab or newline")
            header = SEQ_MAGIC + struct.pack("<II", seq.T, seq.D)
            payload = seq.features.astype("<f4").tobytes() + seq.labels.astype(np.uint8).tobytes()
            blob.write(header)
            blob.write(payload)
            lines.append("\t".join([
                seq.id, tag, seq.task.value, str(seq.T), str(seq.D),
                repr(float(seq.frame_period_ms)), str(offset),
            ]))
            offset += len(header) + len(payload)
    (path / MANIFEST_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read(path: Path | str) -> Dataset:
    path = Path(path)
    manifest = path / MANIFEST_NAME
    blob_path = path / BLOB_NAME
    if not manifest.exists() or not blob_path.exists():
        raise DataFormatError("missing manifest or blob", path=path)
    raw_lines = manifest.read_bytes().split(b"\n")
    if not raw_lines or not raw_lines[0].startswith(MANIFEST_HEADER.encode()):
        raise DataFormatError("bad manifest header", offset=0, path=manifest)
    try:
        count = int(raw_lines[0].decode().split("count=")[1])
    except (IndexError, ValueError):
        raise DataFormatError("manifest header lacks count", offset=0, path=manifest) from None
    blob = blob_path.read_bytes()

    sequences, tags = [], []
    line_offset = len(raw_lines[0]) + 1
    for raw in raw_lines[1:]:
        if not raw.strip():
            line_offset += len(raw) + 1
            continue
        fields = raw.decode("utf-8").split("\t")
        if len(fields) != 7:
            raise DataFormatError(f"manifest record has {len(fields)} fields, expected 7",
                                  offset=line_offset, path=manifest)
        sid, tag, task, T, D, period, off = fields
        try:
            T, D, off, period = int(T), int(D), int(off), float(period)
            task = TaskKind.parse(task)
        except ValueError as exc:
            raise DataFormatError(f"bad manifest record: {exc}", offset=line_offset,
                                  path=manifest) from None
        sequences.append(_read_record(blob, off, T, D, sid, task, period, blob_path))
        tags.append(tag)
        line_offset += len(raw) + 1
    if len(sequences) != count:
        raise DataFormatError(f"manifest lists {len(sequences)} records, header says {count}",
                              offset=line_offset, path=manifest)
    has_splits = all(t in SPLITS for t in tags)
    if not has_splits and any(t in SPLITS for t in tags):
        raise DataFormatError("mixed split tags in manifest", path=manifest)
    return Dataset(sequences, tags if has_splits and tags else None)


def _read_record(blob: bytes, off: int, T: int, D: int, sid: str, task: TaskKind,
                 period: float, blob_path: Path) -> LabeledSequence:
    if off < 0 or off + 12 > len(blob):
        raise DataFormatError(f"record {sid!r} header truncated", offset=off, path=blob_path)
    if blob[off:off + 4] != SEQ_MAGIC:
        raise DataFormatError(f"record {sid!r}: bad magic {blob[off:off + 4]!r}",
                              offset=off, path=blob_path)
    t_disk, d_disk = struct.unpack_from("<II", blob, off + 4)
    if (t_disk, d_disk) != (T, D):
        raise DataFormatError(
            f"record {sid!r}: blob says {t_disk}x{d_disk}, manifest says {T}x{D}",
            offset=off + 4, path=blob_path)
    start = off + 12
    n_feat = 4 * T * D
    end = start + n_feat + T
    if end > len(blob):
        raise DataFormatError(f"record {sid!r} truncated: need {end - off} bytes",
                              offset=len(blob), path=blob_path)
    feats = np.frombuffer(blob, dtype="<f4", count=T * D, offset=start).reshape(T, D)
    labels = np.frombuffer(blob, dtype=np.uint8, count=T, offset=start + n_feat)
    if np.any(labels > 1):
        raise DataFormatError(f"record {sid!r}: non-binary label", offset=start + n_feat,
                              path=blob_path)
    return LabeledSequence(feats.astype(np.float64), labels.astype(np.int8), period, task, sid)


def check_single_event(dataset: Dataset) -> None:
    """Raise if any sequence has more than one positive run."""
    for seq in dataset.sequences:
        if len(positive_runs(seq.labels)) > 1:
            raise ValueError(f"{seq.id}: more than one positive run")


def with_seed(cfg: GenConfig, seed: int) -> GenConfig:
    return replace(cfg, seed=seed)
