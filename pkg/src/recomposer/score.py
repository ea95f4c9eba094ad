"""Kern-subset scores, key normalisation and piano-roll construction.

Supported kern subset, one spine per part (tab separated):

* ``**kern`` headers, ``*M<n>/<d>`` meters, ``*`` null interpretations and
  ``*-`` terminators are consumed; other ``*`` interpretations are skipped
  with one warning per line.
* ``!`` comment lines are consumed.
* Data tokens: duration ``0`` (breve), ``1 2 4 8 16`` with optional dots,
  then a pitch (``c`` = C4, ``cc`` = C5, ``C`` = C3, ``CC`` = C2) with ``#``
  or ``-`` accidentals, or ``r`` for a rest.  ``.`` continues the previous
  event.  Beam, stem, tie and articulation signifiers are stripped with one
  warning per line.
* ``=`` lines are barlines.

Any other token is a parse error carrying its line number.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from math import ceil

import numpy as np

log = logging.getLogger(__name__)

TIMESTEPS = 16

# Krumhansl-Kessler probe-tone profiles, tonic first.
MAJOR_PROFILE = np.array([6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88])
MINOR_PROFILE = np.array([6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17])

_PC = {"c": 0, "d": 2, "e": 4, "f": 5, "g": 7, "a": 9, "b": 11}
_TOKEN = re.compile(r"^(?P<dur>\d+)(?P<dots>\.*)(?P<body>[A-Ga-g]+[#\-n]*|r+)$")
_STRIPPABLE = set("LJKk/\\[]_;'`^~yxqQ")


class KernParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class NoteEvent:
    onset: Fraction       # quarters from the start of the measure
    duration: Fraction    # quarters
    pitch: int | None     # MIDI number, None for a rest


@dataclass
class Measure:
    length: Fraction
    events: list[NoteEvent] = field(default_factory=list)


@dataclass
class Score:
    parts: list[list[Measure]]
    warnings: list[str] = field(default_factory=list)
    name: str = ""

    @property
    def part_count(self) -> int:
        return len(self.parts)

    @property
    def measure_count(self) -> int:
        return len(self.parts[0]) if self.parts else 0

    def pitches(self) -> list[int]:
        return [e.pitch for part in self.parts for m in part for e in m.events if e.pitch is not None]


def parse_duration(digits: str, dots: str) -> Fraction:
    if digits == "0":
        base = Fraction(8)
    elif digits in ("1", "2", "4", "8", "16"):
        base = Fraction(4, int(digits))
    else:
        raise ValueError(f"unsupported duration {digits!r}")
    total, add = base, base
    for _ in dots:
        add /= 2
        total += add
    return total


def parse_pitch(body: str) -> int:
    letters = body.rstrip("#-n")
    acc = body[len(letters):]
    if len(set(letters)) != 1:
        raise ValueError(f"mixed pitch letters {letters!r}")
    letter = letters[0]
    n = len(letters)
    if letter.islower():
        midi = 60 + 12 * (n - 1) + _PC[letter]
    else:
        midi = 48 - 12 * (n - 1) + _PC[letter.lower()]
    midi += acc.count("#") - acc.count("-")
    return midi


def parse_kern_subset(text: str, name: str = "") -> Score:
    """Parse kern-subset text into a :class:`Score` (see module docstring)."""
    nspines: int | None = None
    warnings: list[str] = []
    meter: Fraction | None = None
    parts: list[list[Measure]] = []
    cur: list[list[NoteEvent]] = []
    ends: list[Fraction] = []          # absolute end time of each spine's current event
    now = Fraction(0)                  # absolute time of the next data row
    bar_start = Fraction(0)
    terminated = False

    def warn(lineno: int, msg: str) -> None:
        warnings.append(f"line {lineno}: {msg}")
        log.warning("%s line %d: %s", name or "<kern>", lineno, msg)

    def close_measure(lineno: int) -> None:
        nonlocal bar_start
        if any(e > now for e in ends):
            raise KernParseError(lineno, "barline inside a sounding note")
        elapsed = now - bar_start
        if elapsed == 0 and not any(cur):
            return
        length = max(meter or elapsed, elapsed)
        for s in range(nspines):
            parts[s].append(Measure(length, cur[s]))
            cur[s] = []
        bar_start = now

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("!"):
            continue
        tokens = line.split("\t")
        if nspines is None:
            if not all(t == "**kern" for t in tokens):
                raise KernParseError(lineno, f"expected **kern header, got {line!r}")
            nspines = len(tokens)
            parts = [[] for _ in range(nspines)]
            cur = [[] for _ in range(nspines)]
            ends = [Fraction(0)] * nspines
            continue
        if terminated:
            raise KernParseError(lineno, "content after spine terminator")
        if len(tokens) != nspines:
            raise KernParseError(lineno, f"expected {nspines} spines, found {len(tokens)}")

        if tokens[0].startswith("*"):
            if not all(t.startswith("*") for t in tokens):
                raise KernParseError(lineno, "mixed interpretation and data tokens")
            if all(t == "*-" for t in tokens):
                terminated = True
                continue
            meters = {t for t in tokens if re.fullmatch(r"\*M\d+/\d+", t)}
            unknown = [t for t in tokens if t not in ("*", "*-") and t not in meters]
            if any(t in ("*^", "*v", "*+", "*x") for t in tokens):
                raise KernParseError(lineno, "spine manipulators are not supported")
            if len(meters) > 1:
                raise KernParseError(lineno, "conflicting meters")
            if meters:
                num, den = next(iter(meters))[2:].split("/")
                meter = Fraction(4 * int(num), int(den))
            if unknown:
                warn(lineno, f"skipped interpretation {' '.join(sorted(set(unknown)))}")
            continue

        if tokens[0].startswith("="):
            if not all(t.startswith("=") for t in tokens):
                raise KernParseError(lineno, "barline not present in every spine")
            close_measure(lineno)
            continue

        stripped = False
        durations: list[Fraction] = []
        for s, tok in enumerate(tokens):
            if tok == ".":
                if ends[s] <= now:
                    raise KernParseError(lineno, f"null token in spine {s + 1} with no sounding event")
                continue
            if ends[s] > now:
                raise KernParseError(lineno, f"new event in spine {s + 1} before previous one ends")
            if " " in tok:
                raise KernParseError(lineno, f"multi-note token {tok!r} not supported")
            clean = "".join(ch for ch in tok if ch not in _STRIPPABLE)
            stripped |= clean != tok
            m = _TOKEN.match(clean)
            if not m:
                raise KernParseError(lineno, f"malformed token {tok!r}")
            try:
                dur = parse_duration(m["dur"], m["dots"])
                body = m["body"]
                pitch = None if body[0] == "r" else parse_pitch(body)
            except (ValueError, KeyError) as exc:
                raise KernParseError(lineno, f"malformed token {tok!r}: {exc}") from None
            if pitch is not None and not 0 <= pitch <= 127:
                raise KernParseError(lineno, f"pitch {pitch} outside MIDI range")
            cur[s].append(NoteEvent(now - bar_start, dur, pitch))
            ends[s] = now + dur
            durations.append(dur)
        if stripped:
            warn(lineno, "stripped unsupported signifiers")
        nxt = [e for e in ends if e > now]
        if not nxt:
            raise KernParseError(lineno, "data row does not advance time")
        now = min(nxt)

    if nspines is None:
        raise KernParseError(0, "no **kern header found")
    if any(e > now for e in ends):
        now = max(ends)
    close_measure(len(text.splitlines()))
    return Score(parts, warnings, name)


# ---------------------------------------------------------------------------
# key


@dataclass(frozen=True)
class KeyEstimate:
    tonic: int
    mode: str      # "major" | "minor"
    score: float


def pitch_class_histogram(score: Score) -> np.ndarray:
    hist = np.zeros(12)
    for part in score.parts:
        for m in part:
            for e in m.events:
                if e.pitch is not None:
                    hist[e.pitch % 12] += float(e.duration)
    return hist


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0


def estimate_key(score: Score) -> KeyEstimate:
    """Krumhansl-Schmuckler key finding on the duration-weighted histogram.

    The histogram is rotated rather than the profile so transposed inputs
    produce bit-identical candidate scores.  Ties go to the lower tonic,
    then major.
    """
    hist = pitch_class_histogram(score)
    if hist.sum() == 0:
        raise ValueError("cannot estimate the key of a score with no pitched events")
    best: KeyEstimate | None = None
    for tonic in range(12):
        rotated = np.roll(hist, -tonic)
        for mode, profile in (("major", MAJOR_PROFILE), ("minor", MINOR_PROFILE)):
            r = _corr(rotated, profile)
            if best is None or r > best.score:
                best = KeyEstimate(tonic, mode, r)
    return best


def key_shift(tonic: int) -> int:
    """Semitone shift in [-6, +5] that moves ``tonic`` to pitch class 0."""
    return ((-tonic + 6) % 12) - 6


def normalize_key(score: Score, key: KeyEstimate) -> Score:
    shift = key_shift(key.tonic)
    warnings = list(score.warnings)

    def move(p: int | None) -> int | None:
        if p is None:
            return None
        q = p + shift
        if not 0 <= q <= 127:
            q = q + 12 * ceil(-q / 12) if q < 0 else q - 12 * ceil((q - 127) / 12)
            warnings.append(f"pitch {p} clamped to {q} after transposition")
            log.warning("pitch %d clamped to %d after transposition", p, q)
        return q

    parts = [[Measure(m.length, [replace(e, pitch=move(e.pitch)) for e in m.events])
              for m in part] for part in score.parts]
    return Score(parts, warnings, score.name)


# ---------------------------------------------------------------------------
# piano rolls


@dataclass
class ToneVocab:
    pitches: list[int]

    def __post_init__(self):
        self.pitches = sorted(set(int(p) for p in self.pitches))
        self.row = {p: i for i, p in enumerate(self.pitches)}

    @property
    def raw_size(self) -> int:
        return len(self.pitches)

    @property
    def padded_size(self) -> int:
        return 4 * ceil(self.raw_size / 4)

    def text(self) -> str:
        return ",".join(str(p) for p in self.pitches)


def build_tone_vocab(scores) -> ToneVocab:
    scores = list(scores)
    if not scores:
        raise ValueError("tone vocabulary needs at least one score")
    return ToneVocab([p for s in scores for p in s.pitches()])


def _slot(x: Fraction) -> int:
    # round half up
    return int((x + Fraction(1, 2)) // 1)


def event_slots(onset: Fraction, duration: Fraction, length: Fraction) -> tuple[int, int]:
    start = _slot(TIMESTEPS * onset / length)
    end = _slot(TIMESTEPS * (onset + duration) / length)
    start = min(start, TIMESTEPS - 1)
    end = min(max(end, start + 1), TIMESTEPS)
    return start, end


def score_to_rolls(score: Score, vocab: ToneVocab, voices: int = 4) -> np.ndarray:
    """Binary rolls ``(measures, padded_size, 16, voices)`` as uint8."""
    if score.part_count != voices:
        raise ValueError(f"score has {score.part_count} parts, expected {voices}")
    rolls = np.zeros((score.measure_count, vocab.padded_size, TIMESTEPS, voices), dtype=np.uint8)
    for v, part in enumerate(score.parts):
        for mi, m in enumerate(part):
            for e in m.events:
                if e.pitch is None:
                    continue
                if e.pitch not in vocab.row:
                    raise KeyError(f"pitch {e.pitch} is not in the tone vocabulary")
                a, b = event_slots(e.onset, e.duration, m.length)
                rolls[mi, vocab.row[e.pitch], a:b, v] = 1
    return rolls


def roll_events(rolls: np.ndarray, pitches) -> list[tuple[int, int, int, int]]:
    """Merged notes ``(voice, pitch, start_slot, end_slot)`` over concatenated measures.

    Runs of consecutive active slots of one row and voice form one note,
    including across measure boundaries.
    """
    rolls = np.asarray(rolls)
    if rolls.ndim == 3:
        rolls = rolls[None]
    n, rows, steps, voices = rolls.shape
    flat = rolls.transpose(1, 0, 2, 3).reshape(rows, n * steps, voices)
    out = []
    for v in range(voices):
        for r in range(rows):
            line = np.concatenate([[0], flat[r, :, v] > 0, [0]]).astype(np.int8)
            d = np.diff(line)
            starts = np.flatnonzero(d == 1)
            stops = np.flatnonzero(d == -1)
            for a, b in zip(starts, stops):
                if r >= len(pitches):
                    raise ValueError(f"active cell in padding row {r}")
                out.append((v, int(pitches[r]), int(a), int(b)))
    out.sort(key=lambda e: (e[2], e[0], e[1]))
    return out
