"""Deterministic four-voice synthetic corpus in the kern subset.

Each measure realises one planned diatonic chord in C major (optionally
transposed): the bass sounds the root (or the third, for first inversion)
on the downbeat and the upper voices open on the remaining chord tones, so
every chord tone is present and no non-chord tone appears.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .harmony import SEVENTH_FIGURES, TRIAD_FIGURES, ChordLabel, chord_tones, triad_quality
from .rng import SplitMix64
from .score import estimate_key, parse_kern_subset

# (degree, seventh, bass position) choices the generator plants; tonic-heavy
# so key finding on the result is unambiguous
CHORD_PLAN = [
    (1, False, 0), (1, False, 1), (4, False, 0), (4, False, 1), (2, False, 0),
    (2, True, 3), (5, True, 0), (5, True, 1), (6, False, 0), (1, False, 0),
]
OPENING = [(1, False, 0), (4, False, 0)]
CADENCE = [(5, True, 0), (1, False, 0)]
RANGES = [(36, 52), (53, 64), (60, 72), (67, 79)]  # bass, tenor, alto, soprano
RHYTHMS = [["1"], ["2", "2"], ["2", "4", "4"], ["4", "4", "2"], ["4", "4", "4", "4"]]
_DUR = {"1": 4, "2": 2, "4": 1}
_NAMES = ["c", "c#", "d", "d#", "e", "f", "f#", "g", "g#", "a", "a#", "b"]


@dataclass
class SynthPiece:
    name: str
    text: str
    labels: list[str]


def midi_to_kern(p: int) -> str:
    octave = p // 12 - 1
    name = _NAMES[p % 12]
    letter, acc = name[0], name[1:]
    if octave >= 4:
        return letter * (octave - 3) + acc
    return letter.upper() * (4 - octave) + acc


def _pick(rng: SplitMix64, pcs, lo: int, hi: int) -> int:
    options = [p for p in range(lo, hi + 1) if p % 12 in pcs]
    return options[int(rng.integers(len(options), 1)[0])]


def _measure(rng: SplitMix64, degree: int, seventh: bool, inversion: int, transpose: int):
    tones = chord_tones(degree, "major", seventh)
    bass_pc = tones[inversion]
    rest = [t for i, t in enumerate(tones) if i != inversion]
    while len(rest) < 3:
        rest.append(tones[0])
    voices = []
    for v, (lo, hi) in enumerate(RANGES):
        rhythm = RHYTHMS[int(rng.integers(len(RHYTHMS), 1)[0])]
        notes = []
        for k, dur in enumerate(rhythm):
            if k == 0:
                pc = bass_pc if v == 0 else rest[v - 1]
            else:
                pc = tones[int(rng.integers(len(tones), 1)[0])] if v else bass_pc
            notes.append((dur, _pick(rng, {pc}, lo, hi) + transpose))
        voices.append(notes)
    figure = (SEVENTH_FIGURES if seventh else TRIAD_FIGURES)[inversion]
    label = ChordLabel(degree, triad_quality(degree, "major"), seventh, figure).label
    return voices, label


def _rows(voices) -> list[str]:
    starts = []
    for notes in voices:
        t, s = 0, {}
        for dur, p in notes:
            s[t] = dur + midi_to_kern(p)
            t += _DUR[dur]
        starts.append(s)
    times = sorted({t for s in starts for t in s})
    return ["\t".join(s.get(t, ".") for s in starts) for t in times]


def _piece(rng: SplitMix64, measures: int, transpose: int) -> tuple[list[str], list[str]]:
    lines = []
    labels = []
    for mi in range(measures):
        if mi < 2 and measures >= 4 or mi == 0:
            degree, seventh, inv = OPENING[mi]
        elif measures >= 4 and mi >= measures - 2:
            degree, seventh, inv = CADENCE[mi - measures + 2]
        else:
            degree, seventh, inv = CHORD_PLAN[int(rng.integers(len(CHORD_PLAN), 1)[0])]
        voices, label = _measure(rng, degree, seventh, inv, transpose)
        labels.append(label)
        lines += _rows(voices)
        lines.append("\t".join([f"={mi + 1}"] * 4) if mi < measures - 1 else "\t".join(["=="] * 4))
    return lines, labels


def synth_corpus(seed: int = 0, pieces: int = 2, measures_per_piece: int = 4,
                 transpose: int = 0, max_attempts: int = 100) -> list[SynthPiece]:
    """Pieces whose key estimate is the intended major key.

    A drawn piece whose pitch content reads as another key is redrawn from
    the same stream, so output stays a pure function of the arguments.
    """
    rng = SplitMix64(seed)
    header = ["\t".join(["**kern"] * 4), "\t".join(["*M4/4"] * 4)]
    footer = ["\t".join(["*-"] * 4)]
    out = []
    for pi in range(pieces):
        for _ in range(max_attempts):
            body, labels = _piece(rng, measures_per_piece, transpose)
            text = "\n".join(header + body + footer) + "\n"
            key = estimate_key(parse_kern_subset(text))
            if (key.tonic, key.mode) == (transpose % 12, "major"):
                break
        else:
            raise RuntimeError(f"no unambiguous piece after {max_attempts} draws")
        out.append(SynthPiece(f"synth{seed}_{pi:03d}", text, labels))
    return out


def write_synth_corpus(directory, seed: int = 0, pieces: int = 2, measures_per_piece: int = 4,
                       transpose: int = 0) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for piece in synth_corpus(seed, pieces, measures_per_piece, transpose):
        path = d / f"{piece.name}.krn"
        path.write_text(piece.text, encoding="utf-8")
        paths.append(path)
    return paths
