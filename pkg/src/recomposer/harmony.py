"""Roman-numeral labelling of measures and chord-function triplets.

Labels come from template matching against the diatonic triads and seventh
chords of the (already key-normalised, tonic C) major or natural-minor
scale.  For each template::

    score = (template tones present) / (template size) - 0.5 * (non-chord mass)

where non-chord mass is the share of sounding duration on pitch classes
outside the template.  Candidates are visited triads first (degrees 1-7),
then sevenths, and only a strictly better score replaces the incumbent, so
ties prefer triads and then lower degrees.  The figure comes from the
lowest pitch sounding at the first non-empty slot.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence, TypeVar

import numpy as np

SCALES = {
    "major": (0, 2, 4, 5, 7, 9, 11),
    "minor": (0, 2, 3, 5, 7, 8, 10),
}
NUMERALS = ("I", "II", "III", "IV", "V", "VI", "VII")
TRIAD_FIGURES = ("", "6", "64")
SEVENTH_FIGURES = ("7", "65", "43", "42")
REST = "REST"


@dataclass(frozen=True)
class ChordLabel:
    degree: int            # 1-7, 0 for the rest sentinel
    quality: str           # major | minor | diminished | rest
    seventh: bool
    figure: str

    @property
    def label(self) -> str:
        if self.degree == 0:
            return REST
        numeral = NUMERALS[self.degree - 1]
        if self.quality != "major":
            numeral = numeral.lower()
        if self.quality == "diminished":
            numeral += "o"
        return numeral + self.figure

    def __str__(self) -> str:
        return self.label


REST_LABEL = ChordLabel(0, "rest", False, "")


def chord_tones(degree: int, mode: str, seventh: bool = False) -> tuple[int, ...]:
    """Pitch classes (root, third, fifth[, seventh]) of a diatonic chord on C."""
    scale = SCALES[mode]
    i = degree - 1
    steps = (0, 2, 4, 6) if seventh else (0, 2, 4)
    return tuple(scale[(i + s) % 7] for s in steps)


def triad_quality(degree: int, mode: str) -> str:
    root, third, fifth = chord_tones(degree, mode)
    t, f = (third - root) % 12, (fifth - root) % 12
    if (t, f) == (4, 7):
        return "major"
    if (t, f) == (3, 7):
        return "minor"
    if (t, f) == (3, 6):
        return "diminished"
    raise ValueError(f"unexpected triad on degree {degree} in {mode}")


def _templates(mode: str):
    for seventh in (False, True):
        for degree in range(1, 8):
            yield degree, seventh, chord_tones(degree, mode, seventh)


def label_pitches(weights: dict[int, float], bass: int, mode: str) -> ChordLabel:
    """Label from pitch-class weights and the bass pitch (MIDI or pitch class)."""
    if mode not in SCALES:
        raise ValueError(f"unknown mode {mode!r}")
    total = sum(weights.values())
    if total <= 0:
        return REST_LABEL
    present = {pc for pc, w in weights.items() if w > 0}
    best = None
    best_score = -np.inf
    for degree, seventh, tones in _templates(mode):
        tone_set = set(tones)
        coverage = len(tone_set & present) / len(tones)
        outside = sum(w for pc, w in weights.items() if pc not in tone_set) / total
        score = coverage - 0.5 * outside
        if score > best_score:
            best, best_score = (degree, seventh, tones), score
    degree, seventh, tones = best
    bass_pc = bass % 12
    position = tones.index(bass_pc) if bass_pc in tones else 0
    figure = (SEVENTH_FIGURES if seventh else TRIAD_FIGURES)[position]
    return ChordLabel(degree, triad_quality(degree, mode), seventh, figure)


def label_measure(roll: np.ndarray, pitches: Sequence[int], mode: str) -> ChordLabel:
    """Label one measure roll ``(rows, slots, voices)``; ``pitches[row]`` is its MIDI number."""
    roll = np.asarray(roll)
    active = roll.any(axis=2)                  # (rows, slots)
    if not active.any():
        return REST_LABEL
    weights: dict[int, float] = {}
    counts = active.sum(axis=1)
    for row in np.flatnonzero(counts):
        pc = int(pitches[row]) % 12
        weights[pc] = weights.get(pc, 0.0) + float(counts[row])
    first_slot = int(np.flatnonzero(active.any(axis=0))[0])
    bass = min(int(pitches[r]) for r in np.flatnonzero(active[:, first_slot]))
    return label_pitches(weights, bass, mode)


T = TypeVar("T")


def make_triplets(labels: Sequence[T]) -> list[tuple[T, T, T]]:
    """(previous, current, next) per position, repeating the border labels."""
    labels = list(labels)
    if not labels:
        raise ValueError("make_triplets needs at least one label")
    n = len(labels)
    return [(labels[max(t - 1, 0)], labels[t], labels[min(t + 1, n - 1)]) for t in range(n)]


class ChordVocab:
    """Label <-> integer id, ordered by first appearance."""

    def __init__(self, labels: Iterable[Hashable] = ()):
        self.ids: dict[str, int] = {}
        for lab in labels:
            self.add(str(lab))

    def add(self, label: str) -> int:
        if label not in self.ids:
            self.ids[label] = len(self.ids)
        return self.ids[label]

    @property
    def labels(self) -> list[str]:
        return list(self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, label) -> bool:
        return label in self.ids

    def __getitem__(self, label: str) -> int:
        return self.ids[label]

    def __eq__(self, other) -> bool:
        return isinstance(other, ChordVocab) and self.ids == other.ids

    def label(self, idx: int) -> str:
        return self.labels[idx]

    def to_text(self) -> str:
        return "".join(f"{lab}\t{i}\n" for lab, i in self.ids.items())

    @classmethod
    def from_text(cls, text: str) -> "ChordVocab":
        vocab = cls()
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            lab, idx = line.split("\t")
            if int(idx) != len(vocab.ids) or lab in vocab.ids:
                raise ValueError(f"chord vocab line {n}: ids must be unique and consecutive")
            vocab.ids[lab] = int(idx)
        return vocab


def build_chord_vocab(labels: Iterable) -> ChordVocab:
    return ChordVocab(str(lab) for lab in labels)
