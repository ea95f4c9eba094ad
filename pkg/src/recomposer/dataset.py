"""Corpus building and the binary dataset / code-grid container files.

Dataset file (little-endian, CRC32 trailer)::

    b"RCDS" u32 version
    u32 voices, timesteps, raw tone vocab, padded tone vocab, chord vocab size,
        measure count, holdout start, holdout end, piece count
    raw x u8 tone pitches
    chord vocab: u16 len + UTF-8 label, in id order
    pieces: u16 len + UTF-8 name, u8 original tonic, u8 mode (0 major, 1 minor)
    records: u32 piece id, u32 chord id, packed roll bits (little bit order)
    u32 n + n x u32 holdout chord ids

Code file::

    b"RCCD" u32 version, u16 len + tone-vocab fingerprint,
    u32 count, u32 h, u32 w, count*h*w x u16 codes, CRC32
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .checkpoint import atomic_write, check_crc, fingerprint, with_crc
from .harmony import ChordVocab, label_measure, make_triplets
from .score import (TIMESTEPS, Score, ToneVocab, build_tone_vocab, estimate_key,
                    normalize_key, parse_kern_subset, score_to_rolls)

log = logging.getLogger(__name__)

DATA_MAGIC = b"RCDS"
CODES_MAGIC = b"RCCD"
VERSION = 1
MODES = ("major", "minor")


class DatasetError(ValueError):
    pass


@dataclass
class Piece:
    name: str
    tonic: int
    mode: str


@dataclass
class DatasetFile:
    voices: int
    tone_vocab: ToneVocab
    chord_vocab: ChordVocab
    pieces: list[Piece]
    piece_ids: np.ndarray          # (N,) int
    chord_ids: np.ndarray          # (N,) int
    rolls: np.ndarray              # (N, padded, 16, voices) uint8
    holdout: tuple[int, int]       # [start, end)
    holdout_chords: list[int] = field(default_factory=list)
    timesteps: int = TIMESTEPS

    @property
    def measure_count(self) -> int:
        return len(self.rolls)

    def train_indices(self) -> np.ndarray:
        a, b = self.holdout
        idx = np.arange(self.measure_count)
        return idx[(idx < a) | (idx >= b)]

    def is_holdout(self, i: int) -> bool:
        return self.holdout[0] <= i < self.holdout[1]

    def triplet_ids(self) -> np.ndarray:
        """(N, 3) previous/current/next chord ids, borders repeated per piece."""
        out = np.zeros((self.measure_count, 3), dtype=np.int64)
        for start, stop in self.piece_spans():
            out[start:stop] = make_triplets(list(self.chord_ids[start:stop]))
        return out

    def previous_in_piece(self) -> np.ndarray:
        """Index of the preceding measure of the same piece, or -1."""
        prev = np.arange(self.measure_count) - 1
        first = np.ones(self.measure_count, dtype=bool)
        first[1:] = self.piece_ids[1:] != self.piece_ids[:-1]
        prev[first] = -1
        return prev

    def piece_spans(self) -> list[tuple[int, int]]:
        spans = []
        start = 0
        for i in range(1, self.measure_count + 1):
            if i == self.measure_count or self.piece_ids[i] != self.piece_ids[start]:
                spans.append((start, i))
                start = i
        return spans

    def tone_fingerprint(self) -> str:
        return fingerprint(self.tone_vocab.text())

    def chord_fingerprint(self) -> str:
        return fingerprint(self.chord_vocab.to_text())

    # -- serialisation -------------------------------------------------------

    def to_bytes(self) -> bytes:
        tv, cv = self.tone_vocab, self.chord_vocab
        n = self.measure_count
        out = bytearray(DATA_MAGIC)
        out += struct.pack("<I", VERSION)
        out += struct.pack("<9I", self.voices, self.timesteps, tv.raw_size, tv.padded_size,
                           len(cv), n, self.holdout[0], self.holdout[1], len(self.pieces))
        out += bytes(tv.pitches)
        for lab in cv.labels:
            raw = lab.encode("utf-8")
            out += struct.pack("<H", len(raw)) + raw
        for p in self.pieces:
            raw = p.name.encode("utf-8")
            out += struct.pack("<H", len(raw)) + raw + struct.pack("<BB", p.tonic, MODES.index(p.mode))
        for i in range(n):
            out += struct.pack("<II", int(self.piece_ids[i]), int(self.chord_ids[i]))
            out += np.packbits(self.rolls[i].reshape(-1), bitorder="little").tobytes()
        out += struct.pack("<I", len(self.holdout_chords))
        out += struct.pack(f"<{len(self.holdout_chords)}I", *self.holdout_chords)
        return with_crc(bytes(out))

    @classmethod
    def from_bytes(cls, data: bytes) -> "DatasetFile":
        if data[:4] != DATA_MAGIC:
            raise DatasetError("not a dataset file (bad magic)")
        body = check_crc(data)
        (version,) = struct.unpack_from("<I", body, 4)
        if version != VERSION:
            raise DatasetError(f"unsupported dataset version {version}")
        (voices, steps, raw, padded, nchords, n, hs, he, npieces) = struct.unpack_from("<9I", body, 8)
        pos = 8 + 36
        pitches = list(body[pos:pos + raw])
        pos += raw
        tv = ToneVocab(pitches)
        if tv.padded_size != padded:
            raise DatasetError(f"padded tone size {padded} inconsistent with {raw} pitches")
        cv = ChordVocab()
        for _ in range(nchords):
            (ln,) = struct.unpack_from("<H", body, pos)
            cv.add(body[pos + 2:pos + 2 + ln].decode("utf-8"))
            pos += 2 + ln
        pieces = []
        for _ in range(npieces):
            (ln,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + ln].decode("utf-8")
            pos += 2 + ln
            tonic, mode = struct.unpack_from("<BB", body, pos)
            pos += 2
            pieces.append(Piece(name, tonic, MODES[mode]))
        cells = padded * steps * voices
        nbytes = (cells + 7) // 8
        piece_ids = np.zeros(n, dtype=np.int64)
        chord_ids = np.zeros(n, dtype=np.int64)
        rolls = np.zeros((n, padded, steps, voices), dtype=np.uint8)
        for i in range(n):
            piece_ids[i], chord_ids[i] = struct.unpack_from("<II", body, pos)
            pos += 8
            bits = np.frombuffer(body, dtype=np.uint8, count=nbytes, offset=pos)
            rolls[i] = np.unpackbits(bits, bitorder="little")[:cells].reshape(padded, steps, voices)
            pos += nbytes
        (nh,) = struct.unpack_from("<I", body, pos)
        pos += 4
        hchords = list(struct.unpack_from(f"<{nh}I", body, pos))
        pos += 4 * nh
        if pos != len(body):
            raise DatasetError(f"trailing bytes at offset {pos}")
        return cls(voices, tv, cv, pieces, piece_ids, chord_ids, rolls, (hs, he), hchords, steps)


def write_dataset(ds: DatasetFile, path) -> None:
    atomic_write(path, ds.to_bytes())


def read_dataset(path) -> DatasetFile:
    return DatasetFile.from_bytes(Path(path).read_bytes())


def build_dataset(scores: Iterable[Score], holdout_measures: int, voices: int = 4) -> DatasetFile:
    """Filter to ``voices``-part pieces, normalise keys, build rolls, labels and holdout.

    The holdout is the final ``holdout_measures`` measures in corpus order.
    """
    kept: list[tuple[Score, Piece]] = []
    for sc in scores:
        if sc.part_count != voices:
            log.info("skipping %s: %d parts", sc.name or "<score>", sc.part_count)
            continue
        if not sc.pitches():
            log.info("skipping %s: no pitched events", sc.name or "<score>")
            continue
        key = estimate_key(sc)
        kept.append((normalize_key(sc, key), Piece(sc.name, key.tonic, key.mode)))
    if not kept:
        raise DatasetError(f"no {voices}-part pieces in the input")
    tv = build_tone_vocab(s for s, _ in kept)
    cv = ChordVocab()
    rolls, piece_ids, chord_ids = [], [], []
    for pid, (sc, piece) in enumerate(kept):
        r = score_to_rolls(sc, tv, voices)
        for m in r:
            chord_ids.append(cv.add(label_measure(m, tv.pitches, piece.mode).label))
            piece_ids.append(pid)
        rolls.append(r)
    all_rolls = np.concatenate(rolls)
    n = len(all_rolls)
    if holdout_measures < 0 or holdout_measures >= n:
        raise DatasetError(f"holdout of {holdout_measures} measures needs a corpus larger than {n}")
    holdout = (n - holdout_measures, n)
    chord_ids = np.array(chord_ids, dtype=np.int64)
    return DatasetFile(voices, tv, cv, [p for _, p in kept], np.array(piece_ids, dtype=np.int64),
                       chord_ids, all_rolls, holdout, [int(c) for c in chord_ids[holdout[0]:]])


def load_scores(paths: Iterable) -> list[Score]:
    scores = []
    for p in paths:
        p = Path(p)
        scores.append(parse_kern_subset(p.read_text(encoding="utf-8"), name=p.stem))
    return scores


def kern_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"input directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix in (".krn", ".kern"))


@dataclass
class CodeFile:
    tone_fingerprint: str
    grids: np.ndarray   # (N, h, w)

    def to_bytes(self) -> bytes:
        fp = self.tone_fingerprint.encode("utf-8")
        n, h, w = self.grids.shape
        out = bytearray(CODES_MAGIC) + struct.pack("<I", VERSION)
        out += struct.pack("<H", len(fp)) + fp
        out += struct.pack("<3I", n, h, w)
        out += np.ascontiguousarray(self.grids, dtype="<u2").tobytes()
        return with_crc(bytes(out))

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodeFile":
        if data[:4] != CODES_MAGIC:
            raise DatasetError("not a code file (bad magic)")
        body = check_crc(data)
        (version,) = struct.unpack_from("<I", body, 4)
        if version != VERSION:
            raise DatasetError(f"unsupported code file version {version}")
        (ln,) = struct.unpack_from("<H", body, 8)
        fp = body[10:10 + ln].decode("utf-8")
        pos = 10 + ln
        n, h, w = struct.unpack_from("<3I", body, pos)
        pos += 12
        grids = np.frombuffer(body, dtype="<u2", count=n * h * w, offset=pos).reshape(n, h, w)
        return cls(fp, grids.astype(np.int64))


def write_codes(cf: CodeFile, path) -> None:
    atomic_write(path, cf.to_bytes())


def read_codes(path) -> CodeFile:
    return CodeFile.from_bytes(Path(path).read_bytes())
