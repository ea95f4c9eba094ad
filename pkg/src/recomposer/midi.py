"""Standard MIDI (format 0) writer/reader and binary PPM rendering of rolls."""

from __future__ import annotations

import struct

import numpy as np

from .score import roll_events

DIVISION = 480
SLOTS_PER_QUARTER = 4
VELOCITY = 80
DEFAULT_QUARTER_US = 500_000  # 120 bpm

VOICE_COLORS = [
    (220, 40, 40),
    (40, 160, 60),
    (40, 80, 220),
    (200, 140, 0),
    (150, 40, 180),
    (0, 160, 170),
]


class MidiFormatError(ValueError):
    pass


def _vlq(n: int) -> bytes:
    out = [n & 0x7F]
    n >>= 7
    while n:
        out.append(0x80 | (n & 0x7F))
        n >>= 7
    return bytes(reversed(out))


def rolls_to_midi(rolls, pitches, quarter_note_us: int = DEFAULT_QUARTER_US,
                  division: int = DIVISION) -> bytes:
    """Encode measures (concatenated in order, 4 slots per quarter) as a format-0 file.

    ``pitches[row]`` gives the MIDI number of each tone row.  Consecutive
    active cells merge into one note; voice ``v`` plays on channel ``v``.
    """
    rolls = np.asarray(rolls)
    if rolls.ndim == 3:
        rolls = rolls[None]
    if len(rolls) == 0:
        raise ValueError("no measures to export")
    ticks_per_slot = division // SLOTS_PER_QUARTER
    total_ticks = rolls.shape[0] * rolls.shape[2] * ticks_per_slot

    events = []  # (tick, order, status, pitch, velocity); offs sort before ons
    for voice, pitch, a, b in roll_events(rolls, pitches):
        ch = voice & 0x0F
        events.append((a * ticks_per_slot, 1, 0x90 | ch, pitch, VELOCITY))
        events.append((b * ticks_per_slot, 0, 0x80 | ch, pitch, 0))
    events.sort()

    track = bytearray()
    track += b"\x00\xff\x51\x03" + quarter_note_us.to_bytes(3, "big")
    now = 0
    for tick, _, status, pitch, vel in events:
        track += _vlq(tick - now) + bytes([status, pitch, vel])
        now = tick
    track += _vlq(total_ticks - now) + b"\xff\x2f\x00"

    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, division)
    return header + b"MTrk" + struct.pack(">I", len(track)) + bytes(track)


def read_midi(data: bytes) -> dict:
    """Parse a single-track file written by :func:`rolls_to_midi`.

    Returns ``{"division", "tempo", "length", "notes"}`` where notes are
    ``(channel, pitch, start_tick, end_tick)`` sorted like :func:`roll_events`.
    Running status is accepted.
    """
    if data[:4] != b"MThd":
        raise MidiFormatError("missing MThd header")
    hlen, fmt, ntrks, division = struct.unpack(">IHHH", data[4:14])
    if hlen != 6 or fmt != 0 or ntrks != 1:
        raise MidiFormatError(f"unsupported header: length {hlen}, format {fmt}, tracks {ntrks}")
    pos = 8 + hlen
    if data[pos:pos + 4] != b"MTrk":
        raise MidiFormatError("missing MTrk chunk")
    (tlen,) = struct.unpack(">I", data[pos + 4:pos + 8])
    pos += 8
    end = pos + tlen
    if end != len(data):
        raise MidiFormatError("track length does not match file size")

    def vlq() -> int:
        nonlocal pos
        val = 0
        while True:
            byte = data[pos]
            pos += 1
            val = (val << 7) | (byte & 0x7F)
            if not byte & 0x80:
                return val

    tick = 0
    tempo = None
    status = None
    active: dict[tuple[int, int], int] = {}
    notes = []
    finished = False
    while pos < end:
        tick += vlq()
        byte = data[pos]
        if byte == 0xFF:
            mtype = data[pos + 1]
            pos += 2
            mlen = vlq()
            payload = data[pos:pos + mlen]
            pos += mlen
            if mtype == 0x51:
                tempo = int.from_bytes(payload, "big")
            elif mtype == 0x2F:
                finished = True
                break
            continue
        if byte & 0x80:
            status = byte
            pos += 1
        if status is None:
            raise MidiFormatError("running status without a previous status byte")
        kind, ch = status & 0xF0, status & 0x0F
        if kind in (0x80, 0x90, 0xA0, 0xB0, 0xE0):
            a, b = data[pos], data[pos + 1]
            pos += 2
        else:
            a, b = data[pos], 0
            pos += 1
        if kind == 0x90 and b > 0:
            if (ch, a) in active:
                raise MidiFormatError(f"overlapping note {a} on channel {ch}")
            active[(ch, a)] = tick
        elif kind == 0x80 or (kind == 0x90 and b == 0):
            start = active.pop((ch, a), None)
            if start is None:
                raise MidiFormatError(f"note-off without note-on: {a} on channel {ch}")
            notes.append((ch, a, start, tick))
    if not finished:
        raise MidiFormatError("missing end-of-track")
    if active:
        raise MidiFormatError("notes still sounding at end of track")
    notes.sort(key=lambda e: (e[2], e[0], e[1]))
    return {"division": division, "tempo": tempo, "length": tick, "notes": notes}


def roll_to_ppm(rolls) -> bytes:
    """Binary P6 image: one column per slot, tone row 0 at the bottom, white background.

    Active cells take the sum of their voices' colours, clamped to 255.
    """
    rolls = np.asarray(rolls)
    if rolls.ndim == 3:
        rolls = rolls[None]
    if len(rolls) == 0:
        raise ValueError("no measures to render")
    n, rows, steps, voices = rolls.shape
    flat = rolls.transpose(1, 0, 2, 3).reshape(rows, n * steps, voices) > 0
    ink = np.zeros((rows, n * steps, 3), dtype=np.int32)
    for v in range(voices):
        ink += flat[:, :, v, None] * np.array(VOICE_COLORS[v % len(VOICE_COLORS)], dtype=np.int32)
    any_on = flat.any(axis=2)
    img = np.where(any_on[:, :, None], np.clip(ink, 0, 255), 255).astype(np.uint8)
    img = img[::-1]  # row 0 at the bottom
    header = f"P6\n{n * steps} {rows}\n255\n".encode("ascii")
    return header + img.tobytes()
