"""Standard MIDI File reading and writing on top of mido."""

from __future__ import annotations

import io
import logging
import struct
from pathlib import Path

import mido

logger = logging.getLogger(__name__)

# 0.5 ms per tick: tempo 500000 us/beat over 1000 ticks/beat
TICKS_PER_BEAT = 1000
TEMPO_US = 500_000


class MidiParseError(ValueError):
    """Malformed MIDI data. ``offset`` is the byte position of the bad chunk, when known."""

    def __init__(self, path, message: str, offset: int | None = None):
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{path}: {message}{where}")
        self.path = str(path)
        self.offset = offset


def _locate_corruption(data: bytes) -> tuple[str, int]:
    """Walk the chunk structure and report the first inconsistency."""
    if len(data) < 14 or data[:4] != b"MThd":
        return "missing MThd header", 0
    (hlen,) = struct.unpack(">I", data[4:8])
    if hlen < 6:
        return "header chunk too short", 4
    fmt, ntrks, _ = struct.unpack(">HHH", data[8:14])
    if fmt not in (0, 1, 2):
        return f"unsupported SMF format {fmt}", 8
    pos = 8 + hlen
    for _ in range(ntrks):
        if pos + 8 > len(data):
            return "truncated track chunk header", pos
        if data[pos : pos + 4] != b"MTrk":
            return "expected MTrk chunk", pos
        (clen,) = struct.unpack(">I", data[pos + 4 : pos + 8])
        if pos + 8 + clen > len(data):
            return "track chunk runs past end of file", pos
        pos += 8 + clen
    return "malformed event data", pos if pos < len(data) else 14


def read_note_pairs(path) -> tuple[list[tuple[int, float, float, int]], float, int]:
    """Read ``(pitch, onset, offset, velocity)`` tuples with tempo-resolved seconds.

    Returns the note list, the file length in seconds, and the number of
    note-ons that were still open at the end and had to be closed there.

    A note-on for a pitch that is already sounding closes the sounding note
    at that instant and opens a new one.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: cannot read MIDI file ({exc})") from exc
    try:
        mid = mido.MidiFile(file=io.BytesIO(data))
    except (OSError, EOFError, ValueError, KeyError, IndexError) as exc:
        msg, offset = _locate_corruption(data)
        raise MidiParseError(path, f"{msg} ({exc})", offset) from exc
    if mid.type == 2:
        raise MidiParseError(path, "SMF format 2 is not supported", 8)

    notes = []
    sounding: dict[int, tuple[float, int]] = {}
    now = 0.0
    for msg in mid:  # merged tracks, msg.time already in seconds
        now += msg.time
        if msg.type == "note_on" and msg.velocity > 0:
            if msg.note in sounding:
                start, vel = sounding.pop(msg.note)
                if now > start:
                    notes.append((msg.note, start, now, vel))
            sounding[msg.note] = (now, msg.velocity)
        elif msg.type in ("note_off", "note_on"):
            if msg.note in sounding:
                start, vel = sounding.pop(msg.note)
                if now > start:
                    notes.append((msg.note, start, now, vel))
    dangling = len(sounding)
    if dangling:
        logger.warning("%s: %d note-on events without note-off, closed at end of file", path, dangling)
        for pitch, (start, vel) in sounding.items():
            if now > start:
                notes.append((pitch, start, now, vel))
    return notes, now, dangling


def write_note_pairs(path, notes) -> Path:
    """Write ``(pitch, onset, offset, velocity)`` tuples as a format-0 SMF."""
    path = Path(path)
    seconds_per_tick = TEMPO_US / 1e6 / TICKS_PER_BEAT
    events = []
    for pitch, onset, offset, velocity in notes:
        on_tick = int(round(onset / seconds_per_tick))
        off_tick = max(int(round(offset / seconds_per_tick)), on_tick + 1)
        # note-offs sort before note-ons sharing a tick
        events.append((on_tick, 1, int(pitch), int(velocity)))
        events.append((off_tick, 0, int(pitch), 0))
    events.sort()

    track = mido.MidiTrack()
    track.append(mido.MetaMessage("set_tempo", tempo=TEMPO_US, time=0))
    last = 0
    for tick, is_on, pitch, velocity in events:
        kind = "note_on" if is_on else "note_off"
        track.append(mido.Message(kind, note=pitch, velocity=velocity, time=tick - last))
        last = tick
    track.append(mido.MetaMessage("end_of_track", time=0))
    mid = mido.MidiFile(type=0, ticks_per_beat=TICKS_PER_BEAT)
    mid.tracks.append(track)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        mid.save(str(path))
    except OSError as exc:
        raise OSError(f"{path}: cannot write MIDI file ({exc})") from exc
    return path

