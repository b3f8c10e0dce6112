"""Minimal Standard MIDI File reader and writer.

Only what the analysis pipeline needs: note on/off pairs, program changes,
track names, tempo and time-signature meta events. Formats 0 and 1 with a
ticks-per-quarter division are supported.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path


class MidiParseError(ValueError):
    """Raised for malformed MIDI data; carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class RawEvent:
    tick: int
    kind: str  # 'note_on', 'note_off', 'program', 'tempo', 'meter', 'name', 'other'
    channel: int = -1
    data: tuple = ()


@dataclass
class RawMidi:
    format: int
    ticks_per_quarter: int
    tracks: list[list[RawEvent]] = field(default_factory=list)


# number of data bytes for channel voice messages, keyed by high nibble
_DATA_LEN = {0x8: 2, 0x9: 2, 0xA: 2, 0xB: 2, 0xC: 1, 0xD: 1, 0xE: 2}


def _read_varlen(buf: bytes, pos: int, end: int) -> tuple[int, int]:
    value = 0
    for _ in range(4):
        if pos >= end:
            raise MidiParseError("truncated variable-length quantity", pos)
        byte = buf[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise MidiParseError("variable-length quantity longer than 4 bytes", pos - 1)


def _parse_track(buf: bytes, pos: int, end: int) -> list[RawEvent]:
    events = []
    tick = 0
    status = None
    while pos < end:
        delta, pos = _read_varlen(buf, pos, end)
        tick += delta
        if pos >= end:
            raise MidiParseError("event truncated after delta time", pos)
        byte = buf[pos]
        if byte == 0xFF:
            if pos + 1 >= end:
                raise MidiParseError("truncated meta event", pos)
            meta_type = buf[pos + 1]
            length, data_pos = _read_varlen(buf, pos + 2, end)
            if data_pos + length > end:
                raise MidiParseError("meta event runs past end of track", pos)
            data = buf[data_pos:data_pos + length]
            pos = data_pos + length
            if meta_type == 0x51 and length == 3:
                events.append(RawEvent(tick, "tempo", data=(int.from_bytes(data, "big"),)))
            elif meta_type == 0x58 and length >= 2:
                events.append(RawEvent(tick, "meter", data=(data[0], 2 ** data[1])))
            elif meta_type == 0x03:
                events.append(RawEvent(tick, "name", data=(data.decode("latin-1"),)))
            elif meta_type == 0x2F:
                break
            status = None
        elif byte in (0xF0, 0xF7):
            length, data_pos = _read_varlen(buf, pos + 1, end)
            if data_pos + length > end:
                raise MidiParseError("sysex event runs past end of track", pos)
            pos = data_pos + length
            status = None
        else:
            if byte & 0x80:
                status = byte
                pos += 1
            elif status is None:
                raise MidiParseError("data byte without running status", pos)
            hi, channel = status >> 4, status & 0x0F
            if hi not in _DATA_LEN:
                raise MidiParseError(f"unexpected status byte 0x{status:02X}", pos - 1)
            n = _DATA_LEN[hi]
            if pos + n > end:
                raise MidiParseError("channel message truncated", pos)
            data = buf[pos:pos + n]
            pos += n
            if hi == 0x9 and data[1] > 0:
                events.append(RawEvent(tick, "note_on", channel, (data[0], data[1])))
            elif hi == 0x8 or hi == 0x9:
                events.append(RawEvent(tick, "note_off", channel, (data[0],)))
            elif hi == 0xC:
                events.append(RawEvent(tick, "program", channel, (data[0],)))
    return events


def parse_midi_bytes(buf: bytes) -> RawMidi:
    if len(buf) < 14 or buf[:4] != b"MThd":
        raise MidiParseError("missing MThd header", 0)
    (header_len,) = struct.unpack(">I", buf[4:8])
    if header_len < 6 or 8 + header_len > len(buf):
        raise MidiParseError(f"bad header length {header_len}", 4)
    fmt, ntracks, division = struct.unpack(">HHH", buf[8:14])
    if fmt not in (0, 1):
        raise MidiParseError(f"unsupported MIDI format {fmt}", 8)
    if division & 0x8000 or division == 0:
        raise MidiParseError("SMPTE or zero time division is not supported", 12)
    midi = RawMidi(fmt, division)
    pos = 8 + header_len
    while pos < len(buf) and len(midi.tracks) < ntracks:
        if pos + 8 > len(buf):
            raise MidiParseError("truncated chunk header", pos)
        chunk_id = buf[pos:pos + 4]
        (length,) = struct.unpack(">I", buf[pos + 4:pos + 8])
        start, end = pos + 8, pos + 8 + length
        if end > len(buf):
            raise MidiParseError(f"chunk {chunk_id!r} length {length} exceeds file size", pos + 4)
        if chunk_id == b"MTrk":
            midi.tracks.append(_parse_track(buf, start, end))
        pos = end
    if len(midi.tracks) < ntracks:
        raise MidiParseError(f"header declares {ntracks} tracks, found {len(midi.tracks)}", pos)
    return midi


def read_midi(path) -> RawMidi:
    return parse_midi_bytes(Path(path).read_bytes())


# -- writing -----------------------------------------------------------------

def _varlen(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


@dataclass
class TrackSpec:
    """A track to be written: notes are (onset_tick, duration_ticks, pitch, velocity)."""

    name: str
    channel: int
    program: int
    notes: list[tuple[int, int, int, int]]


def midi_bytes(tracks: list[TrackSpec], ticks_per_quarter: int = 480,
               tempo_map: list[tuple[int, int]] | None = None,
               meter_map: list[tuple[int, int, int]] | None = None) -> bytes:
    """Serialize a format-1 file with a conductor track followed by ``tracks``."""
    conductor = []
    for tick, uspq in tempo_map or []:
        conductor.append((tick, 0, b"\xFF\x51\x03" + uspq.to_bytes(3, "big")))
    for tick, num, den in meter_map or []:
        conductor.append((tick, 0, bytes([0xFF, 0x58, 4, num, den.bit_length() - 1, 24, 8])))
    chunks = [conductor]
    for spec in tracks:
        events = []
        name = spec.name.encode("latin-1")
        events.append((0, 0, b"\xFF\x03" + _varlen(len(name)) + name))
        events.append((0, 1, bytes([0xC0 | spec.channel, spec.program])))
        for onset, duration, pitch, velocity in spec.notes:
            # offs sort before ons at the same tick so repeated notes pair correctly
            events.append((onset + duration, 2, bytes([0x80 | spec.channel, pitch, 0])))
            events.append((onset, 3, bytes([0x90 | spec.channel, pitch, velocity])))
        chunks.append(events)

    out = [b"MThd", struct.pack(">IHHH", 6, 1, len(chunks), ticks_per_quarter)]
    for events in chunks:
        events.sort(key=lambda e: (e[0], e[1]))
        body = bytearray()
        last = 0
        for tick, _, payload in events:
            body += _varlen(tick - last) + payload
            last = tick
        body += b"\x00\xFF\x2F\x00"
        out.append(b"MTrk" + struct.pack(">I", len(body)) + bytes(body))
    return b"".join(out)


def write_midi(path, tracks: list[TrackSpec], ticks_per_quarter: int = 480,
               tempo_map=None, meter_map=None) -> None:
    Path(path).write_bytes(midi_bytes(tracks, ticks_per_quarter, tempo_map, meter_map))
