"""RIFF/WAVE reader and writer for 16-bit little-endian PCM."""

from __future__ import annotations

import struct

import numpy as np

from .audio_synth import AudioClip
from .errors import MalformedWavError, UnsupportedWavError, WavIOError

PCM_FORMAT = 1
BITS_PER_SAMPLE = 16
FULL_SCALE = 32767


def encode_wav(clip: AudioClip) -> bytes:
    pcm = np.round(clip.samples * FULL_SCALE).astype("<i2")
    data = pcm.T.tobytes()  # interleave channels frame by frame
    block_align = clip.channels * BITS_PER_SAMPLE // 8
    fmt = struct.pack("<HHIIHH", PCM_FORMAT, clip.channels, clip.sample_rate_hz,
                      clip.sample_rate_hz * block_align, block_align, BITS_PER_SAMPLE)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    if len(data) % 2:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(clip: AudioClip, path) -> None:
    payload = encode_wav(clip)
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise WavIOError(f"cannot write {path}: {exc.strerror or exc}") from exc


def decode_wav(buf: bytes, label: str = "") -> AudioClip:
    if len(buf) < 12:
        raise MalformedWavError("file shorter than a RIFF header")
    riff, _size, wave = struct.unpack("<4sI4s", buf[:12])
    if riff != b"RIFF" or wave != b"WAVE":
        raise MalformedWavError("missing RIFF/WAVE signature")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(buf):
        chunk_id, size = struct.unpack("<4sI", buf[pos:pos + 8])
        body = buf[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise MalformedWavError(f"chunk {chunk_id!r} truncated ({len(body)} of {size} bytes)")
        if chunk_id == b"fmt ":
            if size < 16:
                raise MalformedWavError("fmt chunk shorter than 16 bytes")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            data = body
            break
        pos += 8 + size + (size & 1)

    if fmt is None:
        raise MalformedWavError("no fmt chunk before data")
    if data is None:
        raise MalformedWavError("no data chunk")
    audio_format, channels, rate, _byte_rate, block_align, bits = fmt
    if audio_format != PCM_FORMAT or bits != BITS_PER_SAMPLE:
        raise UnsupportedWavError(f"only 16-bit PCM is supported (format {audio_format}, {bits} bits)")
    if channels not in (1, 2):
        raise UnsupportedWavError(f"only mono or stereo is supported, got {channels} channels")
    if block_align != channels * 2 or rate == 0:
        raise MalformedWavError("inconsistent fmt chunk")
    if len(data) % block_align:
        raise MalformedWavError("data chunk is not a whole number of frames")

    pcm = np.frombuffer(data, dtype="<i2").reshape(-1, channels).T
    x = np.maximum(pcm.astype(np.float64) / FULL_SCALE, -1.0)
    return AudioClip(x, rate, label)


def read_wav(path, label: str | None = None) -> AudioClip:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise WavIOError(f"cannot read {path}: {exc.strerror or exc}") from exc
    if label is None:
        label = str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return decode_wav(buf, label)
