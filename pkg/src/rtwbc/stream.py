"""Motion-capture ingestion and synthesis.

Three ways to obtain Observation sequences: decode binary datagrams
arriving over UDP, replay a JSON Lines recording from disk, or generate
analytic test motions (a hand spiral, a walked path with turns, a
static pose).

The wire layout is our own and is fixed bit for bit so other processes
can bridge to it: a little-endian header ``magic u32, sequence u32,
timestamp f64, count u16`` (18 bytes) followed by ``count`` segment
records ``id u32, position 3xf64, quaternion wxyz 4xf64`` (60 bytes
each). A datagram is exactly ``18 + 60*count`` bytes long.

Recordings are JSON Lines: one observation per line as
``{"t": <s>, "segments": {<name>: {"p": [x,y,z], "q": [w,x,y,z]}}}``.
"""

from __future__ import annotations

import json
import math
import socket
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .geom import Rotation, Transform
from .retarget import Observation, derive_footprint

__all__ = [
    "MAGIC",
    "MAX_SEGMENTS",
    "SEGMENT_IDS",
    "SEGMENT_NAMES",
    "DecodeError",
    "RecordingError",
    "encode",
    "decode",
    "parse_datagram",
    "save_recording",
    "replay",
    "SpiralParams",
    "WalkParams",
    "StaticParams",
    "synth",
    "synth_spiral",
    "synth_walk_path",
    "synth_static",
    "LatestObservation",
    "UdpListener",
    "parse_address",
    "DEFAULT_HOST",
    "DEFAULT_PORT",
]

MAGIC = 0x4D564E31
MAX_SEGMENTS = 32

_HEADER = struct.Struct("<IIdH")
_RECORD = struct.Struct("<I3d4d")

# Header field offsets, used in decode errors.
_OFF_MAGIC = 0
_OFF_TIME = 8
_OFF_COUNT = 16

# Numeric wire ids for the segment names the mapping consumes. Ids not
# listed here still decode; they come back named "segment_<id>".
SEGMENT_IDS = {
    "pf": 1,
    "pelvis": 2,
    "pt": 3,
    "ps": 4,
    "pe": 5,
    "pw": 6,
    "ps_r": 7,
    "pe_r": 8,
    "pw_r": 9,
    "ps_l": 10,
    "pe_l": 11,
    "pw_l": 12,
}
SEGMENT_NAMES = {i: n for n, i in SEGMENT_IDS.items()}


class DecodeError(ValueError):
    """A datagram failed validation; offset locates the bad bytes."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte {offset})")
        self.offset = offset


class RecordingError(ValueError):
    """A recording line failed to parse; line is 1-based."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _segment_id(name: str) -> int:
    if name in SEGMENT_IDS:
        return SEGMENT_IDS[name]
    if name.startswith("segment_"):
        try:
            return int(name[len("segment_"):])
        except ValueError:
            pass
    raise ValueError(f"no wire id for segment {name!r}")


def _segment_name(wire_id: int) -> str:
    return SEGMENT_NAMES.get(wire_id, f"segment_{wire_id}")


def encode(obs: Observation, sequence: int = 0) -> bytes:
    """Pack an Observation into one datagram.

    Segments are written in wire-id order so equal observations encode
    to equal bytes.
    """
    if not 0 <= sequence <= 0xFFFFFFFF:
        raise ValueError(f"sequence {sequence} does not fit in u32")
    items = sorted(
        ((_segment_id(name), pose) for name, pose in obs.poses.items()),
        key=lambda pair: pair[0],
    )
    if len(items) > MAX_SEGMENTS:
        raise ValueError(f"{len(items)} segments exceed the cap of {MAX_SEGMENTS}")
    out = bytearray(_HEADER.pack(MAGIC, sequence, obs.timestamp, len(items)))
    for wire_id, pose in items:
        p = pose.translation
        q = pose.rotation.wxyz
        out += _RECORD.pack(wire_id, p[0], p[1], p[2], q[0], q[1], q[2], q[3])
    return bytes(out)


def parse_datagram(data: bytes) -> tuple[int, Observation]:
    """Validate a datagram and return (sequence number, Observation)."""
    if len(data) < _HEADER.size:
        raise DecodeError(
            f"truncated datagram: {len(data)} bytes, header needs {_HEADER.size}",
            _HEADER.size)
    magic, sequence, timestamp, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DecodeError(f"bad magic 0x{magic:08X}, expected 0x{MAGIC:08X}",
                          _OFF_MAGIC)
    if count > MAX_SEGMENTS:
        raise DecodeError(f"count {count} exceeds the cap of {MAX_SEGMENTS}",
                          _OFF_COUNT)
    if not math.isfinite(timestamp):
        raise DecodeError("non-finite timestamp", _OFF_TIME)
    expected = _HEADER.size + _RECORD.size * count
    if len(data) != expected:
        raise DecodeError(
            f"datagram is {len(data)} bytes, count {count} requires {expected}",
            expected)
    poses: dict[str, Transform] = {}
    for i in range(count):
        base = _HEADER.size + _RECORD.size * i
        raw = _RECORD.unpack_from(data, base)
        wire_id = raw[0]
        position = np.array(raw[1:4])
        quat = np.array(raw[4:8])
        name = _segment_name(wire_id)
        if name in poses:
            raise DecodeError(f"duplicate segment id {wire_id}", base)
        if not np.isfinite(position).all():
            raise DecodeError(f"non-finite position in segment {name}", base + 4)
        norm = float(np.linalg.norm(quat))
        if not np.isfinite(quat).all() or abs(norm - 1.0) > 1e-3:
            raise DecodeError(
                f"quaternion norm {norm:.6f} in segment {name} is not unit",
                base + 28)
        poses[name] = Transform(Rotation(quat), position)
    return sequence, Observation(timestamp=timestamp, poses=poses)


def decode(data: bytes) -> Observation:
    """Decode one datagram, discarding its sequence number."""
    return parse_datagram(data)[1]


# -- recordings --------------------------------------------------------


def save_recording(path, observations) -> int:
    """Write observations as JSON Lines; returns the number written."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for obs in observations:
            segments = {}
            for name in sorted(obs.poses):
                pose = obs.poses[name]
                segments[name] = {
                    "p": [float(v) for v in pose.translation],
                    "q": [float(v) for v in pose.rotation.wxyz],
                }
            fh.write(json.dumps({"t": obs.timestamp, "segments": segments}))
            fh.write("\n")
            count += 1
    return count


def replay(path, speed: float = 1.0):
    """Yield the recorded Observations with timestamps divided by speed.

    speed 2 plays the motion back twice as fast: the poses are
    untouched, only the time axis shrinks. Recorded timestamps must
    increase strictly; blank lines are skipped.
    """
    if not speed > 0.0:
        raise ValueError(f"speed must be positive, got {speed}")
    previous = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordingError(f"invalid JSON: {exc.msg}", lineno) from exc
            try:
                timestamp = float(row["t"])
                poses = {
                    name: Transform(Rotation(entry["q"]), entry["p"])
                    for name, entry in row["segments"].items()
                }
                obs = Observation(timestamp=timestamp / speed, poses=poses)
            except (KeyError, TypeError, ValueError, IndexError) as exc:
                raise RecordingError(f"bad observation: {exc}", lineno) from exc
            if previous is not None and timestamp <= previous:
                raise RecordingError(
                    f"timestamp {timestamp} does not increase past {previous}",
                    lineno)
            previous = timestamp
            yield obs


# -- synthetic motion ---------------------------------------------------


@dataclass(frozen=True)
class SpiralParams:
    """Hand spiral: the wrist winds outward in a horizontal plane.

    The episode length follows from the path length and the average
    hand speed unless duration is given explicitly.
    """

    radius: float = 0.10
    turns: float = 3.0
    speed: float = 0.11
    rate: float = 100.0
    duration: float | None = None
    side: str = "right"

    def __post_init__(self):
        for name in ("radius", "turns", "speed", "rate"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if self.duration is not None and not self.duration > 0.0:
            raise ValueError("duration must be positive")


@dataclass(frozen=True)
class WalkParams:
    """Walked path: straight legs joined by a left and a right arc."""

    speed: float = 0.5
    rate: float = 100.0
    leg: float = 2.0
    turn_radius: float = 1.0
    turn_angle: float = math.pi / 2.0

    def __post_init__(self):
        for name in ("speed", "rate", "leg", "turn_radius", "turn_angle"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class StaticParams:
    """Hold the example pose for a fixed duration."""

    duration: float = 5.0
    rate: float = 100.0

    def __post_init__(self):
        if not self.duration > 0.0:
            raise ValueError("duration must be positive")
        if not self.rate > 0.0:
            raise ValueError("rate must be positive")


def _arm_keys(example: Observation, side: str) -> tuple[str, str, str]:
    """Resolve the shoulder/elbow/wrist keys actually present."""
    keys = []
    for canonical in ("ps", "pe", "pw"):
        if canonical in example.poses:
            keys.append(canonical)
        else:
            keys.append(canonical + {"right": "_r", "left": "_l"}[side])
    missing = [k for k in keys if k not in example.poses]
    if missing:
        raise ValueError(f"example observation lacks segments {missing}")
    return tuple(keys)


def _spiral_offset(u: float, radius: float, turns: float) -> np.ndarray:
    """Planar spiral displacement at normalized time u in [0, 1]."""
    r = radius * u
    phi = 2.0 * math.pi * turns * u
    return np.array([r * math.cos(phi), r * math.sin(phi), 0.0])


def _spiral_length(radius: float, turns: float) -> float:
    """Arc length of the archimedean spiral r = radius*u, phi = 2*pi*turns*u.

    Closed form: the speed is radius*sqrt(1 + (c*u)^2) with c = 2*pi*turns,
    whose integral over [0, 1] is known.
    """
    c = 2.0 * math.pi * turns
    return radius * (0.5 * math.sqrt(1.0 + c * c) + math.asinh(c) / (2.0 * c))


def synth_spiral(example: Observation, params: SpiralParams | None = None):
    """Wrist spiral in the horizontal plane; everything else holds still.

    The first observation reproduces the example pose exactly. The
    elbow tracks the wrist through a two-segment closure that keeps
    both human segment lengths constant and stays on the example's
    side of the shoulder-wrist axis.
    """
    params = params or SpiralParams()
    ps_key, pe_key, pw_key = _arm_keys(example, params.side)
    shoulder = example.poses[ps_key].translation
    elbow0 = example.poses[pe_key].translation
    wrist0 = example.poses[pw_key].translation
    upper = float(np.linalg.norm(elbow0 - shoulder))
    fore = float(np.linalg.norm(wrist0 - elbow0))
    if upper < 1e-6 or fore < 1e-6:
        raise ValueError("example arm segments are degenerate")

    if params.duration is not None:
        duration = params.duration
    else:
        duration = _spiral_length(params.radius, params.turns) / params.speed

    # The elbow stays on the example side of the shoulder-wrist axis:
    # remember the perpendicular part of the example elbow offset.
    axis0 = wrist0 - shoulder
    d0 = float(np.linalg.norm(axis0))
    if d0 < 1e-6:
        raise ValueError("example wrist coincides with the shoulder")
    w0 = axis0 / d0
    perp0 = (elbow0 - shoulder) - np.dot(elbow0 - shoulder, w0) * w0
    if np.linalg.norm(perp0) < 1e-9:
        # Straight arm in the example; pick a stable reference instead.
        perp0 = np.array([0.0, 0.0, -1.0])
        perp0 -= np.dot(perp0, w0) * w0
    perp0 /= np.linalg.norm(perp0)

    count = int(math.floor(duration * params.rate)) + 1
    reach = upper + fore
    frames = []
    for i in range(count):
        t = i / params.rate
        u = min(t / duration, 1.0)
        wrist = wrist0 + _spiral_offset(u, params.radius, params.turns)
        axis = wrist - shoulder
        d = float(np.linalg.norm(axis))
        if d > reach - 1e-3:
            raise ValueError(
                f"spiral leaves the arm's reach at t={t:.3f}: "
                f"{d:.3f} m vs {reach:.3f} m; shrink the radius")
        w = axis / d
        # Elbow from the two-segment closure (law of cosines).
        cos_a = (upper * upper + d * d - fore * fore) / (2.0 * upper * d)
        cos_a = min(1.0, max(-1.0, cos_a))
        sin_a = math.sqrt(max(0.0, 1.0 - cos_a * cos_a))
        perp = perp0 - np.dot(perp0, w) * w
        n = float(np.linalg.norm(perp))
        perp = perp / n if n > 1e-9 else perp0
        elbow = shoulder + upper * (cos_a * w + sin_a * perp)

        poses = dict(example.poses)
        poses[pe_key] = Transform(example.poses[pe_key].rotation, elbow)
        poses[pw_key] = Transform(example.poses[pw_key].rotation, wrist)
        frames.append(Observation(timestamp=t, poses=poses))
    return frames


def _walk_pieces(params: WalkParams):
    """Piecewise path: leg, left arc, leg, right arc, leg.

    Each piece maps local arc length to (x, y, heading) in the frame of
    the piece start; pieces are chained analytically.
    """
    pieces = []
    kinds = ("leg", "left", "leg", "right", "leg")
    x, y, heading = 0.0, 0.0, 0.0
    for kind in kinds:
        if kind == "leg":
            length = params.leg
        else:
            length = params.turn_radius * params.turn_angle
        pieces.append((x, y, heading, kind, length))
        if kind == "leg":
            x += params.leg * math.cos(heading)
            y += params.leg * math.sin(heading)
        else:
            sign = 1.0 if kind == "left" else -1.0
            cx = x - sign * params.turn_radius * math.sin(heading)
            cy = y + sign * params.turn_radius * math.cos(heading)
            end = heading + sign * params.turn_angle
            x = cx + sign * params.turn_radius * math.sin(end)
            y = cy - sign * params.turn_radius * math.cos(end)
            heading = end
    total = sum(p[4] for p in pieces)
    return pieces, total


def synth_walk_path(example: Observation, params: WalkParams | None = None):
    """Carry the whole example skeleton along a path with two turns.

    The footprint follows the path with its yaw on the tangent; every
    other segment rides rigidly, so the person walks with a fixed
    posture. The first observation reproduces the example pose.
    """
    params = params or WalkParams()
    if "pf" in example.poses:
        pf0 = example.poses["pf"]
    elif "pelvis" in example.poses:
        pf0 = derive_footprint(example.poses["pelvis"])
    else:
        raise ValueError("example observation lacks a footprint and a pelvis")

    pieces, total = _walk_pieces(params)
    duration = total / params.speed
    pf0_inv = pf0.inverse()
    locals_ = {name: pf0_inv @ pose for name, pose in example.poses.items()}

    count = int(math.floor(duration * params.rate)) + 1
    frames = []
    for i in range(count):
        t = i / params.rate
        s = min(t * params.speed, total)
        x, y, heading = _walk_state(s, pieces, params)
        step = Transform(Rotation.rot_z(heading), np.array([x, y, 0.0]))
        pf = pf0 @ step
        poses = {name: pf @ local for name, local in locals_.items()}
        frames.append(Observation(timestamp=t, poses=poses))
    return frames


def _walk_state(s: float, pieces, params: WalkParams) -> tuple[float, float, float]:
    """Position and tangent heading at arc length s along the chained path."""
    remaining = s
    for x0, y0, heading, kind, length in pieces:
        if remaining > length:
            remaining -= length
            continue
        if kind == "leg":
            return (x0 + remaining * math.cos(heading),
                    y0 + remaining * math.sin(heading),
                    heading)
        sign = 1.0 if kind == "left" else -1.0
        swept = remaining / params.turn_radius
        cx = x0 - sign * params.turn_radius * math.sin(heading)
        cy = y0 + sign * params.turn_radius * math.cos(heading)
        end = heading + sign * swept
        return (cx + sign * params.turn_radius * math.sin(end),
                cy - sign * params.turn_radius * math.cos(end),
                end)
    x0, y0, heading, kind, length = pieces[-1]
    if kind == "leg":
        return (x0 + length * math.cos(heading),
                y0 + length * math.sin(heading),
                heading)
    sign = 1.0 if kind == "left" else -1.0
    cx = x0 - sign * params.turn_radius * math.sin(heading)
    cy = y0 + sign * params.turn_radius * math.cos(heading)
    end = heading + sign * params.turn_angle
    return (cx + sign * params.turn_radius * math.sin(end),
            cy - sign * params.turn_radius * math.cos(end),
            end)


def synth_static(example: Observation, params: StaticParams | None = None):
    """Repeat the example pose at the stream rate."""
    params = params or StaticParams()
    count = int(math.floor(params.duration * params.rate)) + 1
    return [Observation(timestamp=i / params.rate, poses=example.poses)
            for i in range(count)]


_SYNTH_KINDS = {
    "spiral": (synth_spiral, SpiralParams),
    "walk_path": (synth_walk_path, WalkParams),
    "static": (synth_static, StaticParams),
}


def synth(kind: str, example: Observation, params=None):
    """Generate one of the named test motions from an example pose."""
    try:
        fn, cls = _SYNTH_KINDS[kind]
    except KeyError:
        raise ValueError(
            f"unknown synth kind {kind!r}; choose from {sorted(_SYNTH_KINDS)}"
        ) from None
    if params is not None and not isinstance(params, cls):
        raise TypeError(f"{kind} expects {cls.__name__}, got {type(params).__name__}")
    return fn(example, params)


# -- live ingestion ------------------------------------------------------

DEFAULT_HOST = "127.0.0.1"
DEFAULT_PORT = 9870


def parse_address(text: str) -> tuple[str, int]:
    """Parse "host:port", ":port" or "port" into a bind address."""
    text = text.strip()
    if ":" in text:
        host, _, port_text = text.rpartition(":")
        host = host or DEFAULT_HOST
    else:
        host, port_text = DEFAULT_HOST, text
    try:
        port = int(port_text)
    except ValueError:
        raise ValueError(f"invalid listen address {text!r}") from None
    if not 0 <= port <= 65535:
        raise ValueError(f"port {port} out of range")
    return host, port


class LatestObservation:
    """Single-slot mailbox with replace semantics.

    The producer never waits: a put while the previous value is still
    unconsumed replaces it and bumps the overwrite counter. take()
    returns each value at most once.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._value = None
        self._fresh = False
        self._overwrites = 0

    def put(self, obs: Observation) -> None:
        with self._lock:
            if self._fresh:
                self._overwrites += 1
            self._value = obs
            self._fresh = True

    def take(self):
        """Newest unseen Observation, or None."""
        with self._lock:
            if not self._fresh:
                return None
            self._fresh = False
            return self._value

    def peek(self):
        """Newest Observation regardless of consumption, or None."""
        with self._lock:
            return self._value

    @property
    def overwrites(self) -> int:
        with self._lock:
            return self._overwrites


class UdpListener:
    """Background thread feeding datagrams into a latest-value mailbox.

    Malformed datagrams and stale sequence numbers are counted and
    dropped; the consumer only ever sees validated, in-order
    observations. Bind to port 0 for an ephemeral port and read it
    back from .port.
    """

    def __init__(self, host: str = DEFAULT_HOST, port: int = DEFAULT_PORT):
        self.mailbox = LatestObservation()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind((host, port))
        self._sock.settimeout(0.1)
        self._thread: threading.Thread | None = None
        self._closing = threading.Event()
        self._lock = threading.Lock()
        self._received = 0
        self._decode_errors = 0
        self._dropped_stale = 0
        self._last_sequence: int | None = None

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1]

    @property
    def host(self) -> str:
        return self._sock.getsockname()[0]

    def start(self) -> "UdpListener":
        if self._thread is not None:
            raise RuntimeError("listener already started")
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name="rtwbc-udp-listener")
        self._thread.start()
        return self

    def stop(self) -> None:
        self._closing.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
            self._thread = None
        self._sock.close()

    def __enter__(self) -> "UdpListener":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def stats(self) -> dict:
        with self._lock:
            return {
                "received": self._received,
                "decode_errors": self._decode_errors,
                "dropped_stale": self._dropped_stale,
                "overwrites": self.mailbox.overwrites,
            }

    def _run(self) -> None:
        while not self._closing.is_set():
            try:
                data, _ = self._sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            with self._lock:
                self._received += 1
            try:
                sequence, obs = parse_datagram(data)
            except DecodeError:
                with self._lock:
                    self._decode_errors += 1
                continue
            with self._lock:
                if (self._last_sequence is not None
                        and sequence <= self._last_sequence):
                    self._dropped_stale += 1
                    continue
                self._last_sequence = sequence
            self.mailbox.put(obs)
