"""Event-stream ingestion and the desk-scale synthetic dataset.

The on-disk format (EVST) is little-endian: magic ``EVST``, u32 version=1,
u32 width, u32 height, u64 count, then ``count`` packed records of
(u32 t_us, u16 x, u16 y, u8 p). Streams are validated on parse; each
failure mode raises its own error type.

Frame integration bins per-polarity event counts into fixed-width windows,
and downsampling is fractional-bin area averaging, so both maps are linear
in the event counts.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EVST_MAGIC = b"EVST"
EVST_VERSION = 1
_HEADER = struct.Struct("<4sIIIQ")
EVENT_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])


class EvstError(ValueError):
    """Base for event-stream format violations."""


class BadMagicError(EvstError):
    pass


class TruncatedError(EvstError):
    pass


class FieldRangeError(EvstError):
    """Coordinate or polarity outside the sensor/domain bounds."""


class TimestampOrderError(EvstError):
    pass


@dataclass
class EventStream:
    width: int
    height: int
    events: np.ndarray  # EVENT_DTYPE records, timestamps non-decreasing

    def __len__(self):
        return len(self.events)

    def validate(self):
        ev = self.events
        if ev.dtype != EVENT_DTYPE:
            raise EvstError(f"events must have dtype {EVENT_DTYPE}, got {ev.dtype}")
        if len(ev) == 0:
            return self
        if ev["x"].max(initial=0) >= self.width:
            raise FieldRangeError(
                f"event x={ev['x'].max()} outside sensor width {self.width}"
            )
        if ev["y"].max(initial=0) >= self.height:
            raise FieldRangeError(
                f"event y={ev['y'].max()} outside sensor height {self.height}"
            )
        if ev["p"].max(initial=0) > 1:
            raise FieldRangeError(f"polarity must be 0 or 1, got {ev['p'].max()}")
        if np.any(np.diff(ev["t"].astype(np.int64)) < 0):
            raise TimestampOrderError("timestamps decrease within the stream")
        return self


def serialize_evt(stream: EventStream) -> bytes:
    stream.validate()
    head = _HEADER.pack(EVST_MAGIC, EVST_VERSION, stream.width, stream.height,
                        len(stream.events))
    return head + stream.events.tobytes()


def parse_evt(data: bytes) -> EventStream:
    if len(data) < _HEADER.size:
        raise TruncatedError(f"file has {len(data)} bytes, header needs {_HEADER.size}")
    magic, version, width, height, count = _HEADER.unpack_from(data)
    if magic != EVST_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {EVST_MAGIC!r}")
    if version != EVST_VERSION:
        raise EvstError(f"unsupported version {version}")
    body = data[_HEADER.size:]
    need = count * EVENT_DTYPE.itemsize
    if len(body) < need:
        raise TruncatedError(
            f"{count} events need {need} bytes, only {len(body)} present"
        )
    if len(body) > need:
        raise EvstError(f"{len(body) - need} trailing bytes after events")
    events = np.frombuffer(body, dtype=EVENT_DTYPE).copy()
    return EventStream(width, height, events).validate()


# ---------------------------------------------------------------------------
# frames

@dataclass
class FrameClip:
    """Per-polarity event counts binned into T windows of delta_ms each."""

    frames: np.ndarray  # [T, 2, H, W] float32, nonnegative
    delta_ms: float
    label: int | None = None


def integrate_frames(stream: EventStream, delta_ms: float, t_max: int) -> FrameClip:
    """Bin events into windows [k*delta, (k+1)*delta); keep the first t_max
    frames, zero-padding when the stream is shorter."""
    if delta_ms <= 0:
        raise ValueError(f"window length must be positive, got {delta_ms}")
    if t_max < 1:
        raise ValueError(f"need at least one frame, got t_max={t_max}")
    h, w = stream.height, stream.width
    frames = np.zeros((t_max, 2, h, w), dtype=np.float32)
    ev = stream.events
    if len(ev):
        delta_us = delta_ms * 1000.0
        k = (ev["t"] / delta_us).astype(np.int64)
        keep = k < t_max
        idx = ((k[keep] * 2 + ev["p"][keep]) * h + ev["y"][keep]) * w + ev["x"][keep]
        counts = np.bincount(idx, minlength=t_max * 2 * h * w)
        frames += counts.reshape(t_max, 2, h, w)
    return FrameClip(frames, delta_ms, getattr(stream, "label", None))


def _bin_weights(src: int, dst: int) -> np.ndarray:
    """Row-stochastic [dst, src] matrix: fractional-overlap area averaging."""
    s = src / dst
    wmat = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = i * s, (i + 1) * s
        for r in range(int(np.floor(lo)), min(src, int(np.ceil(hi)))):
            overlap = min(hi, r + 1) - max(lo, r)
            if overlap > 0:
                wmat[i, r] = overlap / s
    return wmat


def downsample(clip: FrameClip, target) -> FrameClip:
    """Area-average the spatial grid down to target (H, W)."""
    th, tw = (target, target) if np.isscalar(target) else target
    t, c, h, w = clip.frames.shape
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be positive, got {(th, tw)}")
    if th > h or tw > w:
        raise ValueError(f"target {(th, tw)} exceeds source {(h, w)}")
    rows = _bin_weights(h, th)
    cols = _bin_weights(w, tw)
    out = np.einsum("ur,tcrw,vw->tcuv", rows, clip.frames.astype(np.float64), cols)
    return FrameClip(out.astype(np.float32), clip.delta_ms, clip.label)


# ---------------------------------------------------------------------------
# synthetic moving bars

def synth_moving_bars(n_samples: int, classes: int = 2, size: int = 16,
                      t_frames: int = 8, seed: int = 0, delta_ms: float = 10.0,
                      bar_width: int = 2):
    """Vertical bar translating 1 px/frame: class 0 right, class 1 left.

    Events fire at the bar edges (ON where it arrives, OFF where it leaves)
    with per-event timing jitter inside each frame window; the start column
    is jittered per sample. Each sample draws from its own (seed, index)
    stream, so generation order cannot change the data.
    """
    if classes != 2:
        raise ValueError("moving bars is a 2-class task")
    if size < 8 or t_frames < 2:
        raise ValueError(f"need size >= 8 and t_frames >= 2, got {size}, {t_frames}")
    if size - bar_width - (t_frames - 1) < 0:
        raise ValueError(
            f"bar of width {bar_width} cannot travel {t_frames - 1} px on a "
            f"{size}-px sensor"
        )
    streams, labels = [], []
    delta_us = int(delta_ms * 1000)
    for i in range(n_samples):
        label = i % classes
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        streams.append(_bar_stream(size, t_frames, label, rng, delta_us, bar_width))
        labels.append(label)
    return streams, np.asarray(labels, dtype=np.int64)


def _bar_stream(size, t_frames, label, rng, delta_us, bar_w):
    dirn = 1 if label == 0 else -1
    lo, hi = (0, size - bar_w - (t_frames - 1)) if dirn > 0 else \
             (t_frames - 1, size - bar_w)
    c0 = int(rng.integers(lo, hi + 1))
    ts, xs, ys, ps = [], [], [], []

    rows = np.arange(size, dtype=np.uint16)
    # appearance: the whole bar switches on inside the first window
    for dx in range(bar_w):
        ts.append(rng.integers(0, delta_us, size=size).astype(np.uint32))
        xs.append(np.full(size, c0 + dx, dtype=np.uint16))
        ys.append(rows)
        ps.append(np.ones(size, dtype=np.uint8))
    # each move: leading edge brightens (ON), trailing edge darkens (OFF)
    for k in range(1, t_frames):
        ck = c0 + k * dirn
        lead = ck + bar_w - 1 if dirn > 0 else ck
        trail = ck - 1 if dirn > 0 else ck + bar_w
        for col, pol in ((lead, 1), (trail, 0)):
            ts.append(rng.integers(k * delta_us, (k + 1) * delta_us, size=size)
                      .astype(np.uint32))
            xs.append(np.full(size, col, dtype=np.uint16))
            ys.append(rows)
            ps.append(np.full(size, pol, dtype=np.uint8))

    events = np.empty(sum(len(t) for t in ts), dtype=EVENT_DTYPE)
    events["t"] = np.concatenate(ts)
    events["x"] = np.concatenate(xs)
    events["y"] = np.concatenate(ys)
    events["p"] = np.concatenate(ps)
    events = events[np.argsort(events["t"], kind="stable")]
    return EventStream(size, size, events).validate()


# ---------------------------------------------------------------------------
# splitting and the on-disk dataset layout

def split(labels, seed: int = 0):
    """Deterministic stratified 9:1 split -> (train_idx, test_idx)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    train, test = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < 2:
            raise ValueError(f"class {cls} has {len(idx)} sample(s); need >= 2")
        perm = rng.permutation(idx)
        n_test = max(1, round(len(idx) / 10))
        test.extend(perm[:n_test])
        train.extend(perm[n_test:])
    return np.sort(np.asarray(train)), np.sort(np.asarray(test))


def write_dataset(root, streams, labels, train_idx, test_idx):
    """Lay out <root>/<split>/<class>/<id>.evst plus a sha-256 manifest."""
    root = Path(root)
    entries = []
    for split_name, indices in (("train", train_idx), ("test", test_idx)):
        for i in indices:
            rel = Path(split_name) / str(int(labels[i])) / f"{int(i):05d}.evst"
            path = root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            blob = serialize_evt(streams[i])
            path.write_bytes(blob)
            entries.append((rel.as_posix(), hashlib.sha256(blob).hexdigest()))
    entries.sort()
    manifest = "".join(f"{digest}  {rel}\n" for rel, digest in entries)
    (root / "manifest.txt").write_text(manifest)
    return root


def manifest_digest(root) -> str:
    """sha-256 of the dataset manifest itself, for run provenance."""
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.txt under {root}")
    return hashlib.sha256(path.read_bytes()).hexdigest()


def list_split(root, split_name):
    """Sorted (path, label) pairs for one split directory."""
    base = Path(root) / split_name
    if not base.is_dir():
        raise FileNotFoundError(f"no {split_name!r} split under {root}")
    out = []
    for cls_dir in sorted(base.iterdir()):
        if not cls_dir.is_dir():
            continue
        label = int(cls_dir.name)
        for f in sorted(cls_dir.glob("*.evst")):
            out.append((f, label))
    if not out:
        raise FileNotFoundError(f"split {split_name!r} under {root} is empty")
    return out


def load_frames(root, split_name, delta_ms, t_max, target_hw=None):
    """Parse + integrate a split into ([n, T, 2, H, W] float32, labels)."""
    pairs = list_split(root, split_name)
    clips, labels = [], []
    for path, label in pairs:
        stream = parse_evt(path.read_bytes())
        clip = integrate_frames(stream, delta_ms, t_max)
        if target_hw is not None:
            clip = downsample(clip, target_hw)
        clips.append(clip.frames)
        labels.append(label)
    return np.stack(clips), np.asarray(labels, dtype=np.int64)
