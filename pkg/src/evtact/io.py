"""File formats: binary/CSV event streams, PFM/PGM images, ASCII PLY clouds.

The binary event format is bit-exact and little-endian:

* 16-byte header: magic ``EVTSTRM1`` (8s), sensor width (u16), height (u16),
  record count (u32);
* 16-byte records: x (u16), y (u16), polarity (i8), 3 zero pad bytes,
  timestamp in microseconds (i64).
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import DataError

EVENT_MAGIC = b"EVTSTRM1"
HEADER_SIZE = 16
RECORD_SIZE = 16

EVENT_DTYPE = np.dtype(
    {
        "names": ["x", "y", "p", "t"],
        "formats": ["<u2", "<u2", "i1", "<i8"],
        "offsets": [0, 2, 4, 8],
        "itemsize": RECORD_SIZE,
    }
)

_HEADER_DTYPE = np.dtype(
    {
        "names": ["magic", "width", "height", "count"],
        "formats": ["S8", "<u2", "<u2", "<u4"],
        "offsets": [0, 8, 10, 12],
        "itemsize": HEADER_SIZE,
    }
)


def make_events(x, y, t, p) -> np.ndarray:
    """Pack coordinate/timestamp/polarity columns into the event record dtype."""
    x = np.asarray(x)
    ev = np.zeros(x.shape[0], dtype=EVENT_DTYPE)
    ev["x"] = x
    ev["y"] = y
    ev["t"] = t
    ev["p"] = p
    return ev


def empty_events() -> np.ndarray:
    return np.zeros(0, dtype=EVENT_DTYPE)


def concat_events(chunks) -> np.ndarray:
    chunks = [c for c in chunks if len(c)]
    if not chunks:
        return empty_events()
    return np.concatenate(chunks)


def save_events(path, events: np.ndarray, width: int, height: int) -> None:
    events = np.ascontiguousarray(events, dtype=EVENT_DTYPE)
    header = np.zeros(1, dtype=_HEADER_DTYPE)
    header["magic"] = EVENT_MAGIC
    header["width"] = width
    header["height"] = height
    header["count"] = len(events)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(events.tobytes())


def load_events(path) -> tuple[np.ndarray, int, int]:
    """Read a binary event file; returns (events, width, height).

    Raises DataError naming the byte offset of the first malformed item.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise DataError(f"{path}: truncated header at byte offset 0 (file is {len(raw)} bytes)")
    header = np.frombuffer(raw[:HEADER_SIZE], dtype=_HEADER_DTYPE)[0]
    if bytes(header["magic"]) != EVENT_MAGIC:
        raise DataError(f"{path}: bad magic at byte offset 0")
    count = int(header["count"])
    width = int(header["width"])
    height = int(header["height"])
    body = len(raw) - HEADER_SIZE
    if body != count * RECORD_SIZE:
        bad = HEADER_SIZE + (body // RECORD_SIZE) * RECORD_SIZE
        raise DataError(
            f"{path}: expected {count} records ({count * RECORD_SIZE} bytes), "
            f"found {body} body bytes; truncation at byte offset {bad}"
        )
    events = np.frombuffer(raw[HEADER_SIZE:], dtype=EVENT_DTYPE).copy()
    bad_p = np.nonzero(~np.isin(events["p"], (-1, 1)))[0]
    if bad_p.size:
        off = HEADER_SIZE + int(bad_p[0]) * RECORD_SIZE + 4
        raise DataError(f"{path}: invalid polarity at byte offset {off}")
    oob = np.nonzero((events["x"] >= width) | (events["y"] >= height))[0]
    if oob.size:
        off = HEADER_SIZE + int(oob[0]) * RECORD_SIZE
        raise DataError(f"{path}: coordinates out of bounds at byte offset {off}")
    if len(events) > 1:
        back = np.nonzero(np.diff(events["t"]) < 0)[0]
        if back.size:
            off = HEADER_SIZE + (int(back[0]) + 1) * RECORD_SIZE + 8
            raise DataError(f"{path}: timestamps decrease at byte offset {off}")
    return events, width, height


def save_events_csv(path, events: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_us", "x", "y", "p"])
        for ev in events:
            w.writerow([int(ev["t"]), int(ev["x"]), int(ev["y"]), int(ev["p"])])


def load_events_csv(path) -> np.ndarray:
    path = Path(path)
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != ["t_us", "x", "y", "p"]:
            raise DataError(f"{path}: expected header t_us,x,y,p")
        rows = [row for row in r if row]
    ev = np.zeros(len(rows), dtype=EVENT_DTYPE)
    for i, row in enumerate(rows):
        try:
            ev["t"][i] = int(row[0])
            ev["x"][i] = int(row[1])
            ev["y"][i] = int(row[2])
            ev["p"][i] = int(row[3])
        except (ValueError, IndexError) as exc:
            raise DataError(f"{path}: row {i + 2}: {exc}") from exc
    return ev


# ---------------------------------------------------------------------------
# PFM / PGM


def write_pfm(path, image: np.ndarray) -> None:
    """Grayscale PFM, little-endian (negative scale), rows bottom-to-top."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError("PFM writer expects a 2D array")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{img.shape[1]} {img.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(img).tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise DataError(f"{path}: not a grayscale PFM file")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline())
        data = np.frombuffer(fh.read(w * h * 4), dtype="<f4" if scale < 0 else ">f4")
    if data.size != w * h:
        raise DataError(f"{path}: truncated PFM payload")
    return np.flipud(data.reshape(h, w)).astype(np.float32)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5); uint8 or uint16 input (uint16 stored big-endian)."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        maxval = 255
        payload = img.tobytes()
    elif img.dtype == np.uint16:
        maxval = 65535
        payload = img.astype(">u2").tobytes()
    else:
        raise ValueError(f"PGM writer expects uint8 or uint16, got {img.dtype}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode())
        fh.write(payload)


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise DataError(f"{path}: not a binary PGM file")
        fields = []
        while len(fields) < 3:
            line = fh.readline()
            if not line:
                raise DataError(f"{path}: truncated PGM header")
            if line.startswith(b"#"):
                continue
            fields.extend(line.split())
        w, h, maxval = (int(v) for v in fields[:3])
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size < w * h:
        raise DataError(f"{path}: truncated PGM payload")
    return data[: w * h].reshape(h, w).astype(np.uint8 if maxval < 256 else np.uint16)


# ---------------------------------------------------------------------------
# PLY


def write_ply(path, points: np.ndarray, scalar: np.ndarray | None = None) -> None:
    """ASCII PLY with x, y, z and an optional per-point ``quality`` scalar."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {pts.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if scalar is not None:
        scalar = np.asarray(scalar, dtype=np.float64).reshape(-1)
        if scalar.shape[0] != pts.shape[0]:
            raise ValueError("scalar length must match point count")
        lines.append("property float quality")
    lines.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        if scalar is None:
            for p in pts:
                fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")
        else:
            for p, s in zip(pts, scalar):
                fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {s:.6f}\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    path = Path(path)
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise DataError(f"{path}: not a PLY file")
        n = None
        props = []
        for line in fh:
            token = line.split()
            if not token:
                continue
            if token[0] == "element" and token[1] == "vertex":
                n = int(token[2])
            elif token[0] == "property":
                props.append(token[2])
            elif token[0] == "end_header":
                break
        if n is None:
            raise DataError(f"{path}: missing vertex element")
        data = np.loadtxt(fh, dtype=np.float64, max_rows=n).reshape(n, len(props))
    pts = data[:, :3]
    scalar = data[:, 3] if len(props) > 3 else None
    return pts, scalar
