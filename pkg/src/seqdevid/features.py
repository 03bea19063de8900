"""Per-packet feature extraction and fixed-shape session matrices.

A session (one device observed over one capture window) becomes a T x F
float64 matrix: one row per packet in arrival order, zero rows padding the
tail when the session is shorter than T, extra packets dropped when it is
longer. Raw feature values go to disk as-is; min-max scaling happens at
training time so the fitted ranges can be stored with the model.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .capture import FROM_DEVICE, TO_DEVICE, RawPacket, SessionRecord

__all__ = [
    "FeatureError",
    "UnknownExtractor",
    "EmptySession",
    "NotFitted",
    "SchemaMismatch",
    "FeatureManifest",
    "builtin_manifest",
    "manifest_from_json",
    "manifest_to_json",
    "extract_features",
    "build_sequence",
    "SessionMatrix",
    "sessions_to_matrices",
    "Normalizer",
    "LabelCodec",
    "save_dataset",
    "load_dataset",
]


class FeatureError(Exception):
    pass


class UnknownExtractor(FeatureError):
    pass


class EmptySession(FeatureError):
    pass


class NotFitted(FeatureError):
    pass


class SchemaMismatch(FeatureError):
    pass


# --------------------------------------------------------------------------
# extractors
#
# Each extractor maps (packet, previous packet or None) to a float. Fields a
# packet does not carry (no TCP header, no IP header, ...) contribute 0.0 so
# every vector stays dense and finite.

Extractor = Callable[[RawPacket, "RawPacket | None"], float]

_WELL_KNOWN_MAX = 1023
_EPHEMERAL_MIN = 49152


def _opt(value) -> float:
    return 0.0 if value is None else float(value)


def _flag(packet: RawPacket, bit: int) -> float:
    if packet.tcp_flags is None:
        return 0.0
    return 1.0 if packet.tcp_flags & bit else 0.0


def _port_bucket(port, lo, hi) -> float:
    if port is None:
        return 0.0
    return 1.0 if lo <= port <= hi else 0.0


def _interarrival(packet: RawPacket, prev) -> float:
    if prev is None:
        return 0.0
    return float(packet.timestamp - prev.timestamp)


def _direction(packet: RawPacket, prev) -> float:
    if packet.direction == FROM_DEVICE:
        return 1.0
    if packet.direction == TO_DEVICE:
        return -1.0
    return 0.0


def _eth_type_class(packet: RawPacket, prev) -> float:
    # 0 undecoded, 1 IPv4, 2 IPv6, 3 ARP, 4 anything else
    if packet.eth_type is None:
        return 0.0
    return {0x0800: 1.0, 0x86DD: 2.0, 0x0806: 3.0}.get(packet.eth_type, 4.0)


EXTRACTORS: dict[str, Extractor] = {
    "wire_len": lambda p, _: float(p.wire_len),
    "captured_len": lambda p, _: float(p.captured_len),
    "payload_len": lambda p, _: _opt(p.payload_len),
    "interarrival": _interarrival,
    "direction": _direction,
    "ttl": lambda p, _: _opt(p.ttl_or_hoplimit),
    "ip_header_len": lambda p, _: _opt(p.ip_header_len),
    "is_tcp": lambda p, _: 1.0 if p.ip_proto == 6 else 0.0,
    "is_udp": lambda p, _: 1.0 if p.ip_proto == 17 else 0.0,
    "is_icmp": lambda p, _: 1.0 if p.ip_proto in (1, 58) else 0.0,
    "is_arp": lambda p, _: 1.0 if p.eth_type == 0x0806 else 0.0,
    "flag_fin": lambda p, _: _flag(p, 0x01),
    "flag_syn": lambda p, _: _flag(p, 0x02),
    "flag_rst": lambda p, _: _flag(p, 0x04),
    "flag_psh": lambda p, _: _flag(p, 0x08),
    "flag_ack": lambda p, _: _flag(p, 0x10),
    "flag_urg": lambda p, _: _flag(p, 0x20),
    "tcp_window": lambda p, _: _opt(p.tcp_window),
    "src_port": lambda p, _: _opt(p.src_port),
    "dst_port": lambda p, _: _opt(p.dst_port),
    "src_port_wellknown": lambda p, _: _port_bucket(p.src_port, 0, _WELL_KNOWN_MAX),
    "src_port_registered": lambda p, _: _port_bucket(p.src_port, _WELL_KNOWN_MAX + 1,
                                                     _EPHEMERAL_MIN - 1),
    "src_port_ephemeral": lambda p, _: _port_bucket(p.src_port, _EPHEMERAL_MIN, 65535),
    "dst_port_wellknown": lambda p, _: _port_bucket(p.dst_port, 0, _WELL_KNOWN_MAX),
    "dst_port_registered": lambda p, _: _port_bucket(p.dst_port, _WELL_KNOWN_MAX + 1,
                                                     _EPHEMERAL_MIN - 1),
    "dst_port_ephemeral": lambda p, _: _port_bucket(p.dst_port, _EPHEMERAL_MIN, 65535),
    "is_broadcast": lambda p, _: 1.0 if p.is_broadcast else 0.0,
    "eth_type_class": _eth_type_class,
}


@dataclass(frozen=True)
class FeatureManifest:
    """Names a feature set: sequence length plus ordered extractor ids."""

    name: str
    seq_len: int
    features: tuple[str, ...]

    def __post_init__(self):
        if self.seq_len < 1:
            raise FeatureError(f"seq_len must be positive, got {self.seq_len}")
        if not self.features:
            raise FeatureError("manifest needs at least one feature")
        for fid in self.features:
            if fid not in EXTRACTORS:
                raise UnknownExtractor(f"no extractor named {fid!r}")

    @property
    def n_features(self) -> int:
        return len(self.features)


_IOTDEVID25 = FeatureManifest(
    name="iotdevid25",
    seq_len=12,
    features=(
        "wire_len", "payload_len", "interarrival", "direction", "ttl",
        "ip_header_len",
        "is_tcp", "is_udp", "is_icmp", "is_arp",
        "flag_urg", "flag_ack", "flag_psh", "flag_rst", "flag_syn", "flag_fin",
        "tcp_window",
        "src_port_wellknown", "src_port_registered", "src_port_ephemeral",
        "dst_port_wellknown", "dst_port_registered", "dst_port_ephemeral",
        "is_broadcast", "eth_type_class",
    ),
)

_LOPEZ6 = FeatureManifest(
    name="lopez6",
    seq_len=20,
    features=("src_port", "dst_port", "payload_len", "tcp_window",
              "interarrival", "direction"),
)

_BUILTINS = {m.name: m for m in (_IOTDEVID25, _LOPEZ6)}


def builtin_manifest(name: str) -> FeatureManifest:
    try:
        return _BUILTINS[name]
    except KeyError:
        raise FeatureError(
            f"unknown manifest {name!r}; built-ins: {sorted(_BUILTINS)}") from None


def manifest_to_json(manifest: FeatureManifest) -> str:
    blob = {"name": manifest.name, "seq_len": manifest.seq_len,
            "features": list(manifest.features)}
    return json.dumps(blob, sort_keys=True, indent=2) + "\n"


def manifest_from_json(text: str) -> FeatureManifest:
    try:
        blob = json.loads(text)
        return FeatureManifest(name=blob["name"], seq_len=int(blob["seq_len"]),
                               features=tuple(blob["features"]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FeatureError(f"bad manifest file: {exc}") from exc


# --------------------------------------------------------------------------
# extraction and sequence assembly


def extract_features(record: SessionRecord,
                     manifest: FeatureManifest) -> list[np.ndarray]:
    """One float64 vector per packet, in arrival order."""
    fns = [EXTRACTORS[fid] for fid in manifest.features]
    out = []
    prev = None
    for packet in record.packets:
        vec = np.array([fn(packet, prev) for fn in fns], dtype=np.float64)
        if not np.all(np.isfinite(vec)):
            raise FeatureError(
                f"non-finite feature value for {record.device_label}"
                f"/{record.session_id}")
        out.append(vec)
        prev = packet
    return out


def build_sequence(vectors: Sequence[np.ndarray], seq_len: int) -> np.ndarray:
    """Stack per-packet vectors into a (seq_len, F) matrix.

    Short sessions pad with all-zero rows at the tail; long ones keep the
    first seq_len packets.
    """
    if len(vectors) == 0:
        raise EmptySession("cannot build a sequence from zero packets")
    width = len(vectors[0])
    out = np.zeros((seq_len, width), dtype=np.float64)
    for t, vec in enumerate(vectors[:seq_len]):
        out[t] = vec
    return out


@dataclass(frozen=True)
class SessionMatrix:
    values: np.ndarray
    device_label: str
    session_id: str

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"session matrix must be 2-D, got {arr.ndim}-D")
        if not np.all(np.isfinite(arr)):
            raise ValueError("session matrix holds non-finite values")
        object.__setattr__(self, "values", arr)


def sessions_to_matrices(records: Iterable[SessionRecord],
                         manifest: FeatureManifest) -> list[SessionMatrix]:
    out = []
    for record in records:
        seq = build_sequence(extract_features(record, manifest), manifest.seq_len)
        out.append(SessionMatrix(values=seq, device_label=record.device_label,
                                 session_id=record.session_id))
    return out


# --------------------------------------------------------------------------
# normalization


def _true_rows(values: np.ndarray) -> int:
    # the trailing all-zero run is padding, not data
    n = values.shape[0]
    while n > 0 and not values[n - 1].any():
        n -= 1
    return n


@dataclass
class Normalizer:
    """Per-feature min-max scaling to [0, 1], fitted on training data only.

    Padding rows are excluded from the fit and pass through apply()
    unchanged, so padded positions stay exactly zero. A feature that is
    constant on the training data maps to 0. Values outside the fitted
    range clamp to the nearest bound.
    """

    lo: np.ndarray | None = None
    hi: np.ndarray | None = None

    def fit(self, matrices: Sequence[SessionMatrix]) -> "Normalizer":
        rows = [m.values[:_true_rows(m.values)] for m in matrices]
        rows = [r for r in rows if len(r)]
        if not rows:
            raise FeatureError("nothing to fit: no non-padding rows")
        stacked = np.concatenate(rows, axis=0)
        self.lo = stacked.min(axis=0)
        self.hi = stacked.max(axis=0)
        return self

    @property
    def fitted(self) -> bool:
        return self.lo is not None

    def apply(self, matrix: SessionMatrix) -> SessionMatrix:
        if not self.fitted:
            raise NotFitted("call fit() before apply()")
        if matrix.values.shape[1] != self.lo.shape[0]:
            raise SchemaMismatch(
                f"normalizer fitted for {self.lo.shape[0]} features, "
                f"matrix has {matrix.values.shape[1]}")
        out = np.zeros_like(matrix.values)
        n = _true_rows(matrix.values)
        span = self.hi - self.lo
        live = span > 0
        scaled = np.zeros((n, matrix.values.shape[1]), dtype=np.float64)
        scaled[:, live] = (matrix.values[:n, live] - self.lo[live]) / span[live]
        out[:n] = np.clip(scaled, 0.0, 1.0)
        return SessionMatrix(values=out, device_label=matrix.device_label,
                             session_id=matrix.session_id)

    def apply_all(self, matrices: Sequence[SessionMatrix]) -> list[SessionMatrix]:
        return [self.apply(m) for m in matrices]


# --------------------------------------------------------------------------
# labels


@dataclass(frozen=True)
class LabelCodec:
    """Stable device-name <-> class-id mapping: sorted names, ids 0..C-1."""

    classes: tuple[str, ...]

    @staticmethod
    def fit(labels: Iterable[str]) -> "LabelCodec":
        return LabelCodec(classes=tuple(sorted(set(labels))))

    def encode(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise FeatureError(f"unknown label {label!r}") from None

    def decode(self, class_id: int) -> str:
        if not 0 <= class_id < len(self.classes):
            raise FeatureError(f"class id {class_id} out of range")
        return self.classes[class_id]

    def __len__(self) -> int:
        return len(self.classes)


# --------------------------------------------------------------------------
# dataset file
#
# One CSV row per time step: device,session,label,t,f0..f{F-1}. Values are
# written with 17 significant digits so float64 round-trips exactly.


def _open_for(path_or_file, mode):
    if hasattr(path_or_file, "read") or hasattr(path_or_file, "write"):
        return path_or_file, False
    return open(path_or_file, mode, newline=""), True


def save_dataset(path_or_file, matrices: Sequence[SessionMatrix],
                 n_features: int | None = None) -> None:
    if matrices:
        widths = {m.values.shape[1] for m in matrices}
        if len(widths) != 1:
            raise SchemaMismatch(f"mixed feature counts: {sorted(widths)}")
        (width,) = widths
        if n_features is not None and n_features != width:
            raise SchemaMismatch(
                f"n_features={n_features} but matrices have {width}")
    elif n_features is None:
        raise SchemaMismatch("empty dataset needs an explicit n_features")
    else:
        width = n_features

    codec = LabelCodec.fit(m.device_label for m in matrices)
    handle, owned = _open_for(path_or_file, "w")
    try:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["device", "session", "label", "t"]
                        + [f"f{i}" for i in range(width)])
        for m in matrices:
            label = codec.encode(m.device_label)
            for t, row in enumerate(m.values):
                writer.writerow([m.device_label, m.session_id, label, t]
                                + [f"{v:.17g}" for v in row])
    finally:
        if owned:
            handle.close()


def load_dataset(path_or_file,
                 expect_shape: tuple[int, int] | None = None
                 ) -> list[SessionMatrix]:
    handle, owned = _open_for(path_or_file, "r")
    try:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatch("empty file, expected a header row") from None
        if header[:4] != ["device", "session", "label", "t"]:
            raise SchemaMismatch(f"unexpected header {header[:4]}")
        width = len(header) - 4
        if width < 1 or header[4:] != [f"f{i}" for i in range(width)]:
            raise SchemaMismatch("feature columns must be f0..f{n-1} in order")

        sessions: list[tuple[str, str, list]] = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != width + 4:
                raise SchemaMismatch(
                    f"line {line_no}: expected {width + 4} columns, got {len(row)}")
            device, session_id, _label, t_text = row[:4]
            try:
                t = int(t_text)
                values = [float(v) for v in row[4:]]
            except ValueError as exc:
                raise SchemaMismatch(f"line {line_no}: {exc}") from exc
            if not sessions or (device, session_id) != sessions[-1][:2]:
                sessions.append((device, session_id, []))
            rows = sessions[-1][2]
            if t != len(rows):
                raise SchemaMismatch(
                    f"line {line_no}: time step {t} out of order "
                    f"(expected {len(rows)})")
            rows.append(values)

        lengths = {len(rows) for _, _, rows in sessions}
        if len(lengths) > 1:
            raise SchemaMismatch(f"sessions disagree on length: {sorted(lengths)}")
        if expect_shape is not None:
            t_len, f_len = expect_shape
            if f_len != width or (sessions and lengths != {t_len}):
                got = (lengths.pop() if sessions else 0, width)
                raise SchemaMismatch(
                    f"expected shape {expect_shape}, file holds {got}")
        return [SessionMatrix(values=np.array(rows, dtype=np.float64),
                              device_label=device, session_id=session_id)
                for device, session_id, rows in sessions]
    finally:
        if owned:
            handle.close()
