"""Versioned binary container for trained pulse networks.

Layout (little-endian throughout)::

    b"RYDPULSE"            8-byte magic
    uint16                 format version
    uint32                 header length n
    n bytes                UTF-8 JSON header (WeightsHeader)
    float64[...]           tensors in header order, C-contiguous
    uint32                 CRC32 of everything above

Each file gets a human-readable ``<name>.json`` sidecar with the header.
"""

import logging
import math
import struct
import zlib
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError

from app.core.exceptions import WeightsFormatError
from app.models.physics import GateKind
from app.models.schemas import (
    WEIGHTS_FORMAT_VERSION,
    FamilyManifest,
    FamilyMember,
    TensorEntry,
    WeightsHeader,
)
from app.services.ansatz import ChainedNetwork, FixedAnglePulse, Interval, PulseFamily
from app.utils.helpers import atomic_write_bytes, atomic_write_text, write_model

logger = logging.getLogger(__name__)

MAGIC = b"RYDPULSE"
MANIFEST_NAME = "family.json"
_PREFIX = struct.Struct("<8sHI")
_CRC = struct.Struct("<I")

Network = ChainedNetwork | FixedAnglePulse


def header_for(net: Network, gate: GateKind, interval: Interval) -> WeightsHeader:
    """Header describing ``net`` without its tensor list."""
    if isinstance(net, ChainedNetwork):
        return WeightsHeader(
            kind="chained",
            gate=gate,
            interval=(interval.low, interval.high),
            arch=tuple(net.arch),
            n_knots=net.n_knots,
            delta_bound=net.delta_bound,
            t_bound=net.t_bound,
            correction_head=net.correction_head,
        )
    return WeightsHeader(
        kind="fixed",
        gate=gate,
        interval=(interval.low, interval.high),
        n_knots=net.n_knots,
        delta_bound=net.delta_bound,
        t_bound=net.t_bound,
    )


def serialize(net: Network, gate: GateKind, interval: Interval) -> bytes:
    """Encode ``net`` and its metadata."""
    state = net.state_dict()
    header = header_for(net, gate, interval)
    header.tensors = [TensorEntry(name=name, shape=list(t.shape)) for name, t in state.items()]
    header_bytes = header.model_dump_json().encode("utf-8")

    body = bytearray(_PREFIX.pack(MAGIC, WEIGHTS_FORMAT_VERSION, len(header_bytes)))
    body += header_bytes
    for tensor in state.values():
        body += tensor.detach().cpu().numpy().astype("<f8", copy=False).tobytes(order="C")
    body += _CRC.pack(zlib.crc32(body))
    return bytes(body)


def read_header(payload: bytes) -> tuple[WeightsHeader, int]:
    """Validate framing and return the header plus the offset of the tensor data."""
    if len(payload) < _PREFIX.size + _CRC.size:
        raise WeightsFormatError("Weights payload is truncated")
    magic, version, header_len = _PREFIX.unpack_from(payload)
    if magic != MAGIC:
        raise WeightsFormatError("Not a weights file (bad magic)", details=magic.hex())
    if version != WEIGHTS_FORMAT_VERSION:
        raise WeightsFormatError(
            f"Unsupported weights format version {version}",
            details={"expected": WEIGHTS_FORMAT_VERSION, "found": version},
        )
    (stored_crc,) = _CRC.unpack_from(payload, len(payload) - _CRC.size)
    if zlib.crc32(payload[: -_CRC.size]) != stored_crc:
        raise WeightsFormatError("Weights payload is corrupt (checksum mismatch)")

    start = _PREFIX.size
    try:
        header = WeightsHeader.model_validate_json(payload[start : start + header_len])
    except ValidationError as e:
        raise WeightsFormatError("Invalid weights header", details=e.errors()) from e
    return header, start + header_len


def build_network(header: WeightsHeader) -> Network:
    """Instantiate an untrained network matching ``header``."""
    if header.kind == "chained":
        if header.arch is None:
            raise WeightsFormatError("Chained network header has no architecture")
        return ChainedNetwork(
            header.arch,
            t_bound=header.t_bound,
            n_knots=header.n_knots,
            delta_bound=header.delta_bound,
            correction_head=header.correction_head,
        )
    if header.kind == "fixed":
        return FixedAnglePulse(
            t_bound=header.t_bound, n_knots=header.n_knots, delta_bound=header.delta_bound
        )
    raise WeightsFormatError(f"Unknown network kind '{header.kind}'")


def deserialize(payload: bytes) -> tuple[Network, WeightsHeader]:
    """Decode a payload produced by :func:`serialize`."""
    header, offset = read_header(payload)
    net = build_network(header)

    data_end = len(payload) - _CRC.size
    state: dict[str, torch.Tensor] = {}
    for entry in header.tensors:
        count = math.prod(entry.shape)
        end = offset + 8 * count
        if end > data_end:
            raise WeightsFormatError(f"Tensor '{entry.name}' runs past the end of the payload")
        array = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        state[entry.name] = torch.from_numpy(array.astype(np.float64).reshape(entry.shape))
        offset = end
    if offset != data_end:
        raise WeightsFormatError("Trailing bytes after the last tensor")

    try:
        net.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise WeightsFormatError("Tensors do not match the declared architecture", details=str(e)) from e
    return net, header


def save_network(path: str | Path, net: Network, gate: GateKind, interval: Interval) -> Path:
    """Write the weights file and its JSON sidecar."""
    path = Path(path)
    payload = serialize(net, gate, interval)
    atomic_write_bytes(path, payload)
    header, _ = read_header(payload)
    write_model(sidecar_path(path), header)
    return path


def load_network(path: str | Path) -> tuple[Network, WeightsHeader]:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise WeightsFormatError(f"Cannot read weights file {path}", details=str(e)) from e
    return deserialize(payload)


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def interval_filename(index: int) -> str:
    return f"interval_{index:02d}.rpw"


def save_family(directory: str | Path, family: PulseFamily) -> Path:
    """Write one weights file per interval plus the family manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    members = []
    for index, (interval, net) in enumerate(family.members):
        name = interval_filename(index)
        save_network(directory / name, net, family.gate, interval)
        members.append(FamilyMember(interval=(interval.low, interval.high), file=name))
    manifest = FamilyManifest(gate=family.gate, members=members)
    atomic_write_text(directory / MANIFEST_NAME, manifest.model_dump_json(indent=2) + "\n")
    logger.info("Saved %d-interval %s family to %s", len(members), family.gate.value, directory)
    return directory


def load_family(directory: str | Path, require_coverage: bool = True) -> PulseFamily:
    """Load a family directory; the manifest is optional, files are globbed otherwise."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if manifest_path.exists():
        try:
            manifest = FamilyManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
        except ValidationError as e:
            raise WeightsFormatError("Invalid family manifest", details=e.errors()) from e
        files = [directory / member.file for member in manifest.members]
    else:
        files = sorted(directory.glob("*.rpw"))
    if not files:
        raise WeightsFormatError(f"No weights files in {directory}")

    gate = None
    members: list[tuple[Interval, ChainedNetwork]] = []
    for path in files:
        net, header = load_network(path)
        if not isinstance(net, ChainedNetwork):
            raise WeightsFormatError(f"{path.name} holds a fixed-angle pulse, not a network")
        if gate is not None and header.gate is not gate:
            raise WeightsFormatError("Family mixes weights for different gates")
        gate = header.gate
        members.append((Interval(*header.interval), net))

    family = PulseFamily(gate, members)
    if require_coverage:
        family.require_coverage()
    return family
