"""
Checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"PTBXCKPT"
    uint32    format version
    uint32    header length in bytes
    header    UTF-8 JSON: network config, dataset statistics, tensor manifest,
              optional optimizer section, free-form metadata
    payload   float32 little-endian tensors: parameters in declaration order,
              then buffers, then (if present) every Adam first moment followed
              by every second moment, in manifest order
"""
import json
import struct
from pathlib import Path

import numpy as np
import structlog

from perturbex.data import DatasetStats
from perturbex.errors import DatasetFormatError
from perturbex.network import Network, NetworkConfig, build_network
from perturbex.optim import AdamState
from perturbex.tensor import RngStream

log = structlog.get_logger()

MAGIC = b"PTBXCKPT"
VERSION = 1
PREFIX = struct.Struct("<8sII")
PAYLOAD_DTYPE = np.dtype("<f4")


class CheckpointError(DatasetFormatError):
    pass


def _manifest(tensors: dict) -> list:
    return [[name, list(value.shape)] for name, value in tensors.items()]


def save_checkpoint(path, network: Network, optimizer: AdamState = None, metadata: dict = None) -> Path:
    """
    Writes ``network`` (and optionally its optimizer state) to ``path``.

    Saving the same network twice produces byte-identical files.
    """
    parameters = network.named_parameters()
    buffers = network.named_buffers()
    header = {
        "config": network.config.to_dict(),
        "stats": network.stats.to_dict() if network.stats is not None else None,
        "parameters": _manifest(parameters),
        "buffers": _manifest(buffers),
        "optimizer": None,
        "metadata": metadata or {},
    }
    tensors = list(parameters.values()) + list(buffers.values())
    if optimizer is not None:
        names = [name for name in parameters if name in optimizer.m]
        header["optimizer"] = {**optimizer.hyperparameters(), "moments": names}
        tensors += [optimizer.m[name] for name in names] + [optimizer.v[name] for name in names]

    encoded = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as file:
        file.write(PREFIX.pack(MAGIC, VERSION, len(encoded)))
        file.write(encoded)
        for tensor in tensors:
            file.write(np.ascontiguousarray(tensor, dtype=PAYLOAD_DTYPE).tobytes())
    log.info("Checkpoint written", path=str(path), parameters=network.parameter_count())
    return path


def _read_tensors(content: bytes, offset: int, manifest: list, path) -> tuple:
    tensors = {}
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * PAYLOAD_DTYPE.itemsize
        if end > len(content):
            raise CheckpointError(f"{path}: payload ends inside tensor {name}")
        tensors[name] = np.frombuffer(content, dtype=PAYLOAD_DTYPE, count=count, offset=offset).reshape(shape)
        offset = end
    return tensors, offset


HEADER_KEYS = ("config", "stats", "parameters", "buffers", "optimizer", "metadata")


def _read_header(content: bytes, start: int, length: int, path) -> dict:
    try:
        header = json.loads(content[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointError(f"{path}: header is not valid JSON ({error})") from error
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header is not a JSON object")
    missing = [key for key in HEADER_KEYS if key not in header]
    if missing:
        raise CheckpointError(f"{path}: header lacks {', '.join(missing)}")
    return header


def load_checkpoint(path) -> tuple:
    """
    Reads a checkpoint written by ``save_checkpoint``.

    Returns
    -------
    tuple
        (Network in eval mode, AdamState or None, metadata dict)

    Raises
    ------
    CheckpointError
        Wrong magic, unsupported version, malformed header or truncated payload.
    """
    content = Path(path).read_bytes()
    if len(content) < PREFIX.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint")
    magic, version, header_length = PREFIX.unpack_from(content)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a perturbex checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is not supported")
    start = PREFIX.size
    if start + header_length > len(content):
        raise CheckpointError(f"{path}: header is truncated")
    header = _read_header(content, start, header_length, path)
    try:
        network, optimizer, offset = _restore(content, start + header_length, header, path)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as error:
        raise CheckpointError(f"{path}: header does not describe a valid network ({error})") from error
    if offset != len(content):
        raise CheckpointError(f"{path}: {len(content) - offset} trailing bytes after the payload")
    return network.eval(), optimizer, header["metadata"]


def _restore(content: bytes, offset: int, header: dict, path) -> tuple:
    parameters, offset = _read_tensors(content, offset, header["parameters"], path)
    buffers, offset = _read_tensors(content, offset, header["buffers"], path)

    network = build_network(NetworkConfig.from_dict(header["config"]), RngStream(0))
    network.load_state(parameters, buffers)
    if header["stats"] is not None:
        network.stats = DatasetStats.from_dict(header["stats"])

    optimizer = None
    if header["optimizer"] is not None:
        section = header["optimizer"]
        moments = [[name, list(parameters[name].shape)] for name in section["moments"]]
        first, offset = _read_tensors(content, offset, moments, path)
        second, offset = _read_tensors(content, offset, moments, path)
        optimizer = AdamState(
            lr=section["lr"], beta1=section["beta1"], beta2=section["beta2"], eps=section["eps"], step=section["step"],
            m={name: value.astype(np.float32) for name, value in first.items()},
            v={name: value.astype(np.float32) for name, value in second.items()},
        )
    return network, optimizer, offset
