import json
import logging
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, Mapping, Optional, Tuple

import torch
from torch import nn

from tsasr.exceptions import CheckpointError

logger = logging.getLogger(__name__)

TENSOR_FORMAT = "tsasr-tensors"
TENSOR_FORMAT_VERSION = 1


def save_tensors(
    path: str | Path, tensors: Mapping[str, torch.Tensor], metadata: Optional[Dict[str, Any]] = None
) -> None:
    """Write named tensors plus JSON-able metadata under a versioned header."""
    payload = {
        "format": TENSOR_FORMAT,
        "version": TENSOR_FORMAT_VERSION,
        "metadata": json.loads(json.dumps(metadata or {})),
        "tensors": {name: t.detach().cpu() for name, t in tensors.items()},
    }
    torch.save(payload, str(path))


def load_tensors(path: str | Path) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    """Read a file written by ``save_tensors``.

    Raises:
        CheckpointError: on a foreign file, an unknown format or a newer version
    """
    try:
        payload = torch.load(str(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointError(str(path), f"unreadable tensor file ({e})") from e
    if not isinstance(payload, dict) or payload.get("format") != TENSOR_FORMAT:
        raise CheckpointError(str(path), "not a tsasr tensor file")
    version = payload.get("version")
    if version != TENSOR_FORMAT_VERSION:
        raise CheckpointError(str(path), f"unsupported version {version}")
    return dict(payload["tensors"]), dict(payload.get("metadata", {}))


class CheckpointManager:
    """Owns a checkpoint directory; writes are atomic per file."""

    def __init__(self, directory: str | Path):
        self.directory: Optional[Path] = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def close(self) -> None:
        if self.directory is None:
            raise RuntimeError("CheckpointManager is not initialized")
        self.directory = None

    def __enter__(self) -> "CheckpointManager":
        return self

    def __exit__(self, *exc) -> None:
        if self.directory is not None:
            self.close()

    def path(self, name: str) -> Path:
        if self.directory is None:
            raise RuntimeError("CheckpointManager is not initialized")
        return self.directory / name

    @contextmanager
    def transaction(self, name: str) -> Iterator[Path]:
        """Yield a temporary path that replaces ``name`` only if the block succeeds."""
        target = self.path(name)
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=target.parent)
        os.close(fd)
        try:
            yield Path(tmp)
            os.replace(tmp, target)
        except Exception:
            logger.warning(f"Discarding partial checkpoint {target}")
            Path(tmp).unlink(missing_ok=True)
            raise

    def save_model(self, name: str, model: nn.Module, metadata: Optional[Dict[str, Any]] = None) -> Path:
        with self.transaction(name) as tmp:
            save_tensors(tmp, model.state_dict(), metadata)
        logger.info(f"Saved checkpoint {self.path(name)}")
        return self.path(name)

    def load_model(self, name: str, model: nn.Module) -> Dict[str, Any]:
        return load_model(self.path(name), model)


def save_model(path: str | Path, model: nn.Module, metadata: Optional[Dict[str, Any]] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with CheckpointManager(path.parent) as manager:
        manager.save_model(path.name, model, metadata)


def load_model(path: str | Path, model: nn.Module) -> Dict[str, Any]:
    """Load weights into ``model``; returns the stored metadata."""
    tensors, metadata = load_tensors(path)
    missing, unexpected = model.load_state_dict(tensors, strict=False)
    if missing or unexpected:
        raise CheckpointError(
            str(path), f"parameter mismatch (missing {missing}, unexpected {unexpected})"
        )
    return metadata
