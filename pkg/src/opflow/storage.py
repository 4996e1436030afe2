"""Artifact storage: a five-method client contract plus a filesystem backend.

Artifacts move by key, never by direct path sharing: the scheduler uploads
step outputs, downloads step inputs, and copies between keys, so swapping the
backend swaps the data plane without touching the engine.  Keys look like
``workflows/<wf-id>/<step-key>/<artifact-name>[/<subpath>]``; directory
artifacts are first-class (list-shaped outputs are directories with children
``0..n-1``).
"""

from __future__ import annotations

import hashlib
import os
import shutil
import uuid
from abc import ABC, abstractmethod
from pathlib import Path

from .errors import (
    KeyInvalid,
    KeyMissing,
    NotAFile,
    SourceMissing,
    UnsupportedOperation,
)

_TMP_DIR = ".opflow-tmp"
_TRASH_DIR = ".opflow-trash"


def validate_key(key: str) -> str:
    """Reject keys that are empty, escape the root, or shadow internals."""
    if not isinstance(key, str) or not key:
        raise KeyInvalid("key must be a nonempty string")
    segments = key.split("/")
    if any(segment == "" for segment in segments):
        raise KeyInvalid(f"key has empty segments: {key!r}")
    if any(segment in (".", "..") for segment in segments):
        raise KeyInvalid(f"key may not contain '.' or '..' segments: {key!r}")
    if "\\" in key:
        raise KeyInvalid(f"key may not contain backslashes: {key!r}")
    if segments[0].startswith("."):
        raise KeyInvalid(f"dot-prefixed root segments are reserved: {key!r}")
    return key


class StorageClient(ABC):
    """Contract every artifact backend implements.

    Laws (the contract test suite runs them against each backend):

    - ``download(upload(p, k), q)`` reproduces ``p`` byte-exactly, for files
      and directory trees.
    - ``list(prefix)`` returns exactly the file keys with that string prefix,
      lexicographically sorted.
    - after ``copy(src, dst)``, downloading ``dst`` equals downloading
      ``src``; ``dst`` is overwritten if it existed.
    - concurrent uploads to the same key are last-publish-wins; readers never
      observe a half-written object.
    - ``get_md5`` is an optional capability and may raise
      UnsupportedOperation.
    """

    @abstractmethod
    def upload(self, local_path: str | Path, key: str) -> str:
        """Store a file or directory tree under ``key``; returns ``key``."""

    @abstractmethod
    def download(self, key: str, local_path: str | Path) -> Path:
        """Materialize ``key`` at ``local_path`` (replacing it); returns the path."""

    @abstractmethod
    def list(self, prefix: str = "") -> list[str]:
        """All file keys with the given string prefix, sorted."""

    @abstractmethod
    def copy(self, src: str, dst: str) -> str:
        """Server-side copy; returns ``dst``."""

    def get_md5(self, key: str) -> str:
        """Lowercase hex MD5 of a single file's bytes (optional capability)."""
        raise UnsupportedOperation(f"{type(self).__name__} does not provide get_md5")

    def exists(self, key: str) -> bool:
        """Convenience: True when ``key`` names a file or a directory."""
        for candidate in self.list(key):
            if candidate == key or candidate.startswith(key + "/"):
                return True
        return False


class FilesystemStorage(StorageClient):
    """Backend rooted at a local directory; keys map to relative paths."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    # -- helpers

    def _path(self, key: str) -> Path:
        return self.root / validate_key(key)

    def _trash(self, path: Path) -> None:
        trash = self.root / _TRASH_DIR / uuid.uuid4().hex
        trash.parent.mkdir(parents=True, exist_ok=True)
        os.replace(path, trash)
        if trash.is_dir():
            shutil.rmtree(trash, ignore_errors=True)
        else:
            trash.unlink(missing_ok=True)

    def _publish(self, staged: Path, dst: Path) -> None:
        """Move staged content into place; last publish wins."""
        # a file occupying an ancestor path would block mkdir below; it
        # loses to the newer object, same as a direct overwrite
        lineage = []
        ancestor = dst.parent
        while ancestor != self.root:
            lineage.append(ancestor)
            ancestor = ancestor.parent
        for path in reversed(lineage):  # outermost first
            if path.is_file() or path.is_symlink():
                self._trash(path)
                break  # nothing can exist below a file
        dst.parent.mkdir(parents=True, exist_ok=True)
        try:
            os.replace(staged, dst)
        except OSError:
            # replacing a directory (or a file with a directory): trash the
            # old object first, then move in
            self._trash(dst)
            os.replace(staged, dst)

    def _stage(self) -> Path:
        staging = self.root / _TMP_DIR
        staging.mkdir(parents=True, exist_ok=True)
        return staging / uuid.uuid4().hex

    # -- contract

    def upload(self, local_path: str | Path, key: str) -> str:
        source = Path(local_path)
        dst = self._path(key)
        if source.is_dir():
            staged = self._stage()
            shutil.copytree(source, staged, symlinks=False)
        elif source.is_file():
            staged = self._stage()
            shutil.copyfile(source, staged)
        else:
            raise SourceMissing(f"no file or directory at {source}")
        self._publish(staged, dst)
        return key

    def download(self, key: str, local_path: str | Path) -> Path:
        src = self._path(key)
        dst = Path(local_path)
        if not src.exists():
            raise KeyMissing(f"no object at key {key!r}")
        if dst.is_dir() and not dst.is_symlink():
            shutil.rmtree(dst)
        elif dst.exists() or dst.is_symlink():
            dst.unlink()
        dst.parent.mkdir(parents=True, exist_ok=True)
        if src.is_dir():
            shutil.copytree(src, dst, symlinks=False)
        else:
            shutil.copyfile(src, dst)
        return dst

    def list(self, prefix: str = "") -> list[str]:
        # walk from the deepest directory the prefix pins down, so listing a
        # step's artifacts does not scan the whole root
        anchor = self.root
        if prefix:
            for part in prefix.split("/")[:-1]:
                candidate = anchor / part
                if not candidate.is_dir():
                    break
                anchor = candidate
        keys: list[str] = []
        stack = [anchor]
        while stack:
            current = stack.pop()
            if not current.is_dir():
                continue
            for entry in current.iterdir():
                if current == self.root and entry.name in (_TMP_DIR, _TRASH_DIR):
                    continue
                if entry.is_dir() and not entry.is_symlink():
                    stack.append(entry)
                elif entry.is_file():
                    key = entry.relative_to(self.root).as_posix()
                    if key.startswith(prefix):
                        keys.append(key)
        return sorted(keys)

    def copy(self, src: str, dst: str) -> str:
        source = self._path(src)
        if not source.exists():
            raise KeyMissing(f"no object at key {src!r}")
        staged = self._stage()
        if source.is_dir():
            shutil.copytree(source, staged, symlinks=False)
        else:
            shutil.copyfile(source, staged)
        self._publish(staged, self._path(dst))
        return dst

    def get_md5(self, key: str) -> str:
        path = self._path(key)
        if path.is_dir():
            raise NotAFile(f"key {key!r} names a directory")
        if not path.is_file():
            raise KeyMissing(f"no object at key {key!r}")
        digest = hashlib.md5()
        with path.open("rb") as handle:
            for chunk in iter(lambda: handle.read(1 << 20), b""):
                digest.update(chunk)
        return digest.hexdigest()


def merge_download(client: StorageClient, key: str, dst: str | Path) -> Path:
    """Materialize ``key`` under ``dst`` without deleting what is already there.

    Used when ``dst`` is a live working directory (for example a process's
    cwd), where the replace semantics of :meth:`StorageClient.download` would
    pull the directory out from under the process.  Only files are restored;
    empty directories inside the stored tree are not recreated.
    """
    dst = Path(dst)
    keys = client.list(key)
    if key in keys:  # a single file
        return client.download(key, dst)
    prefix = key + "/"
    for child in keys:
        if child.startswith(prefix):
            client.download(child, dst / child[len(prefix) :])
    return dst
