"""File-backed site registry: buildings, visitor comments, managers.

The store is a single human-readable site.json. Saves are atomic (write
to a temp file in the same directory, then rename). Mutating operations
must be externally serialized; the CLI does so with an advisory lock on
a sidecar lock file, because the rename-on-save replaces the data file's
inode and would silently defeat a lock held on site.json itself.
"""

from __future__ import annotations

import fcntl
import json
import os
import tempfile
from bisect import bisect_right
from contextlib import contextmanager
from dataclasses import dataclass, field

from .errors import ConflictError, FormatError, LockContentionError, ValidationError

MAX_COMMENT_LEN = 2000


@dataclass
class BuildingRecord:
    id: int
    name: str
    description: str = ""
    marker_id: int | None = None
    model_path: str | None = None

    def __post_init__(self):
        if not isinstance(self.id, int) or isinstance(self.id, bool):
            raise ValidationError(f"building id must be an integer, got {self.id!r}")
        if not self.name:
            raise ValidationError("building name must be non-empty")
        if self.marker_id is not None and (not isinstance(self.marker_id, int) or isinstance(self.marker_id, bool)):
            raise ValidationError(f"marker_id must be an integer or null, got {self.marker_id!r}")


@dataclass
class Comment:
    author: str
    timestamp: int
    text: str

    def __post_init__(self):
        try:
            self.timestamp = int(self.timestamp)
        except (TypeError, ValueError):
            raise ValidationError(f"timestamp must be integer UTC seconds, got {self.timestamp!r}") from None
        if not self.text:
            raise ValidationError("comment text must be non-empty")
        if len(self.text) > MAX_COMMENT_LEN:
            raise ValidationError(f"comment text has {len(self.text)} chars, limit is {MAX_COMMENT_LEN}")


@dataclass
class Manager:
    name: str

    def __post_init__(self):
        if not self.name:
            raise ValidationError("manager name must be non-empty")


@dataclass
class SiteStore:
    buildings: list[BuildingRecord] = field(default_factory=list)
    comments: list[Comment] = field(default_factory=list)
    managers: list[Manager] = field(default_factory=list)


def upsert_building(store: SiteStore, record: BuildingRecord) -> SiteStore:
    """Insert or replace a building by id.

    Raises:
        ConflictError: record.marker_id is already bound to a different
            building (names both ids).
    """
    if record.marker_id is not None:
        bound = lookup_by_marker(store, record.marker_id)
        if bound is not None and bound.id != record.id:
            raise ConflictError(
                f"marker {record.marker_id} is bound to building {bound.id},"
                f" cannot bind it to building {record.id}"
            )
    for i, b in enumerate(store.buildings):
        if b.id == record.id:
            store.buildings[i] = record
            return store
    store.buildings.append(record)
    return store


def lookup_by_marker(store: SiteStore, marker_id: int) -> BuildingRecord | None:
    if marker_id is None:
        return None
    for b in store.buildings:
        if b.marker_id == marker_id:
            return b
    return None


def lookup_building(store: SiteStore, building_id: int) -> BuildingRecord | None:
    for b in store.buildings:
        if b.id == building_id:
            return b
    return None


def post_comment(store: SiteStore, author: str, text: str, timestamp: int) -> SiteStore:
    """Append a comment, keeping nondecreasing timestamp order (stable)."""
    comment = Comment(author=author, timestamp=timestamp, text=text)
    stamps = [c.timestamp for c in store.comments]
    store.comments.insert(bisect_right(stamps, comment.timestamp), comment)
    return store


def list_comments(store: SiteStore) -> list[Comment]:
    return list(store.comments)


def add_manager(store: SiteStore, name: str) -> SiteStore:
    """Append a manager with a unique name.

    Raises:
        ConflictError: the name already exists.
    """
    manager = Manager(name=name)
    if any(m.name == name for m in store.managers):
        raise ConflictError(f"manager {name!r} already exists")
    store.managers.append(manager)
    return store


def building_to_json(b: BuildingRecord) -> dict:
    return {
        "id": b.id,
        "name": b.name,
        "description": b.description,
        "marker_id": b.marker_id,
        "model_path": b.model_path,
    }


def store_to_json(store: SiteStore) -> dict:
    return {
        "buildings": [building_to_json(b) for b in store.buildings],
        "comments": [
            {"author": c.author, "timestamp": c.timestamp, "text": c.text}
            for c in store.comments
        ],
        "managers": [{"name": m.name} for m in store.managers],
    }


def store_from_json(raw: dict, source: str = "site.json") -> SiteStore:
    if not isinstance(raw, dict):
        raise FormatError(f"{source}: expected a JSON object")
    try:
        buildings = [
            BuildingRecord(
                id=rec["id"],
                name=rec["name"],
                description=rec.get("description", ""),
                marker_id=rec.get("marker_id"),
                model_path=rec.get("model_path"),
            )
            for rec in raw.get("buildings", [])
        ]
        comments = [
            Comment(author=rec["author"], timestamp=rec["timestamp"], text=rec["text"])
            for rec in raw.get("comments", [])
        ]
        managers = [Manager(name=rec["name"]) for rec in raw.get("managers", [])]
    except (KeyError, TypeError) as e:
        raise FormatError(f"{source}: malformed record: {e}") from None

    ids = [b.id for b in buildings]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{source}: duplicate building ids")
    bound = [b.marker_id for b in buildings if b.marker_id is not None]
    if len(set(bound)) != len(bound):
        raise FormatError(f"{source}: a marker is bound to more than one building")
    names = [m.name for m in managers]
    if len(set(names)) != len(names):
        raise FormatError(f"{source}: duplicate manager names")

    comments.sort(key=lambda c: c.timestamp)  # stable: preserves file order within ties
    return SiteStore(buildings=buildings, comments=comments, managers=managers)


def save_site(store: SiteStore, path) -> None:
    """Atomically write the store as site.json (temp file + rename)."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(prefix=".site-", suffix=".json", dir=directory)
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(store_to_json(store), fh, indent=2)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def load_site(path) -> SiteStore:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from None
    return store_from_json(raw, source=os.fspath(path))


@contextmanager
def site_lock(path):
    """Advisory exclusive lock guarding mutations of the given site file.

    Raises:
        LockContentionError: another process holds the lock.
    """
    lock_path = os.fspath(path) + ".lock"
    fh = open(lock_path, "a")
    try:
        try:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            raise LockContentionError(f"{lock_path} is held by another process") from None
        yield
    finally:
        try:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)
        finally:
            fh.close()
