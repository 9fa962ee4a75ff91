"""Segmented append-only log: length-prefixed frames with CRC-32C trailers.

Frame layout: 4-byte big-endian payload length, payload bytes, 4-byte
big-endian CRC-32C of the payload. Files roll at a size threshold. The
format is shared by the collector's fragment store and the client spool,
and an index over it can always be rebuilt by a full scan.

Durability modes:
  always  fsync after every append (client spool default)
  batch   group commit: writers block until an fsync covers their frame,
          one writer performs the fsync for all concurrently pending ones
  never   no fsync (tests and throwaway stores)

Recovery truncates a torn frame at the tail of the last segment; a bad
frame anywhere earlier is real corruption and raises.
"""

from __future__ import annotations

import heapq
import itertools
import os
import struct
import threading
from pathlib import Path
from typing import Callable, Iterator

from .crc32c import crc32c

_LEN = struct.Struct(">I")
DEFAULT_MAX_SEGMENT_BYTES = 64 * 1024 * 1024


class CorruptLogError(RuntimeError):
    pass


class SegmentLog:
    def __init__(
        self,
        directory: str | Path,
        prefix: str = "segment",
        durability: str = "batch",
        max_segment_bytes: int = DEFAULT_MAX_SEGMENT_BYTES,
    ) -> None:
        if durability not in ("always", "batch", "never"):
            raise ValueError(f"unknown durability mode: {durability!r}")
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.prefix = prefix
        self.durability = durability
        self.max_segment_bytes = max_segment_bytes

        self._write_lock = threading.Lock()
        self._flush_cond = threading.Condition()
        self._write_marks = 0  # frames written (buffered)
        self._flushed_marks = 0  # frames covered by an fsync
        self._flushing = False
        self._callbacks: list[tuple[int, int, Callable[[], None]]] = []  # heap
        self._callback_seq = itertools.count()
        self._flusher: threading.Thread | None = None
        self._flusher_wake = threading.Event()
        self._closed = False

        self._positions: list[tuple[Path, int]] = []  # position -> (file, offset)
        self._read_lock = threading.Lock()
        self._read_handles: dict[Path, object] = {}
        self._recover()

    # -- recovery ----------------------------------------------------------

    def _segment_files(self) -> list[Path]:
        return sorted(self.directory.glob(f"{self.prefix}-*.log"))

    def _recover(self) -> None:
        files = self._segment_files()
        for i, path in enumerate(files):
            last = i == len(files) - 1
            good_end = self._scan_file(path, last)
            if last:
                size = path.stat().st_size
                if good_end < size:
                    with open(path, "r+b") as f:
                        f.truncate(good_end)
        if files:
            self._current_path = files[-1]
            self._current_size = self._current_path.stat().st_size
            self._seg_index = int(self._current_path.stem.rsplit("-", 1)[1])
        else:
            self._seg_index = 0
            self._current_path = self._segment_path(0)
            self._current_path.touch()
            self._current_size = 0
        self._file = open(self._current_path, "ab")
        self._fsync_dir()

    def _segment_path(self, index: int) -> Path:
        return self.directory / f"{self.prefix}-{index:08d}.log"

    def _scan_file(self, path: Path, allow_torn_tail: bool) -> int:
        """Index all intact frames; return the byte offset after the last one."""
        offset = 0
        with open(path, "rb") as f:
            while True:
                head = f.read(4)
                if not head:
                    return offset
                if len(head) < 4:
                    break
                (length,) = _LEN.unpack(head)
                payload = f.read(length)
                trailer = f.read(4)
                if len(payload) < length or len(trailer) < 4:
                    break
                if crc32c(payload) != _LEN.unpack(trailer)[0]:
                    break
                self._positions.append((path, offset))
                offset += 4 + length + 4
        if not allow_torn_tail:
            raise CorruptLogError(f"corrupt frame in non-final segment {path} at offset {offset}")
        return offset

    def _fsync_dir(self) -> None:
        if self.durability == "never":
            return
        fd = os.open(self.directory, os.O_RDONLY)
        try:
            os.fsync(fd)
        finally:
            os.close(fd)

    # -- writing -----------------------------------------------------------

    def append(self, payload: bytes) -> int:
        """Append one frame; returns its position. Durable before return."""
        position, mark = self.append_buffered(payload)
        self.wait_mark(mark)
        return position

    def append_buffered(self, payload: bytes) -> tuple[int, int]:
        """Write a frame to the OS buffer; durability requires wait_mark.

        Splitting write from wait lets callers release their own locks
        before blocking on the group-commit fsync, so concurrent appenders
        share one fsync instead of queueing behind each other.
        """
        frame = _LEN.pack(len(payload)) + payload + _LEN.pack(crc32c(payload))
        with self._write_lock:
            if self._current_size + len(frame) > self.max_segment_bytes and self._current_size > 0:
                self._roll()
            offset = self._current_size
            self._file.write(frame)
            self._file.flush()
            self._current_size += len(frame)
            position = len(self._positions)
            self._positions.append((self._current_path, offset))
            self._write_marks += 1
            return position, self._write_marks

    def wait_mark(self, mark: int) -> None:
        """Block until the frame with this mark is durable (per the mode)."""
        if self.durability == "never":
            return
        self._wait_durable(mark)

    def on_durable(self, mark: int, callback: Callable[[], None]) -> None:
        """Invoke callback (from the flusher thread) once mark is durable.

        The asynchronous spelling of wait_mark: callers park a completion
        instead of a thread, and a background flusher batches one fsync
        across every registration that arrived in the meantime.
        """
        if self.durability == "never":
            callback()
            return
        with self._flush_cond:
            if self._flushed_marks >= mark:
                ready = True
            else:
                ready = False
                heapq.heappush(self._callbacks, (mark, next(self._callback_seq), callback))
                if self._flusher is None:
                    self._flusher = threading.Thread(
                        target=self._flusher_loop, name="segment-flusher", daemon=True
                    )
                    self._flusher.start()
        if ready:
            callback()
        else:
            self._flusher_wake.set()

    def _pop_ready_callbacks(self) -> list[Callable[[], None]]:
        # Caller holds _flush_cond.
        fire = []
        while self._callbacks and self._callbacks[0][0] <= self._flushed_marks:
            fire.append(heapq.heappop(self._callbacks)[2])
        return fire

    def _flusher_loop(self) -> None:
        while True:
            self._flusher_wake.wait(timeout=0.5)
            self._flusher_wake.clear()
            if self._closed:
                return
            with self._flush_cond:
                pending = bool(self._callbacks)
            if not pending:
                continue
            with self._write_lock:
                target = self._write_marks
                self._file.flush()
                fd = self._file.fileno()
            try:
                os.fsync(fd)
            except (OSError, ValueError):
                continue  # racing close(); loop exits on the next check
            with self._flush_cond:
                self._flushed_marks = max(self._flushed_marks, target)
                fire = self._pop_ready_callbacks()
                self._flush_cond.notify_all()
            for callback in fire:
                callback()
            with self._flush_cond:
                if self._callbacks:
                    self._flusher_wake.set()

    def _roll(self) -> None:
        # The old segment must be durable before writes move on, so that a
        # group-commit fsync only ever needs to cover the current file.
        self._file.flush()
        if self.durability != "never":
            os.fsync(self._file.fileno())
        self._file.close()
        self._seg_index += 1
        self._current_path = self._segment_path(self._seg_index)
        self._file = open(self._current_path, "ab")
        self._current_size = 0
        self._fsync_dir()
        with self._flush_cond:
            self._flushed_marks = max(self._flushed_marks, self._write_marks)
            fire = self._pop_ready_callbacks()
            self._flush_cond.notify_all()
        # Completion-only callbacks (call_soon_threadsafe); safe under the
        # write lock the caller holds.
        for callback in fire:
            callback()

    def _wait_durable(self, mark: int) -> None:
        while True:
            with self._flush_cond:
                if self._flushed_marks >= mark:
                    return
                if self._flushing:
                    self._flush_cond.wait(timeout=1.0)
                    continue
                self._flushing = True
            # Leader: fsync covers everything written so far.
            with self._write_lock:
                target = self._write_marks
                self._file.flush()
                fd = self._file.fileno()
            try:
                os.fsync(fd)
            finally:
                with self._flush_cond:
                    self._flushed_marks = max(self._flushed_marks, target)
                    self._flushing = False
                    fire = self._pop_ready_callbacks()
                    self._flush_cond.notify_all()
                for callback in fire:
                    callback()

    def sync(self) -> None:
        with self._write_lock:
            self._file.flush()
            if self.durability != "never":
                os.fsync(self._file.fileno())
            with self._flush_cond:
                self._flushed_marks = max(self._flushed_marks, self._write_marks)
                fire = self._pop_ready_callbacks()
                self._flush_cond.notify_all()
        for callback in fire:
            callback()

    # -- reading -----------------------------------------------------------

    def __len__(self) -> int:
        return len(self._positions)

    def read(self, position: int) -> bytes:
        path, offset = self._positions[position]
        with self._read_lock:
            handle = self._read_handles.get(path)
            if handle is None:
                handle = open(path, "rb")
                self._read_handles[path] = handle
            handle.seek(offset)
            head = handle.read(4)
            (length,) = _LEN.unpack(head)
            payload = handle.read(length)
            trailer = handle.read(4)
        if len(payload) < length or crc32c(payload) != _LEN.unpack(trailer)[0]:
            raise CorruptLogError(f"corrupt frame at {path}:{offset}")
        return payload

    def frames(self) -> Iterator[tuple[int, bytes]]:
        for position in range(len(self._positions)):
            yield position, self.read(position)

    def close(self) -> None:
        self._closed = True
        self._flusher_wake.set()
        if self._flusher is not None:
            self._flusher.join(timeout=2.0)
        self.sync()
        self._file.close()
        for handle in self._read_handles.values():
            handle.close()
        self._read_handles.clear()
