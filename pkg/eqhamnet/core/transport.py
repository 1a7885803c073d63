"""Point-to-point message transports between ranks.

Every message carries a 32-bit tag. Halo exchanges use their exchange counter as tag, their
backward twins set bit 30 and collectives set bit 31. A receive for one tag stashes frames
that arrive for other tags from the same peer, so independent operations may interleave.
"""

import json
import logging
import queue
import random
import socket
import struct
import threading
import time
from abc import ABC, abstractmethod
from collections import Counter, defaultdict, deque
from typing import Dict, List, Optional, Tuple

import numpy as np

from eqhamnet.core.exceptions import CommunicationError, UsageError

logger = logging.getLogger(__name__)

GRADIENT_TAG = 0x40000000
COLLECTIVE_TAG = 0x80000000
MAX_TAG = 0x3FFFFFFF

FRAME = struct.Struct("<QII")  # payload length, sender rank, tag
_HELLO = struct.Struct("<II")  # rank, listening port

_ABORT = object()


class Transport(ABC):
    def __init__(self, rank: int, world_size: int, timeout: float = 60.0):
        if world_size < 1 or not 0 <= rank < world_size:
            raise UsageError(f"Invalid rank {rank} for world size {world_size}")
        self.rank = rank
        self.world_size = world_size
        self.timeout = timeout
        self.stats: Counter = Counter()
        self.bytes_to: Dict[int, int] = defaultdict(int)
        self._stash: Dict[Tuple[int, int], deque] = defaultdict(deque)
        self._collectives = 0

    def _check_peer(self, peer: int):
        if not 0 <= peer < self.world_size:
            raise UsageError(f"Rank {self.rank} addressed unknown peer {peer}")

    def post_send(self, dst: int, tag: int, payload: bytes):
        self._check_peer(dst)
        self._deliver(dst, tag, bytes(payload))
        kind = "collective_send" if tag & COLLECTIVE_TAG else "send"
        self.stats[kind] += 1
        self.bytes_to[dst] += len(payload)

    def post_recv(self, src: int, tag: int) -> bytes:
        """Block until the frame ``(src, tag)`` arrives."""
        self._check_peer(src)
        stash = self._stash[(src, tag)]
        if not stash:
            deadline = time.monotonic() + self.timeout
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise CommunicationError(f"timed out waiting for tag {tag:#x}", self.rank, src)
                got_tag, payload = self._next_frame(src, remaining)
                if got_tag == tag:
                    stash.append(payload)
                    break
                self._stash[(src, got_tag)].append(payload)
        kind = "collective_recv" if tag & COLLECTIVE_TAG else "recv"
        self.stats[kind] += 1
        return stash.popleft()

    def allgather(self, payload: bytes) -> List[bytes]:
        """Every rank's payload, indexed by rank."""
        tag = COLLECTIVE_TAG | (self._collectives & MAX_TAG)
        self._collectives += 1
        for peer in range(self.world_size):
            if peer != self.rank:
                self.post_send(peer, tag, payload)
        return [bytes(payload) if peer == self.rank else self.post_recv(peer, tag)
                for peer in range(self.world_size)]

    def allgather_array(self, array: np.ndarray) -> np.ndarray:
        array = np.ascontiguousarray(array, dtype="<f8")
        parts = self.allgather(array.tobytes())
        return np.stack([np.frombuffer(part, dtype="<f8").reshape(array.shape) for part in parts])

    def barrier(self):
        self.allgather(b"")

    @abstractmethod
    def _deliver(self, dst: int, tag: int, payload: bytes):
        ...

    @abstractmethod
    def _next_frame(self, src: int, timeout: float) -> Tuple[int, bytes]:
        ...

    def close(self):
        pass


class InProcessHub:
    """Shared mailboxes for ``world_size`` ranks running as threads of one process.

    ``jitter`` delays each delivery by a random amount up to that many seconds to shake out
    ordering assumptions; per-pair FIFO order is preserved.
    """

    def __init__(self, world_size: int, timeout: float = 60.0, jitter: float = 0.0, seed: int = 0):
        self.world_size = world_size
        self.timeout = timeout
        self.jitter = jitter
        self.seed = seed
        self.queues: Dict[Tuple[int, int], queue.Queue] = {
            (src, dst): queue.Queue() for src in range(world_size) for dst in range(world_size)
        }
        self.aborted: Optional[str] = None

    def transport(self, rank: int) -> "InProcessTransport":
        return InProcessTransport(self, rank)

    def transports(self) -> List["InProcessTransport"]:
        return [self.transport(rank) for rank in range(self.world_size)]

    def abort(self, reason: str):
        """Wake every blocked receiver; used when one rank fails."""
        self.aborted = reason
        for mailbox in self.queues.values():
            mailbox.put((_ABORT, b""))


class InProcessTransport(Transport):
    def __init__(self, hub: InProcessHub, rank: int):
        super().__init__(rank, hub.world_size, hub.timeout)
        self.hub = hub
        self._rng = random.Random(hub.seed * 7919 + rank)

    def _deliver(self, dst: int, tag: int, payload: bytes):
        if self.hub.jitter:
            time.sleep(self._rng.uniform(0.0, self.hub.jitter))
        self.hub.queues[(self.rank, dst)].put((tag, payload))

    def _next_frame(self, src: int, timeout: float) -> Tuple[int, bytes]:
        try:
            tag, payload = self.hub.queues[(src, self.rank)].get(timeout=timeout)
        except queue.Empty:
            raise CommunicationError("timed out waiting for a frame", self.rank, src)
        if tag is _ABORT:
            raise CommunicationError(f"world aborted: {self.hub.aborted}", self.rank, src)
        return tag, payload


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        chunk = sock.recv(n - len(chunks))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.extend(chunk)
    return bytes(chunks)


class TcpTransport(Transport):
    """Full mesh of TCP links set up through a rendezvous on rank 0.

    Rank 0 listens on ``master_port``. Every other rank opens an ephemeral listener, registers
    ``(rank, port)`` with rank 0 and receives the address table. Rank r then connects to every
    lower non-zero rank and accepts connections from the higher ones.
    """

    def __init__(self, rank: int, world_size: int, master_addr: str, master_port: int,
                 timeout: float = 60.0):
        super().__init__(rank, world_size, timeout)
        self.master_addr = master_addr
        self.master_port = master_port
        self._sockets: Dict[int, socket.socket] = {}
        self._send_locks: Dict[int, threading.Lock] = {}
        self._inbox: Dict[int, queue.Queue] = {peer: queue.Queue() for peer in range(world_size)}
        self._closing = False
        if world_size > 1:
            self._rendezvous()
        for peer, sock in self._sockets.items():
            sock.settimeout(None)
            self._send_locks[peer] = threading.Lock()
            threading.Thread(target=self._reader, args=(peer, sock), daemon=True,
                             name=f"tcp-reader-{rank}-{peer}").start()
        logger.info(f"Rank {rank} connected to {len(self._sockets)} peers")

    def _connect(self, address: Tuple[str, int]) -> socket.socket:
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                return socket.create_connection(address, timeout=self.timeout)
            except OSError as e:
                if time.monotonic() >= deadline:
                    raise CommunicationError(f"cannot connect to {address[0]}:{address[1]}: {e}", self.rank, -1)
                time.sleep(0.05)

    def _rendezvous(self):
        try:
            if self.rank == 0:
                self._serve_rendezvous()
            else:
                self._join_rendezvous()
        except socket.timeout:
            raise CommunicationError("rendezvous timed out", self.rank, 0)

    def _serve_rendezvous(self):
        server = socket.create_server((self.master_addr, self.master_port))
        server.settimeout(self.timeout)
        table: Dict[int, Tuple[str, int]] = {}
        try:
            while len(table) < self.world_size - 1:
                conn, (host, _) = server.accept()
                conn.settimeout(self.timeout)
                peer, port = _HELLO.unpack(_recv_exact(conn, _HELLO.size))
                table[peer] = (host, port)
                self._sockets[peer] = conn
        finally:
            server.close()
        document = json.dumps({str(peer): list(address) for peer, address in table.items()}).encode()
        for peer in sorted(table):
            self._sockets[peer].sendall(struct.pack("<Q", len(document)) + document)

    def _join_rendezvous(self):
        listener = socket.create_server((self.master_addr if self.master_addr != "localhost" else "127.0.0.1", 0))
        listener.settimeout(self.timeout)
        try:
            master = self._connect((self.master_addr, self.master_port))
            master.sendall(_HELLO.pack(self.rank, listener.getsockname()[1]))
            (length,) = struct.unpack("<Q", _recv_exact(master, 8))
            table = {int(peer): tuple(address) for peer, address in json.loads(_recv_exact(master, length)).items()}
            self._sockets[0] = master
            for peer in range(1, self.rank):
                conn = self._connect(table[peer])
                conn.sendall(_HELLO.pack(self.rank, 0))
                self._sockets[peer] = conn
            for _ in range(self.rank + 1, self.world_size):
                conn, _ = listener.accept()
                conn.settimeout(self.timeout)
                peer, _ = _HELLO.unpack(_recv_exact(conn, _HELLO.size))
                self._sockets[peer] = conn
        finally:
            listener.close()

    def _reader(self, peer: int, sock: socket.socket):
        inbox = self._inbox[peer]
        try:
            while True:
                length, sender, tag = FRAME.unpack(_recv_exact(sock, FRAME.size))
                payload = _recv_exact(sock, length)
                if sender != peer:
                    inbox.put((_ABORT, f"frame from rank {sender} on the link to rank {peer}"))
                    return
                inbox.put((tag, payload))
        except (ConnectionError, OSError) as e:
            if not self._closing:
                inbox.put((_ABORT, f"connection lost: {e}"))

    def _deliver(self, dst: int, tag: int, payload: bytes):
        if dst == self.rank:
            self._inbox[dst].put((tag, payload))
            return
        try:
            with self._send_locks[dst]:
                self._sockets[dst].sendall(FRAME.pack(len(payload), self.rank, tag) + payload)
        except OSError as e:
            raise CommunicationError(f"send failed: {e}", self.rank, dst)

    def _next_frame(self, src: int, timeout: float) -> Tuple[int, bytes]:
        try:
            tag, payload = self._inbox[src].get(timeout=timeout)
        except queue.Empty:
            raise CommunicationError("timed out waiting for a frame", self.rank, src)
        if tag is _ABORT:
            raise CommunicationError(payload, self.rank, src)
        return tag, payload

    def close(self):
        self._closing = True
        for sock in self._sockets.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self._sockets.clear()
