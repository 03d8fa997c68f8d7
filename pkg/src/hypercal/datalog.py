"""Offline transition logs and their on-disk format.

A log file is ``MAGIC | u16 version | u32 header length | JSON header | records``.
Records are fixed-width little-endian structs, one per transition, so a file is
bit-exact on round trip and loads with a single ``np.frombuffer``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

LOG_MAGIC = b"HCLOG\x00"
LOG_VERSION = 1


class LogFormatError(ValueError):
    """Bad magic, unsupported version or truncated log file."""


def record_dtype(state_dim: int) -> np.dtype:
    return np.dtype([
        ("state", "<f8", (state_dim,)),
        ("action", "<i4"),
        ("reward", "<f8"),
        ("next_state", "<f8", (state_dim,)),
        ("discount", "<f8"),
        ("terminal", "u1"),
        ("episode_start", "u1"),
        ("restarted", "u1"),
    ])


@dataclass
class DataLog:
    """Transitions in time order.

    ``episode_start`` marks the first record of each trajectory. ``restarted`` marks
    transitions of a continuing task where the environment jumped to a fresh start
    state (``next_state`` is that start state, which opens the next trajectory).
    ``discount`` is 0 on terminal transitions and the task discount otherwise.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    episode_starts: np.ndarray
    restarts: np.ndarray
    discounts: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.next_states = np.atleast_2d(np.asarray(self.next_states, dtype=float))
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.terminals = np.asarray(self.terminals, dtype=bool)
        self.episode_starts = np.asarray(self.episode_starts, dtype=bool)
        self.restarts = np.asarray(self.restarts, dtype=bool)
        self.discounts = np.asarray(self.discounts, dtype=float)

    def __len__(self):
        return len(self.actions)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    def validate(self) -> None:
        n = len(self)
        if n == 0:
            raise ValueError("empty log")
        for name in ("states", "rewards", "next_states", "terminals", "episode_starts",
                     "restarts", "discounts"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"log field {name} has length {len(getattr(self, name))}, expected {n}")
        if not self.episode_starts[0]:
            raise ValueError("the first record must start an episode")
        ends = self.terminals[:-1] | self.restarts[:-1]
        if np.any(ends != self.episode_starts[1:]):
            raise ValueError("episode_start flags disagree with terminal/restart boundaries")

    def boundaries(self) -> list[tuple[int, int]]:
        """Half-open record ranges of each trajectory."""
        starts = np.flatnonzero(self.episode_starts)
        ends = np.append(starts[1:], len(self))
        return list(zip(starts.tolist(), ends.tolist()))

    @property
    def n_episodes(self) -> int:
        """Number of trajectories, counting a trailing unfinished one."""
        return int(self.episode_starts.sum())

    def episode_returns(self) -> np.ndarray:
        """Undiscounted reward sum of every trajectory (including a trailing partial one)."""
        return np.array([self.rewards[lo:hi].sum() for lo, hi in self.boundaries()])

    def trajectories(self) -> list[np.ndarray]:
        """Visited states per trajectory; the final next state is appended unless it was a restart."""
        out = []
        for lo, hi in self.boundaries():
            states = self.states[lo:hi]
            if not self.restarts[hi - 1]:
                states = np.concatenate([states, self.next_states[hi - 1: hi]])
            out.append(states)
        return out

    def start_states(self) -> np.ndarray:
        return self.states[self.episode_starts]

    def slice(self, lo: int, hi: int) -> "DataLog":
        parts = {k: getattr(self, k)[lo:hi] for k in ("states", "actions", "rewards", "next_states",
                                                       "terminals", "episode_starts", "restarts", "discounts")}
        parts["episode_starts"] = parts["episode_starts"].copy()
        parts["episode_starts"][0] = True
        return DataLog(**parts, meta=dict(self.meta))

    def to_records(self) -> np.ndarray:
        rec = np.zeros(len(self), dtype=record_dtype(self.state_dim))
        rec["state"] = self.states
        rec["action"] = self.actions
        rec["reward"] = self.rewards
        rec["next_state"] = self.next_states
        rec["discount"] = self.discounts
        rec["terminal"] = self.terminals
        rec["episode_start"] = self.episode_starts
        rec["restarted"] = self.restarts
        return rec

    @classmethod
    def from_records(cls, rec: np.ndarray, meta: dict | None = None) -> "DataLog":
        return cls(rec["state"], rec["action"], rec["reward"], rec["next_state"],
                   rec["terminal"].astype(bool), rec["episode_start"].astype(bool),
                   rec["restarted"].astype(bool), rec["discount"], meta or {})

    def equals(self, other: "DataLog") -> bool:
        return self.to_records().tobytes() == other.to_records().tobytes()


def write_log(log: DataLog, path) -> None:
    """Validate and write; a log declaring ``meta["episode_band"]`` must satisfy it."""
    log.validate()
    band = log.meta.get("episode_band")
    if band is not None:
        lo, hi = band
        count = int((log.terminals | log.restarts).sum())
        if count < lo or (hi is not None and count > hi):
            raise ValueError(f"log has {count} completed episodes, outside its declared band {band}")
    header = dict(log.meta)
    header.update(n_data=len(log), state_dim=log.state_dim, n_episodes=log.n_episodes)
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(LOG_MAGIC)
        f.write(struct.pack("<HI", LOG_VERSION, len(blob)))
        f.write(blob)
        f.write(log.to_records().tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(len(LOG_MAGIC) + 6)
        if head[: len(LOG_MAGIC)] != LOG_MAGIC:
            raise LogFormatError(f"{path}: not a transition log (bad magic)")
        version, hlen = struct.unpack_from("<HI", head, len(LOG_MAGIC))
        if version != LOG_VERSION:
            raise LogFormatError(f"{path}: unsupported log version {version}")
        raw = f.read(hlen)
    if len(raw) != hlen:
        raise LogFormatError(f"{path}: truncated header")
    return json.loads(raw)


def read_log(path) -> DataLog:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(LOG_MAGIC)] != LOG_MAGIC:
        raise LogFormatError(f"{path}: not a transition log (bad magic)")
    off = len(LOG_MAGIC)
    if len(blob) < off + 6:
        raise LogFormatError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<HI", blob, off)
    if version != LOG_VERSION:
        raise LogFormatError(f"{path}: unsupported log version {version}")
    off += 6
    if len(blob) < off + hlen:
        raise LogFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[off: off + hlen])
    except json.JSONDecodeError as exc:
        raise LogFormatError(f"{path}: corrupt header") from exc
    off += hlen
    dtype = record_dtype(int(header["state_dim"]))
    n = int(header["n_data"])
    if len(blob) - off != n * dtype.itemsize:
        raise LogFormatError(
            f"{path}: expected {n} records ({n * dtype.itemsize} bytes), found {len(blob) - off} bytes"
        )
    rec = np.frombuffer(blob, dtype=dtype, count=n, offset=off)
    meta = {k: v for k, v in header.items() if k not in ("n_data", "state_dim", "n_episodes")}
    return DataLog.from_records(rec, meta)
