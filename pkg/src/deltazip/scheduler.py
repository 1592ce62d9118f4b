"""Continuous-batching scheduler over multiple deltas.

Every iteration picks up to K requests spanning at most N concurrently loaded
deltas, first come first served. A queued request may skip the line when its
delta is already selected; it is then linked to the earliest admitted request
of that delta (its parent) and gets preempted when the parent finishes, going
back to its arrival-order place in the queue with its progress retained.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field


class RequestState(str, enum.Enum):
    QUEUED = "queued"
    LOADING = "loading"
    PREFILL = "prefill"
    DECODING = "decoding"
    PREEMPTED = "preempted"
    FINISHED = "finished"


@dataclass
class Request:
    id: int
    arrival: float
    model_id: int
    prompt_tokens: int
    decode_tokens: int
    state: RequestState = RequestState.QUEUED
    skipped_line: bool = False
    parent_id: int | None = None
    tokens_emitted: int = 0

    def sort_key(self) -> tuple[float, int]:
        return (self.arrival, self.id)

    @property
    def done_decoding(self) -> bool:
        return self.tokens_emitted >= self.decode_tokens


@dataclass
class SchedulerConfig:
    max_requests: int = 32  # K
    max_deltas: int = 4  # N

    def __post_init__(self):
        if self.max_requests < 1 or self.max_deltas < 1:
            raise ValueError("max_requests and max_deltas must be >= 1")


@dataclass
class SchedulerState:
    queue: list[Request] = field(default_factory=list)
    loaded_deltas: dict[int, int] = field(default_factory=dict)  # delta id -> load seq
    running: dict[int, Request] = field(default_factory=dict)
    _load_seq: int = 0

    def enqueue(self, req: Request) -> None:
        pos = bisect.bisect_left([r.sort_key() for r in self.queue], req.sort_key())
        self.queue.insert(pos, req)

    def mark_loaded(self, delta_id: int) -> None:
        if delta_id not in self.loaded_deltas:
            self.loaded_deltas[delta_id] = self._load_seq
            self._load_seq += 1


def select_batch(
    state: SchedulerState, cfg: SchedulerConfig
) -> tuple[list[Request], set[int]]:
    """Admit queued requests into the running batch, head first.

    A request joins while the batch has room (< K including already-running
    requests) and either its delta is already selected or fewer than N deltas
    are selected. Admissions that bypass a non-admitted request are marked as
    line skips and linked to the earliest admitted request of the same delta.
    Returns the full batch and the set of deltas that must be loaded.
    """
    selected: set[int] = {r.model_id for r in state.running.values()}
    batch: list[Request] = sorted(state.running.values(), key=Request.sort_key)
    admitted: list[Request] = []
    passed_over = False

    for req in list(state.queue):
        if len(batch) >= cfg.max_requests:
            break
        if req.model_id in selected or len(selected) < cfg.max_deltas:
            if passed_over:
                req.skipped_line = True
                req.parent_id = min(
                    (r for r in batch if r.model_id == req.model_id),
                    key=Request.sort_key,
                ).id
            selected.add(req.model_id)
            batch.append(req)
            admitted.append(req)
        else:
            passed_over = True

    for req in admitted:
        state.queue.remove(req)
        state.running[req.id] = req
        req.state = RequestState.LOADING

    to_load = selected - set(state.loaded_deltas)
    # Lazy eviction: drop loaded-but-unselected deltas, oldest first, only
    # when the new working set would exceed capacity.
    overflow = len(state.loaded_deltas) + len(to_load) - cfg.max_deltas
    if overflow > 0:
        evictable = sorted(
            (d for d in state.loaded_deltas if d not in selected),
            key=lambda d: state.loaded_deltas[d],
        )
        for d in evictable[:overflow]:
            del state.loaded_deltas[d]
    for d in sorted(to_load):
        state.mark_loaded(d)
    return batch, to_load


def on_request_finished(state: SchedulerState, finished_id: int) -> list[Request]:
    """Retire a running request and preempt its line-skipping children.

    Children go back to their arrival-order position in the queue with
    tokens_emitted retained; a child that already produced all its tokens is
    not preemptible.
    """
    if finished_id not in state.running:
        raise KeyError(f"request {finished_id} is not running")
    finished = state.running.pop(finished_id)
    finished.state = RequestState.FINISHED

    preempted = []
    for req in list(state.running.values()):
        if req.parent_id == finished_id and not req.done_decoding:
            del state.running[req.id]
            req.state = RequestState.PREEMPTED
            req.skipped_line = False
            req.parent_id = None
            state.enqueue(req)
            preempted.append(req)
    return preempted


def sweep_profile(latencies: dict[int, float]) -> int:
    """Pick the concurrent-delta count with minimal latency, ties to smallest."""
    if not latencies:
        raise ValueError("latency profile is empty")
    return min(sorted(latencies), key=lambda n: latencies[n])
