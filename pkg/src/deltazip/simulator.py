"""Discrete-event replay of request traces through the serving engine.

Two modes share one iteration-stepped event loop: "deltazip" keeps the base
model resident and swaps compressed deltas, batching requests across variants;
"scb_baseline" swaps whole fine-tuned models and can only batch requests of
the models currently resident. Time advances through explicit cost-model
phases (swap, prefill, decode iterations), so every run is a pure function of
its inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

from .core import Rng
from .errors import TraceError
from .scheduler import (
    Request,
    RequestState,
    SchedulerConfig,
    SchedulerState,
    on_request_finished,
    select_batch,
    sweep_profile,
)

MODE_DELTAZIP = "deltazip"
MODE_SCB = "scb_baseline"

POP_UNIFORM = "uniform"
POP_ZIPF = "zipf"


@dataclass
class CostModel:
    """Parametric timing model. All values are seconds or bytes/second."""

    swap_bandwidth: float = 6.25e9  # 50 Gbps link
    prefill_cost: float = 2e-4  # per prompt token
    decode_base: float = 5e-3  # fixed per iteration
    decode_per_token: float = 2e-5  # per batched token per iteration
    delta_mem_cost: float = 2e-3  # per iteration per GB of resident swapped weights
    launch_overhead_naive: float = 1e-3  # per extra weight group per iteration
    launch_overhead_sbmm: float = 1e-4
    host_resume_cost: float = 2e-2  # per preemption resume

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"cost model field {name} must be nonnegative")

    def decode_iteration(self, n_tokens: int, resident_gb: float, n_groups: int, mode: str) -> float:
        launch = (
            self.launch_overhead_sbmm if mode == MODE_DELTAZIP else self.launch_overhead_naive
        )
        return (
            self.decode_base
            + self.decode_per_token * n_tokens
            + self.delta_mem_cost * resident_gb
            + launch * max(0, n_groups - 1)
        )


@dataclass
class TraceEvent:
    arrival_s: float
    model_id: int
    prompt_tokens: int
    decode_tokens: int

    def __post_init__(self):
        if self.prompt_tokens < 1 or self.decode_tokens < 1:
            raise TraceError(
                f"token counts must be >= 1, got prompt={self.prompt_tokens} "
                f"decode={self.decode_tokens}"
            )
        if self.arrival_s < 0:
            raise TraceError(f"negative arrival time {self.arrival_s}")


@dataclass
class WorkloadSpec:
    n_models: int = 32
    rate: float = 1.0  # requests/second, Poisson
    duration: float = 300.0
    popularity: str = POP_UNIFORM
    zipf_alpha: float = 1.5
    prompt_median: float = 100.0
    decode_median: float = 150.0
    token_sigma: float = 0.6
    max_tokens: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError(f"arrival rate must be nonnegative, got {self.rate}")
        if self.n_models < 1:
            raise ValueError("n_models must be >= 1")
        if self.popularity == POP_ZIPF and self.zipf_alpha <= 0:
            raise ValueError("zipf alpha must be positive")
        if self.popularity not in (POP_UNIFORM, POP_ZIPF):
            raise ValueError(f"unknown popularity law {self.popularity!r}")


def zipf_weights(n_models: int, alpha: float):
    w = [1.0 / (i + 1) ** alpha for i in range(n_models)]
    total = sum(w)
    return [x / total for x in w]


def gen_trace(spec: WorkloadSpec) -> list[TraceEvent]:
    """Poisson arrivals with the configured popularity law and log-normal
    token lengths, deterministic per seed."""
    rng = Rng(spec.seed)
    if spec.popularity == POP_ZIPF:
        probs = zipf_weights(spec.n_models, spec.zipf_alpha)
    else:
        probs = None

    events: list[TraceEvent] = []
    t = 0.0
    if spec.rate == 0.0:
        return events
    while True:
        t += rng.exponential(1.0 / spec.rate)
        if t > spec.duration:
            break
        model = rng.choice(spec.n_models, p=probs)
        prompt = _sample_tokens(rng, spec.prompt_median, spec.token_sigma, spec.max_tokens)
        decode = _sample_tokens(rng, spec.decode_median, spec.token_sigma, spec.max_tokens)
        events.append(TraceEvent(t, model, prompt, decode))
    return events


def _sample_tokens(rng: Rng, median: float, sigma: float, max_tokens: int) -> int:
    n = int(round(rng.lognormal(math.log(median), sigma)))
    return max(1, min(max_tokens, n))


def load_trace_jsonl(lines) -> list[TraceEvent]:
    """Parse {'arrival_s', 'model', 'prompt_tokens', 'decode_tokens'} records."""
    events = []
    last = -math.inf
    for i, line in enumerate(lines):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            ev = TraceEvent(
                arrival_s=float(obj["arrival_s"]),
                model_id=int(obj["model"]),
                prompt_tokens=int(obj["prompt_tokens"]),
                decode_tokens=int(obj["decode_tokens"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise TraceError(f"bad trace record on line {i + 1}: {exc}") from exc
        if ev.arrival_s < last:
            raise TraceError(f"arrival times decrease on line {i + 1}")
        last = ev.arrival_s
        events.append(ev)
    return events


def dump_trace_jsonl(events: list[TraceEvent]):
    for ev in events:
        yield json.dumps(
            {
                "arrival_s": ev.arrival_s,
                "model": ev.model_id,
                "prompt_tokens": ev.prompt_tokens,
                "decode_tokens": ev.decode_tokens,
            }
        )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class RequestRecord:
    id: int
    model_id: int
    arrival: float
    prompt_tokens: int
    decode_tokens: int
    first_scheduled: float = math.nan
    first_token: float = math.nan
    finish: float = math.nan
    queueing: float = 0.0
    loading: float = 0.0
    inference: float = 0.0
    preemptions: int = 0

    @property
    def e2e(self) -> float:
        return self.finish - self.arrival

    @property
    def ttft(self) -> float:
        return self.first_token - self.arrival

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "model": self.model_id,
            "arrival": self.arrival,
            "prompt_tokens": self.prompt_tokens,
            "decode_tokens": self.decode_tokens,
            "first_scheduled": self.first_scheduled,
            "first_token": self.first_token,
            "finish": self.finish,
            "e2e": self.e2e,
            "ttft": self.ttft,
            "queueing": self.queueing,
            "loading": self.loading,
            "inference": self.inference,
            "preemptions": self.preemptions,
        }


@dataclass
class Metrics:
    mode: str
    records: list[RequestRecord] = field(default_factory=list)

    @property
    def finished(self) -> int:
        return len(self.records)

    @property
    def makespan(self) -> float:
        if not self.records:
            return 0.0
        return max(r.finish for r in self.records) - min(r.arrival for r in self.records)

    @property
    def throughput(self) -> float:
        span = self.makespan
        return self.finished / span if span > 0 else 0.0

    @property
    def mean_e2e(self) -> float:
        return sum(r.e2e for r in self.records) / len(self.records) if self.records else 0.0

    @property
    def mean_ttft(self) -> float:
        return sum(r.ttft for r in self.records) / len(self.records) if self.records else 0.0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "finished": self.finished,
            "makespan": self.makespan,
            "throughput": self.throughput,
            "mean_e2e": self.mean_e2e,
            "mean_ttft": self.mean_ttft,
            "requests": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Metrics":
        records = [
            RequestRecord(
                id=r["id"],
                model_id=r["model"],
                arrival=r["arrival"],
                prompt_tokens=r["prompt_tokens"],
                decode_tokens=r["decode_tokens"],
                first_scheduled=r["first_scheduled"],
                first_token=r["first_token"],
                finish=r["finish"],
                queueing=r["queueing"],
                loading=r["loading"],
                inference=r["inference"],
                preemptions=r.get("preemptions", 0),
            )
            for r in obj["requests"]
        ]
        return cls(mode=obj["mode"], records=records)


def slo_attainment(metrics: Metrics, slo_grid, kind: str = "e2e") -> list[float]:
    """Fraction of requests at or under each latency threshold."""
    if not metrics.records:
        raise ValueError("metrics contain no finished requests")
    if kind == "e2e":
        vals = [r.e2e for r in metrics.records]
    elif kind == "ttft":
        vals = [r.ttft for r in metrics.records]
    else:
        raise ValueError(f"unknown latency kind {kind!r}")
    n = len(vals)
    return [sum(1 for v in vals if v <= s) / n for s in slo_grid]


# ---------------------------------------------------------------------------
# Event loop
# ---------------------------------------------------------------------------

_MAX_ITERATIONS = 50_000_000


class _Engine:
    def __init__(self, trace, mode, cfg, cost, sizes, scb_slots):
        for i in range(1, len(trace)):
            if trace[i].arrival_s < trace[i - 1].arrival_s:
                raise TraceError("trace is not sorted by arrival time")
        for ev in trace:
            if ev.model_id not in sizes:
                raise TraceError(f"trace references unknown model id {ev.model_id}")
        self.trace = trace
        self.mode = mode
        self.cfg = cfg
        self.cost = cost
        self.sizes = sizes
        self.scb_slots = scb_slots
        self.t = 0.0
        self.state = SchedulerState()
        self.records: dict[int, RequestRecord] = {}

    # -- time accounting ----------------------------------------------------

    def _advance(self, dt: float, running_phase: str) -> None:
        """Move the clock and charge the interval to each live request."""
        if dt <= 0:
            return
        self.t += dt
        for req in self.state.queue:
            self.records[req.id].queueing += dt
        for req in self.state.running.values():
            rec = self.records[req.id]
            if running_phase == "loading":
                rec.loading += dt
            else:
                rec.inference += dt

    # -- scheduling ---------------------------------------------------------

    def _select(self):
        if self.mode == MODE_DELTAZIP:
            batch, to_load = select_batch(self.state, self.cfg)
        else:
            batch, to_load = self._select_scb()
        admitted = [r for r in batch if math.isnan(self.records[r.id].first_scheduled)]
        for r in admitted:
            self.records[r.id].first_scheduled = self.t
        return batch, to_load

    def _select_scb(self):
        """Whole-model swapping with strict FCFS admission.

        The queue head either joins (model resident, or a slot can be freed
        by evicting an idle model) or blocks the whole queue until a resident
        model drains. Requests of already-resident models behind the head
        cannot jump it; that head-of-line blocking is what the skip-the-line
        scheduler in deltazip mode removes."""
        state, cfg = self.state, self.cfg
        resident = state.loaded_deltas
        admitted = []
        to_load: set[int] = set()
        n_running = len(state.running)
        busy = {r.model_id for r in state.running.values()}
        for req in list(state.queue):
            if n_running + len(admitted) >= cfg.max_requests:
                break
            m = req.model_id
            if m in resident or m in to_load:
                admitted.append(req)
                continue
            if len(resident) + len(to_load) < self.scb_slots:
                to_load.add(m)
                admitted.append(req)
                continue
            # Evict one idle resident model, oldest first.
            idle = sorted(
                (d for d in resident if d not in busy and d not in to_load),
                key=lambda d: resident[d],
            )
            if not idle:
                break
            del resident[idle[0]]
            to_load.add(m)
            admitted.append(req)
        for req in admitted:
            state.queue.remove(req)
            state.running[req.id] = req
            req.state = RequestState.LOADING
            busy.add(req.model_id)
        for m in sorted(to_load):
            state.mark_loaded(m)
        batch = sorted(state.running.values(), key=Request.sort_key)
        return batch, to_load

    # -- main loop ----------------------------------------------------------

    def run(self) -> Metrics:
        next_ev = 0
        trace = self.trace
        iterations = 0
        while next_ev < len(trace) or self.state.queue or self.state.running:
            iterations += 1
            if iterations > _MAX_ITERATIONS:
                raise RuntimeError("simulation exceeded iteration safety cap")

            while next_ev < len(trace) and trace[next_ev].arrival_s <= self.t:
                ev = trace[next_ev]
                req = Request(
                    id=next_ev,
                    arrival=ev.arrival_s,
                    model_id=ev.model_id,
                    prompt_tokens=ev.prompt_tokens,
                    decode_tokens=ev.decode_tokens,
                )
                self.records[req.id] = RequestRecord(
                    id=req.id,
                    model_id=req.model_id,
                    arrival=req.arrival,
                    prompt_tokens=req.prompt_tokens,
                    decode_tokens=req.decode_tokens,
                )
                self.state.enqueue(req)
                # Arrivals land at iteration boundaries; the slice of the
                # just-finished interval after the arrival counts as queueing.
                self.records[req.id].queueing += self.t - ev.arrival_s
                next_ev += 1

            if not self.state.queue and not self.state.running:
                # Work conservation: idle only when nothing is schedulable.
                self.t = trace[next_ev].arrival_s
                continue

            _, to_load = self._select()

            # Phase 1: weight movement. New deltas stream over one link;
            # resumed requests swap their intermediate state back in.
            load_time = sum(self.sizes[d] for d in sorted(to_load)) / self.cost.swap_bandwidth
            resumed = [
                r
                for r in self.state.running.values()
                if r.state == RequestState.LOADING and r.tokens_emitted > 0
            ]
            load_time += self.cost.host_resume_cost * len(resumed)
            self._advance(load_time, "loading")

            # Phase 2: prompt processing; the batch waits for the slowest one.
            fresh = [
                r
                for r in self.state.running.values()
                if r.state == RequestState.LOADING and r.tokens_emitted == 0
            ]
            for r in fresh:
                r.state = RequestState.PREFILL
            if fresh:
                prefill_time = self.cost.prefill_cost * max(r.prompt_tokens for r in fresh)
                self._advance(prefill_time, "inference")
            for r in self.state.running.values():
                r.state = RequestState.DECODING

            # Phase 3: one decode iteration for every running request.
            running = sorted(self.state.running.values(), key=Request.sort_key)
            resident_gb = sum(self.sizes[d] for d in self.state.loaded_deltas) / 1e9
            groups = len({r.model_id for r in running})
            dt = self.cost.decode_iteration(len(running), resident_gb, groups, self.mode)
            self._advance(dt, "inference")
            for r in running:
                r.tokens_emitted += 1
                if r.tokens_emitted == 1:
                    self.records[r.id].first_token = self.t

            done = [r for r in running if r.done_decoding]
            for r in done:
                self.records[r.id].finish = self.t
            for r in done:
                if self.mode == MODE_DELTAZIP:
                    preempted = on_request_finished(self.state, r.id)
                    for p in preempted:
                        self.records[p.id].preemptions += 1
                else:
                    self.state.running.pop(r.id)
                    r.state = RequestState.FINISHED

        records = [self.records[i] for i in sorted(self.records)]
        return Metrics(mode=self.mode, records=records)


def run_sim(
    trace: list[TraceEvent],
    mode: str,
    cfg: SchedulerConfig,
    cost: CostModel,
    sizes: dict[int, float],
    scb_slots: int = 2,
) -> Metrics:
    """Replay a trace to completion and collect per-request metrics.

    sizes maps model id to the bytes swapped per load in the given mode
    (compressed delta bytes for deltazip, full fp16 model bytes for the
    baseline).
    """
    if mode not in (MODE_DELTAZIP, MODE_SCB):
        raise ValueError(f"unknown mode {mode!r}")
    if scb_slots < 1:
        raise ValueError("scb_slots must be >= 1")
    return _Engine(trace, mode, cfg, cost, sizes, scb_slots).run()


def sweep_n(
    trace: list[TraceEvent],
    cfg: SchedulerConfig,
    cost: CostModel,
    sizes: dict[int, float],
    n_values,
) -> dict[int, float]:
    """Mean end-to-end latency per concurrent-delta budget."""
    out: dict[int, float] = {}
    for n in n_values:
        if n < 1:
            raise ValueError("swept N values must be >= 1")
        metrics = run_sim(trace, MODE_DELTAZIP, replace(cfg, max_deltas=n), cost, sizes)
        out[n] = metrics.mean_e2e
    return out


def choose_n(sweep: dict[int, float]) -> int:
    return sweep_profile(sweep)
