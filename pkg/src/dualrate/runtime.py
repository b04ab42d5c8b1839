"""Dual-frequency executor: slow planner into a latent cache, fast policy
every control step.

Two timing modes. Virtual mode is fully deterministic: a planner job launched
at step s*k (reading that step's third-view image) publishes its latent at
step s*k + lp, all bookkeeping driven by step indices. Wall-clock mode runs
the planner on a worker thread and is used only for frequency measurement.
Step 0 always bootstraps synchronously so the policy never acts without a
latent.

Step traces serialize as line-delimited JSON (see docs/FORMATS.md): a header
record {"format": "dualrate-trace", "version": 1}, then one record per step
with keys t, source_step, staleness, a_pos, a_end, durations_ms.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .env import Action, ERRORED, EpisodeResult, GridWorld, RUNNING, TaskSpec
from .planner import Latent, SlowPlanner
from .policy import FastPolicy, policy_frame

log = logging.getLogger(__name__)

TRACE_FORMAT = {"format": "dualrate-trace", "version": 1}


class BufferError(RuntimeError):
    pass


class LatentBuffer:
    """Single-writer, single-reader latest-value cache.

    ``current`` is always the published latent with the highest sequence
    number; readers get a consistent snapshot (publication swaps one
    reference). Out-of-order completions are rejected: an error in strict
    mode, a logged drop otherwise (the wall-clock setting).
    """

    def __init__(self, capacity: int = 16, strict: bool = True):
        self._current: Latent | None = None
        self._history: list[Latent] = []
        self.capacity = capacity
        self.strict = strict
        self._lock = threading.Lock()

    def publish(self, latent: Latent):
        with self._lock:
            if self._current is not None and latent.seq <= self._current.seq:
                if self.strict:
                    raise BufferError(
                        f"non-monotonic publish: seq {latent.seq} after {self._current.seq}"
                    )
                log.warning("dropping stale planner result seq=%d (have %d)",
                            latent.seq, self._current.seq)
                return
            self._current = latent
            self._history.append(latent)
            if len(self._history) > self.capacity:
                del self._history[0]

    def read_latest(self) -> Latent:
        current = self._current
        if current is None:
            raise BufferError("read before the first latent was published")
        return current

    @property
    def history(self) -> list[Latent]:
        with self._lock:
            return list(self._history)


@dataclass(frozen=True)
class ScheduleConfig:
    interval: int = 1        # control steps between planner launches (k)
    latency: int = 0         # launch-to-publish delay in steps, virtual mode (lp)
    mode: str = "virtual"    # "virtual" | "wall"

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("planner interval must be >= 1")
        if self.latency < 0:
            raise ValueError("planner latency must be >= 0")
        if self.mode not in ("virtual", "wall"):
            raise ValueError(f"unknown schedule mode '{self.mode}'")


@dataclass
class StepTrace:
    t: int
    source_step: int
    staleness: int
    a_pos: tuple
    a_end: int
    durations_ms: dict | None = None

    def to_record(self) -> dict:
        return {
            "t": self.t,
            "source_step": self.source_step,
            "staleness": self.staleness,
            "a_pos": [float(x) for x in self.a_pos],
            "a_end": int(self.a_end),
            "durations_ms": self.durations_ms,
        }


def write_traces(path, traces: list[StepTrace]):
    with open(path, "w") as f:
        f.write(json.dumps(TRACE_FORMAT, sort_keys=True) + "\n")
        for tr in traces:
            f.write(json.dumps(tr.to_record(), sort_keys=True) + "\n")


def read_traces(path) -> list[dict]:
    with open(path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("format") != "dualrate-trace":
        raise ValueError(f"{path}: not a trace file")
    return lines[1:]


def _context_window(frames: list[np.ndarray], t: int, length: int) -> list[np.ndarray]:
    # episode starts repeat the first frame to fill the window
    return [frames[max(0, t - j)] for j in range(length - 1, -1, -1)]


def run_episode(env: GridWorld, planner: SlowPlanner | None, policy: FastPolicy,
                schedule: ScheduleConfig, seed, task: TaskSpec,
                max_steps: int | None = None) -> tuple[EpisodeResult, list[StepTrace]]:
    """Virtual-time rollout of the hierarchical controller.

    The planner runs synchronously at step 0; afterwards a job launched at
    step s*k publishes at s*k + lp. The policy reads the freshest cached
    latent and acts every step.
    """
    if schedule.mode != "virtual":
        raise ValueError("run_episode is the deterministic virtual-time path")
    max_steps = max_steps if max_steps is not None else env.max_steps
    state, obs = env.reset(seed, task)
    instr = obs.instruction
    frames = [policy_frame(obs, policy.cfg.views)]

    buffer = LatentBuffer()
    pending: list[tuple[int, Latent]] = []
    seq = 0
    conditioned = policy.cfg.conditioned
    if conditioned:
        if planner is None:
            raise ValueError("a conditioned policy needs a planner")
        buffer.publish(planner.encode(obs.third, instr, source_step=0, seq=seq))
        seq += 1

    traces: list[StepTrace] = []
    outcome = RUNNING
    t = 0
    while outcome == RUNNING and t < max_steps:
        if conditioned and t > 0 and t % schedule.interval == 0:
            latent = planner.encode(obs.third, instr, source_step=t, seq=seq)
            seq += 1
            pending.append((t + schedule.latency, latent))
        for due, latent in sorted(pending, key=lambda p: (p[0], p[1].seq)):
            if due <= t:
                buffer.publish(latent)
        pending = [p for p in pending if p[0] > t]

        if conditioned:
            latent = buffer.read_latest()
            staleness = t - latent.source_step
        else:
            latent, staleness = None, 0
        action = policy.act(_context_window(frames, t, policy.cfg.context_len), latent)
        traces.append(StepTrace(
            t=t,
            source_step=latent.source_step if latent is not None else t,
            staleness=staleness,
            a_pos=tuple(action.a_pos),
            a_end=action.a_end,
        ))
        try:
            state, obs, outcome = env.step(state, action)
        except Exception:
            log.exception("environment fault at step %d", t)
            return EpisodeResult(ERRORED, t, float(t)), traces
        frames.append(policy_frame(obs, policy.cfg.views))
        t += 1

    if outcome == RUNNING:
        outcome = "timeout"
    return EpisodeResult(outcome, t, float(t)), traces


def run_episode_monolithic(env: GridWorld, model, latency: int, seed, task: TaskSpec,
                           max_steps: int | None = None) -> tuple[EpisodeResult, list[StepTrace]]:
    """Rollout for a single slow model that acts once per completed forward.

    A job launched at step s with that step's observation completes ``latency``
    steps later; the action is applied then, a new job launches immediately,
    and the gripper idles in between. ``model.act_on(obs)`` must return an
    Action. latency = 0 degenerates to acting every step.
    """
    max_steps = max_steps if max_steps is not None else env.max_steps
    state, obs = env.reset(seed, task)
    job = (0 + latency, 0, obs)  # (due step, source step, observation)
    traces: list[StepTrace] = []
    outcome = RUNNING
    last_source = 0
    t = 0
    while outcome == RUNNING and t < max_steps:
        if job is not None and job[0] <= t:
            _, source, job_obs = job
            action = model.act_on(job_obs)
            last_source = source
            job = None
        else:
            action = Action.from_logit(np.zeros(2), -10.0)
        traces.append(StepTrace(
            t=t, source_step=last_source, staleness=t - last_source,
            a_pos=tuple(action.a_pos), a_end=action.a_end,
        ))
        try:
            state, obs, outcome = env.step(state, action)
        except Exception:
            log.exception("environment fault at step %d", t)
            return EpisodeResult(ERRORED, t, float(t)), traces
        t += 1
        if job is None:
            job = (t + latency, t, obs)

    if outcome == RUNNING:
        outcome = "timeout"
    return EpisodeResult(outcome, t, float(t)), traces


@dataclass
class FrequencyReport:
    policy_hz: float
    planner_hz: float
    end_to_end_hz: float
    policy_latency_s: float
    planner_latency_s: float
    frames: int

    def to_dict(self) -> dict:
        return {
            "policy_hz": self.policy_hz,
            "planner_hz": self.planner_hz,
            "end_to_end_hz": self.end_to_end_hz,
            "policy_latency_s": self.policy_latency_s,
            "planner_latency_s": self.planner_latency_s,
            "frames": self.frames,
        }


def measure_frequencies(planner: SlowPlanner, policy: FastPolicy,
                        schedule: ScheduleConfig, obs, frames: int = 200,
                        warmup: int = 20) -> FrequencyReport:
    """Wall-clock rates over a synthetic frame stream (no rendering included).

    The control loop acts every step on a fixed observation; planner jobs
    launch every ``interval`` steps on a worker thread, with backpressure at
    launch points (a new launch waits for the previous job), while reads stay
    wait-free. With interval 1 the loop is effectively serial; as the interval
    grows the loop rate approaches the pure policy rate.
    """
    from .policy import forward_latency

    if frames < 100:
        raise ValueError("frequency measurement needs at least 100 frames")
    instr = obs.instruction
    frame = policy_frame(obs, policy.cfg.views)
    context = [frame] * policy.cfg.context_len

    planner_latency = forward_latency(
        lambda: planner.encode(obs.third, instr), trials=30, warmup=5)
    first = planner.encode(obs.third, instr, source_step=0, seq=0)
    policy_latency = forward_latency(
        lambda: policy.act(context, first), trials=30, warmup=5)

    buffer = LatentBuffer(strict=False)
    buffer.publish(first)
    seq = {"n": 0}

    def job(step):
        def run():
            seq["n"] += 1
            buffer.publish(planner.encode(obs.third, instr, source_step=step, seq=seq["n"]))
        return run

    worker: threading.Thread | None = None
    completions = 0
    for t in range(warmup):
        policy.act(context, buffer.read_latest())

    t0 = time.perf_counter()
    for t in range(frames):
        if t % schedule.interval == 0:
            if worker is not None:
                worker.join()
                completions += 1
            worker = threading.Thread(target=job(t))
            worker.start()
        policy.act(context, buffer.read_latest())
    if worker is not None:
        worker.join()
        completions += 1
    elapsed = time.perf_counter() - t0

    return FrequencyReport(
        policy_hz=1.0 / policy_latency,
        planner_hz=completions / elapsed,
        end_to_end_hz=frames / elapsed,
        policy_latency_s=policy_latency,
        planner_latency_s=planner_latency,
        frames=frames,
    )
