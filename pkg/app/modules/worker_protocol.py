"""
Worker Protocol
Seed-only distributed evaluation for ES. The coordinator broadcasts θ once
per generation; workers rebuild each perturbation from its seed and answer
with one (seed, sign, reward) record per rollout.

Wire format: newline-delimited JSON messages. A parameter broadcast is a
`params` header line followed by exactly `nbytes` of EVSD checkpoint bytes.
"""
from __future__ import annotations

import asyncio
import logging
import statistics
import time
from abc import ABC, abstractmethod
from typing import Annotated, Callable, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import Field, TypeAdapter, ValidationError

from app.config import Settings, get_settings
from app.models import (
    EnvConfig,
    ErrorMessage,
    HelloAck,
    HelloMessage,
    MlpSpec,
    ParamsAck,
    ParamsHeader,
    Perturbation,
    ResultMessage,
    ShutdownMessage,
    TaskMessage,
)
from app.modules.envs import EnvFactory, env_factory, evaluate_policy
from app.modules.es_optimizer import derive_noise, perturb
from app.modules.nn_core import (
    CheckpointFormatError,
    decode_checkpoint,
    encode_checkpoint,
    flatten,
    params_checksum,
    unflatten,
)

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1

WireMessage = Annotated[
    Union[
        HelloMessage, HelloAck, ParamsHeader, ParamsAck,
        TaskMessage, ResultMessage, ErrorMessage, ShutdownMessage,
    ],
    Field(discriminator="type"),
]
_wire_adapter: TypeAdapter = TypeAdapter(WireMessage)


class ProtocolError(RuntimeError):
    """Raised on malformed messages, version mismatches or unexpected replies."""
    pass


class StaleParametersError(RuntimeError):
    """Raised when a task references a parameter version the worker does not hold."""

    def __init__(self, requested: Optional[int], held: Optional[int]):
        super().__init__(f"task needs theta version {requested}, worker holds {held}")
        self.requested = requested
        self.held = held


class WorkerDisconnectedError(RuntimeError):
    """Raised when a worker's connection drops or the worker is otherwise lost."""
    pass


class GenerationAbortedError(RuntimeError):
    """Raised when a generation cannot complete because no live worker remains."""
    pass


# ── Framing ───────────────────────────────────────────────────────────────────

def encode_message(message) -> bytes:
    return message.model_dump_json().encode("utf-8") + b"\n"


def parse_message(line: bytes):
    try:
        return _wire_adapter.validate_json(line)
    except ValidationError as e:
        raise ProtocolError(f"invalid message: {e.errors()[0].get('msg', e)}") from e


async def read_message(reader: asyncio.StreamReader):
    """Next message from the stream, or None on EOF. Unknown message types are skipped."""
    while True:
        line = await reader.readline()
        if not line:
            return None
        if not line.strip():
            continue
        try:
            return _wire_adapter.validate_json(line)
        except ValidationError as e:
            if e.errors()[0]["type"] == "union_tag_invalid":
                logger.warning("Skipping unknown message type: %s", line[:80])
                continue
            raise ProtocolError(f"invalid message: {e.errors()[0].get('msg', e)}") from e


async def send_message(writer: asyncio.StreamWriter, message) -> None:
    writer.write(encode_message(message))
    await writer.drain()


async def send_params(writer: asyncio.StreamWriter, payload: bytes, version: int) -> None:
    writer.write(encode_message(ParamsHeader(version=version, nbytes=len(payload))))
    writer.write(payload)
    await writer.drain()


# ── Task evaluation (worker side) ─────────────────────────────────────────────

def evaluate_task(
    task: TaskMessage,
    theta: np.ndarray,
    theta_version: Optional[int],
    spec: MlpSpec,
    make_env: EnvFactory,
) -> list[ResultMessage]:
    """Rebuild every perturbation of the task from its seed and roll it out on the task's episode seeds."""
    if theta_version != task.theta_version:
        raise StaleParametersError(task.theta_version, theta_version)
    env = make_env()
    results: list[ResultMessage] = []
    noise: dict[int, np.ndarray] = {}
    for p in task.perturbations:
        if p.seed not in noise:
            noise[p.seed] = derive_noise(p.seed, theta.size)
        policy = unflatten(spec, perturb(theta, task.sigma, p.sign, noise[p.seed]))
        rewards, steps = evaluate_policy(policy, env, task.episode_seeds)
        results.append(ResultMessage(
            generation=task.generation,
            seed=p.seed,
            sign=p.sign,
            reward=sum(rewards) / len(rewards),
            env_steps=steps,
        ))
    return results


# ── Worker handles (coordinator side) ────────────────────────────────────────

class WorkerHandle(ABC):
    name: str = "worker"
    alive: bool = True

    @abstractmethod
    async def load_params(self, theta: np.ndarray, version: int) -> str:
        """Install θ; returns the worker's checksum of what it now holds."""

    @abstractmethod
    async def run_task(self, task: TaskMessage) -> list[ResultMessage]:
        ...

    async def close(self) -> None:
        self.alive = False


class LocalWorker(WorkerHandle):
    """In-process executor; same messages, no serialization."""

    def __init__(self, spec: MlpSpec, make_env: EnvFactory, name: str = "local"):
        self.spec = spec
        self.make_env = make_env
        self.name = name
        self.alive = True
        self.theta: Optional[np.ndarray] = None
        self.version: Optional[int] = None

    async def load_params(self, theta: np.ndarray, version: int) -> str:
        self.theta = np.array(theta, dtype=np.float64)
        self.version = version
        return params_checksum(self.theta)

    async def run_task(self, task: TaskMessage) -> list[ResultMessage]:
        if self.theta is None:
            raise StaleParametersError(task.theta_version, None)
        return await asyncio.to_thread(
            evaluate_task, task, self.theta, self.version, self.spec, self.make_env
        )


class RemoteWorker(WorkerHandle):
    """
    Coordinator-side proxy for a `serve-worker` connection. A reader task
    routes replies; results that arrive after their task timed out still
    reach `on_result` so the generation can use them.
    """

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, spec: MlpSpec, name: str):
        self.reader = reader
        self.writer = writer
        self.spec = spec
        self.name = name
        self.alive = True
        self.on_result: Optional[Callable[[ResultMessage], None]] = None
        self._pending: dict[tuple[int, int, int], asyncio.Future] = {}
        self._ack: Optional[asyncio.Future] = None
        self._reader_task = asyncio.create_task(self._read_loop())

    def _fail_pending(self, exc: Exception) -> None:
        for fut in self._pending.values():
            if not fut.done():
                fut.set_exception(exc)
        self._pending.clear()
        if self._ack is not None and not self._ack.done():
            self._ack.set_exception(exc)

    async def _read_loop(self) -> None:
        try:
            while True:
                msg = await read_message(self.reader)
                if msg is None:
                    raise WorkerDisconnectedError(f"{self.name}: connection closed")
                if isinstance(msg, ResultMessage):
                    fut = self._pending.pop((msg.generation, msg.seed, msg.sign), None)
                    if fut is not None and not fut.done():
                        fut.set_result(msg)
                    if self.on_result is not None:
                        self.on_result(msg)
                elif isinstance(msg, ParamsAck):
                    if self._ack is not None and not self._ack.done():
                        self._ack.set_result(msg)
                elif isinstance(msg, ErrorMessage):
                    if msg.code == "stale_params":
                        exc: Exception = StaleParametersError(msg.requested_version, msg.held_version)
                    else:
                        exc = ProtocolError(f"{self.name}: {msg.code}: {msg.detail}")
                    self._fail_pending(exc)
                else:
                    logger.debug("%s: ignoring %s message", self.name, type(msg).__name__)
        except asyncio.CancelledError:
            raise
        except (WorkerDisconnectedError, ProtocolError, ConnectionError, asyncio.IncompleteReadError) as e:
            if self.alive:
                logger.warning("Worker %s lost: %s", self.name, e)
            self.alive = False
            self._fail_pending(e if isinstance(e, WorkerDisconnectedError) else WorkerDisconnectedError(str(e)))

    async def load_params(self, theta: np.ndarray, version: int) -> str:
        if not self.alive:
            raise WorkerDisconnectedError(f"{self.name} is not connected")
        self._ack = asyncio.get_running_loop().create_future()
        payload = encode_checkpoint(unflatten(self.spec, theta))
        try:
            await send_params(self.writer, payload, version)
        except ConnectionError as e:
            self.alive = False
            raise WorkerDisconnectedError(f"{self.name}: {e}") from e
        ack: ParamsAck = await self._ack
        if ack.version != version:
            raise ProtocolError(f"{self.name} acknowledged version {ack.version}, expected {version}")
        return ack.checksum

    async def run_task(self, task: TaskMessage) -> list[ResultMessage]:
        if not self.alive:
            raise WorkerDisconnectedError(f"{self.name} is not connected")
        loop = asyncio.get_running_loop()
        futures = []
        for p in task.perturbations:
            fut = loop.create_future()
            self._pending[(task.generation, p.seed, p.sign)] = fut
            futures.append(fut)
        try:
            await send_message(self.writer, task)
        except ConnectionError as e:
            self.alive = False
            raise WorkerDisconnectedError(f"{self.name}: {e}") from e
        return list(await asyncio.gather(*futures))

    async def close(self) -> None:
        if self.alive:
            try:
                await send_message(self.writer, ShutdownMessage())
            except ConnectionError:
                pass
        self.alive = False
        self._reader_task.cancel()
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except ConnectionError:
            pass


# ── Pool / coordinator ───────────────────────────────────────────────────────

class WorkerPool:
    """
    Owns generation state on the coordinator: the current θ and its version,
    the set of workers, and the straggler timeout derived from the previous
    generation's median task time.
    """

    def __init__(self, spec: MlpSpec, env_config: EnvConfig, settings: Optional[Settings] = None):
        self.spec = spec
        self.env_config = env_config
        self.settings = settings or get_settings()
        self.workers: list[WorkerHandle] = []
        self.theta: Optional[np.ndarray] = None
        self.version: Optional[int] = None
        self._median_task_s: Optional[float] = None
        self._server: Optional[asyncio.AbstractServer] = None
        self._joined = asyncio.Event()

    # ── membership ────────────────────────────────────────────────────────

    @property
    def live_workers(self) -> list[WorkerHandle]:
        return [w for w in self.workers if w.alive]

    def add_local_workers(self, count: int) -> None:
        make_env = env_factory(self.env_config)
        for i in range(count):
            self.workers.append(LocalWorker(self.spec, make_env, name=f"local-{len(self.workers)}"))

    def add_worker(self, worker: WorkerHandle) -> None:
        self.workers.append(worker)

    async def start_listener(self, host: Optional[str] = None, port: Optional[int] = None) -> int:
        """Accept `serve-worker` connections; returns the bound port (port 0 picks a free one)."""
        host = host or self.settings.worker_host
        port = self.settings.worker_port if port is None else port
        self._server = await asyncio.start_server(self._on_connect, host, port)
        bound = self._server.sockets[0].getsockname()[1]
        logger.info("Coordinator listening for workers on %s:%d", host, bound)
        return bound

    async def _on_connect(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = writer.get_extra_info("peername")
        name = f"remote-{peer[0]}:{peer[1]}" if peer else f"remote-{len(self.workers)}"
        try:
            await send_message(writer, HelloMessage(
                protocol_version=PROTOCOL_VERSION, spec=self.spec, env=self.env_config,
            ))
            ack = await asyncio.wait_for(read_message(reader), self.settings.handshake_timeout_s)
            if not isinstance(ack, HelloAck):
                raise ProtocolError(f"expected hello_ack, got {type(ack).__name__}")
            if not ack.accepted or ack.protocol_version != PROTOCOL_VERSION:
                raise ProtocolError(
                    f"handshake rejected (worker protocol {ack.protocol_version}, ours {PROTOCOL_VERSION}): {ack.detail}"
                )
        except (ProtocolError, asyncio.TimeoutError, ConnectionError) as e:
            logger.warning("Rejected worker %s: %s", name, e)
            writer.close()
            return

        worker = RemoteWorker(reader, writer, self.spec, name)
        if self.theta is not None:
            try:
                await self._load(worker, self.theta, self.version)
            except Exception as e:
                logger.warning("Worker %s failed initial parameter load: %s", name, e)
                await worker.close()
                return
        self.workers.append(worker)
        self._joined.set()
        logger.info("Worker %s joined (%d live)", name, len(self.live_workers))

    async def wait_for_workers(self, count: int, timeout: Optional[float] = None) -> None:
        """Block until `count` remote workers are connected."""
        timeout = self.settings.worker_join_timeout_s if timeout is None else timeout
        deadline = time.monotonic() + timeout
        while sum(isinstance(w, RemoteWorker) and w.alive for w in self.workers) < count:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise GenerationAbortedError(f"fewer than {count} remote workers joined within {timeout:.0f}s")
            self._joined.clear()
            try:
                await asyncio.wait_for(self._joined.wait(), remaining)
            except asyncio.TimeoutError:
                pass

    async def close(self) -> None:
        for w in self.workers:
            await w.close()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    # ── broadcast ─────────────────────────────────────────────────────────

    async def _load(self, worker: WorkerHandle, theta: np.ndarray, version: int) -> str:
        expected = params_checksum(theta)
        checksum = await asyncio.wait_for(worker.load_params(theta, version), self.settings.broadcast_timeout_s)
        if checksum != expected:
            raise ProtocolError(f"{worker.name} checksum {checksum[:12]} != {expected[:12]}")
        return checksum

    async def broadcast_params(self, theta: np.ndarray, version: int) -> dict[str, str]:
        """
        Install θ on every live worker. Workers that fail or time out are
        marked dead and logged; the broadcast succeeds for the rest.
        """
        self.theta = np.array(theta, dtype=np.float64)
        self.version = version
        targets = self.live_workers
        outcomes = await asyncio.gather(
            *(self._load(w, self.theta, version) for w in targets), return_exceptions=True
        )
        acks: dict[str, str] = {}
        for worker, outcome in zip(targets, outcomes):
            if isinstance(outcome, BaseException):
                logger.warning("Worker %s dropped during broadcast of v%d: %s", worker.name, version, outcome)
                await self._mark_dead(worker)
            else:
                acks[worker.name] = outcome
        return acks

    async def _mark_dead(self, worker: WorkerHandle) -> None:
        if worker.alive:
            logger.warning("Marking worker %s dead", worker.name)
        try:
            await worker.close()
        except Exception:
            worker.alive = False

    # ── generation ────────────────────────────────────────────────────────

    def task_timeout(self) -> float:
        if self._median_task_s is None:
            return self.settings.straggler_initial_timeout_s
        return max(self.settings.straggler_min_timeout_s, self.settings.straggler_factor * self._median_task_s)

    def build_tasks(
        self,
        generation: int,
        population: Sequence[Perturbation],
        sigma: float,
        episode_seeds: Mapping[int, list[int]],
    ) -> list[TaskMessage]:
        """One task per noise seed, so mirrored members travel together."""
        by_seed: dict[int, list[Perturbation]] = {}
        for p in population:
            by_seed.setdefault(p.seed, []).append(p)
        return [
            TaskMessage(
                generation=generation,
                perturbations=members,
                sigma=sigma,
                episode_seeds=episode_seeds[seed],
                theta_version=self.version or 0,
            )
            for seed, members in by_seed.items()
        ]

    async def run_generation(
        self,
        generation: int,
        population: Sequence[Perturbation],
        sigma: float,
        episode_seeds: Mapping[int, list[int]],
    ) -> list[ResultMessage]:
        """
        Evaluate the whole population; returns one result per perturbation,
        ordered like `population`. Duplicates from reassignment are resolved
        by first arrival.
        """
        if self.theta is None:
            raise ProtocolError("run_generation called before broadcast_params")
        expected = {(p.seed, p.sign) for p in population}
        if len(expected) != len(population):
            raise ValueError("population contains duplicate (seed, sign) entries")

        results: dict[tuple[int, int], ResultMessage] = {}
        complete = asyncio.Event()
        queue: asyncio.Queue[TaskMessage] = asyncio.Queue()
        for task in self.build_tasks(generation, population, sigma, episode_seeds):
            queue.put_nowait(task)
        timeout = self.task_timeout()
        durations: list[float] = []

        def record(msg: ResultMessage) -> None:
            key = (msg.seed, msg.sign)
            if msg.generation != generation or key not in expected or key in results:
                return
            results[key] = msg
            if len(results) == len(expected):
                complete.set()

        def task_done(task: TaskMessage) -> bool:
            return all((p.seed, p.sign) in results for p in task.perturbations)

        async def next_task() -> Optional[TaskMessage]:
            getter = asyncio.ensure_future(queue.get())
            waiter = asyncio.ensure_future(complete.wait())
            done, _ = await asyncio.wait({getter, waiter}, return_when=asyncio.FIRST_COMPLETED)
            waiter.cancel()
            if getter in done:
                return getter.result()
            getter.cancel()
            return None

        async def drive(worker: WorkerHandle) -> None:
            while worker.alive and not complete.is_set():
                task = await next_task()
                if task is None:
                    return
                if task_done(task):
                    continue
                logger.debug("gen %d: seed %d -> %s", generation, task.perturbations[0].seed, worker.name)
                started = time.monotonic()
                try:
                    msgs = await asyncio.wait_for(worker.run_task(task), timeout)
                except asyncio.TimeoutError:
                    logger.warning(
                        "gen %d: task seed %d timed out on %s after %.1fs; reassigning",
                        generation, task.perturbations[0].seed, worker.name, timeout,
                    )
                    queue.put_nowait(task)
                    continue
                except StaleParametersError as e:
                    logger.warning("gen %d: %s reported stale parameters (%s); re-broadcasting", generation, worker.name, e)
                    queue.put_nowait(task)
                    try:
                        await self._load(worker, self.theta, self.version)
                    except Exception as load_error:
                        logger.warning("Re-broadcast to %s failed: %s", worker.name, load_error)
                        await self._mark_dead(worker)
                        return
                    continue
                except (WorkerDisconnectedError, ProtocolError, ConnectionError) as e:
                    logger.warning("gen %d: worker %s failed (%s); reassigning its task", generation, worker.name, e)
                    queue.put_nowait(task)
                    await self._mark_dead(worker)
                    return
                durations.append(time.monotonic() - started)
                for msg in msgs:
                    record(msg)

        workers = self.live_workers
        for w in workers:
            if isinstance(w, RemoteWorker):
                w.on_result = record
        try:
            await asyncio.gather(*(drive(w) for w in workers))
        finally:
            for w in workers:
                if isinstance(w, RemoteWorker):
                    w.on_result = None

        if not complete.is_set():
            missing = len(expected) - len(results)
            logger.error("Generation %d aborted: no live workers, %d results missing", generation, missing)
            raise GenerationAbortedError(
                f"generation {generation}: all workers dead with {missing} of {len(expected)} results missing"
            )
        if durations:
            self._median_task_s = statistics.median(durations)
        return [results[(p.seed, p.sign)] for p in population]


# ── Worker process ────────────────────────────────────────────────────────────

async def serve_worker(host: str, port: int, max_tasks: Optional[int] = None) -> int:
    """
    Connect to a coordinator and serve tasks until shutdown or EOF.
    `max_tasks` makes the worker drop its connection after that many tasks.
    Returns the number of tasks served.
    """
    reader, writer = await asyncio.open_connection(host, port)
    served = 0
    try:
        hello = await read_message(reader)
        if not isinstance(hello, HelloMessage):
            raise ProtocolError(f"expected hello, got {type(hello).__name__}")
        if hello.protocol_version != PROTOCOL_VERSION:
            await send_message(writer, HelloAck(
                protocol_version=PROTOCOL_VERSION, accepted=False,
                detail=f"unsupported protocol version {hello.protocol_version}",
            ))
            raise ProtocolError(f"coordinator speaks protocol {hello.protocol_version}, worker {PROTOCOL_VERSION}")
        await send_message(writer, HelloAck(protocol_version=PROTOCOL_VERSION, accepted=True))
        spec, make_env = hello.spec, env_factory(hello.env)
        logger.info("Connected to coordinator %s:%d (d=%d, env=%s)", host, port, spec.param_count, hello.env.name.value)

        theta: Optional[np.ndarray] = None
        version: Optional[int] = None
        while True:
            msg = await read_message(reader)
            if msg is None or isinstance(msg, ShutdownMessage):
                break
            if isinstance(msg, ParamsHeader):
                payload = await reader.readexactly(msg.nbytes)
                try:
                    policy = decode_checkpoint(payload)
                except CheckpointFormatError as e:
                    await send_message(writer, ErrorMessage(code="bad_params", detail=str(e)))
                    continue
                if policy.spec != spec:
                    await send_message(writer, ErrorMessage(code="spec_mismatch", detail=f"{policy.spec} != {spec}"))
                    continue
                theta, version = flatten(policy), msg.version
                await send_message(writer, ParamsAck(version=version, checksum=params_checksum(theta)))
            elif isinstance(msg, TaskMessage):
                try:
                    results = await asyncio.to_thread(
                        evaluate_task, msg, theta if theta is not None else np.zeros(spec.param_count),
                        version, spec, make_env,
                    )
                except StaleParametersError:
                    await send_message(writer, ErrorMessage(
                        code="stale_params", generation=msg.generation,
                        seed=msg.perturbations[0].seed, sign=msg.perturbations[0].sign,
                        held_version=version, requested_version=msg.theta_version,
                    ))
                    continue
                for result in results:
                    await send_message(writer, result)
                served += 1
                if max_tasks is not None and served >= max_tasks:
                    logger.info("Served %d tasks, disconnecting", served)
                    break
    except (asyncio.IncompleteReadError, ConnectionError) as e:
        logger.warning("Coordinator connection lost: %s", e)
    finally:
        writer.close()
        try:
            await writer.wait_closed()
        except ConnectionError:
            pass
    return served


def run_worker(host: str, port: int, max_tasks: Optional[int] = None) -> int:
    return asyncio.run(serve_worker(host, port, max_tasks))
