"""asyncio network processes around the passive controller and worker cores.

Each process owns its core from the event loop thread only, so every
mutation is serialized without locks. Device stages run as separate tasks
and report back to the owner when they finish. Connections are pipelined:
every request carries an ``id`` that its response echoes.
"""
from __future__ import annotations

import asyncio
import base64
import itertools
import logging
import time

import numpy as np

from .controller import Action, Controller, WorkerView, transfer_view
from .errors import InferShareError, InsufficientCapacity, ManifestError, ModelUnavailable, UnknownModel, ValidationFailed
from .executor import Tensor, execute_model
from .lifecycle import InferenceRequest
from .manifest import parse_manifest, serialize_manifest
from .predictor import DeviceProfile
from .protocol import (
    PROTOCOL_VERSION,
    Frame,
    FrameTooLarge,
    Kind,
    ProtocolError,
    error_payload,
    read_frame,
    write_frame,
)
from .worker import EXECUTE, TRANSFER, Stage, Worker

log = logging.getLogger(__name__)


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address {text!r} is not host:port")
    return host or "127.0.0.1", int(port)


def encode_tensor(tensor: Tensor) -> dict:
    return {"shape": list(tensor.shape),
            "data": base64.b64encode(tensor.values.astype("<f8").tobytes()).decode("ascii")}


def decode_tensor(doc: dict) -> Tensor:
    raw = base64.b64decode(doc["data"], validate=True)
    return Tensor(tuple(doc["shape"]), np.frombuffer(raw, dtype="<f8"))


class RemoteError(InferShareError):
    """An ERROR frame from a peer, re-raised on the caller's side."""

    def __init__(self, payload: dict):
        super().__init__(f"{payload.get('error')}: {payload.get('message', '')}")
        self.error = payload.get("error", "Error")
        self.payload = payload


class Connection:
    """Client side of one pipelined connection."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.reader = reader
        self.writer = writer
        self._ids = itertools.count(1)
        self._waiting: dict[int, asyncio.Future] = {}
        self._lock = asyncio.Lock()
        self._pump = asyncio.ensure_future(self._read_loop())

    @classmethod
    async def open(cls, address: str) -> "Connection":
        host, port = parse_address(address)
        reader, writer = await asyncio.open_connection(host, port)
        return cls(reader, writer)

    async def _read_loop(self) -> None:
        try:
            while True:
                frame = await read_frame(self.reader)
                fut = self._waiting.pop(frame.payload.get("id"), None)
                if fut is not None and not fut.done():
                    fut.set_result(frame)
        except (asyncio.IncompleteReadError, ConnectionError, ProtocolError) as exc:
            for fut in self._waiting.values():
                if not fut.done():
                    fut.set_exception(ConnectionError(f"connection closed: {exc}"))
            self._waiting.clear()

    async def call(self, kind: Kind, payload: dict | None = None, timeout: float | None = None) -> dict:
        rid = next(self._ids)
        fut = asyncio.get_running_loop().create_future()
        self._waiting[rid] = fut
        async with self._lock:
            await write_frame(self.writer, kind, {"v": PROTOCOL_VERSION, **(payload or {}), "id": rid})
        frame = await asyncio.wait_for(fut, timeout)
        if frame.kind == Kind.ERROR:
            raise RemoteError(frame.payload)
        return frame.payload

    async def close(self) -> None:
        self._pump.cancel()
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except ConnectionError:
            pass


class _Service:
    """Accept loop shared by both processes: one task per request, replies keyed by id."""

    def __init__(self):
        self._t0 = time.monotonic()
        self._server: asyncio.AbstractServer | None = None
        self._tasks: set[asyncio.Task] = set()
        self.address = ""

    def now(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0

    async def listen(self, host: str, port: int) -> None:
        self._server = await asyncio.start_server(self._serve, host, port)
        sock_host, sock_port = self._server.sockets[0].getsockname()[:2]
        self.address = f"{sock_host}:{sock_port}"

    def spawn(self, coro) -> asyncio.Task:
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    async def _serve(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        lock = asyncio.Lock()

        async def reply(kind: Kind, payload: dict) -> None:
            async with lock:
                try:
                    await write_frame(writer, kind, payload)
                except ConnectionError:
                    pass

        try:
            while True:
                try:
                    frame = await read_frame(reader)
                except FrameTooLarge as exc:
                    # the body was never read, so the stream cannot be resynchronised
                    await reply(Kind.ERROR, error_payload("FrameTooLarge", str(exc)))
                    break
                except ProtocolError as exc:
                    await reply(Kind.ERROR, error_payload(type(exc).__name__, str(exc)))
                    continue
                self.spawn(self._answer(frame, reply))
        except (asyncio.IncompleteReadError, ConnectionError):
            pass
        finally:
            writer.close()

    async def _answer(self, frame: Frame, reply) -> None:
        rid = frame.payload.get("id")
        try:
            result = await self.handle(frame)
            await reply(Kind.OK, {"v": PROTOCOL_VERSION, **(result or {}), "id": rid})
        except RemoteError as exc:
            await reply(Kind.ERROR, {**exc.payload, "id": rid})
        except (InferShareError, KeyError, TypeError, ValueError) as exc:
            name = type(exc).__name__ if isinstance(exc, InferShareError) else "BadRequest"
            await reply(Kind.ERROR, error_payload(name, str(exc), id=rid))
        except Exception as exc:  # keep serving after a handler bug
            log.exception("handler failed")
            await reply(Kind.ERROR, error_payload("InternalError", str(exc), id=rid))

    async def handle(self, frame: Frame) -> dict:
        raise NotImplementedError

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for task in list(self._tasks):
            task.cancel()


class WorkerServer(_Service):
    """Hosts many tenants' models on one device; executes with the reference interpreter.

    Virtual devices hold each stage for its modelled duration, so observed
    latency tracks the predictor; a ``cpu-reference`` device is timed as it
    actually ran.
    """

    def __init__(self, worker_id: str, device: DeviceProfile, host_cache_bytes: int, *,
                 controller: str | None = None, heartbeat_ms: float = 500.0, **worker_options):
        super().__init__()
        self.core = Worker(worker_id, device, host_cache_bytes, executor="reference", **worker_options)
        self.controller = controller
        self.heartbeat_ms = heartbeat_ms
        self._futures: dict[str, asyncio.Future] = {}
        self._inputs: dict[str, Tensor] = {}
        self._exec_busy = 0.0
        self._seq = itertools.count(1)
        self._control: Connection | None = None

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> None:
        await self.listen(host, port)
        if self.controller:
            self._control = await Connection.open(self.controller)
            await self._control.call(Kind.REGISTER_WORKER, {
                "worker_id": self.core.worker_id, "address": self.address,
                "device": self.core.device.to_document(),
                "host_cache_bytes": self.core.cache.host.capacity,
            })
            self.spawn(self._heartbeats())

    async def _heartbeats(self) -> None:
        while True:
            await asyncio.sleep(self.heartbeat_ms / 1000.0)
            load, self._exec_busy = self._exec_busy / self.heartbeat_ms, 0.0
            try:
                await self._control.call(Kind.HEARTBEAT, {
                    "worker_id": self.core.worker_id, "load": min(load, 1.0),
                    "pending_ms": self.core.pending_work_ms(self.now()),
                    "device_resident": sorted(self.core.cache.device.entries),
                }, timeout=self.heartbeat_ms / 1000.0 * 4)
            except (ConnectionError, asyncio.TimeoutError, RemoteError) as exc:
                log.warning("heartbeat failed: %s", exc)

    async def handle(self, frame: Frame) -> dict:
        p = frame.payload
        if frame.kind == Kind.LOAD_MODEL:
            manifest = parse_manifest(p["manifest"])
            self.core.load_model(p["model_id"], manifest, self.now())
            return {"model_id": p["model_id"]}
        if frame.kind == Kind.EVICT_MODEL:
            removed = self.core.evict_model(p["model_id"], self.now())
            return {"model_id": p["model_id"], "removed": removed}
        if frame.kind == Kind.GET_STATS:
            return {"stats": self.core.stats(self.now())}
        if frame.kind == Kind.HEARTBEAT:
            return {"worker_id": self.core.worker_id}
        if frame.kind == Kind.INFER:
            return await self._infer(p)
        raise RemoteError(error_payload("UnsupportedRequest", f"worker does not serve {frame.kind.name}"))

    async def _infer(self, p: dict) -> dict:
        now = self.now()
        tensor = decode_tensor(p["input"]) if p.get("input") is not None else None
        batch = tensor.batch if tensor is not None else int(p.get("batch", 1))
        rid = p.get("request_id") or f"{self.core.worker_id}-{next(self._seq)}"
        req = InferenceRequest(rid, p.get("tenant", "anonymous"), p["model_id"], batch, now,
                               p.get("deadline_ms"))
        if not self.core.registered(req.model_id):
            raise UnknownModel(req.model_id)
        adm = self.core.admit(req, now)
        if not adm.admitted:
            raise RemoteError(error_payload(adm.reason, f"{rid} rejected", request_id=rid,
                                            estimate=adm.estimate.to_document()))
        fut = asyncio.get_running_loop().create_future()
        self._futures[rid] = fut
        if tensor is not None:
            self._inputs[rid] = tensor
        self._pump()
        rec = await fut
        doc = {
            "request_id": rid, "worker_id": rec.worker_id, "residency": rec.residency,
            "latency_ms": rec.latency_ms, "estimate_ms": rec.estimate_ms, "exec_ms": rec.exec_ms,
        }
        if rec.output is not None:
            doc["output"] = encode_tensor(rec.output)
        return doc

    def _pump(self) -> None:
        for stage in self.core.dispatch(self.now()):
            self.spawn(self._run(stage))

    async def _run(self, stage: Stage) -> None:
        outputs = {}
        if stage.resource == TRANSFER:
            await asyncio.sleep(stage.predicted_ms / 1000.0)
        else:
            t0 = time.monotonic()
            manifest = self.core.models[stage.model_id]
            weights = self.core.weights[stage.model_id]
            for rid in stage.request_ids:
                x = self._inputs.pop(rid, None)
                if x is not None:
                    outputs[rid] = await asyncio.to_thread(execute_model, manifest, weights, x)
            if self.core.device.kind != "cpu-reference":
                left = stage.analytic_ms / 1000.0 - (time.monotonic() - t0)
                if left > 0:
                    await asyncio.sleep(left)
        now = self.now()
        if stage.resource == EXECUTE:
            self._exec_busy += now - stage.start
        for rec in self.core.complete(stage, now, outputs=outputs):
            fut = self._futures.pop(rec.request_id, None)
            if fut is not None and not fut.done():
                fut.set_result(rec)
        self._pump()

    async def close(self) -> None:
        if self._control is not None:
            await self._control.close()
        await super().close()


class ControllerServer(_Service):
    """Registry, placement, failure detection and the request router in one process."""

    def __init__(self, controller: Controller | None = None, *, demand_window_ms: float = 1000.0,
                 autoscale: bool = True):
        super().__init__()
        self.core = controller or Controller()
        self.demand_window_ms = demand_window_ms
        self.autoscale = autoscale
        self.peers: dict[str, Connection] = {}
        self.addresses: dict[str, str] = {}
        self.views: dict[str, dict] = {}

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> None:
        await self.listen(host, port)
        self.spawn(self._monitor())
        self.spawn(self._demand())

    async def _monitor(self) -> None:
        while True:
            await asyncio.sleep(self.core.heartbeat_ms / 1000.0)
            now = self.now()
            for wid in self.core.check_heartbeats(now):
                log.warning("worker %s missed heartbeats; re-placing its replicas", wid)
                await self._drop_peer(wid)
                await self._run_actions(self.core.handle_worker_failure(wid, now))

    async def _demand(self) -> None:
        while True:
            await asyncio.sleep(self.demand_window_ms / 1000.0)
            await self._run_actions(self.core.demand_tick(self.demand_window_ms, self.now(),
                                                          autoscale=self.autoscale))

    async def _drop_peer(self, worker_id: str) -> None:
        peer = self.peers.pop(worker_id, None)
        if peer is not None:
            await peer.close()

    async def _run_actions(self, actions: list[Action]) -> None:
        for act in actions:
            peer = self.peers.get(act.worker_id)
            if peer is None:
                continue
            try:
                if act.kind == "load":
                    entry = self.core.registry.get(act.model_id)
                    if entry is None:
                        continue
                    await peer.call(Kind.LOAD_MODEL, {"model_id": act.model_id,
                                                      "manifest": serialize_manifest(entry.manifest)})
                    await self._run_actions(self.core.ack_load(act.worker_id, act.model_id, self.now()))
                elif act.kind == "evict":
                    await peer.call(Kind.EVICT_MODEL, {"model_id": act.model_id})
            except (ConnectionError, RemoteError) as exc:
                log.warning("%s %s on %s failed: %s", act.kind, act.model_id, act.worker_id, exc)

    async def handle(self, frame: Frame) -> dict:
        p = frame.payload
        kind = frame.kind
        if kind == Kind.REGISTER_WORKER:
            wid = p["worker_id"]
            await self._drop_peer(wid)
            self.core.register_worker(wid, DeviceProfile.from_document(p["device"]),
                                      int(p["host_cache_bytes"]), self.now())
            self.addresses[wid] = p["address"]
            self.peers[wid] = await Connection.open(p["address"])
            return {"worker_id": wid}
        if kind == Kind.HEARTBEAT:
            wid = p["worker_id"]
            if wid not in self.core.workers or self.core.workers[wid].failed:
                raise RemoteError(error_payload("UnknownWorker", f"{wid} must register again"))
            self.core.heartbeat(wid, self.now(), p.get("load"))
            self.views[wid] = {"pending_ms": float(p.get("pending_ms", 0.0)),
                               "device_resident": set(p.get("device_resident", ()))}
            return {}
        if kind == Kind.UPLOAD_MODEL:
            return await self._upload(p)
        if kind == Kind.DELETE_MODEL:
            actions = self.core.delete_model(p["model_id"])
            await self._run_actions(actions)
            return {"model_id": p["model_id"]}
        if kind == Kind.LIST_MODELS:
            return {"models": self.core.describe()["models"]}
        if kind == Kind.GET_STATS:
            doc = self.core.describe()
            doc["worker_stats"] = {}
            for wid, peer in sorted(self.peers.items()):
                try:
                    doc["worker_stats"][wid] = (await peer.call(Kind.GET_STATS, timeout=2.0))["stats"]
                except (ConnectionError, asyncio.TimeoutError, RemoteError) as exc:
                    doc["worker_stats"][wid] = {"error": str(exc)}
            return doc
        if kind == Kind.DEMAND_REPORT:
            self.core.record_demand(p["model_id"], int(p.get("count", 1)))
            return {}
        if kind == Kind.INFER:
            return await self._infer(p)
        raise RemoteError(error_payload("UnsupportedRequest", f"controller does not serve {kind.name}"))

    async def _upload(self, p: dict) -> dict:
        try:
            manifest = parse_manifest(p["manifest"])
        except ManifestError as exc:
            raise RemoteError(error_payload("ValidationFailed", str(exc), findings=[str(exc)]))
        try:
            model_id, actions = self.core.upload_model(p.get("tenant", "anonymous"), manifest,
                                                       p.get("model_id"), replicas=p.get("replicas"),
                                                       now=self.now())
        except ValidationFailed as exc:
            raise RemoteError(error_payload("ValidationFailed", "manifest rejected",
                                            findings=[str(f) for f in exc.findings]))
        except InsufficientCapacity as exc:
            raise RemoteError(error_payload("InsufficientCapacity", str(exc)))
        await self._run_actions(actions)
        return {"model_id": model_id, "replicas": list(self.core.routing.replicas(model_id))}

    async def _infer(self, p: dict) -> dict:
        mid = p["model_id"]
        entry = self.core.registry.get(mid)
        if entry is None:
            raise ModelUnavailable(mid)
        views = {}
        for wid in self.core.routing.replicas(mid):
            v = self.views.get(wid, {"pending_ms": 0.0, "device_resident": set()})
            views[wid] = WorkerView(v["pending_ms"], mid in v["device_resident"],
                                    transfer_view(entry.manifest, self.core.workers[wid].device))
        order = self.core.route(mid, views)
        self.core.record_demand(mid)
        last = None
        for wid in order[:2]:
            peer = self.peers.get(wid)
            if peer is None:
                continue
            try:
                return await peer.call(Kind.INFER, {k: v for k, v in p.items() if k not in ("id", "v")})
            except RemoteError as exc:
                last = exc
                if exc.error != "WouldMissDeadline":
                    raise
        if last is not None:
            raise last
        raise ModelUnavailable(f"{mid}: no reachable replica")

    async def close(self) -> None:
        for wid in list(self.peers):
            await self._drop_peer(wid)
        await super().close()

