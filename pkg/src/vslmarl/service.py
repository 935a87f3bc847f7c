"""Decision-support service: sensor ingestion, tick loop, command
publication and decision logging.

Wire protocol: newline-delimited JSON over TCP, one object per line with a
``type`` tag and ``protocol_version``. Client -> server messages:
``sensor_update``, ``subscribe``, ``unsubscribe``, ``health_query``,
``command_rejected``, ``end_of_stream``. Server -> client messages:
``speed_limit_command``, ``health_reply``, ``subscribed``,
``end_of_stream`` (after the final flush) and ``error``.

The tick clock is either driven by the data (a tick at boundary T fires
once a reading newer than T arrives, consuming everything stamped <= T) or
by the wall clock. Serve and replay share ``DecisionEngine``, so identical
streams give identical decision logs.
"""

from __future__ import annotations

import asyncio
import csv
import datetime as dt
import json
import logging
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

from .corridor import Corridor, Measurement
from .guards import (FailSafeState, GuardConfig, Policy, Stage, StageDecision,
                     pipeline_step)

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
STALE_TICKS = 3
FREE_FLOW_SPEED = 70.0
LOG_FIELDS = ("tick", "gantry_id", "observation", "policy_action", "after_sm", "after_mslc",
              "final", "attribution", "interpolated")
CSV_HEADER = ["sensor_id", "timestamp", "speed", "occupancy"]


class ProtocolError(ValueError):
    pass


class ReplayError(ValueError):
    pass


# interpolation ----------------------------------------------------------

@dataclass
class SensorHistory:
    """Last valid reading per sensor and the tick it arrived in."""

    last_valid: dict[str, tuple[Measurement, int]] = field(default_factory=dict)


def interpolate_missing(corridor: Corridor, fresh: Mapping[str, Measurement],
                        history: SensorHistory, tick_index: int, now: float,
                        stale_ticks: int = STALE_TICKS) -> dict[str, Measurement]:
    """Fill every corridor sensor for this tick.

    Order of preference: a fresh valid reading; the last valid reading if
    at most ``stale_ticks`` old; the mean of the nearest upstream and
    downstream sensors that have one of the former; free-flow defaults.
    """
    order = [s.id for s in corridor.sensor_order()]
    direct: dict[str, Measurement] = {}
    for sid in order:
        m = fresh.get(sid)
        if m is not None and m.valid:
            direct[sid] = Measurement(sid, now, m.speed, m.occupancy)
            history.last_valid[sid] = (m, tick_index)
            continue
        held = history.last_valid.get(sid)
        if held is not None and tick_index - held[1] <= stale_ticks:
            direct[sid] = Measurement(sid, now, held[0].speed, held[0].occupancy, interpolated=True)

    out = dict(direct)
    for pos, sid in enumerate(order):
        if sid in out:
            continue
        near = []
        for rng in (range(pos - 1, -1, -1), range(pos + 1, len(order))):
            for p in rng:
                if order[p] in direct:
                    near.append(direct[order[p]])
                    break
        if near:
            speed = sum(m.speed for m in near) / len(near)
            occ = sum(m.occupancy for m in near) / len(near)
        else:
            speed, occ = FREE_FLOW_SPEED, 0.0
        out[sid] = Measurement(sid, now, speed, occ, interpolated=True)
    return out


# decision log -------------------------------------------------------------

def decision_record(tick: float, d: StageDecision) -> dict:
    return {
        "tick": tick,
        "gantry_id": d.gantry_id,
        "observation": list(d.observation) if d.observation is not None else None,
        "policy_action": d.policy_action,
        "after_sm": d.after_sm,
        "after_mslc": d.after_mslc,
        "final": d.final,
        "attribution": Stage(d.attribution).value,
        "interpolated": d.interpolated,
    }


def _day(ts: float) -> str:
    return dt.datetime.fromtimestamp(ts, tz=dt.timezone.utc).strftime("%Y-%m-%d")


class DecisionLog:
    """Append-only JSON-lines log rotated by the UTC day of the tick.

    With ``directory=None`` records are only kept in memory.
    """

    def __init__(self, directory=None, keep: bool = True):
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self.keep = keep
        self.records: list[dict] = []
        self._fh = None
        self._day = None

    def append(self, record: dict):
        if self.keep:
            self.records.append(record)
        if self.directory is None:
            return
        day = _day(record["tick"])
        if day != self._day:
            if self._fh:
                self._fh.close()
            self._fh = open(self.directory / f"decisions-{day}.jsonl", "a")
            self._day = day
        self._fh.write(json.dumps(record) + "\n")

    def flush(self):
        if self._fh:
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None
            self._day = None


def read_decision_log(path) -> list[dict]:
    """Records from one JSON-lines file or every ``decisions-*.jsonl`` in a directory."""
    path = Path(path)
    files = sorted(path.glob("decisions-*.jsonl")) if path.is_dir() else [path]
    out = []
    for f in files:
        with open(f) as fh:
            out.extend(json.loads(line) for line in fh if line.strip())
    return out


# engine -------------------------------------------------------------------

def command_message(tick: float, d: StageDecision) -> dict:
    return {"type": "speed_limit_command", "protocol_version": PROTOCOL_VERSION,
            "gantry_id": d.gantry_id, "timestamp": tick, "limit": d.final,
            "attribution": Stage(d.attribution).value}


class DecisionEngine:
    """One logical decision loop for one corridor.

    Readings are buffered until the next tick; a tick takes the buffer as an
    immutable snapshot, so readings arriving later only reach later ticks.
    """

    def __init__(self, corridor: Corridor, policy: Policy, config: GuardConfig = GuardConfig(),
                 tick_seconds: float = 30.0, decision_log: DecisionLog | None = None,
                 stale_ticks: int = STALE_TICKS):
        if tick_seconds <= 0:
            raise ValueError("tick_seconds must be positive")
        self.corridor = corridor
        self.policy = policy
        self.config = config
        self.period = float(tick_seconds)
        self.log = decision_log if decision_log is not None else DecisionLog()
        self.stale_ticks = stale_ticks
        self.sensor_ids = {s.id for s in corridor.sensors}
        self.history = SensorHistory()
        self.failsafe = FailSafeState()
        self.pending: list[Measurement] = []
        self.next_tick: float | None = None
        self.tick_count = 0
        self.errors = 0
        self.rejections = 0
        self.last_latency = 0.0
        self.posted: dict[str, int] = {}
        self._previous_posted: dict[str, int] = {}

    def _boundary_at_or_after(self, t: float) -> float:
        return math.ceil(t / self.period - 1e-9) * self.period

    def ingest(self, m: Measurement) -> list[list[dict]]:
        """Buffer a reading, first firing any tick it proves complete."""
        if m.sensor_id not in self.sensor_ids:
            raise ProtocolError(f"unknown sensor {m.sensor_id!r}")
        fired = []
        if self.next_tick is None:
            self.next_tick = self._boundary_at_or_after(m.timestamp)
        while m.timestamp > self.next_tick + 1e-9:
            fired.append(self._fire())
        self.pending.append(m)
        return fired

    def advance_to(self, t: float) -> list[list[dict]]:
        """Fire every tick boundary <= t (wall clock or simulation clock)."""
        if self.next_tick is None:
            self.next_tick = self._boundary_at_or_after(t)
        fired = []
        while self.next_tick <= t + 1e-9:
            fired.append(self._fire())
        return fired

    def flush(self) -> list[list[dict]]:
        """End of stream: decide on whatever is still buffered."""
        if self.pending and self.next_tick is not None:
            return [self._fire()]
        return []

    def _fire(self) -> list[dict]:
        now = self.next_tick
        cmds = self.tick(now)
        self.next_tick = now + self.period
        return cmds

    def tick(self, now: float) -> list[dict]:
        start = time.perf_counter()
        snapshot = [m for m in self.pending if m.timestamp <= now + 1e-9]
        self.pending = [m for m in self.pending if m.timestamp > now + 1e-9]
        fresh: dict[str, Measurement] = {}
        for m in sorted(snapshot, key=lambda m: m.timestamp):  # stable: arrival order on ties
            if m.valid:
                fresh[m.sensor_id] = m
        meas = interpolate_missing(self.corridor, fresh, self.history, self.tick_count, now,
                                   self.stale_ticks)
        decisions = pipeline_step(self.corridor, meas, self.policy, self.config, self.failsafe)
        self.errors += sum(1 for d in decisions if d.missing_ticks)
        cmds = []
        self._previous_posted = dict(self.posted)
        for d in decisions:
            self.log.append(decision_record(now, d))
            self.posted[d.gantry_id] = d.final
            cmds.append(command_message(now, d))
        self.log.flush()
        self.tick_count += 1
        self.last_latency = time.perf_counter() - start
        return cmds

    def reject(self, gantry_id: str, reason: str = ""):
        """The receiving system refused a command: keep the previous limit."""
        self.rejections += 1
        prev = self._previous_posted.get(gantry_id)
        log.warning("command for %s rejected (%s); keeping %s", gantry_id, reason, prev)
        if prev is not None:
            self.posted[gantry_id] = prev
            self.failsafe.last_final[gantry_id] = prev

    def health(self) -> dict:
        return {"type": "health_reply", "protocol_version": PROTOCOL_VERSION,
                "tick_count": self.tick_count,
                "last_tick_latency_ms": round(self.last_latency * 1000.0, 3),
                "errors": self.errors, "rejections": self.rejections,
                "next_tick": self.next_tick}


# messages ------------------------------------------------------------------

def parse_sensor_update(msg: Mapping) -> Measurement:
    try:
        sid = str(msg["sensor_id"])
        ts = float(msg["timestamp"])
        speed = msg.get("speed")
        occ = msg.get("occupancy")
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"bad sensor_update: {exc}") from None
    if speed is None or occ is None:
        return Measurement(sid, ts, math.nan, math.nan, valid=False)
    try:
        return Measurement(sid, ts, float(speed), float(occ))
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"bad sensor_update: {exc}") from None


def sensor_update_message(m: Measurement) -> dict:
    return {"type": "sensor_update", "protocol_version": PROTOCOL_VERSION,
            "sensor_id": m.sensor_id, "timestamp": m.timestamp,
            "speed": m.speed if m.valid else None,
            "occupancy": m.occupancy if m.valid else None}


def encode(msg: Mapping) -> bytes:
    return (json.dumps(msg) + "\n").encode("utf-8")


# recordings ----------------------------------------------------------------

def read_sensor_csv(path) -> Iterator[Measurement]:
    """Stream measurements from a recording; schema errors carry the line number."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        if [h.strip() for h in header] != CSV_HEADER:
            raise ReplayError(f"line 1: expected header {','.join(CSV_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 4:
                raise ReplayError(f"line {line}: expected 4 fields, got {len(row)}")
            sid, ts, speed, occ = row
            try:
                ts_f = float(ts)
                if speed.strip() == "" or occ.strip() == "":
                    yield Measurement(sid, ts_f, math.nan, math.nan, valid=False)
                else:
                    yield Measurement(sid, ts_f, float(speed), float(occ))
            except ValueError as exc:
                raise ReplayError(f"line {line}: {exc}") from None


def replay(recording, corridor: Corridor, policy: Policy, config: GuardConfig = GuardConfig(),
           tick_seconds: float = 30.0, log_dir=None) -> tuple[list[dict], dict]:
    """Open-loop run of the tick pipeline over a recorded stream."""
    engine = DecisionEngine(corridor, policy, config, tick_seconds, DecisionLog(log_dir))
    source = read_sensor_csv(recording) if isinstance(recording, (str, Path)) else recording
    try:
        for m in source:
            try:
                engine.ingest(m)
            except ProtocolError as exc:
                raise ReplayError(str(exc)) from None
        engine.flush()
    finally:
        engine.log.close()
    records = engine.log.records
    return records, summarize(records)


def summarize(records: Iterable[dict]) -> dict:
    records = list(records)
    counts = Counter(r["attribution"] for r in records)
    return {"records": len(records), "ticks": len({r["tick"] for r in records}),
            "attribution": dict(sorted(counts.items())),
            "interpolated": sum(1 for r in records if r["interpolated"])}


# TCP server -----------------------------------------------------------------

class DSSServer:
    """asyncio server around a DecisionEngine."""

    def __init__(self, engine: DecisionEngine, host: str = "127.0.0.1", port: int = 0,
                 clock: str = "data", queue_size: int = 10000):
        if clock not in ("data", "wall"):
            raise ValueError("clock must be 'data' or 'wall'")
        self.engine = engine
        self.host = host
        self.port = port
        self.clock = clock
        self.queue_size = queue_size
        self.subscribers: dict[asyncio.StreamWriter, asyncio.Queue] = {}
        self._tasks: set[asyncio.Task] = set()
        self._server: asyncio.AbstractServer | None = None

    async def start(self):
        self._server = await asyncio.start_server(self._handle, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        if self.clock == "wall":
            self._spawn(self._wall_clock())
        return self

    def _spawn(self, coro):
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    async def serve_forever(self):
        if self._server is None:
            await self.start()
        async with self._server:
            await self._server.serve_forever()

    async def stop(self):
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for task in list(self._tasks):
            task.cancel()
        self.engine.log.close()

    async def _wall_clock(self):
        while True:
            now = time.time()
            if self.engine.next_tick is None:
                self.engine.advance_to(now)
            wait = max(0.0, self.engine.next_tick - now)
            await asyncio.sleep(wait)
            self._publish(self.engine.advance_to(time.time()))

    def _publish(self, fired: list[list[dict]]):
        for cmds in fired:
            for cmd in cmds:
                self._broadcast(cmd)

    def _broadcast(self, msg: dict):
        for writer, queue in list(self.subscribers.items()):
            try:
                queue.put_nowait(msg)
            except asyncio.QueueFull:
                log.warning("subscriber queue full, dropping subscriber")
                self._drop(writer)

    def _drop(self, writer):
        queue = self.subscribers.pop(writer, None)
        if queue is not None:
            queue.put_nowait(None)

    async def _pump(self, writer: asyncio.StreamWriter, queue: asyncio.Queue):
        try:
            while True:
                msg = await queue.get()
                if msg is None:
                    break
                writer.write(encode(msg))
                await writer.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            self.subscribers.pop(writer, None)

    async def _reply(self, writer, msg: dict):
        try:
            writer.write(encode(msg))
            await writer.drain()
        except ConnectionError:
            pass

    def _error(self, text: str) -> dict:
        return {"type": "error", "protocol_version": PROTOCOL_VERSION, "error": text}

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        try:
            while True:
                line = await reader.readline()
                if not line:
                    break
                if not line.strip():
                    continue
                try:
                    msg = json.loads(line)
                    if not isinstance(msg, dict) or "type" not in msg:
                        raise ProtocolError("message must be an object with a 'type'")
                    reply = self._dispatch(msg, writer)
                except (ValueError, ProtocolError) as exc:
                    reply = self._error(str(exc))
                except Exception as exc:  # keep the connection and the loop alive
                    log.exception("failed to handle message")
                    self.engine.errors += 1
                    reply = self._error(f"internal error: {exc}")
                if reply is not None:
                    await self._reply(writer, reply)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            self._drop(writer)
            writer.close()

    def _dispatch(self, msg: dict, writer) -> dict | None:
        kind = msg["type"]
        if kind == "sensor_update":
            m = parse_sensor_update(msg)
            if self.clock == "data":
                self._publish(self.engine.ingest(m))
            else:
                if m.sensor_id not in self.engine.sensor_ids:
                    raise ProtocolError(f"unknown sensor {m.sensor_id!r}")
                self.engine.pending.append(m)
            return None
        if kind == "subscribe":
            if writer not in self.subscribers:
                queue: asyncio.Queue = asyncio.Queue(self.queue_size)
                self.subscribers[writer] = queue
                self._spawn(self._pump(writer, queue))
            return {"type": "subscribed", "protocol_version": PROTOCOL_VERSION}
        if kind == "unsubscribe":
            self._drop(writer)
            return None
        if kind == "health_query":
            return {**self.engine.health(), "subscribers": len(self.subscribers)}
        if kind == "command_rejected":
            self.engine.reject(str(msg.get("gantry_id")), str(msg.get("reason", "")))
            return None
        if kind == "end_of_stream":
            self._publish(self.engine.flush())
            notice = {"type": "end_of_stream", "protocol_version": PROTOCOL_VERSION,
                      "tick_count": self.engine.tick_count}
            self._broadcast(notice)
            # subscribers get the notice in order behind the commands
            return None if writer in self.subscribers else notice
        raise ProtocolError(f"unknown message type {kind!r}")


def serve(corridor: Corridor, policy: Policy, host: str = "127.0.0.1", port: int = 8765,
          config: GuardConfig = GuardConfig(), tick_seconds: float = 30.0, log_dir=None,
          clock: str = "wall"):
    """Run the service until interrupted."""
    engine = DecisionEngine(corridor, policy, config, tick_seconds, DecisionLog(log_dir, keep=False))
    server = DSSServer(engine, host, port, clock)

    async def main():
        await server.start()
        log.info("serving on %s:%d (%s clock)", host, server.port, clock)
        try:
            await server.serve_forever()
        finally:
            await server.stop()

    asyncio.run(main())
