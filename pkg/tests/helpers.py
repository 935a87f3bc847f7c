import asyncio
import json
import math

import numpy as np

from vslmarl.corridor import SPEED_LIMITS, Corridor, Gantry, Measurement, Sensor
from vslmarl.service import DecisionEngine, DSSServer, sensor_update_message


def make_corridor(n=3, maxima=None, direction="decreasing", start=60.0, spacing=0.5,
                  sensor_offset=0.1, default_max=70):
    """Toy corridor; G1 is the most downstream gantry."""
    sign = 1 if direction == "increasing" else -1
    maxima = maxima or [default_max] * n
    gantries, sensors = [], []
    for i in range(n):
        mp = round(start - sign * spacing * i, 6)
        gantries.append(Gantry(f"G{i + 1}", mp, direction, maxima[i]))
        sensors.append(Sensor(f"S{i + 1}", round(mp + sign * sensor_offset, 6), direction))
    return Corridor.build(gantries, sensors, direction, default_max)


def snapshot(corridor, speed=70.0, occ=0.02, ts=0.0):
    """Same reading at every sensor; speed/occ may also be per-sensor lists."""
    n = len(corridor.sensors)
    speeds = speed if isinstance(speed, (list, tuple, np.ndarray)) else [speed] * n
    occs = occ if isinstance(occ, (list, tuple, np.ndarray)) else [occ] * n
    return {s.id: Measurement(s.id, ts, float(v), float(o))
            for s, v, o in zip(corridor.sensors, speeds, occs)}


def missing(sensor_id, ts=0.0):
    return Measurement(sensor_id, ts, math.nan, math.nan, valid=False)


def onehot_logits(limit):
    z = np.full(len(SPEED_LIMITS), -5.0)
    z[SPEED_LIMITS.index(limit)] = 5.0
    return z


def constant_policy(limit):
    def policy(obs, i):
        return onehot_logits(limit)
    return policy


def per_agent_policy(limits):
    """Agent i (0 = most downstream) prefers limits[i]."""
    def policy(obs, i):
        return onehot_logits(limits[i])
    return policy



async def send_msg(writer, msg):
    writer.write((json.dumps(msg) + "\n").encode())
    await writer.drain()


async def recv_msg(reader, timeout=10.0):
    line = await asyncio.wait_for(reader.readline(), timeout)
    return json.loads(line) if line else None


def stream_via_tcp(corridor, policy, measurements, tick_seconds=30.0, n_subscribers=1):
    """Mock peer: subscribers connect, a feeder streams sensor_update
    messages then end_of_stream. Returns (server log records, per-subscriber
    command lists)."""
    async def main():
        engine = DecisionEngine(corridor, policy, tick_seconds=tick_seconds)
        server = DSSServer(engine, port=0, clock="data")
        await server.start()
        subs = []
        for _ in range(n_subscribers):
            r, w = await asyncio.open_connection("127.0.0.1", server.port)
            await send_msg(w, {"type": "subscribe"})
            assert (await recv_msg(r))["type"] == "subscribed"
            subs.append((r, w))
        fr, fw = await asyncio.open_connection("127.0.0.1", server.port)
        for m in measurements:
            fw.write((json.dumps(sensor_update_message(m)) + "\n").encode())
        await fw.drain()
        await send_msg(fw, {"type": "end_of_stream"})
        assert (await recv_msg(fr, timeout=60))["type"] == "end_of_stream"
        received = []
        for r, w in subs:
            cmds = []
            while True:
                msg = await recv_msg(r, timeout=60)
                if msg["type"] == "end_of_stream":
                    break
                cmds.append(msg)
            received.append(cmds)
            w.close()
        fw.close()
        await server.stop()
        return engine.log.records, received

    return asyncio.run(main())
