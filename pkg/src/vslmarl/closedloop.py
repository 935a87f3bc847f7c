"""In-process closed loop: the decision engine drives the CTM simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .corridor import Measurement
from .guards import GuardConfig, Policy, max_speed_clip
from .service import DecisionEngine, DecisionLog, summarize
from .sim import ScenarioSpec


@dataclass
class RunResult:
    measurements: list[Measurement] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def run_closed_loop(spec: ScenarioSpec, policy: Policy | None = None, fixed_limit: int | None = None,
                    config: GuardConfig = GuardConfig(), tick_seconds: float = 30.0,
                    log_dir=None, on_tick=None) -> RunResult:
    """Simulate ``spec`` under no control, a fixed limit, or ``policy``.

    Ticks fall on multiples of ``tick_seconds`` of the absolute clock and
    consume the readings stamped at or before them, the same rule replay
    uses, so replaying the measurement stream reproduces the decision log.
    """
    corridor, sim = spec.build()
    cfg = spec.config
    result = RunResult()
    engine = None
    if policy is not None:
        engine = DecisionEngine(corridor, policy, config, tick_seconds, DecisionLog(log_dir))
    elif fixed_limit is not None:
        sim.apply_speed_limits([max_speed_clip(fixed_limit, g.max_limit) for g in corridor.gantries])

    n_reads = int(math.floor(cfg.horizon / cfg.sensor_interval + 1e-9))
    last = cfg.sensor_interval * n_reads
    # event times: sensor readouts and tick boundaries up to the last readout
    events = {round(cfg.sensor_interval * k, 6) for k in range(1, n_reads + 1)}
    if engine is not None:
        first = math.ceil((cfg.start_time + cfg.sensor_interval) / tick_seconds - 1e-9) * tick_seconds
        t = first - cfg.start_time
        while t <= last + 1e-9:
            events.add(round(t, 6))
            t += tick_seconds
    for t in sorted(events):
        sim.advance(t - sim.t)
        now = cfg.start_time + t
        if abs(t / cfg.sensor_interval - round(t / cfg.sensor_interval)) < 1e-9:
            reads = sim.readout()
            for sid in sim.sensor_ids:
                m = reads[sid]
                result.measurements.append(m)
                if engine is not None:
                    engine.ingest(m)
        if engine is not None:
            for cmds in engine.advance_to(now):
                limits = {c["gantry_id"]: c["limit"] for c in cmds}
                sim.apply_speed_limits([limits[g] for g in corridor.gantry_ids])
                if on_tick is not None:
                    on_tick(sim, cmds)
    if engine is not None:
        engine.log.close()
        result.records = engine.log.records
    result.summary = {
        "scenario": spec.name,
        "horizon": cfg.horizon,
        "vht": sim.vht,
        "vmt": sim.vmt,
        "vehicles_in": sim.cum_in,
        "vehicles_out": sim.cum_out,
        "conservation_error": abs(sim.initial_vehicles + sim.cum_in - sim.cum_out - sim.vehicles()),
        **summarize(result.records),
    }
    return result
