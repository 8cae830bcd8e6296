"""
Run-log reading, tracking metrics and per-agent CSV export.

A run log is newline-delimited JSON: one ``meta`` record followed by one
``step`` record per agent per control period.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, NamedTuple

import numpy as np
import pandas as pd

from .dynamics import attitude_error_angle, yaw_from_quat


logger = logging.getLogger(__name__)

STEP_KEYS = ('t_ns', 'ns', 'state', 'cmd', 'ref', 'degraded')
DEFAULT_SETTLE_S = 20.0

CSV_COLUMNS = [
    't_s',
    'p_x', 'p_y', 'p_z',
    'ref_x', 'ref_y', 'ref_z',
    'position_error_m',
    'yaw_rad', 'ref_yaw_rad', 'attitude_error_rad',
    'force_x', 'force_y', 'force_z',
    'torque_x', 'torque_y', 'torque_z',
    'degraded',
]


class CorruptLogError(Exception):
    """Raised when a run log cannot be parsed."""

    def __init__(self, message: str, line_number: int):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class RunLog(NamedTuple):
    meta: Dict[str, Any]
    steps: List[Dict[str, Any]]

    @property
    def namespaces(self) -> List[str]:
        return [agent['ns'] for agent in self.meta.get('agents', [])]

    def role_of(self, namespace: str) -> str:
        for agent in self.meta.get('agents', []):
            if agent['ns'] == namespace:
                return agent['role']
        return 'follower'


class AgentMetrics(NamedTuple):
    namespace: str
    role: str
    control_steps: int
    degraded_steps: int
    max_error_m: float
    rms_error_m: float
    steady_state_error_m: float


def read_run_log(path) -> RunLog:
    """
    Parse a run log.

    Raises:
        CorruptLogError: On unparsable lines, a missing meta header or
            step records lacking required keys
    """
    path = Path(path)
    meta = None
    steps = []
    with path.open() as log:
        for line_number, line in enumerate(log, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptLogError(f"invalid JSON ({exc.msg})", line_number) from exc
            if not isinstance(record, dict):
                raise CorruptLogError("record is not an object", line_number)

            if meta is None:
                if record.get('kind') != 'meta':
                    raise CorruptLogError("first record must be the meta header", line_number)
                meta = record
                continue
            if record.get('kind') != 'step':
                raise CorruptLogError(f"unexpected record kind {record.get('kind')!r}", line_number)
            missing = [key for key in STEP_KEYS if key not in record]
            if missing:
                raise CorruptLogError(f"step record lacks {', '.join(missing)}", line_number)
            steps.append(record)

    if meta is None:
        raise CorruptLogError("log has no meta header", 1)
    return RunLog(meta=meta, steps=steps)


def agent_frame(run_log: RunLog, namespace: str) -> pd.DataFrame:
    """Tracking and command series of one agent, one row per control step."""
    rows = []
    for record in run_log.steps:
        if record['ns'] != namespace:
            continue
        state = np.asarray(record['state'], dtype=float)
        ref = np.asarray(record['ref'], dtype=float)
        cmd = np.asarray(record['cmd'], dtype=float)
        rows.append([
            record['t_ns'] / 1e9,
            *state[0:3],
            *ref[0:3],
            float(np.linalg.norm(state[0:3] - ref[0:3])),
            yaw_from_quat(state[6:10]),
            yaw_from_quat(ref[6:10]),
            attitude_error_angle(state[6:10], ref[6:10]),
            *cmd[0:3],
            *cmd[3:6],
            bool(record['degraded']),
        ])
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def export_csv(log_path, output_dir=None) -> List[Path]:
    """
    Write one ``<ns>.csv`` per agent next to the log (or into ``output_dir``).

    Returns:
        Paths of the written files in agent order
    """
    log_path = Path(log_path)
    run_log = read_run_log(log_path)
    output_dir = Path(output_dir) if output_dir is not None else log_path.parent
    output_dir.mkdir(parents=True, exist_ok=True)

    written = []
    for namespace in run_log.namespaces:
        frame = agent_frame(run_log, namespace)
        path = output_dir / f"{log_path.stem}_{namespace}.csv"
        frame.to_csv(path, index=False, float_format='%.9g')
        written.append(path)
        logger.debug(f"Wrote {len(frame)} rows to {path}")
    logger.info(f"Exported {len(written)} agent series from {log_path}")
    return written


def summarize_run(run_log: RunLog, settle_s: float = DEFAULT_SETTLE_S) -> Dict[str, AgentMetrics]:
    """
    Per-agent position error against the logged reference.

    The steady-state error is the maximum after ``settle_s`` seconds; runs
    shorter than that report the maximum over the whole run.
    """
    metrics = {}
    for namespace in run_log.namespaces:
        frame = agent_frame(run_log, namespace)
        errors = frame['position_error_m'].to_numpy()
        if len(errors) == 0:
            metrics[namespace] = AgentMetrics(namespace, run_log.role_of(namespace), 0, 0, 0.0, 0.0, 0.0)
            continue
        settled = errors[frame['t_s'].to_numpy() >= settle_s]
        if len(settled) == 0:
            settled = errors
        metrics[namespace] = AgentMetrics(
            namespace=namespace,
            role=run_log.role_of(namespace),
            control_steps=len(frame),
            degraded_steps=int(frame['degraded'].sum()),
            max_error_m=float(errors.max()),
            rms_error_m=float(np.sqrt(np.mean(errors ** 2))),
            steady_state_error_m=float(settled.max()),
        )
    return metrics
