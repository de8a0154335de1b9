"""Convert an Azure public VM table into the trace format read by ``read_trace_csv``.

The VM table has one row per VM: ``vmid, subscriptionid, deploymentid, vmcreated,
vmdeleted, maxcpu, avgcpu, p95maxcpu, vmcategory, vmcorecountbucket, vmmemorybucket``,
with times in seconds from the start of the trace. The published files have no header
row; a header with these names is accepted too.

VMs of one deployment created at the same instant form one deploy or scale-out event, and
VMs deleted at the same instant one core_stop. A VM deleted at or after the trace end is
still live when observation stops. VMs created at the trace start were running before it;
their deployments keep a deploy event at time 0 for FitConfig to exclude or keep.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

from .errors import TraceFormatError
from .trace_fit import TraceEvent

logger = logging.getLogger(__name__)

AZURE_VM_COLUMNS = [
    "vmid",
    "subscriptionid",
    "deploymentid",
    "vmcreated",
    "vmdeleted",
    "maxcpu",
    "avgcpu",
    "p95maxcpu",
    "vmcategory",
    "vmcorecountbucket",
    "vmmemorybucket",
]
SECONDS_PER_HOUR = 3600.0

CoreUnit = Literal["vm", "cores"]


@dataclass(frozen=True)
class AzureVM:
    vm_id: str
    deployment_id: str
    created: float
    deleted: float
    cores: int


@dataclass
class AzureImportStats:
    vms: int = 0
    deployments: int = 0
    pre_trace_deployments: int = 0
    # Deployments that emptied and later started new VMs; only the first life is kept.
    truncated_deployments: int = 0
    trace_length_hours: float = 0.0


def _core_count(bucket: str, lineno: int) -> int:
    """Cores of one VM from its bucket label; an open bucket such as '>24' counts as its bound."""
    text = bucket.strip().lstrip(">").strip()
    try:
        cores = int(float(text))
    except ValueError:
        raise TraceFormatError(f"invalid vmcorecountbucket '{bucket}'", line=lineno) from None
    if cores < 1:
        raise TraceFormatError(f"vmcorecountbucket must be >= 1, got '{bucket}'", line=lineno)
    return cores


def read_azure_vm_table(path: Path | str, *, unit: CoreUnit = "vm") -> list[AzureVM]:
    """Parse the VM table. ``unit="vm"`` counts each VM as one core."""
    path = Path(path)
    vms: list[AzureVM] = []
    with path.open("r", encoding="utf-8", newline="") as f:
        first = f.readline()
        has_header = first.strip().lower().startswith("vmid")
        f.seek(0)
        reader = csv.DictReader(f, fieldnames=None if has_header else AZURE_VM_COLUMNS)
        missing = [c for c in ("vmid", "deploymentid", "vmcreated", "vmdeleted") if c not in (reader.fieldnames or [])]
        if missing:
            raise TraceFormatError(f"VM table lacks columns: {', '.join(missing)}", line=1)

        for lineno, row in enumerate(reader, start=2 if has_header else 1):
            if not row.get("vmid"):
                continue
            try:
                created = float(row["vmcreated"])
                deleted = float(row["vmdeleted"])
            except (TypeError, ValueError):
                raise TraceFormatError("vmcreated and vmdeleted must be numbers", line=lineno) from None
            if not (math.isfinite(created) and math.isfinite(deleted)) or created < 0 or deleted < created:
                raise TraceFormatError(f"need 0 <= vmcreated <= vmdeleted, got {created}, {deleted}", line=lineno)
            deployment = (row.get("deploymentid") or "").strip()
            if not deployment:
                raise TraceFormatError("empty deploymentid", line=lineno)
            cores = 1 if unit == "vm" else _core_count(row.get("vmcorecountbucket") or "", lineno)
            vms.append(AzureVM(row["vmid"].strip(), deployment, created, deleted, cores))

    if not vms:
        raise TraceFormatError("VM table has no rows", line=1)
    logger.info(f"Read {len(vms)} VMs from {path}")
    return vms


def vm_table_to_events(
    vms: list[AzureVM],
    *,
    trace_end_seconds: Optional[float] = None,
) -> tuple[list[TraceEvent], AzureImportStats]:
    """Deploy, scale-out, core_stop and end_of_trace events in hours, ordered by time."""
    if not vms:
        raise ValueError("no VMs to convert")
    end = trace_end_seconds if trace_end_seconds is not None else max(vm.deleted for vm in vms)
    if end <= 0:
        raise ValueError(f"trace end must be > 0 seconds, got {end}")

    by_deployment: dict[str, list[AzureVM]] = defaultdict(list)
    for vm in vms:
        if vm.created < end:
            by_deployment[vm.deployment_id].append(vm)

    stats = AzureImportStats(vms=len(vms), deployments=len(by_deployment), trace_length_hours=end / SECONDS_PER_HOUR)
    events: list[TraceEvent] = []
    for deployment_id, group in by_deployment.items():
        starts: dict[float, int] = defaultdict(int)
        stops: dict[float, int] = defaultdict(int)
        for vm in group:
            starts[vm.created] += vm.cores
            if vm.deleted < end:
                stops[vm.deleted] += vm.cores

        # Starts sort before stops at the same instant.
        changes = sorted([(t, 0, n) for t, n in starts.items()] + [(t, 1, n) for t, n in stops.items()])
        deploy_time = changes[0][0]
        if deploy_time <= 0:
            stats.pre_trace_deployments += 1

        live = 0
        emptied_at: Optional[float] = None
        for t, is_stop, n in changes:
            hours = t / SECONDS_PER_HOUR
            if is_stop:
                events.append(TraceEvent(deployment_id, "core_stop", hours, n))
                live -= n
                if live == 0:
                    emptied_at = t
                    break
            else:
                kind = "deploy" if t == deploy_time else "scaleout"
                events.append(TraceEvent(deployment_id, kind, hours, n))  # type: ignore[arg-type]
                live += n
        if live > 0:
            events.append(TraceEvent(deployment_id, "end_of_trace", end / SECONDS_PER_HOUR, live))
        elif emptied_at is not None and any(t > emptied_at for t in starts):
            stats.truncated_deployments += 1

    events.sort(key=lambda e: e.time)
    if stats.truncated_deployments:
        logger.warning(f"{stats.truncated_deployments} deployment(s) restarted after emptying; kept their first life")
    logger.info(
        f"Converted {stats.deployments} deployments ({stats.pre_trace_deployments} already running at the start) "
        f"over {stats.trace_length_hours:.1f}h"
    )
    return events, stats
