"""Run reports: routed counts, outcome and stage shares, time per function."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List

from ..assignment import ALL_CHAINS, CAPACITY_BFS, ISOLATED_BFS, NEIGHBORHOOD, OUTCOMES, STAGES
from .replay import RunResult

BFS_STAGES = (ISOLATED_BFS, CAPACITY_BFS)
ENUMERATION_STAGES = (ALL_CHAINS, NEIGHBORHOOD)


@dataclass
class RunReport:
    runs: Dict[str, RunResult] = field(default_factory=dict)

    def add(self, run: RunResult) -> None:
        self.runs[run.strategy] = run

    def rows(self) -> List[dict]:
        out = []
        for name, run in self.runs.items():
            row = {
                "strategy": name,
                "bookings": run.bookings,
                "routed": run.routed,
                "routed_fraction": round(run.fraction, 4),
            }
            for o in OUTCOMES:
                row[o] = run.outcomes.get(o, 0)
            stage_total = sum(run.stages.values())
            for s in STAGES:
                row[f"stage:{s}"] = round(run.stages.get(s, 0) / stage_total, 4) if stage_total else 0.0
            total = sum(run.functions.values())
            for fn in ("best-chain", "enumerate-all", "model-build", "model-solve"):
                row[f"time:{fn}"] = round(run.functions.get(fn, 0.0) / total, 4) if total else 0.0
            row["seconds"] = round(run.seconds, 3)
            row["truncated"] = run.truncated
            row["optimal"] = "" if run.optimal is None else run.optimal
            out.append(row)
        return out

    def deltas(self) -> List[dict]:
        """Routed differences between every pair of strategies present."""
        names = [n for n in ("greedy", "online", "offline") if n in self.runs]
        out = []
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                ra, rb = self.runs[a].routed, self.runs[b].routed
                out.append({"from": a, "to": b, "routed_delta": rb - ra, "relative": round((rb - ra) / rb, 4) if rb else 0.0})
        return out

    def to_csv(self) -> str:
        rows = self.rows()
        if not rows:
            return ""
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return buf.getvalue()

    def to_table(self) -> str:
        rows = self.rows()
        if not rows:
            return ""
        cols = list(rows[0])
        cells = [[str(r[c]) for c in cols] for r in rows]
        # transpose: one line per metric reads better than a very wide table
        out = []
        name_w = max(len(c) for c in cols)
        col_w = max(max(len(r[0]) for r in cells), *(len(v) for row in cells for v in row))
        for i, c in enumerate(cols):
            out.append(c.ljust(name_w) + "  " + "  ".join(row[i].rjust(col_w) for row in cells))
        deltas = self.deltas()
        if deltas:
            out.append("")
            for d in deltas:
                out.append(f"{d['from']} -> {d['to']}: {d['routed_delta']:+d} routed ({d['relative']:+.2%})")
        return "\n".join(out) + "\n"


def bfs_share(run: RunResult) -> float:
    """Share of assignment calls resolved without the enumeration stages."""
    return run.stage_share(BFS_STAGES)
