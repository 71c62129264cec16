"""Path-based throughput model over candidate chains.

Binary routing variables pick at most one candidate chain per request
(exactly one for requests that already hold a chain); integer block
capacities sit between block utilization/reservations and the adjusted
segment capacities. The objective weights every routed request by its
priority minus a small rank penalty, scaled to integers so the solver
works on an exact integer objective.
"""

from __future__ import annotations

import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp
from scipy.sparse import coo_matrix, csr_matrix, vstack

from .model import NetworkState, Request, TransportChain
from .validation import adjusted_segment_capacity

log = logging.getLogger(__name__)

BRUTE_FORCE_BOUND = 20
DIMS = (0, 1)  # weight, length


class ModelError(ValueError):
    pass


def price_coefficient(priority: int, rank: int, n_requests: int, max_candidates: int) -> Fraction:
    """Priority weight minus a rank penalty that never adds up to one unit.

    The penalty denominator exceeds the number of x-variables that can be
    set at once times the largest rank, so weighted throughput dominates
    and chain preference only breaks ties.
    """
    return priority - Fraction(rank, n_requests * max_candidates + 1)


@dataclass
class OptModel:
    requests: List[Request]
    fixed: FrozenSet[str]
    candidates: Dict[str, List[TransportChain]]
    denominator: int
    scaled_price: Dict[Tuple[str, int], int]
    blocks: List[str]
    fixed_use: Dict[str, Tuple[int, int]]
    reservations: Dict[str, Tuple[int, int]]
    segments: List[str]
    segment_capacity: Dict[str, Tuple[int, int]]
    segment_blocks: Dict[str, List[str]]
    chain_blocks: Dict[Tuple[str, int], Counter]
    current: Dict[str, Optional[int]] = field(default_factory=dict)

    @property
    def x_index(self) -> List[Tuple[str, int]]:
        return [(r.id, k) for r in self.requests for k in range(len(self.candidates[r.id]))]

    @property
    def n_variables(self) -> int:
        return sum(len(self.candidates[r.id]) for r in self.requests) + 2 * len(self.blocks)

    @property
    def family_counts(self) -> Dict[int, int]:
        """Constraint rows per family; family 5 lives in the variable bounds."""
        n_fixed = sum(1 for r in self.requests if r.id in self.fixed)
        return {
            1: len(self.requests) - n_fixed,
            2: n_fixed,
            3: 2 * len(self.blocks),
            4: 2 * len(self.segments),
            5: 2 * len(self.blocks),
        }

    @property
    def n_constraints(self) -> int:
        c = self.family_counts
        return c[1] + c[2] + c[3] + c[4]

    def price(self, rid: str, k: int) -> Fraction:
        return Fraction(self.scaled_price[(rid, k)], self.denominator)

    def demand(self, rid: str) -> Tuple[int, int]:
        r = self._by_id[rid]
        return (r.demand.weight, r.demand.length)

    def __post_init__(self) -> None:
        self._by_id = {r.id: r for r in self.requests}


@dataclass
class Assignment:
    routed: Dict[str, TransportChain]
    unrouted: List[str]
    objective: Fraction
    optimal: bool
    nodes: int = 0
    wall_time: float = 0.0
    selection: Dict[str, int] = field(default_factory=dict)
    capacities: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    throughput_optimal: bool = False


def build_model(
    requests: Sequence[Request],
    fixed: Iterable[str],
    candidates: Mapping[str, Sequence[TransportChain]],
    state: NetworkState,
) -> OptModel:
    """Instantiate the throughput model for ``requests`` against ``state``.

    Usage of every request outside ``requests`` (and manual utilization)
    becomes the fixed block utilization. Fixed requests holding a chain
    get it added to their candidates if missing, which keeps the model
    feasible together with the adjusted segment capacities.
    """
    fixed = frozenset(fixed)
    ids = [r.id for r in requests]
    if len(set(ids)) != len(ids):
        raise ModelError("duplicate request in model")
    unknown = fixed - set(ids)
    if unknown:
        raise ModelError(f"fixed requests not in model: {sorted(unknown)}")
    cands: Dict[str, List[TransportChain]] = {}
    current: Dict[str, Optional[int]] = {}
    for r in requests:
        lst = list(dict.fromkeys(candidates.get(r.id, ())))
        cur = state.chains.get(r.id)
        if r.id in fixed and cur is not None and cur not in lst:
            lst.append(cur)
        if r.id in fixed and not lst:
            raise ModelError(f"fixed request {r.id} has no candidate chain")
        cands[r.id] = lst
        current[r.id] = lst.index(cur) if cur is not None and cur in lst else None

    n = len(requests)
    max_c = max((len(v) for v in cands.values()), default=0)
    denom = n * max_c + 1
    scaled = {}
    for r in requests:
        for k in range(len(cands[r.id])):
            scaled[(r.id, k)] = r.priority * denom - k

    chain_blocks: Dict[Tuple[str, int], Counter] = {}
    used_blocks = set()
    for r in requests:
        for k, c in enumerate(cands[r.id]):
            cnt = Counter(c.blocks)
            chain_blocks[(r.id, k)] = cnt
            used_blocks.update(cnt)
    for bid in used_blocks:
        state.block(bid)
    segments = sorted({sid for bid in used_blocks for sid in state.blocks[bid].segments})

    # usage of model requests is decided by x; everything else is fixed
    own: Dict[str, List[int]] = {}
    for r in requests:
        chain = state.chains.get(r.id)
        if chain is None:
            continue
        for bid in chain.blocks:
            acc = own.setdefault(bid, [0, 0])
            acc[0] += r.demand.weight
            acc[1] += r.demand.length

    def fixed_use_of(bid: str) -> Tuple[int, int]:
        b = state.blocks[bid]
        u = state.block_usage.get(bid)
        w = (u.weight if u else 0) + b.manual_utilization.weight - own.get(bid, (0, 0))[0]
        l = (u.length if u else 0) + b.manual_utilization.length - own.get(bid, (0, 0))[1]
        return (w, l)

    blocks = set(used_blocks)
    for sid in segments:
        for bid in state.blocks_on_segment(sid):
            if bid in blocks:
                continue
            fu = fixed_use_of(bid)
            if fu != (0, 0) or not state.blocks[bid].reservation.is_zero:
                blocks.add(bid)
    blocks_sorted = sorted(blocks)
    segment_blocks = {sid: sorted(b for b in state.blocks_on_segment(sid) if b in blocks) for sid in segments}
    return OptModel(
        requests=list(requests),
        fixed=fixed,
        candidates=cands,
        denominator=denom,
        scaled_price=scaled,
        blocks=blocks_sorted,
        fixed_use={bid: fixed_use_of(bid) for bid in blocks_sorted},
        reservations={bid: state.blocks[bid].reservation.as_tuple() for bid in blocks_sorted},
        segments=segments,
        segment_capacity={sid: adjusted_segment_capacity(sid, state).as_tuple() for sid in segments},
        segment_blocks=segment_blocks,
        chain_blocks=chain_blocks,
        current=current,
    )


def block_utilization(model: OptModel, selection: Mapping[str, int]) -> Dict[str, List[int]]:
    util = {bid: list(model.fixed_use[bid]) for bid in model.blocks}
    for rid, k in selection.items():
        dw, dl = model.demand(rid)
        for bid, m in model.chain_blocks[(rid, k)].items():
            util[bid][0] += dw * m
            util[bid][1] += dl * m
    return util


def minimal_capacities(model: OptModel, selection: Mapping[str, int]) -> Dict[str, Tuple[int, int]]:
    util = block_utilization(model, selection)
    return {
        bid: (max(model.reservations[bid][0], util[bid][0]), max(model.reservations[bid][1], util[bid][1]))
        for bid in model.blocks
    }


def check_assignment(model: OptModel, a: Assignment) -> List[str]:
    """Violated constraint families of ``a`` (empty when feasible)."""
    problems: List[str] = []
    ids = {r.id for r in model.requests}
    if set(a.routed) & set(a.unrouted) or set(a.routed) | set(a.unrouted) != ids:
        problems.append("partition")
    for rid in model.fixed:
        if rid not in a.selection:
            problems.append(f"(2) {rid}")
    for rid, k in a.selection.items():
        if not 0 <= k < len(model.candidates[rid]):
            problems.append(f"(1) {rid}")
    caps = a.capacities or minimal_capacities(model, a.selection)
    util = block_utilization(model, a.selection)
    for bid in model.blocks:
        for i in DIMS:
            if util[bid][i] > caps[bid][i]:
                problems.append(f"(3) {bid}")
            if model.reservations[bid][i] > caps[bid][i]:
                problems.append(f"(5) {bid}")
    for sid in model.segments:
        for i in DIMS:
            if sum(caps[b][i] for b in model.segment_blocks[sid]) > model.segment_capacity[sid][i]:
                problems.append(f"(4) {sid}")
    return problems


def _assignment(
    model: OptModel, selection: Dict[str, int], optimal: bool, nodes: int, wall: float, throughput_optimal: Optional[bool] = None
) -> Assignment:
    routed = {rid: model.candidates[rid][k] for rid, k in selection.items()}
    unrouted = [r.id for r in model.requests if r.id not in selection]
    obj = Fraction(sum(model.scaled_price[(rid, k)] for rid, k in selection.items()), model.denominator)
    return Assignment(
        routed=routed,
        unrouted=unrouted,
        objective=obj,
        optimal=optimal,
        nodes=nodes,
        wall_time=wall,
        selection=dict(selection),
        capacities=minimal_capacities(model, selection),
        throughput_optimal=optimal if throughput_optimal is None else throughput_optimal,
    )


def trivial_assignment(model: OptModel) -> Assignment:
    sel = {rid: k for rid, k in model.current.items() if rid in model.fixed and k is not None}
    return _assignment(model, sel, False, 0, 0.0)


def _matrix(model: OptModel) -> Tuple[csr_matrix, np.ndarray, np.ndarray, Bounds, np.ndarray]:
    """Constraint matrix, row bounds, variable bounds and integrality of the model."""
    xs = model.x_index
    nx = len(xs)
    nb = len(model.blocks)
    nvar = nx + 2 * nb
    bidx = {bid: j for j, bid in enumerate(model.blocks)}
    rows: List[int] = []
    cols: List[int] = []
    vals: List[float] = []
    lo: List[float] = []
    hi: List[float] = []
    row = 0
    start = 0
    # (1) and (2): at most / exactly one chain
    for r in model.requests:
        m = len(model.candidates[r.id])
        for j in range(start, start + m):
            rows.append(row)
            cols.append(j)
            vals.append(1.0)
        lo.append(1.0 if r.id in model.fixed else -np.inf)
        hi.append(1.0)
        row += 1
        start += m
    # (3) utilization <= cap, per block and dimension
    brow = {}
    for bid in model.blocks:
        for i in DIMS:
            brow[(bid, i)] = row
            rows.append(row)
            cols.append(nx + 2 * bidx[bid] + i)
            vals.append(-1.0)
            lo.append(-np.inf)
            hi.append(-float(model.fixed_use[bid][i]))
            row += 1
    for j, (rid, k) in enumerate(xs):
        dem = model.demand(rid)
        for bid, mult in model.chain_blocks[(rid, k)].items():
            for i in DIMS:
                if dem[i]:
                    rows.append(brow[(bid, i)])
                    cols.append(j)
                    vals.append(float(dem[i] * mult))
    # (4) block capacities within segment capacity
    for sid in model.segments:
        for i in DIMS:
            for bid in model.segment_blocks[sid]:
                rows.append(row)
                cols.append(nx + 2 * bidx[bid] + i)
                vals.append(1.0)
            lo.append(-np.inf)
            hi.append(float(model.segment_capacity[sid][i]))
            row += 1
    # (5) reservations as lower bounds on the capacity variables
    lb = np.zeros(nvar)
    ub = np.ones(nvar)
    seg_of = _segments_by_block(model)
    for bid in model.blocks:
        j = nx + 2 * bidx[bid]
        segs = [model.segment_capacity[s] for s in seg_of[bid]]
        for i in DIMS:
            lb[j + i] = model.reservations[bid][i]
            ub[j + i] = min((s[i] for s in segs), default=np.inf)
    A = coo_matrix((vals, (rows, cols)), shape=(row, nvar)).tocsr()
    # cap variables may stay continuous: for integer x the minimal caps
    # max(reservation, utilization) are integral, so the optimum is unchanged
    integrality = np.zeros(nvar)
    integrality[:nx] = 1
    return A, np.array(lo), np.array(hi), Bounds(lb, ub), integrality


def _milp(c, A, lo, hi, bounds, integrality, budget: float):
    return milp(
        c,
        constraints=LinearConstraint(A, lo, hi) if A.shape[0] else None,
        integrality=integrality,
        bounds=bounds,
        options={"time_limit": max(budget, 0.01), "mip_rel_gap": 0.0, "disp": False},
    )


def _selection(model: OptModel, x: np.ndarray) -> Dict[str, int]:
    xi = np.rint(x[: len(model.x_index)]).astype(int)
    return {rid: k for j, (rid, k) in enumerate(model.x_index) if xi[j] == 1}


def solve(model: OptModel, budget: float = 5.0, rank_budget: Optional[float] = None) -> Assignment:
    """Solve the model exactly with HiGHS, lexicographically.

    The rank penalties sum to less than one while priorities are integers
    of at least one, so maximizing the full objective equals maximizing the
    weighted routed count first and minimizing the total rank second.
    Phase one settles the routed weight, phase two the ranks under that
    weight. ``throughput_optimal`` reports the proof of phase one and
    ``optimal`` the proof of both. Capacities are recomputed as the minimal
    feasible ones and the objective is evaluated in exact arithmetic.
    ``rank_budget`` optionally caps the time given to phase two.
    """
    t0 = time.perf_counter()
    if not model.requests:
        return _assignment(model, {}, True, 0, 0.0, True)
    deadline = t0 + budget
    xs = model.x_index
    nx = len(xs)
    A, lo, hi, bounds, integrality = _matrix(model)
    nvar = A.shape[1]
    prio = {r.id: r.priority for r in model.requests}
    weight = np.zeros(nvar)
    rank = np.zeros(nvar)
    for j, (rid, k) in enumerate(xs):
        weight[j] = prio[rid]
        rank[j] = k

    res = _milp(-weight, A, lo, hi, bounds, integrality, deadline - time.perf_counter())
    nodes = int(getattr(res, "mip_node_count", 0) or 0)
    if res.x is None:
        log.warning("no incumbent within %.2fs (status %s); using trivial assignment", budget, res.status)
        a = trivial_assignment(model)
        a.wall_time = time.perf_counter() - t0
        return a
    best = _selection(model, res.x)
    proven = res.status == 0
    if not proven or all(k == 0 for k in best.values()):
        return _finish(model, best, proven, proven, nodes, t0)

    target = sum(prio[rid] for rid in best)
    A2 = vstack([A, csr_matrix(weight[None, :])]).tocsr()
    remaining = deadline - time.perf_counter()
    if rank_budget is not None:
        remaining = min(remaining, rank_budget)
    if remaining <= 0:
        return _finish(model, best, False, True, nodes, t0)
    res2 = _milp(rank, A2, np.append(lo, target - 0.5), np.append(hi, np.inf), bounds, integrality, remaining)
    nodes += int(getattr(res2, "mip_node_count", 0) or 0)
    optimal = False
    if res2.x is not None:
        sel2 = _selection(model, res2.x)
        if sum(sel2.values()) <= sum(best.values()) and sum(prio[rid] for rid in sel2) >= target:
            best = sel2
            optimal = res2.status == 0
    return _finish(model, best, optimal, True, nodes, t0)


def _finish(model: OptModel, sel: Dict[str, int], optimal: bool, throughput: bool, nodes: int, t0: float) -> Assignment:
    a = _assignment(model, sel, optimal, nodes, time.perf_counter() - t0, throughput)
    problems = check_assignment(model, a)
    if problems:
        raise RuntimeError(f"solver returned an infeasible routing: {problems}")
    return a


def _segments_by_block(model: OptModel) -> Dict[str, List[str]]:
    out: Dict[str, List[str]] = {bid: [] for bid in model.blocks}
    for sid in model.segments:
        for bid in model.segment_blocks[sid]:
            out[bid].append(sid)
    return out


def brute_force_solve(model: OptModel) -> Assignment:
    """Exhaustive optimum over all chain selections (test oracle).

    Refuses models with more than 20 candidate chains in total.
    """
    total = sum(len(v) for v in model.candidates.values())
    if total > BRUTE_FORCE_BOUND:
        raise ValueError(f"{total} candidate chains exceed the brute-force bound of {BRUTE_FORCE_BOUND}")
    t0 = time.perf_counter()
    reqs = model.requests
    seg_of = _segments_by_block(model)
    util = {bid: list(model.fixed_use[bid]) for bid in model.blocks}
    seg_sum = {
        sid: [sum(max(model.reservations[b][i], util[b][i]) for b in model.segment_blocks[sid]) for i in DIMS]
        for sid in model.segments
    }
    best: List = [None, None]
    sel: Dict[str, int] = {}

    def apply(rid: str, k: int, sign: int) -> bool:
        dem = model.demand(rid)
        ok = True
        for bid, m in model.chain_blocks[(rid, k)].items():
            for i in DIMS:
                res = model.reservations[bid][i]
                before = max(res, util[bid][i])
                util[bid][i] += sign * dem[i] * m
                after = max(res, util[bid][i])
                for sid in seg_of[bid]:
                    seg_sum[sid][i] += after - before
                    if seg_sum[sid][i] > model.segment_capacity[sid][i]:
                        ok = False
        return ok

    def rec(idx: int, value: int) -> None:
        if idx == len(reqs):
            if best[0] is None or value > best[0]:
                best[0] = value
                best[1] = dict(sel)
            return
        r = reqs[idx]
        for k in range(len(model.candidates[r.id])):
            feasible = apply(r.id, k, +1)
            if feasible:
                sel[r.id] = k
                rec(idx + 1, value + model.scaled_price[(r.id, k)])
                del sel[r.id]
            apply(r.id, k, -1)
        if r.id not in model.fixed:
            rec(idx + 1, value)

    rec(0, 0)
    if best[1] is None:
        raise ModelError("no feasible selection")
    return _assignment(model, best[1], True, 0, time.perf_counter() - t0)


def dump_lp(model: OptModel) -> str:
    """LP-format text of the model, for debugging."""
    xs = model.x_index
    name = {key: f"x_{key[0]}_{key[1]}" for key in xs}
    cap = lambda b, i: f"cap_{b}_{'wl'[i]}"  # noqa: E731
    lines = ["\\ throughput model", "Maximize", " obj: " + " + ".join(f"{model.scaled_price[k]} {name[k]}" for k in xs) or " obj: 0"]
    lines.append("Subject To")
    for r in model.requests:
        terms = " + ".join(name[(r.id, k)] for k in range(len(model.candidates[r.id]))) or "0"
        op = "=" if r.id in model.fixed else "<="
        lines.append(f" route_{r.id}: {terms} {op} 1")
    for bid in model.blocks:
        for i in DIMS:
            terms = []
            for (rid, k), cnt in model.chain_blocks.items():
                if bid in cnt:
                    terms.append(f"{model.demand(rid)[i] * cnt[bid]} {name[(rid, k)]}")
            lhs = " + ".join(terms + [f"- {cap(bid, i)}"])
            lines.append(f" block_{bid}_{'wl'[i]}: {lhs} <= {-model.fixed_use[bid][i]}")
    for sid in model.segments:
        for i in DIMS:
            lhs = " + ".join(cap(b, i) for b in model.segment_blocks[sid])
            lines.append(f" seg_{sid}_{'wl'[i]}: {lhs} <= {model.segment_capacity[sid][i]}")
    lines.append("Bounds")
    for bid in model.blocks:
        for i in DIMS:
            lines.append(f" {cap(bid, i)} >= {model.reservations[bid][i]}")
    lines.append("Binary")
    lines.extend(f" {name[k]}" for k in xs)
    lines.append("General")
    lines.extend(f" {cap(b, i)}" for b in model.blocks for i in DIMS)
    lines.append("End")
    return "\n".join(lines) + "\n"
