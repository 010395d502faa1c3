"""Distribution model of cyclic reduction over compute nodes.

Planes are assigned to nodes in contiguous blocks. At each level the surviving planes
stay on their owner, so every node holds n / (2^r p) planes until the C-level
r* = log2(n/p), where each node has exactly one plane; beyond it nodes fall idle.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List

import structlog

from ..exceptions import PlanError

logger = structlog.get_logger()


def _is_power_of_two(value: int) -> bool:
    return value >= 1 and (value & (value - 1)) == 0


@dataclass
class PlanLevel:
    level: int
    active: List[int]
    planes_per_node: List[int]
    messages: int

    @property
    def idle_nodes(self) -> int:
        return sum(1 for count in self.planes_per_node if count == 0)


@dataclass
class ParallelPlan:
    n: int
    p: int
    c_level: int
    levels: List[PlanLevel] = field(default_factory=list)
    total_volume: float = 0.0

    def owner(self, plane: int) -> int:
        return plane // (self.n // self.p)

    def schedule(self) -> List[List[int]]:
        """Planes held by each node, one list per level."""
        return [level.planes_per_node for level in self.levels]

    def conserves_planes(self) -> bool:
        return all(sum(level.planes_per_node) == len(level.active) for level in self.levels)

    def as_rows(self) -> List[Dict[str, int]]:
        return [
            {
                "level": level.level,
                "surviving_planes": len(level.active),
                "max_planes_per_node": max(level.planes_per_node),
                "idle_nodes": level.idle_nodes,
                "messages": level.messages,
            }
            for level in self.levels
        ]


def comm_volume(n: int, p: int, k: float) -> float:
    """Communication volume model k p n^2 log2(n) (log2(n/p) + 1), unit constants."""
    if n <= 0 or p <= 0 or k <= 0:
        raise PlanError(f"volume needs positive n, p, k; got n={n}, p={p}, k={k}")
    if p > n:
        raise PlanError(f"more nodes than planes: p={p} > n={n}")
    return k * p * n * n * math.log2(n) * (math.log2(n / p) + 1.0)


def plane_assignment(n: int, p: int, rank: float = 1.0) -> ParallelPlan:
    """Simulate the plane distribution of cyclic reduction on p nodes."""
    if not (_is_power_of_two(n) and _is_power_of_two(p)):
        raise PlanError(f"planes and nodes must be powers of two, got n={n}, p={p}")
    if p > n:
        raise PlanError(f"more nodes than planes: p={p} > n={n}")

    plan = ParallelPlan(n=n, p=p, c_level=int(math.log2(n // p)))
    active = list(range(n))
    level = 0
    while True:
        counts = [0] * p
        for plane in active:
            counts[plan.owner(plane)] += 1
        messages = 0
        if len(active) > 1:
            for pos in range(1, len(active), 2):
                j = active[pos]
                for neighbor_pos in (pos - 1, pos + 1):
                    if neighbor_pos < len(active) and plan.owner(active[neighbor_pos]) != plan.owner(j):
                        messages += 1
        plan.levels.append(PlanLevel(level, list(active), counts, messages))
        if len(active) == 1:
            break
        active = active[1::2]
        level += 1

    plan.total_volume = comm_volume(n, p, rank)
    logger.debug("Built parallel plan", n=n, p=p, c_level=plan.c_level, levels=len(plan.levels))
    return plan
