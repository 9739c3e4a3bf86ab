"""Operation counters for the merge pipeline"""

from typing import Dict, List, Optional
import time


class StageCounter:
    """Tracks executions, wall time and FLOPs of one pipeline stage"""

    def __init__(self, name: str, description: str = ""):
        self.name = name
        self.description = description
        self.execution_count = 0
        self.total_execution_time = 0.0
        self.flops = 0

    def record(self, flops: int, start_time: Optional[float] = None) -> None:
        """Add one execution's FLOPs (and elapsed time if a start was taken)"""
        self.execution_count += 1
        self.flops += int(flops)
        if start_time is not None:
            self.total_execution_time += time.perf_counter() - start_time

    def reset(self) -> None:
        self.execution_count = 0
        self.total_execution_time = 0.0
        self.flops = 0

    def get_stats(self) -> Dict:
        """Get stage statistics"""
        avg_time = (self.total_execution_time / self.execution_count
                    if self.execution_count > 0 else 0)
        return {
            "name": self.name,
            "executions": self.execution_count,
            "flops": self.flops,
            "total_time": round(self.total_execution_time, 6),
            "avg_time": round(avg_time, 6),
        }


# stage name -> description; FLOP conventions: multiply-add = 2
STAGES = {
    "similarity": "S = X_dst X_src^T, 2MNd per sample",
    "refine": "column normalize, count, zeta, prune, renormalize: 8MN per sample (2MN without refining)",
    "preserve": "column sums of W^F, MN per sample",
    "aggregate": "W^F X_src, 2MNd per sample when any weight is nonzero",
}


class CounterRegistry:
    """Registry for the pipeline's stage counters"""

    def __init__(self):
        self.counters: Dict[str, StageCounter] = {}

    def register(self, counter: StageCounter) -> None:
        self.counters[counter.name] = counter

    def get(self, name: str) -> Optional[StageCounter]:
        return self.counters.get(name)

    def add(self, name: str, flops: int, start_time: Optional[float] = None) -> None:
        """Record on a registered stage, creating it on first use"""
        counter = self.counters.get(name)
        if counter is None:
            counter = StageCounter(name, STAGES.get(name, ""))
            self.register(counter)
        counter.record(flops, start_time)

    def flops(self, name: str) -> int:
        counter = self.counters.get(name)
        return counter.flops if counter else 0

    def reset(self) -> None:
        for counter in self.counters.values():
            counter.reset()

    def get_all_stats(self) -> List[Dict]:
        return [counter.get_stats() for counter in self.counters.values()]


def create_default_counters() -> CounterRegistry:
    """Create a registry with every pipeline stage registered"""
    registry = CounterRegistry()
    for name, description in STAGES.items():
        registry.register(StageCounter(name, description))
    return registry
