"""Where the coordinator gets server quantities from.

A source answers the four kinds of requests the algorithms make of the
servers. ``LocalSource`` calls the worker functions directly on shards held
in memory; the transport session offers the same methods over the wire.
Results always come back ordered by server id.
"""
from __future__ import annotations

from typing import Dict, List, Optional, Protocol, Sequence

from ..model import BasisSpec, GaussianState, ModelParams
from ..worker import (
    OVERLAP_CAP,
    EMContribution,
    ServerData,
    SREStats,
    Summary,
    compute_augmented_summary,
    compute_em_contribution,
    compute_sre_stats,
    summarize,
)

# per particle, per time index, the summaries of all servers
SummaryTable = List[Dict[Optional[int], List[Summary]]]


class SummarySource(Protocol):
    spec: BasisSpec

    def summaries(self, params_list: Sequence[ModelParams],
                  times: Sequence[Optional[int]] = (None,)) -> SummaryTable: ...

    def em_contributions(self, posterior: GaussianState, fine_scale_var: float,
                         trace: str = "omega") -> List[EMContribution]: ...

    def sre_stats(self, time_index: Optional[int] = None) -> List[SREStats]: ...

    def augmented_summaries(self, params: ModelParams, overlap_locs,
                            cap: int = OVERLAP_CAP) -> List[Summary]: ...


class LocalSource:
    """Servers simulated in the calling process (divide-and-conquer mode)."""

    def __init__(self, servers: Sequence[ServerData], spec: BasisSpec):
        self.servers = sorted(servers, key=lambda s: s.server_id)
        ids = [s.server_id for s in self.servers]
        if len(set(ids)) != len(ids):
            raise ValueError("server ids must be distinct")
        self.spec = spec

    @classmethod
    def from_shards(cls, shards, spec: BasisSpec) -> "LocalSource":
        by_id: Dict[int, list] = {}
        for sh in shards:
            by_id.setdefault(sh.server_id, []).append(sh)
        return cls([ServerData(j, s) for j, s in by_id.items()], spec)

    def summaries(self, params_list, times=(None,)) -> SummaryTable:
        return [{t: [summarize(srv.shard(t), self.spec, p) for srv in self.servers]
                 for t in times} for p in params_list]

    def em_contributions(self, posterior, fine_scale_var, trace="omega"):
        return [compute_em_contribution(srv.shard(), self.spec, fine_scale_var, posterior, trace)
                for srv in self.servers]

    def sre_stats(self, time_index=None):
        return [compute_sre_stats(srv.shard(time_index), self.spec) for srv in self.servers]

    def augmented_summaries(self, params, overlap_locs, cap=OVERLAP_CAP):
        return [compute_augmented_summary(srv.shard(), self.spec, params, overlap_locs, cap)
                for srv in self.servers]


def spatial_summaries(source: SummarySource, params_list) -> List[List[Summary]]:
    return [row[None] for row in source.summaries(params_list, (None,))]
