"""Shift-block reconfiguration: agreeing to retire a DAG instance.

Each replica may propose one Shift block per DAG.  It does so when a
proposer slot has been silent for a window of rounds, when it has served
long enough for the periodic rotation, or when enough peers already asked.
Once a committed leader's cumulative history carries Shift blocks from a
quorum of slots, that leader round becomes the DAG's ending round; every
honest replica sees the same committed prefix, hence the same ending
round, and restarts at round 0 of the next DAG under a rotated
shard-to-replica assignment.  Proposing and committing in the old DAG
continue until then, so reconfiguration never blocks progress.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from .model import Block, BlockKind, ShardAssignment


@dataclass
class ShiftConfig:
    n: int
    f: int
    k: int = 2          # silent rounds before suspecting a proposer slot
    k_rotate: int = 0   # own proposals before voluntary rotation; 0 disables

    def quorum(self) -> int:
        return 2 * self.f + 1


@dataclass
class ShiftTracker:
    """One replica's reconfiguration bookkeeping for the current DAG."""

    cfg: ShiftConfig
    my_slot: Optional[int]
    last_seen: dict[int, int] = field(default_factory=dict)
    shift_rounds: dict[int, int] = field(default_factory=dict)
    own_proposals: int = 0
    shift_sent: bool = False
    committed_shift_slots: set[int] = field(default_factory=set)
    ending_round: Optional[int] = None

    def observe_block(self, block: Block) -> None:
        prev = self.last_seen.get(block.proposer, -1)
        self.last_seen[block.proposer] = max(prev, block.round)
        if block.kind is BlockKind.SHIFT:
            cur = self.shift_rounds.get(block.proposer)
            if cur is None or block.round < cur:
                self.shift_rounds[block.proposer] = block.round

    def note_own_proposal(self, block: Block) -> None:
        self.own_proposals += 1
        if block.kind is BlockKind.SHIFT:
            self.shift_sent = True

    def silent_slots(self, round: int) -> list[int]:
        """Slots with no delivered block in the last k rounds before
        this one; never-seen slots count as silent since round -1."""
        out = []
        for slot in range(self.cfg.n):
            if slot == self.my_slot:
                continue
            if self.last_seen.get(slot, -1) <= round - self.cfg.k - 1:
                out.append(slot)
        return out

    def shift_reason(self, round: int) -> Optional[str]:
        """First matching trigger for proposing a Shift block this round,
        or None.  A replica asks at most once per DAG."""
        if self.shift_sent or self.my_slot is None:
            return None
        if self.silent_slots(round):
            return "silent"
        if self.cfg.k_rotate and self.own_proposals >= self.cfg.k_rotate:
            return "period"
        peers = [s for s, r in self.shift_rounds.items()
                 if r <= round - 1 and s != self.my_slot]
        if len(peers) >= self.cfg.f + 1:
            return "join"
        return None

    # -- ending round over the committed order -----------------------------

    def note_committed(self, leader_round: int,
                       blocks: Iterable[Block]) -> Optional[int]:
        """Fold one committed leader batch; returns the ending round the
        first time the cumulative committed history reaches Shift blocks
        from 2f+1 distinct slots, else None.  Stable once set."""
        for block in blocks:
            if block.kind is BlockKind.SHIFT:
                self.committed_shift_slots.add(block.proposer)
        if self.ending_round is None and \
                len(self.committed_shift_slots) >= self.cfg.quorum():
            self.ending_round = leader_round
        return self.ending_round


def next_assignment(current: ShardAssignment, n: int) -> ShardAssignment:
    return current.rotated(n)
