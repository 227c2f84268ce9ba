"""Round-based DAG consensus.

Each round every proposer emits one block referencing at least 2f+1
certified blocks of the previous round (always including its own previous
certified block when one exists).  A block certified by 2f+1 votes becomes a
parent candidate for the next round.

Odd rounds carry a rotating leader.  A leader block commits directly once
2f+1 certified blocks of the following round are known and at least f+1 of
them list the leader as a parent.  Committing a leader first commits any
earlier uncommitted leader blocks found in its causal history, oldest
first; each committed leader then drags its uncommitted causal history into
the total order, linearized by (round, proposer).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

from .model import Block, Certificate, DagId, ReplicaId, Round


@dataclass
class CommitBatch:
    """One leader commit: the leader block plus the part of its causal
    history no earlier leader already ordered."""

    leader: str
    round: Round
    history: tuple[str, ...]  # block digests, (round, proposer) order


class DagStore:
    """One replica's view of one DAG instance."""

    def __init__(self, n: int, f: int, dag: DagId = 0, leader_offset: int = 0):
        if n < 3 * f + 1:
            raise ValueError(f"n={n} cannot tolerate f={f}")
        self.n = n
        self.f = f
        self.dag = dag
        self.leader_offset = leader_offset
        self.blocks: dict[str, Block] = {}
        self.certs: dict[str, Certificate] = {}
        self.by_round: dict[Round, dict[ReplicaId, str]] = {}
        self.certified: dict[Round, dict[ReplicaId, str]] = {}
        self.votes: dict[str, set[ReplicaId]] = {}
        self.committed: set[str] = set()
        self.batches: list[CommitBatch] = []
        self._last_leader_round: Round = -1

    # -- structure ---------------------------------------------------------

    def quorum(self) -> int:
        return 2 * self.f + 1

    def leader_of(self, round: Round) -> Optional[ReplicaId]:
        if round % 2 == 0:
            return None
        return (round // 2 + self.leader_offset) % self.n

    def add_block(self, block: Block) -> bool:
        if block.dag != self.dag:
            raise ValueError(f"block for dag {block.dag}, store holds {self.dag}")
        digest = block.digest
        if digest in self.blocks:
            return False
        existing = self.by_round.get(block.round, {}).get(block.proposer)
        if existing is not None and existing != digest:
            raise ValueError(
                f"proposer {block.proposer} equivocated in round {block.round}")
        self._check_parents(block)
        self.blocks[digest] = block
        self.by_round.setdefault(block.round, {})[block.proposer] = digest
        return True

    def _check_parents(self, block: Block) -> None:
        if block.round == 0:
            if block.parents:
                raise ValueError("round-0 block cannot reference parents")
            return
        if len(set(block.parents)) != len(block.parents):
            raise ValueError("duplicate parent references")
        if len(block.parents) < self.quorum():
            raise ValueError(
                f"block needs {self.quorum()} parents, has {len(block.parents)}")
        own_prev = self.certified.get(block.round - 1, {}).get(block.proposer)
        for p in block.parents:
            parent = self.blocks.get(p)
            if parent is None:
                raise ValueError(f"unknown parent {p[:8]}")
            if parent.round != block.round - 1:
                raise ValueError("parent from wrong round")
            if p not in self.certs:
                raise ValueError(f"uncertified parent {p[:8]}")
        if own_prev is not None and own_prev not in block.parents:
            raise ValueError("proposer must reference its own previous block")

    def record_vote(self, digest: str, voter: ReplicaId) -> Optional[Certificate]:
        """Accumulate a vote; returns the certificate the first time the
        quorum is reached."""
        block = self.blocks.get(digest)
        if block is None:
            raise ValueError(f"vote for unknown block {digest[:8]}")
        if digest in self.certs:
            return None
        voters = self.votes.setdefault(digest, set())
        voters.add(voter)
        if len(voters) >= self.quorum():
            cert = Certificate(digest, block.proposer, block.round, block.dag,
                               frozenset(voters))
            self.add_certificate(cert)
            return cert
        return None

    def add_certificate(self, cert: Certificate) -> bool:
        block = self.blocks.get(cert.block_digest)
        if block is None:
            raise ValueError(f"certificate for unknown block {cert.block_digest[:8]}")
        if not cert.valid(self.f):
            raise ValueError("certificate below quorum")
        if (cert.proposer, cert.round, cert.dag) != (block.proposer, block.round, block.dag):
            raise ValueError("certificate does not match block")
        if cert.block_digest in self.certs:
            return False
        self.certs[cert.block_digest] = cert
        self.certified.setdefault(cert.round, {})[cert.proposer] = cert.block_digest
        return True

    def is_certified(self, digest: str) -> bool:
        return digest in self.certs

    def certified_round(self, round: Round) -> dict[ReplicaId, str]:
        return dict(self.certified.get(round, {}))

    def parent_candidates(self, round: Round) -> list[str]:
        """Certified blocks of round-1, the parent set for a round-r block."""
        return [d for _, d in sorted(self.certified.get(round - 1, {}).items())]

    # -- commit rule -------------------------------------------------------

    def leader_digest(self, round: Round) -> Optional[str]:
        leader = self.leader_of(round)
        if leader is None:
            return None
        return self.certified.get(round, {}).get(leader)

    def direct_support(self, round: Round) -> tuple[int, int]:
        """(certified next-round blocks, how many reference the leader)."""
        ld = self.leader_digest(round)
        nxt = self.certified.get(round + 1, {})
        if ld is None:
            return len(nxt), 0
        backing = sum(1 for d in nxt.values()
                      if ld in self.blocks[d].parents)
        return len(nxt), backing

    def try_commit(self) -> list[CommitBatch]:
        """Advance the committed prefix as far as current delivery allows."""
        out: list[CommitBatch] = []
        while True:
            round = self._find_direct_commit()
            if round is None:
                return out
            chain: list[tuple[Round, str]] = [(round, self.leader_digest(round))]
            cursor = chain[0][1]
            for rr in range(round - 2, self._last_leader_round, -2):
                ld = self.leader_digest(rr)
                if ld is not None and self._reachable(cursor, ld):
                    chain.append((rr, ld))
                    cursor = ld
            for rr, digest in reversed(chain):
                out.append(self._emit(rr, digest))
            self._last_leader_round = round

    def _find_direct_commit(self) -> Optional[Round]:
        if not self.certified:
            return None
        top = max(self.certified)
        start = self._last_leader_round + 2
        if start % 2 == 0:
            start += 1
        for round in range(start, top, 2):
            if self.leader_digest(round) is None:
                continue
            delivered, backing = self.direct_support(round)
            if delivered >= self.quorum() and backing >= self.f + 1:
                return round
        return None

    def _reachable(self, frm: str, to: str) -> bool:
        seen = {frm}
        stack = [frm]
        target_round = self.blocks[to].round
        while stack:
            cur = stack.pop()
            if cur == to:
                return True
            block = self.blocks[cur]
            if block.round <= target_round:
                continue
            for p in block.parents:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return False

    def _emit(self, round: Round, digest: str) -> CommitBatch:
        history = [d for d in self._closure(digest) if d not in self.committed]
        history.sort(key=lambda d: (self.blocks[d].round, self.blocks[d].proposer))
        self.committed.update(history)
        batch = CommitBatch(digest, round, tuple(history))
        self.batches.append(batch)
        return batch

    def _closure(self, digest: str) -> set[str]:
        seen = {digest}
        stack = [digest]
        while stack:
            for p in self.blocks[stack.pop()].parents:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen

    def causal_history(self, digest: str) -> list[str]:
        """Every block reachable from digest (inclusive), (round, proposer)
        order."""
        out = sorted(self._closure(digest),
                     key=lambda d: (self.blocks[d].round, self.blocks[d].proposer))
        return out

    def total_order(self) -> list[str]:
        return [d for b in self.batches for d in b.history]

    def max_certified_round(self) -> Round:
        return max(self.certified, default=-1)

    def dump(self) -> str:
        lines = []
        for round in sorted(self.by_round):
            for proposer in sorted(self.by_round[round]):
                d = self.by_round[round][proposer]
                block = self.blocks[d]
                mark = "C" if d in self.committed else (
                    "c" if d in self.certs else ".")
                lines.append(
                    f"r{round} p{proposer} {d[:8]} {block.kind.value} {mark} "
                    f"parents={','.join(p[:8] for p in block.parents)}")
        return "\n".join(lines)
