"""DAG store: structural validation, certification quorums, the leader
commit rule with walk-back, and cross-replica prefix agreement."""

import random

import pytest

from thunderbolt.dag import DagStore
from thunderbolt.model import Block, BlockKind, Certificate


def nb(proposer, round, parents=(), dag=0):
    return Block(proposer, round, dag, BlockKind.NORMAL, tuple(parents))


def full_cert(block, n):
    return Certificate(block.digest, block.proposer, block.round, block.dag,
                       frozenset(range(n)))


class Builder:
    """Grows a valid DAG round by round and can replay it into stores."""

    def __init__(self, n=4, f=1):
        self.n = n
        self.f = f
        self.store = DagStore(n, f)
        self.rounds: list[list[Block]] = []
        self.log: list[tuple[str, object]] = []

    def add_round(self, proposers=None, parents_of=None):
        r = len(self.rounds)
        prev = {b.proposer: b.digest for b in self.rounds[-1]} if r else {}
        blocks = []
        for p in (proposers if proposers is not None else range(self.n)):
            if parents_of is not None:
                parents = tuple(parents_of(p))
            elif r == 0:
                parents = ()
            else:
                parents = tuple(prev[q] for q in sorted(prev))
            block = nb(p, r, parents)
            self.store.add_block(block)
            self.store.add_certificate(full_cert(block, self.n))
            self.log.append(("block", block))
            self.log.append(("cert", full_cert(block, self.n)))
            blocks.append(block)
        self.rounds.append(blocks)
        return blocks

    def digests(self, round):
        return {b.proposer: b.digest for b in self.rounds[round]}


def grown(rounds, n=4, f=1):
    b = Builder(n, f)
    for _ in range(rounds):
        b.add_round()
    return b


# -- structural validation -------------------------------------------------


def test_round_zero_rejects_parents():
    b = grown(1)
    with pytest.raises(ValueError):
        b.store.add_block(nb(0, 0, parents=(b.rounds[0][1].digest,)))


def test_quorum_and_parent_round_enforced():
    b = grown(1)
    d = b.digests(0)
    with pytest.raises(ValueError, match="parents"):
        b.store.add_block(nb(0, 1, (d[0], d[1])))  # only 2 < 2f+1
    b.add_round()
    with pytest.raises(ValueError, match="wrong round"):
        b.store.add_block(nb(0, 2, (d[0], d[1], d[2])))


def test_uncertified_parent_rejected():
    b = grown(1)
    d0 = b.digests(0)
    extra = nb(0, 1, tuple(d0.values()))
    b.store.add_block(extra)  # certificate never granted
    certified = []
    for p in (1, 2):
        blk = nb(p, 1, tuple(d0.values()))
        b.store.add_block(blk)
        b.store.add_certificate(full_cert(blk, 4))
        certified.append(blk.digest)
    with pytest.raises(ValueError, match="uncertified"):
        b.store.add_block(nb(3, 2, (extra.digest, *certified)))


def test_self_parent_required():
    b = grown(2)
    d1 = b.digests(1)
    others = tuple(d1[p] for p in (1, 2, 3))
    with pytest.raises(ValueError, match="own previous"):
        b.store.add_block(nb(0, 2, others))


def test_equivocation_detected():
    b = grown(1)
    d0 = b.digests(0)
    first = nb(0, 1, tuple(d0[p] for p in (0, 1, 2)))
    b.store.add_block(first)
    with pytest.raises(ValueError, match="equivocated"):
        b.store.add_block(nb(0, 1, tuple(d0[p] for p in (0, 1, 3))))


def test_duplicate_block_and_cert_are_idempotent():
    b = grown(1)
    blk = b.rounds[0][0]
    assert b.store.add_block(blk) is False
    assert b.store.add_certificate(full_cert(blk, 4)) is False


# -- votes -----------------------------------------------------------------


def test_certificate_forms_exactly_at_quorum():
    store = DagStore(4, 1)
    blk = nb(0, 0)
    store.add_block(blk)
    assert store.record_vote(blk.digest, 0) is None
    assert store.record_vote(blk.digest, 0) is None  # duplicate voter
    assert store.record_vote(blk.digest, 1) is None
    cert = store.record_vote(blk.digest, 2)
    assert cert is not None and cert.valid(1)
    assert store.is_certified(blk.digest)
    assert store.record_vote(blk.digest, 3) is None  # already certified


def test_low_quorum_certificate_rejected():
    store = DagStore(4, 1)
    blk = nb(0, 0)
    store.add_block(blk)
    with pytest.raises(ValueError, match="quorum"):
        store.add_certificate(
            Certificate(blk.digest, 0, 0, 0, frozenset({0, 1})))


# -- commit rule -----------------------------------------------------------


def test_leader_schedule_rotates_over_odd_rounds():
    store = DagStore(4, 1)
    assert store.leader_of(0) is None
    assert [store.leader_of(r) for r in (1, 3, 5, 7, 9)] == [0, 1, 2, 3, 0]
    offset = DagStore(4, 1, leader_offset=2)
    assert [offset.leader_of(r) for r in (1, 3)] == [2, 3]


def test_direct_commit_requires_quorum_and_backing():
    b = grown(2)  # rounds 0..1 complete, leader r1 = proposer 0
    d1 = b.digests(1)
    assert b.store.try_commit() == []
    # round-2 blocks that skip the leader: quorum reached, no backing
    non_leader = tuple(d1[p] for p in (1, 2, 3))
    for p in (1, 2, 3):
        blk = nb(p, 2, non_leader)
        b.store.add_block(blk)
        b.store.add_certificate(full_cert(blk, 4))
    assert b.store.try_commit() == []
    assert b.store.direct_support(1) == (3, 0)
    # one backer is still below f+1
    blk = nb(0, 2, tuple(d1[p] for p in (0, 1, 2)))
    b.store.add_block(blk)
    b.store.add_certificate(full_cert(blk, 4))
    assert b.store.direct_support(1) == (4, 1)
    assert b.store.try_commit() == []


def test_direct_commit_orders_leader_history():
    b = grown(3)  # rounds 0..2 full, each block references all prior
    batches = b.store.try_commit()
    assert len(batches) == 1
    batch = batches[0]
    leader = b.digests(1)[0]
    assert batch.leader == leader and batch.round == 1
    # history: all round-0 blocks then the leader block itself
    want = [b.digests(0)[p] for p in range(4)] + [leader]
    assert list(batch.history) == want
    # the other round-1 blocks wait for the next leader
    assert b.store.try_commit() == []
    b.add_round()
    b.add_round()  # round 4 backs the round-3 leader
    (batch2,) = b.store.try_commit()
    assert batch2.round == 3 and batch2.leader == b.digests(3)[1]
    rest_r1 = {b.digests(1)[p] for p in (1, 2, 3)}
    assert rest_r1 < set(batch2.history)
    assert set(b.store.total_order()) == set(batch.history) | set(batch2.history)


def test_walkback_commits_skipped_leader_first():
    b = grown(2)
    d1 = b.digests(1)
    # leader (proposer 0) skips round 2; of the rest only proposer 3
    # references the leader block, so backing stays below f+1
    def r2_parents(p):
        if p == 3:
            return (d1[0], d1[1], d1[2], d1[3])
        return (d1[1], d1[2], d1[3])

    b.add_round(proposers=(1, 2, 3), parents_of=r2_parents)
    assert b.store.try_commit() == []
    b.add_round()  # round 3 references everything; leader r3 = proposer 1
    b.add_round()  # round 4 backs leader r3
    batches = b.store.try_commit()
    assert [bt.round for bt in batches] == [1, 3]
    assert batches[0].leader == d1[0]
    # leader r1 drags its own history; r3 gets the remainder
    assert batches[0].history[-1] == d1[0]
    assert set(b.store.total_order()) == set(
        b.store.committed)


def test_unreachable_skipped_leader_stays_out():
    b = grown(2)
    d1 = b.digests(1)

    def no_leader(p):
        return (d1[1], d1[2], d1[3])

    b.add_round(proposers=(1, 2, 3), parents_of=no_leader)
    b.add_round()
    b.add_round()
    batches = b.store.try_commit()
    assert [bt.round for bt in batches] == [3]
    assert d1[0] not in b.store.committed
    # the abandoned leader block can never commit later
    b.add_round()
    b.add_round()
    for batch in b.store.try_commit():
        assert d1[0] not in batch.history


# -- agreement across delivery orders --------------------------------------


@pytest.mark.parametrize("seed", range(6))
def test_commit_prefix_agrees_under_reordered_delivery(seed):
    rng = random.Random(seed)
    b = grown(8)
    b.store.try_commit()
    reference = [(bt.round, bt.leader, tuple(bt.history)) for bt in b.store.batches]

    def replay(order):
        store = DagStore(4, 1)
        batches = []
        pending = list(order)
        while pending:
            progressed = False
            rest = []
            for kind, item in pending:
                try:
                    if kind == "block":
                        store.add_block(item)
                    else:
                        store.add_certificate(item)
                    progressed = True
                    batches.extend(store.try_commit())
                except ValueError:
                    rest.append((kind, item))
            assert progressed, "delivery stuck"
            pending = rest
        return store, batches

    order = list(b.log)
    rng.shuffle(order)
    store, batches = replay(order)
    got = [(bt.round, bt.leader, tuple(bt.history)) for bt in batches]
    assert got == reference
    assert store.total_order() == b.store.total_order()


def test_dump_and_causal_history():
    b = grown(3)
    text = b.store.dump()
    assert "r0 p0" in text and "r2 p3" in text
    leader = b.digests(1)[0]
    hist = b.store.causal_history(leader)
    assert hist[-1] == leader
    rounds = [b.store.blocks[d].round for d in hist]
    assert rounds == sorted(rounds)
