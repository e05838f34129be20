"""Volume-based grouping of small clients into virtual clients."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from typing import Sequence

from .core import ClientRecord, SimplexWeights, ValidationError, combine_curves, mix_distributions


@dataclass(frozen=True)
class GroupingConfig:
    tau: int = 50
    merge_trailing: bool = False

    def __post_init__(self):
        if int(self.tau) != self.tau or self.tau < 1:
            raise ValidationError("tau must be a positive integer")


@dataclass(frozen=True)
class ClientGroup:
    members: tuple
    virtual_record: ClientRecord

    @property
    def is_virtual(self) -> bool:
        return len(self.members) > 1


def virtualize(members: Sequence[ClientRecord]) -> ClientRecord:
    """Merge clients into one record with volume-weighted distribution and curve.

    A single member is returned as is. The merged id is the tuple of member ids.
    """
    members = list(members)
    if not members:
        raise ValidationError("cannot virtualize an empty group")
    if len(members) == 1:
        return members[0]
    weights = SimplexWeights.from_volumes([c.n for c in members])
    return ClientRecord(
        id=tuple(c.id for c in members),
        n=sum(c.n for c in members),
        dist=mix_distributions(weights, [c.dist for c in members]),
        curve=combine_curves(weights, [c.curve for c in members]),
    )


def group_clients(clients: Sequence[ClientRecord], config: GroupingConfig = GroupingConfig()) -> list[ClientGroup]:
    """Keep clients with ``n >= tau`` as they are and pack the rest into virtual clients.

    Small clients are taken in ascending order of size (ties by id) and
    dequeued into the current virtual client until it holds ``tau`` samples or
    the queue runs dry. The last virtual client can therefore stay below
    ``tau``; with ``merge_trailing`` it is folded into the previous one.
    Output lists the large clients in input order, then the virtual clients.
    """
    clients = list(clients)
    if not clients:
        raise ValidationError("cannot group an empty client list")
    large = [c for c in clients if c.n >= config.tau]
    small = [c for c in clients if c.n < config.tau]
    try:
        small.sort(key=lambda c: (c.n, c.id))
    except TypeError:
        # ids of mixed types do not compare; order them by repr instead
        small.sort(key=lambda c: (c.n, repr(c.id)))

    queue = deque(small)
    packs: list[list[ClientRecord]] = []
    while queue:
        pack, volume = [], 0
        while volume < config.tau and queue:
            c = queue.popleft()
            pack.append(c)
            volume += c.n
        packs.append(pack)

    if config.merge_trailing and len(packs) > 1 and sum(c.n for c in packs[-1]) < config.tau:
        packs[-2].extend(packs.pop())

    groups = [ClientGroup((c,), c) for c in large]
    groups += [ClientGroup(tuple(p), virtualize(p)) for p in packs]
    return groups


def write_grouping_csv(path, groups: Sequence[ClientGroup]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["group_id", "member_client_id", "n", "n_V"])
        for g, group in enumerate(groups):
            for member in group.members:
                out.writerow([g, member.id, member.n, group.virtual_record.n])
