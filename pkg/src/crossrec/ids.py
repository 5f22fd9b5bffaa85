"""External-id bookkeeping: dense index maps and cross-domain user alignment."""

from dataclasses import dataclass, field

from .errors import ContractError


@dataclass
class IdMap:
    """Bijection between external ids and dense indices, one per entity kind.

    Indices are assigned in first-seen order and are contiguous from zero.
    External ids are kept as given (strings after file ingestion, but any
    hashable works in memory).
    """

    user_index: dict = field(default_factory=dict)
    item_index: dict = field(default_factory=dict)
    user_ids: list = field(default_factory=list)
    item_ids: list = field(default_factory=list)

    def add_user(self, ext) -> int:
        idx = self.user_index.get(ext)
        if idx is None:
            idx = len(self.user_ids)
            self.user_index[ext] = idx
            self.user_ids.append(ext)
        return idx

    def add_item(self, ext) -> int:
        idx = self.item_index.get(ext)
        if idx is None:
            idx = len(self.item_ids)
            self.item_index[ext] = idx
            self.item_ids.append(ext)
        return idx

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)


@dataclass(frozen=True)
class CommonUserAlignment:
    """Users present in two domains, as (source index, target index) pairs.

    Pairs are sorted by target index; each source and each target index
    appears at most once.
    """

    pairs: tuple

    def __post_init__(self):
        src = [p[0] for p in self.pairs]
        tgt = [p[1] for p in self.pairs]
        if len(set(src)) != len(src) or len(set(tgt)) != len(tgt):
            raise ContractError("alignment pairs must not repeat an index")
        if list(tgt) != sorted(tgt):
            raise ContractError("alignment pairs must be sorted by target index")

    def __len__(self) -> int:
        return len(self.pairs)

    def source_indices(self) -> list:
        return [p[0] for p in self.pairs]

    def target_indices(self) -> list:
        return [p[1] for p in self.pairs]
