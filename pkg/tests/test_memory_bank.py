import pytest
import torch
import torch.nn.functional as F

from src.errors import ArgumentError
from src.models.memory_bank import BankKind, BankPair, bank_new, enqueue, negatives


def test_new_bank_is_unit_norm_and_seeded():
    a = bank_new(16, 4, seed=3)
    b = bank_new(16, 4, seed=3)
    assert torch.equal(a.memory, b.memory)
    assert torch.allclose(a.memory.norm(dim=1), torch.ones(16), atol=1e-6)


def test_fifo_matches_a_reference_ring():
    gen = torch.Generator().manual_seed(0)
    bank = bank_new(13, 3, seed=0)
    reference = bank.memory.clone()
    written = 0
    for step in range(400):
        size = int(torch.randint(1, 14, (1,), generator=gen))
        keys = torch.randn(size, 3, generator=gen)
        enqueue(bank, keys, step)
        for row in F.normalize(keys, dim=1):
            reference[written % 13] = row
            written += 1
        assert torch.allclose(bank.memory, reference, atol=1e-6)
    assert int(bank.total_enqueued) == written
    assert int(bank.write_ptr) == written % 13


def test_negatives_is_a_snapshot():
    bank = bank_new(8, 2, seed=0)
    snapshot = negatives(bank)
    enqueue(bank, torch.ones(3, 2))
    assert not torch.equal(snapshot, bank.memory)


def test_oversized_batch_is_rejected():
    bank = bank_new(4, 2, seed=0)
    with pytest.raises(ArgumentError):
        enqueue(bank, torch.ones(5, 2))
    with pytest.raises(ArgumentError):
        enqueue(bank, torch.ones(2, 3))


def test_staleness_tracks_written_slots():
    bank = bank_new(4, 2, seed=0)
    assert bank.staleness(10) == 0.0
    enqueue(bank, torch.ones(2, 2), step=3)
    enqueue(bank, torch.ones(2, 2), step=5)
    assert bank.staleness(7) == pytest.approx(3.0)


def test_bank_pair_has_independent_storage():
    pair = BankPair(8, 2, seed=0)
    enqueue(pair.bank(BankKind.CLEAN), torch.ones(3, 2))
    assert int(pair.adv.total_enqueued) == 0
    assert int(pair.clean.total_enqueued) == 3
    assert not torch.equal(pair.clean.memory, pair.adv.memory)


def test_random_init_rows_are_nearly_orthogonal_on_average():
    d = 64
    bank = bank_new(256, d, seed=1)
    cosine = bank.memory @ bank.memory.t()
    off_diagonal = cosine[~torch.eye(256, dtype=torch.bool)]
    assert abs(float(off_diagonal.mean())) < 3 / d ** 0.5
