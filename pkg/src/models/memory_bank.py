"""
Memory Bank Models for AMOC Lab
Handles fixed-capacity FIFO rings of negative keys (clean and adversarial)
"""

from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.errors import ArgumentError


class BankKind(Enum):
    """Which memory bank supplies negatives"""
    CLEAN = "clean"
    ADV = "adv"


class MemoryBank(nn.Module):
    """FIFO queue of detached unit-norm keys"""

    def __init__(self, capacity, dim, seed=0):
        super().__init__()
        if capacity <= 0 or dim <= 0:
            raise ArgumentError(f"capacity and dim must be positive, got K={capacity}, d={dim}")
        self.capacity = capacity
        self.dim = dim
        self.memory: torch.Tensor
        self.register_buffer('memory', self._init_memory(seed))
        self.register_buffer('write_ptr', torch.zeros((), dtype=torch.long))
        self.register_buffer('total_enqueued', torch.zeros((), dtype=torch.long))
        # step at which each slot was last written, -1 for the random init
        self.register_buffer('written_at', torch.full((capacity,), -1, dtype=torch.long))

    @torch.no_grad()
    def _init_memory(self, seed):
        gen = torch.Generator()
        gen.manual_seed(seed)
        return F.normalize(torch.randn(self.capacity, self.dim, generator=gen), dim=1)

    @torch.no_grad()
    def enqueue(self, keys, step=0):
        """Write keys at the pointer with wraparound, overwriting the oldest"""
        keys = keys.detach()
        batch = keys.size(0)
        if batch > self.capacity:
            raise ArgumentError(f"batch of {batch} keys exceeds bank capacity {self.capacity}")
        if keys.dim() != 2 or keys.size(1) != self.dim:
            raise ArgumentError(f"keys must be N x {self.dim}, got {tuple(keys.shape)}")
        keys = F.normalize(keys.to(self.memory.dtype), dim=1)
        ptr = int(self.write_ptr)
        slots = (ptr + torch.arange(batch)) % self.capacity
        self.memory[slots] = keys
        self.written_at[slots] = step
        self.write_ptr.fill_((ptr + batch) % self.capacity)
        self.total_enqueued.add_(batch)

    @torch.no_grad()
    def negatives(self):
        """K x d snapshot, unaffected by later enqueues"""
        return self.memory.clone()

    def staleness(self, step):
        """Mean age in steps of the slots written so far (0 when none are)"""
        written = self.written_at[self.written_at >= 0]
        if written.numel() == 0:
            return 0.0
        return float(step - written.double().mean())

    def __len__(self):
        return self.capacity

    def to_dict(self):
        return {
            'capacity': self.capacity,
            'dim': self.dim,
            'write_ptr': int(self.write_ptr),
            'total_enqueued': int(self.total_enqueued),
        }


class BankPair(nn.Module):
    """M_clean and M_adv; separate storage, separate pointers"""

    def __init__(self, capacity, dim, seed=0):
        super().__init__()
        self.clean = MemoryBank(capacity, dim, seed)
        self.adv = MemoryBank(capacity, dim, seed + 1)

    def bank(self, kind):
        return self.adv if kind == BankKind.ADV else self.clean

    def reset(self, seed=0):
        """Fresh random contents for both banks"""
        capacity, dim = self.clean.capacity, self.clean.dim
        self.clean = MemoryBank(capacity, dim, seed)
        self.adv = MemoryBank(capacity, dim, seed + 1)


def bank_new(K, d, seed):
    return MemoryBank(K, d, seed)


def enqueue(bank, keys, step=0):
    bank.enqueue(keys, step)


def negatives(bank):
    return bank.negatives()
