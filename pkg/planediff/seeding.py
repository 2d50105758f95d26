"""Seed derivation and deterministic random generators.

Every random draw in planediff comes from an explicit generator whose seed is
derived from the run seed and the identity of what is being drawn (a patient, a
scan, a timestep), so results never depend on call order.
"""

from __future__ import annotations

import random
from contextlib import contextmanager
from typing import Final, Iterator, Union

import numpy as np
import torch
from crcmod.predefined import mkPredefinedCrcFun  # type: ignore

crc64_func: Final = mkPredefinedCrcFun("crc-64")

SeedPart = Union[int, str]


def derive_seed(*parts: SeedPart) -> int:
    """Map `parts` to a stable unsigned 63-bit seed.

    The mapping is a CRC-64 of the `:`-joined text of the parts, so it is stable
    across processes and Python versions (unlike `hash()`).
    """
    text = ":".join(str(p) for p in parts)
    return crc64_func(text.encode()) & 0x7FFF_FFFF_FFFF_FFFF


def torch_generator(*parts: SeedPart) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(derive_seed(*parts))
    return g


def numpy_generator(*parts: SeedPart) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


@contextmanager
def seeded(*parts: SeedPart) -> Iterator[None]:
    """Run the block with the global torch generator seeded from `parts`, then restore it.

    Module constructors draw their initial weights from the global generator; this
    makes those draws depend on `parts` only.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(*parts))
        yield


def deterministic(seed: int) -> None:
    """Seed the global generators and require deterministic torch kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
