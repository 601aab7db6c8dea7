"""Deterministic seeding helpers.

Every stochastic component in the toolkit draws from explicitly seeded
generators so that two runs in one process (or across processes) are
bitwise identical.
"""

import hashlib

import numpy as np
import torch


def stable_seed(*parts) -> int:
    """Derive a 63-bit seed from a sequence of strings/ints via blake2b.

    Unlike ``hash()``, the result does not depend on PYTHONHASHSEED.
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "big") % (2**63)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    return gen


def token_embedding(token: str, dim: int, salt: str = "text") -> np.ndarray:
    """Deterministic pseudo-embedding for a token string.

    Stands in for a pretrained text/label encoder: the same token always
    maps to the same unit vector, distinct tokens are near-orthogonal in
    high dimension.
    """
    rng = np.random.default_rng(stable_seed(salt, token))
    vec = rng.standard_normal(dim)
    return (vec / np.linalg.norm(vec)).astype(np.float64)


def reseed_module(module: torch.nn.Module, seed: int, scale: float = 0.1) -> None:
    """Overwrite all parameters of ``module`` with seeded Gaussian values.

    Iterates parameters in name order so the result is independent of
    construction-time global RNG state.  Biases are zeroed.
    """
    gen = torch_generator(seed)
    for name, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if name.endswith("bias"):
                param.zero_()
            else:
                values = torch.randn(param.shape, generator=gen, dtype=param.dtype)
                param.copy_(values * scale)
