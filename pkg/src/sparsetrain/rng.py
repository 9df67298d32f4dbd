"""Counter-based random streams.

Every stochastic component draws from a Philox generator keyed by
(user seed, domain, index).  The key fully determines the stream, so any
draw can be reproduced in isolation: sampling step 17's mask does not
require replaying steps 0..16, and call order never matters.
"""

import numpy as np

_MASK64 = (1 << 64) - 1

# Domain tags keep independent uses of the same user seed from colliding.
DOMAIN_MODEL_INIT = 1
DOMAIN_DATA_ALIGN = 2
DOMAIN_DATA_FINETUNE = 3
DOMAIN_VTC = 4
DOMAIN_LDS = 5


def keyed_rng(seed: int, domain: int, index: int = 0) -> np.random.Generator:
    """Generator for the (seed, domain, index) substream.

    domain and index are packed into the second Philox key word, so each
    combination is an independent counter-based stream.
    """
    if not 0 <= domain < (1 << 16):
        raise ValueError(f"domain out of range: {domain}")
    if index < 0:
        raise ValueError(f"index must be non-negative, got {index}")
    key = np.array(
        [seed & _MASK64, ((domain << 48) | (index & ((1 << 48) - 1))) & _MASK64],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))
