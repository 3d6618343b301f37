"""Deterministic random substreams.

Every (master_seed, replica_id, particle index) owns its own generator, so the
k-th Gaussian increment of particle i in a replica does not depend on N, on
the chunk size used to draw it, or on how replicas are scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# second spawn-key component, one per purpose
_PARTICLE_NOISE = 0
_INITIAL = 1
_AUX = 2

_CHUNK_BUDGET = 1 << 21  # doubles buffered per stream set


@dataclass(frozen=True)
class NoiseStreamSpec:
    master_seed: int
    replica_id: int = 0

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ValueError("master_seed must fit in an unsigned 64-bit integer")
        if int(self.replica_id) < 0:
            raise ValueError("replica_id must be non-negative")

    def _seq(self, *key: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(int(self.master_seed), spawn_key=(int(self.replica_id), *key))

    def particle_generator(self, i: int) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self._seq(_PARTICLE_NOISE, i)))

    def initial_generator(self) -> np.random.Generator:
        """Stream for initial conditions (and mollifier offsets) of this replica."""
        return np.random.Generator(np.random.PCG64(self._seq(_INITIAL)))

    def aux_generator(self, tag: int = 0) -> np.random.Generator:
        """Stream for anything else a replica needs (projections, resampling...)."""
        return np.random.Generator(np.random.PCG64(self._seq(_AUX, tag)))

    def replica(self, replica_id: int) -> "NoiseStreamSpec":
        return NoiseStreamSpec(self.master_seed, replica_id)


class GaussianIncrements:
    """Iterator over per-step vectors of N standard Gaussians.

    Values are drawn in chunks per particle stream; the sequence seen by
    particle i is exactly ``particle_generator(i).standard_normal(...)``.
    """

    def __init__(self, spec: NoiseStreamSpec, n_particles: int, chunk: int | None = None):
        if n_particles < 1:
            raise ValueError("need at least one particle")
        self.n = n_particles
        self.chunk = chunk or max(1, min(1024, _CHUNK_BUDGET // n_particles))
        self._gens = [spec.particle_generator(i) for i in range(n_particles)]
        self._buf = np.empty((n_particles, self.chunk))
        self._pos = self.chunk
        self.step = 0

    def _refill(self):
        for i, g in enumerate(self._gens):
            g.standard_normal(out=self._buf[i])
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos == self.chunk:
            self._refill()
        xi = self._buf[:, self._pos].copy()
        self._pos += 1
        self.step += 1
        return xi

    def __iter__(self):
        return self

    def __next__(self) -> np.ndarray:
        return self.next()
