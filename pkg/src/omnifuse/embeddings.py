from dataclasses import dataclass

import numpy as np


@dataclass
class EmbeddingSet:
    """Aligned per-modality embedding matrices for one set of samples."""

    names: list
    matrices: list

    def __post_init__(self):
        if len(self.names) != len(self.matrices) or not self.names:
            raise ValueError("embedding set needs one name per matrix and at least one modality")
        self.matrices = [np.asarray(m, dtype=np.float64) for m in self.matrices]
        n = {m.shape[0] for m in self.matrices}
        if len(n) != 1:
            raise ValueError(f"modalities disagree on sample count: {sorted(n)}")
        if any(m.ndim != 2 or m.shape[1] < 1 for m in self.matrices):
            raise ValueError("each modality must be a 2-D matrix of width >= 1")

    @property
    def n(self):
        return self.matrices[0].shape[0]

    @property
    def widths(self):
        return [m.shape[1] for m in self.matrices]

    def concat(self):
        return np.concatenate(self.matrices, axis=1)

    def take(self, idx):
        return EmbeddingSet(list(self.names), [m[idx] for m in self.matrices])

    def select(self, names):
        keep = [self.names.index(n) for n in names]
        return EmbeddingSet([self.names[k] for k in keep], [self.matrices[k] for k in keep])

    def split_like(self, flat):
        """Cut a concatenated ``(N, sum(widths))`` matrix back into modalities."""
        if flat.shape[1] != sum(self.widths):
            raise ValueError(f"expected width {sum(self.widths)}, got {flat.shape[1]}")
        cuts = np.cumsum(self.widths)[:-1]
        return EmbeddingSet(list(self.names), np.split(flat, cuts, axis=1))
