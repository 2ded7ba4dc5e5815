"""Volume-stratified k-fold splitting.

Patients are sorted by total tumor volume (descending, seeded tie shuffle)
and dealt into folds in a serpentine round-robin, so every fold sees a
similar volume distribution. Each cross-validation iteration rotates the
roles: k-2 training folds, one validation fold, one test fold (k-1 training
folds when k < 3 leaves no separate validation fold, so k >= 3 is required
for iterations, while the split itself works for any k >= 1).
"""

from dataclasses import dataclass

import numpy as np

from .params import ConfigurationError


@dataclass
class FoldSplit:
    assignments: dict
    k: int

    def fold_members(self, fold):
        return [pid for pid, f in self.assignments.items() if f == fold]

    def folds(self):
        return [self.fold_members(f) for f in range(self.k)]

    def iteration(self, index):
        """Train/val/test patient ids for cross-validation iteration `index`."""
        if not 0 <= index < self.k:
            raise ConfigurationError(f"iteration index {index} out of range")
        if self.k < 3:
            raise ConfigurationError("cross-validation rotation needs k >= 3")
        test_fold = index
        val_fold = (index + 1) % self.k
        train_folds = [f for f in range(self.k)
                       if f not in (test_fold, val_fold)]
        train = [pid for f in train_folds for pid in self.fold_members(f)]
        return train, self.fold_members(val_fold), self.fold_members(test_fold)


def split_folds(volumes_by_patient, k=5, seed=0):
    """Deal patients into k folds balanced by tumor volume.

    volumes_by_patient maps patient id -> total tumor volume in ml.
    """
    items = list(volumes_by_patient.items())
    if k < 1:
        raise ConfigurationError("k must be at least 1")
    if len(items) < k:
        raise ConfigurationError(
            f"cohort of {len(items)} patients cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    tiebreak = rng.random(len(items))
    order = sorted(range(len(items)),
                   key=lambda i: (-items[i][1], tiebreak[i]))
    assignments = {}
    for rank, idx in enumerate(order):
        cycle, pos = divmod(rank, k)
        fold = pos if cycle % 2 == 0 else k - 1 - pos
        assignments[items[idx][0]] = fold
    return FoldSplit(assignments=assignments, k=k)
