import numpy as np


class ContractViolation(ValueError):
    """Raised when an operation's precondition or invariant is breached.

    ``where`` names the module/operation that detected the breach so the CLI
    can report it.
    """

    def __init__(self, where, message):
        self.where = where
        super().__init__(f"{where}: {message}")


def check_finite(where, arr):
    arr = np.asarray(arr)
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ContractViolation(where, f"non-finite value at index {idx}")
