"""Exception types shared across the simulator.

Three failure families show up everywhere: bad wiring (shapes, missing
fields, invalid combinations), numeric blow-ups during a run, and violated
call contracts (mismatched lengths, empty inputs). Keeping them distinct
lets callers react differently to "your config is wrong" vs "the run
diverged".
"""


class ConfigError(ValueError):
    """Invalid configuration: dimension mismatch, bad field value, unknown key."""


class NumericError(ArithmeticError):
    """Non-finite value produced during computation.

    ``context`` carries where it happened (layer index, step index, ...).
    """

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = dict(context)

    def __str__(self):
        base = super().__str__()
        if self.context:
            where = ", ".join(f"{k}={v}" for k, v in sorted(self.context.items()))
            return f"{base} ({where})"
        return base


class ContractViolation(RuntimeError):
    """A call broke an API contract (wrong lengths, empty sequence, bad mode)."""
