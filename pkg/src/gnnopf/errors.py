"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates an operation's preconditions (shape, index, range)."""


class CaseParseError(ValueError):
    """A case file is malformed. ``path`` names the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class CaseValidationError(ValueError):
    """A parsed case breaks a structural rule. ``rule`` names it."""

    def __init__(self, rule, message):
        self.rule = rule
        super().__init__(f"[{rule}] {message}")


class TrainingError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


class DatasetError(RuntimeError):
    """A dataset or container file cannot be read (version, truncation, corruption)."""
