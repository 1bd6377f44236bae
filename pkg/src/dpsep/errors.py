"""Exception types shared across the package."""


class DPSEPError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(DPSEPError, ValueError):
    pass


class DimensionMismatch(DPSEPError, ValueError):
    pass


class UnsupportedOrder(DPSEPError, ValueError):
    """Renyi order outside the range the accountant supports."""


class CalibrationOutOfRange(DPSEPError, ValueError):
    """No noise multiplier in the search bracket meets the privacy target."""


class CalibrationMissing(DPSEPError, ValueError):
    pass


class DegenerateUpdate(DPSEPError, RuntimeError):
    """Too many site updates in one pass broke positive definiteness."""


class DimensionOutOfRange(DPSEPError, ValueError):
    pass


class ConfigError(DPSEPError, ValueError):
    """Invalid experiment or engine configuration.

    ``problems`` maps dotted field paths to a human readable complaint.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = {"config": problems}
        self.problems = dict(problems)
        msg = "; ".join(f"{k}: {v}" for k, v in self.problems.items())
        super().__init__(msg)
