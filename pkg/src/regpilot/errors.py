"""Exception hierarchy.

Every error carries an ``exit_code`` used by the CLI and a short ``kind``
token used in structured error output.
"""

from __future__ import annotations


class RegpilotError(Exception):
    exit_code = 1
    kind = "error"
    # set by the pipeline to name the stage an error escaped from
    stage: str | None = None

    def to_dict(self) -> dict:
        d = {"error": self.kind, "message": str(self)}
        if self.stage:
            d["stage"] = self.stage
        return d


class InputError(RegpilotError):
    kind = "input_error"


class ParseError(InputError):
    kind = "parse_error"

    def __init__(self, message: str, key: str | None = None, source: str | None = None):
        super().__init__(message)
        self.key = key
        self.source = source


class ConflictError(InputError):
    kind = "conflict_error"

    def __init__(self, message: str, conflicting_id: str):
        super().__init__(message)
        self.conflicting_id = conflicting_id


class ScenarioError(InputError):
    kind = "scenario_error"

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field

    def to_dict(self) -> dict:
        d = super().to_dict()
        if self.field is not None:
            d["field"] = self.field
        return d


class ConfigError(InputError):
    kind = "config_error"

    def __init__(self, message: str, path: str | None = None):
        super().__init__(message)
        self.path = path

    def to_dict(self) -> dict:
        d = super().to_dict()
        if self.path is not None:
            d["path"] = self.path
        return d


class TransportError(RegpilotError):
    exit_code = 2
    kind = "transport_error"

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class FixtureMissError(TransportError):
    kind = "fixture_miss"

    def __init__(self, message: str, digest: str | None = None):
        super().__init__(message)
        self.digest = digest


class InvariantError(RegpilotError):
    exit_code = 3
    kind = "invariant_violation"


class StaleIndexError(InvariantError):
    kind = "stale_index"


class IndexFormatError(InvariantError):
    kind = "index_format"


class MigrationError(IndexFormatError):
    kind = "index_migration"

    def __init__(self, found: int, expected: int):
        super().__init__(
            f"index file format version {found} cannot be read by this build "
            f"(expects version {expected}); rebuild the index"
        )
        self.found = found
        self.expected = expected


class CorruptIndexError(IndexFormatError):
    kind = "index_corrupt"


class ReasoningFormatError(InvariantError):
    """Backend output still malformed after the repair/retry budget."""

    kind = "reasoning_format"

    def __init__(self, message: str, raw_response: str = "", stage: str | None = None,
                 action: str | None = None):
        super().__init__(message)
        self.raw_response = raw_response
        self.stage = stage
        self.action = action

    def to_dict(self) -> dict:
        d = super().to_dict()
        d.update(stage=self.stage, action=self.action, raw_response=self.raw_response)
        return d
