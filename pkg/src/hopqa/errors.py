"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class HopQAError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(HopQAError, ValueError):
    """A domain object violates one of its invariants."""


class PreconditionError(HopQAError, ValueError):
    """An operation was called with inputs outside its contract."""


# -- placeholders -----------------------------------------------------------


class PlaceholderError(HopQAError):
    pass


class MissingAntecedent(PlaceholderError):
    def __init__(self, k: int) -> None:
        super().__init__(f"no answer recorded for placeholder #{k}")
        self.k = k


class ForwardReference(PlaceholderError, ValidationError):
    def __init__(self, k: int, index: int) -> None:
        super().__init__(f"placeholder #{k} in sub-question {index} refers forward")
        self.k = k
        self.index = index


# -- gateway ----------------------------------------------------------------


class GatewayError(HopQAError):
    pass


class MissingBinding(GatewayError, KeyError):
    def __init__(self, label: str) -> None:
        super().__init__(label)
        self.label = label

    def __str__(self) -> str:
        return f"no binding for input field {self.label!r}"


class BackendTimeout(GatewayError):
    pass


class BackendRejected(GatewayError):
    def __init__(self, status: int, detail: str = "") -> None:
        super().__init__(f"backend rejected request with status {status}: {detail}".rstrip(": "))
        self.status = status


class ScriptExhausted(GatewayError):
    pass


# -- output grammar ---------------------------------------------------------


class FormatError(HopQAError):
    """Model output does not follow the expected grammar."""


class MissingField(FormatError):
    def __init__(self, label: str) -> None:
        super().__init__(f"missing output field {label!r}")
        self.label = label


class DuplicateField(FormatError):
    def __init__(self, label: str) -> None:
        super().__init__(f"output field {label!r} appears more than once")
        self.label = label


class UnparseableBoolean(FormatError):
    pass


class MalformedPlan(FormatError):
    pass


class UnparseableRanking(FormatError):
    pass


# -- retrieval --------------------------------------------------------------


class RetrievalError(HopQAError):
    pass


class MalformedLine(RetrievalError):
    def __init__(self, lineno: int, detail: str) -> None:
        super().__init__(f"line {lineno}: {detail}")
        self.lineno = lineno


class DuplicateDocId(RetrievalError):
    def __init__(self, doc_id: str, lineno: int | None = None) -> None:
        where = f" (line {lineno})" if lineno is not None else ""
        super().__init__(f"duplicate doc_id {doc_id!r}{where}")
        self.doc_id = doc_id


class EmptyIndex(RetrievalError):
    pass


# -- config / evaluation ----------------------------------------------------


class ConfigError(HopQAError, ValueError):
    pass


class DataError(HopQAError, ValueError):
    """Dataset file does not match its schema."""


class EmptyGold(PreconditionError):
    pass


class MissingJudgment(HopQAError):
    def __init__(self, question_id: str) -> None:
        super().__init__(f"no judgment recorded for question {question_id!r}")
        self.question_id = question_id
