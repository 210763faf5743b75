from typing import List, Optional


class BaseStreetNavException(Exception):
    """Base exc class for all exception from this library"""

    pass


class DomainError(BaseStreetNavException, ValueError):
    """This exception is raised if an operation is called with arguments outside
    of its domain (non-positive depth, mismatching dimensions, too few points...)"""

    pass


class FileFormatError(DomainError):
    """Exception for error occurring during parsing of an input file (bad magic,
    malformed header, truncated payload)"""

    def __init__(self, path: Optional[str], msg: str):
        self.path = path
        self.msg = msg
        super().__init__(f"{path}: {msg}" if path else msg)


class ProtocolError(BaseStreetNavException):
    """This exception is raised if a policy breaks the action contract of the
    evaluation simulator"""

    pass


class UsageError(BaseStreetNavException):
    """This exception is raised for command line misuse, it maps to exit code 2"""

    pass


class ManifestValidationError(BaseStreetNavException):
    """This exception is raised if a manifest fails validation as a whole. It carries
    one error record per offending entry"""

    def __init__(self, errors: List[dict], *args):
        self._errors = errors
        super().__init__(*args)

    def errors(self) -> List[dict]:
        return self._errors
