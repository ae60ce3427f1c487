from __future__ import annotations

# Exit statuses for codes that need a distinct one; anything else exits 1.
EXIT_CODES: dict[str, int] = {
    "INVALID_CONFIG": 2,
    "MISSING_ARTIFACT": 3,
    "CHECKPOINT_VERSION": 4,
    "CHECKPOINT_INVALID": 4,
}


class NoduleFprError(Exception):
    """Error carrying a stable machine-readable code."""

    def __init__(self, code: str, message: str):
        self.code = code
        self.message = message
        super().__init__(f"{code}: {message}")

    @property
    def exit_code(self) -> int:
        return EXIT_CODES.get(self.code, 1)


def ensure(condition: bool, code: str, message: str) -> None:
    if not condition:
        raise NoduleFprError(code, message)
