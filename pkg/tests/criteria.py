"""Collects one pass/fail line per acceptance criterion for the run summary."""

CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (bool(passed), detail)
    print(f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}")
