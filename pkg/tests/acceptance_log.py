"""Collects one verdict per acceptance criterion for the terminal summary."""
RESULTS = {}


def record(criterion: str, passed: bool, detail: str) -> None:
    RESULTS[criterion] = (bool(passed), detail)
    print(f"{criterion}: {'PASS' if passed else 'FAIL'} - {detail}")
