"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

RESULTS = {}


def record(number: int, title: str, passed: bool, detail: str = "") -> str:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
    RESULTS[number] = line
    print(line)
    return line


def summary_lines():
    return [RESULTS[k] for k in sorted(RESULTS)]
