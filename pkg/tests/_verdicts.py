"""PASS/FAIL lines of the acceptance criteria, echoed in the terminal summary."""

LINES: list[str] = []


def record(number: int, title: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({detail})"
    LINES.append(line)
    print(line)
    return ok
