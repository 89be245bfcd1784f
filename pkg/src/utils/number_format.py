"""
Number formatting helpers for logs and artefacts.
Round-trip float text for CSV/JSON and abbreviated counts for log lines.
"""

from typing import Iterable, List

from utils.config import FLOAT_FORMAT


def format_float(value: float) -> str:
    """
    Format a float with 17 significant digits so it parses back bit-exactly.

    Examples:
        >>> format_float(0.1)
        '0.10000000000000001'
        >>> format_float(2.0)
        '2'
    """
    return format(float(value), FLOAT_FORMAT)


def format_row(values: Iterable[object]) -> List[str]:
    """Format a CSV row: floats round-trip, everything else via str()."""
    row = []
    for value in values:
        if isinstance(value, bool):
            row.append("true" if value else "false")
        elif isinstance(value, float):
            row.append(format_float(value))
        else:
            row.append(str(value))
    return row


def humanize_count(number: float) -> str:
    """
    Convert large counts (kernel entries, samples) to abbreviated form.

    Examples:
        >>> humanize_count(1234)
        '1.23K'
        >>> humanize_count(2500000)
        '2.50M'
    """
    if number >= 1_000_000_000:
        return f"{number / 1_000_000_000:.2f}B"

    if number >= 1_000_000:
        return f"{number / 1_000_000:.2f}M"

    if number >= 1_000:
        return f"{number / 1_000:.2f}K"

    return f"{number:.0f}"
