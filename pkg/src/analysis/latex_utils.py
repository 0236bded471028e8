from pathlib import Path

import pandas as pd

_SPECIALS = {"_": r"\_", "%": r"\%", "&": r"\&", "#": r"\#"}


def latex_escape(text: str) -> str:
    return "".join(_SPECIALS.get(ch, ch) for ch in str(text))


def write_threeparttable(
    df: pd.DataFrame,
    path: Path,
    notes: str | None = None,
    column_format: str | None = None,
    float_format: str = "%.0f",
    index: bool = False,
) -> None:
    # scenario names and secret labels carry underscores and '#'
    escaped = df.rename(columns=latex_escape).map(lambda v: latex_escape(v) if isinstance(v, str) else v)
    table = escaped.to_latex(
        index=index,
        escape=False,
        float_format=float_format,
        column_format=column_format,
    ).strip()

    parts = ["\\begin{threeparttable}", table]
    if notes:
        parts.extend(
            [
                "\\begin{tablenotes}[flushleft]",
                "\\footnotesize",
                f"\\item \\textit{{Notes:}} {notes}",
                "\\end{tablenotes}",
            ]
        )
    parts.append("\\end{threeparttable}")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n")
