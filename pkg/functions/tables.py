import pandas as pd

MAX_COL_WIDTH = 60


def get_numeric_style_with_precision(precision: int) -> dict:
    return {"type": "numeric", "precision": precision}


PRECISION_TWO = get_numeric_style_with_precision(2)
PRECISION_THREE = get_numeric_style_with_precision(3)


def _format_value(value, style: dict):
    if value is None or (isinstance(value, float) and pd.isna(value)):
        return ""
    kind = style.get("type")
    if kind == "numeric":
        return f"{value:,.{style['precision']}f}"
    text = str(value)
    return text if len(text) <= MAX_COL_WIDTH else text[:MAX_COL_WIDTH - 3] + "..."


def render(df: pd.DataFrame, formatter: dict = None) -> str:
    """Aligned plain-text table.

    formatter maps column -> (header, style); columns missing from formatter are dropped,
    and a None formatter keeps every column as plain text.
    """
    if formatter is None:
        formatter = {col: (col, {}) for col in df.columns}
    out = pd.DataFrame(index=df.index)
    for name, (header, style) in formatter.items():
        if name in df.columns:
            out[header] = [_format_value(v, style) for v in df[name]]
    return out.to_string(index=False)
