import pandas as pd

from functions.tables import MAX_COL_WIDTH, PRECISION_THREE, PRECISION_TWO, render


def test_render_formats_and_renames():
    df = pd.DataFrame({"name": ["base", "unlearned"], "score": [0.91234, None], "ds": [1234.5, 7.0]})
    text = render(df, {"name": ("Model", {}), "score": ("Score", PRECISION_THREE),
                       "ds": ("DS", PRECISION_TWO)})
    lines = text.splitlines()
    assert lines[0].split() == ["Model", "Score", "DS"]
    assert "0.912" in lines[1] and "1,234.50" in lines[1]
    assert lines[2].split() == ["unlearned", "7.00"]


def test_render_drops_unlisted_columns_and_truncates():
    df = pd.DataFrame({"text": ["x" * 100], "hidden": [1]})
    assert "hidden" not in render(df, {"text": ("Text", {})})
    cell = render(df).splitlines()[1].split()[0]
    assert len(cell) == MAX_COL_WIDTH and cell.endswith("...")
