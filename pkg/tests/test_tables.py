from fewgraph.harness import EvalReport
from fewgraph.tables import COLUMNS, emit_tables, parse_csv


def _report(**over):
    base = dict(
        accuracy=0.9532, half_width=0.0123, episodes=1000, mode="fewshot",
        config_hash="0123abcd4567", model="gnn", k=5, q=1,
        labeled_fraction=1.0, policy="", hit_rate=None,
    )
    base.update(over)
    return EvalReport(**base)


def test_empty_list_gives_header_only():
    text, csv_text = emit_tables([])
    lines = [l for l in text.splitlines() if l.strip()]
    assert len(lines) == 2  # header + rule
    assert csv_text.splitlines() == [",".join(COLUMNS)]


def test_single_report_row_follows_column_order():
    text, csv_text = emit_tables([_report()])
    rows = csv_text.splitlines()
    assert rows[0] == ",".join(COLUMNS)
    cells = rows[1].split(",")
    by_col = dict(zip(COLUMNS, cells))
    assert by_col["model"] == "gnn"
    assert by_col["mode"] == "fewshot"
    assert by_col["k"] == "5"
    assert by_col["accuracy"] == "95.32"
    assert by_col["half-width"] == "1.23"
    assert by_col["hit-rate"] == "n/a"
    assert by_col["config-hash"] == "0123abcd4567"


def test_text_table_aligns_columns():
    text, _ = emit_tables([_report(), _report(model="proto", accuracy=0.5)])
    lines = text.splitlines()
    assert lines[0].startswith("model")
    starts = [lines[0].index(c.split("-")[0]) for c in ("model", "mode", "episodes")]
    for line in lines[2:]:
        assert len(line) >= starts[-1]


def test_csv_round_trip():
    reports = [
        _report(),
        _report(mode="active", policy="learned", hit_rate=0.715, accuracy=0.561,
                half_width=0.0135),
        _report(episodes=1, half_width=None),
    ]
    _, csv_text = emit_tables(reports)
    parsed = parse_csv(csv_text)
    assert len(parsed) == 3  # header stripped
    again = emit_tables(reports)[1]
    assert parse_csv(again) == parsed
    assert parsed[1][COLUMNS.index("hit-rate")] == "71.50"
    assert parsed[2][COLUMNS.index("half-width")] == "n/a"
