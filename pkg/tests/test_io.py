import numpy as np
import pytest

from purcellkit.errors import ParseError, SchemaError
from purcellkit.io import (
    digest,
    format_stack,
    load_config,
    parse_stack,
    read_csv,
    read_manifest_tag,
    reference_stack,
    write_csv,
)
from purcellkit.tmm import transmission


def test_repeat_block_expands_in_order():
    st = parse_stack("# demo\nambient 1\nsubstrate 1.45\nrepeat 2\n layer 1.46 100\n layer 2.6 70\nend\nlayer 1.46 50\n")
    assert st.name == "demo"
    assert st.layers == ((1.46, 100.0), (2.6, 70.0), (1.46, 100.0), (2.6, 70.0), (1.46, 50.0))
    assert st.substrate_index == 1.45 and st.ambient_index == 1.0


def test_format_round_trip_preserves_optics():
    st = reference_stack("planar")
    back = parse_stack(format_stack(st))
    assert back.layers == st.layers
    assert transmission(back, 740.0) == pytest.approx(transmission(st, 740.0), rel=1e-12)


@pytest.mark.parametrize(
    "text, line",
    [
        ("substrate 1.45\nlayer 1.5 x\n", 2),
        ("substrate 1.45\nlayer 0.5 10\n", 2),
        ("substrate 1.45\nlayer 1.5 -3\n", 2),
        ("substrate 1.45\nrepeat 2\nrepeat 3\n", 3),
        ("substrate 1.45\nend\n", 2),
        ("substrate 1.45\nmirror 2\n", 2),
        ("substrate 1.45\nrepeat 0\n", 2),
        ("substrate 1.45\nrepeat 2\nlayer 1.5 10\n", 2),
    ],
)
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ParseError) as info:
        parse_stack(text, "demo.stack")
    assert info.value.lineno == line
    assert str(info.value).startswith(f"demo.stack:{line}: ")


def test_missing_substrate():
    with pytest.raises(ParseError):
        parse_stack("layer 1.5 10\n")


def test_unknown_reference_stack():
    with pytest.raises(KeyError):
        reference_stack("silver")


def test_csv_round_trip_is_exact(tmp_path):
    x = np.array([0.1, 1 / 3, 1e-300, 12345.678901234567])
    path = write_csv(tmp_path / "t.csv", ["x", "label"], zip(x, "abcd"), manifest="0123abcd", comments=["unit: ns"])
    assert read_manifest_tag(path) == "0123abcd"
    back = read_csv(path, required=("x",))
    np.testing.assert_array_equal(back["x"], x)
    assert back["label"] == list("abcd")


def test_csv_schema_errors(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("# only comments\n")
    with pytest.raises(SchemaError):
        read_csv(p)
    p.write_text("a,b\n1,2\n")
    with pytest.raises(SchemaError):
        read_csv(p, required=("t_ns",))
    p.write_text("a,b\n1,2,3\n")
    with pytest.raises(SchemaError):
        read_csv(p)


def test_config_parse_error(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[cavity\nroc = 1\n")
    with pytest.raises(ParseError):
        load_config(p)


def test_digest_ignores_key_order():
    assert digest({"a": 1, "b": [1.0, 2.0]}) == digest({"b": [1.0, 2.0], "a": 1})
    assert digest({"a": 1}) != digest({"a": 2})
