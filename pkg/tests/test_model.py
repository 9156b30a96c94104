import math

import pytest

from pepamod.model import (
    Severity,
    SpeciesInfo,
    SpeciesRef,
    amount_to_level,
    check_wellformed,
    has_errors,
)
from pepamod.parser import parse

BASE = """
location c : 1 ul, C;
parameter k = 0.5;
rate v = fMA(k);
A@c = v << A@c;
B@c = v >> B@c;
model A@c[10] <*> B@c[0];
"""


def messages(text):
    return [(d.severity, d.message) for d in check_wellformed(parse(text))]


def test_clean_model():
    assert messages(BASE) == []


def test_missing_rate_for_changing_action_is_error():
    diags = messages(BASE.replace("rate v = fMA(k);", ""))
    assert (Severity.ERROR, "action v has no functional rate") in diags


def test_missing_rate_for_regulator_is_warning():
    text = BASE.replace("B@c = v >> B@c;", "B@c = v >> B@c + w (+) B@c;")
    diags = messages(text)
    assert diags == [(Severity.WARNING, "action w has no functional rate and only regulates; it is dropped")]
    assert not has_errors(check_wellformed(parse(text)))


def test_unknown_names_in_rate():
    diags = messages(BASE.replace("fMA(k)", "fMA(q) * Z@c"))
    assert (Severity.ERROR, "unknown parameter q in rate v") in diags
    assert (Severity.ERROR, "unknown species Z@c in rate v") in diags


def test_unused_rate_warns():
    diags = messages(BASE + "rate u = 1;")
    assert diags == [(Severity.WARNING, "rate u is not used by any species component")]


@pytest.mark.parametrize("edit, fragment", [
    (("location c : 1 ul, C;", "location c : 0 ul, C;"), "positive size"),
    (("A@c = v << A@c;", "A@c = v << A@c + v << A@c;"), "duplicate prefix"),
    (("B@c[0]", "B@c[0] <*> A@c[1]"), "more than once"),
    (("model A@c[10] <*> B@c[0];", "model A@c[10];"), "not part of the model component"),
    (("A@c = v << A@c;", "A@d = v << A@d;"), "unknown location d"),
    (("<*>", "<w>"), "cooperation set"),
    (("<*>", "<>"), "shared but not synchronised"),
])
def test_errors(edit, fragment):
    text = BASE.replace(*edit)
    diags = check_wellformed(parse(text))
    assert has_errors(diags)
    assert any(fragment in d.message for d in diags), diags


def test_shared_but_unsynchronised_action():
    text = BASE.replace("<*>", "<u>").replace("B@c = v >> B@c;", "B@c = v >> B@c + u (+) B@c;")
    text = text.replace("A@c = v << A@c;", "A@c = v << A@c + u (+) A@c;") + "rate u = 1;"
    diags = check_wellformed(parse(text))
    assert any("shared but not synchronised" in d.message for d in diags)


def test_species_info_checks():
    text = BASE + "info A@c : step 0; info Z@c : step 1; info B@c : step 1, max 5;"
    msgs = [d.message for d in check_wellformed(parse(text))]
    assert "step size of A@c must be positive" in msgs
    assert "species information for undeclared species Z@c" in msgs
    text = BASE + "info A@c : step 1, max 5;"
    msgs = [d.message for d in check_wellformed(parse(text))]
    assert "initial amount of A@c exceeds its maximum 5" in msgs


def test_levels():
    info = SpeciesInfo(SpeciesRef("A", "c"), 50.0, 1750.0)
    assert info.max_level == 35
    assert amount_to_level(0, info) == 0
    assert amount_to_level(74, info) == 1
    assert amount_to_level(75, info) == 2
    assert amount_to_level(10_000, info) == 35
    with pytest.raises(ValueError):
        amount_to_level(-1, info)
    assert SpeciesInfo(SpeciesRef("A", "c"), 10.0, 55.0).max_level == math.ceil(5.5)


def test_species_ref_parse():
    assert SpeciesRef.parse("Bar1active@extra") == SpeciesRef("Bar1active", "extra")
    assert str(SpeciesRef("X", "c")) == "X@c"
    with pytest.raises(ValueError):
        SpeciesRef.parse("nolocation")
