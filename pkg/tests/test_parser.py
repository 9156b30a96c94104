import random

import pytest
from hypothesis import given, settings, strategies as st

from pepamod.model import (
    Amount,
    BinOp,
    Call,
    Cooperation,
    Instance,
    MassAction,
    Name,
    Neg,
    Num,
    Role,
    SpeciesRef,
    check_wellformed,
    has_errors,
    instances,
)
from pepamod.parser import ParseError, format_expr, parse, parse_file, serialize, tokenize

from support import DATA, random_system

CORPUS = ["module1.biopepa", "module7.biopepa", "composed.biopepa"]


@pytest.mark.parametrize("name", CORPUS)
def test_corpus_round_trip(name):
    system = parse_file(DATA / name)
    assert parse(serialize(system)) == system


@pytest.mark.parametrize("name", CORPUS)
def test_corpus_has_no_errors(name):
    assert not has_errors(check_wellformed(parse_file(DATA / name)))


@settings(max_examples=150, deadline=None)
@given(st.randoms(use_true_random=False))
def test_random_system_round_trip(rnd):
    system = random_system(rnd)
    assert not has_errors(check_wellformed(system))
    text = serialize(system)
    assert parse(text) == system
    # serializing is a fixed point after one pass
    assert serialize(parse(text)) == text


def test_named_components_are_inlined():
    system = parse_file(DATA / "module1.biopepa")
    names = [str(i.subject) for i in instances(system.model)]
    assert names == ["alpha@extra", "Ste2@mem", "Bar1active@extra", "Ste2active@mem"]
    assert [i.initial for i in instances(system.model)] == [1000, 1750, 0, 0]


def test_roles_and_stoichiometry():
    s = parse("""
location c : 2 ul, C;
rate v = fMA(1);
A@c = (v, 2) << A@c + v (+) A@c;
B@c = v >> B@c + v (-) B@c + v (.) B@c;
model A@c[3] <v> B@c[0];
""")
    a, b = s.components
    assert [(p.action, p.stoichiometry, p.op) for p in a.prefixes] == [("v", 2, Role.REACTANT), ("v", 1, Role.ACTIVATOR)]
    assert [p.op for p in b.prefixes] == [Role.PRODUCT, Role.INHIBITOR, Role.MODIFIER]
    assert s.model == Cooperation(Instance(SpeciesRef("A", "c"), 3.0), Instance(SpeciesRef("B", "c"), 0.0),
                                  frozenset({"v"}))


def test_expression_precedence():
    s = parse("rate v = -a ^ 2 * b + c / d - e; parameter a = 1;")
    expr = s.rates["v"]
    assert expr == BinOp("-", BinOp("+", BinOp("*", Neg(BinOp("^", Name("a"), Num(2.0))), Name("b")),
                                    BinOp("/", Name("c"), Name("d"))), Name("e"))


def test_power_is_right_associative():
    assert parse("rate v = 2 ^ 3 ^ 2;").rates["v"] == BinOp("^", Num(2.0), BinOp("^", Num(3.0), Num(2.0)))


def test_negative_literals_fold():
    assert parse("rate v = -3;").rates["v"] == Num(-3.0)
    assert format_expr(BinOp("-", Name("a"), Num(-3.0))) == "a - (-3)"


def test_functions_and_mass_action():
    s = parse("rate v = fMA(k * 2) + min(X@c, exp(1)); parameter k = 1;")
    assert s.rates["v"] == BinOp("+", MassAction(BinOp("*", Name("k"), Num(2.0))),
                                 Call("min", (Amount(SpeciesRef("X", "c")), Call("exp", (Num(1.0),)))))


def test_parameters_evaluate_in_order():
    s = parse("parameter a = 2; parameter b = a * 3 + 1;")
    assert s.parameters == {"a": 2.0, "b": 7.0}
    with pytest.raises(ParseError, match="unresolved name c"):
        parse("parameter b = c;")


def test_keyword_named_species():
    s = parse("location l : 1, C; rate v = 1; model@l = v >> model@l; model model@l[0];")
    assert s.components[0].subject == SpeciesRef("model", "l")


@pytest.mark.parametrize("text, fragment", [
    ("rate v = ;", "expected expression"),
    ("location c : 1 ul, X;", "C or M"),
    ("rate v = 1; rate v = 2;", "duplicate definition of rate v"),
    ("A = B; B = A; model A;", "cyclic model component"),
    ("A = X@c[1];", "no 'model' definition"),
    ("rate v = foo(1);", "unknown function foo"),
    ("location c : 1, C; rate v = 1; A@c = v >> B@c; model A@c[1];", "prefix names B@c"),
    ("location c : 1, C; rate v = 1; A@c = (v, 0) << A@c;", "stoichiometry must be a positive integer"),
    ("$", "unexpected character"),
])
def test_parse_errors(text, fragment):
    with pytest.raises(ParseError, match=fragment):
        parse(text)


def test_parse_error_has_position():
    with pytest.raises(ParseError) as info:
        parse("location c : 1, C;\nrate v = (1 + ;", "m.biopepa")
    assert str(info.value).startswith("m.biopepa:2:")
    assert "expected one of" in str(info.value)


def test_comments_and_tokens():
    toks = tokenize("a <*> b // comment\n(+) 1.5e3")
    assert [t.text for t in toks[:-1]] == ["a", "<*>", "b", "(+)", "1.5e3"]
    assert toks[3].span.line == 2


def test_empty_document():
    s = parse("")
    assert s.model is None and not check_wellformed(s)
    assert parse(serialize(s)) == s


def test_large_batch_round_trip():
    for seed in range(300):
        system = random_system(random.Random(seed))
        assert parse(serialize(system)) == system, seed
