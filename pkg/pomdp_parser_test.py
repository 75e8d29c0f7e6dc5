import numpy as np
import pytest

from case_studies import ad_policy, build_ad_pomdp
from pomdp_parser import PomdpFormatError, parse_policy, parse_policy_text, parse_pomdp, write_policy, write_pomdp

TIGER = """\
# listen or open, two hidden states
discount: 0.9
values: reward
states: 2
actions: listen open
observations: left right
start: uniform
T: listen
identity
T: open : *
uniform
O: listen
0.85 0.15
0.15 0.85
O: open : *
uniform
R: listen : * : * : * -1
R: open : s0 : * : * 10
"""


@pytest.fixture
def model_file(tmp_path):
    def write(text, name="model.pomdp"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return str(path)
    return write


def test_parse_stanzas(model_file):
    pomdp = parse_pomdp(model_file(TIGER, "tiger.pomdp"))
    assert pomdp.name == "tiger"
    assert pomdp.states == ("s0", "s1")
    assert pomdp.actions == ("listen", "open")
    assert np.array_equal(pomdp.transition[0], np.eye(2))
    assert np.allclose(pomdp.transition[1], 0.5)
    assert np.allclose(pomdp.observation[0], [[0.85, 0.15], [0.15, 0.85]])
    assert np.allclose(pomdp.rewards, [[-1.0, 10.0], [-1.0, 0.0]])
    assert np.allclose(pomdp.initial_belief.probs, [0.5, 0.5])


def test_matrix_orientation(model_file):
    body = "states: a b\nactions: go\nobservations: o\nO: go\nuniform\nT: go\n0.9 0.1\n0.2 0.8\n"
    rows = parse_pomdp(model_file("Tcol: false\n" + body))
    assert np.allclose(rows.transition[0], [[0.9, 0.2], [0.1, 0.8]])
    with pytest.raises(PomdpFormatError):
        parse_pomdp(model_file("Tcol: true\n" + body))


def test_entry_form_is_next_given_current(model_file):
    text = "states: a b\nactions: go\nobservations: o\nO: go\nuniform\nT: go\nidentity\nT: go : a : b 0.3\nT: go : a : a 0.7\n"
    pomdp = parse_pomdp(model_file(text))
    assert pomdp.transition[0][1][0] == pytest.approx(0.3)
    assert pomdp.transition[0][0][0] == pytest.approx(0.7)


@pytest.mark.parametrize(
    "text",
    [
        "actions: go\nobservations: o\n",
        "states: a\nactions: go\nobservations: o\nT: stop\nidentity\nO: go\nuniform\n",
        "states: a b\nactions: go\nobservations: o\nT: go\n1 0 0\nO: go\nuniform\n",
        "oops\n",
        "states: a\nactions: go\nobservations: o\nTcol: maybe\n",
        "states: a\nactions: go\nobservations: o\nT: go\nidentity\nO: go\nuniform\nR: go : a : * : o 1\n",
    ],
)
def test_format_errors(model_file, text):
    with pytest.raises(PomdpFormatError):
        parse_pomdp(model_file(text))


def test_write_then_parse(tmp_path):
    ad = build_ad_pomdp()
    path = write_pomdp(ad, str(tmp_path / "ad.pomdp"))
    again = parse_pomdp(path)
    assert again.states == ad.states
    assert np.allclose(again.transition, ad.transition)
    assert np.allclose(again.observation, ad.observation)
    assert again.initial_belief == ad.initial_belief


def test_policy_text():
    ad = build_ad_pomdp()
    policy = parse_policy_text("# no ads while interest is low\nregion b1 + b2 - 0.5 -> a0\ndefault -> a1\n", ad)
    assert policy.actions == ["a0", "a1"]
    assert policy.regions[0][0].terms == ad_policy(ad).regions[0][0].terms


@pytest.mark.parametrize(
    "text",
    [
        "region b1 - 0.5 -> a0\n",
        "region b1 - 0.5 -> a7\ndefault -> a1\n",
        "region b9 -> a0\ndefault -> a1\n",
        "default -> a1\nregion b1 -> a0\n",
        "b1 -> a0\ndefault -> a1\n",
        "region b1 - 0.5\n",
    ],
)
def test_policy_errors(text):
    with pytest.raises(PomdpFormatError):
        parse_policy_text(text, build_ad_pomdp())


def test_policy_file_round_trip(tmp_path):
    ad = build_ad_pomdp()
    path = write_policy(ad_policy(ad), str(tmp_path / "ad.policy"))
    policy = parse_policy(path, ad)
    assert policy.default_action == "a1"
    assert policy.regions[0][0].terms == ad_policy(ad).regions[0][0].terms
