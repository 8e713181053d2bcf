from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from unipact.dataset import DEFAULT_ROLE, DEFAULT_TASK_DESC
from unipact.prompting import (
    ANSWER_INSTRUCTION,
    BIOMETRIC_FIELDS,
    DEMOGRAPHIC_FIELDS,
    FULL_MASK,
    NUMERIC_FIELDS,
    VITAL_FIELDS,
    AblationMask,
    EhrRecord,
    TemplateError,
    TemplateRegistry,
    assemble_full_text,
    render_prompt,
    render_question,
)

GOLDEN = (
    "The demographics information: 30.0 year-old, black African American, female. "
    "The vital parameters: temperature 36.1, heartrate 88.0, resprate 16.0. "
    "The biometrics information: bmi 31.1, weight 84.8, height 165.1."
)
FIXTURES = Path(__file__).parent / "fixtures"


def reference_record():
    return EhrRecord(age=30.0, race="black African American", sex="female", temperature=36.1, heartrate=88.0,
                     resprate=16.0, bmi=31.1, weight=84.8, height=165.1)


def test_reference_prompt_exact():
    assert render_prompt(reference_record()).text == GOLDEN


def test_field_counts():
    assert (len(DEMOGRAPHIC_FIELDS), len(BIOMETRIC_FIELDS), len(VITAL_FIELDS)) == (3, 3, 7)


def test_all_groups_masked_is_empty():
    m = AblationMask(include_demographics=False, include_biometrics=False, include_vitals=False)
    assert render_prompt(reference_record(), m).text == ""
    assert render_prompt(reference_record(), AblationMask(include_ehr=False)).text == ""


def test_single_vital():
    m = AblationMask(include_demographics=False, include_biometrics=False)
    assert render_prompt(EhrRecord(heartrate=72.0), m).text == "The vital parameters: heartrate 72.0."


def test_question_rendering():
    q = "Will the patient experience severe hypoxemia"
    want = "Will the patient experience severe hypoxemia? Answer strictly with Yes or No."
    assert render_question("t", q) == want
    assert render_question("t", q + "?") == want
    assert render_question("t", q).count("?") == 1
    with pytest.raises(ValueError):
        render_question("t", "  ?")


def test_question_deterministic():
    outs = {render_question("mortality_30d", "Will the patient die within 30 days") for _ in range(100)}
    assert len(outs) == 1


def test_full_text_golden():
    q = render_question("hypoxemia", "Will the patient experience severe hypoxemia")
    text = assemble_full_text(DEFAULT_ROLE, DEFAULT_TASK_DESC, render_prompt(reference_record()), q)
    assert text + "\n" == (FIXTURES / "golden_full_text.txt").read_text(encoding="utf-8")


def test_full_text_without_role():
    p = render_prompt(reference_record())
    assert assemble_full_text("", "", p, "Q? " + ANSWER_INSTRUCTION) == GOLDEN + " Q? " + ANSWER_INSTRUCTION


def test_role_swap_is_local():
    p = render_prompt(reference_record())
    a = assemble_full_text("Role A.", "Task.", p, "Q?")
    b = assemble_full_text("Role B.", "Task.", p, "Q?")
    assert a.replace("Role A.", "Role B.", 1) == b


def test_spans_cover_sentences():
    p = render_prompt(reference_record())
    raw = p.text.encode("utf-8")
    starts = [p.group_spans[g] for g in ("demographics", "vitals", "biometrics")]
    assert [s for s, _ in starts] == sorted(s for s, _ in starts)
    assert raw[starts[0][0]:starts[0][1]].decode().startswith("The demographics")
    assert starts[-1][1] == len(raw)


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        EhrRecord(age=float("nan"))
    with pytest.raises(ValueError):
        EhrRecord.from_dict({"agee": 3})


def test_registry_round_trip(tmp_path):
    path = tmp_path / "templates.txt"
    TemplateRegistry().dump(path)
    reg = TemplateRegistry.load(path)
    assert render_prompt(reference_record(), FULL_MASK, reg).text == GOLDEN


@pytest.mark.parametrize("bad", [
    "The vitals {temperature}",  # no header
    "The vitals: {temperature} {heartrate}.",  # two placeholders in one fragment
    "The vitals: {age}.",  # field of another group
])
def test_bad_templates(bad):
    t = dict(TemplateRegistry().raw)
    t["vitals"] = bad
    with pytest.raises(TemplateError):
        TemplateRegistry(t)


_value = st.one_of(st.none(), st.floats(-500, 500, allow_nan=False).map(lambda v: round(v, 3)))


@st.composite
def records(draw):
    d = {f: draw(_value) for f in NUMERIC_FIELDS}
    d["race"] = draw(st.sampled_from([None, "white", "Asian"]))
    d["sex"] = draw(st.sampled_from([None, "female", "male"]))
    return EhrRecord(**d)


masks = st.builds(AblationMask, st.booleans(), st.booleans(), st.booleans(), st.booleans(), st.booleans())


@settings(max_examples=80, deadline=None)
@given(records(), masks)
def test_deterministic_and_monotone(rec, mask):
    full = render_prompt(rec, FULL_MASK)
    part = render_prompt(rec, mask)
    assert part.text == render_prompt(rec, mask).text
    # every rendered group sentence of the masked prompt appears verbatim in the full prompt
    raw_full = full.text.encode("utf-8")
    raw_part = part.text.encode("utf-8")
    for g, (s, e) in part.group_spans.items():
        fs, fe = full.group_spans[g]
        assert raw_part[s:e] == raw_full[fs:fe]
    order = [part.group_spans[g][0] for g in ("demographics", "vitals", "biometrics") if g in part.group_spans]
    assert order == sorted(order)


@settings(max_examples=80, deadline=None)
@given(records())
def test_numeric_fidelity(rec):
    text = render_prompt(rec).text
    for f in NUMERIC_FIELDS:
        v = getattr(rec, f)
        if v is None:
            continue
        s = "%.1f" % v
        assert s in text
        assert abs(float(s) - v) <= 0.05 + 1e-9
