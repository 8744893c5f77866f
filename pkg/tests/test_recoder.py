from pathlib import Path

import numpy as np
import pytest

from classifiers.recoder import (CategoricalMap, CompositeSumRule, OrdinalCompareRule,
                                 apply_categorical_map, apply_codebook, apply_composite_sum,
                                 apply_ordinal_compare, apply_school_location_map, normalize_code)
from common.errors import CodebookParseError, MissingColumnError, UnmappedCategoryError
from conftest import make_dataset
from parsers.codebook_parser import parse_codebook, parse_codebook_text

CODEBOOK = Path(__file__).resolve().parents[1] / "config" / "codebook_timss2011.txt"

PARENT_EDUCATION = {
    "Bachelor's Degree or higher": 5,
    "Associate's Degree": 4,
    "High school": 3,
    "Lower-Secondary": 2,
    "Primary or lower": 1,
    "The student doesn't know": 0,
}
ITEMS = ['has_computer', 'has_desk', 'has_own_books', 'has_own_room', 'has_internet',
         'has_learning_media']


@pytest.fixture
def rules():
    return parse_codebook(CODEBOOK)


def raw_survey(**overrides):
    n = len(PARENT_EDUCATION)
    columns = {
        'school': ['s1', 's1', 's1', 's2', 's2', 's2'],
        'mother_education': list(PARENT_EDUCATION),
        'father_education': list(reversed(list(PARENT_EDUCATION))),
        'pct_affluent': ['3', '1', '2', '4', '1', '2'],
        'pct_disadvantaged': ['1', '4', '2', '1', '1', '3'],
        'area_income': ['High income', 'Medium income', 'Low income'] * 2,
    }
    for k, item in enumerate(ITEMS):
        columns[item] = ['Yes' if row >= k else 'No' for row in range(n)]
    columns.update(overrides)
    return make_dataset(columns)


def test_shipped_codebook_parses(rules):
    assert [type(r).__name__ for r in rules] == ['CategoricalMap', 'CategoricalMap',
                                                 'CompositeSumRule', 'OrdinalCompareRule',
                                                 'SchoolLocationMap']


def test_parent_education_scores(rules):
    recoded, _ = apply_codebook(raw_survey(), rules)
    assert recoded.values('mo').tolist() == [5.0, 4.0, 3.0, 2.0, 1.0, 0.0]
    assert recoded.values('fa').tolist() == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]


def test_home_possessions_sum(rules):
    recoded, _ = apply_codebook(raw_survey(), rules)
    # row r answers Yes to items 0..r
    assert recoded.values('hp').tolist() == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]


def test_economic_background_compare(rules):
    recoded, _ = apply_codebook(raw_survey(), rules)
    assert recoded.values('stueco').tolist() == [1.0, -1.0, 0.0, 1.0, 0.0, -1.0]


def test_school_location(rules):
    recoded, _ = apply_codebook(raw_survey(), rules)
    assert recoded.values('schlo').tolist() == [1.0, 0.0, -1.0, 1.0, 0.0, -1.0]


def test_audit_table(rules):
    _, audit = apply_codebook(raw_survey(), rules)
    assert audit['output'].tolist() == ['mo', 'fa', 'hp', 'stueco', 'schlo']
    assert audit['kind'].tolist() == ['map', 'map', 'sum', 'compare', 'location']
    assert (audit['rows_scored'] == 6).all()


def test_unmapped_category_is_an_error(rules):
    labels = list(PARENT_EDUCATION)
    labels[2] = 'Doctorate*'
    with pytest.raises(UnmappedCategoryError) as excinfo:
        apply_codebook(raw_survey(mother_education=labels), rules)
    assert excinfo.value.category == 'Doctorate*'
    assert excinfo.value.row == 2
    assert excinfo.value.exit_code == 3


def test_unmapped_policy_missing():
    rule = CategoricalMap('edu', (('a', 1.0), ('b', 2.0)), unmapped_policy='missing')
    out = apply_categorical_map(make_dataset({'school': ['s'] * 3, 'edu': ['a', 'zz', 'b']}), rule)
    assert np.isnan(out.values('edu')[1])
    assert out.values('edu')[[0, 2]].tolist() == [1.0, 2.0]


def test_missing_input_stays_missing():
    rule = CategoricalMap('edu', (('a', 1.0),), output='score')
    out = apply_categorical_map(make_dataset({'school': ['s', 's'], 'edu': ['a', None]}), rule)
    assert out.values('score')[0] == 1.0
    assert np.isnan(out.values('score')[1])


def test_numeric_codes_normalized():
    assert normalize_code('1.0') == normalize_code(1) == normalize_code(' 1 ') == '1'
    assert normalize_code(np.nan) is None
    rule = CategoricalMap('x', (('1', 10.0), ('2', 20.0)))
    out = apply_categorical_map(make_dataset({'school': ['s', 's'], 'x': [2.0, 1.0]}), rule)
    assert out.values('x').tolist() == [20.0, 10.0]


def test_duplicate_source_codes_rejected():
    with pytest.raises(ValueError):
        CategoricalMap('x', (('1', 1.0), ('1.0', 2.0)))


def test_composite_sum_bounds_and_missing():
    rule = CompositeSumRule('total', ('a', 'b', 'c'), yes_code='Yes', no_code='No')
    ds = make_dataset({'school': ['s'] * 4,
                       'a': ['Yes', 'No', 'Yes', 'Yes'],
                       'b': ['Yes', 'No', None, 'Yes'],
                       'c': ['Yes', 'No', 'Yes', 'Maybe']})
    total = apply_composite_sum(ds, rule).values('total')
    assert total[:2].tolist() == [3.0, 0.0]
    assert np.isnan(total[2]) and np.isnan(total[3])


def test_composite_sum_missing_item_column():
    rule = CompositeSumRule('total', ('a', 'b'), yes_code='1', no_code='0')
    with pytest.raises(MissingColumnError):
        apply_composite_sum(make_dataset({'school': ['s'], 'a': ['1']}), rule)


def test_ordinal_compare_is_antisymmetric():
    ds = make_dataset({'school': ['s'] * 5, 'l': [3, 1, 2, np.nan, 4], 'r': [1, 4, 2, 1, 3]})
    forward = apply_ordinal_compare(ds, OrdinalCompareRule('f', 'l', 'r')).values('f')
    backward = apply_ordinal_compare(ds, OrdinalCompareRule('b', 'r', 'l')).values('b')
    assert forward[:3].tolist() == [1.0, -1.0, 0.0]
    assert np.isnan(forward[3])
    assert np.array_equal(forward[[0, 1, 2, 4]], -backward[[0, 1, 2, 4]])


def test_location_scores_restricted():
    rule = CategoricalMap('area', (('High', 2.0),))
    with pytest.raises(ValueError):
        apply_school_location_map(make_dataset({'school': ['s'], 'area': ['High']}), rule)


def test_recoding_is_row_local(rules):
    ds = raw_survey()
    recoded, _ = apply_codebook(ds, rules)
    order = [5, 3, 0, 1, 4, 2]
    shuffled = make_dataset(ds.frame.iloc[order].reset_index(drop=True))
    recoded_shuffled, _ = apply_codebook(shuffled, rules)
    for column in ('mo', 'fa', 'hp', 'stueco', 'schlo'):
        assert recoded_shuffled.values(column).tolist() == recoded.values(column)[order].tolist()


# ---------------------------------------------------------------------------
# Codebook grammar
# ---------------------------------------------------------------------------

def test_parse_map_with_quoted_labels_and_policy():
    rules = parse_codebook_text('# comment\n\nmap mo edu "High school"=3 "Primary"=1 unmapped=missing\n')
    assert len(rules) == 1
    rule = rules[0]
    assert rule.target == 'mo' and rule.variable == 'edu'
    assert rule.mapping == (('High school', 3.0), ('Primary', 1.0))
    assert rule.unmapped_policy == 'missing'


@pytest.mark.parametrize('text, line_no', [
    ("map mo edu a=1\nbogus x y\n", 2),
    ("map mo edu a\n", 1),
    ("map mo edu a=high\n", 1),
    ("\n\nlocation schlo area High=2\n", 3),
    ("sum hp a b c\n", 1),
    ("compare stueco left\n", 1),
    ('map mo edu "unterminated=1\n', 1),
    ("map mo edu a=1 unmapped=ignore\n", 1),
])
def test_codebook_parse_errors_carry_line_number(text, line_no):
    with pytest.raises(CodebookParseError) as excinfo:
        parse_codebook_text(text)
    assert excinfo.value.line_no == line_no
    assert excinfo.value.exit_code == 2
    assert f"line {line_no}" in str(excinfo.value)
