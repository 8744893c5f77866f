"""
Codebook Parser

Reads the plain-text recoding codebook. One rule per line, '#' starts a
comment, labels with spaces are quoted shell-style:

    map      <output> <source> <code>=<score> ... [unmapped=error|missing]
    location <output> <source> <code>=<score> ... [unmapped=error|missing]
    sum      <output> <item> <item> ... yes=<code> no=<code>
    compare  <output> <left> <right>

Full grammar: docs/schema.md.
"""

import logging
import math
import shlex
from pathlib import Path
from typing import List, Tuple

from classifiers.recoder import (LOCATION_SCORES, UNMAPPED_POLICIES, CategoricalMap,
                                 CodebookRule, CompositeSumRule, OrdinalCompareRule,
                                 SchoolLocationMap)
from common.errors import CodebookParseError, DataLoadError

logger = logging.getLogger(__name__)


def _split_pair(token: str, line_no: int) -> Tuple[str, str]:
    code, sep, value = token.rpartition('=')
    if not sep or not code:
        raise CodebookParseError(line_no, f"expected <code>=<value>, got '{token}'")
    return code, value


def _parse_score(value: str, line_no: int) -> float:
    try:
        score = float(value)
    except ValueError:
        raise CodebookParseError(line_no, f"score '{value}' is not a number")
    if not math.isfinite(score):
        raise CodebookParseError(line_no, f"score '{value}' is not finite")
    return score


def _parse_map(tokens: List[str], line_no: int) -> CategoricalMap:
    if len(tokens) < 4:
        raise CodebookParseError(line_no, "map rule needs <output> <source> and at least one pair")
    output, source = tokens[1], tokens[2]
    policy = 'error'
    mapping = []
    for token in tokens[3:]:
        code, value = _split_pair(token, line_no)
        if code == 'unmapped':
            if value not in UNMAPPED_POLICIES:
                raise CodebookParseError(line_no, f"unmapped policy must be one of {UNMAPPED_POLICIES}")
            policy = value
            continue
        mapping.append((code, _parse_score(value, line_no)))
    if not mapping:
        raise CodebookParseError(line_no, "map rule has no code pairs")
    try:
        return CategoricalMap(variable=source, mapping=tuple(mapping),
                              unmapped_policy=policy, output=output)
    except ValueError as e:
        raise CodebookParseError(line_no, str(e))


def _parse_location(tokens: List[str], line_no: int) -> SchoolLocationMap:
    rule = _parse_map(tokens, line_no)
    bad = [score for _, score in rule.mapping if score not in LOCATION_SCORES]
    if bad:
        raise CodebookParseError(line_no, f"location scores must be 1, 0 or -1, got {bad}")
    return SchoolLocationMap(rule)


def _parse_sum(tokens: List[str], line_no: int) -> CompositeSumRule:
    output = tokens[1] if len(tokens) > 1 else None
    items, codes = [], {}
    for token in tokens[2:]:
        if token.startswith('yes=') or token.startswith('no='):
            key, value = _split_pair(token, line_no)
            codes[key] = value
        else:
            items.append(token)
    if output is None or not items:
        raise CodebookParseError(line_no, "sum rule needs <output> and at least one item")
    if set(codes) != {'yes', 'no'}:
        raise CodebookParseError(line_no, "sum rule needs yes=<code> and no=<code>")
    return CompositeSumRule(output=output, items=tuple(items),
                            yes_code=codes['yes'], no_code=codes['no'])


def _parse_compare(tokens: List[str], line_no: int) -> OrdinalCompareRule:
    if len(tokens) != 4:
        raise CodebookParseError(line_no, "compare rule is: compare <output> <left> <right>")
    return OrdinalCompareRule(output=tokens[1], left=tokens[2], right=tokens[3])


RULE_PARSERS = {
    'map': _parse_map,
    'location': _parse_location,
    'sum': _parse_sum,
    'compare': _parse_compare,
}


def parse_codebook_text(text: str) -> List[CodebookRule]:
    rules = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        try:
            tokens = shlex.split(line, comments=True)
        except ValueError as e:
            raise CodebookParseError(line_no, str(e))
        if not tokens:
            continue
        kind = tokens[0].lower()
        if kind not in RULE_PARSERS:
            raise CodebookParseError(line_no, f"unknown rule kind '{tokens[0]}'")
        rules.append(RULE_PARSERS[kind](tokens, line_no))
    return rules


def parse_codebook(path) -> List[CodebookRule]:
    path = Path(path)
    if not path.exists():
        raise DataLoadError(f"codebook not found: {path}")
    rules = parse_codebook_text(path.read_text())
    logger.info(f"✓ Parsed {len(rules)} codebook rules from {path.name}")
    return rules
