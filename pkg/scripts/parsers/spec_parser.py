"""
Model-Spec and Sim-Config Parser

Both files share one line grammar: a clause keyword followed by
whitespace-separated tokens, `key=value` options, '#' comments.

Model spec:
    name      <label...>
    outcome   <name>
    level1    <name> [center=grand|none] [random=yes|no]
    level2    <name>
    method    REML|ML
    tol       <real>
    maxiter   <int>
    plausible <pv> <pv> ...

Sim config:
    groups <J>            size <n> | sizes <n1> <n2> ...
    outcome <name>        cluster <name>
    gamma intercept=<v> <name>=<v> ...
    predictor <name> level=1|2 gaussian mean=<m> sd=<s>
    predictor <name> level=1|2 categorical values=<v,...> probs=<p,...>
    predictor <name> level=1|2 binomial n=<k> p=<p>
    random <predictor>    tau <row-major entries>    sigma2 <v>
    plausible <M> sd=<s>  seed <int>

Full grammar: docs/schema.md.
"""

import logging
import math
import shlex
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from common.errors import DataLoadError, ModelSpecError, SimConfigError
from estimators.hlm_estimator import CENTERINGS, METHODS, Level1Term, ModelSpec
from simulators.simulator import PredictorGenerator, SimConfig

logger = logging.getLogger(__name__)

YES = ('yes', 'true', '1')
NO = ('no', 'false', '0')


def _lines(text: str, error):
    for line_no, line in enumerate(text.splitlines(), start=1):
        try:
            tokens = shlex.split(line, comments=True)
        except ValueError as e:
            raise error(f"line {line_no}: {e}")
        if tokens:
            yield line_no, tokens[0].lower(), tokens[1:]


def _options(tokens: List[str], line_no: int, error) -> Tuple[List[str], Dict[str, str]]:
    positional, options = [], {}
    for token in tokens:
        key, sep, value = token.partition('=')
        if sep:
            if not key or key in options:
                raise error(f"line {line_no}: bad or repeated option '{token}'")
            options[key.lower()] = value
        else:
            positional.append(token)
    return positional, options


def _number(value: str, line_no: int, error, cast=float):
    try:
        number = cast(value)
    except ValueError:
        raise error(f"line {line_no}: '{value}' is not a valid number")
    if cast is float and not math.isfinite(number):
        raise error(f"line {line_no}: '{value}' is not finite")
    return number


# ---------------------------------------------------------------------------
# Model spec
# ---------------------------------------------------------------------------

def _model_error(message: str) -> ModelSpecError:
    return ModelSpecError(message)


def _single(args: List[str], line_no: int, clause: str) -> str:
    if len(args) != 1:
        raise ModelSpecError(f"'{clause}' takes exactly one value", line_no)
    return args[0]


def parse_model_spec_text(text: str, defaults: Optional[dict] = None) -> ModelSpec:
    """Parse a model spec; `defaults` holds estimation.* settings the clauses override."""
    defaults = defaults or {}
    fields = {
        'outcome': None,
        'method': str(defaults.get('method', 'REML')).upper(),
        'tol': float(defaults.get('tol', 1e-8)),
        'max_iter': int(defaults.get('max_iter', 1000)),
        'name': '',
    }
    level1: List[Level1Term] = []
    level2: List[str] = []
    plausible: List[str] = []

    for line_no, clause, args in _lines(text, _model_error):
        if clause == 'name':
            fields['name'] = ' '.join(args)
        elif clause == 'outcome':
            fields['outcome'] = _single(args, line_no, clause)
        elif clause == 'level1':
            positional, opts = _options(args, line_no, _model_error)
            if len(positional) != 1:
                raise ModelSpecError("level1 takes one predictor name", line_no)
            center = opts.pop('center', 'grand').lower()
            random = opts.pop('random', 'no').lower()
            if opts:
                raise ModelSpecError(f"unknown level1 options {sorted(opts)}", line_no)
            if center not in CENTERINGS:
                raise ModelSpecError(f"center must be one of {CENTERINGS}", line_no)
            if random not in YES + NO:
                raise ModelSpecError("random must be yes or no", line_no)
            level1.append(Level1Term(positional[0], center, random in YES))
        elif clause == 'level2':
            level2.append(_single(args, line_no, clause))
        elif clause == 'method':
            method = _single(args, line_no, clause).upper()
            if method not in METHODS:
                raise ModelSpecError(f"method must be one of {METHODS}", line_no)
            fields['method'] = method
        elif clause == 'tol':
            fields['tol'] = _number(_single(args, line_no, clause), line_no, _model_error)
        elif clause == 'maxiter':
            fields['max_iter'] = _number(_single(args, line_no, clause), line_no, _model_error, int)
        elif clause == 'plausible':
            if not args:
                raise ModelSpecError("plausible needs at least one column", line_no)
            plausible.extend(args)
        else:
            raise ModelSpecError(f"unknown clause '{clause}'", line_no)

    if fields['outcome'] is None and plausible:
        fields['outcome'] = plausible[0]
    if fields['outcome'] is None:
        raise ModelSpecError("model spec has no outcome clause")

    return ModelSpec(
        outcome=fields['outcome'],
        level1_terms=tuple(level1),
        level2_intercept_predictors=tuple(level2),
        method=fields['method'],
        tol=fields['tol'],
        max_iter=fields['max_iter'],
        name=fields['name'],
        plausible_values=tuple(plausible),
    )


def parse_model_spec(path, defaults: Optional[dict] = None) -> ModelSpec:
    path = Path(path)
    if not path.exists():
        raise DataLoadError(f"model spec not found: {path}")
    spec = parse_model_spec_text(path.read_text(), defaults)
    logger.info(f"✓ Parsed model spec {path.name}: {spec.label}")
    return spec


# ---------------------------------------------------------------------------
# Sim config
# ---------------------------------------------------------------------------

def _sim_single(args: List[str], line_no: int, clause: str) -> str:
    if len(args) != 1:
        raise SimConfigError(f"line {line_no}: '{clause}' takes exactly one value")
    return args[0]


def _real_list(value: str, line_no: int) -> Tuple[float, ...]:
    return tuple(_number(v, line_no, SimConfigError) for v in value.split(',') if v != '')


def _parse_predictor(args: List[str], line_no: int) -> PredictorGenerator:
    positional, opts = _options(args, line_no, SimConfigError)
    if len(positional) != 2:
        raise SimConfigError(f"line {line_no}: predictor is: predictor <name> level=<1|2> <distribution> ...")
    name, distribution = positional[0], positional[1].lower()
    entry = {'name': name, 'distribution': distribution,
             'level': _number(opts.pop('level', '1'), line_no, SimConfigError, int)}
    allowed = {'gaussian': ('mean', 'sd'), 'categorical': ('values', 'probs'),
               'binomial': ('n', 'p')}
    if distribution not in allowed:
        raise SimConfigError(f"line {line_no}: unknown distribution '{distribution}'")
    unknown = set(opts) - set(allowed[distribution])
    if unknown:
        raise SimConfigError(f"line {line_no}: options {sorted(unknown)} do not apply to {distribution}")
    for key, value in opts.items():
        if key in ('values', 'probs'):
            entry[key] = _real_list(value, line_no)
        elif key == 'n':
            entry[key] = _number(value, line_no, SimConfigError, int)
        else:
            entry[key] = _number(value, line_no, SimConfigError)
    return PredictorGenerator(**entry)


def parse_sim_config_text(text: str, seed: Optional[int] = None,
                          cluster_column: str = 'school') -> SimConfig:
    """Parse a sim config; an explicit seed overrides the file's seed clause."""
    fields = {'outcome': 'y', 'cluster_column': cluster_column, 'seed': 0,
              'plausible_values': 0, 'pv_sd': 0.0}
    gamma: List[Tuple[str, float]] = []
    predictors: List[PredictorGenerator] = []
    random: List[str] = []
    tau_entries: Optional[Tuple[float, ...]] = None

    for line_no, clause, args in _lines(text, SimConfigError):
        if clause == 'groups':
            fields['J'] = _number(_sim_single(args, line_no, clause), line_no, SimConfigError, int)
        elif clause in ('size', 'sizes'):
            if not args or (clause == 'size' and len(args) != 1):
                raise SimConfigError(f"line {line_no}: '{clause}' needs a value")
            fields['group_sizes'] = tuple(_number(a, line_no, SimConfigError, int) for a in args)
        elif clause == 'outcome':
            fields['outcome'] = _sim_single(args, line_no, clause)
        elif clause == 'cluster':
            fields['cluster_column'] = _sim_single(args, line_no, clause)
        elif clause == 'gamma':
            positional, opts = _options(args, line_no, SimConfigError)
            if positional:
                raise SimConfigError(f"line {line_no}: gamma entries are <name>=<value>")
            gamma.extend((k, _number(v, line_no, SimConfigError)) for k, v in opts.items())
        elif clause == 'predictor':
            predictors.append(_parse_predictor(args, line_no))
        elif clause == 'random':
            random.extend(args)
        elif clause == 'tau':
            tau_entries = tuple(_number(a, line_no, SimConfigError) for a in args)
        elif clause == 'sigma2':
            fields['sigma2'] = _number(_sim_single(args, line_no, clause), line_no, SimConfigError)
        elif clause == 'plausible':
            positional, opts = _options(args, line_no, SimConfigError)
            if len(positional) != 1:
                raise SimConfigError(f"line {line_no}: plausible is: plausible <M> sd=<s>")
            fields['plausible_values'] = _number(positional[0], line_no, SimConfigError, int)
            fields['pv_sd'] = _number(opts.get('sd', '0'), line_no, SimConfigError)
        elif clause == 'seed':
            fields['seed'] = _number(_sim_single(args, line_no, clause), line_no, SimConfigError, int)
        else:
            raise SimConfigError(f"line {line_no}: unknown clause '{clause}'")

    for required in ('J', 'group_sizes', 'sigma2'):
        if required not in fields:
            raise SimConfigError(f"sim config lacks '{required}'")

    q = 1 + len(random)
    if tau_entries is None:
        tau_entries = (0.0,) * (q * q)
    if len(tau_entries) != q * q:
        raise SimConfigError(f"tau needs {q * q} row-major entries for {len(random)} random slopes")
    if seed is not None:
        fields['seed'] = seed

    return SimConfig(gamma=tuple(gamma) or (('intercept', 0.0),),
                     tau=np.asarray(tau_entries, dtype=float).reshape(q, q),
                     predictors=tuple(predictors), random_slopes=tuple(random), **fields)


def parse_sim_config(path, seed: Optional[int] = None, cluster_column: str = 'school') -> SimConfig:
    path = Path(path)
    if not path.exists():
        raise DataLoadError(f"sim config not found: {path}")
    return parse_sim_config_text(path.read_text(), seed=seed, cluster_column=cluster_column)
