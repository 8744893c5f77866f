from pathlib import Path

import pandas as pd
import pytest
import yaml

from orchestrator import build_parser, main

MODELS = Path(__file__).resolve().parents[1] / "config" / "models"

RAW = ("school,edu,a,b\n"
       "s1,hi,Yes,No\n"
       "s1,lo,No,No\n"
       "s2,hi,Yes,Yes\n")


@pytest.fixture(autouse=True)
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def null_data(workdir):
    path = workdir / 'null.csv'
    assert main(['--quiet', 'simulate', '--preset', 'paper-model0', '--out', str(path)]) == 0
    return path


@pytest.fixture
def final_data(workdir):
    path = workdir / 'final.csv'
    assert main(['--quiet', 'simulate', '--preset', 'paper-model5', '--out', str(path)]) == 0
    return path


def load_report(path):
    return yaml.safe_load(Path(path).read_text())


def test_simulate_is_byte_identical(workdir):
    a, b = workdir / 'a.csv', workdir / 'b.csv'
    for path in (a, b):
        assert main(['--quiet', 'simulate', '--preset', 'paper-model0', '--seed', '7',
                     '--out', str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()
    main(['--quiet', 'simulate', '--preset', 'paper-model0', '--seed', '8', '--out', str(b)])
    assert a.read_bytes() != b.read_bytes()


def test_simulate_to_stdout(capsys):
    assert main(['--quiet', 'simulate', '--preset', 'paper-model0']) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == 'school,math'
    assert len(lines) == 140 * 33 + 1


def test_simulate_from_sim_config(write_text):
    config = write_text('sim.txt', "groups 4\nsize 3\noutcome score\ngamma intercept=1 x=2\n"
                                   "tau 1\nsigma2 1\nseed 5\n")
    out = config.parent / 'sim.csv'
    assert main(['--quiet', 'simulate', '--sim-config', str(config), '--out', str(out)]) == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == ['school', 'x', 'score']
    assert len(frame) == 12


def test_fit_unconditional_structured(null_data, workdir):
    out = workdir / 'model0.yaml'
    assert main(['--quiet', 'fit', '--data', str(null_data), '--model', str(MODELS / 'model0.txt'),
                 '--format', 'structured', '--out', str(out)]) == 0
    text = out.read_text()
    assert text.startswith('schema: hlm-report/1\n')
    report = load_report(out)
    assert report['command'] == 'fit'
    assert [fe['name'] for fe in report['fit']['fixed_effects']] == ['intercept']
    assert report['fit']['convergence']['converged'] is True
    assert 0 < report['diagnostics']['icc']['icc'] < 1
    assert report['diagnostics']['icc']['N'] == 4620
    assert report['deletion']['rows_deleted'] == 0


def test_structured_output_is_deterministic(null_data, workdir):
    a, b = workdir / 'a.yaml', workdir / 'b.yaml'
    for out in (a, b):
        main(['--quiet', 'fit', '--data', str(null_data), '--model', str(MODELS / 'model0.txt'),
              '--format', 'structured', '--out', str(out)])
    assert a.read_bytes() == b.read_bytes()


def test_fit_final_model(final_data, workdir):
    out = workdir / 'model5.yaml'
    assert main(['--quiet', 'fit', '--data', str(final_data), '--model', str(MODELS / 'model5.txt'),
                 '--null-model', str(MODELS / 'model0.txt'), '--format', 'structured',
                 '--out', str(out)]) == 0
    report = load_report(out)
    assert [fe['name'] for fe in report['fit']['fixed_effects']] == [
        'intercept', 'stueco', 'schlo', 'schrc', 'mo', 'fa', 'hp']
    assert report['fit']['variance_components']['random_effects'] == ['intercept']
    assert len(report['fit']['variance_components']['tau']) == 1
    assert 'variance_explained' in report['diagnostics']
    assert report['null_fit']['model'] == 'Model 0 (unconditional)'


def test_fit_text_report(null_data, capsys):
    assert main(['--quiet', 'fit', '--data', str(null_data),
                 '--model', str(MODELS / 'model0.txt')]) == 0
    out = capsys.readouterr().out
    assert 'FIXED EFFECTS' in out
    assert 'INTRACLASS CORRELATION' in out


def test_fit_exit_codes(null_data, write_text, workdir):
    absent = write_text('absent.txt', "outcome math\nlevel1 ses\n")
    assert main(['--quiet', 'fit', '--data', str(null_data), '--model', str(absent)]) == 5

    slow = write_text('slow.txt', "outcome math\nmaxiter 1\n")
    assert main(['--quiet', 'fit', '--data', str(null_data), '--model', str(slow)]) == 4

    assert main(['--quiet', 'fit', '--data', str(workdir / 'nope.csv'),
                 '--model', str(MODELS / 'model0.txt')]) == 5

    bad = write_text('bad.txt', "outcome math\nmethod OLS\n")
    assert main(['--quiet', 'fit', '--data', str(null_data), '--model', str(bad)]) == 5


def test_recode(write_text, workdir):
    raw = write_text('raw.csv', RAW)
    codebook = write_text('codebook.txt', "map edu_score edu hi=1 lo=0\n"
                                          "sum items a b yes=Yes no=No\n")
    out = workdir / 'recoded.csv'
    report = workdir / 'audit.yaml'
    assert main(['--quiet', 'recode', '--data', str(raw), '--codebook', str(codebook),
                 '--out', str(out), '--format', 'structured', '--report', str(report)]) == 0
    frame = pd.read_csv(out)
    assert frame['edu_score'].tolist() == [1.0, 0.0, 1.0]
    assert frame['items'].tolist() == [1.0, 0.0, 2.0]
    assert [rule['output'] for rule in load_report(report)['recode']['rules']] == ['edu_score', 'items']


def test_recode_exit_codes(write_text, workdir):
    raw = write_text('raw.csv', RAW)
    out = workdir / 'recoded.csv'

    malformed = write_text('bad.txt', "map edu_score edu hi=1\nfrobnicate\n")
    assert main(['--quiet', 'recode', '--data', str(raw), '--codebook', str(malformed),
                 '--out', str(out)]) == 2

    partial = write_text('partial.txt', "map edu_score edu hi=1\n")
    assert main(['--quiet', 'recode', '--data', str(raw), '--codebook', str(partial),
                 '--out', str(out)]) == 3
    assert not out.exists()


def test_diagnose_published_components(capsys):
    assert main(['--quiet', 'diagnose', '--tau00', '2238.6', '--sigma2', '8195.38',
                 '--n-bar', '32.89', '--n-total', '4605']) == 0
    lines = capsys.readouterr().out.splitlines()
    assert any(line.split()[:2] == ['ICC', '0.215'] for line in lines)
    deff = next(line for line in lines if line.strip().startswith('Design effect'))
    assert deff.split()[2] == '7.86'
    assert '7.842 unrounded' in deff
    ess = next(line for line in lines if line.strip().startswith('Effective sample size'))
    assert ess.split()[3] == '585.9'
    assert '587.2 unrounded' in ess


def test_diagnose_data(final_data, workdir):
    out = workdir / 'diag.yaml'
    assert main(['--quiet', 'diagnose', '--data', str(final_data), '--vars', 'math,mo,hp',
                 '--model', str(MODELS / 'model0.txt'), '--format', 'structured',
                 '--out', str(out)]) == 0
    report = load_report(out)['diagnostics']
    assert list(report['descriptives']) == ['math', 'mo', 'hp']
    assert report['correlations']['r']['math']['math'] == 1.0
    assert report['icc']['J'] == 140


def test_diagnose_exit_codes(final_data):
    assert main(['--quiet', 'diagnose', '--data', str(final_data), '--vars', '']) == 5
    assert main(['--quiet', 'diagnose', '--data', str(final_data), '--vars', 'nope']) == 5
    assert main(['--quiet', 'diagnose', '--tau00', '1.0']) == 5


def test_pool_identical_pvs_match_single_fit(null_data, write_text, workdir):
    frame = pd.read_csv(null_data)
    frame['pv1'] = frame['math']
    frame['pv2'] = frame['math']
    data = workdir / 'pvs.csv'
    frame.to_csv(data, index=False)
    spec = write_text('spec.txt', "outcome math\n")

    pooled_out, fit_out = workdir / 'pool.yaml', workdir / 'fit.yaml'
    assert main(['--quiet', 'pool', '--data', str(data), '--model', str(spec), '--pv', 'pv1,pv2',
                 '--format', 'structured', '--out', str(pooled_out)]) == 0
    assert main(['--quiet', 'fit', '--data', str(data), '--model', str(spec),
                 '--format', 'structured', '--out', str(fit_out)]) == 0
    pooled = load_report(pooled_out)['pooled']['fixed_effects'][0]
    single = load_report(fit_out)['fit']['fixed_effects'][0]
    assert pooled['estimate'] == single['estimate']
    assert pooled['se'] == pytest.approx(single['se'], rel=1e-9)
    assert pooled['between'] == 0.0
    assert pooled['df'] == single['df']
    assert pooled['p'] == pytest.approx(single['p'], rel=1e-9)


def test_pool_final_model(final_data, workdir, capsys):
    out = workdir / 'pool.yaml'
    assert main(['--quiet', 'pool', '--data', str(final_data), '--model', str(MODELS / 'model5.txt'),
                 '--format', 'structured', '--out', str(out)]) == 0
    pooled = load_report(out)['pooled']
    assert pooled['M'] == 5
    for pe in pooled['fixed_effects']:
        assert pe['total'] == pytest.approx(pe['within'] + 1.2 * pe['between'])

    assert main(['--quiet', 'pool', '--data', str(final_data), '--model', str(MODELS / 'model5.txt'),
                 '--average-pv']) == 0
    assert 'AVERAGE-PV MODE' in capsys.readouterr().out


def test_pool_needs_two_pvs(final_data):
    assert main(['--quiet', 'pool', '--data', str(final_data), '--model', str(MODELS / 'model5.txt'),
                 '--pv', 'math_pv1']) == 5


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as excinfo:
        build_parser().parse_args(['fit', '--format', 'xml'])
    assert excinfo.value.code == 2


def test_failed_run_leaves_workdir_untouched(workdir, capsys):
    assert main(['fit', '--data', 'nope.csv', '--model', 'nope.txt']) == 5
    assert list(workdir.iterdir()) == []
    assert capsys.readouterr().out == ''


def test_log_file_is_opt_in(settings, workdir):
    config = workdir / 'settings.yaml'
    log = workdir / 'logs' / 'run.log'
    config.write_text(yaml.safe_dump({**settings, 'processing': {'verbose': True,
                                                                 'log_file': str(log)}}))
    assert main(['--config', str(config), 'simulate', '--out', str(workdir / 'sim.csv')]) == 0
    assert 'Simulated 4620 rows' in log.read_text()


@pytest.mark.slow
def test_tutorial(capsys):
    assert main(['--quiet', 'tutorial', '--seed', '2011']) == 0
    out = capsys.readouterr().out
    assert 'Model 0 (unconditional)' in out
    assert "Rubin's rules" in out
