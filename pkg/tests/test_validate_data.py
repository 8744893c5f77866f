from pathlib import Path

from simulators.simulator import load_preset, simulate
from validate_data import DataValidator, main

MODELS = Path(__file__).resolve().parents[1] / "config" / "models"


def test_simulated_extract_passes(settings, tmp_path, capsys):
    path = tmp_path / 'final.csv'
    simulate(load_preset('paper-model5', settings)).to_csv(path)
    assert main(['--data', str(path), '--model', str(MODELS / 'model5.txt')]) == 0
    out = capsys.readouterr().out
    assert 'VALIDATION PASSED' in out
    assert "'schrc' is constant within groups" in out


def test_varying_level2_predictor_fails(write_text, capsys):
    data = write_text('bad.csv', "school,w,y\na,1,2\na,2,3\nb,3,4\nb,3,5\nc,4,1\nc,4,2\n")
    model = write_text('model.txt', "outcome y\nlevel2 w\n")
    validator = DataValidator(str(data), str(model))
    assert not validator.validate_all()
    assert any("varies within 1 groups" in e for e in validator.errors)


def test_missing_cells_warn_and_absent_columns_fail(write_text):
    data = write_text('holes.csv', "school,x,y\na,1,2\na,NA,3\nb,3,4\nb,abc,5\n"
                                   "c,4,1\nc,5,2\nc,6,3\nc,7,1\n")
    model = write_text('model.txt', "outcome y\nlevel1 x\n")
    validator = DataValidator(str(data), str(model))
    assert validator.validate_all()
    assert any("'x': 1 non-numeric" in w for w in validator.warnings)
    assert any("'x': 2 missing" in w for w in validator.warnings)

    absent = write_text('absent.txt', "outcome y\nlevel1 ses\n")
    validator = DataValidator(str(data), str(absent))
    assert not validator.validate_all()
    assert any("ses" in e for e in validator.errors)


def test_unreadable_inputs_fail(tmp_path, write_text):
    model = write_text('model.txt', "outcome y\n")
    assert main(['--data', str(tmp_path / 'nope.csv'), '--model', str(model)]) == 1
