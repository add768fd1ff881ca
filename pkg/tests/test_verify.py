from lrpet import verify
from lrpet.cli import main


def test_every_suite_passes_through_cli(capsys):
    assert main(["verify", "all"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert out.count("PASS") >= len(verify.SUITES)


def test_suite_extras_are_optional():
    assert len(verify.energy_transfer(count=5, extras=False)) == 1
    assert len(verify.energy_transfer(count=5)) == 3
    assert len(verify.eckart_young(count=5, candidates=0)) == 2
