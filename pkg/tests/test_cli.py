import json

import numpy as np
import pytest

from meetsep.cli import main
from meetsep.sessionio import read_rttm, read_wav, write_wav
from meetsep.spectral import MultiChannelWave


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    lines = out.splitlines()
    assert len(lines) == 1, out
    return code, json.loads(lines[0])


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    code = main(["simulate", "--speakers", "2", "--channels", "3", "--duration", "8",
                 "--overlap", "0.2", "--snr", "15", "--seed", "4", "--out", str(out)])
    assert code == 0
    return out


def test_simulate_outputs(simulated, tmp_path, capsys):
    code, res = run(capsys, "simulate", "--duration", "6", "--seed", "1", "--out", tmp_path)
    assert code == 0 and res["status"] == "ok" and res["command"] == "simulate"
    assert res["speakers"] == ["spk0", "spk1"]
    assert read_wav(tmp_path / "mixture.wav").channels == 4
    assert (tmp_path / "words.jsonl").read_text().strip()
    assert read_wav(simulated / "mixture.wav").channels == 3


def test_processing_chain(simulated, tmp_path, capsys):
    mix, ref = simulated / "mixture.wav", simulated / "reference.rttm"
    code, res = run(capsys, "wpe", mix, "--out", tmp_path)
    assert code == 0 and res["channels"] == 3
    code, res = run(capsys, "gss", mix, "--rttm", ref, "--out", tmp_path)
    assert code == 0 and res["classes"] == ["spk0", "spk1", "noise"]
    code, res = run(capsys, "mvdr", mix, "--mask", tmp_path / "mask.mctf", "--out", tmp_path)
    assert code == 0 and res["speakers"] == ["spk0", "spk1"]
    assert (tmp_path / "beamformed_spk0.wav").exists()
    code, res = run(capsys, "separate", mix, "--rttm", ref, "--variant", "v3",
                    "--tf-prior", tmp_path / "mask.mctf", "--out", tmp_path)
    assert code == 0 and res["variant"] == "v3"
    code, res = run(capsys, "rectify", mix, "--rttm", ref, "--out", tmp_path)
    assert code == 0
    assert read_rttm(tmp_path / "rectified.rttm").speakers == ["spk0", "spk1"]
    code, res = run(capsys, "diarize", mix, "--out", tmp_path)
    assert code == 0 and res["segments"] > 0


def test_scoring_commands(simulated, capsys):
    ref = simulated / "reference.rttm"
    code, res = run(capsys, "score-der", ref, ref)
    assert code == 0 and res["der"] == 0
    words = simulated / "words.jsonl"
    code, res = run(capsys, "score-tcpwer", words, words, "--rule", "overlap")
    assert code == 0 and res["tcpwer"] == 0


def test_pipeline_command(simulated, tmp_path, capsys):
    code, res = run(capsys, "pipeline", simulated / "mixture.wav", "--rttm",
                    simulated / "reference.rttm", "--out", tmp_path)
    assert code == 0
    assert res["stages"] == ["csd", "rectified", "recluster_fixed", "recluster_free"]
    assert (tmp_path / "manifest.json").exists()


def test_validation_errors_exit_2(simulated, tmp_path, capsys):
    mix = simulated / "mixture.wav"
    code, res = run(capsys, "wpe", tmp_path / "missing.wav")
    assert code == 2 and res["kind"] == "validation"
    (tmp_path / "bad.toml").write_text("[wpe]\ntapss = 3\n")
    code, res = run(capsys, "wpe", mix, "--config", tmp_path / "bad.toml")
    assert code == 2 and "wpe.tapss" in res["message"]
    code, res = run(capsys, "separate", mix, "--rttm", simulated / "reference.rttm",
                    "--variant", "v3")
    assert code == 2
    code, res = run(capsys, "simulate", "--seed", "-3", "--out", tmp_path)
    assert code == 2
    code, res = run(capsys, "simulate", "--overlap", "0.95", "--out", tmp_path)
    assert code == 2
    code, res = run(capsys, "frobnicate")
    assert code == 2
    (tmp_path / "junk.rttm").write_text("SPEAKER x 1 oops\n")
    code, res = run(capsys, "score-der", tmp_path / "junk.rttm", simulated / "reference.rttm")
    assert code == 2 and "line 1" in res["message"]


def test_runtime_error_exits_1(simulated, tmp_path, capsys):
    mono = tmp_path / "mono.wav"
    write_wav(MultiChannelWave(read_wav(simulated / "mixture.wav").samples[:1], 16000), mono)
    code, res = run(capsys, "rectify", mono, "--rttm", simulated / "reference.rttm",
                    "--out", tmp_path)
    assert code == 1 and res["kind"] == "runtime"
    assert "rectified" in res["message"]


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    capsys.readouterr()


def test_seed_changes_simulation(tmp_path, capsys):
    run(capsys, "simulate", "--duration", "4", "--seed", "1", "--out", tmp_path / "a")
    run(capsys, "simulate", "--duration", "4", "--seed", "2", "--out", tmp_path / "b")
    a = read_wav(tmp_path / "a" / "mixture.wav").samples
    b = read_wav(tmp_path / "b" / "mixture.wav").samples
    assert not np.array_equal(a, b)
