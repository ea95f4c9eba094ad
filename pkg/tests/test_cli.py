import csv
import subprocess
import sys

import numpy as np
import pytest

from recomposer.cli import EXIT_VOCAB, main
from recomposer.dataset import read_codes, read_dataset
from recomposer.midi import read_midi


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", d / "krn", "--seed", 3, "--pieces", 2, "--measures", 5) == 0
    assert run("build-dataset", "--in", d / "krn", "--out", d / "data.rcds", "--holdout", 2) == 0
    assert run("train-vqvae", "--data", d / "data.rcds", "--steps", 3, "--batch", 4,
               "--channels", "8,8,8,16", "--log-every", 1, "--loss-csv", d / "vq.csv",
               "--out", d / "vq.ckpt") == 0
    assert run("encode", "--data", d / "data.rcds", "--vqvae", d / "vq.ckpt", "--out", d / "codes.rccd") == 0
    assert run("train-prior", "--codes", d / "codes.rccd", "--data", d / "data.rcds", "--steps", 2,
               "--batch", 4, "--spatial", "on", "--log-every", 1, "--loss-csv", d / "pr.csv",
               "--out", d / "prior.ckpt") == 0
    return d


def grid_shape(d):
    return read_dataset(d / "data.rcds").tone_vocab.padded_size // 4, 4


def chords(d, n=10):
    ds = read_dataset(d / "data.rcds")
    labels = ds.chord_vocab.labels
    return ",".join(labels[i % len(labels)] for i in range(n))


def test_artifacts(pipeline):
    ds = read_dataset(pipeline / "data.rcds")
    assert ds.measure_count == 10 and len(ds.train_indices()) == 8
    codes = read_codes(pipeline / "codes.rccd")
    assert codes.grids.shape == (10, *grid_shape(pipeline))
    assert codes.tone_fingerprint == ds.tone_fingerprint()
    with open(pipeline / "vq.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss"] and [r[0] for r in rows[1:]] == ["1", "2", "3"]
    assert all(float(r[1]) > 0 for r in rows[1:])


def test_generate_ten_labels_gives_eight_measures(pipeline, tmp_path):
    out = tmp_path / "g.mid"
    assert run("generate", "--vqvae", pipeline / "vq.ckpt", "--prior", pipeline / "prior.ckpt",
               "--chords", chords(pipeline), "--temperature", 0.7, "--seed", 1,
               "--data", pipeline / "data.rcds", "--out-midi", out, "--out-ppm", tmp_path / "g.ppm",
               "--out-codes", tmp_path / "g.rccd") == 0
    midi = read_midi(out.read_bytes())
    assert midi["length"] <= 8 * 16 * 120
    assert read_codes(tmp_path / "g.rccd").grids.shape == (8, *grid_shape(pipeline))
    ppm = (tmp_path / "g.ppm").read_bytes()
    assert ppm.startswith(b"P6\n128 ")


def test_temperature_zero_is_byte_identical(pipeline, tmp_path):
    outs = []
    for i in range(2):
        out = tmp_path / f"t{i}.mid"
        assert run("generate", "--vqvae", pipeline / "vq.ckpt", "--prior", pipeline / "prior.ckpt",
                   "--chords", chords(pipeline, 5), "--temperature", 0, "--seed", i,
                   "--out-midi", out) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_spatial_flag_both_ways(pipeline, tmp_path):
    for flag in ("on", "off"):
        out = tmp_path / f"{flag}.rccd"
        assert run("generate", "--vqvae", pipeline / "vq.ckpt", "--prior", pipeline / "prior.ckpt",
                   "--chords", chords(pipeline, 4), "--spatial", flag, "--out-midi", tmp_path / "x.mid",
                   "--out-codes", out) == 0
        g = read_codes(out).grids
        assert g.shape == (2, *grid_shape(pipeline)) and g.min() >= 0 and g.max() < 256


def test_unknown_chord_exits_3(pipeline, tmp_path, capsys):
    code = run("generate", "--vqvae", pipeline / "vq.ckpt", "--prior", pipeline / "prior.ckpt",
               "--chords", "III,III,v,iv,iv,v,i,iv,III,III", "--out-midi", tmp_path / "x.mid")
    assert code == EXIT_VOCAB == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: VocabMismatch: unknown chord label(s)")
    assert not (tmp_path / "x.mid").exists()


def test_too_few_chords_exit_1(pipeline, tmp_path, capsys):
    code = run("generate", "--vqvae", pipeline / "vq.ckpt", "--prior", pipeline / "prior.ckpt",
               "--chords", chords(pipeline, 2), "--out-midi", tmp_path / "x.mid")
    assert code == 1
    assert capsys.readouterr().err.strip().splitlines()[-1].startswith("error: ValueError:")


def test_swapped_checkpoints_exit_1(pipeline, tmp_path, capsys):
    code = run("generate", "--vqvae", pipeline / "prior.ckpt", "--prior", pipeline / "vq.ckpt",
               "--chords", chords(pipeline), "--out-midi", tmp_path / "x.mid")
    assert code == 1
    assert "ModelKindError" in capsys.readouterr().err


def test_encode_against_other_dataset_exits_3(pipeline, tmp_path):
    assert run("synth", "--out", tmp_path / "k", "--seed", 9, "--pieces", 1, "--measures", 3,
               "--transpose", 0) == 0
    assert run("build-dataset", "--in", tmp_path / "k", "--out", tmp_path / "o.rcds", "--holdout", 1) == 0
    other = read_dataset(tmp_path / "o.rcds")
    if other.tone_fingerprint() == read_dataset(pipeline / "data.rcds").tone_fingerprint():
        pytest.skip("corpora happen to share a tone vocabulary")
    assert run("encode", "--data", tmp_path / "o.rcds", "--vqvae", pipeline / "vq.ckpt",
               "--out", tmp_path / "c.rccd") == 3


def test_missing_file_exit_1(tmp_path, capsys):
    assert run("encode", "--data", tmp_path / "none.rcds", "--vqvae", tmp_path / "v", "--out",
               tmp_path / "c") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: FileNotFoundError:")


@pytest.mark.parametrize("argv", [["generate"], ["bogus"], ["synth", "--out", "x", "--frobnicate"],
                                  ["generate", "--vqvae", "a", "--prior", "b", "--chords", "I,I,I",
                                   "--out-midi", "m", "--temperature", "-1"]])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_holdout_chords_command(pipeline, capsys):
    assert run("holdout-chords", "--data", pipeline / "data.rcds") == 0
    labels = capsys.readouterr().out.strip().split(",")
    ds = read_dataset(pipeline / "data.rcds")
    inner = [ds.chord_vocab.label(i) for i in ds.chord_ids[-2:]]
    assert labels == [inner[0]] + inner + [inner[-1]]


def test_zero_step_smoke_pipeline(tmp_path):
    d = tmp_path
    assert run("synth", "--out", d / "krn", "--pieces", 1, "--measures", 3) == 0
    assert run("build-dataset", "--in", d / "krn", "--out", d / "d.rcds", "--holdout", 1) == 0
    assert run("train-vqvae", "--data", d / "d.rcds", "--steps", 0, "--channels", "4,4,4,8",
               "--out", d / "v.ckpt") == 0
    assert run("encode", "--data", d / "d.rcds", "--vqvae", d / "v.ckpt", "--out", d / "c.rccd") == 0
    assert run("train-prior", "--codes", d / "c.rccd", "--data", d / "d.rcds", "--steps", 0,
               "--out", d / "p.ckpt") == 0
    labels = read_dataset(d / "d.rcds").chord_vocab.labels
    assert run("generate", "--vqvae", d / "v.ckpt", "--prior", d / "p.ckpt",
               "--chords", ",".join([labels[0]] * 3), "--out-midi", d / "o.mid") == 0
    assert read_midi((d / "o.mid").read_bytes())["division"] == 480


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "recomposer", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "build-dataset" in res.stdout
