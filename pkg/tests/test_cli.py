import json
import subprocess
import sys

import pytest

from bld.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["no-such-command"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["tokenize", "--no-such-flag"])
    assert e.value.code == 2


def test_failure_exits_1_naming_stage(capsys):
    code, _, err = run_cli(capsys, "tokenize", "--vocab", "/missing.tsv", "--input", "x")
    assert code == 1
    assert "error in tokenize" in err


def test_vocab_build_and_tokenize(tmp_path, capsys):
    tokens = tmp_path / "tokens.txt"
    tokens.write_text("ab\nabc\n")
    merges = tmp_path / "merges.txt"
    merges.write_text("a b\nab c\n")
    vocab_path = tmp_path / "vocab.tsv"
    merges_out = tmp_path / "merges.hex"
    code, out, _ = run_cli(
        capsys, "vocab", "build", "--tokens", str(tokens), "--merges-text", str(merges),
        "--out", str(vocab_path), "--merges-out", str(merges_out),
    )
    assert code == 0
    assert "258 content tokens" in out

    code, out, _ = run_cli(
        capsys, "tokenize", "--vocab", str(vocab_path), "--merges", str(merges_out),
        "--input", "abcab",
    )
    assert code == 0
    assert "'abc' 'ab'" in out


def test_byteprobs_exact_toy(capsys):
    code, out, _ = run_cli(capsys, "byteprobs", "exact", "--vocab", "toy", "--input", "ab")
    assert code == 0
    # P('b'|'a') = 2/3 printed at position 1
    pos1 = [line for line in out.splitlines() if line.startswith("pos 1")][0]
    assert "b'=0.666667" in pos1
    assert "a'=0.333333" in pos1


def test_byteprobs_beam_matches_exact_toy(capsys):
    code_e, out_e, _ = run_cli(capsys, "byteprobs", "exact", "--vocab", "toy", "--input", "ab")
    code_b, out_b, _ = run_cli(
        capsys, "byteprobs", "beam", "--vocab", "toy", "--input", "ab", "--k", "64",
        "--eps", "0.0",
    )
    assert code_e == code_b == 0
    assert out_e == out_b


def test_sweep_and_report(tmp_path, capsys):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("ab\naab\nabab\n")
    out_path = tmp_path / "sweep.tsv"
    code, out, _ = run_cli(
        capsys, "sweep", "--vocab", "toy", "--corpus", str(corpus), "--k", "2,10",
        "--eps", "1e-1,1e-2", "--out", str(out_path),
    )
    assert code == 0
    assert out_path.exists()
    assert "median_jsd" in out

    report_dir = tmp_path / "reports"
    code, out, _ = run_cli(capsys, "report", "--sweep", str(out_path), "--out", str(report_dir))
    assert code == 0
    assert (report_dir / "sweep_table.txt").exists()
    assert (report_dir / "jsd_vs_k.svg").exists()


def test_report_without_inputs_fails(tmp_path, capsys):
    code, _, err = run_cli(capsys, "report", "--out", str(tmp_path))
    assert code == 1
    assert "error in report" in err


def test_precompute_cli(tmp_path, capsys):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("ab\nabab\n")
    code, out, _ = run_cli(
        capsys, "precompute", "--vocab", "toy", "--corpus", str(corpus), "--k", "8",
        "--eps", "0.0", "--n-shards", "2", "--workers", "1", "--out", str(tmp_path / "shards"),
    )
    assert code == 0
    assert len(out.strip().splitlines()) == 2


def test_naive_ctd_cli(capsys):
    code, out, _ = run_cli(
        capsys, "naive-ctd", "--vocab", "toy", "--teacher-vocab", "toy", "--input", "",
        "--k", "64", "--eps", "0.0", "--top", "3",
    )
    assert code == 0
    assert "0.444444" in out  # P("ab") = 4/9 reconstructed from byte chains
    assert "diagnostic mass" in out


def test_distill_and_byte_sft_cli(tmp_path, capsys):
    from bld.cli import load_vocab
    from bld.tokenizer import write_vocab_file

    vocab, _ = load_vocab("toy")
    vocab_path = tmp_path / "vocab.tsv"
    write_vocab_file(vocab_path, vocab)
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("ab\naab\nabab\nba\n")
    cfg = tmp_path / "run.ini"
    checkpoint = tmp_path / "student.bldm"
    cfg.write_text(
        f"[paths]\nvocab = {vocab_path}\nteacher = uniform:0.1:3\ncorpus = {corpus}\n"
        f"checkpoint = {checkpoint}\nreports = {tmp_path / 'reports'}\n"
        "[model]\nd_model = 4\n"
        "[byte_head]\nbyte_slots = 2\n"
        "[training]\nepochs = 1\nbatch_size = 2\nmax_seq_len = 8\n"
        "[beam]\nk = 8\nepsilon = 0.0\n"
    )
    trace = tmp_path / "trace.tsv"
    code, out, err = run_cli(
        capsys, "distill", "--config", str(cfg), "--steps", "2", "--trace-out", str(trace),
    )
    assert code == 0, err
    assert checkpoint.exists()
    assert trace.exists()
    assert "final step 1" in out

    code, out, err = run_cli(capsys, "byte-sft", "--config", str(cfg), "--seed", "1")
    assert code == 0, err
    assert "val_token_ce" in out
    assert (tmp_path / "reports" / "byte_sft_curves.svg").exists()


def test_bigram_teacher_spec(tmp_path, capsys):
    from bld.cli import load_vocab

    vocab, _ = load_vocab("toy")
    n = vocab.n_content
    counts = [[1.0] * (n + 1) for _ in range(n + 1)]
    counts_path = tmp_path / "counts.json"
    counts_path.write_text(json.dumps(counts))
    code, out, _ = run_cli(
        capsys, "byteprobs", "beam", "--vocab", "toy", "--teacher",
        f"bigram:{counts_path}", "--input", "a", "--k", "4", "--eps", "0.01",
    )
    assert code == 0
    assert out.startswith("pos 0")


def test_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "bld.cli", "byteprobs", "exact", "--vocab", "toy",
         "--input", "a"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "pos 0" in proc.stdout
