import numpy as np
import pytest

from kittykv import read_tensor
from kittykv.cli import main


def run(*argv):
    return main(list(argv))


def _load_output_matrix(path):
    """Parse a simulate-decode CSV back into a (rows, d) array of outputs."""
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return np.array([[float(x) for x in line.split(",")[2:]] for line in lines[1:]])


# -- gen -------------------------------------------------------------------------


def test_gen_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.kty", tmp_path / "b.kty"
    args = ["gen", "--tokens", "64", "--channels", "16", "--outliers", "3,7",
            "--gain", "8", "--seed", "1"]
    assert run(*args, "--out", str(a)) == 0
    assert run(*args, "--out", str(b)) == 0
    assert a.read_bytes() == b.read_bytes()
    out = capsys.readouterr().out
    assert "# seed: 1" in out and "# prng: pcg64" in out


def test_gen_bounds_validated(tmp_path):
    rc = run("gen", "--tokens", "16", "--channels", "8", "--outliers", "200",
             "--seed", "0", "--out", str(tmp_path / "x.kty"))
    assert rc == 1


def test_unknown_flag_rejected(tmp_path, capsys):
    rc = run("gen", "--tokens", "4", "--channels", "4", "--frobnicate", "1",
             "--out", str(tmp_path / "x.kty"))
    assert rc == 1


# -- roundtrip ----------------------------------------------------------------------


@pytest.fixture()
def keys_file(tmp_path):
    path = tmp_path / "keys.kty"
    assert run("gen", "--tokens", "96", "--channels", "16", "--outliers", "2",
               "--gain", "6", "--seed", "5", "--out", str(path)) == 0
    return path


@pytest.mark.parametrize("fraction", ["0", "0.125", "1"])
def test_roundtrip_bit_exact(keys_file, fraction, capsys):
    assert run("roundtrip", "--keys", str(keys_file), "--boost-fraction", fraction,
               "--group", "32") == 0
    assert "bit_exact: yes" in capsys.readouterr().out


def test_roundtrip_truncated_input(tmp_path, keys_file):
    bad = tmp_path / "bad.kty"
    bad.write_bytes(keys_file.read_bytes()[:-7])
    assert run("roundtrip", "--keys", str(bad)) == 2


def test_roundtrip_missing_file(tmp_path):
    assert run("roundtrip", "--keys", str(tmp_path / "nope.kty")) == 2


def test_roundtrip_bad_group(keys_file):
    assert run("roundtrip", "--keys", str(keys_file), "--group", "6") == 1


# -- sensitivity ---------------------------------------------------------------------


def test_sensitivity_recovers_outliers(tmp_path, capsys):
    k, q = tmp_path / "k.kty", tmp_path / "q.kty"
    run("gen", "--tokens", "512", "--channels", "32", "--outliers", "3,17",
        "--gain", "8", "--seed", "2", "--out", str(k))
    run("gen", "--tokens", "64", "--channels", "32", "--seed", "3", "--out", str(q))
    out_csv = tmp_path / "sens.csv"
    assert run("sensitivity", "--keys", str(k), "--queries", str(q),
               "--out", str(out_csv)) == 0
    stdout = capsys.readouterr().out
    top_line = next(l for l in stdout.splitlines() if l.startswith("top_channels:"))
    top2 = top_line.split(":")[1].strip().split(",")[:2]
    assert set(map(int, top2)) == {3, 17}
    body = [l for l in out_csv.read_text().splitlines() if not l.startswith("#")]
    assert body[0].split(",")[0] == "channel"
    assert len(body) == 1 + 32


def test_sensitivity_passthrough_all_zero(tmp_path):
    k, q = tmp_path / "k.kty", tmp_path / "q.kty"
    run("gen", "--tokens", "32", "--channels", "8", "--seed", "4", "--out", str(k))
    run("gen", "--tokens", "16", "--channels", "8", "--seed", "5", "--out", str(q))
    out_csv = tmp_path / "sens16.csv"
    assert run("sensitivity", "--keys", str(k), "--queries", str(q),
               "--bits", "16", "--out", str(out_csv)) == 0
    rows = [l for l in out_csv.read_text().splitlines() if not l.startswith("#")][1:]
    assert all(float(row.split(",")[1]) == 0.0 for row in rows)


def test_sensitivity_constant_channel_zero_row(tmp_path):
    k, q = tmp_path / "k.kty", tmp_path / "q.kty"
    from kittykv import write_tensor

    mat = np.random.default_rng(6).normal(0, 1, (40, 8)).astype(np.float32)
    mat[:, 5] = 2.0
    write_tensor(mat, k)
    run("gen", "--tokens", "16", "--channels", "8", "--seed", "7", "--out", str(q))
    out_csv = tmp_path / "sens_const.csv"
    assert run("sensitivity", "--keys", str(k), "--queries", str(q),
               "--out", str(out_csv)) == 0
    rows = [l for l in out_csv.read_text().splitlines() if not l.startswith("#")][1:]
    row5 = rows[5].split(",")
    assert int(row5[0]) == 5 and all(float(x) == 0.0 for x in row5[1:])


def test_sensitivity_head_split_validated(tmp_path):
    k, q = tmp_path / "k.kty", tmp_path / "q.kty"
    run("gen", "--tokens", "30", "--channels", "8", "--seed", "8", "--out", str(k))
    run("gen", "--tokens", "16", "--channels", "8", "--seed", "9", "--out", str(q))
    assert run("sensitivity", "--keys", str(k), "--queries", str(q),
               "--kv-heads", "4", "--out", str(tmp_path / "x.csv")) == 1


# -- sweep --------------------------------------------------------------------------


def test_sweep_table(tmp_path):
    out_csv = tmp_path / "sweep.csv"
    assert run("sweep", "--fractions", "0,0.25,1.0", "--seeds", "3",
               "--tokens", "128", "--channels", "16", "--outliers", "2,9",
               "--query-tokens", "16", "--out", str(out_csv)) == 0
    body = [l for l in out_csv.read_text().splitlines() if not l.startswith("#")]
    assert body[0] == "fraction,heuristic,mean_mse,max_deviation,runs"
    assert len(body) == 1 + 3 * 2  # three fractions x two heuristics
    cells = [line.split(",") for line in body[1:]]
    by = {(float(c[0]), c[1]): float(c[2]) for c in cells}
    assert by[(1.0, "magnitude")] == by[(1.0, "random")]


# -- simulate-decode -----------------------------------------------------------------


def test_simulate_passthrough_matches_oracle(tmp_path):
    common = ["--s", "4", "--r", "8", "--g", "8", "--d", "8", "--kv-heads", "2",
              "--q-heads", "4", "--prompt-len", "6", "--decode-steps", "30",
              "--seed", "11"]
    pt, orc = tmp_path / "pt.csv", tmp_path / "or.csv"
    assert run("simulate-decode", *common, "--mode", "passthrough", "--out", str(pt)) == 0
    assert run("simulate-decode", *common, "--mode", "oracle", "--out", str(orc)) == 0
    a, b = _load_output_matrix(pt), _load_output_matrix(orc)
    assert a.shape == b.shape == (30 * 4, 8)
    rel = np.max(np.abs(a - b)) / np.max(np.abs(b))
    assert rel <= 1e-5


def test_simulate_kitty_pack_bound(tmp_path, capsys):
    out_csv = tmp_path / "sim.csv"
    assert run("simulate-decode", "--s", "4", "--r", "8", "--g", "8", "--d", "8",
               "--decode-steps", "80", "--mode", "kitty", "--seed", "12",
               "--out", str(out_csv)) == 0
    stdout = capsys.readouterr().out
    stats = dict(
        line.split(": ", 1) for line in stdout.splitlines()
        if ": " in line and not line.startswith("#")
    )
    bound = int(stats["pack_event_bound"])
    assert int(stats["decode_key_pack_events"]) <= bound
    assert int(stats["decode_value_pack_events"]) <= bound
    assert int(stats["total_tokens"]) == 80


def test_simulate_deterministic(tmp_path):
    args = ["simulate-decode", "--s", "4", "--r", "8", "--g", "8", "--d", "8",
            "--decode-steps", "12", "--mode", "kitty", "--seed", "13"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(*args, "--out", str(a)) == 0
    assert run(*args, "--out", str(b)) == 0
    assert a.read_text() == b.read_text()


def test_simulate_validation(tmp_path):
    assert run("simulate-decode", "--decode-steps", "0",
               "--out", str(tmp_path / "x.csv")) == 1


# -- mem-report ----------------------------------------------------------------------


def test_mem_report_values(tmp_path, capsys):
    assert run("mem-report", "--length", "8192", "--out", str(tmp_path / "mem.csv")) == 0
    stdout = capsys.readouterr().out
    stats = dict(
        line.split(": ", 1) for line in stdout.splitlines()
        if ": " in line and not line.startswith("#") and not line.startswith("wrote")
    )
    assert int(stats["key_page_count"]) == 63
    assert int(stats["value_page_count"]) == 62
    assert int(stats["total_bytes"]) == 714624
    assert 6.0 <= float(stats["kv_data_ratio"]) <= 8.0


def test_mem_report_config_file_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "kitty.cfg"
    cfg.write_text("s = 8\nr = 16\ng = 16\nd = 16\n# comment\nboost_fraction = 0.25\n")
    assert run("mem-report", "--config", str(cfg), "--length", "100") == 0
    stdout = capsys.readouterr().out
    assert "# s = 8" in stdout and "# boost_fraction = 0.25" in stdout
    # flag overrides file
    assert run("mem-report", "--config", str(cfg), "--s", "4", "--length", "100") == 0
    assert "# s = 4" in capsys.readouterr().out


def test_mem_report_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("sink = 8\n")
    assert run("mem-report", "--config", str(cfg), "--length", "10") == 1
