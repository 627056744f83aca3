"""CLI smoke tests driven through main() in-process."""

import json

from blockfuse.bench import corpus_path
from blockfuse.cli import main


def test_compile_listing(capsys):
    assert main(["compile", str(corpus_path("reverse.kn"))]) == 0
    out = capsys.readouterr().out
    assert "kernel reverse" in out
    assert "section 1" in out
    assert "expanded: " in out


def test_compile_json(capsys):
    assert main(["compile", str(corpus_path("vecadd.kn")), "--json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert len(payload["vecadd"]["sections"]) == 1


def test_compile_invalid_kernel(tmp_path, capsys):
    bad = tmp_path / "bad.kn"
    bad.write_text("kernel k() { let v: i32 = q; }")
    assert main(["compile", str(bad)]) == 1
    assert "unresolved-name" in capsys.readouterr().err


def test_run_host_script(capsys):
    assert main(["run", str(corpus_path("reverse.host")), "--pool", "2"]) == 0
    out = capsys.readouterr().out
    assert "sync  # implicit" in out
    assert "blocks executed: 1" in out


def test_run_json(capsys):
    assert main(["run", str(corpus_path("vecadd.host")), "--json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["conflicts"] == 0
    assert payload["counters"]["blocks_executed"] == 4
    assert payload["downloads"] == {"vecadd_c.bin": 4096}


def test_sweep_json(capsys):
    assert main(["sweep", "vecadd", "--grains", "1,average", "--pool", "2",
                 "--repeats", "1", "--json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert [r["grain_spec"] for r in payload["rows"]] == ["1", "average"]


def test_cachesim_text_trace(tmp_path, capsys):
    trace = tmp_path / "t.trace"
    trace.write_text("R 0x0 4\nR 0x0 4\nW 0x40 4\n")
    assert main(["cachesim", "--trace", str(trace), "--json"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload == {"load_misses": 1, "loads": 2, "store_misses": 1,
                       "stores": 1, "writebacks": 0}


def test_missing_file_is_an_error(capsys):
    assert main(["compile", "no-such-file.kn"]) == 1
    assert "error:" in capsys.readouterr().err
