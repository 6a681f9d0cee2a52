import subprocess
import sys
from pathlib import Path

import pytest

from rtbridge.cli import main
from rtbridge.runtime import Runtime
from rtbridge.scenario import ScenarioConfig, emit_stats, parse_scenario, run_scenario
from rtbridge.errors import ScenarioError

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def run(text, **kw):
    return run_scenario(text, ScenarioConfig(**kw))


def test_add_ints_prints_seven():
    rep = run("import demo\ncall demo add_ints 3 4 -> r\nprint r\n")
    assert rep.lines == ["7"]
    assert rep.exit_code == 0


def test_doc_string_verbatim():
    assert run("import demo\nprint demo.__doc__\n").lines == ["Fast implementation of the demo types."]


def test_each_print_is_one_line():
    rep = run('print\nprint "a" 1 2.5\nprint None\n')
    assert rep.lines == ["", "a 1 2.5", "None"]


def test_empty_scenario_has_zero_counters():
    rep = run("")
    assert rep.stats and all(v == 0 for v in rep.stats.values())


def test_cycle_fixture_reports_reclaimed():
    rep = run((SCENARIOS / "cycle.scn").read_text())
    assert rep.exit_code == 0
    # dict twin, tuple twin and the interned key string
    assert rep.stats["gc_reclaimed"] == 3
    assert rep.stats["native_live"] == 0
    assert rep.stats["managed_live"] == 0


def test_demo_golden_matches_file(capsys):
    assert main(["run", str(SCENARIOS / "demo.scn"), "--golden"]) == 0
    assert capsys.readouterr().out == (SCENARIOS / "demo.golden").read_text()


def test_golden_output_is_deterministic(capsys):
    outs = []
    for _ in range(3):
        main(["run", str(SCENARIOS / "points.scn"), "--golden", "--seed", "5"])
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1] == outs[2]
    assert "elapsed_ms" not in outs[0] and "lock_contentions" not in outs[0]


def test_stats_are_sorted_key_value():
    rep = run("new int 1 -> x\n")
    lines = emit_stats(rep, golden=True).splitlines()
    keys = [line.split("=")[0] for line in lines]
    assert keys == sorted(keys)
    assert all(line.split("=")[1].lstrip("-").isdigit() for line in lines)


def test_thread_lock_count_matches_trace():
    rt = Runtime(demo=True, trace_lock=True)
    text = "import demo\nthreads 8 call demo add_ints 1 2 -> r ; print r ; call demo add_ints 3 4 -> s\n"
    start = len(rt.lock.trace)
    rep = run_scenario(text, ScenarioConfig(), rt)
    acquires = sum(1 for e in rt.lock.trace[start:] if e[2] == "acquire")
    assert rep.stats["lock_acquisitions"] == acquires
    assert rep.lines == ["3"] * 8


def test_list_mirroring_commands():
    rep = run("new list 1 -> xs\nnative-mutate xs append 2\nlist-append xs 3\n"
              "native-mutate xs set 0 9\nnative-mutate xs pop\nprint xs\n")
    assert rep.lines == ["[9, 2]"]


def test_native_dict_mutation_visible_in_managed():
    rep = run('new dict -> d\nnative-mutate d setitem "a" 1\nprint d\nnative-mutate d delitem "a"\nprint d\n')
    assert rep.lines == ["{'a': 1}", "{}"]


def test_point_commands():
    rep = run("import demo\nnew demo.Point 3.0 4.0 -> p\ngetattr p norm -> n\nprint n\ntype p\n")
    assert rep.lines == ["5.0", "<type 'demo.Point'>"]


@pytest.mark.parametrize("text,line", [
    ("frobnicate\n", 1),
    ("print x\n", 1),
    ("new list -> a b\n", 1),
    ("\n\nthreads 2 gc-collect\n", 3),
    ("threads 0 print\n", 1),
    ("getattr a b\n", 1),
    ('print "unterminated\n', 1),
])
def test_parse_errors_name_line(text, line):
    with pytest.raises(ScenarioError) as info:
        parse_scenario(text)
    assert info.value.lineno == line


def test_runtime_error_reports_command():
    rep = run("import demo\ncall demo add_ints 1 -> r\nprint 1\n")
    assert rep.exit_code == 1
    assert "line 2" in rep.error and "add_ints" in rep.error
    assert rep.lines == []


def test_dropped_names_cannot_be_used():
    with pytest.raises(ScenarioError):
        parse_scenario("new int 1 -> x\ndrop x\nprint x\n")


def test_stress_gc_command():
    rep = run("stress-gc 2\n", seed=3)
    assert rep.lines == ["stress-gc trials=2 violations=0"]


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.scn"
    bad.write_text("import nosuchmodule\n")
    assert main(["run", str(bad)]) == 1
    missing = tmp_path / "missing.scn"
    assert main(["run", str(missing)]) == 1
    assert main(["list-extensions"]) == 0
    assert "demo:" in capsys.readouterr().out


def test_cli_extra_extension(tmp_path, capsys):
    ext = tmp_path / "m.ext"
    ext.write_text("module mini\ndoc tiny\nfn same O identity\n")
    scn = tmp_path / "s.scn"
    scn.write_text("import mini\ncall mini same 5 -> v\nprint v\n")
    assert main(["run", str(scn), "--ext", str(ext)]) == 0
    assert capsys.readouterr().out == "5\n"


def test_selftest_passes(capsys):
    assert main(["selftest", "--iterations", "50"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "rtbridge", "run", str(SCENARIOS / "demo.scn")],
                         capture_output=True, text=True, check=True)
    assert out.stdout.splitlines()[-1] == "<type 'demo.Moment'>"
