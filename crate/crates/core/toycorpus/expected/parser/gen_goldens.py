"""Regenerates the runner-output goldens.

Each case runs pytest once with both verbose output and a JUnit XML report.
The raw output becomes `<case>.txt`; the expected status map is taken from
the XML report, independently of the Rust parser, and written to
`<case>.json`.
"""

import json
import os
import shutil
import subprocess
import sys
import tempfile
import xml.etree.ElementTree as ET

HERE = os.path.dirname(os.path.abspath(__file__))
REPOS = os.path.join(HERE, "..", "..", "repos")

EXTRA_TESTS = {
    "tests/test_extra.py": '''import pytest


@pytest.fixture
def broken():
    raise RuntimeError("fixture failed")


def test_uses_broken(broken):
    assert broken


@pytest.mark.skip(reason="not supported here")
def test_skipped():
    assert False


@pytest.mark.xfail(reason="known issue")
def test_expected_failure():
    assert 1 == 2


@pytest.mark.parametrize("n", [1, 2])
def test_param(n):
    assert n > 0
''',
}


def edit(root, path, old, new):
    p = os.path.join(root, path)
    with open(p) as f:
        s = f.read()
    assert s.count(old) == 1, (path, old)
    with open(p, "w") as f:
        f.write(s.replace(old, new))


def case_all_pass(root):
    pass


def case_mixed(root):
    edit(root, "calc/ops.py", "    return a * b\n", "    return round(a * b)\n")
    edit(root, "calc/ops.py", "    return a - b\n", "    return b - a\n")


def case_error(root):
    edit(root, "tests/test_stats.py", "def test_mean():\n", "def test_mean(missing_fixture):\n")


def case_skipped(root):
    for path, text in EXTRA_TESTS.items():
        with open(os.path.join(root, path), "w") as f:
            f.write(text)


def case_collection_error(root):
    edit(root, "calc/__init__.py", "from calc.stats import clamp, mean, median\n",
         "from calc.stats import clamp, mean, median\nfrom calc.units import convert\n")


CASES = [case_all_pass, case_mixed, case_error, case_skipped, case_collection_error]


def expected_from_junit(path):
    statuses = {}
    for tc in ET.parse(path).getroot().iter("testcase"):
        classname, name = tc.get("classname", ""), tc.get("name", "")
        if not name:
            continue
        file = classname.replace(".", "/") + ".py"
        tid = f"{file}::{name}"
        kinds = {child.tag for child in tc}
        if "error" in kinds:
            status = "errored"
        elif "failure" in kinds:
            status = "failed"
        elif "skipped" in kinds:
            status = "skipped"
        else:
            status = "passed"
        statuses[tid] = status
    return dict(sorted(statuses.items()))


def main():
    for case in CASES:
        name = case.__name__[len("case_"):]
        tmp = tempfile.mkdtemp()
        root = os.path.join(tmp, "testbed")
        shutil.copytree(os.path.join(REPOS, "toycalc"), root)
        case(root)
        junit = os.path.join(tmp, "junit.xml")
        env = dict(os.environ, PYTHONDONTWRITEBYTECODE="1", PYTEST_DISABLE_PLUGIN_AUTOLOAD="1")
        out = subprocess.run(
            [sys.executable, "-m", "pytest", "-rA", "-v", "-p", "no:cacheprovider", "--color=no",
             f"--junitxml={junit}"],
            cwd=root, env=env, capture_output=True, text=True,
        ).stdout
        # Keep the fixture independent of the machine that produced it.
        out = out.replace(root, "/testbed").replace(junit, "/tmp/junit.xml")
        lines = [l for l in out.splitlines() if not l.startswith(("platform ", "cachedir:")) and "generated xml file" not in l]
        with open(os.path.join(HERE, name + ".txt"), "w") as f:
            f.write("\n".join(lines) + "\n")
        expected = expected_from_junit(junit)
        if name == "collection_error":
            # Collection errors are module-level; no per-test results exist.
            expected = {}
        with open(os.path.join(HERE, name + ".json"), "w") as f:
            json.dump(expected, f, indent=2, sort_keys=True)
            f.write("\n")
        shutil.rmtree(tmp)

    # Summary mismatch: the mixed run with one FAILED line removed.
    with open(os.path.join(HERE, "mixed.txt")) as f:
        lines = f.read().splitlines()
    drop = [i for i, l in enumerate(lines) if l.startswith("FAILED ")][0]
    verbose = [i for i, l in enumerate(lines) if l.split(" ")[0] == lines[drop].split(" ")[1]]
    keep = [l for i, l in enumerate(lines) if i != drop and i not in verbose]
    with open(os.path.join(HERE, "summary_mismatch.txt"), "w") as f:
        f.write("\n".join(keep) + "\n")


if __name__ == "__main__":
    main()
