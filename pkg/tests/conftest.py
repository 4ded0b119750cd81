import pytest

from zett.data import Dataset, Example, RelationSpec, Triplet
from zett.templates import validate_template


@pytest.fixture
def toy_relations():
    return {
        "P1": RelationSpec("P1", "founded", "person who founded an organization",
                           (validate_template("<head> founded <tail> .", "P1"),)),
        "P2": RelationSpec("P2", "employer", "organization that employs a person",
                           (validate_template("<tail> employs <head> .", "P2"),
                            validate_template("<head> works for <tail> .", "P2"))),
    }


@pytest.fixture
def toy_dataset(toy_relations):
    ex = [
        Example("a", "Ada Lovelace founded Analytical Engines .", (Triplet("Ada Lovelace", "P1", "Analytical Engines"),)),
        Example("b", "Grace Hopper works for the Navy .", (Triplet("Grace Hopper", "P2", "the Navy"),)),
        Example("c", "Alan Turing founded Bletchley and works for Manchester .",
                (Triplet("Alan Turing", "P1", "Bletchley"), Triplet("Alan Turing", "P2", "Manchester"))),
    ]
    return Dataset(tuple(ex), toy_relations)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(capsys):
    def record(cid, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {cid:>2}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
