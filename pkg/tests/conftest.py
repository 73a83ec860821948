import pytest

ACCEPTANCE = pytest.StashKey[dict]()
CRITERIA = {
    1: "Kolmogorov density oracle",
    2: "Kolmogorov covariance oracle",
    3: "x2/y2 derivative symmetry",
    4: "anisotropic derivative scaling",
    5: "inverse-covariance block scaling",
    6: "fundamental-solution residual",
    7: "manufactured PDE solution",
    8: "Picard contraction",
    9: "derivative norms shrink with the horizon",
    10: "centering identities",
    11: "mollification rate and containment",
    12: "pathwise-uniqueness probe",
    13: "determinism",
}


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of an acceptance criterion for the terminal summary."""
    results = request.config.stash[ACCEPTANCE]

    def record(number, passed, detail=""):
        results[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[ACCEPTANCE]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, name in CRITERIA.items():
        if number in results:
            passed, detail = results[number]
            status = "PASS" if passed else "FAIL"
        else:
            status, detail = "NOT RUN", ""
        terminalreporter.write_line(f"[{number:2d}] {status:7s} {name}  {detail}")
