"""Shared fixtures for the test suite.

The desk-scale forced cavity drives several acceptance checks; its full
pipeline (both stabilized schemes) runs once per session and the results
are shared. The ``report`` fixture prints one visible PASS or FAIL line
per acceptance check even while pytest captures output.
"""

import pytest

from podflow.harness import ExperimentConfig, run_pipeline


def desk_raw(scheme):
    """Config dict for the desk-scale forced cavity.

    The forcing amplitude and snapshot window are chosen so the snapshot
    set is rank-rich (every one of the 21 snapshots contributes an
    independent direction) while one full-order run stays in the seconds
    range on a laptop.
    """
    stabilization = {"grad_div": 0.3} if scheme == "graddiv" else {}
    return {
        "geometry": {"nx": 8, "ny": 8},
        "case": {"name": "cavity",
                 "parameters": {"amplitude": 120.0, "period": 0.2}},
        "fom": {
            "scheme": scheme,
            "nu": 5e-3,
            "dt": 2.5e-3,
            "t_final": 0.4,
            "stabilization": stabilization,
            "snapshot_window": [0.2, 0.4],
            "snapshot_stride": 4,
        },
        "pod": {},
        "rom": {"r_values": [2, 4, 6, 8, 10, 12]},
    }


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Full pipeline results for the desk flow, keyed by scheme."""
    results = {}
    for scheme in ("lps", "graddiv"):
        out = tmp_path_factory.mktemp(f"desk_{scheme}")
        config = ExperimentConfig.from_dict(desk_raw(scheme))
        results[scheme] = run_pipeline(config, out_dir=out)
    return results


@pytest.fixture
def report(capsys):
    """Emit one uncaptured PASS or FAIL line, then assert."""

    def emit(label, ok, detail):
        status = "PASS" if ok else "FAIL"
        with capsys.disabled():
            print(f"\n[{status}] {label}: {detail}")
        assert ok, f"{label}: {detail}"

    return emit
