"""Smoke test for the flexicell Python bindings.

Build first: pip install --no-build-isolation -e crates/py
"""

import json
import math
import pathlib
import sys

import flexicell_py as fc

ROOT = pathlib.Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "crates" / "core" / "scenarios"


def main() -> int:
    sc = fc.Scenario.load(str(SCENARIOS / "quality_control.toml"))
    sc.seed = 7
    sc.duration_s = 10.0
    print(sc)

    res = sc.run()
    print(f"{res.events_processed} events, {res.record_count} trace records")
    report = json.loads(res.verify())
    failed = [c["name"] for c in report["checks"] if not c["passed"]]
    assert not failed, failed

    passed, _ = fc.verify_trace(res.trace_ndjson())
    assert passed
    assert fc.verify_audit(res.audit_binary()) > 0
    assert fc.verify_audit(res.audit_text().encode()) > 0

    broken = bytearray(res.audit_text().encode())
    broken[len(broken) // 2] ^= 1
    try:
        fc.verify_audit(bytes(broken))
        raise AssertionError("tampered audit accepted")
    except ValueError as e:
        print("tamper detected:", e)

    # same seed, same trace
    assert sc.run().trace_ndjson() == res.trace_ndjson()

    anchors = [(0.0, 0.0), (30.0, 0.0), (15.0, 30.0)]
    truth = (12.0, 9.0)
    ranges = [(x, y, math.dist((x, y), truth)) for x, y in anchors]
    x, y, cov = fc.trilaterate(ranges, 0.5)
    assert math.dist((x, y), truth) < 1e-6, (x, y)

    fx, fy, fcov = fc.fuse([((1.0, 2.0), [[1.0, 0.0], [0.0, 1.0]]), ((3.0, 2.0), [[1.0, 0.0], [0.0, 1.0]])])
    assert abs(fx - 2.0) < 1e-12 and abs(fcov[0][0] - 0.5) < 1e-12

    edges = [("a", "b", 1.0, 0.999, 100.0), ("b", "c", 1.0, 0.999, 100.0), ("a", "gw", 0.5, 0.999, 100.0), ("gw", "c", 0.5, 0.999, 100.0)]
    nodes, lat = fc.shortest_path(edges, "a", "c", 10.0, 50.0, 0.99)
    assert nodes == ["a", "gw", "c"] and lat == 1.0
    nodes, lat = fc.shortest_path(edges, "a", "c", 10.0, 50.0, 0.99, sensitive=True, off_premise=["gw"])
    assert nodes == ["a", "b", "c"], nodes
    try:
        fc.shortest_path(edges[2:], "a", "c", 10.0, 50.0, 0.99, sensitive=True, off_premise=["gw"])
        raise AssertionError("sovereignty not enforced")
    except ValueError as e:
        print("sovereignty:", e)

    print("python smoke test ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
