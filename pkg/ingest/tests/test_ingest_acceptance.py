"""Acceptance gate for the ingestion adapter. One check per criterion
clause, each printing an explicit pass line; runtime well under a minute."""

import json

import numpy as np

from rlogist import slidegen
from rlogist_ingest import core

from test_ingest_core import make_interchange


def _ok(name):
    print(f"ACCEPT ingestion/{name}: PASS")


class TestIngestionAcceptance:
    def test_round_trip_bit_identical(self, tmp_path):
        for seed in range(5):
            cfg = slidegen.GenConfig(N_range=(6, 14), seed=seed)
            bundle = slidegen.generate_slide(cfg, seed)
            bundle.region_truth = None
            src = tmp_path / f"s{seed}.rlgb"
            slidegen.write_bundle(bundle, str(src))
            core.export_bundle(str(src), str(tmp_path / f"i{seed}"))
            core.convert(str(tmp_path / f"i{seed}"), str(tmp_path / f"o{seed}"))
            back = tmp_path / f"o{seed}" / "bundles" / f"s{seed}.rlgb"
            assert back.read_bytes() == src.read_bytes()
        _ok("round-trip-bit-identical")

    def test_fault_injection_produces_specified_errors(self, tmp_path):
        root = tmp_path / "in"
        d, _, _ = make_interchange(root, slide_id="short")
        (d / core.SUB_NAME).write_bytes((d / core.SUB_NAME).read_bytes()[:-4])
        d, scan, _ = make_interchange(root, slide_id="nan", seed=1)
        scan = scan.copy()
        scan.ravel()[3] = np.nan
        (d / core.SCAN_NAME).write_bytes(scan.tobytes())
        make_interchange(root, slide_id="first", seed=2)
        d, _, _ = make_interchange(root, slide_id="second", seed=3)
        hdr = json.loads((d / core.HEADER_NAME).read_text())
        hdr["slide_id"] = "first"
        (d / core.HEADER_NAME).write_text(json.dumps(hdr))
        make_interchange(root, slide_id="wide", d=8, seed=4)
        report = core.validate(str(root))
        kinds = {i.kind: i for i in report.issues}
        assert set(kinds) == {"length-mismatch", "non-finite", "duplicate-id",
                              "dim-mismatch"}
        assert kinds["non-finite"].message.endswith("offset 12")
        assert kinds["dim-mismatch"].severity == "warning"
        assert kinds["length-mismatch"].slide == "short"
        _ok("fault-injection-error-taxonomy")

    def test_validate_convert_defect_parity(self, tmp_path):
        root = tmp_path / "in"
        make_interchange(root, slide_id="good")
        d, _, _ = make_interchange(root, slide_id="bad", seed=1)
        (d / core.SCAN_NAME).write_bytes(b"")
        v = core.validate(str(root))
        _, c = core.convert(str(root), str(tmp_path / "out"))
        assert [i.to_json() for i in v.issues] == [i.to_json() for i in c.issues]
        assert v.n_errors == c.n_errors == 1
        _ok("validate-convert-parity")
