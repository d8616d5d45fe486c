import json

import pytest

from cpsmon.errors import CorruptLog
from cpsmon.replay import verify


def rewrite(src, dst, edit):
    lines = src.read_text().splitlines()
    dst.write_text("\n".join([lines[0]] + edit(lines[1:])) + "\n")
    return dst


def test_unmodified_log_has_no_divergences(shipped):
    _, path, _ = shipped("stuck_value")
    report = verify(path)
    assert report.ok
    assert report.summary().endswith("0 divergences")


def test_deleted_verdict_is_found(shipped, tmp_path):
    result, path, _ = shipped("stuck_value")
    tick = result.rejected[0][0]
    out = rewrite(path, tmp_path / "cut.jsonl",
                  lambda ls: [x for x in ls if '"kind":"verdict"' not in x])
    report = verify(out)
    assert [d.tick for d in report.divergences if "verdict" in d.what] == [tick]


def test_flipped_frame_byte_is_found(shipped, tmp_path):
    _, path, _ = shipped("nominal")

    def flip(lines):
        out, done = [], False
        for x in lines:
            rec = json.loads(x)
            if not done and rec["source"] == "i2m" and rec["label"] == "frame.baro":
                data = bytearray.fromhex(rec["payload"]["data"])
                data[3] ^= 0x10
                rec["payload"]["data"] = data.hex()
                x = json.dumps(rec, sort_keys=True, separators=(",", ":"))
                done = True
            out.append(x)
        return out

    report = verify(rewrite(path, tmp_path / "flip.jsonl", flip))
    assert len(report.divergences) >= 1
    assert any("verdict" in d.what for d in report.divergences)


def test_failsafe_invariant_checked(shipped, tmp_path):
    _, path, records = shipped("return_tamper")
    bad = next(r for r in records if r.kind == "branch_verdict")

    def move(lines):
        out = []
        for x in lines:
            rec = json.loads(x)
            if rec["kind"] == "exec" and rec["tick"] == bad.tick + 100:
                rec["payload"]["address"] += 0x40
                x = json.dumps(rec, sort_keys=True, separators=(",", ":"))
            out.append(x)
        return out

    report = verify(rewrite(path, tmp_path / "fs.jsonl", move))
    assert [d.what for d in report.divergences] == ["failsafe reachability"]


def test_out_of_order_log_is_corrupt(shipped, tmp_path):
    _, path, _ = shipped("nominal")
    out = rewrite(path, tmp_path / "swap.jsonl", lambda ls: [ls[1], ls[0]] + ls[2:])
    with pytest.raises(CorruptLog):
        verify(out)
    out = tmp_path / "bad.jsonl"
    out.write_text('{"schema":"other"}\n')
    with pytest.raises(CorruptLog):
        verify(out)
