import struct

import numpy as np
import pytest

from qlink.timetags import (
    HEADER,
    TagFileError,
    TagFileWriter,
    TimeTagStream,
    read_binary,
    read_csv,
    read_records,
    read_tags,
    write_binary,
    write_csv,
)


def small_stream():
    return TimeTagStream({0: np.array([5, 1_000, 2 ** 40]), 3: np.array([5, 7])}, duration=2.0)


def test_stream_invariants():
    with pytest.raises(ValueError):
        TimeTagStream({0: np.array([3, 3])}, 1.0)
    with pytest.raises(ValueError):
        TimeTagStream({0: np.array([2 * 10 ** 12])}, 1.0)
    with pytest.raises(ValueError):
        TimeTagStream({0: np.array([10])}, 1.0, start=1.0)
    with pytest.raises(ValueError):
        TimeTagStream({}, -1.0)
    s = small_stream()
    assert s.singles_rate(0) == 1.5
    assert s.shifted(100).channels[3].tolist() == [105, 107]


def test_binary_layout_is_bit_exact(tmp_path):
    path = tmp_path / "x.qtt"
    write_binary(small_stream(), path)
    expected = struct.pack("<4sIQ", b"QTT1", 1, 5)
    for ts, ch in [(5, 0), (5, 3), (7, 3), (1_000, 0), (2 ** 40, 0)]:
        expected += struct.pack("<QII", ts, ch, 0)
    assert path.read_bytes() == expected


def test_binary_round_trip(tmp_path):
    path = tmp_path / "x.qtt"
    s = small_stream()
    write_binary(s, path)
    back = read_binary(path, duration=2.0)
    assert back.channels.keys() == s.channels.keys()
    for ch in s.channels:
        np.testing.assert_array_equal(back.channels[ch], s.channels[ch])
    assert read_binary(path).duration == pytest.approx(2 ** 40 / 1e12)


def test_writer_appends_and_rejects_overlap(tmp_path):
    path = tmp_path / "y.qtt"
    with TagFileWriter(path) as w:
        w.write(TimeTagStream({0: np.array([1, 2])}, 1.0))
        w.write(TimeTagStream({0: np.array([10 ** 12 + 5])}, 1.0, start=1.0))
        with pytest.raises(ValueError):
            w.write(TimeTagStream({0: np.array([3])}, 1.0))
    assert read_records(path).size == 3
    assert struct.unpack("<4sIQ", path.read_bytes()[:16])[2] == 3


@pytest.mark.parametrize("mutate,msg", [
    (lambda b: b"QTT2" + b[4:], "magic"),
    (lambda b: b[:-3], "size"),
    (lambda b: b[:10], "truncated"),
    (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
    (lambda b: b[:-4] + struct.pack("<I", 1), "reserved"),
    (lambda b: b"", "truncated"),
])
def test_malformed_binary(tmp_path, mutate, msg):
    good = tmp_path / "g.qtt"
    write_binary(small_stream(), good)
    bad = tmp_path / "b.qtt"
    bad.write_bytes(mutate(good.read_bytes()))
    with pytest.raises(TagFileError, match=msg):
        read_binary(bad)


def test_empty_and_unknown_files(tmp_path):
    empty = tmp_path / "e.qtt"
    empty.write_bytes(b"")
    with pytest.raises(TagFileError):
        read_tags(empty)
    zero = tmp_path / "z.qtt"
    zero.write_bytes(HEADER.pack(b"QTT1", 1, 0))
    with pytest.raises(TagFileError):
        read_tags(zero)
    junk = tmp_path / "j.bin"
    junk.write_bytes(b"hello world")
    with pytest.raises(TagFileError):
        read_tags(junk)
    with pytest.raises(TagFileError):
        read_tags(tmp_path / "missing.qtt")


def test_csv_round_trip_and_sniffing(tmp_path):
    s = small_stream()
    write_csv(s, tmp_path / "t.csv")
    text = (tmp_path / "t.csv").read_text().splitlines()
    assert text[0] == "channel,timestamp_ps"
    assert text[1:3] == ["0,5", "3,5"]
    for reader in (read_csv, read_tags):
        back = reader(tmp_path / "t.csv", duration=2.0)
        for ch in s.channels:
            np.testing.assert_array_equal(back.channels[ch], s.channels[ch])
    write_binary(s, tmp_path / "t.qtt")
    np.testing.assert_array_equal(read_tags(tmp_path / "t.qtt").channels[0], s.channels[0])


def test_malformed_csv(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("channel,timestamp_ps\n0,abc\n")
    with pytest.raises(TagFileError):
        read_csv(p)
    p.write_text("channel,timestamp_ps\n0,5\n0,5\n")
    with pytest.raises(TagFileError):
        read_csv(p)
    p.write_text("channel,timestamp_ps\n")
    with pytest.raises(TagFileError):
        read_csv(p)
