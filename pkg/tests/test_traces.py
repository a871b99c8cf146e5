import io

import pytest
from hypothesis import given, settings, strategies as st

from netcal.traces import (
    Direction, PacketRecord, Protocol, SyscallRecord, Trace, TraceKind, TraceParseError,
    filter_by_pids, format_record, iter_records, load_trace, merge_traces, parse_record, write_trace,
)


def _pkt(ts, pid=1, proto=Protocol.TCP):
    ports = {} if proto is Protocol.ICMP else {"src_port": 40000, "dst_port": 443}
    return PacketRecord(ts, proto, "10.0.0.1", "8.8.8.8", 60, Direction.OUTBOUND, pid=pid, **ports)


def test_packet_round_trip(tmp_path):
    recs = (_pkt(0.5), _pkt(1.25, proto=Protocol.ICMP), _pkt(2.000001, pid=None))
    trace = Trace(TraceKind.PACKET, recs)
    path = tmp_path / "t.trace"
    write_trace(trace, path)
    back = load_trace(path, "packet")
    assert back.records == recs


def test_syscall_round_trip():
    recs = (SyscallRecord(0.1, "read", 7), SyscallRecord(0.2, "execve", 8, category="process"))
    buf = io.StringIO()
    write_trace(Trace(TraceKind.SYSCALL, recs), buf)
    back = tuple(iter_records(buf.getvalue().splitlines(), TraceKind.SYSCALL))
    assert back == recs


def test_out_of_range_port_names_line():
    good = format_record(_pkt(0.0))
    bad = good.replace("dst_port=443", "dst_port=70000")
    with pytest.raises(TraceParseError) as exc:
        list(iter_records([good, good, bad], TraceKind.PACKET))
    assert exc.value.lineno == 3
    assert "line 3" in str(exc.value)


def test_lenient_load_counts_malformed(tmp_path):
    good = format_record(_pkt(0.0))
    path = tmp_path / "t.trace"
    path.write_text(good + "\nnot a record\n" + format_record(_pkt(1.0)) + "\n")
    with pytest.raises(TraceParseError):
        load_trace(path, "packet")
    trace = load_trace(path, "packet", strict=False)
    assert len(trace) == 2 and trace.malformed_lines == 1


def test_icmp_rejects_ports_and_tcp_requires_them():
    with pytest.raises(ValueError):
        PacketRecord(0.0, Protocol.ICMP, "10.0.0.1", "10.0.0.2", 10, Direction.INBOUND, src_port=1, dst_port=2)
    with pytest.raises(ValueError):
        PacketRecord(0.0, Protocol.UDP, "10.0.0.1", "10.0.0.2", 10, Direction.INBOUND)


def test_decreasing_timestamps_rejected():
    with pytest.raises(ValueError):
        Trace(TraceKind.PACKET, (_pkt(2.0), _pkt(1.0)))


def test_filter_by_pids_examples():
    trace = Trace(TraceKind.PACKET, (_pkt(0, 1), _pkt(1, 2), _pkt(2, None), _pkt(3, 1)))
    assert [r.timestamp for r in filter_by_pids(trace, {1})] == [0, 3]
    assert len(filter_by_pids(trace, set())) == 0
    assert len(filter_by_pids(trace, {1, 2})) == 3


@settings(max_examples=60, deadline=None)
@given(
    pids=st.lists(st.one_of(st.none(), st.integers(0, 5)), max_size=40),
    a=st.sets(st.integers(0, 5)),
    b=st.sets(st.integers(0, 5)),
)
def test_filter_idempotent_and_composes_as_intersection(pids, a, b):
    trace = Trace(TraceKind.PACKET, tuple(_pkt(float(i), p) for i, p in enumerate(pids)))
    once = filter_by_pids(trace, a)
    assert filter_by_pids(once, a) == once
    assert filter_by_pids(once, b) == filter_by_pids(trace, a & b)


def test_merge_interleaves_by_time():
    a = Trace(TraceKind.PACKET, (_pkt(0.0, 1), _pkt(2.0, 1)))
    b = Trace(TraceKind.PACKET, (_pkt(1.0, 2), _pkt(2.0, 2)))
    merged = merge_traces([a, b])
    assert [(r.timestamp, r.pid) for r in merged] == [(0.0, 1), (1.0, 2), (2.0, 1), (2.0, 2)]


def test_parse_record_unknown_protocol():
    line = format_record(_pkt(0.0)).replace("proto=TCP", "proto=SCTP")
    with pytest.raises(TraceParseError):
        parse_record(line, TraceKind.PACKET, 5)
