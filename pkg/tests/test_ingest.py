import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riskfield.ingest import (
    HEAVY_CLASSES, AgentState, Frame, EmptyRecording, LanePolyline, MalformedRow, MissingColumn,
    NoLaneInformation, Recording, UnreadableFile, detect_lane_changes, is_heavy, load_lanes,
    load_recording, normalize_class, wrap_angle, write_recording,
)

NORM_HEADER = ("frame,id,x_center,y_center,x_velocity,y_velocity,x_acceleration,y_acceleration,"
               "heading_deg,width,length,lane_id")


def write(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


def row(frame, aid, x=0.0, y=0.0, vx=10.0, vy=0.0, ax=0.0, ay=0.0, hdg=0.0, w=1.8, l=4.5, lane=""):
    return f"{frame},{aid},{x},{y},{vx},{vy},{ax},{ay},{hdg},{w},{l},{lane}"


@pytest.fixture
def meta(tmp_path):
    return write(tmp_path / "meta.csv", ["id,class", "1,Car", "2,Truck", "3,truck_bus"])


def test_three_rows_group_into_two_frames(tmp_path, meta):
    tracks = write(tmp_path / "t.csv", [NORM_HEADER, row(0, 1), row(0, 2), row(1, 1)])
    rec = load_recording(tracks, meta)
    assert rec.frame_indices.tolist() == [0, 1]
    assert [len(f.agents) for f in rec.frames] == [2, 1]
    assert rec.agent_class(2) == "truck"
    assert rec.frames[1].t == pytest.approx(0.05)


def test_rows_sorted_by_frame_and_id(tmp_path, meta):
    tracks = write(tmp_path / "t.csv", [NORM_HEADER, row(1, 2), row(0, 2), row(1, 1), row(0, 1)])
    rec = load_recording(tracks, meta)
    assert [a.id for a in rec.frame(0).agents] == [1, 2]
    assert [a.id for a in rec.frame(1).agents] == [1, 2]


def test_heading_degrees_wrap(tmp_path, meta):
    tracks = write(tmp_path / "t.csv", [NORM_HEADER, row(0, 1, hdg=450.0), row(0, 2, hdg=180.0)])
    a, b = load_recording(tracks, meta).frame(0).agents
    assert a.heading == pytest.approx(math.pi / 2)
    assert b.heading == pytest.approx(-math.pi)


@given(st.floats(-1e4, 1e4))
def test_wrap_angle_range(a):
    w = float(wrap_angle(a))
    assert -math.pi <= w < math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-6)


def test_exid_adapter_and_missing_column(tmp_path):
    meta = write(tmp_path / "m.csv", ["trackId,class", "5,car"])
    header = "frame,trackId,xCenter,yCenter,xVelocity,yVelocity,xAcceleration,yAcceleration,heading,width,length"
    good = write(tmp_path / "ok.csv", [header, "0,5,1.0,2.0,3.0,0.0,0.0,0.0,90.0,2.0,4.0"])
    rec = load_recording(good, meta, "exid")
    a = rec.frame(0).agent(5)
    assert a.position == (1.0, 2.0) and a.heading == pytest.approx(math.pi / 2)
    bad = write(tmp_path / "bad.csv", [header.replace("xCenter", "xc"), "0,5,1.0,2.0,3.0,0.0,0.0,0.0,90.0,2.0,4.0"])
    with pytest.raises(MissingColumn) as e:
        load_recording(bad, meta, "exid")
    assert e.value.name == "xCenter"


def test_highd_corner_anchored_boxes(tmp_path):
    meta = write(tmp_path / "m.csv", ["id,class", "1,Truck"])
    header = "frame,id,x,y,width,height,xVelocity,yVelocity,xAcceleration,yAcceleration,laneId"
    tracks = write(tmp_path / "t.csv", [header, "0,1,10.0,4.0,16.0,2.5,-20.0,0.0,0.0,0.0,2"])
    a = load_recording(tracks, meta, "highd").frame(0).agent(1)
    assert a.position == (18.0, 5.25)
    assert (a.length, a.width) == (16.0, 2.5)
    assert a.heading == pytest.approx(-math.pi)
    assert a.cls == "truck"


def test_malformed_and_empty(tmp_path, meta):
    bad = write(tmp_path / "bad.csv", [NORM_HEADER, row(0, 1), "1,1,abc,0,0,0,0,0,0,1,1,"])
    with pytest.raises(MalformedRow) as e:
        load_recording(bad, meta)
    assert e.value.line == 3
    short = write(tmp_path / "short.csv", [NORM_HEADER, "0,1,0"])
    with pytest.raises(MalformedRow):
        load_recording(short, meta)
    empty = write(tmp_path / "empty.csv", [NORM_HEADER])
    with pytest.raises(EmptyRecording):
        load_recording(empty, meta)


def test_missing_file_names_path(tmp_path, meta):
    tracks = write(tmp_path / "t.csv", [NORM_HEADER, row(0, 1)])
    with pytest.raises(UnreadableFile, match="nope.csv"):
        load_recording(tracks, tmp_path / "nope.csv")


def test_acceleration_backfill(tmp_path, meta):
    header = "frame,id,x_center,y_center,x_velocity,y_velocity,heading_deg,width,length"
    lines = [header] + [f"{k},1,0,0,{10 + 0.1 * k},0,0,1.8,4.5" for k in range(5)]
    rec = load_recording(write(tmp_path / "t.csv", lines), meta, frame_rate=20.0)
    ax = [f.agent(1).acceleration[0] for f in rec.frames]
    np.testing.assert_allclose(ax, 2.0, rtol=1e-9)


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(1, 3)), min_size=1, max_size=30, unique=True))
@settings(max_examples=40, deadline=None)
def test_grouping_is_partition(tmp_path_factory, keys):
    d = tmp_path_factory.mktemp("p")
    meta = write(d / "m.csv", ["id,class", "1,car", "2,van", "3,bus"])
    tracks = write(d / "t.csv", [NORM_HEADER] + [row(k, a) for k, a in keys])
    rec = load_recording(tracks, meta)
    assert sum(len(f.agents) for f in rec.frames) == len(keys)
    again = load_recording(tracks, meta)
    assert np.array_equal(rec.tracks.x, again.tracks.x) and rec.frame_indices.tolist() == again.frame_indices.tolist()


def test_write_recording_round_trip(tmp_path):
    frames = [Frame(k, k / 20, (AgentState(1, (k * 1.0, 2.0), (20.0, 0.0), lane_id=1),
                                AgentState(4, (30.0, 5.0), cls="truck", length=16.0, width=2.5)))
              for k in range(3)]
    rec = Recording.from_frames(frames)
    write_recording(rec, tmp_path / "t.csv", tmp_path / "m.csv")
    back = load_recording(tmp_path / "t.csv", tmp_path / "m.csv")
    assert back.frame(2).agent(1).position == (2.0, 2.0)
    assert back.frame(0).agent(4).lane_id is None
    assert back.agent_class(4) == "truck"


def _lane_rec(seq, rate=20.0):
    frames = [Frame(k, k / rate, (AgentState(1, (k * 1.0, 0.0), (20.0, 0.0), lane_id=l),))
              for k, l in enumerate(seq)]
    return Recording.from_frames(frames, rate)


def test_single_lane_change():
    ev = detect_lane_changes(_lane_rec([2, 2, 3, 3]))
    assert len(ev) == 1
    assert ev[0].t_cross == pytest.approx(0.1)
    assert ev[0].t_dec == 0.0  # clamped to the first frame
    assert (ev[0].from_lane, ev[0].to_lane) == (2, 3)


def test_no_and_double_transitions():
    assert detect_lane_changes(_lane_rec([1] * 6)) == []
    assert len(detect_lane_changes(_lane_rec([2, 3, 2]))) == 2


@given(st.lists(st.integers(1, 3), min_size=2, max_size=40))
def test_transition_count_matches_brute_force(seq):
    expected = sum(a != b for a, b in zip(seq, seq[1:]))
    ev = detect_lane_changes(_lane_rec(seq))
    assert len(ev) == expected
    assert all(e.t_dec <= e.t_cross for e in ev)


def test_decision_time_and_target_projection():
    rate = 10.0
    seq = [1] * 30 + [2] * 10
    frames = [Frame(k, k / rate, (AgentState(1, (k * 2.0, 0.0 + 0.1 * max(0, k - 25)), (20.0, 0.0),
                                             lane_id=l),)) for k, l in enumerate(seq)]
    lanes = (LanePolyline(1, np.array([[0.0, 0.0], [100.0, 0.0]])),
             LanePolyline(2, np.array([[0.0, 3.5], [100.0, 3.5]])))
    ev = detect_lane_changes(Recording.from_frames(frames, rate, lanes=lanes))[0]
    assert ev.t_cross == pytest.approx(3.0) and ev.t_dec == pytest.approx(2.0)
    assert ev.x_curr == (40.0, 0.0)
    assert ev.x_target == (40.0, 3.5)


def test_lane_inference_from_geometry():
    frames = [Frame(k, k / 20, (AgentState(1, (k * 1.0, 0.1 * k), (20.0, 2.0)),)) for k in range(40)]
    lanes = (LanePolyline(0, np.array([[0.0, 0.0], [100.0, 0.0]])),
             LanePolyline(1, np.array([[0.0, 3.5], [100.0, 3.5]])))
    assert len(detect_lane_changes(Recording.from_frames(frames, lanes=lanes))) == 1
    with pytest.raises(NoLaneInformation):
        detect_lane_changes(Recording.from_frames(frames))


def test_is_heavy():
    truck = AgentState(1, (0.0, 0.0), cls="truck")
    van = AgentState(2, (0.0, 0.0), cls="van")
    assert is_heavy(truck)
    assert not is_heavy(AgentState(3, (0.0, 0.0)))
    assert not is_heavy(van)
    assert is_heavy(van, HEAVY_CLASSES | {"van"})


def test_class_normalisation():
    assert normalize_class("Truck_Bus") == "truck"
    assert normalize_class(" semitrailer ") == "truck_trailer"
    assert normalize_class("hovercraft") == "other"


def test_load_lanes(tmp_path):
    p = write(tmp_path / "lanes.csv", ["lane_id,vertex_index,x,y,nominal_speed",
                                       "2,1,100,3.5,25", "2,0,0,3.5,25", "1,0,0,0,"])
    lanes = load_lanes(p)
    assert [ln.lane_id for ln in lanes] == [1, 2]
    assert lanes[1].points.tolist() == [[0.0, 3.5], [100.0, 3.5]]
    assert lanes[1].nominal_speed == 25.0
