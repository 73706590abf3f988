import json
import math

import pytest

from seqnav.bevmap import build_bev
from seqnav.cli import TRANSFORM_IN, main
from seqnav.dataset import read_route
from seqnav.geodesy import GeoFix, enu_to_fix
from seqnav.learning import load_checkpoint_meta
from seqnav.tensorfile import read_records, read_tensors, write_records


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", "-o", str(root / "data"), "--counts", "1", "1", "1", "--seed", "2"]) == 0
    return root


@pytest.fixture(scope="module")
def checkpoint(data):
    path = str(data / "m.sqnv")
    assert main(["train", str(data / "data"), "-o", path, "-K", "2", "--epochs", "2",
                 "--history", str(data / "h.txt")]) == 0
    return path


def test_gen_layout(data):
    for split in ("train", "val", "test"):
        route = data / "data" / split / "route_000"
        assert {p.name for p in route.iterdir()} == {"meta.json", "frames.sqnv", "records.txt"}


def test_train_writes_meta_and_history(data, checkpoint):
    _, _, meta = load_checkpoint_meta(checkpoint)
    assert meta["K"] == 2 and meta["stride"] == 10
    assert (meta["image_factor"], meta["bev_factor"]) == (8, 16)
    _, rows = read_records(data / "h.txt")
    assert [r["epoch"] for r in rows] == [0, 1, 2]


def test_eval_report(data, checkpoint, capsys):
    out = data / "r.json"
    assert main(["eval", checkpoint, str(data / "data"), "--json", str(out)]) == 0
    report = json.loads(out.read_text())
    assert 0.0 <= report["iou"] <= 1.0
    assert all(report[k] >= 0 for k in ("depth_mae", "wp_mae", "ctrl_mae"))
    assert "route_000" in report["per_route"]
    assert "ctrl_mae" in capsys.readouterr().out


def test_bev(data):
    out = data / "bev.sqnv"
    assert main(["bev", str(data / "data" / "test" / "route_000"), "-o", str(out), "--frame", "3",
                 "--png", str(data / "bev.png")]) == 0
    route = read_route(str(data / "data" / "test" / "route_000"))
    fused = None
    for o in route.frames[:4]:
        fused = build_bev(o.labels, o.depth, route.spec.intrinsics, route.spec.extrinsics, fused)
    grid = read_tensors(out)["bev"]
    assert grid.tobytes() == fused.tobytes() and grid.max() == 1.0
    assert (data / "bev.png").stat().st_size > 0


def test_simulate_exit_codes(data, checkpoint):
    route = str(data / "data" / "test" / "route_000")
    assert main(["simulate", "--route", route, "--max-ticks", "20", "-o", str(data / "ep")]) == 2
    assert (data / "ep" / "outcome.txt").read_text() == "budget\n"
    assert (data / "ep" / "trajectory.svg").exists()
    zone = "--bias-zone=-50,-50;50,-50;50,50;-50,50"
    assert main(["simulate", "--route", route, "--checkpoint", checkpoint, zone, "--noise", "0.5",
                 "--max-ticks", "20", "-o", str(data / "ep2")]) == 2
    assert main(["simulate", "--route", str(data / "missing"), "-o", str(data / "ep3")]) == 1


def test_transform(tmp_path):
    o = GeoFix(35.0, 137.0)
    rows = []
    for r1, r2 in [((0, 6), (0, 11)), ((-4, 6), (-8, 11))]:
        robot, prev, f1, f2 = (enu_to_fix(o, *p) for p in ((0, 1), (0, 0), r1, r2))
        rows.append({"robot_lat": robot.lat, "robot_lon": robot.lon, "prev_lat": prev.lat, "prev_lon": prev.lon,
                     "r1_lat": f1.lat, "r1_lon": f1.lon, "r2_lat": f2.lat, "r2_lon": f2.lon})
    write_records(tmp_path / "in.txt", TRANSFORM_IN, rows)
    assert main(["transform", str(tmp_path / "in.txt"), "-o", str(tmp_path / "out.txt")]) == 0
    _, out = read_records(tmp_path / "out.txt")
    assert [r["command"] for r in out] == ["STRAIGHT", "LEFT"]
    assert out[0]["bearing"] == pytest.approx(0.0, abs=1e-9)
    assert out[1]["p1x"] == pytest.approx(-4.0, abs=1e-5) and out[1]["p1y"] == pytest.approx(5.0, abs=1e-5)
    assert all(math.isfinite(r["p2y"]) for r in out)


def test_usage_error_exits_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate"])
    assert exc.value.code == 1
