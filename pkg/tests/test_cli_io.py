import math
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lrds import io
from lrds.cli import main
from lrds.config import RunConfig, dump_config, parse_config
from lrds.errors import ConfigError, ParseError
from lrds.model import INTERCEPT_MEAN, INTERCEPT_VAR
from lrds.simulate import simulate, write_simulation
from lrds.worker import Shard

SMALL = """
[model]
knots_x = -125, -75
knots_y = 20, 50
knot_spacing = 12.5
[params]
sigma = 2.0
scale = 15.0
fine_scale_var = 0.5
[simulate]
servers = 3
times = 0
n = 300
[prediction]
grid_x = -120, -80
grid_y = 25, 45
spacing = 10
"""


def write_config(tmp_path, text=SMALL, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_ingest_two_rows(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("x,y,z,noise_var\n1.5,2,3.25,0.5\n-1,0.125,4,2\n")
    [shard] = io.ingest(path, server_id=4)
    assert shard.server_id == 4 and shard.time_index is None
    np.testing.assert_array_equal(shard.values, [3.25, 4.0])
    np.testing.assert_array_equal(shard.noise_var, [0.5, 2.0])
    np.testing.assert_array_equal(shard.locs, [[1.5, 2.0], [-1.0, 0.125]])


def test_zero_noise_is_rejected_with_position(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("x,y,z,noise_var\n1,2,3,0.5\n1,2,3,0\n")
    with pytest.raises(ParseError) as info:
        io.ingest(path)
    assert (info.value.line, info.value.column) == (3, 4)


@pytest.mark.parametrize("text, line, col", [
    ("a,b,c,d\n1,2,3,4\n", 1, 1),
    ("x,y,z,noise_var\n1,2,3\n", 2, 4),
    ("x,y,z,noise_var\n1,2,abc,1\n", 2, 3),
    ("x,y,z,noise_var\n1,nan,3,1\n", 2, 2),
    ("t,x,y,z,noise_var\n0,1,2,3,1\n", 2, 1),
])
def test_malformed_rows(tmp_path, text, line, col):
    path = tmp_path / "s.csv"
    path.write_text(text)
    with pytest.raises(ParseError) as info:
        io.ingest(path)
    assert (info.value.line, info.value.column) == (line, col)


def test_empty_file_gives_empty_shard(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("")
    [shard] = io.ingest(path, 2)
    assert len(shard) == 0 and shard.server_id == 2


def test_time_column_splits_shards(tmp_path):
    path = tmp_path / "s.csv"
    path.write_text("t,x,y,z,noise_var\n2,0,0,1,1\n1,0,0,2,1\n2,1,1,3,1\n")
    shards = io.ingest(path)
    assert [s.time_index for s in shards] == [1, 2]
    np.testing.assert_array_equal(shards[1].values, [1.0, 3.0])


finite = st.floats(-1e300, 1e300, allow_nan=False, allow_subnormal=True)


@given(st.lists(st.tuples(finite, finite, st.floats(1e-300, 1e300)), min_size=1, max_size=20),
       st.sampled_from([None, 1, 7]))
def test_write_ingest_round_trip(tmp_path_factory, rows, t):
    rng = np.random.default_rng(len(rows))
    locs = np.round(rng.uniform(-180, 180, (len(rows), 2)), 9)
    z = np.array([r[0] for r in rows])
    v = np.array([r[2] for r in rows])
    shard = Shard(3, locs, z, v, t)
    path = tmp_path_factory.mktemp("rt") / "s.csv"
    io.write_shards(path, [shard])
    [back] = io.ingest(path, 3)
    np.testing.assert_array_equal(back.values, z)
    np.testing.assert_array_equal(back.noise_var, v)
    np.testing.assert_array_equal(back.locs, locs)
    assert back.time_index == t


def test_posterior_file_round_trip(tmp_path, rng):
    from lrds.model import GaussianState
    from lrds.numerics import SymMatrix
    A = rng.normal(size=(4, 4))
    st_ = GaussianState.from_precision(rng.normal(size=4), SymMatrix.from_dense(A @ A.T + np.eye(4)))
    io.write_posterior(tmp_path / "p.csv", st_)
    back = io.read_posterior(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.mean, st_.mean)
    np.testing.assert_array_equal(back.precision.data, st_.precision.data)


def test_config_round_trip():
    cfg = parse_config(SMALL)
    again = parse_config(dump_config(cfg))
    assert again == cfg
    assert parse_config(dump_config(RunConfig())) == RunConfig()


@pytest.mark.parametrize("text", [
    "[model]\nbogus = 1\n",
    "[nowhere]\nx = 1\n",
    "[params]\nsigma = lots\n",
    "[inference]\nmode = guess\n",
    "[inference]\nem_trace = other\n",
])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_simulate_noise_free_limit_at_knot():
    cfg = parse_config("[model]\nknots_x=0,10\nknots_y=0,0\nknot_spacing=10\nintercept=false\n"
                       "[params]\nsigma=3.0\nfine_scale_var=0\n"
                       "[simulate]\nservers=1\nn=50\ntimes=0\nnoise_sd=1e-150\n"
                       "domain_x=0,0\ndomain_y=0,0\n")
    sim = simulate(cfg, 5)
    [shard] = sim.shards[1]
    from lrds.model import basis_matrix
    row = basis_matrix(cfg.basis_spec(), cfg.model_params(), np.zeros((1, 2)))[0]
    np.testing.assert_allclose(row[0], 3.0, rtol=1e-15)
    np.testing.assert_array_equal(shard.values, np.full(len(shard), row @ sim.eta[0]))


def test_simulate_prior_moments():
    cfg = parse_config("[model]\nknots_x=0,0\nknots_y=0,0\nintercept=true\n[params]\nsigma=2.0\n"
                       "[simulate]\nservers=1\nn=1\ntimes=0\nnoise_sd=1\n")
    draws = np.array([simulate(cfg, seed).eta[0] for seed in range(2000)])
    mean = np.array([0.0, INTERCEPT_MEAN])
    # the prior precision on knot weights is the knot correlation, here 1
    var = np.array([1.0, INTERCEPT_VAR])
    m = len(draws)
    assert np.all(np.abs(draws.mean(0) - mean) < 3 * np.sqrt(var / m))
    # variance of the sample variance for a normal is 2 s^4 / (m - 1)
    assert np.all(np.abs(draws.var(0, ddof=1) - var) < 3 * var * math.sqrt(2 / (m - 1)))


def test_simulate_writes_identical_files(tmp_path):
    cfg = parse_config(SMALL)
    for name in ("a", "b"):
        write_simulation(simulate(cfg, 11), tmp_path / name, cfg)
    for f in sorted(os.listdir(tmp_path / "a")):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_missing_config_exits_1(capsys):
    assert main(["coordinate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_no_command_exits_1():
    assert main([]) == 1


def test_unreadable_config_exits_1(tmp_path):
    assert main(["coordinate", "--config", str(tmp_path / "absent.ini")]) == 1


def test_bad_shard_exits_1(tmp_path):
    cfg = write_config(tmp_path)
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y,z,noise_var\n1,2,3,-1\n")
    assert main(["coordinate", "--config", cfg, "--shard", str(bad), "--out",
                 str(tmp_path / "o")]) == 1


def test_unreachable_worker_exits_3(tmp_path):
    import socket
    s = socket.create_server(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    cfg = write_config(tmp_path, SMALL + f"[transport]\ncarrier = socket\n"
                                          f"endpoints = 127.0.0.1:{port}\ntimeout = 2\n")
    assert main(["coordinate", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def simulated(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["simulate", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "data")]) == 0
    shards = [str(tmp_path / "data" / f"server_{j}.csv") for j in (1, 2, 3)]
    return cfg, [a for s in shards for a in ("--shard", s)]


def test_coordinate_combine_rerun_is_identical(tmp_path):
    cfg, shard_args = simulated(tmp_path)
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["coordinate", "--config", cfg, "--mode", "combine", "--out", str(out)]
                    + shard_args) == 0
        outs.append(out)
    for f in ("posterior.csv", "likelihood.csv", "predictions.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    rows = io.read_predictions(outs[0] / "predictions.csv")
    assert len(rows) == 5 * 3 and all(r["sd"] > 0 for r in rows)


def test_predict_export_matches_combine(tmp_path):
    cfg, shard_args = simulated(tmp_path)
    out = tmp_path / "r"
    assert main(["coordinate", "--config", cfg, "--out", str(out)] + shard_args) == 0
    assert main(["predict-export", "--config", cfg, "--posterior", str(out / "posterior.csv"),
                 "--out", str(tmp_path / "again.csv")]) == 0
    assert (tmp_path / "again.csv").read_bytes() == (out / "predictions.csv").read_bytes()


def test_verify_on_300_points(tmp_path, capsys):
    cfg, shard_args = simulated(tmp_path)
    assert main(["verify", "--config", cfg] + shard_args) == 0
    lines = capsys.readouterr().out.splitlines()
    errs = {l.split()[0]: float(l.split("=")[1]) for l in lines if "max_error=" in l}
    assert {"posterior_mean", "posterior_precision", "prediction_mean",
            "prediction_variance"} <= set(errs)
    for k, v in errs.items():
        if k != "loglik_difference_abs":
            assert v < 1e-9, k
    assert "passed" in lines[-1]
