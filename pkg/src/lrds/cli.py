"""Command-line entry point: ``lrds <command> --config run.ini ...``.

Exit codes: 0 success, 1 usage/config/parse error, 2 numerical failure,
3 transport failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional, Sequence

import numpy as np

from . import io
from .config import MODES, RunConfig, load_config
from .coordinator import (
    a_total,
    combine,
    importance_sample,
    neg2_loglik,
    predict,
    run_em,
    run_sir,
    spatial_summaries,
    st_batch_smooth,
)
from .errors import ConfigError, LRDSError, NumericalError, TransportError, UsageError
from .model import ModelParams, PredictiveProcessBasis, RandomWalkPrior, evolution, prior_state
from .oracle import DENSE_CAP, verify
from .simulate import simulate, write_simulation
from .transport import Session, SocketChannel, WorkerNode, WorkerServer, parse_endpoint
from .transport.session import InProcessChannel
from .worker import ServerData

log = logging.getLogger("lrds")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="lrds", description="Distributed low-rank spatial and spatio-temporal inference.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, help="overrides [inference] seed")

    p = sub.add_parser("simulate", help="write synthetic shard and truth files")
    common(p)
    p.add_argument("--out", required=True, help="output directory")

    w = sub.add_parser("worker", help="worker roles")
    wsub = w.add_subparsers(dest="worker_command", parser_class=_Parser)
    p = wsub.add_parser("serve", help="serve one shard file over TCP")
    common(p)
    p.add_argument("--shard", required=True)
    p.add_argument("--server-id", type=int, default=1)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, help="default: [transport] port, then LRDS_PORT")
    p.add_argument("--once", action="store_true", help="exit after one coordinator session")

    p = sub.add_parser("coordinate", help="run inference over the workers")
    common(p)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--shard", action="append", default=[],
                   help="[ID=]FILE for the in-process carrier (repeatable)")
    p.add_argument("--out", default=".", help="output directory")

    p = sub.add_parser("verify", help="distributed versus dense answers on a capped subset")
    common(p)
    p.add_argument("--shard", action="append", default=[])
    p.add_argument("--cap", type=int)

    p = sub.add_parser("predict-export", help="prediction map from a saved posterior")
    common(p)
    p.add_argument("--posterior", required=True)
    p.add_argument("--out", required=True, help="prediction CSV path")
    return ap


# -- helpers ------------------------------------------------------------------

def _shard_args(cfg: RunConfig, args) -> List[tuple]:
    items = list(getattr(args, "shard", []) or []) or list(cfg.data.shards)
    out = []
    for pos, item in enumerate(items, start=1):
        sid, sep, path = item.partition("=")
        if sep:
            try:
                out.append((int(sid), path))
            except ValueError:
                raise UsageError(f"bad shard argument {item!r}; expected ID=FILE") from None
        else:
            out.append((pos, item))
    return out


def _servers(cfg: RunConfig, args) -> List[ServerData]:
    pairs = _shard_args(cfg, args)
    if not pairs:
        raise UsageError("no shard files given (--shard or [data] shards)")
    return [io.ingest_server(path, sid) for sid, path in pairs]


def _session(cfg: RunConfig, args, spec) -> Session:
    t = cfg.transport
    if t.carrier == "inprocess":
        chans = [InProcessChannel(WorkerNode(s, {0: spec})) for s in _servers(cfg, args)]
    else:
        if not t.endpoints:
            raise ConfigError("socket carrier needs [transport] endpoints")
        chans = []
        for pos, ep in enumerate(t.endpoints, start=1):
            sid, sep, addr = ep.partition("@")
            if not sep:
                sid, addr = str(pos), ep
            host, port = parse_endpoint(addr)
            chans.append(SocketChannel(int(sid), host, port if port is not None else t.port))
    return Session(chans, spec, timeout=t.timeout)


def spec_needs_params(spec) -> bool:
    return isinstance(spec, PredictiveProcessBasis)


def _theta_names():
    return ["theta_alpha", "theta_sigma", "theta_smoothness", "theta_scale",
            "theta_fine_scale_var"]


def _times(cfg: RunConfig, session: Session) -> List[int]:
    """Time steps to analyse: configured, else those held by in-process workers."""
    if cfg.inference.times > 0:
        return list(range(1, cfg.inference.times + 1))
    times = set()
    for c in session.channels:
        node = getattr(c, "node", None)
        if node is not None:
            times.update(node.data.times)
    if not times:
        raise ConfigError("set [inference] times for time-indexed data over sockets")
    return sorted(times)


# -- commands -----------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, args) -> int:
    seed = cfg.inference.seed if args.seed is None else args.seed
    sim = simulate(cfg, seed)
    paths = write_simulation(sim, args.out, cfg)
    for p in paths:
        print(p)
    return 0


def cmd_worker_serve(cfg: RunConfig, args) -> int:
    data = io.ingest_server(args.shard, args.server_id)
    port = args.port if args.port is not None else cfg.transport.port
    server = WorkerServer(WorkerNode(data, {0: cfg.basis_spec()}), args.host, port,
                          max_connections=1 if args.once else None)
    host, port = server.address
    print(f"worker {args.server_id} listening on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def _write_predictions(out, name, rows):
    if rows:
        io.write_predictions(os.path.join(out, name), rows)


def cmd_coordinate(cfg: RunConfig, args) -> int:
    mode = args.mode or cfg.inference.mode
    if mode == "verify":
        return cmd_verify(cfg, args)
    seed = cfg.inference.seed if args.seed is None else args.seed
    out = io.ensure_dir(args.out)
    spec = cfg.basis_spec()
    grid = cfg.prediction_grid()
    with _session(cfg, args, spec) as session:
        if mode in ("combine", "likelihood"):
            p = cfg.model_params() if spec_needs_params(spec) else cfg.params.fine_scale_var
            prior = prior_state(spec, p, cfg.model.jitter)
            sums = spatial_summaries(session, [p])[0]
            post = combine(prior, sums)
            ll = neg2_loglik(prior, post, a_total(sums))
            io.write_table(os.path.join(out, "likelihood.csv"), ["neg2loglik", "n"],
                           [(ll, sum(s.n for s in sums))])
            if mode == "combine":
                io.write_posterior(os.path.join(out, "posterior.csv"), post)
                if grid is not None:
                    _write_predictions(out, "predictions.csv",
                                       [(None, predict(post, spec, p, grid))])
        elif mode == "importance":
            rng = np.random.default_rng(seed)
            theta0 = cfg.model_params().to_transformed()
            res = importance_sample(session, RandomWalkPrior(theta0, cfg.inference.walk_scale),
                                    cfg.inference.particles, rng, jitter=cfg.model.jitter)
            io.write_table(os.path.join(out, "particles.csv"),
                           ["id"] + _theta_names() + ["log_weight", "neg2loglik"],
                           [(pt.id, *map(float, pt.theta), pt.log_weight, float(res.neg2_loglik[i]))
                            for i, pt in enumerate(res.particles)])
            if grid is not None:
                _write_predictions(out, "predictions.csv",
                                   [(None, res.predict(spec, grid, cfg.inference.weight_floor))])
        elif mode == "em":
            inf = cfg.inference
            res = run_em(session, cfg.params.fine_scale_var, max_iter=inf.em_max_iter,
                         tol=inf.em_tol, trace=inf.em_trace, pooled=inf.em_pooled,
                         one_pass=inf.em_one_pass)
            io.write_table(os.path.join(out, "em_history.csv"),
                           ["iteration", "neg2loglik", "step"],
                           [(k, ll, res.steps[k - 1] if k else float("nan"))
                            for k, ll in enumerate(res.neg2_loglik)])
            rows, cols = np.tril_indices(len(res.K0))
            io.write_table(os.path.join(out, "em_estimate.csv"), ["name", "i", "j", "value"],
                           [("fine_scale_var", "", "", res.fine_scale_var)]
                           + [("K0", i, j, float(res.K0[i, j])) for i, j in zip(rows, cols)])
        elif mode == "filter":
            p = cfg.model_params()
            times = _times(cfg, session)
            table = session.summaries([p], times)[0]
            prior = prior_state(spec, p, cfg.model.jitter)
            ev = evolution(p, spec, cfg.model.jitter, cfg.model.intercept_innovation_var)
            traj, smoothed = st_batch_smooth(table, prior, [ev] * len(times))
            io.write_table(os.path.join(out, "filter.csv"), ["t", "neg2loglik"],
                           list(zip(times, traj.neg2_loglik)))
            if grid is not None:
                _write_predictions(out, "predictions.csv",
                                   [(t, predict(s, spec, p, grid))
                                    for t, s in zip(times, traj.filtered)])
                _write_predictions(out, "smoothed_predictions.csv",
                                   [(t, predict(s, spec, p, grid))
                                    for t, s in zip(times, smoothed)])
        elif mode == "sir":
            inf = cfg.inference
            times = _times(cfg, session)
            steps = run_sir(session, times, cfg.model_params().to_transformed(), inf.particles,
                            np.random.default_rng(seed), inf.walk_scale, cfg.model.jitter,
                            cfg.model.intercept_innovation_var, grid, inf.weight_floor)
            io.write_table(os.path.join(out, "particles.csv"),
                           ["t", "id"] + _theta_names() + ["log_weight", "neg2loglik", "ancestor"],
                           [(s.t, pt.id, *map(float, pt.theta), pt.log_weight,
                             float(s.neg2_loglik[k]), int(s.ancestors[k]))
                            for s in steps for k, pt in enumerate(s.particles)])
            if grid is not None:
                _write_predictions(out, "predictions.csv", [(s.t, s.prediction) for s in steps])
    return 0


def cmd_verify(cfg: RunConfig, args) -> int:
    spec = cfg.basis_spec()
    p = cfg.model_params() if spec_needs_params(spec) else cfg.params.fine_scale_var
    servers = _servers(cfg, args)
    shards = []
    for s in servers:
        t = None if None in s.shards else (s.times[0] if s.times else None)
        shards.append(s.shard(t))
    cap = getattr(args, "cap", None) or cfg.inference.verify_cap or DENSE_CAP
    grid = cfg.prediction_grid()
    rng = np.random.default_rng(cfg.inference.seed)
    pred = grid[rng.choice(len(grid), size=min(20, len(grid)), replace=False)] \
        if grid is not None else cfg.knots() + 0.5
    if isinstance(p, ModelParams):
        alt = ModelParams.natural(alpha=p.temporal_coef, sigma=p.matern.sigma * 1.1,
                                  smoothness=p.matern.smoothness, scale=p.matern.scale * 0.9,
                                  fine_scale_var=p.fine_scale_var * 1.2)
    else:
        alt = p * 1.2
    errs = verify(shards, spec, p, pred, alt, cap)
    worst = 0.0
    for k, v in errs.items():
        print(f"{k} max_error={v:.3e}")
        worst = max(worst, v)
    ok = worst < 1e-8
    print(f"verify {'passed' if ok else 'FAILED'} (max error {worst:.3e})")
    if not ok:
        raise NumericalError(f"distributed and dense answers differ by {worst:.3e}")
    return 0


def cmd_predict_export(cfg: RunConfig, args) -> int:
    spec = cfg.basis_spec()
    p = cfg.model_params() if spec_needs_params(spec) else cfg.params.fine_scale_var
    grid = cfg.prediction_grid()
    if grid is None:
        raise ConfigError("predict-export needs [prediction] grid_x and grid_y")
    post = io.read_posterior(args.posterior)
    io.write_predictions(args.out, [(None, predict(post, spec, p, grid))])
    return 0


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return 1
    if isinstance(exc, NumericalError):
        return 2
    if isinstance(exc, TransportError):
        return 3
    return 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = _parser()
    try:
        args = ap.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None or (args.command == "worker" and args.worker_command is None):
            raise UsageError(ap.format_usage())
        cfg = load_config(args.config)
        if args.command == "simulate":
            return cmd_simulate(cfg, args)
        if args.command == "worker":
            return cmd_worker_serve(cfg, args)
        if args.command == "coordinate":
            return cmd_coordinate(cfg, args)
        if args.command == "verify":
            return cmd_verify(cfg, args)
        if args.command == "predict-export":
            return cmd_predict_export(cfg, args)
        raise UsageError(f"unknown command {args.command}")
    except LRDSError as exc:
        print(f"lrds: error: {exc}", file=sys.stderr)
        return exit_code(exc)
    except (OSError, ValueError) as exc:
        print(f"lrds: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
