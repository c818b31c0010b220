"""Command line front end.

    offguard worker  --listen <addr:port> --store <dir> [--behavior ...]
    offguard client  setup|infer|verify|records ...
    offguard analyze masking-game|attack|detection|sweep-k ...

The client keeps its state (worker endpoints, options, records) in a
store directory so setup/infer/verify work across invocations. The
OFFGUARD_LISTEN environment variable supplies the worker bind address
when --listen is omitted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import analysis
from .client import (
    MODE_LAYERED,
    OffloadClient,
    OffloadPlan,
    list_records,
    save_record,
    select_verification,
)
from .container import load_model
from .errors import OffguardError
from .masking import load_mask_set, save_mask_set
from .protocol import MODE_HOLISTIC
from .tensor import load_tensor
from .transport import connect
from .worker import Cheat, Honest, WorkerCore, serve

DEFAULT_LISTEN = "127.0.0.1:9631"


def _parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


# ---------------------------------------------------------------------------
# worker


def _cmd_worker(args) -> int:
    listen = args.listen or os.environ.get("OFFGUARD_LISTEN", DEFAULT_LISTEN)
    host, port = _parse_endpoint(listen)
    if args.behavior == "cheat":
        behavior = Cheat(beta=args.cheat_beta, target_layer=args.cheat_layer, seed=args.seed)
    else:
        behavior = Honest()
    core = WorkerCore(behavior=behavior, capacity=args.capacity, store_dir=args.store)
    serve(core, host, port)
    return 0


# ---------------------------------------------------------------------------
# client


def _store_config_path(store: str) -> str:
    return os.path.join(store, "config.json")


def _load_client(store: str, mode: str | None = None, verify_ratio: float | None = None) -> OffloadClient:
    with open(_store_config_path(store)) as f:
        cfg = json.load(f)
    model = load_model(cfg["model"])
    sessions = [connect(ep) for ep in cfg["workers"]]
    plan = OffloadPlan(
        mode=mode or cfg["mode"],
        privacy_k=cfg.get("privacy_k"),
        confidentiality_k=cfg.get("confidentiality_k"),
        verify_ratio=verify_ratio if verify_ratio is not None else cfg.get("verify_ratio", 1.0),
    )
    return OffloadClient(model, sessions, plan, rng_seed=cfg.get("seed", 0))


def _masks_dir(store: str) -> str:
    return os.path.join(store, "masks")


def _load_mask_pools(store: str, cli: OffloadClient) -> None:
    directory = _masks_dir(store)
    if not os.path.isdir(directory):
        return
    for name in os.listdir(directory):
        if name.endswith(".masks"):
            pool = load_mask_set(os.path.join(directory, name))
            cli.mask_sets[pool.layer_index] = pool


def _save_mask_pools(store: str, cli: OffloadClient) -> None:
    directory = _masks_dir(store)
    os.makedirs(directory, exist_ok=True)
    for layer_index, pool in cli.mask_sets.items():
        save_mask_set(os.path.join(directory, f"layer_{layer_index:03d}.masks"), pool)


def _cmd_client_setup(args) -> int:
    workers = args.workers.split(",")
    privacy_k = args.privacy_k
    confidentiality_k = args.confidentiality_k
    mode = MODE_LAYERED if (privacy_k is not None or confidentiality_k is not None) else args.mode
    os.makedirs(args.store, exist_ok=True)
    cfg_path = _store_config_path(args.store)
    # each setup draws a fresh mask generation, so a re-run to restock the
    # pools never re-issues epsilons an earlier pool already spent
    generation = 0
    if os.path.exists(cfg_path):
        with open(cfg_path) as f:
            generation = json.load(f).get("mask_generation", 0) + 1
    cfg = {
        "model": os.path.abspath(args.model),
        "workers": workers,
        "mode": mode,
        "privacy_k": privacy_k,
        "confidentiality_k": confidentiality_k,
        "verify_ratio": args.verify_ratio,
        "seed": args.seed,
        "mask_generation": generation,
    }
    with open(cfg_path, "w") as f:
        json.dump(cfg, f, indent=2)
    cli = _load_client(args.store)
    cli.setup()
    if privacy_k is not None:
        cli.prepare_masks(args.masks, generation=generation)
        _save_mask_pools(args.store, cli)
        print(f"stockpiled {args.masks} masks per offloaded layer")
    print(f"setup complete: {len(workers)} worker(s), mode={mode}")
    return 0


def _cmd_client_infer(args) -> int:
    cli = _load_client(args.store, mode=args.mode, verify_ratio=args.verify_ratio)
    x = load_tensor(args.input)
    if cli.plan.privacy_k is not None:
        _load_mask_pools(args.store, cli)
    y, record = cli.offload_infer(x)
    if cli.plan.privacy_k is not None:
        _save_mask_pools(args.store, cli)  # consumed flags must survive restarts
    save_record(os.path.join(args.store, "records"), record)
    print(f"inference {record.inference_id}: output shape {tuple(y.shape)}")
    print(f"argmax = {int(np.argmax(y))}")
    if record.commit is not None:
        print(f"commit = {record.commit.root.hex()}")
    return 0


def _cmd_client_verify(args) -> int:
    cli = _load_client(args.store)
    records_dir = os.path.join(args.store, "records")
    record = None
    for rec in list_records(records_dir):
        if rec.inference_id == args.inference:
            record = rec
            break
    if record is None:
        print(f"no record for inference {args.inference}", file=sys.stderr)
        return 1
    if record.mode == MODE_LAYERED:
        verdicts = [
            cli.verify_layer_local(record, i) for i in range(len(cli.model.layers))
        ]
        ok = all(v.passed for v in verdicts)
        record.status = "passed" if ok else "failed_recompute"
        record.checked_fraction = 1.0
        save_record(records_dir, record)
        print(f"inference {args.inference}: {'passed' if ok else 'FAILED'} (local recompute)")
        return 0 if ok else 2
    selection = select_verification(record, args.fraction, args.seed)
    verdict = cli.verify_async(record, selection)
    save_record(records_dir, record)
    print(
        f"inference {args.inference}: {verdict.status}"
        f" (checked {verdict.checked_fraction:.2%} of committed units)"
    )
    if verdict.evidence:
        print(f"evidence: units {list(verdict.evidence)}")
    return 0 if verdict.passed else 2


def _cmd_client_records(args) -> int:
    for rec in list_records(os.path.join(args.store, "records")):
        extra = f" checked={rec.checked_fraction:.2%}" if rec.status != "unverified" else ""
        print(f"{rec.inference_id:8d}  {rec.mode:9s}  {rec.status}{extra}")
    return 0


# ---------------------------------------------------------------------------
# analyze


def _cmd_analyze_masking_game(args) -> int:
    rate = analysis.simulate_masking_game(0.0, 1.0, args.k, args.trials, args.seed)
    expected = analysis.expected_game_success(args.k)
    print(f"k = {args.k:g}, trials = {args.trials}")
    print(f"adversary success: simulated {rate:.5f}, closed form {expected:.5f}")
    return 0


def _cmd_analyze_attack(args) -> int:
    lo, hi = (float(v) for v in args.range.split(","))
    cfg = analysis.AttackTrialConfig(lo, hi, args.k, args.trials, args.seed)
    baseline, bounded = analysis.simulate_mask_attack(cfg)
    print(f"k = {args.k:g}, trials = {args.trials}, range = [{lo:g}, {hi:g}]")
    print(f"random-baseline error : {baseline:.5f} of range")
    print(f"range-bounded error   : {bounded:.5f} of range")
    return 0


def _cmd_analyze_detection(args) -> int:
    cells = analysis.tabulate_detection(
        [args.n], [args.alpha], [args.beta], [args.rounds],
        trials=args.trials, seed=args.seed, simulate=args.simulate,
    )
    print(f"{'n':>6} {'alpha':>7} {'beta':>7} {'rounds':>6} {'closed':>10} {'simulated':>10} {'flag':>5}")
    for c in cells:
        sim = f"{c.simulated:.5f}" if c.simulated is not None else "-"
        flag = "DIV" if c.diverges else ""
        print(f"{c.n:>6} {c.alpha:>7g} {c.beta:>7g} {c.iterations:>6} {c.closed_form:>10.5f} {sim:>10} {flag:>5}")
    return 0


def _cmd_analyze_sweep(args) -> int:
    model = load_model(args.model)
    corpus = [
        load_tensor(os.path.join(args.corpus, name))
        for name in sorted(os.listdir(args.corpus))
        if name.endswith(".tensor")
    ]
    ks = [float(v) for v in args.k_values.split(",")]
    rows = analysis.sweep_k(model, corpus, ks, args.options, seed=args.seed)
    print(f"{'k':>12} {'options':>8} {'agreement':>10} {'mean rel err':>14}")
    lines = ["k,options,agreement,mean_rel_error"]
    for row in rows:
        print(f"{row.k:>12g} {row.options:>8} {row.agreement:>10.3f} {row.mean_rel_error:>14.3e}")
        lines.append(f"{row.k:g},{row.options},{row.agreement:.6f},{row.mean_rel_error:.6e}")
    if args.out:
        with open(args.out, "w") as f:
            f.write("\n".join(lines) + "\n")
        print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="offguard")
    sub = p.add_subparsers(dest="command", required=True)

    w = sub.add_parser("worker", help="run a worker service")
    w.add_argument("--listen", help="addr:port to bind (default $OFFGUARD_LISTEN)")
    w.add_argument("--store", help="scratch directory")
    w.add_argument("--behavior", choices=["honest", "cheat"], default="honest")
    w.add_argument("--cheat-beta", type=float, default=0.1)
    w.add_argument("--cheat-layer", type=int, default=0)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--capacity", type=int, default=1024)
    w.set_defaults(func=_cmd_worker)

    c = sub.add_parser("client", help="offloading device commands")
    csub = c.add_subparsers(dest="client_command", required=True)

    cs = csub.add_parser("setup", help="configure workers and ship the model")
    cs.add_argument("--model", required=True)
    cs.add_argument("--workers", required=True, help="addr:port[,addr:port]")
    cs.add_argument("--privacy-k", type=float, default=None)
    cs.add_argument("--confidentiality-k", type=float, default=None)
    cs.add_argument("--mode", choices=[MODE_HOLISTIC, MODE_LAYERED], default=MODE_HOLISTIC)
    cs.add_argument("--verify-ratio", type=float, default=1.0)
    cs.add_argument("--masks", type=int, default=16, help="masks to pre-generate per layer")
    cs.add_argument("--seed", type=int, default=0)
    cs.add_argument("--store", default=".offguard")
    cs.set_defaults(func=_cmd_client_setup)

    ci = csub.add_parser("infer", help="offload one inference")
    ci.add_argument("--mode", choices=[MODE_HOLISTIC, MODE_LAYERED], default=None)
    ci.add_argument("--input", required=True, help="tensor file")
    ci.add_argument("--verify-ratio", type=float, default=None)
    ci.add_argument("--store", default=".offguard")
    ci.set_defaults(func=_cmd_client_infer)

    cv = csub.add_parser("verify", help="verify a past inference")
    cv.add_argument("--inference", type=int, required=True)
    cv.add_argument("--fraction", type=float, default=1.0)
    cv.add_argument("--seed", type=int, default=0)
    cv.add_argument("--store", default=".offguard")
    cv.set_defaults(func=_cmd_client_verify)

    cr = csub.add_parser("records", help="list inference records")
    cr.add_argument("--store", default=".offguard")
    cr.set_defaults(func=_cmd_client_records)

    a = sub.add_parser("analyze", help="security estimate validation")
    asub = a.add_subparsers(dest="analyze_command", required=True)

    ag = asub.add_parser("masking-game", help="two-value distinguishing game")
    ag.add_argument("--k", type=float, required=True)
    ag.add_argument("--trials", type=int, default=analysis.DEFAULT_TRIALS)
    ag.add_argument("--seed", type=int, default=0)
    ag.set_defaults(func=_cmd_analyze_masking_game)

    aa = asub.add_parser("attack", help="value-recovery attack errors")
    aa.add_argument("--k", type=float, required=True)
    aa.add_argument("--trials", type=int, default=analysis.DEFAULT_TRIALS)
    aa.add_argument("--range", default="0,1")
    aa.add_argument("--seed", type=int, default=0)
    aa.set_defaults(func=_cmd_analyze_attack)

    ad = asub.add_parser("detection", help="spot-check miss rates")
    ad.add_argument("--n", type=int, required=True)
    ad.add_argument("--alpha", type=float, required=True)
    ad.add_argument("--beta", type=float, required=True)
    ad.add_argument("--rounds", type=int, default=1)
    ad.add_argument("--trials", type=int, default=10_000)
    ad.add_argument("--simulate", action="store_true")
    ad.add_argument("--seed", type=int, default=0)
    ad.set_defaults(func=_cmd_analyze_detection)

    ak = asub.add_parser("sweep-k", help="accuracy vs mask scale on a model + corpus")
    ak.add_argument("--model", required=True)
    ak.add_argument("--corpus", required=True)
    ak.add_argument("--options", choices=["p", "c", "pc"], required=True)
    ak.add_argument("--k-values", default="1,10,100,1000")
    ak.add_argument("--out", help="CSV output path")
    ak.add_argument("--seed", type=int, default=0)
    ak.set_defaults(func=_cmd_analyze_sweep)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OffguardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
