"""Command-line front end.

Exit codes: 0 success, 1 contract or validation failure, 2 I/O or
configuration error. Nothing is written when a command exits with 2.
Every command requires ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackMode, InverseAttackConfig, cap_probability, required_trials, train_inverse_attack
from .chain import ChainError, ConsensusParams, IntegrityError, load_jsonl, replay, verify_chain
from .embedding import (
    DelModel,
    DelTrainConfig,
    LabelVector,
    TrainingError,
    eval_del,
    train_del,
)
from .numerics import ContractError
from .poi import ModelArtifact, PeerIdentity, PoiProof, VerificationError, keygen, prove, verify
from .sim import ScenarioConfig, SetupError, default_scenario, run_scenario, synth_model

log = logging.getLogger("daimon")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_CONFIG = 2

DEFAULT_NS = (32, 64, 128, 256)
DEFAULT_EPSILONS = (0.02, 0.04, 0.06, 0.08, 0.10, 0.15, 0.20, 0.25, 0.30)


class UsageError(Exception):
    """Bad flags, unreadable input or an invalid configuration (exit 2)."""


# --- small helpers ----------------------------------------------------------


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"file not found: {path}") from None
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


def _load(path, what, parse):
    doc = _read_json(path)
    try:
        return parse(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path} is not a valid {what}: {exc}") from None


def _config_digest(doc) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(header, rows, seed, config_doc) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    buf.write(f"# seed={seed},config_digest={_config_digest(config_doc)}\n")
    return buf.getvalue()


def read_csv(path) -> tuple[list[str], list[list[str]], str]:
    """Parse a CSV written by this tool into (header, rows, metadata comment)."""
    lines = Path(path).read_text().splitlines()
    meta = lines[-1] if lines and lines[-1].startswith("#") else ""
    body = [ln for ln in lines if not ln.startswith("#")]
    rows = list(csv.reader(body))
    return rows[0], rows[1:], meta


class _Outputs:
    """Collects artifacts and writes them only once the command succeeded."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files: dict[str, str] = {}

    def add(self, name: str, text: str) -> Path:
        self.files[name] = text
        return self.out_dir / name

    def flush(self) -> list[Path]:
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            paths = []
            for name, text in self.files.items():
                p = self.out_dir / name
                p.write_text(text)
                paths.append(p)
        except OSError as exc:
            raise UsageError(f"cannot write to {self.out_dir}: {exc}") from None
        return paths


def _json_text(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _labels_from(path) -> LabelVector:
    return _load(path, "label file", lambda d: LabelVector(d["labels"], d["num_classes"]))


def _model_from(path) -> DelModel:
    return _load(path, "embedding model", DelModel.from_dict)


def _default_labels(args) -> Path:
    if args.labels:
        return Path(args.labels)
    return Path(args.model).with_name("labels.json")


# --- del --------------------------------------------------------------------


def _del_settings(args) -> tuple[dict, DelTrainConfig]:
    doc = _read_json(args.config) if args.config else {}
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    doc = doc.get("del", doc)
    allowed = {"m", "n", "num_classes", "train"}
    if set(doc) - allowed:
        raise UsageError(f"unknown embedding config keys: {sorted(set(doc) - allowed)}")
    settings = {"m": 1000, "n": 64, "num_classes": 10, **{k: doc[k] for k in ("m", "n", "num_classes") if k in doc}}
    train = dict(doc.get("train", {}))
    for flag, key in (("m", "m"), ("n", "n"), ("num_classes", "num_classes")):
        if getattr(args, flag) is not None:
            settings[key] = getattr(args, flag)
    if args.epochs is not None:
        train["epochs"] = args.epochs
    train["seed"] = args.seed
    try:
        cfg = DelTrainConfig.from_dict(train)
        m, n, c = (int(settings[k]) for k in ("m", "n", "num_classes"))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None
    if not 1 <= n < m:
        raise UsageError(f"invalid config: embedding dimension n={n} must be smaller than m={m}")
    if c < 2:
        raise UsageError("invalid config: num_classes must be >= 2")
    settings.update(m=m, n=n, num_classes=c)
    return settings, cfg


def cmd_del_train(args) -> int:
    settings, cfg = _del_settings(args)
    if args.labels:
        x_t = _labels_from(args.labels)
        if (x_t.m, x_t.num_classes) != (settings["m"], settings["num_classes"]):
            raise UsageError("label file does not match m / num_classes of the config")
    else:
        x_t = LabelVector.random(settings["m"], settings["num_classes"], np.random.default_rng([args.seed, 1]))
    config_doc = {**settings, "train": asdict(cfg)}
    try:
        model, trace = train_del(x_t, settings["n"], cfg)
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_INVALID

    out = _Outputs(Path(args.out_dir))
    model_path = out.add("del_model.json", _json_text(model.to_dict()))
    out.add("del_loss.csv", _csv_text(["epoch", "train_loss", "test_loss"], trace.rows(), args.seed, config_doc))
    out.add("target.json", _json_text({"y_t": [repr(float(v)) for v in model.embed(x_t)], "n": model.n}))
    out.add("labels.json", _json_text({"num_classes": x_t.num_classes, "labels": x_t.to_list(), "private": True}))
    out.flush()
    print(f"trained embedding m={model.m} n={model.n} C={model.num_classes} epochs={cfg.epochs}")
    print(f"train loss {trace.train[0]:.5f} -> {trace.train[-1]:.5f}; test loss {trace.test[0]:.5f} -> {trace.test[-1]:.5f}")
    print(f"wrote {model_path} and loss trace to {args.out_dir}")
    return EXIT_OK


def cmd_del_eval(args) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be positive")
    model = _model_from(args.model)
    x_t = _labels_from(_default_labels(args))
    try:
        model.check_labels(x_t)
    except ContractError as exc:
        raise UsageError(f"labels do not fit the model: {exc}") from None
    report = eval_del(model, x_t, args.samples, np.random.default_rng([args.seed, 2]))
    config_doc = {"model": _config_digest(model.to_dict()), "samples": args.samples}
    out = _Outputs(Path(args.out_dir))
    rows = [(float(e), float(d)) for e, d in report.pairs]
    out.add("del_eval.csv", _csv_text(["error", "distance"], rows, args.seed, config_doc))
    out.flush()
    print(f"pearson r = {report.pearson_r:.6f}")
    print(f"mean |e - d| = {report.mean_abs_dev:.6f} over {args.samples} samples")
    return EXIT_OK


# --- attacks ----------------------------------------------------------------


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}") from None


def cmd_attack_bruteforce(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    ns = args.n if args.n is not None else doc.get("n", list(DEFAULT_NS))
    eps = args.epsilon if args.epsilon is not None else doc.get("epsilon", list(DEFAULT_EPSILONS))
    alpha = args.alpha if args.alpha is not None else doc.get("alpha", 0.5)
    if not ns or not eps:
        raise UsageError("need at least one n and one epsilon")
    if any(int(n) != n or n < 2 for n in ns):
        raise UsageError("every n must be an integer >= 2")
    if any(not 0.0 < e <= 1.0 for e in eps):
        raise UsageError("every epsilon must lie in (0, 1]")
    if not 0.0 < alpha <= 1.0:
        raise UsageError("alpha must lie in (0, 1]")

    rows = []
    for n in ns:
        for e in eps:
            p = cap_probability(int(n), float(e))
            q = required_trials(p, alpha)
            if p == 0.0:
                rows.append((int(n), float(e), p, "infeasible", "infeasible"))
            else:
                rows.append((int(n), float(e), p, q.linearized, q.exact))
    config_doc = {"n": list(ns), "epsilon": list(eps), "alpha": alpha}
    out = _Outputs(Path(args.out_dir))
    out.add("bruteforce.csv", _csv_text(["n", "epsilon", "p", "q_linearized", "q_exact"], rows, args.seed, config_doc))
    out.flush()
    print(f"{'n':>5} {'epsilon':>8} {'p':>12} {'q (alpha/p)':>12}")
    for n, e, p, ql, _ in rows:
        print(f"{n:>5} {e:>8.3f} {p:>12.4e} {ql if isinstance(ql, str) else format(ql, '.4e'):>12}")
    return EXIT_OK


def cmd_attack_inverse(args) -> int:
    model = _model_from(args.model)
    x_t = _labels_from(_default_labels(args))
    try:
        model.check_labels(x_t)
    except ContractError as exc:
        raise UsageError(f"labels do not fit the model: {exc}") from None
    modes = [AttackMode.NEARBY, AttackMode.RANDOM] if args.mode == "both" else [AttackMode(args.mode)]
    try:
        cfgs = [InverseAttackConfig(mode=m, epochs=args.epochs, seed=args.seed) for m in modes]
    except (ValueError, ContractError) as exc:
        raise UsageError(str(exc)) from None
    y_t = model.embed(x_t)
    out = _Outputs(Path(args.out_dir))
    for cfg in cfgs:
        try:
            trace = train_inverse_attack(model, y_t, cfg, x_t)
        except TrainingError as exc:
            print(f"attack training diverged: {exc}", file=sys.stderr)
            return EXIT_INVALID
        rows = [(epoch, err) for epoch, _, err in trace.rows()]
        config_doc = {**asdict(cfg), "mode": cfg.mode.value, "model": _config_digest(model.to_dict())}
        out.add(f"inverse_{cfg.mode.value}.csv", _csv_text(["epoch", "error"], rows, args.seed, config_doc))
        print(f"{cfg.mode.value:>7}: error {trace.errors[0]:.3f} at epoch 0 -> {trace.errors[-1]:.3f} "
              f"after {cfg.epochs} epochs (min {min(trace.errors):.3f})")
    out.flush()
    return EXIT_OK


# --- chain ------------------------------------------------------------------


def _scenario(args) -> ScenarioConfig:
    if args.config:
        doc = _read_json(args.config)
        if not isinstance(doc, dict):
            raise UsageError("scenario config must be a JSON object")
        doc = {**doc, "seed": args.seed}
        try:
            cfg = ScenarioConfig.from_dict(doc)
        except SetupError as exc:
            raise UsageError(str(exc)) from None
    else:
        cfg = default_scenario(args.seed)
    if args.periods is not None:
        cfg = ScenarioConfig.from_dict({**cfg.to_dict(), "periods": args.periods})
    try:
        cfg.validate()
    except SetupError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def cmd_chain_run(args) -> int:
    cfg = _scenario(args)
    if cfg.validators == 0:
        print("warning: no validators configured; no Improvement block can be committed", file=sys.stderr)
    trace = run_scenario(cfg)

    replayed = replay(trace.chain_events(), cfg.consensus, trace.store)
    same = [b.hash for b in replayed.blocks] == [b.hash for b in trace.blocks] and replayed.balances == trace.chain.balances
    try:
        verify_chain(trace.blocks, cfg.consensus)
    except IntegrityError as exc:
        print(f"chain failed verification: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if not same:
        print("replaying the event log did not reproduce the chain", file=sys.stderr)
        return EXIT_INVALID

    out = _Outputs(Path(args.out_dir))
    buf = io.StringIO()
    for blk in trace.blocks:
        buf.write(json.dumps(blk.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
    out.add("chain.jsonl", buf.getvalue())
    out.add("events.jsonl", trace.events_jsonl())
    out.add("summary.csv", _csv_text(
        ["period", "winner", "distance", "true_error", "reward"], trace.summary_rows(), args.seed, cfg.to_dict()))
    out.add("balances.json", _json_text(trace.balances_dict()))
    out.add("scenario.json", _json_text(cfg.to_dict()))
    out.flush()

    print(f"{'period':>6}  {'winner':<18} {'distance':>10} {'true_err':>9} {'reward':>16}")
    for p in trace.periods:
        who = trace.roles.get(p.winner, p.winner.hex()[:16]) if p.winner else "-"
        d = f"{p.distance:.5f}" if p.distance is not None else "-"
        e = f"{p.true_error:.3f}" if p.true_error is not None else "-"
        print(f"{p.period:>6}  {who:<18} {d:>10} {e:>9} {p.reward_units / 1e12:>16.12f}")
    rejected: dict[str, int] = {}
    for ev in trace.rejections():
        rejected[ev.code] = rejected.get(ev.code, 0) + 1
    if rejected:
        print("rejections: " + ", ".join(f"{k}={v}" for k, v in sorted(rejected.items())))
    print(f"{len(trace.blocks)} blocks, replay verified, written to {args.out_dir}")
    return EXIT_OK


def cmd_chain_verify(args) -> int:
    if not args.chain:
        raise UsageError("--chain is required")
    params = None
    if args.config:
        doc = _read_json(args.config)
        try:
            params = ConsensusParams.from_dict(doc.get("consensus", {}))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad consensus parameters: {exc}") from None
    try:
        blocks = load_jsonl(args.chain)
    except FileNotFoundError:
        raise UsageError(f"file not found: {args.chain}") from None
    except IntegrityError as exc:
        print(f"chain invalid: {exc}")
        return EXIT_INVALID
    try:
        verify_chain(blocks, params)
    except IntegrityError as exc:
        print(f"chain invalid: first bad block is {exc.index}: {exc.reason}")
        return EXIT_INVALID
    print(f"chain valid: {len(blocks)} blocks")
    return EXIT_OK


def cmd_chain_dump(args) -> int:
    if not args.chain:
        raise UsageError("--chain is required")
    try:
        blocks = load_jsonl(args.chain)
    except FileNotFoundError:
        raise UsageError(f"file not found: {args.chain}") from None
    except IntegrityError as exc:
        print(f"chain invalid: {exc}")
        return EXIT_INVALID
    rows = []
    for blk in blocks:
        if blk.kind == "problem":
            rows.append((blk.number, blk.kind, blk.hash.hex(), blk.parent.hex(), "", "", len(blk.tuples)))
        else:
            rows.append((blk.number, blk.kind, blk.hash.hex(), blk.parent.hex(), blk.distance,
                         blk.proof.prover_address.hex(), len(blk.votes)))
    header = ["number", "kind", "hash", "parent", "distance", "prover", "items"]
    out = _Outputs(Path(args.out_dir))
    out.add("blocks.csv", _csv_text(header, rows, args.seed, {"chain": str(args.chain)}))
    out.flush()
    for r in rows:
        print(f"{r[0]:>4} {r[1]:<12} {r[2][:16]}  {_fmt(r[4]):<22} {r[6]}")
    return EXIT_OK


# --- poi --------------------------------------------------------------------


def _identity_from(path) -> PeerIdentity:
    return _load(path, "identity", PeerIdentity.from_dict)


def _target_from(path) -> np.ndarray:
    return _load(path, "target", lambda d: np.array([float(v) for v in d["y_t"]]))


def cmd_poi_keygen(args) -> int:
    ident = keygen(np.random.default_rng([args.seed, 3]))
    out = _Outputs(Path(args.out_dir))
    path = out.add(args.name, _json_text(ident.to_dict()))
    out.flush()
    print(f"address {ident.address.hex()} -> {path}")
    return EXIT_OK


def cmd_poi_prove(args) -> int:
    artifact = _load(args.model, "model artifact", ModelArtifact.from_dict)
    f = _model_from(args.del_model)
    ident = _identity_from(args.identity)
    try:
        proof = prove(artifact, f, ident)
    except ContractError as exc:
        print(f"cannot prove: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = _Outputs(Path(args.out_dir))
    path = out.add("proof.json", _json_text(proof.to_dict()))
    out.flush()
    print(f"model digest {proof.g.hex()}")
    print(f"proof written to {path}")
    return EXIT_OK


def cmd_poi_verify(args) -> int:
    if not args.delta >= 0:
        raise UsageError(f"--delta must be non-negative, got {args.delta}")
    if not 0.0 < args.d_c <= 1.0:
        raise UsageError(f"--d-c must lie in (0, 1], got {args.d_c}")
    artifact = _load(args.model, "model artifact", ModelArtifact.from_dict)
    proof = _load(args.proof, "PoI proof", PoiProof.from_dict)
    f = _model_from(args.del_model)
    y_t = _target_from(args.target)
    ident = _identity_from(args.identity)
    try:
        vote = verify(artifact, proof, f, y_t, args.d_c, args.delta, ident)
    except VerificationError as exc:
        print(f"{exc.code}: {exc}")
        return EXIT_INVALID
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    out = _Outputs(Path(args.out_dir))
    path = out.add("verification.json", _json_text(vote.to_dict()))
    out.flush()
    print(f"OK: proof verified; verification proof written to {path}")
    return EXIT_OK


def cmd_model_synth(args) -> int:
    if not 0.0 <= args.error <= 1.0:
        raise UsageError("--error must lie in [0, 1]")
    x_t = _labels_from(args.labels)
    artifact = synth_model(x_t, args.error, np.random.default_rng([args.seed, 4]), args.metadata)
    out = _Outputs(Path(args.out_dir))
    path = out.add(args.name, _json_text(artifact.to_dict()))
    out.flush()
    print(f"model with error {args.error} written to {path}; digest {artifact.digest().hex()}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, required=True, help="random seed (required)")
    common.add_argument("--config", help="JSON configuration file; flags override it")
    common.add_argument("--out-dir", default="out", help="directory for emitted artifacts (default: out)")

    parser = _Parser(prog="daimon", description="Label embeddings, PoI proofs and a simulated improvement ledger.")
    parser.add_argument("--version", action="version", version=f"daimon {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("del-train", parents=[common], help="train an embedding for a label vector")
    p.add_argument("--labels", help="label file to embed (default: draw from --seed)")
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_del_train)

    p = sub.add_parser("del-eval", parents=[common], help="error/distance correlation on fresh samples")
    p.add_argument("--model", required=True)
    p.add_argument("--labels", help="private labels (default: labels.json next to the model)")
    p.add_argument("--samples", type=int, default=2000)
    p.set_defaults(func=cmd_del_eval)

    p = sub.add_parser("attack-bruteforce", parents=[common], help="cap probability and trial counts")
    p.add_argument("--n", type=_int_list, help="comma-separated embedding dimensions")
    p.add_argument("--epsilon", type=_float_list, help="comma-separated distances")
    p.add_argument("--alpha", type=float, help="target success probability (default 0.5)")
    p.set_defaults(func=cmd_attack_bruteforce)

    p = sub.add_parser("attack-inverse", parents=[common], help="train an inverse-mapping attacker")
    p.add_argument("--model", required=True)
    p.add_argument("--labels", help="private labels (default: labels.json next to the model)")
    p.add_argument("--mode", choices=["nearby", "random", "both"], default="both")
    p.add_argument("--epochs", type=int, default=60)
    p.set_defaults(func=cmd_attack_inverse)

    p = sub.add_parser("chain-run", parents=[common], help="run a multi-peer scenario")
    p.add_argument("--periods", type=int)
    p.set_defaults(func=cmd_chain_run)

    p = sub.add_parser("chain-verify", parents=[common], help="verify a chain file")
    p.add_argument("--chain", required=True)
    p.set_defaults(func=cmd_chain_verify)

    p = sub.add_parser("chain-dump", parents=[common], help="list the blocks of a chain file")
    p.add_argument("--chain", required=True)
    p.set_defaults(func=cmd_chain_dump)

    poi = sub.add_parser("poi", help="file-based prove and verify")
    poi_sub = poi.add_subparsers(dest="poi_command", required=True, parser_class=_Parser)
    p = poi_sub.add_parser("keygen", parents=[common])
    p.add_argument("--name", default="identity.json")
    p.set_defaults(func=cmd_poi_keygen)
    p = poi_sub.add_parser("prove", parents=[common])
    p.add_argument("--model", required=True, help="model artifact JSON")
    p.add_argument("--del-model", required=True, help="embedding model JSON")
    p.add_argument("--identity", required=True)
    p.set_defaults(func=cmd_poi_prove)
    p = poi_sub.add_parser("verify", parents=[common])
    p.add_argument("--model", required=True, help="model artifact JSON")
    p.add_argument("--proof", required=True)
    p.add_argument("--del-model", required=True, help="embedding model JSON")
    p.add_argument("--target", required=True, help="JSON with y_t")
    p.add_argument("--identity", required=True, help="verifier identity")
    p.add_argument("--d-c", dest="d_c", type=float, default=1.0, help="current best distance")
    p.add_argument("--delta", type=float, default=0.005)
    p.set_defaults(func=cmd_poi_verify)

    p = sub.add_parser("model-synth", parents=[common], help="lookup model with a chosen error")
    p.add_argument("--labels", required=True)
    p.add_argument("--error", type=float, required=True)
    p.add_argument("--metadata", default="")
    p.add_argument("--name", default="model.json")
    p.set_defaults(func=cmd_model_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ChainError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
