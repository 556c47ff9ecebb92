"""Command line entry point: gen-data, train, eval, ablate, report.

Exit codes: 0 success, 1 user error (bad flags, config, data), 2 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from . import sim
from .config import ConfigError, build_configs, documented_keys, load_config, parse_override
from .episodes import ContainerError, DatasetManifest, build_dataset
from .evaluation import EvalError, EvalReport, ablation_table, evaluate, manifest_splits, run_ablation
from .training import Checkpoint, TrainingError, train


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{self.prog}: {message}")


def _settings(args) -> dict:
    d = load_config(args.config) if args.config else {}
    for item in args.set or ():
        k, v = parse_override(item)
        d[k] = v
    return d


def _pick(args, d: dict, key: str, default=None):
    v = getattr(args, key, None)
    if v is not None:
        return v
    return d.get(key, default)


def _manifest(path) -> DatasetManifest:
    if path is None:
        raise UserError("no dataset given (--data or 'data' in the config)")
    p = Path(path)
    if not (p / DatasetManifest.FILENAME).exists() and not p.is_file():
        raise UserError(f"{path}: empty dataset (no {DatasetManifest.FILENAME})")
    m = DatasetManifest.load(p)
    if not m.split("seen"):
        raise UserError(f"{path}: empty dataset")
    return m


def cmd_gen_data(args, d) -> int:
    out = _pick(args, d, "out")
    if out is None:
        raise UserError("gen-data needs --out")
    n_var = len(sim.variation_table(args.task))
    first, seen, unseen = args.first_variation, args.variations, args.unseen_variations
    if first + seen + unseen > n_var:
        raise UserError(f"{args.task} has {n_var} variations; asked for {first}+{seen}+{unseen}")
    mk = lambda v: sim.TaskSpec(args.task, v, args.n_objects, args.return_home, args.occluded)  # noqa: E731
    m = build_dataset([mk(v) for v in range(first, first + seen)], args.demos, args.seed, out,
                      unseen=[mk(v) for v in range(first + seen, first + seen + unseen)],
                      image_size=tuple(d.get("image_size", (32, 32))))
    print(f"wrote {len(m)} episodes to {out} (manifest {m.digest()[:12]})")
    return 0


def cmd_train(args, d) -> int:
    pcfg, tcfg = build_configs(d)
    out = _pick(args, d, "out")
    m = _manifest(_pick(args, d, "data"))
    resume = Checkpoint.load(args.resume) if args.resume else None
    res = train(m, pcfg, tcfg, out_dir=out, resume=resume)
    last = res.log[-1] if res.log else {}
    print(f"trained {res.checkpoint.iteration} iterations; last logged loss {last.get('total', float('nan')):.6f}")
    if out:
        print(f"checkpoint: {Path(out) / 'final.ckpt'}")
    return 0


def _eval_splits(args, d, m: DatasetManifest | None) -> dict:
    which = _pick(args, d, "split", "all")
    if which not in ("seen", "unseen", "all"):
        raise UserError(f"unknown split {which!r}")
    names = ("seen", "unseen") if which == "all" else (which,)
    if m is not None:
        splits = manifest_splits(m, names)
    elif args.task:
        splits = {"seen": [sim.TaskSpec(args.task, v) for v in args.variation or [0]]}
    else:
        raise UserError("eval needs --data or --task")
    if not splits:
        raise UserError(f"dataset has no {which} variations")
    return splits


def cmd_eval(args, d) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    data = _pick(args, d, "data")
    m = DatasetManifest.load(data) if data else None
    splits = _eval_splits(args, d, m)
    out = _pick(args, d, "out", "eval_report.json")
    rep = evaluate(ckpt, splits, int(_pick(args, d, "episodes", 100)), int(_pick(args, d, "eval_seed", 0)),
                   out_path=out)
    print(rep.table())
    print(f"report: {out}")
    return 0


def cmd_ablate(args, d) -> int:
    pcfg, tcfg = build_configs(d)
    variants = _pick(args, d, "variants", "R1,R2,R3,R4,R5,R6,R7,R8")
    if isinstance(variants, str):
        variants = [v.strip() for v in variants.split(",") if v.strip()]
    m = _manifest(_pick(args, d, "data"))
    rows = run_ablation(m, pcfg, tcfg, variants, float(_pick(args, d, "budget", 0.0)),
                        int(_pick(args, d, "episodes", 100)), int(_pick(args, d, "eval_seed", 0)),
                        out_dir=_pick(args, d, "out"))
    print(ablation_table(rows))
    return 0


def cmd_report(args, d) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(_pick(args, d, "out", "report"))
    out.mkdir(parents=True, exist_ok=True)
    text = []
    if args.runs:
        fig, ax = plt.subplots(figsize=(6, 4))
        for run in args.runs:
            p = Path(run) / "metrics.jsonl" if Path(run).is_dir() else Path(run)
            recs = [json.loads(line) for line in p.read_text().splitlines() if line.strip()]
            if not recs:
                continue
            ax.plot([r["iteration"] for r in recs], [r["total"] for r in recs], label=str(run))
            text.append(f"{run}: {len(recs)} log rows, final total {recs[-1]['total']:.6f}")
        ax.set_xlabel("iteration")
        ax.set_ylabel("training loss")
        ax.set_yscale("log")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "loss.png", dpi=120)
        plt.close(fig)
    bars = []
    for path in args.evals or ():
        rep = EvalReport.load(path)
        text += [f"== {path}", rep.table()]
        bars += [(f"{Path(path).stem}:{r['task']}:{r['split']}", r["success_rate"]) for r in rep.rows()]
    if args.ablation:
        rows = json.loads(Path(args.ablation).read_text())["rows"]
        text.append("== ablation")
        for r in rows:
            text.append(f"{r['variant']:<9} {json.dumps(r['success'])} {'ok' if r['complete'] else 'incomplete'}")
            bars += [(f"{r['variant']}:{s}", v) for s, v in r["success"].items()]
    if bars:
        fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(bars) + 2), 4))
        ax.bar(range(len(bars)), [b[1] for b in bars])
        ax.set_xticks(range(len(bars)), [b[0] for b in bars], rotation=60, ha="right", fontsize=7)
        ax.set_ylim(0, 1)
        ax.set_ylabel("success rate")
        fig.tight_layout()
        fig.savefig(out / "success.png", dpi=120)
        plt.close(fig)
    if not text:
        raise UserError("report needs --runs, --evals or --ablation")
    (out / "summary.txt").write_text("\n".join(text) + "\n")
    print("\n".join(text))
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvpolicy", description="Multi-view instruction-conditioned manipulation policy.",
                epilog="config keys:\n" + documented_keys(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="flat YAML config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--out")
        return sp

    g = common(sub.add_parser("gen-data", help="generate scripted demonstrations"))
    g.add_argument("--task", required=True, choices=sim.TASKS)
    g.add_argument("--variations", type=int, default=1, help="number of seen variations")
    g.add_argument("--unseen-variations", type=int, default=0)
    g.add_argument("--first-variation", type=int, default=0)
    g.add_argument("--demos", type=int, default=10, help="demos per variation")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-objects", type=int)
    g.add_argument("--return-home", action="store_true")
    g.add_argument("--occluded", action="store_true")

    t = common(sub.add_parser("train", help="behavioral cloning on a dataset"))
    t.add_argument("--data")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = common(sub.add_parser("eval", help="closed-loop rollouts of a checkpoint"))
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data")
    e.add_argument("--split", choices=("seen", "unseen", "all"))
    e.add_argument("--episodes", type=int)
    e.add_argument("--eval-seed", type=int)
    e.add_argument("--task", choices=sim.TASKS)
    e.add_argument("--variation", type=int, action="append")

    a = common(sub.add_parser("ablate", help="train and evaluate ablation variants"))
    a.add_argument("--data")
    a.add_argument("--variants", help="comma separated: R1..R8, no_hist, one_view")
    a.add_argument("--budget", type=float)
    a.add_argument("--episodes", type=int)
    a.add_argument("--eval-seed", type=int)

    r = common(sub.add_parser("report", help="plots and text tables from logs and reports"))
    r.add_argument("--runs", nargs="*", help="training output dirs or metrics.jsonl files")
    r.add_argument("--evals", nargs="*", help="eval report files")
    r.add_argument("--ablation", help="ablation.json")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "report": cmd_report}

USER_ERRORS = (UserError, ConfigError, ContainerError, EvalError, sim.SimError, FileNotFoundError,
               KeyError, TrainingError)


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command is None:
            raise UserError("missing subcommand: " + ", ".join(COMMANDS))
        return COMMANDS[args.command](args, _settings(args))
    except USER_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
