"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
On failure the error stream carries exactly one JSON line
``{"error": <kind>, "message": <text>}``; usage text goes to stdout.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from protoalign import gradsuite, synthdata, trainer
from protoalign.errors import ConfigError, ProtoAlignError

log = logging.getLogger("protoalign.cli")

REPORT_COLUMNS = ("setting", "direction", "class", "dice_mean", "dice_std", "asd_mean", "asd_std")
CURVE_COLUMNS = ("setting", "direction", "seed", "epoch", "stage", "l_seg", "l_cdd", "l_ccpa", "l_total")


class UsageError(Exception):
    pass


class GradientCheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from None


def _write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _emit(written) -> None:
    print(json.dumps({"written": [str(p) for p in written]}))


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    d = _read_json(args.spec) if args.spec else {}
    if args.seed is not None:
        d = dict(d, seed=args.seed)
    cfg = synthdata.SynthConfig.from_dict(d)
    written = synthdata.synthesize(args.out, cfg)
    _emit(written)
    return 0


def cmd_train(args) -> int:
    cfg = trainer.ExperimentConfig.from_dict(_read_json(args.config))
    record = trainer.train(cfg, args.data, args.out)
    log.info("mean foreground dice %.2f on %s", record.mean_dice(), record.eval_domain)
    _emit([args.out])
    return 0


def _default_eval_domain(config: trainer.ExperimentConfig) -> str:
    labelled, unlabelled = trainer.domain_roles(config)
    return labelled if config.setting == "SRC-ONLY" else unlabelled


def cmd_eval(args) -> int:
    if not (Path(args.ckpt) / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint at {args.ckpt}")
    domain = args.domain or _default_eval_domain(trainer.load_checkpoint(args.ckpt).config)
    result = trainer.evaluate(args.ckpt, args.data, domain, args.split)
    out = Path(args.out)
    written = [_write_text(out, result.to_csv()), _write_text(out.with_suffix(".jsonl"), result.to_jsonl())]
    _emit(written)
    return 0


def cmd_ablate(args) -> int:
    base = trainer.ExperimentConfig.from_dict(_read_json(args.config))
    grid = _read_json(args.grid)
    trainer.expand_grid(grid)
    trainer.ablate(base, grid, args.data, args.out)
    _emit([Path(args.out) / "ablation.csv"])
    return 0


def cmd_gradcheck(args) -> int:
    reports = gradsuite.run_suite(args.tol)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<18} max_rel_error={r.result.max_rel_error:.3e} "
              f"coords={r.result.n_coords} worst={r.result.worst_leaf} {r.seconds:.1f}s")
    failed = [r.name for r in reports if not r.passed]
    if failed:
        raise GradientCheckFailed(f"gradient check failed for {', '.join(failed)} at tolerance {args.tol}")
    return 0


def setting_label(config: dict) -> str:
    """Table row name: ablations of the adapted setting are named after the dropped terms."""
    if config["setting"] != "DA":
        return config["setting"]
    l1, l2 = config["lambda1"], config["lambda2"]
    if l1 == 0 and l2 == 0:
        return "DA w/o CDD & CCPA"
    if l1 == 0:
        return "DA w/o CDD"
    if l2 == 0:
        return "DA w/o CCPA"
    if (l1, l2, config["eta"]) == (1, 1, 1):
        return "DA"
    return f"DA lambda1={l1:g} lambda2={l2:g} eta={config['eta']:g}"


def _find_runs(root: Path) -> list[Path]:
    return sorted(p.parent for p in root.rglob("metrics.json") if (p.parent / "config.json").exists())


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.4f}"


def _mean(values):
    kept = [v for v in values if v is not None]
    return float(np.mean(kept)) if kept else None


def report_tables(runs: list[Path]) -> tuple[str, str]:
    """Per-class summary CSV and per-epoch loss-curve CSV for a set of run directories.

    Runs sharing a setting and direction (different seeds) are merged by
    averaging their per-run means and per-run subject standard deviations.
    """
    groups: dict = {}
    curves = []
    for run in runs:
        config = json.loads((run / "config.json").read_text())
        payload = json.loads((run / "metrics.json").read_text())
        key = (setting_label(config), config["direction"])
        groups.setdefault(key, []).append((payload["class_names"], payload["classes"]))
        rows = list(csv.DictReader(io.StringIO((run / "losses.csv").read_text())))
        half = config["batch_size"] // 2
        epoch_len = max(1, math.ceil(payload.get("train_size", half) / half))
        for stage in sorted({int(r["stage"]) for r in rows}):
            stage_rows = [r for r in rows if int(r["stage"]) == stage]
            for e in range(math.ceil(len(stage_rows) / epoch_len)):
                chunk = stage_rows[e * epoch_len:(e + 1) * epoch_len]
                curves.append([key[0], key[1], config["seed"], e, stage] +
                              [f"{np.mean([float(r[c]) for r in chunk]):.6g}"
                               for c in ("l_seg", "l_cdd", "l_ccpa", "l_total")])

    summary = io.StringIO()
    w = csv.writer(summary, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for (setting, direction), members in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        for cls in members[0][0]:
            vals = [m[cls] for _, m in members]
            w.writerow([setting, direction, cls] + [_fmt(_mean([v[f] for v in vals]))
                                                   for f in ("dice_mean", "dice_std", "asd_mean", "asd_std")])
    curve_buf = io.StringIO()
    cw = csv.writer(curve_buf, lineterminator="\n")
    cw.writerow(CURVE_COLUMNS)
    cw.writerows(curves)
    return summary.getvalue(), curve_buf.getvalue()


def cmd_report(args) -> int:
    root = Path(args.runs)
    if not root.is_dir():
        raise FileNotFoundError(f"no runs directory at {root}")
    runs = _find_runs(root)
    if not runs:
        raise FileNotFoundError(f"no run records under {root}")
    table, curves = report_tables(runs)
    out = Path(args.out)
    written = [_write_text(out, table), _write_text(out.with_name(out.stem + "_losses.csv"), curves)]
    _emit(written)
    return 0


# -- dispatch -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="protoalign", description="Cross-modality segmentation adaptation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the two-domain synthetic dataset")
    s.add_argument("--spec", help="JSON generator config (defaults when omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="run one experiment")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="CSV path; JSON lines go next to it")
    s.add_argument("--domain", choices=synthdata.DOMAINS, help="defaults to the run's evaluation domain")
    s.add_argument("--split", choices=synthdata.SPLITS, default="test")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="adapted runs over a lambda1/lambda2/eta grid")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="aggregate run directories into tables and loss curves")
    s.add_argument("--runs", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stdout)
        return _fail("usage", str(exc), 1)
    if args.command is None:
        parser.print_usage(sys.stdout)
        return _fail("usage", "a subcommand is required", 1)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        synthdata.thread_count()
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", str(exc), 1)
    except FileNotFoundError as exc:
        return _fail("missing-file", str(exc), 2)
    except GradientCheckFailed as exc:
        return _fail("gradcheck", str(exc), 2)
    except (ProtoAlignError, AssertionError, OSError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), 2)


if __name__ == "__main__":
    sys.exit(main())
