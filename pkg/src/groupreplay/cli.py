"""Command-line entry point: ``groupreplay {train,compare,inspect-buffer,score-traces}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from typing import Optional, Sequence

from .buffer import BufferFormatError
from .config import TrainConfig
from .entropy_rank import entropy_rank_rewards
from .harness import compare, inspect_buffer, median_solve_rates, train, write_run
from .rewarding import ConfigError

log = logging.getLogger("groupreplay")


def _cmd_train(args) -> int:
    cfg = TrainConfig.from_toml(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()

    def progress(m):
        log.info(
            "step %d epoch %d reward=%.3f all=%.3f none=%.3f H=%.3f",
            m.step, m.epoch, m.mean_reward, m.solve_all_frac, m.solve_none_frac, m.mean_policy_entropy,
        )

    result = train(cfg, on_step=progress)
    out = write_run(result, args.out)
    print(f"wrote {out}")
    for diff, rate in result.solve_rates.items():
        print(f"{diff}\t{rate:.4f}")
    return 0


def _cmd_compare(args) -> int:
    configs = [TrainConfig.from_toml(p) for p in args.configs]
    for cfg in configs:
        cfg.validate()
    labels = [c.label for c in configs]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"config labels must be distinct, got {labels}")
    seeds = list(range(args.seed0, args.seed0 + args.seeds))
    runs = compare(configs, seeds, args.out)
    print(f"wrote {args.out}")
    for label in labels:
        rates = median_solve_rates([r for r in runs if r.label == label])
        print(label, " ".join(f"{k}={v:.3f}" for k, v in rates.items()))
    return 0


def _cmd_inspect(args) -> int:
    for line in inspect_buffer(args.path, args.uid, args.p):
        print(line)
    return 0


def _read_traces(path: str) -> list[list[float]]:
    traces = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                item = json.loads(line)
                if isinstance(item, dict):
                    item = item.get("token_entropies", item.get("entropies"))
                traces.append([float(x) for x in item])
            except (ValueError, TypeError) as exc:
                raise BufferFormatError(path, lineno, str(exc)) from exc
    return traces


def _cmd_score(args) -> int:
    traces = _read_traces(args.path)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["line", "score", "reward"])
    if not traces:
        return 0
    _, scores, rewards = entropy_rank_rewards(traces, args.p, args.rmax)
    for i, (s, r) in enumerate(zip(scores, rewards), start=1):
        w.writerow([i, s, repr(r)])
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="groupreplay", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log every training step")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("compare", help="run several configurations over several seeds")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds")
    p.add_argument("--seed0", type=int, default=0, help="first seed")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("inspect-buffer", help="dump a buffer JSONL file")
    p.add_argument("path")
    p.add_argument("--uid", default=None)
    p.add_argument("--p", type=float, default=0.2, help="top-entropy fraction for E_peak")
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("score-traces", help="rank token-entropy traces as one group")
    p.add_argument("path")
    p.add_argument("--p", type=float, default=0.2)
    p.add_argument("--rmax", type=float, default=0.5)
    p.set_defaults(func=_cmd_score)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s"
    )
    try:
        return args.func(args)
    except BrokenPipeError:
        # output piped into e.g. `head`; nothing left to report
        sys.stderr.close()
        return 0
    except (ConfigError, BufferFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
