"""``qsteer collect|train|evaluate|inspect --config <path> [--section.key value ...]``"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from qsteer.config import ConfigError, load_config
from qsteer.pipeline import PipelineError, cmd_collect, cmd_evaluate, cmd_inspect, cmd_train

log = logging.getLogger("qsteer")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="qsteer",
        description="Step-level Q-value models: collect search data, train, evaluate, inspect.",
        epilog="Any config key can be overridden as --section.key VALUE, e.g. --mcts.m 10 --dpo.lr 1e-4.",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("collect", "run search on the training/validation splits and write preference data"),
        ("train", "train a Q-value model on collected preferences"),
        ("evaluate", "evaluate configured strategies on the test split"),
        ("inspect", "summarize a tree dump, dataset or checkpoint"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="TOML config file")
        if name == "train":
            sp.add_argument("--dataset", help="preference JSONL (default: <output_dir>/pairs.jsonl)")
        if name == "evaluate":
            sp.add_argument(
                "--checkpoint", action="append", default=[], metavar="[NAME=]PATH",
                help="Q-model checkpoint; repeat with NAME= for q_guided:NAME strategies",
            )
        if name == "inspect":
            sp.add_argument("artifact", help="tree JSON, preference JSONL or checkpoint JSON")
            sp.add_argument("--per-group", type=int, default=100, help="actions per Q-histogram group")
    return p


def _checkpoints(specs: Sequence[str]) -> Optional[dict]:
    if not specs:
        return None
    out = {}
    for s in specs:
        name, _, path = s.rpartition("=")
        out[name or "q"] = path
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, overrides = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "collect":
            rep = cmd_collect(cfg)
            log.info("collected %d pairs from %d tasks", rep["train"]["pairs"], rep["train"]["tasks_attempted"])
        elif args.command == "train":
            rep = cmd_train(cfg, args.dataset)
            last = rep["history"][-1] if rep["history"] else {}
            log.info("trained on %d pairs; final epoch %s", rep["pairs"], last)
        elif args.command == "evaluate":
            rep = cmd_evaluate(cfg, _checkpoints(args.checkpoint))
            for r in rep["rows"]:
                log.info("%s n=%d mean=%.4f se=%.4f", r.strategy, r.n, r.mean_reward, r.stderr)
        else:
            summary = cmd_inspect(args.artifact, cfg if args.config or overrides else None, args.per_group)
            print(json.dumps(summary, indent=2, sort_keys=True))
    except (ConfigError, PipelineError) as e:
        log.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
