"""Command-line interface.

One executable, eight subcommands: gen-synthetic, calibrate, analyze, plan,
compress, eval, bench, info.  Exit codes: 0 success, 1 usage error, 2
data/format error, 3 numerical failure.  Artifacts are written atomically.
Numbers that mirror library results are printed at full precision so CLI
output and API output compare exactly.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from . import calibration, pipeline, planner, runtime, synthetic
from .container import Container, ContainerError, read_container_file, write_container_file
from .decomposition import CompressionRatioSpec
from .linalg import LinalgError, NotPositiveDefiniteError, SingularTriangularError
from .tokens import TokenStreamError, read_tokens_file, write_tokens_file

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1, not argparse's default 2
        raise UsageError(message)


def _write_text_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".bsc-txt-", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _threads(value: int) -> int:
    return value if value > 0 else (os.cpu_count() or 1)


def _parse_types(value: str) -> list[str]:
    return [t.strip() for t in value.split(",") if t.strip()]


def _ratio(value: str) -> float:
    r = float(value)
    if not 0.0 <= r < 1.0:
        raise UsageError(f"--ratio must lie in [0, 1), got {r}")
    return r


def _load_model(path: str) -> Container:
    if not os.path.exists(path):
        raise UsageError(f"model file not found: {path}")
    return read_container_file(path)


def _build_policies(manifest_types, share_types) -> dict[str, str]:
    share = [t for t in share_types if t in manifest_types]
    policies = {}
    for t in manifest_types:
        if t in share:
            policies[t] = planner.POLICY_SHARE
        else:
            policies[t] = planner.DEFAULT_POLICIES.get(t, planner.POLICY_PER_LAYER)
            if policies[t] == planner.POLICY_SHARE:
                policies[t] = planner.POLICY_PER_LAYER
    return policies


def cmd_gen_synthetic(args) -> int:
    container = synthetic.gen_synthetic_model(
        layers=args.layers,
        hidden=args.hidden,
        vocab=args.vocab,
        seed=args.seed,
        mlp=args.mlp,
        heads=args.heads,
        context=args.context,
        arch=args.arch,
    )
    write_container_file(args.out, container)
    print(f"wrote model container: {args.out} ({len(container.order)} tensors)")
    if args.grams_out:
        grams = synthetic.gen_synthetic_grams(container.model_manifest(), seed=args.seed + 1)
        write_container_file(args.grams_out, calibration.write_gram_container(grams, container.manifest))
        print(f"wrote gram container: {args.grams_out} ({len(grams)} sites)")
    if args.tokens_out:
        ids = synthetic.gen_tokens(args.token_count, args.vocab, seed=args.seed + 2)
        write_tokens_file(args.tokens_out, ids, args.vocab)
        print(f"wrote token stream: {args.tokens_out} ({ids.size} tokens)")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    container = _load_model(args.model)
    ids, _ = read_tokens_file(args.tokens)
    model = runtime.TinyGptModel.from_container(container)
    sites = None
    if args.types:
        wanted = set(_parse_types(args.types))
        mf = container.model_manifest()
        sites = {
            mf.site_name(layer, t)
            for layer in range(mf.layer_count)
            for t in mf.types
            if t in wanted
        }
    recorder = calibration.calibrate_model(
        model,
        ids,
        samples=args.samples,
        seq_len=args.seqlen,
        sites=sites,
        batch_size=args.batch_size,
        threads=_threads(args.threads),
    )
    out = calibration.write_gram_container(recorder.grams, container.manifest)
    write_container_file(args.out, out)
    tokens = sum(g.token_count for g in recorder.grams.values())
    print(f"wrote gram container: {args.out} ({len(recorder.grams)} sites, "
          f"{tokens} site-tokens accumulated)")
    return EXIT_OK


def cmd_analyze(args) -> int:
    container = _load_model(args.model)
    grams = calibration.read_gram_container(read_container_file(args.grams))
    mf = container.model_manifest()
    spec = CompressionRatioSpec(args.ratio)
    wanted = _parse_types(args.types) if args.types else [t for t in mf.types if t != "Down"]
    wanted = [t for t in wanted if t in mf.types]
    os.makedirs(args.out_dir, exist_ok=True)
    heatmaps = {}
    for t in wanted:
        heatmaps[t] = planner.pairwise_loss_matrix(
            container, grams, t, spec, threads=_threads(args.threads)
        )
        path = os.path.join(args.out_dir, f"heatmap-{t}.csv")
        _write_text_atomic(path, heatmaps[t].to_csv())
        print(f"wrote {path}")
    policies = planner.type_shareability(heatmaps)
    json_path = os.path.join(args.out_dir, "heatmaps.json")
    _write_text_atomic(json_path, planner.heatmaps_to_json(heatmaps, policies, spec))
    print(f"wrote {json_path}")
    for t in wanted:
        print(f"type {t}: {policies[t]}")
    print("type Down: per-layer (projects high dimension to low; never analyzed for sharing)")
    return EXIT_OK


def _plan_from_args(container: Container, args) -> planner.CompressionPlan:
    mf = container.model_manifest()
    policies = _build_policies(mf.types, _parse_types(args.types))
    sequential = {"auto": None, "on": True, "off": False}[args.sequential_update]
    return planner.build_plan(
        mf,
        policies,
        group_size=args.group_size,
        spec=CompressionRatioSpec(args.ratio),
        sequential_update=sequential,
    )


def cmd_plan(args) -> int:
    container = _load_model(args.model)
    plan = _plan_from_args(container, args)
    text = planner.plan_text(plan, container.model_manifest())
    if args.out:
        _write_text_atomic(args.out, text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_compress(args) -> int:
    container = _load_model(args.model)
    plan = _plan_from_args(container, args)
    grams = None
    if args.grams:
        grams = calibration.read_gram_container(read_container_file(args.grams))
    tokens = None
    if args.tokens:
        tokens, _ = read_tokens_file(args.tokens)
    out, report = pipeline.compress_model(
        container,
        plan,
        grams=grams,
        calib_tokens=tokens,
        calib_samples=args.samples,
        calib_seq_len=args.seqlen,
        threads=_threads(args.threads),
    )
    write_container_file(args.out, out)
    sys.stdout.write(report.to_text())
    print(f"scope_removed={report.params.scope_removed!r}")
    print(f"whole_removed={report.params.whole_removed!r}")
    print(f"wrote compressed container: {args.out}")
    if args.report:
        _write_text_atomic(args.report, json.dumps(report.to_dict(), sort_keys=True, indent=2))
        print(f"wrote report: {args.report}")
    return EXIT_OK


def cmd_eval(args) -> int:
    container = _load_model(args.model)
    ids, _ = read_tokens_file(args.tokens)
    model = runtime.TinyGptModel.from_container(container)
    config = runtime.EvalConfig(
        seq_len=args.seqlen, stride=args.stride, batch_size=args.batch_size
    )
    ppl = runtime.perplexity(model, ids, config)
    windows = max(0, (ids.size - args.seqlen) // config.effective_stride + 1)
    print(f"eval: tokens={ids.size} seqlen={args.seqlen} "
          f"stride={config.effective_stride} windows={windows}")
    print(f"ppl={ppl!r}")
    return EXIT_OK


def cmd_bench(args) -> int:
    container = _load_model(args.model)
    model = runtime.TinyGptModel.from_container(container)
    result = runtime.bench(model, args.batch, args.seq, runs=args.runs,
                           warmup=args.warmup, seed=args.seed)
    print(f"bench: batch={args.batch} seq={args.seq} runs={args.runs}")
    print(f"tokens_per_sec={result.tokens_per_sec!r}")
    print(f"flops_per_token_linear={result.flops.linear_per_token}")
    print(f"flops_total={result.flops.total}")
    if args.baseline:
        base_model = runtime.TinyGptModel.from_container(_load_model(args.baseline))
        base = runtime.bench(base_model, args.batch, args.seq, runs=args.runs,
                             warmup=args.warmup, seed=args.seed)
        print(f"baseline_tokens_per_sec={base.tokens_per_sec!r}")
        print(f"throughput_ratio={result.tokens_per_sec / base.tokens_per_sec!r}")
        print(f"flop_ratio_linear="
              f"{base.flops.linear_per_token / result.flops.linear_per_token!r}")
    return EXIT_OK


def cmd_info(args) -> int:
    container = _load_model(args.model)
    print(f"tensors: {len(container.order)}")
    if container.manifest:
        mf = container.model_manifest()
        print(f"architecture={mf.architecture} layers={mf.layer_count} hidden={mf.hidden} "
              f"mlp={mf.mlp} heads={mf.heads} vocab={mf.vocab} context={mf.context}")
        print(f"types={','.join(mf.types)}")
        counts = pipeline.account_params(container)
        for role in sorted(counts.by_role):
            print(f"params[{role}]={counts.by_role[role]}")
        print(f"scope_params_stored={counts.scope_stored}")
        print(f"scope_params_original={counts.scope_original}")
        # Both ratio conventions: removed fraction r and retained fraction x = 1 - r.
        print(f"scope_removed_fraction={counts.scope_removed!r}")
        print(f"scope_retained_fraction={counts.scope_retained!r}")
        print(f"whole_removed_fraction={counts.whole_removed!r}")
        print(f"whole_retained_fraction={counts.whole_retained!r}")
        compression = (container.manifest or {}).get("compression")
        if compression:
            print(f"compressed: group_size={compression['group_size']} "
                  f"target_removed={compression['ratio_removed']} "
                  f"sequential_update={compression['sequential_update']}")
    if "plan_text" in container.extras:
        sys.stdout.write(container.extras["plan_text"])
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="bsc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a random small model container")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--mlp", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--context", type=int, default=256)
    p.add_argument("--arch", choices=["gpt2-like", "generic"], default="gpt2-like")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--grams-out", default=None,
                   help="also write synthetic-activation grams (for generic manifests)")
    p.add_argument("--tokens-out", default=None, help="also write a random token stream")
    p.add_argument("--token-count", type=int, default=65536)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("calibrate", help="accumulate per-site grams over calibration tokens")
    p.add_argument("--model", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--seqlen", type=int, default=2048)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--types", default=None)
    p.add_argument("--threads", type=int, default=0)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("analyze", help="pairwise sharing-loss heatmaps and policies")
    p.add_argument("--model", required=True)
    p.add_argument("--grams", required=True)
    p.add_argument("--ratio", type=_ratio, required=True)
    p.add_argument("--types", default=None)
    p.add_argument("--out-dir", default="analysis")
    p.add_argument("--threads", type=int, default=0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plan", help="print or write the compression plan")
    p.add_argument("--model", required=True)
    p.add_argument("--ratio", type=_ratio, required=True)
    p.add_argument("--group-size", type=int, default=2)
    p.add_argument("--types", default="K,Q,V,Up,Gate")
    p.add_argument("--sequential-update", choices=["auto", "on", "off"], default="auto")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("compress", help="factorize a dense model container")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratio", type=_ratio, required=True)
    p.add_argument("--group-size", type=int, default=2)
    p.add_argument("--types", default="K,Q,V,Up,Gate")
    p.add_argument("--sequential-update", choices=["auto", "on", "off"], default="auto")
    p.add_argument("--grams", default=None)
    p.add_argument("--tokens", default=None)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--seqlen", type=int, default=2048)
    p.add_argument("--report", default=None)
    p.add_argument("--threads", type=int, default=0)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("eval", help="perplexity over a token stream")
    p.add_argument("--model", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--seqlen", type=int, default=2048)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=8)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="throughput and FLOP accounting")
    p.add_argument("--model", required=True)
    p.add_argument("--baseline", default=None)
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--seq", type=int, default=32)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("info", help="container summary and parameter accounting")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_info)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (calibration.WhiteningError, NotPositiveDefiniteError,
            SingularTriangularError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ContainerError, TokenStreamError, pipeline.PipelineError,
            runtime.RuntimeModelError, LinalgError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
