#!/usr/bin/env python
"""
Command-line front end: codebook training, reference selection, encoding,
index building (with optional document pruning), search, evaluation sweeps,
synthetic data and artifact inspection.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from config import (
    CODEBOOK_MAGIC,
    DEFAULT_CODEBOOK_SIZE,
    DEFAULT_K_Q,
    DEFAULT_K_X,
    DEFAULT_M_BLOCKWISE,
    DEFAULT_M_WHOLE,
    DEFAULT_RERANK_C,
    DEFAULT_SEED,
    DEFAULT_THREADS,
    DEFAULT_TOP_K,
    DESCRIPTOR_MAGIC,
    INDEX_MAGIC,
    MODE_RSTR,
    MODE_STR,
    PIPELINE_MODES,
    REF_BLOCKWISE,
    REF_WHOLE,
    REFERENCE_MAGIC,
    REPORT_FILENAME,
    RESULTS_DIR,
    STORE_MAGIC,
    SWEEP_CSV_FILENAME,
    setup_logging,
)
from eval_harness import GroundTruth, artifact_size, evaluate, synth_dataset, write_report, write_sweep_csv
from inverted_index import InvertedIndex, build_index
from permutation_codec import encode_corpus, read_reference_file, select_references, write_reference_file
from pruning import PRUNE_DOCUMENT, PruneSpec
from search_pipeline import PipelineConfig, VladStore, build_store, search
from utils import ConfigError, DataFormatError, PermSearchError, sniff_magic
from vlad_encoder import (
    encode_image,
    encode_images,
    read_codebook_file,
    read_descriptor_file,
    train_codebook,
    write_codebook_file,
    write_descriptor_file,
)
import visualization

logger = logging.getLogger(__name__)


class TalkativeParser(argparse.ArgumentParser):
    def error(self, message):
        """overload to print usage for every error; usage errors exit with 1"""
        self.print_usage(sys.stderr)
        print("\n%s: error: %s" % (self.prog, message), file=sys.stderr)
        sys.exit(1)


def check(success, error_msg):
    if not success:
        raise ConfigError(error_msg)


def int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


# ==========================================
# Run configuration
# ==========================================

@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on besides its input files."""
    subcommand: str
    seed: int = DEFAULT_SEED
    threads: int = DEFAULT_THREADS
    K: Optional[int] = None
    d: Optional[int] = None
    m: Optional[int] = None
    mode: Optional[str] = None
    k_x: Optional[int] = None
    k_q: Tuple[int, ...] = ()
    c: Optional[int] = None
    k: Optional[int] = None
    prune_query: Tuple[int, ...] = ()
    prune_docs: Optional[int] = None
    inputs: Tuple[str, ...] = ()
    outputs: Tuple[str, ...] = ()

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        def listed(value):
            if value is None:
                return ()
            return tuple(value) if isinstance(value, list) else (value,)

        return cls(
            subcommand=args.command,
            seed=args.seed,
            threads=args.threads,
            K=getattr(args, "K", None),
            d=getattr(args, "dim", None),
            m=getattr(args, "m", None),
            mode=getattr(args, "mode", None),
            k_x=getattr(args, "k_x", None),
            k_q=listed(getattr(args, "k_q", None)),
            c=getattr(args, "c", None),
            k=getattr(args, "k", None),
            prune_query=listed(getattr(args, "prune_query", None)),
            prune_docs=getattr(args, "prune_docs", None),
            inputs=tuple(getattr(args, n) for n in args.input_args if getattr(args, n, None)),
            outputs=tuple(getattr(args, n) for n in args.output_args if getattr(args, n, None)),
        )

    def validate(self) -> "RunConfig":
        """Parameter ranges and combinations; raises ConfigError before any file is touched."""
        if self.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {self.threads}")
        if self.seed < 0:
            raise ConfigError(f"--seed must be >= 0, got {self.seed}")
        for name in ("K", "d", "m", "k_x", "c", "k", "prune_docs"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        for name in ("k_q", "prune_query"):
            if any(v < 1 for v in getattr(self, name)):
                raise ConfigError(f"{name} values must be >= 1, got {getattr(self, name)}")
        if self.m is not None and self.k_x is not None and self.k_x > self.m:
            raise ConfigError(f"k_x={self.k_x} exceeds m={self.m}")
        if self.mode is not None and self.prune_docs is not None and _ref_mode(self.mode) != REF_BLOCKWISE:
            raise ConfigError("--prune-docs only applies to the blockwise modes")
        if self.mode is not None and self.subcommand in ("search", "evaluate"):
            for k_q in self.k_q or (None,):
                for prune in self.prune_query or (None,):
                    PipelineConfig(
                        mode=self.mode,
                        k_x=self.k_x or 1,
                        k_q=k_q or 1,
                        c=self.c or DEFAULT_RERANK_C,
                        k=self.k or DEFAULT_TOP_K,
                        prune_query=prune,
                        prune_docs=self.prune_docs,
                    ).validate()
        for path in self.outputs:
            parent = os.path.dirname(os.path.abspath(path))
            if not os.path.isdir(parent):
                raise ConfigError(f"output directory {parent} does not exist")
            if path in self.inputs:
                raise ConfigError(f"{path} is both an input and an output")
        return self

    def echo(self, **resolved) -> dict:
        """Run-level fields for reports; resolved fills the ones read from artifacts rather than flags."""
        fields = {"seed": self.seed, "threads": self.threads, "K": self.K, "d": self.d, "m": self.m}
        for name, value in resolved.items():
            if fields.get(name) is None:
                fields[name] = value
        fields["inputs"] = ",".join(map(str, self.inputs))
        return {name: "" if value is None else value for name, value in fields.items()}


# ==========================================
# Helpers
# ==========================================

def _hide_progress(args) -> bool:
    return args.quiet or not sys.stderr.isatty()


def _vlads(images, codebook, args):
    if args.threads > 1:
        return encode_images(images, codebook, n_jobs=args.threads)
    return [encode_image(img, codebook) for img in tqdm(images, desc="VLAD", disable=_hide_progress(args))]


def _ref_mode(mode: str) -> str:
    return PipelineConfig(mode=mode).ref_mode


def _load_query(args, codebook):
    images = read_descriptor_file(args.queries)
    if args.query_id is not None:
        images = [img for img in images if img.image_id == args.query_id]
        if not images:
            raise DataFormatError(f"{args.queries}: no image {args.query_id!r}")
    elif len(images) != 1:
        raise ConfigError(f"{args.queries} holds {len(images)} images; pick one with --query-id")
    return encode_image(images[0], codebook)


def _warn_depths(k_x: int, k_qs) -> None:
    for k_q in k_qs:
        if k_q > k_x:
            logger.warning("k_q=%d exceeds the index depth k_x=%d", k_q, k_x)


def _format_score(score) -> str:
    return f"{score:.6f}" if isinstance(score, float) else str(score)


# ==========================================
# Subcommands
# ==========================================

def cmd_train_codebook(args, run: RunConfig) -> int:
    images = read_descriptor_file(args.descriptors)
    training = [img.descriptors for img in images if len(img)]
    if not training:
        raise DataFormatError(f"{args.descriptors}: no descriptors to train on")
    codebook = train_codebook(np.vstack(training), args.K, args.seed)
    write_codebook_file(args.out, codebook)
    print(f"K={codebook.K}\td={codebook.d}\titerations={codebook.n_iter}")
    return 0


def cmd_select_refs(args, run: RunConfig) -> int:
    codebook = read_codebook_file(args.codebook)
    vectors = _vlads(read_descriptor_file(args.descriptors), codebook, args)
    m = args.m or (DEFAULT_M_WHOLE if args.ref_mode == REF_WHOLE else DEFAULT_M_BLOCKWISE)
    refs = select_references(vectors, m, args.ref_mode, args.seed)
    write_reference_file(args.out, refs)
    print(f"m={refs.m}\tmode={refs.mode}\tdim={refs.dim}\tseed={refs.seed}")
    return 0


def cmd_encode(args, run: RunConfig) -> int:
    codebook = read_codebook_file(args.codebook)
    refs = read_reference_file(args.refs)
    vectors = _vlads(read_descriptor_file(args.descriptors), codebook, args)
    docs, skipped = encode_corpus(vectors, refs, args.k_x, n_jobs=args.threads)
    lines = [f"{doc.doc_id}\t{doc.to_surrogate_text()}" if args.expand else doc.to_text() for doc in docs]
    if args.out:
        with open(args.out, "w") as f:
            f.writelines(line + "\n" for line in lines)
    else:
        for line in lines:
            print(line)
    if skipped:
        print(f"skipped {len(skipped)} unindexable images", file=sys.stderr)
    return 0


def cmd_build_index(args, run: RunConfig) -> int:
    codebook = read_codebook_file(args.codebook)
    vectors = _vlads(read_descriptor_file(args.descriptors), codebook, args)
    ref_mode = _ref_mode(args.mode)
    if args.refs:
        refs = read_reference_file(args.refs)
        if refs.mode != ref_mode:
            raise ConfigError(f"{args.mode} needs {ref_mode} references, {args.refs} holds {refs.mode}")
    else:
        refs = select_references(vectors, args.m, ref_mode, args.seed)
        if args.save_refs:
            write_reference_file(args.save_refs, refs)
    if args.k_x > refs.m:
        raise ConfigError(f"k_x={args.k_x} exceeds m={refs.m}")

    docs, skipped = encode_corpus(vectors, refs, args.k_x, n_jobs=args.threads)
    if skipped:
        print(f"warning: skipped {len(skipped)} unindexable images", file=sys.stderr)
    if args.prune_docs:
        index = PruneSpec(PRUNE_DOCUMENT, args.prune_docs, source_k=args.k_x).build_index(docs, n_jobs=args.threads)
    else:
        index = build_index(docs)
    size = index.save(args.out)
    stats = index.stats
    print(f"N={stats.doc_count}\tterms={stats.term_count}\tpostings={stats.postings_count}\tbytes={size}")

    if args.store:
        indexed = set(index.doc_ids)
        store_size = build_store([v for v in vectors if v.image_id in indexed]).save(args.store)
        print(f"store_bytes={store_size}")

    if args.space_plot:
        keeps = sorted(args.space_keeps, reverse=True)
        specs = [PruneSpec(PRUNE_DOCUMENT, keep, source_k=args.k_x) for keep in keeps]
        postings = [spec.build_index(docs, n_jobs=args.threads).stats.postings_count for spec in specs]
        for keep, count in zip(keeps, postings):
            print(f"keep={keep}\tpostings={count}")
        visualization.plot_space(keeps, postings, args.space_plot)
    return 0


def cmd_search(args, run: RunConfig) -> int:
    codebook = read_codebook_file(args.codebook)
    refs = read_reference_file(args.refs)
    index = InvertedIndex.load(args.index)
    store = VladStore.load(args.store) if args.store else None
    k_x = args.k_x or index.max_weight
    _warn_depths(k_x, [args.k_q])
    config = PipelineConfig(
        mode=args.mode, k_x=k_x, k_q=args.k_q, c=args.c, k=args.k, prune_query=args.prune_query,
    ).validate(refs.m)

    result = search(_load_query(args, codebook), index, refs, config, store)
    for rank, hit in enumerate(result.hits, 1):
        print(f"{rank}\t{hit.doc_id}\t{_format_score(hit.score)}")
    return 0


def cmd_evaluate(args, run: RunConfig) -> int:
    codebook = read_codebook_file(args.codebook)
    refs = read_reference_file(args.refs)
    index = InvertedIndex.load(args.index)
    store = VladStore.load(args.store) if args.store else None
    gt = GroundTruth.read(args.gt)

    wanted = set(gt.queries)
    images = [img for img in read_descriptor_file(args.queries) if img.image_id in wanted]
    queries = {v.image_id: v for v in _vlads(images, codebook, args)}

    k_x = args.k_x or index.max_weight
    k_qs = args.k_q or [DEFAULT_K_Q]
    prunes = args.prune_query or [None]
    _warn_depths(k_x, k_qs)

    os.makedirs(args.out_dir, exist_ok=True)
    reports = []
    for k_q in k_qs:
        for prune in prunes:
            config = PipelineConfig(
                mode=args.mode, k_x=k_x, k_q=k_q, c=args.c, k=args.k,
                prune_query=prune, prune_docs=args.prune_docs,
            ).validate(refs.m)
            report = evaluate(
                queries, gt, index, refs, config, store,
                recall_ks=args.recall_k,
                exclude_self=not args.include_self,
                measure_latency=args.measure_latency,
                index_bytes=artifact_size(args.index),
                store_bytes=artifact_size(args.store) if args.mode == MODE_RSTR else 0,
                n_jobs=args.threads,
            )
            report.config.update(run.echo(K=codebook.K, d=codebook.d, m=refs.m))
            stem, ext = os.path.splitext(REPORT_FILENAME)
            suffix = f"_{config.mode}_kq{k_q}" + (f"_p{prune}" if prune is not None else "")
            write_report(report, os.path.join(args.out_dir, stem + suffix + ext))
            print(f"mode={config.mode}\tk_q={k_q}\tprune_query={prune or ''}\tmAP={report.mAP:.6f}")
            reports.append(report)

    df = write_sweep_csv(reports, os.path.join(args.out_dir, SWEEP_CSV_FILENAME))
    if args.plot:
        visualization.plot_sweep(df, args.plot)
    return 0


def cmd_synth(args, run: RunConfig) -> int:
    images, gt = synth_dataset(
        n_images=args.n_images,
        clusters=args.clusters,
        d=args.dim,
        K=args.K,
        noise=args.noise,
        seed=args.seed,
        descriptors_per_image=args.descriptors_per_image,
    )
    write_descriptor_file(args.out, images)
    gt.write(args.gt_out)
    print(f"images={len(images)}\tqueries={len(gt)}\td={args.dim}")
    return 0


def cmd_stats(args, run: RunConfig) -> int:
    magic = sniff_magic(args.path)
    if magic == DESCRIPTOR_MAGIC:
        images = read_descriptor_file(args.path)
        d = images[0].d if images else 0
        print(f"type=descriptors\timages={len(images)}\tdescriptors={sum(len(i) for i in images)}\td={d}")
    elif magic == CODEBOOK_MAGIC:
        codebook = read_codebook_file(args.path)
        print(f"type=codebook\tK={codebook.K}\td={codebook.d}")
    elif magic == REFERENCE_MAGIC:
        refs = read_reference_file(args.path)
        print(f"type=references\tmode={refs.mode}\tm={refs.m}\tdim={refs.dim}\tseed={refs.seed}")
    elif magic == INDEX_MAGIC:
        stats = InvertedIndex.load(args.path).stats
        print(f"type=index\tN={stats.doc_count}\tterms={stats.term_count}"
              f"\tpostings={stats.postings_count}\tbytes={os.path.getsize(args.path)}")
    elif magic == STORE_MAGIC:
        store = VladStore.load(args.path)
        print(f"type=store\tcount={len(store)}\tK={store.K}\td={store.d}")
    else:
        raise DataFormatError(f"{args.path}: unknown magic {magic!r}")
    return 0


# ==========================================
# Argument parsing
# ==========================================

def get_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    run_group = common.add_argument_group("Run")
    run_group.add_argument("--seed", type=int, default=DEFAULT_SEED, help="seed for k-means, reference sampling and synthetic data")
    run_group.add_argument("--threads", type=int, default=DEFAULT_THREADS, help="worker threads (default 1)")
    run_group.add_argument("-q", "--quiet", action="store_true", help="errors only on stderr, no progress bars")
    run_group.add_argument("-v", "--verbose", action="store_true", help="debug output on stderr")
    run_group.add_argument("--debug_fn", "--debug-log", dest="debug_fn", help="log debug level to filename")

    parser = TalkativeParser(description="Permutation-based approximate search over VLAD descriptors")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("train-codebook", parents=[common], help="k-means visual vocabulary")
    p.add_argument("--descriptors", required=True, metavar="PDSC")
    p.add_argument("-K", "--K", dest="K", type=int, default=DEFAULT_CODEBOOK_SIZE)
    p.add_argument("-o", "--out", required=True, metavar="PCBK")
    p.set_defaults(func=cmd_train_codebook, input_args=("descriptors",), output_args=("out",))

    p = sub.add_parser("select-refs", parents=[common], help="sample reference objects")
    p.add_argument("--descriptors", required=True, metavar="PDSC")
    p.add_argument("--codebook", required=True, metavar="PCBK")
    p.add_argument("-m", "--m", dest="m", type=int, help="default %d whole, %d blockwise" % (DEFAULT_M_WHOLE, DEFAULT_M_BLOCKWISE))
    p.add_argument("--ref-mode", choices=(REF_WHOLE, REF_BLOCKWISE), default=REF_WHOLE)
    p.add_argument("-o", "--out", required=True, metavar="PREF")
    p.set_defaults(func=cmd_select_refs, input_args=("descriptors", "codebook"), output_args=("out",))

    p = sub.add_parser("encode", parents=[common], help="surrogate documents as text")
    p.add_argument("--descriptors", required=True, metavar="PDSC")
    p.add_argument("--codebook", required=True, metavar="PCBK")
    p.add_argument("--refs", required=True, metavar="PREF")
    p.add_argument("--k-x", dest="k_x", type=int, default=DEFAULT_K_X)
    p.add_argument("--expand", action="store_true", help="print the repeated-token text instead of term:weight pairs")
    p.add_argument("-o", "--out", metavar="TXT", help="default is standard output")
    p.set_defaults(func=cmd_encode, input_args=("descriptors", "codebook", "refs"), output_args=("out",))

    p = sub.add_parser("build-index", parents=[common], help="encode a corpus and write the inverted index")
    p.add_argument("--descriptors", required=True, metavar="PDSC")
    p.add_argument("--codebook", required=True, metavar="PCBK")
    p.add_argument("--mode", choices=PIPELINE_MODES, default=MODE_STR)
    ref_group = p.add_mutually_exclusive_group(required=True)
    ref_group.add_argument("--refs", metavar="PREF", help="existing reference file")
    ref_group.add_argument("-m", "--m", dest="m", type=int, help="sample m references from the corpus")
    p.add_argument("--save-refs", metavar="PREF", help="write sampled references (with -m)")
    p.add_argument("--k-x", dest="k_x", type=int, default=DEFAULT_K_X)
    p.add_argument("--prune-docs", type=int, metavar="N", help="keep the N best tf-idf terms per document")
    p.add_argument("--store", metavar="PVST", help="also write the original vectors (needed by rSTR)")
    p.add_argument("--space-plot", metavar="PNG", help="plot postings count against --space-keeps")
    p.add_argument("--space-keeps", type=int_list, default=[50, 40, 30, 20, 10], metavar="LIST")
    p.add_argument("-o", "--out", required=True, metavar="PIDX")
    p.set_defaults(func=cmd_build_index, input_args=("descriptors", "codebook", "refs"),
                   output_args=("out", "store", "save_refs", "space_plot"))

    def add_query_args(p):
        p.add_argument("--index", required=True, metavar="PIDX")
        p.add_argument("--refs", required=True, metavar="PREF")
        p.add_argument("--codebook", required=True, metavar="PCBK")
        p.add_argument("--store", metavar="PVST")
        p.add_argument("--mode", choices=PIPELINE_MODES, default=MODE_STR)
        p.add_argument("--k-x", dest="k_x", type=int, help="encoding depth of the index (default: its largest weight)")
        p.add_argument("-c", "--c", dest="c", type=int, default=DEFAULT_RERANK_C, help="rSTR candidates to reorder")
        p.add_argument("-k", "--k", dest="k", type=int, default=DEFAULT_TOP_K)

    p = sub.add_parser("search", parents=[common], help="k-NN search for one query image")
    add_query_args(p)
    p.add_argument("--queries", required=True, metavar="PDSC")
    p.add_argument("--query-id")
    p.add_argument("--k-q", dest="k_q", type=int, default=DEFAULT_K_Q)
    p.add_argument("--prune-query", type=int, metavar="N")
    p.set_defaults(func=cmd_search, input_args=("index", "refs", "codebook", "store", "queries"), output_args=())

    p = sub.add_parser("evaluate", parents=[common], help="mAP / recall sweeps")
    add_query_args(p)
    p.add_argument("--queries", required=True, metavar="PDSC", help="descriptors holding the query images")
    p.add_argument("--gt", required=True, metavar="TXT")
    p.add_argument("--k-q", dest="k_q", type=int_list, metavar="LIST")
    p.add_argument("--prune-query", type=int_list, metavar="LIST")
    p.add_argument("--prune-docs", type=int, metavar="N", help="keep level the index was built with (echoed)")
    p.add_argument("--recall-k", type=int_list, default=[1, 10], metavar="LIST")
    p.add_argument("--include-self", action="store_true", help="keep each query image in its own result list")
    p.add_argument("--measure-latency", action="store_true", help="serialize queries and report latency")
    p.add_argument("--out-dir", default=RESULTS_DIR)
    p.add_argument("--plot", metavar="PNG", help="mAP vs k_q plot")
    p.set_defaults(func=cmd_evaluate, input_args=("index", "refs", "codebook", "store", "queries", "gt"),
                   output_args=("plot",))

    p = sub.add_parser("synth", parents=[common], help="synthetic clustered descriptor sets")
    p.add_argument("--n-images", type=int, default=1000)
    p.add_argument("--clusters", type=int, default=50)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("-K", "--K", dest="K", type=int, default=16, help="latent visual words")
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--descriptors-per-image", type=int, default=32)
    p.add_argument("-o", "--out", required=True, metavar="PDSC")
    p.add_argument("--gt-out", required=True, metavar="TXT")
    p.set_defaults(func=cmd_synth, input_args=(), output_args=("out", "gt_out"))

    p = sub.add_parser("stats", parents=[common], help="describe an artifact file")
    p.add_argument("path")
    p.set_defaults(func=cmd_stats, input_args=("path",), output_args=())

    return parser


def main(argv=None) -> int:
    args = get_parser().parse_args(argv)
    setup_logging(verbose=args.verbose, debug_fn=args.debug_fn, quiet=args.quiet)
    try:
        run = RunConfig.from_args(args).validate()
        check(getattr(args, "mode", None) != MODE_RSTR or args.store, "rSTR needs --store")
        check(not getattr(args, "save_refs", None) or args.m, "--save-refs only applies with -m")
        return args.func(args, run)
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    except (PermSearchError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
