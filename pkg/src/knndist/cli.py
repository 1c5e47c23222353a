"""Command-line interface.

Typical run::

    knndist gen gaussian --out data.csv --n 60000
    knndist prep --data data.csv --workdir run/
    knndist train --workdir run/ --kind pivnet
    knndist eval --workdir run/ --estimator run/pivnet.est

Every command accepts ``--config FILE`` with ``key = value`` lines (keys are
long option names); flags on the command line win. Reports depend only on
the inputs and the seed, except for ``bench`` which measures wall time.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ArtifactError, KnnDistError, ValidationError

EXIT_IO = 3
EXIT_BUDGET = 4

PREP_ARTIFACTS = {"partition": "partition.bin", "tree": "tree.bin", "grid": "grid.bin",
                  "corpus": "corpus.bin"}
PARTITION_MAGIC = b"KNNDPART"


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------

def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ArtifactError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _apply_config(parser, sub, argv):
    """Parse ``argv`` after splicing in flags from the config file, if any.

    Config entries are inserted right after the command name, so flags given
    on the command line (which come later) take precedence.
    """
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return parser.parse_args(argv)
    pos = next((i for i, a in enumerate(argv) if a in sub.choices), None)
    if pos is None:
        return parser.parse_args(argv)
    actions = {a.dest: a for a in sub.choices[argv[pos]]._actions if a.option_strings}
    tokens = []
    for k, v in read_config_file(known.config).items():
        if k not in actions or k in ("help", "config"):
            raise ValidationError(f"{known.config}: unknown key {k!r} for command {argv[pos]!r}")
        a = actions[k]
        flag = a.option_strings[-1]
        if a.nargs == 0:
            if v.lower() in ("1", "true", "yes", "on"):
                tokens.append(flag)
        elif a.nargs in ("+", "*"):
            tokens += [flag, *v.split()]
        else:
            tokens += [flag, v]
    return parser.parse_args(argv[:pos + 1] + tokens + argv[pos + 1:])


def _echo(args):
    """Resolved configuration as sorted ``key = value`` lines."""
    skip = {"func", "json", "config"}
    items = sorted((k, v) for k, v in vars(args).items() if k not in skip)
    return "".join(f"{k} = {'' if v is None else v}\n" for k, v in items)


def _write_echo(outdir, args):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / f"{args.command}.config").write_text(_echo(args))


def _emit(args, payload, text):
    """Print the report (JSON with ``--json``) and save it if ``--report`` was given."""
    out = json.dumps(payload, sort_keys=True, indent=2) + "\n" if args.json else text
    sys.stdout.write(out)
    if getattr(args, "report", None):
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(out)


def _kv_text(title, d):
    width = max(len(k) for k in d)
    lines = [title]
    for k in d:
        v = d[k]
        v = repr(v) if isinstance(v, float) else str(v)
        lines.append(f"  {k.ljust(width)}  {v}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# workdir artifacts
# --------------------------------------------------------------------------

def _manifest_path(workdir):
    return Path(workdir) / "manifest.json"


def load_manifest(workdir, verify=True):
    from .binio import sha256_file

    mp = _manifest_path(workdir)
    if not mp.exists():
        raise ArtifactError(f"{mp} not found; run 'knndist prep' first")
    try:
        man = json.loads(mp.read_text())
    except ValueError as exc:
        raise ArtifactError(f"{mp}: invalid JSON") from exc
    if verify:
        for name, ent in man["artifacts"].items():
            p = Path(workdir) / ent["file"]
            if not p.exists():
                raise ArtifactError(f"artifact {name} ({p}) is missing")
            if sha256_file(p) != ent["sha256"]:
                raise ArtifactError(f"artifact {name} ({p}) fails its checksum")
    return man


class Workdir:
    """Lazy access to the artifacts written by ``prep``."""

    def __init__(self, path, verify=True):
        self.path = Path(path)
        self.manifest = load_manifest(path, verify)
        self._cache = {}

    def file(self, name):
        return self.path / self.manifest["artifacts"][name]["file"]

    @property
    def tree(self):
        if "tree" not in self._cache:
            from .kdtree import KdTree

            self._cache["tree"] = KdTree.load(self.file("tree"))
        return self._cache["tree"]

    @property
    def grid(self):
        if "grid" not in self._cache:
            from .grid import PivotGrid

            self._cache["grid"] = PivotGrid.load(self.file("grid"))
        return self._cache["grid"]

    @property
    def corpus(self):
        if "corpus" not in self._cache:
            from .trainer import TrainingCorpus

            self._cache["corpus"] = TrainingCorpus.load(self.file("corpus"))
        return self._cache["corpus"]

    @property
    def partition(self):
        if "partition" not in self._cache:
            from .binio import read_container

            self._cache["partition"] = read_container(self.file("partition"), PARTITION_MAGIC, 1)[1]
        return self._cache["partition"]

    @property
    def reference(self):
        return self.tree.data

    @property
    def test_queries(self):
        return self.partition["test_queries"]

    @property
    def k_max(self):
        return int(self.manifest["config"]["k_max"])

    def source(self, spec, exclude_self=False):
        """Estimator named by ``spec``: ``exact``, ``pivot`` or an estimator file."""
        from .estimators import Estimator, ExactEstimator, pivot_estimator

        if spec == "exact":
            k = self.k_max if not exclude_self else min(self.k_max, self.tree.n - 1)
            return ExactEstimator(self.tree, k, exclude_self=exclude_self)
        if spec == "pivot":
            return pivot_estimator(self.grid)
        return Estimator.load(spec)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen(args):
    from .dataset import gen_gaussian_mixture, gen_random_walk_clusters, write_csv

    if args.family == "gaussian":
        data, labels = gen_gaussian_mixture(args.n, args.components, args.seed, dim=args.dim,
                                            n_outliers=args.outliers, return_labels=True)
    else:
        per = args.n // args.clusters
        if per < 1:
            raise ValidationError("n must be at least the number of clusters")
        data, labels = gen_random_walk_clusters(args.clusters, per, args.step, args.seed, dim=args.dim,
                                                return_labels=True)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(data, args.out)
    if args.labels_out:
        Path(args.labels_out).write_text("".join(f"{v}\n" for v in labels))
    _emit(args, {"points": data.n, "dim": data.dim, "out": str(args.out)},
          _kv_text("generated", {"points": data.n, "dim": data.dim, "out": str(args.out)}))


def cmd_prep(args):
    from .binio import sha256_file, write_container
    from .dataset import augment_uniform, load_csv, partition
    from .grid import DEFAULT_C, build_grid
    from .kdtree import build
    from .trainer import build_corpus

    data = load_csv(args.data, has_header=args.header, drop_invalid=args.drop_invalid)
    c = args.c or DEFAULT_C.get(data.dim, 32)
    rng = np.random.default_rng(args.seed)
    part_seed, test_seed, corpus_seed = (int(s) for s in rng.integers(0, 2**63 - 1, size=3))
    part = partition(data, args.n_train, args.n_test, part_seed)
    X = part.reference_set
    if args.k_max > X.n:
        raise ValidationError(f"k_max={args.k_max} exceeds |X|={X.n}")
    tree = build(X)
    grid = build_grid(X, c, args.k_max, tree, memory_budget=int(args.memory_budget))
    corpus = build_corpus(part, grid, tree, n_augment=args.n_augment, seed=corpus_seed)
    test_q = np.vstack([part.test_queries, augment_uniform(X.bbox, args.n_test, test_seed)])

    wd = Path(args.workdir)
    wd.mkdir(parents=True, exist_ok=True)
    write_container(wd / PREP_ARTIFACTS["partition"], PARTITION_MAGIC, 1,
                    {"n_sampled_test": int(part.test_idx.size)},
                    {"reference_idx": part.reference_idx.astype(np.int64),
                     "train_idx": part.train_idx.astype(np.int64),
                     "test_idx": part.test_idx.astype(np.int64), "test_queries": test_q})
    tree.save(wd / PREP_ARTIFACTS["tree"])
    grid.save(wd / PREP_ARTIFACTS["grid"])
    corpus.save(wd / PREP_ARTIFACTS["corpus"])
    config = {"data": str(args.data), "seed": args.seed, "k_max": args.k_max, "c": c,
              "n_train": args.n_train, "n_test": args.n_test,
              "n_augment": args.n_augment if args.n_augment is not None else args.n_train,
              "dim": data.dim, "n_reference": X.n}
    man = {"version": 1, "config": config,
           "artifacts": {k: {"file": f, "sha256": sha256_file(wd / f)} for k, f in PREP_ARTIFACTS.items()}}
    _manifest_path(wd).write_text(json.dumps(man, sort_keys=True, indent=2) + "\n")
    _write_echo(wd, args)
    summary = {"reference_points": X.n, "train_queries": int(part.train_idx.size),
               "corpus_queries": len(corpus), "test_queries": int(test_q.shape[0]),
               "grid_c": c, "k_max": args.k_max, "grid_bytes": int(grid.vectors.nbytes)}
    summary.update({f"sha256_{k}": v["sha256"] for k, v in man["artifacts"].items()})
    _emit(args, summary, _kv_text("prep", summary))


def _parse_hidden(s):
    try:
        sizes = tuple(int(v) for v in s.split(","))
    except ValueError:
        raise ValidationError(f"bad hidden sizes {s!r}; expected e.g. 128,128,32") from None
    if not sizes or min(sizes) < 1:
        raise ValidationError("hidden sizes must be positive")
    return sizes


def cmd_train(args):
    from .nn import TrainConfig
    from .trainer import DEFAULT_LR, train_estimator

    wd = Workdir(args.workdir)
    lr = args.lr if args.lr is not None else DEFAULT_LR.get(args.kind, 0.01)
    cfg = TrainConfig(learning_rate=lr, batch_size=args.batch_size, max_epochs=args.epochs,
                      patience=args.patience, seed=args.seed)
    log = None
    if args.verbose:
        def log(epoch, tr, va):
            print(f"epoch {epoch}: train {tr:.6g} val {va:.6g}", file=sys.stderr)
    est, rep = train_estimator(args.kind, wd.corpus, wd.grid, cfg, hidden=_parse_hidden(args.hidden) if args.hidden else None,
                               isotonic=args.isotonic, log=log)
    out = Path(args.out) if args.out else wd.path / f"{args.kind}.est"
    out.parent.mkdir(parents=True, exist_ok=True)
    est.save(out, grid_path=wd.file("grid"))
    _write_echo(out.parent, args)
    d = rep.as_dict()
    d["estimator"] = str(out)
    _emit(args, d, _kv_text(f"train {args.kind}", d))


def cmd_eval(args):
    from .evaluation import error_report, to_csv

    wd = Workdir(args.workdir)
    Q = wd.test_queries
    est = wd.source(args.estimator)
    exact = wd.source("exact")
    k = min(est.k_max, exact.k_max)
    truth = exact.estimate_many(Q)[:, :k]

    class _Cut:
        def estimate_many(self, X):
            return est.estimate_many(X)[:, :k]

    rep = error_report(Q, truth, _Cut())
    s = rep.summary()
    s["estimator"] = args.estimator
    if args.csv:
        rows = [{"query": i, "mae": float(a), "mape": float(b)}
                for i, (a, b) in enumerate(zip(rep.per_query_mae, rep.per_query_mape))]
        Path(args.csv).write_text(to_csv(rows, ["query", "mae", "mape"]))
    _emit(args, s, _kv_text("error report", s))


def cmd_density(args):
    from .applications.density import density_grid

    wd = Workdir(args.workdir)
    X = wd.reference
    try:
        W, H = (int(v) for v in args.resolution.lower().split("x"))
    except ValueError:
        raise ValidationError(f"bad resolution {args.resolution!r}; expected WxH") from None
    est = wd.source(args.estimator)
    g = density_grid(est, (W, H), args.k, X.n, X.bbox)
    out = {"estimator": args.estimator, "k": args.k, "resolution": f"{W}x{H}",
           "thresholds": [float(t) for t in g.thresholds],
           "bin_counts": [int(np.sum(g.bins == b)) for b in range(4)]}
    if args.compare:
        ref = density_grid(wd.source(args.compare), (W, H), args.k, X.n, X.bbox)
        out["agreement"] = ref.agreement(g)
        out["compare"] = args.compare
    if args.csv:
        g.to_csv(args.csv)
    if args.ppm:
        g.to_ppm(args.ppm)
    _emit(args, out, _kv_text("density grid", out))


def cmd_dod(args):
    from .applications.outliers import DodParams, kth_distances, radius_for_count, select_outliers
    from .evaluation import precision_recall

    wd = Workdir(args.workdir)
    X = wd.reference
    exact = kth_distances(X.points, wd.source("exact", exclude_self=True), args.k)
    est = kth_distances(X.points, wd.source(args.estimator, exclude_self=True), args.k)
    r = args.r
    if r is None:
        r = radius_for_count(exact, args.n)
        if not r > 0:
            raise ValidationError("derived radius is 0; pass --r explicitly")
    out = {"estimator": args.estimator, "k": args.k, "n": args.n, "r": r}
    for variant, params in (("rk", DodParams("rk", args.k, r=r)), ("nk", DodParams("nk", args.k, n=args.n))):
        truth = select_outliers(exact, params)
        found = select_outliers(est, params)
        sc = precision_recall(found, truth)
        out[f"{variant}_detected"] = int(found.size)
        out[f"{variant}_true"] = int(truth.size)
        out[f"{variant}_precision"] = sc.precision
        out[f"{variant}_recall"] = sc.recall
        if args.out_dir:
            Path(args.out_dir).mkdir(parents=True, exist_ok=True)
            Path(args.out_dir, f"outliers_{variant}.csv").write_text(
                "index\n" + "".join(f"{i}\n" for i in found))
    _emit(args, out, _kv_text("distance-based outliers", out))


def cmd_aknn(args):
    from .applications.aknn import aknn_batch, recall
    from .evaluation import lower_median

    wd = Workdir(args.workdir)
    tree = wd.tree
    est = wd.source(args.estimator)
    Q = wd.test_queries[: args.queries]
    out = {"estimator": args.estimator, "queries": int(Q.shape[0])}
    for k in args.k:
        idx, _, counts = aknn_batch(tree, est, Q, k)
        exact_idx = tree.knn_batch(Q, k)[0]
        rec = recall(idx, exact_idx)
        out[f"k{k}_recall_mean"] = float(rec.mean())
        out[f"k{k}_recall_median"] = lower_median(rec)
        out[f"k{k}_short_answers"] = int(np.sum(counts < k))
    _emit(args, out, _kv_text("approximate k-NN", out))


def cmd_dpc(args):
    from .applications.dpc import adjusted_rand, dpc_cluster, estimate_dcut

    wd = Workdir(args.workdir)
    X = wd.reference
    res = dpc_cluster(X, args.d_cut, args.rho_min, args.delta_min, tree=wd.tree)
    out = {"d_cut": args.d_cut, "rho_min": args.rho_min, "delta_min": args.delta_min,
           "clusters": res.n_clusters, "noise": res.n_noise}
    if args.out_dir:
        od = Path(args.out_dir)
        od.mkdir(parents=True, exist_ok=True)
        res.to_csv(od / "dpc.csv")
        res.decision_graph_csv(od / "decision_graph.csv")
        _write_echo(od, args)
    if args.reverse:
        if res.n_noise == 0:
            raise ValidationError("the clustering has no noise points; d_cut cannot be recovered")
        est = wd.source(args.estimator, exclude_self=True)
        d_est = estimate_dcut(est, X.points, args.rho_min, res.n_noise)
        again = dpc_cluster(X, d_est, args.rho_min, args.delta_min, tree=wd.tree)
        out.update({"estimator": args.estimator, "estimated_d_cut": d_est,
                    "relative_error": abs(d_est - args.d_cut) / args.d_cut,
                    "reproduced_clusters": again.n_clusters, "reproduced_noise": again.n_noise,
                    "ari": adjusted_rand(res.labels, again.labels)})
    _emit(args, out, _kv_text("density peaks clustering", out))


def cmd_bench(args):
    from .evaluation import bench

    wd = Workdir(args.workdir)
    Q = wd.test_queries
    out = {}
    for spec in args.estimator:
        if spec == "exact":
            tree, k = wd.tree, wd.k_max

            def probe(q, tree=tree, k=k):
                return tree.knn(q, k)
        else:
            probe = wd.source(spec).estimate
        out[spec] = bench(probe, Q, warmup=args.warmup, iters=args.iters).as_dict()
    text = "".join(f"{s}: mean {v['mean_us']:.2f} us, median {v['median_us']:.2f} us\n" for s, v in out.items())
    _emit(args, out, text)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="knndist", description="Learned k-NN distance estimation.",
                                allow_abbrev=False)
    p.add_argument("--version", action="version", version=f"knndist {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, allow_abbrev=False)
        sp.set_defaults(func=func)
        sp.add_argument("--config", help="key = value file; flags override it")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=None, help="cap on worker threads")
        sp.add_argument("--json", action="store_true", help="machine-readable report")
        sp.add_argument("--report", help="also write the report to this file")
        return sp

    sp = add("gen", cmd_gen, "generate a synthetic dataset")
    sp.add_argument("family", choices=["gaussian", "randomwalk"])
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=60000)
    sp.add_argument("--dim", type=int, default=2)
    sp.add_argument("--components", type=int, default=8)
    sp.add_argument("--outliers", type=int, default=0)
    sp.add_argument("--clusters", type=int, default=8)
    sp.add_argument("--step", type=float, default=20.0)
    sp.add_argument("--labels-out")

    sp = add("prep", cmd_prep, "partition data, build tree, grid and training corpus")
    sp.add_argument("--data", required=True)
    sp.add_argument("--workdir", required=True)
    sp.add_argument("--header", action="store_true")
    sp.add_argument("--drop-invalid", action="store_true")
    sp.add_argument("--n-train", type=int, default=10000)
    sp.add_argument("--n-test", type=int, default=1000)
    sp.add_argument("--n-augment", type=int, default=None)
    sp.add_argument("--k-max", type=int, default=50)
    sp.add_argument("--c", type=int, default=None, help="cells per dimension (default by d)")
    sp.add_argument("--memory-budget", type=float, default=4 * 1024**3, help="bytes")

    sp = add("train", cmd_train, "train an estimator on the prepared corpus")
    sp.add_argument("--workdir", required=True)
    sp.add_argument("--kind", choices=["pivot", "querynet", "pivnet", "pivnet_itr"], default="pivnet")
    sp.add_argument("--hidden", default=None, help="e.g. 128,128,32; default 64,64,32 in 2D")
    sp.add_argument("--lr", type=float, default=None, help="default depends on --kind")
    sp.add_argument("--batch-size", type=int, default=500)
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--patience", type=int, default=10)
    sp.add_argument("--isotonic", action="store_true")
    sp.add_argument("--out")
    sp.add_argument("--verbose", action="store_true")

    sp = add("eval", cmd_eval, "error report on the test queries")
    sp.add_argument("--workdir", required=True)
    sp.add_argument("--estimator", default="pivot", help="exact, pivot, or an estimator file")
    sp.add_argument("--csv", help="per-query MAE/MAPE output")

    sp = add("density", cmd_density, "k-NN density over a pixel grid")
    sp.add_argument("--workdir", required=True)
    sp.add_argument("--estimator", default="exact")
    sp.add_argument("--compare", help="second source; reports contour-bin agreement")
    sp.add_argument("--resolution", default="200x200")
    sp.add_argument("--k", type=int, default=50)
    sp.add_argument("--csv")
    sp.add_argument("--ppm")

    sp = add("dod", cmd_dod, "distance-based outliers, estimated vs exact")
    sp.add_argument("--workdir", required=True)
    sp.add_argument("--estimator", default="pivot")
    sp.add_argument("--k", type=int, default=50)
    sp.add_argument("--n", type=int, default=100, help="outlier count for the (N,k) variant")
    sp.add_argument("--r", type=float, default=None, help="radius for the (r,k) variant")
    sp.add_argument("--out-dir")

    sp = add("aknn", cmd_aknn, "threshold-seeded k-NN search recall")
    sp.add_argument("--workdir", required=True)
    sp.add_argument("--estimator", default="pivot")
    sp.add_argument("--k", type=int, nargs="+", default=[25, 50])
    sp.add_argument("--queries", type=int, default=1000)

    sp = add("dpc", cmd_dpc, "density-peaks clustering of the reference set")
    sp.add_argument("--workdir", required=True)
    sp.add_argument("--d-cut", type=float, required=True)
    sp.add_argument("--rho-min", type=int, default=50)
    sp.add_argument("--delta-min", type=float, required=True)
    sp.add_argument("--reverse", action="store_true", help="recover d_cut from the noise count")
    sp.add_argument("--estimator", default="exact")
    sp.add_argument("--out-dir")

    sp = add("bench", cmd_bench, "single-query latency")
    sp.add_argument("--workdir", required=True)
    sp.add_argument("--estimator", nargs="+", default=["exact", "pivot"])
    sp.add_argument("--warmup", type=int, default=100)
    sp.add_argument("--iters", type=int, default=1000)
    return p, sub


def main(argv=None):
    parser, sub = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(parser, sub, argv)
        if args.threads is not None:
            import numba

            if args.threads < 1:
                raise ValidationError("--threads must be >= 1")
            numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        args.func(args)
    except KnnDistError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET if exc.exit_code == 4 else exc.exit_code
    except MemoryError:
        print("error: out of memory", file=sys.stderr)
        return EXIT_BUDGET
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
