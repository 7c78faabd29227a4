"""``vmfdino`` command-line entry point.

Every subcommand writes into ``--out``: its CSV/JSON artifacts, a
``summary.json`` and a ``manifest.json``. Only the manifest carries a
timestamp, so repeated runs with the same config and seed give
byte-identical CSV and summary files.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import math
import os
import platform
import sys
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score

from vmfdino import __version__, _accel
from vmfdino import checkpoint as ckpt
from vmfdino.analysis import duplicate_sets, precision_percentile_report, utilization_sweep, void_prototype_check
from vmfdino.config import ConfigError, config_hash, dataset_kwargs, load_config, train_config
from vmfdino.errors import DivergenceError, DomainError
from vmfdino.movmf import (
    MixtureModel,
    em_fit,
    hard_assign,
    random_separated_directions,
    responsibilities,
    sample_mixture,
)
from vmfdino.trainer import (
    ABLATION_COLUMNS,
    evaluate_knn,
    format_float,
    generate_dataset,
    knn_eval,
    run_ablation_grid,
    train,
)
from vmfdino.vmf import log_norm_const_approx, log_norm_const_exact

log = logging.getLogger("vmfdino")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def dump_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        out = []
        for c in columns:
            v = row[c]
            if isinstance(v, (bool, np.bool_)):
                out.append("true" if v else "false")
            elif isinstance(v, (float, np.floating)):
                out.append(format_float(v) if math.isfinite(v) else "")
            else:
                out.append(str(v))
        w.writerow(out)
    return buf.getvalue()


class Outputs:
    def __init__(self, out_dir):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)

    def write(self, name, text):
        path = self.root / name
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        return path


def write_manifest(out: Outputs, command: str, cfg: dict, extra=None):
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "library_version": __version__,
        "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "numba": _accel.USE_NUMBA,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    if extra:
        manifest.update(extra)
    out.write("manifest.json", dump_json(manifest))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_approx_check(cfg: dict, out: Outputs):
    lo, hi, n = cfg["approx_kappa_min"], cfg["approx_kappa_max"], cfg["approx_grid_size"]
    if hi < lo:
        raise ConfigError("approx_kappa_max must be >= approx_kappa_min")
    grid = np.linspace(lo, hi, n) if n > 1 else np.array([lo])
    rows, per_p = [], []
    for p in cfg["approx_p_list"]:
        approx = log_norm_const_approx(p, grid)
        approx = np.atleast_1d(approx)
        exact = np.array([log_norm_const_exact(p, k) for k in grid])
        eps = approx - exact
        rows += [
            dict(p=p, kappa=k, log_c_approx=a, log_c_exact=e, epsilon=d)
            for k, a, e, d in zip(grid, approx, exact, eps)
        ]
        per_p.append(
            dict(
                p=p,
                max_abs_epsilon=float(np.abs(eps).max()),
                max_rel_epsilon=float((np.abs(eps) / np.abs(exact)).max()),
            )
        )
    out.write("approx_check.csv", csv_text(("p", "kappa", "log_c_approx", "log_c_exact", "epsilon"), rows))
    summary = dict(command="approx-check", kappa_min=lo, kappa_max=hi, grid_size=n, per_p=per_p)
    out.write("summary.json", dump_json(summary))
    return summary


def cmd_em_fit(cfg: dict, out: Outputs):
    rng = np.random.default_rng(cfg["seed"])
    k, p = cfg["em_components"], cfg["em_dim"]
    try:
        dirs = random_separated_directions(k, p, cfg["em_max_cos"], rng)
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    truth = MixtureModel.from_arrays(dirs, [cfg["em_kappa"]] * k, np.full(k, 1.0 / k))
    data, labels = sample_mixture(truth, cfg["em_points"], rng)
    res = em_fit(data, k, seed=cfg["seed"], max_iters=cfg["em_max_iters"], tol=cfg["em_tol"], kappa_update=cfg["kappa_update"])
    model = res.model
    pred = hard_assign(responsibilities(data, model))
    cos = model.means @ truth.means.T
    row, col = linear_sum_assignment(-cos)
    ckpt.save(out.root / "model.ckpt.json", ckpt.mixture_document(model, cfg["seed"], cfg, res.n_iter))
    out.write(
        "history.csv",
        csv_text(("iteration", "log_likelihood"), [dict(iteration=i, log_likelihood=v) for i, v in enumerate(res.history)]),
    )
    summary = dict(
        command="em-fit",
        n_points=int(data.shape[0]),
        n_components=k,
        dim=p,
        n_iter=res.n_iter,
        converged=res.converged,
        reinitialized=res.reinitialized,
        log_likelihood=res.history[-1],
        adjusted_rand_index=float(adjusted_rand_score(labels, pred)),
        min_mean_alignment=float(cos[row, col].min()),
        kappas=model.kappas,
        proportions=model.proportions,
    )
    out.write("summary.json", dump_json(summary))
    return summary


def _train_summary(res, ds, cfg):
    m = res.metrics
    rep = duplicate_sets(res.teacher.bank, cfg["dup_threshold"])
    return dict(
        command="train",
        steps=len(m),
        knn_accuracy=evaluate_knn(res, ds),
        final_loss=float(m.column("loss")[-1]) if len(m) else None,
        final_marginal_entropy=float(m.column("marginal_entropy")[-1]) if len(m) else None,
        final_conditional_entropy=float(m.column("conditional_entropy")[-1]) if len(m) else None,
        min_marginal_entropy=float(m.column("marginal_entropy").min()) if len(m) else None,
        collapsed=res.collapsed,
        center_norm=float(np.linalg.norm(res.center.c)),
        unique_count=rep.unique_count,
        largest_group_size=rep.largest_group_size,
    )


def cmd_train(cfg: dict, out: Outputs):
    tc = train_config(cfg)
    ds = generate_dataset(**dataset_kwargs(cfg))
    res = train(tc, ds)
    ckpt.save(
        out.root / "checkpoint.ckpt.json",
        ckpt.encoder_document(res.teacher, res.student, res.center, tc.steps, cfg["seed"], cfg),
    )
    out.write("metrics.csv", res.metrics.to_csv())
    summary = _train_summary(res, ds, cfg)
    out.write("summary.json", dump_json(summary))
    return summary


def cmd_ablate(cfg: dict, out: Outputs):
    tc = train_config(cfg)
    ds = generate_dataset(**dataset_kwargs(cfg))
    rows = run_ablation_grid(tc, ds, cfg["dup_threshold"])
    out.write("table.csv", csv_text(ABLATION_COLUMNS, rows))
    best = max(r["knn_accuracy"] for r in rows)
    summary = dict(
        command="ablate",
        rows=rows,
        best_knn_accuracy=best,
        best_cells=[r["cell"] for r in rows if r["knn_accuracy"] == best],
    )
    out.write("summary.json", dump_json(summary))
    return summary


def _load_checkpoint_for(cfg, path):
    if path is None:
        raise ConfigError("this command needs --checkpoint")
    teacher, student, center, doc = ckpt.load_encoder(path)
    if teacher.d_in != cfg["d_in"]:
        raise ConfigError(f"checkpoint expects d_in={teacher.d_in}, config has d_in={cfg['d_in']}")
    return teacher, student, center, doc


def cmd_analyze(cfg: dict, out: Outputs, checkpoint_path=None):
    teacher, _, _, doc = _load_checkpoint_for(cfg, checkpoint_path)
    bank = teacher.bank
    ds = generate_dataset(**dataset_kwargs(cfg))
    reps = teacher.represent(ds.points)
    mode = doc["config"].get("mode", "dino") if isinstance(doc.get("config"), dict) else "dino"
    tau = cfg["tau_s"]

    sweep = utilization_sweep(bank, cfg["thresholds"])
    out.write("utilization.csv", csv_text(("threshold", "unique_count", "largest_group_size"), sweep))

    rep = duplicate_sets(bank, cfg["dup_threshold"])
    void = void_prototype_check(bank, reps, rep, tau=tau, mode=mode)
    out.write(
        "groups.csv",
        csv_text(
            ("prototype", "group", "magnitude"),
            [dict(prototype=i, group=int(g), magnitude=m) for i, (g, m) in enumerate(zip(rep.labels, bank.magnitudes))],
        ),
    )
    sizes = rep.group_sizes
    out.write(
        "void.csv",
        csv_text(
            ("group", "seed", "size", "assignments", "is_void", "alignment"),
            [
                dict(group=g, seed=int(rep.seeds[g]), size=int(sizes[g]), assignments=int(void.group_counts[g]),
                     is_void=bool(void.is_void[g]), alignment=float(void.alignment[g]))
                for g in range(rep.unique_count)
            ],
        ),
    )

    precision = None
    precision_note = None
    try:
        precision = precision_percentile_report(bank, reps, ds.labels, cfg["percentile_edges"], tau=tau, mode=mode, k=cfg["knn_k"])
        cols = ("lower_percentile", "upper_percentile", "lower_magnitude", "upper_magnitude", "n_points", "knn_accuracy")
        out.write("precision.csv", csv_text(cols, precision))
    except DomainError as exc:
        precision_note = str(exc)

    big = rep.largest_group
    summary = dict(
        command="analyze",
        threshold=rep.threshold,
        unique_count=rep.unique_count,
        largest_group_size=rep.largest_group_size,
        largest_group_void=bool(void.is_void[big]),
        largest_group_alignment=float(void.alignment[big]),
        void_groups=int(void.is_void.sum()),
        alignment_defined=void.alignment_defined,
        data_mean_norm=void.data_mean_norm,
        sweep=sweep,
        precision=precision,
        precision_skipped=precision_note,
    )
    out.write("summary.json", dump_json(summary))
    return summary


def cmd_knn(cfg: dict, out: Outputs, checkpoint_path=None):
    teacher, _, _, _ = _load_checkpoint_for(cfg, checkpoint_path)
    ds = generate_dataset(**dataset_kwargs(cfg))
    tx, ty, vx, vy = ds.split(cfg["test_fraction"])
    acc = knn_eval(teacher.represent(tx), ty, teacher.represent(vx), vy, cfg["knn_k"])
    summary = dict(command="knn", k=cfg["knn_k"], n_train=int(len(ty)), n_test=int(len(vy)), knn_accuracy=acc)
    out.write("summary.json", dump_json(summary))
    return summary


COMMANDS = {
    "approx-check": cmd_approx_check,
    "em-fit": cmd_em_fit,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
    "knn": cmd_knn,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="vmfdino", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key = value config file (defaults if omitted)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if name in ("analyze", "knn"):
            sp.add_argument("--checkpoint", help="encoder checkpoint written by 'train'")
        if name == "approx-check":
            sp.add_argument("--p-list", help="comma-separated even dimensions")
            sp.add_argument("--kappa-min", type=float)
            sp.add_argument("--kappa-max", type=float)
            sp.add_argument("--grid-size", type=int)
    return parser


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.command == "approx-check":
        if args.p_list:
            try:
                cfg["approx_p_list"] = [int(x) for x in args.p_list.split(",")]
            except ValueError:
                raise ConfigError(f"--p-list: cannot parse {args.p_list!r}") from None
        for flag, key in (("kappa_min", "approx_kappa_min"), ("kappa_max", "approx_kappa_max"), ("grid_size", "approx_grid_size")):
            if getattr(args, flag) is not None:
                cfg[key] = getattr(args, flag)
    from vmfdino.config import validate

    validate(cfg)
    return cfg


def main(argv=None) -> int:
    level = os.environ.get("VMFDINO_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        out = Outputs(args.out)
        fn = COMMANDS[args.command]
        if args.command in ("analyze", "knn"):
            fn(cfg, out, args.checkpoint)
        else:
            fn(cfg, out)
        write_manifest(out, args.command, cfg)
    except ConfigError as exc:
        print(f"vmfdino: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"vmfdino: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ckpt.CheckpointError) as exc:
        where = getattr(exc, "filename", None)
        print(f"vmfdino: I/O error{f' at {where}' if where else ''}: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
