"""Command-line interface.

Subcommands: train, extract, eval, synth, gradcheck.  Exit codes are
stable so scripts can branch on them: 0 success, 2 config error, 3 data
error, 4 training divergence, 5 protocol error, 6 gradient-check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_PROTOCOL = 5
EXIT_GRADCHECK = 6

log = logging.getLogger("dirfeat")


def cmd_train(args) -> int:
    from . import modelio, report, training

    try:
        run = modelio.parse_config(args.config)
        net_config = run.network_config()
        train_config = run.train_config()
    except modelio.ConfigError as err:
        log.error("config error: %s", err)
        return EXIT_CONFIG
    try:
        records = modelio.read_manifest(run.manifest)
        train_records = [r for r in records if r.role == "train"]
        if not train_records:
            raise modelio.DataError(f"{run.manifest}: no records with role 'train'")
        base = Path(run.manifest).parent
        images, labels, class_ids = [], [], sorted({r.vehicle_id for r in train_records})
        class_index = {vid: i for i, vid in enumerate(class_ids)}
        for r in train_records:
            images.append(modelio.load_image(base / r.image_path, net_config.input_size)[0])
            labels.append(class_index[r.vehicle_id])
        data = training.TrainingSet(
            images=np.stack(images), labels=np.asarray(labels), class_ids=class_ids
        )
    except modelio.DataError as err:
        log.error("data error: %s", err)
        return EXIT_DATA
    t0 = time.perf_counter()
    try:
        model, traces = training.train_model(data, net_config, train_config)
    except training.DivergenceError as err:
        log.error("training diverged: %s", err)
        return EXIT_DIVERGED
    elapsed = time.perf_counter() - t0
    final_losses = {b: rows[-1][2] for b, rows in traces.items()}
    meta = {
        "config_hash": run.config_hash,
        "steps": train_config.steps,
        "final_loss": final_losses,
    }
    modelio.save_model(model, run.model_out, meta=meta)
    if run.trace_out:
        report.write_trace_csv(run.trace_out, traces)
        report.plot_trace(str(Path(run.trace_out).with_suffix(".png")), traces)
    log.info("trained %d branches in %.1fs; final losses %s", len(traces), elapsed, final_losses)
    print(f"model written to {run.model_out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    from . import modelio

    try:
        model, _ = modelio.load_model(args.model)
    except (OSError, modelio.ModelFormatError) as err:
        log.error("cannot load model: %s", err)
        return EXIT_DATA
    try:
        records = modelio.read_manifest(args.manifest)
    except modelio.DataError as err:
        log.error("data error: %s", err)
        return EXIT_DATA
    base = Path(args.manifest).parent
    size = model.config.input_size
    named, failures = [], []
    batch_ids, batch_imgs = [], []

    def flush():
        if not batch_imgs:
            return
        desc = model.extract(np.concatenate(batch_imgs, axis=0))
        named.extend(zip(batch_ids, desc))
        batch_ids.clear()
        batch_imgs.clear()

    for r in records:
        try:
            img = modelio.load_image(base / r.image_path, size)
        except modelio.DataError as err:
            failures.append(r.sample_id)
            log.warning("skipping %s: %s", r.sample_id, err)
            continue
        batch_ids.append(r.sample_id)
        batch_imgs.append(img)
        if len(batch_imgs) >= 32:
            flush()
    flush()
    modelio.write_descriptors(args.out, named)
    print(f"wrote {len(named)} descriptors to {args.out}; {len(failures)} failures")
    if failures:
        print("failed sample_ids: " + ", ".join(failures))
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import evaluate, modelio, report

    try:
        records = modelio.read_manifest(args.manifest)
        features = modelio.read_descriptors(args.features)
    except modelio.DataError as err:
        log.error("data error: %s", err)
        return EXIT_DATA
    queries = [r for r in records if r.role == "query"]
    gallery = [r for r in records if r.role == "gallery"]
    missing = [r.sample_id for r in queries + gallery if r.sample_id not in features]
    if missing:
        log.error("missing descriptors for: %s", ", ".join(missing))
        return EXIT_DATA
    q = np.stack([features[r.sample_id] for r in queries])
    g = np.stack([features[r.sample_id] for r in gallery])
    try:
        result = evaluate.evaluate(queries, gallery, q, g, protocol=args.protocol)
    except evaluate.EvalError as err:
        log.error("protocol error: %s", err)
        return EXIT_PROTOCOL
    print(report.format_report(result))
    print(result.summary())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write_cmc_csv(out / "cmc.csv", result)
        report.plot_cmc(out / "cmc.png", result)
        log.info("wrote %s and %s", out / "cmc.csv", out / "cmc.png")
    return EXIT_OK


def cmd_synth(args) -> int:
    from . import modelio, synth

    if args.ids < 2:
        log.error("config error: need at least 2 identities")
        return EXIT_CONFIG
    records, images = synth.generate(args.ids, args.per_id, args.size, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r in records:
        modelio.save_image(out / r.image_path, images[r.sample_id])
    modelio.write_manifest(out / "manifest.csv", records)
    print(f"wrote {len(records)} images and manifest.csv to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import checksuite

    results = checksuite.run_suite(network_tolerance=args.tolerance, seed=args.seed)
    bad = 0
    for name, rep in results:
        print(rep.row(name))
        bad += not rep.ok
    if bad:
        print(f"{bad} check(s) exceeded tolerance")
        return EXIT_GRADCHECK
    print("all gradient checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dirfeat", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("train", help="train the branch networks from a config file")
    sp.add_argument("--config", required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("extract", help="extract descriptors for every manifest record")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_extract)

    sp = sub.add_parser("eval", help="rank gallery descriptors and report CMC/mAP")
    sp.add_argument("--features", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--protocol", choices=("veri", "plain"), default="plain")
    sp.add_argument("--out", help="directory for cmc.csv and cmc.png")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    sp.add_argument("--ids", type=int, required=True)
    sp.add_argument("--per-id", type=int, required=True)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("gradcheck", help="finite-difference checks over all layers")
    sp.add_argument("--profile", choices=("toy",), default="toy")
    sp.add_argument("--tolerance", type=float, default=1e-5,
                    help="tolerance for the full-network objective check")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
