"""Command-line entry point.

Subcommands: analyze (cost report), anchors (k-means fitting), infer
(single-image pipeline), eval (metric report), oracle-check (self-test of
the numeric kernels), configs (bundled variant listing). Exit codes: 0
success, 1 validation or usage error, 2 internal oracle failure.

Everything is driven by flags; there are no environment variables, and
identical invocations with identical seeds print byte-identical output.
JSON output is sorted and carries no timestamps so it can be golden-file
tested.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import meter
from .anchors import assign_to_scales, fit_anchors
from .blocks import BLOCKS
from .costs import (CONVENTION, analyze, closed_form_cross,
                    closed_form_standard)
from .data import letterbox, load_coco, load_image, unletterbox_box
from .errors import ConfigError, YoloTlaError
from .graph import build_model, bundled_config_names, find_config, parse_config
from .metrics import ap_from_ranking, evaluate, exact_envelope_ap
from .postprocess import (DEFAULT_CONF_THRESHOLD, DEFAULT_IOU_THRESHOLD,
                          Detection, decode, nms, to_coco_results)
from .tensor import ConvSpec, Tensor, conv2d, conv2d_naive

NON_REPRODUCIBILITY_NOTE = (
    "Accuracy metrics (precision, recall, mAP) of these architectures "
    "depend on trained weights. This toolkit ships no trained weights, so "
    "those figures are not reproducible here and are deliberately excluded; "
    "seeded random weights exist only to exercise the pipeline. Parameter "
    "counts and GFLOPs are the reproducible reference quantities instead.")

FORMULA_NOTE = (
    "Single-layer estimates only: at k=3, W=8, C=3 the factored pair "
    "estimates 2160 FLOPs against the square layer's 1728 even though its "
    "parameter estimate is 1.5x smaller. That inversion is preserved as "
    "published. Whole-model totals come from the first-principles counter, "
    "never from these formulas.")

REFERENCE_FORMULA_KS = (1, 3, 5, 7)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _json_print(doc) -> None:
    print(json.dumps(doc, sort_keys=True, indent=2))


# -- analyze -----------------------------------------------------------------

def _formula_rows():
    rows = []
    for k in REFERENCE_FORMULA_KS:
        sf, sp = closed_form_standard(8, k, 3, 1, k // 2)
        cf, cp = closed_form_cross(8, k, 3, 1, k // 2)
        rows.append({"k": k,
                     "standard": {"flops": sf, "params": sp},
                     "cross": {"flops": cf, "params": cp},
                     "param_ratio": sp / cp})
    return rows


def _render_report_text(rep) -> list[str]:
    lines = [f"model: {rep.name}   input: "
             f"{rep.input_shape[2]}x{rep.input_shape[3]}"]
    lines.append(f"{'idx':>4} {'kind':<14} {'output':>20} {'params':>12} "
                 f"{'MACs':>14} {'FLOPs':>14}")
    rows = list(rep.layers) + ([rep.head] if rep.head else [])
    for r in rows:
        shape = "x".join(str(v) for v in r.out_shape)
        lines.append(f"{r.index:>4} {r.kind:<14} {shape:>20} "
                     f"{r.params:>12,} {r.macs:>14,} {r.flops:>14,}")
    lines.append(f"totals: {rep.total_params:,} params "
                 f"({rep.mparams:.3f}M), {rep.total_macs:,} MACs, "
                 f"{rep.gflops:.3f} GFLOPs")
    lines.append(f"convention: {rep.convention}")
    return lines


def cmd_analyze(args) -> int:
    model = build_model(find_config(args.config))
    rep = analyze(model, (args.input_size, args.input_size))
    doc = {"report": rep.to_dict()}
    lines = _render_report_text(rep)
    if args.diff:
        other = build_model(find_config(args.diff))
        orep = analyze(other, (args.input_size, args.input_size))
        doc["diff"] = {
            "name": orep.name,
            "total_params": orep.total_params,
            "gflops": orep.gflops,
            "param_delta": rep.total_params - orep.total_params,
            "gflops_delta": rep.gflops - orep.gflops,
        }
        lines.append(
            f"diff vs {orep.name}: {orep.total_params:,} params "
            f"({orep.gflops:.3f} GFLOPs); delta "
            f"{rep.total_params - orep.total_params:+,} params, "
            f"{rep.gflops - orep.gflops:+.3f} GFLOPs")
    if args.formulas:
        doc["formulas"] = {"rows": _formula_rows(), "note": FORMULA_NOTE}
        lines.append("single-layer closed-form estimates (W=8, C=3, s=1):")
        for row in doc["formulas"]["rows"]:
            lines.append(
                f"  k={row['k']}: standard {row['standard']['flops']:.0f} "
                f"FLOPs / {row['standard']['params']} params; cross "
                f"{row['cross']['flops']:.0f} FLOPs / "
                f"{row['cross']['params']} params; param ratio "
                f"{row['param_ratio']:.2f}")
        lines.append(FORMULA_NOTE)
    if args.json:
        _json_print(doc)
    else:
        print("\n".join(lines))
    return 0


# -- anchors -----------------------------------------------------------------

def cmd_anchors(args) -> int:
    ds = load_coco(args.dataset)
    boxes = [(ann.bbox[2], ann.bbox[3]) for ann in ds.annotations]
    anchors = fit_anchors(boxes, k=args.k, seed=args.seed)
    doc = {"k": args.k, "seed": args.seed,
           "anchors": [[round(w, 2), round(h, 2)] for w, h in anchors]}
    lines = [f"fitted {args.k} anchors over {len(boxes)} boxes (seed "
             f"{args.seed}):"]
    lines.append("  " + " ".join(f"({w:.1f},{h:.1f})" for w, h in anchors))
    anchor_set = None
    if args.scales:
        sizes = [int(s) for s in args.scales.split(",") if s]
        anchor_set = assign_to_scales(anchors, sizes)
        doc["scales"] = [
            {"map": size, "anchors": [[w, h] for w, h in triple]}
            for size, triple in anchor_set.scales]
        for size, triple in anchor_set.scales:
            lines.append(f"  map {size:>4}: " + " ".join(
                f"({w:.1f},{h:.1f})" for w, h in triple))
    if args.patch_config:
        if anchor_set is None:
            raise ConfigError("--patch-config requires --scales")
        if not args.out:
            raise ConfigError("--patch-config requires --out")
        src = find_config(args.patch_config)
        cfg_doc = json.loads(src.read_text())
        want = len(cfg_doc.get("detect_from", []))
        if want != len(anchor_set.scales):
            raise ConfigError(
                f"config {cfg_doc.get('name')} detects on {want} scales, "
                f"fitted {len(anchor_set.scales)}")
        cfg_doc["anchors"] = [
            [[round(w, 2), round(h, 2)] for w, h in triple]
            for _, triple in anchor_set.scales]
        parse_config(cfg_doc)   # re-validate before writing
        with open(args.out, "w") as fh:
            json.dump(cfg_doc, fh, indent=2)
            fh.write("\n")
        lines.append(f"wrote patched config to {args.out}")
        doc["patched"] = str(args.out)
    if args.json:
        _json_print(doc)
    else:
        print("\n".join(lines))
    return 0


# -- infer -------------------------------------------------------------------

def cmd_infer(args) -> int:
    model = build_model(find_config(args.config), seed=args.seed)
    if args.weights:
        model.load_weight_file(args.weights)
    img = load_image(args.image)
    orig_hw = (img.h, img.w)
    boxed, scale, pads = letterbox(img, target=args.input_size,
                                   stretch=args.stretch)
    maps = model.forward(boxed)
    dets = decode(maps, model.anchors, model.strides,
                  conf_threshold=args.conf)
    dets = nms(dets, iou_threshold=args.iou)
    restored = [Detection(box=unletterbox_box(d.box, scale, pads, orig_hw),
                          class_id=d.class_id, confidence=d.confidence)
                for d in dets]
    rows = to_coco_results(restored, image_id=args.image_id)
    rows = [{"image_id": r["image_id"], "category_id": r["category_id"],
             "bbox": [round(v, 3) for v in r["bbox"]],
             "score": round(r["score"], 6)} for r in rows]
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, sort_keys=True, indent=2)
            fh.write("\n")
    if args.json:
        _json_print(rows)
        return 0
    lines = [f"{len(restored)} detection(s) from {args.image} "
             f"(conf>={args.conf}, nms iou {args.iou})"]
    if not args.weights:
        lines.append(f"weights: random init, seed {args.seed}; detection "
                     f"quality is meaningless, this mode exercises the "
                     f"pipeline only")
    for d in restored:
        x1, y1, x2, y2 = d.box
        lines.append(f"  class {d.class_id:>3} conf {d.confidence:.4f} "
                     f"box ({x1:.1f}, {y1:.1f}, {x2:.1f}, {y2:.1f})")
    if args.out:
        lines.append(f"wrote results to {args.out}")
    print("\n".join(lines))
    return 0


# -- eval --------------------------------------------------------------------

def _load_results(path, ds):
    try:
        rows = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read results from {path}: {e}") from e
    if not isinstance(rows, list):
        raise ConfigError(f"{path}: results root must be a list")
    dets: dict[int, list[Detection]] = {}
    for i, row in enumerate(rows):
        try:
            img = int(row["image_id"])
            cat = int(row["category_id"])
            x, y, w, h = (float(v) for v in row["bbox"])
            score = float(row["score"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"{path}: results[{i}] is malformed: {e}") from e
        dets.setdefault(img, []).append(Detection(
            box=(x, y, x + w, y + h), class_id=ds.class_index(cat),
            confidence=score))
    return dets


def cmd_eval(args) -> int:
    ds = load_coco(args.gt)
    dets = _load_results(args.results, ds)
    rep = evaluate(ds.gt_by_image(), dets)
    if args.pr_csv:
        with open(args.pr_csv, "w") as fh:
            fh.write("class,recall,precision\n")
            for cls in rep.classes:
                for r, p in rep.pr_curves.get(cls, []):
                    fh.write(f"{cls},{r:.6f},{p:.6f}\n")
    if args.json:
        _json_print(rep.to_dict())
        return 0
    names = {ds.class_index(cid): name for cid, name in ds.categories}
    lines = [f"{'class':<16} {'P':>7} {'R':>7} {'AP@0.5':>8} "
             f"{'AP@0.5:0.95':>12}"]
    for cls in rep.classes:
        r = rep.per_class[cls]
        lines.append(f"{names.get(cls, str(cls)):<16} {r.precision:>7.4f} "
                     f"{r.recall:>7.4f} {r.ap50:>8.4f} {r.ap_range:>12.4f}")
    lines.append(f"macro: P {rep.precision:.4f}  R {rep.recall:.4f}  "
                 f"F1 {rep.f1:.4f}")
    lines.append(f"mAP@0.5 {rep.map50:.4f}  mAP@0.5:0.95 {rep.map_range:.4f}"
                 f"  TN {rep.tn}")
    if args.pr_csv:
        lines.append(f"wrote P-R curve samples to {args.pr_csv}")
    print("\n".join(lines))
    return 0


# -- oracle-check ------------------------------------------------------------

def _conv_oracle(cases: int, rng) -> tuple[int, int]:
    passed = 0
    for _ in range(cases):
        groups = int(rng.choice([1, 1, 1, 2]))
        cin = groups * int(rng.integers(1, 4))
        cout = groups * int(rng.integers(1, 4))
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h = int(rng.integers(kh, 8))   # h >= kh keeps the output non-empty
        w = int(rng.integers(kw, 8))
        spec = ConvSpec(cin, cout, kh, kw,
                        stride_h=int(rng.integers(1, 3)),
                        stride_w=int(rng.integers(1, 3)),
                        pad_h=int(rng.integers(0, 2)),
                        pad_w=int(rng.integers(0, 2)),
                        groups=groups, has_bias=bool(rng.integers(0, 2)))
        x = Tensor(rng.uniform(-1, 1, (1, cin, h, w)).astype(np.float32))
        wgt = Tensor(rng.uniform(-1, 1, spec.weight_shape()).astype(np.float32))
        bias = (rng.uniform(-1, 1, cout).astype(np.float32)
                if spec.has_bias else None)
        fast = conv2d(x, spec, wgt, bias)
        slow = conv2d_naive(x, spec, wgt, bias)
        if np.allclose(fast.data, slow.data, rtol=1e-5, atol=1e-6):
            passed += 1
    return passed, cases


_PARITY_CASES = [
    ("ConvBNAct", [6], {"out": 8, "k": 3, "s": 2}, (1, 6, 12, 12)),
    ("Bottleneck", [8], {"out": 8}, (1, 8, 9, 9)),
    ("C3", [8], {"out": 8, "n": 2}, (1, 8, 8, 8)),
    ("CrossConv", [8], {"out": 8, "shortcut": True}, (1, 8, 8, 8)),
    ("C3CrossConv", [8], {"out": 8, "n": 2}, (1, 8, 8, 8)),
    ("GhostConv", [8], {"out": 12}, (1, 8, 8, 8)),
    ("GhostBottleneck", [12], {"out": 12}, (1, 12, 8, 8)),
    ("GhostBottleneck", [12], {"out": 16, "s": 2}, (1, 12, 8, 8)),
    ("C3Ghost", [16], {"out": 16, "n": 1}, (1, 16, 8, 8)),
    ("GAM", [16], {}, (1, 16, 8, 8)),
    ("SPPF", [8], {"out": 8}, (1, 8, 8, 8)),
    ("Upsample", [4], {}, (1, 4, 6, 6)),
    ("Concat", [4, 4], {}, (1, 4, 6, 6)),
]


def _cost_parity_oracle(rng) -> tuple[int, int]:
    passed = 0
    for kind, cins, kwargs, shape in _PARITY_CASES:
        block = BLOCKS[kind](cins, dict(kwargs))
        weights = {}
        for path, shp in block.param_specs("b"):
            weights[path] = rng.uniform(-0.5, 0.5, shp).astype(np.float32)
        block.load(lambda p: weights[p], "b")
        if kind == "Concat":
            ins = [Tensor(rng.uniform(-1, 1, shape).astype(np.float32))
                   for _ in cins]
            shapes = [shape, shape]
        else:
            ins = [Tensor(rng.uniform(-1, 1, shape).astype(np.float32))]
            shapes = [shape]
        with meter.CostMeter() as m:
            block.forward(ins)
        if (m.macs, m.flops) == block.cost(shapes):
            passed += 1
    return passed, len(_PARITY_CASES)


def _ap_oracle(cases: int, rng) -> tuple[int, int]:
    passed = 0
    for _ in range(cases):
        n_gt = int(rng.integers(1, 8))
        flags = (rng.uniform(size=int(rng.integers(1, 20))) < 0.5)
        while flags.sum() > n_gt:
            flags[np.argmax(flags)] = False
        ap, _ = ap_from_ranking(flags.tolist(), n_gt)
        if abs(ap - exact_envelope_ap(flags.tolist(), n_gt)) < 0.01:
            passed += 1
    return passed, cases


def cmd_oracle_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    conv_ok, conv_n = _conv_oracle(args.cases, rng)
    parity_ok, parity_n = _cost_parity_oracle(rng)
    ap_ok, ap_n = _ap_oracle(args.cases, rng)
    checks = [("conv oracle", conv_ok, conv_n),
              ("cost parity", parity_ok, parity_n),
              ("ap oracle", ap_ok, ap_n)]
    failed = any(ok != n for _, ok, n in checks)
    if args.json:
        _json_print({"checks": [
            {"name": name, "passed": ok, "total": n}
            for name, ok, n in checks],
            "ok": not failed})
    else:
        for name, ok, n in checks:
            print(f"{name}: {ok}/{n}")
        print("result:", "FAIL" if failed else "ok")
    return 2 if failed else 0


# -- configs -----------------------------------------------------------------

def cmd_configs(args) -> int:
    rows = []
    for name in bundled_config_names():
        model = build_model(find_config(name))
        rep = analyze(model)
        rows.append({"name": name, "scales": len(model.strides),
                     "params": rep.total_params,
                     "mparams": round(rep.mparams, 3),
                     "gflops": round(rep.gflops, 3)})
    if args.json:
        _json_print({"configs": rows, "note": NON_REPRODUCIBILITY_NOTE,
                     "convention": CONVENTION})
        return 0
    lines = [f"{'config':<14} {'scales':>6} {'params':>12} {'GFLOPs@640':>11}"]
    for r in rows:
        lines.append(f"{r['name']:<14} {r['scales']:>6} "
                     f"{r['params']:>12,} {r['gflops']:>11.3f}")
    lines.append(f"convention: {CONVENTION}")
    lines.append(NON_REPRODUCIBILITY_NOTE)
    print("\n".join(lines))
    return 0


# -- wiring ------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="yolotla", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True,
                           parser_class=_Parser)

    a = sub.add_parser("analyze", help="symbolic parameter/FLOP report")
    a.add_argument("--config", required=True,
                   help="bundled config name or path to a .cfg file")
    a.add_argument("--input-size", type=int, default=640,
                   help="square input side (default 640)")
    a.add_argument("--json", action="store_true")
    a.add_argument("--formulas", action="store_true",
                   help="also print the closed-form single-layer estimates")
    a.add_argument("--diff", metavar="CONFIG",
                   help="compare totals against a second config")
    a.set_defaults(fn=cmd_analyze)

    an = sub.add_parser("anchors", help="fit anchors with k-means")
    an.add_argument("--dataset", required=True,
                    help="COCO instances JSON with the boxes to cluster")
    an.add_argument("--k", type=int, default=12)
    an.add_argument("--seed", type=int, default=0)
    an.add_argument("--scales",
                    help="comma-separated map sides, e.g. 160,80,40,20")
    an.add_argument("--patch-config", metavar="CONFIG",
                    help="config whose anchors to replace (needs --scales "
                         "and --out)")
    an.add_argument("--out", help="where to write the patched config")
    an.add_argument("--json", action="store_true")
    an.set_defaults(fn=cmd_anchors)

    inf = sub.add_parser("infer", help="run the pipeline on one image")
    inf.add_argument("--config", required=True)
    inf.add_argument("--image", required=True, help=".ppm (P6) or .tns")
    inf.add_argument("--weights", help="weight file; omitted = seeded init")
    inf.add_argument("--seed", type=int, default=0)
    inf.add_argument("--conf", type=float, default=DEFAULT_CONF_THRESHOLD)
    inf.add_argument("--iou", type=float, default=DEFAULT_IOU_THRESHOLD)
    inf.add_argument("--input-size", type=int, default=640)
    inf.add_argument("--stretch", action="store_true",
                     help="plain resize instead of letterbox")
    inf.add_argument("--image-id", type=int, default=0)
    inf.add_argument("--out", help="write COCO-style results JSON here")
    inf.add_argument("--json", action="store_true")
    inf.set_defaults(fn=cmd_infer)

    ev = sub.add_parser("eval", help="score results against ground truth")
    ev.add_argument("--gt", required=True, help="COCO instances JSON")
    ev.add_argument("--results", required=True, help="COCO results JSON")
    ev.add_argument("--pr-csv", help="write P-R curve samples as CSV")
    ev.add_argument("--json", action="store_true")
    ev.set_defaults(fn=cmd_eval)

    oc = sub.add_parser("oracle-check", help="self-test the numeric kernels")
    oc.add_argument("--cases", type=int, default=100)
    oc.add_argument("--seed", type=int, default=0)
    oc.add_argument("--json", action="store_true")
    oc.set_defaults(fn=cmd_oracle_check)

    cf = sub.add_parser("configs", help="list bundled variants and costs")
    cf.add_argument("--json", action="store_true")
    cf.set_defaults(fn=cmd_configs)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except YoloTlaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
