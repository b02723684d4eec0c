"""Shared output layer for the command line: JSON documents and plain-text tables.

Every command builds one document ``{"command", "config", "result"}``.
``--format json`` dumps it with sorted keys so two runs can be diffed;
``--format table`` prints the resolved config followed by human tables.
"""
import json
import sys

# Published module costs at 1x3x256x256 (params in millions, GFLOPs as MACs/1e9).
REFERENCE = {
    "backbone": {"params_m": 0.9326, "gflops": 3.4956},
    "fpn.dense": {"params_m": 0.1590, "gflops": 2.3348},
    "fpn.diff": {"params_m": 0.2299, "gflops": 1.2464},
}


def deviation(value, target):
    return 100.0 * (value - target) / target


def table(headers, rows, aligns=None):
    cells = [[str(h) for h in headers]] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    aligns = aligns or ["<"] + [">"] * (len(headers) - 1)
    lines = []
    for k, r in enumerate(cells):
        lines.append("  ".join(f"{c:{a}{w}}" for c, a, w in zip(r, aligns, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def cost_summary(report, variant, convention="mac"):
    """Per-module rows plus the total, with deviations from the reference where one exists.

    Every row carries both conventions (``gmacs`` and ``gflops_2mac``);
    ``gflops`` is the selected one. References are MAC counts, so the
    deviation is always taken against ``gmacs``.
    """
    scale = 2 if convention == "2mac" else 1
    mods = report.modules(1)
    rows = {}

    def row_for(m):
        return {"params": m.params, "macs": m.macs, "gmacs": m.macs / 1e9, "gflops_2mac": 2 * m.macs / 1e9,
                "gflops": scale * m.macs / 1e9, "buffers": m.buffers, "elementwise": m.elementwise}

    for key in ("backbone", "fpn", "head"):
        if key not in mods:
            continue
        m = mods[key]
        row = row_for(m)
        ref = REFERENCE.get(key if key != "fpn" else f"fpn.{variant}")
        if ref is not None:
            row["reference_params_m"] = ref["params_m"]
            row["reference_gflops"] = ref["gflops"]
            row["params_deviation_pct"] = deviation(m.params / 1e6, ref["params_m"])
            row["gflops_deviation_pct"] = deviation(row["gmacs"], ref["gflops"])
        rows[key] = row
    rows["total"] = row_for(report)
    return rows


def cost_table(summary):
    out = []
    for name, r in summary.items():
        dev_p = f"{r['params_deviation_pct']:+.1f}%" if "params_deviation_pct" in r else ""
        dev_g = f"{r['gflops_deviation_pct']:+.1f}%" if "gflops_deviation_pct" in r else ""
        ref_p = f"{r['reference_params_m']:.4f}" if "reference_params_m" in r else ""
        ref_g = f"{r['reference_gflops']:.4f}" if "reference_gflops" in r else ""
        out.append([name, f"{r['params'] / 1e6:.4f}", ref_p, dev_p, f"{r['gmacs']:.4f}", ref_g, dev_g,
                    f"{r['gflops_2mac']:.4f}"])
    return table(["module", "params(M)", "ref(M)", "dev", "GMACs", "ref", "dev", "2xMAC GFLOPs"], out)


def compare_table(dense, diff):
    rows = []
    for key in ("fpn", "total"):
        a, b = dense[key], diff[key]
        rows.append([key, f"{a['params'] / 1e6:.4f}", f"{b['params'] / 1e6:.4f}",
                     f"{(b['params'] - a['params']) / 1e6:+.4f}",
                     f"{a['gflops']:.4f}", f"{b['gflops']:.4f}", f"{b['gflops'] - a['gflops']:+.4f}"])
    return table(["module", "dense(M)", "diff(M)", "delta", "dense GF", "diff GF", "delta"], rows)


def metrics_table(m):
    rows = [[k.upper(), f"{getattr(m, k):.2f}"] for k in ("p", "r", "f1", "oa")]
    text = table(["metric", "%"], rows)
    if m.degenerate:
        text += "\nnote: " + ", ".join(m.degenerate)
    return text


def efficiency_table(report):
    rows = [[r.rank, r.name, f"{r.f1:.2f}", f"{r.params:.4f}", f"{r.gflops:.4f}",
             f"{r.f1_p:.1f}", f"{r.f1_g:.1f}", f"{r.f1_eff:.1f}"] for r in report.rows]
    return table(["#", "model", "F1", "params(M)", "GFLOPs", "F1-P", "F1-G", "F1-Eff"], rows,
                 [">", "<"] + [">"] * 6)


def config_block(config):
    return "\n".join(f"# {k} = {json.dumps(v)}" for k, v in config.items())


def emit(command, config, result, text, fmt="table", stream=None):
    stream = stream or sys.stdout
    if fmt == "json":
        doc = {"command": command, "config": config, "result": result}
        stream.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    else:
        stream.write(config_block(config) + "\n" + text.rstrip() + "\n")


def dump_json(path, command, config, result):
    with open(path, "w") as fh:
        json.dump({"command": command, "config": config, "result": result}, fh, indent=2, sort_keys=True)
        fh.write("\n")
