"""Timeline CSV/JSON and dependency-free SVG line charts."""

import csv
import json
import os
from xml.sax.saxutils import escape

BASE_COLUMNS = ("epoch", "train_err", "acc", "asr", "nc1", "nc2_norm_M", "nc2_norm_W",
                "nc2_angle_M", "nc2_angle_W", "nc3", "nc4")
PLOTTED = BASE_COLUMNS[1:]

WIDTH, HEIGHT = 800, 480
LEFT, RIGHT, TOP, BOTTOM = 80, 30, 40, 60


def csv_header(K):
    return list(BASE_COLUMNS) + [f"w_norm_{k}" for k in range(K)]


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, int) and not isinstance(value, bool):
        return str(value)
    return repr(float(value))


def timeline_records(timeline):
    records = []
    for row in timeline.rows:
        r = row.report
        rec = {"epoch": row.epoch, "train_err": row.train_error, "acc": row.test_acc,
               "asr": row.asr, "nc1": r.nc1, "nc2_norm_M": r.nc2_norm_M,
               "nc2_norm_W": r.nc2_norm_W, "nc2_angle_M": r.nc2_angle_M,
               "nc2_angle_W": r.nc2_angle_W, "nc3": r.nc3, "nc4": r.nc4}
        for k, v in enumerate(r.per_class_row_norms_W):
            rec[f"w_norm_{k}"] = v
        records.append(rec)
    return records


def write_timeline_csv(timeline, path):
    if not timeline.rows:
        raise ValueError("timeline is empty")
    K = len(timeline.rows[0].report.per_class_row_norms_W)
    header = csv_header(K)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for rec in timeline_records(timeline):
            writer.writerow([_fmt(rec.get(col)) for col in header])
    return path


def read_timeline_csv(path):
    """Rows as dicts of floats (None for empty cells); epoch stays int."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames[:len(BASE_COLUMNS)]) != list(BASE_COLUMNS):
            raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
        rows = []
        for raw in reader:
            rows.append({k: (int(v) if k == "epoch" else (float(v) if v != "" else None))
                         for k, v in raw.items()})
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return rows


def tpt_from_rows(rows):
    for row in rows:
        if row["train_err"] == 0.0:
            return row["epoch"]
    return None


def _scale(lo, hi, a, b):
    if hi == lo:
        return lambda v: (a + b) / 2.0
    return lambda v: a + (v - lo) * (b - a) / (hi - lo)


def x_position(epoch, epochs):
    """Pixel x of ``epoch`` given the full list of plotted epochs."""
    return _scale(min(epochs), max(epochs), LEFT, WIDTH - RIGHT)(epoch)


def render_svg(epochs, values, title, tpt_epoch=None):
    pts = [(e, v) for e, v in zip(epochs, values) if v is not None]
    xs = [e for e, _ in pts]
    ys = [v for _, v in pts]
    sx = _scale(min(epochs), max(epochs), LEFT, WIDTH - RIGHT)
    y_lo, y_hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    sy = _scale(y_lo, y_hi, HEIGHT - BOTTOM, TOP)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
           f'width="{WIDTH}" height="{HEIGHT}">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="16">{escape(title)}</text>',
           f'<line x1="{LEFT}" y1="{HEIGHT - BOTTOM}" x2="{WIDTH - RIGHT}" y2="{HEIGHT - BOTTOM}" stroke="black"/>',
           f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{HEIGHT - BOTTOM}" stroke="black"/>',
           f'<text x="{(LEFT + WIDTH - RIGHT) / 2}" y="{HEIGHT - 15}" text-anchor="middle" '
           f'font-size="13">epoch</text>',
           f'<text x="18" y="{(TOP + HEIGHT - BOTTOM) / 2}" text-anchor="middle" font-size="13" '
           f'transform="rotate(-90 18 {(TOP + HEIGHT - BOTTOM) / 2})">{escape(title)}</text>']
    for e in sorted({min(epochs), max(epochs)}):
        out.append(f'<text class="xtick" x="{sx(e)}" y="{HEIGHT - BOTTOM + 18}" text-anchor="middle" '
                   f'font-size="11">{e}</text>')
    for v in sorted({y_lo, y_hi}):
        out.append(f'<text class="ytick" x="{LEFT - 6}" y="{sy(v) + 4}" text-anchor="end" '
                   f'font-size="11">{_fmt(v)}</text>')
    if pts:
        coords = " ".join(f"{sx(x)},{sy(y)}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{coords}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            out.append(f'<circle cx="{sx(x)}" cy="{sy(y)}" r="3" fill="#1f77b4"/>')
    if tpt_epoch is not None:
        x = sx(tpt_epoch)
        out.append(f'<line class="tpt" x1="{x}" y1="{TOP}" x2="{x}" y2="{HEIGHT - BOTTOM}" '
                   f'stroke="red" stroke-dasharray="6,4" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plots(rows, out_dir, tpt_epoch=None):
    os.makedirs(out_dir, exist_ok=True)
    epochs = [r["epoch"] for r in rows]
    written = []
    for col in PLOTTED:
        values = [r.get(col) for r in rows]
        if all(v is None for v in values):
            continue
        path = os.path.join(out_dir, f"{col}.svg")
        with open(path, "w") as fh:
            fh.write(render_svg(epochs, values, col, tpt_epoch))
        written.append(path)
    return written


def emit_report(timeline, out_dir):
    """timeline.csv, timeline.json and one SVG per metric under ``out_dir``."""
    if not timeline.rows:
        raise ValueError("timeline is empty")
    try:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = write_timeline_csv(timeline, os.path.join(out_dir, "timeline.csv"))
        json_path = os.path.join(out_dir, "timeline.json")
        with open(json_path, "w") as fh:
            json.dump(timeline.to_dict(), fh, indent=2)
            fh.write("\n")
        plots = emit_plots(timeline_records(timeline), os.path.join(out_dir, "plots"),
                           timeline.tpt_start_epoch)
    except OSError as exc:
        raise OSError(f"failed writing report to {out_dir}: {exc}") from exc
    return [csv_path, json_path] + plots
