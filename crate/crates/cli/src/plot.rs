//! Raster plots of evaluation traces: inlier match counts and the
//! commanded gain/exposure against frame index, one PPM per episode with
//! every controller overlaid. Dynamic segments are shaded so lighting
//! transitions are visible behind the curves.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use predex_core::error::{Error, Result};
use predex_core::eval::{EpisodeTrace, SegmentTag};

const WHITE: [u8; 3] = [255, 255, 255];
const INK: [u8; 3] = [40, 40, 40];
const SHADE: [u8; 3] = [228, 228, 228];

/// Line colors cycled over controllers, in first-appearance order.
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

const MARGIN_LEFT: usize = 64;
const MARGIN_RIGHT: usize = 10;
const PLOT_W: usize = 480;
const PANEL_H: usize = 110;
const TITLE_H: usize = 14;
const PANEL_GAP: usize = 10;
const LEGEND_H: usize = 14;
const X_LABEL_H: usize = 18;

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[u8; 3]>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self { w, h, px: vec![WHITE; w * h] }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            self.px[y as usize * self.w + x as usize] = c;
        }
    }

    fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, c: [u8; 3]) {
        for yy in y..(y + h).min(self.h) {
            for xx in x..(x + w).min(self.w) {
                self.px[yy * self.w + xx] = c;
            }
        }
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn text(&mut self, x: usize, y: usize, s: &str, c: [u8; 3]) {
        let mut cx = x;
        for ch in s.chars() {
            if let Some(rows) = glyph(ch) {
                for (ry, bits) in rows.iter().enumerate() {
                    for rx in 0..5 {
                        if bits & (0x10 >> rx) != 0 {
                            self.set((cx + rx) as i64, (y + ry) as i64, c);
                        }
                    }
                }
            }
            cx += 6;
        }
    }

    fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P6\n{} {}\n255\n", self.w, self.h).into_bytes();
        for p in &self.px {
            buf.extend_from_slice(p);
        }
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// 5x7 bitmap, one byte per row, low 5 bits used, MSB-side leftmost.
fn glyph(ch: char) -> Option<[u8; 7]> {
    let g = match ch {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        'a' => [0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F],
        'b' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1E],
        'c' => [0x00, 0x00, 0x0E, 0x10, 0x10, 0x11, 0x0E],
        'd' => [0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F],
        'e' => [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        'f' => [0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08],
        'g' => [0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'h' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11],
        'i' => [0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E],
        'j' => [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'm' => [0x00, 0x00, 0x1A, 0x15, 0x15, 0x11, 0x11],
        'n' => [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E],
        'p' => [0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10],
        'q' => [0x00, 0x00, 0x0D, 0x13, 0x0F, 0x01, 0x01],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0E, 0x10, 0x0E, 0x01, 0x1E],
        't' => [0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'w' => [0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A],
        'x' => [0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11],
        'y' => [0x00, 0x00, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'z' => [0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F],
        ' ' => [0x00; 7],
        _ => return None,
    };
    Some(g)
}

/// Short numeric label: plain decimals in a readable range, scientific
/// elsewhere (both use only glyphs the font has).
fn fmt_val(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(0.01..10000.0).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

struct Series<'a> {
    color: [u8; 3],
    points: Vec<(usize, f64)>,
    _label: &'a str,
}

struct Panel<'a> {
    title: &'a str,
    series: Vec<Series<'a>>,
}

fn panel_range(series: &[Series]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for &(_, v) in &s.points {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        // Flat series still get a visible band.
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

fn draw_panel(
    canvas: &mut Canvas,
    top: usize,
    panel: &Panel,
    shaded: &[(usize, usize)],
    x_max: usize,
) {
    let plot_top = top + TITLE_H;
    let plot_left = MARGIN_LEFT;
    canvas.text(plot_left, top + 2, panel.title, INK);

    let x_of = |t: usize| -> i64 {
        let frac = if x_max == 0 { 0.0 } else { t as f64 / x_max as f64 };
        (plot_left as f64 + frac * (PLOT_W - 1) as f64).round() as i64
    };
    for &(s0, s1) in shaded {
        let x0 = x_of(s0).max(plot_left as i64) as usize;
        let x1 = x_of(s1) as usize;
        canvas.fill_rect(x0, plot_top, x1.saturating_sub(x0) + 1, PANEL_H, SHADE);
    }

    let (lo, hi) = panel_range(&panel.series);
    let y_of = |v: f64| -> i64 {
        let frac = (v - lo) / (hi - lo);
        (plot_top as f64 + (1.0 - frac) * (PANEL_H - 1) as f64).round() as i64
    };

    // Left and bottom axis lines, with the y range labeled at its ends.
    let bottom = (plot_top + PANEL_H - 1) as i64;
    canvas.line(plot_left as i64, plot_top as i64, plot_left as i64, bottom, INK);
    canvas.line(plot_left as i64, bottom, (plot_left + PLOT_W - 1) as i64, bottom, INK);
    let hi_s = fmt_val(hi);
    let lo_s = fmt_val(lo);
    canvas.text(plot_left.saturating_sub(6 * hi_s.len() + 4), plot_top, &hi_s, INK);
    canvas.text(
        plot_left.saturating_sub(6 * lo_s.len() + 4),
        plot_top + PANEL_H - 8,
        &lo_s,
        INK,
    );

    for s in &panel.series {
        let mut prev: Option<(i64, i64)> = None;
        for &(t, v) in &s.points {
            let (x, y) = (x_of(t), y_of(v));
            match prev {
                // Gaps in the data (undefined match counts) break the line.
                Some((px, py)) if t > 0 => canvas.line(px, py, x, y, s.color),
                _ => canvas.set(x, y, s.color),
            }
            prev = Some((x, y));
        }
    }
}

/// Contiguous dynamic-tagged spans of a trace, as inclusive frame ranges.
fn dynamic_spans(trace: &EpisodeTrace) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for row in &trace.rows {
        match (row.tag, start) {
            (SegmentTag::Dynamic, None) => start = Some(row.time_index),
            (SegmentTag::Static, Some(s)) => {
                spans.push((s, row.time_index.saturating_sub(1)));
                start = None;
            }
            _ => {}
        }
    }
    if let (Some(s), Some(last)) = (start, trace.rows.last()) {
        spans.push((s, last.time_index));
    }
    spans
}

fn render_episode(traces: &[&EpisodeTrace], path: &Path) -> Result<()> {
    let x_max = traces.iter().map(|t| t.rows.len()).max().unwrap_or(1) - 1;
    let width = MARGIN_LEFT + PLOT_W + MARGIN_RIGHT;
    let height =
        LEGEND_H + 3 * (TITLE_H + PANEL_H) + 2 * PANEL_GAP + X_LABEL_H;
    let mut canvas = Canvas::new(width, height);

    let mut legend_x = MARGIN_LEFT;
    for (i, trace) in traces.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        canvas.fill_rect(legend_x, 5, 10, 3, color);
        canvas.text(legend_x + 13, 2, &trace.controller_id, INK);
        legend_x += 13 + 6 * trace.controller_id.len() + 12;
    }

    let series_of = |f: &dyn Fn(&predex_core::eval::TraceRow) -> Option<f64>| {
        traces
            .iter()
            .enumerate()
            .map(|(i, trace)| Series {
                color: PALETTE[i % PALETTE.len()],
                points: trace
                    .rows
                    .iter()
                    .filter_map(|r| f(r).map(|v| (r.time_index, v)))
                    .collect(),
                _label: trace.controller_id.as_str(),
            })
            .collect::<Vec<_>>()
    };

    let panels = [
        Panel {
            title: "inlier matches",
            series: series_of(&|r| r.nfm.map(|v| v as f64)),
        },
        Panel {
            title: "gain db",
            series: series_of(&|r| Some(r.params.gain_db())),
        },
        Panel {
            title: "exposure ms",
            series: series_of(&|r| Some(r.params.exposure_s() * 1e3)),
        },
    ];

    let shaded = dynamic_spans(traces[0]);
    let mut top = LEGEND_H;
    for panel in &panels {
        draw_panel(&mut canvas, top, panel, &shaded, x_max);
        top += TITLE_H + PANEL_H + PANEL_GAP;
    }

    let axis_y = height - X_LABEL_H + 4;
    canvas.text(MARGIN_LEFT, axis_y, "0", INK);
    let end = fmt_val(x_max as f64);
    canvas.text(MARGIN_LEFT + PLOT_W - 6 * end.len(), axis_y, &end, INK);
    canvas.text(MARGIN_LEFT + PLOT_W / 2 - 15, axis_y, "frame", INK);

    canvas.write_ppm(path)
}

/// Plots traces grouped by episode, one `plot_ep{NN}.ppm` per episode in
/// `dir`. Returns the written paths.
pub fn plot_traces(traces: &[EpisodeTrace], dir: &Path) -> Result<Vec<PathBuf>> {
    if traces.is_empty() {
        return Err(Error::InvalidConfig("no traces to plot".into()));
    }
    let mut groups: BTreeMap<u64, Vec<&EpisodeTrace>> = BTreeMap::new();
    for trace in traces {
        groups.entry(trace.episode_index).or_default().push(trace);
    }
    let mut written = Vec::with_capacity(groups.len());
    for (episode, group) in groups {
        let path = dir.join(format!("plot_ep{episode:02}.ppm"));
        render_episode(&group, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use predex_core::eval::TraceRow;
    use predex_core::sim::CameraParams;

    fn trace(id: &str, episode: u64, n: usize) -> EpisodeTrace {
        let rows = (0..n)
            .map(|t| TraceRow {
                time_index: t,
                params: CameraParams::new(6.0 + t as f64 * 0.1, 2e-3).unwrap(),
                m_feat: 40 + t,
                nfm: if t == 0 { None } else { Some(30 + t) },
                tag: if (5..8).contains(&t) {
                    SegmentTag::Dynamic
                } else {
                    SegmentTag::Static
                },
            })
            .collect();
        EpisodeTrace {
            controller_id: id.to_string(),
            seed: 1,
            episode_index: episode,
            rows,
        }
    }

    #[test]
    fn writes_one_image_per_episode() {
        let dir = tempfile::tempdir().unwrap();
        let traces = vec![
            trace("reactive_ae_ag", 0, 20),
            trace("learned", 0, 20),
            trace("reactive_ae_ag", 1, 20),
        ];
        let written = plot_traces(&traces, dir.path()).unwrap();
        assert_eq!(written.len(), 2);
        let bytes = std::fs::read(&written[0]).unwrap();
        assert!(bytes.starts_with(b"P6\n"));
        // Header advertises the same pixel count the payload carries.
        let header = String::from_utf8_lossy(&bytes[..20]).to_string();
        let dims: Vec<usize> = header
            .lines()
            .nth(1)
            .unwrap()
            .split_whitespace()
            .map(|v| v.parse().unwrap())
            .collect();
        let header_len = header.lines().take(3).map(|l| l.len() + 1).sum::<usize>();
        assert_eq!(bytes.len() - header_len, dims[0] * dims[1] * 3);
    }

    #[test]
    fn dynamic_spans_are_inclusive_ranges() {
        let t = trace("fixed", 0, 12);
        assert_eq!(dynamic_spans(&t), vec![(5, 7)]);
    }

    #[test]
    fn numeric_labels_fit_the_font() {
        for v in [0.0, 0.5, -3.25, 12.0, 29.97, 1.5e-3, 4.2e7] {
            for ch in fmt_val(v).chars() {
                assert!(glyph(ch).is_some(), "no glyph for {ch:?} in {v}");
            }
        }
    }
}
