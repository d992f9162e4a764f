//! Hand-emitted SVG: a content scatter and a style-magnitude bar chart.
//! CSV stays the canonical output; these exist so a run directory can be
//! eyeballed without loading anything.

use csid_core::mat::Mat;

/// Top-2 principal directions by power iteration with deflation. The
/// matrices here have at most a handful of columns, so nothing fancier is
/// warranted. Zero-variance input falls back to canonical axes.
fn top2_directions(x: &Mat) -> (Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let canonical = |i: usize| {
        let mut v = vec![0.0; d];
        if i < d {
            v[i] = 1.0;
        }
        v
    };
    if d == 0 || x.rows() < 2 {
        return (canonical(0), canonical(1));
    }
    let means = x.col_means();
    let centered = Mat::from_fn(x.rows(), d, |i, j| x.get(i, j) - means[j]);
    let mut cov = centered.matmul_at_b(&centered).expect("square gram");
    cov.scale(1.0 / (x.rows() - 1) as f64);

    let mut dirs = Vec::new();
    for k in 0..2usize.min(d) {
        let mut v = vec![1.0; d];
        let mut norm = (d as f64).sqrt();
        v.iter_mut().for_each(|e| *e /= norm);
        for _ in 0..200 {
            let mut w = vec![0.0; d];
            for (i, wi) in w.iter_mut().enumerate() {
                for j in 0..d {
                    *wi += cov.get(i, j) * v[j];
                }
            }
            norm = w.iter().map(|e| e * e).sum::<f64>().sqrt();
            if norm < 1e-12 {
                if k == 0 {
                    return (canonical(0), canonical(1));
                }
                return (dirs.remove(0), vec![0.0; d]);
            }
            w.iter_mut().for_each(|e| *e /= norm);
            v = w;
        }
        // Deflate: cov ← cov − λ v vᵀ.
        let mut lambda = 0.0;
        for i in 0..d {
            for j in 0..d {
                lambda += v[i] * cov.get(i, j) * v[j];
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov.set(i, j, cov.get(i, j) - lambda * v[i] * v[j]);
            }
        }
        dirs.push(v);
    }
    let first = dirs.remove(0);
    let second = dirs.pop().unwrap_or_else(|| vec![0.0; d]);
    (first, second)
}

fn project2(x: &Mat, a: &[f64], b: &[f64]) -> Vec<(f64, f64)> {
    (0..x.rows())
        .map(|i| {
            let row = x.row(i);
            let p = row.iter().zip(a).map(|(v, w)| v * w).sum();
            let q = row.iter().zip(b).map(|(v, w)| v * w).sum();
            (p, q)
        })
        .collect()
}

fn bounds(pts: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        b.0 = b.0.min(x);
        b.1 = b.1.max(x);
        b.2 = b.2.min(y);
        b.3 = b.3.max(y);
    }
    if !b.0.is_finite() || b.1 - b.0 < 1e-9 {
        b.0 -= 0.5;
        b.1 = b.0 + 1.0;
    }
    if !b.2.is_finite() || b.3 - b.2 < 1e-9 {
        b.2 -= 0.5;
        b.3 = b.2 + 1.0;
    }
    (b.0, b.1, b.2, b.3)
}

/// Cold-to-warm fill encoding one scalar per point.
fn hue(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| a + t * (b - a);
    format!("rgb({},{},{})", lerp(53.0, 232.0) as u8, lerp(102.0, 136.0) as u8, lerp(176.0, 58.0) as u8)
}

const DOMAIN_STROKES: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"];

struct Panel {
    title: String,
    points: Vec<(f64, f64)>,
}

fn f2(v: f64) -> String {
    format!("{v:.2}")
}

fn render_panel(svg: &mut String, panel: &Panel, origin_x: f64, hues: &[f64], domains: &[usize]) {
    const W: f64 = 360.0;
    const H: f64 = 360.0;
    const PAD: f64 = 42.0;
    let (x0, x1, y0, y1) = bounds(&panel.points);
    let sx = |x: f64| origin_x + PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| PAD + (y1 - y) / (y1 - y0) * (H - 2.0 * PAD);

    svg.push_str(&format!(
        "<text x='{}' y='20' text-anchor='middle' font-size='13'>{}</text>\n",
        origin_x + W / 2.0,
        panel.title
    ));
    svg.push_str(&format!(
        "<rect x='{}' y='{}' width='{}' height='{}' fill='none' stroke='#999'/>\n",
        f2(origin_x + PAD),
        f2(PAD),
        f2(W - 2.0 * PAD),
        f2(H - 2.0 * PAD)
    ));
    for (v, label_x) in [(x0, true), (x1, true), (y0, false), (y1, false)] {
        let (x, y, anchor) = if label_x {
            (sx(v), H - PAD + 14.0, "middle")
        } else {
            (origin_x + PAD - 4.0, sy(v) + 3.0, "end")
        };
        svg.push_str(&format!(
            "<text x='{}' y='{}' text-anchor='{anchor}' font-size='9' fill='#555'>{}</text>\n",
            f2(x),
            f2(y),
            f2(v)
        ));
    }
    for (i, &(x, y)) in panel.points.iter().enumerate() {
        let stroke = DOMAIN_STROKES[domains.get(i).copied().unwrap_or(0) % DOMAIN_STROKES.len()];
        svg.push_str(&format!(
            "<circle cx='{}' cy='{}' r='2.4' fill='{}' stroke='{stroke}' stroke-width='0.7' fill-opacity='0.85'/>\n",
            f2(sx(x)),
            f2(sy(y)),
            hue(hues.get(i).copied().unwrap_or(0.5)),
        ));
    }
}

/// Two panels on shared coloring: true content and learned content, each
/// projected onto its own top-2 principal directions, fill encoding the
/// first true-content component and stroke encoding the domain. Alignment
/// shows up as the color gradient surviving the right panel.
pub fn content_scatter_svg(true_c: &Mat, learned_c: &Mat, domain: &[usize]) -> String {
    let (ta, tb) = top2_directions(true_c);
    let (la, lb) = top2_directions(learned_c);
    let true_pts = project2(true_c, &ta, &tb);
    let learned_pts = project2(learned_c, &la, &lb);

    let (h0, h1, _, _) = bounds(&true_pts);
    let hues: Vec<f64> = true_pts.iter().map(|&(x, _)| (x - h0) / (h1 - h0)).collect();

    let mut svg = String::from(
        "<svg xmlns='http://www.w3.org/2000/svg' width='740' height='380' viewBox='0 0 740 380' font-family='monospace'>\n<rect width='740' height='380' fill='white'/>\n",
    );
    render_panel(
        &mut svg,
        &Panel { title: "true content (top-2 PCs)".into(), points: true_pts },
        0.0,
        &hues,
        domain,
    );
    render_panel(
        &mut svg,
        &Panel { title: "learned content (top-2 PCs)".into(), points: learned_pts },
        370.0,
        &hues,
        domain,
    );
    svg.push_str("</svg>\n");
    svg
}

/// Per-coordinate mean |ŝ_j| with the relative threshold marked; the
/// effective style dimension is the number of bars above the dashed line.
pub fn style_bars_svg(mean_abs: &[f64], tau_rel: f64) -> String {
    const W: f64 = 420.0;
    const H: f64 = 300.0;
    const PAD: f64 = 46.0;
    let top = mean_abs.iter().copied().fold(0.0f64, f64::max).max(1e-12);
    let ceiling = top * 1.15;
    let n = mean_abs.len().max(1);
    let slot = (W - 2.0 * PAD) / n as f64;
    let sy = |v: f64| PAD + (1.0 - v / ceiling) * (H - 2.0 * PAD);

    let mut svg = format!(
        "<svg xmlns='http://www.w3.org/2000/svg' width='{W}' height='{H}' viewBox='0 0 {W} {H}' font-family='monospace'>\n<rect width='{W}' height='{H}' fill='white'/>\n<text x='{}' y='20' text-anchor='middle' font-size='13'>mean |shat_j| per coordinate</text>\n",
        W / 2.0
    );
    svg.push_str(&format!(
        "<line x1='{}' y1='{}' x2='{}' y2='{}' stroke='#333'/>\n",
        f2(PAD),
        f2(H - PAD),
        f2(W - PAD),
        f2(H - PAD)
    ));
    for (j, &v) in mean_abs.iter().enumerate() {
        let x = PAD + slot * j as f64 + slot * 0.18;
        let w = slot * 0.64;
        svg.push_str(&format!(
            "<rect x='{}' y='{}' width='{}' height='{}' fill='#4878a8'/>\n",
            f2(x),
            f2(sy(v)),
            f2(w),
            f2((H - PAD) - sy(v))
        ));
        svg.push_str(&format!(
            "<text x='{}' y='{}' text-anchor='middle' font-size='10' fill='#333'>s{j}</text>\n",
            f2(x + w / 2.0),
            f2(H - PAD + 14.0)
        ));
        svg.push_str(&format!(
            "<text x='{}' y='{}' text-anchor='middle' font-size='8' fill='#555'>{}</text>\n",
            f2(x + w / 2.0),
            f2(sy(v) - 4.0),
            format!("{v:.3}")
        ));
    }
    let thresh = tau_rel * top;
    svg.push_str(&format!(
        "<line x1='{}' y1='{}' x2='{}' y2='{}' stroke='#c0392b' stroke-dasharray='5,4'/>\n<text x='{}' y='{}' font-size='9' fill='#c0392b'>tau = {}</text>\n",
        f2(PAD),
        f2(sy(thresh)),
        f2(W - PAD),
        f2(sy(thresh)),
        f2(W - PAD - 110.0),
        f2(sy(thresh) - 5.0),
        format!("{thresh:.3}")
    ));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use csid_core::rng;

    #[test]
    fn principal_directions_recover_a_planted_axis() {
        // Variance 25 along (3,4)/5, unit elsewhere.
        let mut r = rng::stream(910, 0);
        let x = Mat::from_fn(400, 3, |_, _| 0.0);
        let mut x = x;
        for i in 0..400 {
            let t = 5.0 * rng::normal(&mut r);
            let n1 = rng::normal(&mut r);
            let n2 = rng::normal(&mut r);
            x.set(i, 0, 0.6 * t + n1 * 0.1);
            x.set(i, 1, 0.8 * t - n2 * 0.1);
            x.set(i, 2, n1);
        }
        let (a, _) = top2_directions(&x);
        let dot: f64 = a.iter().zip([0.6, 0.8, 0.0]).map(|(v, w)| v * w).sum();
        assert!(dot.abs() > 0.99, "first PC {a:?}");
    }

    #[test]
    fn svgs_are_wellformed_and_deterministic() {
        let mut r = rng::stream(911, 0);
        let t = rng::normal_mat(&mut r, 40, 2);
        let l = rng::normal_mat(&mut r, 40, 4);
        let dom: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let a = content_scatter_svg(&t, &l, &dom);
        let b = content_scatter_svg(&t, &l, &dom);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg "));
        assert!(a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<circle").count(), 80);

        let bars = style_bars_svg(&[0.8, 0.6, 0.04, 0.01], 0.1);
        assert!(bars.contains("tau ="));
        assert_eq!(bars.matches("<rect").count(), 1 + 4);

        // Constant input must not divide by zero.
        let konst = Mat::from_fn(12, 2, |_, _| 1.0);
        let svg = content_scatter_svg(&konst, &konst, &vec![0; 12]);
        assert!(svg.contains("</svg>"));
        let flat = style_bars_svg(&[0.0, 0.0], 0.1);
        assert!(flat.contains("</svg>"));
    }
}
