//! Sampled-then-projected attention against the project-everything baseline:
//! wall time, counted work and output agreement over a set of pyramids.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::decoder::{
    emsda_reference, emsda_value_flops, msda_from_projected, msda_value_flops, project_pyramid, EmsdaShape, EmsdaWeights,
    FlopCounter,
};
use crate::error::{Error, Result};
use crate::numerics::NdArray;
use crate::rng;

/// Outputs must agree to this relative error.
pub const EQUIVALENCE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchCase {
    pub name: String,
    /// `(H, W)` per level.
    pub levels: Vec<(usize, usize)>,
    pub queries: usize,
    pub heads: usize,
    pub points: usize,
    pub dim: usize,
}

impl BenchCase {
    pub fn shape(&self) -> EmsdaShape {
        EmsdaShape { heads: self.heads, levels: self.levels.len(), points: self.points, dim: self.dim }
    }

    pub fn levels_label(&self) -> String {
        self.levels.iter().map(|(h, w)| format!("{h}x{w}")).collect::<Vec<_>>().join("+")
    }
}

/// The standard sweep: a degenerate single-point pyramid, then growing
/// top-down pyramids with 17 keypoint queries.
pub fn default_cases() -> Vec<BenchCase> {
    let case = |name: &str, levels: &[(usize, usize)], queries, heads, points, dim| BenchCase {
        name: name.into(),
        levels: levels.to_vec(),
        queries,
        heads,
        points,
        dim,
    };
    vec![
        case("point", &[(1, 1)], 1, 1, 1, 32),
        case("single", &[(8, 6)], 17, 4, 4, 64),
        case("two", &[(16, 12), (8, 6)], 17, 4, 4, 64),
        case("pose", &[(64, 48), (32, 24)], 17, 4, 4, 64),
        case("three", &[(32, 24), (16, 12), (8, 6)], 17, 4, 4, 64),
        case("four", &[(64, 48), (32, 24), (16, 12), (8, 6)], 17, 4, 4, 64),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub case: String,
    pub levels: String,
    pub queries: usize,
    pub heads: usize,
    pub points: usize,
    pub dim: usize,
    pub emsda: FlopCounter,
    pub msda: FlopCounter,
    /// Counted value-projection work, sampled over baseline.
    pub measured_ratio: f64,
    /// The same ratio from the closed-form counts.
    pub analytic_ratio: f64,
    pub emsda_seconds: f64,
    pub msda_seconds: f64,
    pub max_rel_diff: f64,
}

impl BenchRow {
    pub fn ratio_rel_err(&self) -> f64 {
        (self.measured_ratio - self.analytic_ratio).abs() / self.analytic_ratio
    }
}

/// Fastest of `reps` timed runs.
fn best_time<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        let v = f()?;
        best = best.min(t.elapsed().as_secs_f64());
        out = Some(v);
    }
    Ok((out.expect("at least one run"), best))
}

/// Runs one case on random weights and inputs. Non-equivalent outputs are
/// a [`Error::BenchInvalid`].
pub fn run_case(case: &BenchCase, seed: u64, reps: usize) -> Result<BenchRow> {
    let shape = case.shape();
    shape.validate()?;
    let mut r = rng::stream(seed, 0);
    let w = EmsdaWeights::random(shape, 1.0, &mut r)?;
    let maps: Vec<NdArray> =
        case.levels.iter().map(|&(h, wd)| NdArray::from_fn([case.dim, h, wd], |_| rng::normal(&mut r, 1.0))).collect();
    let pyramid: Vec<&NdArray> = maps.iter().collect();
    let queries: Vec<(Vec<f64>, [f64; 2])> = (0..case.queries)
        .map(|_| {
            let q = (0..case.dim).map(|_| rng::normal(&mut r, 1.0)).collect();
            (q, [rng::uniform(&mut r, 0.0, 1.0), rng::uniform(&mut r, 0.0, 1.0)])
        })
        .collect();

    let ((e_out, e_count), e_time) = best_time(reps, || {
        let mut c = FlopCounter::default();
        let outs = queries.iter().map(|(q, p)| emsda_reference(&w, q, *p, &pyramid, &mut c)).collect::<Result<Vec<_>>>()?;
        Ok((outs, c))
    })?;
    let ((m_out, m_count), m_time) = best_time(reps, || {
        let mut c = FlopCounter::default();
        let projected = project_pyramid(&w, &pyramid, &mut c)?;
        let outs = queries
            .iter()
            .map(|(q, p)| msda_from_projected(&w, q, *p, &projected, &mut c))
            .collect::<Result<Vec<_>>>()?;
        Ok((outs, c))
    })?;

    let scale = m_out.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let max_rel_diff =
        e_out.iter().flatten().zip(m_out.iter().flatten()).fold(0.0f64, |a, (x, y)| a.max((x - y).abs())) / scale;
    if !(max_rel_diff < EQUIVALENCE_TOL) {
        return Err(Error::BenchInvalid(format!(
            "case {}: outputs differ by {max_rel_diff:e} (relative)",
            case.name
        )));
    }
    let analytic_ratio = emsda_value_flops(case.queries as u64, &shape) as f64
        / msda_value_flops(1, &case.levels, case.dim) as f64;
    Ok(BenchRow {
        case: case.name.clone(),
        levels: case.levels_label(),
        queries: case.queries,
        heads: case.heads,
        points: case.points,
        dim: case.dim,
        emsda: e_count,
        msda: m_count,
        measured_ratio: e_count.value_proj as f64 / m_count.value_proj as f64,
        analytic_ratio,
        emsda_seconds: e_time,
        msda_seconds: m_time,
        max_rel_diff,
    })
}

pub fn run_bench(cases: &[BenchCase], seed: u64, reps: usize) -> Result<Vec<BenchRow>> {
    cases.iter().enumerate().map(|(i, c)| run_case(c, rng::derive_seed(seed, i as u64), reps)).collect()
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "case,levels,queries,heads,points,dim,emsda_value_flops,msda_value_flops,emsda_total_flops,msda_total_flops,\
         measured_ratio,analytic_ratio,emsda_seconds,msda_seconds,max_rel_diff\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.3e}",
            r.case,
            r.levels,
            r.queries,
            r.heads,
            r.points,
            r.dim,
            r.emsda.value_proj,
            r.msda.value_proj,
            r.emsda.total(),
            r.msda.total(),
            r.measured_ratio,
            r.analytic_ratio,
            r.emsda_seconds,
            r.msda_seconds,
            r.max_rel_diff
        );
    }
    s
}

/// Two log-scale panels (total work, wall time) with one bar pair per case.
pub fn to_svg(rows: &[BenchRow]) -> String {
    const W: f64 = 760.0;
    const PANEL_H: f64 = 220.0;
    const LEFT: f64 = 70.0;
    const TOP: f64 = 40.0;
    let n = rows.len().max(1) as f64;
    let slot = (W - LEFT - 20.0) / n;
    let mut s = String::new();
    let height = TOP + 2.0 * (PANEL_H + 60.0) + 40.0;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r##"<rect x="{LEFT}" y="12" width="10" height="10" fill="#d95f02"/><text x="{}" y="21">sampled (EMSDA)</text>"##, LEFT + 14.0);
    let _ = writeln!(s, r##"<rect x="{}" y="12" width="10" height="10" fill="#1b9e77"/><text x="{}" y="21">projected (MSDA)</text>"##, LEFT + 140.0, LEFT + 154.0);

    let panels: [(&str, Box<dyn Fn(&BenchRow) -> (f64, f64)>); 2] = [
        ("FLOPs (log10)", Box::new(|r: &BenchRow| (r.emsda.total() as f64, r.msda.total() as f64))),
        ("seconds (log10)", Box::new(|r: &BenchRow| (r.emsda_seconds, r.msda_seconds))),
    ];
    for (p, (label, value)) in panels.iter().enumerate() {
        let y0 = TOP + p as f64 * (PANEL_H + 60.0);
        let vals: Vec<(f64, f64)> = rows.iter().map(|r| value(r)).collect();
        let logs = vals.iter().flat_map(|&(a, b)| [a, b]).filter(|v| *v > 0.0).map(f64::log10);
        let (lo, hi) = logs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        let (lo, hi) = if lo.is_finite() { (lo.floor() - 0.5, hi.ceil()) } else { (0.0, 1.0) };
        let y = |v: f64| y0 + PANEL_H - (v.max(1e-300).log10() - lo) / (hi - lo) * PANEL_H;
        let _ = writeln!(s, r#"<text x="8" y="{}" transform="rotate(-90 8 {})">{label}</text>"#, y0 + PANEL_H / 2.0, y0 + PANEL_H / 2.0);
        let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{y0}" x2="{LEFT}" y2="{}" stroke="black"/>"#, y0 + PANEL_H);
        let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, y0 + PANEL_H, W - 20.0, y0 + PANEL_H);
        let mut tick = lo.ceil() as i32;
        while f64::from(tick) <= hi {
            let ty = y(10f64.powi(tick));
            let _ = writeln!(s, r##"<line x1="{}" y1="{ty}" x2="{}" y2="{ty}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{tick}</text>"##, LEFT, W - 20.0, LEFT - 4.0, ty + 4.0);
            tick += 1;
        }
        for (i, ((a, b), r)) in vals.iter().zip(rows).enumerate() {
            let x = LEFT + i as f64 * slot + slot * 0.15;
            let bw = slot * 0.33;
            for (k, (v, color)) in [(*a, "#d95f02"), (*b, "#1b9e77")].into_iter().enumerate() {
                let top = y(v);
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{top:.1}" width="{bw:.1}" height="{:.1}" fill="{color}"/>"#,
                    x + k as f64 * bw,
                    (y0 + PANEL_H - top).max(0.0)
                );
            }
            let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, x + bw, y0 + PANEL_H + 14.0, r.levels);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">S={} Q={}</text>"#, x + bw, y0 + PANEL_H + 28.0, r.points, r.queries);
        }
    }
    s.push_str("</svg>\n");
    s
}
