//! Reports over evaluated configurations: trade-off curves, power-law fits
//! and the train/test document-count matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalResult;
use crate::container::{sha256_hex, write_atomic};
use crate::error::{Error, Result};

/// Compression sizes expected on the cost axis, left to right.
pub const M_GRID: [usize; 6] = [4, 8, 16, 32, 64, 128];

fn sort_key(r: &EvalResult) -> (String, usize, usize, usize, u64) {
    (r.method.clone(), r.m, r.n_docs_train, r.n_docs_test, r.seed)
}

/// Serializes results sorted by `(method, m, n_docs_train, n_docs_test, seed)`.
pub fn results_csv_bytes(results: &[EvalResult]) -> Result<Vec<u8>> {
    let mut sorted = results.to_vec();
    sorted.sort_by_key(sort_key);
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &sorted {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

pub fn write_results_csv(path: &Path, results: &[EvalResult]) -> Result<()> {
    write_atomic(path, &results_csv_bytes(results)?)
}

pub fn read_results_csv(path: &Path) -> Result<Vec<EvalResult>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub m: usize,
    pub prompt_tokens: f64,
    pub perplexity: f64,
    pub rouge_l: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub method: String,
    pub n_docs: usize,
    /// Ordered by increasing `m`.
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffReport {
    pub curves: Vec<Curve>,
    /// `(method, n_docs, m)` cells of the grid without a result.
    pub missing: Vec<(String, usize, usize)>,
    /// Largest prompt budget at which the best ComMer point within budget
    /// has lower perplexity than every prompt-tuning point within budget.
    pub crossover_budget: Option<f64>,
    pub csv: Vec<u8>,
    pub svg: String,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over seeds of every `(method, n_docs_test, m)` cell.
fn cell_medians(results: &[EvalResult]) -> BTreeMap<(String, usize, usize), CurvePoint> {
    let mut cells: BTreeMap<(String, usize, usize), Vec<&EvalResult>> = BTreeMap::new();
    for r in results {
        cells.entry((r.method.clone(), r.n_docs_test, r.m)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|(k, rs)| {
            let rouge: Vec<f64> = rs.iter().filter_map(|r| r.rouge_l).collect();
            let p = CurvePoint {
                m: k.2,
                prompt_tokens: median(rs.iter().map(|r| r.prompt_tokens).collect()),
                perplexity: median(rs.iter().map(|r| r.perplexity).collect()),
                rouge_l: (!rouge.is_empty()).then(|| median(rouge)),
            };
            (k, p)
        })
        .collect()
}

pub fn tradeoff_report(results: &[EvalResult], title: &str) -> Result<TradeoffReport> {
    let cells = cell_medians(results);
    let mut curves: BTreeMap<(String, usize), Vec<CurvePoint>> = BTreeMap::new();
    for ((method, n, _), p) in &cells {
        curves.entry((method.clone(), *n)).or_default().push(p.clone());
    }
    let mut missing = Vec::new();
    for (method, n) in curves.keys() {
        for m in M_GRID {
            if !cells.contains_key(&(method.clone(), *n, m)) {
                missing.push((method.clone(), *n, m));
            }
        }
    }
    let curves: Vec<Curve> =
        curves.into_iter().map(|((method, n_docs), points)| Curve { method, n_docs, points }).collect();

    let mut budgets: Vec<f64> = cells.values().map(|p| p.prompt_tokens).collect();
    budgets.sort_by(|a, b| a.total_cmp(b));
    budgets.dedup();
    let best_within = |method: &str, b: f64| {
        cells
            .iter()
            .filter(|((me, _, _), p)| me == method && p.prompt_tokens <= b)
            .map(|(_, p)| p.perplexity)
            .min_by(|a, b| a.total_cmp(b))
    };
    let mut crossover = None;
    for &b in &budgets {
        // A method with no point within the budget cannot compete there.
        if let Some(c) = best_within("commer", b) {
            if best_within("prompt_tuning", b).is_none_or(|p| c < p) {
                crossover = Some(b);
            }
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "n_docs", "m", "prompt_tokens", "perplexity", "rouge_l"])?;
    for c in &curves {
        for p in &c.points {
            w.write_record([
                c.method.clone(),
                c.n_docs.to_string(),
                p.m.to_string(),
                p.prompt_tokens.to_string(),
                p.perplexity.to_string(),
                p.rouge_l.map(|r| r.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    let csv = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    let svg = render_svg(&curves, title, &sha256_hex(&csv));
    Ok(TradeoffReport { curves, missing, crossover_budget: crossover, csv, svg })
}

impl TradeoffReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("tradeoff.csv"), &self.csv)?;
        write_atomic(&dir.join("tradeoff.svg"), self.svg.as_bytes())
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

/// Perplexity against log2 prompt tokens; lower perplexity is drawn higher.
fn render_svg(curves: &[Curve], title: &str, digest: &str) -> String {
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let pts: Vec<&CurvePoint> = curves.iter().flat_map(|c| &c.points).collect();
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, "<!-- data sha256 {digest} -->");
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    if pts.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let lx = |p: &CurvePoint| p.prompt_tokens.max(1.0).log2();
    let (x0, x1) = pts.iter().map(|p| lx(p)).fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    let (y0, y1) = pts.iter().map(|p| p.perplexity).fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    let span = |a: f64, b: f64| if b > a { b - a } else { 1.0 };
    let sx = |v: f64| pad + (v - x0) / span(x0, x1) * (w - 2.0 * pad);
    // Low perplexity at the top.
    let sy = |v: f64| pad + (v - y0) / span(y0, y1) * (h - 2.0 * pad);
    let _ = writeln!(
        svg,
        r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">prompt tokens (log2)</text>"#, w / 2.0, h - 20.0);
    let _ = writeln!(svg, r#"<text x="16" y="{}" font-size="12" transform="rotate(-90 16 {})">perplexity (lower is up)</text>"#, h / 2.0, h / 2.0);
    let _ = writeln!(svg, r#"<text x="{pad}" y="{}" font-size="10">{:.3}</text>"#, pad - 4.0, y0);
    let _ = writeln!(svg, r#"<text x="{pad}" y="{}" font-size="10">{:.3}</text>"#, h - pad + 14.0, y1);
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = c.points.iter().map(|p| format!("{:.2},{:.2}", sx(lx(p)), sy(p.perplexity))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for p in &c.points {
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"><title>m={}</title></circle>"#, sx(lx(p)), sy(p.perplexity), p.m);
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{} n={}</text>"#,
            w - pad - 120.0,
            pad + 14.0 * i as f64,
            escape(&c.method),
            c.n_docs
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit {
    /// Exponent of `ppl ≈ e^a · n^b`.
    pub b: f64,
    pub a: f64,
    pub r2: f64,
}

/// Least squares of `ln ppl = a + b ln n`.
pub fn powerlaw_fit(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    let distinct: BTreeSet<u64> = points.iter().map(|p| p.0.to_bits()).collect();
    if distinct.len() < 3 {
        return Err(Error::contract("power-law fit needs at least three distinct document counts"));
    }
    if let Some(p) = points.iter().find(|p| !(p.0 >= 1.0) || !(p.1 > 1.0) || !p.1.is_finite()) {
        return Err(Error::contract(format!("invalid point ({}, {})", p.0, p.1)));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(PowerLawFit { b, a, r2 })
}

/// `delta[i][j] = ppl[i][j] − ppl[j][j]`, where `i` indexes the test
/// document count and `j` the training document count.
#[derive(Debug, Clone, PartialEq)]
pub struct GenMatrix {
    pub grid: Vec<usize>,
    pub perplexity: Vec<Vec<Option<f64>>>,
    pub delta: Vec<Vec<Option<f64>>>,
}

impl GenMatrix {
    pub fn from_perplexities(grid: Vec<usize>, perplexity: Vec<Vec<Option<f64>>>) -> Self {
        let k = grid.len();
        let delta = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| match (perplexity[i][j], perplexity[j][j]) {
                        (Some(a), Some(b)) => Some(a - b),
                        _ => None,
                    })
                    .collect()
            })
            .collect();
        Self { grid, perplexity, delta }
    }

    /// Element-wise median over several matrices on the same grid.
    pub fn median_of(mats: &[GenMatrix]) -> Result<Self> {
        let first = mats.first().ok_or_else(|| Error::contract("median of no matrices"))?;
        let k = first.grid.len();
        let ppl = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        let v: Vec<f64> = mats.iter().filter_map(|m| m.perplexity[i][j]).collect();
                        (v.len() == mats.len()).then(|| median(v))
                    })
                    .collect()
            })
            .collect();
        Ok(Self::from_perplexities(first.grid.clone(), ppl))
    }

    pub fn index(&self, n: usize) -> Option<usize> {
        self.grid.iter().position(|&g| g == n)
    }

    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["i", "j", "perplexity", "delta"])?;
        for (a, &i) in self.grid.iter().enumerate() {
            for (b, &j) in self.grid.iter().enumerate() {
                let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                w.write_record([i.to_string(), j.to_string(), f(self.perplexity[a][b]), f(self.delta[a][b])])?;
            }
        }
        w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))
    }
}

/// Evaluates every trained model (keyed by its training document count)
/// at every test document count of `grid`; missing models leave their
/// column absent.
pub fn gen_matrix(grid: &[usize], mut eval: impl FnMut(usize, usize) -> Result<Option<f64>>) -> Result<GenMatrix> {
    let mut ppl = vec![vec![None; grid.len()]; grid.len()];
    for (j, &train) in grid.iter().enumerate() {
        for (i, &test) in grid.iter().enumerate() {
            ppl[i][j] = eval(train, test)?;
        }
    }
    Ok(GenMatrix::from_perplexities(grid.to_vec(), ppl))
}

pub fn write_matrix_csv(path: &Path, m: &GenMatrix) -> Result<()> {
    write_atomic(path, &m.csv_bytes()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law_is_recovered() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&n: &f64| (n, 3.0 * n.powf(-0.1))).collect();
        let f = powerlaw_fit(&pts).unwrap();
        assert!((f.b + 0.1).abs() < 1e-9 && (f.r2 - 1.0).abs() < 1e-9 && (f.a - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn constant_perplexity_has_zero_exponent() {
        let f = powerlaw_fit(&[(1.0, 2.0), (2.0, 2.0), (4.0, 2.0)]).unwrap();
        assert_eq!(f.b, 0.0);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(powerlaw_fit(&[(1.0, 2.0), (1.0, 3.0), (2.0, 2.0)]).is_err());
        assert!(powerlaw_fit(&[(1.0, 0.5), (2.0, 3.0), (4.0, 2.0)]).is_err());
    }

    #[test]
    fn matrix_diagonal_is_zero() {
        let m = gen_matrix(&[1, 2, 4], |j, i| Ok(Some(10.0 / (i as f64) + j as f64 * 0.37))).unwrap();
        for k in 0..3 {
            assert_eq!(m.delta[k][k], Some(0.0));
        }
        let again = gen_matrix(&[1, 2, 4], |j, i| Ok(Some(10.0 / (i as f64) + j as f64 * 0.37))).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn missing_model_leaves_column_absent() {
        let m = gen_matrix(&[1, 2], |j, _| Ok((j == 1).then_some(3.0))).unwrap();
        assert_eq!(m.delta[0][1], None);
        assert_eq!(m.delta[1][0], Some(0.0));
    }

    fn res(method: &str, m: usize, n: usize, tokens: f64, ppl: f64) -> EvalResult {
        EvalResult {
            method: method.into(),
            m,
            n_docs_train: n,
            n_docs_test: n,
            prompt_tokens: tokens,
            perplexity: ppl,
            rouge_l: None,
            n_examples: 10,
            seed: 0,
        }
    }

    #[test]
    fn tradeoff_curves_and_crossover() {
        let rs = vec![
            res("commer", 4, 8, 30.0, 2.0),
            res("commer", 8, 8, 34.0, 1.9),
            res("prompt_tuning", 4, 8, 220.0, 1.5),
            res("prompt_tuning", 8, 8, 224.0, 1.4),
        ];
        let r = tradeoff_report(&rs, "t").unwrap();
        assert_eq!(r.curves.len(), 2);
        assert_eq!(r.curves[0].points.iter().map(|p| p.m).collect::<Vec<_>>(), vec![4, 8]);
        assert_eq!(r.crossover_budget, Some(34.0));
        assert_eq!(r.missing.len(), 8);
        assert!(r.svg.starts_with("<svg") && r.svg.contains("sha256"));
    }

    #[test]
    fn results_csv_round_trip_is_sorted() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("r.csv");
        let mut a = res("commer", 8, 1, 12.0, 3.0);
        a.rouge_l = Some(0.25);
        let b = res("commer", 4, 1, 8.0, 3.5);
        write_results_csv(&p, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_results_csv(&p).unwrap(), vec![b, a]);
    }
}
