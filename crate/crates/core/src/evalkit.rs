//! Rate-distortion evaluation: RD points and curves, BD-rate, CSV and plot
//! output, and stage timing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bitstream::{decode_video, encode_video, StageTimes};
use crate::error::{Error, Result};
use crate::media_io::VideoSequence;
use crate::params::ParameterStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub bpp: f64,
    pub psnr: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RDCurve {
    pub codec: String,
    /// Ascending in bpp.
    pub points: Vec<RDPoint>,
}

impl RDCurve {
    pub fn new(codec: impl Into<String>, mut points: Vec<RDPoint>) -> Self {
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        RDCurve {
            codec: codec.into(),
            points,
        }
    }
}

/// Shape-preserving cubic (Fritsch-Carlson) through sorted knots.
#[derive(Debug, Clone)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::invalid("interpolation needs at least two knots"));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("knots must be strictly increasing"));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                if delta[k - 1] * delta[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
                }
            }
            d[0] = edge_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = edge_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Pchip { x, y, d })
    }

    fn segment(&self, t: f64) -> usize {
        self.x[1..self.x.len() - 1].partition_point(|&v| v <= t)
    }

    /// Coefficients of `y_k + d_k s + c2 s^2 + c3 s^3` on segment `k`.
    fn coeffs(&self, k: usize) -> (f64, f64, f64, f64) {
        let h = self.x[k + 1] - self.x[k];
        let delta = (self.y[k + 1] - self.y[k]) / h;
        let c2 = (3.0 * delta - 2.0 * self.d[k] - self.d[k + 1]) / h;
        let c3 = (self.d[k] + self.d[k + 1] - 2.0 * delta) / (h * h);
        (self.y[k], self.d[k], c2, c3)
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.segment(t);
        let (a, b, c, d) = self.coeffs(k);
        let s = t - self.x[k];
        a + s * (b + s * (c + s * d))
    }

    /// Exact integral over `[lo, hi]` inside the knot range.
    pub fn integrate(&self, lo: f64, hi: f64) -> f64 {
        let anti = |k: usize, s: f64| {
            let (a, b, c, d) = self.coeffs(k);
            s * (a + s * (b / 2.0 + s * (c / 3.0 + s * d / 4.0)))
        };
        let mut total = 0.0;
        for k in 0..self.x.len() - 1 {
            let (x0, x1) = (self.x[k], self.x[k + 1]);
            let (a, b) = (lo.max(x0), hi.min(x1));
            if b > a {
                total += anti(k, b - x0) - anti(k, a - x0);
            }
        }
        total
    }
}

fn edge_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

pub const MIN_BD_POINTS: usize = 3;

fn log_rate_fit(c: &RDCurve) -> Result<Pchip> {
    if c.points.len() < MIN_BD_POINTS {
        return Err(Error::invalid(format!(
            "BD-rate needs at least {MIN_BD_POINTS} points, {} has {}",
            c.codec,
            c.points.len()
        )));
    }
    let mut pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.psnr, p.bpp)).collect();
    if pts.iter().any(|&(q, r)| !(r > 0.0) || !q.is_finite()) {
        return Err(Error::invalid(format!("{}: rates must be positive and PSNR finite", c.codec)));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    Pchip::new(pts.iter().map(|p| p.0).collect(), pts.iter().map(|p| p.1.log10()).collect())
}

/// Average bitrate difference of `test` against `anchor` at equal PSNR,
/// in percent; negative means `test` needs fewer bits.
pub fn bd_rate(anchor: &RDCurve, test: &RDCurve) -> Result<f64> {
    let fa = log_rate_fit(anchor)?;
    let ft = log_rate_fit(test)?;
    let lo = fa.x[0].max(ft.x[0]);
    let hi = fa.x[fa.x.len() - 1].min(ft.x[ft.x.len() - 1]);
    if !(hi > lo) {
        return Err(Error::NoOverlap(format!(
            "{} and {} share no PSNR interval",
            anchor.codec, test.codec
        )));
    }
    let avg = (ft.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// One model to evaluate with a given GoP size.
#[derive(Debug, Clone)]
pub struct EvalModel {
    pub codec: String,
    pub lambda: f64,
    pub gop_size: usize,
    pub params: ParameterStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub sequence: String,
    pub codec: String,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr_rgb: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Curves keyed by `(sequence, codec)`; sequence `"average"` holds the
    /// mean over sequences at each lambda.
    pub curves: BTreeMap<(String, String), RDCurve>,
}

pub const AVERAGE: &str = "average";

impl EvalReport {
    pub fn sequences(&self) -> Vec<String> {
        let mut v: Vec<String> = self.rows.iter().map(|r| r.sequence.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Mean over sequences of per-sequence BD-rates, and the BD-rate of the
    /// averaged curves.
    pub fn bd_rate(&self, anchor: &str, test: &str) -> Result<(f64, f64)> {
        let seqs = self.sequences();
        let mut per = Vec::with_capacity(seqs.len());
        for s in &seqs {
            let a = self.curve(s, anchor)?;
            let t = self.curve(s, test)?;
            per.push(bd_rate(a, t)?);
        }
        let avg = bd_rate(self.curve(AVERAGE, anchor)?, self.curve(AVERAGE, test)?)?;
        Ok((per.iter().sum::<f64>() / per.len() as f64, avg))
    }

    pub fn curve(&self, seq: &str, codec: &str) -> Result<&RDCurve> {
        self.curves
            .get(&(seq.to_string(), codec.to_string()))
            .ok_or_else(|| Error::invalid(format!("no curve for {codec} on {seq}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Group rows into curves per `(sequence, codec)` and add averaged curves.
pub fn curves_from_rows(rows: &[EvalRow]) -> BTreeMap<(String, String), RDCurve> {
    let mut pts: BTreeMap<(String, String), Vec<RDPoint>> = BTreeMap::new();
    let mut avg: BTreeMap<(String, u64), (f64, f64, usize, f64)> = BTreeMap::new();
    for r in rows {
        pts.entry((r.sequence.clone(), r.codec.clone())).or_default().push(RDPoint {
            bpp: r.bpp,
            psnr: r.psnr_rgb,
            label: format!("{}@{}", r.codec, r.lambda),
        });
        if r.sequence != AVERAGE {
            let e = avg.entry((r.codec.clone(), r.lambda.to_bits())).or_insert((0.0, 0.0, 0, r.lambda));
            e.0 += r.bpp;
            e.1 += r.psnr_rgb;
            e.2 += 1;
        }
    }
    for ((codec, _), (b, p, n, lambda)) in avg {
        pts.entry((AVERAGE.to_string(), codec.clone())).or_default().push(RDPoint {
            bpp: b / n as f64,
            psnr: p / n as f64,
            label: format!("{codec}@{lambda}"),
        });
    }
    pts.into_iter()
        .map(|((s, c), p)| ((s.clone(), c.clone()), RDCurve::new(c, p)))
        .collect()
}

/// Code every sequence with every model. Bpp counts entropy-coded payload
/// bits over source pixels; PSNR is the mean per-frame RGB PSNR.
pub fn evaluate(seqs: &[(String, VideoSequence)], models: &[EvalModel]) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(seqs.len() * models.len());
    for (name, seq) in seqs {
        for m in models {
            let out = encode_video(seq, &m.params, m.gop_size)?;
            log::info!("{name} {} lambda {}: {:.4} bpp {:.2} dB", m.codec, m.lambda, out.bpp(), out.mean_psnr());
            rows.push(EvalRow {
                sequence: name.clone(),
                codec: m.codec.clone(),
                lambda: m.lambda,
                bpp: out.bpp(),
                psnr_rgb: out.mean_psnr(),
            });
        }
    }
    let curves = curves_from_rows(&rows);
    Ok(EvalReport { rows, curves })
}

fn font_available() -> bool {
    static OK: OnceLock<bool> = OnceLock::new();
    *OK.get_or_init(|| {
        let mut candidates: Vec<PathBuf> = std::env::var_os("KMFV_FONT").map(PathBuf::from).into_iter().collect();
        candidates.extend(
            [
                "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
                "/usr/share/fonts/TTF/DejaVuSans.ttf",
                "/Library/Fonts/Arial.ttf",
                "C:\\Windows\\Fonts\\arial.ttf",
            ]
            .iter()
            .map(PathBuf::from),
        );
        for p in candidates {
            if let Ok(bytes) = std::fs::read(&p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", plotters::style::FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no font found; plots are drawn without text (set KMFV_FONT)");
        false
    })
}

fn plot(path: &Path, title: &str, curves: &[&RDCurve]) -> Result<()> {
    use plotters::prelude::*;
    let all: Vec<&RDPoint> = curves.iter().flat_map(|c| c.points.iter()).collect();
    if all.is_empty() {
        return Ok(());
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in &all {
        x0 = x0.min(p.bpp);
        x1 = x1.max(p.bpp);
        y0 = y0.min(p.psnr);
        y1 = y1.max(p.psnr);
    }
    let px = ((x1 - x0) * 0.1).max(1e-3);
    let py = ((y1 - y0) * 0.1).max(0.1);
    let text = font_available();
    let err = |e: String| Error::invalid(format!("plotting {}: {e}", path.display()));
    let root = BitMapBackend::new(path, (800, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder.caption(title, ("sans-serif", 24)).x_label_area_size(40).y_label_area_size(50);
    }
    let mut chart = builder
        .build_cartesian_2d((x0 - px)..(x1 + px), (y0 - py)..(y1 + py))
        .map_err(|e| err(e.to_string()))?;
    if text {
        chart
            .configure_mesh()
            .x_desc("bpp")
            .y_desc("RGB PSNR (dB)")
            .draw()
            .map_err(|e| err(e.to_string()))?;
    }
    let colours = [RED, BLUE, GREEN, MAGENTA, CYAN, BLACK];
    for (i, c) in curves.iter().enumerate() {
        let col = colours[i % colours.len()];
        let series = chart
            .draw_series(LineSeries::new(c.points.iter().map(|p| (p.bpp, p.psnr)), col.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?;
        if text {
            series
                .label(c.codec.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], col));
        }
        chart
            .draw_series(c.points.iter().map(|p| Circle::new((p.bpp, p.psnr), 4, col.filled())))
            .map_err(|e| err(e.to_string()))?;
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| err(e.to_string()))?;
    }
    root.present().map_err(|e| err(e.to_string()))?;
    Ok(())
}

/// `<dataset>_<codec>.png` for the averaged curves, `<dataset>_<sequence>_<codec>.png`
/// per sequence, and `<dataset>_all.png` with every averaged curve.
pub fn write_plots(report: &EvalReport, dataset: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut avg = Vec::new();
    for ((s, c), curve) in &report.curves {
        let (p, title) = if s == AVERAGE {
            avg.push(curve);
            (dir.join(format!("{dataset}_{c}.png")), format!("{dataset}: {c}"))
        } else {
            (dir.join(format!("{dataset}_{s}_{c}.png")), format!("{s}: {c}"))
        };
        plot(&p, &title, &[curve])?;
        written.push(p);
    }
    let p = dir.join(format!("{dataset}_all.png"));
    plot(&p, dataset, &avg)?;
    written.push(p);
    Ok(written)
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub runs: usize,
    pub frames: usize,
    pub encode_fps: f64,
    pub decode_fps: f64,
    pub encode_total_ms: f64,
    /// Median milliseconds per stage, in a fixed key order.
    pub stages_ms: BTreeMap<String, f64>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Medians over `runs` (at least 5) encodes and decodes after one warm-up.
pub fn timing_report(seq: &VideoSequence, params: &ParameterStore, gop_size: usize, runs: usize) -> Result<TimingReport> {
    let runs = runs.max(5);
    let warm = encode_video(seq, params, gop_size)?;
    let bytes = warm.bytes();
    decode_video(&bytes, params)?;
    let (mut enc, mut dec) = (Vec::new(), Vec::new());
    let mut stages: Vec<StageTimes> = Vec::new();
    for _ in 0..runs {
        let t = Instant::now();
        let out = encode_video(seq, params, gop_size)?;
        enc.push(t.elapsed().as_secs_f64());
        stages.push(out.times);
        let t = Instant::now();
        decode_video(&bytes, params)?;
        dec.push(t.elapsed().as_secs_f64());
    }
    let stage = |f: fn(&StageTimes) -> f64| median(&mut stages.iter().map(f).collect::<Vec<_>>()) * 1e3;
    let stages_ms: BTreeMap<String, f64> = [
        ("analysis".to_string(), stage(|s| s.analysis)),
        ("entropy".to_string(), stage(|s| s.entropy)),
        ("interpolate".to_string(), stage(|s| s.interpolate)),
        ("synthesis".to_string(), stage(|s| s.synthesis)),
    ]
    .into_iter()
    .collect();
    let (e, d) = (median(&mut enc), median(&mut dec));
    Ok(TimingReport {
        runs,
        frames: seq.len(),
        encode_fps: seq.len() as f64 / e,
        decode_fps: seq.len() as f64 / d,
        encode_total_ms: e * 1e3,
        stages_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(name: &str, pts: &[(f64, f64)]) -> RDCurve {
        RDCurve::new(
            name,
            pts.iter()
                .map(|&(b, p)| RDPoint {
                    bpp: b,
                    psnr: p,
                    label: String::new(),
                })
                .collect(),
        )
    }

    #[test]
    fn self_and_half_rate() {
        let a = curve("a", &[(0.1, 30.0), (0.2, 33.0), (0.4, 35.5), (0.8, 37.0)]);
        assert_eq!(bd_rate(&a, &a).unwrap(), 0.0);
        let half = curve("h", &[(0.05, 30.0), (0.1, 33.0), (0.2, 35.5), (0.4, 37.0)]);
        assert!((bd_rate(&a, &half).unwrap() + 50.0).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        let a = curve("a", &[(0.1, 30.0), (0.2, 33.0)]);
        assert!(bd_rate(&a, &a).is_err());
        let b = curve("b", &[(0.1, 30.0), (0.2, 31.0), (0.3, 32.0)]);
        let c = curve("c", &[(0.1, 40.0), (0.2, 41.0), (0.3, 42.0)]);
        assert!(matches!(bd_rate(&b, &c), Err(Error::NoOverlap(_))));
    }

    #[test]
    fn pchip_is_monotone_and_interpolates() {
        let p = Pchip::new(vec![0.0, 1.0, 2.0, 4.0], vec![0.0, 1.0, 1.0, 3.0]).unwrap();
        for (x, y) in [(0.0, 0.0), (1.0, 1.0), (2.0, 1.0), (4.0, 3.0)] {
            assert!((p.eval(x) - y).abs() < 1e-12);
        }
        // Flat between the equal knots.
        for i in 0..=10 {
            assert!((p.eval(1.0 + i as f64 / 10.0) - 1.0).abs() < 1e-12);
        }
        let mut prev = p.eval(0.0);
        for i in 1..=400 {
            let v = p.eval(i as f64 / 100.0);
            assert!(v >= prev - 1e-12);
            prev = v;
        }
    }

    #[test]
    fn averaged_curves() {
        let rows = vec![
            EvalRow { sequence: "s1".into(), codec: "x".into(), lambda: 0.01, bpp: 0.2, psnr_rgb: 30.0 },
            EvalRow { sequence: "s2".into(), codec: "x".into(), lambda: 0.01, bpp: 0.4, psnr_rgb: 32.0 },
        ];
        let c = curves_from_rows(&rows);
        let avg = &c[&(AVERAGE.to_string(), "x".to_string())];
        assert_eq!(avg.points.len(), 1);
        assert!((avg.points[0].bpp - 0.3).abs() < 1e-12 && (avg.points[0].psnr - 31.0).abs() < 1e-12);
    }
}
