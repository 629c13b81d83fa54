//! Localization metrics and reports.
//!
//! Percentiles use linear interpolation between order statistics: for sorted
//! values `v[0..n]`, the `p`-quantile sits at position `p * (n - 1)`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::LandmarkSet;
use crate::error::{Error, Result};

/// Per-landmark Euclidean distance in mm. `None` where either set marks the
/// landmark absent.
pub fn distances(pred: &LandmarkSet, truth: &LandmarkSet, spacing: &[f64]) -> Result<Vec<Option<f64>>> {
    if pred.names != truth.names {
        return Err(Error::NameMismatch(format!(
            "prediction {:?} vs reference {:?}",
            pred.names, truth.names
        )));
    }
    if pred.dims() != spacing.len() || truth.dims() != spacing.len() {
        return Err(Error::DimensionMismatch {
            expected: spacing.len(),
            got: pred.dims(),
        });
    }
    Ok((0..pred.len())
        .map(|k| {
            (pred.present[k] && truth.present[k]).then(|| {
                pred.coords[k]
                    .iter()
                    .zip(&truth.coords[k])
                    .zip(spacing)
                    .map(|((p, t), s)| ((p - t) * s).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
        })
        .collect())
}

fn sorted_finite(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("no values to summarize".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distance list".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let pos = p * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("quantile {p} outside [0, 1]")));
    }
    Ok(quantile_sorted(&sorted_finite(values)?, p))
}

/// `(median, q75 - q25)`.
pub fn median_iqr(values: &[f64]) -> Result<(f64, f64)> {
    let v = sorted_finite(values)?;
    Ok((
        quantile_sorted(&v, 0.5),
        quantile_sorted(&v, 0.75) - quantile_sorted(&v, 0.25),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SdrSpec {
    thresholds: Vec<f64>,
}

impl SdrSpec {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::InvalidConfig("SDR needs at least one threshold".into()));
        }
        if thresholds.iter().any(|t| !(*t > 0.0)) || thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig(format!(
                "SDR thresholds must be positive and strictly increasing: {thresholds:?}"
            )));
        }
        Ok(Self { thresholds })
    }

    /// Cephalometric challenge thresholds: 2, 2.5, 3 and 4 mm.
    pub fn challenge() -> Self {
        Self {
            thresholds: vec![2.0, 2.5, 3.0, 4.0],
        }
    }

    /// Ten thresholds from 0.5 mm to 5 mm in 0.5 mm steps.
    pub fn curve() -> Self {
        Self {
            thresholds: (1..=10).map(|i| i as f64 * 0.5).collect(),
        }
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }
}

impl TryFrom<Vec<f64>> for SdrSpec {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SdrSpec> for Vec<f64> {
    fn from(s: SdrSpec) -> Self {
        s.thresholds
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdrPoint {
    pub threshold_mm: f64,
    pub percent: f64,
}

/// Percentage of values strictly below each threshold.
pub fn sdr(values: &[f64], spec: &SdrSpec) -> Result<Vec<SdrPoint>> {
    if values.is_empty() {
        return Err(Error::Empty("no values for SDR".into()));
    }
    let n = values.len() as f64;
    Ok(spec
        .thresholds
        .iter()
        .map(|&t| SdrPoint {
            threshold_mm: t,
            percent: 100.0 * values.iter().filter(|&&v| v < t).count() as f64 / n,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub name: String,
    pub n: usize,
    pub median: f64,
    pub iqr: f64,
    pub q25: f64,
    pub q75: f64,
    pub mean: f64,
    pub max: f64,
    pub sdr: Vec<SdrPoint>,
}

impl Stats {
    pub fn compute(name: &str, values: &[f64], spec: &SdrSpec) -> Result<Self> {
        let v = sorted_finite(values)?;
        let (q25, q75) = (quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.75));
        Ok(Self {
            name: name.to_string(),
            n: v.len(),
            median: quantile_sorted(&v, 0.5),
            iqr: q75 - q25,
            q25,
            q75,
            mean: v.iter().sum::<f64>() / v.len() as f64,
            max: v[v.len() - 1],
            sdr: sdr(&v, spec)?,
        })
    }
}

/// One image: prediction, reference and voxel spacing.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub id: String,
    pub pred: LandmarkSet,
    pub truth: LandmarkSet,
    pub spacing: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub image: String,
    pub landmark: String,
    pub error_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_landmark: Vec<Stats>,
    /// Statistics of all per-landmark distances concatenated.
    pub pooled: Stats,
    pub rows: Vec<ErrorRow>,
    /// Landmark instances skipped because one side marked them absent.
    pub skipped: usize,
}

pub fn evaluate(cases: &[EvalCase], spec: &SdrSpec) -> Result<EvalReport> {
    let first = cases.first().ok_or_else(|| Error::Empty("no cases to evaluate".into()))?;
    let names = first.truth.names.clone();
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    let mut rows = Vec::new();
    let mut skipped = 0;
    for case in cases {
        if case.truth.names != names {
            return Err(Error::NameMismatch(format!("case {} has different landmarks", case.id)));
        }
        for (k, d) in distances(&case.pred, &case.truth, &case.spacing)?.into_iter().enumerate() {
            match d {
                Some(d) => {
                    per[k].push(d);
                    rows.push(ErrorRow {
                        image: case.id.clone(),
                        landmark: names[k].clone(),
                        error_mm: d,
                    });
                }
                None => skipped += 1,
            }
        }
    }
    let per_landmark = names
        .iter()
        .zip(&per)
        .filter(|(_, v)| !v.is_empty())
        .map(|(n, v)| Stats::compute(n, v, spec))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<f64> = per.concat();
    Ok(EvalReport {
        per_landmark,
        pooled: Stats::compute("all", &all, spec)?,
        rows,
        skipped,
    })
}

/// Inter-observer distances between two annotation sets of the same images.
pub fn observer_variability(
    a: &[LandmarkSet],
    b: &[LandmarkSet],
    spacing: &[f64],
    spec: &SdrSpec,
) -> Result<EvalReport> {
    if a.len() != b.len() {
        return Err(Error::InvalidConfig(format!(
            "observer sets cover {} and {} images",
            a.len(),
            b.len()
        )));
    }
    let cases: Vec<EvalCase> = a
        .iter()
        .zip(b)
        .enumerate()
        .map(|(i, (p, t))| EvalCase {
            id: format!("{i}"),
            pred: p.clone(),
            truth: t.clone(),
            spacing: spacing.to_vec(),
        })
        .collect();
    evaluate(&cases, spec)
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Summary table: one row per landmark plus the pooled row.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("landmark,n,median_mm,iqr_mm,q25_mm,q75_mm,mean_mm,max_mm");
        for p in &self.pooled.sdr {
            let _ = write!(s, ",sdr_{}mm", p.threshold_mm);
        }
        s.push('\n');
        for st in self.per_landmark.iter().chain(std::iter::once(&self.pooled)) {
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{}",
                st.name, st.n, st.median, st.iqr, st.q25, st.q75, st.mean, st.max
            );
            for p in &st.sdr {
                let _ = write!(s, ",{}", p.percent);
            }
            s.push('\n');
        }
        s
    }

    pub fn errors_csv(&self) -> String {
        let mut s = String::from("image,landmark,error_mm\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.image, r.landmark, r.error_mm);
        }
        s
    }

    /// Whitespace-separated SDR table: threshold, pooled, then one column
    /// per landmark.
    pub fn sdr_dat(&self) -> String {
        let mut s = String::from("# threshold_mm all");
        for st in &self.per_landmark {
            let _ = write!(s, " {}", st.name);
        }
        s.push('\n');
        for (i, p) in self.pooled.sdr.iter().enumerate() {
            let _ = write!(s, "{} {}", p.threshold_mm, p.percent);
            for st in &self.per_landmark {
                let _ = write!(s, " {}", st.sdr[i].percent);
            }
            s.push('\n');
        }
        s
    }

    /// SDR curve of the pooled distances as a standalone SVG.
    pub fn sdr_svg(&self) -> String {
        let (w, h, m) = (480.0, 320.0, 40.0);
        let pts = &self.pooled.sdr;
        let tmax = pts.last().map_or(1.0, |p| p.threshold_mm);
        let x = |t: f64| m + (w - 2.0 * m) * t / tmax;
        let y = |p: f64| h - m - (h - 2.0 * m) * p / 100.0;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
        );
        let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
        let _ = writeln!(
            s,
            "<path d=\"M{m} {m} L{m} {} L{} {}\" stroke=\"black\" fill=\"none\"/>",
            h - m,
            w - m,
            h - m
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">threshold (mm)</text>",
            w / 2.0,
            h - 8.0
        );
        let _ = writeln!(
            s,
            "<text x=\"12\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">SDR (%)</text>",
            h / 2.0,
            h / 2.0
        );
        let line: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.threshold_mm), y(p.percent)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" stroke=\"steelblue\" stroke-width=\"2\" fill=\"none\"/>",
            line.join(" ")
        );
        for p in pts {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\"><title>{} mm: {:.1}%</title></circle>",
                x(p.threshold_mm),
                y(p.percent),
                p.threshold_mm,
                p.percent
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// Write `report.json`, `summary.csv`, `errors.csv`, `sdr.dat` and `sdr.svg`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.json", self.to_json()?),
            ("summary.csv", self.summary_csv()),
            ("errors.csv", self.errors_csv()),
            ("sdr.dat", self.sdr_dat()),
            ("sdr.svg", self.sdr_svg()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(coords: Vec<Vec<f64>>) -> LandmarkSet {
        let names = (0..coords.len()).map(|i| format!("L{i}")).collect();
        LandmarkSet::all_present(names, coords).unwrap()
    }

    #[test]
    fn distance_examples() {
        let a = set(vec![vec![1.0, 2.0]]);
        assert_eq!(distances(&a, &a, &[0.1, 0.1]).unwrap(), vec![Some(0.0)]);
        let b = set(vec![vec![4.0, 6.0]]);
        let d = distances(&b, &a, &[0.1, 0.1]).unwrap()[0].unwrap();
        assert!((d - 0.5).abs() < 1e-12);
        let p = set(vec![vec![1.0, 1.0, 1.0]]);
        let o = set(vec![vec![0.0, 0.0, 0.0]]);
        let d = distances(&p, &o, &[1.5, 1.5, 1.5]).unwrap()[0].unwrap();
        assert!((d - 2.598076211353316).abs() < 1e-12);
    }

    #[test]
    fn absent_and_mismatch() {
        let a = set(vec![vec![1.0, 2.0], vec![3.0, 3.0]]);
        let mut b = a.clone();
        b.present[1] = false;
        assert_eq!(distances(&a, &b, &[1.0, 1.0]).unwrap(), vec![Some(0.0), None]);
        let mut c = a.clone();
        c.names[0] = "x".into();
        assert!(matches!(distances(&a, &c, &[1.0, 1.0]), Err(Error::NameMismatch(_))));
    }

    #[test]
    fn median_iqr_examples() {
        assert_eq!(median_iqr(&[2.0, 2.0, 2.0]).unwrap(), (2.0, 0.0));
        assert_eq!(median_iqr(&[1.0, 2.0, 3.0, 4.0]).unwrap().0, 2.5);
        assert!(median_iqr(&[]).is_err());
    }

    /// Oracle: textbook definition via explicit rank arithmetic.
    fn oracle_quantile(values: &[f64], p: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let h = (v.len() as f64 - 1.0) * p;
        let below = h.floor();
        let frac = h - below;
        let i = below as usize;
        if i + 1 < v.len() {
            v[i] * (1.0 - frac) + v[i + 1] * frac
        } else {
            v[i]
        }
    }

    #[test]
    fn median_iqr_matches_oracle_on_random_lists() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let n = rng.random_range(1..60);
            let v: Vec<f64> = (0..n).map(|_| (rng.random_range(0..400) as f64) / 8.0).collect();
            let (m, iqr) = median_iqr(&v).unwrap();
            assert_eq!(m, oracle_quantile(&v, 0.5));
            assert_eq!(iqr, oracle_quantile(&v, 0.75) - oracle_quantile(&v, 0.25));
        }
    }

    #[test]
    fn sdr_examples() {
        let spec = SdrSpec::new(vec![0.5, 2.5, 10.0]).unwrap();
        let r = sdr(&[1.0, 2.0, 3.0], &spec).unwrap();
        assert_eq!(r[0].percent, 0.0);
        assert!((r[1].percent - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(r[2].percent, 100.0);
        // ties at the threshold count as failures
        let t = sdr(&[2.0], &SdrSpec::challenge()).unwrap();
        assert_eq!(t[0].percent, 0.0);
        assert_eq!(SdrSpec::challenge().thresholds(), &[2.0, 2.5, 3.0, 4.0]);
        assert_eq!(SdrSpec::curve().thresholds().len(), 10);
        assert!(SdrSpec::new(vec![1.0, 1.0]).is_err());
        assert!(SdrSpec::new(vec![0.0, 1.0]).is_err());
        assert!(serde_json::from_str::<SdrSpec>("[2, 1]").is_err());
    }

    proptest! {
        #[test]
        fn sdr_monotone(values in proptest::collection::vec(0.0f64..20.0, 1..50)) {
            let r = sdr(&values, &SdrSpec::curve()).unwrap();
            for w in r.windows(2) {
                prop_assert!(w[1].percent >= w[0].percent);
            }
            let inf = SdrSpec::new(vec![f64::MAX]).unwrap();
            prop_assert_eq!(sdr(&values, &inf).unwrap()[0].percent, 100.0);
        }

        #[test]
        fn distances_translation_invariant(
            p in proptest::collection::vec(-50.0f64..50.0, 3),
            q in proptest::collection::vec(-50.0f64..50.0, 3),
            t in proptest::collection::vec(-50.0f64..50.0, 3),
        ) {
            let a = set(vec![p.clone()]);
            let b = set(vec![q.clone()]);
            let d0 = distances(&a, &b, &[0.7, 1.1, 1.3]).unwrap()[0].unwrap();
            let d1 = distances(&a.translated(&t), &b.translated(&t), &[0.7, 1.1, 1.3]).unwrap()[0].unwrap();
            prop_assert!((d0 - d1).abs() < 1e-9);
        }
    }

    #[test]
    fn observer_variability_properties() {
        let a = vec![set(vec![vec![0.0, 0.0], vec![5.0, 5.0]]), set(vec![vec![1.0, 1.0], vec![2.0, 2.0]])];
        let b = vec![set(vec![vec![3.0, 4.0], vec![5.0, 6.0]]), set(vec![vec![1.0, 2.0], vec![2.0, 2.0]])];
        let spec = SdrSpec::challenge();
        let same = observer_variability(&a, &a, &[1.0, 1.0], &spec).unwrap();
        assert!(same.rows.iter().all(|r| r.error_mm == 0.0));
        let ab = observer_variability(&a, &b, &[1.0, 1.0], &spec).unwrap();
        let ba = observer_variability(&b, &a, &[1.0, 1.0], &spec).unwrap();
        assert_eq!(ab.pooled, ba.pooled);
        assert_eq!(ab.per_landmark, ba.per_landmark);
        let concat: Vec<f64> = ab.rows.iter().map(|r| r.error_mm).collect();
        assert_eq!(ab.pooled, Stats::compute("all", &concat, &spec).unwrap());
        assert!(observer_variability(&a, &b[..1], &[1.0, 1.0], &spec).is_err());
    }

    #[test]
    fn report_outputs() {
        let cases = vec![EvalCase {
            id: "img".into(),
            pred: set(vec![vec![1.0, 1.0], vec![0.0, 3.0]]),
            truth: set(vec![vec![0.0, 0.0], vec![0.0, 0.0]]),
            spacing: vec![1.0, 1.0],
        }];
        let r = evaluate(&cases, &SdrSpec::challenge()).unwrap();
        assert_eq!(r.pooled.n, 2);
        assert_eq!(r.summary_csv().lines().count(), 4);
        assert_eq!(r.sdr_dat().lines().count(), 5);
        assert!(r.sdr_svg().starts_with("<svg"));
        let dir = tempfile::tempdir().unwrap();
        r.write_all(dir.path()).unwrap();
        let back: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
