//! Dataset generation, CSV ingestion, and normalization.
//!
//! Normalization maps every feature into [-1, 1] by its observed range
//! (constant columns map to 0), then divides every sample by the maximum
//! L2 row norm so that ||x_n|| <= 1 holds for all n. Regression targets are
//! scaled into [-1, 1] by the maximum absolute value.

use cape_core::error::{CapeError, Result};
use cape_core::functional::{LossKind, LossSpec};
use cape_core::solvers::minimize_quadratic;
use cape_core::StreamSeed;
use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizationReport {
    /// Observed (min, max) per feature before range mapping.
    pub feature_ranges: Vec<(f64, f64)>,
    /// Divisor applied to every sample after range mapping (max row L2 norm).
    pub l2_scale: f64,
    /// Divisor applied to regression targets (1.0 for labels).
    pub y_scale: f64,
    /// Rows rejected at ingestion (missing or non-numeric cells).
    pub rejected_rows: usize,
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub normalization: NormalizationReport,
}

/// Range-map features to [-1,1], scale rows to max norm 1, scale targets.
pub fn normalize(
    mut x: Array2<f64>,
    mut y: Array1<f64>,
    scale_targets: bool,
    rejected_rows: usize,
) -> Result<DatasetBundle> {
    if x.nrows() == 0 {
        return Err(CapeError::EmptyData("dataset has no rows".into()));
    }
    let mut feature_ranges = Vec::with_capacity(x.ncols());
    for mut col in x.columns_mut() {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in col.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        feature_ranges.push((lo, hi));
        if hi > lo {
            col.map_inplace(|v| *v = 2.0 * (*v - lo) / (hi - lo) - 1.0);
        } else {
            // degenerate (constant) column carries no information
            col.fill(0.0);
        }
    }
    let l2_scale = x
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    x.map_inplace(|v| *v /= l2_scale);
    let y_scale = if scale_targets {
        let m = y.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-300);
        y.map_inplace(|v| *v /= m);
        m
    } else {
        1.0
    };
    Ok(DatasetBundle {
        x,
        y,
        normalization: NormalizationReport { feature_ranges, l2_scale, y_scale, rejected_rows },
    })
}

/// Synthetic regression: X and w* from seeded standard normals,
/// y = X w* + N(0, noise_sd^2), then the standard normalization. The
/// returned reference weights are the noise-free OLS fit on the normalized
/// data, so parameter-recovery error is measured in the normalized space.
pub fn gen_synthetic_regression(
    d: usize,
    n: usize,
    noise_sd: f64,
    seed: &StreamSeed,
) -> Result<(DatasetBundle, Array1<f64>)> {
    if d == 0 || n == 0 {
        return Err(CapeError::InvalidParameter("need D >= 1 and N >= 1".into()));
    }
    let mut rng = seed.stream(&[0xda7a, 0x11]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut x = Array2::<f64>::zeros((n, d));
    x.map_inplace(|v| *v = normal.sample(&mut rng));
    let w_star = Array1::from_iter((0..d).map(|_| normal.sample(&mut rng)));
    let mut y = x.dot(&w_star);
    if noise_sd > 0.0 {
        let noise = Normal::new(0.0, noise_sd).expect("valid sd");
        y.map_inplace(|v| *v += noise.sample(&mut rng));
    }
    let bundle = normalize(x, y, true, 0)?;
    // reference weights in the normalized space
    let coeffs = cape_core::functional::build_coeffs_linear(&bundle.x, &bundle.y)?;
    let obj = cape_core::functional::PerturbedObjective {
        coeffs,
        provenance: cape_core::functional::Provenance::Exact,
    };
    let w_true = minimize_quadratic(&obj, 0.0)?.w_hat;
    Ok((bundle, w_true))
}

/// Two Gaussian classes with unit variance and means `separation` apart
/// along a fixed direction, balanced labels, seeded 80/20 train/test split.
#[derive(Debug, Clone)]
pub struct ClassBundle {
    pub x_train: Array2<f64>,
    pub y_train: Array1<f64>,
    pub x_test: Array2<f64>,
    pub y_test: Array1<f64>,
}

pub fn gen_synthetic_classes(
    d: usize,
    n: usize,
    separation: f64,
    seed: &StreamSeed,
) -> Result<ClassBundle> {
    if d == 0 || n < 5 {
        return Err(CapeError::InvalidParameter("need D >= 1 and N >= 5".into()));
    }
    let mut rng = seed.stream(&[0xda7a, 0x22]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut x = Array2::<f64>::zeros((n, d));
    let mut y = Array1::<f64>::zeros(n);
    for r in 0..n {
        // alternate labels for exact balance, then shuffle via seeded perm
        let label = (r % 2) as f64;
        y[r] = label;
        for c in 0..d {
            x[(r, c)] = normal.sample(&mut rng) + label * separation / (d as f64).sqrt();
        }
    }
    // seeded permutation before the split
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let x = x.select(Axis(0), &perm);
    let y = y.select(Axis(0), &perm);
    let n_train = (n * 4) / 5;
    Ok(ClassBundle {
        x_train: x.slice(s![..n_train, ..]).to_owned(),
        y_train: y.slice(s![..n_train]).to_owned(),
        x_test: x.slice(s![n_train.., ..]).to_owned(),
        y_test: y.slice(s![n_train..]).to_owned(),
    })
}

/// Load a rectangular numeric CSV with a header row, take `target_column`
/// as y, reject rows with missing or non-numeric cells, and normalize.
pub fn load_csv(path: &str, target_column: &str, spec: &LossSpec) -> Result<DatasetBundle> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CapeError::InvalidParameter(format!("cannot open {path}: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| CapeError::InvalidParameter(format!("bad header: {e}")))?
        .clone();
    let target_idx = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| {
            CapeError::InvalidParameter(format!("target column '{target_column}' not found"))
        })?;
    let d = headers.len() - 1;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut rejected = 0usize;
    for rec in reader.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(_) => {
                rejected += 1;
                continue;
            }
        };
        if rec.len() != headers.len() {
            rejected += 1;
            continue;
        }
        let parsed: Option<Vec<f64>> = rec
            .iter()
            .map(|cell| {
                let c = cell.trim();
                if c.is_empty() || c == "?" {
                    None
                } else {
                    c.parse::<f64>().ok()
                }
            })
            .collect();
        match parsed {
            Some(vals) => {
                let mut feats = Vec::with_capacity(d);
                for (i, v) in vals.iter().enumerate() {
                    if i != target_idx {
                        feats.push(*v);
                    }
                }
                ys.push(vals[target_idx]);
                rows.push(feats);
            }
            None => rejected += 1,
        }
    }
    if rows.is_empty() {
        return Err(CapeError::EmptyData(format!(
            "{path}: no usable rows ({rejected} rejected)"
        )));
    }
    let n = rows.len();
    let mut x = Array2::<f64>::zeros((n, d));
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            x[(r, c)] = v;
        }
    }
    let y = Array1::from(ys);
    let scale_targets = spec.kind == LossKind::LinearRegression;
    if spec.kind == LossKind::LogisticRegression {
        if let Some(bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(CapeError::BoundViolation(format!(
                "logistic target must be 0/1, found {bad}"
            )));
        }
    }
    normalize(x, y, scale_targets, rejected)
}

/// Split a dataset into S equal-size site shards (rows 0..N_s to site 0,
/// and so on); trailing remainder rows are dropped to keep the symmetric
/// setting exact.
pub fn split_sites(bundle: &DatasetBundle, s: usize) -> Result<Vec<(Array2<f64>, Array1<f64>)>> {
    let n = bundle.x.nrows();
    if s == 0 || n < s {
        return Err(CapeError::InvalidParameter(format!("cannot split {n} rows into {s} sites")));
    }
    let n_s = n / s;
    Ok((0..s)
        .map(|i| {
            let lo = i * n_s;
            let hi = lo + n_s;
            (
                bundle.x.slice(s![lo..hi, ..]).to_owned(),
                bundle.y.slice(s![lo..hi]).to_owned(),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::io::Write;

    #[test]
    fn normalization_invariants_hold() {
        for cfg in 0..100u64 {
            let seed = StreamSeed::new(1000 + cfg);
            let (bundle, _) =
                gen_synthetic_regression(3 + (cfg % 5) as usize, 20 + (cfg % 40) as usize, 0.1, &seed)
                    .unwrap();
            for row in bundle.x.rows() {
                assert!(row.dot(&row).sqrt() <= 1.0 + 1e-9);
            }
            for &v in bundle.x.iter() {
                assert!((-1.0..=1.0).contains(&v));
            }
            for &v in bundle.y.iter() {
                assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
            }
        }
    }

    #[test]
    fn noise_free_regression_recovers_reference_weights() {
        let seed = StreamSeed::new(7);
        let (bundle, w_true) = gen_synthetic_regression(5, 500, 0.0, &seed).unwrap();
        let coeffs = cape_core::functional::build_coeffs_linear(&bundle.x, &bundle.y).unwrap();
        let obj = cape_core::functional::PerturbedObjective {
            coeffs,
            provenance: cape_core::functional::Provenance::Exact,
        };
        let w = minimize_quadratic(&obj, 0.0).unwrap().w_hat;
        for (a, b) in w.iter().zip(w_true.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-8, epsilon = 1e-10);
        }
    }

    #[test]
    fn datasets_are_deterministic() {
        let a = gen_synthetic_regression(4, 50, 0.3, &StreamSeed::new(42)).unwrap();
        let b = gen_synthetic_regression(4, 50, 0.3, &StreamSeed::new(42)).unwrap();
        assert_eq!(a.0.x, b.0.x);
        assert_eq!(a.0.y, b.0.y);
        assert_eq!(a.1, b.1);
        let c = gen_synthetic_classes(3, 100, 1.0, &StreamSeed::new(9)).unwrap();
        let d = gen_synthetic_classes(3, 100, 1.0, &StreamSeed::new(9)).unwrap();
        assert_eq!(c.x_train, d.x_train);
        assert_eq!(c.y_test, d.y_test);
    }

    #[test]
    fn classes_balanced_and_split() {
        let b = gen_synthetic_classes(4, 200, 1.0, &StreamSeed::new(3)).unwrap();
        assert_eq!(b.x_train.nrows(), 160);
        assert_eq!(b.x_test.nrows(), 40);
        let pos: f64 = b.y_train.sum() + b.y_test.sum();
        assert!((pos - 100.0).abs() <= 1.0);
    }

    #[test]
    fn csv_hand_example_normalizes_as_computed() {
        // two features: f1 in [0, 4] -> [-1, 1]; f2 constant -> 0; max row
        // norm after mapping is 1, so the L2 step divides by 1
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "f1,f2,target").unwrap();
        for (a, t) in [(0.0, 0.5), (1.0, -0.25), (2.0, 1.0), (3.0, 0.0), (4.0, -1.0)] {
            writeln!(f, "{a},7.5,{t}").unwrap();
        }
        let b = load_csv(f.path().to_str().unwrap(), "target", &LossSpec::linear()).unwrap();
        let expect_f1 = [-1.0, -0.5, 0.0, 0.5, 1.0];
        for (r, &e) in expect_f1.iter().enumerate() {
            assert_relative_eq!(b.x[(r, 0)], e, epsilon = 1e-12);
            assert_eq!(b.x[(r, 1)], 0.0);
        }
        assert_relative_eq!(b.normalization.l2_scale, 1.0, epsilon = 1e-12);
        assert_relative_eq!(b.y[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn csv_rejects_bad_rows_and_counts_them() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a,b,t").unwrap();
        writeln!(f, "1.0,2.0,0.1").unwrap();
        writeln!(f, "1.0,,0.2").unwrap();
        writeln!(f, "x,2.0,0.3").unwrap();
        writeln!(f, "3.0,4.0,0.4").unwrap();
        let b = load_csv(f.path().to_str().unwrap(), "t", &LossSpec::linear()).unwrap();
        assert_eq!(b.x.nrows(), 2);
        assert_eq!(b.normalization.rejected_rows, 2);
    }

    #[test]
    fn csv_header_only_errors() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a,b,t").unwrap();
        assert!(load_csv(f.path().to_str().unwrap(), "t", &LossSpec::linear()).is_err());
    }

    #[test]
    fn split_sites_shapes() {
        let seed = StreamSeed::new(5);
        let (bundle, _) = gen_synthetic_regression(3, 103, 0.1, &seed).unwrap();
        let sites = split_sites(&bundle, 5).unwrap();
        assert_eq!(sites.len(), 5);
        for (x, y) in &sites {
            assert_eq!(x.nrows(), 20);
            assert_eq!(y.len(), 20);
        }
    }
}
