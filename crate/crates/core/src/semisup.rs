//! PCA reduction and RBF label spreading over instance feature vectors.
//!
//! The affinity matrix is dense, so memory grows as n² (about 32 MB for
//! 2000 instances).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Projected features plus everything needed to project new rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedFeatures {
    /// n × d projection.
    pub data: DMatrix<f64>,
    /// Fraction of total variance carried by the kept components.
    pub retained: f64,
    /// Input columns that had non-zero variance.
    pub columns: Vec<usize>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// columns.len() × d, one basis vector per column.
    pub basis: DMatrix<f64>,
    /// Variances of the kept components, descending.
    pub eigenvalues: Vec<f64>,
}

/// Relative slack when comparing cumulative variance with the target, so
/// that `variance_kept = 1` selects the numerical rank.
const MASS_TOLERANCE: f64 = 1e-10;

/// Z-normalizes columns (population standard deviation, zero-variance
/// columns dropped) and keeps the fewest principal components whose
/// variance share reaches `variance_kept`.
pub fn pca_reduce(features: &[Vec<f64>], variance_kept: f64) -> Result<ReducedFeatures> {
    let n = features.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "PCA needs at least 2 rows, got {n}"
        )));
    }
    if !(variance_kept > 0.0 && variance_kept <= 1.0) {
        return Err(Error::invalid(format!(
            "variance_kept = {variance_kept} outside (0, 1]"
        )));
    }
    let m = features[0].len();
    if let Some(r) = features.iter().position(|r| r.len() != m) {
        return Err(Error::invalid(format!(
            "row {r} has {} columns, expected {m}",
            features[r].len()
        )));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("features must be finite"));
    }
    let nf = n as f64;
    let (mut columns, mut mean, mut scale) = (Vec::new(), Vec::new(), Vec::new());
    for j in 0..m {
        let mu = features.iter().map(|r| r[j]).sum::<f64>() / nf;
        let var = features.iter().map(|r| (r[j] - mu).powi(2)).sum::<f64>() / nf;
        if var > 0.0 {
            columns.push(j);
            mean.push(mu);
            scale.push(var.sqrt());
        }
    }
    let k = columns.len();
    let z = DMatrix::from_fn(n, k, |i, c| (features[i][columns[c]] - mean[c]) / scale[c]);
    let cov = z.transpose() * &z / nf;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();
    let mut d = 0;
    let mut mass = 0.0;
    while d < k && mass < variance_kept * total - MASS_TOLERANCE * total {
        mass += values[d];
        d += 1;
    }
    let mut basis = DMatrix::zeros(k, d);
    for (c, &i) in order[..d].iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let mut pivot = 0;
        for r in 1..k {
            if v[r].abs() > v[pivot].abs() {
                pivot = r;
            }
        }
        if v[pivot] < 0.0 {
            v.neg_mut();
        }
        basis.set_column(c, &v);
    }
    Ok(ReducedFeatures {
        data: z * &basis,
        retained: if total > 0.0 { mass / total } else { 1.0 },
        columns,
        mean,
        scale,
        basis,
        eigenvalues: values[..d].to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpreadOptions {
    pub alpha: f64,
    /// RBF width; `None` picks `1 / (2 median²)` over positive pairwise
    /// distances.
    pub gamma: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SpreadOptions {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            gamma: None,
            max_iter: 10_000,
            tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpreadResult {
    pub labels: Vec<usize>,
    /// Share of the winning class in the row of F; 0 for unreachable rows.
    pub confidence: Vec<f64>,
    /// Row-normalized F.
    pub distribution: DMatrix<f64>,
    /// Rows that received no mass from any seed and fell back to the
    /// majority seed class.
    pub unreachable: Vec<bool>,
    pub gamma: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Max absolute change of F per iteration.
    pub changes: Vec<f64>,
}

fn squared_distances(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        (0..x.ncols())
            .map(|c| (x[(i, c)] - x[(j, c)]).powi(2))
            .sum::<f64>()
    })
}

/// `1 / (2 median²)` of the positive pairwise distances, 1 if there are none.
pub fn default_gamma(x: &DMatrix<f64>) -> f64 {
    let d2 = squared_distances(x);
    let n = x.nrows();
    let mut d: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| d2[(i, j)].sqrt())
        .filter(|&v| v > 0.0)
        .collect();
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let median = if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    };
    1.0 / (2.0 * median * median)
}

/// Spreads seed classes over the RBF affinity graph. `seeds` maps row
/// index to class id in `0..classes`; every class needs at least one seed.
pub fn label_spread(
    x: &DMatrix<f64>,
    seeds: &BTreeMap<usize, usize>,
    classes: usize,
    opts: &SpreadOptions,
) -> Result<SpreadResult> {
    let n = x.nrows();
    if seeds.is_empty() {
        return Err(Error::invalid("label spreading needs at least one seed"));
    }
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::invalid(format!(
            "alpha = {} outside (0, 1)",
            opts.alpha
        )));
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::invalid(
            "tol must be positive and max_iter at least 1",
        ));
    }
    let mut seeded_classes = vec![0usize; classes];
    for (&row, &class) in seeds {
        if row >= n {
            return Err(Error::invalid(format!(
                "seed row {row} out of range for {n} rows"
            )));
        }
        if class >= classes {
            return Err(Error::invalid(format!(
                "seed class {class} outside 0..{classes}"
            )));
        }
        seeded_classes[class] += 1;
    }
    if let Some(c) = seeded_classes.iter().position(|&k| k == 0) {
        return Err(Error::invalid(format!("class {c} has no seed")));
    }
    let gamma = match opts.gamma {
        Some(g) if g > 0.0 && g.is_finite() => g,
        Some(g) => return Err(Error::invalid(format!("gamma = {g} must be positive"))),
        None => default_gamma(x),
    };

    let d2 = squared_distances(x);
    let mut w = d2.map(|v| (-gamma * v).exp());
    w.fill_diagonal(0.0);
    let inv_sqrt: Vec<f64> = w
        .row_iter()
        .map(|r| {
            let deg = r.sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let s = DMatrix::from_fn(n, n, |i, j| inv_sqrt[i] * w[(i, j)] * inv_sqrt[j]);

    let mut y = DMatrix::zeros(n, classes);
    for (&row, &class) in seeds {
        y[(row, class)] = 1.0;
    }
    let base = &y * (1.0 - opts.alpha);
    let mut f = y.clone();
    let mut changes = Vec::new();
    let mut converged = false;
    while changes.len() < opts.max_iter {
        let next = &s * &f * opts.alpha + &base;
        let change = (&next - &f).amax();
        f = next;
        changes.push(change);
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    // majority seed class, ties to the lowest id
    let majority = (0..classes).fold(0, |best, c| {
        if seeded_classes[c] > seeded_classes[best] {
            c
        } else {
            best
        }
    });
    let mut labels = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    let mut unreachable = Vec::with_capacity(n);
    let mut distribution = DMatrix::zeros(n, classes);
    for i in 0..n {
        let row = f.row(i);
        let total: f64 = row.sum();
        if total > 0.0 {
            let best = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            for c in 0..classes {
                distribution[(i, c)] = row[c] / total;
            }
            labels.push(best);
            confidence.push(row[best] / total);
            unreachable.push(false);
        } else {
            labels.push(majority);
            confidence.push(0.0);
            unreachable.push(true);
        }
    }
    Ok(SpreadResult {
        labels,
        confidence,
        distribution,
        unreachable,
        gamma,
        iterations: changes.len(),
        converged,
        changes,
    })
}

/// Operator labels keyed `<image>/<id>`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedFile {
    pub labels: BTreeMap<String, usize>,
}

impl SeedFile {
    /// Class count implied by the largest class id.
    pub fn class_count(&self) -> usize {
        self.labels.values().max().map_or(0, |&c| c + 1)
    }

    /// Row indices for `keys`; every seeded key must be present.
    pub fn resolve(&self, keys: &[String]) -> Result<BTreeMap<usize, usize>> {
        let index: BTreeMap<&str, usize> = keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.as_str(), i))
            .collect();
        self.labels
            .iter()
            .map(|(k, &c)| {
                index
                    .get(k.as_str())
                    .map(|&i| (i, c))
                    .ok_or_else(|| Error::Dataset(format!("seed `{k}` has no feature row")))
            })
            .collect()
    }
}

/// `key,label,confidence,seeded,unreachable` rows.
pub fn write_pseudo_labels<W: std::io::Write>(
    w: W,
    keys: &[String],
    seeds: &BTreeMap<usize, usize>,
    result: &SpreadResult,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["key", "label", "confidence", "seeded", "unreachable"])?;
    for (i, key) in keys.iter().enumerate() {
        out.write_record([
            key.clone(),
            result.labels[i].to_string(),
            result.confidence[i].to_string(),
            seeds.contains_key(&i).to_string(),
            result.unreachable[i].to_string(),
        ])?;
    }
    out.flush()
        .map_err(|e| Error::Format(format!("writing pseudo-labels: {e}")))
}
