use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDim {
    pub name: String,
    pub choices: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousDim {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegerDim {
    pub name: String,
    pub lo: i64,
    pub hi: i64,
}

/// Mixed search space. Numeric dimensions are ordered continuous first,
/// then integer, wherever they appear as vectors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    #[serde(default)]
    pub categorical: Vec<CategoricalDim>,
    #[serde(default)]
    pub continuous: Vec<ContinuousDim>,
    #[serde(default)]
    pub integer: Vec<IntegerDim>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Choice(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            ParamValue::Int(v) => Some(v as f64),
            ParamValue::Float(v) => Some(v),
            ParamValue::Choice(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Choice(s) => Some(s),
            _ => None,
        }
    }
}

/// One assignment of every dimension, keyed by name.
pub type Config = BTreeMap<String, ParamValue>;

/// A point in internal coordinates: one choice index per categorical
/// dimension and unit-cube coordinates for the numeric dimensions.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Point {
    pub cats: Vec<usize>,
    pub unit: Vec<f64>,
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        let all = self
            .categorical
            .iter()
            .map(|d| &d.name)
            .chain(self.continuous.iter().map(|d| &d.name))
            .chain(self.integer.iter().map(|d| &d.name));
        for name in all {
            if !names.insert(name) {
                return Err(Error::invalid(format!(
                    "dimension name {name:?} is not unique"
                )));
            }
        }
        for d in &self.categorical {
            if d.choices.is_empty() {
                return Err(Error::invalid(format!(
                    "categorical {:?} has no choices",
                    d.name
                )));
            }
        }
        for d in &self.continuous {
            if !(d.lo < d.hi) || !d.lo.is_finite() || !d.hi.is_finite() {
                return Err(Error::invalid(format!(
                    "continuous {:?} needs lo < hi",
                    d.name
                )));
            }
        }
        for d in &self.integer {
            if d.lo >= d.hi {
                return Err(Error::invalid(format!(
                    "integer {:?} needs lo < hi",
                    d.name
                )));
            }
        }
        if names.is_empty() {
            return Err(Error::invalid("search space has no dimensions"));
        }
        Ok(())
    }

    pub fn numeric_len(&self) -> usize {
        self.continuous.len() + self.integer.len()
    }

    /// Number of categorical combinations.
    pub fn partition_count(&self) -> usize {
        self.categorical.iter().map(|d| d.choices.len()).product()
    }

    pub(crate) fn partition_cats(&self, mut index: usize) -> Vec<usize> {
        let mut cats = vec![0; self.categorical.len()];
        for (i, d) in self.categorical.iter().enumerate().rev() {
            cats[i] = index % d.choices.len();
            index /= d.choices.len();
        }
        cats
    }

    /// Number of discrete cells when the space has no continuous dimension.
    pub fn discrete_cells(&self) -> Option<u128> {
        if !self.continuous.is_empty() {
            return None;
        }
        let mut n: u128 = self.partition_count() as u128;
        for d in &self.integer {
            n = n.saturating_mul((d.hi - d.lo + 1) as u128);
        }
        Some(n)
    }

    /// Snaps integer coordinates onto their lattice.
    pub(crate) fn snap(&self, mut p: Point) -> Point {
        let nc = self.continuous.len();
        for (j, d) in self.integer.iter().enumerate() {
            let u = p.unit[nc + j].clamp(0.0, 1.0);
            let span = (d.hi - d.lo) as f64;
            let v = (d.lo as f64 + u * span).round();
            p.unit[nc + j] = (v - d.lo as f64) / span;
        }
        for u in &mut p.unit[..nc] {
            *u = u.clamp(0.0, 1.0);
        }
        p
    }

    pub(crate) fn to_config(&self, p: &Point) -> Config {
        let mut c = Config::new();
        for (d, &i) in self.categorical.iter().zip(&p.cats) {
            c.insert(d.name.clone(), ParamValue::Choice(d.choices[i].clone()));
        }
        let nc = self.continuous.len();
        for (d, &u) in self.continuous.iter().zip(&p.unit) {
            c.insert(
                d.name.clone(),
                ParamValue::Float(d.lo + u.clamp(0.0, 1.0) * (d.hi - d.lo)),
            );
        }
        for (d, &u) in self.integer.iter().zip(&p.unit[nc..]) {
            let v = (d.lo as f64 + u.clamp(0.0, 1.0) * (d.hi - d.lo) as f64).round() as i64;
            c.insert(d.name.clone(), ParamValue::Int(v.clamp(d.lo, d.hi)));
        }
        c
    }

    /// Inverse of [`to_config`](Self::to_config); rejects out-of-range values.
    pub(crate) fn from_config(&self, c: &Config) -> Result<Point> {
        let missing = |name: &str| Error::invalid(format!("config lacks dimension {name:?}"));
        let mut cats = Vec::with_capacity(self.categorical.len());
        for d in &self.categorical {
            let v = c
                .get(&d.name)
                .and_then(ParamValue::as_str)
                .ok_or_else(|| missing(&d.name))?;
            let i =
                d.choices.iter().position(|x| x == v).ok_or_else(|| {
                    Error::invalid(format!("{v:?} is not a choice of {:?}", d.name))
                })?;
            cats.push(i);
        }
        let mut unit = Vec::with_capacity(self.numeric_len());
        for d in &self.continuous {
            let v = c
                .get(&d.name)
                .and_then(ParamValue::as_f64)
                .ok_or_else(|| missing(&d.name))?;
            if !(d.lo..=d.hi).contains(&v) {
                return Err(Error::invalid(format!(
                    "{} = {v} outside [{}, {}]",
                    d.name, d.lo, d.hi
                )));
            }
            unit.push((v - d.lo) / (d.hi - d.lo));
        }
        for d in &self.integer {
            let v = c
                .get(&d.name)
                .and_then(ParamValue::as_f64)
                .ok_or_else(|| missing(&d.name))?;
            if !(d.lo as f64..=d.hi as f64).contains(&v) {
                return Err(Error::invalid(format!(
                    "{} = {v} outside [{}, {}]",
                    d.name, d.lo, d.hi
                )));
            }
            unit.push((v - d.lo as f64) / (d.hi - d.lo) as f64);
        }
        Ok(Point { cats, unit })
    }

    /// Unit coordinates of the all-zero numeric vector, clamped into range.
    pub(crate) fn zero_unit(&self) -> Vec<f64> {
        let cont = self
            .continuous
            .iter()
            .map(|d| (0.0f64.clamp(d.lo, d.hi) - d.lo) / (d.hi - d.lo));
        let int = self
            .integer
            .iter()
            .map(|d| (0i64.clamp(d.lo, d.hi) - d.lo) as f64 / (d.hi - d.lo) as f64);
        cont.chain(int).collect()
    }

    pub(crate) fn sample_uniform(&self, rng: &mut ChaCha8Rng) -> Point {
        let cats = self
            .categorical
            .iter()
            .map(|d| rng.random_range(0..d.choices.len()))
            .collect();
        let nc = self.continuous.len();
        let mut unit: Vec<f64> = (0..nc).map(|_| rng.random::<f64>()).collect();
        for d in &self.integer {
            let v = rng.random_range(d.lo..=d.hi);
            unit.push((v - d.lo) as f64 / (d.hi - d.lo) as f64);
        }
        Point { cats, unit }
    }

    /// Surrogate feature vector: one-hot categoricals, then unit numerics.
    pub(crate) fn features(&self, p: &Point) -> Vec<f64> {
        let mut f = Vec::new();
        for (d, &i) in self.categorical.iter().zip(&p.cats) {
            f.extend((0..d.choices.len()).map(|j| if j == i { 1.0 } else { 0.0 }));
        }
        f.extend_from_slice(&p.unit);
        f
    }

    /// Every discrete cell in lexicographic order.
    pub(crate) fn enumerate_cells(&self) -> Vec<Point> {
        let sizes: Vec<usize> = self
            .integer
            .iter()
            .map(|d| (d.hi - d.lo + 1) as usize)
            .collect();
        let per_partition: usize = sizes.iter().product();
        let mut out = Vec::with_capacity(self.partition_count() * per_partition);
        for part in 0..self.partition_count() {
            let cats = self.partition_cats(part);
            for mut k in 0..per_partition {
                let mut unit = vec![0.0; sizes.len()];
                for j in (0..sizes.len()).rev() {
                    unit[j] = (k % sizes[j]) as f64 / (sizes[j] - 1) as f64;
                    k /= sizes[j];
                }
                out.push(Point {
                    cats: cats.clone(),
                    unit,
                });
            }
        }
        out
    }
}

/// Latin hypercube sample of `n` points in the unit cube of dimension `d`.
pub(crate) fn latin_hypercube(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    use rand::seq::SliceRandom;
    let mut points = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (i, p) in points.iter_mut().enumerate() {
            p[j] = (strata[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn space() -> SearchSpace {
        serde_json::from_str(
            r#"{"categorical":[{"name":"m","choices":["a","b","c"]},{"name":"h","choices":["x","y"]}],
                "continuous":[{"name":"t","lo":-1.0,"hi":1.0}],
                "integer":[{"name":"k","lo":-2,"hi":2}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn config_roundtrip() {
        let s = space();
        s.validate().unwrap();
        let p = s.snap(Point {
            cats: vec![2, 1],
            unit: vec![0.25, 0.6],
        });
        let c = s.to_config(&p);
        assert_eq!(c["k"], ParamValue::Int(0));
        assert_eq!(c["t"], ParamValue::Float(-0.5));
        assert_eq!(s.from_config(&c).unwrap(), p);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(text, r#"{"h":"y","k":0,"m":"c","t":-0.5}"#);
        assert_eq!(serde_json::from_str::<Config>(&text).unwrap(), c);
    }

    #[test]
    fn partitions_are_distinct() {
        let s = space();
        assert_eq!(s.partition_count(), 6);
        let mut all: Vec<Vec<usize>> = (0..6).map(|i| s.partition_cats(i)).collect();
        assert_eq!(all[5], vec![2, 1]);
        all.dedup();
        assert_eq!(all.len(), 6);
    }

    #[test]
    fn zero_point_is_clamped() {
        let s = space();
        assert_eq!(s.zero_unit(), vec![0.5, 0.5]);
    }

    #[test]
    fn enumeration_counts_cells() {
        let mut s = space();
        s.continuous.clear();
        let cells = s.enumerate_cells();
        assert_eq!(cells.len() as u128, s.discrete_cells().unwrap());
        assert_eq!(cells.len(), 30);
        let mut seen: Vec<Config> = cells.iter().map(|p| s.to_config(p)).collect();
        seen.sort_by_key(|c| serde_json::to_string(c).unwrap());
        seen.dedup();
        assert_eq!(seen.len(), 30);
    }

    #[test]
    fn lhs_strata() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = latin_hypercube(7, 3, &mut rng);
        for j in 0..3 {
            let mut strata: Vec<usize> =
                pts.iter().map(|p| (p[j] * 7.0).floor() as usize).collect();
            strata.sort_unstable();
            assert_eq!(strata, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn invalid_spaces() {
        let mut s = space();
        s.integer[0].name = "m".into();
        assert!(s.validate().is_err());
        let mut s = space();
        s.continuous[0].hi = -1.0;
        assert!(s.validate().is_err());
        assert!(SearchSpace::default().validate().is_err());
    }
}
