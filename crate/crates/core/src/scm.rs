//! Exact discrete structural causal model `B → S → X → Y`, `S → Y`.
//!
//! Every query is a finite sum over the conditional probability tables, so
//! the observational conditional and the back-door adjusted interventional
//! distribution are computed to rounding error.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, substream, Stream};

const ROW_TOL: f64 = 1e-12;

/// Conditional probability tables of the style SCM.
///
/// `p_s_given_b[b][s]`, `p_x_given_s[s][x]`, `p_y_given_xs[x][s][y]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmSpec {
    pub b_vals: Vec<String>,
    pub s_vals: Vec<String>,
    pub x_vals: Vec<String>,
    pub y_vals: Vec<String>,
    pub p_b: Vec<f64>,
    pub p_s_given_b: Vec<Vec<f64>>,
    pub p_x_given_s: Vec<Vec<f64>>,
    pub p_y_given_xs: Vec<Vec<Vec<f64>>>,
}

fn check_row(row: &[f64], len: usize, what: &str) -> Result<()> {
    if row.len() != len {
        return Err(Error::Domain(format!(
            "{what}: expected {len} entries, got {}",
            row.len()
        )));
    }
    if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("{what}: entry {v} outside [0, 1]")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(Error::Domain(format!("{what}: row sums to {total}")));
    }
    Ok(())
}

impl ScmSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: ScmSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let (nb, ns, nx, ny) = self.dims();
        if nb == 0 || ns == 0 || nx == 0 || ny == 0 {
            return Err(Error::Domain("every value set must be non-empty".into()));
        }
        check_row(&self.p_b, nb, "P(B)")?;
        if self.p_s_given_b.len() != nb {
            return Err(Error::Domain(format!("P(S|B) needs {nb} rows")));
        }
        for (b, row) in self.p_s_given_b.iter().enumerate() {
            check_row(row, ns, &format!("P(S|B={})", self.b_vals[b]))?;
        }
        if self.p_x_given_s.len() != ns {
            return Err(Error::Domain(format!("P(X|S) needs {ns} rows")));
        }
        for (s, row) in self.p_x_given_s.iter().enumerate() {
            check_row(row, nx, &format!("P(X|S={})", self.s_vals[s]))?;
        }
        if self.p_y_given_xs.len() != nx {
            return Err(Error::Domain(format!("P(Y|X,S) needs {nx} blocks")));
        }
        for (x, block) in self.p_y_given_xs.iter().enumerate() {
            if block.len() != ns {
                return Err(Error::Domain(format!(
                    "P(Y|X={},S) needs {ns} rows",
                    self.x_vals[x]
                )));
            }
            for (s, row) in block.iter().enumerate() {
                check_row(
                    row,
                    ny,
                    &format!("P(Y|X={},S={})", self.x_vals[x], self.s_vals[s]),
                )?;
            }
        }
        Ok(())
    }

    /// `(|B|, |S|, |X|, |Y|)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (
            self.b_vals.len(),
            self.s_vals.len(),
            self.x_vals.len(),
            self.y_vals.len(),
        )
    }

    /// Marginal `P(S = s) = Σ_b P(s | b) P(b)`.
    pub fn style_marginal(&self) -> Vec<f64> {
        let (_, ns, _, _) = self.dims();
        let mut ps = vec![0.0; ns];
        for (pb, row) in self.p_b.iter().zip(&self.p_s_given_b) {
            for (acc, p) in ps.iter_mut().zip(row) {
                *acc += pb * p;
            }
        }
        ps
    }

    /// A random valid spec with strictly positive tables, for property tests.
    pub fn random(seed: u64, nb: usize, ns: usize, nx: usize, ny: usize) -> Self {
        let mut rng = substream(seed, Stream::Sampling, 0xC0FFEE);
        let mut row = |len: usize| -> Vec<f64> {
            let raw: Vec<f64> = (0..len).map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let mut row: Vec<f64> = raw.iter().map(|v| v / total).collect();
            // put the rounding residue on the last entry so the row sums to 1
            let head: f64 = row[..len - 1].iter().sum();
            row[len - 1] = 1.0 - head;
            row
        };
        let labels = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let p_b = row(nb);
        let p_s_given_b = (0..nb).map(|_| row(ns)).collect();
        let p_x_given_s = (0..ns).map(|_| row(nx)).collect();
        let p_y_given_xs = (0..nx)
            .map(|_| (0..ns).map(|_| row(ny)).collect())
            .collect();
        Self {
            b_vals: labels("b", nb),
            s_vals: labels("s", ns),
            x_vals: labels("x", nx),
            y_vals: labels("y", ny),
            p_b,
            p_s_given_b,
            p_x_given_s,
            p_y_given_xs,
        }
    }
}

/// `P(y | x)` table, one row per `x`. A row is `None` when it could not be
/// estimated (plug-in estimator with an unobserved stratum).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistTable {
    pub x_vals: Vec<String>,
    pub y_vals: Vec<String>,
    pub rows: Vec<Option<Vec<f64>>>,
}

impl DistTable {
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.rows[x].as_ref().map(|r| r[y])
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(Option::is_some)
    }

    /// Total-variation distance per `x` (`None` where either row is missing).
    pub fn tv_by_x(&self, other: &DistTable) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => {
                    Some(0.5 * a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>())
                }
                _ => None,
            })
            .collect()
    }

    /// Largest per-`x` total-variation distance over rows present in both.
    pub fn max_tv(&self, other: &DistTable) -> f64 {
        self.tv_by_x(other)
            .into_iter()
            .flatten()
            .fold(0.0, f64::max)
    }

    /// Largest absolute cell difference over rows present in both.
    pub fn max_abs_diff(&self, other: &DistTable) -> f64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .filter_map(|(a, b)| Some((a.as_ref()?, b.as_ref()?)))
            .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max)
    }

    /// CSV rows `x,y,value`.
    pub fn rows_csv(&self) -> Vec<(String, String, Option<f64>)> {
        let mut out = Vec::new();
        for (xi, x) in self.x_vals.iter().enumerate() {
            for (yi, y) in self.y_vals.iter().enumerate() {
                out.push((x.clone(), y.clone(), self.get(xi, yi)));
            }
        }
        out
    }
}

/// `P(Y | X) = Σ_s P(Y | X, s) P(s | X)` with `P(s | X)` by Bayes' rule.
pub fn observational_conditional(scm: &ScmSpec) -> Result<DistTable> {
    scm.validate()?;
    let (_, ns, nx, ny) = scm.dims();
    let ps = scm.style_marginal();
    let mut rows = Vec::with_capacity(nx);
    for x in 0..nx {
        let joint: Vec<f64> = (0..ns).map(|s| ps[s] * scm.p_x_given_s[s][x]).collect();
        let px: f64 = joint.iter().sum();
        if px <= 0.0 {
            return Err(Error::Domain(format!(
                "P(X = {}) is zero; the conditional is undefined",
                scm.x_vals[x]
            )));
        }
        let mut row = vec![0.0; ny];
        for s in 0..ns {
            let ps_given_x = joint[s] / px;
            for (acc, p) in row.iter_mut().zip(&scm.p_y_given_xs[x][s]) {
                *acc += p * ps_given_x;
            }
        }
        rows.push(Some(row));
    }
    Ok(DistTable {
        x_vals: scm.x_vals.clone(),
        y_vals: scm.y_vals.clone(),
        rows,
    })
}

/// `P(Y | do(X = x)) = Σ_s P(Y | x, s) P(s)`. `P(X | S)` is never read.
pub fn interventional_distribution(scm: &ScmSpec) -> Result<DistTable> {
    scm.validate()?;
    let (_, ns, nx, ny) = scm.dims();
    let ps = scm.style_marginal();
    let rows = (0..nx)
        .map(|x| {
            let mut row = vec![0.0; ny];
            for s in 0..ns {
                for (acc, p) in row.iter_mut().zip(&scm.p_y_given_xs[x][s]) {
                    *acc += p * ps[s];
                }
            }
            Some(row)
        })
        .collect();
    Ok(DistTable {
        x_vals: scm.x_vals.clone(),
        y_vals: scm.y_vals.clone(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScmSample {
    pub b: usize,
    pub s: usize,
    pub x: usize,
    pub y: usize,
}

fn categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Ancestral sampling `B → S → X → Y`.
pub fn sample_observational(scm: &ScmSpec, count: usize, seed: u64) -> Result<Vec<ScmSample>> {
    scm.validate()?;
    if count == 0 {
        return Err(Error::Domain("sample count must be at least 1".into()));
    }
    let mut rng = stream(seed, Stream::Sampling);
    Ok((0..count)
        .map(|_| {
            let b = categorical(&scm.p_b, &mut rng);
            let s = categorical(&scm.p_s_given_b[b], &mut rng);
            let x = categorical(&scm.p_x_given_s[s], &mut rng);
            let y = categorical(&scm.p_y_given_xs[x][s], &mut rng);
            ScmSample { b, s, x, y }
        })
        .collect())
}

struct Counts {
    s: Vec<f64>,
    xs: Vec<Vec<f64>>,
    xsy: Vec<Vec<Vec<f64>>>,
    x: Vec<f64>,
    xy: Vec<Vec<f64>>,
}

fn count(scm: &ScmSpec, samples: &[ScmSample]) -> Result<Counts> {
    let (_, ns, nx, ny) = scm.dims();
    let mut c = Counts {
        s: vec![0.0; ns],
        xs: vec![vec![0.0; ns]; nx],
        xsy: vec![vec![vec![0.0; ny]; ns]; nx],
        x: vec![0.0; nx],
        xy: vec![vec![0.0; ny]; nx],
    };
    for smp in samples {
        if smp.s >= ns || smp.x >= nx || smp.y >= ny {
            return Err(Error::Domain(format!(
                "sample {smp:?} outside the value sets"
            )));
        }
        c.s[smp.s] += 1.0;
        c.xs[smp.x][smp.s] += 1.0;
        c.xsy[smp.x][smp.s][smp.y] += 1.0;
        c.x[smp.x] += 1.0;
        c.xy[smp.x][smp.y] += 1.0;
    }
    Ok(c)
}

/// Stratified back-door estimate `Σ_s P̂(Y | x, s) P̂(s)` from counts.
///
/// A row is left missing when some stratum with `P̂(s) > 0` was never
/// observed together with that `x`.
pub fn plugin_backdoor_estimator(scm: &ScmSpec, samples: &[ScmSample]) -> Result<DistTable> {
    if samples.is_empty() {
        return Err(Error::Domain("no samples".into()));
    }
    let (_, ns, nx, ny) = scm.dims();
    let c = count(scm, samples)?;
    let total = samples.len() as f64;
    let rows = (0..nx)
        .map(|x| {
            let mut row = vec![0.0; ny];
            for s in 0..ns {
                if c.s[s] == 0.0 {
                    continue;
                }
                if c.xs[x][s] == 0.0 {
                    return None;
                }
                let ps = c.s[s] / total;
                for (acc, n) in row.iter_mut().zip(&c.xsy[x][s]) {
                    *acc += n / c.xs[x][s] * ps;
                }
            }
            Some(row)
        })
        .collect();
    Ok(DistTable {
        x_vals: scm.x_vals.clone(),
        y_vals: scm.y_vals.clone(),
        rows,
    })
}

/// Naive frequency estimate of `P(Y | X)`, ignoring the style stratum.
pub fn naive_conditional(scm: &ScmSpec, samples: &[ScmSample]) -> Result<DistTable> {
    let (_, _, nx, _) = scm.dims();
    let c = count(scm, samples)?;
    let rows = (0..nx)
        .map(|x| (c.x[x] > 0.0).then(|| c.xy[x].iter().map(|n| n / c.x[x]).collect()))
        .collect();
    Ok(DistTable {
        x_vals: scm.x_vals.clone(),
        y_vals: scm.y_vals.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary(
        p_b1: f64,
        p_s_eq_b: f64,
        p_x_eq_s: f64,
        y1: impl Fn(usize, usize) -> f64,
    ) -> ScmSpec {
        let v = || vec!["0".to_string(), "1".to_string()];
        let flip = |p: f64, same: usize| {
            if same == 0 {
                vec![p, 1.0 - p]
            } else {
                vec![1.0 - p, p]
            }
        };
        ScmSpec {
            b_vals: v(),
            s_vals: v(),
            x_vals: v(),
            y_vals: v(),
            p_b: vec![1.0 - p_b1, p_b1],
            p_s_given_b: (0..2).map(|b| flip(p_s_eq_b, b)).collect(),
            p_x_given_s: (0..2).map(|s| flip(p_x_eq_s, s)).collect(),
            p_y_given_xs: (0..2)
                .map(|x| (0..2).map(|s| vec![1.0 - y1(x, s), y1(x, s)]).collect())
                .collect(),
        }
    }

    #[test]
    fn degenerate_style_gives_identical_tables() {
        // B = 1 surely, S = B, X = S with prob 0.9, P(Y=1 | X, S) = 0.8 S + 0.1
        let scm = binary(1.0, 1.0, 0.9, |_, s| 0.8 * s as f64 + 0.1);
        let obs = observational_conditional(&scm).unwrap();
        // S is always 1, so P(Y=1 | X) = 0.9 for both x
        for x in 0..2 {
            assert!((obs.get(x, 1).unwrap() - 0.9).abs() < 1e-12);
        }
        let int = interventional_distribution(&scm).unwrap();
        assert!(obs.max_abs_diff(&int) < 1e-12);
    }

    #[test]
    fn unconfounded_tables_agree() {
        let mut scm = binary(0.3, 0.8, 0.9, |x, s| 0.5 * x as f64 + 0.3 * s as f64 + 0.1);
        scm.p_x_given_s = vec![vec![0.4, 0.6], vec![0.4, 0.6]];
        let obs = observational_conditional(&scm).unwrap();
        let int = interventional_distribution(&scm).unwrap();
        assert!(obs.max_abs_diff(&int) < 1e-12);
    }

    #[test]
    fn deterministic_chain_is_one_hot() {
        let scm = binary(1.0, 1.0, 1.0, |x, _| x as f64);
        // X is always 1; X = 0 has zero probability
        assert!(matches!(
            observational_conditional(&scm),
            Err(Error::Domain(_))
        ));
        let mut scm = binary(0.5, 1.0, 1.0, |x, _| x as f64);
        scm.p_s_given_b = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let obs = observational_conditional(&scm).unwrap();
        assert_eq!(obs.rows[0], Some(vec![1.0, 0.0]));
        assert_eq!(obs.rows[1], Some(vec![0.0, 1.0]));
    }

    #[test]
    fn style_free_outcome_makes_intervention_trivial() {
        let scm = binary(0.3, 0.8, 0.9, |x, _| if x == 1 { 0.7 } else { 0.2 });
        let int = interventional_distribution(&scm).unwrap();
        let close = |row: &Option<Vec<f64>>, want: [f64; 2]| {
            let row = row.as_ref().unwrap();
            (row[0] - want[0]).abs() < 1e-12 && (row[1] - want[1]).abs() < 1e-12
        };
        assert!(close(&int.rows[1], [0.3, 0.7]));
        assert!(close(&int.rows[0], [0.8, 0.2]));
    }

    #[test]
    fn invalid_rows_are_rejected() {
        let mut scm = binary(0.3, 0.8, 0.9, |_, _| 0.5);
        scm.p_b = vec![0.3, 0.6];
        assert!(matches!(scm.validate(), Err(Error::Domain(_))));
    }

    #[test]
    fn sampling_is_seeded() {
        let scm = binary(0.3, 0.8, 0.9, |_, _| 0.5);
        let a = sample_observational(&scm, 100, 4).unwrap();
        let b = sample_observational(&scm, 100, 4).unwrap();
        assert_eq!(a, b);
        let one_hot = binary(1.0, 1.0, 1.0, |_, _| 1.0);
        let c = sample_observational(&one_hot, 50, 1).unwrap();
        assert!(c.iter().all(|s| *s
            == ScmSample {
                b: 1,
                s: 1,
                x: 1,
                y: 1
            }));
    }

    #[test]
    fn estimator_marks_missing_strata() {
        let scm = binary(0.5, 0.8, 0.9, |_, _| 0.5);
        let samples = vec![
            ScmSample {
                b: 0,
                s: 0,
                x: 0,
                y: 0,
            },
            ScmSample {
                b: 1,
                s: 1,
                x: 1,
                y: 1,
            },
        ];
        let est = plugin_backdoor_estimator(&scm, &samples).unwrap();
        assert!(est.rows[0].is_none() && est.rows[1].is_none());
        assert!(!est.is_complete());
    }

    #[test]
    fn estimator_on_deterministic_samples_is_exact() {
        let mut scm = binary(0.5, 1.0, 1.0, |x, _| x as f64);
        scm.p_x_given_s = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let samples = sample_observational(&scm, 2000, 3).unwrap();
        let est = plugin_backdoor_estimator(&scm, &samples).unwrap();
        let exact = DistTable {
            x_vals: scm.x_vals.clone(),
            y_vals: scm.y_vals.clone(),
            rows: vec![Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0])],
        };
        assert!(est.max_abs_diff(&exact) < 1e-12);
        assert!(est.is_complete());
    }
}
