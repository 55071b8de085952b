//! Bayesian counterfactual impact of a candidate intervention time.
//!
//! The pre-period of the target metric is modelled as a local level plus a
//! static regression on control series. Observation and level noise are
//! scored on a fixed grid by their pre-period likelihood; posterior draws
//! of the post-period counterfactual pick a grid point by likelihood weight,
//! sample the terminal level, and simulate forward. The observed post-period
//! is then compared against those draws.

pub mod local_level;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::rng;
use crate::telemetry::{mean_std, MetricSeries};
use crate::Timestamp;

/// Noise grid, in multiples of the pre-period target standard deviation.
pub const NOISE_GRID: [f64; 6] = [0.01, 0.03, 0.1, 0.3, 1.0, 3.0];
pub const MIN_PERIOD_SAMPLES: usize = 10;
pub const DEFAULT_DRAWS: usize = 1000;
pub const DEFAULT_ALPHA: f64 = 0.01;
/// Regressors allowed per pre-period sample block.
const SAMPLES_PER_CONTROL: usize = 10;
const MAX_CONTROLS: usize = 5;
const RIDGE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ImpactQuery<'a> {
    pub target: &'a MetricSeries,
    pub controls: Vec<&'a MetricSeries>,
    pub intervention_ts: Timestamp,
    /// Pre-period is `[intervention_ts - pre_len_s, intervention_ts)`.
    pub pre_len_s: Timestamp,
    /// Post-period is `[intervention_ts, post_end_ts]`.
    pub post_end_ts: Timestamp,
}

/// Target and controls on a shared time grid, split at the intervention.
#[derive(Debug, Clone)]
struct Aligned {
    pre_y: Vec<f64>,
    post_y: Vec<f64>,
    post_ts: Vec<Timestamp>,
    /// One column per control: pre values then post values.
    controls: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ImpactQuery<'_> {
    fn align(&self) -> Result<Aligned> {
        let pre_start = self.intervention_ts - self.pre_len_s;
        let pre: Vec<(Timestamp, f64)> = self
            .target
            .range(pre_start, self.intervention_ts - 1)
            .collect();
        let post: Vec<(Timestamp, f64)> = self.target.range(self.intervention_ts, self.post_end_ts).collect();
        if pre.len() < MIN_PERIOD_SAMPLES || post.len() < MIN_PERIOD_SAMPLES {
            return Err(Error::InvalidQuery(format!(
                "need {MIN_PERIOD_SAMPLES} samples on each side of t={}, have {} pre / {} post",
                self.intervention_ts,
                pre.len(),
                post.len()
            )));
        }
        let mut controls = Vec::new();
        for c in &self.controls {
            let col = |pts: &[(Timestamp, f64)]| -> Option<Vec<f64>> { pts.iter().map(|(t, _)| c.get(*t)).collect() };
            match (col(&pre), col(&post)) {
                (Some(a), Some(b)) => controls.push((a, b)),
                _ => warn!(control = %c.pod, "control not aligned with target, dropped"),
            }
        }
        Ok(Aligned {
            pre_y: pre.iter().map(|p| p.1).collect(),
            post_ts: post.iter().map(|p| p.0).collect(),
            post_y: post.iter().map(|p| p.1).collect(),
            controls,
        })
    }
}

/// Posterior predictive draws of the post-period counterfactual.
#[derive(Debug, Clone, PartialEq)]
pub struct Counterfactual {
    /// `n_draws` rows, one column per post-period timestamp.
    pub draws: Vec<Vec<f64>>,
    pub observed_post: Vec<f64>,
    pub post_ts: Vec<Timestamp>,
    pub pre_std: f64,
    /// Number of controls kept in the regression.
    pub controls_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactResult {
    /// Mean of `observed - counterfactual mean` over the post-period, in
    /// pre-period standard deviations.
    pub avg_effect: f64,
    pub p_value: f64,
    pub posterior_mean_counterfactual: Vec<f64>,
    /// Pointwise 95% interval of the counterfactual.
    pub credible_interval: Vec<(f64, f64)>,
}

/// Regression with centered controls: `y ≈ intercept + X beta`.
struct Regression {
    means: Vec<f64>,
    beta: Vec<f64>,
}

impl Regression {
    fn none() -> Self {
        Self {
            means: Vec::new(),
            beta: Vec::new(),
        }
    }

    fn predict(&self, row: impl Iterator<Item = f64>) -> f64 {
        row.zip(&self.means)
            .zip(&self.beta)
            .map(|((x, m), b)| (x - m) * b)
            .sum()
    }
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() as f64 * sa * sb)
}

/// Pick controls by pre-period |correlation|, drop near-collinear ones, and
/// solve the centered normal equations.
fn fit_regression(pre_y: &[f64], controls: &[(Vec<f64>, Vec<f64>)]) -> (Regression, Vec<usize>) {
    let n = pre_y.len();
    let budget = (n / SAMPLES_PER_CONTROL).saturating_sub(1).min(MAX_CONTROLS);
    if budget == 0 || controls.is_empty() {
        return (Regression::none(), Vec::new());
    }
    let mut ranked: Vec<(usize, f64)> = controls
        .iter()
        .enumerate()
        .map(|(i, (pre, _))| (i, correlation(pre_y, pre).abs()))
        .filter(|(_, c)| *c > 0.0)
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    // Greedy Gram-Schmidt: keep a control only if it adds a direction.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut chosen = Vec::new();
    for (i, _) in ranked {
        if chosen.len() == budget {
            break;
        }
        let (m, s) = mean_std(&controls[i].0);
        let mut v: Vec<f64> = controls[i].0.iter().map(|x| (x - m) / s).collect();
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for q in &basis {
            let proj: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-8 * norm0 {
            warn!(control = i, "collinear control dropped");
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
        chosen.push(i);
    }
    if chosen.is_empty() {
        return (Regression::none(), chosen);
    }

    let k = chosen.len();
    let means: Vec<f64> = chosen.iter().map(|&i| mean_std(&controls[i].0).0).collect();
    let x = DMatrix::from_fn(n, k, |r, c| controls[chosen[c]].0[r] - means[c]);
    let y_mean = pre_y.iter().sum::<f64>() / n as f64;
    let y = DVector::from_iterator(n, pre_y.iter().map(|v| v - y_mean));
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * y;
    let beta = match xtx.clone().cholesky() {
        Some(ch) => ch.solve(&xty),
        None => {
            warn!("singular regression normal equations, adding ridge");
            let ridged = xtx + DMatrix::identity(k, k) * RIDGE;
            match ridged.cholesky() {
                Some(ch) => ch.solve(&xty),
                None => return (Regression::none(), Vec::new()),
            }
        }
    };
    (
        Regression {
            means,
            beta: beta.iter().copied().collect(),
        },
        chosen,
    )
}

struct GridPoint {
    obs_sd: f64,
    state_sd: f64,
    level: f64,
    level_sd: f64,
}

/// Fit on the pre-period and draw `n_draws` post-period counterfactuals.
pub fn fit_counterfactual(query: &ImpactQuery<'_>, n_draws: usize, seed: u64) -> Result<Counterfactual> {
    if n_draws == 0 {
        return Err(Error::InvalidQuery("n_draws must be positive".into()));
    }
    let data = query.align()?;
    let (pre_mean, pre_std) = mean_std(&data.pre_y);
    if !(pre_std > 1e-12 * pre_mean.abs().max(1.0)) {
        return Err(Error::DegeneratePrePeriod(format!(
            "target is constant ({pre_mean}) before t={}",
            query.intervention_ts
        )));
    }

    let (reg, chosen) = fit_regression(&data.pre_y, &data.controls);
    let controls = &data.controls;
    let resid: Vec<f64> = (0..data.pre_y.len())
        .map(|t| data.pre_y[t] - reg.predict(chosen.iter().map(|&i| controls[i].0[t])))
        .collect();

    let mut grid = Vec::with_capacity(NOISE_GRID.len() * NOISE_GRID.len());
    let mut loglik = Vec::with_capacity(grid.capacity());
    for &o in &NOISE_GRID {
        for &s in &NOISE_GRID {
            let (obs_sd, state_sd) = (o * pre_std, s * pre_std);
            let f = local_level::filter(&resid, obs_sd * obs_sd, state_sd * state_sd);
            grid.push(GridPoint {
                obs_sd,
                state_sd,
                level: f.level,
                level_sd: f.level_var.max(0.0).sqrt(),
            });
            loglik.push(f.log_likelihood);
        }
    }
    let max_ll = loglik.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = loglik.iter().map(|l| (l - max_ll).exp()).collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::InvalidQuery(format!("grid weights: {e}")))?;

    let horizon = data.post_y.len();
    let regression: Vec<f64> = (0..horizon)
        .map(|t| reg.predict(chosen.iter().map(|&i| controls[i].1[t])))
        .collect();
    let mut rng = rng::stream(seed, query.intervention_ts as u64);
    let draws = (0..n_draws)
        .map(|_| {
            let g = &grid[pick.sample(&mut rng)];
            let mut level = g.level + g.level_sd * rng.sample::<f64, _>(StandardNormal);
            regression
                .iter()
                .map(|r| {
                    level += g.state_sd * rng.sample::<f64, _>(StandardNormal);
                    level + r + g.obs_sd * rng.sample::<f64, _>(StandardNormal)
                })
                .collect()
        })
        .collect();

    Ok(Counterfactual {
        draws,
        observed_post: data.post_y,
        post_ts: data.post_ts,
        pre_std,
        controls_used: chosen.len(),
    })
}

/// Compare observed post-period values against counterfactual draws.
pub fn impact_summary(draws: &[Vec<f64>], observed_post: &[f64], pre_std: f64) -> Result<ImpactResult> {
    if draws.is_empty() {
        return Err(Error::Empty("counterfactual draws"));
    }
    let h = observed_post.len();
    if let Some(bad) = draws.iter().find(|d| d.len() != h) {
        return Err(Error::DimensionMismatch {
            expected: h,
            actual: bad.len(),
        });
    }
    if h == 0 {
        return Err(Error::Empty("post-period"));
    }
    let n = draws.len() as f64;
    let mut posterior_mean = vec![0.0; h];
    for d in draws {
        posterior_mean.iter_mut().zip(d).for_each(|(m, v)| *m += v);
    }
    posterior_mean.iter_mut().for_each(|m| *m /= n);
    let credible_interval = (0..h)
        .map(|t| {
            let mut col: Vec<f64> = draws.iter().map(|d| d[t]).collect();
            col.sort_by(f64::total_cmp);
            (quantile_sorted(&col, 0.025), quantile_sorted(&col, 0.975))
        })
        .collect();

    let observed_mean = observed_post.iter().sum::<f64>() / h as f64;
    let counterfactual_mean = posterior_mean.iter().sum::<f64>() / h as f64;
    let raw_effect = observed_mean - counterfactual_mean;
    let scale = if pre_std > 0.0 { pre_std } else { 1.0 };
    let draw_means = draws.iter().map(|d| d.iter().sum::<f64>() / h as f64);
    let extreme = if raw_effect >= 0.0 {
        draw_means.filter(|m| *m >= observed_mean).count()
    } else {
        draw_means.filter(|m| *m <= observed_mean).count()
    };
    Ok(ImpactResult {
        avg_effect: raw_effect / scale,
        p_value: (1 + extreme) as f64 / (1.0 + n),
        posterior_mean_counterfactual: posterior_mean,
        credible_interval,
    })
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Fit and summarize in one step.
pub fn estimate_impact(query: &ImpactQuery<'_>, n_draws: usize, seed: u64) -> Result<ImpactResult> {
    let cf = fit_counterfactual(query, n_draws, seed)?;
    impact_summary(&cf.draws, &cf.observed_post, cf.pre_std)
}

/// Among candidates with `p < alpha`, the timestamp with the largest
/// |avg_effect|; ties go to the latest timestamp.
pub fn select_root_cause(candidates: &[(Timestamp, ImpactResult)], alpha: f64) -> Option<Timestamp> {
    candidates
        .iter()
        .filter(|(_, r)| r.p_value < alpha)
        .max_by(|(ta, a), (tb, b)| {
            a.avg_effect
                .abs()
                .total_cmp(&b.avg_effect.abs())
                .then(ta.cmp(tb))
        })
        .map(|(t, _)| *t)
}

/// Draw a null series from the model class: local level plus a regression on
/// one random-walk control. Used by calibration tests and benchmarks.
pub fn synthetic_pair(len: usize, beta: f64, obs_sd: f64, state_sd: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng::stream(seed, 0x5eed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut control_level = 10.0;
    let mut level = 50.0;
    let mut target = Vec::with_capacity(len);
    let mut control = Vec::with_capacity(len);
    for _ in 0..len {
        control_level += 0.3 * unit.sample(&mut r);
        let x = control_level + 0.2 * unit.sample(&mut r);
        level += state_sd * unit.sample(&mut r);
        target.push(level + beta * x + obs_sd * unit.sample(&mut r));
        control.push(x);
    }
    (target, control)
}
