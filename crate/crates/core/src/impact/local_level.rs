//! Scalar local-level model `y_t = mu_t + eps_t`, `mu_{t+1} = mu_t + eta_t`.

/// Filtered state after the last observation plus the log-likelihood of the
/// series given its first observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelFilter {
    pub level: f64,
    pub level_var: f64,
    pub log_likelihood: f64,
}

/// Kalman filter with the level initialised from the first observation
/// (`mu_1 | y_1 ~ N(y_1, obs_var)`), which is the diffuse-prior posterior
/// after one step. The likelihood therefore conditions on `y_1`.
pub fn filter(y: &[f64], obs_var: f64, state_var: f64) -> LevelFilter {
    let Some((&first, rest)) = y.split_first() else {
        return LevelFilter {
            level: 0.0,
            level_var: f64::INFINITY,
            log_likelihood: 0.0,
        };
    };
    let mut a = first;
    let mut p = obs_var;
    let mut ll = 0.0;
    for &obs in rest {
        let pred_var = p + state_var;
        let f = pred_var + obs_var;
        let v = obs - a;
        ll -= 0.5 * ((2.0 * std::f64::consts::PI * f).ln() + v * v / f);
        let gain = pred_var / f;
        a += gain * v;
        p = pred_var * (1.0 - gain);
    }
    LevelFilter {
        level: a,
        level_var: p,
        log_likelihood: ll,
    }
}
