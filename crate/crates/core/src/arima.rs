//! ARIMA(p,d,q) fitting by conditional sum of squares, automatic order
//! selection and autoregressive forecasting.
//!
//! On the `d`-times differenced series `x'` the model is
//!
//! ```text
//! x'_t = c + phi_1 x'_{t-1} + ... + phi_p x'_{t-p} + e_t + theta_1 e_{t-1} + ... + theta_q e_{t-q}
//! ```
//!
//! Residuals are produced by running this recursion forward with every
//! pre-sample error fixed at zero. The objective is the sum of squared
//! residuals from `t = max(p, q)` onward, minimized with a damped Newton
//! iteration whose Hessian is a central finite difference of the analytic
//! gradient.

use serde::{Deserialize, Serialize};

use crate::cgm_data::StandardizationParams;
use crate::error::{Error, Result};

pub const MAX_AR: usize = 24;
pub const MAX_MA: usize = 24;
pub const MAX_DIFF: usize = 4;

pub const MAX_NEWTON_ITERATIONS: usize = 200;
pub const MAX_HALVINGS: usize = 30;
/// Convergence threshold on the gradient norm of the per-residual CSS.
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
/// Gradient-norm floor below which a stalled line search still counts as
/// converged (the objective cannot be decreased in floating point).
pub const STALL_TOLERANCE: f64 = 1e-6;
pub const SIGMA2_FLOOR: f64 = 1e-12;
/// 5% critical value of the KPSS level-stationarity statistic.
pub const KPSS_LEVEL_5PCT: f64 = 0.463;
pub const MIN_SELECT_D_LEN: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub fn new(p: usize, d: usize, q: usize) -> Result<Self> {
        if p > MAX_AR || q > MAX_MA || d > MAX_DIFF {
            return Err(Error::InvalidArgument(format!(
                "order ({p},{d},{q}) outside p<={MAX_AR}, d<={MAX_DIFF}, q<={MAX_MA}"
            )));
        }
        Ok(Self { p, d, q })
    }

    /// Free parameters: intercept plus AR and MA coefficients.
    pub fn n_params(&self) -> usize {
        self.p + self.q + 1
    }
}

/// Inclusive upper bounds of the order search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderBounds {
    pub max_p: usize,
    pub max_d: usize,
    pub max_q: usize,
}

impl Default for OrderBounds {
    /// Up to two hours of 5-minute lags.
    fn default() -> Self {
        Self { max_p: MAX_AR, max_d: MAX_DIFF, max_q: MAX_MA }
    }
}

/// Intercept, AR and MA coefficients of an ARMA recursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmaParams {
    pub c: f64,
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
}

impl ArmaParams {
    pub fn zeros(p: usize, q: usize) -> Self {
        Self { c: 0.0, phi: vec![0.0; p], theta: vec![0.0; q] }
    }

    #[cfg(test)]
    fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(1 + self.phi.len() + self.theta.len());
        v.push(self.c);
        v.extend(&self.phi);
        v.extend(&self.theta);
        v
    }

    fn from_slice(v: &[f64], p: usize, q: usize) -> Self {
        Self { c: v[0], phi: v[1..1 + p].to_vec(), theta: v[1 + p..1 + p + q].to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaModel {
    pub order: ArimaOrder,
    pub c: f64,
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
    pub sigma2: f64,
    pub aic: f64,
    pub n_fit: usize,
}

impl ArimaModel {
    pub fn params(&self) -> ArmaParams {
        ArmaParams { c: self.c, phi: self.phi.clone(), theta: self.theta.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub css: f64,
    /// AR part stationary and MA part invertible at the optimum.
    pub roots_ok: bool,
}

pub const ARIMA_SCHEMA_VERSION: u32 = 1;

/// On-disk form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaDocument {
    pub schema_version: u32,
    pub model: ArimaModel,
    pub standardizer: StandardizationParams,
}

impl ArimaDocument {
    pub fn new(model: ArimaModel, standardizer: StandardizationParams) -> Self {
        Self { schema_version: ARIMA_SCHEMA_VERSION, model, standardizer }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(s)?;
        if doc.schema_version != ARIMA_SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported ARIMA schema version {}", doc.schema_version)));
        }
        Ok(doc)
    }
}

/// Apply first differencing `d` times.
pub fn difference(series: &[f64], d: usize) -> Result<Vec<f64>> {
    if series.len() <= d {
        return Err(Error::InsufficientData(format!("cannot difference {} values {d} times", series.len())));
    }
    let mut out = series.to_vec();
    for _ in 0..d {
        out = out.windows(2).map(|w| w[1] - w[0]).collect();
    }
    Ok(out)
}

/// Invert [`difference`]: `pivots` are the first `d` values of the original
/// series.
pub fn integrate(diffs: &[f64], pivots: &[f64]) -> Result<Vec<f64>> {
    let d = pivots.len();
    // First element of each differencing level of the head.
    let mut firsts = Vec::with_capacity(d);
    let mut level = pivots.to_vec();
    for _ in 0..d {
        firsts.push(level[0]);
        level = level.windows(2).map(|w| w[1] - w[0]).collect();
    }
    let mut out = diffs.to_vec();
    for first in firsts.into_iter().rev() {
        let mut up = Vec::with_capacity(out.len() + 1);
        up.push(first);
        for v in &out {
            let last = *up.last().expect("non-empty");
            up.push(last + v);
        }
        out = up;
    }
    Ok(out)
}

/// Residuals of the ARMA recursion with pre-sample errors at zero. Slots
/// before `max(p, q)` carry zero residual.
pub fn residuals(params: &ArmaParams, diffed: &[f64]) -> Vec<f64> {
    let (p, q) = (params.phi.len(), params.theta.len());
    let start = p.max(q);
    let mut e = vec![0.0; diffed.len()];
    for t in start..diffed.len() {
        let mut pred = params.c;
        for (i, phi) in params.phi.iter().enumerate() {
            pred += phi * diffed[t - 1 - i];
        }
        for (j, theta) in params.theta.iter().enumerate() {
            pred += theta * e[t - 1 - j];
        }
        e[t] = diffed[t] - pred;
    }
    e
}

#[derive(Debug, Clone, PartialEq)]
pub struct CssValue {
    pub loss: f64,
    /// Ordered as `[c, phi_1..phi_p, theta_1..theta_q]`.
    pub gradient: Vec<f64>,
    pub n_fit: usize,
}

/// Conditional sum of squares and its exact gradient, obtained by
/// differentiating the residual recursion.
pub fn css_objective(params: &ArmaParams, diffed: &[f64]) -> Result<CssValue> {
    let (p, q) = (params.phi.len(), params.theta.len());
    let start = p.max(q);
    let n = diffed.len();
    if n <= start {
        return Err(Error::InsufficientData(format!("{n} differenced values for an ARMA({p},{q}) objective")));
    }
    let k = 1 + p + q;
    let mut e = vec![0.0; n];
    // de[t * k + a] = d e_t / d param_a
    let mut de = vec![0.0; n * k];
    let mut loss = 0.0;
    let mut gradient = vec![0.0; k];
    for t in start..n {
        let mut pred = params.c;
        for (i, phi) in params.phi.iter().enumerate() {
            pred += phi * diffed[t - 1 - i];
        }
        for (j, theta) in params.theta.iter().enumerate() {
            pred += theta * e[t - 1 - j];
        }
        let et = diffed[t] - pred;
        if !et.is_finite() {
            return Err(Error::NonFinite(format!("CSS residual at t={t} (divergent MA coefficients?)")));
        }
        e[t] = et;

        let (done, row) = de.split_at_mut(t * k);
        let row = &mut row[..k];
        row[0] = -1.0;
        for i in 0..p {
            row[1 + i] = -diffed[t - 1 - i];
        }
        for j in 0..q {
            row[1 + p + j] = -e[t - 1 - j];
        }
        for (j, theta) in params.theta.iter().enumerate() {
            let lag = &done[(t - 1 - j) * k..(t - j) * k];
            for a in 0..k {
                row[a] -= theta * lag[a];
            }
        }
        loss += et * et;
        for a in 0..k {
            gradient[a] += 2.0 * et * row[a];
        }
    }
    if !loss.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("CSS objective".into()));
    }
    Ok(CssValue { loss, gradient, n_fit: n - start })
}

/// `true` when the polynomial `1 - a_1 z - ... - a_m z^m` has all roots outside the unit
/// circle, checked by the step-down (reverse Levinson) recursion.
pub fn is_stationary(coeffs: &[f64]) -> bool {
    let mut a = coeffs.to_vec();
    while let Some(&last) = a.last() {
        if last == 0.0 {
            a.pop();
            continue;
        }
        if last.abs() >= 1.0 {
            return false;
        }
        let m = a.len();
        let denom = 1.0 - last * last;
        a = (0..m - 1).map(|i| (a[i] + last * a[m - 2 - i]) / denom).collect();
    }
    true
}

fn cholesky_solve(h: &[f64], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = h[i * n + j];
            for m in 0..j {
                s -= l[i * n + m] * l[j * n + m];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|m| l[i * n + m] * y[m]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|m| l[m * n + i] * x[m]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fit an ARIMA model of fixed order to a level-space series.
pub fn fit_arima(series: &[f64], order: ArimaOrder) -> Result<(ArimaModel, FitDiagnostics)> {
    let ArimaOrder { p, d, q } = order;
    let diffed = difference(series, d)?;
    let k = order.n_params();
    if diffed.len() < 10 * k {
        return Err(Error::InsufficientData(format!(
            "ARIMA({p},{d},{q}) needs at least {} differenced values, got {}",
            10 * k,
            diffed.len()
        )));
    }

    let mut theta = vec![0.0; k];
    theta[0] = diffed.iter().sum::<f64>() / diffed.len() as f64;
    let eval = |v: &[f64]| css_objective(&ArmaParams::from_slice(v, p, q), &diffed);
    let mut current = eval(&theta)?;
    let scale = current.n_fit as f64;

    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_NEWTON_ITERATIONS {
        let gnorm = norm(&current.gradient) / scale;
        if gnorm < GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        iterations += 1;

        let mut hessian = vec![0.0; k * k];
        let mut fd_ok = true;
        for a in 0..k {
            let h = 1e-5 * theta[a].abs().max(1.0);
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[a] += h;
            minus[a] -= h;
            match (eval(&plus), eval(&minus)) {
                (Ok(gp), Ok(gm)) => {
                    for b in 0..k {
                        hessian[b * k + a] = (gp.gradient[b] - gm.gradient[b]) / (2.0 * h);
                    }
                }
                _ => fd_ok = false,
            }
        }
        for a in 0..k {
            for b in 0..a {
                let s = 0.5 * (hessian[a * k + b] + hessian[b * k + a]);
                hessian[a * k + b] = s;
                hessian[b * k + a] = s;
            }
        }
        let neg_grad: Vec<f64> = current.gradient.iter().map(|g| -g).collect();
        let direction = fd_ok.then(|| cholesky_solve(&hessian, &neg_grad)).flatten().unwrap_or(neg_grad);

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> = theta.iter().zip(&direction).map(|(t, s)| t + step * s).collect();
            if let Ok(value) = eval(&candidate) {
                if value.loss < current.loss {
                    accepted = Some((candidate, value));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((candidate, value)) => {
                theta = candidate;
                current = value;
            }
            None => {
                converged = gnorm < STALL_TOLERANCE;
                break;
            }
        }
    }

    let params = ArmaParams::from_slice(&theta, p, q);
    let n_fit = current.n_fit;
    let sigma2 = (current.loss / n_fit as f64).max(SIGMA2_FLOOR);
    let aic = n_fit as f64 * sigma2.ln() + 2.0 * k as f64;
    let neg_theta: Vec<f64> = params.theta.iter().map(|t| -t).collect();
    let diagnostics = FitDiagnostics {
        converged,
        iterations,
        gradient_norm: norm(&current.gradient) / scale,
        css: current.loss,
        roots_ok: is_stationary(&params.phi) && is_stationary(&neg_theta),
    };
    let model = ArimaModel { order, c: params.c, phi: params.phi, theta: params.theta, sigma2, aic, n_fit };
    Ok((model, diagnostics))
}

/// KPSS level-stationarity statistic with a Bartlett-weighted long-run
/// variance using `trunc(4 (n/100)^{1/4})` lags.
pub fn kpss_level_statistic(series: &[f64]) -> f64 {
    let n = series.len();
    let nf = n as f64;
    let mean = series.iter().sum::<f64>() / nf;
    let resid: Vec<f64> = series.iter().map(|x| x - mean).collect();
    let mut cum = 0.0;
    let mut eta = 0.0;
    for u in &resid {
        cum += u;
        eta += cum * cum;
    }
    eta /= nf * nf;
    let lags = (4.0 * (nf / 100.0).powf(0.25)).trunc() as usize;
    let mut lrv = resid.iter().map(|u| u * u).sum::<f64>() / nf;
    for lag in 1..=lags.min(n.saturating_sub(1)) {
        let gamma: f64 = (lag..n).map(|t| resid[t] * resid[t - lag]).sum::<f64>() / nf;
        lrv += 2.0 * (1.0 - lag as f64 / (lags as f64 + 1.0)) * gamma;
    }
    if lrv <= f64::EPSILON {
        // A constant series is trivially level-stationary.
        return 0.0;
    }
    eta / lrv
}

/// Smallest differencing order whose KPSS statistic does not reject level
/// stationarity at 5%; `max_d` when none passes.
pub fn select_d(series: &[f64], max_d: usize) -> Result<usize> {
    if series.len() < MIN_SELECT_D_LEN {
        return Err(Error::InsufficientData(format!(
            "differencing test needs at least {MIN_SELECT_D_LEN} values, got {}",
            series.len()
        )));
    }
    for d in 0..max_d {
        let diffed = difference(series, d)?;
        if kpss_level_statistic(&diffed) <= KPSS_LEVEL_5PCT {
            return Ok(d);
        }
    }
    Ok(max_d)
}

/// Stepwise AIC search over (p, q) at the KPSS-selected `d`, starting from
/// (1, 1) and moving to the best of the four axis neighbors until no
/// neighbor improves. Returns the lowest-AIC model encountered.
pub fn auto_arima(series: &[f64], bounds: OrderBounds) -> Result<(ArimaModel, FitDiagnostics)> {
    let d = select_d(series, bounds.max_d.min(MAX_DIFF))?;
    let max_p = bounds.max_p.min(MAX_AR);
    let max_q = bounds.max_q.min(MAX_MA);

    let mut tried: std::collections::BTreeMap<(usize, usize), std::result::Result<(ArimaModel, FitDiagnostics), String>> =
        Default::default();
    let mut fit = |p: usize, q: usize| -> Option<f64> {
        tried
            .entry((p, q))
            .or_insert_with(|| fit_arima(series, ArimaOrder { p, d, q }).map_err(|e| e.to_string()))
            .as_ref()
            .ok()
            .map(|(m, _)| m.aic)
    };

    let mut current = (1.min(max_p), 1.min(max_q));
    let mut current_aic = fit(current.0, current.1).unwrap_or(f64::INFINITY);
    loop {
        let (p, q) = current;
        let neighbors = [
            (p.checked_sub(1), Some(q)),
            ((p < max_p).then_some(p + 1), Some(q)),
            (Some(p), q.checked_sub(1)),
            (Some(p), (q < max_q).then_some(q + 1)),
        ];
        let mut best: Option<((usize, usize), f64)> = None;
        for (np, nq) in neighbors {
            let (Some(np), Some(nq)) = (np, nq) else { continue };
            if let Some(aic) = fit(np, nq) {
                if best.map_or(true, |(_, b)| aic < b) {
                    best = Some(((np, nq), aic));
                }
            }
        }
        match best {
            Some((order, aic)) if aic < current_aic => {
                current = order;
                current_aic = aic;
            }
            _ => break,
        }
    }

    let mut best: Option<(ArimaModel, FitDiagnostics)> = None;
    let mut failures = Vec::new();
    for ((p, q), outcome) in tried {
        match outcome {
            Ok((model, diag)) => {
                if best.as_ref().map_or(true, |(b, _)| model.aic < b.aic) {
                    best = Some((model, diag));
                }
            }
            Err(e) => failures.push(format!("({p},{d},{q}): {e}")),
        }
    }
    best.ok_or_else(|| Error::AllCandidatesFailed(failures.join("; ")))
}

/// Iterate the fitted recursion `steps` times past the end of `history`
/// with future errors at zero, feeding each prediction back in, and return
/// the forecasts in level space.
pub fn forecast(model: &ArimaModel, history: &[f64], steps: usize) -> Result<Vec<f64>> {
    let ArimaOrder { p, d, q: _ } = model.order;
    if history.len() < (p + d).max(d + 1) {
        return Err(Error::InsufficientData(format!(
            "ARIMA({},{},{}) forecast needs at least {} history values, got {}",
            p,
            d,
            model.order.q,
            (p + d).max(d + 1),
            history.len()
        )));
    }
    let mut levels: Vec<Vec<f64>> = (0..=d).map(|k| difference(history, k)).collect::<Result<_>>()?;
    let params = model.params();
    let mut x = levels[d].clone();
    let mut e = residuals(&params, &x);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t = x.len();
        let mut pred = params.c;
        for (i, phi) in params.phi.iter().enumerate() {
            pred += phi * x[t - 1 - i];
        }
        for (j, theta) in params.theta.iter().enumerate() {
            if let Some(lag) = (t - 1).checked_sub(j) {
                pred += theta * e[lag];
            }
        }
        x.push(pred);
        e.push(0.0);
        let mut carry = pred;
        levels[d].push(pred);
        for k in (0..d).rev() {
            carry += *levels[k].last().expect("levels are non-empty");
            levels[k].push(carry);
        }
        out.push(*levels[0].last().expect("non-empty"));
    }
    Ok(out)
}
