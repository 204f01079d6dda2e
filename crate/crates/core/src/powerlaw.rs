//! Power-law modeling of per-step quantile series.
//!
//! A series `theta_i` (step index `i` starting at 1) is modeled as
//! `alpha * i^(-beta)`. Fitting is ordinary least squares of `ln theta_i` on
//! `ln i`, so it is closed form. Fit quality is the coefficient of
//! determination computed on the log values, which goes negative when a fit
//! is evaluated outside the window it was estimated on and does worse than
//! the mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values at or below this are replaced before taking logs.
pub const LOG_CLAMP_FLOOR: f64 = 1e-12;

/// Inclusive range of 1-based decode steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRange {
    pub first: usize,
    pub last: usize,
}

impl StepRange {
    pub fn new(first: usize, last: usize) -> Result<Self> {
        if first == 0 {
            return Err(Error::invalid("steps are 1-based; range cannot start at 0"));
        }
        if last < first {
            return Err(Error::invalid(format!("empty step range {first}..={last}")));
        }
        Ok(Self { first, last })
    }

    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn steps(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }
}

/// Quantile values `theta_{i,tau}` for steps `1..=len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSeries {
    pub tau: f64,
    values: Vec<f64>,
}

impl QuantileSeries {
    pub fn new(tau: f64, values: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::invalid(format!("quantile level {tau} outside [0, 1]")));
        }
        if let Some(i) = values.iter().position(|v| v.is_nan()) {
            return Err(Error::invalid(format!("NaN quantile at step {}", i + 1)));
        }
        Ok(Self { tau, values })
    }

    pub fn empty(tau: f64) -> Self {
        Self {
            tau,
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, theta: f64) {
        self.values.push(theta);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at 1-based `step`.
    pub fn at(&self, step: usize) -> Option<f64> {
        step.checked_sub(1).and_then(|i| self.values.get(i).copied())
    }

    pub fn full_range(&self) -> Result<StepRange> {
        StepRange::new(1, self.len())
    }

    fn check_range(&self, range: StepRange) -> Result<()> {
        if range.last > self.len() {
            return Err(Error::Index {
                index: range.last,
                len: self.len(),
            });
        }
        Ok(())
    }

    /// `(ln i, ln theta_i)` pairs over `range`, plus whether any value was clamped.
    fn log_points(&self, range: StepRange) -> (Vec<(f64, f64)>, bool) {
        let mut clamped = false;
        let pts = range
            .steps()
            .map(|i| {
                let mut v = self.values[i - 1];
                if !(v > LOG_CLAMP_FLOOR) {
                    clamped = true;
                    v = LOG_CLAMP_FLOOR;
                }
                ((i as f64).ln(), v.ln())
            })
            .collect();
        (pts, clamped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub beta: f64,
    pub fit_window: StepRange,
    /// Some windowed value was at or below [`LOG_CLAMP_FLOOR`].
    pub clamped: bool,
    /// Every windowed value was at the clamp floor; the fit carries no information.
    pub degenerate: bool,
}

impl PowerLawFit {
    /// A fit with the given parameters, not estimated from data.
    pub fn from_params(alpha: f64, beta: f64, fit_window: StepRange) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) || !beta.is_finite() {
            return Err(Error::invalid(format!(
                "power-law parameters must be finite with alpha > 0 (alpha={alpha}, beta={beta})"
            )));
        }
        Ok(Self {
            alpha,
            beta,
            fit_window,
            clamped: false,
            degenerate: false,
        })
    }

    /// `alpha * step^(-beta)`.
    pub fn predict(&self, step: usize) -> Result<f64> {
        if step == 0 {
            return Err(Error::invalid("steps are 1-based; cannot predict step 0"));
        }
        Ok(self.alpha * (step as f64).powf(-self.beta))
    }

    fn predict_log(&self, step: usize) -> f64 {
        self.alpha.ln() - self.beta * (step as f64).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitQuality {
    pub r2: f64,
    pub eval_range: StepRange,
    pub n_points: usize,
}

/// OLS fit of `ln theta` on `ln i` over `window`.
pub fn fit_power_law(series: &QuantileSeries, window: StepRange) -> Result<PowerLawFit> {
    if window.len() < 2 {
        return Err(Error::invalid(format!(
            "power-law fit needs at least 2 points, window has {}",
            window.len()
        )));
    }
    series.check_range(window)?;
    let (pts, clamped) = series.log_points(window);
    let degenerate = window
        .steps()
        .all(|i| series.values[i - 1] <= LOG_CLAMP_FLOOR);

    let n = pts.len() as f64;
    let mean_x = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(x, y) in &pts {
        let dx = x - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    Ok(PowerLawFit {
        alpha: intercept.exp(),
        beta: -slope,
        fit_window: window,
        clamped,
        degenerate,
    })
}

pub fn predict_quantile(fit: &PowerLawFit, step: usize) -> Result<f64> {
    fit.predict(step)
}

/// Coefficient of determination of `fit` against the log series over `eval_range`.
pub fn r_squared(
    series: &QuantileSeries,
    fit: &PowerLawFit,
    eval_range: StepRange,
) -> Result<FitQuality> {
    if eval_range.len() < 2 {
        return Err(Error::invalid("R² needs at least 2 evaluation points"));
    }
    series.check_range(eval_range)?;
    let (pts, _) = series.log_points(eval_range);
    let n = pts.len() as f64;
    let mean = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (step, &(_, y)) in eval_range.steps().zip(&pts) {
        let r = y - fit.predict_log(step);
        ss_res += r * r;
        let d = y - mean;
        ss_tot += d * d;
    }
    // Relative test: rounding in the logs of an exactly constant series leaves
    // ss_tot at a few ulps rather than zero.
    if ss_tot <= f64::EPSILON * f64::EPSILON * n * (1.0 + mean * mean) {
        return Err(Error::DegenerateVariance);
    }
    Ok(FitQuality {
        r2: 1.0 - ss_res / ss_tot,
        eval_range,
        n_points: pts.len(),
    })
}

/// Fit on the warmup steps, evaluated over the whole series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupEvaluation {
    pub fit: PowerLawFit,
    pub quality: FitQuality,
}

/// Fits on steps `1..=warmup` and scores the fit on every step of the series.
pub fn evaluate_warmup_fit(series: &QuantileSeries, warmup: usize) -> Result<WarmupEvaluation> {
    evaluate_warmup_fit_skipping(series, warmup, 0)
}

/// As [`evaluate_warmup_fit`], but ignores the first `skip_first` steps both
/// when fitting and when scoring.
pub fn evaluate_warmup_fit_skipping(
    series: &QuantileSeries,
    warmup: usize,
    skip_first: usize,
) -> Result<WarmupEvaluation> {
    if warmup < 2 {
        return Err(Error::invalid(format!("warmup must be at least 2, got {warmup}")));
    }
    if series.len() <= warmup {
        return Err(Error::invalid(format!(
            "series of length {} must be longer than the warmup {warmup}",
            series.len()
        )));
    }
    let fit = fit_power_law(series, StepRange::new(skip_first + 1, warmup)?)?;
    let quality = r_squared(series, &fit, StepRange::new(skip_first + 1, series.len())?)?;
    Ok(WarmupEvaluation { fit, quality })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn on_manifold(alpha: f64, beta: f64, n: usize) -> QuantileSeries {
        let v = (1..=n).map(|i| alpha * (i as f64).powf(-beta)).collect();
        QuantileSeries::new(0.5, v).unwrap()
    }

    fn range(a: usize, b: usize) -> StepRange {
        StepRange::new(a, b).unwrap()
    }

    #[test]
    fn noiseless_fit_is_exact() {
        let s = on_manifold(2.0, 0.5, 100);
        let fit = fit_power_law(&s, range(1, 100)).unwrap();
        assert!((fit.alpha - 2.0).abs() < 1e-9);
        assert!((fit.beta - 0.5).abs() < 1e-9);
        assert!(!fit.clamped && !fit.degenerate);
    }

    #[test]
    fn constant_series_fits_flat() {
        let s = QuantileSeries::new(0.5, vec![0.3; 50]).unwrap();
        let fit = fit_power_law(&s, range(1, 50)).unwrap();
        assert!((fit.alpha - 0.3).abs() < 1e-9);
        assert!(fit.beta.abs() < 1e-9);
    }

    #[test]
    fn noisy_fit_recovers_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise: Normal<f64> = Normal::new(0.0, 0.1).unwrap();
        let v = (1..=512)
            .map(|i| 3.0 * (i as f64).powf(-0.8) * noise.sample(&mut rng).exp())
            .collect();
        let s = QuantileSeries::new(0.5, v).unwrap();
        let fit = fit_power_law(&s, range(1, 512)).unwrap();
        assert!((0.75..=0.85).contains(&fit.beta), "beta {}", fit.beta);
    }

    #[test]
    fn fit_window_errors() {
        let s = on_manifold(1.0, 1.0, 10);
        assert!(matches!(fit_power_law(&s, range(3, 3)), Err(Error::InvalidInput(_))));
        assert!(matches!(fit_power_law(&s, range(1, 11)), Err(Error::Index { .. })));
        assert!(StepRange::new(0, 3).is_err());
        assert!(StepRange::new(4, 3).is_err());
    }

    #[test]
    fn clamp_flags() {
        let s = QuantileSeries::new(0.5, vec![0.5, 0.0, 0.25, 0.1]).unwrap();
        let fit = fit_power_law(&s, range(1, 4)).unwrap();
        assert!(fit.clamped && !fit.degenerate);
        assert!(fit.alpha.is_finite() && fit.beta.is_finite());

        let s = QuantileSeries::new(0.5, vec![0.0, -1.0, 1e-13]).unwrap();
        let fit = fit_power_law(&s, range(1, 3)).unwrap();
        assert!(fit.clamped && fit.degenerate);
    }

    #[test]
    fn predict_examples() {
        let w = range(1, 2);
        let f = PowerLawFit::from_params(2.0, 0.5, w).unwrap();
        assert_eq!(predict_quantile(&f, 4).unwrap(), 1.0);
        let f = PowerLawFit::from_params(0.7, 0.0, w).unwrap();
        for s in [1, 10, 1000] {
            assert_eq!(f.predict(s).unwrap(), 0.7);
        }
        let f = PowerLawFit::from_params(1.0, 1.0, w).unwrap();
        assert!((f.predict(1000).unwrap() - 0.001).abs() < 1e-18);
        assert!(matches!(f.predict(0), Err(Error::InvalidInput(_))));
        assert!(PowerLawFit::from_params(0.0, 1.0, w).is_err());
    }

    #[test]
    fn r2_examples() {
        let s = on_manifold(1.5, 0.9, 64);
        let fit = fit_power_law(&s, range(1, 64)).unwrap();
        let q = r_squared(&s, &fit, range(1, 64)).unwrap();
        assert!((q.r2 - 1.0).abs() < 1e-9);
        assert_eq!(q.n_points, 64);

        // a flat fit at the log-mean scores exactly zero
        let mean = s.values().iter().map(|v| v.ln()).sum::<f64>() / 64.0;
        let flat = PowerLawFit::from_params(mean.exp(), 0.0, range(1, 64)).unwrap();
        assert!(r_squared(&s, &flat, range(1, 64)).unwrap().r2.abs() < 1e-9);
    }

    #[test]
    fn r2_hand_computed() {
        // theta = 4 / i for i = 1..4; l_i = ln 4 - ln i
        let s = QuantileSeries::new(0.5, vec![4.0, 2.0, 4.0 / 3.0, 1.0]).unwrap();
        let w = range(1, 4);
        let exact = PowerLawFit::from_params(4.0, 1.0, w).unwrap();
        assert!((r_squared(&s, &exact, w).unwrap().r2 - 1.0).abs() < 1e-12);

        // residual l_i - lhat_i = -0.5 ln i; ss_res = 0.25 * sum (ln i)^2
        // ss_tot = sum (ln i - mean ln i)^2  (l_i - lbar = -(ln i - mean ln i))
        let logs: Vec<f64> = (1..=4).map(|i| (i as f64).ln()).collect();
        let mean = logs.iter().sum::<f64>() / 4.0;
        let ss_res: f64 = logs.iter().map(|x| 0.25 * x * x).sum();
        let ss_tot: f64 = logs.iter().map(|x| (x - mean).powi(2)).sum();
        let want = 1.0 - ss_res / ss_tot;
        let half = PowerLawFit::from_params(4.0, 0.5, w).unwrap();
        let got = r_squared(&s, &half, w).unwrap().r2;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        // 40-digit evaluation of the same expression
        assert!((got - 0.167_775_990_100_432_3).abs() < 1e-12, "{got}");
    }

    #[test]
    fn r2_degenerate_variance() {
        let s = QuantileSeries::new(0.5, vec![0.2; 10]).unwrap();
        let fit = fit_power_law(&s, range(1, 10)).unwrap();
        assert!(matches!(
            r_squared(&s, &fit, range(1, 10)),
            Err(Error::DegenerateVariance)
        ));
        assert!(r_squared(&s, &fit, range(2, 2)).is_err());
    }

    #[test]
    fn warmup_eval_noiseless() {
        let s = on_manifold(0.8, 0.6, 300);
        for w in [2, 3, 17, 299] {
            let e = evaluate_warmup_fit(&s, w).unwrap();
            assert!((e.quality.r2 - 1.0).abs() < 1e-9);
            assert_eq!(e.quality.eval_range, range(1, 300));
            assert_eq!(e.fit.fit_window, range(1, w));
        }
    }

    #[test]
    fn warmup_eval_goes_negative() {
        // flat warmup, then the tail explodes away from the warmup trend
        let mut v = vec![0.1; 32];
        v.extend((1..=96).map(|i| 0.1 * (1.0 + i as f64).powi(3)));
        let s = QuantileSeries::new(0.5, v).unwrap();
        let e = evaluate_warmup_fit(&s, 32).unwrap();
        assert!(e.quality.r2 < 0.0, "r2 {}", e.quality.r2);
    }

    #[test]
    fn warmup_eval_errors() {
        let s = on_manifold(1.0, 1.0, 10);
        assert!(evaluate_warmup_fit(&s, 1).is_err());
        assert!(evaluate_warmup_fit(&s, 10).is_err());
        assert!(evaluate_warmup_fit_skipping(&s, 5, 4).is_err());
        let e = evaluate_warmup_fit_skipping(&s, 5, 2).unwrap();
        assert_eq!(e.fit.fit_window, range(3, 5));
        assert_eq!(e.quality.eval_range, range(3, 10));
    }

    proptest! {
        #[test]
        fn fit_exact_on_manifold(
            log_alpha in (1e-6f64).ln()..(1e6f64).ln(),
            beta in -2.0f64..=2.0,
            n in 2usize..400,
        ) {
            let alpha = log_alpha.exp();
            let s = on_manifold(alpha, beta, n);
            let fit = fit_power_law(&s, range(1, n)).unwrap();
            for i in 1..=n {
                let resid = s.at(i).unwrap().ln() - fit.predict(i).unwrap().ln();
                prop_assert!(resid.abs() < 1e-9);
            }
        }

        #[test]
        fn scale_equivariance(
            seed in any::<u64>(),
            log_c in -5.0f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Normal<f64> = Normal::new(0.0, 0.2).unwrap();
            let v: Vec<f64> = (1..=128)
                .map(|i| 0.5 * (i as f64).powf(-0.7) * noise.sample(&mut rng).exp())
                .collect();
            let c = log_c.exp();
            let a = QuantileSeries::new(0.5, v.clone()).unwrap();
            let b = QuantileSeries::new(0.5, v.iter().map(|x| x * c).collect()).unwrap();
            let w = range(1, 128);
            let fa = fit_power_law(&a, w).unwrap();
            let fb = fit_power_law(&b, w).unwrap();
            prop_assert!((fb.alpha / fa.alpha - c).abs() < 1e-9 * c);
            prop_assert!((fb.beta - fa.beta).abs() < 1e-9);
            let ra = r_squared(&a, &fa, w).unwrap().r2;
            let rb = r_squared(&b, &fb, w).unwrap().r2;
            prop_assert!((ra - rb).abs() < 1e-9);
        }

        #[test]
        fn in_sample_r2_in_unit_interval(seed in any::<u64>(), sigma in 0.01f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Normal<f64> = Normal::new(0.0, sigma).unwrap();
            let v: Vec<f64> = (1..=64)
                .map(|i| (i as f64).powf(-0.3) * noise.sample(&mut rng).exp())
                .collect();
            let s = QuantileSeries::new(0.5, v).unwrap();
            let w = range(1, 64);
            let r2 = r_squared(&s, &fit_power_law(&s, w).unwrap(), w).unwrap().r2;
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&r2));
        }
    }
}
