//! Property suite for the Gaussian kernel algebra run by `runmax selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use runmax_core::dual::{KernelEval, KernelMode};
use runmax_core::kernels::{
    contraction_bound_log, g_alpha_power, gaussian_convolve_check, integrate_power_singular, mollifier, mollify,
    phi_unchecked,
};
use runmax_core::model::{build_model, Drift, DriftSpec, Initial, InitialSpec};
use runmax_core::quad::integrate_adaptive;
use runmax_core::special::ln_gamma;
use serde::{Deserialize, Serialize};

/// Closed form of `g_α^{*n}(t)` under test.
pub type GAlphaPower = fn(u32, f64, f64) -> runmax_core::Result<f64>;

/// Replaceable pieces of the suite, so tests can check that a broken
/// implementation is caught.
#[derive(Debug, Clone, Copy)]
pub struct Hooks {
    pub g_alpha_power: GAlphaPower,
}

impl Default for Hooks {
    fn default() -> Self {
        Hooks { g_alpha_power }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub properties: Vec<PropertyResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.pass)
    }

    pub fn first_failure(&self) -> Option<&PropertyResult> {
        self.properties.iter().find(|p| !p.pass)
    }
}

fn result(name: &str, outcome: Result<String, String>) -> PropertyResult {
    match outcome {
        Ok(detail) => PropertyResult { name: name.into(), pass: true, detail },
        Err(detail) => PropertyResult { name: name.into(), pass: false, detail },
    }
}

fn gaussian_convolution(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.gen_range(1..=3);
        let a: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let s = rng.gen_range(0.05..2.0);
        let r = rng.gen_range(0.05..2.0);
        let (analytic, quad) = gaussian_convolve_check(&a, &b, s, r).map_err(|e| e.to_string())?;
        worst = worst.max((analytic - quad).abs());
    }
    if worst <= 1e-7 {
        Ok(format!("100 draws, max |error| {worst:.2e}"))
    } else {
        Err(format!("max |error| {worst:.2e} exceeds 1e-7"))
    }
}

fn g_alpha_base_case(h: &Hooks) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for alpha in [0.3, 0.5, 0.8, 1.4] {
        for t in [0.1, 1.0, 3.0] {
            let v = (h.g_alpha_power)(1, alpha, t).map_err(|e| e.to_string())?;
            let target = t.powf(alpha / 2.0 - 1.0);
            worst = worst.max((v / target - 1.0).abs());
        }
    }
    if worst <= 1e-12 {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(format!("g^(*1) differs from t^(a/2-1) by {worst:.2e} relative"))
    }
}

/// `g^{*(n+1)} = g^{*n} * g` with the closed form on both sides.
fn g_alpha_convolution(h: &Hooks) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for alpha in [0.3, 0.5, 0.8] {
        for n in 1..5u32 {
            let t = 0.7;
            let closed = (h.g_alpha_power)(n + 1, alpha, t).map_err(|e| e.to_string())?;
            let coeff = (h.g_alpha_power)(n, alpha, 1.0).map_err(|e| e.to_string())?;
            let (a, b) = (alpha / 2.0, n as f64 * alpha / 2.0);
            let quad = integrate_power_singular(|s, tau| coeff * tau.powf(b - 1.0) * s.powf(a - 1.0), t, a, b, 40);
            worst = worst.max(((closed - quad) / quad).abs());
        }
    }
    if worst <= 1e-4 {
        Ok(format!("n = 2..5, alpha in {{0.3, 0.5, 0.8}}, max relative error {worst:.2e}"))
    } else {
        Err(format!("closed form differs from the numerical convolution by {worst:.2e} relative"))
    }
}

fn contraction_log_consistency() -> Result<String, String> {
    let (alpha, c, m, t) = (0.8, 1.7, 2.0, 0.9);
    let mut worst: f64 = 0.0;
    for d in 1..=3usize {
        for n in 1..=20u32 {
            let log = contraction_bound_log(n, alpha, c, m, t, d).map_err(|e| e.to_string())?;
            let nf = n as f64;
            let direct = (c / 2.0).powi(n as i32) * (2.0 * m).powf(d as f64 / 2.0) * t.powf(nf * alpha / 2.0 + 1.0)
                * ln_gamma(alpha / 2.0).exp().powi(n as i32)
                / ln_gamma(nf * alpha / 2.0).exp();
            worst = worst.max((log.exp() / direct - 1.0).abs());
        }
    }
    if worst <= 1e-10 {
        Ok(format!("n <= 20, d <= 3, max relative error {worst:.2e}"))
    } else {
        Err(format!("log-space bound disagrees with the direct product by {worst:.2e}"))
    }
}

fn contraction_to_zero() -> Result<String, String> {
    for (alpha, c) in [(0.5, 1.0), (1.0, 4.0), (1.6, 2.0)] {
        let logs: Vec<f64> =
            (1..=500u32).map(|n| contraction_bound_log(n, alpha, c, 3.0, 1.0, 2)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        if logs.iter().any(|l| !l.is_finite()) {
            return Err(format!("non-finite log bound for alpha {alpha}"));
        }
        let tail_decreasing = logs[250..].windows(2).all(|w| w[1] < w[0]);
        if !tail_decreasing || logs[499] > -100.0 {
            return Err(format!("alpha {alpha}, C {c}: log b_500 = {:.1}", logs[499]));
        }
    }
    Ok("log b_n strictly decreasing for n >= 250 and below -100 at n = 500".into())
}

fn gaussian_unit_mass() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for t in [0.1f64, 1.0, 4.0] {
        let span = 40.0 * t.sqrt();
        let (one, _) = integrate_adaptive(|u| phi_unchecked(&[u - 0.3], t), 0.3 - span, 0.3 + span, 1e-14, 1e-14)
            .map_err(|e| e.to_string())?;
        worst = worst.max((one - 1.0).abs());
    }
    if worst <= 1e-9 {
        Ok(format!("max |mass - 1| {worst:.2e}"))
    } else {
        Err(format!("kernel mass off by {worst:.2e}"))
    }
}

fn gaussian_factorization() -> Result<String, String> {
    let u = [0.3, -1.2, 0.7];
    let mut worst: f64 = 0.0;
    for t in [0.2, 1.0, 2.5] {
        let prod: f64 = u.iter().map(|v| phi_unchecked(&[*v], t)).product();
        worst = worst.max((phi_unchecked(&u, t) / prod - 1.0).abs());
    }
    if worst <= 1e-14 {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(format!("product form violated by {worst:.2e}"))
    }
}

fn mollifier_mass() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for eps in [1e-3, 0.1, 1.0] {
        let p = mollifier(eps, 0.4).map_err(|e| e.to_string())?;
        worst = worst.max((mollify(&p, |_| 1.0) - 1.0).abs());
    }
    if worst <= 1e-10 {
        Ok(format!("max |mass - 1| {worst:.2e}"))
    } else {
        Err(format!("mollifier mass off by {worst:.2e}"))
    }
}

fn mollifier_identity() -> Result<String, String> {
    let f = |y: f64| (1.3 * y).sin() + y * y;
    let c = 0.4;
    let errs: Vec<f64> = [0.2, 0.1, 0.05]
        .iter()
        .map(|eps| mollifier(*eps, c).map(|p| (mollify(&p, f) - f(c)).abs()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    if orders.iter().all(|o| *o > 1.8) {
        Ok(format!("errors {:?}, orders {orders:.2?}", errs.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>()))
    } else {
        Err(format!("mollified values converge at orders {orders:.2?}"))
    }
}

fn chapman_kolmogorov() -> Result<String, String> {
    let model = build_model(
        Drift::Known(DriftSpec::Constant { mu: vec![0.7, -0.3] }),
        Initial::Known(InitialSpec::Gaussian { mean: vec![0.0, 0.0], width: 1e-3 }),
        2,
    )
    .map_err(|e| e.to_string())?;
    let k = KernelEval::new(&model, KernelMode::ExactConstantDrift).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (x, y, s, r) in [([0.1, 0.2], [0.5, -0.4], 0.3, 0.6), ([-1.0, 0.0], [0.2, 0.9], 1.0, 0.25)] {
        let (composed, direct) = k.chapman_kolmogorov(&x, &y, s, r).map_err(|e| e.to_string())?;
        worst = worst.max((composed / direct - 1.0).abs());
    }
    if worst <= 1e-6 {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(format!("semigroup property violated by {worst:.2e}"))
    }
}

/// Runs every property in a fixed order.
pub fn run(hooks: &Hooks, seed: u64) -> SelftestReport {
    let properties = vec![
        result("gaussian_convolution", gaussian_convolution(seed)),
        result("gaussian_unit_mass", gaussian_unit_mass()),
        result("gaussian_factorization", gaussian_factorization()),
        result("g_alpha_base_case", g_alpha_base_case(hooks)),
        result("g_alpha_convolution_powers", g_alpha_convolution(hooks)),
        result("contraction_bound_log_consistency", contraction_log_consistency()),
        result("contraction_bound_vanishes", contraction_to_zero()),
        result("mollifier_unit_mass", mollifier_mass()),
        result("mollifier_approximate_identity", mollifier_identity()),
        result("chapman_kolmogorov_constant_drift", chapman_kolmogorov()),
    ];
    SelftestReport { properties }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped_gamma(n: u32, alpha: f64, t: f64) -> runmax_core::Result<f64> {
        // Γ(α/2) replaced by -Γ(α/2)
        let v = g_alpha_power(n, alpha, t)?;
        Ok(if n % 2 == 1 { -v } else { v })
    }

    #[test]
    fn shipped_suite_passes() {
        let rep = run(&Hooks::default(), 1);
        assert!(rep.properties.len() >= 8);
        assert!(rep.passed(), "{:?}", rep.first_failure());
    }

    #[test]
    fn wrong_gamma_sign_fails_the_g_alpha_check() {
        let rep = run(&Hooks { g_alpha_power: flipped_gamma }, 1);
        let failed: Vec<&str> = rep.properties.iter().filter(|p| !p.pass).map(|p| p.name.as_str()).collect();
        assert_eq!(rep.first_failure().unwrap().name, "g_alpha_base_case");
        assert!(failed.contains(&"g_alpha_convolution_powers"));
    }
}
