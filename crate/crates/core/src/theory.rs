//! Diagnostics of the attention dynamics and finite-scale checks of the
//! quantities the convergence analysis is built on.
//!
//! Notation: `λ± = ⟨Wμ±, p⟩`, `ρ_{i,t} = ⟨Wε_t^{(i)}, p⟩`, and the attention
//! gaps `Λ_{i,t} = (x₁ − x_t)ᵀWᵀp` and `Γ_{i,u} = (x₂ − x_u)ᵀWᵀp`. Token
//! indices in reports are 1-based.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{generate_multiclass, DataConfig, Dataset, SignalBasis};
use crate::error::{Error, Result};
use crate::model::{softmax_unchecked, ModelState};
use crate::trainer::{gd_step, gradients, loss_derivative, multiclass_loss_and_grads, MulticlassState, TrainTrace, TraceRow};

/// `g(x) = 2x + 2 sinh(x − log T)`.
pub fn g(x: f64, t: usize) -> f64 {
    2.0 * x + 2.0 * (x - (t as f64).ln()).sinh()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionDiagnostics {
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    /// `(n, T)`
    pub rho_attn: Array2<f64>,
    /// `(n, T−1)`; column `k` holds `Λ_{i,k+2}`.
    pub lambda_gap: Array2<f64>,
    /// `(n, T−1)`; column 0 holds `Γ_{i,1}`, column `k ≥ 1` holds `Γ_{i,k+2}`.
    pub gamma_gap: Array2<f64>,
}

impl AttentionDiagnostics {
    /// Build the gaps from raw attention logits `X Wᵀp`, `(n, T)`.
    pub fn from_logits(scores: &Array2<f64>, rho_attn: Array2<f64>, lambda_plus: f64, lambda_minus: f64) -> Self {
        let (n, t) = scores.dim();
        let mut lambda_gap = Array2::zeros((n, t - 1));
        let mut gamma_gap = Array2::zeros((n, t - 1));
        for i in 0..n {
            let s = scores.row(i);
            for k in 1..t {
                lambda_gap[[i, k - 1]] = s[0] - s[k];
            }
            gamma_gap[[i, 0]] = s[1] - s[0];
            for k in 2..t {
                gamma_gap[[i, k - 1]] = s[1] - s[k];
            }
        }
        AttentionDiagnostics { lambda_plus, lambda_minus, rho_attn, lambda_gap, gamma_gap }
    }

    /// `Λ_{i,t}` for 1-based `t ∈ 2..=T`.
    pub fn lambda_at(&self, i: usize, t: usize) -> f64 {
        self.lambda_gap[[i, t - 2]]
    }

    /// `Γ_{i,u}` for 1-based `u ≠ 2`.
    pub fn gamma_at(&self, i: usize, u: usize) -> f64 {
        match u {
            1 => self.gamma_gap[[i, 0]],
            u => self.gamma_gap[[i, u - 2]],
        }
    }
}

/// Diagnostics of an explicit state.
pub fn compute_diagnostics(state: &ModelState, dataset: &Dataset, signals: &SignalBasis) -> AttentionDiagnostics {
    let q = state.query();
    let (n, t) = (dataset.len(), dataset.seq_len());
    let mut scores = Array2::zeros((n, t));
    let mut rho = Array2::zeros((n, t));
    for (i, s) in dataset.samples.iter().enumerate() {
        scores.row_mut(i).assign(&s.tokens.dot(&q));
        rho.row_mut(i).assign(&s.noise.dot(&q));
    }
    AttentionDiagnostics::from_logits(&scores, rho, signals.mu_plus.dot(&q), signals.mu_minus.dot(&q))
}

/// The softmax-weighted interaction sums, evaluated on demand.
///
/// With `c_{i,t} = s_t(γ_t − Σ_u s_u γ_u)`:
/// `I_{i,±} = Σ_t c_{i,t}⟨x_t, μ±⟩`, `I_{i,j,u} = Σ_t c_{i,t}⟨x_t, ε_u^{(j)}⟩`,
/// the `W` versions use `⟨Wx_t, W·⟩`, and `I^p_i = Σ_t c_{i,t}⟨Wx_t, p⟩`.
pub struct Interactions<'a> {
    dataset: &'a Dataset,
    signals: &'a SignalBasis,
    state: &'a ModelState,
    weights: Array2<f64>,
    /// `W x_t^{(i)}` stacked sample-major, `(nT, d)`.
    w_tokens: Array2<f64>,
}

impl<'a> Interactions<'a> {
    pub fn new(state: &'a ModelState, dataset: &'a Dataset, signals: &'a SignalBasis) -> Self {
        let q = state.query();
        let (n, t, d) = (dataset.len(), dataset.seq_len(), dataset.dim());
        let mut weights = Array2::zeros((n, t));
        let mut w_tokens = Array2::zeros((n * t, d));
        for (i, s) in dataset.samples.iter().enumerate() {
            let probs = softmax_unchecked(s.tokens.dot(&q).view());
            let gamma = s.tokens.dot(state.nu());
            let f = probs.dot(&gamma);
            weights.row_mut(i).assign(&(&probs * &(gamma - f)));
            w_tokens.slice_mut(ndarray::s![i * t..(i + 1) * t, ..]).assign(&s.tokens.dot(&state.w().t()));
        }
        Interactions { dataset, signals, state, weights, w_tokens }
    }

    /// `c_{i,t}`, `(n, T)`.
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    fn plain(&self, i: usize, v: &Array1<f64>) -> f64 {
        self.weights.row(i).dot(&self.dataset.samples[i].tokens.dot(v))
    }

    fn through_w(&self, i: usize, wv: &Array1<f64>) -> f64 {
        let t = self.dataset.seq_len();
        let rows = self.w_tokens.slice(ndarray::s![i * t..(i + 1) * t, ..]);
        self.weights.row(i).dot(&rows.dot(wv))
    }

    pub fn i_plus(&self, i: usize) -> f64 {
        self.plain(i, &self.signals.mu_plus)
    }

    pub fn i_minus(&self, i: usize) -> f64 {
        self.plain(i, &self.signals.mu_minus)
    }

    /// `I_{i,j,u}` with 0-based `u`.
    pub fn i_noise(&self, i: usize, j: usize, u: usize) -> f64 {
        self.plain(i, &self.dataset.samples[j].noise.row(u).to_owned())
    }

    pub fn iw_plus(&self, i: usize) -> f64 {
        self.through_w(i, &self.state.w().dot(&self.signals.mu_plus))
    }

    pub fn iw_minus(&self, i: usize) -> f64 {
        self.through_w(i, &self.state.w().dot(&self.signals.mu_minus))
    }

    pub fn iw_noise(&self, i: usize, j: usize, u: usize) -> f64 {
        self.through_w(i, &self.state.w().dot(&self.dataset.samples[j].noise.row(u)))
    }

    pub fn i_p(&self, i: usize) -> f64 {
        self.through_w(i, self.state.p())
    }

    /// Interaction of an arbitrary vector `x` (plain and through `W`).
    fn pair(&self, i: usize, x: &Array1<f64>) -> (f64, f64) {
        (self.plain(i, x), self.through_w(i, &self.state.w().dot(x)))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityEntry {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct UpdateIdentityReport {
    pub entries: Vec<IdentityEntry>,
    pub max_rel_err: f64,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Take one gradient step and compare the realised change of each attention
/// quantity with its expansion in interaction terms:
///
/// - `Δ⟨Wx, p⟩ = (α/n)Σ(−ℓ′)Y(I^W_{i,x} + ‖p‖² I_{i,x}) + α² xᵀ∇_{Wᵀ}L ∇_pL` for `x ∈ {μ±, ε}`,
/// - `Δ‖p‖² = (2α/n)Σ(−ℓ′)Y I^p_i + α²‖∇_pL‖²`,
/// - `Δ⟨Wa, Wb⟩ = (α/n)Σ(−ℓ′)Y(I_{i,b}λ_a + I_{i,a}λ_b) + α²⟨∇_W a, ∇_W b⟩`
///   for all pairs of probes, with `λ_x = ⟨Wx, p⟩`.
pub fn verify_update_identity(
    state: &ModelState,
    dataset: &Dataset,
    signals: &SignalBasis,
    alpha: f64,
) -> Result<UpdateIdentityReport> {
    let next = gd_step(state, dataset, alpha)?;
    let grads = gradients(dataset, state)?;
    let inter = Interactions::new(state, dataset, signals);
    let n = dataset.len() as f64;
    let q = state.query();
    let mut weights = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let f = softmax_unchecked(s.tokens.dot(&q).view()).dot(&s.tokens.dot(state.nu()));
        let y = s.y_train.sign();
        weights.push(-loss_derivative(y * f) * y);
    }
    // probes: μ₊, μ₋, then every ε_u^{(j)}
    let mut probes: Vec<(String, Array1<f64>)> =
        vec![("mu_plus".into(), signals.mu_plus.clone()), ("mu_minus".into(), signals.mu_minus.clone())];
    for (j, s) in dataset.samples.iter().enumerate() {
        for u in 0..dataset.seq_len() {
            probes.push((format!("eps[{j},{}]", u + 1), s.noise.row(u).to_owned()));
        }
    }
    let pn2 = state.p().dot(state.p());
    let mut sums = Vec::with_capacity(probes.len());
    for (_, x) in &probes {
        let (mut plain, mut through) = (0.0, 0.0);
        for (i, w) in weights.iter().enumerate() {
            let (a, b) = inter.pair(i, x);
            plain += w * a;
            through += w * b;
        }
        sums.push((plain / n, through / n));
    }
    let mut entries = Vec::new();
    let mut push = |name: String, lhs: f64, rhs: f64| entries.push(IdentityEntry { name, lhs, rhs, rel_err: rel(lhs, rhs) });

    let gwt = grads.w.t();
    for ((name, x), (plain, through)) in probes.iter().zip(&sums) {
        let before = state.w().dot(x).dot(state.p());
        let after = next.w().dot(x).dot(next.p());
        let rhs = alpha * (through + pn2 * plain) + alpha * alpha * x.dot(&gwt.dot(&grads.p));
        push(format!("attention {name}"), after - before, rhs);
    }

    let ip: f64 = weights.iter().enumerate().map(|(i, w)| w * inter.i_p(i)).sum::<f64>() / n;
    push(
        "p_norm_sq".into(),
        next.p().dot(next.p()) - pn2,
        2.0 * alpha * ip + alpha * alpha * grads.p.dot(&grads.p),
    );

    let wx: Vec<Array1<f64>> = probes.iter().map(|(_, x)| state.w().dot(x)).collect();
    let wx_next: Vec<Array1<f64>> = probes.iter().map(|(_, x)| next.w().dot(x)).collect();
    let gx: Vec<Array1<f64>> = probes.iter().map(|(_, x)| grads.w.dot(x)).collect();
    let lam: Vec<f64> = wx.iter().map(|v| v.dot(state.p())).collect();
    for a in 0..probes.len() {
        for b in a..probes.len() {
            let lhs = wx_next[a].dot(&wx_next[b]) - wx[a].dot(&wx[b]);
            let rhs = alpha * (sums[b].0 * lam[a] + sums[a].0 * lam[b]) + alpha * alpha * gx[a].dot(&gx[b]);
            push(format!("gram {} {}", probes[a].0, probes[b].0), lhs, rhs);
        }
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(UpdateIdentityReport { entries, max_rel_err })
}

#[derive(Clone, Debug, Serialize)]
pub struct TokenScoreReport {
    /// `ρ‖ν‖‖μ‖/√2`
    pub weak_margin: f64,
    /// `‖ν‖‖μ‖/√2`
    pub relevant_margin: f64,
    pub noise_abs_median: f64,
    pub noise_abs_q95: f64,
    pub clean_count: usize,
    pub frac_relevant_positive: f64,
    pub frac_confusing_negative: f64,
    pub frac_relevant_within_20pct: f64,
    pub expected_relevant_positive: f64,
    pub expected_confusing_negative: f64,
    pub noisy_relevant_negative: f64,
    pub pass: bool,
}

fn normal_cdf(x: f64) -> f64 {
    // Abramowitz-Stegun 7.1.26 on erf; absolute error below 1.5e-7
    let z = x.abs() / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.327_591_1 * z);
    let poly = t * (0.254_829_592 + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    let erf = 1.0 - poly * (-z * z).exp();
    if x >= 0.0 {
        0.5 * (1.0 + erf)
    } else {
        0.5 * (1.0 - erf)
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sign pattern of `γ_t = νᵀx_t` by token role. On a clean sample `Yγ₁ =
/// ‖ν‖‖μ‖/√2 + Yνᵀε₁` and `Yγ₂ = −ρ‖ν‖‖μ‖/√2 + Yνᵀε₂` for the default head
/// direction, so the expected sign frequencies follow from the Gaussian tail
/// of `νᵀε`. Passes when both observed frequencies are within three binomial
/// standard errors of their expectation (or above it).
pub fn token_score_check(dataset: &Dataset, nu: &Array1<f64>, signals: &SignalBasis, sigma_eps: f64, rho: f64) -> TokenScoreReport {
    let nu_norm = nu.dot(nu).sqrt();
    let relevant_margin = nu.dot(&signals.mu_plus).abs().max(nu.dot(&signals.mu_minus).abs());
    let weak_margin = rho * relevant_margin;
    let mut noise: Vec<f64> = dataset
        .samples
        .iter()
        .flat_map(|s| s.noise.dot(nu).to_vec())
        .map(f64::abs)
        .collect();
    noise.sort_by(f64::total_cmp);
    let sd = sigma_eps * nu_norm;
    let (expected_relevant_positive, expected_confusing_negative) = if sd > 0.0 {
        (normal_cdf(relevant_margin / sd), normal_cdf(weak_margin / sd))
    } else {
        (1.0, 1.0)
    };
    let (mut pos1, mut neg2, mut within, mut count) = (0usize, 0usize, 0usize, 0usize);
    let (mut noisy_neg, mut noisy_count) = (0usize, 0usize);
    for s in &dataset.samples {
        let gamma = s.tokens.dot(nu);
        let y = s.y_train.sign();
        if s.is_noisy() {
            noisy_count += 1;
            noisy_neg += usize::from(y * gamma[0] < 0.0);
            continue;
        }
        count += 1;
        pos1 += usize::from(y * gamma[0] > 0.0);
        neg2 += usize::from(y * gamma[1] < 0.0);
        within += usize::from((y * gamma[0] / relevant_margin - 1.0).abs() < 0.2);
    }
    let frac = |k: usize, of: usize| if of == 0 { f64::NAN } else { k as f64 / of as f64 };
    let frac_relevant_positive = frac(pos1, count);
    let frac_confusing_negative = frac(neg2, count);
    let slack = |p: f64| 3.0 * (p * (1.0 - p) / count.max(1) as f64).sqrt() + 1e-12;
    let pass = count > 0
        && frac_relevant_positive >= expected_relevant_positive - slack(expected_relevant_positive)
        && frac_confusing_negative >= expected_confusing_negative - slack(expected_confusing_negative);
    TokenScoreReport {
        weak_margin,
        relevant_margin,
        noise_abs_median: quantile(&noise, 0.5),
        noise_abs_q95: quantile(&noise, 0.95),
        clean_count: count,
        frac_relevant_positive,
        frac_confusing_negative,
        frac_relevant_within_20pct: frac(within, count),
        expected_relevant_positive,
        expected_confusing_negative,
        noisy_relevant_negative: frac(noisy_neg, noisy_count),
        pass,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SoftmaxBoundReport {
    /// Largest absolute error of the closed form for `s₁(1−s₁)`.
    pub identity_max_err: f64,
    pub bracket_checked: usize,
    pub bracket_violations: usize,
    /// Smallest slack `log(bound) − log(s₁(1−s₁))` over both sides.
    pub bracket_min_log_slack: f64,
    pub monotone_violations: usize,
}

impl Default for SoftmaxBoundReport {
    /// The empty report, neutral under [`SoftmaxBoundReport::merge`].
    fn default() -> Self {
        SoftmaxBoundReport {
            identity_max_err: 0.0,
            bracket_checked: 0,
            bracket_violations: 0,
            bracket_min_log_slack: f64::INFINITY,
            monotone_violations: 0,
        }
    }
}

impl SoftmaxBoundReport {
    pub fn pass(&self) -> bool {
        self.identity_max_err <= 1e-12 && self.bracket_violations == 0 && self.monotone_violations == 0
    }

    pub fn merge(&mut self, other: &SoftmaxBoundReport) {
        self.identity_max_err = self.identity_max_err.max(other.identity_max_err);
        self.bracket_checked += other.bracket_checked;
        self.bracket_violations += other.bracket_violations;
        self.bracket_min_log_slack = self.bracket_min_log_slack.min(other.bracket_min_log_slack);
        self.monotone_violations += other.monotone_violations;
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Three statements about the relevant-token probability:
///
/// (a) `s₁(1−s₁) = [1/(1+S)]·[S/(1+S)]` with `S = Σ_t e^{−Λ_t}`;
/// (b) for every `t`, `c⁻¹ h_t ≤ s₁(1−s₁) ≤ c h_t` with
///     `h_t = 1/(2 + 2cosh(Λ_t − log T))`, `c = c′³T/(T−1)` and
///     `c′ = max_{t,u} e^{Λ_t−Λ_u}`;
/// (c) `s_u(1−s_u) ≤ s_t(1−s_t)` for `t = argmax s`.
///
/// (b) is evaluated in log space from the gaps so that saturated samples
/// (where `s₁(1−s₁)` underflows) are still checked.
pub fn softmax_bound_check(diag: &AttentionDiagnostics, probs: &Array2<f64>) -> SoftmaxBoundReport {
    let (n, t) = probs.dim();
    let log_t = (t as f64).ln();
    let log_ratio = (t as f64 / (t - 1) as f64).ln();
    let mut rep = SoftmaxBoundReport {
        identity_max_err: 0.0,
        bracket_checked: 0,
        bracket_violations: 0,
        bracket_min_log_slack: f64::INFINITY,
        monotone_violations: 0,
    };
    for i in 0..n {
        let gaps = diag.lambda_gap.row(i);
        let neg: Vec<f64> = gaps.iter().map(|v| -v).collect();
        let m = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + neg.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let s1 = probs[[i, 0]];
        let sum = lse.exp();
        let closed = if sum.is_finite() { (1.0 / (1.0 + sum)) * (sum / (1.0 + sum)) } else { 0.0 };
        rep.identity_max_err = rep.identity_max_err.max((s1 * (1.0 - s1) - closed).abs());

        let log_v = log_sigmoid(lse) + log_sigmoid(-lse);
        let spread = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - gaps.iter().copied().fold(f64::INFINITY, f64::min);
        let log_c = 3.0 * spread + log_ratio;
        for &x in gaps.iter() {
            let a = (x - log_t).abs();
            let log_h = -(a + 2.0 * (-a).exp().ln_1p());
            let slack = (log_c + log_h - log_v).min(log_v - (log_h - log_c));
            rep.bracket_checked += 1;
            rep.bracket_min_log_slack = rep.bracket_min_log_slack.min(slack);
            if slack < -1e-9 {
                rep.bracket_violations += 1;
            }
        }

        let row = probs.row(i);
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let best = top * (1.0 - top);
        rep.monotone_violations += row.iter().filter(|&&s| s * (1.0 - s) > best + 1e-15).count();
    }
    rep
}

/// Tolerances for the concentration events.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GoodRunTolerances {
    /// Relative band for every norm event.
    pub norm_tol: f64,
    /// Constant in the inner-product caps.
    pub inner_c: f64,
    pub delta: f64,
}

impl Default for GoodRunTolerances {
    fn default() -> Self {
        GoodRunTolerances { norm_tol: 0.1, inner_c: 5.0, delta: 0.01 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GoodRunEvent {
    pub name: String,
    /// Worst observed value (relative deviation for norms, absolute value
    /// for inner products, the count for class sizes).
    pub measured: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub holds: bool,
    pub vacuous: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GoodRunReport {
    pub events: Vec<GoodRunEvent>,
}

impl GoodRunReport {
    pub fn get(&self, name: &str) -> Option<&GoodRunEvent> {
        self.events.iter().find(|e| e.name == name)
    }
}

/// Initialization draw for the concentration events that involve `W₀`, `p₀`.
pub struct InitDraw<'a> {
    pub w: &'a Array2<f64>,
    pub p: &'a Array1<f64>,
    pub sigma_w: f64,
    pub sigma_p: f64,
}

/// Concentration of norms and inner products of the noise (and of the
/// initialization when given) and the class-count bounds.
pub fn good_run_check(
    dataset: &Dataset,
    init: Option<InitDraw<'_>>,
    signals: &SignalBasis,
    nu: &Array1<f64>,
    sigma_eps: f64,
    eta: f64,
    tol: GoodRunTolerances,
) -> GoodRunReport {
    let (n, t, d) = (dataset.len(), dataset.seq_len(), dataset.dim() as f64);
    let l = ((t * n) as f64 / tol.delta).ln();
    let mu = signals.norm();
    let mut noise = Array2::zeros((n * t, dataset.dim()));
    for (i, s) in dataset.samples.iter().enumerate() {
        noise.slice_mut(ndarray::s![i * t..(i + 1) * t, ..]).assign(&s.noise);
    }
    let vacuous = sigma_eps == 0.0;
    let mut events = Vec::new();
    let mut band = |name: &str, worst_dev: f64, vac: bool| {
        events.push(GoodRunEvent {
            name: name.into(),
            measured: worst_dev,
            lower: None,
            upper: Some(tol.norm_tol),
            holds: vac || worst_dev <= tol.norm_tol,
            vacuous: vac,
        })
    };
    let norms: Vec<f64> = noise.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let dev = |v: f64, target: f64| if target > 0.0 { (v / target - 1.0).abs() } else { 0.0 };
    band("noise_norm", norms.iter().map(|&v| dev(v, sigma_eps * d.sqrt())).fold(0.0, f64::max), vacuous);
    let mut wnoise = None;
    if let Some(init) = &init {
        let vac_w = init.sigma_w == 0.0;
        let wm = [init.w.dot(&signals.mu_plus), init.w.dot(&signals.mu_minus)];
        let target = init.sigma_w * mu * d.sqrt();
        band("w_signal_norm", wm.iter().map(|v| dev(v.dot(v).sqrt(), target)).fold(0.0, f64::max), vac_w);
        let we = noise.dot(&init.w.t());
        let target = init.sigma_w * sigma_eps * d;
        band(
            "w_noise_norm",
            we.rows().into_iter().map(|r| dev(r.dot(&r).sqrt(), target)).fold(0.0, f64::max),
            vac_w || vacuous,
        );
        band("p_norm", dev(init.p.dot(init.p).sqrt(), init.sigma_p * d.sqrt()), init.sigma_p == 0.0);
        wnoise = Some((wm, we));
    }
    let mut cap = |name: &str, measured: f64, bound: f64, vac: bool| {
        events.push(GoodRunEvent {
            name: name.into(),
            measured,
            lower: None,
            upper: Some(bound),
            holds: vac || measured < bound,
            vacuous: vac,
        })
    };
    let c = tol.inner_c;
    let gram = noise.dot(&noise.t());
    let mut worst = 0f64;
    for a in 0..gram.nrows() {
        for b in 0..a {
            worst = worst.max(gram[[a, b]].abs());
        }
    }
    cap("noise_inner", worst, c * sigma_eps * sigma_eps * d.sqrt() * l, vacuous);
    let max_abs = |v: Array1<f64>| v.iter().fold(0f64, |a, x| a.max(x.abs()));
    let sm = max_abs(noise.dot(&signals.mu_plus)).max(max_abs(noise.dot(&signals.mu_minus)));
    cap("signal_noise_inner", sm, c * sigma_eps * mu * l.sqrt(), vacuous);
    let nu_norm = nu.dot(nu).sqrt();
    cap("head_noise_inner", max_abs(noise.dot(nu)), c * sigma_eps * nu_norm * l.sqrt(), vacuous || nu_norm == 0.0);
    if let (Some(init), Some((wm, we))) = (&init, wnoise) {
        let (sw, sp) = (init.sigma_w, init.sigma_p);
        let vac = sw == 0.0;
        cap("w_signal_cross", wm[0].dot(&wm[1]).abs(), c * sw * sw * mu * mu * d.sqrt() * l, vac);
        let smn = max_abs(we.dot(&wm[0])).max(max_abs(we.dot(&wm[1])));
        cap("w_signal_noise", smn, c * sw * sw * sigma_eps * mu * d * l, vac || vacuous);
        let wg = we.dot(&we.t());
        let mut worst = 0f64;
        for a in 0..wg.nrows() {
            for b in 0..a {
                worst = worst.max(wg[[a, b]].abs());
            }
        }
        cap("w_noise_inner", worst, c * sw * sw * sigma_eps * sigma_eps * d.powf(1.5) * l, vac || vacuous);
        let wp = wm[0].dot(init.p).abs().max(wm[1].dot(init.p).abs());
        cap("w_signal_p", wp, c * sw * sp * mu * d.sqrt() * l, vac || sp == 0.0);
        cap("w_noise_p", max_abs(we.dot(init.p)), c * sw * sp * sigma_eps * d * l, vac || sp == 0.0 || vacuous);
    }
    let nf = n as f64;
    let mut count = |name: &str, k: usize, lo: f64, hi: f64| {
        let v = k as f64;
        events.push(GoodRunEvent {
            name: name.into(),
            measured: v,
            lower: Some(lo),
            upper: Some(hi),
            holds: lo <= v && v <= hi,
            vacuous: false,
        })
    };
    let (clo, chi) = ((2.0 - 3.0 * eta) * nf / 4.0, (2.0 - eta) * nf / 4.0);
    let (nlo, nhi) = (eta * nf / 4.0, 3.0 * eta * nf / 4.0);
    count("clean_pos_count", dataset.clean_pos.len(), clo, chi);
    count("clean_neg_count", dataset.clean_neg.len(), clo, chi);
    count("noisy_pos_count", dataset.noisy_pos.len(), nlo, nhi);
    count("noisy_neg_count", dataset.noisy_neg.len(), nlo, nhi);
    GoodRunReport { events }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// `None` when the response is constant.
    pub r2: Option<f64>,
    pub points: usize,
}

impl LinearFit {
    pub fn degenerate(&self) -> bool {
        self.r2.is_none()
    }
}

/// Least squares line through `(x, y)` from the two normal equations.
pub fn ols(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let k = x.len();
    if k < 2 || y.len() != k {
        return Err(Error::InvalidInput(format!("need at least 2 paired points, got {k}")));
    }
    let kf = k as f64;
    let xm = x.iter().sum::<f64>() / kf;
    let ym = y.iter().sum::<f64>() / kf;
    let sxx: f64 = x.iter().map(|v| (v - xm) * (v - xm)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - xm) * (b - ym)).sum();
    let syy: f64 = y.iter().map(|v| (v - ym) * (v - ym)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all abscissae equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let r2 = if syy == 0.0 {
        None
    } else {
        let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        Some(1.0 - sse / syy)
    };
    Ok(LinearFit { slope, intercept, r2, points: k })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum GapQuantity {
    /// `Λ_{i,t}`, `t = 2..T`.
    Lambda,
    /// `Γ_{i,u}`, `u = 3..T`.
    Gamma,
    /// `Γ_{i,1} − log ρ⁻¹`.
    GammaRelevantShifted { rho: f64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct SeriesFit {
    pub sample: usize,
    /// 1-based token index.
    pub token: usize,
    pub fit: Option<LinearFit>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GLinearity {
    pub window: (usize, usize),
    pub series: Vec<SeriesFit>,
    /// Fit of the cross-sectional mean of `g(·)` against the step.
    pub pooled: LinearFit,
    pub enough_points: bool,
}

/// Default window over logged rows: from the first row after step 0 up to and
/// including the first row where `max_i s₁ > 0.99` (the whole trace if that
/// never happens). Returned as a half-open row range.
pub fn default_window(trace: &TrainTrace) -> (usize, usize) {
    let end = trace.saturation_index(0.99).map_or(trace.rows.len(), |k| k + 1);
    (1.min(end), end)
}

/// OLS of `g(quantity)` against the step over logged rows `window.0..window.1`.
pub fn g_linearity(
    trace: &TrainTrace,
    samples: &[usize],
    quantity: GapQuantity,
    window: (usize, usize),
) -> Result<GLinearity> {
    let (lo, hi) = (window.0, window.1.min(trace.rows.len()));
    if hi < lo + 2 {
        return Err(Error::InvalidInput(format!("window {lo}..{hi} holds fewer than 2 logged points")));
    }
    let t = trace.probs.first().map_or(0, |p| p.ncols());
    let steps: Vec<f64> = trace.rows[lo..hi].iter().map(|r| r.step as f64).collect();
    let mut columns: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for &i in samples {
        let tokens: Vec<usize> = match quantity {
            GapQuantity::Lambda => (2..=t).collect(),
            GapQuantity::Gamma => (3..=t).collect(),
            GapQuantity::GammaRelevantShifted { .. } => vec![1],
        };
        for tok in tokens {
            let vals = trace.diagnostics[lo..hi]
                .iter()
                .map(|dg| match quantity {
                    GapQuantity::Lambda => g(dg.lambda_at(i, tok), t),
                    GapQuantity::Gamma => g(dg.gamma_at(i, tok), t),
                    GapQuantity::GammaRelevantShifted { rho } => g(dg.gamma_at(i, 1) + rho.ln(), t),
                })
                .collect();
            columns.push((i, tok, vals));
        }
    }
    if columns.is_empty() {
        return Err(Error::InvalidInput("no series selected".into()));
    }
    let mean: Vec<f64> = (0..steps.len())
        .map(|k| columns.iter().map(|c| c.2[k]).sum::<f64>() / columns.len() as f64)
        .collect();
    let pooled = ols(&steps, &mean)?;
    let series = columns
        .into_iter()
        .map(|(sample, token, vals)| SeriesFit { sample, token, fit: ols(&steps, &vals).ok() })
        .collect();
    Ok(GLinearity { window: (lo, hi), series, pooled, enough_points: steps.len() >= 10 })
}

/// Logged row where `s₂` of sample `j` starts its final monotone increase.
pub fn stage_boundary(trace: &TrainTrace, j: usize) -> usize {
    let s2: Vec<f64> = trace.probs.iter().map(|p| p[[j, 1]]).collect();
    let mut k = s2.len().saturating_sub(1);
    while k > 0 && s2[k] >= s2[k - 1] {
        k -= 1;
    }
    k
}

/// First logged row where `s₁` of sample `j` is below `level`.
pub fn suppression_row(trace: &TrainTrace, j: usize, level: f64) -> Option<usize> {
    trace.probs.iter().position(|p| p[[j, 0]] < level)
}

#[derive(Clone, Debug, Serialize)]
pub struct SignalGrowthReport {
    pub burn_in_row: usize,
    pub plus_increasing: bool,
    pub minus_increasing: bool,
    pub plus_gain_fraction: f64,
    pub minus_gain_fraction: f64,
    pub log_slope_plus: Option<f64>,
    pub log_slope_minus: Option<f64>,
    pub n_snr2: f64,
}

impl SignalGrowthReport {
    pub fn pass(&self) -> bool {
        self.plus_increasing && self.minus_increasing && self.log_slope_plus.is_some_and(|s| s > 0.0)
    }
}

/// λ± after the first `burn_in` fraction of logged rows: whether each is
/// non-decreasing, `(λ(final) − λ(0))/range`, and the slope of λ against
/// `log τ`.
pub fn signal_growth_check(rows: &[TraceRow], burn_in: f64, n_snr2: f64) -> SignalGrowthReport {
    let start = ((rows.len() as f64 * burn_in).floor() as usize).min(rows.len().saturating_sub(1));
    let tail = &rows[start..];
    let rising = |f: fn(&TraceRow) -> f64| tail.windows(2).all(|w| f(&w[1]) >= f(&w[0]) - 1e-12);
    let gain = |f: fn(&TraceRow) -> f64| {
        let vals: Vec<f64> = rows.iter().map(f).collect();
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        if hi > lo {
            (vals[vals.len() - 1] - vals[0]) / (hi - lo)
        } else {
            0.0
        }
    };
    let slope = |f: fn(&TraceRow) -> f64| {
        let pts: Vec<(f64, f64)> = tail.iter().filter(|r| r.step > 0).map(|r| ((r.step as f64).ln(), f(r))).collect();
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        ols(&x, &y).ok().map(|fit| fit.slope)
    };
    let plus = |r: &TraceRow| r.lambda_plus;
    let minus = |r: &TraceRow| r.lambda_minus;
    SignalGrowthReport {
        burn_in_row: start,
        plus_increasing: rising(plus),
        minus_increasing: rising(minus),
        plus_gain_fraction: gain(plus),
        minus_gain_fraction: gain(minus),
        log_slope_plus: slope(plus),
        log_slope_minus: slope(minus),
        n_snr2,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Regime {
    NotOverfitting,
    BenignOverfitting,
    HarmfulOverfitting,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::NotOverfitting => "not-overfitting",
            Regime::BenignOverfitting => "benign",
            Regime::HarmfulOverfitting => "harmful",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeThresholds {
    pub benign: f64,
    pub harmful: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        RegimeThresholds { benign: 1.0, harmful: 1.0 }
    }
}

/// Harmful if `SNR²√d < θ_harmful`, else not-overfitting if `n·SNR² > θ_benign`,
/// else benign.
pub fn classify_regime(config: &DataConfig, thresholds: RegimeThresholds) -> Result<Regime> {
    let s2 = crate::data::snr(config)?.powi(2);
    Ok(if s2 * (config.d as f64).sqrt() < thresholds.harmful {
        Regime::HarmfulOverfitting
    } else if config.n as f64 * s2 > thresholds.benign {
        Regime::NotOverfitting
    } else {
        Regime::BenignOverfitting
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Grokking {
    pub tau_fit: Option<usize>,
    pub tau_gen: Option<usize>,
}

/// First logged steps where train accuracy (against the training labels)
/// reaches `fit_threshold` and test accuracy reaches `gen_threshold`.
pub fn measure_grokking(rows: &[TraceRow], fit_threshold: f64, gen_threshold: f64) -> Grokking {
    Grokking {
        tau_fit: rows.iter().find(|r| r.train_acc >= fit_threshold).map(|r| r.step),
        tau_gen: rows.iter().find(|r| r.test_acc >= gen_threshold).map(|r| r.step),
    }
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
}

/// Monte Carlo estimate of `−∇_{ν_k}L` at `W = p = 0`, `W_V = 0` over the
/// K-class distribution, compared in angle with `μ_k − μ̄`.
pub fn etf_gradient_check<R: Rng + ?Sized>(
    signals: &[Array1<f64>],
    config: &DataConfig,
    mc_samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    const BATCH: usize = 2000;
    let k = signals.len();
    if k < 2 {
        return Err(Error::InvalidInput(format!("need K >= 2 classes, got {k}")));
    }
    if mc_samples < 1000 {
        return Err(Error::InvalidInput("need at least 1000 Monte Carlo samples".into()));
    }
    let d = config.d;
    let state = MulticlassState { w: Array2::zeros((d, d)), p: Array1::zeros(d), heads: Array2::zeros((k, d)) };
    let mut total = Array2::<f64>::zeros((k, d));
    let mut done = 0;
    while done < mc_samples {
        let count = BATCH.min(mc_samples - done);
        let batch = generate_multiclass(config, signals, count, rng)?;
        let g = multiclass_loss_and_grads(&batch, &state)?;
        total.scaled_add(-(count as f64), &g.heads);
        done += count;
    }
    let mut mean_signal = Array1::zeros(d);
    for m in signals {
        mean_signal += m;
    }
    mean_signal /= k as f64;
    Ok(total
        .axis_iter(Axis(0))
        .zip(signals)
        .map(|(est, m)| cosine(&est.to_owned(), &(m - &mean_signal)))
        .collect())
}

/// `(1/(KT)) (1 − Kη/(K−1)) (μ_k − μ̄)`, the expectation of `−∇_{ν_k}L` at the
/// zero state.
pub fn etf_expected_gradient(signals: &[Array1<f64>], k_index: usize, t: usize, eta: f64) -> Array1<f64> {
    let k = signals.len() as f64;
    let mut mean = Array1::zeros(signals[0].len());
    for m in signals {
        mean += m;
    }
    mean /= k;
    (&signals[k_index] - &mean) * ((1.0 - k * eta / (k - 1.0)) / (k * t as f64))
}

#[derive(Clone, Copy, Debug, Serialize, serde::Deserialize)]
pub struct InitThresholds {
    pub uniformity: f64,
    pub lambda_gap: f64,
    pub gamma_gap: f64,
    pub drift: f64,
}

impl Default for InitThresholds {
    fn default() -> Self {
        InitThresholds { uniformity: 0.25, lambda_gap: 0.5, gamma_gap: 0.5, drift: 0.1 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InitReport {
    /// `max_{i,t} |s_t(0) − 1/T|·T`
    pub uniformity: f64,
    pub max_lambda_gap: f64,
    pub max_gamma_gap: f64,
    pub drift_lambda: f64,
    pub drift_rho: f64,
    pub thresholds: InitThresholds,
}

impl InitReport {
    pub fn pass(&self) -> bool {
        let th = &self.thresholds;
        self.uniformity <= th.uniformity
            && self.max_lambda_gap <= th.lambda_gap
            && self.max_gamma_gap <= th.gamma_gap
            && self.drift_lambda <= th.drift
            && self.drift_rho <= th.drift
    }
}

fn max_abs2(a: &Array2<f64>) -> f64 {
    a.iter().fold(0f64, |m, v| m.max(v.abs()))
}

/// Initialization quantities from the diagnostics before and after the first
/// step and the probabilities at step 0.
pub fn init_checks(
    probs0: &Array2<f64>,
    diag0: &AttentionDiagnostics,
    diag1: &AttentionDiagnostics,
    thresholds: InitThresholds,
) -> InitReport {
    let t = probs0.ncols() as f64;
    InitReport {
        uniformity: probs0.iter().fold(0f64, |m, s| m.max((s - 1.0 / t).abs() * t)),
        max_lambda_gap: max_abs2(&diag0.lambda_gap),
        max_gamma_gap: max_abs2(&diag0.gamma_gap),
        drift_lambda: (diag1.lambda_plus - diag0.lambda_plus)
            .abs()
            .max((diag1.lambda_minus - diag0.lambda_minus).abs()),
        drift_rho: max_abs2(&(&diag1.rho_attn - &diag0.rho_attn)),
        thresholds,
    }
}

/// [`init_checks`] on an explicit state, taking one dense step of size `alpha`.
pub fn init_checks_dense(
    state: &ModelState,
    dataset: &Dataset,
    signals: &SignalBasis,
    alpha: f64,
    thresholds: InitThresholds,
) -> Result<InitReport> {
    let d0 = compute_diagnostics(state, dataset, signals);
    let next = gd_step(state, dataset, alpha)?;
    let d1 = compute_diagnostics(&next, dataset, signals);
    let q = state.query();
    let mut probs = Array2::zeros((dataset.len(), dataset.seq_len()));
    for (i, s) in dataset.samples.iter().enumerate() {
        probs.row_mut(i).assign(&softmax_unchecked(s.tokens.dot(&q).view()));
    }
    Ok(init_checks(&probs, &d0, &d1, thresholds))
}

/// One check in a serialized report.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub measured: Value,
    pub threshold: Value,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TheoryReport {
    pub checks: Vec<CheckResult>,
}

impl TheoryReport {
    pub fn push(&mut self, name: &str, pass: bool, measured: Value, threshold: Value, config_hash: &str, seed: u64) {
        self.checks.push(CheckResult {
            name: name.into(),
            pass,
            measured,
            threshold,
            config_hash: config_hash.into(),
            seed,
        });
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failing(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect()
    }

    pub fn to_json(&self) -> Value {
        json!(self.checks)
    }
}

/// 1-based index of the most attended token of sample `i`.
pub fn selected_token(probs: &Array2<f64>, i: usize) -> usize {
    let row = probs.row(i);
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, make_signals, Label, SignalMode};
    use crate::model::{init_params, make_head, HeadNorm};
    use crate::rng;
    use crate::trainer::TraceRow;
    use ndarray::array;

    fn cfg(d: usize) -> DataConfig {
        DataConfig { n: 6, t: 4, d, mu_norm: 3.0, sigma_eps: 0.8, eta: 0.3, rho: 0.3, n_weak_same: 1 }
    }

    fn instance(seed: u64, d: usize) -> (DataConfig, SignalBasis, Dataset, ModelState) {
        let c = cfg(d);
        let sig = make_signals(d, c.mu_norm, SignalMode::RandomOrthogonal, &mut rng::stream(seed, rng::SIGNALS)).unwrap();
        let ds =
            generate_dataset(&c, &sig, &mut rng::stream(seed, rng::DATA), &mut rng::stream(seed, rng::LABEL_NOISE)).unwrap();
        let (w, p) = init_params(d, 0.4, 0.7, &mut rng::stream(seed, rng::INIT));
        let nu = make_head(&sig, HeadNorm::Unit).unwrap();
        (c, sig, ds, ModelState::new(w, p, nu).unwrap())
    }

    #[test]
    fn g_values() {
        for t in [2usize, 8] {
            let lt = (t as f64).ln();
            assert!((g(lt, t) - 2.0 * lt).abs() < 1e-14);
            assert!((g(0.0, t) - (1.0 / t as f64 - t as f64)).abs() < 1e-12);
            let grid: Vec<f64> = (0..1000).map(|k| -5.0 + k as f64 * 0.01).map(|x| g(x, t)).collect();
            assert!(grid.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn diagnostics_vanish_at_zero_weights() {
        let (_, sig, ds, st) = instance(1, 10);
        let zero = ModelState::new(Array2::zeros((10, 10)), st.p().clone(), st.nu().clone()).unwrap();
        let d = compute_diagnostics(&zero, &ds, &sig);
        assert_eq!(d.lambda_plus, 0.0);
        assert!(d.rho_attn.iter().chain(&d.lambda_gap).chain(&d.gamma_gap).all(|v| *v == 0.0));
    }

    #[test]
    fn diagnostics_match_definitions() {
        let (_, sig, ds, st) = instance(2, 12);
        let d = compute_diagnostics(&st, &ds, &sig);
        let q = st.query();
        for (i, s) in ds.samples.iter().enumerate() {
            assert_eq!(d.gamma_at(i, 1), -d.lambda_at(i, 2));
            for t in 2..=4 {
                let direct = (&s.tokens.row(0) - &s.tokens.row(t - 1)).dot(&q);
                assert!((d.lambda_at(i, t) - direct).abs() < 1e-10);
            }
            for u in [1usize, 3, 4] {
                let direct = (&s.tokens.row(1) - &s.tokens.row(u - 1)).dot(&q);
                assert!((d.gamma_at(i, u) - direct).abs() < 1e-10);
            }
            // role decomposition for an irrelevant token (index 4)
            let lam = if s.y_true == Label::Plus { d.lambda_plus } else { d.lambda_minus };
            let expect = lam + d.rho_attn[[i, 0]] - d.rho_attn[[i, 3]];
            assert!((d.lambda_at(i, 4) - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn interaction_terms_match_their_sums() {
        let (_, sig, ds, st) = instance(3, 8);
        let it = Interactions::new(&st, &ds, &sig);
        let q = st.query();
        let s = &ds.samples[2];
        let probs = crate::model::softmax(s.tokens.dot(&q).view()).unwrap();
        let gamma = s.tokens.dot(st.nu());
        let f = probs.dot(&gamma);
        let eps = ds.samples[4].noise.row(1).to_owned();
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for t in 0..4 {
            let w = probs[t] * (gamma[t] - f);
            let x = s.tokens.row(t);
            a += w * x.dot(&sig.mu_minus);
            b += w * st.w().dot(&x).dot(&st.w().dot(&eps));
            c += w * st.w().dot(&x).dot(st.p());
        }
        assert!((it.i_minus(2) - a).abs() < 1e-12);
        assert!((it.iw_noise(2, 4, 1) - b).abs() < 1e-12);
        assert!((it.i_p(2) - c).abs() < 1e-12);
        assert!(it.i_plus(2).is_finite() && it.iw_plus(2).is_finite() && it.iw_minus(2).is_finite());
        assert!(it.i_noise(2, 4, 1).is_finite());
    }

    #[test]
    fn update_identities() {
        for seed in 0..3 {
            let (_, sig, ds, st) = instance(10 + seed, 8);
            let r = verify_update_identity(&st, &ds, &sig, 0.2).unwrap();
            assert!(r.max_rel_err < 1e-9, "{}", r.max_rel_err);
        }
        let (_, sig, ds, st) = instance(5, 8);
        let r = verify_update_identity(&st, &ds, &sig, 0.0).unwrap();
        assert!(r.entries.iter().all(|e| e.lhs == 0.0 && e.rhs == 0.0));
        let still = st.with_head(Array1::zeros(8)).unwrap();
        let r = verify_update_identity(&still, &ds, &sig, 0.5).unwrap();
        assert!(r.entries.iter().all(|e| e.lhs == 0.0 && e.rhs.abs() == 0.0));
    }

    #[test]
    fn softmax_bound_uniform_and_monotone() {
        let t = 5;
        let diag = AttentionDiagnostics::from_logits(&Array2::zeros((1, t)), Array2::zeros((1, t)), 0.0, 0.0);
        let probs = Array2::from_elem((1, t), 0.2);
        let r = softmax_bound_check(&diag, &probs);
        assert!(r.pass(), "{r:?}");
        assert!(r.identity_max_err < 1e-15);

        let scores = array![[0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()]];
        let probs = array![[0.7, 0.2, 0.1]];
        let diag = AttentionDiagnostics::from_logits(&scores, Array2::zeros((1, 3)), 0.0, 0.0);
        let r = softmax_bound_check(&diag, &probs);
        assert_eq!(r.monotone_violations, 0);
        assert!(r.identity_max_err < 1e-15);
        assert_eq!(r.bracket_violations, 0);
        let wrong = array![[0.5, 0.4, 0.1]];
        assert!(softmax_bound_check(&diag, &wrong).identity_max_err > 1e-3);
    }

    #[test]
    fn ols_cases() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let f = ols(&x, &y).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-12 && (f.intercept + 1.0).abs() < 1e-12);
        assert_eq!(f.r2, Some(1.0));
        let c = ols(&x, &[2.0; 20]).unwrap();
        assert!(c.degenerate() && c.slope == 0.0);
        assert!(ols(&[1.0], &[1.0]).is_err());
    }

    fn row(step: usize, train: f64, test: f64) -> TraceRow {
        TraceRow {
            step,
            train_loss: 0.0,
            train_acc: train,
            train_acc_true: train,
            test_acc: test,
            test_loss: 0.0,
            lambda_plus: step as f64,
            lambda_minus: step as f64,
            max_abs_output: 0.0,
            loss_derivative_ratio: 1.0,
        }
    }

    #[test]
    fn grokking_planted() {
        let rows: Vec<TraceRow> = (0..10)
            .map(|k| k * 100)
            .map(|s| row(s, if s >= 100 { 1.0 } else { 0.5 }, if s >= 500 { 0.99 } else { 0.6 }))
            .collect();
        assert_eq!(measure_grokking(&rows, 1.0, 0.95), Grokking { tau_fit: Some(100), tau_gen: Some(500) });
        let never: Vec<TraceRow> = (0..5).map(|s| row(s, 0.5, 0.5)).collect();
        assert_eq!(measure_grokking(&never, 1.0, 0.95), Grokking { tau_fit: None, tau_gen: None });
    }

    #[test]
    fn signal_growth_on_planted_rows() {
        let rows: Vec<TraceRow> = (0..30).map(|s| row(s * 10, 1.0, 1.0)).collect();
        let r = signal_growth_check(&rows, 0.2, 4.0);
        assert!(r.pass() && r.plus_gain_fraction == 1.0);
        let flat: Vec<TraceRow> = (0..30).map(|s| TraceRow { lambda_plus: 1.0, lambda_minus: 1.0, ..row(s, 1.0, 1.0) }).collect();
        let r = signal_growth_check(&flat, 0.2, 4.0);
        assert_eq!(r.log_slope_plus, Some(0.0));
        assert!(!r.pass());
    }

    #[test]
    fn regimes() {
        let base = DataConfig { n: 20, t: 8, d: 1000, mu_norm: 100.0, sigma_eps: 1.0, eta: 0.2, rho: 0.1, n_weak_same: 1 };
        let th = RegimeThresholds::default();
        assert_eq!(classify_regime(&base, th).unwrap(), Regime::NotOverfitting);
        let harmful = DataConfig { d: 5000, mu_norm: 5.0, ..base.clone() };
        assert_eq!(classify_regime(&harmful, th).unwrap(), Regime::HarmfulOverfitting);
        let mid = DataConfig { d: 2000, mu_norm: 20.0, ..base.clone() };
        assert_eq!(classify_regime(&mid, th).unwrap(), Regime::NotOverfitting);
        let loose = RegimeThresholds { benign: 10.0, harmful: 1.0 };
        assert_eq!(classify_regime(&mid, loose).unwrap(), Regime::BenignOverfitting);
        for c in [0.5, 3.0, 10.0] {
            for x in [&base, &harmful, &mid] {
                let scaled = DataConfig { mu_norm: x.mu_norm * c, sigma_eps: x.sigma_eps * c, ..x.clone() };
                assert_eq!(classify_regime(&scaled, th).unwrap(), classify_regime(x, th).unwrap());
            }
        }
    }

    #[test]
    fn good_run_without_noise_is_vacuous() {
        let c = DataConfig { sigma_eps: 0.0, ..cfg(10) };
        let sig = make_signals(10, 3.0, SignalMode::AxisAligned, &mut rng::stream(0, rng::SIGNALS)).unwrap();
        let ds = generate_dataset(&c, &sig, &mut rng::stream(0, rng::DATA), &mut rng::stream(0, rng::LABEL_NOISE)).unwrap();
        let nu = make_head(&sig, HeadNorm::Unit).unwrap();
        let r = good_run_check(&ds, None, &sig, &nu, 0.0, 0.3, GoodRunTolerances::default());
        for name in ["noise_norm", "noise_inner", "signal_noise_inner", "head_noise_inner"] {
            let e = r.get(name).unwrap();
            assert!(e.vacuous && e.holds, "{name}");
        }
    }

    #[test]
    fn good_run_with_init_reports_margins() {
        let (c, sig, ds, st) = instance(8, 400);
        let init = InitDraw { w: st.w(), p: st.p(), sigma_w: 0.4, sigma_p: 0.7 };
        let r = good_run_check(&ds, Some(init), &sig, st.nu(), c.sigma_eps, c.eta, GoodRunTolerances::default());
        for name in ["noise_norm", "w_signal_norm", "w_noise_norm", "p_norm", "noise_inner", "w_noise_inner", "w_noise_p"] {
            let e = r.get(name).unwrap();
            assert!(!e.vacuous && e.measured.is_finite(), "{name}");
        }
        assert!(r.get("noise_norm").unwrap().holds);
    }

    #[test]
    fn token_scores_without_noise() {
        let c = DataConfig { sigma_eps: 0.0, n: 40, ..cfg(10) };
        let sig = make_signals(10, 3.0, SignalMode::AxisAligned, &mut rng::stream(0, rng::SIGNALS)).unwrap();
        let ds = generate_dataset(&c, &sig, &mut rng::stream(0, rng::DATA), &mut rng::stream(0, rng::LABEL_NOISE)).unwrap();
        let nu = make_head(&sig, HeadNorm::InverseMu).unwrap();
        let r = token_score_check(&ds, &nu, &sig, 0.0, c.rho);
        assert!(r.pass);
        assert_eq!(r.frac_relevant_positive, 1.0);
        assert_eq!(r.frac_confusing_negative, 1.0);
        if !ds.noisy_idx.is_empty() {
            assert_eq!(r.noisy_relevant_negative, 1.0);
        }
    }

    #[test]
    fn normal_cdf_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(1.96) - 0.975).abs() < 1e-4);
        assert!((normal_cdf(-1.0) - 0.158_655_25).abs() < 1e-6);
    }

    #[test]
    fn etf_direction_two_classes() {
        let c = DataConfig { n: 1, t: 4, d: 6, mu_norm: 1.0, sigma_eps: 0.0, eta: 0.0, rho: 0.5, n_weak_same: 1 };
        let sig: Vec<Array1<f64>> = (0..2).map(|k| Array1::from_shape_fn(6, |j| f64::from(u8::from(j == k)))).collect();
        let cos = etf_gradient_check(&sig, &c, 4000, &mut rng::stream(0, rng::ETF)).unwrap();
        assert!(cos.iter().all(|v| *v > 0.99), "{cos:?}");
        let e = etf_expected_gradient(&sig, 0, 4, 0.0);
        assert!((e[0] - 0.5 / 8.0).abs() < 1e-15 && (e[1] + 0.5 / 8.0).abs() < 1e-15);
        assert!(etf_gradient_check(&sig[..1], &c, 4000, &mut rng::stream(0, rng::ETF)).is_err());
    }

    #[test]
    fn init_checks_at_zero_scale() {
        let (_, sig, ds, st) = instance(4, 10);
        let zero = ModelState::new(Array2::zeros((10, 10)), Array1::zeros(10), st.nu().clone()).unwrap();
        let r = init_checks_dense(&zero, &ds, &sig, 0.1, InitThresholds::default()).unwrap();
        assert_eq!(r.uniformity, 0.0);
        assert_eq!(r.max_lambda_gap, 0.0);
        assert_eq!(r.max_gamma_gap, 0.0);
        assert!(r.pass());
    }

    #[test]
    fn selected_token_is_one_based() {
        assert_eq!(selected_token(&array![[0.1, 0.7, 0.2]], 0), 2);
    }
}
