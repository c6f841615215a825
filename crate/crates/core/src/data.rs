//! Signal/noise token sequences with a relevant token, a confusing token,
//! weak same-class tokens and pure-noise filler, plus symmetric label flips.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Plus,
    Minus,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Plus => 1.0,
            Label::Minus => -1.0,
        }
    }

    pub fn flip(self) -> Label {
        match self {
            Label::Plus => Label::Minus,
            Label::Minus => Label::Plus,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenRole {
    Relevant,
    WeakSame,
    WeakConfusing,
    Irrelevant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    AxisAligned,
    #[default]
    RandomOrthogonal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalBasis {
    pub mu_plus: Array1<f64>,
    pub mu_minus: Array1<f64>,
}

impl SignalBasis {
    pub fn mu(&self, label: Label) -> &Array1<f64> {
        match label {
            Label::Plus => &self.mu_plus,
            Label::Minus => &self.mu_minus,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu_plus.len()
    }

    pub fn norm(&self) -> f64 {
        self.mu_plus.dot(&self.mu_plus).sqrt()
    }
}

fn normal_vec<R: Rng + ?Sized>(d: usize, scale: f64, rng: &mut R) -> Array1<f64> {
    Array1::from_iter((0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)))
}

/// Two orthogonal class signals of norm `mu_norm`.
pub fn make_signals<R: Rng + ?Sized>(
    d: usize,
    mu_norm: f64,
    mode: SignalMode,
    rng: &mut R,
) -> Result<SignalBasis> {
    if d < 2 {
        return Err(Error::Dimension(format!("need d >= 2 for two orthogonal signals, got {d}")));
    }
    if !(mu_norm > 0.0 && mu_norm.is_finite()) {
        return Err(Error::InvalidInput(format!("mu_norm must be positive, got {mu_norm}")));
    }
    match mode {
        SignalMode::AxisAligned => {
            let mut mu_plus = Array1::zeros(d);
            let mut mu_minus = Array1::zeros(d);
            mu_plus[0] = mu_norm;
            mu_minus[1] = mu_norm;
            Ok(SignalBasis { mu_plus, mu_minus })
        }
        SignalMode::RandomOrthogonal => {
            let a = normal_vec(d, 1.0, rng);
            let mut b = normal_vec(d, 1.0, rng);
            let a = &a / a.dot(&a).sqrt();
            // two passes of Gram-Schmidt keep the inner product at rounding level
            for _ in 0..2 {
                let proj = a.dot(&b);
                b.scaled_add(-proj, &a);
            }
            let b = &b / b.dot(&b).sqrt();
            Ok(SignalBasis { mu_plus: a * mu_norm, mu_minus: b * mu_norm })
        }
    }
}

/// Parameters of the token distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
    pub mu_norm: f64,
    pub sigma_eps: f64,
    pub eta: f64,
    pub rho: f64,
    #[serde(default = "default_weak_same")]
    pub n_weak_same: usize,
}

fn default_weak_same() -> usize {
    1
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n", "must be positive"));
        }
        if self.d < 2 {
            return Err(Error::config("d", "must be at least 2"));
        }
        if self.t < 2 + self.n_weak_same {
            return Err(Error::config(
                "T",
                format!("must be at least 2 + n_weak_same = {}", 2 + self.n_weak_same),
            ));
        }
        if !(self.mu_norm > 0.0 && self.mu_norm.is_finite()) {
            return Err(Error::config("mu_norm", "must be positive and finite"));
        }
        if !(self.sigma_eps >= 0.0 && self.sigma_eps.is_finite()) {
            return Err(Error::config("sigma_eps", "must be non-negative and finite"));
        }
        if !(0.0..0.5).contains(&self.eta) {
            return Err(Error::config("eta", "must lie in [0, 0.5)"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config("rho", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn roles(&self) -> Vec<TokenRole> {
        (0..self.t)
            .map(|t| match t {
                0 => TokenRole::Relevant,
                1 => TokenRole::WeakConfusing,
                t if t < 2 + self.n_weak_same => TokenRole::WeakSame,
                _ => TokenRole::Irrelevant,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Rows are tokens `x_1 .. x_T`.
    pub tokens: Array2<f64>,
    pub y_train: Label,
    pub y_true: Label,
    pub roles: Vec<TokenRole>,
    pub noise: Array2<f64>,
}

impl Sample {
    pub fn is_noisy(&self) -> bool {
        self.y_train != self.y_true
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub clean_idx: Vec<usize>,
    pub noisy_idx: Vec<usize>,
    pub clean_pos: Vec<usize>,
    pub clean_neg: Vec<usize>,
    pub noisy_pos: Vec<usize>,
    pub noisy_neg: Vec<usize>,
}

impl Dataset {
    /// Build the index sets from the samples' labels.
    pub fn from_samples(samples: Vec<Sample>) -> Self {
        let mut ds = Dataset {
            samples,
            clean_idx: Vec::new(),
            noisy_idx: Vec::new(),
            clean_pos: Vec::new(),
            clean_neg: Vec::new(),
            noisy_pos: Vec::new(),
            noisy_neg: Vec::new(),
        };
        for (i, s) in ds.samples.iter().enumerate() {
            match (s.is_noisy(), s.y_train) {
                (false, Label::Plus) => ds.clean_pos.push(i),
                (false, Label::Minus) => ds.clean_neg.push(i),
                (true, Label::Plus) => ds.noisy_pos.push(i),
                (true, Label::Minus) => ds.noisy_neg.push(i),
            }
            if s.is_noisy() {
                ds.noisy_idx.push(i);
            } else {
                ds.clean_idx.push(i);
            }
        }
        ds
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.samples.first().map_or(0, |s| s.tokens.nrows())
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.tokens.ncols())
    }
}

/// One draw from the clean distribution (no label flip).
pub fn sample_from_p_star<R: Rng + ?Sized>(
    config: &DataConfig,
    signals: &SignalBasis,
    rng: &mut R,
) -> Result<Sample> {
    config.validate()?;
    if signals.dim() != config.d {
        return Err(Error::Dimension(format!(
            "signals have dimension {}, config has d = {}",
            signals.dim(),
            config.d
        )));
    }
    Ok(draw_sample(config, signals, rng))
}

fn draw_sample<R: Rng + ?Sized>(config: &DataConfig, signals: &SignalBasis, rng: &mut R) -> Sample {
    let y = if rng.random::<bool>() { Label::Plus } else { Label::Minus };
    let (t, d) = (config.t, config.d);
    let noise = Array2::from_shape_fn((t, d), |_| config.sigma_eps * rng.sample::<f64, _>(StandardNormal));
    let mut tokens = noise.clone();
    let roles = config.roles();
    for (k, role) in roles.iter().enumerate() {
        let mut row = tokens.row_mut(k);
        match role {
            TokenRole::Relevant => row += signals.mu(y),
            TokenRole::WeakConfusing => row.scaled_add(config.rho, signals.mu(y.flip())),
            TokenRole::WeakSame => row.scaled_add(config.rho, signals.mu(y)),
            TokenRole::Irrelevant => {}
        }
    }
    Sample { tokens, y_train: y, y_true: y, roles, noise }
}

/// `n` clean draws from `rng`, each label flipped with probability `eta`
/// using the separate `flip_rng`.
pub fn generate_dataset<R: Rng + ?Sized, F: Rng + ?Sized>(
    config: &DataConfig,
    signals: &SignalBasis,
    rng: &mut R,
    flip_rng: &mut F,
) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(config.n);
    samples.push(sample_from_p_star(config, signals, rng)?);
    samples.extend((1..config.n).map(|_| draw_sample(config, signals, rng)));
    for s in &mut samples {
        if flip_rng.random::<f64>() < config.eta {
            s.y_train = s.y_true.flip();
        }
    }
    Ok(Dataset::from_samples(samples))
}

/// `‖μ‖ / (σ_ε √d)`.
pub fn snr(config: &DataConfig) -> Result<f64> {
    if config.sigma_eps <= 0.0 || config.d == 0 {
        return Err(Error::InvalidInput("SNR needs sigma_eps > 0 and d >= 1".into()));
    }
    Ok(config.mu_norm / (config.sigma_eps * (config.d as f64).sqrt()))
}

/// `k` mutually orthogonal signals of norm `mu_norm`: the first `k` axes, or
/// Gram-Schmidt on Gaussian draws.
pub fn make_class_signals<R: Rng + ?Sized>(
    d: usize,
    k: usize,
    mu_norm: f64,
    mode: SignalMode,
    rng: &mut R,
) -> Result<Vec<Array1<f64>>> {
    if k < 2 || d < k {
        return Err(Error::Dimension(format!("need 2 <= K <= d, got K = {k}, d = {d}")));
    }
    if !(mu_norm > 0.0 && mu_norm.is_finite()) {
        return Err(Error::InvalidInput(format!("mu_norm must be positive, got {mu_norm}")));
    }
    let mut out: Vec<Array1<f64>> = Vec::with_capacity(k);
    for c in 0..k {
        let mut v = match mode {
            SignalMode::AxisAligned => {
                let mut e = Array1::zeros(d);
                e[c] = 1.0;
                e
            }
            SignalMode::RandomOrthogonal => normal_vec(d, 1.0, rng),
        };
        for _ in 0..2 {
            for u in &out {
                let proj = u.dot(&v) / (mu_norm * mu_norm);
                v.scaled_add(-proj, u);
            }
        }
        let len = v.dot(&v).sqrt();
        out.push(v * (mu_norm / len));
    }
    Ok(out)
}

/// A K-class sequence: relevant token for class `y_true`, weak tokens each
/// aligned with a uniformly drawn class, the rest pure noise.
#[derive(Clone, Debug)]
pub struct MultiSample {
    pub tokens: Array2<f64>,
    pub y_train: usize,
    pub y_true: usize,
}

/// Draw `count` K-class samples. The label is replaced by a uniformly chosen
/// other class with probability `eta`. `rho = 0` is allowed here.
pub fn generate_multiclass<R: Rng + ?Sized>(
    config: &DataConfig,
    signals: &[Array1<f64>],
    count: usize,
    rng: &mut R,
) -> Result<Vec<MultiSample>> {
    let k = signals.len();
    if k < 2 {
        return Err(Error::InvalidInput(format!("need K >= 2 classes, got {k}")));
    }
    if signals.iter().any(|m| m.len() != config.d) {
        return Err(Error::Dimension("signal dimension differs from config d".into()));
    }
    if config.t < 2 + config.n_weak_same {
        return Err(Error::config("T", "must be at least 2 + n_weak_same"));
    }
    let weak = 1 + config.n_weak_same;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let y_true = rng.random_range(0..k);
        let mut tokens =
            Array2::from_shape_fn((config.t, config.d), |_| config.sigma_eps * rng.sample::<f64, _>(StandardNormal));
        tokens.row_mut(0).scaled_add(1.0, &signals[y_true]);
        for u in 1..=weak {
            let c = rng.random_range(0..k);
            tokens.row_mut(u).scaled_add(config.rho, &signals[c]);
        }
        let y_train = if rng.random::<f64>() < config.eta {
            let other = rng.random_range(0..k - 1);
            if other >= y_true {
                other + 1
            } else {
                other
            }
        } else {
            y_true
        };
        out.push(MultiSample { tokens, y_train, y_true });
    }
    Ok(out)
}

/// One line of the assumption report: `lower <= value <= upper` where present.
#[derive(Clone, Debug, Serialize)]
pub struct AssumptionItem {
    pub name: &'static str,
    pub value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionReport {
    pub c: f64,
    pub delta: f64,
    pub items: Vec<AssumptionItem>,
}

impl AssumptionReport {
    pub fn get(&self, name: &str) -> Option<&AssumptionItem> {
        self.items.iter().find(|i| i.name == name)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelScales {
    pub sigma_w: f64,
    pub sigma_p: f64,
    pub alpha: f64,
}

fn item(name: &'static str, value: f64, lower: Option<f64>, upper: Option<f64>) -> AssumptionItem {
    let holds = lower.is_none_or(|l| l <= value) && upper.is_none_or(|u| value <= u);
    AssumptionItem { name, value, lower, upper, holds }
}

/// The reference initialization variance `max(‖μ‖√d, σ_ε d)⁻¹ log⁻²(Tn/δ)`.
pub fn reference_init_variance(config: &DataConfig, delta: f64) -> f64 {
    let d = config.d as f64;
    let l = ((config.t * config.n) as f64 / delta).ln();
    1.0 / (config.mu_norm * d.sqrt()).max(config.sigma_eps * d) / (l * l)
}

/// Evaluate the parameter assumptions with universal constant `c`. The
/// initialization variances must sit within a factor `init_slack` of the
/// reference variance. `T = Θ(1)` has no finite-scale content and is listed
/// for completeness only.
pub fn check_assumptions(
    config: &DataConfig,
    scales: ModelScales,
    c: f64,
    delta: f64,
    init_slack: f64,
) -> AssumptionReport {
    let (n, t, d) = (config.n as f64, config.t as f64, config.d as f64);
    let mu = config.mu_norm;
    let sig = config.sigma_eps;
    let sig_hat = sig.max(1.0 / sig);
    let l = (t * n / delta).ln();
    let big = (mu * d.sqrt()).max(sig * d);
    let v0 = reference_init_variance(config, delta);
    let items = vec![
        item("dimension", d, Some(c * sig_hat * n * mu.powf(4.0 / 3.0) * l.powi(3)), None),
        item("signal_strength", mu, Some(c * sig * d.powf(3.0 / 8.0) * l), None),
        item("weak_scale", config.rho, Some(c * sig * l / mu), Some(1.0 / c)),
        item("step_size", scales.alpha, None, Some(1.0 / (c * big))),
        item("sample_count", n, Some(c * (d / delta).ln()), None),
        item("noise_rate", config.eta, None, Some(1.0 / c)),
        item("token_count", t, None, None),
        item("init_w", scales.sigma_w * scales.sigma_w, Some(v0 / init_slack), Some(v0 * init_slack)),
        item("init_p", scales.sigma_p * scales.sigma_p, Some(v0 / init_slack), Some(v0 * init_slack)),
    ];
    AssumptionReport { c, delta, items }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cfg(d: usize) -> DataConfig {
        DataConfig { n: 20, t: 8, d, mu_norm: 20.0, sigma_eps: 1.0, eta: 0.2, rho: 0.1, n_weak_same: 1 }
    }

    #[test]
    fn axis_aligned_signals() {
        let s = make_signals(3, 2.0, SignalMode::AxisAligned, &mut rng::stream(0, rng::SIGNALS)).unwrap();
        assert_eq!(s.mu_plus.to_vec(), vec![2.0, 0.0, 0.0]);
        assert_eq!(s.mu_minus.to_vec(), vec![0.0, 2.0, 0.0]);
    }

    #[test]
    fn random_signals_are_orthogonal_with_exact_norm() {
        let s = make_signals(2000, 20.0, SignalMode::RandomOrthogonal, &mut rng::stream(3, rng::SIGNALS)).unwrap();
        assert!(s.mu_plus.dot(&s.mu_minus).abs() <= 1e-9 * 400.0);
        for m in [&s.mu_plus, &s.mu_minus] {
            assert!((m.dot(m).sqrt() - 20.0).abs() <= 1e-12 * 20.0);
        }
        let again = make_signals(2000, 20.0, SignalMode::RandomOrthogonal, &mut rng::stream(3, rng::SIGNALS)).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn class_signals_are_orthogonal() {
        let s = make_class_signals(50, 3, 4.0, SignalMode::RandomOrthogonal, &mut rng::stream(1, rng::SIGNALS)).unwrap();
        for a in 0..3 {
            assert!((s[a].dot(&s[a]) - 16.0).abs() < 1e-10);
            for b in 0..a {
                assert!(s[a].dot(&s[b]).abs() < 1e-10);
            }
        }
        let e = make_class_signals(4, 2, 2.0, SignalMode::AxisAligned, &mut rng::stream(1, rng::SIGNALS)).unwrap();
        assert_eq!(e[1].to_vec(), vec![0.0, 2.0, 0.0, 0.0]);
        assert!(make_class_signals(2, 3, 1.0, SignalMode::AxisAligned, &mut rng::stream(1, rng::SIGNALS)).is_err());
    }

    #[test]
    fn signals_need_two_dimensions() {
        let r = make_signals(1, 1.0, SignalMode::AxisAligned, &mut rng::stream(0, rng::SIGNALS));
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_noise_sample_is_pure_signal() {
        let c = DataConfig { n: 1, t: 4, d: 3, mu_norm: 2.0, sigma_eps: 0.0, eta: 0.0, rho: 0.1, n_weak_same: 1 };
        let s = make_signals(3, 2.0, SignalMode::AxisAligned, &mut rng::stream(0, rng::SIGNALS)).unwrap();
        let x = sample_from_p_star(&c, &s, &mut rng::stream(0, rng::DATA)).unwrap();
        let y = x.y_true;
        assert_eq!(x.y_train, y);
        assert_eq!(x.tokens.row(0), s.mu(y).view());
        assert_eq!(x.tokens.row(1), (s.mu(y.flip()) * 0.1).view());
        assert_eq!(x.tokens.row(2), (s.mu(y) * 0.1).view());
        assert!(x.tokens.row(3).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tokens_reconstruct_from_roles() {
        let c = cfg(50);
        let s = make_signals(50, 20.0, SignalMode::RandomOrthogonal, &mut rng::stream(1, rng::SIGNALS)).unwrap();
        let ds = generate_dataset(&c, &s, &mut rng::stream(1, rng::DATA), &mut rng::stream(1, rng::LABEL_NOISE)).unwrap();
        for x in &ds.samples {
            assert_eq!(x.roles[0], TokenRole::Relevant);
            assert_eq!(x.roles[1], TokenRole::WeakConfusing);
            // token = noise + signal is rounded once, so the difference is within an ulp
            let close = |a: Array1<f64>, b: &Array1<f64>| a.iter().zip(b).all(|(u, v)| (u - v).abs() <= 1e-12 * 20.0);
            assert!(close(&x.tokens.row(0) - &x.noise.row(0), s.mu(x.y_true)));
            assert!(close(&x.tokens.row(1) - &x.noise.row(1), &(s.mu(x.y_true.flip()) * 0.1)));
            for t in 3..8 {
                assert_eq!(x.tokens.row(t), x.noise.row(t));
            }
        }
    }

    #[test]
    fn index_sets_partition_samples() {
        let c = DataConfig { n: 200, ..cfg(10) };
        let s = make_signals(10, 20.0, SignalMode::AxisAligned, &mut rng::stream(0, rng::SIGNALS)).unwrap();
        let ds = generate_dataset(&c, &s, &mut rng::stream(2, rng::DATA), &mut rng::stream(2, rng::LABEL_NOISE)).unwrap();
        let mut all: Vec<usize> = ds.clean_idx.iter().chain(&ds.noisy_idx).copied().collect();
        all.sort();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
        for &i in &ds.noisy_idx {
            assert_ne!(ds.samples[i].y_train, ds.samples[i].y_true);
        }
        assert_eq!(ds.clean_pos.len() + ds.clean_neg.len(), ds.clean_idx.len());
        assert!(ds.noisy_pos.iter().all(|&i| ds.samples[i].y_train == Label::Plus));
    }

    #[test]
    fn no_flips_without_label_noise() {
        let c = DataConfig { n: 100, eta: 0.0, ..cfg(10) };
        let s = make_signals(10, 20.0, SignalMode::AxisAligned, &mut rng::stream(0, rng::SIGNALS)).unwrap();
        let ds = generate_dataset(&c, &s, &mut rng::stream(0, rng::DATA), &mut rng::stream(0, rng::LABEL_NOISE)).unwrap();
        assert!(ds.noisy_idx.is_empty());
    }

    #[test]
    fn snr_values() {
        let c = DataConfig { d: 1000, mu_norm: 100.0, ..cfg(1000) };
        let v = snr(&c).unwrap();
        assert!((v - 100.0 / 1000f64.sqrt()).abs() < 1e-12);
        assert!((20.0 * v * v - 200.0).abs() < 1e-9);
        let c = DataConfig { d: 5000, mu_norm: 5.0, ..cfg(5000) };
        assert!((snr(&c).unwrap().powi(2) - 0.005).abs() < 1e-15);
        assert!(snr(&DataConfig { sigma_eps: 0.0, ..c }).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(10).validate().is_ok());
        assert!(DataConfig { eta: 0.5, ..cfg(10) }.validate().is_err());
        assert!(DataConfig { rho: 1.0, ..cfg(10) }.validate().is_err());
        assert!(DataConfig { t: 2, ..cfg(10) }.validate().is_err());
        assert!(DataConfig { n: 0, ..cfg(10) }.validate().is_err());
    }

    #[test]
    fn config_json_is_strict() {
        let json = r#"{"n":20,"T":8,"d":2000,"mu_norm":20,"sigma_eps":1,"eta":0.2,"rho":0.1,"n_weak_same":1}"#;
        let c: DataConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c, cfg(2000));
        let back: DataConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let bad = r#"{"n":20,"T":8,"d":2000,"mu_norm":20,"sigma_eps":1,"eta":0.2,"rho":0.1,"extra":1}"#;
        assert!(serde_json::from_str::<DataConfig>(bad).is_err());
    }

    #[test]
    fn assumption_directions() {
        let sc = ModelScales { sigma_w: 0.01, sigma_p: 0.01, alpha: 1e-6 };
        let huge = DataConfig { d: 1usize << 40, ..cfg(2000) };
        let r = check_assumptions(&huge, sc, 1.0, 0.01, 10.0);
        assert!(r.get("dimension").unwrap().holds);
        assert!(!r.get("signal_strength").unwrap().holds);
        let low_rho = DataConfig { rho: 1e-4, ..cfg(2000) };
        assert!(!check_assumptions(&low_rho, sc, 1.0, 0.01, 10.0).get("weak_scale").unwrap().holds);
        let r = check_assumptions(&cfg(2000), sc, 20.0, 0.01, 10.0);
        assert!(!r.get("weak_scale").unwrap().holds, "rho = 0.1 exceeds 1/C for C = 20");
    }

    #[test]
    fn multiclass_labels_stay_in_range() {
        let c = DataConfig { n: 1, t: 4, d: 6, mu_norm: 1.0, sigma_eps: 0.1, eta: 0.4, rho: 0.1, n_weak_same: 1 };
        let sig: Vec<Array1<f64>> = (0..3).map(|k| Array1::from_shape_fn(6, |j| f64::from(u8::from(j == k)))).collect();
        let xs = generate_multiclass(&c, &sig, 500, &mut rng::stream(0, rng::ETF)).unwrap();
        assert!(xs.iter().all(|x| x.y_train < 3 && x.y_true < 3));
        let flipped = xs.iter().filter(|x| x.y_train != x.y_true).count();
        assert!((150..250).contains(&flipped));
    }
}
