//! The one-layer attention predictor `f(X) = νᵀXᵀ softmax(X Wᵀ p)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Label, Sample, SignalBasis};
use crate::error::{Error, Result};

/// Trainable `W` and `p` with a frozen head `ν`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    w: Array2<f64>,
    p: Array1<f64>,
    nu: Array1<f64>,
}

impl ModelState {
    pub fn new(w: Array2<f64>, p: Array1<f64>, nu: Array1<f64>) -> Result<Self> {
        let d = nu.len();
        if w.dim() != (d, d) || p.len() != d {
            return Err(Error::Dimension(format!(
                "W is {:?}, p has {} entries, nu has {d}",
                w.dim(),
                p.len()
            )));
        }
        let state = ModelState { w, p, nu };
        if !state.is_finite() {
            return Err(Error::InvalidInput("non-finite model parameter".into()));
        }
        Ok(state)
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn p(&self) -> &Array1<f64> {
        &self.p
    }

    pub fn nu(&self) -> &Array1<f64> {
        &self.nu
    }

    pub fn dim(&self) -> usize {
        self.nu.len()
    }

    /// The query direction `Wᵀp`; attention logits are `X Wᵀp`.
    pub fn query(&self) -> Array1<f64> {
        self.w.t().dot(&self.p)
    }

    pub fn with_head(&self, nu: Array1<f64>) -> Result<Self> {
        ModelState::new(self.w.clone(), self.p.clone(), nu)
    }

    pub(crate) fn params_mut(&mut self) -> (&mut Array2<f64>, &mut Array1<f64>) {
        (&mut self.w, &mut self.p)
    }

    pub(crate) fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.p).chain(&self.nu).all(|v| v.is_finite())
    }
}

/// Gaussian initialization. `p` is drawn first, then `W` row by row, which
/// lets the training engine stream `W` without holding it in memory.
pub fn init_params<R: Rng + ?Sized>(
    d: usize,
    sigma_w: f64,
    sigma_p: f64,
    rng: &mut R,
) -> (Array2<f64>, Array1<f64>) {
    let p = Array1::from_shape_fn(d, |_| sigma_p * rng.sample::<f64, _>(StandardNormal));
    let w = Array2::from_shape_fn((d, d), |_| sigma_w * rng.sample::<f64, _>(StandardNormal));
    (w, p)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadNorm {
    #[default]
    InverseMu,
    Unit,
    Custom(f64),
}

/// `ν = c (μ₊ − μ₋)/‖μ₊ − μ₋‖` with `c` set by `norm`.
pub fn make_head(signals: &SignalBasis, norm: HeadNorm) -> Result<Array1<f64>> {
    let diff = &signals.mu_plus - &signals.mu_minus;
    let len = diff.dot(&diff).sqrt();
    if len.is_nan() || len <= 0.0 {
        return Err(Error::Degenerate("mu_plus equals mu_minus".into()));
    }
    let c = match norm {
        HeadNorm::InverseMu => 1.0 / signals.norm(),
        HeadNorm::Unit => 1.0,
        HeadNorm::Custom(c) => c,
    };
    Ok(diff * (c / len))
}

/// Max-subtracted softmax. Rejects non-finite input.
pub fn softmax(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("softmax input must be finite".into()));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: ArrayView1<f64>) -> Array1<f64> {
    let m = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = v.mapv(|x| (x - m).exp());
    let z = e.sum();
    e / z
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub attn_scores: Array1<f64>,
    pub probs: Array1<f64>,
    pub token_scores: Array1<f64>,
    pub output: f64,
}

pub fn forward(x: ArrayView2<f64>, state: &ModelState) -> Result<ForwardResult> {
    if x.ncols() != state.dim() {
        return Err(Error::Dimension(format!("tokens have {} columns, model has d = {}", x.ncols(), state.dim())));
    }
    forward_with_query(x, &state.query(), state.nu())
}

/// Forward pass with a precomputed query `Wᵀp`.
pub fn forward_with_query(x: ArrayView2<f64>, query: &Array1<f64>, nu: &Array1<f64>) -> Result<ForwardResult> {
    let attn_scores = x.dot(query);
    let probs = softmax(attn_scores.view())?;
    let token_scores = x.dot(nu);
    let output = probs.dot(&token_scores);
    Ok(ForwardResult { attn_scores, probs, token_scores, output })
}

/// Sign of the output; an exact zero maps to `Minus`.
pub fn predict(output: f64) -> Label {
    if output > 0.0 {
        Label::Plus
    } else {
        Label::Minus
    }
}

/// Correctness under the tie rule: a zero output is wrong for every label.
pub fn is_correct(output: f64, label: Label) -> bool {
    output != 0.0 && predict(output) == label
}

/// `ℓ(z) = log(1 + e^{−z})`, evaluated without overflow.
pub fn logistic_loss(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub acc_train: f64,
    pub acc_true: f64,
    pub loss: f64,
    pub correct_train: Vec<bool>,
    pub correct_true: Vec<bool>,
}

/// Accuracies against the training and true labels and the mean logistic
/// loss against the training labels.
pub fn evaluate(samples: &[Sample], state: &ModelState) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty set".into()));
    }
    let q = state.query();
    let mut correct_train = Vec::with_capacity(samples.len());
    let mut correct_true = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for s in samples {
        let f = forward_with_query(s.tokens.view(), &q, state.nu())?.output;
        correct_train.push(is_correct(f, s.y_train));
        correct_true.push(is_correct(f, s.y_true));
        loss += logistic_loss(s.y_train.sign() * f);
    }
    let frac = |v: &[bool]| v.iter().filter(|&&b| b).count() as f64 / v.len() as f64;
    Ok(Evaluation {
        acc_train: frac(&correct_train),
        acc_true: frac(&correct_true),
        loss: loss / samples.len() as f64,
        correct_train,
        correct_true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_signals, SignalMode};
    use crate::rng;
    use ndarray::array;

    fn axis(d: usize, mu: f64) -> SignalBasis {
        make_signals(d, mu, SignalMode::AxisAligned, &mut rng::stream(0, rng::SIGNALS)).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(array![0.0, 0.0].view()).unwrap(), array![0.5, 0.5]);
        let s = softmax(array![3f64.ln(), 0.0].view()).unwrap();
        assert!((s[0] - 0.75).abs() < 1e-15 && (s[1] - 0.25).abs() < 1e-15);
        let s = softmax(array![1000.0, 0.0].view()).unwrap();
        assert_eq!(s[0], 1.0);
        assert!(s[1] >= 0.0 && s[1] < 1e-300);
        assert!(softmax(array![f64::NAN, 0.0].view()).is_err());
        assert!(softmax(array![f64::INFINITY, 0.0].view()).is_err());
    }

    #[test]
    fn zero_init() {
        let (w, p) = init_params(5, 0.0, 0.0, &mut rng::stream(0, rng::INIT));
        assert!(w.iter().chain(&p).all(|v| *v == 0.0));
    }

    #[test]
    fn init_is_reproducible_with_right_variance() {
        let (w, _) = init_params(400, 0.3, 0.1, &mut rng::stream(4, rng::INIT));
        let (w2, _) = init_params(400, 0.3, 0.1, &mut rng::stream(4, rng::INIT));
        assert_eq!(w, w2);
        let var = w.mapv(|v| v * v).mean().unwrap();
        assert!((var / 0.09 - 1.0).abs() < 0.05);
    }

    #[test]
    fn head_rules() {
        let s = axis(4, 2.0);
        let nu = make_head(&s, HeadNorm::InverseMu).unwrap();
        let k = 1.0 / (2.0 * 2f64.sqrt());
        for (a, b) in nu.iter().zip([k, -k, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((nu.dot(&s.mu_plus) - 0.5f64.sqrt()).abs() < 1e-12);
        let unit = make_head(&s, HeadNorm::Unit).unwrap();
        assert!((unit.dot(&unit) - 1.0).abs() < 1e-12);
        let cos = unit.dot(&s.mu_plus) / 2.0;
        assert!((cos - 0.5f64.sqrt()).abs() < 1e-12);
        let same = SignalBasis { mu_plus: s.mu_plus.clone(), mu_minus: s.mu_plus.clone() };
        assert!(matches!(make_head(&same, HeadNorm::Unit), Err(Error::Degenerate(_))));
    }

    #[test]
    fn forward_examples() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let nu = array![1.0, -1.0];
        let q = array![3f64.ln(), 0.0];
        let r = forward_with_query(x.view(), &q, &nu).unwrap();
        assert!((r.output - 0.5).abs() < 1e-15);

        let x = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
        let st = ModelState::new(Array2::zeros((2, 2)), array![1.0, 1.0], array![1.0, -2.0]).unwrap();
        let r = forward(x.view(), &st).unwrap();
        assert_eq!(r.probs, Array1::from_elem(3, 1.0 / 3.0));
        assert!((r.output - r.token_scores.mean().unwrap()).abs() < 1e-15);

        let st = ModelState::new(array![[1.0, 2.0], [0.0, 1.0]], array![1.0, -1.0], array![0.0, 0.0]).unwrap();
        assert_eq!(forward(x.view(), &st).unwrap().output, 0.0);
        assert!(forward(Array2::zeros((2, 3)).view(), &st).is_err());
    }

    #[test]
    fn prediction_and_tie_rule() {
        assert_eq!(predict(0.5), Label::Plus);
        assert_eq!(predict(-1e-300), Label::Minus);
        assert_eq!(predict(0.0), Label::Minus);
        assert!(!is_correct(0.0, Label::Minus));
        assert!(!is_correct(0.0, Label::Plus));
        assert!(is_correct(-2.0, Label::Minus));
    }

    #[test]
    fn loss_values() {
        assert!((logistic_loss(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(logistic_loss(40.0) < 1e-17);
        assert!((logistic_loss(1.0) - 0.313_261_687_518_222_8).abs() < 1e-15);
        assert!((logistic_loss(-800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn zero_head_scores_nothing() {
        let s = axis(3, 1.0);
        let sample = Sample {
            tokens: array![[1.0, 0.0, 0.0], [0.0, 0.1, 0.0]],
            y_train: Label::Plus,
            y_true: Label::Plus,
            roles: vec![],
            noise: Array2::zeros((2, 3)),
        };
        let st = ModelState::new(Array2::eye(3), array![1.0, 0.0, 0.0], Array1::zeros(3)).unwrap();
        let e = evaluate(std::slice::from_ref(&sample), &st).unwrap();
        assert_eq!(e.acc_train, 0.0);
        let st = st.with_head(make_head(&s, HeadNorm::Unit).unwrap()).unwrap();
        assert_eq!(evaluate(&[sample], &st).unwrap().acc_true, 1.0);
        assert!(evaluate(&[], &st).is_err());
    }
}
