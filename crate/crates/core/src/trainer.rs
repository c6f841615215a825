//! Full-batch gradient descent on `(W, p)` with the head frozen.
//!
//! The dense functions ([`gradients`], [`gd_step`], [`finite_diff_grad`]) work
//! on an explicit [`ModelState`] and serve small instances and tests.
//! [`SubspaceModel`] runs the same iteration at scale. Every gradient step adds
//! `p aᵀ` to `W` and `W a` to `p`, where `a` lies in the span of the training
//! tokens, so with `Z = [p₀ | W₀A]` the iterates stay of the form
//!
//! ```text
//! p = Z π,    W = W₀ + Z Υ Aᵀ
//! ```
//!
//! and a step only touches the `(m+1)`-vector `π` and the `(m+1)×m` matrix `Υ`
//! (`m = nT`). Attention logits of any vector `x` need only `Rᵀx` and `Aᵀx`
//! with `R = W₀ᵀZ`, which are computed once while `W₀` is streamed in row
//! blocks.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label, MultiSample, Sample, SignalBasis};
use crate::error::{Error, Result};
use crate::model::{forward_with_query, is_correct, logistic_loss, softmax_unchecked, ModelState};
use crate::theory::AttentionDiagnostics;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub steps: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default = "default_fit")]
    pub fit_threshold: f64,
    #[serde(default = "default_gen")]
    pub gen_threshold: f64,
}

fn default_log_every() -> usize {
    10
}
fn default_test_size() -> usize {
    1000
}
fn default_fit() -> f64 {
    1.0
}
fn default_gen() -> f64 {
    0.95
}

impl TrainConfig {
    pub fn new(alpha: f64, steps: usize) -> Self {
        TrainConfig {
            alpha,
            steps,
            log_every: default_log_every(),
            test_size: default_test_size(),
            fit_threshold: default_fit(),
            gen_threshold: default_gen(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be positive and finite"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be at least 1"));
        }
        for (name, v) in [("fit_threshold", self.fit_threshold), ("gen_threshold", self.gen_threshold)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(name, "must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

/// `ℓ′(z) = −1/(1 + e^z)`.
pub fn loss_derivative(z: f64) -> f64 {
    if z > 0.0 {
        let e = (-z).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + z.exp())
    }
}

pub fn empirical_loss(dataset: &Dataset, state: &ModelState) -> f64 {
    let q = state.query();
    loss_at(&dataset.samples, &q, state.nu())
}

fn loss_at(samples: &[Sample], q: &Array1<f64>, nu: &Array1<f64>) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let f = softmax_unchecked(s.tokens.dot(q).view()).dot(&s.tokens.dot(nu));
            logistic_loss(s.y_train.sign() * f)
        })
        .sum();
    total / samples.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w: Array2<f64>,
    pub p: Array1<f64>,
}

/// The vector `a` with `∇_{Wᵀ}L = a pᵀ` and `∇_p L = W a`.
fn direction(dataset: &Dataset, state: &ModelState) -> Array1<f64> {
    let q = state.query();
    let n = dataset.len() as f64;
    let mut a = Array1::zeros(state.dim());
    for s in &dataset.samples {
        let probs = softmax_unchecked(s.tokens.dot(&q).view());
        let gamma = s.tokens.dot(state.nu());
        let f = probs.dot(&gamma);
        let y = s.y_train.sign();
        let c = &probs * &(gamma - f);
        a.scaled_add(loss_derivative(y * f) * y / n, &s.tokens.t().dot(&c));
    }
    a
}

fn outer(u: &Array1<f64>, v: &Array1<f64>) -> Array2<f64> {
    let col = u.view().insert_axis(Axis(1));
    let row = v.view().insert_axis(Axis(0));
    col.dot(&row)
}

/// Both gradients at the same `(W, p)`.
pub fn gradients(dataset: &Dataset, state: &ModelState) -> Result<Gradients> {
    check_shapes(dataset, state)?;
    let a = direction(dataset, state);
    Ok(Gradients { w: outer(state.p(), &a), p: state.w().dot(&a) })
}

pub fn grad_w(dataset: &Dataset, state: &ModelState) -> Result<Array2<f64>> {
    gradients(dataset, state).map(|g| g.w)
}

pub fn grad_p(dataset: &Dataset, state: &ModelState) -> Result<Array1<f64>> {
    gradients(dataset, state).map(|g| g.p)
}

fn check_shapes(dataset: &Dataset, state: &ModelState) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    if dataset.dim() != state.dim() {
        return Err(Error::Dimension(format!("data has d = {}, model has d = {}", dataset.dim(), state.dim())));
    }
    Ok(())
}

/// `W ← W − α∇_W`, `p ← p − α∇_p` with both gradients taken before either
/// update.
pub fn gd_step(state: &ModelState, dataset: &Dataset, alpha: f64) -> Result<ModelState> {
    let g = gradients(dataset, state)?;
    if g.w.iter().chain(&g.p).any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: 0 });
    }
    let mut next = state.clone();
    let (w, p) = next.params_mut();
    w.scaled_add(-alpha, &g.w);
    p.scaled_add(-alpha, &g.p);
    if !next.is_finite() {
        return Err(Error::Divergence { step: 0 });
    }
    Ok(next)
}

/// Central difference of a scalar function.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central differences of `loss` in every coordinate of `W` and `p`.
pub fn finite_diff_with(
    w: &Array2<f64>,
    p: &Array1<f64>,
    h: f64,
    loss: impl Fn(&Array2<f64>, &Array1<f64>) -> f64,
) -> Gradients {
    let mut wk = w.clone();
    let mut gw = Array2::zeros(w.dim());
    for idx in ndarray::indices(w.dim()) {
        let orig = wk[idx];
        wk[idx] = orig + h;
        let up = loss(&wk, p);
        wk[idx] = orig - h;
        let down = loss(&wk, p);
        wk[idx] = orig;
        gw[idx] = (up - down) / (2.0 * h);
    }
    let mut pk = p.clone();
    let mut gp = Array1::zeros(p.len());
    for i in 0..p.len() {
        let orig = pk[i];
        pk[i] = orig + h;
        let up = loss(w, &pk);
        pk[i] = orig - h;
        let down = loss(w, &pk);
        pk[i] = orig;
        gp[i] = (up - down) / (2.0 * h);
    }
    Gradients { w: gw, p: gp }
}

/// Finite-difference gradients of [`empirical_loss`].
pub fn finite_diff_grad(dataset: &Dataset, state: &ModelState, h: f64) -> Result<Gradients> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidInput("finite-difference step must be positive".into()));
    }
    check_shapes(dataset, state)?;
    Ok(finite_diff_with(state.w(), state.p(), h, |w, p| {
        loss_at(&dataset.samples, &w.t().dot(p), state.nu())
    }))
}

/// `max|a−b| / max(max|a|, max|b|, 1e−12)`.
pub fn relative_error<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    let (mut diff, mut ma, mut mb) = (0f64, 0f64, 0f64);
    for (x, y) in a.into_iter().zip(b) {
        diff = diff.max((x - y).abs());
        ma = ma.max(x.abs());
        mb = mb.max(y.abs());
    }
    diff / ma.max(mb).max(1e-12)
}

/// Attention parameters with a K-row head matrix (row `k` is `ν_k`).
#[derive(Clone, Debug, PartialEq)]
pub struct MulticlassState {
    pub w: Array2<f64>,
    pub p: Array1<f64>,
    pub heads: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MulticlassGrads {
    pub loss: f64,
    pub w: Array2<f64>,
    pub p: Array1<f64>,
    pub heads: Array2<f64>,
}

fn multiclass_loss_at(samples: &[MultiSample], q: &Array1<f64>, heads: &Array2<f64>) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|x| {
            let pooled = x.tokens.t().dot(&softmax_unchecked(x.tokens.dot(q).view()));
            let z = heads.dot(&pooled);
            let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            m + z.mapv(|v| (v - m).exp()).sum().ln() - z[x.y_train]
        })
        .sum();
    total / samples.len() as f64
}

/// Cross-entropy over `K` classes with logits `ν_kᵀXᵀs`, and its gradients in
/// `W`, `p` and the head rows.
pub fn multiclass_loss_and_grads(samples: &[MultiSample], state: &MulticlassState) -> Result<MulticlassGrads> {
    let k = state.heads.nrows();
    if k < 2 {
        return Err(Error::InvalidInput(format!("need K >= 2 classes, got {k}")));
    }
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let d = state.p.len();
    let n = samples.len() as f64;
    let q = state.w.t().dot(&state.p);
    let mut a = Array1::zeros(d);
    let mut heads = Array2::zeros((k, d));
    let mut loss = 0.0;
    for x in samples {
        if x.y_train >= k || x.tokens.ncols() != d {
            return Err(Error::Dimension("sample label or width does not match the head".into()));
        }
        let probs = softmax_unchecked(x.tokens.dot(&q).view());
        let pooled = x.tokens.t().dot(&probs);
        let z = state.heads.dot(&pooled);
        let mut pi = softmax_unchecked(z.view());
        let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        loss += m + z.mapv(|v| (v - m).exp()).sum().ln() - z[x.y_train];
        pi[x.y_train] -= 1.0;
        // pi is now dL_i/dz
        for (kk, &w) in pi.iter().enumerate() {
            heads.row_mut(kk).scaled_add(w / n, &pooled);
        }
        let g = state.heads.t().dot(&pi);
        let h = x.tokens.dot(&g);
        let c = &probs * &(&h - probs.dot(&h));
        a.scaled_add(1.0 / n, &x.tokens.t().dot(&c));
    }
    Ok(MulticlassGrads { loss: loss / n, w: outer(&state.p, &a), p: state.w.dot(&a), heads })
}

/// Finite differences of the multiclass loss in `W` and `p`.
pub fn multiclass_finite_diff(samples: &[MultiSample], state: &MulticlassState, h: f64) -> Gradients {
    finite_diff_with(&state.w, &state.p, h, |w, p| multiclass_loss_at(samples, &w.t().dot(p), &state.heads))
}

/// Projections of probe vectors onto the factored parameterization.
#[derive(Clone, Debug)]
pub struct Features {
    /// `Rᵀx` per row, `(k, m+1)`.
    pub low: Array2<f64>,
    /// `Aᵀx` per row, `(k, m)`.
    pub span: Array2<f64>,
}

impl Features {
    fn scores(&self, pi: &Array1<f64>, u: &Array1<f64>) -> Array1<f64> {
        self.low.dot(pi) + self.span.dot(u)
    }
}

/// Clean evaluation set in feature form.
#[derive(Clone, Debug)]
pub struct TestSet {
    pub features: Features,
    /// `(N, T)` token scores.
    pub gamma: Array2<f64>,
    pub labels: Vec<Label>,
}

impl TestSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Gradient descent in the span of the training tokens; see the module docs.
#[derive(Clone, Debug)]
pub struct SubspaceModel {
    n: usize,
    t: usize,
    d: usize,
    /// `(m, d)` training tokens, sample-major.
    tokens: Array2<f64>,
    /// `(d, m+1)`: `[p₀ | W₀A]`.
    z: Array2<f64>,
    /// `(d, m+1)`: `W₀ᵀZ`.
    r: Array2<f64>,
    /// `ZᵀZ`
    gram_z: Array2<f64>,
    /// `AᵀA`
    gram_a: Array2<f64>,
    gamma: Array1<f64>,
    labels: Array1<f64>,
    true_labels: Array1<f64>,
    nu: Array1<f64>,
    signals: Features,
    noise: Features,
    pi: Array1<f64>,
    ups: Array2<f64>,
    step: usize,
}

const ROW_BLOCK: usize = 256;

impl SubspaceModel {
    /// Draw `p₀` then `W₀` (row-major, the order of [`crate::model::init_params`])
    /// from `rng`, without materializing `W₀`.
    pub fn initialize<R: Rng + ?Sized>(
        dataset: &Dataset,
        signals: &SignalBasis,
        nu: &Array1<f64>,
        sigma_w: f64,
        sigma_p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (n, t, d) = (dataset.len(), dataset.seq_len(), dataset.dim());
        if n == 0 || nu.len() != d || signals.dim() != d {
            return Err(Error::Dimension("dataset, signals and head must share d".into()));
        }
        let m = n * t;
        let mut tokens = Array2::zeros((m, d));
        let mut noise = Array2::zeros((m, d));
        for (i, s) in dataset.samples.iter().enumerate() {
            tokens.slice_mut(s![i * t..(i + 1) * t, ..]).assign(&s.tokens);
            noise.slice_mut(s![i * t..(i + 1) * t, ..]).assign(&s.noise);
        }
        let p0 = Array1::from_shape_fn(d, |_| sigma_p * rng.sample::<f64, _>(StandardNormal));
        let mut z = Array2::zeros((d, m + 1));
        z.column_mut(0).assign(&p0);
        let mut r = Array2::zeros((d, m + 1));
        let mut start = 0;
        while start < d {
            let end = (start + ROW_BLOCK).min(d);
            let block = Array2::from_shape_fn((end - start, d), |_| sigma_w * rng.sample::<f64, _>(StandardNormal));
            z.slice_mut(s![start..end, 1..]).assign(&block.dot(&tokens.t()));
            r += &block.t().dot(&z.slice(s![start..end, ..]));
            start = end;
        }
        let gram_z = z.t().dot(&z);
        let gram_a = tokens.dot(&tokens.t());
        let gamma = tokens.dot(nu);
        let labels = dataset.samples.iter().map(|s| s.y_train.sign()).collect();
        let true_labels = dataset.samples.iter().map(|s| s.y_true.sign()).collect();
        let mut model = SubspaceModel {
            n,
            t,
            d,
            tokens,
            z,
            r,
            gram_z,
            gram_a,
            gamma,
            labels,
            true_labels,
            nu: nu.clone(),
            signals: Features { low: Array2::zeros((0, m + 1)), span: Array2::zeros((0, m)) },
            noise: Features { low: Array2::zeros((0, m + 1)), span: Array2::zeros((0, m)) },
            pi: Array1::zeros(m + 1),
            ups: Array2::zeros((m + 1, m)),
            step: 0,
        };
        model.pi[0] = 1.0;
        let mut mus = Array2::zeros((2, d));
        mus.row_mut(0).assign(&signals.mu_plus);
        mus.row_mut(1).assign(&signals.mu_minus);
        model.signals = model.features(&mus);
        model.noise = model.features(&noise);
        Ok(model)
    }

    pub fn features(&self, x: &Array2<f64>) -> Features {
        Features { low: x.dot(&self.r), span: x.dot(&self.tokens.t()) }
    }

    /// Draw `size` clean samples and keep only their features.
    pub fn test_set<R: Rng + ?Sized>(
        &self,
        config: &crate::data::DataConfig,
        signals: &SignalBasis,
        size: usize,
        rng: &mut R,
    ) -> Result<TestSet> {
        const CHUNK: usize = 64;
        let t = config.t;
        let m = self.n * self.t;
        let mut low = Array2::zeros((size * t, m + 1));
        let mut span = Array2::zeros((size * t, m));
        let mut gamma = Array2::zeros((size, t));
        let mut labels = Vec::with_capacity(size);
        let mut done = 0;
        while done < size {
            let count = CHUNK.min(size - done);
            let mut x = Array2::zeros((count * t, self.d));
            for j in 0..count {
                let s = crate::data::sample_from_p_star(config, signals, rng)?;
                x.slice_mut(s![j * t..(j + 1) * t, ..]).assign(&s.tokens);
                labels.push(s.y_true);
            }
            let f = self.features(&x);
            low.slice_mut(s![done * t..(done + count) * t, ..]).assign(&f.low);
            span.slice_mut(s![done * t..(done + count) * t, ..]).assign(&f.span);
            let g = x.dot(&self.nu).into_shape_with_order((count, t)).expect("contiguous");
            gamma.slice_mut(s![done..done + count, ..]).assign(&g);
            done += count;
        }
        Ok(TestSet { features: Features { low, span }, gamma, labels })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// `Υᵀ ZᵀZ π`, the coefficient on `Aᵀx` in every logit.
    fn span_weights(&self) -> Array1<f64> {
        self.ups.t().dot(&self.gram_z.dot(&self.pi))
    }

    /// Raw attention logits of the training tokens, `(n, T)`.
    pub fn train_scores(&self) -> Array2<f64> {
        let u = self.span_weights();
        let s = self.gram_z.slice(s![1.., ..]).dot(&self.pi) + self.gram_a.dot(&u);
        s.into_shape_with_order((self.n, self.t)).expect("contiguous")
    }

    /// `(λ₊, λ₋)`.
    pub fn signal_attention(&self) -> (f64, f64) {
        let v = self.signals.scores(&self.pi, &self.span_weights());
        (v[0], v[1])
    }

    /// `⟨W ε_t^{(i)}, p⟩`, `(n, T)`.
    pub fn noise_attention(&self) -> Array2<f64> {
        let v = self.noise.scores(&self.pi, &self.span_weights());
        v.into_shape_with_order((self.n, self.t)).expect("contiguous")
    }

    pub fn p_norm_sq(&self) -> f64 {
        self.pi.dot(&self.gram_z.dot(&self.pi))
    }

    /// Dense `(W, p)` given the initial `W₀` that was streamed.
    pub fn materialize(&self, w0: &Array2<f64>) -> Result<ModelState> {
        let p = self.z.dot(&self.pi);
        let w = w0 + &self.z.dot(&self.ups).dot(&self.tokens);
        ModelState::new(w, p, self.nu.clone())
    }

    fn forward_train(&self) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let scores = self.train_scores();
        let gamma = self.gamma.view().into_shape_with_order((self.n, self.t)).expect("contiguous");
        let mut probs = Array2::zeros((self.n, self.t));
        let mut out = Array1::zeros(self.n);
        for i in 0..self.n {
            let p = softmax_unchecked(scores.row(i));
            out[i] = p.dot(&gamma.row(i));
            probs.row_mut(i).assign(&p);
        }
        (scores, probs, out)
    }

    /// One gradient step given the current probabilities and outputs.
    fn apply_step(&mut self, probs: &Array2<f64>, outputs: &Array1<f64>, alpha: f64) {
        let n = self.n as f64;
        let mut c = Array1::zeros(self.n * self.t);
        for i in 0..self.n {
            let y = self.labels[i];
            let w = loss_derivative(y * outputs[i]) * y / n;
            for t in 0..self.t {
                let k = i * self.t + t;
                c[k] = w * probs[[i, t]] * (self.gamma[k] - outputs[i]);
            }
        }
        let mut dpi = self.ups.dot(&self.gram_a.dot(&c));
        dpi.slice_mut(s![1..]).scaled_add(1.0, &c);
        let pi_old = self.pi.clone();
        self.pi.scaled_add(-alpha, &dpi);
        for (a, row) in pi_old.iter().zip(self.ups.rows_mut()) {
            let k = -alpha * a;
            ndarray::Zip::from(row).and(&c).for_each(|u, &cv| *u += k * cv);
        }
        self.step += 1;
    }

    fn finite(&self) -> bool {
        self.pi.iter().chain(&self.ups).all(|v| v.is_finite())
    }

    fn evaluate_test(&self, test: &TestSet) -> (f64, f64) {
        let scores = test.features.scores(&self.pi, &self.span_weights());
        let scores = scores.into_shape_with_order((test.len(), self.t)).expect("contiguous");
        let mut correct = 0usize;
        let mut loss = 0.0;
        for (i, y) in test.labels.iter().enumerate() {
            let f = softmax_unchecked(scores.row(i)).dot(&test.gamma.row(i));
            correct += usize::from(is_correct(f, *y));
            loss += logistic_loss(y.sign() * f);
        }
        let len = test.len() as f64;
        (correct as f64 / len, loss / len)
    }
}

/// One logged step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub train_acc_true: f64,
    pub test_acc: f64,
    pub test_loss: f64,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    /// `max_i |f(X^{(i)})|`
    pub max_abs_output: f64,
    /// `max_i |ℓ′_i| / min_j |ℓ′_j|`
    pub loss_derivative_ratio: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    /// Per logged step, `(n, T)` softmax probabilities.
    pub probs: Vec<Array2<f64>>,
    /// Per logged step, `(n,)` outputs.
    pub outputs: Vec<Array1<f64>>,
    pub diagnostics: Vec<AttentionDiagnostics>,
    /// Samples whose trained label disagrees with the true label.
    pub noisy: Vec<usize>,
}

impl TrainTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// First logged row where `max_i s₁` exceeds `level`.
    pub fn saturation_index(&self, level: f64) -> Option<usize> {
        self.probs.iter().position(|p| p.column(0).iter().any(|&v| v > level))
    }
}

/// Read-only view handed to hooks at each logged step.
pub struct Snapshot<'a> {
    pub step: usize,
    pub scores: &'a Array2<f64>,
    pub probs: &'a Array2<f64>,
    pub outputs: &'a Array1<f64>,
    pub diagnostics: &'a AttentionDiagnostics,
}

pub trait TrainHook {
    fn on_log(&mut self, snapshot: &Snapshot<'_>);
}

#[derive(Debug)]
pub struct Diverged {
    pub step: usize,
    pub trace: TrainTrace,
}

/// Run `config.steps` steps, logging step 0, every `log_every`-th step and the
/// final step.
pub fn train(
    model: &mut SubspaceModel,
    config: &TrainConfig,
    test: Option<&TestSet>,
    hooks: &mut [&mut dyn TrainHook],
) -> std::result::Result<TrainTrace, Diverged> {
    let mut trace = TrainTrace {
        noisy: (0..model.n).filter(|&i| model.labels[i] != model.true_labels[i]).collect(),
        ..TrainTrace::default()
    };
    let first = model.step;
    for step in first..=first + config.steps {
        let (scores, probs, outputs) = model.forward_train();
        if outputs.iter().any(|v| !v.is_finite()) {
            return Err(Diverged { step, trace });
        }
        if step % config.log_every == 0 || step == first + config.steps {
            let row_trace = log_row(model, step, &outputs, test);
            let diag = AttentionDiagnostics::from_logits(
                &scores,
                model.noise_attention(),
                row_trace.lambda_plus,
                row_trace.lambda_minus,
            );
            for h in hooks.iter_mut() {
                h.on_log(&Snapshot { step, scores: &scores, probs: &probs, outputs: &outputs, diagnostics: &diag });
            }
            trace.rows.push(row_trace);
            trace.probs.push(probs.clone());
            trace.outputs.push(outputs.clone());
            trace.diagnostics.push(diag);
        }
        if step < first + config.steps {
            model.apply_step(&probs, &outputs, config.alpha);
            if !model.finite() {
                return Err(Diverged { step: step + 1, trace });
            }
        }
    }
    Ok(trace)
}

fn log_row(model: &SubspaceModel, step: usize, outputs: &Array1<f64>, test: Option<&TestSet>) -> TraceRow {
    let n = model.n as f64;
    let mut loss = 0.0;
    let (mut ok, mut ok_true) = (0usize, 0usize);
    let (mut lo, mut hi) = (f64::INFINITY, 0f64);
    for (i, &f) in outputs.iter().enumerate() {
        let y = model.labels[i];
        loss += logistic_loss(y * f);
        ok += usize::from(is_correct(f, sign_label(y)));
        ok_true += usize::from(is_correct(f, sign_label(model.true_labels[i])));
        let lp = loss_derivative(y * f).abs();
        lo = lo.min(lp);
        hi = hi.max(lp);
    }
    let (lambda_plus, lambda_minus) = model.signal_attention();
    let (test_acc, test_loss) = test.map_or((f64::NAN, f64::NAN), |t| model.evaluate_test(t));
    TraceRow {
        step,
        train_loss: loss / n,
        train_acc: ok as f64 / n,
        train_acc_true: ok_true as f64 / n,
        test_acc,
        test_loss,
        lambda_plus,
        lambda_minus,
        max_abs_output: outputs.iter().fold(0f64, |a, v| a.max(v.abs())),
        loss_derivative_ratio: hi / lo,
    }
}

/// Accuracy of `samples` under a dense state; used by tests to cross-check
/// the factored engine.
pub fn dense_outputs(samples: &[Sample], state: &ModelState) -> Result<Array1<f64>> {
    let q = state.query();
    samples.iter().map(|s| forward_with_query(s.tokens.view(), &q, state.nu()).map(|r| r.output)).collect()
}

fn sign_label(y: f64) -> Label {
    if y > 0.0 {
        Label::Plus
    } else {
        Label::Minus
    }
}
