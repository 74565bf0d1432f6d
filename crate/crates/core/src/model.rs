//! Single-layer LSTM sequence model with exact backpropagation through time.
//!
//! Two conditioning modes share one parameter layout:
//!
//! * **static**: a fixed input vector `X` is mapped by the input adapter into
//!   the embedding space and consumed as if it were the first word; every
//!   later step consumes the embedding of the previous token.
//! * **aligned**: one feature frame per target label. Every step consumes the
//!   embedding of the previous token concatenated with the adapted frame; the
//!   first step starts from an all-zero state and the start token `S`.
//!
//! Gate order inside the stacked weight matrices is input, forget, cell,
//! output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, log_softmax, rng_from_seed, sigmoid, Mat};

/// End-of-sequence token, reserved in every vocabulary.
pub const EOS: usize = 0;
/// Start token used by the aligned mode.
pub const START: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Static,
    Aligned,
}

impl InputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Static => "static",
            InputMode::Aligned => "aligned",
        }
    }
}

/// Conditioning input of one example.
#[derive(Clone, Debug, PartialEq)]
pub enum SeqInput {
    Static(Vec<f64>),
    Frames(Vec<Vec<f64>>),
}

impl SeqInput {
    pub fn mode(&self) -> InputMode {
        match self {
            SeqInput::Static(_) => InputMode::Static,
            SeqInput::Frames(_) => InputMode::Aligned,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub mode: InputMode,
    /// Length of the static input vector, or of each feature frame.
    pub input_dim: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let min_vocab = match self.mode {
            InputMode::Static => 2,
            InputMode::Aligned => 3,
        };
        if self.vocab_size < min_vocab {
            return Err(Error::config(format!(
                "vocab_size {} below minimum {min_vocab} for {} mode",
                self.vocab_size,
                self.mode.as_str()
            )));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.input_dim == 0 {
            return Err(Error::config("model dimensions must be at least 1"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("init_scale must be positive"));
        }
        Ok(())
    }

    /// Width of the vector fed into the LSTM gates.
    pub fn lstm_input_dim(&self) -> usize {
        match self.mode {
            InputMode::Static => self.embed_dim,
            InputMode::Aligned => 2 * self.embed_dim,
        }
    }

    /// Placeholder recorded as the fed token of step 1.
    pub fn first_fed_token(&self) -> usize {
        match self.mode {
            InputMode::Static => EOS,
            InputMode::Aligned => START,
        }
    }
}

/// All learnable tensors. Also used to hold gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embeddings: Mat,
    pub w_input: Mat,
    pub w_hidden: Mat,
    pub gate_bias: Vec<f64>,
    pub input_adapter: Mat,
    pub out_proj: Mat,
    pub out_bias: Vec<f64>,
}

pub type Gradients = ModelParams;

pub const TENSOR_NAMES: [&str; 7] = [
    "embeddings",
    "w_input",
    "w_hidden",
    "gate_bias",
    "input_adapter",
    "out_proj",
    "out_bias",
];

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden_dim;
        ModelParams {
            embeddings: Mat::zeros(cfg.vocab_size, cfg.embed_dim),
            w_input: Mat::zeros(4 * h, cfg.lstm_input_dim()),
            w_hidden: Mat::zeros(4 * h, h),
            gate_bias: vec![0.0; 4 * h],
            input_adapter: Mat::zeros(cfg.embed_dim, cfg.input_dim),
            out_proj: Mat::zeros(h, cfg.vocab_size),
            out_bias: vec![0.0; cfg.vocab_size],
        }
    }

    /// Uniform weights in `[-init_scale, init_scale]`, zero biases except the
    /// forget gate, which starts at 1.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut p = ModelParams::zeros(cfg);
        let mut rng = rng_from_seed(cfg.seed);
        let s = cfg.init_scale;
        for m in [
            &mut p.embeddings,
            &mut p.w_input,
            &mut p.w_hidden,
            &mut p.input_adapter,
            &mut p.out_proj,
        ] {
            for w in m.data_mut() {
                *w = rng.random_range(-s..=s);
            }
        }
        let h = cfg.hidden_dim;
        p.gate_bias[h..2 * h].fill(1.0);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            embeddings: Mat::zeros(self.embeddings.rows(), self.embeddings.cols()),
            w_input: Mat::zeros(self.w_input.rows(), self.w_input.cols()),
            w_hidden: Mat::zeros(self.w_hidden.rows(), self.w_hidden.cols()),
            gate_bias: vec![0.0; self.gate_bias.len()],
            input_adapter: Mat::zeros(self.input_adapter.rows(), self.input_adapter.cols()),
            out_proj: Mat::zeros(self.out_proj.rows(), self.out_proj.cols()),
            out_bias: vec![0.0; self.out_bias.len()],
        }
    }

    /// `(name, (rows, cols), values)` for every tensor, in checkpoint order.
    pub fn tensors(&self) -> [(&'static str, (usize, usize), &[f64]); 7] {
        [
            (
                TENSOR_NAMES[0],
                self.embeddings.shape(),
                self.embeddings.data(),
            ),
            (TENSOR_NAMES[1], self.w_input.shape(), self.w_input.data()),
            (TENSOR_NAMES[2], self.w_hidden.shape(), self.w_hidden.data()),
            (TENSOR_NAMES[3], (1, self.gate_bias.len()), &self.gate_bias),
            (
                TENSOR_NAMES[4],
                self.input_adapter.shape(),
                self.input_adapter.data(),
            ),
            (TENSOR_NAMES[5], self.out_proj.shape(), self.out_proj.data()),
            (TENSOR_NAMES[6], (1, self.out_bias.len()), &self.out_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.embeddings.data_mut(),
            self.w_input.data_mut(),
            self.w_hidden.data_mut(),
            &mut self.gate_bias,
            self.input_adapter.data_mut(),
            self.out_proj.data_mut(),
            &mut self.out_bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for (dst, (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.2.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.2.iter().all(|x| x.is_finite()))
    }

    /// Plain SGD step with global-norm clipping: when `‖grads‖ > clip` the
    /// gradients are rescaled to norm `clip` before `θ ← θ − lr·g`.
    ///
    /// Parameters are left untouched when the gradient is not finite.
    pub fn sgd_update(&mut self, grads: &Gradients, lr: f64, clip: f64) -> Result<()> {
        if !(lr > 0.0) || !(clip > 0.0) {
            return Err(Error::config("lr and clip must be positive"));
        }
        let norm = grads.l2_norm();
        if !norm.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        let scale = if norm > clip { clip / norm } else { 1.0 };
        let step = lr * scale;
        for (dst, (_, _, g)) in self.tensors_mut().into_iter().zip(grads.tensors()) {
            for (d, gi) in dst.iter_mut().zip(g) {
                *d -= step * gi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl CellState {
    pub fn zeros(hidden_dim: usize) -> Self {
        CellState {
            h: vec![0.0; hidden_dim],
            c: vec![0.0; hidden_dim],
        }
    }
}

/// Whether the token fed at a step was the ground truth or model-generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FedSource {
    /// Step 1 input (`X`, or `S` with the first frame).
    Start,
    Truth,
    Sampled,
}

/// Cached activations of one LSTM step.
#[derive(Clone, Debug)]
pub struct StepCache {
    pub fed_token: usize,
    pub source: FedSource,
    /// Vector actually fed into the gates.
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    /// Gate pre-activations, stacked `[i, f, g, o]`.
    pub preact: Vec<f64>,
    /// Gate activations, stacked `[i, f, g, o]`.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub target: usize,
}

/// Everything produced by a forward pass that BPTT needs.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub steps: Vec<StepCache>,
    pub nll: f64,
}

impl ForwardTrace {
    pub fn fed_tokens(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.fed_token).collect()
    }

    pub fn sources(&self) -> Vec<FedSource> {
        self.steps.iter().map(|s| s.source).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl SeqModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Ok(SeqModel { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::zeros(&config);
        Ok(SeqModel { config, params })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn mode(&self) -> InputMode {
        self.config.mode
    }

    pub(crate) fn check_input(&self, input: &SeqInput) -> Result<()> {
        let d = self.config.input_dim;
        match (self.config.mode, input) {
            (InputMode::Static, SeqInput::Static(x)) => {
                if x.len() != d {
                    return Err(Error::LengthMismatch {
                        expected: d,
                        actual: x.len(),
                    });
                }
            }
            (InputMode::Aligned, SeqInput::Frames(frames)) => {
                if frames.is_empty() {
                    return Err(Error::config("aligned input has no frames"));
                }
                if let Some(f) = frames.iter().find(|f| f.len() != d) {
                    return Err(Error::LengthMismatch {
                        expected: d,
                        actual: f.len(),
                    });
                }
            }
            (m, i) => {
                return Err(Error::ModeMismatch(format!(
                    "model is {} but input is {}",
                    m.as_str(),
                    i.mode().as_str()
                )))
            }
        }
        Ok(())
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.config.vocab_size {
            Err(Error::TokenOutOfRange {
                token,
                vocab_size: self.config.vocab_size,
            })
        } else {
            Ok(())
        }
    }

    fn adapt(&self, features: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.config.embed_dim];
        self.params.input_adapter.matvec_acc(features, &mut out);
        out
    }

    /// Gate input for a step consuming `token` (and, in aligned mode, a frame).
    fn step_input(&self, token: usize, frame: Option<&[f64]>) -> Vec<f64> {
        let emb = self.params.embeddings.row(token);
        match frame {
            None => emb.to_vec(),
            Some(f) => {
                let mut x = Vec::with_capacity(2 * emb.len());
                x.extend_from_slice(emb);
                x.extend(self.adapt(f));
                x
            }
        }
    }

    /// Gate input for step 1.
    fn first_input(&self, input: &SeqInput) -> Vec<f64> {
        match input {
            SeqInput::Static(x) => self.adapt(x),
            SeqInput::Frames(frames) => self.step_input(START, Some(&frames[0])),
        }
    }

    /// One LSTM cell update plus output projection, filling a cache.
    fn cell(&self, prev: &CellState, x: Vec<f64>) -> StepCache {
        let hd = self.config.hidden_dim;
        let p = &self.params;
        let mut preact = p.gate_bias.clone();
        p.w_input.matvec_acc(&x, &mut preact);
        p.w_hidden.matvec_acc(&prev.h, &mut preact);
        let mut gates = vec![0.0; 4 * hd];
        for j in 0..hd {
            gates[j] = sigmoid(preact[j]);
            gates[hd + j] = sigmoid(preact[hd + j]);
            gates[2 * hd + j] = preact[2 * hd + j].tanh();
            gates[3 * hd + j] = sigmoid(preact[3 * hd + j]);
        }
        let mut c = vec![0.0; hd];
        let mut tanh_c = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        for j in 0..hd {
            c[j] = gates[hd + j] * prev.c[j] + gates[j] * gates[2 * hd + j];
            tanh_c[j] = c[j].tanh();
            h[j] = gates[3 * hd + j] * tanh_c[j];
        }
        let mut logits = p.out_bias.clone();
        p.out_proj.matvec_t_acc(&h, &mut logits);
        StepCache {
            fed_token: 0,
            source: FedSource::Start,
            x,
            h_prev: prev.h.clone(),
            c_prev: prev.c.clone(),
            preact,
            gates,
            c,
            tanh_c,
            h,
            log_probs: Vec::new(),
            logits,
            target: 0,
        }
    }

    /// State after step 1 and the logits it produces.
    ///
    /// Static mode runs one step from the zero state on the adapted input
    /// vector; aligned mode runs one step from the zero state on `S` together
    /// with the first frame.
    pub fn initial_state(&self, input: &SeqInput) -> Result<(CellState, Vec<f64>)> {
        self.check_input(input)?;
        let zero = CellState::zeros(self.config.hidden_dim);
        let cache = self.cell(&zero, self.first_input(input));
        Ok((
            CellState {
                h: cache.h,
                c: cache.c,
            },
            cache.logits,
        ))
    }

    /// Advances the recurrence by one token. `frame` must be present exactly
    /// in aligned mode.
    pub fn step(
        &self,
        state: &CellState,
        prev_token: usize,
        frame: Option<&[f64]>,
    ) -> Result<(CellState, Vec<f64>)> {
        self.check_token(prev_token)?;
        match (self.config.mode, frame) {
            (InputMode::Static, None) => {}
            (InputMode::Aligned, Some(f)) if f.len() == self.config.input_dim => {}
            (InputMode::Aligned, Some(f)) => {
                return Err(Error::LengthMismatch {
                    expected: self.config.input_dim,
                    actual: f.len(),
                })
            }
            _ => {
                return Err(Error::ModeMismatch(
                    "step features must be given exactly in aligned mode".into(),
                ))
            }
        }
        if state.h.len() != self.config.hidden_dim || state.c.len() != self.config.hidden_dim {
            return Err(Error::LengthMismatch {
                expected: self.config.hidden_dim,
                actual: state.h.len(),
            });
        }
        let cache = self.cell(state, self.step_input(prev_token, frame));
        Ok((
            CellState {
                h: cache.h,
                c: cache.c,
            },
            cache.logits,
        ))
    }

    /// Runs the recurrence over `targets`, asking `choose` for the token fed
    /// at every step after the first. `choose` receives the step index and
    /// the logits of the previous step.
    pub(crate) fn run_with<F>(
        &self,
        input: &SeqInput,
        targets: &[usize],
        mut choose: F,
    ) -> Result<ForwardTrace>
    where
        F: FnMut(usize, &[f64]) -> Result<(usize, FedSource)>,
    {
        self.check_input(input)?;
        if targets.is_empty() {
            return Err(Error::config("empty target sequence"));
        }
        if let SeqInput::Frames(frames) = input {
            if frames.len() != targets.len() {
                return Err(Error::LengthMismatch {
                    expected: frames.len(),
                    actual: targets.len(),
                });
            }
        }
        for &y in targets {
            self.check_token(y)?;
        }
        let frame = |t: usize| match input {
            SeqInput::Frames(f) => Some(f[t].as_slice()),
            SeqInput::Static(_) => None,
        };

        let mut steps: Vec<StepCache> = Vec::with_capacity(targets.len());
        let mut state = CellState::zeros(self.config.hidden_dim);
        let mut nll = 0.0;
        for (t, &y) in targets.iter().enumerate() {
            let (token, source, x) = if t == 0 {
                (
                    self.config.first_fed_token(),
                    FedSource::Start,
                    self.first_input(input),
                )
            } else {
                let (tok, src) = choose(t, &steps[t - 1].logits)?;
                self.check_token(tok)?;
                (tok, src, self.step_input(tok, frame(t)))
            };
            let mut cache = self.cell(&state, x);
            cache.fed_token = token;
            cache.source = source;
            cache.target = y;
            cache.log_probs = log_softmax(&cache.logits);
            nll -= cache.log_probs[y];
            state = CellState {
                h: cache.h.clone(),
                c: cache.c.clone(),
            };
            steps.push(cache);
        }
        Ok(ForwardTrace { steps, nll })
    }

    /// Negative log-likelihood of `targets` with the given fed tokens.
    ///
    /// `fed_tokens[t]` is the token consumed at step `t`; entry 0 stands for
    /// the step-1 input and must equal [`ModelConfig::first_fed_token`].
    pub fn forward(
        &self,
        input: &SeqInput,
        targets: &[usize],
        fed_tokens: &[usize],
    ) -> Result<(f64, ForwardTrace)> {
        if fed_tokens.len() != targets.len() {
            return Err(Error::LengthMismatch {
                expected: targets.len(),
                actual: fed_tokens.len(),
            });
        }
        if fed_tokens[0] != self.config.first_fed_token() {
            return Err(Error::config(format!(
                "fed_tokens[0] must be the start placeholder {}",
                self.config.first_fed_token()
            )));
        }
        let trace = self.run_with(input, targets, |t, _| {
            let tok = fed_tokens[t];
            let src = if tok == targets[t - 1] {
                FedSource::Truth
            } else {
                FedSource::Sampled
            };
            Ok((tok, src))
        })?;
        Ok((trace.nll, trace))
    }

    /// Fed tokens of teacher forcing: the placeholder, then `y_1..y_{T-1}`.
    pub fn teacher_forced_tokens(&self, targets: &[usize]) -> Vec<usize> {
        let mut fed = Vec::with_capacity(targets.len());
        fed.push(self.config.first_fed_token());
        fed.extend_from_slice(&targets[..targets.len().saturating_sub(1)]);
        fed
    }

    /// Exact gradient of `trace.nll`, treating the fed tokens as constants.
    ///
    /// The trace must come from this model with unchanged parameters.
    pub fn backward(&self, input: &SeqInput, trace: &ForwardTrace) -> Gradients {
        let mut g = self.params.zeros_like();
        self.backward_into(input, trace, &mut g);
        g
    }

    /// Like [`SeqModel::backward`] but accumulates into `g`.
    pub fn backward_into(&self, input: &SeqInput, trace: &ForwardTrace, g: &mut Gradients) {
        let hd = self.config.hidden_dim;
        let ed = self.config.embed_dim;
        let p = &self.params;
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        let mut dz = vec![0.0; 4 * hd];
        let mut dx = vec![0.0; self.config.lstm_input_dim()];

        for (t, s) in trace.steps.iter().enumerate().rev() {
            // softmax cross-entropy
            let mut dlogits: Vec<f64> = s.log_probs.iter().map(|l| l.exp()).collect();
            dlogits[s.target] -= 1.0;
            for (b, d) in g.out_bias.iter_mut().zip(&dlogits) {
                *b += d;
            }
            g.out_proj.add_outer(&s.h, &dlogits);
            let mut dh = dh_next.clone();
            p.out_proj.matvec_acc(&dlogits, &mut dh);

            let gates = &s.gates;
            for j in 0..hd {
                let (i, f, gg, o) = (
                    gates[j],
                    gates[hd + j],
                    gates[2 * hd + j],
                    gates[3 * hd + j],
                );
                let tc = s.tanh_c[j];
                let d_o = dh[j] * tc;
                let dc = dh[j] * o * (1.0 - tc * tc) + dc_next[j];
                let d_f = dc * s.c_prev[j];
                let d_i = dc * gg;
                let d_g = dc * i;
                dc_next[j] = dc * f;
                dz[j] = d_i * i * (1.0 - i);
                dz[hd + j] = d_f * f * (1.0 - f);
                dz[2 * hd + j] = d_g * (1.0 - gg * gg);
                dz[3 * hd + j] = d_o * o * (1.0 - o);
            }
            for (b, d) in g.gate_bias.iter_mut().zip(&dz) {
                *b += d;
            }
            g.w_input.add_outer(&dz, &s.x);
            g.w_hidden.add_outer(&dz, &s.h_prev);
            dx.fill(0.0);
            p.w_input.matvec_t_acc(&dz, &mut dx);
            dh_next.fill(0.0);
            p.w_hidden.matvec_t_acc(&dz, &mut dh_next);

            match input {
                SeqInput::Static(xv) => {
                    if t == 0 {
                        g.input_adapter.add_outer(&dx, xv);
                    } else {
                        crate::math::axpy(1.0, &dx, g.embeddings.row_mut(s.fed_token));
                    }
                }
                SeqInput::Frames(frames) => {
                    crate::math::axpy(1.0, &dx[..ed], g.embeddings.row_mut(s.fed_token));
                    g.input_adapter.add_outer(&dx[ed..], &frames[t]);
                }
            }
        }
    }

    /// Largest relative disagreement between [`SeqModel::backward`] and
    /// central finite differences with step `fd_step`, over every parameter.
    ///
    /// Relative error is `|a − n| / max(1e-8, |a| + |n|)`. The difference
    /// `nll(θ+δ) − nll(θ−δ)` is accumulated per step from the two logit
    /// traces rather than by subtracting the two totals, which keeps the
    /// roundoff proportional to the logits instead of to the total loss.
    pub fn grad_check(
        &self,
        input: &SeqInput,
        targets: &[usize],
        fed_tokens: &[usize],
        fd_step: f64,
    ) -> Result<f64> {
        let (_, trace) = self.forward(input, targets, fed_tokens)?;
        let analytic = self.backward(input, &trace);
        let mut probe = self.clone();
        let mut worst: f64 = 0.0;
        for (k, (_, _, grad)) in analytic.tensors().iter().enumerate() {
            for j in 0..grad.len() {
                let orig = probe.params.tensors_mut()[k][j];
                probe.params.tensors_mut()[k][j] = orig + fd_step;
                let plus = probe.forward(input, targets, fed_tokens)?.1;
                probe.params.tensors_mut()[k][j] = orig - fd_step;
                let minus = probe.forward(input, targets, fed_tokens)?.1;
                probe.params.tensors_mut()[k][j] = orig;
                let numeric = nll_difference(&plus, &minus) / (2.0 * fd_step);
                let a = grad[j];
                let rel = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
                worst = worst.max(rel);
            }
        }
        Ok(worst)
    }

    /// Most likely next token from a logit vector.
    pub fn greedy_token(logits: &[f64]) -> usize {
        argmax(logits)
    }
}

/// `plus.nll − minus.nll`, summed step by step as
/// `Σ_t [lse(z⁺_t) − lse(z⁻_t)] − [z⁺_t(y_t) − z⁻_t(y_t)]`.
fn nll_difference(plus: &ForwardTrace, minus: &ForwardTrace) -> f64 {
    let mut total = 0.0;
    for (p, m) in plus.steps.iter().zip(&minus.steps) {
        let shift = m.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut base = 0.0;
        let mut delta = 0.0;
        for (zp, zm) in p.logits.iter().zip(&m.logits) {
            let e = (zm - shift).exp();
            base += e;
            delta += e * (zp - zm).exp_m1();
        }
        let y = p.target;
        total += (delta / base).ln_1p() - (p.logits[y] - m.logits[y]);
    }
    total
}
