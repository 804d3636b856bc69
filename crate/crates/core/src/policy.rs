//! Desk-scale autoregressive policies.
//!
//! Two families share one flat parameter vector so that checkpoints can be
//! merged coordinate-wise:
//!
//! * `TabularBigram`: a `V x V` table of logits, row = previous token.
//! * `TinyNeuralLM`: learned embeddings for the last `k` tokens, one tanh
//!   hidden layer, and an output projection (no weight tying).
//!
//! Parameter layout for `TinyNeuralLM` (row-major blocks, in order):
//!
//! ```text
//! embed  [V][d]      w_hidden [k*d][h]   b_hidden [h]
//! w_out  [h][V]      b_out    [V]
//! ```
//!
//! Token `0` is EOS. Every response ends with exactly one EOS, and short
//! contexts are left-padded with EOS.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

pub type Token = u32;

/// End-of-sequence token id.
pub const EOS: Token = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    TabularBigram,
    TinyNeuralLm,
}

impl Family {
    pub fn tag(self) -> u8 {
        match self {
            Family::TabularBigram => 0,
            Family::TinyNeuralLm => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Family::TabularBigram),
            1 => Some(Family::TinyNeuralLm),
            _ => None,
        }
    }
}

/// Shape of a policy. `context_window`, `embed_dim` and `hidden_dim` only
/// apply to `TinyNeuralLm` and are zero for `TabularBigram`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub vocab_size: usize,
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_response_len: usize,
}

impl ModelSpec {
    pub fn tabular(vocab_size: usize, max_response_len: usize) -> Self {
        ModelSpec {
            family: Family::TabularBigram,
            vocab_size,
            context_window: 0,
            embed_dim: 0,
            hidden_dim: 0,
            max_response_len,
        }
    }

    pub fn tiny(
        vocab_size: usize,
        context_window: usize,
        embed_dim: usize,
        hidden_dim: usize,
        max_response_len: usize,
    ) -> Self {
        ModelSpec {
            family: Family::TinyNeuralLm,
            vocab_size,
            context_window,
            embed_dim,
            hidden_dim,
            max_response_len,
        }
    }

    /// Zeroes the fields a family does not use.
    pub fn normalized(mut self) -> Self {
        if self.family == Family::TabularBigram {
            self.context_window = 0;
            self.embed_dim = 0;
            self.hidden_dim = 0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::validation(
                "vocab_size",
                format!("must be >= 2 (EOS plus one content token), got {}", self.vocab_size),
            ));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::validation("vocab_size", "does not fit in 32 bits"));
        }
        if self.max_response_len < 1 {
            return Err(Error::validation("max_response_len", "must be >= 1"));
        }
        if self.family == Family::TinyNeuralLm {
            for (name, v) in [
                ("context_window", self.context_window),
                ("embed_dim", self.embed_dim),
                ("hidden_dim", self.hidden_dim),
            ] {
                if v < 1 {
                    return Err(Error::validation(name, "must be >= 1 for tiny_neural_lm"));
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let v = self.vocab_size;
        match self.family {
            Family::TabularBigram => v * v,
            Family::TinyNeuralLm => {
                let (k, d, h) = (self.context_window, self.embed_dim, self.hidden_dim);
                v * d + (k * d * h + h) + (h * v + v)
            }
        }
    }

    fn layout(&self) -> Layout {
        let (v, k, d, h) = (self.vocab_size, self.context_window, self.embed_dim, self.hidden_dim);
        let w_hidden = v * d;
        let b_hidden = w_hidden + k * d * h;
        let w_out = b_hidden + h;
        let b_out = w_out + h * v;
        Layout {
            w_hidden,
            b_hidden,
            w_out,
            b_out,
        }
    }
}

#[derive(Clone, Copy)]
struct Layout {
    w_hidden: usize,
    b_hidden: usize,
    w_out: usize,
    b_out: usize,
}

/// Prompt tokens; never contains EOS.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Token>", into = "Vec<Token>")]
pub struct Prompt(Vec<Token>);

impl Prompt {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        if tokens.contains(&EOS) {
            return Err(Error::Input("prompt contains EOS".into()));
        }
        Ok(Prompt(tokens))
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    /// Token that conditions the first response position.
    pub fn last_or_eos(&self) -> Token {
        self.0.last().copied().unwrap_or(EOS)
    }
}

impl TryFrom<Vec<Token>> for Prompt {
    type Error = Error;
    fn try_from(tokens: Vec<Token>) -> Result<Self> {
        Prompt::new(tokens)
    }
}

impl From<Prompt> for Vec<Token> {
    fn from(p: Prompt) -> Self {
        p.0
    }
}

/// Response tokens; nonempty, EOS exactly once and last.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Token>", into = "Vec<Token>")]
pub struct Response(Vec<Token>);

impl Response {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        match tokens.split_last() {
            None => Err(Error::Input("response is empty".into())),
            Some((&last, body)) => {
                if last != EOS {
                    Err(Error::Input("response does not end with EOS".into()))
                } else if body.contains(&EOS) {
                    Err(Error::Input("response contains EOS before its end".into()))
                } else {
                    Ok(Response(tokens))
                }
            }
        }
    }

    /// The response made of a lone EOS.
    pub fn eos() -> Self {
        Response(vec![EOS])
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<Token>> for Response {
    type Error = Error;
    fn try_from(tokens: Vec<Token>) -> Result<Self> {
        Response::new(tokens)
    }
}

impl From<Response> for Vec<Token> {
    fn from(r: Response) -> Self {
        r.0
    }
}

/// A policy: model shape plus its flat parameter vector.
///
/// Checkpoints are immutable once built; training and merging produce new
/// ones.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyCheckpoint<S = f64> {
    spec: ModelSpec,
    params: Vec<S>,
    iteration_index: u32,
    label: String,
}

impl<S: Scalar> PolicyCheckpoint<S> {
    pub fn new(spec: ModelSpec, params: Vec<S>, iteration_index: u32, label: impl Into<String>) -> Result<Self> {
        let spec = spec.normalized();
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::Input(format!(
                "expected {} parameters, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::Input(format!("parameter {i} is not finite")));
        }
        Ok(PolicyCheckpoint {
            spec,
            params,
            iteration_index,
            label: label.into(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    pub fn iteration_index(&self) -> u32 {
        self.iteration_index
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn into_params(self) -> Vec<S> {
        self.params
    }

    /// Same shape, new parameters and metadata.
    pub fn with_params(&self, params: Vec<S>, iteration_index: u32, label: &str) -> Result<Self> {
        PolicyCheckpoint::new(self.spec, params, iteration_index, label)
    }

    pub fn relabeled(mut self, iteration_index: u32, label: &str) -> Self {
        self.iteration_index = iteration_index;
        self.label = label.to_string();
        self
    }

    /// Converts the parameters to another scalar type.
    pub fn cast<T: Scalar>(&self) -> PolicyCheckpoint<T> {
        PolicyCheckpoint {
            spec: self.spec,
            params: self.params.iter().map(|p| T::of(p.to_f64_lossy())).collect(),
            iteration_index: self.iteration_index,
            label: self.label.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    SeededNormal { stddev: f64 },
}

pub fn build_model<S: Scalar>(spec: ModelSpec, init: Init, seed: u64) -> Result<PolicyCheckpoint<S>> {
    let spec = spec.normalized();
    spec.validate()?;
    let n = spec.param_count();
    let params = match init {
        Init::Zeros => vec![S::zero(); n],
        Init::SeededNormal { stddev } => {
            let normal = Normal::new(0.0, stddev).map_err(|e| Error::validation("init.stddev", e.to_string()))?;
            let mut rng = seed::rng(seed);
            (0..n).map(|_| S::of(normal.sample(&mut rng))).collect()
        }
    };
    PolicyCheckpoint::new(spec, params, 0, "init")
}

fn check_tokens(spec: &ModelSpec, prompt: &Prompt, response: &Response) -> Result<()> {
    let v = spec.vocab_size as Token;
    if let Some(t) = prompt.tokens().iter().chain(response.tokens()).find(|&&t| t >= v) {
        return Err(Error::Input(format!("token {t} out of range for vocab {v}")));
    }
    if response.len() > spec.max_response_len {
        return Err(Error::Input(format!(
            "response length {} exceeds max_response_len {}",
            response.len(),
            spec.max_response_len
        )));
    }
    Ok(())
}

/// Context tokens for predicting `seq[pos]`, oldest first, left-padded with EOS.
fn context_window(seq: &[Token], pos: usize, k: usize, out: &mut Vec<Token>) {
    out.clear();
    for back in (1..=k).rev() {
        out.push(if pos >= back { seq[pos - back] } else { EOS });
    }
}

/// Forward activations of `TinyNeuralLm` for one position.
struct Activations<S> {
    input: Vec<S>,
    hidden: Vec<S>,
    logits: Vec<S>,
}

fn tiny_forward<S: Scalar>(spec: &ModelSpec, params: &[S], ctx: &[Token]) -> Activations<S> {
    let (v, d, h) = (spec.vocab_size, spec.embed_dim, spec.hidden_dim);
    let lay = spec.layout();
    let mut input = Vec::with_capacity(ctx.len() * d);
    for &t in ctx {
        let row = t as usize * d;
        input.extend_from_slice(&params[row..row + d]);
    }
    let mut hidden = params[lay.b_hidden..lay.b_hidden + h].to_vec();
    for (i, &x) in input.iter().enumerate() {
        let w = &params[lay.w_hidden + i * h..lay.w_hidden + (i + 1) * h];
        for (a, &wij) in hidden.iter_mut().zip(w) {
            *a += x * wij;
        }
    }
    for a in hidden.iter_mut() {
        *a = a.tanh();
    }
    let mut logits = params[lay.b_out..lay.b_out + v].to_vec();
    for (j, &hj) in hidden.iter().enumerate() {
        let w = &params[lay.w_out + j * v..lay.w_out + (j + 1) * v];
        for (l, &wjv) in logits.iter_mut().zip(w) {
            *l += hj * wjv;
        }
    }
    Activations { input, hidden, logits }
}

fn logits_at<S: Scalar>(spec: &ModelSpec, params: &[S], seq: &[Token], pos: usize, ctx: &mut Vec<Token>) -> Vec<S> {
    match spec.family {
        Family::TabularBigram => {
            let prev = if pos >= 1 { seq[pos - 1] } else { EOS } as usize;
            let v = spec.vocab_size;
            params[prev * v..(prev + 1) * v].to_vec()
        }
        Family::TinyNeuralLm => {
            context_window(seq, pos, spec.context_window, ctx);
            tiny_forward(spec, params, ctx).logits
        }
    }
}

/// In-place log-softmax.
fn log_softmax_in_place<S: Scalar>(logits: &mut [S]) {
    let m = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = logits.iter().map(|&l| (l - m).exp()).sum::<S>().ln() + m;
    for l in logits.iter_mut() {
        *l -= lse;
    }
}

/// Log-probabilities of every next token after `context` (prompt followed by
/// a partial response).
pub fn next_token_log_probs<S: Scalar>(model: &PolicyCheckpoint<S>, context: &[Token]) -> Result<Vec<S>> {
    let v = model.spec.vocab_size as Token;
    if let Some(t) = context.iter().find(|&&t| t >= v) {
        return Err(Error::Input(format!("token {t} out of range for vocab {v}")));
    }
    let mut ctx = Vec::new();
    let mut lp = logits_at(&model.spec, &model.params, context, context.len(), &mut ctx);
    log_softmax_in_place(&mut lp);
    Ok(lp)
}

fn joined(prompt: &Prompt, response: &Response) -> Vec<Token> {
    let mut seq = Vec::with_capacity(prompt.tokens().len() + response.len());
    seq.extend_from_slice(prompt.tokens());
    seq.extend_from_slice(response.tokens());
    seq
}

/// `log π(response | prompt)`, summed over every response position
/// including the final EOS.
pub fn log_prob<S: Scalar>(model: &PolicyCheckpoint<S>, prompt: &Prompt, response: &Response) -> Result<S> {
    check_tokens(&model.spec, prompt, response)?;
    let seq = joined(prompt, response);
    let start = prompt.tokens().len();
    let mut ctx = Vec::new();
    let mut total = S::zero();
    for pos in start..seq.len() {
        let mut lp = logits_at(&model.spec, &model.params, &seq, pos, &mut ctx);
        log_softmax_in_place(&mut lp);
        total += lp[seq[pos] as usize];
    }
    Ok(total)
}

/// Adds `scale * d log π(response | prompt) / d params` into `grad` and
/// returns the log-probability.
pub fn accumulate_log_prob_grad<S: Scalar>(
    model: &PolicyCheckpoint<S>,
    prompt: &Prompt,
    response: &Response,
    scale: S,
    grad: &mut [S],
) -> Result<S> {
    check_tokens(&model.spec, prompt, response)?;
    if grad.len() != model.params.len() {
        return Err(Error::Input("gradient buffer length mismatch".into()));
    }
    let spec = &model.spec;
    let params = &model.params;
    let v = spec.vocab_size;
    let seq = joined(prompt, response);
    let start = prompt.tokens().len();
    let mut ctx = Vec::new();
    let mut total = S::zero();

    for pos in start..seq.len() {
        let target = seq[pos] as usize;
        match spec.family {
            Family::TabularBigram => {
                let prev = if pos >= 1 { seq[pos - 1] } else { EOS } as usize;
                let mut lp = params[prev * v..(prev + 1) * v].to_vec();
                log_softmax_in_place(&mut lp);
                total += lp[target];
                let row = &mut grad[prev * v..(prev + 1) * v];
                for (u, g) in row.iter_mut().enumerate() {
                    let onehot = if u == target { S::one() } else { S::zero() };
                    *g += scale * (onehot - lp[u].exp());
                }
            }
            Family::TinyNeuralLm => {
                context_window(&seq, pos, spec.context_window, &mut ctx);
                let act = tiny_forward(spec, params, &ctx);
                let mut lp = act.logits;
                log_softmax_in_place(&mut lp);
                total += lp[target];
                backprop_tiny(spec, params, &ctx, &act.input, &act.hidden, &lp, target, scale, grad);
            }
        }
    }
    Ok(total)
}

#[allow(clippy::too_many_arguments)]
fn backprop_tiny<S: Scalar>(
    spec: &ModelSpec,
    params: &[S],
    ctx: &[Token],
    input: &[S],
    hidden: &[S],
    log_probs: &[S],
    target: usize,
    scale: S,
    grad: &mut [S],
) {
    let (v, d, h) = (spec.vocab_size, spec.embed_dim, spec.hidden_dim);
    let lay = spec.layout();

    let dlogits: Vec<S> = log_probs
        .iter()
        .enumerate()
        .map(|(u, &l)| {
            let onehot = if u == target { S::one() } else { S::zero() };
            scale * (onehot - l.exp())
        })
        .collect();

    for (g, &dl) in grad[lay.b_out..lay.b_out + v].iter_mut().zip(&dlogits) {
        *g += dl;
    }
    let mut dpre = vec![S::zero(); h];
    for j in 0..h {
        let w = &params[lay.w_out + j * v..lay.w_out + (j + 1) * v];
        let gw = &mut grad[lay.w_out + j * v..lay.w_out + (j + 1) * v];
        let mut dh = S::zero();
        for u in 0..v {
            gw[u] += hidden[j] * dlogits[u];
            dh += w[u] * dlogits[u];
        }
        dpre[j] = dh * (S::one() - hidden[j] * hidden[j]);
    }

    for (g, &da) in grad[lay.b_hidden..lay.b_hidden + h].iter_mut().zip(&dpre) {
        *g += da;
    }
    let mut dinput = vec![S::zero(); input.len()];
    for (i, &x) in input.iter().enumerate() {
        let w = &params[lay.w_hidden + i * h..lay.w_hidden + (i + 1) * h];
        let gw = &mut grad[lay.w_hidden + i * h..lay.w_hidden + (i + 1) * h];
        let mut dx = S::zero();
        for j in 0..h {
            gw[j] += x * dpre[j];
            dx += w[j] * dpre[j];
        }
        dinput[i] = dx;
    }

    for (slot, &t) in ctx.iter().enumerate() {
        let row = t as usize * d;
        for (g, &dx) in grad[row..row + d].iter_mut().zip(&dinput[slot * d..(slot + 1) * d]) {
            *g += dx;
        }
    }
}

/// Exact gradient of [`log_prob`] with respect to the parameters.
pub fn grad_log_prob<S: Scalar>(model: &PolicyCheckpoint<S>, prompt: &Prompt, response: &Response) -> Result<Vec<S>> {
    let mut grad = vec![S::zero(); model.params.len()];
    accumulate_log_prob_grad(model, prompt, response, S::one(), &mut grad)?;
    Ok(grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decode {
    /// `0` means greedy argmax, ties to the lowest token id.
    pub temperature: f64,
    /// Maximum response length including the final EOS.
    pub max_len: usize,
}

impl Decode {
    pub fn greedy(max_len: usize) -> Self {
        Decode {
            temperature: 0.0,
            max_len,
        }
    }
}

fn argmax_lowest<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index<S: Scalar, R: Rng>(logits: &[S], temperature: f64, rng: &mut R) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|l| l.to_f64_lossy() / temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Decodes one response. The response stops at the first EOS; if none is
/// drawn, EOS is forced in the last slot so the length never exceeds
/// `min(decode.max_len, spec.max_response_len)`.
pub fn sample_response<S: Scalar>(
    model: &PolicyCheckpoint<S>,
    prompt: &Prompt,
    decode: Decode,
    rng_seed: u64,
) -> Result<Response> {
    if decode.max_len < 1 {
        return Err(Error::Config("decode.max_len must be >= 1".into()));
    }
    if !(decode.temperature >= 0.0 && decode.temperature.is_finite()) {
        return Err(Error::Config("decode.temperature must be finite and >= 0".into()));
    }
    let spec = &model.spec;
    let v = spec.vocab_size as Token;
    if let Some(t) = prompt.tokens().iter().find(|&&t| t >= v) {
        return Err(Error::Input(format!("token {t} out of range for vocab {v}")));
    }
    let max_len = decode.max_len.min(spec.max_response_len);
    let mut rng = seed::rng(rng_seed);
    let mut seq = prompt.tokens().to_vec();
    let start = seq.len();
    let mut ctx = Vec::new();
    loop {
        let produced = seq.len() - start;
        if produced + 1 == max_len {
            seq.push(EOS);
            break;
        }
        let logits = logits_at(spec, &model.params, &seq, seq.len(), &mut ctx);
        let tok = if decode.temperature == 0.0 {
            argmax_lowest(&logits)
        } else {
            sample_index(&logits, decode.temperature, &mut rng)
        } as Token;
        seq.push(tok);
        if tok == EOS {
            break;
        }
    }
    Response::new(seq.split_off(start))
}
