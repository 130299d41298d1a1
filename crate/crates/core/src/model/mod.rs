//! A small conditional autoregressive model with pluggable probabilistic
//! heads.
//!
//! The encoder is the mean of the input token embeddings. The decoder state at
//! step `t` is the mean embedding of `bos` followed by the prefix `y_<t`. The
//! two are concatenated, passed through one `tanh` hidden layer, and projected
//! to vocabulary logits, either by a dense layer or by a random-feature
//! Gaussian-process head (SNGP).
//!
//! Method-specific pieces:
//!
//! - MC dropout: inverted dropout on the hidden activation, active while
//!   training and when drawing Monte Carlo samples.
//! - Batch ensemble: the hidden weight is modulated per member as
//!   `W_h ∘ (r_k s_kᵀ)`.
//! - SNGP: spectral normalization of `W_h` after every update plus a
//!   random-feature GP output layer with a Laplace precision matrix.
//! - Deep ensembles: independent networks trained from different seeds.

mod backprop;
mod bundle;
mod sngp;
mod train;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::linalg::{axpy, softmax, Matrix};
use crate::rng::Rng;

pub use backprop::{Gradients, HeadGradients, TrainExample};
pub use bundle::{Manifest, ManifestEntry, ModelBundle, BUNDLE_VERSION};
pub use sngp::{
    gp_features, mean_field_logits, spectral_norm, spectral_normalize, update_precision,
    SngpState,
};
pub use train::{init_network, train, train_member, TrainHyper, TrainedBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Base,
    Mcd,
    Be,
    Sngp,
    SngpMcd,
    De,
    SngpDe,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Base,
        Method::Mcd,
        Method::Be,
        Method::Sngp,
        Method::SngpMcd,
        Method::De,
        Method::SngpDe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Mcd => "mcd",
            Method::Be => "be",
            Method::Sngp => "sngp",
            Method::SngpMcd => "sngp_mcd",
            Method::De => "de",
            Method::SngpDe => "sngp_de",
        }
    }

    pub fn uses_dropout(self) -> bool {
        matches!(self, Method::Mcd | Method::SngpMcd)
    }

    pub fn uses_gp(self) -> bool {
        matches!(self, Method::Sngp | Method::SngpMcd | Method::SngpDe)
    }

    pub fn is_batch_ensemble(self) -> bool {
        self == Method::Be
    }

    /// Methods that train several independent networks.
    pub fn is_deep_ensemble(self) -> bool {
        matches!(self, Method::De | Method::SngpDe)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SngpConfig {
    /// Number of random Fourier features `D`.
    pub rff_dim: usize,
    /// RBF length scale; feature frequencies are drawn from `N(0, 1/scale²)`.
    pub kernel_scale: f64,
    pub mean_field_factor: f64,
    pub cov_momentum: f64,
    pub spec_norm_bound: f64,
    pub power_iters: usize,
    /// Added to every precision update as `ridge · I`.
    pub ridge: f64,
}

impl Default for SngpConfig {
    fn default() -> Self {
        Self {
            rff_dim: 128,
            kernel_scale: 1.0,
            mean_field_factor: 1e-4,
            cov_momentum: 0.999,
            spec_norm_bound: 1.0,
            power_iters: 1,
            ridge: 1e-6,
        }
    }
}

impl SngpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rff_dim == 0 {
            return Err(Error::config("sngp.rff_dim", "must be at least 1"));
        }
        if !(self.kernel_scale > 0.0) {
            return Err(Error::config("sngp.kernel_scale", "must be positive"));
        }
        if !(self.mean_field_factor >= 0.0) {
            return Err(Error::config("sngp.mean_field_factor", "must be nonnegative"));
        }
        if !(self.cov_momentum > 0.0 && self.cov_momentum < 1.0) {
            return Err(Error::config("sngp.cov_momentum", "must lie in (0, 1)"));
        }
        if !(self.spec_norm_bound > 0.0) {
            return Err(Error::config("sngp.spec_norm_bound", "must be positive"));
        }
        if self.power_iters == 0 {
            return Err(Error::config("sngp.power_iters", "must be at least 1"));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::config("sngp.ridge", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    /// Monte Carlo dropout samples per decoding step.
    pub samples: usize,
    pub dropout_rate: f64,
    pub be_size: usize,
    pub sngp: SngpConfig,
    /// One seed per trained network: exactly one for single-model methods,
    /// one per member for deep ensembles.
    pub seeds: Vec<u64>,
}

impl MethodConfig {
    pub fn new(method: Method, seeds: Vec<u64>) -> Self {
        Self {
            method,
            samples: 10,
            dropout_rate: 0.1,
            be_size: 5,
            sngp: SngpConfig::default(),
            seeds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::config("samples", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        if self.method.is_batch_ensemble() && self.be_size < 2 {
            return Err(Error::config("be_size", "batch ensembles need at least 2 members"));
        }
        if self.method.is_deep_ensemble() {
            if self.seeds.is_empty() {
                return Err(Error::config("seeds", "deep ensembles need one seed per member"));
            }
        } else if self.seeds.len() != 1 {
            return Err(Error::config(
                "seeds",
                format!("{} takes exactly one seed, got {}", self.method, self.seeds.len()),
            ));
        }
        if self.method.uses_gp() {
            self.sngp.validate()?;
        }
        Ok(())
    }

    /// Dropout rate actually applied by the network: zero unless the method
    /// samples dropout masks.
    pub fn effective_dropout(&self) -> f64 {
        if self.method.uses_dropout() {
            self.dropout_rate
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub vocab_size: usize,
    pub pad: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Architecture {
    pub fn new(vocab: &Vocabulary, embed_dim: usize, hidden_dim: usize) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be at least 1"));
        }
        if hidden_dim == 0 {
            return Err(Error::config("hidden_dim", "must be at least 1"));
        }
        Ok(Self {
            vocab_size: vocab.len(),
            pad: vocab.pad,
            bos: vocab.bos,
            eos: vocab.eos,
            embed_dim,
            hidden_dim,
        })
    }

    /// Width of the concatenated `[input context; prefix state]` vector.
    pub fn hidden_input_dim(&self) -> usize {
        2 * self.embed_dim
    }
}

/// Rank-1 fast weights `(r_k, s_k)` for each batch-ensemble member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEnsembleState {
    pub r: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
}

impl BatchEnsembleState {
    pub fn size(&self) -> usize {
        self.r.len()
    }

    /// All-ones fast weights: every member equals the shared network.
    pub fn unit(size: usize, hidden_dim: usize, input_dim: usize) -> Self {
        Self {
            r: vec![vec![1.0; hidden_dim]; size],
            s: vec![vec![1.0; input_dim]; size],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputHead {
    Dense { w_o: Matrix, b_o: Vec<f64> },
    Gp(SngpState),
}

/// How a forward pass treats the stochastic and Bayesian parts of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout sampled from `seed`; raw logits.
    Train { seed: u64 },
    /// Deterministic; GP logits are mean-field adjusted.
    Infer,
    /// Dropout sampled from `seed`; GP logits are mean-field adjusted.
    MonteCarlo { seed: u64 },
}

impl Mode {
    fn dropout_seed(self) -> Option<u64> {
        match self {
            Mode::Train { seed } | Mode::MonteCarlo { seed } => Some(seed),
            Mode::Infer => None,
        }
    }

    fn mean_field(self) -> bool {
        !matches!(self, Mode::Train { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub arch: Architecture,
    /// `|V| × d`
    pub embed: Matrix,
    /// `d' × 2d`
    pub w_h: Matrix,
    pub b_h: Vec<f64>,
    pub fast: Option<BatchEnsembleState>,
    pub head: OutputHead,
    pub dropout_rate: f64,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub x: Vec<f64>,
    pub xs: Vec<f64>,
    pub a: Vec<f64>,
    pub h: Vec<f64>,
    pub mask: Option<Vec<f64>>,
    pub hd: Vec<f64>,
    pub proj: Option<Vec<f64>>,
    pub phi: Option<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Inverted-dropout scale factors: `0` for dropped units, `1/(1-rate)` for
/// kept ones.
pub fn dropout_mask(seed: u64, len: usize, rate: f64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
        .collect()
}

impl Network {
    pub fn num_members(&self) -> usize {
        self.fast.as_ref().map_or(1, BatchEnsembleState::size)
    }

    pub fn is_gp(&self) -> bool {
        matches!(self.head, OutputHead::Gp(_))
    }

    pub fn sngp(&self) -> Option<&SngpState> {
        match &self.head {
            OutputHead::Gp(state) => Some(state),
            OutputHead::Dense { .. } => None,
        }
    }

    pub fn sngp_mut(&mut self) -> Option<&mut SngpState> {
        match &mut self.head {
            OutputHead::Gp(state) => Some(state),
            OutputHead::Dense { .. } => None,
        }
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.arch.vocab_size) {
            Some(bad) => Err(Error::Input(format!(
                "token {bad} out of vocabulary of size {}",
                self.arch.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// `[mean input embedding; mean embedding of bos + prefix]`
    fn features(&self, input: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        let d = self.arch.embed_dim;
        let mut x = vec![0.0; 2 * d];
        if !input.is_empty() {
            let w = 1.0 / input.len() as f64;
            for &t in input {
                axpy(w, self.embed.row(t as usize), &mut x[..d]);
            }
        }
        let w = 1.0 / (prefix.len() + 1) as f64;
        axpy(w, self.embed.row(self.arch.bos as usize), &mut x[d..]);
        for &t in prefix {
            axpy(w, self.embed.row(t as usize), &mut x[d..]);
        }
        x
    }

    pub(crate) fn trace(
        &self,
        member: usize,
        input: &[TokenId],
        prefix: &[TokenId],
        mode: Mode,
    ) -> Result<Trace> {
        self.check_tokens(input)?;
        self.check_tokens(prefix)?;
        if member >= self.num_members() {
            return Err(Error::Input(format!(
                "member {member} out of range for {} members",
                self.num_members()
            )));
        }
        let x = self.features(input, prefix);
        let (xs, a, z) = match &self.fast {
            Some(fast) => {
                let xs: Vec<f64> = x.iter().zip(&fast.s[member]).map(|(xi, si)| xi * si).collect();
                let a = self.w_h.matvec(&xs);
                let z = a
                    .iter()
                    .zip(&fast.r[member])
                    .zip(&self.b_h)
                    .map(|((ai, ri), bi)| ri * ai + bi)
                    .collect::<Vec<_>>();
                (xs, a, z)
            }
            None => {
                let a = self.w_h.matvec(&x);
                let z = a.iter().zip(&self.b_h).map(|(ai, bi)| ai + bi).collect();
                (x.clone(), a, z)
            }
        };
        let h: Vec<f64> = z.iter().map(|v: &f64| v.tanh()).collect();
        let mask = match mode.dropout_seed() {
            Some(seed) if self.dropout_rate > 0.0 => {
                Some(dropout_mask(seed, h.len(), self.dropout_rate))
            }
            _ => None,
        };
        let hd = match &mask {
            Some(m) => h.iter().zip(m).map(|(hi, mi)| hi * mi).collect(),
            None => h.clone(),
        };
        let (proj, phi, logits) = match &self.head {
            OutputHead::Dense { w_o, b_o } => {
                let mut logits = w_o.matvec(&hd);
                axpy(1.0, b_o, &mut logits);
                (None, None, logits)
            }
            OutputHead::Gp(state) => {
                let mut proj = state.w_r.matvec(&hd);
                axpy(1.0, &state.b_r, &mut proj);
                let phi = sngp::cos_features(&proj);
                let logits = state.beta.matvec(&phi);
                (Some(proj), Some(phi), logits)
            }
        };
        Ok(Trace {
            x,
            xs,
            a,
            h,
            mask,
            hd,
            proj,
            phi,
            logits,
        })
    }

    /// Next-token logits for batch-ensemble member `member` (0 for other
    /// heads). Under [`Mode::Infer`] and [`Mode::MonteCarlo`] the GP head's
    /// logits are mean-field adjusted by the predictive variance.
    pub fn forward_logits(
        &self,
        member: usize,
        input: &[TokenId],
        prefix: &[TokenId],
        mode: Mode,
    ) -> Result<Vec<f64>> {
        let trace = self.trace(member, input, prefix, mode)?;
        match (&self.head, mode.mean_field()) {
            (OutputHead::Gp(state), true) => {
                let phi = trace.phi.as_ref().expect("gp trace has features");
                let var = state.variance(phi)?;
                mean_field_logits(
                    &trace.logits,
                    &vec![var; trace.logits.len()],
                    state.mean_field_factor,
                )
            }
            _ => Ok(trace.logits),
        }
    }

    pub fn predict_proba(
        &self,
        member: usize,
        input: &[TokenId],
        prefix: &[TokenId],
        mode: Mode,
    ) -> Result<Vec<f64>> {
        Ok(softmax(&self.forward_logits(member, input, prefix, mode)?))
    }

    /// Checks every array shape against `arch` and that all entries are finite.
    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        let bad = |what: &str, got: String| {
            Err(Error::Validation(format!("{what} has shape {got}, inconsistent with {a:?}")))
        };
        if self.embed.shape() != (a.vocab_size, a.embed_dim) {
            return bad("embed", format!("{:?}", self.embed.shape()));
        }
        if self.w_h.shape() != (a.hidden_dim, a.hidden_input_dim()) {
            return bad("w_h", format!("{:?}", self.w_h.shape()));
        }
        if self.b_h.len() != a.hidden_dim {
            return bad("b_h", format!("{}", self.b_h.len()));
        }
        if let Some(fast) = &self.fast {
            if fast.r.len() != fast.s.len() || fast.r.is_empty() {
                return bad("fast weights", format!("{}/{}", fast.r.len(), fast.s.len()));
            }
            if fast.r.iter().any(|r| r.len() != a.hidden_dim)
                || fast.s.iter().any(|s| s.len() != a.hidden_input_dim())
            {
                return bad("fast weights", "ragged".into());
            }
        }
        match &self.head {
            OutputHead::Dense { w_o, b_o } => {
                if w_o.shape() != (a.vocab_size, a.hidden_dim) {
                    return bad("w_o", format!("{:?}", w_o.shape()));
                }
                if b_o.len() != a.vocab_size {
                    return bad("b_o", format!("{}", b_o.len()));
                }
            }
            OutputHead::Gp(state) => {
                let d = state.b_r.len();
                if state.w_r.shape() != (d, a.hidden_dim) {
                    return bad("w_r", format!("{:?}", state.w_r.shape()));
                }
                if state.beta.shape() != (a.vocab_size, d) {
                    return bad("beta", format!("{:?}", state.beta.shape()));
                }
                if state.precision.shape() != (d, d) {
                    return bad("precision", format!("{:?}", state.precision.shape()));
                }
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Validation(format!("dropout rate {}", self.dropout_rate)));
        }
        let finite = self.parameters().iter().all(|p| p.iter().all(|x| x.is_finite()))
            && self.sngp().is_none_or(|s| s.w_r.is_finite() && s.precision.is_finite());
        if !finite {
            return Err(Error::Validation("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Trainable parameter arrays in a fixed order: `embed`, `w_h`, `b_h`,
    /// the fast weights `r_0.., s_0..`, then `w_o, b_o` or the GP `beta`.
    /// The random-feature projection and the precision matrix are not
    /// trainable.
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.embed.as_slice(), self.w_h.as_slice(), &self.b_h];
        if let Some(fast) = &self.fast {
            out.extend(fast.r.iter().map(Vec::as_slice));
            out.extend(fast.s.iter().map(Vec::as_slice));
        }
        match &self.head {
            OutputHead::Dense { w_o, b_o } => {
                out.push(w_o.as_slice());
                out.push(b_o);
            }
            OutputHead::Gp(state) => out.push(state.beta.as_slice()),
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.embed.as_mut_slice(),
            self.w_h.as_mut_slice(),
            &mut self.b_h,
        ];
        if let Some(fast) = &mut self.fast {
            let BatchEnsembleState { r, s } = fast;
            out.extend(r.iter_mut().map(Vec::as_mut_slice));
            out.extend(s.iter_mut().map(Vec::as_mut_slice));
        }
        match &mut self.head {
            OutputHead::Dense { w_o, b_o } => {
                out.push(w_o.as_mut_slice());
                out.push(b_o);
            }
            OutputHead::Gp(state) => out.push(state.beta.as_mut_slice()),
        }
        out
    }
}
