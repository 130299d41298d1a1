//! Maximum-likelihood training with plain SGD.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ExampleRecord, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::rng::{derive_seed, hash_str, Rng};

use super::sngp::normalize_in_place;
use super::{
    Architecture, BatchEnsembleState, MethodConfig, Mode, ModelBundle, Network, OutputHead,
    SngpState, TrainExample,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.1,
            steps: 2000,
            batch: 32,
            embed_dim: 16,
            hidden_dim: 32,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be at least 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("train.embed_dim", "must be at least 1"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("train.hidden_dim", "must be at least 1"));
        }
        Ok(())
    }
}

/// A trained bundle together with the per-step training losses of each
/// member.
#[derive(Debug, Clone)]
pub struct TrainedBundle {
    pub bundle: ModelBundle,
    pub losses: Vec<Vec<f64>>,
}

/// Fresh parameters for one network. Embeddings and weights are drawn from
/// `U(-0.1, 0.1)`, biases start at zero, batch-ensemble fast weights from
/// `U(0.5, 1.5)`.
pub fn init_network(arch: Architecture, config: &MethodConfig, seed: u64) -> Network {
    let mut rng = Rng::child(seed, &[hash_str("init")]);
    let mut uniform = |rows, cols| Matrix::from_fn(rows, cols, |_, _| rng.uniform(-0.1, 0.1));
    let embed = uniform(arch.vocab_size, arch.embed_dim);
    let w_h = uniform(arch.hidden_dim, arch.hidden_input_dim());
    let head_dense = (!config.method.uses_gp()).then(|| uniform(arch.vocab_size, arch.hidden_dim));

    let fast = config.method.is_batch_ensemble().then(|| {
        let mut rng = Rng::child(seed, &[hash_str("fast-weights")]);
        let mut draw = |n: usize| (0..n).map(|_| rng.uniform(0.5, 1.5)).collect::<Vec<_>>();
        let r = (0..config.be_size).map(|_| draw(arch.hidden_dim)).collect();
        let s = (0..config.be_size).map(|_| draw(arch.hidden_input_dim())).collect();
        BatchEnsembleState { r, s }
    });

    let head = match head_dense {
        Some(w_o) => OutputHead::Dense {
            w_o,
            b_o: vec![0.0; arch.vocab_size],
        },
        None => {
            let mut rng = Rng::child(seed, &[hash_str("random-features")]);
            OutputHead::Gp(SngpState::new(&mut rng, arch.hidden_dim, arch.vocab_size, &config.sngp))
        }
    };

    Network {
        arch,
        embed,
        w_h,
        b_h: vec![0.0; arch.hidden_dim],
        fast,
        head,
        dropout_rate: config.effective_dropout(),
    }
}

fn training_examples<'a>(corpus: &'a [ExampleRecord], arch: &Architecture) -> Result<Vec<TrainExample<'a>>> {
    corpus
        .iter()
        .map(|r| {
            let bad = r
                .input
                .tokens()
                .iter()
                .chain(r.reference.tokens())
                .find(|&&t| t as usize >= arch.vocab_size);
            if let Some(t) = bad {
                return Err(Error::Input(format!("record {}: token {t} out of vocabulary", r.id)));
            }
            let mut target: Vec<TokenId> = r.reference.strip_eos(arch.eos).to_vec();
            target.push(arch.eos);
            Ok(TrainExample {
                input: r.input.tokens(),
                target,
            })
        })
        .collect()
}

/// Trains a single network from `seed`. `observer` sees the network after
/// every SGD step (and spectral normalization, for SNGP heads).
pub fn train_member(
    corpus: &[ExampleRecord],
    arch: Architecture,
    config: &MethodConfig,
    hyper: &TrainHyper,
    seed: u64,
    mut observer: impl FnMut(usize, &Network),
) -> Result<(Network, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::config("corpus", "training corpus is empty"));
    }
    hyper.validate()?;
    let examples = training_examples(corpus, &arch)?;
    let mut net = init_network(arch, config, seed);
    let mut batch_rng = Rng::child(seed, &[hash_str("batches")]);
    let dropout_key = hash_str("dropout");
    let mut sn_vector = Vec::new();
    let mut losses = Vec::with_capacity(hyper.steps);

    for step in 0..hyper.steps {
        let member = step % net.num_members();
        let batch: Vec<TrainExample> = (0..hyper.batch)
            .map(|_| examples[batch_rng.index(examples.len())].clone())
            .collect();
        let seed_step = derive_seed(seed, &[dropout_key, step as u64]);
        let (loss, grads) = net.loss_and_gradients(member, &batch, seed_step)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Training { step, loss });
        }
        for (param, grad) in net.parameters_mut().into_iter().zip(grads.slices()) {
            axpy(-hyper.lr, grad, param);
        }
        if net.is_gp() {
            let w = std::mem::replace(&mut net.w_h, Matrix::zeros(0, 0));
            net.w_h = normalize_in_place(
                w,
                config.sngp.spec_norm_bound,
                config.sngp.power_iters,
                &mut sn_vector,
            );
        }
        if step % 250 == 0 || step + 1 == hyper.steps {
            log::debug!("{} seed {seed} step {step}: loss {loss:.5}", config.method);
        }
        losses.push(loss);
        observer(step, &net);
    }

    if net.is_gp() {
        finalize_precision(&mut net, &examples, hyper.batch, config)?;
    }
    Ok((net, losses))
}

/// Rebuilds the GP precision from the identity with one momentum update per
/// training batch, then factorizes it.
fn finalize_precision(
    net: &mut Network,
    examples: &[TrainExample],
    batch: usize,
    config: &MethodConfig,
) -> Result<()> {
    let mut state = match &net.head {
        OutputHead::Gp(state) => state.clone(),
        OutputHead::Dense { .. } => return Ok(()),
    };
    state.reset_precision();
    for chunk in examples.chunks(batch) {
        let mut phis = Vec::new();
        for ex in chunk {
            for pos in 0..ex.target.len() {
                let trace = net.trace(0, ex.input, &ex.target[..pos], Mode::Infer)?;
                phis.push(trace.phi.expect("gp trace has features"));
            }
        }
        state.update_precision(&phis, config.sngp.cov_momentum, config.sngp.ridge);
    }
    state.finalize()?;
    net.head = OutputHead::Gp(state);
    Ok(())
}

/// Trains every network the method needs (one per seed) and bundles them.
/// Deep-ensemble members train concurrently on independent PRNG streams.
pub fn train(
    corpus: &[ExampleRecord],
    vocab: &Vocabulary,
    config: &MethodConfig,
    hyper: &TrainHyper,
) -> Result<TrainedBundle> {
    config.validate()?;
    hyper.validate()?;
    let arch = Architecture::new(vocab, hyper.embed_dim, hyper.hidden_dim)?;
    let trained: Vec<(Network, Vec<f64>)> = config
        .seeds
        .par_iter()
        .map(|&seed| train_member(corpus, arch, config, hyper, seed, |_, _| {}))
        .collect::<Result<_>>()?;
    let (members, losses) = trained.into_iter().unzip();
    Ok(TrainedBundle {
        bundle: ModelBundle {
            config: config.clone(),
            vocab_fingerprint: vocab.fingerprint(),
            members,
        },
        losses,
    })
}
