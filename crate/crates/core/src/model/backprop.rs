//! Mean token-level cross-entropy and its exact gradient.

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::linalg::{axpy, log_sum_exp, softmax, Matrix};
use crate::rng::derive_seed;

use super::{Mode, Network, OutputHead, Trace};

/// One teacher-forced training sequence. `target` already ends in `eos`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample<'a> {
    pub input: &'a [TokenId],
    pub target: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadGradients {
    Dense { w_o: Matrix, b_o: Vec<f64> },
    Gp { beta: Matrix },
}

/// Gradient of the loss with one entry per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embed: Matrix,
    pub w_h: Matrix,
    pub b_h: Vec<f64>,
    pub fast_r: Vec<Vec<f64>>,
    pub fast_s: Vec<Vec<f64>>,
    pub head: HeadGradients,
}

impl Gradients {
    fn zeros_like(net: &Network) -> Self {
        let (r, s) = match &net.fast {
            Some(f) => (
                f.r.iter().map(|v| vec![0.0; v.len()]).collect(),
                f.s.iter().map(|v| vec![0.0; v.len()]).collect(),
            ),
            None => (Vec::new(), Vec::new()),
        };
        let head = match &net.head {
            OutputHead::Dense { w_o, b_o } => HeadGradients::Dense {
                w_o: Matrix::zeros(w_o.rows(), w_o.cols()),
                b_o: vec![0.0; b_o.len()],
            },
            OutputHead::Gp(state) => HeadGradients::Gp {
                beta: Matrix::zeros(state.beta.rows(), state.beta.cols()),
            },
        };
        Self {
            embed: Matrix::zeros(net.embed.rows(), net.embed.cols()),
            w_h: Matrix::zeros(net.w_h.rows(), net.w_h.cols()),
            b_h: vec![0.0; net.b_h.len()],
            fast_r: r,
            fast_s: s,
            head,
        }
    }

    /// Gradient arrays in the same order as [`Network::parameters`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.embed.as_slice(), self.w_h.as_slice(), &self.b_h];
        out.extend(self.fast_r.iter().map(Vec::as_slice));
        out.extend(self.fast_s.iter().map(Vec::as_slice));
        match &self.head {
            HeadGradients::Dense { w_o, b_o } => {
                out.push(w_o.as_slice());
                out.push(b_o);
            }
            HeadGradients::Gp { beta } => out.push(beta.as_slice()),
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// Dropout seed for position `pos` of example `example` within a batch.
pub(crate) fn position_seed(batch_seed: u64, example: usize, pos: usize) -> u64 {
    derive_seed(batch_seed, &[example as u64, pos as u64])
}

impl Network {
    /// Mean cross-entropy over every target token in `batch`.
    pub fn loss(&self, member: usize, batch: &[TrainExample], seed: u64) -> Result<f64> {
        let (total, count) = self.fold_positions(member, batch, seed, |_, _, _, _| Ok(()))?;
        Ok(total / count as f64)
    }

    /// Mean cross-entropy and its gradient with respect to every trainable
    /// parameter. Dropout masks are drawn from `seed`, one per position, so
    /// the loss is a deterministic function of the parameters.
    pub fn loss_and_gradients(
        &self,
        member: usize,
        batch: &[TrainExample],
        seed: u64,
    ) -> Result<(f64, Gradients)> {
        let count: usize = batch.iter().map(|e| e.target.len()).sum();
        if count == 0 {
            return Err(Error::Input("empty training batch".into()));
        }
        let scale = 1.0 / count as f64;
        let mut grads = Gradients::zeros_like(self);
        let (total, _) = self.fold_positions(member, batch, seed, |example, pos, trace, target| {
            let mut dlogits = softmax(&trace.logits);
            dlogits[target as usize] -= 1.0;
            dlogits.iter_mut().for_each(|g| *g *= scale);
            self.backward(member, example, pos, trace, &dlogits, &mut grads);
            Ok(())
        })?;
        Ok((total / count as f64, grads))
    }

    fn fold_positions(
        &self,
        member: usize,
        batch: &[TrainExample],
        seed: u64,
        mut visit: impl FnMut(&TrainExample, usize, &Trace, TokenId) -> Result<()>,
    ) -> Result<(f64, usize)> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, example) in batch.iter().enumerate() {
            for (pos, &target) in example.target.iter().enumerate() {
                if target as usize >= self.arch.vocab_size {
                    return Err(Error::Input(format!("target token {target} out of vocabulary")));
                }
                let mode = Mode::Train {
                    seed: position_seed(seed, i, pos),
                };
                let trace = self.trace(member, example.input, &example.target[..pos], mode)?;
                total += log_sum_exp(&trace.logits) - trace.logits[target as usize];
                count += 1;
                visit(example, pos, &trace, target)?;
            }
        }
        if count == 0 {
            return Err(Error::Input("empty training batch".into()));
        }
        Ok((total, count))
    }

    fn backward(
        &self,
        member: usize,
        example: &TrainExample,
        pos: usize,
        trace: &Trace,
        dlogits: &[f64],
        grads: &mut Gradients,
    ) {
        let dhd = match (&self.head, &mut grads.head) {
            (OutputHead::Dense { w_o, .. }, HeadGradients::Dense { w_o: gw, b_o: gb }) => {
                gw.add_outer(1.0, dlogits, &trace.hd);
                axpy(1.0, dlogits, gb);
                w_o.t_matvec(dlogits)
            }
            (OutputHead::Gp(state), HeadGradients::Gp { beta: gbeta }) => {
                let phi = trace.phi.as_ref().expect("gp trace has features");
                let proj = trace.proj.as_ref().expect("gp trace has projections");
                gbeta.add_outer(1.0, dlogits, phi);
                let dphi = state.beta.t_matvec(dlogits);
                let amp = (2.0 / proj.len() as f64).sqrt();
                let dproj: Vec<f64> = dphi
                    .iter()
                    .zip(proj)
                    .map(|(g, p)| -g * amp * p.sin())
                    .collect();
                state.w_r.t_matvec(&dproj)
            }
            _ => unreachable!("gradient head matches network head"),
        };

        let dh: Vec<f64> = match &trace.mask {
            Some(mask) => dhd.iter().zip(mask).map(|(g, m)| g * m).collect(),
            None => dhd,
        };
        let dz: Vec<f64> = dh
            .iter()
            .zip(&trace.h)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        axpy(1.0, &dz, &mut grads.b_h);

        let dx = match &self.fast {
            Some(fast) => {
                let r = &fast.r[member];
                let s = &fast.s[member];
                for (g, (dzi, ai)) in grads.fast_r[member].iter_mut().zip(dz.iter().zip(&trace.a)) {
                    *g += dzi * ai;
                }
                let da: Vec<f64> = dz.iter().zip(r).map(|(g, ri)| g * ri).collect();
                grads.w_h.add_outer(1.0, &da, &trace.xs);
                let dxs = self.w_h.t_matvec(&da);
                for (g, (dxi, xi)) in grads.fast_s[member].iter_mut().zip(dxs.iter().zip(&trace.x)) {
                    *g += dxi * xi;
                }
                dxs.iter().zip(s).map(|(g, si)| g * si).collect::<Vec<_>>()
            }
            None => {
                grads.w_h.add_outer(1.0, &dz, &trace.xs);
                self.w_h.t_matvec(&dz)
            }
        };

        let d = self.arch.embed_dim;
        if !example.input.is_empty() {
            let w = 1.0 / example.input.len() as f64;
            for &t in example.input {
                axpy(w, &dx[..d], grads.embed.row_mut(t as usize));
            }
        }
        let prefix = &example.target[..pos];
        let w = 1.0 / (prefix.len() + 1) as f64;
        axpy(w, &dx[d..], grads.embed.row_mut(self.arch.bos as usize));
        for &t in prefix {
            axpy(w, &dx[d..], grads.embed.row_mut(t as usize));
        }
    }
}
