//! Acceptance suite. Each criterion runs in order and prints one line; the
//! process exits non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use seqcal::calib::{
    abstention_curve, ece, roc_auc, spearman, AbstentionItem, EceLevel, ScoredPair,
};
use seqcal::corpus::{TokenId, Vocabulary};
use seqcal::inference::{
    beam_decode, decode_example, DecodeTokens, Posterior, PosteriorConfig,
};
use seqcal::linalg::Matrix;
use seqcal::model::{
    init_network, mean_field_logits, train, train_member, update_precision, Architecture,
    BatchEnsembleState, Method, MethodConfig, Mode, Network, TrainExample, TrainHyper,
};
use seqcal::rng::Rng;
use seqcal::rouge::{rouge_l, rouge_n, QualityMetric};
use seqcal_cli::{pipeline, Overrides, RunConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {:.1}s, limit {}s", elapsed.as_secs_f64(), limit.as_secs()))
}

// ---------------------------------------------------------------------------
// 1. Metric oracles

fn ece_oracle(pairs: &[ScoredPair], k: usize) -> f64 {
    let n = pairs.len() as f64;
    let mut total = 0.0;
    for b in 1..=k {
        let lo = (b - 1) as f64 / k as f64;
        let hi = b as f64 / k as f64;
        let members: Vec<&ScoredPair> =
            pairs.iter().filter(|p| p.confidence > lo && p.confidence <= hi).collect();
        if members.is_empty() {
            continue;
        }
        let c = members.len() as f64;
        let conf: f64 = members.iter().map(|p| p.confidence).sum();
        let acc: f64 = members.iter().map(|p| if p.correct { 1.0 } else { 0.0 }).sum();
        total += c / n * (conf / c - acc / c).abs();
    }
    total
}

fn rank_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn spearman_oracle(u: &[f64], q: &[f64]) -> Option<f64> {
    let (a, b) = (rank_oracle(u), rank_oracle(q));
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va.sqrt() * vb.sqrt()))
}

fn auc_oracle(u: &[f64], q: &[f64], theta: f64) -> Option<f64> {
    let good: Vec<f64> = u.iter().zip(q).filter(|(_, &q)| q > theta).map(|(&u, _)| u).collect();
    let bad: Vec<f64> = u.iter().zip(q).filter(|(_, &q)| q <= theta).map(|(&u, _)| u).collect();
    if good.is_empty() || bad.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for g in &good {
        for b in &bad {
            wins += if g > b { 1.0 } else if g == b { 0.5 } else { 0.0 };
        }
    }
    Some(wins / (good.len() * bad.len()) as f64)
}

fn abstention_oracle(ids: &[String], u: &[f64], q: &[f64], alpha: f64) -> f64 {
    let mut idx: Vec<usize> = (0..u.len()).collect();
    idx.sort_by(|&a, &b| u[a].partial_cmp(&u[b]).unwrap().then(ids[a].cmp(&ids[b])));
    let drop = (alpha * u.len() as f64).floor() as usize;
    let kept = &idx[drop..];
    kept.iter().map(|&i| q[i]).sum::<f64>() / kept.len() as f64
}

fn grams(s: &[TokenId], n: usize) -> Vec<&[TokenId]> {
    if s.len() < n {
        Vec::new()
    } else {
        s.windows(n).collect()
    }
}

/// Returns (overlap, hyp total, ref total).
fn rouge_n_oracle(hyp: &[TokenId], reference: &[TokenId], n: usize) -> (usize, usize, usize) {
    let (h, r) = (grams(hyp, n), grams(reference, n));
    let mut seen: Vec<&[TokenId]> = Vec::new();
    let mut overlap = 0;
    for g in &h {
        if seen.contains(g) {
            continue;
        }
        seen.push(g);
        let ch = h.iter().filter(|x| x == &g).count();
        let cr = r.iter().filter(|x| x == &g).count();
        overlap += ch.min(cr);
    }
    (overlap, h.len(), r.len())
}

fn is_subsequence(sub: &[TokenId], of: &[TokenId]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|t| it.any(|x| x == t))
}

fn lcs_oracle(a: &[TokenId], b: &[TokenId]) -> usize {
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let sub: Vec<TokenId> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            is_subsequence(&sub, b).then_some(sub.len())
        })
        .max()
        .unwrap_or(0)
}

fn prf(overlap: usize, h: usize, r: usize) -> (f64, f64, f64) {
    let p = if h == 0 { 0.0 } else { overlap as f64 / h as f64 };
    let rc = if r == 0 { 0.0 } else { overlap as f64 / r as f64 };
    let f = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
    (p, rc, f)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let trials = 300;
    for t in 0..trials {
        let k = [1, 5, 10, 15][t % 4];
        let n = 1 + rng.index(200);
        let pairs: Vec<ScoredPair> = (0..n)
            .map(|_| {
                let confidence = if rng.bernoulli(0.2) {
                    (1 + rng.index(k)) as f64 / k as f64
                } else {
                    1.0 - rng.next_f64()
                };
                ScoredPair { confidence, correct: rng.bernoulli(confidence) }
            })
            .collect();
        let got = ece(&pairs, k).map_err(|e| e.to_string())?;
        let want = ece_oracle(&pairs, k);
        ensure((got - want).abs() <= 1e-12, || format!("ece trial {t}: {got} vs {want}"))?;
    }
    let mut defined = 0;
    for t in 0..trials {
        let n = 2 + rng.index(15);
        let u: Vec<f64> = (0..n).map(|_| rng.index(6) as f64 - 3.0).collect();
        let q: Vec<f64> = (0..n).map(|_| (rng.index(5) * 25) as f64).collect();
        match (spearman(&u, &q), spearman_oracle(&u, &q)) {
            (Ok(got), Some(want)) => {
                defined += 1;
                ensure((got - want).abs() <= 1e-12, || format!("spearman trial {t}: {got} vs {want}"))?
            }
            (Err(_), None) => {}
            (got, want) => return Err(format!("spearman trial {t}: {got:?} vs {want:?}")),
        }
        match (roc_auc(&u, &q, 40.0), auc_oracle(&u, &q, 40.0)) {
            (Ok(got), Some(want)) => ensure(got == want, || format!("auc trial {t}: {got} vs {want}"))?,
            (Err(_), None) => {}
            (got, want) => return Err(format!("auc trial {t}: {got:?} vs {want:?}")),
        }
        let ids: Vec<String> = (0..n).map(|i| format!("id{:02}", rng.index(100) * 100 + i)).collect();
        let items: Vec<AbstentionItem> = (0..n)
            .map(|i| AbstentionItem { id: &ids[i], u: u[i], quality: q[i] })
            .collect();
        let alphas = seqcal::calib::default_alphas();
        let curve = abstention_curve(&items, &alphas).map_err(|e| e.to_string())?;
        for (a, got) in alphas.iter().zip(&curve.values) {
            let want = abstention_oracle(&ids, &u, &q, *a);
            ensure((got - want).abs() <= 1e-12, || format!("abstention trial {t} α={a}: {got} vs {want}"))?;
        }
    }
    ensure(defined >= 200, || format!("only {defined} defined spearman instances"))?;
    for t in 0..trials {
        let hyp: Vec<TokenId> = (0..rng.index(9)).map(|_| rng.index(4) as TokenId).collect();
        let reference: Vec<TokenId> = (0..rng.index(9)).map(|_| rng.index(4) as TokenId).collect();
        for n in [1, 2] {
            let got = rouge_n(&hyp, &reference, n).map_err(|e| e.to_string())?;
            let (o, h, r) = rouge_n_oracle(&hyp, &reference, n);
            let want = prf(o, h, r);
            ensure((got.precision, got.recall, got.f1) == want, || {
                format!("rouge-{n} trial {t}: {got:?} vs {want:?}")
            })?;
        }
        let got = rouge_l(&hyp, &reference);
        let want = prf(lcs_oracle(&hyp, &reference), hyp.len(), reference.len());
        ensure((got.precision, got.recall, got.f1) == want, || format!("rouge-L trial {t}: {got:?} vs {want:?}"))?;
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("{trials} instances per metric, {defined} defined correlations"))
}

// ---------------------------------------------------------------------------
// 2. Gradients

fn small_arch(vocab: usize, embed: usize, hidden: usize) -> Architecture {
    Architecture::new(&Vocabulary::synthetic(vocab, 0).unwrap(), embed, hidden).unwrap()
}

fn method_config(method: Method) -> MethodConfig {
    let mut cfg = MethodConfig::new(method, vec![0]);
    cfg.be_size = 3;
    cfg.sngp.rff_dim = 16;
    cfg
}

fn perturbed(arch: Architecture, method: Method, seed: u64, scale: f64) -> Network {
    let mut net = init_network(arch, &method_config(method), seed);
    let mut rng = Rng::new(seed.wrapping_add(77));
    for p in net.parameters_mut() {
        p.iter_mut().for_each(|v| *v += rng.uniform(-scale, scale));
    }
    net
}

fn random_batch(rng: &mut Rng, vocab: usize, eos: TokenId) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    (0..4)
        .map(|_| {
            let input = (0..1 + rng.index(5)).map(|_| (3 + rng.index(vocab - 3)) as TokenId).collect();
            let mut target: Vec<TokenId> =
                (0..rng.index(4)).map(|_| (3 + rng.index(vocab - 3)) as TokenId).collect();
            target.push(eos);
            (input, target)
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let arch = small_arch(10, 4, 8);
    let mut worst: f64 = 0.0;
    for method in [Method::Base, Method::Be, Method::Sngp] {
        for seed in 0..5u64 {
            let mut net = perturbed(arch, method, seed, 0.5);
            let mut rng = Rng::new(1000 + seed);
            let owned = random_batch(&mut rng, 10, arch.eos);
            let batch: Vec<TrainExample> =
                owned.iter().map(|(i, t)| TrainExample { input: i, target: t.clone() }).collect();
            let member = seed as usize % net.num_members();
            let (_, grads) = net.loss_and_gradients(member, &batch, seed).map_err(|e| e.to_string())?;
            let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
            let coords: Vec<(usize, usize)> = analytic
                .iter()
                .enumerate()
                .flat_map(|(b, s)| (0..s.len()).map(move |i| (b, i)))
                .collect();
            let h = 1e-3;
            for _ in 0..20 {
                let (b, i) = coords[rng.index(coords.len())];
                let orig = net.parameters()[b][i];
                net.parameters_mut()[b][i] = orig + h;
                let up = net.loss(member, &batch, seed).map_err(|e| e.to_string())?;
                net.parameters_mut()[b][i] = orig - h;
                let down = net.loss(member, &batch, seed).map_err(|e| e.to_string())?;
                net.parameters_mut()[b][i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let exact = analytic[b][i];
                let rel = (numeric - exact).abs() / (numeric.abs() + exact.abs()).max(1e-8);
                worst = worst.max(rel);
                ensure(rel < 1e-4, || {
                    format!("{method} seed {seed} param {b}[{i}]: fd {numeric} vs {exact} (rel {rel:.2e})")
                })?;
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("base/be/sngp x 5 seeds x 20 coords, worst rel err {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 3. Collapse

fn keyword_corpus(n: usize, vocab: usize, seed: u64) -> Vec<seqcal::corpus::ExampleRecord> {
    let spec = seqcal::corpus::TaskSpec {
        kind: seqcal::corpus::TaskKind::KeywordExtract,
        vocab_size: vocab,
        num_keywords: 3,
        input_len: 6,
        output_len: 3,
        noise_rate: 0.0,
        seed,
    };
    seqcal::corpus::generate_corpus(&spec, n).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_3() -> Outcome {
    let vocab = Vocabulary::synthetic(12, 3).unwrap();
    let corpus = keyword_corpus(60, 12, 4);
    let hyper = TrainHyper { steps: 100, embed_dim: 6, hidden_dim: 10, ..Default::default() };

    let base = train(&corpus, &vocab, &MethodConfig::new(Method::Base, vec![5]), &hyper).map_err(|e| e.to_string())?;
    let mut mcd_cfg = MethodConfig::new(Method::Mcd, vec![5]);
    mcd_cfg.dropout_rate = 0.0;
    let mcd = train(&corpus, &vocab, &mcd_cfg, &hyper).map_err(|e| e.to_string())?;
    let (pb, pm) = (Posterior::new(&base.bundle, 3), Posterior::new(&mcd.bundle, 3));
    let mut dropout_gap: f64 = 0.0;
    for r in &corpus[..20] {
        for t in 0..=r.reference.len() {
            let prefix = &r.reference.tokens()[..t];
            let a = pb.distribution(1, r.input.tokens(), prefix).map_err(|e| e.to_string())?;
            let b = pm.distribution(1, r.input.tokens(), prefix).map_err(|e| e.to_string())?;
            dropout_gap = dropout_gap.max(max_diff(&a, &b));
        }
    }
    ensure(dropout_gap <= 1e-12, || format!("dropout 0 gap {dropout_gap:.2e}"))?;

    let shared = &base.bundle.members[0];
    let mut be_net = shared.clone();
    be_net.fast = Some(BatchEnsembleState::unit(5, shared.arch.hidden_dim, shared.arch.hidden_input_dim()));
    let mut be_gap: f64 = 0.0;
    for r in &corpus[..20] {
        let want = shared.predict_proba(0, r.input.tokens(), &[], Mode::Infer).map_err(|e| e.to_string())?;
        for k in 0..5 {
            let got = be_net.predict_proba(k, r.input.tokens(), &[], Mode::Infer).map_err(|e| e.to_string())?;
            be_gap = be_gap.max(max_diff(&got, &want));
        }
    }
    ensure(be_gap <= 1e-10, || format!("unit fast weights gap {be_gap:.2e}"))?;

    let mut rng = Rng::new(8);
    let logits: Vec<f64> = (0..12).map(|_| rng.normal() * 3.0).collect();
    let vars: Vec<f64> = (0..12).map(|_| rng.next_f64() * 10.0).collect();
    let adjusted = mean_field_logits(&logits, &vars, 0.0).map_err(|e| e.to_string())?;
    ensure(adjusted == logits, || "λ=0 changed logits".into())?;

    let p = {
        let mut p = Matrix::identity(8);
        let phis: Vec<Vec<f64>> = (0..5).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        p = update_precision(&p, &phis, 0.7, 1e-6);
        p
    };
    let phis: Vec<Vec<f64>> = (0..5).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
    ensure(update_precision(&p, &phis, 1.0, 1e-6) == p, || "m=1 changed precision".into())?;

    Ok(format!("dropout gap {dropout_gap:.1e}, BE gap {be_gap:.1e}, λ=0 and m=1 exact"))
}

// ---------------------------------------------------------------------------
// 4. Structure

fn criterion_4() -> Outcome {
    let vocab = Vocabulary::synthetic(12, 3).unwrap();
    let corpus = keyword_corpus(100, 12, 9);
    let arch = Architecture::new(&vocab, 8, 32).map_err(|e| e.to_string())?;
    let hyper = TrainHyper { steps: 150, lr: 0.5, embed_dim: 8, hidden_dim: 32, ..Default::default() };
    let mut worst_ratio: f64 = 0.0;
    for bound in [1.0, 3.0] {
        let mut cfg = MethodConfig::new(Method::Sngp, vec![2]);
        cfg.sngp.rff_dim = 32;
        cfg.sngp.spec_norm_bound = bound;
        let mut violation = None;
        train_member(&corpus, arch, &cfg, &hyper, 2, |step, net| {
            let w = nalgebra::DMatrix::from_row_slice(net.w_h.rows(), net.w_h.cols(), net.w_h.as_slice());
            let sigma = w.singular_values().max();
            worst_ratio = worst_ratio.max(sigma / bound);
            if sigma > bound * 1.001 && violation.is_none() {
                violation = Some((step, sigma));
            }
        })
        .map_err(|e| e.to_string())?;
        if let Some((step, sigma)) = violation {
            return Err(format!("c={bound}: σ_max {sigma} at step {step}"));
        }
    }

    let mut rng = Rng::new(12);
    let mut min_eig = f64::INFINITY;
    for momentum in [0.999, 0.9, 0.5] {
        let dim = 24;
        let mut p = Matrix::identity(dim);
        for step in 0..100 {
            let phis: Vec<Vec<f64>> = (0..3).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect();
            p = update_precision(&p, &phis, momentum, 1e-6);
            let m = nalgebra::DMatrix::from_row_slice(dim, dim, p.as_slice());
            let asym = (&m - m.transpose()).abs().max();
            let eig = m.symmetric_eigenvalues().min();
            min_eig = min_eig.min(eig);
            ensure(asym == 0.0 && eig > 0.0, || {
                format!("m={momentum} step {step}: asymmetry {asym}, min eigenvalue {eig}")
            })?;
        }
    }

    let posterior_cfg = PosteriorConfig { max_len: 5, ..Default::default() };
    let hyper = TrainHyper { steps: 200, lr: 0.3, embed_dim: 6, hidden_dim: 12, ..Default::default() };
    let mut steps = 0usize;
    let mut worst_sum: f64 = 0.0;
    for method in Method::ALL {
        let seeds = if method.is_deep_ensemble() { vec![1, 2, 3] } else { vec![1] };
        let mut cfg = MethodConfig::new(method, seeds);
        cfg.sngp.rff_dim = 24;
        cfg.be_size = 3;
        let bundle = train(&corpus[..80], &vocab, &cfg, &hyper).map_err(|e| e.to_string())?.bundle;
        let posterior = Posterior::new(&bundle, 4);
        for r in &corpus[80..] {
            decode_example(&posterior, r, &posterior_cfg, |p| {
                steps += 1;
                worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
            })
            .map_err(|e| e.to_string())?;
        }
    }
    ensure(worst_sum <= 1e-9, || format!("posterior sums off by {worst_sum:.2e}"))?;
    Ok(format!(
        "max σ/c {worst_ratio:.6}, min precision eigenvalue {min_eig:.2e}, {steps} decode steps with |Σp−1| ≤ {worst_sum:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 5. Beam search

type Dist<'a> = Box<dyn Fn(&[TokenId]) -> Vec<f64> + 'a>;

fn exhaustive(model: &Dist, specials: DecodeTokens, vocab: usize, max_len: usize, norm: bool) -> Vec<TokenId> {
    fn walk(
        model: &Dist,
        s: DecodeTokens,
        vocab: usize,
        max_len: usize,
        norm: bool,
        prefix: Vec<TokenId>,
        total: f64,
        best: &mut Option<(f64, Vec<TokenId>)>,
    ) {
        let dist = model(&prefix);
        for tok in 0..vocab as TokenId {
            if tok == s.pad || tok == s.bos {
                continue;
            }
            let mut seq = prefix.clone();
            seq.push(tok);
            let t = total + dist[tok as usize].ln();
            if tok == s.eos || seq.len() == max_len {
                let score = if norm { t / seq.len() as f64 } else { t };
                if best.as_ref().is_none_or(|(b, bs)| score > *b || (score == *b && seq < *bs)) {
                    *best = Some((score, seq));
                }
            } else {
                walk(model, s, vocab, max_len, norm, seq, t, best);
            }
        }
    }
    let mut best = None;
    walk(model, specials, vocab, max_len, norm, Vec::new(), 0.0, &mut best);
    best.expect("at least one sequence").1
}

fn greedy(model: &Dist, s: DecodeTokens, max_len: usize) -> Vec<TokenId> {
    let mut seq = Vec::new();
    while seq.len() < max_len {
        let dist = model(&seq);
        let mut best: Option<(TokenId, f64)> = None;
        for (tok, &p) in dist.iter().enumerate() {
            let tok = tok as TokenId;
            if tok != s.pad && tok != s.bos && best.is_none_or(|(_, q)| p > q) {
                best = Some((tok, p));
            }
        }
        let tok = best.expect("emittable token").0;
        seq.push(tok);
        if tok == s.eos {
            break;
        }
    }
    seq
}

fn criterion_5() -> Outcome {
    let mut checked = 0;
    for (vocab, max_len) in [(4usize, 3usize), (7, 3)] {
        let arch = small_arch(vocab, 3, 5);
        let specials = DecodeTokens { pad: arch.pad, bos: arch.bos, eos: arch.eos };
        for seed in 0..50u64 {
            let net = perturbed(arch, Method::Base, seed, 2.0);
            let input: Vec<TokenId> = vec![3, (vocab - 1) as TokenId];
            let model: Dist = Box::new(|prefix: &[TokenId]| net.predict_proba(0, &input, prefix, Mode::Infer).unwrap());
            for norm in [true, false] {
                let cfg = PosteriorConfig {
                    beam_size: if vocab == 4 { 64 } else { vocab.pow(max_len as u32) },
                    max_len,
                    length_norm: norm,
                    length_norm_pruning: false,
                };
                let got = beam_decode(|p| Ok(model(p)), specials, &cfg).map_err(|e| e.to_string())?;
                let want = exhaustive(&model, specials, vocab, max_len, norm);
                ensure(got.tokens == want, || format!("|V|={vocab} seed {seed} norm {norm}: {:?} vs {want:?}", got.tokens))?;
                checked += 1;
            }
            let cfg = PosteriorConfig { beam_size: 1, max_len: 6, ..Default::default() };
            let got = beam_decode(|p| Ok(model(p)), specials, &cfg).map_err(|e| e.to_string())?;
            let want = greedy(&model, specials, 6);
            ensure(got.tokens == want, || format!("greedy |V|={vocab} seed {seed}: {:?} vs {want:?}", got.tokens))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} decodes match exhaustive and greedy oracles"))
}

// ---------------------------------------------------------------------------
// 6. Calibrated population

fn criterion_6() -> Outcome {
    let mut rng = Rng::new(6);
    let pairs: Vec<ScoredPair> = (0..100_000)
        .map(|_| {
            let confidence = 1.0 - rng.next_f64();
            ScoredPair { confidence, correct: rng.next_f64() < confidence }
        })
        .collect();
    let e = ece(&pairs, 15).map_err(|e| e.to_string())?;
    ensure(e < 0.01, || format!("ECE {e}"))?;
    Ok(format!("ECE {e:.5}"))
}

// ---------------------------------------------------------------------------
// 7. Desk-scale trends

const KEYWORD_CONFIG: &str = include_str!("../../../configs/keyword.toml");

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rouge_up = 0;
    let mut ece_down = 0;
    let mut failures = Vec::new();
    let mut effects = Vec::new();
    for seed in 0..3u64 {
        let mut config = RunConfig::parse(KEYWORD_CONFIG).map_err(|e| e.to_string())?;
        config.apply(&Overrides { seed: Some(seed), out_dir: Some(dir.path().join(format!("seed{seed}"))) });
        let report = pipeline::run_all(&config).map_err(|e| e.to_string())?;
        let get = |m: Method| report.method(m).ok_or_else(|| format!("{m} missing from report"));
        let (base, de) = (get(Method::Base)?, get(Method::De)?);
        let r1 = |r: &seqcal_cli::report::MethodReport| r.mean_quality.map(|q| q.rouge1).unwrap_or(f64::NAN);
        let e = |r: &seqcal_cli::report::MethodReport| r.ece(EceLevel::Sequence).unwrap_or(f64::NAN);
        let (rb, rd, eb, ed) = (r1(base), r1(de), e(base), e(de));
        effects.push(format!(
            "seed {seed}: R1 base {rb:.2} de {rd:.2} (Δ {:+.2}); seqECE base {eb:.4} de {ed:.4} (Δ {:+.4})",
            rd - rb,
            ed - eb
        ));
        if rd < rb - 0.5 || rd.is_nan() {
            failures.push(format!("(a) seed {seed}: DE ROUGE-1 {rd:.2} below base {rb:.2} - 0.5"));
        }
        if rd > rb {
            rouge_up += 1;
        }
        if ed <= eb {
            ece_down += 1;
        }
        let half = config.abstention.alphas.iter().position(|&a| a == 0.5).ok_or("α=0.5 not on grid")?;
        let zero = config.abstention.alphas.iter().position(|&a| a == 0.0).ok_or("α=0 not on grid")?;
        for r in &report.methods {
            for metric in QualityMetric::ALL {
                let (Some(rho), Some(curve)) = (r.rho(metric), r.curve(metric)) else { continue };
                if rho > 0.1 {
                    let (v0, v5) = (curve.values[zero], curve.values[half]);
                    if v5 < v0 {
                        failures.push(format!(
                            "(c) seed {seed} {} {metric}: ρ {rho:.3} but curve {v0:.2} → {v5:.2}",
                            r.method
                        ));
                    }
                }
            }
        }
    }
    for line in &effects {
        println!("      {line}");
    }
    if rouge_up < 2 {
        failures.push(format!("(a) DE ROUGE-1 above base in only {rouge_up}/3 seeds"));
    }
    if ece_down < 2 {
        failures.push(format!("(b) DE sequence ECE ≤ base in only {ece_down}/3 seeds"));
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(600) {
        failures.push(format!("runtime {:.0}s exceeds 600s", elapsed.as_secs_f64()));
    }
    if failures.is_empty() {
        Ok(format!(
            "DE R1 higher in {rouge_up}/3, seqECE lower in {ece_down}/3, {:.0}s",
            elapsed.as_secs_f64()
        ))
    } else {
        Err(failures.join("; "))
    }
}

// ---------------------------------------------------------------------------
// 8. Determinism

const SMOKE_CONFIG: &str = include_str!("../../../configs/smoke.toml");

fn collect_outputs(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["predictions", "reports"] {
        let mut entries: Vec<_> = fs::read_dir(root.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for path in entries {
            let name = format!("{sub}/{}", path.file_name().unwrap().to_string_lossy());
            out.push((name, fs::read(&path).unwrap()));
        }
    }
    out
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let mut config = RunConfig::parse(SMOKE_CONFIG).map_err(|e| e.to_string())?;
        config.apply(&Overrides { seed: None, out_dir: Some(dir.path().join(run)) });
        pipeline::run_all(&config).map_err(|e| e.to_string())?;
        runs.push(collect_outputs(&dir.path().join(run)));
    }
    ensure(runs[0].len() == runs[1].len() && !runs[0].is_empty(), || "file sets differ".into())?;
    for ((na, a), (nb, b)) in runs[0].iter().zip(&runs[1]) {
        ensure(na == nb && a == b, || format!("{na} differs between runs"))?;
    }
    Ok(format!("{} prediction and report files byte-identical", runs[0].len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("metric oracle suite", criterion_1),
        ("gradient suite", criterion_2),
        ("collapse/degeneracy suite", criterion_3),
        ("structural suites", criterion_4),
        ("beam oracle", criterion_5),
        ("calibrated-population check", criterion_6),
        ("desk-scale trend reproduction", criterion_7),
        ("determinism", criterion_8),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if only.is_some_and(|o| o != number) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {number}. {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {number}. {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
