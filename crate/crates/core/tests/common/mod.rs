//! Independent reference implementations shared by the property tests and the
//! acceptance target. Nothing here calls into the metric or backward code it
//! is used to check.

#![allow(dead_code)]

use std::sync::Arc;

use fusionrl_core::agents::QNetwork;
use fusionrl_core::fusion::{EncodedObservation, EncoderConfig, FusionMode, VisualInput, VisualShape, PAD_ID};
use fusionrl_core::nncore::{
    finite_difference_check, Conv2d, Embedding, GradCheckReport, GruCell, Linear, ParameterSet, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const METRIC_TOL: f64 = 1e-9;

// ---------------------------------------------------------------- metrics

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn same(a: &[String], i: usize, b: &[String], j: usize, n: usize) -> bool {
    (0..n).all(|k| a[i + k] == b[j + k])
}

/// Occurrences of the n-gram `a[i..i+n]` in `b`, by scanning every offset.
fn occurrences(a: &[String], i: usize, n: usize, b: &[String]) -> usize {
    if b.len() < n {
        return 0;
    }
    (0..=b.len() - n).filter(|&j| same(a, i, b, j, n)).count()
}

/// Clipped n-gram matches of `cand` against `refs` (max count over refs),
/// counted position by position: the k-th occurrence of a gram in the
/// candidate matches iff k <= its max reference count.
fn clipped_matches(cand: &[String], refs: &[Vec<String>], n: usize) -> usize {
    if cand.len() < n {
        return 0;
    }
    let mut matched = 0;
    for i in 0..=cand.len() - n {
        let kth = (0..=i).filter(|&p| same(cand, p, cand, i, n)).count();
        let allowed = refs.iter().map(|r| occurrences(cand, i, n, r)).max().unwrap_or(0);
        if kth <= allowed {
            matched += 1;
        }
    }
    matched
}

pub fn oracle_bleu(pairs: &[(Vec<String>, Vec<Vec<String>>)], max_n: usize) -> f64 {
    let mut c = 0usize;
    let mut r = 0usize;
    let mut num = vec![0usize; max_n];
    let mut den = vec![0usize; max_n];
    for (cand, refs) in pairs {
        c += cand.len();
        let mut best = refs[0].len();
        for rf in refs {
            let d = rf.len().abs_diff(cand.len());
            let bd = best.abs_diff(cand.len());
            if d < bd || (d == bd && rf.len() < best) {
                best = rf.len();
            }
        }
        r += best;
        for n in 1..=max_n {
            num[n - 1] += clipped_matches(cand, refs, n);
            den[n - 1] += if cand.len() >= n { cand.len() - n + 1 } else { 0 };
        }
    }
    if c == 0 || num.contains(&0) {
        return 0.0;
    }
    let mut prod = 1.0;
    for n in 0..max_n {
        prod *= num[n] as f64 / den[n] as f64;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    prod.powf(1.0 / max_n as f64) * bp
}

fn f_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn oracle_rouge_n(cand: &[String], refs: &[Vec<String>], n: usize) -> f64 {
    let mut best = 0.0f64;
    for rf in refs {
        if cand.len() < n || rf.len() < n {
            continue;
        }
        let overlap = clipped_matches(cand, std::slice::from_ref(rf), n) as f64;
        let p = overlap / (cand.len() - n + 1) as f64;
        let r = overlap / (rf.len() - n + 1) as f64;
        best = best.max(f_score(p, r));
    }
    best
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|o| o == *s))
}

/// Longest common subsequence by trying every subset of `a`.
pub fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 20, "exhaustive LCS is exponential");
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let size = mask.count_ones() as usize;
        if size <= best {
            continue;
        }
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if is_subsequence(&sub, b) {
            best = size;
        }
    }
    best
}

pub fn oracle_rouge_l(cand: &[String], refs: &[Vec<String>]) -> f64 {
    let mut best = 0.0f64;
    for rf in refs {
        if cand.is_empty() || rf.is_empty() {
            continue;
        }
        let l = oracle_lcs(cand, rf) as f64;
        best = best.max(f_score(l / cand.len() as f64, l / rf.len() as f64));
    }
    best
}

pub fn oracle_meteor(cand: &[String], refs: &[Vec<String>]) -> f64 {
    let mut best = 0.0f64;
    for rf in refs {
        let mut taken = vec![false; rf.len()];
        let mut align: Vec<Option<usize>> = Vec::new();
        for tok in cand {
            let mut hit = None;
            for j in 0..rf.len() {
                if !taken[j] && &rf[j] == tok {
                    taken[j] = true;
                    hit = Some(j);
                    break;
                }
            }
            align.push(hit);
        }
        let m = align.iter().filter(|a| a.is_some()).count();
        if m == 0 {
            continue;
        }
        let mut chunks = 0;
        for i in 0..align.len() {
            if let Some(j) = align[i] {
                let joined = i > 0 && align[i - 1].is_some_and(|pj| pj + 1 == j);
                if !joined {
                    chunks += 1;
                }
            }
        }
        let m = m as f64;
        let p = m / cand.len() as f64;
        let r = m / rf.len() as f64;
        let fmean = 10.0 * p * r / (r + 9.0 * p);
        let frag = chunks as f64 / m;
        best = best.max(fmean * (1.0 - 0.5 * frag * frag * frag));
    }
    best
}

/// `count` pairs over a `vocab`-word vocabulary with lengths 1..=15 and one
/// to three references each.
pub fn random_corpus(seed: u64, count: usize, vocab: usize) -> Vec<(Vec<String>, Vec<Vec<String>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        let len = rng.random_range(1..=15);
        (0..len).map(|_| format!("w{}", rng.random_range(0..vocab))).collect()
    };
    (0..count)
        .map(|_| {
            let cand = sentence(&mut rng);
            let nrefs = rng.random_range(1..=3);
            let refs = (0..nrefs).map(|_| sentence(&mut rng)).collect();
            (cand, refs)
        })
        .collect()
}

// ---------------------------------------------------------------- gradients

/// Scalar objective `sum(c * y) + 0.5 * sum(y^2)` with fixed random `c`, and
/// its gradient with respect to `y`.
pub struct ScalarHead {
    pub coeffs: Vec<f64>,
}

impl ScalarHead {
    pub fn new(len: usize, rng: &mut impl Rng) -> Self {
        ScalarHead {
            coeffs: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    pub fn value(&self, y: &Tensor) -> f64 {
        y.data().iter().zip(&self.coeffs).map(|(v, c)| c * v + 0.5 * v * v).sum()
    }

    pub fn grad(&self, y: &Tensor) -> Tensor {
        let g = y.data().iter().zip(&self.coeffs).map(|(v, c)| c + v).collect();
        Tensor::new(y.shape().to_vec(), g).unwrap()
    }
}

pub fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Worst of several reports.
pub fn worst(reports: impl IntoIterator<Item = GradCheckReport>) -> GradCheckReport {
    reports
        .into_iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("at least one report")
}

/// Finite-difference check of all parameters except the coordinates flagged
/// in `frozen` (same layout as `flat_values`).
pub fn check_params_masked(
    params: &ParameterSet,
    frozen: &[bool],
    mut loss: impl FnMut(&ParameterSet) -> f64,
) -> GradCheckReport {
    let all = params.flat_values();
    let grads = params.flat_grads();
    let live: Vec<usize> = (0..all.len()).filter(|&i| !frozen[i]).collect();
    let x: Vec<f64> = live.iter().map(|&i| all[i]).collect();
    let analytic: Vec<f64> = live.iter().map(|&i| grads[i]).collect();
    let mut scratch = params.clone();
    let mut full = all.clone();
    finite_difference_check(
        |v| {
            for (&i, &val) in live.iter().zip(v) {
                full[i] = val;
            }
            scratch.set_flat_values(&full).unwrap();
            loss(&scratch)
        },
        &x,
        &analytic,
        GRAD_TOL,
    )
}

fn no_frozen(params: &ParameterSet) -> Vec<bool> {
    vec![false; params.num_scalars()]
}

/// Marks row `row` of the parameter named `name` (a `[rows, cols]` table).
pub fn freeze_row(params: &ParameterSet, name: &str, row: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(params.num_scalars());
    for p in params.iter() {
        let cols = *p.value.shape().last().unwrap();
        for i in 0..p.value.len() {
            mask.push(p.name == name && i / cols == row);
        }
    }
    mask
}

pub fn gradcheck_linear(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (batch, din, dout) = (rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..7));
    let mut params = ParameterSet::new();
    let layer = Linear::new(&mut params, "lin", din, dout, &mut rng);
    let mut values = params.flat_values();
    values.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    params.set_flat_values(&values).unwrap();
    let x = random_tensor(vec![batch, din], &mut rng);
    let head = ScalarHead::new(batch * dout, &mut rng);

    let y = layer.forward(&params, &x).unwrap();
    params.zero_grad();
    let gx = layer.backward(&mut params, &x, &head.grad(&y)).unwrap();
    let p_report = check_params_masked(&params, &no_frozen(&params), |ps| head.value(&layer.forward(ps, &x).unwrap()));
    let x_report = finite_difference_check(
        |v| head.value(&layer.forward(&params, &Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap()).unwrap()),
        x.data(),
        gx.data(),
        GRAD_TOL,
    );
    worst([p_report, x_report])
}

pub fn gradcheck_conv2d(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = rng.random_range(1..3);
    let (ic, oc) = (rng.random_range(1..4), rng.random_range(1..4));
    let kernel = [1, 3][rng.random_range(0..2)];
    let padding = rng.random_range(0..=kernel / 2);
    let (h, w) = (rng.random_range(kernel..kernel + 4), rng.random_range(kernel..kernel + 4));
    let mut params = ParameterSet::new();
    let conv = Conv2d::new(&mut params, "conv", ic, oc, kernel, padding, &mut rng);
    let mut values = params.flat_values();
    values.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    params.set_flat_values(&values).unwrap();
    let x = random_tensor(vec![batch, ic, h, w], &mut rng);
    let out_len: usize = conv.output_shape(x.shape()).unwrap().iter().product();
    let head = ScalarHead::new(out_len, &mut rng);

    let y = conv.forward(&params, &x).unwrap();
    params.zero_grad();
    let gx = conv.backward(&mut params, &x, &head.grad(&y)).unwrap();
    let p_report = check_params_masked(&params, &no_frozen(&params), |ps| head.value(&conv.forward(ps, &x).unwrap()));
    let x_report = finite_difference_check(
        |v| head.value(&conv.forward(&params, &Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap()).unwrap()),
        x.data(),
        gx.data(),
        GRAD_TOL,
    );
    worst([p_report, x_report])
}

pub fn gradcheck_gru_step(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (batch, din, hidden) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
    let mut params = ParameterSet::new();
    let cell = GruCell::new(&mut params, "gru", din, hidden, &mut rng);
    let mut values = params.flat_values();
    values.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    params.set_flat_values(&values).unwrap();
    let x = random_tensor(vec![batch, din], &mut rng);
    let h0 = random_tensor(vec![batch, hidden], &mut rng);
    let head = ScalarHead::new(batch * hidden, &mut rng);

    let (h1, cache) = cell.step(&params, &x, &h0).unwrap();
    params.zero_grad();
    let (gx, gh) = cell.step_backward(&mut params, &cache, &head.grad(&h1)).unwrap();
    let p_report = check_params_masked(&params, &no_frozen(&params), |ps| head.value(&cell.step(ps, &x, &h0).unwrap().0));
    let x_report = finite_difference_check(
        |v| head.value(&cell.step(&params, &Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), &h0).unwrap().0),
        x.data(),
        gx.data(),
        GRAD_TOL,
    );
    let h_report = finite_difference_check(
        |v| head.value(&cell.step(&params, &x, &Tensor::new(h0.shape().to_vec(), v.to_vec()).unwrap()).unwrap().0),
        h0.data(),
        gh.data(),
        GRAD_TOL,
    );
    worst([p_report, x_report, h_report])
}

pub fn gradcheck_embedding(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (vocab, dim) = (rng.random_range(2..9), rng.random_range(1..6));
    let n = rng.random_range(1..10);
    let mut params = ParameterSet::new();
    let emb = Embedding::new(&mut params, "emb", vocab, dim, Some(0), &mut rng);
    // repeated ids and the pad id both appear
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
    let head = ScalarHead::new(n * dim, &mut rng);

    let y = emb.forward(&params, &ids).unwrap();
    params.zero_grad();
    emb.backward(&mut params, &ids, &head.grad(&y)).unwrap();
    let frozen = freeze_row(&params, "emb.table", 0);
    check_params_masked(&params, &frozen, |ps| head.value(&emb.forward(ps, &ids).unwrap()))
}

/// Full Q-network (visual branch, embedding + GRU text branch, fusion, ReLU
/// head) under a scalar objective. `image` selects the convolutional branch.
pub fn gradcheck_fused(seed: u64, image: bool) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = rng.random_range(3..8);
    let len = rng.random_range(2..5);
    let config = EncoderConfig {
        d_visual: rng.random_range(2..5),
        d_text: rng.random_range(2..5),
        embed_dim: rng.random_range(2..4),
        max_caption_len: len,
        visual_hidden: rng.random_range(2..5),
        mode: FusionMode::Multimodal,
    };
    let (shape, make_visual): (VisualShape, Box<dyn Fn(&mut ChaCha8Rng) -> VisualInput>) = if image {
        (
            VisualShape::Image { height: 4, width: 4 },
            Box::new(|r| VisualInput::Image(Arc::new(random_tensor(vec![3, 4, 4], r)))),
        )
    } else {
        let dim = rng.random_range(2..6);
        (
            VisualShape::Features(dim),
            Box::new(move |r| VisualInput::Features(Arc::new((0..dim).map(|_| r.random_range(-1.0..1.0)).collect()))),
        )
    };
    let actions = rng.random_range(2..4);
    let mut params = ParameterSet::new();
    let net = QNetwork::new(&mut params, &config, shape, vocab, actions, &mut rng).unwrap();
    let mut values = params.flat_values();
    values.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    params.set_flat_values(&values).unwrap();
    let batch = rng.random_range(1..4);
    let mut shared_caption: Option<Arc<Vec<usize>>> = None;
    let obs: Vec<EncodedObservation> = (0..batch)
        .map(|i| {
            let ids: Arc<Vec<usize>> = match (&shared_caption, i % 2) {
                // every other sample reuses a caption to exercise batch dedup
                (Some(c), 1) => c.clone(),
                _ => {
                    let mut ids: Vec<usize> = (0..len).map(|_| rng.random_range(1..vocab)).collect();
                    ids[len - 1] = PAD_ID;
                    Arc::new(ids)
                }
            };
            shared_caption.get_or_insert_with(|| ids.clone());
            EncodedObservation {
                visual: make_visual(&mut rng),
                caption_ids: ids,
            }
        })
        .collect();
    let refs: Vec<&EncodedObservation> = obs.iter().collect();
    let head = ScalarHead::new(batch * actions, &mut rng);

    let (q, cache) = net.forward(&params, &refs).unwrap();
    params.zero_grad();
    net.backward(&mut params, &cache, &head.grad(&q)).unwrap();
    let frozen = freeze_row(&params, "text.embedding.table", PAD_ID);
    check_params_masked(&params, &frozen, |ps| head.value(&net.forward(ps, &refs).unwrap().0))
}

// ---------------------------------------------------------------- metric checks

use fusionrl_core::textmetrics::{
    bleu_corpus, meteor, rouge_l, rouge_n, BleuOptions, CaptionPair, TokenSequence,
};

pub fn seq(tokens: &[String]) -> TokenSequence {
    TokenSequence::from_tokens(tokens.iter().cloned())
}

pub fn to_pairs(corpus: &[(Vec<String>, Vec<Vec<String>>)]) -> Vec<CaptionPair> {
    corpus
        .iter()
        .map(|(c, rs)| CaptionPair::new(seq(c), rs.iter().map(|r| seq(r)).collect()))
        .collect()
}

/// Largest absolute difference between the library metrics and the oracles
/// over one random corpus, per metric name.
pub fn metric_oracle_diffs(seed: u64, count: usize, vocab: usize) -> Vec<(&'static str, f64)> {
    let corpus = random_corpus(seed, count, vocab);
    let pairs = to_pairs(&corpus);
    let mut out = Vec::new();
    for max_n in 1..=4 {
        let got = bleu_corpus(&pairs, BleuOptions { max_n, smoothing: false }).unwrap();
        let name = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4"][max_n - 1];
        out.push((name, (got - oracle_bleu(&corpus, max_n)).abs()));
    }
    let mut r1 = 0.0f64;
    let mut r2 = 0.0f64;
    let mut rl = 0.0f64;
    let mut me = 0.0f64;
    for ((cand, refs), pair) in corpus.iter().zip(&pairs) {
        r1 = r1.max((rouge_n(&pair.candidate, &pair.references, 1) - oracle_rouge_n(cand, refs, 1)).abs());
        r2 = r2.max((rouge_n(&pair.candidate, &pair.references, 2) - oracle_rouge_n(cand, refs, 2)).abs());
        rl = rl.max((rouge_l(&pair.candidate, &pair.references) - oracle_rouge_l(cand, refs)).abs());
        me = me.max((meteor(&pair.candidate, &pair.references) - oracle_meteor(cand, refs)).abs());
    }
    out.extend([("ROUGE-1", r1), ("ROUGE-2", r2), ("ROUGE-L", rl), ("METEOR", me)]);
    out
}

/// Worked examples: (description, library value, expected value).
pub fn hand_examples() -> Vec<(&'static str, f64, f64)> {
    let p = |c: &str, r: &str| CaptionPair::new(seq(&words(c)), vec![seq(&words(r))]);
    let bleu2 = bleu_corpus(
        &[p("the robot", "the robot moves")],
        BleuOptions { max_n: 2, smoothing: false },
    )
    .unwrap();
    let m1 = p("red block", "red block");
    let m2 = p("the robot moves", "the robot turns");
    vec![
        ("BLEU-2 brevity", bleu2, (-0.5f64).exp()),
        ("METEOR identical pair", meteor(&m1.candidate, &m1.references), 0.9375),
        ("METEOR one substitution", meteor(&m2.candidate, &m2.references), 0.625),
    ]
}

// ---------------------------------------------------------------- aliased env oracles

use fusionrl_core::dataset::{caption_for_action, nearest_prototype};
use fusionrl_core::env::make_aliased_env;

/// Best expected step accuracy over every deterministic map from observation
/// class (k action prototypes plus the aliased one) to action, when classes
/// are recognised exactly.
pub fn enumerate_visual_policies(k: usize, q: f64) -> f64 {
    let classes = k + 1;
    let mut best = 0.0f64;
    for code in 0..k.pow(classes as u32) {
        let policy: Vec<usize> = (0..classes).map(|c| code / k.pow(c as u32) % k).collect();
        let mut acc = 0.0;
        for truth in 0..k {
            // clear view of `truth`
            if policy[truth] == truth {
                acc += (1.0 - q) / k as f64;
            }
            // aliased view while the truth is `truth`
            if policy[k] == truth {
                acc += q / k as f64;
            }
        }
        best = best.max(acc);
    }
    best
}

/// Step accuracies of the nearest-prototype visual policy (fixed guess on the
/// aliased prototype) and of caption lookup, played through the environment.
pub fn oracle_policy_accuracies(k: usize, q: f64, steps: usize, seed: u64) -> (f64, f64) {
    let episodes = steps / 20;
    let (mut env, synth) = make_aliased_env(k, q, 20, episodes, seed, 16).unwrap();
    let lookup: Vec<String> = (0..k).map(caption_for_action).collect();
    let mut visual_hits = 0usize;
    let mut caption_hits = 0usize;
    let mut total = 0usize;
    for _ in 0..episodes {
        let mut obs = Some(env.reset().unwrap());
        while let Some(o) = obs {
            let VisualInput::Features(v) = &o.visual else { panic!("feature env") };
            let class = nearest_prototype(&synth.prototypes, v);
            let visual_guess = if class == k { 0 } else { class };
            let caption_guess = lookup.iter().position(|c| **c == *o.caption).expect("known caption");
            let truth = env.current_ground_truth().unwrap();
            visual_hits += usize::from(visual_guess == truth);
            let (next, outcome) = env.step(caption_guess).unwrap();
            caption_hits += usize::from(outcome.correct);
            total += 1;
            obs = next;
        }
    }
    (visual_hits as f64 / total as f64, caption_hits as f64 / total as f64)
}
