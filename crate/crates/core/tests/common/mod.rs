#![allow(dead_code)]

use longtail::arch::{Genotype, LayerGene, OpSpec, SeqShape};
use longtail::hpo::{
    optimize, Config, HpoOptions, Method, ParamKind, ParamSpec, SearchSpaceSpec, TrialBudget,
    TrialContext, TrialRecord,
};
use longtail::nets::{
    ArchConfig, Architecture, EncoderKind, InputShape, ModelSpec, ParamStore, SearchedArch,
};
use longtail::synthgen::{generate_scenarios, ScenarioDataset, UniverseConfig};

/// One small scenario: profile dim 3, vocab 5, sequences of length 5.
pub fn tiny_dataset(seed: u64) -> ScenarioDataset {
    let cfg = UniverseConfig {
        profile_dim: 3,
        vocab_size: 5,
        max_seq_len: 5,
        min_seq_len: 2,
        map_width: 4,
        ..UniverseConfig::uniform(1, 60)
    };
    generate_scenarios(&cfg, seed).unwrap().remove(0)
}

pub fn tiny_input() -> InputShape {
    InputShape {
        profile_dim: 3,
        vocab_size: 5,
        seq_len: 5,
    }
}

pub fn tiny_predesigned(kind: EncoderKind) -> ModelSpec {
    let arch = ArchConfig {
        encoder_kind: kind,
        n_encoder_layers: 2,
        hidden_dim: 4,
        intermediate_dim: 3,
        n_heads: 2,
        profile_mlp_dims: vec![4],
        head_mlp_dims: vec![3],
        embed_dim: 3,
    };
    ModelSpec::new(tiny_input(), Architecture::Predesigned(arch))
}

/// Every candidate operation kind at width 4.
pub fn tiny_ops() -> Vec<OpSpec> {
    vec![
        OpSpec::conv(3, 4),
        OpSpec::dilated_conv(3, 2, 4),
        OpSpec::avg_pool(3, 4),
        OpSpec::max_pool(3, 4),
        OpSpec::recurrent(4),
        OpSpec::attention(4, 2),
    ]
}

pub fn gene(input: usize, op: usize, residual: &[usize]) -> LayerGene {
    LayerGene {
        input,
        op,
        residual: residual.to_vec(),
    }
}

pub fn tiny_searched(layers: Vec<LayerGene>) -> ModelSpec {
    ModelSpec::new(
        tiny_input(),
        Architecture::Searched(SearchedArch {
            genotype: Genotype { layers },
            ops: tiny_ops(),
            embed_dim: 4,
            profile_mlp_dims: vec![3],
            head_mlp_dims: vec![],
        }),
    )
}

/// Largest relative error between `analytic` and central differences of
/// `f` over every entry of every array in `params`. Denominators are
/// floored at 1e-6 so roundoff on vanishing gradients is not amplified.
pub fn max_rel_error(
    params: &ParamStore,
    analytic: &ParamStore,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> (f64, String) {
    let eps = 1e-5;
    let mut worst = (0.0, String::new());
    for name in params.names().cloned().collect::<Vec<_>>() {
        let n = params.get(&name).unwrap().len();
        for i in 0..n {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += eps;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= eps;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
            let a = analytic.get(&name).map_or(0.0, |g| g.data()[i]);
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / scale;
            if rel > worst.0 {
                worst = (
                    rel,
                    format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}"),
                );
            }
        }
    }
    worst
}

/// Replays a fixed sequence of noise vectors, one per call.
pub struct NoiseTape {
    pub draws: Vec<Vec<f64>>,
    pub next: usize,
}

impl NoiseTape {
    pub fn new(draws: Vec<Vec<f64>>) -> Self {
        Self { draws, next: 0 }
    }

    pub fn take(&mut self, n: usize) -> Vec<f64> {
        let v = self.draws[self.next].clone();
        assert_eq!(v.len(), n);
        self.next += 1;
        v
    }
}

/// Pairwise concordance: P(score_pos > score_neg) + 0.5 P(tie).
pub fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1.0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0.0 {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / den
}

// ---- independent FLOPs counter ----
//
// Walks the searched encoder node by node and tallies primitive operations
// with explicit loops: a multiply-accumulate is a multiply plus an add (2),
// every other elementwise step is 1.

fn walk_dense(c_in: usize, c_out: usize) -> u64 {
    let mut n = 0;
    for _ in 0..c_out {
        for _ in 0..c_in {
            n += 2;
        }
        n += 1; // bias
    }
    n
}

fn walk_op(op: &OpSpec, t: usize) -> u64 {
    use longtail::arch::OpKind;
    let mut n = 0u64;
    match op.kind {
        OpKind::Conv1d | OpKind::DilatedConv1d => {
            for _ in 0..t {
                for _ in 0..op.channels_out {
                    for _ in 0..op.kernel {
                        for _ in 0..op.channels_in {
                            n += 2;
                        }
                    }
                    n += 1;
                }
            }
        }
        OpKind::AvgPool1d | OpKind::MaxPool1d => {
            for _ in 0..t {
                for _ in 0..op.channels_in {
                    for _ in 0..op.kernel {
                        n += 1;
                    }
                }
            }
        }
        OpKind::Recurrent => {
            let (d, h) = (op.channels_in, op.channels_out);
            for _ in 0..t {
                for _ in 0..4 * h {
                    for _ in 0..d + h {
                        n += 2;
                    }
                    n += 1; // bias
                    n += 1; // gate nonlinearity
                }
                for _ in 0..h {
                    n += 3; // f*c + i*g
                    n += 1; // tanh(c)
                    n += 1; // o * tanh(c)
                }
            }
        }
        OpKind::SelfAttention => {
            let d = op.channels_in;
            let dh = d / op.heads;
            for _ in 0..4 {
                for _ in 0..t {
                    n += walk_dense(d, d);
                }
            }
            for _ in 0..op.heads {
                for _ in 0..t {
                    for _ in 0..t {
                        n += 2 * dh as u64; // score dot product
                        n += 1; // scale
                        n += 3; // exp, sum, divide
                        n += 2 * dh as u64; // weighted values
                    }
                }
            }
        }
    }
    n
}

/// Node-by-node FLOPs of a searched encoder: each layer's op, each residual
/// addition, then the attentive sum over all layer outputs.
pub fn walk_genotype(g: &Genotype, ops: &[OpSpec], shape: SeqShape) -> u64 {
    enum Node {
        Op(usize),
        Add,
        Aggregate(usize),
    }
    let mut nodes = Vec::new();
    for gene in &g.layers {
        nodes.push(Node::Op(gene.op));
        for _ in &gene.residual {
            nodes.push(Node::Add);
        }
    }
    nodes.push(Node::Aggregate(g.layers.len()));
    let elems = shape.seq_len * shape.dim;
    nodes
        .iter()
        .map(|node| match *node {
            Node::Op(m) => walk_op(&ops[m], shape.seq_len),
            Node::Add => elems as u64,
            Node::Aggregate(k) => {
                let mut n = 0;
                for _ in 0..k {
                    n += 3; // exp, sum, divide per score
                }
                for _ in 0..elems {
                    n += k as u64; // scale each output
                    n += k as u64 - 1; // accumulate
                }
                n
            }
        })
        .sum()
}

/// Dense `[c_in -> c_out]` layer applied at every one of `t` positions.
pub fn walk_dense_seq(c_in: usize, c_out: usize, t: usize) -> u64 {
    (0..t).map(|_| walk_dense(c_in, c_out)).sum()
}

pub fn random_genotype(rng: &mut impl rand::Rng, n_layers: usize, n_ops: usize) -> Genotype {
    let layers = (1..=n_layers)
        .map(|l| LayerGene {
            input: rng.random_range(0..l),
            op: rng.random_range(0..n_ops),
            residual: (0..l).filter(|_| rng.random_bool(0.5)).collect(),
        })
        .collect();
    Genotype { layers }
}

// ---- exhaustive constrained selection ----

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// Every genotype of a space with `n_layers` layers and `n_ops` ops, each
/// with its joint log-probability under `aw`.
pub fn enumerate_genotypes(
    aw: &longtail::budgetnas::ArchWeights,
    n_layers: usize,
    n_ops: usize,
) -> Vec<(Genotype, f64)> {
    use longtail::budgetnas::ArchWeights;
    let mut out: Vec<(Vec<LayerGene>, f64)> = vec![(Vec::new(), 0.0)];
    for l in 1..=n_layers {
        let lin = log_softmax(aw.logits_of(&ArchWeights::in_key(l)));
        let lop = log_softmax(aw.logits_of(&ArchWeights::op_key(l)));
        let lres: Vec<Vec<f64>> = (0..l)
            .map(|j| log_softmax(aw.logits_of(&ArchWeights::res_key(l, j))))
            .collect();
        let mut next = Vec::new();
        for (prefix, lp) in &out {
            for input in 0..l {
                for op in 0..n_ops {
                    for mask in 0u32..(1 << l) {
                        let residual: Vec<usize> = (0..l).filter(|j| mask >> j & 1 == 1).collect();
                        let edge_lp: f64 = (0..l).map(|j| lres[j][(mask >> j & 1) as usize]).sum();
                        let mut genes = prefix.clone();
                        genes.push(LayerGene {
                            input,
                            op,
                            residual,
                        });
                        next.push((genes, lp + lin[input] + lop[op] + edge_lp));
                    }
                }
            }
        }
        out = next;
    }
    out.into_iter()
        .map(|(layers, lp)| (Genotype { layers }, lp))
        .collect()
}

// ---- search helpers shared by the module tests and the acceptance run ----

/// Largest gap between empirical argmax frequencies of `n` Gumbel draws
/// and `softmax(logits)`.
pub fn gumbel_law_gap(logits: &[f64], n: usize, seed: u64) -> f64 {
    let mut rng = longtail::rng::rng_for(seed, &[0x9a]);
    let mut counts = vec![0usize; logits.len()];
    for _ in 0..n {
        let (i, _) = longtail::budgetnas::gumbel_sample(logits, 1.0, &mut rng);
        counts[i] += 1;
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|o| (o - m).exp()).sum();
    counts
        .iter()
        .zip(logits)
        .map(|(&c, o)| (c as f64 / n as f64 - (o - m).exp() / z).abs())
        .fold(0.0, f64::max)
}

/// Two-layer, three-op toy search space at width 4, sequence length 6.
pub fn toy_space() -> longtail::budgetnas::SpaceSpec {
    longtail::budgetnas::SpaceSpec::new(
        2,
        vec![
            OpSpec::conv(3, 4),
            OpSpec::avg_pool(3, 4),
            OpSpec::attention(4, 2),
        ],
    )
    .unwrap()
}

pub fn toy_shape() -> SeqShape {
    SeqShape { seq_len: 6, dim: 4 }
}

pub fn randomize_logits(
    aw: &mut longtail::budgetnas::ArchWeights,
    rng: &mut impl rand::Rng,
    scale: f64,
) {
    for (_, m) in aw.logits.iter_mut() {
        for x in m.data_mut() {
            *x = rng.random_range(-scale..scale);
        }
    }
}

/// Largest difference between the supernet's straight-through output and
/// the extracted sub-network's plain forward, over `draws` random samples.
pub fn straight_through_gap(draws: usize) -> f64 {
    use longtail::budgetnas::{supernet_forward, SpaceSpec, Supernet};
    use longtail::nets::{predict_batch, Batch, Provenance};
    use rand::Rng;
    let ds = tiny_dataset(12);
    let rows: Vec<usize> = (0..16).collect();
    let batch = Batch::from_rows(&ds, &rows);
    let mut rng = longtail::rng::rng_for(5, &[0x57]);
    let mut worst: f64 = 0.0;
    for d in 0..draws {
        let space = SpaceSpec::new(1 + d % 3, SpaceSpec::default_candidates(4, 2)).unwrap();
        let mut net = Supernet::new(space, tiny_input(), vec![3], vec![3], d as u64).unwrap();
        randomize_logits(&mut net.arch, &mut rng, 2.0);
        let tau = rng.random_range(0.1..5.0);
        let pass = supernet_forward(&net, &batch, tau, &mut rng).unwrap();
        let sub = net
            .extract(&pass.genotype(&net.space), Provenance::new("probe", 0, 0))
            .unwrap();
        let plain = predict_batch(&sub, &batch).unwrap();
        for (a, b) in pass.prob_values().iter().zip(&plain) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Number of (logit setting, budget) cases where `derive_genotype`
/// disagrees with exhaustive enumeration on the toy space.
pub fn exhaustive_mismatches(settings: usize, seed: u64) -> usize {
    use longtail::budgetnas::{derive_genotype, ArchWeights};
    use longtail::flopsmeter::genotype_flops;
    let space = toy_space();
    let shape = toy_shape();
    let mut rng = longtail::rng::rng_for(seed, &[0xe7]);
    let mut bad = 0;
    for _ in 0..settings {
        let mut aw = ArchWeights::uniform(&space, 1.0);
        randomize_logits(&mut aw, &mut rng, 2.0);
        let all: Vec<(Genotype, f64, u64)> =
            enumerate_genotypes(&aw, space.n_layers, space.ops.len())
                .into_iter()
                .map(|(g, lp)| {
                    let f = genotype_flops(&g, &space.ops, shape).unwrap().total;
                    (g, lp, f)
                })
                .collect();
        let mut costs: Vec<u64> = all.iter().map(|x| x.2).collect();
        costs.sort();
        let budgets = [costs[0], costs[costs.len() / 2], costs[costs.len() - 1]];
        for budget in budgets {
            let want = all
                .iter()
                .filter(|x| x.2 <= budget)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.2.cmp(&a.2)))
                .unwrap();
            let got = derive_genotype(&aw, &space, budget, shape).unwrap();
            if got != want.0 {
                bad += 1;
            }
        }
    }
    bad
}

/// Scenario used for the search sweeps: 400 rows, sequences of length 6.
pub fn toy_scenario(seed: u64) -> ScenarioDataset {
    let cfg = UniverseConfig {
        profile_dim: 3,
        vocab_size: 5,
        max_seq_len: 6,
        min_seq_len: 3,
        map_width: 4,
        noise_rate: 0.0,
        ..UniverseConfig::uniform(1, 400)
    };
    generate_scenarios(&cfg, seed).unwrap().remove(0)
}

/// Derived-genotype FLOPs (unconstrained budget) averaged over `seeds`
/// for each penalty weight multiple in `multiples` of the auto-calibrated
/// weight.
pub fn lambda_sweep(seeds: &[u64], multiples: &[f64]) -> Vec<f64> {
    use longtail::budgetnas::{derive_genotype, run_search, NasConfig, Supernet};
    use longtail::flopsmeter::{genotype_flops, space_max_flops};
    let space = toy_space();
    let shape = toy_shape();
    let budget = space_max_flops(space.n_layers, &space.ops, shape).unwrap();
    let mut sums = vec![0.0; multiples.len()];
    for &seed in seeds {
        let ds = toy_scenario(seed);
        let input = longtail::nets::InputShape::of(&ds);
        let net = Supernet::new(space.clone(), input, vec![4], vec![], seed).unwrap();
        let base = NasConfig {
            n_layers: space.n_layers,
            delta: 0.0,
            epochs: 8,
            batch_size: 32,
            arch_lr: 0.05,
            ..NasConfig::default()
        };
        let (_, h) = run_search(
            net.clone(),
            &ds,
            None,
            &NasConfig {
                epochs: 1,
                ..base.clone()
            },
            seed,
        )
        .unwrap();
        for (i, &k) in multiples.iter().enumerate() {
            let cfg = NasConfig {
                lambda: Some(k * h.lambda),
                ..base.clone()
            };
            let (searched, _) = run_search(net.clone(), &ds, None, &cfg, seed).unwrap();
            let g = derive_genotype(&searched.arch, &space, budget, shape).unwrap();
            sums[i] += genotype_flops(&g, &space.ops, shape).unwrap().total as f64;
        }
    }
    sums.iter().map(|s| s / seeds.len() as f64).collect()
}

// ---- gradient checks ----

/// Relative error of the distillation-loss parameter gradient of `spec`
/// against central differences on a 4-row batch.
pub fn spec_grad_error(spec: &ModelSpec) -> (f64, String) {
    use longtail::nets::{init_params, loss_and_grads, Batch, LossSpec};
    let ds = tiny_dataset(3);
    let params = init_params(spec, 11).unwrap();
    let rows: Vec<usize> = (0..4).collect();
    let batch = Batch::from_rows(&ds, &rows).with_soft_targets(vec![0.2, 0.9, 0.6, 0.4]);
    let loss = LossSpec::Distill { delta: 0.7 };
    let (_, grads) = loss_and_grads(spec, &params, &batch, loss).unwrap();
    max_rel_error(&params, &grads, |p| {
        loss_and_grads(spec, p, &batch, loss).unwrap().0
    })
}

/// Every encoder kind plus searched genotypes covering all op kinds.
pub fn gradient_specs() -> Vec<(&'static str, ModelSpec)> {
    vec![
        (
            "recurrent encoder",
            tiny_predesigned(EncoderKind::Recurrent),
        ),
        (
            "attention encoder",
            tiny_predesigned(EncoderKind::Attention),
        ),
        (
            "searched conv/pool",
            tiny_searched(vec![
                gene(0, 0, &[]),
                gene(1, 1, &[0]),
                gene(1, 2, &[0, 2]),
                gene(3, 3, &[1]),
            ]),
        ),
        (
            "searched recurrent/attention",
            tiny_searched(vec![gene(0, 4, &[0]), gene(0, 5, &[1])]),
        ),
    ]
}

pub fn tiny_supernet() -> longtail::budgetnas::Supernet {
    use longtail::budgetnas::{SpaceSpec, Supernet};
    let space = SpaceSpec::new(
        2,
        vec![
            OpSpec::conv(3, 4),
            OpSpec::avg_pool(3, 4),
            OpSpec::attention(4, 2),
        ],
    )
    .unwrap();
    let mut net = Supernet::new(space, tiny_input(), vec![3], vec![], 5).unwrap();
    randomize_logits(&mut net.arch, &mut longtail::rng::rng_for(9, &[]), 1.0);
    net
}

/// Arch-logit gradient of one sampled supernet pass against central
/// differences of the same pass with the sample frozen.
pub fn supernet_logit_grad_error(seed: u64) -> (f64, String) {
    use longtail::budgetnas::{gumbel_noise, supernet_forward_frozen, supernet_forward_with_noise};
    use longtail::nets::{graph::BceTerm, Batch};
    let ds = tiny_dataset(4);
    let batch = Batch::from_rows(&ds, &[0, 1, 2, 3, 4]);
    let tau = 0.7;
    let mut net = tiny_supernet();
    let mut rng = longtail::rng::rng_for(seed, &[1]);
    let draws: Vec<Vec<f64>> = net
        .space
        .decision_sizes()
        .iter()
        .map(|&n| gumbel_noise(&mut rng, n))
        .collect();
    let mut tape = NoiseTape::new(draws.clone());
    let mut pass = supernet_forward_with_noise(&net, &batch, tau, &mut |n| tape.take(n)).unwrap();
    let frozen = pass.frozen();
    let terms = vec![BceTerm {
        targets: batch.labels.clone(),
        weight: 1.0,
    }];
    let l = pass.graph.bce(pass.probs, terms.clone());
    let grads = pass.graph.backward(l);
    let mut arch_grads = ParamStore::new();
    for (k, v) in pass.graph.param_grads(&grads) {
        if k.starts_with("arch.") {
            arch_grads.insert(k, v);
        }
    }
    let logits = net.arch.logits.clone();
    max_rel_error(&logits, &arch_grads, |p| {
        net.arch.logits = p.clone();
        let mut tape = NoiseTape::new(draws.clone());
        let mut pass =
            supernet_forward_frozen(&net, &batch, tau, &mut |n| tape.take(n), &frozen).unwrap();
        let l = pass.graph.bce(pass.probs, terms.clone());
        pass.graph.value(l).scalar_value()
    })
}

// ---- 2-D quadratic for the optimizer ----

/// Optimum of the test quadratic on the plane `[-1, 1]^2`.
pub const OPT: (f64, f64) = (0.3, -0.45);

pub fn plane() -> SearchSpaceSpec {
    let real = |name: &str| ParamSpec {
        name: name.into(),
        kind: ParamKind::Uniform {
            low: -1.0,
            high: 1.0,
        },
    };
    SearchSpaceSpec {
        params: vec![real("x"), real("y")],
    }
}

pub fn neg_sq_dist(c: &Config) -> f64 {
    let x = c["x"].as_f64().unwrap();
    let y = c["y"].as_f64().unwrap();
    -((x - OPT.0).powi(2) + (y - OPT.1).powi(2))
}

pub fn quadratic_run(method: Method, seed: u64, trials: usize) -> (TrialRecord, Vec<TrialRecord>) {
    let f = |c: &Config, _: &mut TrialContext| Ok(neg_sq_dist(c));
    let budget = TrialBudget {
        max_trials: trials,
        ..TrialBudget::default()
    };
    let opts = HpoOptions {
        method,
        seed,
        early_stopping: false,
        ..HpoOptions::default()
    };
    optimize(&f, &plane(), &budget, &opts).unwrap()
}
