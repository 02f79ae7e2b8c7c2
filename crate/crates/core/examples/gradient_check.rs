// Central finite differences against reverse-mode gradients for every loss
// term, composed through the encoder, regression and reconstruction heads.

use gsat::hypersphere::Hypersphere;
use gsat::losses::{objective, BatchRows, LossMode, LossWeights};
use gsat::nn::{Graph, Mode, NetworkConfig, ParamGroup, Tensor, TravNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Magnitude below which errors are measured in absolute terms.
pub const FLOOR: f64 = 1e-3;

pub const TERMS: [&str; 4] = ["anomaly", "recon", "regression", "total"];

/// Worst relative error per loss term over all head parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub max_rel_err: [f64; 4],
    pub checked: usize,
    pub skipped: usize,
}

struct Case {
    features: Tensor,
    rows: BatchRows,
    sphere: Hypersphere,
}

fn case(seed: u64, net: &TravNet) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 24;
    let dim = net.config.cell_feat_dim;
    let features = Tensor::new(vec![n, dim], (0..n * dim).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap();
    let positive: Vec<usize> = (0..8).collect();
    let targets = positive.iter().map(|_| rng.gen_range(0.05..0.95)).collect();
    let unlabeled: Vec<usize> = (8..n).collect();

    // place the sphere so the unlabeled rows split into both sets
    let z = latents(net, &features);
    let k = net.config.latent_dim;
    let center: Vec<f64> = (0..k).map(|c| positive.iter().map(|&r| z[r * k + c]).sum::<f64>() / 8.0).collect();
    let mut d: Vec<f64> =
        unlabeled.iter().map(|&r| (0..k).map(|c| (z[r * k + c] - center[c]).powi(2)).sum::<f64>().sqrt()).collect();
    d.sort_by(f64::total_cmp);
    let radius = 0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2]);
    let sphere = Hypersphere::new(center, radius, 0.5, 5).unwrap();
    Case { features, rows: BatchRows { positive, targets, unlabeled }, sphere }
}

fn latents(net: &TravNet, features: &Tensor) -> Vec<f64> {
    let mut g = Graph::new();
    let x = g.input(features.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = net.head_forward(&mut g, x, &mut Mode::Train(&mut rng), &mut Vec::new()).unwrap();
    g.value(out.z).data.clone()
}

/// Loss term values, the graph, and a fingerprint of every discrete choice
/// (ReLU kinks, unlabeled split) made along the way.
fn evaluate(net: &TravNet, c: &Case, term: usize, backward: bool) -> (f64, Graph, Vec<u32>) {
    let mut g = Graph::new();
    let x = g.input(c.features.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = net.head_forward(&mut g, x, &mut Mode::Train(&mut rng), &mut Vec::new()).unwrap();
    let obj = objective(&mut g, &out, x, &c.rows, &c.sphere, LossMode::NormalAnomalous, &LossWeights::default()).unwrap();
    let node = [obj.nodes.anomaly, obj.nodes.recon, obj.nodes.regression, obj.nodes.total][term];
    let value = g.value(node).item();
    if backward {
        g.backward(node).unwrap();
    }
    let mut pattern = g.kink_pattern();
    pattern.extend([obj.n_normal as u32, obj.n_anomalous as u32]);
    (value, g, pattern)
}

pub fn check_seed(seed: u64) -> GradReport {
    let cfg = NetworkConfig { init_seed: seed, dropout_rate: 0.2, ..Default::default() };
    let net = TravNet::new(cfg).unwrap();
    let c = case(seed, &net);
    let ids: Vec<_> = [ParamGroup::Encoder, ParamGroup::Regression, ParamGroup::Reconstruction]
        .iter()
        .flat_map(|grp| net.params.group_ids(*grp))
        .collect();
    let h = 1e-4;
    let mut report = GradReport::default();
    for term in 0..TERMS.len() {
        let (_, g, base) = evaluate(&net, &c, term, true);
        let mut store = net.params.clone();
        store.zero_grads();
        g.accumulate_param_grads(&mut store);
        for &id in &ids {
            let analytic = store.get(id).grad.clone().unwrap_or_else(|| vec![0.0; store.get(id).value.len()]);
            for (k, a) in analytic.iter().enumerate() {
                let mut plus = net.clone();
                plus.params.get_mut(id).value.data[k] += h;
                let mut minus = net.clone();
                minus.params.get_mut(id).value.data[k] -= h;
                let (lp, _, pp) = evaluate(&plus, &c, term, false);
                let (lm, _, pm) = evaluate(&minus, &c, term, false);
                if pp != base || pm != base {
                    report.skipped += 1;
                    continue;
                }
                let num = (lp - lm) / (2.0 * h);
                let err = (num - a).abs() / num.abs().max(a.abs()).max(FLOOR);
                report.max_rel_err[term] = report.max_rel_err[term].max(err);
                report.checked += 1;
            }
        }
    }
    report
}

pub fn run_example() -> Vec<GradReport> {
    let reports: Vec<GradReport> = (0..20).map(check_seed).collect();
    for (i, name) in TERMS.iter().enumerate() {
        let worst = reports.iter().map(|r| r.max_rel_err[i]).fold(0.0, f64::max);
        println!("{name:>10}: max relative error {worst:.2e}");
    }
    let checked: usize = reports.iter().map(|r| r.checked).sum();
    let skipped: usize = reports.iter().map(|r| r.skipped).sum();
    println!("{checked} partial derivatives checked, {skipped} skipped at kinks");
    reports
}

#[allow(dead_code)]
fn main() {
    run_example();
}
