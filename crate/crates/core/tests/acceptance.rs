//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p msdc-core --test acceptance` runs everything; trailing
//! numbers (`-- 4 5`) select criteria. Failed criteria are reported but only
//! change the exit status when `MSDC_ACCEPTANCE_STRICT=1`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::function::erf::erf;

use msdc_core::ablation::{sign_test, AblationSpec};
use msdc_core::checkpoint;
use msdc_core::crf::{log_partition, loss_crf, sequence_score, viterbi, CrfParams, EmissionMode};
use msdc_core::dataset::{export_house, load_house, parse_channel_file, LoadOptions};
use msdc_core::metrics::{self, DEFAULT_PERIOD_SAMPLES};
use msdc_core::network::{backward, evaluate_loss, LossKind, Architecture, DualCnn, NetworkConfig, Objective};
use msdc_core::signal::{PowerSeries, WindowBatch};
use msdc_core::simulator::{
    aggregate, simulate_appliance, verify_corollary, verify_fact1, verify_theorem1, AggregationNoiseSpec,
    ApplianceFsm, BaseLoad, TimeGrid, VarianceExperimentSpec,
};
use msdc_core::states::{extract_state_model, ExtractionConfig};
use msdc_core::train::{split_dataset, train, ApplianceData, SplitRatios, TrainConfig, WindowConfig};
use msdc_core::Error;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn(&mut Shared) -> Outcome); 11] = [
        (1, "gradient check", c1_gradients),
        (2, "CRF vs brute force", c2_crf_oracle),
        (3, "emission shift invariance", c3_shift_invariance),
        (4, "mean-shift recovery", c4_mean_shift),
        (5, "theory verification", c5_theory),
        (6, "end-to-end synthetic", c6_end_to_end),
        (7, "multi-state advantage", c7_multi_state),
        (8, "CRF advantage", c8_crf),
        (9, "metrics", c9_metrics),
        (10, "data round trip", c10_data),
        (11, "determinism", c11_determinism),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let o = f(&mut shared);
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:>2} [{verdict}] {name}: {} ({:.1} s)",
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        if std::env::var_os("MSDC_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}

/// Artifacts from criteria 6 to 8 that criterion 11 reruns and compares.
#[derive(Default)]
struct Shared {
    runs: BTreeMap<&'static str, (Scenario, String, metrics::MetricsReport)>,
}

// ---------------------------------------------------------------- 1

fn tiny_net(seed: u64) -> DualCnn {
    let arch = Architecture {
        input_len: 16,
        output_len: 4,
        num_states: 3,
        network: NetworkConfig {
            conv_channels: vec![3, 3, 4, 5, 5, 5],
            conv_kernels: vec![5, 4, 3, 3, 3, 3],
            hidden: 16,
        },
    };
    let mut net = DualCnn::new(arch, 4.0, seed).unwrap();
    // Random draws everywhere, biases included, so no ReLU input sits
    // exactly on the kink where the derivative is undefined.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in net.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    net
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> WindowBatch {
    let mut b = WindowBatch::default();
    for i in 0..n {
        b.centers.push(i);
        b.inputs.push((0..16).map(|_| rng.gen_range(-2.0..2.0)).collect());
        b.target_power.push((0..4).map(|_| rng.gen_range(0.0..5.0)).collect());
        b.target_states.push((0..4).map(|_| rng.gen_range(0..3)).collect());
    }
    b
}

fn random_crf(rng: &mut ChaCha8Rng, m: usize) -> CrfParams {
    let mut c = CrfParams::zeros(m);
    for t in c.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    c
}

fn objective(crf: Option<&CrfParams>, emission: EmissionMode) -> Objective<'_> {
    match crf {
        Some(crf) => Objective::MsdcCrf { crf, emission },
        None => Objective::Msdc,
    }
}

/// On/off pattern of every ReLU in both networks over the batch.
fn relu_pattern(net: &DualCnn, batch: &WindowBatch) -> Vec<bool> {
    let mut out = Vec::new();
    for x in &batch.inputs {
        for cnn in [&net.state_net, &net.power_net] {
            let trace = cnn.forward_trace(x);
            // skip the raw input and the linear output
            for act in &trace.acts[1..trace.acts.len() - 1] {
                out.extend(act.iter().map(|&a| a > 0.0));
            }
        }
    }
    out
}

struct GradCheck {
    worst: f64,
    /// Parameters whose +-h step flipped a ReLU and needed a smaller step.
    shrunk: usize,
}

/// Central differences at `h = 1e-4`. When the +-h perturbation moves a
/// ReLU across its kink the loss is not differentiable on that interval,
/// so the step is halved until both sides keep the base activation pattern.
fn check_gradients(net: &DualCnn, crf: Option<&CrfParams>, batch: &WindowBatch, emission: EmissionMode) -> GradCheck {
    let grads = backward(net, batch, objective(crf, emission)).unwrap().grads;
    let loss = |n: &DualCnn, c: Option<&CrfParams>| evaluate_loss(n, batch, objective(c, emission)).unwrap().total();
    let base = relu_pattern(net, batch);
    let n_net = net.tensors().len();
    let mut out = GradCheck { worst: 0.0, shrunk: 0 };
    for (k, g) in grads.tensors().iter().enumerate() {
        for i in 0..g.len() {
            let mut h = 1e-4;
            let fd = if k < n_net {
                loop {
                    let (mut p, mut m) = (net.clone(), net.clone());
                    p.tensors_mut()[k][i] += h;
                    m.tensors_mut()[k][i] -= h;
                    if (relu_pattern(&p, batch) == base && relu_pattern(&m, batch) == base) || h < 1e-9 {
                        break (loss(&p, crf) - loss(&m, crf)) / (2.0 * h);
                    }
                    h /= 2.0;
                }
            } else {
                let (mut p, mut m) = (crf.unwrap().clone(), crf.unwrap().clone());
                p.tensors_mut()[k - n_net][i] += h;
                m.tensors_mut()[k - n_net][i] -= h;
                (loss(net, Some(&p)) - loss(net, Some(&m))) / (2.0 * h)
            };
            if h < 1e-4 {
                out.shrunk += 1;
            }
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            out.worst = out.worst.max(rel);
        }
    }
    out
}

fn c1_gradients(_: &mut Shared) -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = tiny_net(1);
    let batch = random_batch(&mut rng, 4);
    let crf = random_crf(&mut rng, 3);
    let runs = [
        check_gradients(&net, None, &batch, EmissionMode::LogProb),
        check_gradients(&net, Some(&crf), &batch, EmissionMode::LogProb),
        check_gradients(&net, Some(&crf), &batch, EmissionMode::Prob),
    ];
    let secs = t.elapsed().as_secs_f64();
    let worst = runs.iter().map(|r| r.worst).fold(0.0, f64::max);
    let params = net.tensors().iter().map(|t| t.len()).sum::<usize>();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!(
            "max rel error MSDC {:.2e}, MSDC-CRF {:.2e} (log-prob) / {:.2e} (prob); h 1e-4, shrunk at ReLU kinks for {}/{}/{} of {params} net params",
            runs[0].worst, runs[1].worst, runs[2].worst, runs[0].shrunk, runs[1].shrunk, runs[2].shrunk
        ),
    )
}

// ---------------------------------------------------------------- 2, 3

struct CrfFixture {
    m: usize,
    q: usize,
    emissions: Vec<f64>,
    crf: CrfParams,
    labels: Vec<usize>,
}

fn crf_fixture(rng: &mut ChaCha8Rng) -> CrfFixture {
    let m = rng.gen_range(1..=4);
    let q = rng.gen_range(1..=6);
    CrfFixture {
        m,
        q,
        emissions: (0..m * q).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        crf: random_crf(rng, m),
        labels: (0..q).map(|_| rng.gen_range(0..m)).collect(),
    }
}

/// All `m^q` label sequences in lexicographic order.
fn all_paths(m: usize, q: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut path = vec![0; q];
    loop {
        out.push(path.clone());
        let mut i = q;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            path[i] += 1;
            if path[i] < m {
                break;
            }
            path[i] = 0;
        }
    }
}

/// Independent path score: start + emissions + transitions + stop.
fn brute_score(f: &CrfFixture, path: &[usize]) -> f64 {
    let m = f.m;
    let mut s = f.crf.start[path[0]] + f.crf.stop[path[f.q - 1]];
    for t in 0..f.q {
        s += f.emissions[t * m + path[t]];
        if t > 0 {
            s += f.crf.transition[path[t - 1] * m + path[t]];
        }
    }
    s
}

fn c2_crf_oracle(_: &mut Shared) -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_z: f64 = 0.0;
    let mut path_mismatch = 0;
    for _ in 0..100 {
        let f = crf_fixture(&mut rng);
        let paths = all_paths(f.m, f.q);
        let scores: Vec<f64> = paths.iter().map(|p| brute_score(&f, p)).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let brute_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        worst_z = worst_z.max((log_partition(&f.emissions, &f.crf).unwrap() - brute_z).abs());
        // first maximum in lexicographic order = lowest-index tie rule
        let best = scores
            .iter()
            .enumerate()
            .fold(0, |b, (i, s)| if *s > scores[b] { i } else { b });
        if viterbi(&f.emissions, &f.crf).unwrap().0 != paths[best] {
            path_mismatch += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst_z < 1e-8 && path_mismatch == 0 && secs < 30.0,
        format!("100 fixtures: max |dlogZ| {worst_z:.2e}, Viterbi mismatches {path_mismatch}"),
    )
}

fn c3_shift_invariance(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut score_check: f64 = 0.0;
    for _ in 0..50 {
        let f = crf_fixture(&mut rng);
        let base = loss_crf(&f.emissions, &f.crf, &f.labels).unwrap();
        // one constant per timestep, added to every state's emission
        let shifts: Vec<f64> = (0..f.q).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let shifted: Vec<f64> = f
            .emissions
            .iter()
            .enumerate()
            .map(|(i, e)| e + shifts[i / f.m])
            .collect();
        worst = worst.max((loss_crf(&shifted, &f.crf, &f.labels).unwrap() - base).abs());
        score_check = score_check.max((sequence_score(&f.emissions, &f.crf, &f.labels).unwrap()
            - brute_score(&f, &f.labels))
        .abs());
    }
    outcome(
        worst < 1e-9 && score_check < 1e-12,
        format!("50 fixtures: max |dJ_CRF| {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- 4

fn c4_mean_shift(_: &mut Shared) -> Outcome {
    let levels = [0.0, 200.0, 1100.0];
    let sigmas = [1.0, 2.0, 5.0];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut values = Vec::new();
    let mut truth = Vec::new();
    for (s, (&mu, &sd)) in levels.iter().zip(&sigmas).enumerate() {
        let d = Normal::new(mu, sd).unwrap();
        for _ in 0..300 {
            values.push(d.sample(&mut rng));
            truth.push(s);
        }
    }
    let cfg = ExtractionConfig {
        bandwidth: Some(50.0),
        ..ExtractionConfig::default()
    };
    let (model, seq) = extract_state_model("planted", &values, &cfg).unwrap();
    let (again, seq2) = extract_state_model("planted", &values, &cfg).unwrap();
    let deterministic = model == again && seq == seq2;
    if model.num_states() != 3 {
        return outcome(false, format!("found M={} centers {:?}", model.num_states(), model.centers));
    }
    let worst = model
        .centers
        .iter()
        .zip(levels)
        .map(|(c, l)| (c - l).abs())
        .fold(0.0, f64::max);
    let correct = seq.labels().iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64;
    outcome(
        worst < 2.0 && correct >= 0.99 && deterministic,
        format!(
            "M=3, centers [{:.2}, {:.2}, {:.2}], max center error {worst:.3} W, labels {:.2}% correct, deterministic {deterministic}",
            model.centers[0],
            model.centers[1],
            model.centers[2],
            100.0 * correct
        ),
    )
}

// ---------------------------------------------------------------- 5

fn phi(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn c5_theory(_: &mut Shared) -> Outcome {
    let t = Instant::now();
    let spec = VarianceExperimentSpec {
        probs: vec![1.0 / 3.0; 3],
        means: vec![0.0, 200.0, 1100.0],
        stds: vec![12.0; 3],
        sigma: Some(12.0),
        samples: 100_000,
        seed: 5,
    };
    let fact = verify_fact1(&spec).unwrap();
    let thm = verify_theorem1(&spec).unwrap();
    let cor = verify_corollary(&spec, 5.0).unwrap();
    let secs = t.elapsed().as_secs_f64();

    // closed forms, computed here rather than taken from the library
    let sum_p2: f64 = spec.probs.iter().map(|p| p * p).sum();
    let p_multi = 2.0 * phi(5.0 / (12.0 / 3f64.sqrt())) - 1.0;
    let p_single = 2.0 * phi(5.0 / 12.0) - 1.0;
    let published = (p_multi - 0.530).abs() < 1e-3 && (p_single - 0.323).abs() < 1e-3;

    let mean_diff = (thm.mean_multi - thm.mean_single).abs();
    let ratio_err = (thm.ratio_empirical - sum_p2).abs() / sum_p2;
    let probs_ok = (cor.prob_multi - 0.530).abs() < 0.02
        && (cor.prob_single - 0.323).abs() < 0.02
        && cor.prob_multi > cor.prob_single;
    outcome(
        mean_diff < 0.5 && ratio_err < 0.05 && probs_ok && published && fact.pass && thm.pass && secs < 10.0,
        format!(
            "|dE| {mean_diff:.3} W, variance ratio {:.4} vs {sum_p2:.4} ({:.1}% off), P_multi {:.4} (closed form {p_multi:.4}), P_single {:.4} (closed form {p_single:.4}), Fact 1 {}",
            thm.ratio_empirical,
            100.0 * ratio_err,
            cor.prob_multi,
            cor.prob_single,
            if fact.pass { "ok" } else { "failed" }
        ),
    )
}

// ---------------------------------------------------------------- 6 to 8, 11

#[derive(Clone)]
struct Scenario {
    target: ApplianceFsm,
    others: Vec<ApplianceFsm>,
    len: usize,
    data_seed: u64,
    train: TrainConfig,
    ablation: Option<f64>,
}

struct RunResult {
    checkpoint: String,
    metrics: metrics::MetricsReport,
    num_states: usize,
    epochs: usize,
}

fn washer() -> ApplianceFsm {
    ApplianceFsm {
        name: "washer".into(),
        means: vec![0.0, 200.0, 1100.0],
        stds: vec![1.0, 3.0, 5.0],
        transition: vec![
            vec![0.995, 0.005, 0.0],
            vec![0.0, 0.98, 0.02],
            vec![0.03, 0.0, 0.97],
        ],
        initial: None,
    }
}

fn fridge() -> ApplianceFsm {
    ApplianceFsm {
        name: "fridge".into(),
        means: vec![0.0, 400.0],
        stds: vec![1.0, 4.0],
        transition: vec![vec![0.99, 0.01], vec![0.02, 0.98]],
        initial: None,
    }
}

/// Strictly ordered cycle 0 -> 1 -> 2 -> 0.
fn cyclic() -> ApplianceFsm {
    ApplianceFsm {
        name: "cycler".into(),
        means: vec![0.0, 300.0, 700.0],
        stds: vec![2.0, 5.0, 5.0],
        transition: vec![
            vec![0.97, 0.03, 0.0],
            vec![0.0, 0.97, 0.03],
            vec![0.03, 0.0, 0.97],
        ],
        initial: None,
    }
}

fn small_network() -> NetworkConfig {
    NetworkConfig {
        conv_channels: vec![8, 8, 8, 8, 8, 8],
        conv_kernels: vec![10, 8, 6, 5, 5, 5],
        hidden: 64,
    }
}

/// Simulate, extract states on the training split, train, and score the
/// test split against the simulator's ground truth.
fn run_scenario(s: &Scenario) -> RunResult {
    let grid = TimeGrid::default();
    let (y, truth) = simulate_appliance(&s.target, grid, s.len, s.data_seed).unwrap();
    let mut parts = vec![y.clone()];
    for (i, o) in s.others.iter().enumerate() {
        parts.push(simulate_appliance(o, grid, s.len, s.data_seed + 10 + i as u64).unwrap().0);
    }
    let noise = AggregationNoiseSpec {
        base_load: BaseLoad::Constant { watts: 30.0 },
        noise_std: 5.0,
    };
    let x = aggregate(&parts, &noise, s.data_seed + 99).unwrap();

    let mut data = ApplianceData::extract(
        s.target.name.clone(),
        x,
        y,
        &ExtractionConfig::default(),
        &s.train.split,
    )
    .unwrap();
    if let Some(threshold) = s.ablation {
        let (model, seq) = AblationSpec::single_state(threshold)
            .apply(&data.state_model, &data.states)
            .unwrap();
        data = ApplianceData::new(data.name.clone(), data.aggregate, data.appliance, seq, model).unwrap();
    }
    let out = train(&data, &s.train, None).unwrap();

    let [_, _, test] = split_dataset(s.len, &s.train.split).unwrap();
    let pred = out.model.predict(&data.aggregate.values()[test.clone()]).unwrap();
    let truth_power = &data.appliance.values()[test.clone()];
    // ground truth labels, binarized for the single-state model
    let truth_states: Vec<usize> = truth.labels()[test]
        .iter()
        .map(|&l| if s.ablation.is_some() { usize::from(l > 0) } else { l })
        .collect();
    let period = DEFAULT_PERIOD_SAMPLES.min(truth_power.len());
    RunResult {
        checkpoint: checkpoint::to_json(&out.model).unwrap(),
        metrics: metrics::evaluate(&pred.power, truth_power, &pred.states, &truth_states, period).unwrap(),
        num_states: data.state_model.num_states(),
        epochs: out.report.epochs.len(),
    }
}

fn on_power_mean(fsm: &ApplianceFsm, len: usize, seed: u64, ratios: &SplitRatios) -> f64 {
    let (y, labels) = simulate_appliance(fsm, TimeGrid::default(), len, seed).unwrap();
    let [_, _, test] = split_dataset(len, ratios).unwrap();
    let on: Vec<f64> = test
        .filter(|&t| labels.labels()[t] > 0)
        .map(|t| y.values()[t])
        .collect();
    on.iter().sum::<f64>() / on.len() as f64
}

fn scenario_6() -> Scenario {
    Scenario {
        target: washer(),
        others: vec![fridge()],
        len: 200_000,
        data_seed: 600,
        train: TrainConfig {
            loss: LossKind::Msdc,
            window: WindowConfig {
                input_len: 200,
                output_len: 32,
                train_stride: Some(32),
                inference_stride: None,
            },
            network: small_network(),
            max_epochs: 30,
            patience: 5,
            seed: 6,
            ..TrainConfig::default()
        },
        ablation: None,
    }
}

fn c6_end_to_end(shared: &mut Shared) -> Outcome {
    let s = scenario_6();
    let r = run_scenario(&s);
    let on_mean = on_power_mean(&s.target, s.len, s.data_seed, &s.train.split);
    let bound = 0.1 * on_mean;
    let m = &r.metrics;
    let pass = r.num_states == 3 && m.mae <= bound && m.state_accuracy >= 0.9;
    let detail = format!(
        "M={}, {} epochs, test MAE {:.2} W (bound {bound:.2} W = 10% of on-power mean {on_mean:.1} W), state accuracy {:.2}%, SAE {:.4}",
        r.num_states,
        r.epochs,
        m.mae,
        100.0 * m.state_accuracy,
        m.sae
    );
    shared.runs.insert("6", (s, r.checkpoint, r.metrics));
    outcome(pass, detail)
}

fn small_scenario(target: ApplianceFsm, seed: u64, loss: LossKind) -> Scenario {
    Scenario {
        target,
        others: vec![fridge()],
        len: 40_000,
        data_seed: 700 + seed,
        train: TrainConfig {
            loss,
            window: WindowConfig {
                input_len: 64,
                output_len: 16,
                train_stride: Some(16),
                inference_stride: None,
            },
            network: small_network(),
            max_epochs: 20,
            patience: 5,
            seed,
            ..TrainConfig::default()
        },
        ablation: None,
    }
}

/// The criterion 6 setup with its own data and initialization seed.
fn full_scale(seed: u64) -> Scenario {
    let mut s = scenario_6();
    s.data_seed = 700 + seed;
    s.train.seed = seed;
    s
}

fn c7_multi_state(shared: &mut Shared) -> Outcome {
    let mut multi = Vec::new();
    let mut single = Vec::new();
    for seed in 0..5 {
        let s = full_scale(seed);
        let a = run_scenario(&s);
        let ablated = Scenario {
            ablation: Some(50.0),
            ..s.clone()
        };
        let b = run_scenario(&ablated);
        if seed == 0 {
            shared.runs.insert("7-multi", (s, a.checkpoint.clone(), a.metrics));
            shared.runs.insert("7-single", (ablated, b.checkpoint.clone(), b.metrics));
        }
        multi.push(a.metrics.mae);
        single.push(b.metrics.mae);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let test = sign_test(&multi, &single).unwrap();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", ");
    outcome(
        mean(&multi) < mean(&single) && test.p_value < 0.1,
        format!(
            "test MAE M=3 [{}] mean {:.2} W vs M=2 [{}] mean {:.2} W; sign test {}/{} wins, p = {:.4}",
            fmt(&multi),
            mean(&multi),
            fmt(&single),
            mean(&single),
            test.wins,
            test.wins + test.losses,
            test.p_value
        ),
    )
}

fn c8_crf(shared: &mut Shared) -> Outcome {
    let mut msdc = Vec::new();
    let mut crf = Vec::new();
    for seed in 0..5 {
        let a_s = small_scenario(cyclic(), seed, LossKind::Msdc);
        let b_s = small_scenario(cyclic(), seed, LossKind::MsdcCrf);
        let a = run_scenario(&a_s);
        let b = run_scenario(&b_s);
        if seed == 0 {
            shared.runs.insert("8-msdc", (a_s, a.checkpoint.clone(), a.metrics));
            shared.runs.insert("8-crf", (b_s, b.checkpoint.clone(), b.metrics));
        }
        msdc.push(a.metrics.state_accuracy);
        crf.push(b.metrics.state_accuracy);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{:.2}", 100.0 * x)).collect::<Vec<_>>().join(", ");
    outcome(
        mean(&crf) >= mean(&msdc),
        format!(
            "state accuracy MSDC-CRF [{}] mean {:.2}% vs MSDC [{}] mean {:.2}%",
            fmt(&crf),
            100.0 * mean(&crf),
            fmt(&msdc),
            100.0 * mean(&msdc)
        ),
    )
}

fn c11_determinism(shared: &mut Shared) -> Outcome {
    if shared.runs.is_empty() {
        // run standalone: produce first-seed artifacts for 6 to 8
        let mut scenarios = vec![("6", scenario_6())];
        scenarios.push(("7-multi", full_scale(0)));
        scenarios.push((
            "7-single",
            Scenario {
                ablation: Some(50.0),
                ..full_scale(0)
            },
        ));
        scenarios.push(("8-msdc", small_scenario(cyclic(), 0, LossKind::Msdc)));
        scenarios.push(("8-crf", small_scenario(cyclic(), 0, LossKind::MsdcCrf)));
        for (k, s) in scenarios {
            let r = run_scenario(&s);
            shared.runs.insert(k, (s, r.checkpoint, r.metrics));
        }
    }
    let mut mismatched = Vec::new();
    for (k, (s, ckpt, m)) in &shared.runs {
        let r = run_scenario(s);
        if &r.checkpoint != ckpt || &r.metrics != m {
            mismatched.push(*k);
        }
    }
    let names: Vec<&str> = shared.runs.keys().copied().collect();
    outcome(
        mismatched.is_empty(),
        format!(
            "reran [{}] with the same seeds; checkpoint or metric mismatches: {:?}",
            names.join(", "),
            mismatched
        ),
    )
}

// ---------------------------------------------------------------- 9

fn c9_metrics(_: &mut Shared) -> Outcome {
    let checks = [
        metrics::mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap() == 0.0,
        metrics::mae(&[3.0, 5.0], &[0.0, 0.0]).unwrap() == 4.0,
        metrics::mae(&[12.0, 18.0, 33.0], &[10.0, 20.0, 30.0]).unwrap() == 7.0 / 3.0,
        metrics::sae(&[50.0, 50.0], &[40.0, 60.0]).unwrap() == 0.0,
        (metrics::sae(&[110.0], &[100.0]).unwrap() - 0.1).abs() < 1e-15,
        (metrics::sae(&[80.0], &[100.0]).unwrap() - 0.2).abs() < 1e-15,
        matches!(metrics::sae(&[1.0], &[0.0]), Err(Error::DegenerateSeries(_))),
        metrics::sae_delta(&[1.0; 4], &[1.0; 4], 2).unwrap() == 0.0,
        metrics::sae_delta(&[2.0, 2.0, 1.0, 1.0], &[1.0; 4], 2).unwrap() == 0.5,
        metrics::state_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap() == 1.0,
        metrics::state_accuracy(&[1, 1], &[0, 0]).unwrap() == 0.0,
        metrics::state_accuracy(&[0, 1, 1], &[0, 1, 2]).unwrap() == 2.0 / 3.0,
        DEFAULT_PERIOD_SAMPLES == 1200,
    ];
    // one hour of 3 s samples with a constant 10 W over-estimate
    let truth = vec![100.0; 2400];
    let pred = vec![110.0; 2400];
    let hourly = metrics::sae_delta(&pred, &truth, DEFAULT_PERIOD_SAMPLES).unwrap() == 10.0;
    let passed = checks.iter().filter(|&&c| c).count() + usize::from(hourly);
    outcome(
        passed == checks.len() + 1,
        format!("{passed}/{} metric examples exact; N_delta = {DEFAULT_PERIOD_SAMPLES}", checks.len() + 1),
    )
}

// ---------------------------------------------------------------- 10

fn c10_data(_: &mut Shared) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let len = 5000;
    let grid = TimeGrid::default();
    let (a, _) = simulate_appliance(&washer(), grid, len, 10).unwrap();
    let (b, _) = simulate_appliance(&fridge(), grid, len, 11).unwrap();
    let x = aggregate(&[a.clone(), b.clone()], &AggregationNoiseSpec::default(), 12).unwrap();
    let channels = vec![("washing machine".to_string(), a), ("fridge".to_string(), b)];
    export_house(dir.path(), "1", &x, &channels).unwrap();
    let names: Vec<String> = channels.iter().map(|(n, _)| n.clone()).collect();
    let loaded = load_house(dir.path(), "1", &names, &LoadOptions::default()).unwrap();
    let identical = loaded.mains == x && channels.iter().all(|(n, s)| loaded.channels[n] == *s);

    // export(load(export(bundle))) again
    let again_dir = tempfile::tempdir().unwrap();
    let re: Vec<(String, PowerSeries)> = names.iter().map(|n| (n.clone(), loaded.channels[n].clone())).collect();
    export_house(again_dir.path(), "1", &loaded.mains, &re).unwrap();
    let byte_identical = (1..=3).all(|k| {
        let f = format!("house_1/channel_{k}.dat");
        std::fs::read(dir.path().join(&f)).unwrap() == std::fs::read(again_dir.path().join(&f)).unwrap()
    });

    let mut body: String = (0..99).map(|i| format!("{} {}.5\n", 1_300_000_000 + 3 * i, i)).collect();
    body.push_str("abc 41.2\n");
    let ok_path = dir.path().join("one_percent.dat");
    std::fs::write(&ok_path, &body).unwrap();
    let one_pct = parse_channel_file(&ok_path).map(|d| d.malformed == 1 && d.samples.len() == 99);
    body.push_str("1300000999 4x\n");
    let bad_path = dir.path().join("two_percent.dat");
    std::fs::write(&bad_path, &body).unwrap();
    let two_pct = parse_channel_file(&bad_path);
    let malformed_ok = matches!(one_pct, Ok(true)) && matches!(two_pct, Err(Error::MalformedLines { .. }));

    outcome(
        identical && byte_identical && malformed_ok,
        format!(
            "values identical after export+load: {identical}; re-export byte-identical: {byte_identical}; 1% malformed loads, 2% fails: {malformed_ok}"
        ),
    )
}
